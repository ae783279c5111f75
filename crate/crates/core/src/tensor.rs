//! Row-major matrices whose elements are always representable in their format.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{quantize, FloatFormat};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    fmt: FloatFormat,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub row_offset: usize,
    pub col_offset: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl TileSpec {
    pub fn new(row_offset: usize, col_offset: usize, tile_rows: usize, tile_cols: usize) -> Self {
        TileSpec {
            row_offset,
            col_offset,
            tile_rows,
            tile_cols,
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        self.row_offset + self.tile_rows <= rows && self.col_offset + self.tile_cols <= cols
    }
}

const MAGIC: &[u8; 4] = b"TFM1";

fn format_code(fmt: FloatFormat) -> u32 {
    FloatFormat::ALL.iter().position(|f| *f == fmt).unwrap() as u32
}

impl Matrix {
    /// Build a matrix, rounding every value into `fmt`.
    pub fn materialize(
        rows: usize,
        cols: usize,
        fmt: FloatFormat,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        let data = values.into_iter().map(|v| quantize(v, fmt)).collect();
        Ok(Matrix {
            rows,
            cols,
            fmt,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, fmt: FloatFormat) -> Self {
        Matrix {
            rows,
            cols,
            fmt,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize, fmt: FloatFormat) -> Self {
        let mut m = Matrix::zeros(n, n, fmt);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        fmt: FloatFormat,
        f: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(quantize(f(i, j), fmt));
            }
        }
        Matrix {
            rows,
            cols,
            fmt,
            data,
        }
    }

    /// Deterministic uniform samples in `[lo, hi)`, rounded into `fmt`.
    pub fn seeded_random(
        rows: usize,
        cols: usize,
        fmt: FloatFormat,
        seed: u64,
        range: (f64, f64),
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = range;
        let data = (0..rows * cols)
            .map(|_| quantize(rng.gen_range(lo..hi), fmt))
            .collect();
        Matrix {
            rows,
            cols,
            fmt,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn fmt(&self) -> FloatFormat {
        self.fmt
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn byte_size(&self) -> usize {
        self.rows * self.cols * self.fmt.bytes()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Store `v` after rounding it into the matrix format.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = quantize(v, self.fmt);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Explicit transposed copy.
    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            fmt: self.fmt,
            data,
        }
    }

    /// Re-round into another format.
    pub fn convert(&self, fmt: FloatFormat) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            fmt,
            data: self.data.iter().map(|&v| quantize(v, fmt)).collect(),
        }
    }

    pub fn tile(&self, spec: TileSpec) -> Result<Matrix> {
        if !spec.fits(self.rows, self.cols) {
            return Err(Error::TileOutOfBounds {
                tile: format!("{spec:?}"),
                rows: self.rows,
                cols: self.cols,
            });
        }
        let mut data = Vec::with_capacity(spec.tile_rows * spec.tile_cols);
        for i in spec.row_offset..spec.row_offset + spec.tile_rows {
            let start = i * self.cols + spec.col_offset;
            data.extend_from_slice(&self.data[start..start + spec.tile_cols]);
        }
        Ok(Matrix {
            rows: spec.tile_rows,
            cols: spec.tile_cols,
            fmt: self.fmt,
            data,
        })
    }

    /// Copy `src` into this matrix at `(row, col)`, rounding into this format.
    pub fn write_tile(&mut self, row: usize, col: usize, src: &Matrix) -> Result<()> {
        let spec = TileSpec::new(row, col, src.rows, src.cols);
        if !spec.fits(self.rows, self.cols) {
            return Err(Error::TileOutOfBounds {
                tile: format!("{spec:?}"),
                rows: self.rows,
                cols: self.cols,
            });
        }
        for i in 0..src.rows {
            for j in 0..src.cols {
                self.set(row + i, col + j, src.get(i, j));
            }
        }
        Ok(())
    }

    /// Horizontal concatenation of equally tall matrices.
    pub fn hconcat(parts: &[Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("empty concat".into()))?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows || p.fmt != first.fmt) {
            return Err(Error::Shape(
                "hconcat parts differ in rows or format".into(),
            ));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols, first.fmt);
        let mut c = 0;
        for p in parts {
            out.write_tile(0, c, p)?;
            c += p.cols;
        }
        Ok(out)
    }

    /// Vertical concatenation of equally wide matrices.
    pub fn vconcat(parts: &[Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("empty concat".into()))?;
        if parts
            .iter()
            .any(|p| p.cols != first.cols || p.fmt != first.fmt)
        {
            return Err(Error::Shape(
                "vconcat parts differ in cols or format".into(),
            ));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        Ok(Matrix {
            rows,
            cols: first.cols,
            fmt: first.fmt,
            data,
        })
    }

    /// In-place `self += other`, rounding each sum into this format.
    pub fn accumulate(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "accumulate {:?} += {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let fmt = self.fmt;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = quantize(*a + b, fmt);
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Binary container: "TFM1", rows, cols, format code (u32 LE each),
    /// then rows*cols little-endian f64 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&format_code(self.fmt).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Matrix> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let (rows, cols, code) = (word(4) as usize, word(8) as usize, word(12) as usize);
        let fmt = *FloatFormat::ALL
            .get(code)
            .ok_or_else(|| Error::Format(format!("unknown format code {code}")))?;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            let v = f64::from_le_bytes(buf);
            if quantize(v, fmt) != v && !v.is_nan() {
                return Err(Error::Format(format!(
                    "value {v} not representable in {fmt}"
                )));
            }
            data.push(v);
        }
        Ok(Matrix {
            rows,
            cols,
            fmt,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn materialize_rounds_into_format() {
        let m = Matrix::materialize(1, 1, FloatFormat::Fp8E4M3, vec![0.3]).unwrap();
        assert_eq!(m.get(0, 0), 0.3125);
        let m = Matrix::materialize(2, 2, FloatFormat::Fp64, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
        let m = Matrix::materialize(1, 2, FloatFormat::Fp16, vec![65519.0, 1e9]).unwrap();
        assert_eq!(m.get(0, 0), 65504.0);
        assert_eq!(m.get(0, 1), f64::INFINITY);
        assert!(Matrix::materialize(2, 2, FloatFormat::Fp64, vec![1.0]).is_err());
        assert_eq!(m.byte_size(), 4);
    }

    #[test]
    fn tiles() {
        let m = Matrix::seeded_random(2, 4, FloatFormat::Fp64, 3, (-1.0, 1.0));
        assert_eq!(m.tile(TileSpec::new(0, 0, 2, 4)).unwrap(), m);
        assert_eq!(
            m.tile(TileSpec::new(1, 2, 1, 1)).unwrap().get(0, 0),
            m.get(1, 2)
        );
        let left = m.tile(TileSpec::new(0, 0, 2, 2)).unwrap();
        let right = m.tile(TileSpec::new(0, 2, 2, 2)).unwrap();
        assert_eq!(Matrix::hconcat(&[left, right]).unwrap(), m);
        assert!(m.tile(TileSpec::new(1, 3, 2, 2)).is_err());
    }

    #[test]
    fn seeded_random_is_deterministic() {
        let a = Matrix::seeded_random(8, 8, FloatFormat::Fp32, 42, (-1.0, 1.0));
        let b = Matrix::seeded_random(8, 8, FloatFormat::Fp32, 42, (-1.0, 1.0));
        let c = Matrix::seeded_random(8, 8, FloatFormat::Fp32, 43, (-1.0, 1.0));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let e = Matrix::seeded_random(16, 16, FloatFormat::Fp8E4M3, 1, (-1.0, 1.0));
        let allowed = crate::numerics::enumerate_finite(FloatFormat::Fp8E4M3);
        for v in e.data() {
            assert!(v.abs() <= 1.0);
            assert!(allowed.contains(v));
        }
    }

    #[test]
    fn binary_round_trip_and_rejects_garbage() {
        let m = Matrix::seeded_random(3, 5, FloatFormat::Fp16, 9, (-2.0, 2.0));
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 15 * 8);
        assert_eq!(&buf[..4], b"TFM1");
        assert_eq!(Matrix::read_from(buf.as_slice()).unwrap(), m);
        buf[0] = b'X';
        assert!(Matrix::read_from(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn row_partition_reassembles(rows in 1usize..12, cols in 1usize..12, cut in 0usize..12, seed in 0u64..1000) {
            let m = Matrix::seeded_random(rows, cols, FloatFormat::Bf16, seed, (-3.0, 3.0));
            let cut = cut.min(rows);
            let mut parts = Vec::new();
            if cut > 0 { parts.push(m.tile(TileSpec::new(0, 0, cut, cols)).unwrap()); }
            if cut < rows { parts.push(m.tile(TileSpec::new(cut, 0, rows - cut, cols)).unwrap()); }
            prop_assert_eq!(Matrix::vconcat(&parts).unwrap(), m);
        }
    }
}
