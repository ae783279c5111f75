use crate::error::{Error, Result};
use crate::scheduler::ReductionSchedule;
use crate::tensor::Matrix;

/// Sum `partials` following `schedule`: at each step the receiver adds the
/// sender's tile into its own. The pairing order is fixed, so the result is
/// bit-reproducible no matter how the partials were produced.
pub fn tree_reduce(partials: &[Matrix], schedule: &ReductionSchedule) -> Result<Matrix> {
    let first = partials
        .first()
        .ok_or_else(|| Error::Shape("no partials to reduce".into()))?;
    if partials
        .iter()
        .any(|p| p.shape() != first.shape() || p.fmt() != first.fmt())
    {
        return Err(Error::Shape("partials differ in shape or format".into()));
    }
    if schedule.participants != partials.len() {
        return Err(Error::Schedule(format!(
            "schedule covers {} participants, got {} partials",
            schedule.participants,
            partials.len()
        )));
    }
    schedule.validate()?;
    let mut slots: Vec<Option<Matrix>> = partials.iter().cloned().map(Some).collect();
    for step in &schedule.levels {
        let sender = slots[step.sender].take().ok_or_else(|| {
            Error::Schedule(format!("cluster {} has nothing to send", step.sender))
        })?;
        slots[step.receiver]
            .as_mut()
            .ok_or_else(|| Error::Schedule(format!("cluster {} already sent", step.receiver)))?
            .accumulate(&sender)?;
    }
    slots[0]
        .take()
        .ok_or_else(|| Error::Schedule("root holds no result".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::FloatFormat;
    use crate::scheduler::ReductionStep;

    #[test]
    fn sixteen_ones() {
        let parts = vec![Matrix::from_fn(4, 4, FloatFormat::Fp32, |_, _| 1.0); 16];
        let r = tree_reduce(&parts, &ReductionSchedule::binary(16)).unwrap();
        assert!(r.data().iter().all(|v| *v == 16.0));
    }

    #[test]
    fn two_partials_single_level() {
        let a = Matrix::seeded_random(3, 3, FloatFormat::Fp64, 1, (-1.0, 1.0));
        let b = Matrix::seeded_random(3, 3, FloatFormat::Fp64, 2, (-1.0, 1.0));
        let s = ReductionSchedule::binary(2);
        assert_eq!(s.depth(), 1);
        let r = tree_reduce(&[a.clone(), b.clone()], &s).unwrap();
        for i in 0..9 {
            assert_eq!(r.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn matches_sequential_fold() {
        let parts: Vec<Matrix> = (0..8)
            .map(|s| Matrix::seeded_random(5, 6, FloatFormat::Fp64, s, (-10.0, 10.0)))
            .collect();
        let r = tree_reduce(&parts, &ReductionSchedule::binary(8)).unwrap();
        let mut fold = parts[0].clone();
        for p in &parts[1..] {
            fold.accumulate(p).unwrap();
        }
        assert!(r.max_abs_diff(&fold) <= 1e-13);
        assert_eq!(
            r,
            tree_reduce(&parts, &ReductionSchedule::binary(8)).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Matrix::zeros(2, 2, FloatFormat::Fp64);
        let b = Matrix::zeros(2, 3, FloatFormat::Fp64);
        assert!(tree_reduce(&[a.clone(), b], &ReductionSchedule::binary(2)).is_err());
        assert!(tree_reduce(&[a.clone(), a.clone()], &ReductionSchedule::binary(3)).is_err());
        let bad = ReductionSchedule {
            participants: 2,
            levels: vec![ReductionStep {
                level: 1,
                sender: 0,
                receiver: 1,
            }],
        };
        assert!(tree_reduce(&[a.clone(), a], &bad).is_err());
    }
}
