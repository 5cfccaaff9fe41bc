//! Central-difference gradient verification.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares analytic gradients of every live trainable parameter against
/// central differences and returns the largest
/// `|analytic − numeric| / max(1, |numeric|)`.
///
/// `f` records a scalar on a fresh tape. It must be a pure function of the
/// parameter values; any randomness inside must be reseeded per call.
pub fn grad_check<F>(store: &mut ParamStore, step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&step) {
        return Err(Error::Contract(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
    }
    let first = evaluate(&mut f, store)?;
    let second = evaluate(&mut f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} then {second}"
        )));
    }

    store.zero_gradients();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        tape.backward(out, store)?;
    }

    let mut worst: f64 = 0.0;
    for id in store.trainable_ids() {
        let analytic = store.grad(id).clone();
        for k in 0..analytic.len() {
            let original = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = original + step;
            let plus = evaluate(&mut f, store)?;
            store.get_mut(id).value.data_mut()[k] = original - step;
            let minus = evaluate(&mut f, store)?;
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn evaluate<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    Ok(tape.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::random_normal(3, 2, 1.0, &mut rng), ParamGroup::Other);
        let c = Matrix::random_normal(3, 2, 1.0, &mut rng);
        let err = grad_check(&mut store, 1e-5, |tape, store| {
            let wv = tape.param(store, w);
            let cv = tape.constant(c.clone());
            let p = tape.mul(wv, cv)?;
            Ok(tape.sum_all(p))
        })
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn rejects_nondeterministic_functions() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::ones(1, 1), ParamGroup::Other);
        let calls = Cell::new(0.0);
        let res = grad_check(&mut store, 1e-5, |tape, _| {
            calls.set(calls.get() + 1.0);
            Ok(tape.constant(Matrix::scalar(calls.get())))
        });
        assert!(matches!(res, Err(Error::Oracle(_))));
    }

    #[test]
    fn rejects_out_of_range_step() {
        let mut store = ParamStore::new();
        let res = grad_check(&mut store, 1e-2, |tape, _| Ok(tape.constant(Matrix::scalar(0.0))));
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}
