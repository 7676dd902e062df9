use super::{Gradients, ParamStore};

pub const DEFAULT_FD_EPSILON: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
const REL_FLOOR: f64 = 1e-3;

/// Central-difference gradient of `f` with respect to every entry of every
/// parameter in `store`.
///
/// Numerically noisy by nature: truncation error is `O(eps^2)` and rounding
/// error is roughly `machine_eps * |f| / eps`.
pub fn finite_diff_grad<E>(
    f: impl Fn(&ParamStore) -> Result<f64, E>,
    store: &ParamStore,
    epsilon: f64,
) -> Result<Gradients, E> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut grads = Gradients::zeros(store);
    let mut work = store.clone();
    for id in store.ids() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            work.value_mut(id)[k] = orig + epsilon;
            let hi = f(&work)?;
            work.value_mut(id)[k] = orig - epsilon;
            let lo = f(&work)?;
            work.value_mut(id)[k] = orig;
            grads.get_mut(id).data_mut()[k] = (hi - lo) / (2.0 * epsilon);
        }
    }
    Ok(grads)
}

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}
