//! Finite-difference oracle shared by unit tests.

use crate::tensorcore::Tensor;

/// Central differences of `f` with respect to every entry of `params[which]`.
pub(crate) fn central_difference(
    params: &[Tensor],
    which: usize,
    eps: f64,
    f: impl Fn(&[Tensor]) -> f64,
) -> Vec<f64> {
    let mut work = params.to_vec();
    (0..params[which].len())
        .map(|i| {
            let orig = params[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let up = f(&work);
            work[which].data_mut()[i] = orig - eps;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` over whole gradient blocks.
pub(crate) fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
