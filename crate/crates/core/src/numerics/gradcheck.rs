use super::tensor::Tensor;

/// Largest `|analytic − numeric| / max(1, |analytic|)` over checked coordinates,
/// where `numeric` is the central difference `(f(p+ε) − f(p−ε)) / 2ε`.
///
/// `max_coords` caps how many coordinates per tensor are perturbed; they are
/// spread evenly through the tensor. `None` checks every coordinate.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        let len = work[t].len();
        let count = max_coords.map_or(len, |m| m.min(len));
        let step = (len as f64 / count as f64).max(1.0);
        for c in 0..count {
            let i = ((c as f64 * step) as usize).min(len - 1);
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = f(&work);
            work[t].data_mut()[i] = orig - eps;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = [Tensor::scalar(3.0)];
        let analytic = [Tensor::scalar(6.0)];
        let err = finite_diff_check(|p| p[0].data()[0].powi(2), &p, &analytic, 1e-5, None);
        assert!(err < 1e-6);
    }

    #[test]
    fn constant_function() {
        let p = [Tensor::vector(vec![1.0, -2.0])];
        let analytic = [Tensor::zeros(&[2])];
        assert_eq!(finite_diff_check(|_| 4.0, &p, &analytic, 1e-5, None), 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let p = [Tensor::scalar(3.0)];
        let wrong = [Tensor::scalar(5.0)];
        let err = finite_diff_check(|p| p[0].data()[0].powi(2), &p, &wrong, 1e-5, None);
        assert!(err > 0.1);
    }
}
