//! Central finite-difference verification of analytic gradients.

/// Compares the gradient reported by `f` against central differences at
/// `point` and returns the worst relative error over all coordinates.
///
/// `f` maps a flat coordinate vector to (value, gradient). The relative
/// error denominator is floored at 1 so near-zero gradients compare on an
/// absolute scale.
pub fn grad_check<F>(f: F, point: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let (fp, _) = f(&x);
        x[i] = orig - eps;
        let (fm, _) = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
