//! Central finite differences for gradient verification.

use ndarray::ArrayD;

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `at`, perturbing one entry at a time.
pub fn fd_grad<F>(f: F, at: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::zeros(at.raw_dim());
    let mut x = at.clone();
    for i in 0..at.len() {
        let slot = x.as_slice_mut().expect("contiguous");
        let orig = slot[i];
        slot[i] = orig + h;
        let fp = f(&x);
        let slot = x.as_slice_mut().unwrap();
        slot[i] = orig - h;
        let fm = f(&x);
        let slot = x.as_slice_mut().unwrap();
        slot[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst relative error between analytic and finite-difference gradients.
///
/// Denominator is floored so entries near zero are judged on absolute error.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
