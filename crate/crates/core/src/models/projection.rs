use ndarray::{Array1, ArrayView1};

/// Minimal ℓ² correction that makes `fhat` satisfy the decrease condition
/// `∇Vᵀ f ≤ −αV` at one state.
///
/// Returns `Δf` such that `fhat − Δf` is the projected derivative:
///
/// `Δf = ∇V · ReLU(∇Vᵀ fhat + αV) / max(‖∇V‖², eps_proj)`
///
/// The residual `∇Vᵀ fhat + αV` does not depend on the input being
/// projected, so the same shift applies to every control at this state.
///
/// ```
/// use coils::models::stability_correction;
/// use ndarray::array;
/// let grad_v = array![0.0, 1.0];
/// let fhat = array![0.0, 2.0];
/// let delta = stability_correction(grad_v.view(), 1.0, fhat.view(), 1.0, 1e-3);
/// assert_eq!(delta, array![0.0, 3.0]);
/// assert_eq!(&fhat - &delta, array![0.0, -1.0]);
/// ```
pub fn stability_correction(grad_v: ArrayView1<f64>, v: f64, fhat: ArrayView1<f64>, alpha: f64, eps_proj: f64) -> Array1<f64> {
    let residual = grad_v.dot(&fhat) + alpha * v;
    if residual <= 0.0 {
        return Array1::zeros(grad_v.len());
    }
    let denom = grad_v.dot(&grad_v).max(eps_proj);
    grad_v.mapv(|g| g * residual / denom)
}

/// Pre-ReLU residual of the decrease condition.
pub fn decrease_residual(grad_v: ArrayView1<f64>, v: f64, f: ArrayView1<f64>, alpha: f64) -> f64 {
    grad_v.dot(&f) + alpha * v
}
