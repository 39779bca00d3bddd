//! Central finite-difference comparison for parameter gradients.

use crate::error::Result;
use crate::net::Model;
use crate::tape::Matrix;

/// Gradient norms below this are compared in absolute terms; arrays whose
/// effect cancels exactly (a bias feeding a normalization) have analytic
/// gradients of pure round-off.
pub const FLOOR: f64 = 1e-6;

/// Per-array comparison of analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct ArrayCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, FLOOR)`.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares `analytic` with central differences of `loss` at step `h` for
/// every array in `ids`. Arrays missing from `analytic` count as zero.
pub fn check_gradients(
    model: &Model,
    analytic: &[(usize, Matrix)],
    ids: &[usize],
    h: f64,
    loss: impl Fn(&Model) -> Result<f64>,
) -> Result<Vec<ArrayCheck>> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let shape = model.params().get(id).value.dim();
        let a = analytic
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Matrix::zeros(shape));
        let mut numeric = Matrix::zeros(shape);
        for idx in 0..numeric.len() {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let orig = model.params().get(id).value[[r, c]];
            probe.params_mut().get_mut(id).value[[r, c]] = orig + h;
            let up = loss(&probe)?;
            probe.params_mut().get_mut(id).value[[r, c]] = orig - h;
            let down = loss(&probe)?;
            probe.params_mut().get_mut(id).value[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * h);
        }
        let norm = |m: &Matrix| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = norm(&(&a - &numeric));
        let scale = norm(&a).max(norm(&numeric));
        out.push(ArrayCheck {
            name: model.params().get(id).name.clone(),
            relative_error: diff / scale.max(FLOOR),
            analytic_norm: norm(&a),
        });
    }
    Ok(out)
}

/// Largest relative error over all checked arrays.
pub fn worst(checks: &[ArrayCheck]) -> f64 {
    checks.iter().map(|c| c.relative_error).fold(0.0, f64::max)
}
