//! Central finite-difference gradient checking in `f64`.
//!
//! The checker only ever calls the forward pass, so it is independent of the
//! backward rules it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::TensorError;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for [`rel_err`]. Central differences at `FD_STEP` carry
/// roundoff near `1e-10` for O(1) losses, so gradients that are exactly zero
/// (e.g. key biases under softmax shift invariance) would otherwise report
/// spurious relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest per-entry relative error across all inputs.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// [`Graph::kink_distance`] at the unperturbed inputs.
    pub kink_distance: f64,
}

/// Relative error with an absolute floor for entries whose true gradient is ~0.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `f` against central differences with step `h`.
///
/// `f` may return a tensor of any shape; it is reduced to a scalar with fixed
/// random weights so every output element contributes.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |vals: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>, f64), TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
            let shape = g.shape(out).to_vec();
            Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
        });
        if w.shape() != g.shape(out) {
            return Err(TensorError::shape("check_gradients", "output shape changed"));
        }
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).item();
        let grads = if want_grad {
            let gr = g.backward(loss)?;
            vars.iter().zip(vals).map(|(&v, t)| gr.get_or_zeros(v, t.shape())).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads, g.kink_distance()))
    };

    let (_, analytic, kink_distance) = eval(inputs, true)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, kink_distance };
    let mut vals = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let mut probe = |delta: f64, vals: &mut Vec<Tensor<f64>>| -> Result<f64, TensorError> {
                let mut data = t.to_vec();
                data[ei] += delta;
                vals[ti] = Tensor::new(t.shape().to_vec(), data)?;
                Ok(eval(vals, false)?.0)
            };
            let plus = probe(h, &mut vals)?;
            let minus = probe(-h, &mut vals)?;
            vals[ti] = t.clone();
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let e = rel_err(a, numeric, floor);
            if e > report.max_rel_err {
                report = GradCheckReport { max_rel_err: e, worst: (ti, ei), analytic: a, numeric, kink_distance };
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[-scale, scale)`, for building check instances.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}
