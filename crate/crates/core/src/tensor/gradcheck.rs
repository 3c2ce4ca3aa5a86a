//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass on a fresh
//! [`Graph`], so it stays independent of the adjoint code it verifies.

use super::{Graph, Tensor, TensorError, Var};

/// Outcome for one input tensor.
#[derive(Debug, Clone)]
pub struct InputReport {
    pub index: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)`.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.relative_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }
}

/// Norm floor under which a gradient is treated as zero when forming the ratio.
pub const NORM_FLOOR: f64 = 1e-8;

/// Compares tape gradients of `f` with central differences of step `h`.
///
/// Every tensor in `inputs` is treated as a trainable leaf.
/// The closure may use any error type that absorbs [`TensorError`].
pub fn check<F, E>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, E>,
    E: From<TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(&t.clone().with_grad())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.data(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    };

    let eval = |probe: &[Tensor]| -> Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| g.constant(t)).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (index, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = probe[index].data()[e];
            probe[index].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[index].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[index].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        reports.push(compare(index, grad, &numeric));
    }
    Ok(GradCheckReport { inputs: reports })
}

fn compare(index: usize, analytic: &[f64], numeric: &[f64]) -> InputReport {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let (na, nn) = (norm(analytic), norm(numeric));
    InputReport {
        index,
        relative_error: norm(&diff) / na.max(nn).max(NORM_FLOOR),
        max_abs_error: diff.iter().map(|d| d.abs()).fold(0.0, f64::max),
        analytic_norm: na,
    }
}
