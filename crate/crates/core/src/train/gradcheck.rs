use rand::seq::index::sample;

use crate::corpus::EncodedSequence;
use crate::error::Result;
use crate::math::Rng;
use crate::model::{Grads, ModelParams, ParamKind};

/// Worst relative error found in one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn min_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).min().unwrap_or(0)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-4)`; the floor keeps near-zero gradients
/// from turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares the exact sequence gradient with central differences.
pub fn gradient_check(model: &ModelParams, seq: &EncodedSequence, epsilon: f64, samples: usize, rng: &mut Rng) -> Result<GradCheckReport> {
    gradient_check_with(model, seq, epsilon, samples, rng, |m, s, g| m.sequence_gradient(s, g).map(|_| ()))
}

/// Like [`gradient_check`] with a caller-supplied analytic gradient.
///
/// Up to `samples` coordinates are drawn per tensor. For embedding tables
/// they come from rows the sequence actually reads; the others are zero on
/// both sides and prove nothing.
pub fn gradient_check_with(
    model: &ModelParams,
    seq: &EncodedSequence,
    epsilon: f64,
    samples: usize,
    rng: &mut Rng,
    analytic: impl Fn(&ModelParams, &EncodedSequence, &mut Grads) -> Result<()>,
) -> Result<GradCheckReport> {
    let mut grads = Grads::zeros_like(model);
    analytic(model, seq, &mut grads)?;
    grads.dedup_touched();
    let mut probe = model.clone();
    let mut tensors = Vec::with_capacity(model.tensors.len());
    for (k, t) in model.tensors.iter().enumerate() {
        let cols = t.value.cols();
        let candidates: Vec<usize> = if t.kind == ParamKind::Embedding {
            grads.touched(k).iter().flat_map(|&r| r * cols..(r + 1) * cols).collect()
        } else {
            (0..t.value.len()).collect()
        };
        let picked: Vec<usize> = if candidates.len() <= samples {
            candidates
        } else {
            sample(rng, candidates.len(), samples).into_iter().map(|i| candidates[i]).collect()
        };
        let mut worst: f64 = 0.0;
        for &i in &picked {
            let original = probe.tensors[k].value.as_slice()[i];
            probe.tensors[k].value.as_mut_slice()[i] = original + epsilon;
            let up = probe.sequence_loss(seq)?;
            probe.tensors[k].value.as_mut_slice()[i] = original - epsilon;
            let down = probe.sequence_loss(seq)?;
            probe.tensors[k].value.as_mut_slice()[i] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grads.tensors[k].as_slice()[i], numeric));
        }
        tensors.push(TensorCheck {
            name: t.name.clone(),
            checked: picked.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { tensors })
}
