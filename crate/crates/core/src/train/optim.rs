use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{Grads, ModelParams, ParamKind};

/// Linearly decayed rate: `lr0 · (1 − epoch/total)`, so the last epoch still
/// moves at `lr0/total`.
pub fn lr_at(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::config(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    Ok(lr0 * (1.0 - epoch as f64 / total_epochs as f64))
}

/// `v ← μv − lr(g + λw); w ← w + v`, element-wise.
pub fn momentum_update(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64, lambda: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v - lr * (g + lambda * *w);
        *w += *v;
    }
}

/// `(λ/2) Σ w²` over weight matrices.
pub fn l2_penalty(params: &ModelParams, lambda: f64, include_embeddings: bool) -> f64 {
    0.5 * lambda * params.weight_sum_squares(include_embeddings)
}

/// Per-position objective: `−log y[gold] + (λ/2)|W|²`.
pub fn loss(y: &[f64], gold: usize, params: &ModelParams, lambda: f64) -> f64 {
    -y[gold].ln() + l2_penalty(params, lambda, false)
}

/// Velocity buffers and hyperparameters of momentum SGD.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: Vec<Matrix>,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub epoch: usize,
    /// Embedding tables are decayed too when set.
    pub l2_embeddings: bool,
    /// Rescale gradients whose global norm exceeds this.
    pub max_norm: Option<f64>,
    /// Leave embedding tables untouched.
    pub freeze_embeddings: bool,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64, lambda: f64) -> Self {
        OptimizerState {
            velocity: params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
                .collect(),
            lr,
            momentum,
            lambda,
            epoch: 0,
            l2_embeddings: false,
            max_norm: None,
            freeze_embeddings: false,
        }
    }

    /// One update. Dense tensors are updated everywhere; embedding tables
    /// only on the rows the gradient touched, so untouched rows keep their
    /// velocity until they are next seen.
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut Grads) -> Result<()> {
        if params.tensors.len() != self.velocity.len() || grads.tensors.len() != self.velocity.len() {
            return Err(Error::config("optimizer state built for a different model"));
        }
        if let Some(max) = self.max_norm {
            let n = grads.norm();
            if n > max {
                grads.scale(max / n);
            }
        }
        grads.dedup_touched();
        let (lr, mu) = (self.lr, self.momentum);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            let g = &grads.tensors[i];
            if v.shape() != t.value.shape() {
                return Err(Error::shape("sgd_momentum_step", t.value.shape(), v.shape()));
            }
            if g.shape() != t.value.shape() {
                return Err(Error::shape("sgd_momentum_step", t.value.shape(), g.shape()));
            }
            match t.kind {
                ParamKind::Weight => momentum_update(t.value.as_mut_slice(), v.as_mut_slice(), g.as_slice(), lr, mu, self.lambda),
                ParamKind::Bias => momentum_update(t.value.as_mut_slice(), v.as_mut_slice(), g.as_slice(), lr, mu, 0.0),
                ParamKind::Embedding => {
                    if self.freeze_embeddings {
                        continue;
                    }
                    let lambda = if self.l2_embeddings { self.lambda } else { 0.0 };
                    let g = &grads.tensors[i];
                    for &r in grads.touched(i) {
                        momentum_update(t.value.row_mut(r), v.row_mut(r), g.row(r), lr, mu, lambda);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_schedule() {
        assert_eq!(lr_at(0, 30, 0.5).unwrap(), 0.5);
        assert!((lr_at(29, 30, 0.5).unwrap() - 0.5 / 30.0).abs() < 1e-15);
        assert_eq!(lr_at(15, 30, 0.5).unwrap(), 0.25);
        assert!(lr_at(30, 30, 0.5).is_err());
        assert!((0..30).all(|e| lr_at(e, 30, 0.5).unwrap() > 0.0));
    }

    #[test]
    fn two_momentum_steps_by_hand() {
        let (mut w, mut v) = ([1.0], [0.0]);
        momentum_update(&mut w, &mut v, &[1.0], 0.1, 0.9, 0.0);
        assert!((v[0] + 0.1).abs() < 1e-15 && (w[0] - 0.9).abs() < 1e-15);
        momentum_update(&mut w, &mut v, &[1.0], 0.1, 0.9, 0.0);
        assert!((v[0] + 0.19).abs() < 1e-15 && (w[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd_and_decay_shrinks() {
        let (mut w, mut v) = ([2.0, -3.0], [0.0, 0.0]);
        momentum_update(&mut w, &mut v, &[0.5, 1.0], 0.1, 0.0, 0.0);
        assert_eq!(w, [2.0 - 0.05, -3.0 - 0.1]);
        let (mut w, mut v) = ([2.0, -3.0], [0.0, 0.0]);
        momentum_update(&mut w, &mut v, &[0.0, 0.0], 0.1, 0.0, 0.5);
        assert!(w[0] > 0.0 && w[0] < 2.0 && w[1] < 0.0 && w[1] > -3.0);
    }
}
