use super::{Direction, ModelParams, TaggerOutput};
use crate::corpus::EncodedSequence;
use crate::error::{Error, Result};
use crate::math::argmax;
use crate::par;

/// Element-wise geometric mean `sqrt(yf ⊙ yb)`, renormalized to sum to one.
///
/// If the two distributions share no support the arithmetic mean is used,
/// so the result is always a distribution.
pub fn combine_bidirectional(yf: &[f64], yb: &[f64]) -> Result<Vec<f64>> {
    if yf.len() != yb.len() {
        return Err(Error::shape("combine_bidirectional", (yf.len(), 1), (yb.len(), 1)));
    }
    let mut out: Vec<f64> = yf.iter().zip(yb).map(|(f, b)| (f * b).sqrt()).collect();
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        out.iter_mut().for_each(|v| *v /= z);
    } else {
        let z: f64 = yf.iter().zip(yb).map(|(f, b)| f + b).sum();
        out = yf.iter().zip(yb).map(|(f, b)| (f + b) / z).collect();
    }
    Ok(out)
}

/// Tags with both directions independently and combines per position.
pub fn tag_bidirectional(fwd: &ModelParams, bwd: &ModelParams, seq: &EncodedSequence) -> Result<TaggerOutput> {
    if fwd.spec.direction != Direction::Forward || bwd.spec.direction != Direction::Backward {
        return Err(Error::config("bidirectional tagging needs a forward and a backward model"));
    }
    if fwd.vocab_hash != bwd.vocab_hash || fwd.spec.n_labels != bwd.spec.n_labels {
        return Err(Error::config("forward and backward models use different vocabularies"));
    }
    let (f, b) = par::join(|| fwd.tag_greedy(seq), || bwd.tag_greedy(seq));
    let (f, b) = (f?, b?);
    let dists = f
        .dists
        .iter()
        .zip(&b.dists)
        .map(|(yf, yb)| combine_bidirectional(yf, yb))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaggerOutput {
        labels: dists.iter().map(|d| argmax(d)).collect(),
        dists,
    })
}
