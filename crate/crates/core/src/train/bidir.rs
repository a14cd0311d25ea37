use rand::seq::SliceRandom;

use super::{best_epoch, score, validate_data, EpochLog, LabeledSet, OptimizerState, TrainConfig};
use crate::corpus::{EncodedSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::math::{rng_from_seed, Rng};
use crate::model::{combine_bidirectional, tag_bidirectional, Direction, Dropout, Grads, ModelParams, StepCache, TaggerOutput};
use crate::par;

#[derive(Clone, Debug)]
pub struct BidirRun {
    pub fwd: ModelParams,
    pub bwd: ModelParams,
    /// Row 0 scores the untouched pair; row k the pair after epoch k.
    pub log: Vec<EpochLog>,
    pub best: usize,
}

/// Teacher-forced caches in processing order.
fn teacher_caches(model: &ModelParams, seq: &EncodedSequence, dropout: Option<(f64, f64, &mut Rng)>) -> Result<Vec<StepCache>> {
    let o = model.orient(seq);
    let gold = o.seq.labels.clone();
    let mut caches: Vec<StepCache> = Vec::with_capacity(gold.len());
    let mut dropout = dropout;
    for t in 0..gold.len() {
        let state = caches.last().and_then(|c| c.state());
        let cache = match dropout.as_mut() {
            Some((ke, kh, rng)) => {
                let mut d = Dropout {
                    keep_embed: *ke,
                    keep_hidden: *kh,
                    rng: &mut **rng,
                };
                model.step_forward(&o, t, &gold, state, Some(&mut d))?
            }
            None => model.step_forward(&o, t, &gold, state, None)?,
        };
        caches.push(cache);
    }
    Ok(caches)
}

/// Combined distributions (sentence order) and the gradient at each
/// branch's logits, `0.5 · (y_combined − onehot)`, in that branch's
/// processing order. Returns the summed cross-entropy too.
fn combined_gradients(fc: &[StepCache], bc: &[StepCache], gold: &[usize]) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = gold.len();
    let mut loss = 0.0;
    let mut df = Vec::with_capacity(n);
    let mut db = vec![Vec::new(); n];
    for t in 0..n {
        let y = combine_bidirectional(&fc[t].y, &bc[n - 1 - t].y)?;
        loss -= y[gold[t]].ln();
        let mut d: Vec<f64> = y.iter().map(|v| 0.5 * v).collect();
        d[gold[t]] -= 0.5;
        db[n - 1 - t] = d.clone();
        df.push(d);
    }
    Ok((loss, df, db))
}

fn backprop(model: &ModelParams, caches: &[StepCache], dlogits: &[Vec<f64>], bptt: bool, grads: &mut Grads) -> Result<()> {
    let mut carry: Option<Vec<f64>> = None;
    for t in (0..caches.len()).rev() {
        let d_prev = model.step_backward(&caches[t], &dlogits[t], carry.as_deref(), grads)?;
        carry = if bptt { d_prev } else { None };
    }
    Ok(())
}

fn check_pair(fwd: &ModelParams, bwd: &ModelParams) -> Result<()> {
    if fwd.spec.direction != Direction::Forward || bwd.spec.direction != Direction::Backward {
        return Err(Error::config("bidirectional training needs a forward and a backward model"));
    }
    if fwd.vocab_hash != bwd.vocab_hash || fwd.spec.n_labels != bwd.spec.n_labels {
        return Err(Error::config("forward and backward models use different vocabularies"));
    }
    Ok(())
}

/// Teacher-forced cross-entropy of the combined output, no dropout.
pub fn bidirectional_loss(fwd: &ModelParams, bwd: &ModelParams, seq: &EncodedSequence) -> Result<f64> {
    check_pair(fwd, bwd)?;
    let (fc, bc) = (teacher_caches(fwd, seq, None)?, teacher_caches(bwd, seq, None)?);
    Ok(combined_gradients(&fc, &bc, &seq.labels)?.0)
}

/// Exact gradient of [`bidirectional_loss`] for both models.
pub fn bidirectional_gradient(
    fwd: &ModelParams,
    bwd: &ModelParams,
    seq: &EncodedSequence,
    gf: &mut Grads,
    gb: &mut Grads,
) -> Result<f64> {
    check_pair(fwd, bwd)?;
    let (fc, bc) = (teacher_caches(fwd, seq, None)?, teacher_caches(bwd, seq, None)?);
    let (loss, df, db) = combined_gradients(&fc, &bc, &seq.labels)?;
    backprop(fwd, &fc, &df, true, gf)?;
    backprop(bwd, &bc, &db, true, gb)?;
    Ok(loss)
}

fn tag_pairs(fwd: &ModelParams, bwd: &ModelParams, seqs: &[EncodedSequence]) -> Result<Vec<TaggerOutput>> {
    par::map(seqs, |s| tag_bidirectional(fwd, bwd, s)).into_iter().collect()
}

/// Joint fine-tuning through the combined output. Each model takes one
/// step per sentence with the mean of its per-position gradients;
/// recurrent state is truncated between positions as in tagger training.
pub fn train_bidirectional(
    fwd: &ModelParams,
    bwd: &ModelParams,
    vocab: &Vocabulary,
    train: &LabeledSet,
    dev: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<BidirRun> {
    validate_data(train, dev)?;
    cfg.validate()?;
    check_pair(fwd, bwd)?;
    fwd.check_vocab(vocab)?;
    let (mut fwd, mut bwd) = (fwd.clone(), bwd.clone());
    let mut rng = rng_from_seed(cfg.seed);
    let new_opt = |m: &ModelParams| {
        let mut o = OptimizerState::new(m, cfg.lr0, cfg.momentum, cfg.lambda_l2_bidir);
        o.l2_embeddings = cfg.l2_embeddings;
        o.max_norm = (cfg.max_grad_norm > 0.0).then_some(cfg.max_grad_norm);
        o.freeze_embeddings = cfg.freeze_embeddings_bidir;
        o
    };
    let (mut of, mut ob) = (new_opt(&fwd), new_opt(&bwd));
    let (mut gf, mut gb) = (Grads::zeros_like(&fwd), Grads::zeros_like(&bwd));
    let keep = (1.0 - cfg.dropout_embed, 1.0 - cfg.dropout_hidden);
    let use_dropout = cfg.dropout_embed > 0.0 || cfg.dropout_hidden > 0.0;

    let mut log = vec![EpochLog {
        epoch: 0,
        lr: 0.0,
        train_loss: None,
        dev: score(dev, &tag_pairs(&fwd, &bwd, &dev.seqs)?, vocab, cfg.scheme)?,
    }];
    let mut best = (0, fwd.clone(), bwd.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let tokens = train.tokens() as f64;
    for epoch in 0..cfg.epochs_bidir {
        let lr = super::lr_at(epoch, cfg.epochs_bidir, cfg.lr0)?;
        of.lr = lr;
        ob.lr = lr;
        of.epoch = epoch;
        ob.epoch = epoch;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let seq = &train.seqs[i];
            let fc = teacher_caches(&fwd, seq, use_dropout.then_some((keep.0, keep.1, &mut rng)))?;
            let bc = teacher_caches(&bwd, seq, use_dropout.then_some((keep.0, keep.1, &mut rng)))?;
            let (loss, df, db) = combined_gradients(&fc, &bc, &seq.labels)?;
            total += loss;
            backprop(&fwd, &fc, &df, false, &mut gf)?;
            backprop(&bwd, &bc, &db, false, &mut gb)?;
            let mean = 1.0 / seq.len() as f64;
            gf.scale(mean);
            gb.scale(mean);
            of.step(&mut fwd, &mut gf)?;
            ob.step(&mut bwd, &mut gb)?;
            gf.clear(&fwd);
            gb.clear(&bwd);
        }
        if !total.is_finite() {
            return Err(Error::config(format!("bidirectional training diverged in epoch {}", epoch + 1)));
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: Some(total / tokens),
            dev: score(dev, &tag_pairs(&fwd, &bwd, &dev.seqs)?, vocab, cfg.scheme)?,
        });
        if best_epoch(&log, cfg.select_by) == Some(log.len() - 1) {
            best = (log.len() - 1, fwd.clone(), bwd.clone());
        }
    }
    let (best, fwd, bwd) = best;
    Ok(BidirRun { fwd, bwd, log, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate_synthetic_corpus, Grammar, SplitSizes};
    use crate::corpus::LabelPolicy;
    use crate::model::Variant;
    use crate::train::{train_tagger, InitEmbeddings};

    fn setup() -> (Vocabulary, LabeledSet, LabeledSet, TrainConfig) {
        let c = generate_synthetic_corpus(&Grammar::builtin(), SplitSizes::from_train(20), &mut rng_from_seed(9)).unwrap();
        let (vocab, _) = Vocabulary::build(&c.train, Default::default()).unwrap();
        let train = LabeledSet::encode(&c.train, &vocab, LabelPolicy::Strict).unwrap();
        let dev = LabeledSet::encode(&c.dev, &vocab, LabelPolicy::Lenient).unwrap();
        let cfg = TrainConfig {
            embed_dim: 8,
            hidden: 10,
            first_level: 6,
            d_w: 1,
            d_l: 2,
            epochs_fwd_bwd: 2,
            epochs_bidir: 2,
            lr0: 0.05,
            ..TrainConfig::default()
        };
        (vocab, train, dev, cfg)
    }

    fn pair(variant: Variant) -> (Vocabulary, LabeledSet, LabeledSet, TrainConfig, ModelParams, ModelParams) {
        let (vocab, train, dev, cfg) = setup();
        let none = InitEmbeddings::default();
        let f = train_tagger(&vocab, &train, &dev, &cfg, variant, Direction::Forward, &none).unwrap().model;
        let b = train_tagger(&vocab, &train, &dev, &cfg, variant, Direction::Backward, &none).unwrap().model;
        (vocab, train, dev, cfg, f, b)
    }

    #[test]
    fn combined_gradient_matches_central_differences() {
        for variant in [Variant::Irnn, Variant::IrnnGru] {
            let (_, train, _, _, f, b) = pair(variant);
            let seq = &train.seqs[0];
            let mut gf = Grads::zeros_like(&f);
            let mut gb = Grads::zeros_like(&b);
            bidirectional_gradient(&f, &b, seq, &mut gf, &mut gb).unwrap();
            let eps = 1e-5;
            let mut worst: f64 = 0.0;
            for (which, grads) in [(0, &gf), (1, &gb)] {
                let model = if which == 0 { &f } else { &b };
                for (k, t) in model.tensors.iter().enumerate() {
                    for i in (0..t.value.len()).step_by(1 + t.value.len() / 40) {
                        let perturbed = |delta: f64| {
                            let mut m = model.clone();
                            m.tensors[k].value.as_mut_slice()[i] += delta;
                            if which == 0 {
                                bidirectional_loss(&m, &b, seq).unwrap()
                            } else {
                                bidirectional_loss(&f, &m, seq).unwrap()
                            }
                        };
                        let numeric = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                        let analytic = grads.tensors[k].as_slice()[i];
                        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4));
                    }
                }
            }
            assert!(worst < 1e-5, "{variant}: {worst}");
        }
    }

    #[test]
    fn zero_rate_keeps_the_pure_combination() {
        let (vocab, train, dev, mut cfg, f, b) = pair(Variant::Irnn);
        cfg.lr0 = 0.0;
        let run = train_bidirectional(&f, &b, &vocab, &train, &dev, &cfg).unwrap();
        assert_eq!(run.fwd, f);
        assert_eq!(run.bwd, b);
        assert!(run.log.iter().all(|l| l.dev == run.log[0].dev));
    }

    #[test]
    fn reruns_match_and_best_row_is_kept() {
        let (vocab, train, dev, cfg, f, b) = pair(Variant::IrnnDeep);
        let r1 = train_bidirectional(&f, &b, &vocab, &train, &dev, &cfg).unwrap();
        let r2 = train_bidirectional(&f, &b, &vocab, &train, &dev, &cfg).unwrap();
        assert_eq!(r1.log, r2.log);
        assert_eq!(r1.fwd, r2.fwd);
        assert_eq!(r1.log.len(), cfg.epochs_bidir + 1);
        let kept = score(&dev, &tag_pairs(&r1.fwd, &r1.bwd, &dev.seqs).unwrap(), &vocab, cfg.scheme).unwrap();
        assert_eq!(kept, r1.log[r1.best].dev);
    }

    #[test]
    fn frozen_embeddings_stay_put() {
        let (vocab, train, dev, mut cfg, f, b) = pair(Variant::Irnn);
        cfg.freeze_embeddings_bidir = true;
        cfg.select_by = crate::train::SelectBy::F1;
        let run = train_bidirectional(&f, &b, &vocab, &train, &dev, &cfg).unwrap();
        assert_eq!(run.fwd.tensor("emb.word"), f.tensor("emb.word"));
        assert_eq!(run.bwd.tensor("emb.label"), b.tensor("emb.label"));
    }

    #[test]
    fn direction_mix_ups_are_rejected() {
        let (vocab, train, dev, cfg, f, b) = pair(Variant::Irnn);
        assert!(train_bidirectional(&b, &f, &vocab, &train, &dev, &cfg).is_err());
        assert!(train_bidirectional(&f, &f, &vocab, &train, &dev, &cfg).is_err());
    }
}
