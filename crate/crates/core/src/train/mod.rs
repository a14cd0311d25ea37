//! Momentum SGD training of taggers, joint bidirectional fine-tuning and
//! gradient checking.

pub mod bidir;
pub mod config;
pub mod gradcheck;
pub mod optim;

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;

pub use bidir::{train_bidirectional, BidirRun};
pub use config::{Granularity, SelectBy, TrainConfig};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use optim::{lr_at, OptimizerState};

use crate::corpus::{decode_labels, encode_all, ChunkScheme, EncodedSequence, LabelPolicy, RawSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval;
use crate::layers::output_backward;
use crate::math::{argmax, rng_from_seed, Matrix, Rng};
use crate::model::{Direction, Dropout, Grads, ModelParams, TaggerOutput, Variant};
use crate::par;

/// Encoded sentences together with their reference label strings.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub seqs: Vec<EncodedSequence>,
    pub gold: Vec<Vec<String>>,
}

impl LabeledSet {
    pub fn encode(sentences: &[RawSentence], vocab: &Vocabulary, policy: LabelPolicy) -> Result<Self> {
        Ok(LabeledSet {
            seqs: encode_all(sentences, vocab, policy)?,
            gold: sentences.iter().map(|s| s.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.seqs.iter().map(EncodedSequence::len).sum()
    }
}

/// Dev scores of one set of predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DevScore {
    pub accuracy: f64,
    pub f1: f64,
}

impl DevScore {
    fn key(&self, by: SelectBy) -> f64 {
        match by {
            SelectBy::Accuracy => self.accuracy,
            SelectBy::F1 => self.f1,
        }
    }
}

/// Scores predictions against a labeled set.
pub fn score(set: &LabeledSet, outputs: &[TaggerOutput], vocab: &Vocabulary, scheme: ChunkScheme) -> Result<DevScore> {
    let pred: Vec<Vec<String>> = outputs.iter().map(|o| decode_labels(&o.labels, vocab)).collect();
    let gold_idx: Vec<Vec<usize>> = set.seqs.iter().map(|s| s.labels.clone()).collect();
    let pred_idx: Vec<Vec<usize>> = outputs.iter().map(|o| o.labels.clone()).collect();
    Ok(DevScore {
        accuracy: eval::token_accuracy(&gold_idx, &pred_idx)?,
        f1: eval::f1_chunks(&set.gold, &pred, scheme)?.f1,
    })
}

/// Greedy tagging of every sentence, in parallel when enabled.
pub fn tag_all(model: &ModelParams, seqs: &[EncodedSequence]) -> Result<Vec<TaggerOutput>> {
    par::map(seqs, |s| model.tag_greedy(s)).into_iter().collect()
}

/// One line of the training log. `train_loss` is the mean per-token
/// cross-entropy of the epoch (absent for the pre-training evaluation row).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub dev: DevScore,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let loss = self.train_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
        write!(
            f,
            "{}\t{:.6}\t{}\t{:.4}\t{:.4}",
            self.epoch, self.lr, loss, self.dev.accuracy, self.dev.f1
        )
    }
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_loss\tdev_acc\tdev_f1";

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for l in log {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    s
}

/// Index of the best row under `by`; the earliest wins ties.
pub fn best_epoch(log: &[EpochLog], by: SelectBy) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, l) in log.iter().enumerate() {
        if best.is_none_or(|b| l.dev.key(by) > log[b].dev.key(by)) {
            best = Some(i);
        }
    }
    best
}

/// Optional starting tables for the word and label embeddings.
#[derive(Clone, Debug, Default)]
pub struct InitEmbeddings {
    pub words: Option<Matrix>,
    pub labels: Option<Matrix>,
}

impl InitEmbeddings {
    fn apply(&self, model: &mut ModelParams) -> Result<()> {
        for (name, table) in [("emb.word", &self.words), ("emb.label", &self.labels)] {
            if let Some(t) = table {
                let dst = model.tensor_mut(name).expect("every variant has word and label tables");
                if dst.shape() != t.shape() {
                    return Err(Error::config(format!(
                        "pretrained {name} is {:?} but the model needs {:?}",
                        t.shape(),
                        dst.shape()
                    )));
                }
                *dst = t.clone();
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// The dev-best snapshot.
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
    /// Index into `log` of the kept snapshot.
    pub best: usize,
}

fn validate_data(train: &LabeledSet, dev: &LabeledSet) -> Result<()> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if dev.is_empty() {
        return Err(Error::config("development set is empty"));
    }
    Ok(())
}

/// One pass of per-position updates over `seq` (sentence order); returns
/// the summed cross-entropy.
fn train_sentence(
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    grads: &mut Grads,
    seq: &EncodedSequence,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let gold: Vec<usize> = match model.spec.direction {
        Direction::Forward => seq.labels.clone(),
        Direction::Backward => seq.labels.iter().rev().copied().collect(),
    };
    let o = model.orient(seq);
    let mut history = Vec::with_capacity(gold.len());
    let mut state: Option<Vec<f64>> = None;
    let mut total = 0.0;
    let use_dropout = cfg.dropout_embed > 0.0 || cfg.dropout_hidden > 0.0;
    for (t, &g) in gold.iter().enumerate() {
        let cache = if use_dropout {
            let mut d = Dropout {
                keep_embed: 1.0 - cfg.dropout_embed,
                keep_hidden: 1.0 - cfg.dropout_hidden,
                rng: &mut *rng,
            };
            model.step_forward(&o, t, &history, state.as_deref(), Some(&mut d))?
        } else {
            model.step_forward(&o, t, &history, state.as_deref(), None)?
        };
        total -= cache.y[g].ln();
        // the state is a constant input to the next step: no gradient crosses positions
        model.step_backward(&cache, &output_backward(&cache.y, g), None, grads)?;
        if cfg.update == Granularity::Position {
            opt.step(model, grads)?;
            grads.clear(model);
        }
        state = cache.state().map(<[f64]>::to_vec);
        let fed = if cfg.scheduled_sampling > 0.0 && rng.gen_bool(cfg.scheduled_sampling) {
            argmax(&cache.y)
        } else {
            g
        };
        history.push(fed);
    }
    if cfg.update == Granularity::Sentence {
        grads.scale(1.0 / gold.len() as f64);
        opt.step(model, grads)?;
        grads.clear(model);
    }
    Ok(total)
}

/// Trains one direction with per-position momentum SGD and keeps the
/// snapshot with the best dev score.
pub fn train_tagger(
    vocab: &Vocabulary,
    train: &LabeledSet,
    dev: &LabeledSet,
    cfg: &TrainConfig,
    variant: Variant,
    direction: Direction,
    init: &InitEmbeddings,
) -> Result<TrainRun> {
    validate_data(train, dev)?;
    let spec = cfg.model_spec(vocab, variant, direction)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut model = ModelParams::new(spec, vocab.hash(), &mut rng)?;
    init.apply(&mut model)?;
    train_from(model, vocab, train, dev, cfg, &mut rng)
}

/// Continues training an existing model with the tagger schedule.
pub fn train_from(
    mut model: ModelParams,
    vocab: &Vocabulary,
    train: &LabeledSet,
    dev: &LabeledSet,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainRun> {
    validate_data(train, dev)?;
    cfg.validate()?;
    model.check_vocab(vocab)?;
    let mut opt = OptimizerState::new(&model, cfg.lr0, cfg.momentum, cfg.lambda_l2);
    opt.l2_embeddings = cfg.l2_embeddings;
    opt.max_norm = (cfg.max_grad_norm > 0.0).then_some(cfg.max_grad_norm);
    let mut grads = Grads::zeros_like(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let tokens = train.tokens() as f64;
    let mut log = Vec::with_capacity(cfg.epochs_fwd_bwd);
    let mut best: Option<(usize, ModelParams)> = None;
    for epoch in 0..cfg.epochs_fwd_bwd {
        opt.epoch = epoch;
        opt.lr = lr_at(epoch, cfg.epochs_fwd_bwd, cfg.lr0)?;
        order.shuffle(rng);
        let mut total = 0.0;
        for &i in &order {
            total += train_sentence(&mut model, &mut opt, &mut grads, &train.seqs[i], cfg, rng)?;
        }
        if !total.is_finite() {
            return Err(Error::config(format!("training diverged in epoch {}", epoch + 1)));
        }
        let dev_score = score(dev, &tag_all(&model, &dev.seqs)?, vocab, cfg.scheme)?;
        log.push(EpochLog {
            epoch: epoch + 1,
            lr: opt.lr,
            train_loss: Some(total / tokens),
            dev: dev_score,
        });
        let row = log.len() - 1;
        if best_epoch(&log, cfg.select_by) == Some(row) {
            best = Some((row, model.clone()));
        }
    }
    let (best, model) = best.expect("at least one epoch");
    Ok(TrainRun { model, log, best })
}
