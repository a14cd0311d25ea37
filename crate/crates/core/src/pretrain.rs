//! Feed-forward neural language model used to pretrain word and label
//! embeddings, plus the plain-text embedding format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::corpus::vocab::Section;
use crate::error::{Error, Result};
use crate::layers::{dense_backward, label_rows, output_backward, output_forward, relu_hidden_backward, relu_hidden_forward, DenseCache};
use crate::math::{xavier_init, Matrix, Rng};
use crate::train::optim::{lr_at, momentum_update};

#[derive(Clone, Debug, PartialEq)]
pub struct NnlmConfig {
    /// Number of previous tokens seen.
    pub context: usize,
    pub dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lambda: f64,
}

impl NnlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context < 1 {
            return Err(Error::config("NNLM context length must be at least 1"));
        }
        if self.dim == 0 || self.hidden == 0 || self.epochs == 0 {
            return Err(Error::config("NNLM sizes and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.lr0 < 0.0 || self.lambda < 0.0 {
            return Err(Error::config("NNLM rates out of range"));
        }
        Ok(())
    }
}

/// `P(w_t | w_{t-n..t-1}) = softmax(O relu(H [E w_{t-n}; …; E w_{t-1}] + b) + c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NnlmParams {
    pub emb: Matrix,
    pub hidden_w: Matrix,
    pub hidden_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
    pub context: usize,
    /// Row read for context positions before the sequence start.
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct NnlmGrads {
    pub emb: Matrix,
    pub hidden_w: Matrix,
    pub hidden_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
    touched: Vec<usize>,
}

struct NnlmCache {
    rows: Vec<usize>,
    x: Vec<f64>,
    hidden: DenseCache,
    y: Vec<f64>,
}

impl NnlmParams {
    pub fn new(vocab_size: usize, pad: usize, cfg: &NnlmConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if pad >= vocab_size {
            return Err(Error::config("NNLM pad row outside the table"));
        }
        Ok(NnlmParams {
            emb: xavier_init(vocab_size, cfg.dim, rng)?,
            hidden_w: xavier_init(cfg.hidden, cfg.context * cfg.dim, rng)?,
            hidden_b: Matrix::zeros(cfg.hidden, 1),
            out_w: xavier_init(vocab_size, cfg.hidden, rng)?,
            out_b: Matrix::zeros(vocab_size, 1),
            context: cfg.context,
            pad,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.emb.rows()
    }

    fn check(&self, seq: &[usize]) -> Result<()> {
        if seq.iter().any(|&i| i >= self.vocab_size()) {
            return Err(Error::data("token index outside the NNLM vocabulary"));
        }
        Ok(())
    }

    fn forward(&self, seq: &[usize], t: usize) -> Result<NnlmCache> {
        let rows = label_rows(seq, t, self.context, self.pad);
        let mut x = Vec::with_capacity(self.hidden_w.cols());
        crate::layers::gather_rows(&self.emb, &rows, &mut x);
        let hidden = relu_hidden_forward(&self.hidden_w, &self.hidden_b, &x)?;
        let y = output_forward(&self.out_w, &self.out_b, &hidden.out)?;
        Ok(NnlmCache { rows, x, hidden, y })
    }

    /// Next-token distribution after the first `t` tokens of `seq`.
    pub fn predict(&self, seq: &[usize], t: usize) -> Result<Vec<f64>> {
        self.check(seq)?;
        Ok(self.forward(seq, t)?.y)
    }

    /// Summed negative log-likelihood of every token given its context.
    pub fn sequence_loss(&self, seq: &[usize]) -> Result<f64> {
        self.check(seq)?;
        let mut total = 0.0;
        for t in 0..seq.len() {
            total -= self.forward(seq, t)?.y[seq[t]].ln();
        }
        Ok(total)
    }

    fn backward(&self, c: &NnlmCache, gold: usize, g: &mut NnlmGrads) -> Result<()> {
        let dlogits = output_backward(&c.y, gold);
        let mut dh = vec![0.0; c.hidden.out.len()];
        dense_backward(&self.out_w, &c.hidden.out, &dlogits, &mut g.out_w, &mut g.out_b, Some(&mut dh))?;
        let mut dx = vec![0.0; c.x.len()];
        relu_hidden_backward(&self.hidden_w, &c.x, &c.hidden, &dh, &mut g.hidden_w, &mut g.hidden_b, Some(&mut dx))?;
        crate::layers::scatter_rows(&mut g.emb, &c.rows, &dx, &mut g.touched);
        Ok(())
    }

    /// Gradient of [`Self::sequence_loss`], accumulated into `g`.
    pub fn sequence_gradient(&self, seq: &[usize], g: &mut NnlmGrads) -> Result<f64> {
        self.check(seq)?;
        let mut total = 0.0;
        for t in 0..seq.len() {
            let c = self.forward(seq, t)?;
            total -= c.y[seq[t]].ln();
            self.backward(&c, seq[t], g)?;
        }
        Ok(total)
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 5] {
        [&mut self.emb, &mut self.hidden_w, &mut self.hidden_b, &mut self.out_w, &mut self.out_b]
    }
}

impl NnlmGrads {
    pub fn zeros_like(p: &NnlmParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        NnlmGrads {
            emb: z(&p.emb),
            hidden_w: z(&p.hidden_w),
            hidden_b: z(&p.hidden_b),
            out_w: z(&p.out_w),
            out_b: z(&p.out_b),
            touched: Vec::new(),
        }
    }

    fn clear(&mut self) {
        for r in self.touched.drain(..) {
            self.emb.row_mut(r).fill(0.0);
        }
        for m in [&mut self.hidden_w, &mut self.hidden_b, &mut self.out_w, &mut self.out_b] {
            m.fill(0.0);
        }
    }
}

/// Losses per epoch (mean per token) alongside the trained model.
#[derive(Clone, Debug)]
pub struct NnlmRun {
    pub params: NnlmParams,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Per-token momentum SGD over shuffled sequences with linear rate decay.
/// L2 covers the two weight matrices.
pub fn train_nnlm(sequences: &[Vec<usize>], vocab_size: usize, pad: usize, cfg: &NnlmConfig, rng: &mut Rng) -> Result<NnlmRun> {
    cfg.validate()?;
    let tokens: usize = sequences.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(Error::config("NNLM training corpus is empty"));
    }
    let mut p = NnlmParams::new(vocab_size, pad, cfg, rng)?;
    let mean_loss = |p: &NnlmParams| -> Result<f64> {
        let s: f64 = sequences.iter().map(|s| p.sequence_loss(s)).sum::<Result<f64>>()?;
        Ok(s / tokens as f64)
    };
    let initial_loss = mean_loss(&p)?;
    let mut v = NnlmGrads::zeros_like(&p);
    let mut g = NnlmGrads::zeros_like(&p);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.epochs, cfg.lr0)?;
        order.shuffle(rng);
        let mut total = 0.0;
        for &i in &order {
            let seq = &sequences[i];
            p.check(seq)?;
            for t in 0..seq.len() {
                let c = p.forward(seq, t)?;
                total -= c.y[seq[t]].ln();
                p.backward(&c, seq[t], &mut g)?;
                apply(&mut p, &mut v, &mut g, lr, cfg);
            }
        }
        if !total.is_finite() {
            return Err(Error::config(format!("NNLM training diverged in epoch {}", epoch + 1)));
        }
        epoch_losses.push(total / tokens as f64);
    }
    Ok(NnlmRun {
        params: p,
        initial_loss,
        epoch_losses,
    })
}

fn apply(p: &mut NnlmParams, v: &mut NnlmGrads, g: &mut NnlmGrads, lr: f64, cfg: &NnlmConfig) {
    g.touched.sort_unstable();
    g.touched.dedup();
    for &r in &g.touched {
        momentum_update(p.emb.row_mut(r), v.emb.row_mut(r), g.emb.row(r), lr, cfg.momentum, 0.0);
    }
    let [_, hw, hb, ow, ob] = p.tensors_mut();
    let pairs = [
        (hw, &mut v.hidden_w, &g.hidden_w, cfg.lambda),
        (hb, &mut v.hidden_b, &g.hidden_b, 0.0),
        (ow, &mut v.out_w, &g.out_w, cfg.lambda),
        (ob, &mut v.out_b, &g.out_b, 0.0),
    ];
    for (w, vel, grad, lambda) in pairs {
        momentum_update(w.as_mut_slice(), vel.as_mut_slice(), grad.as_slice(), lr, cfg.momentum, lambda);
    }
    g.clear();
}

/// Writes `token v1 … vD` lines, one per table row.
pub fn write_embeddings(path: impl AsRef<Path>, tokens: &Section, table: &Matrix) -> Result<()> {
    if tokens.len() != table.rows() {
        return Err(Error::config("embedding table and token list differ in size"));
    }
    let mut s = String::new();
    for (i, tok) in tokens.tokens().iter().enumerate() {
        s.push_str(tok);
        for v in table.row(i) {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Copies rows for tokens listed in an embedding file into a copy of `base`.
/// Unlisted tokens keep their current values and unknown tokens in the file
/// are skipped. `normalize` maps file tokens to vocabulary form.
pub fn load_external_embeddings(
    path: impl AsRef<Path>,
    tokens: &Section,
    base: &Matrix,
    normalize: impl Fn(&str) -> String,
) -> Result<(Matrix, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut table = base.clone();
    let mut copied = 0;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        if values.len() != table.cols() {
            return Err(Error::config(format!(
                "{}:{}: embedding dimension {} but the model uses {}",
                path.display(),
                i + 1,
                values.len(),
                table.cols()
            )));
        }
        if let Some(r) = tokens.get(&normalize(tok)) {
            table.row_mut(r).copy_from_slice(&values);
            copied += 1;
        }
    }
    Ok((table, copied))
}
