//! The three tagger variants (I-RNN, GRU, deep), their parameter bundle, and
//! cached forward/backward passes over one sequence.
//!
//! Every input position is encoded as one wide vector
//! `[word window | class window | label window | char features]`; which
//! blocks exist depends on the [`ModelSpec`]. Backward-direction models run
//! the same code over the reversed sequence.

mod bidir;
mod io;

pub use bidir::{combine_bidirectional, tag_bidirectional};
pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use crate::corpus::vocab::{BOS, CHAR_PAD, EOS};
use crate::corpus::{EncodedSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::layers::{
    char_conv_backward, char_conv_forward, dense_backward, dense_forward, gather_rows, gru_backward, gru_forward,
    label_rows, relu_hidden_backward, relu_hidden_forward, scatter_rows, window_rows, CharConvCache, DenseCache,
    GruCache, GruGrads, GruParams, WindowSpec,
};
use crate::math::{argmax, dropout_mask, softmax, xavier_init, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Irnn,
    IrnnGru,
    IrnnDeep,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Irnn, Variant::IrnnGru, Variant::IrnnDeep];

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Irnn => 0,
            Variant::IrnnGru => 1,
            Variant::IrnnDeep => 2,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        Variant::ALL.get(t as usize).copied()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irnn" => Ok(Variant::Irnn),
            "irnn-gru" => Ok(Variant::IrnnGru),
            "irnn-deep" => Ok(Variant::IrnnDeep),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Irnn => "irnn",
            Variant::IrnnGru => "irnn-gru",
            Variant::IrnnDeep => "irnn-deep",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        })
    }
}

/// How a tensor takes part in regularization and sparse updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

/// Everything that determines tensor shapes and the wiring of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub direction: Direction,
    pub window: WindowSpec,
    pub n_words: usize,
    pub n_classes: usize,
    pub n_chars: usize,
    /// Predictable labels; the label table has two more rows (`<bol>`, `<unk>`).
    pub n_labels: usize,
    pub word_dim: usize,
    pub class_dim: usize,
    pub label_dim: usize,
    pub char_dim: usize,
    pub conv_size: usize,
    pub hidden: usize,
    /// Size of each first-level layer of the deep variant.
    pub first_level: usize,
    pub use_classes: bool,
    pub use_chars: bool,
    /// When false every label slot reads the `<bol>` embedding: a label-blind tagger.
    pub label_context: bool,
    /// GRU gates see only the word window instead of the full input.
    pub gru_words_only: bool,
}

impl ModelSpec {
    /// A spec sized for `vocab`, with every input and layer width set to `dim`.
    pub fn for_vocab(vocab: &Vocabulary, variant: Variant, direction: Direction, window: WindowSpec, dim: usize) -> Self {
        ModelSpec {
            variant,
            direction,
            window,
            n_words: vocab.words.len(),
            n_classes: vocab.classes.len(),
            n_chars: vocab.chars.len(),
            n_labels: vocab.num_labels(),
            word_dim: dim,
            class_dim: dim,
            label_dim: dim,
            char_dim: dim,
            conv_size: dim,
            hidden: dim,
            first_level: dim,
            use_classes: false,
            use_chars: false,
            label_context: true,
            gru_words_only: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.n_words,
            self.n_labels,
            self.word_dim,
            self.label_dim,
            self.hidden,
            self.first_level,
        ];
        if dims.contains(&0) {
            return Err(Error::config("model sizes must be positive"));
        }
        if self.window.d_l == 0 {
            return Err(Error::config("label context d_l must be at least 1"));
        }
        if self.n_words < 3 {
            return Err(Error::config("word table lacks reserved rows"));
        }
        if self.use_classes && (self.class_dim == 0 || self.n_classes < 4) {
            return Err(Error::config("class input needs a class table"));
        }
        if self.use_chars && (self.char_dim == 0 || self.conv_size == 0 || self.n_chars < 2) {
            return Err(Error::config("character input needs a character table and convolution size"));
        }
        Ok(())
    }

    pub fn label_rows(&self) -> usize {
        self.n_labels + 2
    }

    pub fn bol(&self) -> usize {
        self.n_labels
    }

    fn literal_gru(&self) -> bool {
        self.variant == Variant::IrnnGru && self.gru_words_only
    }

    /// Input blocks in concatenation order.
    fn blocks(&self) -> Vec<Block> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |group, len| {
            blocks.push(Block { group, offset, len });
            offset += len;
        };
        let slots = self.window.word_slots();
        push(Group::Words, slots * self.word_dim);
        if self.literal_gru() {
            return blocks;
        }
        if self.use_classes {
            push(Group::Classes, slots * self.class_dim);
        }
        push(Group::Labels, self.window.d_l * self.label_dim);
        if self.use_chars {
            push(Group::Chars, self.conv_size);
        }
        blocks
    }

    pub fn input_size(&self) -> usize {
        self.blocks().iter().map(|b| b.len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Words,
    Classes,
    Labels,
    Chars,
}

impl Group {
    fn name(self) -> &'static str {
        match self {
            Group::Words => "words",
            Group::Classes => "classes",
            Group::Labels => "labels",
            Group::Chars => "chars",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    group: Group,
    offset: usize,
    len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum HiddenLayout {
    Relu(Dense),
    /// z, r, candidate; each (W over h, U over x, bias)
    Gru([usize; 9]),
    Deep { groups: Vec<Dense>, top: Dense },
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    word_emb: usize,
    label_emb: usize,
    class_emb: Option<usize>,
    char_emb: Option<usize>,
    conv: Option<Dense>,
    hidden: HiddenLayout,
    out: Dense,
    blocks: Vec<Block>,
}

/// Name, kind, rows, cols.
type TensorDecl = (String, ParamKind, usize, usize);

fn plan(spec: &ModelSpec) -> (Layout, Vec<TensorDecl>) {
    let mut decls: Vec<TensorDecl> = Vec::new();
    let mut add = |name: String, kind, rows, cols| {
        decls.push((name, kind, rows, cols));
        decls.len() - 1
    };
    let word_emb = add("emb.word".into(), ParamKind::Embedding, spec.n_words, spec.word_dim);
    let label_emb = add("emb.label".into(), ParamKind::Embedding, spec.label_rows(), spec.label_dim);
    let blocks = spec.blocks();
    let has = |g: Group| blocks.iter().any(|b| b.group == g);
    let class_emb = has(Group::Classes).then(|| add("emb.class".into(), ParamKind::Embedding, spec.n_classes, spec.class_dim));
    let char_emb = has(Group::Chars).then(|| add("emb.char".into(), ParamKind::Embedding, spec.n_chars, spec.char_dim));
    let conv = has(Group::Chars).then(|| Dense {
        w: add("conv.w".into(), ParamKind::Weight, spec.conv_size, spec.window.char_slots() * spec.char_dim),
        b: add("conv.b".into(), ParamKind::Bias, spec.conv_size, 1),
    });
    let input = spec.input_size();
    let h = spec.hidden;
    let hidden = match spec.variant {
        Variant::Irnn => HiddenLayout::Relu(Dense {
            w: add("hidden.w".into(), ParamKind::Weight, h, input),
            b: add("hidden.b".into(), ParamKind::Bias, h, 1),
        }),
        Variant::IrnnGru => {
            let mut ids = [0; 9];
            for (k, gate) in ["z", "r", "h"].iter().enumerate() {
                ids[3 * k] = add(format!("gru.w{gate}"), ParamKind::Weight, h, h);
                ids[3 * k + 1] = add(format!("gru.u{gate}"), ParamKind::Weight, h, input);
                ids[3 * k + 2] = add(format!("gru.b{gate}"), ParamKind::Bias, h, 1);
            }
            HiddenLayout::Gru(ids)
        }
        Variant::IrnnDeep => {
            let groups = blocks
                .iter()
                .map(|b| Dense {
                    w: add(format!("deep.{}.w", b.group.name()), ParamKind::Weight, spec.first_level, b.len),
                    b: add(format!("deep.{}.b", b.group.name()), ParamKind::Bias, spec.first_level, 1),
                })
                .collect::<Vec<_>>();
            let top_in = spec.first_level * groups.len();
            let top = Dense {
                w: add("deep.top.w".into(), ParamKind::Weight, h, top_in),
                b: add("deep.top.b".into(), ParamKind::Bias, h, 1),
            };
            HiddenLayout::Deep { groups, top }
        }
    };
    let out = Dense {
        w: add("out.w".into(), ParamKind::Weight, spec.n_labels, h),
        b: add("out.b".into(), ParamKind::Bias, spec.n_labels, 1),
    };
    let layout = Layout {
        word_emb,
        label_emb,
        class_emb,
        char_emb,
        conv,
        hidden,
        out,
        blocks,
    };
    (layout, decls)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Matrix,
}

/// Parameters of one tagger direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    /// Hash of the vocabulary the model was trained with.
    pub vocab_hash: u64,
    pub tensors: Vec<Tensor>,
    layout: Layout,
}

/// Predicted labels and per-position distributions, in sentence order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggerOutput {
    pub labels: Vec<usize>,
    pub dists: Vec<Vec<f64>>,
}

/// Keep probabilities and the generator for training-time dropout.
pub struct Dropout<'a> {
    pub keep_embed: f64,
    pub keep_hidden: f64,
    pub rng: &'a mut Rng,
}

#[derive(Clone, Debug, PartialEq)]
enum HiddenCache {
    Relu(DenseCache),
    Gru(GruCache),
    Deep { firsts: Vec<DenseCache>, top_in: Vec<f64>, top: DenseCache },
}

/// Everything the backward pass needs for one position.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache {
    word_rows: Vec<usize>,
    class_rows: Option<Vec<usize>>,
    label_rows: Option<Vec<usize>>,
    chars: Option<CharConvCache>,
    x: Vec<f64>,
    embed_mask: Option<Vec<f64>>,
    hidden: HiddenCache,
    h: Vec<f64>,
    hidden_mask: Option<Vec<f64>>,
    pub y: Vec<f64>,
}

impl StepCache {
    /// Recurrent state handed to the next position (GRU only).
    pub fn state(&self) -> Option<&[f64]> {
        match &self.hidden {
            HiddenCache::Gru(c) => Some(&c.h),
            _ => None,
        }
    }

    /// Number of cached floats, for memory accounting.
    pub fn footprint(&self) -> usize {
        let hidden = match &self.hidden {
            HiddenCache::Relu(c) => c.pre.len() + c.out.len(),
            HiddenCache::Gru(c) => c.x.len() + 6 * c.h.len(),
            HiddenCache::Deep { firsts, top_in, top } => {
                firsts.iter().map(|c| c.pre.len() + c.out.len()).sum::<usize>() + top_in.len() + 2 * top.out.len()
            }
        };
        self.x.len() + self.h.len() + self.y.len() + hidden
    }
}

/// A sequence laid out in processing order.
pub struct Oriented<'a> {
    pub seq: Cow<'a, EncodedSequence>,
    pad: (usize, usize),
}

/// Per-tensor gradient buffers; embedding tables track touched rows.
#[derive(Clone, Debug)]
pub struct Grads {
    pub tensors: Vec<Matrix>,
    touched: Vec<Vec<usize>>,
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Grads {
            tensors: params.tensors.iter().map(|t| Matrix::zeros(t.value.rows(), t.value.cols())).collect(),
            touched: vec![Vec::new(); params.tensors.len()],
        }
    }

    /// Touched rows of tensor `i`, deduplicated and sorted.
    pub fn touched_rows(&mut self, i: usize) -> &[usize] {
        let rows = &mut self.touched[i];
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    /// Deduplicates every touched-row list.
    pub fn dedup_touched(&mut self) {
        for rows in &mut self.touched {
            rows.sort_unstable();
            rows.dedup();
        }
    }

    /// Touched rows of tensor `i` as recorded (may repeat until deduplicated).
    pub fn touched(&self, i: usize) -> &[usize] {
        &self.touched[i]
    }

    pub fn clear(&mut self, params: &ModelParams) {
        for (i, t) in params.tensors.iter().enumerate() {
            if t.kind == ParamKind::Embedding {
                let rows = std::mem::take(&mut self.touched[i]);
                for r in rows {
                    self.tensors[i].row_mut(r).fill(0.0);
                }
            } else {
                self.tensors[i].fill(0.0);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.tensors {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Matrix::sum_squares).sum::<f64>().sqrt()
    }
}

impl ModelParams {
    /// Xavier-initialized weights and embeddings, zero biases.
    pub fn new(spec: ModelSpec, vocab_hash: u64, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (layout, decls) = plan(&spec);
        let tensors = decls
            .into_iter()
            .map(|(name, kind, rows, cols)| {
                let value = match kind {
                    ParamKind::Bias => Matrix::zeros(rows, cols),
                    _ => xavier_init(rows, cols, rng)?,
                };
                Ok(Tensor { name, kind, value })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            spec,
            vocab_hash,
            tensors,
            layout,
        })
    }

    /// Assembles a model from explicit tensors, checking their shapes against `spec`.
    pub fn from_tensors(spec: ModelSpec, vocab_hash: u64, values: Vec<Matrix>) -> Result<Self> {
        spec.validate()?;
        let (layout, decls) = plan(&spec);
        if decls.len() != values.len() {
            return Err(Error::config(format!(
                "model needs {} tensors, got {}",
                decls.len(),
                values.len()
            )));
        }
        let tensors = decls
            .into_iter()
            .zip(values)
            .map(|((name, kind, rows, cols), value)| {
                if value.shape() != (rows, cols) {
                    return Err(Error::shape("from_tensors", (rows, cols), value.shape()));
                }
                Ok(Tensor { name, kind, value })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            spec,
            vocab_hash,
            tensors,
            layout,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// `Σ w²` over weight matrices (optionally embeddings too).
    pub fn weight_sum_squares(&self, include_embeddings: bool) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.kind == ParamKind::Weight || (include_embeddings && t.kind == ParamKind::Embedding))
            .map(|t| t.value.sum_squares())
            .sum()
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.hash() != self.vocab_hash {
            return Err(Error::config(format!(
                "vocabulary hash {:016x} does not match the model's {:016x}",
                vocab.hash(),
                self.vocab_hash
            )));
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &EncodedSequence) -> Result<()> {
        let s = &self.spec;
        if seq.is_empty() {
            return Err(Error::data("empty sequence"));
        }
        if seq.words.iter().any(|&w| w >= s.n_words) {
            return Err(Error::config("word index outside the model's vocabulary"));
        }
        if s.use_classes {
            match &seq.classes {
                Some(c) if c.iter().all(|&v| v < s.n_classes) => {}
                Some(_) => return Err(Error::config("class index outside the model's vocabulary")),
                None => return Err(Error::data("model uses classes but the sequence has no class column")),
            }
        }
        if s.use_chars && seq.chars.iter().flatten().any(|&c| c >= s.n_chars) {
            return Err(Error::config("character index outside the model's vocabulary"));
        }
        Ok(())
    }

    /// The sequence in processing order; backward models see it reversed,
    /// with the padding symbols swapped so `<s>` still sits before the first word.
    pub fn orient<'a>(&self, seq: &'a EncodedSequence) -> Oriented<'a> {
        match self.spec.direction {
            Direction::Forward => Oriented {
                seq: Cow::Borrowed(seq),
                pad: (BOS, EOS),
            },
            Direction::Backward => Oriented {
                seq: Cow::Owned(seq.reversed()),
                pad: (EOS, BOS),
            },
        }
    }

    fn gru_params(&self, ids: &[usize; 9]) -> GruParams<'_> {
        let t = |i: usize| &self.tensors[ids[i]].value;
        GruParams {
            wz: t(0),
            uz: t(1),
            bz: t(2),
            wr: t(3),
            ur: t(4),
            br: t(5),
            wh: t(6),
            uh: t(7),
            bh: t(8),
        }
    }

    fn value(&self, i: usize) -> &Matrix {
        &self.tensors[i].value
    }

    /// Forward pass for position `t` of an oriented sequence. `history` holds
    /// the labels of positions `0..t` in processing order.
    pub fn step_forward(
        &self,
        o: &Oriented,
        t: usize,
        history: &[usize],
        state: Option<&[f64]>,
        dropout: Option<&mut Dropout>,
    ) -> Result<StepCache> {
        let spec = &self.spec;
        let seq = &o.seq;
        let lay = &self.layout;
        let mut x = Vec::with_capacity(spec.input_size());
        let mut class_rows = None;
        let mut label_rows_used = None;
        let mut chars = None;

        let word_rows = window_rows(&seq.words, t, spec.window.d_w, o.pad);
        for block in &lay.blocks {
            match block.group {
                Group::Words => gather_rows(self.value(lay.word_emb), &word_rows, &mut x),
                Group::Classes => {
                    let classes = seq.classes.as_ref().ok_or_else(|| Error::data("sequence has no classes"))?;
                    let rows = window_rows(classes, t, spec.window.d_w, o.pad);
                    gather_rows(self.value(lay.class_emb.unwrap()), &rows, &mut x);
                    class_rows = Some(rows);
                }
                Group::Labels => {
                    let rows = if spec.label_context {
                        label_rows(history, t, spec.window.d_l, spec.bol())
                    } else {
                        vec![spec.bol(); spec.window.d_l]
                    };
                    gather_rows(self.value(lay.label_emb), &rows, &mut x);
                    label_rows_used = Some(rows);
                }
                Group::Chars => {
                    let conv = lay.conv.unwrap();
                    let (feat, cache) = char_conv_forward(
                        &seq.chars[t],
                        self.value(lay.char_emb.unwrap()),
                        self.value(conv.w),
                        self.value(conv.b),
                        spec.window.d_c,
                        CHAR_PAD,
                    )?;
                    x.extend_from_slice(&feat);
                    chars = Some(cache);
                }
            }
        }

        let mut dropout = dropout;
        let embed_mask = match dropout.as_deref_mut() {
            Some(d) if d.keep_embed < 1.0 => {
                let m = dropout_mask(x.len(), d.keep_embed, d.rng)?;
                x.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                Some(m)
            }
            _ => None,
        };

        let (hidden, h_raw) = match &lay.hidden {
            HiddenLayout::Relu(d) => {
                let c = relu_hidden_forward(self.value(d.w), self.value(d.b), &x)?;
                let h = c.out.clone();
                (HiddenCache::Relu(c), h)
            }
            HiddenLayout::Gru(ids) => {
                let zeros;
                let prev = match state {
                    Some(s) => s,
                    None => {
                        zeros = vec![0.0; spec.hidden];
                        &zeros
                    }
                };
                let c = gru_forward(&self.gru_params(ids), &x, prev)?;
                let h = c.h.clone();
                (HiddenCache::Gru(c), h)
            }
            HiddenLayout::Deep { groups, top } => {
                let mut firsts = Vec::with_capacity(groups.len());
                let mut top_in = Vec::with_capacity(spec.first_level * groups.len());
                for (d, block) in groups.iter().zip(&lay.blocks) {
                    let c = relu_hidden_forward(
                        self.value(d.w),
                        self.value(d.b),
                        &x[block.offset..block.offset + block.len],
                    )?;
                    top_in.extend_from_slice(&c.out);
                    firsts.push(c);
                }
                let c = relu_hidden_forward(self.value(top.w), self.value(top.b), &top_in)?;
                let h = c.out.clone();
                (HiddenCache::Deep { firsts, top_in, top: c }, h)
            }
        };

        let mut h = h_raw;
        let hidden_mask = match dropout {
            Some(d) if d.keep_hidden < 1.0 => {
                let m = dropout_mask(h.len(), d.keep_hidden, d.rng)?;
                h.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                Some(m)
            }
            _ => None,
        };

        let y = softmax(&dense_forward(self.value(lay.out.w), self.value(lay.out.b), &h)?);
        Ok(StepCache {
            word_rows,
            class_rows,
            label_rows: label_rows_used,
            chars,
            x,
            embed_mask,
            hidden,
            h,
            hidden_mask,
            y,
        })
    }

    /// Backward pass for one position given the gradient at the pre-softmax
    /// layer. `d_state` is the gradient flowing into this step's recurrent
    /// state from later steps; the return value is the gradient for the
    /// previous state (GRU only).
    pub fn step_backward(
        &self,
        cache: &StepCache,
        dlogits: &[f64],
        d_state: Option<&[f64]>,
        grads: &mut Grads,
    ) -> Result<Option<Vec<f64>>> {
        let lay = &self.layout;
        let mut dh = vec![0.0; cache.h.len()];
        {
            let [gw, gb] = grads
                .tensors
                .get_disjoint_mut([lay.out.w, lay.out.b])
                .expect("distinct tensors");
            dense_backward(self.value(lay.out.w), &cache.h, dlogits, gw, gb, Some(&mut dh))?;
        }
        if let Some(m) = &cache.hidden_mask {
            dh.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }

        let mut dx = vec![0.0; cache.x.len()];
        let mut d_prev = None;
        match (&lay.hidden, &cache.hidden) {
            (HiddenLayout::Relu(d), HiddenCache::Relu(c)) => {
                let [gw, gb] = grads.tensors.get_disjoint_mut([d.w, d.b]).expect("distinct tensors");
                relu_hidden_backward(self.value(d.w), &cache.x, c, &dh, gw, gb, Some(&mut dx))?;
            }
            (HiddenLayout::Gru(ids), HiddenCache::Gru(c)) => {
                if let Some(ds) = d_state {
                    dh.iter_mut().zip(ds).for_each(|(g, s)| *g += s);
                }
                let [wz, uz, bz, wr, ur, br, wh, uh, bh] = grads.tensors.get_disjoint_mut(*ids).expect("distinct tensors");
                let mut g = GruGrads {
                    wz,
                    uz,
                    bz,
                    wr,
                    ur,
                    br,
                    wh,
                    uh,
                    bh,
                };
                d_prev = Some(gru_backward(&self.gru_params(ids), c, &dh, &mut g, &mut dx)?);
            }
            (HiddenLayout::Deep { groups, top }, HiddenCache::Deep { firsts, top_in, top: tc }) => {
                let mut d_top_in = vec![0.0; top_in.len()];
                {
                    let [gw, gb] = grads.tensors.get_disjoint_mut([top.w, top.b]).expect("distinct tensors");
                    relu_hidden_backward(self.value(top.w), top_in, tc, &dh, gw, gb, Some(&mut d_top_in))?;
                }
                let width = self.spec.first_level;
                for (k, ((d, c), block)) in groups.iter().zip(firsts).zip(&lay.blocks).enumerate() {
                    let [gw, gb] = grads.tensors.get_disjoint_mut([d.w, d.b]).expect("distinct tensors");
                    let range = block.offset..block.offset + block.len;
                    relu_hidden_backward(
                        self.value(d.w),
                        &cache.x[range.clone()],
                        c,
                        &d_top_in[k * width..(k + 1) * width],
                        gw,
                        gb,
                        Some(&mut dx[range]),
                    )?;
                }
            }
            _ => unreachable!("cache built by a different variant"),
        }

        if let Some(m) = &cache.embed_mask {
            dx.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }

        for block in &lay.blocks {
            let g = &dx[block.offset..block.offset + block.len];
            match block.group {
                Group::Words => {
                    let i = lay.word_emb;
                    scatter_rows(&mut grads.tensors[i], &cache.word_rows, g, &mut grads.touched[i]);
                }
                Group::Classes => {
                    let i = lay.class_emb.unwrap();
                    let rows = cache.class_rows.as_ref().unwrap();
                    scatter_rows(&mut grads.tensors[i], rows, g, &mut grads.touched[i]);
                }
                Group::Labels => {
                    let i = lay.label_emb;
                    let rows = cache.label_rows.as_ref().unwrap();
                    scatter_rows(&mut grads.tensors[i], rows, g, &mut grads.touched[i]);
                }
                Group::Chars => {
                    let conv = lay.conv.unwrap();
                    let emb = lay.char_emb.unwrap();
                    let [gw, gb, gt] = grads
                        .tensors
                        .get_disjoint_mut([conv.w, conv.b, emb])
                        .expect("distinct tensors");
                    char_conv_backward(
                        self.value(conv.w),
                        cache.chars.as_ref().unwrap(),
                        g,
                        gw,
                        gb,
                        gt,
                        &mut grads.touched[emb],
                    )?;
                }
            }
        }
        Ok(d_prev)
    }

    /// Greedy left-to-right (or right-to-left) tagging with the model's own
    /// predictions as label context.
    pub fn tag_greedy(&self, seq: &EncodedSequence) -> Result<TaggerOutput> {
        Ok(self.forward_pass_with_cache(seq, None)?.1)
    }

    /// Runs every position, caching activations. With `teacher` labels
    /// (sentence order) the label context is built from them instead of the
    /// predictions.
    pub fn forward_pass_with_cache(
        &self,
        seq: &EncodedSequence,
        teacher: Option<&[usize]>,
    ) -> Result<(Vec<StepCache>, TaggerOutput)> {
        self.check_sequence(seq)?;
        let o = self.orient(seq);
        let gold: Option<Vec<usize>> = match teacher {
            Some(t) if t.len() != seq.len() => return Err(Error::data("teacher labels do not match sequence length")),
            Some(t) => Some(match self.spec.direction {
                Direction::Forward => t.to_vec(),
                Direction::Backward => t.iter().rev().copied().collect(),
            }),
            None => None,
        };
        let n = seq.len();
        let mut caches: Vec<StepCache> = Vec::with_capacity(n);
        let mut predicted = Vec::with_capacity(n);
        for t in 0..n {
            let history = gold.as_deref().unwrap_or(&predicted);
            let state = caches.last().and_then(|c| c.state());
            let cache = self.step_forward(&o, t, history, state, None)?;
            predicted.push(argmax(&cache.y));
            caches.push(cache);
        }
        let mut dists: Vec<Vec<f64>> = caches.iter().map(|c| c.y.clone()).collect();
        if self.spec.direction == Direction::Backward {
            predicted.reverse();
            dists.reverse();
        }
        Ok((
            caches,
            TaggerOutput {
                labels: predicted,
                dists,
            },
        ))
    }

    /// Teacher-forced cross-entropy of the whole sequence, no dropout.
    pub fn sequence_loss(&self, seq: &EncodedSequence) -> Result<f64> {
        let (_, out) = self.forward_pass_with_cache(seq, Some(&seq.labels))?;
        Ok(out.dists.iter().zip(&seq.labels).map(|(y, &g)| -y[g].ln()).sum())
    }

    /// Exact gradient of [`Self::sequence_loss`], backpropagating the GRU
    /// state through every step. Accumulates into `grads`.
    pub fn sequence_gradient(&self, seq: &EncodedSequence, grads: &mut Grads) -> Result<f64> {
        let (caches, out) = self.forward_pass_with_cache(seq, Some(&seq.labels))?;
        let gold: Vec<usize> = match self.spec.direction {
            Direction::Forward => seq.labels.clone(),
            Direction::Backward => seq.labels.iter().rev().copied().collect(),
        };
        let mut carry: Option<Vec<f64>> = None;
        for t in (0..caches.len()).rev() {
            let d = crate::layers::output_backward(&caches[t].y, gold[t]);
            carry = self.step_backward(&caches[t], &d, carry.as_deref(), grads)?;
        }
        Ok(out.dists.iter().zip(&seq.labels).map(|(y, &g)| -y[g].ln()).sum())
    }
}
