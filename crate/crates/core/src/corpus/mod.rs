//! Corpus ingestion, vocabularies, BIO chunks, encoding and the synthetic
//! slot-filling generator.

pub mod bio;
pub mod column;
pub mod synth;
pub mod vocab;

pub use bio::{chunks_from_labels, invalid_transitions, Chunk, ChunkScheme};
pub use column::{load_column_file, write_column_file, RawSentence};
pub use vocab::{VocabOptions, VocabStats, Vocabulary};

use crate::error::{Error, Result};

/// One sentence as parallel index arrays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub words: Vec<usize>,
    pub classes: Option<Vec<usize>>,
    /// Character indices per word, original casing.
    pub chars: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn reversed(&self) -> EncodedSequence {
        let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
        EncodedSequence {
            words: rev(&self.words),
            classes: self.classes.as_deref().map(rev),
            chars: self.chars.iter().rev().cloned().collect(),
            labels: rev(&self.labels),
        }
    }
}

/// How unknown gold labels are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelPolicy {
    /// Training data: every label must be in the vocabulary.
    Strict,
    /// Evaluation data: unknown labels encode as the label `<unk>` entry,
    /// which no model can predict.
    Lenient,
}

pub fn encode(sentence: &RawSentence, vocab: &Vocabulary, policy: LabelPolicy) -> Result<EncodedSequence> {
    if sentence.is_empty() {
        return Err(Error::data("empty sentence"));
    }
    let words = sentence.words.iter().map(|w| vocab.word_index(w)).collect();
    let classes = sentence.classes.as_ref().map(|cs| {
        cs.iter()
            .map(|c| match c {
                None => vocab::CLASS_NONE,
                Some(c) => vocab.classes.get(c).unwrap_or(vocab::UNK),
            })
            .collect()
    });
    let chars = sentence
        .words
        .iter()
        .map(|w| {
            w.chars()
                .map(|c| vocab.chars.get(c.encode_utf8(&mut [0; 4])).unwrap_or(vocab::UNK))
                .collect()
        })
        .collect();
    let labels = sentence
        .labels
        .iter()
        .map(|l| match vocab.labels.get(l) {
            Some(i) if i < vocab.num_labels() => Ok(i),
            _ => match policy {
                LabelPolicy::Strict => Err(Error::data(format!("unknown gold label {l:?}"))),
                LabelPolicy::Lenient => Ok(vocab.label_unk()),
            },
        })
        .collect::<Result<_>>()?;
    Ok(EncodedSequence {
        words,
        classes,
        chars,
        labels,
    })
}

pub fn encode_all(sentences: &[RawSentence], vocab: &Vocabulary, policy: LabelPolicy) -> Result<Vec<EncodedSequence>> {
    sentences.iter().map(|s| encode(s, vocab, policy)).collect()
}

/// Inverse of [`encode`] for in-vocabulary tokens (words come back normalized).
pub fn decode(seq: &EncodedSequence, vocab: &Vocabulary) -> RawSentence {
    RawSentence {
        words: seq.words.iter().map(|&i| vocab.words.token(i).to_string()).collect(),
        classes: seq.classes.as_ref().map(|cs| {
            cs.iter()
                .map(|&c| (c != vocab::CLASS_NONE).then(|| vocab.classes.token(c).to_string()))
                .collect()
        }),
        labels: decode_labels(&seq.labels, vocab),
    }
}

pub fn decode_labels(labels: &[usize], vocab: &Vocabulary) -> Vec<String> {
    labels.iter().map(|&i| vocab.label_name(i).to_string()).collect()
}
