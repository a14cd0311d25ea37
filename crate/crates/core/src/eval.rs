//! Chunk F1, concept error rate and token accuracy.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::bio::{chunks_with_repairs, invalid_transitions};
use crate::corpus::{Chunk, ChunkScheme};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub correct: usize,
    pub hypothesized: usize,
    pub reference: usize,
}

impl LabelCounts {
    fn add(&mut self, o: LabelCounts) {
        self.correct += o.correct;
        self.hypothesized += o.hypothesized;
        self.reference += o.reference;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChunkScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub totals: LabelCounts,
    pub per_label: BTreeMap<String, LabelCounts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub cer: f64,
    pub token_accuracy: f64,
    pub sentences: usize,
    pub tokens: usize,
    pub chunks: LabelCounts,
    pub concept_errors: usize,
    pub reference_concepts: usize,
    /// `X-I` after a non-`X` label, in the predictions.
    pub invalid_transitions: usize,
    pub per_label: BTreeMap<String, LabelCounts>,
}

fn check_shapes<T>(gold: &[Vec<T>], pred: &[Vec<T>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::data(format!(
            "{} reference sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::data(format!(
                "sentence {}: {} reference labels but {} predicted",
                i + 1,
                g.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn sentence_counts(gold: &[Chunk], pred: &[Chunk]) -> BTreeMap<String, LabelCounts> {
    let mut out: BTreeMap<String, LabelCounts> = BTreeMap::new();
    let gold_set: HashSet<&Chunk> = gold.iter().collect();
    for c in gold {
        out.entry(c.label.clone()).or_default().reference += 1;
    }
    for c in pred {
        let e = out.entry(c.label.clone()).or_default();
        e.hypothesized += 1;
        if gold_set.contains(c) {
            e.correct += 1;
        }
    }
    out
}

fn scores_from(per_label: BTreeMap<String, LabelCounts>) -> ChunkScores {
    let mut totals = LabelCounts::default();
    per_label.values().for_each(|c| totals.add(*c));
    let (precision, recall, f1) = if totals.hypothesized == 0 && totals.reference == 0 {
        (100.0, 100.0, 100.0)
    } else {
        let p = pct(totals.correct, totals.hypothesized);
        let r = pct(totals.correct, totals.reference);
        (p, r, harmonic(p, r))
    };
    ChunkScores {
        precision,
        recall,
        f1,
        totals,
        per_label,
    }
}

/// Micro-averaged chunk precision/recall/F1. A predicted chunk is correct
/// when label, start and end all match a reference chunk. Two empty chunk
/// sets score 100.
pub fn f1_chunks<S: AsRef<str> + Sync>(gold: &[Vec<S>], pred: &[Vec<S>], scheme: ChunkScheme) -> Result<ChunkScores> {
    check_shapes(gold, pred)?;
    let pairs: Vec<(&Vec<S>, &Vec<S>)> = gold.iter().zip(pred).collect();
    let per_sentence = par::map(&pairs, |(g, p)| -> Result<_> {
        let (gc, _) = chunks_with_repairs(g, scheme)?;
        let (pc, _) = chunks_with_repairs(p, scheme)?;
        Ok(sentence_counts(&gc, &pc))
    });
    let mut per_label: BTreeMap<String, LabelCounts> = BTreeMap::new();
    for counts in per_sentence {
        for (label, c) in counts? {
            per_label.entry(label).or_default().add(c);
        }
    }
    Ok(scores_from(per_label))
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn concepts<S: AsRef<str>>(labels: &[S], scheme: ChunkScheme) -> Result<Vec<String>> {
    Ok(chunks_with_repairs(labels, scheme)?.0.into_iter().map(|c| c.label).collect())
}

/// `(S + I + D, reference concepts)` summed over sentences.
pub fn concept_errors<S: AsRef<str> + Sync>(gold: &[Vec<S>], pred: &[Vec<S>], scheme: ChunkScheme) -> Result<(usize, usize)> {
    check_shapes(gold, pred)?;
    let pairs: Vec<(&Vec<S>, &Vec<S>)> = gold.iter().zip(pred).collect();
    let per = par::map(&pairs, |(g, p)| -> Result<(usize, usize)> {
        let (gc, pc) = (concepts(g, scheme)?, concepts(p, scheme)?);
        Ok((edit_distance(&gc, &pc), gc.len()))
    });
    per.into_iter()
        .try_fold((0, 0), |(e, n), r| r.map(|(de, dn)| (e + de, n + dn)))
}

/// Concept error rate in percent. With no reference concepts the rate is 0
/// when nothing was hypothesized and 100 otherwise.
pub fn concept_error_rate<S: AsRef<str> + Sync>(gold: &[Vec<S>], pred: &[Vec<S>], scheme: ChunkScheme) -> Result<f64> {
    let (errors, reference) = concept_errors(gold, pred, scheme)?;
    Ok(cer_from(errors, reference))
}

fn cer_from(errors: usize, reference: usize) -> f64 {
    match (errors, reference) {
        (0, _) => 0.0,
        (_, 0) => 100.0,
        (e, n) => pct(e, n),
    }
}

/// Percentage of positions with identical labels; 100 for an empty corpus.
pub fn token_accuracy<T: PartialEq>(gold: &[Vec<T>], pred: &[Vec<T>]) -> Result<f64> {
    check_shapes(gold, pred)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(100.0);
    }
    let hits = gold
        .iter()
        .zip(pred)
        .flat_map(|(g, p)| g.iter().zip(p))
        .filter(|(a, b)| a == b)
        .count();
    Ok(pct(hits, total))
}

pub fn evaluate<S: AsRef<str> + Sync + PartialEq>(gold: &[Vec<S>], pred: &[Vec<S>], scheme: ChunkScheme) -> Result<EvalReport> {
    let chunks = f1_chunks(gold, pred, scheme)?;
    let (concept_errors, reference_concepts) = concept_errors(gold, pred, scheme)?;
    let token_accuracy = token_accuracy(gold, pred)?;
    let mut invalid = 0;
    for p in pred {
        invalid += invalid_transitions(p, scheme)?.0;
    }
    Ok(EvalReport {
        precision: chunks.precision,
        recall: chunks.recall,
        f1: chunks.f1,
        cer: cer_from(concept_errors, reference_concepts),
        token_accuracy,
        sentences: gold.len(),
        tokens: gold.iter().map(Vec::len).sum(),
        chunks: chunks.totals,
        concept_errors,
        reference_concepts,
        invalid_transitions: invalid,
        per_label: chunks.per_label,
    })
}

impl EvalReport {
    /// Share of predicted positions that are an invalid `X-I`, in percent.
    pub fn invalid_rate(&self) -> f64 {
        pct(self.invalid_transitions, self.tokens)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sentences {}  tokens {}", self.sentences, self.tokens);
        let _ = writeln!(
            s,
            "precision {:6.2}  recall {:6.2}  F1 {:6.2}",
            self.precision, self.recall, self.f1
        );
        let _ = writeln!(
            s,
            "CER {:6.2} ({} errors / {} concepts)  token accuracy {:6.2}",
            self.cer, self.concept_errors, self.reference_concepts, self.token_accuracy
        );
        let _ = writeln!(s, "invalid I transitions {}", self.invalid_transitions);
        let width = self.per_label.keys().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:width$}  {:>7} {:>7} {:>7} {:>7}", "label", "correct", "hyp", "ref", "F1");
        for (label, c) in &self.per_label {
            let f1 = harmonic(pct(c.correct, c.hypothesized), pct(c.correct, c.reference));
            let _ = writeln!(
                s,
                "{label:width$}  {:>7} {:>7} {:>7} {:>7.2}",
                c.correct, c.hypothesized, c.reference, f1
            );
        }
        s
    }

    /// Flat `key=value` lines; per-label counts as `label.<name>.<count>`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("cer", self.cer),
            ("token_accuracy", self.token_accuracy),
        ] {
            let _ = writeln!(s, "{k}={v:.4}");
        }
        for (k, v) in [
            ("sentences", self.sentences),
            ("tokens", self.tokens),
            ("chunks_correct", self.chunks.correct),
            ("chunks_hypothesized", self.chunks.hypothesized),
            ("chunks_reference", self.chunks.reference),
            ("concept_errors", self.concept_errors),
            ("reference_concepts", self.reference_concepts),
            ("invalid_transitions", self.invalid_transitions),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        for (label, c) in &self.per_label {
            let _ = writeln!(s, "label.{label}.correct={}", c.correct);
            let _ = writeln!(s, "label.{label}.hypothesized={}", c.hypothesized);
            let _ = writeln!(s, "label.{label}.reference={}", c.reference);
        }
        s
    }

    pub fn write_key_values(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_key_values())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_predictions_are_perfect() {
        let g = vec![v(&["A-B", "A-I", "O", "B-B"]), v(&["O", "C-B"])];
        let r = evaluate(&g, &g, ChunkScheme::Suffix).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (100.0, 100.0, 100.0));
        assert_eq!(r.cer, 0.0);
        assert_eq!(r.token_accuracy, 100.0);
        assert_eq!(r.chunks.reference, 3);
    }

    #[test]
    fn boundary_error_halves_scores() {
        let g = vec![v(&["A-B", "A-I", "O", "B-B"])];
        let p = vec![v(&["A-B", "A-I", "B-B", "B-I"])];
        let s = f1_chunks(&g, &p, ChunkScheme::Suffix).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (50.0, 50.0, 50.0));
        assert_eq!(s.per_label["B"], LabelCounts { correct: 0, hypothesized: 1, reference: 1 });
    }

    #[test]
    fn no_predicted_chunks() {
        let g = vec![v(&["A-B", "O"])];
        let p = vec![v(&["O", "O"])];
        let s = f1_chunks(&g, &p, ChunkScheme::Suffix).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert_eq!(concept_error_rate(&g, &p, ChunkScheme::Suffix).unwrap(), 100.0);
    }

    #[test]
    fn cer_examples() {
        let g = vec![v(&["A-B", "B-B", "C-B", "D-B"])];
        let p = vec![v(&["A-B", "X-B", "C-B", "D-B"])];
        assert_eq!(concept_error_rate(&g, &p, ChunkScheme::Suffix).unwrap(), 25.0);
        let empty = vec![v(&["O", "O", "O", "O"])];
        assert_eq!(concept_error_rate(&g, &empty, ChunkScheme::Suffix).unwrap(), 100.0);
        assert_eq!(concept_error_rate(&empty, &empty, ChunkScheme::Suffix).unwrap(), 0.0);
        assert_eq!(concept_error_rate(&empty, &g, ChunkScheme::Suffix).unwrap(), 100.0);
    }

    #[test]
    fn edit_distance_hand_cases() {
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(edit_distance(b"", b"abc"), 3);
        assert_eq!(edit_distance(b"abc", b""), 3);
        assert_eq!(edit_distance(b"flaw", b"lawn"), 2);
    }

    #[test]
    fn token_accuracy_cases() {
        let g = vec![(0..10).collect::<Vec<usize>>()];
        let mut p = g.clone();
        assert_eq!(token_accuracy(&g, &p).unwrap(), 100.0);
        p[0][3] = 99;
        assert_eq!(token_accuracy(&g, &p).unwrap(), 90.0);
        let wrong = vec![vec![99usize; 10]];
        assert_eq!(token_accuracy(&g, &wrong).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatches() {
        let g = vec![v(&["O"])];
        assert!(matches!(f1_chunks(&g, &[], ChunkScheme::Suffix), Err(Error::Data(_))));
        assert!(matches!(
            concept_error_rate(&g, &[v(&["O", "O"])], ChunkScheme::Suffix),
            Err(Error::Data(_))
        ));
        assert!(token_accuracy(&[vec![1]], &[vec![1, 2]]).is_err());
    }

    #[test]
    fn plain_scheme_single_word_concepts() {
        let g = vec![v(&["fromloc.city", "fromloc.city", "O"])];
        let s = f1_chunks(&g, &g, ChunkScheme::Plain).unwrap();
        assert_eq!(s.totals.reference, 2);
    }

    #[test]
    fn report_formats() {
        let g = vec![v(&["A-B", "A-I", "O"])];
        let p = vec![v(&["O", "A-I", "O"])];
        let r = evaluate(&g, &p, ChunkScheme::Suffix).unwrap();
        assert_eq!(r.invalid_transitions, 1);
        let kv = r.to_key_values();
        assert!(kv.contains("f1=0.0000\n"));
        assert!(kv.contains("label.A.reference=1\n"));
        assert!(r.to_text().contains("F1   0.00"));
    }

    fn seqs() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["O", "A-B", "A-I", "B-B", "B-I"]), 0..8)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn edit_distance_triangle(a in prop::collection::vec(0u8..4, 0..8),
                                  b in prop::collection::vec(0u8..4, 0..8),
                                  c in prop::collection::vec(0u8..4, 0..8)) {
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        }

        #[test]
        fn substitution_only_distance_is_symmetric(pairs in prop::collection::vec((0u8..3, 0u8..3), 0..10)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let hamming = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            prop_assert!(edit_distance(&a, &b) <= hamming);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        }

        #[test]
        fn f1_invariant_under_reordering(pairs in prop::collection::vec((seqs(), seqs()), 1..6), rot in 0usize..6) {
            let pairs: Vec<(Vec<String>, Vec<String>)> = pairs
                .into_iter()
                .map(|(mut g, mut p)| { let n = g.len().min(p.len()); g.truncate(n); p.truncate(n); (g, p) })
                .collect();
            let (g, p): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let mut rotated = pairs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let (g2, p2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            let a = f1_chunks(&g, &p, ChunkScheme::Suffix).unwrap();
            let b = f1_chunks(&g2, &p2, ChunkScheme::Suffix).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
