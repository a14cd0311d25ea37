//! End-to-end checks through the public API only.

use std::collections::{BTreeMap, BTreeSet};

use irnn::corpus::synth::{generate_synthetic_corpus, Grammar, SplitSizes, SyntheticCorpus};
use irnn::corpus::{load_column_file, write_column_file, LabelPolicy, VocabOptions, Vocabulary};
use irnn::math::rng_from_seed;
use irnn::model::{load_model, save_model, Direction, Variant};
use irnn::par;
use irnn::train::{tag_all, train_tagger, LabeledSet, TrainConfig};

fn corpus(n: usize, seed: u64) -> SyntheticCorpus {
    generate_synthetic_corpus(&Grammar::builtin(), SplitSizes { train: n, dev: n / 5, test: n / 5 }, &mut rng_from_seed(seed)).unwrap()
}

#[test]
fn vocabulary_matches_an_independent_count() {
    let c = corpus(300, 5);
    let min = 20;
    let (vocab, stats) = Vocabulary::build(&c.train, VocabOptions { min_count: min, lowercase: true }).unwrap();

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels = BTreeSet::new();
    for s in &c.train {
        for w in &s.words {
            *counts.entry(w.to_lowercase()).or_default() += 1;
        }
        labels.extend(s.labels.iter().cloned());
    }
    let mut kept: Vec<(&String, usize)> = counts.iter().filter(|(_, &n)| n >= min).map(|(w, &n)| (w, n)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    assert!(!kept.is_empty() && kept.len() < counts.len(), "threshold should split the vocabulary");

    assert_eq!(stats.tokens, counts.values().sum::<usize>());
    assert_eq!(stats.word_types, counts.len());
    assert_eq!(stats.kept_word_types, kept.len());
    assert_eq!(stats.unk_tokens, counts.values().filter(|&&n| n < min).sum::<usize>());
    assert_eq!(stats.label_types, labels.len());
    assert_eq!(vocab.num_labels(), labels.len());

    // three reserved ids, then words by falling frequency, ties alphabetical
    for (rank, (w, _)) in kept.iter().enumerate() {
        assert_eq!(vocab.word_index(w), 3 + rank, "{w}");
        assert_eq!(vocab.word_index(&w.to_uppercase()), 3 + rank, "{w} uppercased");
    }
    for (w, _) in counts.iter().filter(|(_, &n)| n < min) {
        assert_eq!(vocab.word_index(w), 0, "rare word {w} should be unknown");
    }
    let back = Vocabulary::deserialize(&vocab.serialize()).unwrap();
    assert_eq!(back.hash(), vocab.hash());
}

#[test]
fn column_files_round_trip() {
    let c = corpus(100, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.txt");
    write_column_file(&path, &c.train).unwrap();
    assert_eq!(load_column_file(&path).unwrap(), c.train);
}

fn small_model(variant: Variant) -> (Vocabulary, LabeledSet, irnn::model::ModelParams) {
    let c = corpus(60, 7);
    let (vocab, _) = Vocabulary::build(&c.train, Default::default()).unwrap();
    let train = LabeledSet::encode(&c.train, &vocab, LabelPolicy::Strict).unwrap();
    let dev = LabeledSet::encode(&c.dev, &vocab, LabelPolicy::Lenient).unwrap();
    let test = LabeledSet::encode(&c.test, &vocab, LabelPolicy::Lenient).unwrap();
    let cfg = TrainConfig { embed_dim: 10, hidden: 16, first_level: 12, epochs_fwd_bwd: 2, ..TrainConfig::default() };
    let run = train_tagger(&vocab, &train, &dev, &cfg, variant, Direction::Backward, &Default::default()).unwrap();
    (vocab, test, run.model)
}

#[test]
fn saved_model_tags_identically() {
    for variant in [Variant::Irnn, Variant::IrnnGru, Variant::IrnnDeep] {
        let (vocab, test, model) = small_model(variant);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path, Some(&vocab)).unwrap();
        assert_eq!(tag_all(&loaded, &test.seqs).unwrap(), tag_all(&model, &test.seqs).unwrap(), "{variant}");
    }
}

#[test]
fn parallel_and_sequential_tagging_agree() {
    let (_, test, model) = small_model(Variant::IrnnDeep);
    let a = par::map(&test.seqs, |s| model.tag_greedy(s).unwrap());
    let b = par::map_seq(&test.seqs, |s| model.tag_greedy(s).unwrap());
    assert_eq!(a, b);
}
