//! Token/index maps for words, classes, characters and labels.
//!
//! Reserved entries: words and classes start with `<unk>`, `<s>`, `</s>`
//! (classes also `<none>` for the `-` column value); characters start with
//! `<unk>`, `<pad>`. Labels keep real labels at `0..num_labels` so output
//! rows map one-to-one onto them, followed by `<bol>` (history before the
//! first position) and `<unk>` (gold labels never seen in training).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::column::RawSentence;
use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CLASS_NONE: usize = 3;
pub const CHAR_PAD: usize = 1;

const FORMAT_HEADER: &str = "irnn-vocab 1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Section {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Section {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Section { tokens, index })
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabOptions {
    pub min_count: usize,
    pub lowercase: bool,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            min_count: 1,
            lowercase: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VocabStats {
    pub tokens: usize,
    pub word_types: usize,
    pub kept_word_types: usize,
    /// Training tokens that encode as `<unk>` because of `min_count`.
    pub unk_tokens: usize,
    pub label_types: usize,
    pub class_types: usize,
    pub char_types: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub words: Section,
    pub classes: Section,
    pub chars: Section,
    pub labels: Section,
    num_labels: usize,
    lowercase: bool,
}

impl Vocabulary {
    pub fn build(sentences: &[RawSentence], opts: VocabOptions) -> Result<(Self, VocabStats)> {
        if sentences.is_empty() {
            return Err(Error::config("cannot build a vocabulary from an empty training set"));
        }
        let mut word_counts: HashMap<String, usize> = HashMap::new();
        let mut classes: BTreeMap<String, ()> = BTreeMap::new();
        let mut chars: BTreeMap<String, ()> = BTreeMap::new();
        let mut labels: BTreeMap<String, ()> = BTreeMap::new();
        let mut tokens = 0;
        for s in sentences {
            for w in &s.words {
                tokens += 1;
                *word_counts.entry(normalize(w, opts.lowercase)).or_default() += 1;
                for c in w.chars() {
                    chars.insert(c.to_string(), ());
                }
            }
            if let Some(cs) = &s.classes {
                for c in cs.iter().flatten() {
                    classes.insert(c.clone(), ());
                }
            }
            for l in &s.labels {
                labels.insert(l.clone(), ());
            }
        }

        let mut kept: Vec<(&String, &usize)> = word_counts.iter().filter(|(_, &c)| c >= opts.min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let unk_tokens = word_counts
            .values()
            .filter(|&&c| c < opts.min_count)
            .sum();

        let reserved = |extra: &[&str]| -> Vec<String> {
            ["<unk>", "<s>", "</s>"].iter().chain(extra).map(|s| s.to_string()).collect()
        };
        let mut word_tokens = reserved(&[]);
        word_tokens.extend(kept.iter().map(|(w, _)| (*w).clone()));
        let mut class_tokens = reserved(&["<none>"]);
        class_tokens.extend(classes.into_keys());
        let mut char_tokens = vec!["<unk>".to_string(), "<pad>".to_string()];
        char_tokens.extend(chars.into_keys());
        let num_labels = labels.len();
        let mut label_tokens: Vec<String> = labels.into_keys().collect();
        label_tokens.push("<bol>".into());
        label_tokens.push("<unk>".into());

        let stats = VocabStats {
            tokens,
            word_types: word_counts.len(),
            kept_word_types: kept.len(),
            unk_tokens,
            label_types: num_labels,
            class_types: class_tokens.len() - 4,
            char_types: char_tokens.len() - 2,
        };
        let vocab = Vocabulary {
            words: Section::from_tokens(word_tokens)?,
            classes: Section::from_tokens(class_tokens)?,
            chars: Section::from_tokens(char_tokens)?,
            labels: Section::from_tokens(label_tokens)?,
            num_labels,
            lowercase: opts.lowercase,
        };
        Ok((vocab, stats))
    }

    /// Number of predictable labels (rows of the output layer).
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Label-history filler before the first position.
    pub fn bol(&self) -> usize {
        self.num_labels
    }

    pub fn label_unk(&self) -> usize {
        self.num_labels + 1
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn normalize_word(&self, w: &str) -> String {
        normalize(w, self.lowercase)
    }

    pub fn word_index(&self, w: &str) -> usize {
        self.words.get(&self.normalize_word(w)).unwrap_or(UNK)
    }

    pub fn label_name(&self, i: usize) -> &str {
        self.labels.token(i)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(out, "lowercase\t{}", self.lowercase);
        let _ = writeln!(out, "num_labels\t{}", self.num_labels);
        for (name, section) in self.sections() {
            let _ = writeln!(out, "[{name}]\t{}", section.len());
            for (i, t) in section.tokens.iter().enumerate() {
                let _ = writeln!(out, "{i}\t{t}");
            }
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::data(format!("vocabulary line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, FORMAT_HEADER)) => {}
            _ => return Err(bad(0, "missing or unsupported format header")),
        }
        let mut field = |key: &str| -> Result<String> {
            let (i, line) = lines.next().ok_or_else(|| bad(0, "truncated"))?;
            match line.split_once('\t') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(bad(i, &format!("expected {key}"))),
            }
        };
        let lowercase = field("lowercase")?.parse::<bool>().map_err(|_| bad(1, "bad lowercase flag"))?;
        let num_labels = field("num_labels")?.parse::<usize>().map_err(|_| bad(2, "bad num_labels"))?;

        let mut sections = Vec::new();
        for name in ["words", "classes", "chars", "labels"] {
            let (i, header) = lines.next().ok_or_else(|| bad(0, "truncated"))?;
            let count = header
                .strip_prefix(&format!("[{name}]\t"))
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| bad(i, &format!("expected [{name}] header")))?;
            let mut tokens = Vec::with_capacity(count);
            for k in 0..count {
                let (i, line) = lines.next().ok_or_else(|| bad(0, "truncated"))?;
                let (idx, tok) = line.split_once('\t').ok_or_else(|| bad(i, "expected index<TAB>token"))?;
                if idx.parse::<usize>().ok() != Some(k) {
                    return Err(bad(i, "indices must be consecutive"));
                }
                tokens.push(tok.to_string());
            }
            sections.push(Section::from_tokens(tokens)?);
        }
        let labels = sections.pop().unwrap();
        let chars = sections.pop().unwrap();
        let classes = sections.pop().unwrap();
        let words = sections.pop().unwrap();
        if labels.len() != num_labels + 2 || words.len() < 3 || classes.len() < 4 || chars.len() < 2 {
            return Err(Error::data("vocabulary is missing reserved entries"));
        }
        Ok(Vocabulary {
            words,
            classes,
            chars,
            labels,
            num_labels,
            lowercase,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::deserialize(&fs::read_to_string(path)?)
    }

    /// 64-bit FNV-1a over the serialized form.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.serialize().as_bytes())
    }

    fn sections(&self) -> [(&'static str, &Section); 4] {
        [
            ("words", &self.words),
            ("classes", &self.classes),
            ("chars", &self.chars),
            ("labels", &self.labels),
        ]
    }
}

fn normalize(w: &str, lowercase: bool) -> String {
    if lowercase {
        w.to_lowercase()
    } else {
        w.to_string()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::column::parse_columns;

    fn corpus() -> Vec<RawSentence> {
        parse_columns("a\tX-B\nb\tX-I\n\nc\tO\na\tY-B\n").unwrap()
    }

    #[test]
    fn reserved_plus_types() {
        let (v, stats) = Vocabulary::build(&corpus(), VocabOptions::default()).unwrap();
        assert_eq!(v.words.len(), 3 + 3);
        assert_eq!(v.num_labels(), 4);
        assert_eq!(v.labels.len(), 6);
        assert_eq!(v.label_name(v.bol()), "<bol>");
        assert_eq!(stats.word_types, 3);
        assert_eq!(stats.unk_tokens, 0);
        // most frequent first
        assert_eq!(v.words.token(3), "a");
    }

    #[test]
    fn min_count_sends_rare_words_to_unk() {
        let opts = VocabOptions { min_count: 2, lowercase: true };
        let (v, stats) = Vocabulary::build(&corpus(), opts).unwrap();
        assert_eq!(v.words.len(), 4);
        assert_eq!(v.word_index("b"), UNK);
        assert_eq!(stats.unk_tokens, 2);
    }

    #[test]
    fn lowercasing_is_configurable() {
        let s = parse_columns("Delta\tO\n").unwrap();
        let (v, _) = Vocabulary::build(&s, VocabOptions::default()).unwrap();
        assert_ne!(v.word_index("DELTA"), UNK);
        assert!(v.chars.get("D").is_some());
        let (v, _) = Vocabulary::build(&s, VocabOptions { min_count: 1, lowercase: false }).unwrap();
        assert_eq!(v.word_index("delta"), UNK);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(Vocabulary::build(&[], VocabOptions::default()).is_err());
    }

    #[test]
    fn serialization_round_trip_and_hash() {
        let s = parse_columns("Delta\tairline\tX-B\nto\t-\tO\n").unwrap();
        let (v, _) = Vocabulary::build(&s, VocabOptions::default()).unwrap();
        let text = v.serialize();
        let back = Vocabulary::deserialize(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocabulary::deserialize(&text[..text.len() / 2]).is_err());
        assert!(Vocabulary::deserialize("irnn-vocab 9\n").is_err());
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
