//! Template-grammar generator for synthetic slot-filling corpora.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::column::{write_column_file, RawSentence};
use crate::error::{Error, Result};
use crate::math::Rng;

const BUILTIN_FLIGHTS: &str = include_str!("../../grammars/flights.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(String),
}

#[derive(Clone, Debug)]
pub struct Grammar {
    pools: BTreeMap<String, Vec<Vec<String>>>,
    slots: BTreeMap<String, String>,
    templates: Vec<Vec<Piece>>,
}

impl Grammar {
    /// The flight-query grammar shipped with the crate.
    pub fn builtin() -> Grammar {
        Grammar::parse(BUILTIN_FLIGHTS).expect("built-in grammar parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Grammar> {
        Grammar::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Grammar> {
        let mut pools = BTreeMap::new();
        let mut slots = BTreeMap::new();
        let mut templates = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::config(format!("grammar line {}: {msg}", i + 1));
            let (head, body) = line.split_once('=').ok_or_else(|| bad("expected `=`"))?;
            let head: Vec<&str> = head.split_whitespace().collect();
            match head.as_slice() {
                ["pool", name] => {
                    let fillers: Vec<Vec<String>> = body
                        .split('|')
                        .map(|f| f.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                        .filter(|f| !f.is_empty())
                        .collect();
                    if fillers.is_empty() {
                        return Err(bad("empty pool"));
                    }
                    pools.insert(name.to_string(), fillers);
                }
                ["slot", label] => {
                    let pool = body.trim();
                    if pool.is_empty() || pool.contains(char::is_whitespace) {
                        return Err(bad("slot needs one pool name"));
                    }
                    slots.insert(label.to_string(), pool.to_string());
                }
                ["template"] => {
                    let pieces: Vec<Piece> = body
                        .split_whitespace()
                        .map(|tok| match tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                            Some(slot) => Piece::Slot(slot.to_string()),
                            None => Piece::Word(tok.to_string()),
                        })
                        .collect();
                    if pieces.is_empty() {
                        return Err(bad("empty template"));
                    }
                    templates.push(pieces);
                }
                _ => return Err(bad("expected `pool NAME`, `slot LABEL` or `template`")),
            }
        }
        if templates.is_empty() {
            return Err(Error::config("grammar has no templates"));
        }
        for (label, pool) in &slots {
            if !pools.contains_key(pool) {
                return Err(Error::config(format!("slot {label} uses unknown pool {pool}")));
            }
        }
        for t in &templates {
            for p in t {
                if let Piece::Slot(s) = p {
                    if !slots.contains_key(s) {
                        return Err(Error::config(format!("template uses undeclared slot {{{s}}}")));
                    }
                }
            }
        }
        Ok(Grammar {
            pools,
            slots,
            templates,
        })
    }

    /// Length in words of the longest filler any slot can receive.
    pub fn max_slot_span(&self) -> usize {
        self.slots
            .values()
            .flat_map(|p| self.pools[p].iter().map(Vec::len))
            .max()
            .unwrap_or(0)
    }

    fn sample(&self, rng: &mut Rng) -> RawSentence {
        let template = self.templates.choose(rng).expect("non-empty templates");
        let mut s = RawSentence {
            words: Vec::new(),
            classes: Some(Vec::new()),
            labels: Vec::new(),
        };
        let classes = s.classes.as_mut().unwrap();
        for piece in template {
            match piece {
                Piece::Word(w) => {
                    s.words.push(w.clone());
                    classes.push(None);
                    s.labels.push("O".to_string());
                }
                Piece::Slot(label) => {
                    let pool = &self.slots[label];
                    let filler = &self.pools[pool][rng.gen_range(0..self.pools[pool].len())];
                    for (k, w) in filler.iter().enumerate() {
                        s.words.push(w.clone());
                        classes.push(Some(pool.clone()));
                        s.labels.push(format!("{label}-{}", if k == 0 { "B" } else { "I" }));
                    }
                }
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    /// `train` sentences with dev and test each a tenth of it (at least one).
    pub fn from_train(train: usize) -> SplitSizes {
        let held = (train / 10).max(1);
        SplitSizes {
            train,
            dev: held,
            test: held,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub train: Vec<RawSentence>,
    pub dev: Vec<RawSentence>,
    pub test: Vec<RawSentence>,
}

impl SyntheticCorpus {
    /// Writes `train.txt`, `dev.txt` and `test.txt` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_column_file(dir.join("train.txt"), &self.train)?;
        write_column_file(dir.join("dev.txt"), &self.dev)?;
        write_column_file(dir.join("test.txt"), &self.test)?;
        Ok(())
    }
}

pub fn generate_synthetic_corpus(grammar: &Grammar, sizes: SplitSizes, rng: &mut Rng) -> Result<SyntheticCorpus> {
    if sizes.train < 1 {
        return Err(Error::config("synthetic corpus size must be at least 1"));
    }
    let mut draw = |n: usize| (0..n).map(|_| grammar.sample(rng)).collect::<Vec<_>>();
    let train = draw(sizes.train);
    let dev = draw(sizes.dev);
    let test = draw(sizes.test);
    Ok(SyntheticCorpus { train, dev, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::bio::{chunks_with_repairs, ChunkScheme};
    use crate::math::rng_from_seed;

    #[test]
    fn builtin_grammar_has_long_slots() {
        let g = Grammar::builtin();
        assert!(g.max_slot_span() >= 3);
    }

    #[test]
    fn zero_size_rejected() {
        let g = Grammar::builtin();
        let sizes = SplitSizes { train: 0, dev: 1, test: 1 };
        assert!(generate_synthetic_corpus(&g, sizes, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn labels_never_need_repair() {
        let g = Grammar::builtin();
        let c = generate_synthetic_corpus(&g, SplitSizes::from_train(500), &mut rng_from_seed(4)).unwrap();
        let mut long = false;
        for s in c.train.iter().chain(&c.dev).chain(&c.test) {
            let (chunks, repairs) = chunks_with_repairs(&s.labels, ChunkScheme::Suffix).unwrap();
            assert_eq!(repairs, 0);
            long |= chunks.iter().any(|c| c.end - c.start + 1 >= 3);
            assert_eq!(s.classes.as_ref().unwrap().len(), s.len());
        }
        assert!(long);
    }

    #[test]
    fn grammar_errors() {
        assert!(Grammar::parse("").is_err());
        assert!(Grammar::parse("template = go to {x}").is_err());
        assert!(Grammar::parse("slot x = nowhere\ntemplate = a").is_err());
        assert!(Grammar::parse("bogus line").is_err());
        let g = Grammar::parse("pool c = a b c\nslot x = c\ntemplate = to {x}").unwrap();
        let s = g.sample(&mut rng_from_seed(0));
        assert_eq!(s.labels, ["O", "x-B", "x-I", "x-I"]);
    }
}
