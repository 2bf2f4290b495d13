//! Corpora, shared character vocabulary, batch sampling, and the
//! domain-shift schedule.
//!
//! The vocabulary is built once over the union of all domains in a run, so a
//! shift changes the data distribution but never the token space. Synthetic
//! corpora are bit-deterministic in `(kind, seed, length)`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A named character corpus.
#[derive(Clone, Debug)]
pub struct Domain {
    pub name: String,
    pub corpus: String,
}

/// Ordered distinct characters across all domains of a run.
#[derive(Clone, Debug)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Union of characters over all domains, sorted by code point.
    pub fn build(domains: &[Domain]) -> Result<Vocab> {
        if domains.is_empty() {
            return Err(Error::Config("no domains loaded".into()));
        }
        for d in domains {
            if d.corpus.is_empty() {
                return Err(Error::Config(format!("domain '{}' has an empty corpus", d.name)));
            }
        }
        let mut chars: Vec<char> = domains
            .iter()
            .flat_map(|d| d.corpus.chars())
            .collect::<std::collections::BTreeSet<char>>()
            .into_iter()
            .collect();
        chars.sort_unstable();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Vocab { chars, index })
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("character {:?} not in vocabulary", c)))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.chars[i]).collect()
    }
}

/// Piecewise-constant domain schedule; each shift takes effect AT its step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftSchedule {
    initial: String,
    shifts: Vec<(u64, String)>,
}

impl ShiftSchedule {
    pub fn new(initial: impl Into<String>, shifts: Vec<(u64, String)>) -> Result<Self> {
        for w in shifts.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "shift steps must be strictly increasing, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(ShiftSchedule { initial: initial.into(), shifts })
    }

    pub fn initial(&self) -> &str {
        &self.initial
    }

    pub fn shifts(&self) -> &[(u64, String)] {
        &self.shifts
    }

    pub fn active_domain(&self, step: u64) -> &str {
        let mut active = self.initial.as_str();
        for (at, name) in &self.shifts {
            if step >= *at {
                active = name;
            } else {
                break;
            }
        }
        active
    }

    /// Domain names in schedule order, deduplicated.
    pub fn domain_names(&self) -> Vec<&str> {
        let mut names = vec![self.initial.as_str()];
        for (_, n) in &self.shifts {
            if !names.contains(&n.as_str()) {
                names.push(n);
            }
        }
        names
    }
}

/// `(inputs, targets)` of shape `batch_size x context_len`; targets are the
/// inputs shifted by one character.
pub fn sample_batch(
    ids: &[usize],
    rng: &mut ChaCha8Rng,
    context_len: usize,
    batch_size: usize,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if ids.len() < context_len + 1 {
        return Err(Error::Config(format!(
            "corpus too short: {} tokens for context {}",
            ids.len(),
            context_len
        )));
    }
    let max_start = ids.len() - context_len - 1;
    let mut xs = Vec::with_capacity(batch_size);
    let mut ys = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let o = rng.gen_range(0..=max_start);
        xs.push(ids[o..o + context_len].to_vec());
        ys.push(ids[o + 1..o + context_len + 1].to_vec());
    }
    Ok((xs, ys))
}

/// Kind of synthetic corpus generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    ProseLike,
    CodeLike,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<SynthKind> {
        match s {
            "prose_like" => Ok(SynthKind::ProseLike),
            "code_like" => Ok(SynthKind::CodeLike),
            other => Err(Error::Usage(format!(
                "unknown corpus kind '{}', expected prose_like or code_like",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SynthKind::ProseLike => "prose_like",
            SynthKind::CodeLike => "code_like",
        }
    }
}

/// Deterministic synthetic corpus of at least `length` characters.
pub fn generate_synthetic_domain(kind: SynthKind, seed: u64, length: usize) -> Domain {
    let corpus = match kind {
        SynthKind::ProseLike => prose_like(seed, length),
        SynthKind::CodeLike => code_like(seed, length),
    };
    Domain { name: kind.as_str().to_string(), corpus }
}

/// Zipf-weighted lowercase word stream with spaces and periods.
fn prose_like(seed: u64, length: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_words = 400;
    let letters: Vec<char> = ('a'..='z').collect();
    let mut bank = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let len = rng.gen_range(2..=9);
        let w: String = (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
        bank.push(w);
    }
    // cumulative Zipf weights, exponent 1.1
    let weights: Vec<f64> = (0..n_words).map(|i| 1.0 / ((i + 1) as f64).powf(1.1)).collect();
    let total: f64 = weights.iter().sum();
    let mut cum = Vec::with_capacity(n_words);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cum.push(acc);
    }

    let mut out = String::with_capacity(length + 16);
    let mut words_in_sentence = 0;
    while out.len() < length {
        let u: f64 = rng.gen();
        let idx = cum.partition_point(|&c| c < u).min(n_words - 1);
        out.push_str(&bank[idx]);
        words_in_sentence += 1;
        if words_in_sentence >= 4 && rng.gen_bool(0.18) {
            out.push('.');
            out.push(' ');
            words_in_sentence = 0;
        } else {
            out.push(' ');
        }
    }
    out
}

/// Nested bracket/keyword/identifier stream with newlines and indentation.
fn code_like(seed: u64, length: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idents = ["x", "y", "acc", "val", "item", "node", "buf", "idx", "tmp", "out"];
    let funcs = ["get", "push", "scan", "fold", "emit", "next", "read", "wrap"];

    let mut out = String::with_capacity(length + 64);
    let mut depth: usize = 0;
    while out.len() < length {
        for _ in 0..(4 * depth) {
            out.push(' ');
        }
        let roll = rng.gen_range(0..10);
        if depth == 0 || (roll < 3 && depth < 4) {
            // open a block
            match rng.gen_range(0..3) {
                0 => {
                    let f = funcs[rng.gen_range(0..funcs.len())];
                    let a = idents[rng.gen_range(0..idents.len())];
                    out.push_str(&format!("fn {}({}) {{\n", f, a));
                }
                1 => {
                    let a = idents[rng.gen_range(0..idents.len())];
                    let n = rng.gen_range(0..100);
                    out.push_str(&format!("if {} < {} {{\n", a, n));
                }
                _ => {
                    let a = idents[rng.gen_range(0..idents.len())];
                    out.push_str(&format!("while {} > 0 {{\n", a));
                }
            }
            depth += 1;
        } else if roll < 8 {
            // statement
            let a = idents[rng.gen_range(0..idents.len())];
            let b = idents[rng.gen_range(0..idents.len())];
            let f = funcs[rng.gen_range(0..funcs.len())];
            match rng.gen_range(0..3) {
                0 => out.push_str(&format!("let {} = {}({}, {});\n", a, f, b, rng.gen_range(0..100))),
                1 => out.push_str(&format!("{} = {} + {};\n", a, b, rng.gen_range(0..10))),
                _ => out.push_str(&format!("return {};\n", a)),
            }
        } else {
            out.push_str("}\n");
            depth -= 1;
        }
    }
    while depth > 0 {
        depth -= 1;
        for _ in 0..(4 * depth) {
            out.push(' ');
        }
        out.push_str("}\n");
    }
    out
}

/// Total-variation distance between character unigram distributions.
pub fn unigram_tv_distance(a: &str, b: &str) -> f64 {
    let hist = |s: &str| -> HashMap<char, f64> {
        let mut h = HashMap::new();
        let n = s.chars().count() as f64;
        for c in s.chars() {
            *h.entry(c).or_insert(0.0) += 1.0 / n;
        }
        h
    };
    let ha = hist(a);
    let hb = hist(b);
    let mut keys: Vec<char> = ha.keys().chain(hb.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    0.5 * keys
        .iter()
        .map(|k| (ha.get(k).unwrap_or(&0.0) - hb.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dom(name: &str, corpus: &str) -> Domain {
        Domain { name: name.into(), corpus: corpus.into() }
    }

    #[test]
    fn vocab_single_domain() {
        let v = Vocab::build(&[dom("d", "aba")]).unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(v.decode(&[0, 1]), "ab");
    }

    #[test]
    fn vocab_union_of_domains() {
        let v = Vocab::build(&[dom("x", "ab"), dom("y", "bc")]).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.decode(&[0, 1, 2]), "abc");
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::build(&[dom("x", "abc")]).unwrap();
        let ids = v.encode("cab").unwrap();
        assert_eq!(v.decode(&ids), "cab");
    }

    #[test]
    fn vocab_empty_corpus_is_config_error() {
        assert!(matches!(Vocab::build(&[dom("x", "")]), Err(Error::Config(_))));
        assert!(matches!(Vocab::build(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn active_domain_shifts_at_listed_step() {
        let s = ShiftSchedule::new(
            "data_char",
            vec![(1500, "data_code".into()), (3000, "data_char".into())],
        )
        .unwrap();
        assert_eq!(s.active_domain(0), "data_char");
        assert_eq!(s.active_domain(1499), "data_char");
        assert_eq!(s.active_domain(1500), "data_code");
        assert_eq!(s.active_domain(2999), "data_code");
        assert_eq!(s.active_domain(3000), "data_char");
        assert_eq!(s.active_domain(9999), "data_char");
    }

    #[test]
    fn schedule_requires_increasing_steps() {
        let err = ShiftSchedule::new("a", vec![(10, "b".into()), (10, "c".into())]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn sample_batch_is_deterministic_and_in_range() {
        let ids: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let (x1, y1) = sample_batch(&ids, &mut r1, 16, 4).unwrap();
        let (x2, y2) = sample_batch(&ids, &mut r2, 16, 4).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(y1, y2);
        assert_eq!(x1.len(), 4);
        assert!(x1.iter().all(|row| row.len() == 16));
        assert!(x1.iter().flatten().all(|&t| t < 5));
        // targets are inputs shifted by one
        assert_eq!(&x1[0][1..], &y1[0][..15]);
    }

    #[test]
    fn sample_batch_too_short_is_config_error() {
        let ids = vec![0usize; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_batch(&ids, &mut rng, 16, 2), Err(Error::Config(_))));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = generate_synthetic_domain(SynthKind::ProseLike, 9, 12_000);
        let b = generate_synthetic_domain(SynthKind::ProseLike, 9, 12_000);
        assert_eq!(a.corpus, b.corpus);
        let c = generate_synthetic_domain(SynthKind::CodeLike, 9, 12_000);
        let d = generate_synthetic_domain(SynthKind::CodeLike, 9, 12_000);
        assert_eq!(c.corpus, d.corpus);
        assert!(a.corpus.len() >= 12_000);
        assert!(c.corpus.len() >= 12_000);
    }

    #[test]
    fn prose_has_no_braces_code_does() {
        let p = generate_synthetic_domain(SynthKind::ProseLike, 1, 20_000);
        let c = generate_synthetic_domain(SynthKind::CodeLike, 1, 20_000);
        assert!(!p.corpus.contains('{') && !p.corpus.contains('}'));
        assert!(c.corpus.contains('{') && c.corpus.contains('}'));
    }

    #[test]
    fn unigram_distributions_differ() {
        let p = generate_synthetic_domain(SynthKind::ProseLike, 2, 20_000);
        let c = generate_synthetic_domain(SynthKind::CodeLike, 2, 20_000);
        let tv = unigram_tv_distance(&p.corpus, &c.corpus);
        assert!(tv >= 0.3, "tv distance too small: {}", tv);
    }

    #[test]
    fn unknown_kind_is_usage_error() {
        assert!(matches!(SynthKind::parse("bogus"), Err(Error::Usage(_))));
    }
}
