//! Shared fixtures for integration tests: synthetic corpora whose gold spans
//! are exactly the matches of known regex rules, so loop tests have a
//! computable optimum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use mac_core::corpus::{split_corpus, CorpusSplits, GoldLabel, LabeledDoc};
use mac_core::Document;

const FILLER: [&str; 12] = [
    "lorem", "ipsum", "dolor", "amet", "consectetur", "adipiscing", "elit", "sed", "tempor",
    "incididunt", "labore", "magna",
];

pub struct SynthSpec {
    /// Regexes whose matches define the gold spans.
    pub gold_patterns: Vec<String>,
    /// Also mark one filler word per document as gold; no library pattern can
    /// learn it, so error pressure never fully disappears.
    pub noise_gold: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            gold_patterns: vec![r"\d{4}".into(), r"[A-Z]{3}-\d{3}".into()],
            noise_gold: false,
        }
    }
}

/// Generate `n` documents of filler words interleaved with year tokens
/// (`1975`) and id tokens (`QXB-204`); gold = matches of the spec patterns.
pub fn synth_corpus(n: usize, seed: u64, spec: &SynthSpec) -> Vec<LabeledDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regexes: Vec<Regex> = spec
        .gold_patterns
        .iter()
        .map(|p| Regex::new(p).unwrap())
        .collect();
    (0..n)
        .map(|i| {
            let mut tokens: Vec<String> = Vec::new();
            for _ in 0..rng.gen_range(10..16) {
                tokens.push(FILLER[rng.gen_range(0..FILLER.len())].to_string());
            }
            for _ in 0..rng.gen_range(1..4) {
                tokens.push(format!("{}", rng.gen_range(1900..2100)));
            }
            for _ in 0..rng.gen_range(1..3) {
                let letters: String = (0..3)
                    .map(|_| (b'A' + rng.gen_range(0..26u8)) as char)
                    .collect();
                tokens.push(format!("{letters}-{}", rng.gen_range(100..1000)));
            }
            // Keep token order itself random.
            for k in (1..tokens.len()).rev() {
                tokens.swap(k, rng.gen_range(0..=k));
            }
            let text = tokens.join(" ");
            let mut phrases: Vec<String> = regexes
                .iter()
                .flat_map(|re| re.find_iter(&text).map(|m| m.as_str().to_string()))
                .collect();
            if spec.noise_gold {
                if let Some(word) = tokens.iter().find(|t| FILLER.contains(&t.as_str())) {
                    phrases.push(word.clone());
                }
            }
            LabeledDoc {
                doc: Document {
                    id: format!("d{i:03}"),
                    text,
                },
                gold: GoldLabel {
                    doc_id: format!("d{i:03}"),
                    phrases,
                    groups: None,
                },
            }
        })
        .collect()
}

pub fn synth_splits(n: usize, seed: u64, spec: &SynthSpec, sizes: (usize, usize, usize)) -> CorpusSplits {
    let records = synth_corpus(n, seed, spec);
    split_corpus(records, sizes.0, sizes.1, sizes.2, seed).unwrap()
}
