//! Bundled synthetic bilingual dataset: a reversible word-mapped
//! "translation" language plus two vocabulary-shifted domains, so the
//! whole experiment matrix runs in minutes without external downloads.

use std::io;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Split};

#[derive(Debug, Clone)]
pub struct ToyDataSpec {
    pub seed: u64,
    pub general_train: usize,
    pub general_dev: usize,
    pub general_test: usize,
    pub domain_train: usize,
    pub domain_dev: usize,
    pub domain_test: usize,
    /// Shared vocabulary size of the general language.
    pub general_vocab: usize,
    /// Extra domain-only words per domain.
    pub domain_extra_vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a sentence carries a comma after some word.
    pub comma_prob: f64,
}

impl Default for ToyDataSpec {
    fn default() -> Self {
        ToyDataSpec {
            seed: 42,
            general_train: 600,
            general_dev: 48,
            general_test: 48,
            domain_train: 120,
            domain_dev: 32,
            domain_test: 32,
            general_vocab: 20,
            domain_extra_vocab: 10,
            min_words: 3,
            max_words: 6,
            comma_prob: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySplits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub general: ToySplits,
    /// ("alpha", splits) and ("beta", splits); each domain mixes general
    /// words with its own otherwise-unseen vocabulary.
    pub domains: Vec<(String, ToySplits)>,
}

const CONSONANTS: [char; 8] = ['k', 't', 'n', 'm', 's', 'r', 'l', 'p'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())]);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w
}

fn make_vocab(rng: &mut ChaCha8Rng, size: usize, taken: &mut Vec<String>) -> Vec<String> {
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let w = make_word(rng);
        if !taken.contains(&w) {
            taken.push(w.clone());
            words.push(w);
        }
    }
    words
}

/// The "translation" of a source word: its characters reversed plus a
/// fixed suffix, which makes the mapping bijective and the target
/// vocabulary disjoint from the source one.
pub fn translate_word(word: &str) -> String {
    let mut t: String = word.chars().rev().collect();
    t.push('x');
    t
}

struct SentenceSampler<'a> {
    general: &'a [String],
    domain: Option<&'a [String]>,
    min_words: usize,
    max_words: usize,
    comma_prob: f64,
}

impl SentenceSampler<'_> {
    fn sample(&self, rng: &mut ChaCha8Rng) -> (String, String) {
        let len = rng.gen_range(self.min_words..=self.max_words);
        let comma_at = if len >= 3 && rng.gen_bool(self.comma_prob) {
            Some(rng.gen_range(1..len - 1))
        } else {
            None
        };
        let mut src_words = Vec::with_capacity(len);
        let mut tgt_words = Vec::with_capacity(len);
        // Words are drawn without replacement: repetition-free sentences
        // keep source positions distinguishable for attention.
        let mut used: Vec<&String> = Vec::with_capacity(len);
        for i in 0..len {
            let word = loop {
                let candidate = match self.domain {
                    Some(extra) if rng.gen_bool(0.5) => &extra[rng.gen_range(0..extra.len())],
                    _ => &self.general[rng.gen_range(0..self.general.len())],
                };
                if !used.contains(&candidate) {
                    break candidate;
                }
            };
            used.push(word);
            let mut s = word.clone();
            let mut t = translate_word(word);
            if comma_at == Some(i) {
                s.push(',');
                t.push(',');
            }
            src_words.push(s);
            tgt_words.push(t);
        }
        (src_words.join(" "), tgt_words.join(" "))
    }

    fn corpus(&self, rng: &mut ChaCha8Rng, n: usize, domain: &str, split: Split) -> Corpus {
        Corpus::from_pairs((0..n).map(|_| self.sample(rng)), domain, split)
    }
}

pub fn generate(spec: &ToyDataSpec) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = Vec::new();
    let general_vocab = make_vocab(&mut rng, spec.general_vocab, &mut taken);
    let alpha_vocab = make_vocab(&mut rng, spec.domain_extra_vocab, &mut taken);
    let beta_vocab = make_vocab(&mut rng, spec.domain_extra_vocab, &mut taken);

    let general_sampler = SentenceSampler {
        general: &general_vocab,
        domain: None,
        min_words: spec.min_words,
        max_words: spec.max_words,
        comma_prob: spec.comma_prob,
    };
    let general = ToySplits {
        train: general_sampler.corpus(&mut rng, spec.general_train, "general", Split::Train),
        dev: general_sampler.corpus(&mut rng, spec.general_dev, "general", Split::Dev),
        test: general_sampler.corpus(&mut rng, spec.general_test, "general", Split::Test),
    };

    let mut domains = Vec::new();
    for (name, vocab) in [("alpha", &alpha_vocab), ("beta", &beta_vocab)] {
        let sampler = SentenceSampler {
            general: &general_vocab,
            domain: Some(vocab),
            min_words: spec.min_words,
            max_words: spec.max_words,
            comma_prob: spec.comma_prob,
        };
        let splits = ToySplits {
            train: sampler.corpus(&mut rng, spec.domain_train, name, Split::Train),
            dev: sampler.corpus(&mut rng, spec.domain_dev, name, Split::Dev),
            test: sampler.corpus(&mut rng, spec.domain_test, name, Split::Test),
        };
        domains.push((name.to_string(), splits));
    }
    ToyDataset { general, domains }
}

impl ToyDataset {
    /// Write all splits as aligned `<name>-<split>.src/.tgt` files.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        let save = |corpus: &Corpus, base: String| -> io::Result<()> {
            corpus
                .save(&dir.join(base))
                .map_err(|e| io::Error::other(e.to_string()))
        };
        save(&self.general.train, "general-train".into())?;
        save(&self.general.dev, "general-dev".into())?;
        save(&self.general.test, "general-test".into())?;
        for (name, splits) in &self.domains {
            save(&splits.train, format!("{name}-train"))?;
            save(&splits.dev, format!("{name}-dev"))?;
            save(&splits.test, format!("{name}-test"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{token_coverage, Side};

    #[test]
    fn generation_is_deterministic() {
        let spec = ToyDataSpec::default();
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.general.train.pairs, b.general.train.pairs);
        assert_eq!(a.domains[0].1.dev.pairs, b.domains[0].1.dev.pairs);
    }

    #[test]
    fn sizes_match_spec() {
        let spec = ToyDataSpec::default();
        let data = generate(&spec);
        assert_eq!(data.general.train.len(), spec.general_train);
        assert_eq!(data.general.dev.len(), spec.general_dev);
        assert_eq!(data.domains.len(), 2);
        assert_eq!(data.domains[0].1.train.len(), spec.domain_train);
    }

    #[test]
    fn word_mapping_is_reversible() {
        assert_eq!(translate_word("kani"), "inakx");
        // distinct words map to distinct translations
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut taken = Vec::new();
        let vocab = make_vocab(&mut rng, 20, &mut taken);
        let mut targets: Vec<String> = vocab.iter().map(|w| translate_word(w)).collect();
        targets.sort();
        targets.dedup();
        assert_eq!(targets.len(), 20);
    }

    #[test]
    fn domain_coverage_is_partial() {
        let data = generate(&ToyDataSpec::default());
        let report = token_coverage(
            &data.general.train,
            &data.domains[0].1.train,
            Side::Source,
        )
        .unwrap();
        assert!(
            report.unique_pct < 95.0,
            "domain vocabulary should be partly unseen, got {}%",
            report.unique_pct
        );
        assert!(report.unique_pct > 20.0);
    }

    #[test]
    fn target_is_word_mapped_source() {
        let data = generate(&ToyDataSpec::default());
        for pair in data.general.train.pairs.iter().take(20) {
            let src_words: Vec<&str> = pair.source.split_whitespace().collect();
            let tgt_words: Vec<&str> = pair.target.split_whitespace().collect();
            assert_eq!(src_words.len(), tgt_words.len());
            for (s, t) in src_words.iter().zip(&tgt_words) {
                let s_clean = s.trim_end_matches(',');
                let t_clean = t.trim_end_matches(',');
                assert_eq!(translate_word(s_clean), t_clean);
            }
        }
    }
}
