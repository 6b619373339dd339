//! EM training of the unigram piece inventory: frequency seeding,
//! forward-backward expectation steps, and likelihood-based pruning.

use std::collections::HashMap;

use super::lattice::Lattice;
use super::{SubwordError, SubwordModel, BOUNDARY};

/// Log-probability assigned to pieces whose expected count vanished.
/// exp(-1e4) underflows to exactly zero, so the probability mass still
/// sums to one while the file format stays plain-text friendly.
const VANISHED_LOG: f64 = -1.0e4;

#[derive(Debug, Clone)]
pub struct UnigramTrainOptions {
    /// Maximum piece count of the trained model (special ids excluded).
    pub vocab_size: usize,
    pub em_iters_per_round: usize,
    pub keep_ratio: f64,
    pub max_piece_len: usize,
    /// Seed candidate cap as a multiple of `vocab_size`.
    pub seed_cap_factor: usize,
    /// Characters below this cumulative frequency are left uncovered and
    /// fall back to the unknown id.
    pub char_coverage: f64,
}

impl UnigramTrainOptions {
    pub fn with_vocab_size(vocab_size: usize) -> Self {
        UnigramTrainOptions {
            vocab_size,
            em_iters_per_round: 2,
            keep_ratio: 0.75,
            max_piece_len: 8,
            seed_cap_factor: 20,
            char_coverage: 0.9995,
        }
    }
}

/// Distinct marker-prefixed words with occurrence counts, sorted for
/// deterministic iteration.
pub fn word_counts<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Vec<(String, u64)> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for sentence in sentences {
        for word in sentence.split_whitespace() {
            *counts.entry(format!("{BOUNDARY}{word}")).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(String, u64)> = counts.into_iter().collect();
    words.sort_by(|a, b| a.0.cmp(&b.0));
    words
}

fn covered_chars(words: &[(String, u64)], coverage: f64) -> Vec<char> {
    let mut freq: HashMap<char, u64> = HashMap::new();
    let mut total = 0u64;
    for (word, count) in words {
        for ch in word.chars() {
            *freq.entry(ch).or_insert(0) += count;
            total += count;
        }
    }
    let mut ranked: Vec<(char, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let budget = (coverage * total as f64).ceil() as u64;
    let mut kept = Vec::new();
    let mut acc = 0u64;
    for (ch, count) in ranked {
        if acc >= budget && ch != BOUNDARY {
            break;
        }
        kept.push(ch);
        acc += count;
    }
    kept.sort_unstable();
    kept
}

/// Seed the candidate inventory: every covered character plus the most
/// frequent substrings up to `max_piece_len` characters, capped at
/// `max_seed_size` candidates. Initial log-probabilities come from
/// normalized occurrence frequencies. Substrings may contain the word
/// boundary marker only as their first character.
pub fn seed_vocab(
    sentences: &[&str],
    max_seed_size: usize,
    max_piece_len: usize,
    char_coverage: f64,
) -> Result<SubwordModel, SubwordError> {
    let words = word_counts(sentences.iter().copied());
    seed_vocab_from_words(&words, max_seed_size, max_piece_len, char_coverage)
}

pub(crate) fn seed_vocab_from_words(
    words: &[(String, u64)],
    max_seed_size: usize,
    max_piece_len: usize,
    char_coverage: f64,
) -> Result<SubwordModel, SubwordError> {
    if words.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    let covered = covered_chars(words, char_coverage);
    let is_covered = |c: char| covered.binary_search(&c).is_ok();

    let mut char_freq: HashMap<char, u64> = HashMap::new();
    let mut substr_freq: HashMap<String, u64> = HashMap::new();
    for (word, count) in words {
        let chars: Vec<char> = word.chars().collect();
        for &ch in &chars {
            if is_covered(ch) {
                *char_freq.entry(ch).or_insert(0) += count;
            }
        }
        for start in 0..chars.len() {
            if !is_covered(chars[start]) {
                continue;
            }
            for len in 2..=max_piece_len.min(chars.len() - start) {
                let slice = &chars[start..start + len];
                if slice[1..].iter().any(|&c| c == BOUNDARY || !is_covered(c)) {
                    break;
                }
                let piece: String = slice.iter().collect();
                *substr_freq.entry(piece).or_insert(0) += count;
            }
        }
    }

    let mut candidates: Vec<(String, u64)> = char_freq
        .iter()
        .map(|(c, f)| (c.to_string(), *f))
        .collect();
    candidates.sort_by(|a, b| a.0.cmp(&b.0));
    let singles = candidates.len();

    let mut multis: Vec<(String, u64)> = substr_freq.into_iter().collect();
    multis.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (piece, freq) in multis {
        if candidates.len() >= max_seed_size.max(singles) {
            break;
        }
        candidates.push((piece, freq));
    }

    let total: f64 = candidates.iter().map(|(_, f)| *f as f64).sum();
    let pieces: Vec<(String, f64)> = candidates
        .into_iter()
        .map(|(piece, freq)| (piece, (freq as f64 / total).ln()))
        .collect();
    Ok(SubwordModel::from_pieces(pieces))
}

/// Outcome of one EM iteration.
#[derive(Debug)]
pub struct EmStep {
    pub model: SubwordModel,
    /// Corpus log-likelihood under the *input* model.
    pub log_likelihood: f64,
}

/// One EM iteration: expected piece counts over the segmentation lattice
/// (forward-backward), then re-normalization.
pub fn em_step(model: &SubwordModel, words: &[(String, u64)]) -> Result<EmStep, SubwordError> {
    if words.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    let mut expected = vec![0.0f64; model.piece_count()];
    let mut log_likelihood = 0.0f64;
    for (word, count) in words {
        let lattice = Lattice::build(model, word);
        let log_z = lattice.accumulate_expected(*count as f64, &mut expected);
        log_likelihood += *count as f64 * log_z;
    }
    let total: f64 = expected.iter().sum();
    let pieces: Vec<(String, f64)> = model
        .pieces()
        .iter()
        .zip(&expected)
        .map(|((piece, _), &e)| {
            let p = e / total;
            let lp = if p > 0.0 && p.is_finite() {
                p.ln().max(VANISHED_LOG)
            } else {
                VANISHED_LOG
            };
            (piece.clone(), lp)
        })
        .collect();
    Ok(EmStep {
        model: SubwordModel::from_pieces(pieces),
        log_likelihood,
    })
}

/// Drop the multi-character pieces whose removal least reduces corpus
/// likelihood, keeping `keep_ratio` of them (and never fewer pieces in
/// total than `floor_total`). Single-character pieces are never pruned.
pub fn prune_vocab(
    model: &SubwordModel,
    words: &[(String, u64)],
    keep_ratio: f64,
    floor_total: usize,
) -> SubwordModel {
    let n = model.piece_count();
    let multi: Vec<u32> = (0..n as u32)
        .filter(|&i| model.pieces()[i as usize].0.chars().count() > 1)
        .collect();
    let singles = n - multi.len();
    if multi.is_empty() || keep_ratio >= 1.0 {
        return model.clone();
    }

    // Likelihood loss if each multi-character piece were removed, summed
    // over the words whose lattice actually contains it.
    let mut loss: HashMap<u32, f64> = multi.iter().map(|&i| (i, 0.0)).collect();
    for (word, count) in words {
        let lattice = Lattice::build(model, word);
        let log_z = lattice.log_z();
        let mut present: Vec<u32> = Vec::new();
        for edges in &lattice.starts {
            for edge in edges {
                if let Some(idx) = edge.piece {
                    if model.pieces()[idx as usize].0.chars().count() > 1
                        && !present.contains(&idx)
                    {
                        present.push(idx);
                    }
                }
            }
        }
        for idx in present {
            let without = lattice.log_z_without(idx);
            *loss.get_mut(&idx).unwrap() += *count as f64 * (log_z - without);
        }
    }

    let keep_multi_ratio = ((multi.len() as f64) * keep_ratio).ceil() as usize;
    let keep_multi_floor = floor_total.saturating_sub(singles);
    let keep_multi = keep_multi_ratio.max(keep_multi_floor).min(multi.len());

    // Keep the highest-loss pieces; break ties toward the lexicographically
    // smaller piece for determinism.
    let mut ranked: Vec<u32> = multi.clone();
    ranked.sort_by(|&a, &b| {
        let la = loss[&a];
        let lb = loss[&b];
        lb.partial_cmp(&la)
            .unwrap()
            .then_with(|| model.pieces()[a as usize].0.cmp(&model.pieces()[b as usize].0))
    });
    let kept_multi: Vec<u32> = ranked.into_iter().take(keep_multi).collect();

    let mut pieces: Vec<(String, f64)> = Vec::with_capacity(singles + kept_multi.len());
    for (i, (piece, lp)) in model.pieces().iter().enumerate() {
        if piece.chars().count() == 1 || kept_multi.contains(&(i as u32)) {
            pieces.push((piece.clone(), *lp));
        }
    }
    // Renormalize the remaining mass.
    let total: f64 = pieces.iter().map(|(_, lp)| lp.exp()).sum();
    let log_total = total.ln();
    for (_, lp) in &mut pieces {
        if *lp > VANISHED_LOG {
            *lp -= log_total;
        }
    }
    SubwordModel::from_pieces(pieces)
}

/// Train a unigram subword model: seed, then alternate EM and pruning
/// until the piece count fits `vocab_size`, then a final EM polish.
/// Deterministic: no randomness anywhere in the procedure.
pub fn train_unigram(
    sentences: &[&str],
    options: &UnigramTrainOptions,
) -> Result<SubwordModel, SubwordError> {
    let words = word_counts(sentences.iter().copied());
    if words.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    let covered = covered_chars(&words, options.char_coverage);
    if options.vocab_size < covered.len() {
        return Err(SubwordError::VocabTooSmall {
            vocab_size: options.vocab_size,
            chars: covered.len(),
        });
    }

    let max_seed = options.seed_cap_factor.saturating_mul(options.vocab_size);
    let mut model = seed_vocab_from_words(
        &words,
        max_seed,
        options.max_piece_len,
        options.char_coverage,
    )?;

    loop {
        let mut prev_ll = f64::NEG_INFINITY;
        for _ in 0..options.em_iters_per_round {
            let step = em_step(&model, &words)?;
            if step.log_likelihood + 1e-6 < prev_ll {
                return Err(SubwordError::LikelihoodDecreased {
                    prev: prev_ll,
                    next: step.log_likelihood,
                });
            }
            prev_ll = step.log_likelihood;
            model = step.model;
        }
        if model.piece_count() <= options.vocab_size {
            break;
        }
        model = prune_vocab(&model, &words, options.keep_ratio, options.vocab_size);
    }

    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..options.em_iters_per_round {
        let step = em_step(&model, &words)?;
        if step.log_likelihood + 1e-6 < prev_ll {
            return Err(SubwordError::LikelihoodDecreased {
                prev: prev_ll,
                next: step.log_likelihood,
            });
        }
        prev_ll = step.log_likelihood;
        model = step.model;
    }

    // Final id order: by descending probability, ties lexicographic.
    let mut pieces = model.pieces().to_vec();
    pieces.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    Ok(SubwordModel::from_pieces(pieces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_includes_chars_and_frequent_substrings() {
        let model = seed_vocab(&["aa aa"], 100, 8, 1.0).unwrap();
        let has = |p: &str| model.piece_index(p).is_some();
        assert!(has("a"));
        assert!(has(&BOUNDARY.to_string()));
        assert!(has("aa"));
        assert!(has(&format!("{BOUNDARY}aa")));
        assert!(has(&format!("{BOUNDARY}a")));
        // marker never appears mid-piece
        assert!(model
            .pieces()
            .iter()
            .all(|(p, _)| !p.chars().skip(1).any(|c| c == BOUNDARY)));
    }

    #[test]
    fn seed_single_character_corpus() {
        let model = seed_vocab(&["a"], 10, 8, 1.0).unwrap();
        assert!(model.piece_index("a").is_some());
        assert!(model.piece_index(&BOUNDARY.to_string()).is_some());
        assert_eq!(model.piece_count(), 3); // a, marker, marker+a
    }

    #[test]
    fn seed_respects_cap() {
        let model = seed_vocab(&["abcde abcde fgh"], 8, 8, 1.0).unwrap();
        assert!(model.piece_count() <= 9); // singles may exceed the cap, multis never
        let multis = model
            .pieces()
            .iter()
            .filter(|(p, _)| p.chars().count() > 1)
            .count();
        let singles = model.piece_count() - multis;
        assert!(model.piece_count() <= 8.max(singles));
    }

    #[test]
    fn seed_empty_corpus_is_an_error() {
        assert!(matches!(
            seed_vocab(&[], 10, 8, 1.0),
            Err(SubwordError::EmptyCorpus)
        ));
    }

    #[test]
    fn seed_probabilities_normalize() {
        let model = seed_vocab(&["abab baba"], 50, 8, 1.0).unwrap();
        assert!((model.probability_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn em_single_piece_vocabulary_is_a_fixed_point() {
        let model = SubwordModel::from_pieces(vec![("a".into(), 0.0)]);
        let words = vec![("a".to_string(), 3u64)];
        let step = em_step(&model, &words).unwrap();
        assert_eq!(step.model.pieces()[0].1, 0.0);
        assert!((step.log_likelihood - 0.0).abs() < 1e-12);
    }

    #[test]
    fn em_likelihood_never_decreases() {
        let sentences = ["abab abab ab", "ba ab abab"];
        let mut model = seed_vocab(&sentences, 40, 8, 1.0).unwrap();
        let words = word_counts(sentences.iter().copied());
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..20 {
            let step = em_step(&model, &words).unwrap();
            assert!(
                step.log_likelihood >= prev - 1e-6,
                "likelihood decreased: {prev} -> {}",
                step.log_likelihood
            );
            prev = step.log_likelihood;
            model = step.model;
        }
    }

    #[test]
    fn em_normalizes_after_m_step() {
        let sentences = ["abc cab bca"];
        let model = seed_vocab(&sentences, 30, 8, 1.0).unwrap();
        let words = word_counts(sentences.iter().copied());
        let step = em_step(&model, &words).unwrap();
        assert!((step.model.probability_mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prune_keep_ratio_one_is_identity() {
        let sentences = ["abab ab"];
        let model = seed_vocab(&sentences, 30, 8, 1.0).unwrap();
        let words = word_counts(sentences.iter().copied());
        let pruned = prune_vocab(&model, &words, 1.0, 0);
        assert_eq!(pruned.piece_count(), model.piece_count());
    }

    #[test]
    fn prune_never_drops_single_characters() {
        let sentences = ["abab baba ab ba"];
        let model = seed_vocab(&sentences, 60, 8, 1.0).unwrap();
        let words = word_counts(sentences.iter().copied());
        let pruned = prune_vocab(&model, &words, 0.1, 0);
        for (piece, _) in model.pieces() {
            if piece.chars().count() == 1 {
                assert!(
                    pruned.piece_index(piece).is_some(),
                    "single-char piece {piece:?} was pruned"
                );
            }
        }
        assert!((pruned.probability_mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prune_removes_lowest_loss_piece_first() {
        // Corpus where "ab" carries real probability mass but "bc" is a
        // rarely used alternative; removing "bc" must cost less.
        let sentences = ["ab ab ab ab abc"];
        let words = word_counts(sentences.iter().copied());
        let model = seed_vocab(&sentences, 100, 8, 1.0).unwrap();
        let trained = em_step(&model, &words).unwrap().model;
        // Exhaustive loss for every multi-char piece via full re-scoring.
        let corpus_ll = |m: &SubwordModel| -> f64 {
            words
                .iter()
                .map(|(w, c)| {
                    let lat = Lattice::build(m, w);
                    *c as f64 * lat.log_z()
                })
                .sum()
        };
        let base = corpus_ll(&trained);
        let mut losses: Vec<(String, f64)> = Vec::new();
        for (piece, _) in trained.pieces() {
            if piece.chars().count() <= 1 {
                continue;
            }
            let without: Vec<(String, f64)> = trained
                .pieces()
                .iter()
                .filter(|(p, _)| p != piece)
                .cloned()
                .collect();
            let m = SubwordModel::from_pieces(without);
            losses.push((piece.clone(), base - corpus_ll(&m)));
        }
        losses.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let cheapest = &losses[0].0;

        let multis = trained
            .pieces()
            .iter()
            .filter(|(p, _)| p.chars().count() > 1)
            .count();
        // Prune exactly one multi-char piece.
        let keep = (multis - 1) as f64 / multis as f64;
        let pruned = prune_vocab(&trained, &words, keep - 1e-9, 0);
        assert_eq!(
            pruned.piece_count(),
            trained.piece_count() - 1,
            "expected exactly one piece pruned"
        );
        assert!(
            pruned.piece_index(cheapest).is_none(),
            "cheapest piece {cheapest:?} should have been pruned first"
        );
    }

    #[test]
    fn train_meets_size_contract_and_normalization() {
        let sentences = ["abab abba baab", "aa bb ab ba", "abab abab"];
        let opts = UnigramTrainOptions::with_vocab_size(12);
        let model = train_unigram(&sentences, &opts).unwrap();
        assert!(model.piece_count() <= 12);
        assert!((model.probability_mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn train_favors_repeated_word_pieces() {
        let sentences = ["abab abab abab abab abab abab"];
        let opts = UnigramTrainOptions::with_vocab_size(10);
        let model = train_unigram(&sentences, &opts).unwrap();
        let p = |s: &str| {
            model
                .piece_index(s)
                .map(|i| model.piece_log_prob(i).exp())
                .unwrap_or(0.0)
        };
        let structured = p("abab").max(p("ab")).max(p(&format!("{BOUNDARY}abab")));
        assert!(
            structured > p("a") && structured > p("b"),
            "expected a multi-char piece to dominate: abab={} ab={} a={} b={}",
            p("abab"),
            p("ab"),
            p("a"),
            p("b")
        );
    }

    #[test]
    fn train_is_deterministic() {
        let sentences = ["abc bca cab", "aa bb cc abc"];
        let opts = UnigramTrainOptions::with_vocab_size(15);
        let m1 = train_unigram(&sentences, &opts).unwrap();
        let m2 = train_unigram(&sentences, &opts).unwrap();
        assert_eq!(m1.to_text(), m2.to_text());
    }

    #[test]
    fn train_rejects_vocab_below_char_inventory() {
        let sentences = ["abcdefghij"];
        let opts = UnigramTrainOptions::with_vocab_size(3);
        assert!(matches!(
            train_unigram(&sentences, &opts),
            Err(SubwordError::VocabTooSmall { .. })
        ));
    }
}
