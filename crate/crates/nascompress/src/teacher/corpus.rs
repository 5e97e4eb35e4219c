//! Character-level corpus handling: vocabulary with special tokens, fixed
//! windows for batching, and BERT-style masking.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
const NUM_SPECIALS: usize = 3;

/// Bundled public-domain text used when no corpus path is configured.
pub const DEFAULT_CORPUS: &str = include_str!("../../data/corpus.txt");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    char_to_id: BTreeMap<char, usize>,
    id_to_char: Vec<Option<char>>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().filter(|c| *c != '\n').collect();
        chars.sort_unstable();
        chars.dedup();
        let mut char_to_id = BTreeMap::new();
        let mut id_to_char = vec![None; NUM_SPECIALS];
        for c in chars {
            char_to_id.insert(c, id_to_char.len());
            id_to_char.push(Some(c));
        }
        Self { char_to_id, id_to_char }
    }

    pub fn size(&self) -> usize {
        self.id_to_char.len()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn encode_char(&self, c: char) -> Option<usize> {
        self.char_to_id.get(&c).copied()
    }

    /// Printable form of a token id; specials render as placeholders.
    pub fn decode_char(&self, id: usize) -> char {
        match id {
            PAD => '_',
            MASK => '#',
            CLS => '^',
            _ => self.id_to_char.get(id).copied().flatten().unwrap_or('?'),
        }
    }

    /// Uniform draw over non-special token ids.
    pub fn random_regular_token(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(NUM_SPECIALS..self.size())
    }
}

/// Tokenized corpus: one document per input line, plus the derived vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub docs: Vec<Vec<usize>>,
    pub vocab: Vocab,
    pub max_seq_len: usize,
}

impl Corpus {
    pub fn from_text(text: &str, max_seq_len: usize) -> Result<Self> {
        if max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        let vocab = Vocab::from_text(text);
        let docs: Vec<Vec<usize>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.chars().filter_map(|c| vocab.encode_char(c)).collect())
            .filter(|d: &Vec<usize>| !d.is_empty())
            .collect();
        if docs.is_empty() {
            return Err(Error::Config("corpus has no non-empty documents".into()));
        }
        Ok(Self { docs, vocab, max_seq_len })
    }

    pub fn from_file(path: &Path, max_seq_len: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, max_seq_len)
    }

    /// Fixed-length windows `[CLS] + (max_seq_len - 1) content chars`;
    /// trailing fragments shorter than a window are dropped so batches never
    /// need padding.
    pub fn windows(&self) -> Vec<Vec<usize>> {
        let body = self.max_seq_len - 1;
        let mut out = Vec::new();
        for doc in &self.docs {
            for chunk in doc.chunks_exact(body) {
                let mut w = Vec::with_capacity(self.max_seq_len);
                w.push(CLS);
                w.extend_from_slice(chunk);
                out.push(w);
            }
        }
        out
    }

    /// Deterministic split: every 20th window is held out as dev (5%).
    pub fn split_windows(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut train = Vec::new();
        let mut dev = Vec::new();
        for (i, w) in self.windows().into_iter().enumerate() {
            if i % 20 == 0 {
                dev.push(w);
            } else {
                train.push(w);
            }
        }
        (train, dev)
    }
}

/// Group windows into `[batch_size]` batches, dropping the ragged tail.
pub fn batches(windows: &[Vec<usize>], batch_size: usize) -> Vec<Vec<Vec<usize>>> {
    windows
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// One masked batch: inputs with mask noise applied, original ids as targets,
/// and the boolean mask of scored positions (flattened row-major `[B * S]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub input_ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    /// Sequences skipped because they held only special tokens.
    pub skipped: usize,
}

/// BERT-style masking: select ~`mask_prob` of the non-special positions per
/// sequence (resampling until at least one is selected); of the selected,
/// 80% become `[MASK]`, 10% a random token, 10% stay unchanged.
pub fn mask_batch(
    batch: &[Vec<usize>],
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
    mask_prob: f64,
) -> Result<MaskedBatch> {
    if batch.is_empty() {
        return Err(Error::State("mask_batch on an empty batch".into()));
    }
    let seq = batch[0].len();
    if batch.iter().any(|s| s.len() != seq) {
        return Err(Error::Shape("ragged sequences in batch".into()));
    }
    let mut input_ids = Vec::with_capacity(batch.len() * seq);
    let mut targets = Vec::with_capacity(batch.len() * seq);
    let mut mask = vec![false; batch.len() * seq];
    let mut skipped = 0usize;
    for (row, seq_ids) in batch.iter().enumerate() {
        input_ids.extend_from_slice(seq_ids);
        targets.extend_from_slice(seq_ids);
        let candidates: Vec<usize> = (0..seq).filter(|&i| !vocab.is_special(seq_ids[i])).collect();
        if candidates.is_empty() {
            skipped += 1;
            eprintln!("warning: sequence {row} holds only special tokens; skipping");
            continue;
        }
        let mut selected: Vec<usize> = Vec::new();
        for _ in 0..10 {
            selected = candidates
                .iter()
                .copied()
                .filter(|_| rng.gen_range(0.0..1.0) < mask_prob)
                .collect();
            if !selected.is_empty() {
                break;
            }
        }
        if selected.is_empty() {
            // floor rule: at least one masked position per sequence
            selected.push(candidates[rng.gen_range(0..candidates.len())]);
        }
        for pos in selected {
            mask[row * seq + pos] = true;
            let roll: f64 = rng.gen_range(0.0..1.0);
            if roll < 0.8 {
                input_ids[row * seq + pos] = MASK;
            } else if roll < 0.9 {
                input_ids[row * seq + pos] = vocab.random_regular_token(rng);
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::State("no maskable position in the whole batch".into()));
    }
    Ok(MaskedBatch { input_ids, targets, mask, batch: batch.len(), seq, skipped })
}

/// Deterministic masked batches for an epoch-independent data order.
pub fn masked_batches(
    windows: &[Vec<usize>],
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
    mask_prob: f64,
) -> Result<Vec<MaskedBatch>> {
    let mut out = Vec::new();
    for (i, b) in batches(windows, batch_size).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(seed, &[0x6d61, i as u64]));
        out.push(mask_batch(b, vocab, &mut rng, mask_prob)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_corpus() -> Corpus {
        Corpus::from_text(DEFAULT_CORPUS, 32).unwrap()
    }

    #[test]
    fn vocab_has_specials_and_chars() {
        let c = small_corpus();
        assert!(c.vocab.size() > 40);
        assert!(c.vocab.is_special(PAD));
        assert!(c.vocab.is_special(MASK));
        assert!(c.vocab.is_special(CLS));
        assert!(!c.vocab.is_special(NUM_SPECIALS));
    }

    #[test]
    fn windows_are_fixed_length_with_cls() {
        let c = small_corpus();
        let ws = c.windows();
        assert!(ws.len() > 800, "got {} windows", ws.len());
        assert!(ws.iter().all(|w| w.len() == 32 && w[0] == CLS));
    }

    #[test]
    fn split_is_a_partition_with_5_percent_dev() {
        let c = small_corpus();
        let (train, dev) = c.split_windows();
        let total = train.len() + dev.len();
        assert_eq!(total, c.windows().len());
        let frac = dev.len() as f64 / total as f64;
        assert!((frac - 0.05).abs() < 0.01, "dev fraction {frac}");
    }

    #[test]
    fn forced_floor_masks_at_least_one_position() {
        let c = small_corpus();
        let window = c.windows()[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // mask_prob = 0 exercises the resample-then-force path
        let mb = mask_batch(&[window], &c.vocab, &mut rng, 0.0).unwrap();
        assert_eq!(mb.mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn masked_fraction_near_15_percent() {
        let c = small_corpus();
        let (train, _) = c.split_windows();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut masked = 0usize;
        let mut candidates = 0usize;
        for b in batches(&train, 8).iter().take(60) {
            let mb = mask_batch(b, &c.vocab, &mut rng, 0.15).unwrap();
            masked += mb.mask.iter().filter(|&&m| m).count();
            candidates += b.iter().flatten().filter(|&&t| !c.vocab.is_special(t)).count();
        }
        assert!(candidates > 10000);
        let frac = masked as f64 / candidates as f64;
        assert!((frac - 0.15).abs() < 0.015, "masked fraction {frac}");
    }

    #[test]
    fn unmasked_positions_are_ignored() {
        let c = small_corpus();
        let window = c.windows()[3].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mb = mask_batch(&[window.clone()], &c.vocab, &mut rng, 0.15).unwrap();
        // targets carry the original ids everywhere; the mask alone decides
        // which of them are scored, and [CLS] is never selected.
        assert_eq!(mb.targets, window);
        assert!(!mb.mask[0]);
    }

    #[test]
    fn all_special_sequence_is_skipped_with_warning() {
        let c = small_corpus();
        let specials = vec![CLS; 8];
        let normal = c.windows()[0][..8].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mb = mask_batch(&[specials, normal], &c.vocab, &mut rng, 0.15).unwrap();
        assert_eq!(mb.skipped, 1);
    }

    #[test]
    fn eighty_ten_ten_split_roughly_holds() {
        let c = small_corpus();
        let (train, _) = c.split_windows();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut to_mask = 0usize;
        let mut changed = 0usize;
        let mut total = 0usize;
        for b in batches(&train, 8).iter().take(60) {
            let mb = mask_batch(b, &c.vocab, &mut rng, 0.15).unwrap();
            for i in 0..mb.mask.len() {
                if mb.mask[i] {
                    total += 1;
                    if mb.input_ids[i] == MASK {
                        to_mask += 1;
                    } else if mb.input_ids[i] != mb.targets[i] {
                        changed += 1;
                    }
                }
            }
        }
        let mask_frac = to_mask as f64 / total as f64;
        assert!((mask_frac - 0.8).abs() < 0.05, "mask fraction {mask_frac}");
        // random replacement can coincide with the original token, so the
        // observably-changed fraction sits at or below 10%
        assert!(changed as f64 / total as f64 <= 0.12);
    }
}
