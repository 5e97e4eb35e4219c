//! Candidate operation set, architecture enumeration, canonicalization, and
//! analytic parameter/FLOPs counting.

pub mod bins;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bins::{assign_bins, bin_index, Bin};

/// One candidate operation. All identity operations compare equal; the kernel
/// exists only for separable convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperationSpec {
    Mha { hidden: usize },
    Ffn { hidden: usize },
    SepConv { hidden: usize, kernel: usize },
    Identity,
}

impl OperationSpec {
    pub fn hidden(&self) -> Option<usize> {
        match self {
            Self::Mha { hidden } | Self::Ffn { hidden } | Self::SepConv { hidden, .. } => {
                Some(*hidden)
            }
            Self::Identity => None,
        }
    }

    pub fn kernel(&self) -> Option<usize> {
        match self {
            Self::SepConv { kernel, .. } => Some(*kernel),
            _ => None,
        }
    }

    /// Head count extends the 64-wide-per-head convention down to small
    /// hidden sizes.
    pub fn heads(&self) -> Option<usize> {
        match self {
            Self::Mha { hidden } => Some((hidden / 64).max(1)),
            _ => None,
        }
    }

    pub fn intermediate(&self) -> Option<usize> {
        match self {
            Self::Ffn { hidden } => Some(4 * hidden),
            _ => None,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }

    /// Weights-only parameter count; biases and normalization excluded.
    pub fn param_count(&self) -> u64 {
        match self {
            Self::Mha { hidden } => 4 * (*hidden as u64) * (*hidden as u64),
            Self::Ffn { hidden } => 2 * (*hidden as u64) * 4 * (*hidden as u64),
            Self::SepConv { hidden, kernel } => {
                let h = *hidden as u64;
                h * h + (*kernel as u64) * h
            }
            Self::Identity => 0,
        }
    }

    /// Analytic multiply-add based FLOPs at batch size 1 (2 per multiply-add).
    pub fn flops_count(&self, seq_len: usize) -> u64 {
        let s = seq_len as u64;
        match self {
            Self::Mha { hidden } => {
                let h = *hidden as u64;
                2 * s * 4 * h * h + 2 * 2 * s * s * h
            }
            Self::Ffn { hidden } => {
                let h = *hidden as u64;
                2 * s * 8 * h * h
            }
            Self::SepConv { hidden, kernel } => {
                let h = *hidden as u64;
                2 * s * (h * h + (*kernel as u64) * h)
            }
            Self::Identity => 0,
        }
    }

    /// Compact token used by architecture text reports: M/F/S{k} with a
    /// hidden-size subscript, bare `I` for identity.
    pub fn token(&self) -> String {
        match self {
            Self::Mha { hidden } => format!("M_{hidden}"),
            Self::Ffn { hidden } => format!("F_{hidden}"),
            Self::SepConv { hidden, kernel } => format!("S{kernel}_{hidden}"),
            Self::Identity => "I".to_string(),
        }
    }
}

/// Ordered list of candidate operations: grouped by hidden size ascending,
/// within a hidden size MHA, FFN, then SepConv by kernel; identity last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSet {
    ops: Vec<OperationSpec>,
    hidden_sizes: Vec<usize>,
}

impl OperationSet {
    pub fn ops(&self) -> &[OperationSpec] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    pub fn index_of(&self, op: &OperationSpec) -> Option<usize> {
        self.ops.iter().position(|o| o == op)
    }

    /// Non-identity operations sharing the given hidden size, in set order.
    pub fn ops_with_hidden(&self, hidden: usize) -> Vec<OperationSpec> {
        self.ops
            .iter()
            .filter(|o| o.hidden() == Some(hidden))
            .copied()
            .collect()
    }

    /// Count of non-identity operation types per hidden size.
    pub fn types_per_hidden(&self) -> usize {
        match self.hidden_sizes.first() {
            Some(&h) => self.ops_with_hidden(h).len(),
            None => 0,
        }
    }
}

/// `(2 + |kernels|) * |hidden_sizes| + 1` operations with identity last.
pub fn build_operation_set(hidden_sizes: &[usize], kernels: &[usize]) -> Result<OperationSet> {
    if hidden_sizes.is_empty() {
        return Err(Error::Config("operation set needs at least one hidden size".into()));
    }
    if hidden_sizes.iter().any(|&h| h == 0) {
        return Err(Error::Config("hidden sizes must be positive".into()));
    }
    if kernels.iter().any(|&k| k % 2 == 0) {
        return Err(Error::Config("kernels must be odd".into()));
    }
    let mut hs = hidden_sizes.to_vec();
    hs.sort_unstable();
    hs.dedup();
    if hs.len() != hidden_sizes.len() {
        return Err(Error::Config("hidden sizes must be distinct".into()));
    }
    let mut ks = kernels.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() != kernels.len() {
        return Err(Error::Config("kernels must be distinct".into()));
    }
    let mut ops = Vec::new();
    for &hidden in &hs {
        ops.push(OperationSpec::Mha { hidden });
        ops.push(OperationSpec::Ffn { hidden });
        for &kernel in &ks {
            ops.push(OperationSpec::SepConv { hidden, kernel });
        }
    }
    ops.push(OperationSpec::Identity);
    Ok(OperationSet { ops, hidden_sizes: hs })
}

/// A full architecture: one operation per supernet layer. Block boundaries
/// come from the run configuration (`layers_per_block`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<OperationSpec>,
}

impl Architecture {
    pub fn new(layers: Vec<OperationSpec>) -> Self {
        Self { layers }
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(|o| o.param_count()).sum()
    }

    pub fn flops_count(&self, seq_len: usize) -> u64 {
        self.layers.iter().map(|o| o.flops_count(seq_len)).sum()
    }

    /// Hidden size of the given block; `None` when every layer is identity.
    pub fn block_hidden(&self, block: usize, layers_per_block: usize) -> Option<usize> {
        self.layers[block * layers_per_block..(block + 1) * layers_per_block]
            .iter()
            .find_map(|o| o.hidden())
    }

    /// Per-block hidden-size consistency among non-identity operations.
    pub fn validate_hidden_consistency(&self, layers_per_block: usize) -> Result<()> {
        if layers_per_block == 0 || self.layers.len() % layers_per_block != 0 {
            return Err(Error::Config(format!(
                "layer count {} not divisible into blocks of {layers_per_block}",
                self.layers.len()
            )));
        }
        for (b, chunk) in self.layers.chunks(layers_per_block).enumerate() {
            let mut hidden = None;
            for op in chunk {
                if let Some(h) = op.hidden() {
                    match hidden {
                        None => hidden = Some(h),
                        Some(prev) if prev != h => {
                            return Err(Error::Validation(format!(
                                "block {b} mixes hidden sizes {prev} and {h}"
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_canonical(&self, layers_per_block: usize) -> bool {
        self.layers.chunks(layers_per_block).all(|chunk| {
            let mut seen_identity = false;
            let mut non_identity = 0usize;
            for op in chunk {
                if op.is_identity() {
                    seen_identity = true;
                } else {
                    non_identity += 1;
                    if seen_identity {
                        return false;
                    }
                }
            }
            non_identity >= 1
        })
    }

    /// Table-style text: embedding token for the first block's hidden size,
    /// then one token per layer.
    pub fn text(&self, layers_per_block: usize) -> String {
        let emb = self.block_hidden(0, layers_per_block).unwrap_or(0);
        let mut parts = vec![format!("E_{emb}")];
        parts.extend(self.layers.iter().map(|o| o.token()));
        parts.join("\u{2192}")
    }
}

/// Move identities to each block's tail, keeping the relative order of
/// non-identity operations; idempotent.
pub fn canonicalize(arch: &Architecture, layers_per_block: usize) -> Result<Architecture> {
    arch.validate_hidden_consistency(layers_per_block)?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for chunk in arch.layers.chunks(layers_per_block) {
        layers.extend(chunk.iter().filter(|o| !o.is_identity()));
        layers.extend(chunk.iter().filter(|o| o.is_identity()));
    }
    Ok(Architecture::new(layers))
}

/// Sub-architecture of a single block together with its stable enumeration id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockArch {
    pub id: u32,
    pub ops: Vec<OperationSpec>,
}

impl BlockArch {
    pub fn hidden(&self) -> Option<usize> {
        self.ops.iter().find_map(|o| o.hidden())
    }

    pub fn param_count(&self) -> u64 {
        self.ops.iter().map(|o| o.param_count()).sum()
    }

    pub fn depth(&self) -> usize {
        self.ops.iter().filter(|o| !o.is_identity()).count()
    }
}

/// All canonical block sub-architectures: one hidden size per block,
/// identities only at the tail, at least one non-identity operation.
/// Deterministic lexicographic order over (hidden size, per-layer op index)
/// gives each sub-architecture its stable id.
pub fn enumerate_block(layers_per_block: usize, op_set: &OperationSet) -> Result<Vec<BlockArch>> {
    if layers_per_block == 0 {
        return Err(Error::Config("layers_per_block must be >= 1".into()));
    }
    let mut out = Vec::new();
    for &hidden in op_set.hidden_sizes() {
        let choices = op_set.ops_with_hidden(hidden);
        if choices.is_empty() {
            continue;
        }
        // Depth-first with identity ordered last: once identity is chosen the
        // rest of the block is identity, which matches lexicographic order
        // over canonical sequences.
        let mut prefix: Vec<OperationSpec> = Vec::with_capacity(layers_per_block);
        emit_block(&choices, layers_per_block, &mut prefix, &mut out);
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(id, ops)| BlockArch { id: id as u32, ops })
        .collect())
}

fn emit_block(
    choices: &[OperationSpec],
    layers: usize,
    prefix: &mut Vec<OperationSpec>,
    out: &mut Vec<Vec<OperationSpec>>,
) {
    if prefix.len() == layers {
        out.push(prefix.clone());
        return;
    }
    for &op in choices {
        prefix.push(op);
        emit_block(choices, layers, prefix, out);
        prefix.pop();
    }
    // identity tail: pad the remainder, excluding the all-identity block
    if !prefix.is_empty() {
        let mut padded = prefix.clone();
        padded.resize(layers, OperationSpec::Identity);
        out.push(padded);
    }
}

/// Closed-form canonical count: `|H| * sum_{k=1..L} T^k`.
pub fn canonical_count(layers_per_block: usize, hidden_count: usize, type_count: usize) -> u128 {
    let mut sum: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..layers_per_block {
        pow *= type_count as u128;
        sum += pow;
    }
    hidden_count as u128 * sum
}

/// Raw count before identity canonicalization: `|H| * (T + 1)^L`.
pub fn raw_count(layers_per_block: usize, hidden_count: usize, type_count: usize) -> u128 {
    hidden_count as u128 * ((type_count + 1) as u128).pow(layers_per_block as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_set() -> OperationSet {
        build_operation_set(&[128, 192, 256, 384, 512], &[3, 5, 7]).unwrap()
    }

    fn desk_set() -> OperationSet {
        build_operation_set(&[16, 32, 64], &[3, 5]).unwrap()
    }

    #[test]
    fn paper_operation_set_has_26_ops() {
        assert_eq!(paper_set().len(), 26);
    }

    #[test]
    fn desk_operation_set_has_13_ops() {
        assert_eq!(desk_set().len(), 13);
    }

    #[test]
    fn minimal_set_has_3_ops() {
        let s = build_operation_set(&[128], &[]).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.ops().last().unwrap().is_identity());
    }

    #[test]
    fn empty_hidden_sizes_rejected() {
        assert!(build_operation_set(&[], &[3]).is_err());
        assert!(build_operation_set(&[128, 128], &[3]).is_err());
        assert!(build_operation_set(&[128], &[4]).is_err());
    }

    #[test]
    fn sepconv_param_formula() {
        let op = OperationSpec::SepConv { hidden: 128, kernel: 3 };
        assert_eq!(op.param_count(), 16768);
    }

    #[test]
    fn weight_matrix_counting_oracle() {
        // FFN H=128: enumerate matrix extents 128x512 + 512x128
        let ffn = OperationSpec::Ffn { hidden: 128 };
        assert_eq!(ffn.param_count(), 128 * 512 + 512 * 128);
        assert_eq!(ffn.param_count(), 131072);
        // MHA H=128: four 128x128 projections
        let mha = OperationSpec::Mha { hidden: 128 };
        assert_eq!(mha.param_count(), 4 * 128 * 128);
        assert_eq!(mha.param_count(), 65536);
        assert_eq!(OperationSpec::Identity.param_count(), 0);
    }

    #[test]
    fn table_row_derivations() {
        assert_eq!(OperationSpec::Ffn { hidden: 128 }.intermediate(), Some(512));
        assert_eq!(OperationSpec::Mha { hidden: 128 }.heads(), Some(2));
        assert_eq!(OperationSpec::Mha { hidden: 512 }.heads(), Some(8));
        assert_eq!(OperationSpec::Mha { hidden: 16 }.heads(), Some(1));
    }

    #[test]
    fn flops_hand_expanded() {
        // FFN H=2, S=1: two matmuls of 2x8 and 8x2 -> 32 MACs -> 64 FLOPs
        assert_eq!(OperationSpec::Ffn { hidden: 2 }.flops_count(1), 64);
        assert_eq!(OperationSpec::Identity.flops_count(128), 0);
    }

    #[test]
    fn flops_monotone_in_seq_len() {
        for op in desk_set().ops() {
            let mut prev = 0;
            for s in 1..16 {
                let f = op.flops_count(s);
                assert!(f >= prev);
                prev = f;
            }
        }
    }

    #[test]
    fn canonicalize_moves_identities_to_tail() {
        let ffn = OperationSpec::Ffn { hidden: 128 };
        let id = OperationSpec::Identity;
        let arch = Architecture::new(vec![ffn, id, ffn, id]);
        let canon = canonicalize(&arch, 4).unwrap();
        assert_eq!(canon.layers, vec![ffn, ffn, id, id]);
        let again = canonicalize(&canon, 4).unwrap();
        assert_eq!(again, canon);
    }

    #[test]
    fn canonicalize_rejects_mixed_hidden() {
        let arch = Architecture::new(vec![
            OperationSpec::Ffn { hidden: 128 },
            OperationSpec::Mha { hidden: 256 },
        ]);
        assert!(canonicalize(&arch, 2).is_err());
    }

    #[test]
    fn paper_block_count() {
        let set = paper_set();
        let archs = enumerate_block(6, &set).unwrap();
        assert_eq!(archs.len(), 97650);
        assert_eq!(canonical_count(6, 5, 5), 97650);
        assert_eq!(raw_count(6, 5, 5), 233280);
    }

    #[test]
    fn desk_block_count() {
        let set = desk_set();
        let archs = enumerate_block(4, &set).unwrap();
        assert_eq!(archs.len(), 1020);
        assert_eq!(canonical_count(4, 3, 4), 1020);
    }

    #[test]
    fn single_layer_excludes_all_identity() {
        let set = build_operation_set(&[128], &[]).unwrap();
        // {FFN, Identity} restricted: keep MHA out by filtering manually is
        // not possible through the builder, so check the closed form and the
        // smallest real set.
        let archs = enumerate_block(1, &set).unwrap();
        assert_eq!(archs.len(), 2); // MHA, FFN; identity-only excluded
        assert!(archs.iter().all(|a| a.depth() == 1));
        assert_eq!(canonical_count(1, 1, 1), 1);
    }

    #[test]
    fn enumeration_ids_are_stable_and_ordered() {
        let set = desk_set();
        let archs = enumerate_block(4, &set).unwrap();
        for (i, a) in archs.iter().enumerate() {
            assert_eq!(a.id as usize, i);
        }
        let again = enumerate_block(4, &set).unwrap();
        assert_eq!(archs, again);
    }

    #[test]
    fn architecture_text_format() {
        let arch = Architecture::new(vec![
            OperationSpec::SepConv { hidden: 16, kernel: 3 },
            OperationSpec::Mha { hidden: 16 },
            OperationSpec::Ffn { hidden: 16 },
            OperationSpec::Identity,
        ]);
        assert_eq!(arch.text(4), "E_16\u{2192}S3_16\u{2192}M_16\u{2192}F_16\u{2192}I");
    }

    #[test]
    fn op_json_shape() {
        let op = OperationSpec::SepConv { hidden: 128, kernel: 5 };
        let js = serde_json::to_value(&op).unwrap();
        assert_eq!(js["kind"], "sep_conv");
        assert_eq!(js["hidden"], 128);
        assert_eq!(js["kernel"], 5);
        let id = serde_json::to_value(OperationSpec::Identity).unwrap();
        assert!(id.get("hidden").is_none());
    }
}
