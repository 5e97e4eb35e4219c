//! Parameter/latency bins over a block's sub-architectures. Bin `b` of `B`
//! covers parameters in `((b-1)/B * p_t, b/B * p_t]` where `p_t` belongs to
//! the largest architecture in the space; an architecture whose latency
//! exceeds its bin's latency bound is dropped entirely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::searchspace::BlockArch;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bin {
    /// 1-based bin index.
    pub index: usize,
    pub param_lo: u64,
    pub param_hi: u64,
    pub latency_lo_ms: f64,
    pub latency_hi_ms: f64,
    /// Member architecture ids, ascending.
    pub members: Vec<u32>,
}

/// Bin index for parameter count `p` given the largest count `p_t`:
/// the smallest `b` with `B * p <= b * p_t`, computed exactly in integers.
pub fn bin_index(p: u64, p_t: u64, num_bins: usize) -> usize {
    let b = num_bins as u64;
    (((p as u128 * b as u128) + p_t as u128 - 1) / p_t as u128).max(1) as usize
}

/// Assign every architecture to the bin whose parameter range contains it,
/// then drop those whose approximate latency exceeds the bin's latency bound.
pub fn assign_bins(
    archs: &[BlockArch],
    num_bins: usize,
    lat_table: &LatencyTable,
) -> Result<Vec<Bin>> {
    if archs.is_empty() {
        return Err(Error::State("cannot bin an empty architecture list".into()));
    }
    if num_bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    // a^t: the largest architecture; parameter count is the defining measure.
    let top = archs
        .iter()
        .max_by_key(|a| a.param_count())
        .expect("non-empty");
    let p_t = top.param_count();
    if p_t == 0 {
        return Err(Error::State("largest architecture has zero parameters".into()));
    }
    let l_t = lat_table.approx_block_latency(top)?;

    let mut bins: Vec<Bin> = (1..=num_bins)
        .map(|b| Bin {
            index: b,
            param_lo: (p_t as u128 * (b as u128 - 1) / num_bins as u128) as u64,
            param_hi: (p_t as u128 * b as u128 / num_bins as u128) as u64,
            latency_lo_ms: l_t * (b - 1) as f64 / num_bins as f64,
            latency_hi_ms: l_t * b as f64 / num_bins as f64,
            members: Vec::new(),
        })
        .collect();

    for arch in archs {
        let p = arch.param_count();
        let b = bin_index(p, p_t, num_bins);
        let latency = lat_table.approx_block_latency(arch)?;
        let bound = l_t * b as f64 / num_bins as f64;
        if latency > bound {
            continue;
        }
        bins[b - 1].members.push(arch.id);
    }
    for bin in &mut bins {
        bin.members.sort_unstable();
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{LatencyProfile, LatencyTable};
    use crate::searchspace::{build_operation_set, enumerate_block, OperationSpec};
    use std::collections::HashSet;

    fn flat_table(ops: &[OperationSpec], ms: f64) -> LatencyTable {
        LatencyTable::from_entries(
            ops.iter().map(|&op| (op, if op.is_identity() { 0.0 } else { ms })),
            LatencyProfile::default(),
        )
    }

    #[test]
    fn bin_index_matches_bound_arithmetic() {
        // p = 0.15 p_t and 0.35 p_t with B = 10 land in bins 2 and 4
        assert_eq!(bin_index(150, 1000, 10), 2);
        assert_eq!(bin_index(350, 1000, 10), 4);
        // boundary: p exactly at a bound stays in that bin
        assert_eq!(bin_index(100, 1000, 10), 1);
        assert_eq!(bin_index(1000, 1000, 10), 10);
    }

    #[test]
    fn largest_architecture_lands_in_last_bin() {
        let set = build_operation_set(&[16, 32], &[3]).unwrap();
        let archs = enumerate_block(2, &set).unwrap();
        let table = flat_table(set.ops(), 1.0);
        let bins = assign_bins(&archs, 4, &table).unwrap();
        let top = archs.iter().max_by_key(|a| a.param_count()).unwrap();
        assert!(bins[3].members.contains(&top.id));
    }

    #[test]
    fn membership_is_a_partition_and_respects_bounds() {
        let set = build_operation_set(&[16, 32], &[3]).unwrap();
        let archs = enumerate_block(3, &set).unwrap();
        let table = flat_table(set.ops(), 0.5);
        let bins = assign_bins(&archs, 5, &table).unwrap();
        let mut seen = HashSet::new();
        for bin in &bins {
            for &id in &bin.members {
                assert!(seen.insert(id), "architecture {id} in two bins");
                let arch = &archs[id as usize];
                let p = arch.param_count();
                assert!(p > bin.param_lo && p <= bin.param_hi);
                let l = table.approx_block_latency(arch).unwrap();
                assert!(l <= bin.latency_hi_ms + 1e-12);
            }
        }
    }

    #[test]
    fn latency_violators_are_excluded() {
        let set = build_operation_set(&[16], &[]).unwrap();
        let archs = enumerate_block(2, &set).unwrap();
        // Make MHA absurdly slow: any MHA-bearing architecture in a low bin
        // exceeds its latency bound and must vanish from all bins.
        let table = LatencyTable::from_entries(
            set.ops().iter().map(|&op| {
                let ms = match op {
                    OperationSpec::Mha { .. } => 1000.0,
                    OperationSpec::Identity => 0.0,
                    _ => 1.0,
                };
                (op, ms)
            }),
            LatencyProfile::default(),
        );
        let bins = assign_bins(&archs, 4, &table).unwrap();
        let binned: HashSet<u32> = bins.iter().flat_map(|b| b.members.iter().copied()).collect();
        // single-layer MHA has half the params of the top (all-FFN) arch but
        // latency 1000 > bound of its bin
        let lone_mha = archs
            .iter()
            .find(|a| {
                a.depth() == 1 && matches!(a.ops[0], OperationSpec::Mha { .. })
            })
            .unwrap();
        assert!(!binned.contains(&lone_mha.id));
    }
}
