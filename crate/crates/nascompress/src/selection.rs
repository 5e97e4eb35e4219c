//! Assembly of the full architecture table from per-block survivors, with
//! additive loss/latency approximation, constrained top-T selection, and the
//! final dev-set evaluation that picks one model.
//!
//! The table over `N` blocks has `product(survivor counts)` items, which the
//! reference configuration pushes to 1e8, so selection also runs as a lazy
//! iterator with a bounded top-T heap; the materialized path exists for
//! desk-scale tables and oracle comparison.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::searchspace::Architecture;
use crate::shrinktrain::{validate_architecture, SearchSpaceState};
use crate::supernet::{forward_block, Supernet};
use crate::teacher::TeacherTrace;
use crate::Graph;

/// Embedding accounting used to put deployable totals behind the parameter
/// constraint: embedding dim equals the item's first-block hidden size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl EmbeddingSpec {
    pub fn params(&self, emb_dim: usize) -> u64 {
        (self.vocab_size + self.max_seq_len) as u64 * emb_dim as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchTableItem {
    /// Per-block survivor ids, block order.
    pub block_ids: Vec<u32>,
    pub params: u64,
    pub approx_latency_ms: f64,
    pub approx_loss: f64,
}

impl ArchTableItem {
    /// Mixed-radix id over the block space: stable across survivor sets.
    pub fn arch_id(&self, space_size: usize) -> u128 {
        self.block_ids
            .iter()
            .fold(0u128, |acc, &id| acc * space_size as u128 + id as u128)
    }

    fn sort_key(&self, space_size: usize) -> SortKey {
        SortKey { loss: self.approx_loss, params: self.params, id: self.arch_id(space_size) }
    }
}

/// Ascending (loss, params, id); losses are finite by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SortKey {
    loss: f64,
    params: u64,
    id: u128,
}

impl Eq for SortKey {}

impl PartialOrd for SortKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SortKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.loss
            .partial_cmp(&other.loss)
            .expect("approx losses are finite")
            .then(self.params.cmp(&other.params))
            .then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchTable {
    /// Sorted ascending by (approx loss, params, id).
    pub items: Vec<ArchTableItem>,
    pub survivor_snapshot: Vec<Vec<u32>>,
    /// Identifier of the latency table the latencies came from.
    pub lat_table_id: String,
    pub space_size: usize,
}

/// Per-(block, survivor) dev losses plus the evaluation count, which is
/// exactly the survivor total (`m * B * N` when every bin is full).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockLosses {
    pub losses: BTreeMap<(usize, u32), f64>,
    pub evaluations: usize,
}

/// Full-dev-set distillation loss for every surviving sub-architecture.
pub fn block_dev_losses(
    net: &Supernet,
    state: &SearchSpaceState,
    dev_traces: &[TeacherTrace],
) -> Result<BlockLosses> {
    let mut jobs: Vec<(usize, u32)> = Vec::new();
    for block in 0..state.blocks.len() {
        for id in state.block_survivors(block) {
            jobs.push((block, id));
        }
    }
    let results: Result<Vec<f64>> = jobs
        .par_iter()
        .map(|&(block, id)| {
            validate_architecture(net, block, &state.arch(id).ops, dev_traces, dev_traces.len())
        })
        .collect();
    let results = results?;
    for (job, loss) in jobs.iter().zip(&results) {
        if !loss.is_finite() || *loss < 0.0 {
            return Err(Error::NonFinite(format!("dev loss for block {} arch {}", job.0, job.1)));
        }
    }
    let evaluations = jobs.len();
    Ok(BlockLosses { losses: jobs.into_iter().zip(results).collect(), evaluations })
}

/// `(m * B)^N`: the item count when every bin holds its terminal population.
pub fn lt_arch_cardinality(m: usize, bins: usize, blocks: usize) -> u128 {
    ((m * bins) as u128).pow(blocks as u32)
}

pub fn table_size(survivors: &[Vec<u32>]) -> u128 {
    survivors.iter().map(|s| s.len() as u128).product()
}

fn item_from_ids(
    state: &SearchSpaceState,
    losses: &BlockLosses,
    lat_table: &LatencyTable,
    emb: EmbeddingSpec,
    block_ids: &[u32],
) -> Result<ArchTableItem> {
    let mut params = 0u64;
    let mut latency = 0.0f64;
    let mut loss = 0.0f64;
    for (block, &id) in block_ids.iter().enumerate() {
        let arch = state.arch(id);
        params += arch.param_count();
        latency += lat_table.approx_block_latency(arch)?;
        loss += losses
            .losses
            .get(&(block, id))
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no dev loss for block {block} arch {id}")))?;
    }
    let emb_dim = state
        .arch(block_ids[0])
        .hidden()
        .ok_or_else(|| Error::Validation("first block has no hidden size".into()))?;
    params += emb.params(emb_dim);
    Ok(ArchTableItem { block_ids: block_ids.to_vec(), params, approx_latency_ms: latency, approx_loss: loss })
}

/// Odometer over the Cartesian product of survivor lists.
pub struct ProductIter<'a> {
    survivors: &'a [Vec<u32>],
    cursor: Vec<usize>,
    done: bool,
}

impl<'a> ProductIter<'a> {
    pub fn new(survivors: &'a [Vec<u32>]) -> Self {
        let done = survivors.is_empty() || survivors.iter().any(|s| s.is_empty());
        Self { survivors, cursor: vec![0; survivors.len()], done }
    }
}

impl Iterator for ProductIter<'_> {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item: Vec<u32> = self
            .cursor
            .iter()
            .zip(self.survivors)
            .map(|(&i, s)| s[i])
            .collect();
        for pos in (0..self.cursor.len()).rev() {
            self.cursor[pos] += 1;
            if self.cursor[pos] < self.survivors[pos].len() {
                return Some(item);
            }
            self.cursor[pos] = 0;
            if pos == 0 {
                self.done = true;
            }
        }
        Some(item)
    }
}

/// Materialize and sort the whole table. Fails on an empty survivor set.
pub fn build_arch_table(
    state: &SearchSpaceState,
    losses: &BlockLosses,
    lat_table: &LatencyTable,
    emb: EmbeddingSpec,
    lat_table_id: &str,
) -> Result<ArchTable> {
    let survivors: Vec<Vec<u32>> = (0..state.blocks.len())
        .map(|b| state.block_survivors(b))
        .collect();
    if survivors.iter().any(|s| s.is_empty()) {
        return Err(Error::State("a block has no surviving architectures".into()));
    }
    let mut items = Vec::new();
    for ids in ProductIter::new(&survivors) {
        items.push(item_from_ids(state, losses, lat_table, emb, &ids)?);
    }
    let space_size = state.space().len();
    items.sort_by(|a, b| a.sort_key(space_size).cmp(&b.sort_key(space_size)));
    Ok(ArchTable {
        items,
        survivor_snapshot: survivors,
        lat_table_id: lat_table_id.to_string(),
        space_size,
    })
}

/// Parameter/latency bounds and the table depth to keep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Constraint {
    pub max_params: Option<u64>,
    pub max_latency_ms: Option<f64>,
    /// Top-T depth.
    pub top: usize,
    /// Explicit opt-out when no bound is set.
    pub unbounded: bool,
}

impl Default for Constraint {
    fn default() -> Self {
        Self { max_params: None, max_latency_ms: None, top: 100, unbounded: false }
    }
}

impl Constraint {
    pub fn validate(&self) -> Result<()> {
        if self.top < 1 {
            return Err(Error::Config("top must be >= 1".into()));
        }
        if self.max_params.is_none() && self.max_latency_ms.is_none() && !self.unbounded {
            return Err(Error::Config(
                "set max_params or max_latency_ms, or mark the constraint unbounded".into(),
            ));
        }
        Ok(())
    }

    pub fn admits(&self, item: &ArchTableItem) -> bool {
        if let Some(p) = self.max_params {
            if item.params > p {
                return false;
            }
        }
        if let Some(l) = self.max_latency_ms {
            if item.approx_latency_ms > l {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub items: Vec<ArchTableItem>,
    /// Set when the result is empty: names the tightest violated bound.
    pub diagnostic: Option<String>,
}

fn empty_diagnostic(items: &[ArchTableItem], constraint: &Constraint) -> String {
    if items.is_empty() {
        return "the architecture table is empty".to_string();
    }
    let min_params = items.iter().map(|i| i.params).min().unwrap_or(0);
    let min_latency = items
        .iter()
        .map(|i| i.approx_latency_ms)
        .fold(f64::INFINITY, f64::min);
    let mut gaps: Vec<(f64, String)> = Vec::new();
    if let Some(p) = constraint.max_params {
        if min_params > p {
            let gap = (min_params - p) as f64 / p.max(1) as f64;
            gaps.push((gap, format!(
                "max_params={p} is below the smallest item ({min_params} params)"
            )));
        }
    }
    if let Some(l) = constraint.max_latency_ms {
        if min_latency > l {
            let gap = (min_latency - l) / l.max(1e-9);
            gaps.push((gap, format!(
                "max_latency_ms={l} is below the fastest item ({min_latency:.4} ms)"
            )));
        }
    }
    match gaps
        .into_iter()
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal))
    {
        Some((_, msg)) => msg,
        None => "no single item satisfies every bound jointly".to_string(),
    }
}

/// First `top` feasible items in table order; an infeasible constraint yields
/// an explicit empty result with a diagnostic.
pub fn select_top(table: &ArchTable, constraint: &Constraint) -> Result<SelectionResult> {
    constraint.validate()?;
    let items: Vec<ArchTableItem> = table
        .items
        .iter()
        .filter(|i| constraint.admits(i))
        .take(constraint.top)
        .cloned()
        .collect();
    let diagnostic =
        items.is_empty().then(|| empty_diagnostic(&table.items, constraint));
    Ok(SelectionResult { items, diagnostic })
}

/// Streaming top-T without materializing the table: partition by first-block
/// survivor, bounded heap per partition, deterministic merge under the same
/// (loss, params, id) tie order.
pub fn select_top_streaming(
    state: &SearchSpaceState,
    losses: &BlockLosses,
    lat_table: &LatencyTable,
    emb: EmbeddingSpec,
    constraint: &Constraint,
) -> Result<SelectionResult> {
    constraint.validate()?;
    let survivors: Vec<Vec<u32>> = (0..state.blocks.len())
        .map(|b| state.block_survivors(b))
        .collect();
    if survivors.iter().any(|s| s.is_empty()) {
        return Err(Error::State("a block has no surviving architectures".into()));
    }
    let space_size = state.space().len();
    let first = survivors[0].clone();
    let rest = &survivors[1..];
    let partitions: Result<Vec<Vec<ArchTableItem>>> = first
        .par_iter()
        .map(|&head| {
            let mut heap: std::collections::BinaryHeap<(SortKey, usize)> =
                std::collections::BinaryHeap::new();
            let mut kept: Vec<ArchTableItem> = Vec::new();
            let tail_iter: Box<dyn Iterator<Item = Vec<u32>>> = if rest.is_empty() {
                Box::new(std::iter::once(Vec::new()))
            } else {
                Box::new(ProductIter::new(rest))
            };
            for tail in tail_iter {
                let mut ids = Vec::with_capacity(survivors.len());
                ids.push(head);
                ids.extend(tail);
                let item = item_from_ids(state, losses, lat_table, emb, &ids)?;
                if !constraint.admits(&item) {
                    continue;
                }
                let key = item.sort_key(space_size);
                if heap.len() < constraint.top {
                    kept.push(item);
                    heap.push((key, kept.len() - 1));
                } else if let Some((worst, _)) = heap.peek() {
                    if key < *worst {
                        let (_, slot) = heap.pop().expect("heap non-empty");
                        kept[slot] = item;
                        heap.push((key, slot));
                    }
                }
            }
            Ok(kept)
        })
        .collect();
    let mut merged: Vec<ArchTableItem> = partitions?.into_iter().flatten().collect();
    merged.sort_by(|a, b| a.sort_key(space_size).cmp(&b.sort_key(space_size)));
    merged.truncate(constraint.top);
    let diagnostic = merged.is_empty().then(|| {
        format!(
            "no feasible item under {:?}/{:?}",
            constraint.max_params, constraint.max_latency_ms
        )
    });
    Ok(SelectionResult { items: merged, diagnostic })
}

/// Compose the full architecture an item denotes.
pub fn item_architecture(state: &SearchSpaceState, item: &ArchTableItem) -> Architecture {
    let mut layers = Vec::new();
    for &id in &item.block_ids {
        layers.extend(state.arch(id).ops.iter().copied());
    }
    Architecture::new(layers)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalRow {
    pub item: ArchTableItem,
    pub measured_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalSelection {
    pub rows: Vec<FinalRow>,
    pub chosen: usize,
}

impl FinalSelection {
    pub fn chosen_row(&self) -> &FinalRow {
        &self.rows[self.chosen]
    }
}

/// Measured end-to-end loss of a candidate: chain every block through the
/// supernet (transforms included) from the teacher's embedding output and
/// compare against the teacher's final boundary state.
pub fn measure_candidate(
    net: &Supernet,
    state: &SearchSpaceState,
    item: &ArchTableItem,
    dev_traces: &[TeacherTrace],
) -> Result<f64> {
    let mut total = 0.0;
    for trace in dev_traces {
        let mut g = Graph::new();
        let mut x = g.input(trace.input_of(0).clone());
        for (block, &id) in item.block_ids.iter().enumerate() {
            x = forward_block(net, &mut g, block, &state.arch(id).ops, x)?;
        }
        let target = g.input(trace.boundaries.last().expect("trace has boundaries").clone());
        let loss = g.mse(x, target)?;
        total += g.value(loss).item()?;
    }
    Ok(total / dev_traces.len() as f64)
}

/// Evaluate every candidate end-to-end on the full dev set and pick the
/// argmin of measured loss (ties to the smaller table id).
pub fn final_select(
    net: &Supernet,
    state: &SearchSpaceState,
    candidates: &[ArchTableItem],
    dev_traces: &[TeacherTrace],
) -> Result<FinalSelection> {
    if candidates.is_empty() {
        return Err(Error::State("no candidates to evaluate".into()));
    }
    let measured: Result<Vec<f64>> = candidates
        .par_iter()
        .map(|item| measure_candidate(net, state, item, dev_traces))
        .collect();
    let measured = measured?;
    let rows: Vec<FinalRow> = candidates
        .iter()
        .cloned()
        .zip(measured)
        .map(|(item, measured_loss)| FinalRow { item, measured_loss })
        .collect();
    let space = state.space().len();
    let chosen = rows
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.measured_loss
                .partial_cmp(&b.measured_loss)
                .unwrap_or(Ordering::Equal)
                .then(a.item.arch_id(space).cmp(&b.item.arch_id(space)))
        })
        .map(|(i, _)| i)
        .expect("non-empty rows");
    Ok(FinalSelection { rows, chosen })
}

/// Spearman rank correlation with averaged ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean).powi(2);
        dy += (b - mean).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx.sqrt() * dy.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(Ordering::Equal));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality_formulas() {
        assert_eq!(lt_arch_cardinality(10, 10, 4), 100_000_000);
        assert_eq!(lt_arch_cardinality(3, 4, 2), 144);
        assert_eq!(table_size(&[vec![1, 2, 3], vec![4]]), 3);
    }

    #[test]
    fn product_iter_covers_everything_in_order() {
        let survivors = vec![vec![0u32, 1], vec![5u32, 6, 7]];
        let all: Vec<Vec<u32>> = ProductIter::new(&survivors).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all[0], vec![0, 5]);
        assert_eq!(all[1], vec![0, 6]);
        assert_eq!(all[5], vec![1, 7]);
    }

    #[test]
    fn product_iter_empty_block_is_empty() {
        let survivors = vec![vec![0u32, 1], vec![]];
        assert_eq!(ProductIter::new(&survivors).count(), 0);
    }

    #[test]
    fn constraint_needs_a_bound_or_optout() {
        let c = Constraint { max_params: None, max_latency_ms: None, top: 5, unbounded: false };
        assert!(c.validate().is_err());
        let c = Constraint { unbounded: true, ..c };
        c.validate().unwrap();
    }

    #[test]
    fn spearman_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        let rev = [40.0, 30.0, 20.0, 10.0];
        assert!((spearman(&xs, &rev) + 1.0).abs() < 1e-12);
        // hand value: one swap of adjacent ranks in n=4 gives rho = 0.8
        let swapped = [10.0, 30.0, 20.0, 40.0];
        assert!((spearman(&xs, &swapped) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_on_ties() {
        let r = ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }
}
