//! Block-wise distillation of the supernet interleaved with progressive
//! shrinking of the binned search space, plus the operation-pruning variant.
//!
//! Each training step samples one path per block and regresses the block's
//! output onto the teacher's paired hidden states. After the warm-up epochs,
//! every epoch ends with a shrink round that validates sampled survivors on a
//! few dev batches and removes the worst until every bin is down to its
//! terminal population, at which point training ends.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::numerics::store::warmup_linear_lr;
use crate::searchspace::{assign_bins, enumerate_block, Bin, BlockArch, OperationSpec};
use crate::supernet::{forward_block, sample_architecture, Supernet};
use crate::teacher::{masked_batches, trace_blocks, Corpus, Teacher, TeacherTrace};
use crate::{AdamConfig, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShrinkVariant {
    /// Remove whole architectures (paths) from each bin.
    Arch,
    /// Remove operations (nodes); every survivor using a pruned op goes away.
    Op,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShrinkConfig {
    /// Architectures sampled for validation per bin per round (E).
    pub samples_per_bin: usize,
    /// Architectures removed per bin per round (R).
    pub removals_per_round: usize,
    /// Terminal survivors per bin (m); a bin at m is frozen.
    pub terminal_survivors: usize,
    pub warmup_epochs: usize,
    /// Dev batches per validation (5 in the reference schedule).
    pub val_batches: usize,
    pub num_bins: usize,
    pub variant: ShrinkVariant,
    /// PS-op: fraction of a bin's architectures removed per round.
    pub op_prune_fraction: f64,
}

impl ShrinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.removals_per_round >= self.samples_per_bin {
            return Err(Error::Config(format!(
                "removals per round ({}) must be below samples per bin ({})",
                self.removals_per_round, self.samples_per_bin
            )));
        }
        if self.terminal_survivors < 1 {
            return Err(Error::Config("terminal survivors must be >= 1".into()));
        }
        if self.val_batches < 1 {
            return Err(Error::Config("val_batches must be >= 1".into()));
        }
        if self.num_bins < 1 {
            return Err(Error::Config("need at least one bin".into()));
        }
        if !(0.0..=1.0).contains(&self.op_prune_fraction) {
            return Err(Error::Config("op_prune_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

impl Default for ShrinkConfig {
    fn default() -> Self {
        Self {
            samples_per_bin: 64,
            removals_per_round: 32,
            terminal_survivors: 3,
            warmup_epochs: 3,
            val_batches: 5,
            num_bins: 4,
            variant: ShrinkVariant::Arch,
            op_prune_fraction: 0.30,
        }
    }
}

/// Step schedule for the distillation side of training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Training batches traced through the teacher and cycled over.
    pub train_trace_batches: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps_per_epoch: 50,
            max_epochs: 60,
            peak_lr: 1e-3,
            warmup_steps: 60,
            weight_decay: 0.01,
            train_trace_batches: 48,
            mask_prob: 0.15,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinState {
    pub index: usize,
    pub param_lo: u64,
    pub param_hi: u64,
    pub latency_lo_ms: f64,
    pub latency_hi_ms: f64,
    /// Surviving architecture ids, ascending.
    pub survivors: Vec<u32>,
    /// Latest validation loss per surviving architecture.
    pub last_loss: BTreeMap<u32, f64>,
}

impl BinState {
    fn from_bin(bin: Bin) -> Self {
        Self {
            index: bin.index,
            param_lo: bin.param_lo,
            param_hi: bin.param_hi,
            latency_lo_ms: bin.latency_lo_ms,
            latency_hi_ms: bin.latency_hi_ms,
            survivors: bin.members,
            last_loss: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockState {
    pub bins: Vec<BinState>,
}

/// Per-block surviving candidate sets evolving under shrinking. The block
/// space itself (the enumeration) is shared by all blocks and regenerable
/// from the operation set, so only ids are stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpaceState {
    #[serde(skip)]
    space: Vec<BlockArch>,
    pub blocks: Vec<BlockState>,
    pub epoch: usize,
    pub warmup_epochs: usize,
}

impl SearchSpaceState {
    /// Enumerate the block space, bin it, and replicate the bins per block.
    pub fn new(net: &Supernet, cfg: &ShrinkConfig, lat_table: &LatencyTable) -> Result<Self> {
        cfg.validate()?;
        lat_table.check_totality(&net.op_set)?;
        let space = enumerate_block(net.layers_per_block(), &net.op_set)?;
        let bins = assign_bins(&space, cfg.num_bins, lat_table)?;
        let blocks = (0..net.blocks)
            .map(|_| BlockState {
                bins: bins.iter().cloned().map(BinState::from_bin).collect(),
            })
            .collect();
        Ok(Self { space, blocks, epoch: 0, warmup_epochs: cfg.warmup_epochs })
    }

    pub fn arch(&self, id: u32) -> &BlockArch {
        &self.space[id as usize]
    }

    pub fn space(&self) -> &[BlockArch] {
        &self.space
    }

    /// Rebuild the shared enumeration after deserialization.
    pub fn attach_space(&mut self, space: Vec<BlockArch>) {
        self.space = space;
    }

    pub fn all_bins_terminal(&self, m: usize) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| &b.bins)
            .all(|bin| bin.survivors.len() <= m)
    }

    /// Survivor ids of one block across bins (bins are disjoint).
    pub fn block_survivors(&self, block: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = self.blocks[block]
            .bins
            .iter()
            .flat_map(|b| b.survivors.iter().copied())
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, net: &Supernet) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut state: Self =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        state.attach_space(enumerate_block(net.layers_per_block(), &net.op_set)?);
        Ok(state)
    }
}

/// One sampled-path distillation step over every block: forward the teacher's
/// block input, regress onto the block output, and update only the touched
/// parameters. Returns the per-block losses.
pub fn distill_step(
    net: &mut Supernet,
    state: &SearchSpaceState,
    trace: &TeacherTrace,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if trace.num_blocks() != net.blocks {
        return Err(Error::Shape(format!(
            "trace has {} blocks, supernet {}",
            trace.num_blocks(),
            net.blocks
        )));
    }
    let mut losses = Vec::with_capacity(net.blocks);
    for block in 0..net.blocks {
        let id = sample_architecture(state, block, rng)?;
        let sub = state.arch(id).ops.clone();
        let mut g = Graph::training();
        let x = g.input(trace.input_of(block).clone());
        let y = forward_block(net, &mut g, block, &sub, x)?;
        let t = g.input(trace.output_of(block).clone());
        let loss = g.mse(y, t)?;
        let loss_val = g.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "distillation loss for block {block}, architecture {id}"
            )));
        }
        g.backward(loss)?;
        let touched = g.write_grads_to(&mut net.store)?;
        net.store.adam_step_paths(adam, &touched)?;
        losses.push(loss_val);
    }
    Ok(losses)
}

/// Mean block-distillation loss over the first `val_batches` dev traces, in
/// fixed order; deterministic (no dropout, read-only).
pub fn validate_architecture(
    net: &Supernet,
    block: usize,
    sub_arch: &[OperationSpec],
    dev_traces: &[TeacherTrace],
    val_batches: usize,
) -> Result<f64> {
    if dev_traces.is_empty() {
        return Err(Error::State("no dev traces".into()));
    }
    let n = val_batches.min(dev_traces.len());
    let mut total = 0.0;
    for trace in &dev_traces[..n] {
        let mut g = Graph::new();
        let x = g.input(trace.input_of(block).clone());
        let y = forward_block(net, &mut g, block, sub_arch, x)?;
        let t = g.input(trace.output_of(block).clone());
        let loss = g.mse(y, t)?;
        total += g.value(loss).item()?;
    }
    Ok(total / n as f64)
}

/// Validation-loss source for a shrink round. Production code closes over the
/// supernet and dev traces; tests inject synthetic losses.
pub trait LossEval: Sync {
    fn eval(&self, block: usize, arch: &BlockArch) -> Result<f64>;
}

impl<F: Fn(usize, &BlockArch) -> Result<f64> + Sync> LossEval for F {
    fn eval(&self, block: usize, arch: &BlockArch) -> Result<f64> {
        self(block, arch)
    }
}

pub struct SupernetEval<'a> {
    pub net: &'a Supernet,
    pub dev_traces: &'a [TeacherTrace],
    pub val_batches: usize,
}

impl LossEval for SupernetEval<'_> {
    fn eval(&self, block: usize, arch: &BlockArch) -> Result<f64> {
        validate_architecture(self.net, block, &arch.ops, self.dev_traces, self.val_batches)
    }
}

/// History-file record: one per epoch per block per bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub block: usize,
    pub bin: usize,
    pub survivors: usize,
    pub sampled: usize,
    pub removed: usize,
    pub mean_loss: Option<f64>,
    pub min_loss: Option<f64>,
}

/// Detailed audit record for one shrink round in one bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub epoch: usize,
    pub block: usize,
    pub bin: usize,
    pub sampled: Vec<(u32, f64)>,
    pub removed: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTrainRecord {
    pub epoch: usize,
    pub block: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub rounds: Vec<HistoryRecord>,
    pub removals: Vec<RemovalRecord>,
    pub train_curve: Vec<EpochTrainRecord>,
}

fn sample_without_replacement(
    survivors: &[u32],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let mut pool = survivors.to_vec();
    pool.shuffle(rng);
    pool.truncate(k);
    pool
}

fn eval_sampled(
    eval: &dyn LossEval,
    block: usize,
    space: &[BlockArch],
    sampled: &[u32],
) -> Result<Vec<(u32, f64)>> {
    let losses: Result<Vec<f64>> = sampled
        .par_iter()
        .map(|&id| eval.eval(block, &space[id as usize]))
        .collect();
    Ok(sampled.iter().copied().zip(losses?).collect())
}

/// One PS-arch round: per bin, sample without replacement, rank by loss
/// descending (ties by ascending id), remove down to at most `m` survivors.
pub fn shrink_round_arch(
    state: &mut SearchSpaceState,
    cfg: &ShrinkConfig,
    eval: &dyn LossEval,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RemovalRecord>> {
    let mut records = Vec::new();
    let epoch = state.epoch;
    let space = state.space.clone();
    for (block, bs) in state.blocks.iter_mut().enumerate() {
        for bin in &mut bs.bins {
            if bin.survivors.len() <= cfg.terminal_survivors {
                continue; // frozen
            }
            let k = cfg.samples_per_bin.min(bin.survivors.len());
            let sampled = sample_without_replacement(&bin.survivors, k, rng);
            let mut results = eval_sampled(eval, block, &space, &sampled)?;
            for &(id, loss) in &results {
                bin.last_loss.insert(id, loss);
            }
            // worst first; equal losses fall to the smaller id
            results.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            let r = cfg
                .removals_per_round
                .min(bin.survivors.len() - cfg.terminal_survivors);
            let removed: Vec<(u32, f64)> = results[..r].to_vec();
            for (id, _) in &removed {
                bin.survivors.retain(|s| s != id);
                bin.last_loss.remove(id);
            }
            records.push(RemovalRecord {
                epoch,
                block,
                bin: bin.index,
                sampled: results,
                removed,
            });
        }
    }
    Ok(records)
}

/// One PS-op round: score each (layer, operation) by the mean validation loss
/// of sampled architectures using it, then prune the worst-scoring pairs
/// (dropping every survivor that uses them) until the target fraction of the
/// bin is gone or the bin would fall below `m` survivors.
pub fn shrink_round_op(
    state: &mut SearchSpaceState,
    cfg: &ShrinkConfig,
    eval: &dyn LossEval,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RemovalRecord>> {
    let mut records = Vec::new();
    let epoch = state.epoch;
    let space = state.space.clone();
    for (block, bs) in state.blocks.iter_mut().enumerate() {
        for bin in &mut bs.bins {
            if bin.survivors.len() <= cfg.terminal_survivors {
                continue;
            }
            let start_count = bin.survivors.len();
            let k = cfg.samples_per_bin.min(start_count);
            let sampled = sample_without_replacement(&bin.survivors, k, rng);
            let results = eval_sampled(eval, block, &space, &sampled)?;
            for &(id, loss) in &results {
                bin.last_loss.insert(id, loss);
            }
            // (layer, op) -> mean loss over sampled architectures containing it;
            // pairs absent from every sample carry no score this round
            let mut scores: BTreeMap<(usize, OperationSpec), (f64, usize)> = BTreeMap::new();
            for &(id, loss) in &results {
                for (layer, op) in space[id as usize].ops.iter().enumerate() {
                    let entry = scores.entry((layer, *op)).or_insert((0.0, 0));
                    entry.0 += loss;
                    entry.1 += 1;
                }
            }
            let mut ranked: Vec<((usize, OperationSpec), f64)> = scores
                .into_iter()
                .map(|(key, (sum, n))| (key, sum / n as f64))
                .collect();
            ranked.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            let target = (cfg.op_prune_fraction * start_count as f64).ceil() as usize;
            let mut removed: Vec<(u32, f64)> = Vec::new();
            for ((layer, op), _) in ranked {
                if removed.len() >= target {
                    break;
                }
                let users: Vec<u32> = bin
                    .survivors
                    .iter()
                    .copied()
                    .filter(|&id| space[id as usize].ops[layer] == op)
                    .collect();
                if users.is_empty() {
                    continue;
                }
                if bin.survivors.len() - users.len() < cfg.terminal_survivors {
                    break; // pruning would drop the bin below m
                }
                for id in users {
                    let loss = bin.last_loss.get(&id).copied().unwrap_or(f64::NAN);
                    bin.survivors.retain(|s| *s != id);
                    bin.last_loss.remove(&id);
                    removed.push((id, loss));
                }
            }
            records.push(RemovalRecord {
                epoch,
                block,
                bin: bin.index,
                sampled: results,
                removed,
            });
        }
    }
    Ok(records)
}

fn history_snapshot(
    state: &SearchSpaceState,
    round_records: &[RemovalRecord],
) -> Vec<HistoryRecord> {
    let mut out = Vec::new();
    for (block, bs) in state.blocks.iter().enumerate() {
        for bin in &bs.bins {
            let round = round_records
                .iter()
                .find(|r| r.block == block && r.bin == bin.index);
            let (sampled, removed, mean_loss, min_loss) = match round {
                Some(r) => {
                    let n = r.sampled.len();
                    let mean = if n > 0 {
                        Some(r.sampled.iter().map(|(_, l)| l).sum::<f64>() / n as f64)
                    } else {
                        None
                    };
                    let min = r
                        .sampled
                        .iter()
                        .map(|(_, l)| *l)
                        .fold(None, |acc: Option<f64>, l| {
                            Some(acc.map_or(l, |a| a.min(l)))
                        });
                    (n, r.removed.len(), mean, min)
                }
                None => (0, 0, None, None),
            };
            out.push(HistoryRecord {
                epoch: state.epoch,
                block,
                bin: bin.index,
                survivors: bin.survivors.len(),
                sampled,
                removed,
                mean_loss,
                min_loss,
            });
        }
    }
    out
}

/// Masked batches traced through the teacher, for training and dev.
pub fn prepare_traces(
    teacher: &Teacher,
    corpus: &Corpus,
    blocks: usize,
    batch_size: usize,
    train_limit: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<(Vec<TeacherTrace>, Vec<TeacherTrace>)> {
    let (train_w, dev_w) = corpus.split_windows();
    let train_mb = masked_batches(&train_w, &corpus.vocab, batch_size, crate::subseed(seed, &[10]), mask_prob)?;
    let dev_mb = masked_batches(&dev_w, &corpus.vocab, batch_size.min(dev_w.len().max(1)), crate::subseed(seed, &[11]), mask_prob)?;
    if train_mb.is_empty() || dev_mb.is_empty() {
        return Err(Error::Config("not enough corpus windows for train/dev batches".into()));
    }
    let train = train_mb
        .iter()
        .take(train_limit)
        .map(|mb| trace_blocks(teacher, mb, blocks))
        .collect::<Result<Vec<_>>>()?;
    let dev = dev_mb
        .iter()
        .map(|mb| trace_blocks(teacher, mb, blocks))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, dev))
}

/// Full training loop: warm-up epochs of pure distillation, then one shrink
/// round per epoch until every bin is at its terminal population.
pub fn run_training(
    net: &mut Supernet,
    teacher: &Teacher,
    corpus: &Corpus,
    cfg: &ShrinkConfig,
    sched: &TrainSchedule,
    lat_table: &LatencyTable,
) -> Result<(SearchSpaceState, TrainingHistory)> {
    cfg.validate()?;
    let mut state = SearchSpaceState::new(net, cfg, lat_table)?;
    let (train_traces, dev_traces) = prepare_traces(
        teacher,
        corpus,
        net.blocks,
        trace_batch_size(corpus),
        sched.train_trace_batches,
        sched.mask_prob,
        sched.seed,
    )?;
    let mut history = TrainingHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(sched.seed, &[0xd157]));
    let total_steps = (sched.max_epochs * sched.steps_per_epoch) as u64;
    let mut global_step = 0u64;

    for epoch in 0..sched.max_epochs {
        state.epoch = epoch;
        let mut block_loss_sums = vec![0.0; net.blocks];
        for step in 0..sched.steps_per_epoch {
            let trace = &train_traces[(epoch * sched.steps_per_epoch + step) % train_traces.len()];
            global_step += 1;
            let lr = warmup_linear_lr(global_step, sched.warmup_steps as u64, total_steps, sched.peak_lr);
            let adam = AdamConfig { lr, weight_decay: sched.weight_decay, ..Default::default() };
            let losses = distill_step(net, &state, trace, &adam, &mut rng)?;
            for (b, l) in losses.iter().enumerate() {
                block_loss_sums[b] += l;
            }
        }
        for (block, sum) in block_loss_sums.iter().enumerate() {
            history.train_curve.push(EpochTrainRecord {
                epoch,
                block,
                mean_loss: sum / sched.steps_per_epoch as f64,
            });
        }

        let round_records = if epoch + 1 > cfg.warmup_epochs {
            let eval = SupernetEval { net, dev_traces: &dev_traces, val_batches: cfg.val_batches };
            match cfg.variant {
                ShrinkVariant::Arch => shrink_round_arch(&mut state, cfg, &eval, &mut rng)?,
                ShrinkVariant::Op => shrink_round_op(&mut state, cfg, &eval, &mut rng)?,
            }
        } else {
            Vec::new()
        };
        history.rounds.extend(history_snapshot(&state, &round_records));
        history.removals.extend(round_records);

        if epoch + 1 > cfg.warmup_epochs && state.all_bins_terminal(cfg.terminal_survivors) {
            break; // the search space is fully shrunk; training ends with it
        }
    }
    if !state.all_bins_terminal(cfg.terminal_survivors) {
        return Err(Error::State(format!(
            "shrinking did not terminate within {} epochs",
            sched.max_epochs
        )));
    }
    Ok((state, history))
}

fn trace_batch_size(corpus: &Corpus) -> usize {
    let (_, dev) = corpus.split_windows();
    8usize.min(dev.len().max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{LatencyProfile, LatencyTable};
    use crate::searchspace::build_operation_set;
    use crate::supernet::build_supernet;

    fn flat_table(net: &Supernet) -> LatencyTable {
        LatencyTable::from_entries(
            net.op_set.ops().iter().map(|&op| (op, if op.is_identity() { 0.0 } else { 1.0 })),
            LatencyProfile::default(),
        )
    }

    fn tiny_state(cfg: &ShrinkConfig) -> (Supernet, SearchSpaceState) {
        let set = build_operation_set(&[8], &[3]).unwrap();
        let net = build_supernet(&set, 4, 2, 8, 1).unwrap();
        let table = flat_table(&net);
        let state = SearchSpaceState::new(&net, cfg, &table).unwrap();
        (net, state)
    }

    #[test]
    fn paper_constants_pass_validation() {
        let cfg = ShrinkConfig {
            samples_per_bin: 2000,
            removals_per_round: 1000,
            terminal_survivors: 10,
            num_bins: 10,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.removals_per_round, cfg.samples_per_bin / 2);
    }

    #[test]
    fn config_rejects_r_not_below_e() {
        let cfg = ShrinkConfig { samples_per_bin: 8, removals_per_round: 8, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_case_shrink_trace() {
        // bin of 8, E=8, R=4, m=3: first round leaves 4, second leaves 3.
        let cfg = ShrinkConfig {
            samples_per_bin: 8,
            removals_per_round: 4,
            terminal_survivors: 3,
            num_bins: 1,
            warmup_epochs: 0,
            ..Default::default()
        };
        let (_, mut state) = tiny_state(&cfg);
        // restrict to one block with an 8-member bin
        state.blocks.truncate(1);
        let all: Vec<u32> = state.blocks[0].bins[0].survivors.clone();
        state.blocks[0].bins[0].survivors = all[..8].to_vec();
        let eval = |_: usize, a: &BlockArch| Ok(a.id as f64); // higher id = worse
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs = shrink_round_arch(&mut state, &cfg, &eval, &mut rng).unwrap();
        assert_eq!(state.blocks[0].bins[0].survivors.len(), 4);
        assert_eq!(recs[0].removed.len(), 4);
        let recs2 = shrink_round_arch(&mut state, &cfg, &eval, &mut rng).unwrap();
        assert_eq!(state.blocks[0].bins[0].survivors.len(), 3);
        assert_eq!(recs2[0].removed.len(), 1);
        // worst-loss rule: removed ids are the largest ids sampled
        let max_kept = state.blocks[0].bins[0].survivors.iter().max().unwrap();
        assert!(recs2[0].removed.iter().all(|(id, _)| id > max_kept));
        // frozen at m
        let recs3 = shrink_round_arch(&mut state, &cfg, &eval, &mut rng).unwrap();
        assert!(recs3.is_empty());
        assert_eq!(state.blocks[0].bins[0].survivors.len(), 3);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let cfg = ShrinkConfig {
            samples_per_bin: 8,
            removals_per_round: 2,
            terminal_survivors: 1,
            num_bins: 1,
            warmup_epochs: 0,
            ..Default::default()
        };
        let (_, mut state) = tiny_state(&cfg);
        state.blocks.truncate(1);
        let all: Vec<u32> = state.blocks[0].bins[0].survivors.clone();
        state.blocks[0].bins[0].survivors = all[..4].to_vec();
        let eval = |_: usize, _: &BlockArch| Ok(1.0); // all tie
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs = shrink_round_arch(&mut state, &cfg, &eval, &mut rng).unwrap();
        // under equal losses the two smallest sampled ids go first
        let removed: Vec<u32> = recs[0].removed.iter().map(|(id, _)| *id).collect();
        assert_eq!(removed, vec![all[0], all[1]]);
    }

    #[test]
    fn op_round_prunes_the_consistently_bad_operation() {
        let cfg = ShrinkConfig {
            samples_per_bin: 1020,
            removals_per_round: 512,
            terminal_survivors: 1,
            num_bins: 1,
            warmup_epochs: 0,
            variant: ShrinkVariant::Op,
            op_prune_fraction: 0.30,
            ..Default::default()
        };
        let set = build_operation_set(&[8], &[3]).unwrap();
        let net = build_supernet(&set, 2, 1, 8, 1).unwrap();
        let table = flat_table(&net);
        let mut state = SearchSpaceState::new(&net, &cfg, &table).unwrap();
        // merge everything into one bin for the synthetic test
        let all: Vec<u32> = (0..state.space().len() as u32).collect();
        state.blocks[0].bins[0].survivors = all;
        for bin in state.blocks[0].bins.iter_mut().skip(1) {
            bin.survivors.clear();
        }
        // MHA at layer 0 is poison; everything else is fine
        let space = state.space().to_vec();
        let eval = move |_: usize, a: &BlockArch| {
            Ok(if matches!(a.ops[0], OperationSpec::Mha { .. }) { 10.0 } else { 1.0 })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = state.blocks[0].bins[0].survivors.len();
        shrink_round_op(&mut state, &cfg, &eval, &mut rng).unwrap();
        let after: Vec<u32> = state.blocks[0].bins[0].survivors.clone();
        assert!(after.len() < before);
        // survivor subset property and the poison op is gone first
        assert!(after
            .iter()
            .all(|&id| !matches!(space[id as usize].ops[0], OperationSpec::Mha { .. })));
    }

    #[test]
    fn arch_and_op_rounds_agree_under_zero_removals() {
        let base = ShrinkConfig {
            samples_per_bin: 16,
            removals_per_round: 0,
            terminal_survivors: 1,
            num_bins: 2,
            warmup_epochs: 0,
            op_prune_fraction: 0.0,
            ..Default::default()
        };
        // R = 0 fails validation (R < E holds, 0 < 16) so construct directly.
        let (_, state0) = tiny_state(&base);
        let eval = |_: usize, a: &BlockArch| Ok(a.id as f64);
        let mut sa = state0.clone();
        sa.attach_space(state0.space().to_vec());
        let mut sb = state0.clone();
        sb.attach_space(state0.space().to_vec());
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        shrink_round_arch(&mut sa, &base, &eval, &mut rng_a).unwrap();
        shrink_round_op(&mut sb, &base, &eval, &mut rng_b).unwrap();
        for (ba, bb) in sa.blocks.iter().zip(&sb.blocks) {
            for (xa, xb) in ba.bins.iter().zip(&bb.bins) {
                assert_eq!(xa.survivors, xb.survivors);
            }
        }
    }

    #[test]
    fn sample_architecture_stays_within_survivors() {
        let cfg = ShrinkConfig { num_bins: 2, ..Default::default() };
        let (_, state) = tiny_state(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let id = crate::supernet::sample_architecture(&state, 0, &mut rng).unwrap();
            assert!(state.block_survivors(0).contains(&id));
        }
    }

    #[test]
    fn bin_uniform_sampling_frequencies() {
        let cfg = ShrinkConfig { num_bins: 2, ..Default::default() };
        let (_, mut state) = tiny_state(&cfg);
        // two bins: one with a single survivor, one with 99
        let all = state.block_survivors(0);
        state.blocks[0].bins[0].survivors = all[..1].to_vec();
        state.blocks[0].bins[1].survivors = all[1..100.min(all.len())].to_vec();
        let lone = all[0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            if crate::supernet::sample_architecture(&state, 0, &mut rng).unwrap() == lone {
                hits += 1;
            }
        }
        // bin probability 1/2, +-3 sigma of Binomial(10000, 0.5)
        let sigma = (draws as f64 * 0.25).sqrt();
        assert!((hits as f64 - draws as f64 / 2.0).abs() < 3.0 * sigma, "hits {hits}");
    }

    #[test]
    fn single_survivor_is_always_sampled() {
        let cfg = ShrinkConfig { num_bins: 2, ..Default::default() };
        let (_, mut state) = tiny_state(&cfg);
        let all = state.block_survivors(0);
        state.blocks[0].bins[0].survivors = vec![all[0]];
        state.blocks[0].bins[1].survivors.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            assert_eq!(
                crate::supernet::sample_architecture(&state, 0, &mut rng).unwrap(),
                all[0]
            );
        }
    }

    #[test]
    fn empty_state_errors() {
        let cfg = ShrinkConfig { num_bins: 2, ..Default::default() };
        let (_, mut state) = tiny_state(&cfg);
        for bin in &mut state.blocks[0].bins {
            bin.survivors.clear();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(crate::supernet::sample_architecture(&state, 0, &mut rng).is_err());
    }
}
