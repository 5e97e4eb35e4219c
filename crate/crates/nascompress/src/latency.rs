//! Wall-clock latency measurement for candidate operations, the persisted
//! per-op lookup table, and the additive architecture-latency approximation.
//!
//! Measurement wants an otherwise idle host; a lock file serializes harness
//! runs. Approximation is an exact sum over per-layer table entries, so all
//! statistical tolerance lives on the measurement side.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{Architecture, BlockArch, OperationSpec, OperationSet};
use crate::supernet::{forward_residual_layer, init_op_params};
use crate::{Graph, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub batch: usize,
    pub seq_len: usize,
    pub warmup_iters: usize,
    pub measure_iters: usize,
    pub host: String,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self { batch: 1, seq_len: 32, warmup_iters: 20, measure_iters: 100, host: host_descriptor() }
    }
}

pub fn host_descriptor() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".to_string());
    format!("{model} ({cores} cores)")
}

/// Per-operation latency map plus the profile it was measured under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyTable {
    entries: BTreeMap<OperationSpec, f64>,
    pub profile: LatencyProfile,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    op: OperationSpec,
    latency_ms: f64,
    profile: LatencyProfile,
}

impl LatencyTable {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (OperationSpec, f64)>,
        profile: LatencyProfile,
    ) -> Self {
        Self { entries: entries.into_iter().collect(), profile }
    }

    pub fn get(&self, op: &OperationSpec) -> Result<f64> {
        self.entries
            .get(op)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no latency entry for {}", op.token())))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every operation of the active set has exactly one entry and identity
    /// is zero by definition.
    pub fn check_totality(&self, op_set: &OperationSet) -> Result<()> {
        for op in op_set.ops() {
            let ms = self.get(op)?;
            if ms < 0.0 {
                return Err(Error::Validation(format!("negative latency for {}", op.token())));
            }
            if op.is_identity() && ms != 0.0 {
                return Err(Error::Validation("identity latency must be 0".into()));
            }
        }
        Ok(())
    }

    pub fn approx_block_latency(&self, arch: &BlockArch) -> Result<f64> {
        arch.ops.iter().map(|op| self.get(op)).sum()
    }

    /// `l(a) = sum over layers of the per-op entry`; exact by construction.
    pub fn approx_latency(&self, arch: &Architecture) -> Result<f64> {
        arch.layers.iter().map(|op| self.get(op)).sum()
    }

    /// JSON array of `{op, latency_ms, profile}` rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<TableRow> = self
            .entries
            .iter()
            .map(|(&op, &latency_ms)| TableRow { op, latency_ms, profile: self.profile.clone() })
            .collect();
        fs::write(path, serde_json::to_string_pretty(&rows).map_err(io_err)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let rows: Vec<TableRow> = serde_json::from_str(&text).map_err(io_err)?;
        let profile = rows
            .first()
            .map(|r| r.profile.clone())
            .ok_or_else(|| Error::Format("empty latency table".into()))?;
        Ok(Self {
            entries: rows.into_iter().map(|r| (r.op, r.latency_ms)).collect(),
            profile,
        })
    }
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

/// Exclusive measurement session. Creating it takes the lock file; dropping
/// releases it.
pub struct Bench {
    pub profile: LatencyProfile,
    lock_path: PathBuf,
}

impl Bench {
    pub fn new(profile: LatencyProfile, lock_path: &Path) -> Result<Self> {
        match fs::OpenOptions::new().write(true).create_new(true).open(lock_path) {
            Ok(_) => Ok(Self { profile, lock_path: lock_path.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "another measurement holds {}",
                lock_path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    /// Median forward latency of one operation applied as a residual layer
    /// (`layernorm(x + op(x))`), fresh random weights and inputs. Identity is
    /// 0 by definition.
    pub fn measure_op(&self, op: &OperationSpec) -> Result<f64> {
        if op.is_identity() {
            return Ok(0.0);
        }
        let hidden = op.hidden().expect("non-identity has hidden");
        let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
        let mut store = ParamStore::new();
        init_op_params(&mut store, "bench/", op, &mut rng)?;
        let x = Tensor::uniform(&[self.profile.batch, self.profile.seq_len, hidden], -1.0, 1.0, &mut rng);
        self.timed_median(|| {
            let mut g = Graph::new();
            let xin = g.input(x.clone());
            let y = forward_residual_layer(&mut g, &store, "bench/", op, xin)?;
            std::hint::black_box(g.value(y).data().first().copied());
            Ok(())
        })
    }

    /// Median end-to-end forward latency of the instantiated standalone
    /// encoder (embedding, bridges, non-identity layers; no output head).
    pub fn measure_arch(
        &self,
        arch: &Architecture,
        layers_per_block: usize,
        vocab_size: usize,
    ) -> Result<f64> {
        let model = crate::retrain::instantiate(
            arch,
            layers_per_block,
            vocab_size,
            self.profile.seq_len,
            0x1a7e,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xbeef);
        let ids: Vec<usize> = (0..self.profile.batch * self.profile.seq_len)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..vocab_size))
            .collect();
        self.timed_median(|| {
            let mut g = Graph::new();
            let h = model.encode(&mut g, &ids, self.profile.batch, self.profile.seq_len, None)?;
            std::hint::black_box(g.value(h).data().first().copied());
            Ok(())
        })
    }

    fn timed_median(&self, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
        for _ in 0..self.profile.warmup_iters {
            run()?;
        }
        let mut samples = Vec::with_capacity(self.profile.measure_iters);
        for _ in 0..self.profile.measure_iters {
            let t0 = Instant::now();
            run()?;
            samples.push(t0.elapsed());
        }
        let mut median = median_ms(&mut samples);
        // Guard against timer granularity: re-measure in blocks when a single
        // call is too quick to resolve.
        if median < 5e-3 {
            eprintln!(
                "warning: median {median:.6} ms near timer resolution; re-measuring in blocks of 16"
            );
            let mut blocks = Vec::with_capacity(self.profile.measure_iters);
            for _ in 0..self.profile.measure_iters {
                let t0 = Instant::now();
                for _ in 0..16 {
                    run()?;
                }
                blocks.push(t0.elapsed() / 16);
            }
            median = median_ms(&mut blocks);
        }
        Ok(median)
    }

    /// Measure every operation of the set.
    pub fn build_table(&self, op_set: &OperationSet) -> Result<LatencyTable> {
        let mut entries = BTreeMap::new();
        for op in op_set.ops() {
            entries.insert(*op, self.measure_op(op)?);
        }
        Ok(LatencyTable { entries, profile: self.profile.clone() })
    }
}

impl Drop for Bench {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock_path);
    }
}

fn median_ms(samples: &mut [Duration]) -> f64 {
    samples.sort_unstable();
    let mid = samples.len() / 2;
    samples[mid].as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::build_operation_set;

    fn tiny_profile() -> LatencyProfile {
        LatencyProfile { batch: 1, seq_len: 8, warmup_iters: 2, measure_iters: 6, host: "test".into() }
    }

    #[test]
    fn identity_measures_zero() {
        let dir = std::env::temp_dir().join("nascompress-test-lock-id");
        let _ = fs::remove_file(&dir);
        let bench = Bench::new(tiny_profile(), &dir).unwrap();
        assert_eq!(bench.measure_op(&OperationSpec::Identity).unwrap(), 0.0);
    }

    #[test]
    fn lock_file_excludes_concurrent_runs() {
        let path = std::env::temp_dir().join("nascompress-test-lock-excl");
        let _ = fs::remove_file(&path);
        let first = Bench::new(tiny_profile(), &path).unwrap();
        assert!(Bench::new(tiny_profile(), &path).is_err());
        drop(first);
        let again = Bench::new(tiny_profile(), &path).unwrap();
        drop(again);
    }

    #[test]
    fn additive_approximation_is_linear() {
        let set = build_operation_set(&[16, 32], &[3]).unwrap();
        let table = LatencyTable::from_entries(
            set.ops().iter().enumerate().map(|(i, &op)| {
                (op, if op.is_identity() { 0.0 } else { 0.25 * (i + 1) as f64 })
            }),
            tiny_profile(),
        );
        let a = Architecture::new(vec![
            OperationSpec::Mha { hidden: 16 },
            OperationSpec::Ffn { hidden: 16 },
        ]);
        let b = Architecture::new(vec![
            OperationSpec::SepConv { hidden: 32, kernel: 3 },
            OperationSpec::Identity,
        ]);
        let mut joined = a.layers.clone();
        joined.extend(b.layers.clone());
        let joined = Architecture::new(joined);
        let la = table.approx_latency(&a).unwrap();
        let lb = table.approx_latency(&b).unwrap();
        assert_eq!(table.approx_latency(&joined).unwrap(), la + lb);
    }

    #[test]
    fn approx_is_permutation_invariant() {
        let table = LatencyTable::from_entries(
            [
                (OperationSpec::Mha { hidden: 16 }, 2.0),
                (OperationSpec::Ffn { hidden: 16 }, 1.0),
                (OperationSpec::Identity, 0.0),
            ],
            tiny_profile(),
        );
        let a = Architecture::new(vec![
            OperationSpec::Mha { hidden: 16 },
            OperationSpec::Ffn { hidden: 16 },
            OperationSpec::Identity,
        ]);
        assert_eq!(table.approx_latency(&a).unwrap(), 3.0);
        let mut layers = a.layers.clone();
        layers.reverse();
        assert_eq!(table.approx_latency(&Architecture::new(layers)).unwrap(), 3.0);
    }

    #[test]
    fn missing_op_is_a_lookup_error() {
        let table = LatencyTable::from_entries(
            [(OperationSpec::Identity, 0.0)],
            tiny_profile(),
        );
        let arch = Architecture::new(vec![OperationSpec::Ffn { hidden: 16 }]);
        assert!(table.approx_latency(&arch).is_err());
    }

    #[test]
    fn totality_check_covers_the_set() {
        let set = build_operation_set(&[16], &[3]).unwrap();
        let full = LatencyTable::from_entries(
            set.ops().iter().map(|&op| (op, if op.is_identity() { 0.0 } else { 1.0 })),
            tiny_profile(),
        );
        full.check_totality(&set).unwrap();
        let partial = LatencyTable::from_entries(
            [(OperationSpec::Identity, 0.0)],
            tiny_profile(),
        );
        assert!(partial.check_totality(&set).is_err());
    }

    #[test]
    fn table_roundtrips_through_json() {
        let set = build_operation_set(&[16], &[3]).unwrap();
        let table = LatencyTable::from_entries(
            set.ops().iter().map(|&op| (op, if op.is_identity() { 0.0 } else { 1.5 })),
            tiny_profile(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lt.json");
        table.save(&path).unwrap();
        let back = LatencyTable::load(&path).unwrap();
        assert_eq!(back.len(), table.len());
        for op in set.ops() {
            assert_eq!(back.get(op).unwrap(), table.get(op).unwrap());
        }
    }
}
