//! Stage orchestration: run directories, artifact persistence, resumability,
//! and the enumerate/report commands. Every stage is skipped when its output
//! artifacts already exist, so a pipeline can resume from any point and
//! `--stage` reruns exactly one stage against cached inputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::latency::{Bench, LatencyTable};
use crate::retrain::{self, RetrainConfig};
use crate::searchspace::{
    assign_bins, build_operation_set, canonical_count, enumerate_block, raw_count, Architecture,
    OperationSet,
};
use crate::selection::{
    self, build_arch_table, final_select, item_architecture, select_top, select_top_streaming,
    ArchTable, ArchTableItem, EmbeddingSpec, FinalSelection,
};
use crate::shrinktrain::{self, prepare_traces, run_training, SearchSpaceState};
use crate::supernet::{build_supernet, Supernet};
use crate::teacher::{corpus::DEFAULT_CORPUS, train_teacher, Corpus, Teacher};

pub const STAGES: &[&str] =
    &["train-teacher", "bench-latency", "train-supernet", "select", "retrain", "report"];

/// Artifact layout of one run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn config_path(&self) -> PathBuf {
        self.path("config.json")
    }
}

/// Exclusive pipeline lock: one pipeline per run directory.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run: &RunDir) -> Result<Self> {
        let path = run.path("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "run directory is locked by another pipeline ({})",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Write the resolved config into the run dir, or verify it matches the one
/// already there; run directories are append-only.
pub fn pin_config(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let path = run.config_path();
    if path.exists() {
        let existing = RunConfig::load(&path)?;
        if existing.hash() != cfg.hash() {
            return Err(Error::State(format!(
                "run directory {} was created with a different config",
                run.root.display()
            )));
        }
        return Ok(());
    }
    cfg.save(&path)
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.teacher.corpus_path {
        Some(path) => Corpus::from_file(path, cfg.teacher.max_seq_len),
        None => Corpus::from_text(DEFAULT_CORPUS, cfg.teacher.max_seq_len),
    }
}

pub fn op_set(cfg: &RunConfig) -> Result<OperationSet> {
    build_operation_set(&cfg.search.hidden_sizes, &cfg.search.kernels)
}

// ---- enumerate ----

#[derive(Debug, Serialize, Deserialize)]
pub struct EnumerateReport {
    pub raw: u128,
    pub canonical_closed_form: u128,
    pub enumerated: usize,
    pub operations: usize,
    /// (bin index, population); param-only binning when no latency table is
    /// available (a zero table makes the latency constraint vacuous).
    pub per_bin: Vec<(usize, usize)>,
}

impl EnumerateReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("operations            {}\n", self.operations));
        out.push_str(&format!("raw sequences         {}\n", self.raw));
        out.push_str(&format!("canonical (closed)    {}\n", self.canonical_closed_form));
        out.push_str(&format!("canonical (counted)   {}\n", self.enumerated));
        out.push_str("bin populations:\n");
        for (bin, n) in &self.per_bin {
            out.push_str(&format!("  bin {bin:>2}  {n}\n"));
        }
        out
    }
}

/// Count the block search space and its bin histogram; errors when the
/// enumerated count disagrees with the closed form.
pub fn cmd_enumerate(cfg: &RunConfig, lat_table: Option<&LatencyTable>) -> Result<EnumerateReport> {
    cfg.validate()?;
    let set = op_set(cfg)?;
    let per_block = cfg.search.layers / cfg.search.blocks;
    let archs = enumerate_block(per_block, &set)?;
    let types = set.types_per_hidden();
    let closed = canonical_count(per_block, set.hidden_sizes().len(), types);
    if archs.len() as u128 != closed {
        return Err(Error::Internal(format!(
            "enumerated {} block architectures but the closed form gives {closed}",
            archs.len()
        )));
    }
    let table = match lat_table {
        Some(t) => t.clone(),
        None => LatencyTable::from_entries(
            set.ops().iter().map(|&op| (op, 0.0)),
            cfg.active_profile(),
        ),
    };
    let bins = assign_bins(&archs, cfg.shrink.num_bins, &table)?;
    Ok(EnumerateReport {
        raw: raw_count(per_block, set.hidden_sizes().len(), types),
        canonical_closed_form: closed,
        enumerated: archs.len(),
        operations: set.len(),
        per_bin: bins.iter().map(|b| (b.index, b.members.len())).collect(),
    })
}

// ---- stages ----

pub fn stage_train_teacher(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    if run.has("teacher.ckpt") && run.has("teacher_log.json") {
        eprintln!("train-teacher: reusing {}", run.path("teacher.ckpt").display());
        return Ok(());
    }
    let corpus = load_corpus(cfg)?;
    let (teacher, log) = train_teacher(&corpus, &cfg.teacher_config())?;
    let init = log
        .initial_dev_loss()
        .ok_or_else(|| Error::State("teacher log holds no initial dev loss".into()))?;
    let fin = log
        .final_dev_loss()
        .ok_or_else(|| Error::State("teacher log holds no final dev loss".into()))?;
    let improvement = (init - fin) / init;
    if improvement < cfg.teacher.min_dev_improvement {
        return Err(Error::Validation(format!(
            "teacher dev loss improved only {:.1}% (needs {:.0}%)",
            improvement * 100.0,
            cfg.teacher.min_dev_improvement * 100.0
        )));
    }
    teacher.save(&run.path("teacher.ckpt"))?;
    write_json(&run.path("teacher_log.json"), &log)?;
    Ok(())
}

pub fn stage_bench_latency(cfg: &RunConfig, run: &RunDir, profile: Option<&str>) -> Result<()> {
    if run.has("latency.json") {
        eprintln!("bench-latency: reusing {}", run.path("latency.json").display());
        return Ok(());
    }
    let set = op_set(cfg)?;
    if let Some(path) = &cfg.latency.table_path {
        if path.exists() {
            let table = LatencyTable::load(path)?;
            table.check_totality(&set)?;
            table.save(&run.path("latency.json"))?;
            eprintln!("bench-latency: loaded table from {}", path.display());
            return Ok(());
        }
    }
    let prof = match profile {
        Some(name) => cfg.profile_named(name)?,
        None => cfg.active_profile(),
    };
    let bench = Bench::new(prof, &run.path("bench.lock"))?;
    let table = bench.build_table(&set)?;
    table.check_totality(&set)?;
    table.save(&run.path("latency.json"))?;
    if let Some(path) = &cfg.latency.table_path {
        // persist to the shared location so later runs reuse the measurement
        table.save(path)?;
    }
    Ok(())
}

pub struct SupernetArtifacts {
    pub net: Supernet,
    pub state: SearchSpaceState,
}

pub fn load_supernet(cfg: &RunConfig, run: &RunDir) -> Result<SupernetArtifacts> {
    let set = op_set(cfg)?;
    let net = Supernet::load(
        &run.path("supernet.ckpt"),
        set,
        cfg.search.layers,
        cfg.search.blocks,
        cfg.teacher.hidden,
    )?;
    let state = SearchSpaceState::load(&run.path("state.json"), &net)?;
    Ok(SupernetArtifacts { net, state })
}

pub fn load_teacher(cfg: &RunConfig, run: &RunDir) -> Result<Teacher> {
    let corpus = load_corpus(cfg)?;
    Teacher::load(&run.path("teacher.ckpt"), &cfg.teacher_config(), corpus.vocab.size())
}

pub fn stage_train_supernet(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    if run.has("supernet.ckpt") && run.has("state.json") && run.has("history.jsonl") {
        eprintln!("train-supernet: reusing {}", run.path("supernet.ckpt").display());
        return Ok(());
    }
    require(run, "teacher.ckpt", "train-teacher")?;
    require(run, "latency.json", "bench-latency")?;
    let corpus = load_corpus(cfg)?;
    let teacher = load_teacher(cfg, run)?;
    let lat_table = LatencyTable::load(&run.path("latency.json"))?;
    let set = op_set(cfg)?;
    let mut net = build_supernet(
        &set,
        cfg.search.layers,
        cfg.search.blocks,
        cfg.teacher.hidden,
        crate::subseed(cfg.seed, &[0x500]),
    )?;
    let (state, history) =
        run_training(&mut net, &teacher, &corpus, &cfg.shrink_config(), &cfg.train_schedule(), &lat_table)?;
    net.save(&run.path("supernet.ckpt"))?;
    state.save(&run.path("state.json"))?;
    write_jsonl(&run.path("history.jsonl"), &history.rounds)?;
    write_jsonl(&run.path("removals.jsonl"), &history.removals)?;
    write_jsonl(&run.path("train_curve.jsonl"), &history.train_curve)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChosenModel {
    pub arch_id: String,
    pub arch_text: String,
    pub architecture: Architecture,
    pub params: u64,
    pub approx_latency_ms: f64,
    pub approx_loss: f64,
    pub measured_loss: f64,
    pub measured_latency_ms: f64,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub feasible: usize,
    pub table_items: u128,
    pub diagnostic: Option<String>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRowOut {
    arch_id: String,
    arch_text: String,
    params: u64,
    approx_latency_ms: f64,
    approx_loss: f64,
}

fn table_row(
    state: &SearchSpaceState,
    item: &ArchTableItem,
    layers_per_block: usize,
) -> TableRowOut {
    let arch = item_architecture(state, item);
    TableRowOut {
        arch_id: item.arch_id(state.space().len()).to_string(),
        arch_text: arch.text(layers_per_block),
        params: item.params,
        approx_latency_ms: item.approx_latency_ms,
        approx_loss: item.approx_loss,
    }
}

/// Largest table that gets exported in full; beyond it only the selected
/// top-T rows are written.
const EXPORT_CAP: u128 = 100_000;

pub fn stage_select(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    if run.has("arch_table.jsonl") && run.has("selection.csv") && run.has("selection.json") {
        eprintln!("select: reusing {}", run.path("arch_table.jsonl").display());
        return Ok(());
    }
    require(run, "supernet.ckpt", "train-supernet")?;
    require(run, "teacher.ckpt", "train-teacher")?;
    require(run, "latency.json", "bench-latency")?;
    let corpus = load_corpus(cfg)?;
    let teacher = load_teacher(cfg, run)?;
    let SupernetArtifacts { net, state } = load_supernet(cfg, run)?;
    let lat_table = LatencyTable::load(&run.path("latency.json"))?;
    let sched = cfg.train_schedule();
    let (_, dev_traces) = prepare_traces(
        &teacher,
        &corpus,
        net.blocks,
        cfg.teacher.batch_size.min(8),
        sched.train_trace_batches,
        sched.mask_prob,
        sched.seed,
    )?;
    let losses = selection::block_dev_losses(&net, &state, &dev_traces)?;
    let emb = EmbeddingSpec { vocab_size: corpus.vocab.size(), max_seq_len: cfg.teacher.max_seq_len };
    let lat_id = file_sha256(&run.path("latency.json"))?;
    let table = build_arch_table(&state, &losses, &lat_table, emb, &lat_id)?;
    let constraint = cfg.constraint();
    let selected = select_top(&table, &constraint)?;
    // the streaming path must agree with the materialized sort exactly
    let streamed = select_top_streaming(&state, &losses, &lat_table, emb, &constraint)?;
    if selected.items != streamed.items {
        return Err(Error::Internal(
            "streaming top-T disagrees with the materialized table".into(),
        ));
    }

    let layers_per_block = net.layers_per_block();
    let export: Vec<TableRowOut> = if table.items.len() as u128 <= EXPORT_CAP {
        table.items.iter().map(|i| table_row(&state, i, layers_per_block)).collect()
    } else {
        selected.items.iter().map(|i| table_row(&state, i, layers_per_block)).collect()
    };
    write_jsonl(&run.path("arch_table.jsonl"), &export)?;

    let summary = SelectionSummary {
        feasible: selected.items.len(),
        table_items: selection::table_size(&table.survivor_snapshot),
        diagnostic: selected.diagnostic.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    write_json(&run.path("selection.json"), &summary)?;

    if selected.items.is_empty() {
        // no feasible model: selection.csv still records the outcome
        fs::write(
            run.path("selection.csv"),
            format!(
                "rank,arch_id,arch_text,params,approx_latency_ms,approx_loss,measured_loss,chosen\n# {}\n",
                selected.diagnostic.as_deref().unwrap_or("no feasible architecture")
            ),
        )?;
        return Ok(());
    }

    let final_sel = final_select(&net, &state, &selected.items, &dev_traces)?;
    write_selection_csv(&run.path("selection.csv"), &state, &final_sel, layers_per_block)?;

    let chosen_row = final_sel.chosen_row();
    if !constraint.admits(&chosen_row.item) {
        return Err(Error::Internal("chosen model violates the constraint".into()));
    }
    let arch = item_architecture(&state, &chosen_row.item);
    let measured_latency_ms = {
        let bench = Bench::new(cfg.active_profile(), &run.path("bench.lock"))?;
        bench.measure_arch(&arch, layers_per_block, corpus.vocab.size())?
    };
    let chosen = ChosenModel {
        arch_id: chosen_row.item.arch_id(state.space().len()).to_string(),
        arch_text: arch.text(layers_per_block),
        architecture: arch,
        params: chosen_row.item.params,
        approx_latency_ms: chosen_row.item.approx_latency_ms,
        approx_loss: chosen_row.item.approx_loss,
        measured_loss: chosen_row.measured_loss,
        measured_latency_ms,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    write_json(&run.path("chosen.json"), &chosen)?;
    Ok(())
}

fn write_selection_csv(
    path: &Path,
    state: &SearchSpaceState,
    final_sel: &FinalSelection,
    layers_per_block: usize,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "rank,arch_id,arch_text,params,approx_latency_ms,approx_loss,measured_loss,chosen")?;
    for (rank, row) in final_sel.rows.iter().enumerate() {
        let arch = item_architecture(state, &row.item);
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            rank + 1,
            row.item.arch_id(state.space().len()),
            arch.text(layers_per_block),
            row.item.params,
            row.item.approx_latency_ms,
            row.item.approx_loss,
            row.measured_loss,
            rank == final_sel.chosen
        )?;
    }
    Ok(())
}

pub fn stage_retrain(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    if run.has("standalone.ckpt") && run.has("finetune_report.json") {
        eprintln!("retrain: reusing {}", run.path("standalone.ckpt").display());
        return Ok(());
    }
    require(run, "selection.json", "select")?;
    if !run.has("chosen.json") {
        return Err(Error::State(
            "select found no feasible model; nothing to retrain".into(),
        ));
    }
    require(run, "teacher.ckpt", "train-teacher")?;
    let corpus = load_corpus(cfg)?;
    let teacher = load_teacher(cfg, run)?;
    let chosen: ChosenModel = read_json(&run.path("chosen.json"))?;
    let layers_per_block = cfg.search.layers / cfg.search.blocks;
    let rcfg = cfg.retrain_config();
    let mut model = retrain::instantiate(
        &chosen.architecture,
        layers_per_block,
        corpus.vocab.size(),
        cfg.teacher.max_seq_len,
        crate::subseed(cfg.seed, &[0x57a]),
    )?;
    let teacher_ref = (rcfg.lambda > 0.0).then_some(&teacher);
    let log = retrain::pretrain_kd(&mut model, &corpus, teacher_ref, &rcfg)?;
    let init = log.initial_dev_loss().unwrap_or(f64::NAN);
    let fin = log.final_dev_loss().unwrap_or(f64::NAN);
    if !((init - fin) / init >= cfg.retrain.min_dev_improvement) {
        return Err(Error::Validation(format!(
            "pretraining improved dev loss only {:.1}%",
            (init - fin) / init * 100.0
        )));
    }
    write_json(&run.path("retrain_log.json"), &log)?;

    let task = retrain::generate_task(
        &corpus,
        cfg.retrain.task_train_examples,
        cfg.retrain.task_dev_examples,
        cfg.teacher.max_seq_len.min(16),
        crate::subseed(cfg.seed, &[0x7a5c]),
    )?;
    retrain::save_task(&task, |id| corpus.vocab.decode_char(id), &run.path("task.jsonl"))?;
    let teacher_clf = if rcfg.lambda > 0.0 {
        Some(retrain::finetune_teacher(
            &teacher,
            &task,
            cfg.retrain.teacher_finetune_steps,
            cfg.retrain.peak_lr,
            crate::subseed(cfg.seed, &[0x7f7]),
        )?)
    } else {
        None
    };
    let ft_cfg = RetrainConfig { steps: cfg.retrain.finetune_steps, ..rcfg };
    let report = retrain::finetune_kd(&mut model, &task, teacher_clf.as_ref(), &ft_cfg)?;
    write_json(&run.path("finetune_report.json"), &report)?;
    model.save(&run.path("standalone.ckpt"))?;
    Ok(())
}

// ---- report ----

pub fn cmd_report(cfg: &RunConfig, run: &RunDir) -> Result<String> {
    require(run, "selection.json", "select")?;
    let summary: SelectionSummary = read_json(&run.path("selection.json"))?;
    let mut text = String::new();
    text.push_str(&format!("# config_hash: {}\n", summary.config_hash));
    text.push_str(&format!("# seed: {}\n", summary.seed));
    text.push_str(&format!(
        "# generated_at: {}\n",
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    ));
    text.push_str(&format!("# table_items: {}\n", summary.table_items));
    if !run.has("chosen.json") {
        let diag = summary.diagnostic.unwrap_or_else(|| "no feasible architecture".into());
        text.push_str(&format!("no model selected: {diag}\n"));
        fs::write(run.path("report.txt"), &text)?;
        return Ok(text);
    }
    let chosen: ChosenModel = read_json(&run.path("chosen.json"))?;
    // params column must reconcile with a fresh audit of the architecture
    let corpus = load_corpus(cfg)?;
    let emb = EmbeddingSpec { vocab_size: corpus.vocab.size(), max_seq_len: cfg.teacher.max_seq_len };
    let emb_dim = chosen
        .architecture
        .block_hidden(0, cfg.search.layers / cfg.search.blocks)
        .ok_or_else(|| Error::Validation("chosen architecture has an empty first block".into()))?;
    let audited = chosen.architecture.param_count() + emb.params(emb_dim);
    if audited != chosen.params {
        return Err(Error::Validation(format!(
            "params column {} disagrees with re-audited count {audited}",
            chosen.params
        )));
    }
    text.push_str("\nchosen model\n");
    text.push_str(&format!("  architecture   {}\n", chosen.arch_text));
    text.push_str(&format!("  arch_id        {}\n", chosen.arch_id));
    text.push_str(&format!("  params         {}\n", chosen.params));
    text.push_str(&format!("  approx latency {:.3} ms\n", chosen.approx_latency_ms));
    text.push_str(&format!("  meas. latency  {:.3} ms\n", chosen.measured_latency_ms));
    text.push_str(&format!("  approx loss    {:.6}\n", chosen.approx_loss));
    text.push_str(&format!("  measured loss  {:.6}\n", chosen.measured_loss));
    if run.has("finetune_report.json") {
        let ft: retrain::FinetuneReport = read_json(&run.path("finetune_report.json"))?;
        text.push_str(&format!(
            "  task accuracy  {:.3} (majority baseline {:.3})\n",
            ft.dev_accuracy, ft.majority_baseline
        ));
    }
    text.push_str("\nfinalists (see selection.csv / report.csv)\n");
    let csv = fs::read_to_string(run.path("selection.csv"))?;
    for line in csv.lines().take(11) {
        text.push_str(&format!("  {line}\n"));
    }
    fs::write(run.path("report.txt"), &text)?;
    fs::copy(run.path("selection.csv"), run.path("report.csv"))?;
    Ok(text)
}

/// Run all stages in order; each stage reuses artifacts that already exist.
pub fn cmd_pipeline(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    cfg.validate()?;
    let _lock = RunLock::acquire(run)?;
    pin_config(cfg, run)?;
    let stages: [(&str, fn(&RunConfig, &RunDir) -> Result<()>); 5] = [
        ("train-teacher", stage_train_teacher),
        ("bench-latency", |c, r| stage_bench_latency(c, r, None)),
        ("train-supernet", stage_train_supernet),
        ("select", stage_select),
        ("retrain", stage_retrain),
    ];
    for (name, stage) in stages {
        stage(cfg, run).map_err(|e| {
            Error::State(format!("stage {name} failed ({}): {e}", run.root.display()))
        })?;
    }
    cmd_report(cfg, run)?;
    Ok(())
}

/// Run a single named stage (pipeline resumability entry point).
pub fn stage_named(cfg: &RunConfig, run: &RunDir, name: &str) -> Result<()> {
    pin_config(cfg, run)?;
    match name {
        "train-teacher" => stage_train_teacher(cfg, run),
        "bench-latency" => stage_bench_latency(cfg, run, None),
        "train-supernet" => stage_train_supernet(cfg, run),
        "select" => stage_select(cfg, run),
        "retrain" => stage_retrain(cfg, run),
        "report" => cmd_report(cfg, run).map(|_| ()),
        other => Err(Error::Config(format!(
            "unknown stage {other:?}; expected one of {STAGES:?}"
        ))),
    }
}

// ---- small helpers ----

fn require(run: &RunDir, artifact: &str, producing_stage: &str) -> Result<()> {
    if !run.has(artifact) {
        return Err(Error::State(format!(
            "missing artifact {} (run stage {producing_stage} first)",
            run.path(artifact).display()
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Strip comment/timestamp lines so two runs can be compared byte-wise.
pub fn strip_timestamps(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with("# generated_at"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_matches_closed_forms() {
        let desk = RunConfig::desk_default();
        let report = cmd_enumerate(&desk, None).unwrap();
        assert_eq!(report.enumerated, 1020);
        assert_eq!(report.operations, 13);
        let paper = RunConfig::paper_dimensions();
        let report = cmd_enumerate(&paper, None).unwrap();
        assert_eq!(report.enumerated, 97650);
        assert_eq!(report.raw, 233280);
        assert_eq!(report.operations, 26);
    }

    #[test]
    fn enumerate_bin_histogram_partitions_the_space() {
        let desk = RunConfig::desk_default();
        let report = cmd_enumerate(&desk, None).unwrap();
        let total: usize = report.per_bin.iter().map(|(_, n)| n).sum();
        assert_eq!(total, 1020);
    }

    #[test]
    fn run_lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).unwrap();
        let lock = RunLock::acquire(&run).unwrap();
        assert!(RunLock::acquire(&run).is_err());
        drop(lock);
        RunLock::acquire(&run).unwrap();
    }

    #[test]
    fn pin_config_rejects_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).unwrap();
        let cfg = RunConfig::desk_default();
        pin_config(&cfg, &run).unwrap();
        pin_config(&cfg, &run).unwrap();
        let mut other = cfg.clone();
        other.seed = 99;
        assert!(pin_config(&other, &run).is_err());
    }
}
