//! Subcommand bodies. Each validates its inputs completely before writing
//! anything.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use apivr::data::{self, PairedDataset, Split};
use apivr::losses::LossReport;
use apivr::model::{self, checkpoint, ModelState, Parameters};
use apivr::retrieval::{self, MapScore};
use apivr::training::{self, GradCheckReport, LossKind, TrainOutcome};
use serde::Serialize;

use crate::config::RunConfigFile;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.apvr";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";

/// Cut-offs reported after training and by `eval` by default.
pub const DEFAULT_KS: [usize; 4] = [10, 20, 50, 100];

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn report_io(r: std::io::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| CliError::io("<output>", e))
}

/// Generates the configured synthetic dataset into `out_dir`.
pub fn cmd_gen(cfg: &RunConfigFile, out_dir: &Path) -> Result<PathBuf, CliError> {
    cfg.synthetic.validate()?;
    let ds = data::generate_synthetic(&cfg.synthetic)?;
    Ok(data::save_dataset(&ds, out_dir)?)
}

/// Deterministic end-of-run report, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub stopped_early: bool,
    pub ablations: Vec<&'static str>,
    pub final_loss: Option<LossReport>,
    pub test_map: Vec<MapScore>,
    /// Fraction of test bags whose clean proposals outweigh their noisy
    /// ones on average; absent without clean flags.
    pub clean_above_noisy: Option<f64>,
}

impl TrainSummary {
    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.test_map.iter().find(|s| s.requested_k == k).map(|s| s.map)
    }
}

#[derive(Serialize)]
struct Timing<'a> {
    total_seconds: f64,
    per_iteration: &'a [f64],
}

/// Trains on the dataset at `manifest` and writes the checkpoint, log,
/// summary and timing files into `out_dir`. Progress goes to `err`; the
/// test mAP table and a final summary line go to `out`.
pub fn cmd_train(
    cfg: &RunConfigFile,
    manifest: &Path,
    out_dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let ds = data::load_dataset(manifest)?;
    let tc = &cfg.train;
    tc.validate_for(&ds)?;
    create_dir(out_dir)?;

    let total = tc.outer_iterations;
    let every = (total / 20).max(1);
    let result = training::train_with(&ds, tc, |r| {
        if r.iteration % every == 0 || r.iteration == total {
            let _ = writeln!(
                err,
                "iteration {}/{}: total {:.6} triplet {:.6} classification {:.6} adversarial {:.6}",
                r.iteration, total, r.loss.total, r.loss.triplet, r.loss.classification, r.loss.adversarial
            );
        }
    });
    let TrainOutcome {
        model,
        log,
        seconds,
        stopped_early,
    } = match result {
        Ok(outcome) => outcome,
        Err(abort) => {
            write_file(&out_dir.join(LOG_FILE), abort.log.to_jsonl())?;
            return Err(abort.into());
        }
    };

    write_file(&out_dir.join(LOG_FILE), log.to_jsonl())?;
    checkpoint::save(&model, &out_dir.join(CHECKPOINT_FILE))?;
    let timing = Timing {
        total_seconds: seconds.iter().sum(),
        per_iteration: &seconds,
    };
    write_file(
        &out_dir.join(TIMING_FILE),
        serde_json::to_string_pretty(&timing).expect("timing serialises"),
    )?;

    let results = retrieval::rank_split(&model, &ds, Split::Test)?;
    let summary = TrainSummary {
        iterations: log.records.len(),
        stopped_early,
        ablations: tc.ablations.active(),
        final_loss: log.records.last().map(|r| r.loss),
        test_map: retrieval::map_table(&results, &DEFAULT_KS)?,
        clean_above_noisy: training::attention_stats(&model, &ds, Split::Test)?.map(|s| s.clean_above_noisy),
    };
    write_file(
        &out_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )?;

    for s in &summary.test_map {
        report_io(writeln!(out, "test mAP@{}\t{:.6}", s.requested_k, s.map))?;
    }
    report_io(writeln!(
        out,
        "final: iterations={} total_loss={} mAP@10={:.6} checkpoint={}",
        summary.iterations,
        summary.final_loss.map_or("n/a".to_string(), |l| format!("{:.6}", l.total)),
        summary.map_at(10).unwrap_or(f64::NAN),
        out_dir.join(CHECKPOINT_FILE).display()
    ))?;
    Ok(summary)
}

fn check_compatible(model: &ModelState, ds: &PairedDataset) -> Result<(), CliError> {
    let dims = model.dims();
    let want = (dims.d1, dims.d2, dims.categories);
    let found = (ds.d1, ds.d2, ds.categories);
    if want != found {
        return Err(apivr::Error::DimMismatch {
            context: "checkpoint vs dataset (d1, d2, C)",
            expected: format!("{want:?}"),
            found: format!("{found:?}"),
        }
        .into());
    }
    Ok(())
}

fn load_pair(ckpt: &Path, manifest: &Path) -> Result<(ModelState, PairedDataset), CliError> {
    let model = checkpoint::load(ckpt)?;
    let ds = data::load_dataset(manifest)?;
    check_compatible(&model, &ds)?;
    Ok((model, ds))
}

/// mAP@K on the test split for each requested K. Cut-offs beyond the
/// gallery size are clipped with a warning on `err`.
pub fn cmd_eval(ckpt: &Path, manifest: &Path, ks: &[usize], err: &mut dyn Write) -> Result<Vec<MapScore>, CliError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(apivr::Error::InvalidConfig("cut-offs must be >= 1".into()).into());
    }
    let (model, ds) = load_pair(ckpt, manifest)?;
    let results = retrieval::rank_split(&model, &ds, Split::Test)?;
    let table = retrieval::map_table(&results, ks)?;
    for s in table.iter().filter(|s| s.k != s.requested_k) {
        report_io(writeln!(
            err,
            "warning: K={} exceeds the gallery size; clipped to {}",
            s.requested_k, s.k
        ))?;
    }
    Ok(table)
}

/// Runs the gradient check on a seeded synthetic batch and prints one line
/// per (loss, group) pair. Fails with [`CliError::GradCheck`] when any
/// pair exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfigFile, out: &mut dyn Write) -> Result<GradCheckReport, CliError> {
    cmd_gradcheck_with(cfg, out, |_, _| {})
}

/// [`cmd_gradcheck`] with a hook applied to each analytic gradient before
/// comparison.
pub fn cmd_gradcheck_with(
    cfg: &RunConfigFile,
    out: &mut dyn Write,
    hook: impl FnMut(LossKind, &mut Parameters),
) -> Result<GradCheckReport, CliError> {
    cfg.validate()?;
    let ds = data::generate_synthetic(&cfg.synthetic)?;
    cfg.train.validate_for(&ds)?;
    let model = model::init_params_glorot(&cfg.train.model_dims(&ds), cfg.train.ablations.weighting(), cfg.train.seed)?;
    let batch = training::grad_check_batch(&ds, cfg.gradcheck.batch_size, cfg.gradcheck.seed)?;
    let report = training::grad_check_with(&model, &batch, &cfg.train.loss_settings(), &cfg.gradcheck.options(), hook)?;
    for e in &report.entries {
        let status = if e.max_relative_error <= report.tolerance { "ok" } else { "FAIL" };
        let kind = if e.structural_zero { "zero" } else { "probed" };
        report_io(writeln!(
            out,
            "{:<15} {:<14} {:<6} {:>6} {:.3e} {}",
            e.loss.name(),
            e.group.name(),
            kind,
            e.coordinates,
            e.max_relative_error,
            status
        ))?;
    }
    let failed: Vec<String> = report
        .failures()
        .map(|e| format!("({}, {}) error {:.3e}", e.loss.name(), e.group.name(), e.max_relative_error))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::GradCheck(failed.join(", ")));
    }
    report_io(writeln!(out, "all {} pairs within {:e}", report.entries.len(), report.tolerance))?;
    Ok(report)
}

/// Writes the ranking of every query in `split` to `out_path` (one JSON
/// object per query, top `k` gallery entries) and returns mAP@k.
pub fn cmd_retrieve(ckpt: &Path, manifest: &Path, split: Split, k: usize, out_path: &Path) -> Result<f64, CliError> {
    if k == 0 {
        return Err(apivr::Error::InvalidConfig("k must be >= 1".into()).into());
    }
    let (model, ds) = load_pair(ckpt, manifest)?;
    let results = retrieval::rank_split(&model, &ds, split)?;
    let map = retrieval::map_at_k(&results, k)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out_path, retrieval::export_jsonl(&results, k))?;
    Ok(map)
}
