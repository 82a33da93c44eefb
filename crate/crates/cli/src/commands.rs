use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use mods::dataio::{generate_synthetic, write_dataset, Dataset};
use mods::numcore::GradReport;
use mods::objective::MetricReport;
use mods::trainer::{
    evaluate_checkpoint, load_checkpoint, resume, run_grad_suite, save_checkpoint, train, Evaluation, History,
    TrainOutcome,
};
use mods::{Error, Modality};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    Ok(Dataset::load(cfg.data_dir()?)?)
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.out_dir()?;
    let (manifest, samples) = generate_synthetic(&cfg.synth)?;
    write_dataset(&samples, &manifest, out)?;
    let mut planted = BTreeMap::new();
    for m in manifest.planted_primary.values() {
        *planted.entry(m.code()).or_insert(0usize) += 1;
    }
    println!("wrote {} samples of `{}` to {}", samples.len(), manifest.name, out.display());
    for (split, ids) in &manifest.splits {
        println!("  split {split}: {}", ids.len());
    }
    println!("  planted primary counts: {planted:?}");
    Ok(())
}

/// Contents of `metrics.json`.
#[derive(Serialize)]
struct MetricsFile<'a> {
    split: &'a str,
    samples: usize,
    #[serde(flatten)]
    metrics: &'a MetricReport,
    corr_degenerate: bool,
    /// Over samples with a planted primary; absent when there are none.
    selection_accuracy: Option<f64>,
}

fn write_metrics(dir: &Path, split: &str, eval: &Evaluation) -> CliResult<()> {
    write_json(
        &dir.join("metrics.json"),
        &MetricsFile {
            split,
            samples: eval.rows.len(),
            metrics: &eval.metrics,
            corr_degenerate: eval.metrics.corr_degenerate,
            selection_accuracy: eval.selection_accuracy(),
        },
    )
}

fn print_metrics(split: &str, eval: &Evaluation) {
    let m = &eval.metrics;
    println!(
        "{split}: MAE {:.4}  Corr {:.4}  Acc2 {:.4}/{:.4}  F1 {:.4}/{:.4}  Acc3 {:.4}  Acc5 {:.4}  Acc7 {:.4}",
        m.mae, m.corr, m.acc2_nonneg, m.acc2_posneg, m.f1_nonneg, m.f1_posneg, m.acc3, m.acc5, m.acc7
    );
    if let Some(acc) = eval.selection_accuracy() {
        println!("{split}: primary selection accuracy {acc:.4}");
    }
}

pub fn train_cmd(cfg: &RunConfig, resume_from: Option<&Path>) -> CliResult<()> {
    let out = cfg.out_dir()?;
    let ds = load_dataset(cfg)?;
    let result = match resume_from {
        Some(path) => {
            let last = load_checkpoint(path)?;
            if last.model != cfg.model {
                return Err(CliError::Config(format!(
                    "model section differs from the one stored in {}",
                    path.display()
                )));
            }
            resume(&ds, &last, &cfg.train)
        }
        None => train(&ds, &cfg.model, &cfg.train),
    };
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let TrainOutcome { best, last, history } = match result {
        Ok(o) => o,
        Err(Error::Diverged {
            epoch,
            reason,
            last_finite,
        }) => {
            save_checkpoint(&last_finite, out.join("last.ckpt"))?;
            write_json(&out.join("history.json"), &History::from_checkpoint(&last_finite))?;
            return Err(CliError::Numerical(format!(
                "training diverged in epoch {epoch} ({reason}); state before that epoch saved to {}",
                out.join("last.ckpt").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&best, out.join("best.ckpt"))?;
    save_checkpoint(&last, out.join("last.ckpt"))?;
    write_json(&out.join("history.json"), &history)?;
    let eval = evaluate_checkpoint(&best, &ds, cfg.split())?;
    write_metrics(out, cfg.split(), &eval)?;
    println!(
        "{} epochs ({}), best epoch {:?}, ablation {}",
        history.epochs.len(),
        if history.stopped_early { "stopped early" } else { "epoch limit" },
        history.best_epoch,
        history.ablation
    );
    print_metrics(cfg.split(), &eval);
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.out_dir()?;
    let ds = load_dataset(cfg)?;
    let ckpt = load_checkpoint(cfg.checkpoint()?)?;
    let eval = evaluate_checkpoint(&ckpt, &ds, cfg.split())?;
    create_dir(out)?;
    write_metrics(out, cfg.split(), &eval)?;
    let path = out.join("selections.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for row in &eval.rows {
        w.serialize(row).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    print_metrics(cfg.split(), &eval);
    println!("outputs in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ModuleResult<'a> {
    module: &'a str,
    passed: bool,
    max_rel_error: f64,
    tolerance: f64,
    failures: Vec<(&'a str, f64)>,
}

fn module_result<'a>(module: &'a str, r: &'a GradReport) -> ModuleResult<'a> {
    ModuleResult {
        module,
        passed: r.passed(),
        max_rel_error: r.max_rel_error,
        tolerance: r.tolerance,
        failures: r.failures(),
    }
}

pub fn gradcheck_cmd(cfg: &RunConfig, corrupt: Option<&str>) -> CliResult<()> {
    let report = run_grad_suite(cfg.gradcheck.seed.unwrap_or(0), corrupt)?;
    let results: Vec<_> = report.modules.iter().map(|m| module_result(&m.module, &m.report)).collect();
    for r in &results {
        println!(
            "{:<12} max_rel_error {:.3e}  {}",
            r.module,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        for (name, err) in &r.failures {
            println!("    {name}: relative error {err:.3e} >= {:.0e}", r.tolerance);
        }
    }
    if let Some(out) = &cfg.output.dir {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &results)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failing: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.module).collect();
        Err(CliError::Numerical(format!("gradient check failed for {failing:?}")))
    }
}

/// One row of `inspect-weights`.
#[derive(Serialize)]
struct WeightRow<'a> {
    id: &'a str,
    w_a: f64,
    w_t: f64,
    w_v: f64,
    primary: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_primary: Option<Modality>,
}

pub fn inspect_weights(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let ckpt = load_checkpoint(cfg.checkpoint()?)?;
    let eval = evaluate_checkpoint(&ckpt, &ds, cfg.split())?;
    let rows: Vec<_> = eval
        .rows
        .iter()
        .map(|r| WeightRow {
            id: &r.id,
            w_a: r.w_a,
            w_t: r.w_t,
            w_v: r.w_v,
            primary: r.primary,
            planted_primary: r.planted_primary,
        })
        .collect();
    match &cfg.output.dir {
        Some(out) => {
            create_dir(out)?;
            write_json(&out.join("weights.json"), &rows)?;
            println!("{} rows written to {}", rows.len(), out.join("weights.json").display());
        }
        None => {
            let text = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Data(e.to_string()))?;
            println!("{text}");
        }
    }
    Ok(())
}
