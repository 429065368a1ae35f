//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use mdgd_core::data::{gen_downstream, gen_downstream_eval, gen_pretrain, gen_probe, Dataset};
use mdgd_core::diagnostics::{
    compare_runs, erank_csv, evaluate, per_token_erank, repr_dump, ReprKind, ScoreTable,
};
use mdgd_core::io::{load_checkpoint, write_checkpoint, write_dataset, RunConfig};
use mdgd_core::model::{init_params, ModelParams};
use mdgd_core::optim::{train_loop, Method, StepDiagnostics};
use mdgd_core::rng::RngState;
use mdgd_core::{Error, Result};

/// Environment variable naming the default run root for relative output
/// directories.
pub const RUN_ROOT_ENV: &str = "MDGD_RUN_ROOT";

/// Resolves the effective run directory: explicit `--out` wins, then the
/// config's `output_dir`, joined under `MDGD_RUN_ROOT` when relative.
fn resolve_out(config: &RunConfig, out: Option<&Path>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    let dir = PathBuf::from(&config.output_dir);
    if dir.is_relative() {
        if let Ok(root) = std::env::var(RUN_ROOT_ENV) {
            return PathBuf::from(root).join(dir);
        }
    }
    dir
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Atomic text write (temp file + rename).
fn write_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_jsonl(path: &Path, log: &[StepDiagnostics]) -> Result<()> {
    let mut text = String::new();
    for entry in log {
        text.push_str(
            &serde_json::to_string(entry)
                .map_err(|e| Error::Format(format!("log serialization failed: {e}")))?,
        );
        text.push('\n');
    }
    write_text(path, &text)
}

/// Wall-clock sidecar; the only output that is not a pure function of the
/// config bytes.
fn append_meta(dir: &Path, what: &str) -> Result<()> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let path = dir.join("run_meta.txt");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{stamp} {what}").map_err(|e| Error::io(path.display().to_string(), e))
}

fn snapshot_config(dir: &Path, config: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &config.canonical_toml()?)
}

pub fn pretrain(config_path: &Path, out: Option<&Path>) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    // the pretraining stage is plain SGD by definition
    if config.optim.method != Method::Finetune {
        eprintln!(
            "note: pretraining always uses method=finetune (config said {})",
            config.optim.method
        );
        config.optim.method = Method::Finetune;
    }
    let dir = resolve_out(&config, out);
    ensure_dir(&dir)?;

    let dataset = gen_pretrain(
        &config.data.scene,
        config.data.n_pretrain,
        config.data.data_seed,
    )?;
    write_dataset(&dir.join("dataset_pretrain.bin"), &dataset)?;
    snapshot_config(&dir, &config)?;

    let init = init_params(&config.model, &mut RngState::new(config.model.seed))?;
    let (trained, log) = train_loop(&init, &dataset, &config.optim, config.seed)?;

    write_checkpoint(&dir.join("pretrained.ckpt"), &trained, &config)?;
    write_jsonl(&dir.join("pretrain.jsonl"), &log)?;
    append_meta(&dir, "pretrain")?;
    let last = log.last().map(|e| e.l_vl_theta).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps on {} samples; final task loss {last:.4}; wrote {}",
        log.len(),
        dataset.len(),
        dir.display()
    );
    Ok(())
}

pub fn finetune(
    config_path: &Path,
    pretrained: &Path,
    method: Option<&str>,
    alpha: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(m) = method {
        config.optim.method = m.parse()?;
    }
    if let Some(a) = alpha {
        config.optim.alpha = a;
    }
    config.validate()?;

    let (phi, phi_config) = load_checkpoint(pretrained)?;
    if phi_config.model != config.model {
        return Err(Error::Config(format!(
            "model config in {} does not match the run config",
            pretrained.display()
        )));
    }

    let dir = resolve_out(&config, out);
    ensure_dir(&dir)?;
    let dataset = gen_downstream(
        &config.data.scene,
        config.data.n_downstream,
        config.data.data_seed,
        config.data.focus,
    )?;
    write_dataset(&dir.join("dataset_downstream.bin"), &dataset)?;
    snapshot_config(&dir, &config)?;

    let (theta, log) = train_loop(&phi, &dataset, &config.optim, config.seed)?;

    write_checkpoint(&dir.join("finetuned.ckpt"), &theta, &config)?;
    write_jsonl(&dir.join("train.jsonl"), &log)?;
    append_meta(&dir, &format!("finetune method={}", config.optim.method))?;
    let last = log.last().map(|e| e.l_vl_theta).unwrap_or(f64::NAN);
    println!(
        "finetuned ({}) {} steps; final task loss {last:.4}; wrote {}",
        config.optim.method,
        log.len(),
        dir.display()
    );
    Ok(())
}

fn load_suite(params: &ModelParams, config: &RunConfig, suite: &str) -> Result<ScoreTable> {
    let scene = &config.data.scene;
    match suite {
        "probe" => {
            let probe = gen_probe(scene, config.data.n_probe, config.data.data_seed)?;
            Ok(ScoreTable { probe: Some(evaluate(params, &probe)?), target: None })
        }
        "target" => {
            // the H-score needs the probe average, so run both suites
            let probe = gen_probe(scene, config.data.n_probe, config.data.data_seed)?;
            let target = gen_downstream_eval(
                scene,
                config.data.n_eval,
                config.data.data_seed,
                config.data.focus,
            )?;
            Ok(ScoreTable {
                probe: Some(evaluate(params, &probe)?),
                target: Some(evaluate(params, &target)?),
            })
        }
        other => Err(Error::Config(format!(
            "unknown suite {other:?} (expected probe | target)"
        ))),
    }
}

pub fn eval(ckpt: &Path, suite: &str, out: Option<&Path>) -> Result<()> {
    let (params, config) = load_checkpoint(ckpt)?;
    let table = load_suite(&params, &config, suite)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    ensure_dir(&dir)?;
    let mut buf = Vec::new();
    table.to_csv(&mut buf)?;
    write_text(
        &dir.join("scores.csv"),
        std::str::from_utf8(&buf).expect("csv is utf-8"),
    )?;
    append_meta(&dir, &format!("eval suite={suite} ckpt={}", ckpt.display()))?;
    if let Some(avg) = table.avg() {
        println!("probe avg {avg:.4}");
    }
    if let (Some(t), Some(h)) = (table.target_accuracy(), table.hscore()) {
        println!("target {t:.4}  hscore {h:.4}");
    }
    println!("wrote {}", dir.join("scores.csv").display());
    Ok(())
}

fn ckpt_tag(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn diagnose(
    report: &str,
    ckpts: &[PathBuf],
    runs: &[PathBuf],
    which: &str,
    out: Option<&Path>,
) -> Result<()> {
    match report {
        "erank" => {
            if ckpts.is_empty() {
                return Err(Error::Config("erank report needs at least one --ckpt".into()));
            }
            let dir = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| ckpts[0].parent().unwrap_or(Path::new(".")).to_path_buf());
            ensure_dir(&dir)?;
            let mut reports = Vec::new();
            for ckpt in ckpts {
                let (params, config) = load_checkpoint(ckpt)?;
                let probe = probe_set(&config)?;
                reports.push(per_token_erank(&params, &probe, &ckpt_tag(ckpt))?);
            }
            let mut buf = Vec::new();
            erank_csv(&reports, &mut buf)?;
            write_text(&dir.join("erank.csv"), std::str::from_utf8(&buf).expect("utf-8"))?;
            append_meta(&dir, "diagnose erank")?;
            for r in &reports {
                println!("{}: dataset-level erank {:.4}", r.model_tag, r.dataset_level);
            }
            println!("wrote {}", dir.join("erank.csv").display());
            Ok(())
        }
        "dump" => {
            if ckpts.is_empty() {
                return Err(Error::Config("dump report needs at least one --ckpt".into()));
            }
            let kind: ReprKind = which.parse()?;
            let dir = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| ckpts[0].parent().unwrap_or(Path::new(".")).to_path_buf());
            ensure_dir(&dir)?;
            for ckpt in ckpts {
                let (params, config) = load_checkpoint(ckpt)?;
                let probe = probe_set(&config)?;
                let tag = ckpt_tag(ckpt);
                let mut buf = Vec::new();
                repr_dump(&params, &probe, kind, &tag, &mut buf)?;
                let name = format!("dump_{tag}_{which}.csv");
                write_text(&dir.join(&name), std::str::from_utf8(&buf).expect("utf-8"))?;
                println!("wrote {}", dir.join(&name).display());
            }
            append_meta(&dir, "diagnose dump")?;
            Ok(())
        }
        "compare" => {
            if runs.is_empty() {
                return Err(Error::Config("compare report needs at least one --run".into()));
            }
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| runs[0].clone());
            ensure_dir(&dir)?;
            let mut buf = Vec::new();
            compare_runs(runs, &mut buf)?;
            write_text(&dir.join("compare.csv"), std::str::from_utf8(&buf).expect("utf-8"))?;
            append_meta(&dir, "diagnose compare")?;
            println!("wrote {}", dir.join("compare.csv").display());
            Ok(())
        }
        other => Err(Error::Config(format!(
            "unknown report {other:?} (expected erank | dump | compare)"
        ))),
    }
}

fn probe_set(config: &RunConfig) -> Result<Dataset> {
    gen_probe(&config.data.scene, config.data.n_probe, config.data.data_seed)
}
