use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use trajfm::derive_seed;
use trajfm::eval::{evaluate, EvalTask};
use trajfm::gpx::parse_gpx;
use trajfm::jsonl::{read_jsonl, write_jsonl, JsonlError};
use trajfm::metrics::{density_jsd, BBox};
use trajfm::model::checkpoint::Checkpoint;
use trajfm::model::train::{train_with, write_loss_csv};
use trajfm::model::ModelError;
use trajfm::preprocess::{run_pipeline, FilterReport};
use trajfm::stm::{apply_strategy, MaskStrategy, StrategySampler};
use trajfm::synth::{generate, SynthError};
use trajfm::trajectory::TrajectoryDataset;

use crate::config::RunConfig;
use crate::failure::Failure;
use crate::{StrategyArg, TaskArg};

const PREVIEW_STREAM: u64 = 0x9e;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("creating {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(format!("creating {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Failure::io(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn jsonl_failure(path: &Path, e: JsonlError) -> Failure {
    match e {
        JsonlError::Io(e) => Failure::io(format!("{}: {e}", path.display())),
        e @ JsonlError::SchemaViolation { .. } => Failure::contract(format!("{}: {e}", path.display())),
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::InvalidConfig(_) => Failure::config(e.to_string()),
        _ => Failure::contract(e.to_string()),
    }
}

fn read_dataset(path: &Path) -> Result<TrajectoryDataset, Failure> {
    let file = File::open(path).map_err(|e| Failure::io(format!("opening {}: {e}", path.display())))?;
    read_jsonl(BufReader::new(file), &path.display().to_string()).map_err(|e| jsonl_failure(path, e))
}

/// Writes the dataset and a `<path>.config.json` sidecar with the resolved config.
fn write_dataset(path: &Path, ds: &TrajectoryDataset, cfg: &RunConfig) -> Result<(), Failure> {
    let mut out = create(path)?;
    write_jsonl(ds, &mut out)?;
    out.flush()?;
    write_json(&with_suffix(path, ".config.json"), &cfg.to_json())
}

fn sidecar_meta(gpx: &Path) -> Result<BTreeMap<String, String>, String> {
    let side = gpx.with_extension("json");
    if !side.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(&side).map_err(|e| e.to_string())?;
    let value: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(value
        .into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => (k, s),
            other => (k, other.to_string()),
        })
        .collect())
}

pub fn ingest(cfg: &RunConfig) -> Result<(), Failure> {
    let dir = cfg.require_input()?;
    let out_path = cfg.require_output()?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::io(format!("reading directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("gpx")))
        .collect();
    files.sort();

    let (mut trajectories, mut dropped, mut failed) = (Vec::new(), 0usize, 0usize);
    for path in &files {
        let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let parsed = fs::read(path).map_err(|e| e.to_string()).and_then(|bytes| {
            let meta = sidecar_meta(path)?;
            parse_gpx(&bytes, &source).map(|p| (p, meta)).map_err(|e| e.to_string())
        });
        match parsed {
            Ok((p, meta)) => {
                dropped += p.dropped_points;
                for mut t in p.trajectories {
                    t.meta.extend(meta.clone());
                    trajectories.push(t);
                }
            }
            Err(e) => {
                failed += 1;
                log::warn!("skipping {}: {e}", path.display());
            }
        }
    }
    let n = trajectories.len();
    let ds = TrajectoryDataset::new(trajectories, dir.display().to_string())
        .map_err(|e| Failure::contract(e.to_string()))?;
    write_dataset(out_path, &ds, cfg)?;
    println!(
        "{}",
        serde_json::json!({ "files": files.len(), "failed_files": failed, "trajectories": n, "dropped_points": dropped })
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportArtifact<'a> {
    #[serde(flatten)]
    report: &'a FilterReport,
    run_config: serde_json::Value,
}

pub fn preprocess(cfg: &RunConfig, report_path: Option<&Path>) -> Result<(), Failure> {
    let input = cfg.require_input()?;
    let out_path = cfg.require_output()?;
    let ds = read_dataset(input)?;
    let (kept, report) = run_pipeline(&ds, &cfg.filter);
    write_dataset(out_path, &kept, cfg)?;
    let report_path = report_path.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out_path, ".report.json"));
    write_json(&report_path, &ReportArtifact { report: &report, run_config: cfg.to_json() })?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let out_path = cfg.require_output()?;
    let ds = generate(&cfg.synth).map_err(|e| match e {
        SynthError::InvalidSpec(_) => Failure::config(e.to_string()),
        SynthError::Exhausted(..) => Failure::contract(e.to_string()),
    })?;
    write_dataset(out_path, &ds, cfg)?;
    println!("{}", serde_json::json!({ "trajectories": ds.len(), "points": ds.point_count() }));
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, loss_csv: Option<&Path>) -> Result<(), Failure> {
    let input = cfg.require_input()?;
    let ck_path = cfg.require_checkpoint()?;
    let ds = read_dataset(input)?;
    let outcome = train_with(&ds, &cfg.model, &cfg.resample, &cfg.mask, &mut |row| {
        log::info!("epoch {} train_loss {:.6e} val_loss {:.6e}", row.epoch, row.train_loss, row.val_loss);
    })
    .map_err(model_failure)?;

    let mut ck = Checkpoint::from_state(&outcome.state);
    ck.run_config = Some(cfg.to_json());
    let mut out = create(ck_path)?;
    ck.write(&mut out).map_err(model_failure)?;
    out.flush()?;

    let csv_path = loss_csv.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(ck_path, ".loss.csv"));
    let mut csv = create(&csv_path)?;
    write_loss_csv(&outcome.history, &mut csv)?;
    csv.flush()?;
    println!(
        "{}",
        serde_json::json!({
            "epochs_run": outcome.history.len() - 1,
            "best_epoch": outcome.best_epoch,
            "initial_val_loss": outcome.initial_val_loss(),
            "best_val_loss": outcome.best_val_loss(),
            "stopped_early": outcome.stopped_early,
            "parameters": outcome.state.parameter_count(),
        })
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, task: TaskArg, reference: Option<&Path>) -> Result<(), Failure> {
    let input = cfg.require_input()?;
    let ck_path = cfg.require_checkpoint()?;
    let out_path = cfg.require_output()?;
    let file = File::open(ck_path).map_err(|e| Failure::io(format!("opening {}: {e}", ck_path.display())))?;
    let state = Checkpoint::read(BufReader::new(file)).and_then(|c| c.to_state()).map_err(model_failure)?;
    let ds = read_dataset(input)?;
    let task = match task {
        TaskArg::Recovery => EvalTask::Recovery,
        TaskArg::Prediction => EvalTask::Prediction,
    };
    let mut report =
        evaluate(&state, &ds, task, &cfg.resample, cfg.seed).map_err(|e| Failure::contract(e.to_string()))?;
    if let Some(ref_path) = reference {
        let reference = read_dataset(ref_path)?;
        let bbox = BBox::covering(&ds, &reference).ok_or_else(|| Failure::contract("datasets have no points"))?;
        report.density_jsd = Some(density_jsd(&ds, &reference, &bbox).map_err(|e| Failure::contract(e.to_string()))?);
    }
    report.run_config = Some(cfg.to_json());
    write_json(out_path, &report)?;
    println!("{report}");
    Ok(())
}

pub fn mask_preview(cfg: &RunConfig, strategy: StrategyArg, limit: usize) -> Result<(), Failure> {
    let input = cfg.require_input()?;
    let ds = read_dataset(input)?;
    let mut sampler =
        StrategySampler::new(&cfg.mask, derive_seed(cfg.seed, PREVIEW_STREAM, 0)).map_err(|e| Failure::config(e.to_string()))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (k, traj) in ds.iter().take(limit).enumerate() {
        let s = match strategy {
            StrategyArg::Random => MaskStrategy::Random,
            StrategyArg::Block => MaskStrategy::Block,
            StrategyArg::KeyPoints => MaskStrategy::KeyPoints,
            StrategyArg::LastN => MaskStrategy::LastN,
            StrategyArg::Mixture => sampler.next().expect("sampler is endless"),
        };
        let m = apply_strategy(s, traj, &cfg.mask, derive_seed(cfg.seed, PREVIEW_STREAM, k as u64 + 1))
            .map_err(|e| Failure::contract(format!("{}: {e}", traj.id)))?;
        let line = serde_json::json!({ "id": traj.id, "n": traj.len(), "strategy": s, "masked": m.masked });
        writeln!(out, "{line}")?;
    }
    Ok(())
}
