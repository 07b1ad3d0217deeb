use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::ExitCode;

use emoq_core::checkpoint::Checkpoint;
use emoq_core::compressor::ProjectorKind;
use emoq_core::config::RunConfig;
use emoq_core::eval::{evaluate, gate_report, EvalReport, SyntheticSample};
use emoq_core::fec::{run_fec, write_manifest, ScriptedScorer};
use emoq_core::gradcheck::block_suite;
use emoq_core::pipeline::model::ToyModel;
use emoq_core::pipeline::stage::StageId;
use emoq_core::pipeline::train::train_stage;
use emoq_core::{Error, ParamSet};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::frames::{encode_png, frame_entries, read_frames, MANIFEST};
use crate::manifest::Recorder;
use crate::{Cli, Command};

pub const CHECKPOINT: &str = "model.eqck";
pub const DATA: &str = "data.jsonl";

pub fn run(cli: &Cli) -> CliResult<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::Init => init(&cfg, out),
        Command::Train {
            stage,
            checkpoint,
            data,
        } => {
            let id = StageId::parse(&stage.to_string())?;
            let stage = cfg.stage(id).clone();
            train(&cfg, out, "train", stage, checkpoint.as_deref(), data.as_deref())
        }
        Command::Finetune {
            adapter,
            checkpoint,
            data,
        } => {
            let mut stage = cfg.stage(StageId::Finetune).clone();
            stage.adapter = Some(adapter.clone());
            train(&cfg, out, "finetune", stage, Some(checkpoint), data.as_deref())
        }
        Command::Eval { checkpoint, data, fec } => eval(&cfg, out, checkpoint, data.as_deref(), *fec, true),
        Command::GateReport { checkpoint, data, fec } => {
            eval(&cfg, out, checkpoint, data.as_deref(), *fec, false)
        }
        Command::GradCheck { seeds, eps, tol } => grad_check(&cfg, out, *seeds, *eps, *tol),
        Command::FecExtract {
            frames,
            observations,
            tau,
        } => fec_extract(&cfg, out, frames, observations, tau.unwrap_or(cfg.tau)),
        Command::Inspect { checkpoint } => inspect(checkpoint),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<ExitCode> {
    let mut rec = Recorder::start("gen-data");
    let mut text = String::new();
    for s in cfg.dataset()? {
        text.push_str(&serde_json::to_string(&s).expect("sample serializes"));
        text.push('\n');
    }
    rec.write(out, DATA, text.as_bytes())?;
    rec.finish(out, cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn init(cfg: &RunConfig, out: &Path) -> CliResult<ExitCode> {
    let mut rec = Recorder::start("init");
    let ckpt = Checkpoint::from_model(&cfg.build_model()?, &cfg.hash(), Vec::new());
    rec.write(out, CHECKPOINT, &ckpt.to_bytes()?)?;
    rec.finish(out, cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn read_data(path: &Path) -> CliResult<Vec<SyntheticSample>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Config {
            key: None,
            line: Some(n + 1),
            msg: format!("bad sample: {e}"),
        })?);
    }
    Ok(out)
}

fn load_data(cfg: &RunConfig, rec: &mut Recorder, path: Option<&Path>) -> CliResult<Vec<SyntheticSample>> {
    match path {
        Some(p) => {
            rec.input(p);
            read_data(p)
        }
        None => Ok(cfg.dataset()?),
    }
}

/// Loads a checkpoint written under the same configuration.
fn load_checkpoint(cfg: &RunConfig, rec: &mut Recorder, path: &Path) -> CliResult<(ToyModel, Vec<String>)> {
    rec.input(path);
    let ckpt = Checkpoint::load(path)?;
    if ckpt.manifest.config_hash != cfg.hash() {
        return Err(Error::Config {
            key: None,
            line: None,
            msg: format!(
                "checkpoint {} was written under config {}, current config is {}",
                path.display(),
                ckpt.manifest.config_hash,
                cfg.hash()
            ),
        }
        .into());
    }
    Ok((ckpt.to_model()?, ckpt.manifest.stages))
}

fn train(
    cfg: &RunConfig,
    out: &Path,
    command: &str,
    stage: emoq_core::pipeline::stage::StageConfig,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
) -> CliResult<ExitCode> {
    let mut rec = Recorder::start(command);
    let (mut model, mut stages) = match checkpoint {
        Some(p) => load_checkpoint(cfg, &mut rec, p)?,
        None => (cfg.build_model()?, Vec::new()),
    };
    let data = load_data(cfg, &mut rec, data)?;
    print!("{}", cfg.echo());
    let report = train_stage(&mut model, &stage, &cfg.train, &data, cfg.seed)?;
    stages.push(stage.id.name().to_string());
    let ckpt = Checkpoint::from_model(&model, &cfg.hash(), stages);
    rec.write(out, CHECKPOINT, &ckpt.to_bytes()?)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    rec.write(out, "report.json", (json + "\n").as_bytes())?;
    if let Some(loss) = report.epoch_losses.last() {
        println!("stage {}: {} steps, final epoch loss {loss}", stage.id, report.steps);
    }
    rec.finish(out, cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    data: Option<&Path>,
    fec: bool,
    metrics: bool,
) -> CliResult<ExitCode> {
    let (command, stem) = if metrics { ("eval", "eval") } else { ("gate-report", "gate") };
    let mut rec = Recorder::start(command);
    let (model, _) = load_checkpoint(cfg, &mut rec, checkpoint)?;
    let data = load_data(cfg, &mut rec, data)?;
    let hybrid = model.projector.kind() == ProjectorKind::HybridCompressor;
    let report = EvalReport {
        metrics: if metrics { Some(evaluate(&model, &data, fec)?) } else { None },
        gate: if hybrid || !metrics { Some(gate_report(&model, &data, fec)?) } else { None },
    };
    rec.write(out, &format!("{stem}.json"), (report.to_json()? + "\n").as_bytes())?;
    rec.write(out, &format!("{stem}.csv"), report.to_csv().as_bytes())?;
    print!("{}", report.to_csv());
    rec.finish(out, cfg)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradCheckSummary {
    eps: f64,
    tolerance: f64,
    seeds: u64,
    max_error: f64,
    passed: bool,
    checks: Vec<emoq_core::gradcheck::BlockCheck>,
}

fn grad_check(cfg: &RunConfig, out: &Path, seeds: u64, eps: f64, tol: f64) -> CliResult<ExitCode> {
    let mut rec = Recorder::start("grad-check");
    let mut checks = Vec::new();
    for seed in 0..seeds {
        checks.extend(block_suite(seed, eps)?);
    }
    let worst = checks.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error));
    let max_error = worst.map_or(0.0, |c| c.max_error);
    if let Some(w) = worst {
        println!("worst: {} seed {} `{}`", w.block, w.seed, w.worst);
    }
    println!("max relative error {max_error:e}");
    let passed = max_error <= tol;
    let summary = GradCheckSummary {
        eps,
        tolerance: tol,
        seeds,
        max_error,
        passed,
        checks,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    rec.write(out, "grad-check.json", (json + "\n").as_bytes())?;
    rec.finish(out, cfg)?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[derive(Serialize)]
struct SelectedFace {
    frame: usize,
    emotion: String,
    confidence: f64,
    bbox: [usize; 4],
}

#[derive(Serialize)]
struct SelectionReport {
    tau: f64,
    criterion: &'static str,
    original_frames: usize,
    composed_frames: usize,
    key_frames: Vec<usize>,
    selected: Vec<SelectedFace>,
}

fn fec_extract(cfg: &RunConfig, out: &Path, frames_dir: &Path, observations: &Path, tau: f64) -> CliResult<ExitCode> {
    let mut rec = Recorder::start("fec-extract");
    rec.input(&frames_dir.join(MANIFEST));
    rec.input(observations);
    let frames = read_frames(frames_dir)?;
    let file = File::open(observations).map_err(|e| CliError::io(observations, e))?;
    let scorer = ScriptedScorer::from_reader(BufReader::new(file))?;
    let result = run_fec(&frames, &scorer, tau)?;

    let seq = &result.sequence.frames;
    let entries = frame_entries(seq, "frames/");
    for (frame, entry) in seq.iter().zip(&entries) {
        rec.write(out, &entry.file, &encode_png(frame)?)?;
    }
    rec.write(out, MANIFEST, write_manifest(&entries).as_bytes())?;
    let report = SelectionReport {
        tau,
        criterion: "max-probability",
        original_frames: result.sequence.original_len,
        composed_frames: seq.len(),
        key_frames: result.key_frame_indices(),
        selected: result
            .selected
            .iter()
            .map(|k| {
                let (emotion, confidence) = k.face.top();
                SelectedFace {
                    frame: k.frame_index,
                    emotion: emotion.name().to_string(),
                    confidence,
                    bbox: k.face.bbox.into(),
                }
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    rec.write(out, "selection.json", (json + "\n").as_bytes())?;
    println!("key frames {:?} at tau {tau}", report.key_frames);
    let mut cfg = cfg.clone();
    cfg.tau = tau;
    rec.finish(out, &cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn inspect(path: &Path) -> CliResult<ExitCode> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let model = ckpt.to_model()?;
    let m = &ckpt.manifest;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint {} ({} bytes)", path.display(), bytes.len());
    let _ = writeln!(s, "config_hash {}", m.config_hash);
    let _ = writeln!(s, "stages {}", if m.stages.is_empty() { "-".into() } else { m.stages.join(",") });
    let _ = writeln!(s, "projector {}", model.projector.kind().name());
    let _ = writeln!(s, "active_adapter {}", m.active_adapter.as_deref().unwrap_or("-"));
    for a in &m.adapters {
        let _ = writeln!(
            s,
            "adapter {} {} rank {} alpha {} dropout {}",
            a.set, a.target, a.rank, a.alpha, a.dropout
        );
    }
    let _ = writeln!(s, "name\tshape\tnumel\tchecksum");
    let sums = model.checksums();
    for (name, t) in &ckpt.tensors {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "{name}\t[{}]\t{}\t{:016x}", dims.join(","), t.len(), sums[name]);
    }
    print!("{s}");
    Ok(ExitCode::SUCCESS)
}
