//! Command-line front end. Every command writes JSON that embeds the
//! resolved configuration; failures print a JSON error object on stderr
//! and exit with [`Error::exit_code`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{
    cross_modal_independence, evidence_matrix, intra_modal_independence, invariant_overlap, label_correlation,
    recovery_score, LabelEncoding, DEFAULT_LEVEL,
};
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::keyframe::decisions_csv;
use crate::mask::Modality;
use crate::model::{Ablation, ForwardOptions, Model, Predictor};
use crate::synth::{generate_dataset, GroundTruth};
use crate::train::{evaluate, train, DomainRoles, TrainReport};

#[derive(Parser, Debug)]
#[command(
    name = "seqmask",
    version,
    about = "Sequential sparse-mask multimodal training toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set model.alpha=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self, out: Option<&PathBuf>) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(o) = out {
            cfg.output = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum AblationArg {
    None,
    AddNoise,
    UsingRemoved,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::AddNoise => Ablation::AddNoise,
            AblationArg::UsingRemoved => Ablation::UsingRemoved,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and its ground-truth sidecar.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output`).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train one model per replica seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file; generated from the config when omitted.
        #[arg(long, short)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Comma-separated replica seeds (overrides `seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Per-domain accuracy of a checkpoint, split into source and target.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        /// Source domains (default: the config's source roles).
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<String>>,
        #[arg(long, value_enum, default_value = "none")]
        ablation: AblationArg,
        /// Output file (stdout when omitted).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Independence, label-correlation, overlap, evidence and recovery reports.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One or more checkpoints; overlap is computed across them.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, short)]
        data: PathBuf,
        /// Ground-truth sidecar for recovery scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LEVEL)]
        level: f64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table as JSON here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            report_error("usage", 2, &e.to_string());
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            report_error(e.kind(), code, &e.to_string());
            code
        }
    }
}

fn report_error(kind: &str, code: i32, message: &str) {
    let body = json!({ "error": { "kind": kind, "code": code, "message": message.trim() } });
    eprintln!("{body}");
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { cfg, out } => cmd_generate(&cfg.resolve(out.as_ref())?),
        Command::Train { cfg, data, out, seeds } => {
            let mut rc = cfg.resolve(out.as_ref())?;
            if let Some(s) = seeds {
                rc.seeds = s;
            }
            cmd_train(&rc, data.as_deref()).map(|_| ())
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            data,
            sources,
            ablation,
            out,
        } => {
            let rc = cfg.resolve(None)?;
            let v = cmd_evaluate(&rc, &checkpoint, &data, sources, ablation.into())?;
            emit(&v, out.as_deref())
        }
        Command::Analyze {
            cfg,
            checkpoint,
            data,
            truth,
            level,
            out,
        } => {
            let rc = cfg.resolve(out.as_ref())?;
            cmd_analyze(&rc, &checkpoint, &data, truth.as_deref(), level)
        }
        Command::Gradcheck { trials, seed, out } => cmd_gradcheck(trials, seed, out.as_deref()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => to_stdout(&(serde_json::to_string_pretty(value)? + "\n")),
    }
}

/// Writes to stdout; a reader that hung up early (`| head`) is not an error.
fn to_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// Writes `dataset.jsonl`, `ground_truth.json` and `config.txt`.
pub fn cmd_generate(rc: &RunConfig) -> Result<()> {
    let causal = rc.causal_spec()?;
    let domains = rc.domain_specs();
    let ds = generate_dataset(&causal, &domains)?;
    create_dir(&rc.output)?;
    ds.save(&rc.output.join("dataset.jsonl"))?;
    let truth = GroundTruth::new(&causal, &domains);
    write_json(
        &rc.output.join("ground_truth.json"),
        &json!({ "config": rc.to_text(), "seed": rc.model.seed, "ground_truth": truth }),
    )?;
    std::fs::write(rc.output.join("config.txt"), rc.to_text())?;
    Ok(())
}

fn load_or_generate(rc: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(p) => Dataset::load(p),
        None => generate_dataset(&rc.causal_spec()?, &rc.domain_specs()),
    }
}

/// Everything one training replica writes, minus the checkpoint.
#[derive(Serialize)]
pub struct RunRecord<'a> {
    pub config: String,
    pub seed: u64,
    pub report: &'a TrainReport,
}

/// Trains every replica seed. With one seed the outputs land in the
/// output directory itself; with several, in `seed-<s>/` subdirectories
/// plus a `summary.json`.
pub fn cmd_train(rc: &RunConfig, data: Option<&Path>) -> Result<Vec<TrainReport>> {
    let ds = load_or_generate(rc, data)?;
    let roles = DomainRoles::from_sources(&ds, &rc.sources())?;
    let seeds = rc.replica_seeds();
    create_dir(&rc.output)?;
    let run_one = |seed: u64| -> Result<TrainReport> {
        let mut replica = rc.clone();
        replica.model.seed = seed;
        replica.seeds.clear();
        let dir = if seeds.len() == 1 {
            rc.output.clone()
        } else {
            rc.output.join(format!("seed-{seed}"))
        };
        replica.output = dir.clone();
        create_dir(&dir)?;
        let (model, report) = train(&ds, &replica.model, &roles)?;
        write_run(&dir, &replica, &model, &report, &ds)?;
        Ok(report)
    };
    let reports: Vec<TrainReport> = if seeds.len() == 1 {
        vec![run_one(seeds[0])?]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || run_one(seed))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::State("replica thread panicked".into())))
                })
                .collect::<Result<Vec<_>>>()
        })?
    };
    if seeds.len() > 1 {
        write_json(&rc.output.join("summary.json"), &summary(rc, &seeds, &reports))?;
    }
    Ok(reports)
}

fn write_run(dir: &Path, rc: &RunConfig, model: &Model, report: &TrainReport, ds: &Dataset) -> Result<()> {
    Checkpoint::capture(model, Some(report.rng)).save(&dir.join("checkpoint.json"))?;
    write_json(
        &dir.join("report.json"),
        &RunRecord {
            config: rc.to_text(),
            seed: rc.model.seed,
            report,
        },
    )?;
    std::fs::write(dir.join("config.txt"), rc.to_text())?;
    std::fs::write(dir.join("text_mask.csv"), model.mask_state(Modality::Text).to_csv())?;
    std::fs::write(dir.join("video_mask.csv"), model.mask_state(Modality::Video).to_csv())?;
    if model.config.keyframe {
        std::fs::write(dir.join("keyframe_decisions.csv"), keyframe_decisions(model, ds)?)?;
    }
    Ok(())
}

/// Evaluation-mode frame decisions for every sample.
pub fn keyframe_decisions(model: &Model, ds: &Dataset) -> Result<String> {
    let mut ids = Vec::with_capacity(ds.len());
    let mut rows: Vec<f64> = Vec::new();
    let mut frames = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(256) {
        let batch = ds.batch(chunk)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, &ForwardOptions::eval(Predictor::Video), &mut rng)?;
        if let Some(kf) = fwd.keyframe {
            frames = kf.decisions.last_dim();
            rows.extend_from_slice(kf.decisions.data());
        }
        ids.extend(batch.ids.iter().cloned());
    }
    Ok(decisions_csv(
        &ids,
        &crate::tensor::Tensor::new(vec![ids.len(), frames], rows)?,
    ))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn summary(rc: &RunConfig, seeds: &[u64], reports: &[TrainReport]) -> Value {
    let val: Vec<f64> = reports.iter().map(|r| r.final_val.overall).collect();
    let tgt: Vec<f64> = reports.iter().map(|r| r.final_target.overall).collect();
    let rt: Vec<f64> = reports
        .iter()
        .map(|r| r.stages.last().map_or(1.0, |s| s.retained_text))
        .collect();
    let rv: Vec<f64> = reports
        .iter()
        .map(|r| r.stages.last().map_or(1.0, |s| s.retained_video))
        .collect();
    let stat = |xs: &[f64]| {
        let (m, s) = mean_std(xs);
        json!({ "mean": m, "std": s, "per_seed": xs })
    };
    json!({
        "config": rc.to_text(),
        "seeds": seeds,
        "val_accuracy": stat(&val),
        "target_accuracy": stat(&tgt),
        "retained_text": stat(&rt),
        "retained_video": stat(&rv),
    })
}

pub fn cmd_evaluate(
    rc: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    sources: Option<Vec<String>>,
    ablation: Ablation,
) -> Result<Value> {
    let model = Checkpoint::load(checkpoint)?.restore()?;
    let ds = Dataset::load(data)?;
    let dims = ds.validate(model.config.num_classes)?;
    model.config.check_dims(&dims)?;
    let sources = sources.unwrap_or_else(|| rc.sources());
    let roles = DomainRoles::from_sources(&ds, &sources)?;
    let ev = evaluate(&model, &ds, ablation)?;
    let pick = |ids: &[String]| -> BTreeMap<String, f64> {
        ids.iter()
            .filter_map(|d| ev.domains.get(d).map(|a| (d.clone(), a.accuracy)))
            .collect()
    };
    Ok(json!({
        "config": rc.to_text(),
        "seed": model.config.seed,
        "model_config": model.config,
        "checkpoint": checkpoint.display().to_string(),
        "ablation": ablation,
        "predictor": ev.predictor,
        "source": pick(&roles.sources),
        "target": pick(&roles.targets),
        "source_mean": ev.mean_over(&roles.sources),
        "target_mean": ev.mean_over(&roles.targets),
        "overall": ev.overall,
        "counts": ev.domains,
    }))
}

/// Writes the analysis reports for each checkpoint into `output/<name>/`,
/// plus cross-checkpoint overlap tables.
pub fn cmd_analyze(
    rc: &RunConfig,
    checkpoints: &[PathBuf],
    data: &Path,
    truth: Option<&Path>,
    level: f64,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let truth: Option<GroundTruth> = match truth {
        Some(p) => {
            let v: Value = serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::Data(format!("bad ground-truth file: {e}")))?;
            let gt = v.get("ground_truth").cloned().unwrap_or(v);
            Some(serde_json::from_value(gt).map_err(|e| Error::Data(format!("bad ground-truth file: {e}")))?)
        }
        None => None,
    };
    create_dir(&rc.output)?;
    let mut text_supports = Vec::new();
    let mut video_supports = Vec::new();
    let mut index = Vec::new();
    for (i, path) in checkpoints.iter().enumerate() {
        let model = Checkpoint::load(path)?.restore()?;
        let dims = ds.validate(model.config.num_classes)?;
        model.config.check_dims(&dims)?;
        let name = if checkpoints.len() == 1 {
            String::from("model")
        } else {
            format!("model-{i}")
        };
        let dir = rc.output.join(&name);
        create_dir(&dir)?;
        let summary = analyze_one(rc, &model, &ds, truth.as_ref(), level, &dir)?;
        text_supports.push((name.clone(), model.mask_state(Modality::Text).support()));
        video_supports.push((name.clone(), model.mask_state(Modality::Video).support()));
        index.push(json!({ "name": name, "checkpoint": path.display().to_string(), "summary": summary }));
    }
    let text_overlap = invariant_overlap(&text_supports);
    let video_overlap = invariant_overlap(&video_supports);
    std::fs::write(rc.output.join("overlap_text.csv"), text_overlap.to_csv())?;
    std::fs::write(rc.output.join("overlap_video.csv"), video_overlap.to_csv())?;
    write_json(
        &rc.output.join("analysis.json"),
        &json!({
            "config": rc.to_text(),
            "seed": rc.model.seed,
            "level": level,
            "models": index,
            "overlap": { "text": text_overlap, "video": video_overlap },
        }),
    )
}

fn analyze_one(
    rc: &RunConfig,
    model: &Model,
    ds: &Dataset,
    truth: Option<&GroundTruth>,
    level: f64,
    dir: &Path,
) -> Result<Value> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let batch = ds.batch(&all)?;
    let ts = model.mask_state(Modality::Text).support();
    let vs = model.mask_state(Modality::Video).support();
    let tx = model.token_mean_features(&batch, Modality::Text, false)?;
    let vx = model.token_mean_features(&batch, Modality::Video, false)?;
    let cross = cross_modal_independence(&tx, &vx, &ts, &vs, level)?;
    let intra_t = intra_modal_independence(&tx, &ts, level)?;
    let intra_v = intra_modal_independence(&vx, &vs, level)?;
    let k = model.config.num_classes;
    let raw_t = model.token_mean_features(&batch, Modality::Text, true)?;
    let raw_v = model.token_mean_features(&batch, Modality::Video, true)?;
    let label_t = label_correlation(&raw_t, &batch.labels, k, &ts, LabelEncoding::Ordinal, level)?;
    let label_v = label_correlation(&raw_v, &batch.labels, k, &vs, LabelEncoding::Ordinal, level)?;
    std::fs::write(dir.join("cross_modal.csv"), cross.to_csv())?;
    std::fs::write(dir.join("intra_text.csv"), intra_t.to_csv())?;
    std::fs::write(dir.join("intra_video.csv"), intra_v.to_csv())?;

    // Evidence of the fusion head on the first sample.
    let first = ds.batch(&[0])?;
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let fwd = model.forward(&mut tape, &first, &ForwardOptions::eval(Predictor::Fusion), &mut rng)?;
    let (a, b) = match model.config.order.conditioning() {
        Modality::Text => (fwd.text_fused, fwd.video_fused),
        Modality::Video => (fwd.video_fused, fwd.text_fused),
    };
    let mut x = Vec::new();
    for v in [a, b].into_iter().flatten() {
        x.extend_from_slice(tape.value(v).data());
    }
    let evidence = evidence_matrix(model.store.get(model.parts.fusion_head.weight), &x, None)?;

    let recovery = truth.map(|gt| {
        json!({
            "text": recovery_score(&ts, &gt.text.invariant, &gt.text.spurious),
            "video": recovery_score(&vs, &gt.video.invariant, &gt.video.spurious),
        })
    });
    let report = json!({
        "config": rc.to_text(),
        "seed": model.config.seed,
        "supports": { "text": ts, "video": vs },
        "cross_modal": cross,
        "intra_modal": { "text": intra_t, "video": intra_v },
        "label_correlation": { "text": label_t, "video": label_v },
        "evidence": { "sample": first.ids[0], "matrix": evidence },
        "recovery": recovery,
    });
    write_json(&dir.join("analysis.json"), &report)?;
    Ok(json!({
        "cross_modal_independent": cross.mean_independent_ratio(),
        "cross_modal_dependent": cross.mean_dependent_ratio(),
        "intra_text_independent": intra_t.mean_independent_ratio(),
        "intra_video_independent": intra_v.mean_independent_ratio(),
        "recovery": recovery,
    }))
}

pub fn cmd_gradcheck(trials: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let results = gradcheck::run_all(trials, seed)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(4);
    let mut table = format!("{:<width$}  trials  max_rel_err  result\n", "op");
    for r in &results {
        table += &format!(
            "{:<width$}  {:>6}  {:>11.3e}  {}\n",
            r.name,
            r.trials,
            r.max_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    to_stdout(&table)?;
    if let Some(p) = out {
        write_json(p, &json!({ "trials": trials, "seed": seed, "results": results }))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical {
            epoch: 0,
            batch: 0,
            lr: 0.0,
            what: format!("gradient check failed for {}", failed.join(", ")),
        })
    }
}
