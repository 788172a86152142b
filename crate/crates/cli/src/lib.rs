//! Command implementations behind the `motioncast` binary: synthetic data
//! generation, training, prediction, evaluation, and the parameter sweep.
//!
//! Every command is driven by one JSON [`RunConfig`] document (all sections
//! optional, defaults fill the rest), overridable from the command line with
//! dotted `--set` keys. Each command records the resolved config, seed, and
//! file-format versions next to its outputs, and is deterministic under a
//! fixed seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use motioncast::error::Error;
use motioncast::gcnet::GcnConfig;
use motioncast::io;
use motioncast::metrics::{self, MetricConfig, MetricReport};
use motioncast::predict::{self, Checkpoint, FusionConfig};
use motioncast::preprocess::{PreprocessConfig, Sampling, WindowSpec};
use motioncast::synth::{self, SynthSpec};
use motioncast::train::{
    self, CurriculumConfig, LossConfig, OptimizerConfig, TrainConfig, TrainOptions,
};

/// Process exit codes: 0 success, 1 validation error, 2 runtime/divergence.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) | Some(Error::Diverged(_)) => 2,
        // Everything else (bad files, bad config, bad shapes) is validation.
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub scales: Vec<f64>,
    pub num_blocks: Vec<usize>,
    pub hidden_channels: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            scales: vec![100.0],
            num_blocks: vec![12],
            hidden_channels: vec![256],
        }
    }
}

/// The single configuration document. Defaults target the 3D task; 2D runs
/// override the relevant sections (`preprocess.scale`, `metric`, `loss`,
/// `training.input_repr`, `synth`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub gcn: GcnConfig,
    pub preprocess: PreprocessConfig,
    pub window: WindowSpec,
    pub loss: LossConfig,
    pub curriculum: CurriculumConfig,
    pub optimizer: OptimizerConfig,
    pub metric: MetricConfig,
    pub fusion: FusionConfig,
    pub training: TrainOptions,
    pub synth: SynthSpec,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataPaths::default(),
            gcn: GcnConfig::default(),
            preprocess: PreprocessConfig::default(),
            window: WindowSpec::default(),
            loss: LossConfig::default(),
            curriculum: CurriculumConfig::default(),
            optimizer: OptimizerConfig::default(),
            metric: MetricConfig::default(),
            fusion: FusionConfig::default(),
            training: TrainOptions::default(),
            synth: SynthSpec::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl RunConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            gcn: self.gcn.clone(),
            preprocess: self.preprocess.clone(),
            window: self.window.clone(),
            loss: self.loss.clone(),
            curriculum: self.curriculum.clone(),
            optimizer: self.optimizer.clone(),
            metric: self.metric.clone(),
            options: self.training.clone(),
        }
    }
}

/// Set a dotted path inside a JSON document, creating objects along the way.
/// The value is parsed as JSON when possible, otherwise taken as a string.
fn apply_set(root: &mut serde_json::Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw_value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow::anyhow!("--set expects key=value, got '{assignment}'"))?;
    let value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            anyhow::bail!("--set {key}: '{}' is not an object", parts[..i].join("."));
        }
        let map = node.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Build the effective config: file (or defaults), then `--set` overrides,
/// then the `--seed` flag. Unknown keys are rejected by name.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> anyhow::Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| anyhow::anyhow!("config {} is not valid JSON: {e}", p.display()))?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    for assignment in sets {
        apply_set(&mut value, assignment)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    format_versions: FormatVersions,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct FormatVersions {
    dataset: u32,
    model: u32,
    checkpoint: u32,
}

fn write_run_record(path: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let record = RunRecord {
        seed: cfg.seed,
        format_versions: FormatVersions {
            dataset: io::DATASET_FORMAT_VERSION,
            model: motioncast::gcnet::MODEL_FORMAT_VERSION,
            checkpoint: predict::CHECKPOINT_FORMAT_VERSION,
        },
        config: cfg,
    };
    std::fs::write(path, serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn sibling_record_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

/// Generate a synthetic dataset file. The `synth` config section controls
/// the motion model; `seed` comes from the top-level config seed unless the
/// section pins its own.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let spec = SynthSpec {
        seed: cfg.synth.seed ^ cfg.seed,
        ..cfg.synth.clone()
    };
    let dataset = synth::generate(&spec)?;
    io::save_dataset(&dataset, out)?;
    write_run_record(&sibling_record_path(out), cfg)?;
    log::info!(
        "wrote {} sequences ({} joints, {}D) to {}",
        dataset.sequences.len(),
        dataset.skeleton.joints(),
        dataset.dims().unwrap_or(0),
        out.display()
    );
    Ok(())
}

pub struct TrainSummary {
    pub checkpoint_path: PathBuf,
    pub best_val: Option<f64>,
    pub diverged: bool,
}

/// Train a model from `data.train` (validating on `data.val` when present)
/// and write `checkpoint.json`, `report.csv`, `report.json`, and `run.json`
/// into `out_dir`. `--short-term` restricts the forecast loss to the first
/// `fusion.short_frames` frames.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, short_term: bool) -> anyhow::Result<TrainSummary> {
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Invalid("config data.train is required for training".into()))?;
    let dataset = io::load_dataset(train_path)?;
    let val = cfg.data.val.as_ref().map(io::load_dataset).transpose()?;

    let tc = cfg.train_config();
    let outcome = if short_term {
        train::train_short_term(&dataset, val.as_ref(), &tc, cfg.fusion.short_frames, cfg.seed)?
    } else {
        train::train(&dataset, val.as_ref(), &tc, cfg.seed)?
    };

    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    outcome.checkpoint.save(&checkpoint_path)?;
    std::fs::write(out_dir.join("report.csv"), outcome.report.to_csv())?;
    std::fs::write(out_dir.join("report.json"), outcome.report.to_json())?;
    write_run_record(&out_dir.join("run.json"), cfg)?;
    if outcome.report.diverged {
        log::error!("training diverged; checkpoint holds the last good model");
    }
    Ok(TrainSummary {
        checkpoint_path,
        best_val: outcome.report.best_val,
        diverged: outcome.report.diverged,
    })
}

#[derive(Serialize)]
struct FusionSidecar {
    mode: &'static str,
    models: Vec<PathBuf>,
    short_frames: Option<usize>,
}

fn eval_window(cfg: &RunConfig) -> WindowSpec {
    // Prediction and evaluation always enumerate windows deterministically.
    let sampling = match cfg.window.sampling {
        Sampling::Stride(s) => Sampling::Stride(s),
        Sampling::Random { .. } => Sampling::Stride(1),
    };
    WindowSpec {
        sampling,
        ..cfg.window.clone()
    }
}

/// Forecast every window of a dataset. One `--model` runs it directly;
/// `--fuse short long` stitches the first `fusion.short_frames` frames from
/// the short-term model; additional models are averaged in coordinate-wise.
/// Fusion provenance lands in a `.fusion.json` sidecar.
pub fn cmd_predict(
    cfg: &RunConfig,
    models: &[PathBuf],
    fuse_pair: Option<(&Path, &Path)>,
    data: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let dataset = io::load_dataset(data)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let window = eval_window(cfg);

    enum Plan {
        Single(Checkpoint),
        ShortLong(Checkpoint, Checkpoint),
    }
    let (plan, extra, sidecar) = match fuse_pair {
        Some((short, long)) => {
            let s = Checkpoint::load(short)?;
            let l = Checkpoint::load(long)?;
            if s.window != l.window {
                return Err(Error::Invalid(
                    "fused checkpoints disagree on window sizes".into(),
                )
                .into());
            }
            let extras: Vec<Checkpoint> =
                models.iter().map(Checkpoint::load).collect::<Result<_, _>>()?;
            let sidecar = FusionSidecar {
                mode: "short_long",
                models: [short.to_path_buf(), long.to_path_buf()]
                    .into_iter()
                    .chain(models.iter().cloned())
                    .collect(),
                short_frames: Some(cfg.fusion.short_frames),
            };
            (Plan::ShortLong(s, l), extras, sidecar)
        }
        None => {
            let first = models
                .first()
                .ok_or_else(|| Error::Invalid("predict needs at least one --model".into()))?;
            let primary = Checkpoint::load(first)?;
            let extras: Vec<Checkpoint> = models[1..]
                .iter()
                .map(Checkpoint::load)
                .collect::<Result<_, _>>()?;
            let sidecar = FusionSidecar {
                mode: if extras.is_empty() { "single" } else { "average" },
                models: models.to_vec(),
                short_frames: None,
            };
            (Plan::Single(primary), extras, sidecar)
        }
    };

    let window = {
        let base = match &plan {
            Plan::Single(c) => &c.window,
            Plan::ShortLong(_, l) => &l.window,
        };
        WindowSpec {
            input_frames: base.input_frames,
            output_frames: base.output_frames,
            sampling: window.sampling,
        }
    };
    let samples = motioncast::preprocess::extend_and_window(&dataset, &window, &mut rng)?;

    let mut predictions = Vec::with_capacity(samples.len());
    for sample in &samples {
        let base = match &plan {
            Plan::Single(ckpt) => predict::run_inference(ckpt, &sample.input, &dataset.skeleton)?,
            Plan::ShortLong(short, long) => {
                let s = predict::run_inference(short, &sample.input, &dataset.skeleton)?;
                let l = predict::run_inference(long, &sample.input, &dataset.skeleton)?;
                predict::fuse(&s, &l, &cfg.fusion)?
            }
        };
        let seq = if extra.is_empty() {
            base
        } else {
            let mut all = vec![base];
            for ckpt in &extra {
                all.push(predict::run_inference(ckpt, &sample.input, &dataset.skeleton)?);
            }
            predict::average_predictions(&all)?
        };
        predictions.push(io::Prediction {
            seq,
            source_input_id: sample.id.clone(),
        });
    }

    let set = io::PredictionSet {
        skeleton: dataset.skeleton.clone(),
        frame_interval_ms: dataset.frame_interval_ms,
        predictions,
    };
    io::save_predictions(&set, out)?;
    write_run_record(&sibling_record_path(out), cfg)?;
    let mut sidecar_path = out.file_name().unwrap_or_default().to_os_string();
    sidecar_path.push(".fusion.json");
    std::fs::write(
        out.with_file_name(sidecar_path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Score predictions against ground truth; writes `report.json`,
/// `report.csv`, `report.svg`, and `run.json` into `out_dir`.
pub fn cmd_eval(
    cfg: &RunConfig,
    pred_path: &Path,
    gt_path: &Path,
    out_dir: &Path,
) -> anyhow::Result<MetricReport> {
    let preds = io::load_predictions(pred_path)?;
    let gt = io::load_dataset(gt_path)?;
    let window = WindowSpec {
        output_frames: preds
            .predictions
            .first()
            .map(|p| p.seq.len())
            .unwrap_or(cfg.window.output_frames),
        ..eval_window(cfg)
    };
    let report = metrics::evaluate(&preds, &gt, &window, &cfg.metric)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.json"), report.to_json())?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("report.svg"), metrics::render_svg(&report))?;
    write_run_record(&out_dir.join("run.json"), cfg)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub num_blocks: usize,
    pub hidden_channels: usize,
    pub average: Option<f64>,
    pub error: Option<String>,
}

/// Train and validate one model per grid point (scale x blocks x channels),
/// all from the same seed, and tabulate the average validation metric.
/// Failing members are recorded and the sweep continues.
pub fn cmd_sweep(cfg: &RunConfig, out_dir: &Path) -> anyhow::Result<Vec<SweepRow>> {
    if cfg.sweep.scales.is_empty()
        || cfg.sweep.num_blocks.is_empty()
        || cfg.sweep.hidden_channels.is_empty()
    {
        return Err(Error::Invalid("sweep grid must be non-empty".into()).into());
    }
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Invalid("config data.train is required for sweeping".into()))?;
    let dataset = io::load_dataset(train_path)?;
    let val = cfg.data.val.as_ref().map(io::load_dataset).transpose()?;

    let mut rows = Vec::new();
    for &scale in &cfg.sweep.scales {
        for &num_blocks in &cfg.sweep.num_blocks {
            for &hidden_channels in &cfg.sweep.hidden_channels {
                let mut member = cfg.clone();
                member.preprocess.scale = scale;
                member.gcn.num_blocks = num_blocks;
                member.gcn.hidden_channels = hidden_channels;
                let tc = member.train_config();
                let row = match train::train(&dataset, val.as_ref(), &tc, cfg.seed) {
                    Ok(outcome) if !outcome.report.diverged => SweepRow {
                        scale,
                        num_blocks,
                        hidden_channels,
                        average: outcome.report.best_val,
                        error: None,
                    },
                    Ok(_) => SweepRow {
                        scale,
                        num_blocks,
                        hidden_channels,
                        average: None,
                        error: Some("diverged".into()),
                    },
                    Err(e) => SweepRow {
                        scale,
                        num_blocks,
                        hidden_channels,
                        average: None,
                        error: Some(e.to_string()),
                    },
                };
                log::info!(
                    "sweep scale={scale} blocks={num_blocks} channels={hidden_channels}: {:?}",
                    row.average
                );
                rows.push(row);
            }
        }
    }

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    let mut csv = String::from("scale,num_blocks,hidden_channels,average,error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scale,
            r.num_blocks,
            r.hidden_channels,
            r.average.map(|v| v.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default()
        ));
    }
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    write_run_record(&out_dir.join("run.json"), cfg)?;
    Ok(rows)
}
