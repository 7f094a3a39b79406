//! Config-driven experiments: train, evaluate and sweep, with every run
//! directory holding what is needed to reproduce it.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/resolved_config.json
//! <output_dir>/trace_stage1.csv, trace_stage2.csv
//! <output_dir>/checkpoints/{stage1,stage1_last,stage2_last,...}.ckpt
//! <output_dir>/model.ckpt
//! <output_dir>/report.json
//! <output_dir>/timing.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, DatasetSplits};
use crate::episodes::{BaseFeatureBank, EpisodeShape};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::nets::{rng_stream, InputGeometry, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{train_stage1, train_stage2, RunOptions, StageReport, TrainConfig};

const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Fan episodes out across threads. Results are identical either way.
    pub parallel: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
            episodes: 1000,
            seed: 0,
            parallel: true,
        }
    }
}

impl EvalProtocol {
    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape::new(self.n_way, self.k_shot, self.n_query)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub dataset: PathBuf,
    /// Run directory; relative paths resolve against the config file.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Fills values that default to other settings and checks ranges.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.stage2.n_way.get_or_insert(self.eval.n_way);
        self.train.stage2.k_shot.get_or_insert(self.eval.k_shot);
        self.train.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::config("eval.episodes must be positive"));
        }
        Ok(self)
    }

    pub fn write_resolved(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Which stages `train` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    Both,
}

impl FromStr for StageSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(StageSelection::One),
            "2" => Ok(StageSelection::Two),
            "both" => Ok(StageSelection::Both),
            other => Err(Error::config(format!(
                "stage must be 1, 2 or both, got `{other}`"
            ))),
        }
    }
}

/// A trained model with its training reports.
pub struct Fitted {
    pub model: Model,
    pub stage1: StageReport,
    pub stage2: StageReport,
}

pub fn init_model(cfg: &ModelConfig, data: &DatasetSplits, seed: u64) -> Result<Model> {
    let geometry = InputGeometry::from_sample_shape(&data.base.sample_shape)?;
    Model::new(cfg, geometry, &mut rng_stream(seed, INIT_STREAM))
}

/// Both training stages in memory, without touching the filesystem.
pub fn fit(
    data: &DatasetSplits,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    eval_shape: EpisodeShape,
    seed: u64,
) -> Result<Fitted> {
    let mut train = train.clone();
    train.stage2.n_way.get_or_insert(eval_shape.n_way);
    train.stage2.k_shot.get_or_insert(eval_shape.k_shot);
    let mut model = init_model(model_cfg, data, seed)?;
    let run = RunOptions::default();
    let stage1 = train_stage1(&mut model, data, &train, seed, eval_shape, &run)?;
    let stage2 = train_stage2(&mut model, data, &train, seed, &run)?;
    Ok(Fitted {
        model,
        stage1,
        stage2,
    })
}

/// Base prototype matrix used by the prototype transformation at test time.
pub fn base_prototypes(
    model: &Model,
    data: &DatasetSplits,
    train: &TrainConfig,
) -> Result<Option<Tensor>> {
    if !train.ablation.use_t {
        return Ok(None);
    }
    let bank = BaseFeatureBank::build(model, &data.base, train.stage2.max_base_samples)?;
    Ok(Some(bank.capped_prototypes))
}

/// Evaluates on the novel split with the inference settings implied by `train`.
pub fn evaluate_novel(
    model: &Model,
    data: &DatasetSplits,
    train: &TrainConfig,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let base = base_prototypes(model, data, train)?;
    evaluate(
        model,
        &data.novel,
        base.as_ref(),
        &train.inference(),
        protocol.shape(),
        protocol.episodes,
        protocol.seed,
        protocol.parallel,
    )
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub stage1: Option<StageReport>,
    pub stage2: Option<StageReport>,
    /// All requested stages ran to completion and `model.ckpt` was written.
    pub completed: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Timing<'a> {
    command: &'a str,
    wallclock_ms: u128,
}

pub fn run_train(
    cfg: &ExperimentConfig,
    stages: StageSelection,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let cfg = cfg.clone().resolve()?;
    cfg.write_resolved()?;
    let data = load_dataset(&cfg.dataset)?;
    let mut model = init_model(&cfg.model, &data, cfg.seed)?;
    let run = RunOptions {
        dir: Some(cfg.output_dir.clone()),
        resume,
        stop_after,
    };
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    let mut outcome = TrainOutcome::default();

    if matches!(stages, StageSelection::One | StageSelection::Both) {
        let report = train_stage1(
            &mut model,
            &data,
            &cfg.train,
            cfg.seed,
            cfg.eval.shape(),
            &run,
        )?;
        let done = report.completed;
        outcome.stage1 = Some(report);
        if !done {
            return Ok(outcome);
        }
    } else {
        let stage1 = ckpt_dir.join("stage1.ckpt");
        if !stage1.exists() {
            return Err(Error::config(format!(
                "stage 2 needs a finished stage-1 checkpoint at {}; run `train --stage 1` first",
                stage1.display()
            )));
        }
        model.params.load(&stage1, true)?;
    }

    if matches!(stages, StageSelection::Two | StageSelection::Both) {
        let report = train_stage2(&mut model, &data, &cfg.train, cfg.seed, &run)?;
        let done = report.completed;
        outcome.stage2 = Some(report);
        if !done {
            return Ok(outcome);
        }
    }

    model.params.save(&cfg.output_dir.join("model.ckpt"))?;
    outcome.completed = true;
    write_json(
        &cfg.output_dir.join("timing.json"),
        &Timing {
            command: "train",
            wallclock_ms: started.elapsed().as_millis(),
        },
    )?;
    Ok(outcome)
}

/// Evaluates a checkpoint (default `<output_dir>/model.ckpt`) and writes
/// `report.json` to the run directory.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    episodes: Option<usize>,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    if let Some(n) = episodes {
        cfg.eval.episodes = n;
    }
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    let cfg = cfg.resolve()?;
    let data = load_dataset(&cfg.dataset)?;
    let mut model = init_model(&cfg.model, &data, cfg.seed)?;
    let default_ckpt = cfg.output_dir.join("model.ckpt");
    let path = checkpoint.unwrap_or(&default_ckpt);
    if !path.exists() {
        return Err(Error::config(format!(
            "no checkpoint at {}; train first or pass --checkpoint",
            path.display()
        )));
    }
    model.params.load(path, true)?;
    let report = evaluate_novel(&model, &data, &cfg.train, &cfg.eval)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    write_json(
        &cfg.output_dir.join("timing_eval.json"),
        &Timing {
            command: "eval",
            wallclock_ms: started.elapsed().as_millis(),
        },
    )?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    LambdaRho,
    LambdaR,
    Threshold,
    TrainWay,
    /// Test-time queries per class.
    NQuery,
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_rho" => Ok(SweepParam::LambdaRho),
            "lambda_r" => Ok(SweepParam::LambdaR),
            "t_h" => Ok(SweepParam::Threshold),
            "train_way" => Ok(SweepParam::TrainWay),
            "n_query" => Ok(SweepParam::NQuery),
            other => Err(Error::config(format!(
                "unknown sweep parameter `{other}` (expected lambda_rho, lambda_r, t_h, train_way or n_query)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaRho => "lambda_rho",
            SweepParam::LambdaR => "lambda_r",
            SweepParam::Threshold => "t_h",
            SweepParam::TrainWay => "train_way",
            SweepParam::NQuery => "n_query",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::config(format!(
                    "{} needs a positive integer, got {value}",
                    self.name()
                )))
            }
        };
        match self {
            SweepParam::LambdaRho => cfg.train.lambda_rho = value,
            SweepParam::LambdaR => cfg.train.lambda_r = value,
            SweepParam::Threshold => cfg.train.t_h = value,
            SweepParam::TrainWay => cfg.train.stage1.n_way = count()?,
            SweepParam::NQuery => cfg.eval.n_query = count()?,
        }
        Ok(())
    }
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad grid value `{}`", v.trim())))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub mean_acc: f64,
    pub ci95: f64,
    pub n_episodes: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,mean_acc,ci95,n_episodes\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.value, r.mean_acc, r.ci95, r.n_episodes
        ));
    }
    s
}

/// One full train + eval per grid value, each in `<output_dir>/sweep_<param>/<value>`,
/// with results collected in `<output_dir>/sweep_<param>.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, param: SweepParam, grid: &[f64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut point = cfg.clone();
        param.apply(&mut point, value)?;
        point.output_dir = cfg
            .output_dir
            .join(format!("sweep_{}", param.name()))
            .join(format!("{value}"));
        run_train(&point, StageSelection::Both, false, None)?;
        let report = run_eval(&point, None, None, None)?;
        rows.push(SweepRow {
            value,
            mean_acc: report.mean_acc,
            ci95: report.ci95,
            n_episodes: report.n_episodes,
        });
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(format!("sweep_{}.csv", param.name()));
    fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
