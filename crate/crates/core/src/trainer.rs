//! The two-stage training procedure.
//!
//! Stage 1 optimizes the feature extractor (and variance estimator) on
//! episodic N-way K-shot tasks drawn from the base classes. Stage 2 freezes
//! both and optimizes the prototype transformation on pseudo-novel episodes.
//! Every episode draws from its own RNG stream keyed by (seed, episode), so a
//! run resumed from a checkpoint reproduces an uninterrupted run exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSplits;
use crate::episodes::{
    episode_seed, sample_episode, sample_stage2_episode, BaseFeatureBank, EpisodeShape,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, InferenceSettings};
use crate::metric::{
    accuracy, compute_prototypes, embed_episode, predict, query_log_probs, stage1_loss,
};
use crate::nets::{Graph, Model, ParamStore};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};
use crate::transform::stage2_loss;

const STAGE1_SALT: u64 = 0x5354_4731;
const STAGE2_SALT: u64 = 0x5354_4732;
const VALIDATION_SALT: u64 = 0x5641_4c31;

/// Sampling seed of stage-1 training episode `e`.
pub fn stage1_episode_seed(seed: u64, e: usize) -> u64 {
    episode_seed(seed ^ STAGE1_SALT, e as u64)
}

/// Sampling seed of stage-2 training episode `e`.
pub fn stage2_episode_seed(seed: u64, e: usize) -> u64 {
    episode_seed(seed ^ STAGE2_SALT, e as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Halve the learning rate every this many episodes; `null` keeps it constant.
    pub halve_every: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halve_every: Some(2000),
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, episode: usize) -> f64 {
        match self.halve_every {
            Some(every) if every > 0 => self.lr * 0.5f64.powi((episode / every) as i32),
            _ => self.lr,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `names` with learning rate `lr`.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        for name in names {
            if !grads.contains_key(name) {
                return Err(Error::Contract(format!(
                    "no gradient for trainable parameter `{name}`"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for name in names {
            let g = grads[name].data();
            let theta = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    fn records(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam/step".to_string(), Tensor::scalar(self.step as f64))];
        for (k, m) in &self.m {
            out.push((format!("adam/m/{k}"), Tensor::vector(m.clone())));
        }
        for (k, v) in &self.v {
            out.push((format!("adam/v/{k}"), Tensor::vector(v.clone())));
        }
        out
    }

    fn restore(&mut self, records: &[(String, Tensor)]) {
        for (name, t) in records {
            if name == "adam/step" {
                self.step = t.data()[0] as u64;
            } else if let Some(k) = name.strip_prefix("adam/m/") {
                self.m.insert(k.to_string(), t.data().to_vec());
            } else if let Some(k) = name.strip_prefix("adam/v/") {
                self.v.insert(k.to_string(), t.data().to_vec());
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Learned per-class variance (Mahalanobis distance).
    pub use_v: bool,
    /// Relative features.
    pub use_r: bool,
    /// Stage-2 prototype transformation.
    pub use_t: bool,
}

impl Ablation {
    pub const PN: Ablation = Ablation {
        use_v: false,
        use_r: false,
        use_t: false,
    };
    pub const FULL: Ablation = Ablation {
        use_v: true,
        use_r: true,
        use_t: true,
    };

    pub fn label(&self) -> String {
        let mut s = String::from("PN");
        for (on, tag) in [(self.use_v, "+V"), (self.use_r, "+R"), (self.use_t, "+T")] {
            if on {
                s.push_str(tag);
            }
        }
        s
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            n_way: 60,
            k_shot: 5,
            n_query: 5,
            episodes: 20_000,
        }
    }
}

impl Stage1Config {
    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape::new(self.n_way, self.k_shot, self.n_query)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// Defaults to the test-time way.
    pub n_way: Option<usize>,
    /// Defaults to the test-time shot.
    pub k_shot: Option<usize>,
    pub n_query: usize,
    pub episodes: usize,
    pub max_base_samples: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            n_way: None,
            k_shot: None,
            n_query: 5,
            episodes: 5_000,
            max_base_samples: 200,
        }
    }
}

impl Stage2Config {
    pub fn shape(&self) -> Result<EpisodeShape> {
        match (self.n_way, self.k_shot) {
            (Some(n), Some(k)) => Ok(EpisodeShape::new(n, k, self.n_query)),
            _ => Err(Error::config("stage-2 way/shot are unresolved")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    /// Validate every this many episodes; 0 disables validation.
    pub every: usize,
    pub episodes: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            every: 500,
            episodes: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub lambda_rho: f64,
    pub lambda_r: f64,
    pub t_h: f64,
    pub ablation: Ablation,
    pub optimizer: OptimizerConfig,
    pub validation: ValidationConfig,
    /// Write a resumable checkpoint every this many episodes.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            lambda_rho: 0.1,
            lambda_r: 1e-4,
            t_h: 0.02,
            ablation: Ablation::FULL,
            optimizer: OptimizerConfig::default(),
            validation: ValidationConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Reduced budgets for small synthetic or subset runs.
    pub fn desk() -> Self {
        let mut c = TrainConfig::default();
        c.stage1.n_way = 10;
        c.stage1.episodes = 1000;
        c.stage2.episodes = 300;
        c
    }

    /// Relative-feature weight actually applied.
    pub fn effective_lambda_rho(&self) -> f64 {
        if self.ablation.use_r {
            self.lambda_rho
        } else {
            0.0
        }
    }

    pub fn inference(&self) -> InferenceSettings {
        InferenceSettings {
            use_variance: self.ablation.use_v,
            use_relative: self.ablation.use_r,
            use_transform: self.ablation.use_t,
            lambda_rho: self.effective_lambda_rho(),
            t_h: self.t_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_rho < 0.0 || self.lambda_r < 0.0 {
            return Err(Error::config(
                "lambda_rho and lambda_r must be non-negative",
            ));
        }
        crate::transform::check_threshold(self.t_h)?;
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// One trace line.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub loss: f64,
    pub query_acc: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
    /// Stage 2 only: mean squared distance of transformed to ground-truth prototypes.
    pub regression: Option<f64>,
}

pub const TRACE_HEADER: &str = "episode,loss,query_acc,lr,wallclock_ms";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{},{:e},{}\n",
            r.episode, r.loss, r.query_acc, r.lr, r.wallclock_ms
        ));
    }
    s
}

fn parse_trace(text: &str) -> Vec<TraceRow> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return None;
            }
            Some(TraceRow {
                episode: f[0].parse().ok()?,
                loss: f[1].parse().ok()?,
                query_acc: f[2].parse().ok()?,
                lr: f[3].parse().ok()?,
                wallclock_ms: f[4].parse().ok()?,
                regression: None,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub trace: Vec<TraceRow>,
    /// `(episode, accuracy)` for each validation pass.
    pub validation: Vec<(usize, f64)>,
    pub best_validation: Option<f64>,
    /// Smallest class variance produced during training.
    pub min_sigma2: Option<f64>,
    /// Episodes run by this call (fewer than configured when stopped early).
    pub episodes_run: usize,
    pub completed: bool,
}

/// Where a stage keeps its checkpoints and trace, and how far to go.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub dir: Option<PathBuf>,
    /// Continue from `<stage>_last.ckpt` in `dir`.
    pub resume: bool,
    /// Stop after this many episodes of this call, leaving a resumable state.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    One,
    Two,
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

struct Progress {
    next_episode: usize,
    best: Option<f64>,
    trace: Vec<TraceRow>,
}

fn save_state(
    path: &Path,
    params: &ParamStore,
    adam: &Adam,
    next_episode: usize,
    best: Option<f64>,
) -> Result<()> {
    let mut extra = adam.records();
    extra.push((
        "train/next_episode".into(),
        Tensor::scalar(next_episode as f64),
    ));
    if let Some(b) = best {
        extra.push(("train/best".into(), Tensor::scalar(b)));
    }
    let records = params
        .records()
        .chain(extra.iter().map(|(n, t)| (n.as_str(), t)));
    write_checkpoint(path, records)
}

fn load_state(
    path: &Path,
    params: &mut ParamStore,
    adam: &mut Adam,
) -> Result<(usize, Option<f64>)> {
    let records = read_checkpoint(path)?;
    let mut next = 0;
    let mut best = None;
    let mut param_records = Vec::new();
    let mut adam_records = Vec::new();
    for (name, t) in records {
        match name.as_str() {
            "train/next_episode" => next = t.data()[0] as usize,
            "train/best" => best = Some(t.data()[0]),
            n if n.starts_with("adam/") => adam_records.push((name, t)),
            _ => param_records.push((name, t)),
        }
    }
    params.assign(param_records, true)?;
    adam.restore(&adam_records);
    Ok((next, best))
}

fn begin(
    stage: Stage,
    run: &RunOptions,
    params: &mut ParamStore,
    adam: &mut Adam,
) -> Result<Progress> {
    let mut progress = Progress {
        next_episode: 0,
        best: None,
        trace: Vec::new(),
    };
    if run.resume {
        let dir = run
            .dir
            .as_ref()
            .ok_or_else(|| Error::config("resume needs a run directory"))?;
        let last = dir
            .join("checkpoints")
            .join(format!("{}_last.ckpt", stage.tag()));
        if last.exists() {
            let (next, best) = load_state(&last, params, adam)?;
            progress.next_episode = next;
            progress.best = best;
            let trace_path = dir.join(format!("trace_{}.csv", stage.tag()));
            if let Ok(text) = fs::read_to_string(&trace_path) {
                progress.trace = parse_trace(&text)
                    .into_iter()
                    .filter(|r| r.episode < next)
                    .collect();
            }
        }
    }
    Ok(progress)
}

fn write_trace(dir: &Path, stage: Stage, rows: &[TraceRow]) -> Result<()> {
    let path = dir.join(format!("trace_{}.csv", stage.tag()));
    fs::write(&path, trace_csv(rows)).map_err(|e| Error::io(&path, e))
}

/// Stage 1: episodic training of the extractor and variance estimator.
pub fn train_stage1(
    model: &mut Model,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    seed: u64,
    eval_shape: EpisodeShape,
    run: &RunOptions,
) -> Result<StageReport> {
    cfg.validate()?;
    let shape = cfg.stage1.shape();
    let mut prefixes = vec!["fphi/"];
    if cfg.ablation.use_v {
        prefixes.push("fv/");
    }
    let names = model.params.trainable_names(&prefixes);
    let lambda_rho = cfg.effective_lambda_rho();
    let mut adam = Adam::new(&cfg.optimizer);
    let mut progress = begin(Stage::One, run, &mut model.params, &mut adam)?;
    let mut report = StageReport {
        best_validation: progress.best,
        ..StageReport::default()
    };
    let started = Instant::now();
    let mut best_params: Option<ParamStore> = None;
    let best_path = run
        .dir
        .as_ref()
        .map(|d| d.join("checkpoints").join("stage1_best.ckpt"));
    if let (Some(p), true) = (&best_path, progress.best.is_some()) {
        if p.exists() {
            let mut restored = model.params.clone();
            restored.load(p, true)?;
            best_params = Some(restored);
        }
    }

    let mut ran = 0;
    while progress.next_episode < cfg.stage1.episodes {
        if run.stop_after.is_some_and(|n| ran >= n) {
            break;
        }
        let e = progress.next_episode;
        let lr = cfg.optimizer.lr_at(e);
        let episode = sample_episode(&data.base, shape, stage1_episode_seed(seed, e))?;

        let (loss, acc, min_s2, grads, bn) = {
            let mut g = Graph::new(&model.params, &prefixes);
            let emb = embed_episode(
                &mut g,
                model,
                episode.batch(&data.base),
                true,
                cfg.ablation.use_r,
            )?;
            let protos =
                compute_prototypes(&mut g, model, &emb, &episode, cfg.ablation.use_v, true)?;
            let lp = query_log_probs(&mut g.tape, &episode, &emb, &protos)?;
            let loss = stage1_loss(&mut g.tape, &episode, &lp, lambda_rho)?;
            let predicted = predict(
                g.tape.value(lp.absolute),
                lp.relative.map(|r| g.tape.value(r)),
                lambda_rho,
            );
            let acc = accuracy(&predicted, &episode.query_labels());
            let min_s2 = g
                .tape
                .value(protos.sigma2)
                .data()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let mut gradients = g.tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, var) in g.trainable_vars() {
                if let Some(t) = gradients.take(var) {
                    grads.insert(name, t);
                }
            }
            let bn = g.take_bn_stats();
            (
                g.tape.value(loss).item().unwrap_or(f64::NAN),
                acc,
                min_s2,
                grads,
                bn,
            )
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "stage1_loss" });
        }
        adam.update(&mut model.params, &grads, &names, lr)?;
        for (prefix, stats) in &bn {
            model.params.update_running_stats(prefix, stats)?;
        }
        if cfg.ablation.use_v {
            report.min_sigma2 = Some(report.min_sigma2.map_or(min_s2, |m: f64| m.min(min_s2)));
        }
        progress.trace.push(TraceRow {
            episode: e,
            loss,
            query_acc: acc,
            lr,
            wallclock_ms: started.elapsed().as_millis() as u64,
            regression: None,
        });
        progress.next_episode += 1;
        ran += 1;

        let done = progress.next_episode;
        if cfg.validation.every > 0
            && done % cfg.validation.every == 0
            && data.validation.num_classes() >= eval_shape.n_way
        {
            let settings = InferenceSettings {
                use_transform: false,
                ..cfg.inference()
            };
            let val = evaluate(
                model,
                &data.validation,
                None,
                &settings,
                eval_shape,
                cfg.validation.episodes,
                seed ^ VALIDATION_SALT,
                false,
            )?;
            report.validation.push((done, val.mean_acc));
            if progress.best.is_none_or(|b| val.mean_acc > b) {
                progress.best = Some(val.mean_acc);
                best_params = Some(model.params.clone());
                if let Some(p) = &best_path {
                    model.params.save(p)?;
                }
            }
        }
        if let Some(dir) = &run.dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let ckpt = dir.join("checkpoints");
                model
                    .params
                    .save(&ckpt.join(format!("stage1_ep{done:06}.ckpt")))?;
                save_state(
                    &ckpt.join("stage1_last.ckpt"),
                    &model.params,
                    &adam,
                    done,
                    progress.best,
                )?;
                write_trace(dir, Stage::One, &progress.trace)?;
            }
        }
    }

    report.completed = progress.next_episode >= cfg.stage1.episodes;
    if let Some(dir) = &run.dir {
        let ckpt = dir.join("checkpoints");
        save_state(
            &ckpt.join("stage1_last.ckpt"),
            &model.params,
            &adam,
            progress.next_episode,
            progress.best,
        )?;
        write_trace(dir, Stage::One, &progress.trace)?;
    }
    if report.completed {
        if let Some(best) = best_params {
            model.params = best;
        }
        if let Some(dir) = &run.dir {
            model
                .params
                .save(&dir.join("checkpoints").join("stage1.ckpt"))?;
        }
    }
    report.best_validation = progress.best;
    report.trace = progress.trace;
    report.episodes_run = ran;
    Ok(report)
}

/// Stage 2: episodic training of the prototype transformation with the
/// extractor and variance estimator frozen.
pub fn train_stage2(
    model: &mut Model,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    seed: u64,
    run: &RunOptions,
) -> Result<StageReport> {
    cfg.validate()?;
    if !cfg.ablation.use_t {
        return Ok(StageReport {
            completed: true,
            ..StageReport::default()
        });
    }
    let shape = cfg.stage2.shape()?;
    let prefixes = ["ft/", "ft11/"];
    let names = model.params.trainable_names(&prefixes);
    let mut adam = Adam::new(&cfg.optimizer);
    let mut progress = begin(Stage::Two, run, &mut model.params, &mut adam)?;
    let bank = BaseFeatureBank::build(model, &data.base, cfg.stage2.max_base_samples)?;
    let started = Instant::now();
    let mut report = StageReport::default();
    let mut best_params: Option<ParamStore> = None;
    let best_path = run
        .dir
        .as_ref()
        .map(|d| d.join("checkpoints").join("stage2_best.ckpt"));
    if let (Some(p), true) = (&best_path, progress.best.is_some()) {
        if p.exists() {
            let mut restored = model.params.clone();
            restored.load(p, true)?;
            best_params = Some(restored);
        }
    }

    let mut ran = 0;
    while progress.next_episode < cfg.stage2.episodes {
        if run.stop_after.is_some_and(|n| ran >= n) {
            break;
        }
        let e = progress.next_episode;
        let lr = cfg.optimizer.lr_at(e);
        let ep = sample_stage2_episode(&data.base, &bank, shape, stage2_episode_seed(seed, e))?;
        let (loss, acc, reg, grads, bn) = {
            let mut g = Graph::new(&model.params, &prefixes);
            let l = stage2_loss(
                &mut g,
                model,
                &ep,
                cfg.ablation.use_v,
                cfg.t_h,
                cfg.lambda_r,
            )?;
            let predicted = predict(g.tape.value(l.log_probs), None, 0.0);
            let acc = accuracy(&predicted, &ep.episode.query_labels());
            let mut gradients = g.tape.backward(l.loss)?;
            let mut grads = BTreeMap::new();
            for (name, var) in g.trainable_vars() {
                if let Some(t) = gradients.take(var) {
                    grads.insert(name, t);
                }
            }
            let bn = g.take_bn_stats();
            let loss = g.tape.value(l.loss).item().unwrap_or(f64::NAN);
            let reg = g.tape.value(l.regression).item().unwrap_or(f64::NAN);
            (loss, acc, reg, grads, bn)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "stage2_loss" });
        }
        adam.update(&mut model.params, &grads, &names, lr)?;
        for (prefix, stats) in &bn {
            model.params.update_running_stats(prefix, stats)?;
        }
        progress.trace.push(TraceRow {
            episode: e,
            loss,
            query_acc: acc,
            lr,
            wallclock_ms: started.elapsed().as_millis() as u64,
            regression: Some(reg),
        });
        progress.next_episode += 1;
        ran += 1;

        let done = progress.next_episode;
        let eval_shape = EpisodeShape::new(shape.n_way, shape.k_shot, shape.n_query);
        if cfg.validation.every > 0
            && done % cfg.validation.every == 0
            && data.validation.num_classes() >= eval_shape.n_way
        {
            let val = evaluate(
                model,
                &data.validation,
                Some(&bank.capped_prototypes),
                &cfg.inference(),
                eval_shape,
                cfg.validation.episodes,
                seed ^ VALIDATION_SALT,
                false,
            )?;
            report.validation.push((done, val.mean_acc));
            if progress.best.is_none_or(|b| val.mean_acc > b) {
                progress.best = Some(val.mean_acc);
                best_params = Some(model.params.clone());
                if let Some(p) = &best_path {
                    model.params.save(p)?;
                }
            }
        }
        if let Some(dir) = &run.dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let ckpt = dir.join("checkpoints");
                model
                    .params
                    .save(&ckpt.join(format!("stage2_ep{done:06}.ckpt")))?;
                save_state(
                    &ckpt.join("stage2_last.ckpt"),
                    &model.params,
                    &adam,
                    done,
                    progress.best,
                )?;
                write_trace(dir, Stage::Two, &progress.trace)?;
            }
        }
    }

    report.completed = progress.next_episode >= cfg.stage2.episodes;
    if let Some(dir) = &run.dir {
        let ckpt = dir.join("checkpoints");
        save_state(
            &ckpt.join("stage2_last.ckpt"),
            &model.params,
            &adam,
            progress.next_episode,
            progress.best,
        )?;
        write_trace(dir, Stage::Two, &progress.trace)?;
    }
    if report.completed {
        if let Some(best) = best_params {
            model.params = best;
        }
    }
    report.best_validation = progress.best;
    report.trace = progress.trace;
    report.episodes_run = ran;
    Ok(report)
}
