//! Episodic evaluation on held-out classes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::episodes::{episode_seed, sample_episode, Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::metric::{
    accuracy, compute_prototypes, embed_episode, predict, query_log_probs, PrototypeSet,
};
use crate::nets::{Graph, Model};
use crate::tensor::Tensor;
use crate::transform::transform_prototypes;

/// Which model components take part in inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceSettings {
    pub use_variance: bool,
    pub use_relative: bool,
    pub use_transform: bool,
    pub lambda_rho: f64,
    pub t_h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_episodes: usize,
    pub seed: u64,
    pub settings: InferenceSettings,
    pub mean_acc: f64,
    /// Half-width of the 95% interval, `1.96 * std / sqrt(n)`.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Query accuracy on one episode.
pub fn episode_accuracy(
    model: &Model,
    data: &LabeledDataset,
    episode: &Episode,
    base_prototypes: Option<&Tensor>,
    settings: &InferenceSettings,
) -> Result<f64> {
    let mut g = Graph::new(&model.params, &[]);
    let emb = embed_episode(
        &mut g,
        model,
        episode.batch(data),
        false,
        settings.use_relative,
    )?;
    let mut protos =
        compute_prototypes(&mut g, model, &emb, episode, settings.use_variance, false)?;
    if settings.use_transform {
        let base = base_prototypes
            .ok_or_else(|| Error::config("prototype transformation needs base prototypes"))?;
        let means = g.tape.value(protos.absolute).clone();
        let transformed = transform_prototypes(&mut g, model, &means, base, settings.t_h, false)?;
        protos = PrototypeSet {
            absolute: transformed,
            ..protos
        };
    }
    let lp = query_log_probs(&mut g.tape, episode, &emb, &protos)?;
    let predicted = predict(
        g.tape.value(lp.absolute),
        lp.relative.map(|r| g.tape.value(r)),
        settings.lambda_rho,
    );
    Ok(accuracy(&predicted, &episode.query_labels()))
}

/// Mean accuracy over `n_episodes` episodes drawn from `data`. Episode `i`
/// uses seed `episode_seed(seed, i)`, so the parallel and serial paths
/// produce identical per-episode results.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    data: &LabeledDataset,
    base_prototypes: Option<&Tensor>,
    settings: &InferenceSettings,
    shape: EpisodeShape,
    n_episodes: usize,
    seed: u64,
    parallel: bool,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    shape.check(data)?;
    let run = |i: usize| -> Result<f64> {
        let episode = sample_episode(data, shape, episode_seed(seed, i as u64))?;
        episode_accuracy(model, data, &episode, base_prototypes, settings)
    };
    let per_episode: Vec<f64> = if parallel {
        (0..n_episodes)
            .into_par_iter()
            .map(run)
            .collect::<Result<_>>()?
    } else {
        (0..n_episodes).map(run).collect::<Result<_>>()?
    };
    let (mean_acc, ci95) = mean_and_ci95(&per_episode);
    Ok(EvalReport {
        n_way: shape.n_way,
        k_shot: shape.k_shot,
        n_query: shape.n_query,
        n_episodes,
        seed,
        settings: settings.clone(),
        mean_acc,
        ci95,
        per_episode,
    })
}
