//! Stage 2: the category-agnostic map from a few-shot class mean to a class
//! prototype,
//!
//! ```text
//! p' = p W1 + f_T11(p) + thr(softmax_l(-||P_r[l] - p||^2), t_h) P_r W2
//! ```
//!
//! and its episodic training loss. The class mean `p` and the base prototype
//! matrix `P_r` are constants here; only `W1`, `W2` and the f_T11 parameters
//! are differentiated.

use crate::episodes::Stage2Episode;
use crate::error::{Error, Result};
use crate::nets::{Graph, Model};
use crate::tensor::tape::{log_softmax_in_place, sq_dist};
use crate::tensor::{Tensor, Var};

/// Softmax over base classes of the negative squared distance to `p`.
pub fn base_attention(p: &[f64], base: &Tensor) -> Result<Vec<f64>> {
    if base.rank() != 2 || base.shape()[0] == 0 {
        return Err(Error::config("base prototype matrix is empty"));
    }
    if base.shape()[1] != p.len() {
        return Err(Error::config(format!(
            "base prototypes have dimension {}, prototype has {}",
            base.shape()[1],
            p.len()
        )));
    }
    let mut logits: Vec<f64> = (0..base.shape()[0])
        .map(|l| -sq_dist(base.row(l), p))
        .collect();
    log_softmax_in_place(&mut logits);
    Ok(logits.into_iter().map(f64::exp).collect())
}

/// Keeps entries strictly above `t_h`, zeroes the rest. No renormalization.
pub fn threshold_probs(probs: &[f64], t_h: f64) -> Vec<f64> {
    probs
        .iter()
        .map(|&v| if v > t_h { v } else { 0.0 })
        .collect()
}

/// `thr(p_c) P_r` for every row of `means`, `[N, D]`.
pub fn base_contribution(means: &Tensor, base: &Tensor, t_h: f64) -> Result<Tensor> {
    let (n, d) = (means.shape()[0], means.shape()[1]);
    let mut out = vec![0.0; n * d];
    for c in 0..n {
        let weights = threshold_probs(&base_attention(means.row(c), base)?, t_h);
        let row = &mut out[c * d..(c + 1) * d];
        for (l, w) in weights.iter().enumerate() {
            if *w != 0.0 {
                row.iter_mut()
                    .zip(base.row(l))
                    .for_each(|(o, b)| *o += w * b);
            }
        }
    }
    Tensor::matrix(n, d, out)
}

pub fn check_threshold(t_h: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t_h) {
        return Err(Error::config(format!(
            "threshold t_h must lie in [0, 1], got {t_h}"
        )));
    }
    Ok(())
}

/// Transformed prototypes `[N, D]` for class means `[N, D]`.
pub fn transform_prototypes(
    g: &mut Graph,
    model: &Model,
    means: &Tensor,
    base: &Tensor,
    t_h: f64,
    train: bool,
) -> Result<Var> {
    check_threshold(t_h)?;
    let d = model.feature_dim();
    if means.rank() != 2 || means.shape()[1] != d {
        return Err(Error::config(format!(
            "class means must be [N, {d}], got {:?}",
            means.shape()
        )));
    }
    let contribution = base_contribution(means, base, t_h)?;
    let p = g.constant(means.clone());
    let w1 = g.param("ft/W1")?;
    let scaled = g.tape.matmul(p, w1)?;
    let shift = model.transformer.forward(g, p, train)?;
    let t1 = g.tape.add(scaled, shift)?;
    let c = g.constant(contribution);
    let w2 = g.param("ft/W2")?;
    let t2 = g.tape.matmul(c, w2)?;
    g.tape.add(t1, t2)
}

/// Class variances `[N]` from the frozen variance estimator applied to the
/// untransformed class means (reshaped to feature maps), or ones.
pub fn frozen_variances(
    g: &mut Graph,
    model: &Model,
    means: &Tensor,
    use_variance: bool,
) -> Result<Var> {
    let n = means.shape()[0];
    if !use_variance {
        return Ok(g.constant(Tensor::filled(&[n], 1.0)));
    }
    let (h, w, c) = model.extractor.output_map();
    let maps = g.constant(means.clone().reshape(vec![n, h, w, c])?);
    model.variance.forward(g, maps, false)
}

/// Pieces of the stage-2 objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Loss {
    /// `nll + lambda_r * regression`
    pub loss: Var,
    pub nll: Var,
    /// Mean over classes of `||p'_c - p_gt_c||^2`.
    pub regression: Var,
    /// `[n_q, N]` query log-probabilities under the transformed prototypes.
    pub log_probs: Var,
}

/// Support means of a stage-2 episode, `[N, D]`.
pub fn support_means(ep: &Stage2Episode) -> Result<Tensor> {
    let e = &ep.episode;
    let avg = e.support_mean_matrix();
    let (n, r) = (e.shape.n_way, e.n_samples());
    let d = ep.features.shape()[1];
    let mut out = vec![0.0; n * d];
    for c in 0..n {
        for j in 0..r {
            let w = avg.data()[c * r + j];
            if w != 0.0 {
                out[c * d..(c + 1) * d]
                    .iter_mut()
                    .zip(ep.features.row(j))
                    .for_each(|(o, v)| *o += w * v);
            }
        }
    }
    Tensor::matrix(n, d, out)
}

pub fn stage2_loss(
    g: &mut Graph,
    model: &Model,
    ep: &Stage2Episode,
    use_variance: bool,
    t_h: f64,
    lambda_r: f64,
) -> Result<Stage2Loss> {
    if lambda_r < 0.0 {
        return Err(Error::config(format!(
            "lambda_r must be non-negative, got {lambda_r}"
        )));
    }
    let means = support_means(ep)?;
    let transformed = transform_prototypes(g, model, &means, &ep.base_prototypes, t_h, true)?;
    let sigma2 = frozen_variances(g, model, &means, use_variance)?;

    let rows = ep.episode.query_rows();
    let feats = g.constant(ep.features.clone());
    let queries = g.tape.select_rows(feats, &rows)?;
    let dist = g.tape.pairwise_sq_dist(queries, transformed)?;
    let dist = g.tape.div_cols(dist, sigma2)?;
    let neg = g.tape.scale(dist, -1.0)?;
    let log_probs = g.tape.log_softmax_rows(neg)?;
    let picked = g.tape.pick(log_probs, &ep.episode.query_labels())?;
    let nll = g.tape.mean(picked)?;
    let nll = g.tape.scale(nll, -1.0)?;

    let gt = g.constant(ep.ground_truth.clone());
    let diff = g.tape.sub(transformed, gt)?;
    let sq = g.tape.square(diff)?;
    let total = g.tape.sum(sq)?;
    let regression = g.tape.scale(total, 1.0 / ep.episode.shape.n_way as f64)?;

    let reg_term = g.tape.scale(regression, lambda_r)?;
    let loss = g.tape.add(nll, reg_term)?;
    Ok(Stage2Loss {
        loss,
        nll,
        regression,
        log_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_base_class_gets_all_weight() {
        let base = Tensor::matrix(1, 2, vec![5.0, -1.0]).unwrap();
        assert_eq!(base_attention(&[0.0, 0.0], &base).unwrap(), vec![1.0]);
    }

    #[test]
    fn equidistant_bases_split_evenly() {
        let base = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let p = base_attention(&[0.0, 3.0], &base).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_base_is_config_error() {
        let base = Tensor::zeros(&[0, 2]);
        assert!(matches!(
            base_attention(&[0.0, 0.0], &base),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn thresholding() {
        assert_eq!(threshold_probs(&[0.6, 0.3, 0.1], 0.25), vec![0.6, 0.3, 0.0]);
        let p = [0.5, 0.25, 0.25];
        assert_eq!(threshold_probs(&p, 0.0), p.to_vec());
        assert_eq!(threshold_probs(&p, 1.0), vec![0.0; 3]);
        // a lone base class has probability exactly one and is still dropped at t_h = 1
        assert_eq!(threshold_probs(&[1.0], 1.0), vec![0.0]);
    }

    #[test]
    fn threshold_range_checked() {
        assert!(check_threshold(1.5).is_err());
        assert!(check_threshold(-0.1).is_err());
        assert!(check_threshold(0.02).is_ok());
    }
}
