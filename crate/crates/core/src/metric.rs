//! Stage-1 mathematics: relative features, class prototypes, variance-scaled
//! (Mahalanobis) and Euclidean class probabilities, the combined episodic
//! loss and the prediction rule.

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::nets::{Graph, Model};
use crate::tensor::{Tape, Tensor, Var};

/// Which representation a distance is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    /// `||f(x) - p_c||^2 / sigma_c^2`
    Absolute,
    /// `||rel(x) - p_rel_c||^2`
    Relative,
}

/// `out[k][d] = ||row_k - row_d||^2` for an `[r, D]` matrix.
pub fn relative_features(tape: &mut Tape, absolute: Var) -> Result<Var> {
    let shape = tape.shape(absolute);
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::config(format!(
            "relative features need at least two embedded samples, got {shape:?}"
        )));
    }
    tape.pairwise_sq_dist(absolute, absolute)
}

/// Off-tape convenience wrapper around [`relative_features`].
pub fn relative_features_of(absolute: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(absolute.clone());
    let r = relative_features(&mut tape, a)?;
    Ok(tape.value(r).clone())
}

/// Embedded episode in canonical sample order.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeEmbedding {
    /// `[r, D]`
    pub absolute: Var,
    /// `[r, h, w, c]`
    pub maps: Var,
    /// `[r, r]`, present when relative features are in use.
    pub relative: Option<Var>,
}

/// Per-class prototypes of one episode.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeSet {
    /// `[N, D]`
    pub absolute: Var,
    /// `[N, h, w, c]`
    pub maps: Var,
    /// `[N, r]`
    pub relative: Option<Var>,
    /// `[N]`, all ones when the variance estimator is off.
    pub sigma2: Var,
}

/// Runs the extractor over `batch` (canonical order) and derives relative
/// features when `relative` is set.
pub fn embed_episode(
    g: &mut Graph,
    model: &Model,
    batch: Tensor,
    train: bool,
    relative: bool,
) -> Result<EpisodeEmbedding> {
    let b = batch.shape()[0];
    let x = g.constant(batch);
    let maps = model.extractor.forward(g, x, train)?;
    let absolute = g.tape.reshape(maps, &[b, model.feature_dim()])?;
    let relative = if relative {
        Some(relative_features(&mut g.tape, absolute)?)
    } else {
        None
    };
    Ok(EpisodeEmbedding {
        absolute,
        maps,
        relative,
    })
}

/// Class means of the support rows, and class variances from the variance
/// estimator applied to each class's mean feature map.
pub fn compute_prototypes(
    g: &mut Graph,
    model: &Model,
    embedding: &EpisodeEmbedding,
    episode: &Episode,
    use_variance: bool,
    train: bool,
) -> Result<PrototypeSet> {
    let avg = g.constant(episode.support_mean_matrix());
    let n = episode.shape.n_way;
    let absolute = g.tape.matmul(avg, embedding.absolute)?;
    let map_shape = g.tape.shape(embedding.maps).to_vec();
    let r = map_shape[0];
    let flat_maps = g
        .tape
        .reshape(embedding.maps, &[r, map_shape[1..].iter().product()])?;
    let mean_maps = g.tape.matmul(avg, flat_maps)?;
    let mut proto_map_shape = map_shape.clone();
    proto_map_shape[0] = n;
    let maps = g.tape.reshape(mean_maps, &proto_map_shape)?;
    let relative = match embedding.relative {
        Some(rel) => Some(g.tape.matmul(avg, rel)?),
        None => None,
    };
    let sigma2 = if use_variance {
        model.variance.forward(g, maps, train)?
    } else {
        g.constant(Tensor::filled(&[n], 1.0))
    };
    Ok(PrototypeSet {
        absolute,
        maps,
        relative,
        sigma2,
    })
}

/// Log-probabilities `[m, N]` of `queries` (`[m, D]` or `[m, r]`) over the
/// classes, from a max-subtracted softmax over negative distances.
pub fn class_log_probs(
    tape: &mut Tape,
    queries: Var,
    prototypes: &PrototypeSet,
    space: Space,
) -> Result<Var> {
    let dist = match space {
        Space::Absolute => {
            let d = tape.pairwise_sq_dist(queries, prototypes.absolute)?;
            tape.div_cols(d, prototypes.sigma2)?
        }
        Space::Relative => {
            let rel = prototypes
                .relative
                .ok_or_else(|| Error::Contract("relative prototypes were not computed".into()))?;
            tape.pairwise_sq_dist(queries, rel)?
        }
    };
    let neg = tape.scale(dist, -1.0)?;
    tape.log_softmax_rows(neg)
}

/// Log-probabilities of every query in both spaces.
#[derive(Clone, Copy, Debug)]
pub struct QueryLogProbs {
    pub absolute: Var,
    pub relative: Option<Var>,
}

pub fn query_log_probs(
    tape: &mut Tape,
    episode: &Episode,
    embedding: &EpisodeEmbedding,
    prototypes: &PrototypeSet,
) -> Result<QueryLogProbs> {
    let rows = episode.query_rows();
    let q_abs = tape.select_rows(embedding.absolute, &rows)?;
    let absolute = class_log_probs(tape, q_abs, prototypes, Space::Absolute)?;
    let relative = match embedding.relative {
        Some(rel) => {
            let q_rel = tape.select_rows(rel, &rows)?;
            Some(class_log_probs(tape, q_rel, prototypes, Space::Relative)?)
        }
        None => None,
    };
    Ok(QueryLogProbs { absolute, relative })
}

/// Mean over queries of `-log p_abs(y|x) - lambda_rho * log p_rel(y|x)`.
pub fn stage1_loss(
    tape: &mut Tape,
    episode: &Episode,
    log_probs: &QueryLogProbs,
    lambda_rho: f64,
) -> Result<Var> {
    if lambda_rho < 0.0 {
        return Err(Error::config(format!(
            "lambda_rho must be non-negative, got {lambda_rho}"
        )));
    }
    let labels = episode.query_labels();
    let picked = tape.pick(log_probs.absolute, &labels)?;
    let mut loss = tape.mean(picked)?;
    loss = tape.scale(loss, -1.0)?;
    if let (Some(rel), true) = (log_probs.relative, lambda_rho > 0.0) {
        let picked = tape.pick(rel, &labels)?;
        let m = tape.mean(picked)?;
        let term = tape.scale(m, -lambda_rho)?;
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// Class minimizing `-log p_abs - lambda_rho * log p_rel` for each query row.
pub fn predict(log_abs: &Tensor, log_rel: Option<&Tensor>, lambda_rho: f64) -> Vec<usize> {
    let n = log_abs.shape()[1];
    (0..log_abs.shape()[0])
        .map(|i| {
            let scores: Vec<f64> = (0..n)
                .map(|c| {
                    let mut s = -log_abs.row(i)[c];
                    if let Some(rel) = log_rel {
                        if lambda_rho > 0.0 {
                            s -= lambda_rho * rel.row(i)[c];
                        }
                    }
                    s
                })
                .collect();
            argmin(&scores)
        })
        .collect()
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::EpisodeShape;

    fn tiny_episode(n: usize, k: usize, q: usize) -> Episode {
        let mut support = Vec::new();
        let mut query = Vec::new();
        for c in 0..n {
            support.extend((0..k).map(|s| (c, s)));
            query.extend((0..q).map(|s| (c, k + s)));
        }
        Episode {
            shape: EpisodeShape::new(n, k, q),
            roster: (0..n).collect(),
            support,
            query,
        }
    }

    /// Prototype set over plain constant tensors.
    fn protos(tape: &mut Tape, p: Tensor, sigma2: Vec<f64>) -> PrototypeSet {
        let n = p.shape()[0];
        let d = p.shape()[1];
        let maps = tape.constant(p.clone().reshape(vec![n, 1, 1, d]).unwrap());
        PrototypeSet {
            absolute: tape.constant(p),
            maps,
            relative: None,
            sigma2: tape.constant(Tensor::vector(sigma2)),
        }
    }

    #[test]
    fn worked_three_point_example() {
        // distances |p1 p2| = 3, |p1 p3| = 1, |p2 p3| = 2 on a line
        let a = Tensor::matrix(3, 1, vec![0.0, 3.0, 1.0]).unwrap();
        let r = relative_features_of(&a).unwrap();
        assert_eq!(r.data(), &[0.0, 9.0, 1.0, 9.0, 0.0, 4.0, 1.0, 4.0, 0.0]);
    }

    #[test]
    fn identical_rows_give_zero_matrix() {
        let a = Tensor::matrix(4, 3, vec![0.25; 12]).unwrap();
        assert!(relative_features_of(&a)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn single_sample_is_rejected() {
        let a = Tensor::matrix(1, 3, vec![1.0; 3]).unwrap();
        assert!(matches!(relative_features_of(&a), Err(Error::Config(_))));
    }

    #[test]
    fn singleton_class_log_prob_is_zero() {
        let mut t = Tape::new();
        let p = protos(
            &mut t,
            Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            vec![1.0],
        );
        let q = t.constant(Tensor::matrix(1, 2, vec![4.0, -2.0]).unwrap());
        let lp = class_log_probs(&mut t, q, &p, Space::Absolute).unwrap();
        assert_eq!(t.value(lp).data(), &[0.0]);
    }

    #[test]
    fn wider_class_wins_at_equal_distance() {
        let mut t = Tape::new();
        let p = protos(
            &mut t,
            Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap(),
            vec![4.0, 1.0],
        );
        let q = t.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let lp = class_log_probs(&mut t, q, &p, Space::Absolute).unwrap();
        let v = t.value(lp).data();
        assert!(v[0] > v[1]);
        assert!(((v[0].exp() + v[1].exp()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_ties_go_to_lowest_index() {
        assert_eq!(argmin(&[1.0, 0.5, 0.5]), 1);
        let lp = Tensor::matrix(1, 3, vec![-1.0, -1.0, -1.0]).unwrap();
        assert_eq!(predict(&lp, None, 0.0), vec![0]);
    }

    #[test]
    fn perfectly_separated_loss_is_near_zero() {
        let ep = tiny_episode(2, 1, 1);
        let mut t = Tape::new();
        // support rows then query rows; classes 100 apart, queries on top of prototypes
        let abs = t.constant(Tensor::matrix(4, 1, vec![0.0, 100.0, 0.0, 100.0]).unwrap());
        let maps = t.reshape(abs, &[4, 1, 1, 1]).unwrap();
        let emb = EpisodeEmbedding {
            absolute: abs,
            maps,
            relative: None,
        };
        let avg = t.constant(ep.support_mean_matrix());
        let pa = t.matmul(avg, abs).unwrap();
        let pm = t.reshape(pa, &[2, 1, 1, 1]).unwrap();
        let s = t.constant(Tensor::filled(&[2], 1.0));
        let p = PrototypeSet {
            absolute: pa,
            maps: pm,
            relative: None,
            sigma2: s,
        };
        let lp = query_log_probs(&mut t, &ep, &emb, &p).unwrap();
        let loss = stage1_loss(&mut t, &ep, &lp, 0.0).unwrap();
        let v = t.value(loss).item().unwrap();
        assert!((0.0..1e-12).contains(&v));
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let ep = tiny_episode(1, 1, 1);
        let mut t = Tape::new();
        let lp = t.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let q = QueryLogProbs {
            absolute: lp,
            relative: None,
        };
        assert!(stage1_loss(&mut t, &ep, &q, -0.1).is_err());
    }
}
