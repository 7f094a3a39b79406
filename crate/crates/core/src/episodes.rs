//! Episodic N-way K-shot sampling for both training stages and testing.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nets::{rng_stream, Model};
use crate::tensor::Tensor;

/// N-way K-shot geometry with Q queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeShape {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize) -> Self {
        EpisodeShape {
            n_way,
            k_shot,
            n_query,
        }
    }

    pub fn n_support(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn n_queries(&self) -> usize {
        self.n_way * self.n_query
    }

    pub fn check(&self, data: &LabeledDataset) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::config(format!("degenerate episode shape {self:?}")));
        }
        if self.n_way > data.num_classes() {
            return Err(Error::config(format!(
                "{}-way episodes need {} classes, {:?} split has {}",
                self.n_way,
                self.n_way,
                data.split,
                data.num_classes()
            )));
        }
        let need = self.k_shot + self.n_query;
        if let Some(c) = data.classes.iter().find(|c| c.len() < need) {
            return Err(Error::config(format!(
                "class `{}` has {} samples, episodes need {need}",
                c.name,
                c.len()
            )));
        }
        Ok(())
    }
}

/// One sampled task. Samples are kept in canonical order: support samples by
/// (episode-local class, draw order), then query samples likewise. This
/// order defines the dimensions of the relative features.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub shape: EpisodeShape,
    /// Episode-local class index to dataset class id.
    pub roster: Vec<usize>,
    /// `(dataset class id, sample index)` per support sample.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn n_samples(&self) -> usize {
        self.support.len() + self.query.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.support.len())
            .map(|i| i / self.shape.k_shot)
            .collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.query.len())
            .map(|i| i / self.shape.n_query)
            .collect()
    }

    /// Support then query.
    pub fn items(&self) -> Vec<(usize, usize)> {
        self.support.iter().chain(&self.query).copied().collect()
    }

    /// Row indices of the query samples within [`Episode::items`].
    pub fn query_rows(&self) -> Vec<usize> {
        (self.support.len()..self.n_samples()).collect()
    }

    /// `[N, r]` matrix whose product with per-sample rows averages the
    /// support rows of each class.
    pub fn support_mean_matrix(&self) -> Tensor {
        let (n, k) = (self.shape.n_way, self.shape.k_shot);
        let r = self.n_samples();
        let mut m = Tensor::zeros(&[n, r]);
        for c in 0..n {
            for j in 0..k {
                m.data_mut()[c * r + c * k + j] = 1.0 / k as f64;
            }
        }
        m
    }

    pub fn batch(&self, data: &LabeledDataset) -> Tensor {
        data.batch(&self.items())
    }
}

/// Mixes a run seed and an episode index into an independent seed.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_episode(data: &LabeledDataset, shape: EpisodeShape, rng: &mut ChaCha8Rng) -> Episode {
    let roster: Vec<usize> = index::sample(rng, data.num_classes(), shape.n_way)
        .into_iter()
        .map(|i| data.classes[i].id)
        .collect();
    let mut support = Vec::with_capacity(shape.n_support());
    let mut query = Vec::with_capacity(shape.n_queries());
    for &c in &roster {
        let picks =
            index::sample(rng, data.classes[c].len(), shape.k_shot + shape.n_query).into_vec();
        support.extend(picks[..shape.k_shot].iter().map(|&s| (c, s)));
        query.extend(picks[shape.k_shot..].iter().map(|&s| (c, s)));
    }
    Episode {
        shape,
        roster,
        support,
        query,
    }
}

/// Samples N classes, then K support and Q disjoint query samples per class.
pub fn sample_episode(data: &LabeledDataset, shape: EpisodeShape, seed: u64) -> Result<Episode> {
    shape.check(data)?;
    let mut rng = rng_stream(seed, 1);
    Ok(draw_episode(data, shape, &mut rng))
}

/// Frozen-extractor features of every base sample, with per-class
/// prototypes precomputed.
#[derive(Clone, Debug)]
pub struct BaseFeatureBank {
    /// `[n_c, D]` per class.
    pub features: Vec<Tensor>,
    /// Mean over the first `min(max_base_samples, n_c)` samples, `[n_classes, D]`.
    pub capped_prototypes: Tensor,
    /// Mean over the full class, `[n_classes, D]`.
    pub full_prototypes: Tensor,
}

fn mean_rows(t: &Tensor, rows: usize) -> Vec<f64> {
    let d = t.row_len();
    let mut m = vec![0.0; d];
    for i in 0..rows {
        m.iter_mut().zip(t.row(i)).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|a| *a /= rows as f64);
    m
}

impl BaseFeatureBank {
    pub fn build(model: &Model, data: &LabeledDataset, max_base_samples: usize) -> Result<Self> {
        if max_base_samples == 0 {
            return Err(Error::config("max_base_samples must be positive"));
        }
        let d = model.feature_dim();
        let mut features = Vec::with_capacity(data.num_classes());
        let mut capped = Vec::with_capacity(data.num_classes() * d);
        let mut full = Vec::with_capacity(data.num_classes() * d);
        for class in &data.classes {
            let items: Vec<(usize, usize)> = (0..class.len()).map(|s| (class.id, s)).collect();
            let mut feats = Vec::with_capacity(class.len() * d);
            // bounded batches keep memory flat for large classes
            for chunk in items.chunks(256) {
                feats.extend(model.embed(data.batch(chunk))?.into_data());
            }
            let f = Tensor::matrix(class.len(), d, feats)?;
            capped.extend(mean_rows(&f, class.len().min(max_base_samples)));
            full.extend(mean_rows(&f, class.len()));
            features.push(f);
        }
        let n = data.num_classes();
        Ok(BaseFeatureBank {
            features,
            capped_prototypes: Tensor::matrix(n, d, capped)?,
            full_prototypes: Tensor::matrix(n, d, full)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.capped_prototypes.shape()[1]
    }

    /// Prototype rows for the given class ids, in that order.
    pub fn prototypes(&self, ids: &[usize]) -> Tensor {
        gather_rows(&self.capped_prototypes, ids)
    }
}

pub fn gather_rows(t: &Tensor, ids: &[usize]) -> Tensor {
    let d = t.row_len();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(t.row(i));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = ids.len();
    Tensor::new(shape, data).expect("gathered rows")
}

/// A stage-2 task: pseudo-novel classes drawn from the base classes, with
/// the remaining base classes supplying the prototype matrix.
#[derive(Clone, Debug)]
pub struct Stage2Episode {
    /// Pseudo-novel support/query sampling.
    pub episode: Episode,
    /// Remaining base class ids, ascending.
    pub pseudo_base: Vec<usize>,
    /// `[n_p, D]`, row l = prototype of `pseudo_base[l]`.
    pub base_prototypes: Tensor,
    /// `[N_pn, D]`, full-class mean of each pseudo-novel class.
    pub ground_truth: Tensor,
    /// `[n_s + n_q, D]` frozen features in canonical order.
    pub features: Tensor,
}

pub fn sample_stage2_episode(
    data: &LabeledDataset,
    bank: &BaseFeatureBank,
    shape: EpisodeShape,
    seed: u64,
) -> Result<Stage2Episode> {
    if shape.n_way >= data.num_classes() {
        return Err(Error::config(format!(
            "stage 2 needs fewer pseudo-novel classes ({}) than base classes ({})",
            shape.n_way,
            data.num_classes()
        )));
    }
    if bank.num_classes() != data.num_classes() {
        return Err(Error::Contract(
            "feature bank does not match dataset".into(),
        ));
    }
    let episode = sample_episode(data, shape, seed)?;
    let mut pseudo_base: Vec<usize> = (0..data.num_classes())
        .filter(|c| !episode.roster.contains(c))
        .collect();
    pseudo_base.sort_unstable();
    let d = bank.dim();
    let mut feats = Vec::with_capacity(episode.n_samples() * d);
    for (c, s) in episode.items() {
        feats.extend_from_slice(bank.features[c].row(s));
    }
    Ok(Stage2Episode {
        base_prototypes: bank.prototypes(&pseudo_base),
        ground_truth: gather_rows(&bank.full_prototypes, &episode.roster),
        features: Tensor::matrix(episode.n_samples(), d, feats)?,
        pseudo_base,
        episode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassRecord, Split};
    use proptest::prelude::*;

    fn toy(classes: usize, per_class: usize) -> LabeledDataset {
        LabeledDataset {
            name: "toy".into(),
            split: Split::Base,
            sample_shape: vec![2],
            classes: (0..classes)
                .map(|c| {
                    ClassRecord::new(
                        c,
                        format!("c{c}"),
                        (0..per_class).map(|s| vec![c as f64, s as f64]).collect(),
                        None,
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn counts() {
        let d = toy(10, 20);
        let e = sample_episode(&d, EpisodeShape::new(5, 1, 5), 0).unwrap();
        assert_eq!(e.support.len(), 5);
        assert_eq!(e.query.len(), 25);
        let d = toy(100, 10);
        let e = sample_episode(&d, EpisodeShape::new(60, 5, 5), 0).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (300, 300));
    }

    #[test]
    fn same_seed_same_episode() {
        let d = toy(10, 20);
        let s = EpisodeShape::new(4, 2, 3);
        assert_eq!(
            sample_episode(&d, s, 9).unwrap(),
            sample_episode(&d, s, 9).unwrap()
        );
        assert_ne!(
            sample_episode(&d, s, 9).unwrap(),
            sample_episode(&d, s, 10).unwrap()
        );
    }

    #[test]
    fn insufficient_data_is_config_error() {
        let d = toy(3, 5);
        assert!(matches!(
            sample_episode(&d, EpisodeShape::new(4, 1, 1), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_episode(&d, EpisodeShape::new(2, 3, 3), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn canonical_order_and_labels() {
        let d = toy(6, 10);
        let e = sample_episode(&d, EpisodeShape::new(3, 2, 2), 4).unwrap();
        assert_eq!(e.support_labels(), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(e.query_labels(), vec![0, 0, 1, 1, 2, 2]);
        for (i, &(c, _)) in e.support.iter().enumerate() {
            assert_eq!(c, e.roster[i / 2]);
        }
        let m = e.support_mean_matrix();
        assert_eq!(m.shape(), &[3, 12]);
        assert_eq!(m.row(1)[2..4], [0.5, 0.5]);
    }

    #[test]
    fn class_frequency_is_near_uniform() {
        let d = toy(20, 12);
        let mut counts = [0usize; 20];
        for i in 0..10_000 {
            let e = sample_episode(&d, EpisodeShape::new(5, 1, 1), episode_seed(1, i)).unwrap();
            for c in e.roster {
                counts[c] += 1;
            }
        }
        let expected = 10_000.0 * 5.0 / 20.0;
        for c in counts {
            let ratio = c as f64 / expected;
            assert!(ratio > 0.2 && ratio < 5.0, "count {c}");
        }
    }

    proptest! {
        #[test]
        fn support_and_query_are_disjoint(seed in any::<u64>(), n in 1usize..6, k in 1usize..4, q in 1usize..4) {
            let d = toy(8, 8);
            let e = sample_episode(&d, EpisodeShape::new(n, k, q), seed).unwrap();
            for s in &e.support {
                prop_assert!(!e.query.contains(s));
            }
            let mut all = e.items();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), e.n_samples());
        }
    }
}
