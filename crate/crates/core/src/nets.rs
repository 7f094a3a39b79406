//! The three parameterized networks: the feature extractor, the per-class
//! variance estimator and the prototype-shift MLP.
//!
//! Parameters live in a [`ParamStore`] keyed by namespaced names (`fphi/*`,
//! `fv/*`, `ft11/*`, `ft/*`). A [`Graph`] binds them onto a [`Tape`] lazily,
//! as trainable leaves or as constants depending on which namespaces are
//! being optimized.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, BatchStats, Tape, Tensor, Var};

/// Added to the softplus output of the variance estimator.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Weight on the previous running statistic in batchnorm updates.
pub const BN_MOMENTUM: f64 = 0.9;

pub const FEATURE_CHANNELS: usize = 64;
const VARIANCE_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Trainable parameter names under any of the given namespace prefixes.
    pub fn trainable_names(&self, prefixes: &[&str]) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, p)| p.trainable && prefixes.iter().any(|pre| n.starts_with(pre)))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, p)| (n.as_str(), &p.value))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.records())
    }

    /// Overwrites values from a checkpoint. Every record must name a known
    /// parameter of the same shape; names missing from the file keep their
    /// current value unless `require_all` is set.
    pub fn load(&mut self, path: &Path, require_all: bool) -> Result<()> {
        let records = read_checkpoint(path)?;
        self.assign(records, require_all)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn assign(&mut self, records: Vec<(String, Tensor)>, require_all: bool) -> Result<()> {
        let mut seen = 0;
        for (name, t) in records {
            let Some(slot) = self.params.get_mut(&name) else {
                if name.starts_with("adam/") {
                    continue;
                }
                return Err(Error::Data(format!(
                    "checkpoint has unknown parameter `{name}`"
                )));
            };
            if slot.value.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    slot.value.shape(),
                    t.shape()
                )));
            }
            slot.value = t;
            seen += 1;
        }
        if require_all && seen != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint covers {seen} of {} parameters",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Folds observed batch statistics into the running averages of the
    /// batchnorm layer at `prefix`.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats) -> Result<()> {
        for (key, observed) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}/{key}");
            let t = self
                .get_mut(&name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            for (r, o) in t.data_mut().iter_mut().zip(observed) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * o;
            }
        }
        Ok(())
    }
}

/// A tape plus the parameter bindings of one forward pass.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    trainable_prefixes: Vec<String>,
    bound: HashMap<String, Var>,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'p> Graph<'p> {
    /// Parameters whose names start with one of `trainable_prefixes` (and
    /// that are marked trainable in the store) become differentiable leaves;
    /// everything else is bound as a constant.
    pub fn new(store: &'p ParamStore, trainable_prefixes: &[&str]) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            trainable_prefixes: trainable_prefixes.iter().map(|s| s.to_string()).collect(),
            bound: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.require(name)?.clone();
        let trainable = self.store.is_trainable(name)
            && self
                .trainable_prefixes
                .iter()
                .any(|p| name.starts_with(p.as_str()));
        let var = if trainable {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Batchnorm over all but the last axis using the layer at `prefix`.
    /// In training mode batch statistics are used and recorded.
    pub fn batchnorm(&mut self, x: Var, prefix: &str, train: bool) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}/gamma"))?;
        let beta = self.param(&format!("{prefix}/beta"))?;
        if train {
            let (y, stats) = self.tape.batchnorm_train(x, gamma, beta)?;
            self.bn_stats.push((prefix.to_string(), stats));
            Ok(y)
        } else {
            let mean = self.store.require(&format!("{prefix}/running_mean"))?;
            let var = self.store.require(&format!("{prefix}/running_var"))?;
            self.tape
                .batchnorm_eval(x, gamma, beta, mean.data(), var.data())
        }
    }

    /// `x @ w (+ b)` for `x: [B, in]`.
    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}/w"))?;
        let y = self.tape.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{prefix}/b"))?;
            self.tape.add_bias(y, b)
        } else {
            Ok(y)
        }
    }

    /// Bound trainable parameters in name order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let mut v: Vec<_> = self
            .bound
            .iter()
            .filter(|(_, var)| self.tape.requires_grad(**var))
            .map(|(n, var)| (n.clone(), *var))
            .collect();
        v.sort();
        v
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn insert_bn(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}/gamma"), Tensor::filled(&[c], 1.0), true);
    store.insert(format!("{prefix}/beta"), Tensor::zeros(&[c]), true);
    store.insert(format!("{prefix}/running_mean"), Tensor::zeros(&[c]), false);
    store.insert(
        format!("{prefix}/running_var"),
        Tensor::filled(&[c], 1.0),
        false,
    );
}

/// Input geometry of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputGeometry {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Vector {
        dim: usize,
    },
}

impl InputGeometry {
    pub fn from_sample_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [dim] => Ok(InputGeometry::Vector { dim }),
            [height, width, channels] => Ok(InputGeometry::Image {
                height,
                width,
                channels,
            }),
            _ => Err(Error::config(format!("unsupported sample shape {shape:?}"))),
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputGeometry::Image {
                height,
                width,
                channels,
            } => vec![height, width, channels],
            InputGeometry::Vector { dim } => vec![dim],
        }
    }
}

/// The embedding network f_phi.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureExtractor {
    /// Four blocks of 3x3 SAME conv (64 filters), batchnorm, relu, 2x2 max-pool.
    Conv {
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Linear+batchnorm+relu hidden layers, then a linear output layer.
    Mlp {
        in_dim: usize,
        hidden: Vec<usize>,
        out_dim: usize,
    },
}

pub const CONV_BLOCKS: usize = 4;

impl FeatureExtractor {
    pub fn conv(height: usize, width: usize, channels: usize) -> Result<Self> {
        let min = 1 << CONV_BLOCKS;
        if height < min || width < min {
            return Err(Error::config(format!(
                "conv extractor needs inputs of at least {min}x{min}, got {height}x{width}"
            )));
        }
        Ok(FeatureExtractor::Conv {
            height,
            width,
            channels,
        })
    }

    /// Unflattened output map geometry `(h, w, c)`.
    pub fn output_map(&self) -> (usize, usize, usize) {
        match self {
            FeatureExtractor::Conv { height, width, .. } => (
                height >> CONV_BLOCKS,
                width >> CONV_BLOCKS,
                FEATURE_CHANNELS,
            ),
            FeatureExtractor::Mlp { out_dim, .. } => (1, 1, *out_dim),
        }
    }

    /// Flattened feature dimension D.
    pub fn feature_dim(&self) -> usize {
        let (h, w, c) = self.output_map();
        h * w * c
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            FeatureExtractor::Conv {
                height,
                width,
                channels,
            } => vec![*height, *width, *channels],
            FeatureExtractor::Mlp { in_dim, .. } => vec![*in_dim],
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        match self {
            FeatureExtractor::Conv { channels, .. } => {
                let mut cin = *channels;
                for b in 0..CONV_BLOCKS {
                    let shape = [3, 3, cin, FEATURE_CHANNELS];
                    store.insert(
                        format!("fphi/block{b}/conv"),
                        he_normal(rng, &shape, 9 * cin),
                        true,
                    );
                    insert_bn(store, &format!("fphi/block{b}/bn"), FEATURE_CHANNELS);
                    cin = FEATURE_CHANNELS;
                }
            }
            FeatureExtractor::Mlp {
                in_dim,
                hidden,
                out_dim,
            } => {
                let mut fan_in = *in_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    store.insert(
                        format!("fphi/fc{i}/w"),
                        he_normal(rng, &[fan_in, h], fan_in),
                        true,
                    );
                    insert_bn(store, &format!("fphi/fc{i}/bn"), h);
                    fan_in = h;
                }
                store.insert(
                    "fphi/out/w",
                    he_normal(rng, &[fan_in, *out_dim], fan_in),
                    true,
                );
                store.insert("fphi/out/b", Tensor::zeros(&[*out_dim]), true);
            }
        }
    }

    /// `batch: [B, ...input]` to feature maps `[B, h, w, c]`.
    pub fn forward(&self, g: &mut Graph, batch: Var, train: bool) -> Result<Var> {
        let shape = g.tape.shape(batch).to_vec();
        let input = self.input_shape();
        if shape.len() != input.len() + 1 || shape[1..] != input[..] {
            return Err(Error::config(format!(
                "extractor expects samples of shape {input:?}, got batch {shape:?}"
            )));
        }
        let b = shape[0];
        match self {
            FeatureExtractor::Conv { .. } => {
                let mut x = batch;
                for blk in 0..CONV_BLOCKS {
                    let w = g.param(&format!("fphi/block{blk}/conv"))?;
                    x = g.tape.conv2d(x, w)?;
                    x = g.batchnorm(x, &format!("fphi/block{blk}/bn"), train)?;
                    x = g.tape.relu(x)?;
                    x = g.tape.maxpool2x2(x)?;
                }
                Ok(x)
            }
            FeatureExtractor::Mlp {
                hidden, out_dim, ..
            } => {
                let mut x = batch;
                for i in 0..hidden.len() {
                    x = g.linear(x, &format!("fphi/fc{i}"), false)?;
                    x = g.batchnorm(x, &format!("fphi/fc{i}/bn"), train)?;
                    x = g.tape.relu(x)?;
                }
                let y = g.linear(x, "fphi/out", true)?;
                g.tape.reshape(y, &[b, 1, 1, *out_dim])
            }
        }
    }
}

/// f_V: class mean feature map to a positive scalar variance.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceEstimator {
    pub in_channels: usize,
    /// 2x2 max-pool on the second block, before the softplus.
    pub pool: bool,
}

impl VarianceEstimator {
    /// Pooling is enabled whenever the map has spatial extent.
    pub fn for_map(h: usize, w: usize, c: usize) -> Self {
        VarianceEstimator {
            in_channels: c,
            pool: h >= 2 && w >= 2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.in_channels;
        store.insert(
            "fv/block1/conv",
            he_normal(rng, &[1, 1, c, VARIANCE_HIDDEN], c),
            true,
        );
        insert_bn(store, "fv/block1/bn", VARIANCE_HIDDEN);
        store.insert(
            "fv/block2/conv",
            he_normal(rng, &[1, 1, VARIANCE_HIDDEN, 1], VARIANCE_HIDDEN),
            true,
        );
        insert_bn(store, "fv/block2/bn", 1);
        // start from one shared variance; class-specific spread is learned
        store.insert("fv/block2/bn/gamma", Tensor::zeros(&[1]), true);
    }

    /// `maps: [N, h, w, c]` (one mean map per class) to variances `[N]`.
    pub fn forward(&self, g: &mut Graph, maps: Var, train: bool) -> Result<Var> {
        let shape = g.tape.shape(maps).to_vec();
        if shape.len() != 4 || shape[3] != self.in_channels {
            return Err(Error::config(format!(
                "variance estimator expects [N, h, w, {}], got {shape:?}",
                self.in_channels
            )));
        }
        let n = shape[0];
        let w1 = g.param("fv/block1/conv")?;
        let mut x = g.tape.conv2d(maps, w1)?;
        x = g.batchnorm(x, "fv/block1/bn", train)?;
        x = g.tape.relu(x)?;
        let w2 = g.param("fv/block2/conv")?;
        x = g.tape.conv2d(x, w2)?;
        x = g.batchnorm(x, "fv/block2/bn", train)?;
        if self.pool {
            x = g.tape.maxpool2x2(x)?;
        }
        x = g.tape.softplus(x)?;
        x = g.tape.mean_spatial(x)?;
        x = g.tape.reshape(x, &[n])?;
        g.tape.add_scalar(x, VARIANCE_FLOOR)
    }
}

/// f_T11: maps a flattened prototype to an unconstrained shift of the same
/// dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerMlp {
    pub dim: usize,
    pub hidden: Vec<usize>,
}

impl TransformerMlp {
    /// Hidden widths `2D` and `3D/2`, e.g. 128, 96 for D = 64.
    pub fn for_dim(dim: usize) -> Self {
        TransformerMlp {
            dim,
            hidden: vec![2 * dim, (3 * dim) / 2],
        }
    }

    /// The output layer starts at zero so the initial shift is zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let mut fan_in = self.dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            store.insert(
                format!("ft11/fc{i}/w"),
                he_normal(rng, &[fan_in, h], fan_in),
                true,
            );
            insert_bn(store, &format!("ft11/fc{i}/bn"), h);
            fan_in = h;
        }
        store.insert("ft11/out/w", Tensor::zeros(&[fan_in, self.dim]), true);
        store.insert("ft11/out/b", Tensor::zeros(&[self.dim]), true);
    }

    /// `p: [N, D]` to shifts `[N, D]`.
    pub fn forward(&self, g: &mut Graph, p: Var, train: bool) -> Result<Var> {
        let shape = g.tape.shape(p);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::config(format!(
                "transformer MLP expects [N, {}], got {shape:?}",
                self.dim
            )));
        }
        let mut x = p;
        for i in 0..self.hidden.len() {
            x = g.linear(x, &format!("ft11/fc{i}"), false)?;
            x = g.batchnorm(x, &format!("ft11/fc{i}/bn"), train)?;
            x = g.tape.relu(x)?;
        }
        g.linear(x, "ft11/out", true)
    }
}

/// Which feature extractor to build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Conv for image samples, MLP for vector samples.
    #[default]
    Auto,
    Conv,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub extractor: ExtractorKind,
    /// Hidden widths of the MLP extractor.
    pub mlp_hidden: Vec<usize>,
    /// Output dimension of the MLP extractor.
    pub mlp_out: usize,
    /// Hidden widths of f_T11; empty means `[2D, 3D/2]`.
    pub transformer_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorKind::Auto,
            mlp_hidden: vec![64, 64],
            mlp_out: 64,
            transformer_hidden: Vec::new(),
        }
    }
}

/// All networks plus their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub variance: VarianceEstimator,
    pub transformer: TransformerMlp,
    pub params: ParamStore,
}

impl Model {
    pub fn new(
        config: &ModelConfig,
        geometry: InputGeometry,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let extractor = match (config.extractor, geometry) {
            (
                ExtractorKind::Auto | ExtractorKind::Conv,
                InputGeometry::Image {
                    height,
                    width,
                    channels,
                },
            ) => FeatureExtractor::conv(height, width, channels)?,
            (ExtractorKind::Auto | ExtractorKind::Mlp, InputGeometry::Vector { dim }) => {
                FeatureExtractor::Mlp {
                    in_dim: dim,
                    hidden: config.mlp_hidden.clone(),
                    out_dim: config.mlp_out,
                }
            }
            (ExtractorKind::Mlp, InputGeometry::Image { .. }) => {
                return Err(Error::config("the MLP extractor needs vector samples"))
            }
            (ExtractorKind::Conv, InputGeometry::Vector { .. }) => {
                return Err(Error::config("the conv extractor needs image samples"))
            }
        };
        let (h, w, c) = extractor.output_map();
        let variance = VarianceEstimator::for_map(h, w, c);
        let dim = extractor.feature_dim();
        let transformer = if config.transformer_hidden.is_empty() {
            TransformerMlp::for_dim(dim)
        } else {
            TransformerMlp {
                dim,
                hidden: config.transformer_hidden.clone(),
            }
        };
        let mut params = ParamStore::new();
        extractor.init(&mut params, rng);
        variance.init(&mut params, rng);
        transformer.init(&mut params, rng);
        params.insert("ft/W1", Tensor::identity(dim), true);
        params.insert("ft/W2", Tensor::zeros(&[dim, dim]), true);
        Ok(Model {
            extractor,
            variance,
            transformer,
            params,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    /// Eval-mode flattened features `[B, D]` for a batch of samples, off-tape.
    pub fn embed(&self, batch: Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, &[]);
        let x = g.constant(batch);
        let maps = self.extractor.forward(&mut g, x, false)?;
        let b = g.tape.shape(maps)[0];
        let flat = g.tape.reshape(maps, &[b, self.feature_dim()])?;
        Ok(g.tape.value(flat).clone())
    }
}

/// Deterministic per-purpose RNG streams derived from one seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
