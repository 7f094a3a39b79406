//! Straight-line reference implementations used as test oracles. Nothing
//! here calls library math; parameters are read from the store by name.
#![allow(dead_code)]

use eproto::data::{ClassRecord, DatasetSplits, LabeledDataset, Split};
use eproto::nets::{ExtractorKind, InputGeometry, Model, ModelConfig, ParamStore};
use eproto::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

const EPS: f64 = 1e-7;
const FLOOR: f64 = 1e-6;

fn p(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
        .to_vec()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = t.numel() / t.shape()[0];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn linear(x: &Mat, w: &[f64], b: Option<&[f64]>) -> Mat {
    let n_in = x[0].len();
    let n_out = w.len() / n_in;
    x.iter()
        .map(|row| {
            (0..n_out)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    for i in 0..n_in {
                        s += row[i] * w[i * n_out + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn batchnorm(x: &Mat, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>) -> Mat {
    let m = x.len() as f64;
    let c = x[0].len();
    let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
        Some((mu, v)) => (mu.to_vec(), v.to_vec()),
        None => {
            let mean: Vec<f64> = (0..c)
                .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / m)
                .collect();
            let var = (0..c)
                .map(|j| x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / m)
                .collect();
            (mean, var)
        }
    };
    x.iter()
        .map(|r| {
            (0..c)
                .map(|j| gamma[j] * (r[j] - mean[j]) / (var[j] + EPS).sqrt() + beta[j])
                .collect()
        })
        .collect()
}

fn bn_layer(store: &ParamStore, prefix: &str, x: &Mat, train: bool) -> Mat {
    let g = p(store, &format!("{prefix}/gamma"));
    let b = p(store, &format!("{prefix}/beta"));
    if train {
        batchnorm(x, &g, &b, None)
    } else {
        let mu = p(store, &format!("{prefix}/running_mean"));
        let v = p(store, &format!("{prefix}/running_var"));
        batchnorm(x, &g, &b, Some((&mu, &v)))
    }
}

pub fn relu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| r.iter().map(|v| v.max(0.0)).collect())
        .collect()
}

pub fn softplus(v: f64) -> f64 {
    (1.0 + v.exp()).ln()
}

/// MLP extractor with hidden layers `n_hidden`.
pub fn mlp_features(store: &ParamStore, n_hidden: usize, x: &Mat, train: bool) -> Mat {
    let mut h = x.clone();
    for i in 0..n_hidden {
        h = linear(&h, &p(store, &format!("fphi/fc{i}/w")), None);
        h = bn_layer(store, &format!("fphi/fc{i}/bn"), &h, train);
        h = relu(&h);
    }
    linear(&h, &p(store, "fphi/out/w"), Some(&p(store, "fphi/out/b")))
}

/// Variance estimator on 1x1 maps: one variance per row of `protos`.
pub fn variances(store: &ParamStore, protos: &Mat, train: bool) -> Vec<f64> {
    let h = linear(protos, &p(store, "fv/block1/conv"), None);
    let h = relu(&bn_layer(store, "fv/block1/bn", &h, train));
    let h = linear(&h, &p(store, "fv/block2/conv"), None);
    let h = bn_layer(store, "fv/block2/bn", &h, train);
    h.iter().map(|r| softplus(r[0]) + FLOOR).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `rel[k][d] = ||f_k - f_d||^2`.
pub fn relative(f: &Mat) -> Mat {
    f.iter()
        .map(|a| f.iter().map(|b| sq_dist(a, b)).collect())
        .collect()
}

/// Mean of rows `[c*k, (c+1)*k)` for each class.
pub fn class_means(f: &Mat, n: usize, k: usize) -> Mat {
    (0..n)
        .map(|c| {
            let d = f[0].len();
            let mut m = vec![0.0; d];
            for j in 0..k {
                for t in 0..d {
                    m[t] += f[c * k + j][t];
                }
            }
            m.iter().map(|v| v / k as f64).collect()
        })
        .collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub struct Stage1Oracle {
    pub loss: f64,
    pub log_abs: Mat,
    pub log_rel: Option<Mat>,
    pub predictions: Vec<usize>,
}

/// Stage-1 objective and predictions for one episode whose rows are
/// support (class-major, `k` each) followed by queries (`q` each).
#[allow(clippy::too_many_arguments)]
pub fn stage1(
    store: &ParamStore,
    n_hidden: usize,
    x: &Mat,
    n: usize,
    k: usize,
    q: usize,
    use_v: bool,
    use_r: bool,
    lambda_rho: f64,
    train: bool,
) -> Stage1Oracle {
    let f = mlp_features(store, n_hidden, x, train);
    let protos = class_means(&f, n, k);
    let sigma2 = if use_v {
        variances(store, &protos, train)
    } else {
        vec![1.0; n]
    };
    let rel = relative(&f);
    let rel_protos = class_means(&rel, n, k);
    let s = n * k;
    let mut loss_abs = 0.0;
    let mut loss_rel = 0.0;
    let mut log_abs = Vec::new();
    let mut log_rel = Vec::new();
    let mut predictions = Vec::new();
    for i in 0..n * q {
        let y = i / q;
        let qa = &f[s + i];
        let la = log_softmax(
            &(0..n)
                .map(|c| -sq_dist(qa, &protos[c]) / sigma2[c])
                .collect::<Vec<_>>(),
        );
        let lr = log_softmax(
            &(0..n)
                .map(|c| -sq_dist(&rel[s + i], &rel_protos[c]))
                .collect::<Vec<_>>(),
        );
        loss_abs -= la[y];
        loss_rel += lr[y];
        let scores: Vec<f64> = (0..n)
            .map(|c| {
                if use_r && lambda_rho > 0.0 {
                    -la[c] - lambda_rho * lr[c]
                } else {
                    -la[c]
                }
            })
            .collect();
        let mut best = 0;
        for c in 1..n {
            if scores[c] < scores[best] {
                best = c;
            }
        }
        predictions.push(best);
        log_abs.push(la);
        log_rel.push(lr);
    }
    let m = (n * q) as f64;
    let mut loss = loss_abs / m;
    if use_r {
        loss -= lambda_rho * loss_rel / m;
    }
    Stage1Oracle {
        loss,
        log_abs,
        log_rel: use_r.then_some(log_rel),
        predictions,
    }
}

/// f_T11 with hidden layers `n_hidden`.
pub fn transformer_shift(store: &ParamStore, n_hidden: usize, protos: &Mat, train: bool) -> Mat {
    let mut h = protos.clone();
    for i in 0..n_hidden {
        h = linear(&h, &p(store, &format!("ft11/fc{i}/w")), None);
        h = bn_layer(store, &format!("ft11/fc{i}/bn"), &h, train);
        h = relu(&h);
    }
    linear(&h, &p(store, "ft11/out/w"), Some(&p(store, "ft11/out/b")))
}

/// `p W1 + f_T11(p) + thr(softmax(-||P_r - p||^2)) P_r W2` per row.
pub fn transform(
    store: &ParamStore,
    n_hidden: usize,
    protos: &Mat,
    base: &Mat,
    t_h: f64,
    train: bool,
) -> Mat {
    let w1 = p(store, "ft/W1");
    let w2 = p(store, "ft/W2");
    let first = linear(protos, &w1, None);
    let shift = transformer_shift(store, n_hidden, protos, train);
    let d = protos[0].len();
    protos
        .iter()
        .enumerate()
        .map(|(c, pc)| {
            let att = log_softmax(&base.iter().map(|b| -sq_dist(b, pc)).collect::<Vec<_>>());
            let mut mix = vec![0.0; d];
            for (l, b) in base.iter().enumerate() {
                let w = att[l].exp();
                if w > t_h {
                    for t in 0..d {
                        mix[t] += w * b[t];
                    }
                }
            }
            let second = linear(&vec![mix], &w2, None).remove(0);
            (0..d)
                .map(|t| first[c][t] + shift[c][t] + second[t])
                .collect()
        })
        .collect()
}

/// Stage-2 objective on frozen features: support then query rows.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    store: &ParamStore,
    n_hidden: usize,
    features: &Mat,
    n: usize,
    k: usize,
    q: usize,
    base: &Mat,
    ground_truth: &Mat,
    use_v: bool,
    t_h: f64,
    lambda_r: f64,
) -> f64 {
    let means = class_means(features, n, k);
    let protos = transform(store, n_hidden, &means, base, t_h, true);
    let sigma2 = if use_v {
        variances(store, &means, false)
    } else {
        vec![1.0; n]
    };
    let s = n * k;
    let mut nll = 0.0;
    for i in 0..n * q {
        let lp = log_softmax(
            &(0..n)
                .map(|c| -sq_dist(&features[s + i], &protos[c]) / sigma2[c])
                .collect::<Vec<_>>(),
        );
        nll -= lp[i / q];
    }
    let reg: f64 = (0..n)
        .map(|c| sq_dist(&protos[c], &ground_truth[c]))
        .sum::<f64>()
        / n as f64;
    nll / (n * q) as f64 + lambda_r * reg
}

/// Random vector dataset with one split copied to all three.
pub fn random_dataset(n_classes: usize, per_class: usize, dim: usize, seed: u64) -> DatasetSplits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |s: Split| LabeledDataset {
        name: "random".into(),
        split: s,
        sample_shape: vec![dim],
        classes: (0..n_classes)
            .map(|c| {
                let centre: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let samples = (0..per_class)
                    .map(|_| {
                        centre
                            .iter()
                            .map(|m| m + rng.random_range(-0.5..0.5))
                            .collect()
                    })
                    .collect();
                ClassRecord::new(c, format!("c{c}"), samples, None)
            })
            .collect(),
    };
    DatasetSplits {
        base: split(Split::Base),
        validation: split(Split::Validation),
        novel: split(Split::Novel),
    }
}

/// MLP model for `dim`-dimensional inputs whose every parameter (including
/// running statistics and the zero-initialized ones) is randomized.
pub fn random_model(dim: usize, hidden: Vec<usize>, out: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        extractor: ExtractorKind::Mlp,
        mlp_hidden: hidden,
        mlp_out: out,
        transformer_hidden: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(&cfg, InputGeometry::Vector { dim }, &mut rng).unwrap();
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        let t = model.params.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = if name.ends_with("running_var") || name.ends_with("gamma") {
                rng.random_range(0.5..1.5)
            } else if name.starts_with("ft/") {
                *v + rng.random_range(-0.2..0.2)
            } else {
                *v * 0.8 + rng.random_range(-0.3..0.3)
            };
        }
    }
    model
}

pub fn rows(t: &Tensor) -> Mat {
    to_mat(t)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}
