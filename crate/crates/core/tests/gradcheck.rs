//! Analytic gradients of every tape op against central finite differences.

use eproto::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Builds the graph on fresh leaves and reduces it to a scalar with fixed
/// random weights.
fn scalar_loss(
    inputs: &[Tensor],
    weights_seed: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &leaves);
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let weighted = tape.mul(out, w).unwrap();
    let loss = tape.sum(weighted).unwrap();
    (tape, loss, leaves)
}

fn max_rel_error(inputs: Vec<Tensor>, build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (tape, loss, leaves) = scalar_loss(&inputs, 7, build);
    let grads = tape.backward(loss).unwrap();
    let eval = |inputs: &[Tensor]| {
        let (tape, loss, _) = scalar_loss(inputs, 7, build);
        tape.value(loss).item().unwrap()
    };
    // central differences cannot resolve gradients below their own round-off
    let noise = 8.0 * f64::EPSILON * tape.value(loss).item().unwrap().abs().max(1.0) / H;
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let g = grads.get(*leaf).expect("every leaf gets a gradient");
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let analytic = g.data()[i];
            let err = ((analytic - numeric).abs() - noise).max(0.0);
            worst = worst.max(err / analytic.abs().max(numeric.abs()).max(1e-8));
        }
    }
    worst
}

fn assert_grad(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let err = max_rel_error(inputs, &build);
    assert!(err <= TOL, "{name}: relative error {err:e}");
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let pos = uniform(&mut r, &[3, 4], 0.5, 2.0);
    assert_grad("add", vec![a.clone(), b.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    assert_grad("sub", vec![a.clone(), b.clone()], |t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    assert_grad("mul", vec![a.clone(), b.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    assert_grad("div", vec![a, pos], |t, v| t.div(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_unary() {
    let mut r = rng();
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let pos = uniform(&mut r, &[3, 4], 0.5, 2.0);
    assert_grad("scale", vec![a.clone()], |t, v| {
        t.scale(v[0], -1.7).unwrap()
    });
    assert_grad("add_scalar", vec![a.clone()], |t, v| {
        t.add_scalar(v[0], 0.3).unwrap()
    });
    assert_grad("relu", vec![a.clone()], |t, v| t.relu(v[0]).unwrap());
    assert_grad("softplus", vec![a.clone()], |t, v| {
        t.softplus(v[0]).unwrap()
    });
    assert_grad("square", vec![a.clone()], |t, v| t.square(v[0]).unwrap());
    assert_grad("exp", vec![a], |t, v| t.exp(v[0]).unwrap());
    assert_grad("sqrt", vec![pos.clone()], |t, v| t.sqrt(v[0]).unwrap());
    assert_grad("log", vec![pos], |t, v| t.log(v[0]).unwrap());
}

#[test]
fn reductions() {
    let mut r = rng();
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    assert_grad("sum", vec![a.clone()], |t, v| t.sum(v[0]).unwrap());
    assert_grad("mean", vec![a.clone()], |t, v| t.mean(v[0]).unwrap());
    assert_grad("log_softmax_rows", vec![a.clone()], |t, v| {
        t.log_softmax_rows(v[0]).unwrap()
    });
    assert_grad("pick", vec![a], |t, v| t.pick(v[0], &[1, 0, 3]).unwrap());
}

#[test]
fn linear_algebra() {
    let mut r = rng();
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[4, 2], -2.0, 2.0);
    let bias = uniform(&mut r, &[4], -2.0, 2.0);
    let pos = uniform(&mut r, &[4], 0.5, 2.0);
    let c = uniform(&mut r, &[2, 4], -2.0, 2.0);
    assert_grad("matmul", vec![a.clone(), b], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    assert_grad("add_bias", vec![a.clone(), bias], |t, v| {
        t.add_bias(v[0], v[1]).unwrap()
    });
    assert_grad("div_cols", vec![a.clone(), pos], |t, v| {
        t.div_cols(v[0], v[1]).unwrap()
    });
    assert_grad("pairwise_sq_dist", vec![a.clone(), c.clone()], |t, v| {
        t.pairwise_sq_dist(v[0], v[1]).unwrap()
    });
    assert_grad("pairwise_sq_dist self", vec![a.clone()], |t, v| {
        t.pairwise_sq_dist(v[0], v[0]).unwrap()
    });
    assert_grad("concat", vec![a.clone(), c], |t, v| {
        t.concat(&[v[0], v[1]]).unwrap()
    });
    assert_grad("reshape", vec![a.clone()], |t, v| {
        t.reshape(v[0], &[2, 6]).unwrap()
    });
    assert_grad("select_rows", vec![a], |t, v| {
        t.select_rows(v[0], &[2, 0, 2]).unwrap()
    });
}

#[test]
fn convolution_and_pooling() {
    let mut r = rng();
    let x1 = uniform(&mut r, &[2, 3, 3, 2], -2.0, 2.0);
    let w1 = uniform(&mut r, &[1, 1, 2, 3], -2.0, 2.0);
    let x3 = uniform(&mut r, &[2, 4, 4, 2], -2.0, 2.0);
    let w3 = uniform(&mut r, &[3, 3, 2, 3], -2.0, 2.0);
    let xp = uniform(&mut r, &[2, 4, 5, 2], -2.0, 2.0);
    assert_grad("conv2d 1x1", vec![x1.clone(), w1], |t, v| {
        t.conv2d(v[0], v[1]).unwrap()
    });
    assert_grad("conv2d 3x3", vec![x3, w3], |t, v| {
        t.conv2d(v[0], v[1]).unwrap()
    });
    assert_grad("maxpool2x2", vec![xp], |t, v| t.maxpool2x2(v[0]).unwrap());
    assert_grad("mean_spatial", vec![x1], |t, v| {
        t.mean_spatial(v[0]).unwrap()
    });
}

#[test]
fn batchnorm() {
    let mut r = rng();
    let x2 = uniform(&mut r, &[5, 3], -2.0, 2.0);
    let x4 = uniform(&mut r, &[2, 2, 2, 3], -2.0, 2.0);
    let gamma = uniform(&mut r, &[3], 0.5, 2.0);
    let beta = uniform(&mut r, &[3], -2.0, 2.0);
    for x in [x2, x4] {
        assert_grad(
            "batchnorm_train",
            vec![x.clone(), gamma.clone(), beta.clone()],
            |t, v| t.batchnorm_train(v[0], v[1], v[2]).unwrap().0,
        );
        assert_grad(
            "batchnorm_eval",
            vec![x, gamma.clone(), beta.clone()],
            |t, v| {
                t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.3, 0.2], &[0.7, 1.3, 0.4])
                    .unwrap()
            },
        );
    }
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Softplus,
    Square,
    Exp,
    Relu,
    Scale,
    MulInput,
    AddInput,
    LogSoftmax,
    Matmul,
    BatchNorm,
}

/// One op of a random chain, followed by a constant rescale that keeps
/// values in a moderate range.
fn apply(t: &mut Tape, step: Step, x: Var, input: Var, square: Var, gamma: Var, beta: Var) -> Var {
    let (y, rescale) = match step {
        Step::Softplus => (t.softplus(x), 1.0),
        Step::Square => (t.square(x), 0.5),
        Step::Exp => {
            let s = t.scale(x, 0.1).unwrap();
            (t.exp(s), 1.0)
        }
        Step::Relu => (t.relu(x), 1.0),
        Step::Scale => (t.scale(x, 0.5), 1.0),
        Step::MulInput => (t.mul(x, input), 0.5),
        Step::AddInput => (t.add(x, input), 0.5),
        Step::LogSoftmax => (t.log_softmax_rows(x), 0.5),
        Step::Matmul => (t.matmul(x, square), 0.25),
        Step::BatchNorm => (t.batchnorm_train(x, gamma, beta).map(|(y, _)| y), 0.5),
    };
    t.scale(y.unwrap(), rescale).unwrap()
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Softplus),
        Just(Step::Square),
        Just(Step::Exp),
        Just(Step::Relu),
        Just(Step::Scale),
        Just(Step::MulInput),
        Just(Step::AddInput),
        Just(Step::LogSoftmax),
        Just(Step::Matmul),
        Just(Step::BatchNorm),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_graphs_match_finite_differences(steps in prop::collection::vec(step_strategy(), 1..6), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            uniform(&mut r, &[3, 4], -2.0, 2.0),
            uniform(&mut r, &[4, 4], -1.0, 1.0),
            uniform(&mut r, &[4], 0.5, 2.0),
            uniform(&mut r, &[4], -1.0, 1.0),
        ];
        let build = |t: &mut Tape, v: &[Var]| {
            let mut x = v[0];
            for &s in &steps {
                x = apply(t, s, x, v[0], v[1], v[2], v[3]);
            }
            x
        };
        let err = max_rel_error(inputs, &build);
        prop_assert!(err <= TOL, "steps {:?}: relative error {:e}", steps, err);
    }
}
