//! Central finite differences against the tape's reverse-mode gradients.
//!
//! Each check draws a random direction `d` per input and compares, for every
//! output element `y_j`, the reverse-mode `⟨∇y_j, d⟩` with
//! `(y_j(x + h d) − y_j(x − h d)) / 2h`, scoring `|a − n| / max(1, |a|)`.
//! Inputs are drawn away from kinks.

use ctcaps::capsnet::{capsule_layer_forward, dynamic_routing, CapsuleLayerSpec, ClassWeights};
use ctcaps::numerics::{Graph, Mode, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const INSTANCES: usize = 20;

pub type Op = dyn Fn(&mut Graph, &[Var]) -> Var;
type Make = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct Case {
    pub name: String,
    seed: u64,
    make: Box<Make>,
    op: Box<Op>,
}

fn case(name: impl Into<String>, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static, op: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> Case {
    Case { name: name.into(), seed, make: Box::new(make), op: Box::new(op) }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f32, _>(StandardNormal)).unwrap()
}

/// Values with |x| ≥ `gap`, so ReLU-like kinks stay out of reach of the step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.gen_range(gap..1.5);
        if rng.gen() { m } else { -m }
    })
    .unwrap()
}

fn forward(op: &Op, inputs: &[Tensor]) -> Vec<f32> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = op(&mut g, &vars);
    g.value(y).data().to_vec()
}

/// Checks every output element against every input of one instance;
/// returns the worst score.
fn check_instance(op: &Op, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = op(&mut g, &vars);
    let outputs = g.value(y).len();

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let d: Vec<f32> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let step = |sign: f32| {
            Tensor::new(x.shape(), x.data().iter().zip(&d).map(|(&a, &b)| a + sign * H * b).collect()).unwrap()
        };
        let (plus, minus) = (step(1.0), step(-1.0));
        // the step actually taken after rounding to f32
        let taken: Vec<f64> = plus.data().iter().zip(minus.data()).map(|(&p, &m)| p as f64 - m as f64).collect();
        let with = |t: Tensor| {
            let mut v = inputs.to_vec();
            v[i] = t;
            forward(op, &v)
        };
        let (y_plus, y_minus) = (with(plus), with(minus));

        for j in 0..outputs {
            let mut seed = vec![0.0f32; outputs];
            seed[j] = 1.0;
            g.zero_grad();
            g.backward_seeded(y, &seed).unwrap();
            let grad = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(x.shape()));
            let analytic: f64 =
                grad.data().iter().zip(&taken).map(|(&gr, &t)| gr as f64 * t).sum::<f64>() / (2.0 * H as f64);
            let numeric = (y_plus[j] as f64 - y_minus[j] as f64) / (2.0 * H as f64);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
    }
    worst
}

impl Case {
    /// Worst score over `INSTANCES` random instances.
    pub fn worst(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..INSTANCES)
            .map(|_| {
                let inputs = (self.make)(&mut rng);
                check_instance(&*self.op, &inputs, &mut rng)
            })
            .fold(0.0, f64::max)
    }
}

/// Norms in (0, 1) at least 0.02 from both margins.
fn norms_off_margins(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let x: f32 = rng.gen_range(0.0..1.0);
        if (x - 0.1).abs() > 0.02 && (x - 0.9).abs() > 0.02 {
            break x;
        }
    })
    .unwrap()
}

/// Distinct values 0.1 apart, so every pooling window has a clear winner.
fn untied(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.1 - n as f32 * 0.05).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    Tensor::new(shape, vals).unwrap()
}

/// Every differentiable op, plus a few compositions.
pub fn cases() -> Vec<Case> {
    let two = |rng: &mut ChaCha8Rng| vec![normal(rng, &[3, 4], 1.0), normal(rng, &[3, 4], 1.0)];
    let mut out = vec![
        case("add", 1, two, |g, v| g.add(v[0], v[1]).unwrap()),
        case("sub", 2, two, |g, v| g.sub(v[0], v[1]).unwrap()),
        case("mul", 3, two, |g, v| g.mul(v[0], v[1]).unwrap()),
        case("scale", 4, |rng| vec![normal(rng, &[5], 1.0)], |g, v| g.scale(v[0], -1.7).unwrap()),
        case("relu", 5, |rng| vec![away_from_zero(rng, &[4, 5], 0.05)], |g, v| g.relu(v[0]).unwrap()),
        case("sum", 6, |rng| vec![normal(rng, &[2, 3, 4], 1.0)], |g, v| g.sum(v[0]).unwrap()),
        case("weighted_sum", 7, |rng| vec![normal(rng, &[6], 1.0)], |g, v| {
            g.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap()
        }),
        case("reshape", 8, |rng| vec![normal(rng, &[2, 6], 1.0)], |g, v| {
            let r = g.reshape(v[0], &[3, 4]).unwrap();
            g.mul(r, r).unwrap()
        }),
    ];
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        out.push(case(
            format!("conv2d stride {stride} padding {padding}"),
            10 + stride as u64 * 3 + padding as u64,
            |rng| vec![normal(rng, &[2, 2, 5, 5], 0.5), normal(rng, &[3, 2, 3, 3], 0.5), normal(rng, &[3], 0.5)],
            move |g, v| g.conv2d(v[0], v[1], v[2], stride, padding).unwrap(),
        ));
    }
    out.extend([
        case("maxpool2d", 20, |rng| vec![untied(rng, &[2, 2, 4, 4])], |g, v| g.maxpool2d(v[0], 2, 2).unwrap().out),
        case(
            "batchnorm (train)",
            30,
            |rng| vec![normal(rng, &[3, 2, 3, 3], 1.0), normal(rng, &[2], 1.0), normal(rng, &[2], 1.0)],
            |g, v| {
                let mut stats = RunningStats::default();
                g.batchnorm(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap()
            },
        ),
        case(
            "batchnorm (eval)",
            31,
            |rng| vec![normal(rng, &[2, 2, 3, 3], 1.0), normal(rng, &[2], 1.0), normal(rng, &[2], 1.0)],
            |g, v| {
                let mut stats = RunningStats {
                    mean: Some(Tensor::new(&[2], vec![0.3, -0.2]).unwrap()),
                    var: Some(Tensor::new(&[2], vec![1.5, 0.7]).unwrap()),
                    ..RunningStats::default()
                };
                g.batchnorm(v[0], v[1], v[2], &mut stats, Mode::Eval).unwrap()
            },
        ),
        case(
            "dense",
            40,
            |rng| vec![normal(rng, &[3, 5], 1.0), normal(rng, &[5, 4], 0.5), normal(rng, &[4], 0.5)],
            |g, v| g.dense(v[0], v[1], v[2]).unwrap(),
        ),
        case("softmax axis 0", 41, |rng| vec![normal(rng, &[3, 4], 2.0)], |g, v| g.softmax(v[0], 0).unwrap()),
        case("softmax axis 1", 42, |rng| vec![normal(rng, &[3, 4], 2.0)], |g, v| g.softmax(v[0], 1).unwrap()),
        case("softmax_cross_entropy", 43, |rng| vec![normal(rng, &[4, 3], 2.0)], |g, v| {
            g.softmax_cross_entropy(v[0], &[2, 0, 1, 1]).unwrap()
        }),
        case("squash", 50, |rng| vec![normal(rng, &[5, 8], 1.0)], |g, v| g.squash(v[0]).unwrap()),
        case("squash (small vectors)", 51, |rng| vec![normal(rng, &[5, 4], 0.1)], |g, v| g.squash(v[0]).unwrap()),
        case("capsule_norm", 52, |rng| vec![normal(rng, &[2, 3, 6], 1.0)], |g, v| g.capsule_norm(v[0]).unwrap()),
        case(
            "routing_vote",
            53,
            |rng| vec![normal(rng, &[2, 3, 4], 1.0), normal(rng, &[2, 3, 4, 5], 1.0)],
            |g, v| g.routing_vote(v[0], v[1]).unwrap(),
        ),
        case(
            "routing_agreement",
            54,
            |rng| vec![normal(rng, &[2, 3, 4, 5], 1.0), normal(rng, &[2, 4, 5], 1.0)],
            |g, v| g.routing_agreement(v[0], v[1]).unwrap(),
        ),
        case(
            "capsule_predictions",
            55,
            |rng| vec![normal(rng, &[2, 6, 4], 1.0), normal(rng, &[3, 2, 4, 5], 0.5)],
            |g, v| g.capsule_predictions(v[0], v[1]).unwrap(),
        ),
        case("primary_capsules", 56, |rng| vec![normal(rng, &[2, 6, 2, 3], 1.0)], |g, v| {
            let c = g.primary_capsules(v[0], 3).unwrap();
            g.squash(c).unwrap()
        }),
        case("dynamic_routing r=1", 61, |rng| vec![normal(rng, &[2, 5, 3, 4], 0.7)], |g, v| {
            dynamic_routing(g, v[0], 1).unwrap().output
        }),
        case("dynamic_routing r=3", 63, |rng| vec![normal(rng, &[2, 5, 3, 4], 0.7)], |g, v| {
            dynamic_routing(g, v[0], 3).unwrap().output
        }),
        case(
            "capsule layer (shared transforms)",
            64,
            |rng| vec![normal(rng, &[2, 6, 4], 0.5), normal(rng, &[2, 3, 4, 5], 0.5)],
            |g, v| capsule_layer_forward(g, v[0], &CapsuleLayerSpec::shared(2, 3, 4, 3, 5), v[1]).unwrap().output,
        ),
        case("margin_loss", 70, |rng| vec![norms_off_margins(rng, &[4, 2])], |g, v| {
            g.margin_loss(v[0], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap()
        }),
        case("weighted_class_loss", 71, |rng| vec![normal(rng, &[5], 1.0)], |g, v| {
            let cw = ClassWeights::new(4993, 18416).unwrap();
            g.weighted_class_loss(v[0], &[true, false, false, true, false], &cw).unwrap()
        }),
        case("margin loss through squash and norm", 72, |rng| vec![normal(rng, &[3, 2, 4], 0.4)], |g, v| {
            let s = g.squash(v[0]).unwrap();
            let n = g.capsule_norm(s).unwrap();
            g.margin_loss(n, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap()
        }),
    ]);
    out
}
