//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use autolr::autodiff::{Graph, NodeId, Tensor};
use autolr::controller::{gaussian_log_prob_node, ControllerPolicy, Mlp};
use autolr::observe::Observation;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors so gradients that are exactly or
/// nearly zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

// ---------------------------------------------------------------------------
// finite differences

type Build<'a> = dyn Fn(&mut Graph, &[NodeId]) -> NodeId + 'a;

/// Max relative error between backprop gradients and central differences of
/// the scalar produced by `build` with respect to every entry of `inputs`.
pub fn gradient_error(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone().with_grad()).unwrap()).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let out = build(&mut g, &ids);
        g.value(out)[0]
    };
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign (keeps clear of 0).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.values_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values spaced 0.05 apart in random order (no max-pool ties).
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduces any node to a scalar through a fixed random projection:
/// `mean(x * r)`. Exercises `Mul` and `Mean` as a side effect.
pub fn project(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(x).to_vec();
    let r = uniform(&mut rng(seed ^ 0xABCD), &shape, -1.0, 1.0);
    let r = g.constant(r).unwrap();
    let y = g.mul(x, r).unwrap();
    g.mean(y).unwrap()
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build<'static>>,
}

/// One randomized gradient-check case per autodiff op.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let r = &mut r;
    let case = |name, inputs, build: Box<Build<'static>>| OpCase { name, inputs, build };
    vec![
        case(
            "matmul",
            vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.matmul(x[0], x[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "add",
            vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.add(x[0], x[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "add_bias",
            vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.add(x[0], x[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "sub",
            vec![uniform(r, &[5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.sub(x[0], x[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "mul",
            vec![uniform(r, &[2, 2], -2.0, 2.0), uniform(r, &[2, 2], -2.0, 2.0)],
            Box::new(move |g, x| {
                let y = g.mul(x[0], x[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "relu",
            vec![away_from_zero(r, &[3, 3], 0.1, 1.0)],
            Box::new(move |g, x| {
                let y = g.relu(x[0]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "tanh",
            vec![uniform(r, &[6], -2.0, 2.0)],
            Box::new(move |g, x| {
                let y = g.tanh(x[0]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "conv2d_3x3",
            vec![uniform(r, &[2, 4, 3, 2], -1.0, 1.0), uniform(r, &[3, 3, 2, 3], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.conv2d_3x3(x[0], x[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "maxpool_2x2",
            vec![distinct(r, &[2, 5, 4, 2])],
            Box::new(move |g, x| {
                let y = g.maxpool_2x2(x[0]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "mean",
            vec![uniform(r, &[7], -1.0, 1.0)],
            Box::new(|g, x| g.mean(x[0]).unwrap()),
        ),
        case(
            "softmax_cross_entropy",
            vec![uniform(r, &[4, 3], -2.0, 2.0)],
            Box::new(|g, x| g.softmax_cross_entropy(x[0], &[0, 2, 1, 2]).unwrap()),
        ),
        case(
            "mul_scalar",
            vec![uniform(r, &[4], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.mul_scalar(x[0], -1.7).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "add_scalar",
            vec![uniform(r, &[4], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.add_scalar(x[0], 0.3).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "reshape",
            vec![uniform(r, &[2, 6], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.reshape(x[0], vec![3, 4]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "log",
            vec![uniform(r, &[5], 0.5, 2.0)],
            Box::new(move |g, x| {
                let y = g.log(x[0]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "exp",
            vec![uniform(r, &[5], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.exp(x[0]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "square",
            vec![uniform(r, &[5], -1.0, 1.0)],
            Box::new(move |g, x| {
                let y = g.square(x[0]).unwrap();
                project(g, y, seed)
            }),
        ),
        case(
            "clamp",
            vec![clamp_input(r)],
            Box::new(move |g, x| {
                let y = g.clamp(x[0], -0.5, 0.5).unwrap();
                project(g, y, seed)
            }),
        ),
        {
            let a = uniform(r, &[6], -1.0, 1.0);
            let b = away_from_zero(r, &[6], 0.1, 1.0);
            let b = Tensor::new(vec![6], a.values().iter().zip(b.values()).map(|(x, d)| x + d).collect()).unwrap();
            case(
                "minimum",
                vec![a, b],
                Box::new(move |g, x| {
                    let y = g.minimum(x[0], x[1]).unwrap();
                    project(g, y, seed)
                }),
            )
        },
    ]
}

fn clamp_input(r: &mut ChaCha8Rng) -> Tensor {
    // inside or outside [-0.5, 0.5] but never within 0.1 of a bound
    let v = (0..8)
        .map(|_| {
            let m = if r.random_bool(0.5) {
                r.random_range(0.0..0.4)
            } else {
                r.random_range(0.6..1.0)
            };
            if r.random_bool(0.5) {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(vec![8], v).unwrap()
}

pub fn random_observations(seed: u64, n: usize) -> Vec<Observation> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut v = [0.0; 7];
            for x in &mut v {
                *x = r.random_range(-2.0..2.0);
            }
            Observation::from_array(v)
        })
        .collect()
}

fn obs_tensor(obs: &[Observation]) -> Tensor {
    Tensor::new(vec![obs.len(), 7], obs.iter().flat_map(|o| o.to_array()).collect()).unwrap()
}

fn mlp_from(inputs: &[NodeId]) -> [NodeId; 4] {
    [inputs[0], inputs[1], inputs[2], inputs[3]]
}

/// `tanh(x W1 + b1) W2 + b2` built from raw parameter nodes.
fn mlp_nodes(g: &mut Graph, x: NodeId, p: [NodeId; 4]) -> NodeId {
    let h = g.matmul(x, p[0]).unwrap();
    let h = g.add(h, p[1]).unwrap();
    let h = g.tanh(h).unwrap();
    let y = g.matmul(h, p[2]).unwrap();
    g.add(y, p[3]).unwrap()
}

fn mlp_tensors(m: &Mlp) -> Vec<Tensor> {
    [&m.w1, &m.b1, &m.w2, &m.b2]
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.values().to_vec()).unwrap())
        .collect()
}

/// Critic: mean squared error against random targets, all four parameters.
pub fn critic_gradient_error(seed: u64) -> f64 {
    let policy = ControllerPolicy::new(seed);
    let obs = random_observations(seed, 6);
    let targets = uniform(&mut rng(seed + 1), &[6, 1], -3.0, 3.0);
    let x = obs_tensor(&obs);
    let build = move |g: &mut Graph, p: &[NodeId]| {
        let x = g.constant(x.clone()).unwrap();
        let t = g.constant(targets.clone()).unwrap();
        let v = mlp_nodes(g, x, mlp_from(p));
        let e = g.sub(v, t).unwrap();
        let sq = g.square(e).unwrap();
        g.mean(sq).unwrap()
    };
    gradient_error(&mlp_tensors(&policy.critic), &build)
}

/// Actor: clipped-surrogate objective over actor parameters and `log_std`.
/// Ratios are kept away from the clip boundaries so the objective is smooth.
pub fn actor_gradient_error(seed: u64) -> f64 {
    let mut policy = ControllerPolicy::new(seed);
    // a larger output layer than the near-zero init makes the check meaningful
    for v in policy.actor.w2.values_mut() {
        *v *= 50.0;
    }
    let obs = random_observations(seed, 6);
    let x = obs_tensor(&obs);
    let (means, _) = policy.evaluate(&obs).unwrap();
    let mut r = rng(seed + 7);
    let std = policy.std();
    let actions: Vec<f64> = means.iter().map(|m| m + std * r.random_range(-1.5..1.5)).collect();
    // old log-probs shifted so that ratios land well inside or outside the clip range
    let old: Vec<f64> = actions
        .iter()
        .zip(&means)
        .map(|(a, m)| {
            let lp = autolr::controller::gaussian_log_prob(*a, *m, policy.log_std);
            let shift: f64 = if r.random_bool(0.5) {
                r.random_range(-0.1..0.1)
            } else {
                r.random_range(0.4..0.8) * if r.random_bool(0.5) { 1.0 } else { -1.0 }
            };
            lp - shift
        })
        .collect();
    let adv: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
    let col = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
    let (a_t, o_t, adv_t) = (col(&actions), col(&old), col(&adv));
    let build = move |g: &mut Graph, p: &[NodeId]| {
        let x = g.constant(x.clone()).unwrap();
        let actions = g.constant(a_t.clone()).unwrap();
        let old = g.constant(o_t.clone()).unwrap();
        let adv = g.constant(adv_t.clone()).unwrap();
        let zeros = g.constant(Tensor::zeros(vec![6, 1])).unwrap();
        let mean = mlp_nodes(g, x, mlp_from(p));
        let log_std = g.add(zeros, p[4]).unwrap();
        let lp = gaussian_log_prob_node(g, actions, mean, log_std).unwrap();
        let lr = g.sub(lp, old).unwrap();
        let ratio = g.exp(lr).unwrap();
        let s1 = g.mul(ratio, adv).unwrap();
        let c = g.clamp(ratio, 0.8, 1.2).unwrap();
        let s2 = g.mul(c, adv).unwrap();
        let m = g.minimum(s1, s2).unwrap();
        g.mean(m).unwrap()
    };
    let mut inputs = mlp_tensors(&policy.actor);
    inputs.push(Tensor::scalar(policy.log_std));
    gradient_error(&inputs, &build)
}

// ---------------------------------------------------------------------------
// GAE

/// `A_t = sum_l (γλ)^l δ_{t+l}` summed explicitly until the first terminal step.
pub fn brute_force_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| {
        let next = if dones[t] || t + 1 >= n { 0.0 } else { values[t + 1] };
        rewards[t] + gamma * next - values[t]
    };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for l in 0..n - t {
                total += (gamma * lambda).powi(l as i32) * delta(t + l);
                if dones[t + l] {
                    break;
                }
            }
            total
        })
        .collect()
}

// ---------------------------------------------------------------------------
// t-test

/// Textbook pooled two-sample t with sums of squares computed directly.
pub fn textbook_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let ss = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let sp2 = (ss(a) + ss(b)) / df;
    let t = (mean(a) - mean(b)) / (sp2 * (na + nb) / (na * nb)).sqrt();
    (t, df)
}

/// Two-sided p-value for integer degrees of freedom via the closed-form
/// finite trigonometric series for the Student t distribution.
pub fn t_two_sided_p_series(t: f64, df: u32) -> f64 {
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = (theta.sin(), theta.cos());
    // A = P(|T| < |t|)
    let a = if df % 2 == 1 {
        let mut sum = 0.0;
        if df > 1 {
            let mut term = c;
            sum = term;
            let mut k = 1;
            while 2 * k + 1 < df {
                term *= c * c * (2 * k) as f64 / (2 * k + 1) as f64;
                sum += term;
                k += 1;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1;
        while 2 * k < df {
            term *= c * c * (2 * k - 1) as f64 / (2 * k) as f64;
            sum += term;
            k += 1;
        }
        s * sum
    };
    1.0 - a
}

/// Two-sided critical values t_{0.975, df} from printed tables.
pub const T_TABLE_975: [(u32, f64); 5] = [(1, 12.706), (2, 4.303), (5, 2.571), (8, 2.306), (18, 2.101)];
