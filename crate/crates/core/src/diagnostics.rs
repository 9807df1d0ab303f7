//! Self-checks runnable from the command line: every differentiable op and
//! loss against central differences, plus an end-to-end spot check of the
//! full training loss on the tiny network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{grad_check, relative_error};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::losses::{self, class_weights_online, one_hot};
use crate::model::{sample_modality_mask, AppearanceCode, ModalityMask, Network, NetworkConfig};
use crate::tensor::Tensor;

pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-3;
const OP_EPS: f64 = 1e-4;
const PROBE_MIN_GRAD: f64 = 1e-3;
const PROBES_PER_GROUP: usize = 4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    /// Number of gradient entries compared.
    pub elements: usize,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

struct Inputs {
    rng: ChaCha8Rng,
}

impl Inputs {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(lo..hi))
    }

    /// Values at least `gap` away from zero, for ops with a kink there.
    fn away_from_zero(&mut self, shape: &[usize], gap: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = self.rng.random_range(gap..1.0);
            if self.rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    fn probabilities(&mut self, k: usize, n: usize) -> Tensor<f64> {
        let mut data = vec![0.0; k * n];
        for j in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| self.rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..k {
                data[c * n + j] = raw[c] / s;
            }
        }
        Tensor::new([k, n], data).expect("shape matches")
    }
}

/// `Σ y ⊙ R` with a fixed random `R`, so each output element has its own weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(tape.shape(y).to_vec(), |_| rng.random_range(-1.0..1.0));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type Check = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type UnaryOp = fn(&mut Tape<f64>, Var) -> Var;
type BinaryOp = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;

fn op_checks(inp: &mut Inputs, seed: u64) -> Vec<(&'static str, Check, Vec<Tensor<f64>>)> {
    let p = move |tape: &mut Tape<f64>, y: Var| project(tape, y, seed ^ 0x5eed);
    let mut checks: Vec<(&'static str, Check, Vec<Tensor<f64>>)> = Vec::new();
    for (name, stride, padding, k) in [
        ("conv3d 3x3x3 stride 1", 1, 1, 3),
        ("conv3d 3x3x3 stride 2", 2, 1, 3),
        ("conv3d 1x1x1", 1, 0, 1),
    ] {
        let x = inp.uniform(&[2, 3, 3, 4], -1.0, 1.0);
        let w = inp.uniform(&[2, 2, k, k, k], -1.0, 1.0);
        let b = inp.uniform(&[2], -1.0, 1.0);
        checks.push((
            name,
            Box::new(move |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], stride, padding)?;
                p(t, y)
            }),
            vec![x, w, b],
        ));
    }
    checks.push((
        "instance_norm",
        Box::new(move |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
            p(t, y)
        }),
        vec![inp.uniform(&[2, 3, 2, 3], -1.0, 1.0), inp.uniform(&[2], 0.5, 1.5), inp.uniform(&[2], -1.0, 1.0)],
    ));
    checks.push((
        "leaky_relu",
        Box::new(move |t, v| {
            let y = t.leaky_relu(v[0], 0.01);
            p(t, y)
        }),
        vec![inp.away_from_zero(&[2, 3, 4], 0.01)],
    ));
    let unary: [(&str, UnaryOp); 3] = [
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("exp", |t, x| t.exp(x)),
        ("scale/offset", |t, x| {
            let s = t.scale(x, -1.7);
            t.offset(s, 0.4)
        }),
    ];
    for (name, f) in unary {
        checks.push((
            name,
            Box::new(move |t, v| {
                let y = f(t, v[0]);
                p(t, y)
            }),
            vec![inp.uniform(&[2, 3, 4], -2.0, 2.0)],
        ));
    }
    checks.push((
        "log",
        Box::new(move |t, v| {
            let y = t.log_clamped(v[0], 1e-8);
            p(t, y)
        }),
        vec![inp.uniform(&[2, 3, 4], 0.2, 2.0)],
    ));
    checks.push((
        "abs",
        Box::new(move |t, v| {
            let y = t.abs(v[0]);
            p(t, y)
        }),
        vec![inp.away_from_zero(&[2, 3, 4], 0.01)],
    ));
    let binary: [(&str, BinaryOp); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    for (name, f) in binary {
        checks.push((
            name,
            Box::new(move |t, v| {
                let y = f(t, v[0], v[1])?;
                p(t, y)
            }),
            vec![inp.uniform(&[2, 3, 4], -1.0, 1.0), inp.uniform(&[2, 3, 4], 0.5, 2.0)],
        ));
    }
    checks.push((
        "mul_channels",
        Box::new(move |t, v| {
            let y = t.mul_channels(v[0], v[1])?;
            p(t, y)
        }),
        vec![inp.uniform(&[3, 2, 2, 3], -1.0, 1.0), inp.uniform(&[1, 2, 2, 3], -1.0, 1.0)],
    ));
    checks.push((
        "upsample2x",
        Box::new(move |t, v| {
            let y = t.upsample2x(v[0])?;
            p(t, y)
        }),
        vec![inp.uniform(&[2, 2, 1, 3], -1.0, 1.0)],
    ));
    checks.push((
        "avg_pool2x",
        Box::new(move |t, v| {
            let y = t.avg_pool2x(v[0])?;
            p(t, y)
        }),
        vec![inp.uniform(&[2, 2, 4, 2], -1.0, 1.0)],
    ));
    checks.push((
        "global_avg_pool",
        Box::new(move |t, v| {
            let y = t.global_avg_pool(v[0]);
            p(t, y)
        }),
        vec![inp.uniform(&[3, 2, 3, 2], -1.0, 1.0)],
    ));
    checks.push((
        "fully_connected",
        Box::new(move |t, v| {
            let y = t.fully_connected(v[0], v[1], v[2])?;
            p(t, y)
        }),
        vec![inp.uniform(&[5], -1.0, 1.0), inp.uniform(&[4, 5], -1.0, 1.0), inp.uniform(&[4], -1.0, 1.0)],
    ));
    checks.push((
        "concat/slice",
        Box::new(move |t, v| {
            let c = t.concat_channels(&[v[0], v[1]])?;
            let s = t.slice_channels(c, 1, 3)?;
            p(t, s)
        }),
        vec![inp.uniform(&[2, 2, 2, 2], -1.0, 1.0), inp.uniform(&[3, 2, 2, 2], -1.0, 1.0)],
    ));
    checks.push((
        "softmax_channels",
        Box::new(move |t, v| {
            let y = t.softmax_channels(v[0])?;
            p(t, y)
        }),
        vec![inp.uniform(&[4, 2, 3, 2], -2.0, 2.0)],
    ));
    checks.push((
        "sum/mean/sum_spatial",
        Box::new(move |t, v| {
            let s = t.sum_spatial(v[0]);
            let s = p(t, s)?;
            let m = t.mean(v[0]);
            let q = t.mul(s, m)?;
            Ok(t.sum(q))
        }),
        vec![inp.uniform(&[3, 2, 2, 3], -1.0, 1.0)],
    ));
    checks
}

fn loss_checks(inp: &mut Inputs) -> Vec<(&'static str, Check, Vec<Tensor<f64>>)> {
    let (k, n) = (4, 24);
    let labels: Vec<u8> = (0..n).map(|_| inp.rng.random_range(0..k as u8)).collect();
    let y = one_hot::<f64>(&labels, k, &[n]).expect("labels below k");
    let w = class_weights_online(&y);
    let original = inp.uniform(&[1, 2, 3, 4], -1.0, 1.0);
    let mut checks: Vec<(&'static str, Check, Vec<Tensor<f64>>)> = Vec::new();
    checks.push((
        "seg_loss",
        Box::new(move |t, v| {
            let y = t.constant(y.clone());
            Ok(losses::seg_loss(t, v[0], y, &w, losses::DICE_EPS)?.loss)
        }),
        vec![inp.probabilities(k, n)],
    ));
    // Keep every residual away from the |·| kink.
    let offsets = inp.away_from_zero(&[1, 2, 3, 4], 0.05);
    let rec = original.data().iter().zip(offsets.data()).map(|(a, b)| a + b).collect();
    checks.push((
        "rec_loss",
        Box::new(move |t, v| {
            let o = t.constant(original.clone());
            losses::rec_loss(t, &[v[0]], &[o])
        }),
        vec![Tensor::new([1, 2, 3, 4], rec).expect("shape matches")],
    ));
    checks.push((
        "kl_loss",
        Box::new(|t, v| {
            let code = AppearanceCode {
                mu: v[0],
                log_var: v[1],
                sample: v[0],
            };
            losses::kl_loss(t, &[code])
        }),
        vec![inp.uniform(&[8], -1.0, 1.0), inp.uniform(&[8], -1.0, 1.0)],
    ));
    checks.push((
        "total_loss",
        Box::new(|t, v| losses::total_loss(t, v[0], v[1], v[2], 0.1, 0.1)),
        vec![
            inp.uniform(&[1], -1.0, 1.0),
            inp.uniform(&[1], -1.0, 1.0),
            inp.uniform(&[1], -1.0, 1.0),
        ],
    ));
    checks
}

/// Finite-difference checks of every op and loss in double precision.
pub fn op_suite(seed: u64, tol: f64) -> Result<Vec<CheckOutcome>> {
    let mut inp = Inputs {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut checks = op_checks(&mut inp, seed);
    checks.extend(loss_checks(&mut inp));
    checks
        .into_iter()
        .map(|(name, f, inputs)| {
            let report = grad_check(f, &inputs, OP_EPS, tol)?;
            Ok(CheckOutcome {
                name: name.to_string(),
                elements: inputs.iter().map(Tensor::len).sum(),
                max_rel_error: report.max_rel_error,
                tol,
            })
        })
        .collect()
}

/// Gradient of the full training loss (segmentation, reconstruction and KL
/// terms) on the tiny network, spot-checked at a few elements of every
/// parameter group.
pub fn model_spot_check(seed: u64, tol: f64) -> Result<CheckOutcome> {
    let config = NetworkConfig::tiny();
    let mut net = Network::<f32>::new(config.clone(), seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1a6);
    let p = config.patch;
    let inputs: Vec<Tensor<f64>> = (0..config.modalities)
        .map(|_| Tensor::from_fn([1, p, p, p], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let labels: Vec<u8> = (0..p * p * p).map(|_| rng.random_range(0..config.classes as u8)).collect();
    let y = one_hot::<f64>(&labels, config.classes, &[p, p, p])?;
    let weights = class_weights_online(&y);
    let mask = loop {
        let m = sample_modality_mask(&mut rng, config.modalities, config.dropout_prob);
        if !m.is_all() {
            break m;
        }
    };
    let noise_seed = rng.random::<u64>();

    let objective = |net: &Network<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let total = training_loss(net, &mut tape, &inputs, &y, &weights, &mask, noise_seed)?;
        Ok(tape.value(total).item())
    };
    let mut tape = Tape::new();
    let total = training_loss(&net, &mut tape, &inputs, &y, &weights, &mask, noise_seed)?;
    net.store_mut().zero_grad();
    net.store_mut().backward(&tape, total)?;
    drop(tape);

    // Probe entries whose gradient is large enough to measure: dropped
    // encoders, biases feeding instance norm and gates of zeroed codes have
    // structurally zero gradients.
    let mut probes = Vec::new();
    for prefix in ["content_enc.", "app_enc.", "fusion.", "seg_dec.", "rec_dec."] {
        let candidates: Vec<_> = net
            .store()
            .iter()
            .filter(|(_, param)| param.name.starts_with(prefix))
            .flat_map(|(id, param)| {
                param
                    .grad
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| g.abs() >= PROBE_MIN_GRAD)
                    .map(move |(j, _)| (id, j))
            })
            .collect();
        for _ in 0..PROBES_PER_GROUP.min(candidates.len()) {
            probes.push(candidates[rng.random_range(0..candidates.len())]);
        }
    }
    let elements = probes.len();
    let mut worst = 0.0f64;
    for (id, j) in probes {
        let analytic = net.store().get(id).grad.data()[j];
        let orig = net.store().get(id).value.data()[j];
        // Two steps: a LeakyReLU kink inside one interval spoils only that estimate.
        let mut best = f64::INFINITY;
        for eps in [1e-5, 1e-7] {
            net.store_mut().get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = objective(&net)?;
            net.store_mut().get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = objective(&net)?;
            let numeric = (plus - minus) / (2.0 * eps);
            best = best.min(relative_error(analytic, numeric));
        }
        net.store_mut().get_mut(id).value.data_mut()[j] = orig;
        worst = worst.max(best);
    }
    Ok(CheckOutcome {
        name: "tiny network total loss".into(),
        elements,
        max_rel_error: worst,
        tol,
    })
}

fn training_loss(
    net: &Network<f64>,
    tape: &mut Tape<f64>,
    inputs: &[Tensor<f64>],
    y: &Tensor<f64>,
    weights: &[f64],
    mask: &ModalityMask,
    noise_seed: u64,
) -> Result<Var> {
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let out = net.forward(tape, inputs, mask, Some(&mut noise))?;
    let yv = tape.constant(y.clone());
    let seg = losses::seg_loss(tape, out.probs, yv, weights, losses::DICE_EPS)?.loss;
    let rec = losses::rec_loss(tape, &out.reconstructions, &out.inputs)?;
    let kl = losses::kl_loss(tape, &out.appearance)?;
    losses::total_loss(tape, seg, rec, kl, losses::DEFAULT_LAMBDA, losses::DEFAULT_BETA)
}
