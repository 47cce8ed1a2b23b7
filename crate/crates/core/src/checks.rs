//! Self-contained verification suites behind the `gradcheck` and
//! `quantcheck` subcommands.
//!
//! Gradient checks compare reverse-mode gradients against central finite
//! differences. The error measure is `|a - n| / max(|a|, |n|, 1e-3)`: relative
//! for gradients of ordinary size, absolute below 1e-3 where finite
//! differences cannot resolve relative error.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::distill::{self, Temperature};
use crate::error::Result;
use crate::models::{InputShape, NetworkSpec, NetworkState};
use crate::quant::{self, Interval, QuantSpec, Signedness, SteMode};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for differentiable ops.
pub const FD_TOLERANCE: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-3;
/// Distance from rounding and clamp boundaries, in grid units, below which
/// quantizer elements are excluded from the closed-form comparison.
pub const BOUNDARY_MARGIN: f64 = 1e-3;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<32} cases={:<6} worst={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &str, cases: usize, worst: f64, tolerance: f64) {
        self.checks.push(Check {
            name: name.to_string(),
            cases,
            worst,
            tolerance,
            // `!(worst > tol)` would let NaN through.
            passed: worst <= tolerance,
        });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{}", c)?;
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

type OpFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Scalar objective: the op output itself if scalar, else `sum(out * w)`
/// with fixed random weights so every output element matters.
fn objective(g: &mut Graph, inputs: &[Tensor], as_var: bool, f: &OpFn<'_>, weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if as_var { g.variable(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(g, &vars)?;
    if g.value(out).is_scalar() {
        return Ok((out, vars));
    }
    let shape = g.value(out).shape().to_vec();
    let w = weights.get_or_insert_with(|| normal(rng, &shape, 1.0)).clone();
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    Ok((g.sum(prod), vars))
}

/// Largest error over every element of every input.
pub fn finite_difference_error(inputs: &[Tensor], f: &OpFn<'_>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut weights = None;
    let mut g = Graph::new();
    let (root, vars) = objective(&mut g, inputs, true, f, &mut weights, rng)?;
    let grads = g.backward(root)?;
    let mut eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let (root, _) = objective(&mut g, ins, false, f, &mut weights, rng)?;
        Ok(g.value(root).item())
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let lp = eval(&work)?;
            work[i].data_mut()[j] = x0 - FD_STEP;
            let lm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Finite-difference checks of every differentiable op and of the loss
/// builders, `trials` random cases each, plus the quantizer closed forms.
pub fn gradcheck(trials: usize, seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    let t2 = Temperature::new(2.0)?;

    macro_rules! op_check {
        ($name:expr, |$r:ident| $inputs:expr, $f:expr) => {{
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let ins: Vec<Tensor> = {
                    let $r = &mut rng;
                    $inputs
                };
                let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
                worst = worst.max(finite_difference_error(&ins, &$f, &mut local)?);
            }
            report.record($name, trials, worst, FD_TOLERANCE);
        }};
    }

    op_check!("matmul", |r| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        vec![normal(r, &[m, k], 1.0), normal(r, &[k, n], 1.0)]
    }, |g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]));

    {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (n, c, o) = (dims(&mut rng, 1, 2), dims(&mut rng, 1, 2), dims(&mut rng, 1, 3));
            let k = dims(&mut rng, 1, 3);
            let stride = dims(&mut rng, 1, 2);
            let padding = dims(&mut rng, 0, 1);
            let h = dims(&mut rng, k.max(3), 5);
            let w = dims(&mut rng, k.max(3), 5);
            let ins = vec![normal(&mut rng, &[n, c, h, w], 1.0), normal(&mut rng, &[o, c, k, k], 1.0)];
            let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
            let f = move |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], stride, padding);
            worst = worst.max(finite_difference_error(&ins, &f, &mut local)?);
        }
        report.record("conv2d", trials, worst, FD_TOLERANCE);
    }

    op_check!("relu", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 5)];
        vec![away_from_zero(r, &s)]
    }, |g: &mut Graph, v: &[Var]| Ok(g.relu(v[0])));

    op_check!("global_avg_pool", |r| {
        let s = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| g.global_avg_pool(v[0]));

    op_check!("add", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0), normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| g.add(v[0], v[1]));

    op_check!("sub", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0), normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]));

    op_check!("mul", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0), normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]));

    op_check!("scale", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| Ok(g.scale(v[0], -1.7)));

    op_check!("exp", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| Ok(g.exp(v[0])));

    op_check!("log_softmax", |r| {
        let s = [dims(r, 1, 4), dims(r, 2, 6)];
        vec![normal(r, &s, 3.0)]
    }, |g: &mut Graph, v: &[Var]| g.log_softmax(v[0]));

    op_check!("sum", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0])));

    op_check!("mean", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| Ok(g.mean(v[0])));

    op_check!("channel_bias", |r| {
        let c = dims(r, 1, 3);
        let s = [dims(r, 1, 2), c, dims(r, 1, 3), dims(r, 1, 3)];
        vec![normal(r, &s, 1.0), normal(r, &[c], 1.0)]
    }, |g: &mut Graph, v: &[Var]| g.channel_bias(v[0], v[1]));

    op_check!("channel_affine", |r| {
        let c = dims(r, 1, 3);
        let s = [dims(r, 1, 2), c, dims(r, 1, 3), dims(r, 1, 3)];
        vec![normal(r, &s, 1.0), normal(r, &[c], 1.0), normal(r, &[c], 1.0)]
    }, |g: &mut Graph, v: &[Var]| g.channel_affine(v[0], v[1], v[2]));

    op_check!("reshape+flatten", |r| {
        let s = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
        vec![normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| {
        let f = g.flatten(v[0])?;
        let n: usize = g.value(f).numel();
        let e = g.exp(f);
        g.reshape(e, &[n])
    });

    {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (n, m) = (dims(&mut rng, 1, 4), dims(&mut rng, 2, 5));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            let ins = vec![normal(&mut rng, &[n, m], 2.0)];
            let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
            let l1 = labels.clone();
            let pick = move |g: &mut Graph, v: &[Var]| g.pick_class(v[0], &l1);
            worst = worst.max(finite_difference_error(&ins, &pick, &mut local)?);
            let l2 = labels.clone();
            let ce = move |g: &mut Graph, v: &[Var]| distill::ce_loss(g, v[0], &l2);
            worst = worst.max(finite_difference_error(&ins, &ce, &mut local)?);
        }
        report.record("pick_class+cross_entropy", trials, worst, FD_TOLERANCE);
    }

    op_check!("mse", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        vec![normal(r, &s, 1.0), normal(r, &s, 1.0)]
    }, |g: &mut Graph, v: &[Var]| g.mse(v[0], v[1]));

    op_check!("kl_divergence", |r| {
        let s = [dims(r, 1, 4), dims(r, 2, 6)];
        vec![normal(r, &s, 2.0), normal(r, &s, 2.0)]
    }, |g: &mut Graph, v: &[Var]| distill::kl_loss(g, v[0], v[1], t2));

    {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (n, m) = (dims(&mut rng, 1, 4), dims(&mut rng, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            let other = normal(&mut rng, &[n, m], 2.0);
            let ins = vec![normal(&mut rng, &[n, m], 2.0)];
            let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
            let f = move |g: &mut Graph, v: &[Var]| Ok(distill::kd_loss(g, v[0], &other, &labels, t2, 1.0)?.total);
            worst = worst.max(finite_difference_error(&ins, &f, &mut local)?);
        }
        report.record("kd_loss", trials, worst, FD_TOLERANCE);
    }

    {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (n, cs, ct) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
            let spatial = rng.gen_bool(0.5);
            let (fs, ft): (Vec<usize>, Vec<usize>) = if spatial {
                let (h, w) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
                (vec![n, cs, h, w], vec![n, ct, h, w])
            } else {
                (vec![n, cs], vec![n, ct])
            };
            let teacher = normal(&mut rng, &ft, 1.0);
            let ins = vec![normal(&mut rng, &fs, 1.0), normal(&mut rng, &[ct, cs, 1, 1], 0.5)];
            let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
            let f = move |g: &mut Graph, v: &[Var]| distill::activation_distill_loss(g, v[0], &teacher, v[1]);
            worst = worst.max(finite_difference_error(&ins, &f, &mut local)?);
        }
        report.record("activation_distill_loss", trials, worst, FD_TOLERANCE);
    }

    let networks = (trials / 10).max(1);
    let mut worst = 0.0f64;
    for t in 0..networks {
        let (name, input) = if t % 2 == 0 {
            ("mlp-s", InputShape::Vector(6))
        } else {
            ("tiny-cnn-s", InputShape::Image { channels: 2, height: 6, width: 6 })
        };
        worst = worst.max(network_error(name, input, &mut rng)?);
    }
    report.record("network parameters", networks, worst, FD_TOLERANCE);

    quantizer_checks(trials * 20, &mut rng, &mut report)?;
    Ok(report)
}

/// End-to-end check of a full-precision network's parameter gradients,
/// sampling a few entries of each parameter tensor.
fn network_error(name: &str, input: InputShape, rng: &mut ChaCha8Rng) -> Result<f64> {
    let spec = NetworkSpec::named(name, input.clone(), 3, 8)?;
    let mut net = NetworkState::build(&spec, rng.gen())?;
    let mut shape = vec![2];
    shape.extend(input.dims());
    let x = normal(rng, &shape, 1.0);
    let labels = [0usize, 2];
    let loss_of = |net: &NetworkState| -> Result<f64> {
        let z = net.forward(&x)?;
        distill::cross_entropy(&z, &labels)
    };
    let mut g = Graph::new();
    let fwd = net.forward_graph(&mut g, &x, true)?;
    let loss = distill::ce_loss(&mut g, fwd.logits, &labels)?;
    let grads = g.backward(loss)?;
    net.zero_grads();
    net.accumulate_grads(&fwd, &grads);
    let mut worst = 0.0f64;
    for p in 0..net.params().len() {
        if net.params()[p].kind.is_interval() {
            continue;
        }
        let n = net.params()[p].value.numel();
        for _ in 0..n.min(6) {
            let j = rng.gen_range(0..n);
            let analytic = net.params()[p].grad.data()[j];
            let x0 = net.params()[p].value.data()[j];
            net.params_mut()[p].value.data_mut()[j] = x0 + FD_STEP;
            let lp = loss_of(&net)?;
            net.params_mut()[p].value.data_mut()[j] = x0 - FD_STEP;
            let lm = loss_of(&net)?;
            net.params_mut()[p].value.data_mut()[j] = x0;
            worst = worst.max(rel_err(analytic, (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

fn random_spec(rng: &mut ChaCha8Rng) -> QuantSpec {
    let bits = rng.gen_range(2..=8);
    let s = if rng.gen_bool(0.5) { Signedness::Signed } else { Signedness::Unsigned };
    QuantSpec::new(bits, s).expect("bits in range")
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Grid coordinates of `x`: scaled value, clamped value and level.
fn grid(x: f64, i: f64, spec: &QuantSpec) -> (f64, f64, f64) {
    let (lo, hi) = (spec.qmin() as f64, spec.qmax() as f64);
    let u = x / i;
    let c = u.max(lo).min(hi);
    (u, c, (c + 0.5).floor())
}

fn near_boundary(u: f64, spec: &QuantSpec) -> bool {
    let (lo, hi) = (spec.qmin() as f64, spec.qmax() as f64);
    let frac = u - u.floor();
    (frac - 0.5).abs() <= BOUNDARY_MARGIN || (u - lo).abs() <= BOUNDARY_MARGIN || (u - hi).abs() <= BOUNDARY_MARGIN
}

fn quantizer_checks(cases: usize, rng: &mut ChaCha8Rng, report: &mut Report) -> Result<()> {
    // Backward of the graph op against an independent evaluation of the
    // straight-through closed form; exact equality expected.
    let mut worst = 0.0f64;
    let mut compared = 0;
    for _ in 0..cases {
        let spec = random_spec(rng);
        let i = log_uniform(rng, 1e-2, 2.0);
        let ste = if rng.gen_bool(0.5) { SteMode::Clipped } else { SteMode::Identity };
        let n = rng.gen_range(1..=8);
        let spread = i * (spec.qmax() - spec.qmin()) as f64 * 0.75;
        let x = Tensor::from_parts(vec![n], (0..n).map(|_| rng.gen_range(-spread..spread)).collect());
        let up = normal(rng, &[n], 1.0);
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let iv = g.variable(Tensor::scalar(i));
        let q = g.fake_quant(xv, iv, spec, ste)?;
        let w = g.constant(up.clone());
        let prod = g.mul(q, w)?;
        let root = g.sum(prod);
        let grads = g.backward(root)?;
        let gx = grads.get(xv).expect("x reached");
        let gi = grads.get(iv).expect("interval reached").item();

        let (lo, hi) = (spec.qmin() as f64, spec.qmax() as f64);
        let mut want_i = 0.0;
        let mut skip = false;
        for k in 0..n {
            let (u, _, level) = grid(x.data()[k], i, &spec);
            skip |= near_boundary(u, &spec);
            let inside = (lo..=hi).contains(&u);
            let slope = if u < lo {
                lo
            } else if u > hi {
                hi
            } else {
                level - u
            };
            want_i += up.data()[k] * slope;
            let want_x = match ste {
                SteMode::Identity => up.data()[k],
                SteMode::Clipped if inside => up.data()[k],
                SteMode::Clipped => 0.0,
            };
            worst = worst.max((gx.data()[k] - want_x).abs());
        }
        if !skip {
            compared += 1;
            worst = worst.max((gi - want_i).abs());
        }
    }
    report.record("quantizer backward closed form", compared, worst, 0.0);

    // d x̂ / dI = q inside a rounding cell.
    let mut worst = 0.0f64;
    let mut compared = 0;
    for _ in 0..cases {
        let spec = random_spec(rng);
        let i = log_uniform(rng, 1e-2, 2.0);
        let spread = i * (spec.qmax() - spec.qmin()) as f64 * 0.75;
        let x = rng.gen_range(-spread..spread);
        let h = i * 1e-7;
        let (u, _, q) = grid(x, i, &spec);
        let (_, _, qp) = grid(x, i + h, &spec);
        let (_, _, qm) = grid(x, i - h, &spec);
        if near_boundary(u, &spec) || qp != q || qm != q {
            continue;
        }
        let xt = Tensor::scalar(x);
        let plus = quant::quantize_dequantize(&xt, Interval::new(i + h)?, &spec).item();
        let minus = quant::quantize_dequantize(&xt, Interval::new(i - h)?, &spec).item();
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max((numeric - q).abs() / q.abs().max(1.0));
        compared += 1;
    }
    report.record("interval finite difference = q", compared, worst, 1e-6);
    Ok(())
}

/// Randomized quantizer property suite, `tensors` random tensors per
/// property, plus the hand-evaluated examples.
pub fn quantcheck(tensors: usize, seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();

    let s2 = QuantSpec::signed(2)?;
    let u2 = QuantSpec::unsigned(2)?;
    let examples: [(f64, f64, &QuantSpec, f64); 6] = [
        (0.7, 0.5, &s2, 0.5),
        (-0.3, 0.5, &s2, -0.5),
        (-1.3, 0.5, &s2, -1.0),
        (0.0, 0.5, &s2, 0.0),
        (2.4, 1.0, &u2, 2.0),
        (5.0, 1.0, &u2, 3.0),
    ];
    let mut bad = 0.0f64;
    for (x, i, spec, want) in examples {
        let got = quant::quantize_dequantize(&Tensor::scalar(x), Interval::new(i)?, spec).item();
        bad = bad.max((got - want).abs());
    }
    for (x, lo, hi, want) in [(1.4, -2.0, 1.0, 1.0), (0.4, -2.0, 1.0, 0.4), (-3.0, -2.0, 1.0, -2.0)] {
        bad = bad.max((quant::clamp(x, lo, hi)? - want).abs());
    }
    let w = Tensor::new(vec![3], vec![-1.0, 0.3, 1.0])?;
    bad = bad.max((quant::minmax_interval(&w, &s2)? - 1.0).abs());
    bad = bad.max((quant::minmax_interval(&Tensor::zeros(&[4]), &s2)? - quant::MIN_INTERVAL).abs());
    bad = bad.max((quant::interval_from_range(0.0, 6.0, &QuantSpec::unsigned(4)?) - 0.4).abs());
    report.record("hand examples", examples.len() + 6, bad, 0.0);

    let sample = |rng: &mut ChaCha8Rng| {
        let spec = random_spec(rng);
        let i = log_uniform(rng, 1e-3, 10.0);
        let n = rng.gen_range(1..=64);
        let scale = i * log_uniform(rng, 0.1, 4.0 * (1u64 << spec.bits) as f64);
        let x = normal(rng, &[n], scale);
        (spec, i, x)
    };

    let mut worst = 0.0f64;
    for _ in 0..tensors {
        let (spec, i, x) = sample(&mut rng);
        let y = quant::quantize_dequantize(&x, Interval::new(i)?, &spec);
        let mut v = y.data().to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        worst = worst.max(v.len() as f64 / spec.levels() as f64);
    }
    report.record("level count <= 2^k", tensors, worst, 1.0);

    let mut worst = 0.0f64;
    for _ in 0..tensors {
        let (spec, i, x) = sample(&mut rng);
        let y = quant::quantize_dequantize(&x, Interval::new(i)?, &spec);
        for &v in y.data() {
            let n = (v / i).round();
            let in_range = n >= spec.qmin() as f64 && n <= spec.qmax() as f64;
            let err = if in_range { (n * i - v).abs() } else { f64::INFINITY };
            worst = worst.max(err);
        }
    }
    report.record("outputs are multiples of I", tensors, worst, 0.0);

    let mut worst = 0.0f64;
    for _ in 0..tensors {
        let (spec, i, x) = sample(&mut rng);
        let iv = Interval::new(i)?;
        let once = quant::quantize_dequantize(&x, iv, &spec);
        let twice = quant::quantize_dequantize(&once, iv, &spec);
        for (a, b) in once.data().iter().zip(twice.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    report.record("idempotence", tensors, worst, 0.0);

    let mut violations = 0.0f64;
    for _ in 0..tensors {
        let (spec, i, x) = sample(&mut rng);
        let mut sorted = x.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let xs = Tensor::from_parts(vec![sorted.len()], sorted);
        let y = quant::quantize_dequantize(&xs, Interval::new(i)?, &spec);
        violations += y.data().windows(2).filter(|w| w[1] < w[0]).count() as f64;
    }
    report.record("monotonicity", tensors, violations, 0.0);

    let mut worst = 0.0f64;
    for _ in 0..tensors {
        let (spec, i, x) = sample(&mut rng);
        let y = quant::quantize_dequantize(&x, Interval::new(i)?, &spec.disabled());
        worst = worst.max(if y == x { 0.0 } else { 1.0 });
    }
    report.record("disabled is identity", tensors, worst, 0.0);

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let g = gradcheck(3, 9).unwrap();
        assert!(g.passed(), "{}", g);
        let q = quantcheck(200, 9).unwrap();
        assert!(q.passed(), "{}", q);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![normal(&mut rng, &[3], 1.0)];
        // Value of exp(x) with the gradient cut off: backward reports 0.
        let wrong = |g: &mut Graph, v: &[Var]| {
            let e = g.exp(v[0]);
            let c = g.constant(g.value(e).clone());
            let zero = g.scale(v[0], 0.0);
            g.add(c, zero)
        };
        let err = finite_difference_error(&x, &wrong, &mut rng).unwrap();
        assert!(err > 1e-2, "{}", err);
    }
}
