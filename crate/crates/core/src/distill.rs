//! Classification and distillation objectives.
//!
//! Two flavours of each loss live here: plain functions over logit tensors
//! that return a number (used for metrics and as test references), and
//! graph builders that record the same computation on a [`Graph`] so it can
//! be differentiated. All batch reductions are means.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::optim::{ParamKind, Parameter};
use crate::tensor::{as_matrix, Tensor};

/// Softmax temperature. Always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Temperature(t))
        } else {
            Err(contract_err!("temperature must be positive, got {}", t))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(2.0)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = crate::QkdError;
    fn try_from(t: f64) -> Result<Self> {
        Temperature::new(t)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

fn check_logits(z: &Tensor) -> Result<(usize, usize)> {
    let (n, m) = as_matrix(z)?;
    if m < 2 {
        return Err(contract_err!("logits need at least 2 classes, got {}", m));
    }
    Ok((n, m))
}

fn check_labels(labels: &[usize], n: usize, m: usize) -> Result<()> {
    if labels.len() != n {
        return Err(dim_err!("{} labels for a batch of {}", labels.len(), n));
    }
    match labels.iter().find(|&&y| y >= m) {
        Some(y) => Err(contract_err!("label {} out of range for {} classes", y, m)),
        None => Ok(()),
    }
}

/// Row-wise `log softmax(z / T)`.
fn log_posterior(z: &Tensor, t: Temperature) -> Result<Tensor> {
    let (n, m) = check_logits(z)?;
    let inv = 1.0 / t.get();
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &z.data()[r * m..(r + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * inv;
        let lse = max + row.iter().map(|&v| (v * inv - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[r * m..(r + 1) * m].iter_mut().zip(row) {
            *o = v * inv - lse;
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Temperature-softened class posterior, one row per sample.
pub fn softened_posterior(z: &Tensor, t: Temperature) -> Result<Tensor> {
    Ok(log_posterior(z, t)?.map(f64::exp))
}

/// Mean negative log-likelihood of the labels at temperature 1.
pub fn cross_entropy(z: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, m) = check_logits(z)?;
    check_labels(labels, n, m)?;
    let lp = log_posterior(z, Temperature(1.0))?;
    let total: f64 = labels.iter().enumerate().map(|(r, &y)| -lp.data()[r * m + y]).sum();
    Ok(total / n as f64)
}

/// Per-sample `KL(p(z_from; T) || p(z_to; T))`.
pub fn kl_per_sample(z_from: &Tensor, z_to: &Tensor, t: Temperature) -> Result<Vec<f64>> {
    if z_from.shape() != z_to.shape() {
        return Err(contract_err!(
            "KL operands differ in shape: {:?} vs {:?}",
            z_from.shape(),
            z_to.shape()
        ));
    }
    let (n, m) = check_logits(z_from)?;
    let lf = log_posterior(z_from, t)?;
    let lt = log_posterior(z_to, t)?;
    Ok((0..n)
        .map(|r| {
            let a = &lf.data()[r * m..(r + 1) * m];
            let b = &lt.data()[r * m..(r + 1) * m];
            a.iter().zip(b).map(|(&x, &y)| x.exp() * (x - y)).sum::<f64>()
        })
        .collect())
}

/// Batch-mean `KL(p(z_from; T) || p(z_to; T))`.
pub fn kl_divergence(z_from: &Tensor, z_to: &Tensor, t: Temperature) -> Result<f64> {
    let per = kl_per_sample(z_from, z_to, t)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `CE(z_s, y) + T^2 * KL(z_t || z_s; T)`.
pub fn student_kd_loss(z_s: &Tensor, z_t: &Tensor, labels: &[usize], t: Temperature) -> Result<f64> {
    let tt = t.get() * t.get();
    Ok(cross_entropy(z_s, labels)? + tt * kl_divergence(z_t, z_s, t)?)
}

/// `CE(z_t, y) + T^2 * KL(z_s || z_t; T)`.
pub fn teacher_kd_loss(z_t: &Tensor, z_s: &Tensor, labels: &[usize], t: Temperature) -> Result<f64> {
    let tt = t.get() * t.get();
    Ok(cross_entropy(z_t, labels)? + tt * kl_divergence(z_s, z_t, t)?)
}

/// Records mean cross-entropy of `z` against `labels` on the graph.
pub fn ce_loss(g: &mut Graph, z: Var, labels: &[usize]) -> Result<Var> {
    let (n, m) = check_logits(g.value(z))?;
    check_labels(labels, n, m)?;
    let lp = g.log_softmax(z)?;
    let picked = g.pick_class(lp, labels)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Records batch-mean `KL(p(from; T) || p(to; T))`. Both sides stay
/// differentiable; pass a constant node to detach one of them.
pub fn kl_loss(g: &mut Graph, from: Var, to: Var, t: Temperature) -> Result<Var> {
    let (sf, st) = (g.value(from).shape(), g.value(to).shape());
    if sf != st {
        return Err(contract_err!("KL operands differ in shape: {:?} vs {:?}", sf, st));
    }
    let (n, _) = check_logits(g.value(from))?;
    let inv = 1.0 / t.get();
    let sf = g.scale(from, inv);
    let st = g.scale(to, inv);
    let lf = g.log_softmax(sf)?;
    let lt = g.log_softmax(st)?;
    let pf = g.exp(lf);
    let diff = g.sub(lf, lt)?;
    let terms = g.mul(pf, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Graph nodes of a knowledge-distillation objective.
#[derive(Debug, Clone, Copy)]
pub struct KdTerms {
    pub total: Var,
    pub ce: Var,
    pub kl: Var,
}

/// `CE(own, y) + kl_weight * T^2 * KL(other || own; T)` where the other
/// network's logits enter as a constant. With `own` = student this is the
/// student objective; with `own` = teacher it is the teacher objective.
pub fn kd_loss(
    g: &mut Graph,
    own: Var,
    other: &Tensor,
    labels: &[usize],
    t: Temperature,
    kl_weight: f64,
) -> Result<KdTerms> {
    let ce = ce_loss(g, own, labels)?;
    let other = g.constant(other.clone());
    let kl = kl_loss(g, other, own, t)?;
    let scaled = g.scale(kl, kl_weight * t.get() * t.get());
    let total = g.add(ce, scaled)?;
    Ok(KdTerms { total, ce, kl })
}

/// Single 1×1 projection from student feature channels to teacher feature
/// channels, with no nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub weight: Parameter,
}

impl Regressor {
    pub fn new(student_channels: usize, teacher_channels: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let data = (0..student_channels * teacher_channels)
            .map(|_| normal.sample(rng))
            .collect();
        let value = Tensor::from_parts(vec![teacher_channels, student_channels, 1, 1], data);
        Regressor {
            weight: Parameter::new("regressor.weight", value, ParamKind::Weight),
        }
    }

    /// Identity projection for equal channel counts.
    pub fn identity(channels: usize) -> Self {
        let mut data = vec![0.0; channels * channels];
        for c in 0..channels {
            data[c * channels + c] = 1.0;
        }
        let value = Tensor::from_parts(vec![channels, channels, 1, 1], data);
        Regressor {
            weight: Parameter::new("regressor.weight", value, ParamKind::Weight),
        }
    }
}

/// Applies a `[Ct, Cs, 1, 1]` projection to `[N, Cs]` or `[N, Cs, H, W]` features.
pub fn project_features(g: &mut Graph, features: Var, weight: Var) -> Result<Var> {
    let shape = g.value(features).shape().to_vec();
    match shape.as_slice() {
        [n, c] => {
            let x = g.reshape(features, &[*n, *c, 1, 1])?;
            let y = g.conv2d(x, weight, 1, 0)?;
            g.flatten(y)
        }
        [_, _, _, _] => g.conv2d(features, weight, 1, 0),
        other => Err(dim_err!("features must be rank 2 or 4, got {:?}", other)),
    }
}

/// Mean squared error between the projected student featuremap and the
/// (constant) teacher featuremap.
pub fn activation_distill_loss(
    g: &mut Graph,
    student_features: Var,
    teacher_features: &Tensor,
    regressor_weight: Var,
) -> Result<Var> {
    let projected = project_features(g, student_features, regressor_weight)?;
    if g.value(projected).shape() != teacher_features.shape() {
        return Err(contract_err!(
            "projected student features {:?} do not match teacher features {:?}",
            g.value(projected).shape(),
            teacher_features.shape()
        ));
    }
    let target = g.constant(teacher_features.clone());
    g.mse(projected, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn t(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    #[test]
    fn uniform_posterior_for_equal_logits() {
        for c in [-3.0, 0.0, 17.5] {
            let p = softened_posterior(&z(&[&[c, c, c]]), t(0.7)).unwrap();
            for &v in p.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_class_posterior() {
        let p = softened_posterior(&z(&[&[1.0, 0.0]]), t(1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.731059).abs() < 1e-6);
        assert!((p.data()[1] - 0.268941).abs() < 1e-6);
        let q = softened_posterior(&z(&[&[2.0, 0.0]]), t(2.0)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert_eq!(Temperature::default().get(), 2.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy(&z(&[&[0.0, 0.0]]), &[0]).unwrap() - ln2).abs() < 1e-15);
        let four = cross_entropy(&z(&[&[0.0, 0.0, 0.0, 0.0]]), &[2]).unwrap();
        assert!((four - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&z(&[&[500.0, 0.0]]), &[0]).unwrap() < 1e-100);
        assert!(cross_entropy(&z(&[&[0.0, 0.0]]), &[2]).is_err());
    }

    #[test]
    fn kl_examples() {
        let a = z(&[&[1.0, 0.0]]);
        let b = z(&[&[0.0, 1.0]]);
        assert_eq!(kl_divergence(&a, &a, t(1.0)).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let v = kl_divergence(&a, &b, t(1.0)).unwrap();
        assert!((v - (e - 1.0) / (e + 1.0)).abs() < 1e-15);
        assert!(kl_divergence(&a, &z(&[&[0.0, 1.0, 2.0]]), t(1.0)).is_err());
    }

    #[test]
    fn kd_identities() {
        let zs = z(&[&[0.3, -1.2, 2.0]]);
        let zt = z(&[&[1.0, 0.5, -0.5]]);
        let ce = cross_entropy(&zs, &[1]).unwrap();
        assert_eq!(student_kd_loss(&zs, &zs, &[1], t(2.0)).unwrap(), ce);
        let kl = kl_divergence(&zt, &zs, t(1.0)).unwrap();
        assert_eq!(student_kd_loss(&zs, &zt, &[1], t(1.0)).unwrap(), ce + kl);
        let ce_t = cross_entropy(&zt, &[1]).unwrap();
        let kl_t = kl_divergence(&zs, &zt, t(3.0)).unwrap();
        assert_eq!(teacher_kd_loss(&zt, &zs, &[1], t(3.0)).unwrap(), ce_t + 9.0 * kl_t);
    }

    #[test]
    fn graph_losses_match_plain_functions() {
        let zs = z(&[&[0.3, -1.2, 2.0], &[0.0, 0.1, -0.4]]);
        let zt = z(&[&[1.0, 0.5, -0.5], &[-2.0, 3.0, 0.0]]);
        let labels = [2, 1];
        let mut g = Graph::new();
        let s = g.variable(zs.clone());
        let terms = kd_loss(&mut g, s, &zt, &labels, t(2.0), 1.0).unwrap();
        let want = student_kd_loss(&zs, &zt, &labels, t(2.0)).unwrap();
        assert!((g.value(terms.total).item() - want).abs() < 1e-14);
        let kl = kl_divergence(&zt, &zs, t(2.0)).unwrap();
        assert!((g.value(terms.kl).item() - kl).abs() < 1e-15);
    }

    #[test]
    fn activation_loss_examples() {
        let mut g = Graph::new();
        let reg = Regressor::identity(3);
        let w = g.constant(reg.weight.value.clone());
        let feats = Tensor::new(vec![2, 3], vec![0.5, 1.0, -2.0, 0.0, 3.0, 1.5]).unwrap();
        let s = g.constant(feats.clone());
        let l = activation_distill_loss(&mut g, s, &feats, w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut g = Graph::new();
        let w = g.constant(Regressor::identity(2).weight.value.clone());
        let s = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let l = activation_distill_loss(&mut g, s, &Tensor::ones(&[1, 2, 2, 2]), w).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn activation_loss_shape_mismatch() {
        let mut g = Graph::new();
        let w = g.constant(Regressor::identity(2).weight.value.clone());
        let s = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let r = activation_distill_loss(&mut g, s, &Tensor::ones(&[1, 2, 3, 3]), w);
        assert!(r.is_err());
    }
}
