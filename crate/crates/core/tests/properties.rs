use proptest::prelude::*;
use qkd_core::autograd::{Graph, Var};
use qkd_core::checks::finite_difference_error;
use qkd_core::distill::{self, Temperature};
use qkd_core::quant::{self, Interval, QuantSpec, Signedness};
use qkd_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec_strategy() -> impl Strategy<Value = QuantSpec> {
    (2u32..=8, any::<bool>()).prop_map(|(k, s)| {
        QuantSpec::new(k, if s { Signedness::Signed } else { Signedness::Unsigned }).unwrap()
    })
}

fn tensor(values: Vec<f64>) -> Tensor {
    Tensor::new(vec![values.len()], values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn outputs_lie_on_the_grid(spec in spec_strategy(), i in 1e-3f64..10.0, xs in prop::collection::vec(-500.0f64..500.0, 1..64)) {
        let y = quant::quantize_dequantize(&tensor(xs), Interval::new(i).unwrap(), &spec);
        let mut distinct = y.data().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assert!(distinct.len() as u64 <= spec.levels());
        for &v in y.data() {
            let n = (v / i).round();
            prop_assert!(n >= spec.qmin() as f64 && n <= spec.qmax() as f64);
            prop_assert_eq!(n * i, v);
        }
    }

    #[test]
    fn quantization_is_idempotent(spec in spec_strategy(), i in 1e-3f64..10.0, xs in prop::collection::vec(-500.0f64..500.0, 1..64)) {
        let iv = Interval::new(i).unwrap();
        let once = quant::quantize_dequantize(&tensor(xs), iv, &spec);
        let twice = quant::quantize_dequantize(&once, iv, &spec);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn quantization_is_monotone(spec in spec_strategy(), i in 1e-3f64..10.0, a in -500.0f64..500.0, b in -500.0f64..500.0) {
        let iv = Interval::new(i).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let q = quant::quantize_dequantize(&tensor(vec![lo, hi]), iv, &spec);
        prop_assert!(q.data()[0] <= q.data()[1]);
    }

    #[test]
    fn disabled_spec_is_identity(spec in spec_strategy(), i in 1e-3f64..10.0, xs in prop::collection::vec(-500.0f64..500.0, 1..64)) {
        let x = tensor(xs);
        prop_assert_eq!(quant::quantize_dequantize(&x, Interval::new(i).unwrap(), &spec.disabled()), x);
    }

    #[test]
    fn posterior_rows_sum_to_one(zs in prop::collection::vec(-50.0f64..50.0, 2..12), t in 0.1f64..10.0) {
        let z = Tensor::new(vec![1, zs.len()], zs).unwrap();
        let p = distill::softened_posterior(&z, Temperature::new(t).unwrap()).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(pairs in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 2..10), t in 0.5f64..5.0) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = a.len();
        let za = Tensor::new(vec![1, m], a).unwrap();
        let zb = Tensor::new(vec![1, m], b).unwrap();
        let t = Temperature::new(t).unwrap();
        prop_assert!(distill::kl_divergence(&za, &zb, t).unwrap() >= 0.0);
        prop_assert!(distill::kl_divergence(&za, &za, t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn higher_temperature_raises_entropy(zs in prop::collection::vec(-5.0f64..5.0, 2..8), t in 0.2f64..5.0, dt in 0.05f64..3.0) {
        let spread = zs.iter().cloned().fold(f64::MIN, f64::max) - zs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let z = Tensor::new(vec![1, zs.len()], zs).unwrap();
        let h = |t: f64| {
            let p = distill::softened_posterior(&z, Temperature::new(t).unwrap()).unwrap();
            -p.data().iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
        };
        prop_assert!(h(t + dt) > h(t));
    }

    #[test]
    fn composite_graphs_match_finite_differences(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..5) {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let a = Tensor::new(vec![rows, cols], draw(rows * cols)).unwrap();
        let w = Tensor::new(vec![cols, cols], draw(cols * cols)).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1])?;
            let e = g.exp(h);
            let l = g.log_softmax(e)?;
            let s = g.mul(l, h)?;
            Ok(g.mean(s))
        };
        let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ 1);
        prop_assert!(finite_difference_error(&[a, w], &f, &mut r2).unwrap() < 1e-5);
    }
}

#[test]
fn shared_subexpressions_match_the_unrolled_tree() {
    let x = Tensor::new(vec![3], vec![0.3, -1.1, 2.0]).unwrap();
    // DAG: y = exp(x) reused three times.
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = g.exp(xv);
    let p = g.mul(y, y).unwrap();
    let s = g.add(p, y).unwrap();
    let root = g.sum(s);
    let dag = g.backward(root).unwrap().get(xv).unwrap().clone();
    // Tree: each use recomputes its own exp(x).
    let mut g = Graph::new();
    let xv2 = g.variable(x);
    let (y1, y2, y3) = (g.exp(xv2), g.exp(xv2), g.exp(xv2));
    let p = g.mul(y1, y2).unwrap();
    let s = g.add(p, y3).unwrap();
    let root = g.sum(s);
    let tree = g.backward(root).unwrap().get(xv2).unwrap().clone();
    for (a, b) in dag.data().iter().zip(tree.data()) {
        assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
    }
}

#[test]
fn randomized_op_gradients() {
    // 100 random cases per differentiable op.
    let report = qkd_core::checks::gradcheck(100, 2024).unwrap();
    assert!(report.passed(), "{}", report);
}

#[test]
fn quantizer_property_suite() {
    let report = qkd_core::checks::quantcheck(10_000, 2024).unwrap();
    assert!(report.passed(), "{}", report);
}
