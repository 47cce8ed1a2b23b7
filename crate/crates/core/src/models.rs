//! Desk-scale teacher/student architectures with quantized conv and
//! linear layers.
//!
//! Every conv and linear layer owns a weight quantizer (signed grid) and an
//! input quantizer, each with its own trainable interval. The first and last
//! of these layers always run at 8 bits. The network input is not a ReLU
//! output, so the first layer quantizes its input on a signed grid; every
//! other input quantizer is unsigned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{QkdError, Result};
use crate::optim::{IntervalRole, ParamKind, Parameter};
use crate::quant::{self, QuantSpec, SteMode};
use crate::tensor::Tensor;

/// Bit-width of the first and last quantized layers.
pub const EDGE_LAYER_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Vector(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Vector(d) => vec![d],
            InputShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [d] if d > 0 => Ok(InputShape::Vector(d)),
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(InputShape::Image {
                channels: c,
                height: h,
                width: w,
            }),
            _ => Err(QkdError::Spec(format!("unsupported input dims {:?}", dims))),
        }
    }
}

/// Weight and input quantizers of one conv/linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub weight: QuantSpec,
    pub input: QuantSpec,
}

impl LayerQuant {
    fn for_position(bits: u32, first: bool, last: bool) -> Result<Self> {
        let k = if first || last { EDGE_LAYER_BITS } else { bits };
        let input = if first {
            QuantSpec::signed(k)?
        } else {
            QuantSpec::unsigned(k)?
        };
        Ok(LayerQuant {
            weight: QuantSpec::signed(k)?,
            input,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        quant: LayerQuant,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        quant: LayerQuant,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
    /// Per-channel scale and shift.
    Affine { channels: usize },
    /// `relu(x + affine(conv(relu(affine(conv(x))))))` with 3×3 convs that
    /// keep the channel count and resolution.
    Residual { channels: usize, quant: [LayerQuant; 2] },
}

impl LayerSpec {
    fn quant_slots(&mut self) -> Vec<&mut LayerQuant> {
        match self {
            LayerSpec::Conv { quant, .. } | LayerSpec::Linear { quant, .. } => vec![quant],
            LayerSpec::Residual { quant, .. } => quant.iter_mut().collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: InputShape,
    pub num_classes: usize,
    pub bits: u32,
    pub layers: Vec<LayerSpec>,
}

/// Names accepted by [`NetworkSpec::named`].
pub const ZOO: [&str; 6] = [
    "mlp-s",
    "mlp-t",
    "tiny-cnn-s",
    "tiny-cnn-t",
    "mini-resnet-s",
    "mini-resnet-t",
];

fn placeholder_quant() -> LayerQuant {
    LayerQuant {
        weight: QuantSpec::signed(EDGE_LAYER_BITS).expect("8-bit spec"),
        input: QuantSpec::unsigned(EDGE_LAYER_BITS).expect("8-bit spec"),
    }
}

fn conv(cin: usize, cout: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride,
        padding: 1,
        quant: placeholder_quant(),
    }
}

fn linear(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Linear {
        in_features: i,
        out_features: o,
        quant: placeholder_quant(),
    }
}

fn conv_block(cin: usize, cout: usize, stride: usize) -> [LayerSpec; 3] {
    [conv(cin, cout, stride), LayerSpec::Affine { channels: cout }, LayerSpec::Relu]
}

fn residual(c: usize) -> LayerSpec {
    LayerSpec::Residual {
        channels: c,
        quant: [placeholder_quant(); 2],
    }
}

impl NetworkSpec {
    /// Validates a hand-built architecture and assigns quantizers for `bits`.
    pub fn new(
        name: impl Into<String>,
        input: InputShape,
        num_classes: usize,
        bits: u32,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            name: name.into(),
            input,
            num_classes,
            bits,
            layers,
        }
        .with_bits(bits)?;
        spec.validate()?;
        Ok(spec)
    }

    /// One of the [`ZOO`] architectures. `-t` variants are the teachers and
    /// are twice as wide as their `-s` students.
    pub fn named(name: &str, input: InputShape, num_classes: usize, bits: u32) -> Result<Self> {
        let (family, width) = match name.rsplit_once('-') {
            Some((f, "s")) => (f, 1),
            Some((f, "t")) => (f, 2),
            _ => return Err(QkdError::Spec(format!("unknown network '{}'", name))),
        };
        let m = num_classes;
        let layers = match (family, input) {
            ("mlp", _) => {
                let d: usize = input.dims().iter().product();
                let h = 32 * width;
                let mut l = Vec::new();
                if matches!(input, InputShape::Image { .. }) {
                    l.push(LayerSpec::Flatten);
                }
                l.extend([
                    linear(d, h),
                    LayerSpec::Relu,
                    linear(h, h),
                    LayerSpec::Relu,
                    linear(h, h),
                    LayerSpec::Relu,
                    linear(h, m),
                ]);
                l
            }
            ("tiny-cnn", InputShape::Image { channels, .. }) => {
                let c = 8 * width;
                let mut l = Vec::new();
                l.extend(conv_block(channels, c, 1));
                l.extend(conv_block(c, 2 * c, 2));
                l.extend(conv_block(2 * c, 2 * c, 2));
                l.extend([LayerSpec::GlobalAvgPool, linear(2 * c, m)]);
                l
            }
            ("mini-resnet", InputShape::Image { channels, .. }) => {
                let c = 8 * width;
                let mut l = Vec::new();
                l.extend(conv_block(channels, c, 1));
                l.push(residual(c));
                l.extend(conv_block(c, 2 * c, 2));
                l.push(residual(2 * c));
                l.extend(conv_block(2 * c, 4 * c, 2));
                l.push(residual(4 * c));
                l.extend([LayerSpec::GlobalAvgPool, linear(4 * c, m)]);
                l
            }
            ("tiny-cnn" | "mini-resnet", InputShape::Vector(_)) => {
                return Err(QkdError::Spec(format!("'{}' needs image input", name)))
            }
            _ => return Err(QkdError::Spec(format!("unknown network '{}'", name))),
        };
        NetworkSpec::new(name, input, num_classes, bits, layers)
    }

    /// Same architecture with every quantizer re-derived for `bits`; the
    /// first and last quantized layers stay at 8 bits.
    pub fn with_bits(&self, bits: u32) -> Result<Self> {
        let mut spec = self.clone();
        spec.bits = bits;
        let total: usize = spec.layers.iter_mut().map(|l| l.quant_slots().len()).sum();
        let mut pos = 0;
        for layer in &mut spec.layers {
            for q in layer.quant_slots() {
                *q = LayerQuant::for_position(bits, pos == 0, pos + 1 == total)?;
                pos += 1;
            }
        }
        Ok(spec)
    }

    /// Walks the layers propagating the per-sample shape.
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(QkdError::Spec("need at least 2 classes".into()));
        }
        let err = |i: usize, msg: String| QkdError::Spec(format!("layer {}: {}", i, msg));
        let mut shape = self.input.dims();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(err(i, format!("conv needs an image, got {:?}", shape)));
                    };
                    if c != *in_channels {
                        return Err(err(i, format!("conv expects {} channels, got {}", in_channels, c)));
                    }
                    if *stride == 0 || *kernel == 0 || *kernel > h + 2 * padding || *kernel > w + 2 * padding {
                        return Err(err(i, "conv geometry does not fit the input".into()));
                    }
                    shape = vec![
                        *out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ];
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if shape != [*in_features] {
                        return Err(err(i, format!("linear expects [{}], got {:?}", in_features, shape)));
                    }
                    shape = vec![*out_features];
                }
                LayerSpec::Relu => {}
                LayerSpec::GlobalAvgPool => match shape[..] {
                    [c, _, _] => shape = vec![c],
                    _ => return Err(err(i, "pooling needs an image".into())),
                },
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
                LayerSpec::Affine { channels } | LayerSpec::Residual { channels, .. } => {
                    if shape.first() != Some(channels) {
                        return Err(err(i, format!("expects {} channels, got {:?}", channels, shape)));
                    }
                    if matches!(layer, LayerSpec::Residual { .. }) && shape.len() != 3 {
                        return Err(err(i, "residual block needs an image".into()));
                    }
                }
            }
        }
        if shape != [self.num_classes] {
            return Err(QkdError::Spec(format!(
                "network output {:?} does not match {} classes",
                shape, self.num_classes
            )));
        }
        Ok(())
    }

    /// Number of quantized (conv or linear) layers.
    pub fn quantized_layer_count(&self) -> usize {
        let mut spec = self.clone();
        spec.layers.iter_mut().map(|l| l.quant_slots().len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    FullPrecision,
    Quantized,
}

/// Parameter indices of one quantized conv/linear layer.
#[derive(Debug, Clone, Copy)]
struct QSlot {
    weight: usize,
    iw: usize,
    ix: usize,
    quant: LayerQuant,
}

#[derive(Debug, Clone)]
enum Slots {
    Conv { q: QSlot, stride: usize, padding: usize },
    Linear { q: QSlot, bias: usize },
    Affine { scale: usize, shift: usize },
    Relu,
    Pool,
    Flatten,
    Residual { c1: QSlot, a1: (usize, usize), c2: QSlot, a2: (usize, usize) },
}

/// Trainable parameters of a network together with its architecture.
#[derive(Debug, Clone)]
pub struct NetworkState {
    spec: NetworkSpec,
    params: Vec<Parameter>,
    slots: Vec<Slots>,
    precision: Precision,
    intervals_ready: bool,
    ste: SteMode,
}

impl PartialEq for NetworkState {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.params == other.params
            && self.precision == other.precision
            && self.intervals_ready == other.intervals_ready
            && self.ste == other.ste
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Last-block featuremap: the input of the final pooling layer, or of
    /// the final linear layer when the network has no pooling.
    pub features: Var,
    param_vars: Vec<Option<Var>>,
}

struct Builder<'a> {
    params: &'a mut Vec<Parameter>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Tensor, kind: ParamKind) -> usize {
        self.params.push(Parameter::new(name, value, kind));
        self.params.len() - 1
    }

    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, Tensor::from_parts(shape.to_vec(), data), ParamKind::Weight)
    }

    fn qslot(&mut self, prefix: &str, wshape: &[usize], fan_in: usize, quant: LayerQuant) -> QSlot {
        let weight = self.he(format!("{}.weight", prefix), wshape, fan_in);
        let iw = self.push(
            format!("{}.interval_w", prefix),
            Tensor::scalar(1.0),
            ParamKind::Interval(IntervalRole::Weight),
        );
        let ix = self.push(
            format!("{}.interval_x", prefix),
            Tensor::scalar(1.0),
            ParamKind::Interval(IntervalRole::Activation),
        );
        QSlot {
            weight,
            iw,
            ix,
            quant,
        }
    }

    fn affine(&mut self, prefix: &str, c: usize) -> (usize, usize) {
        (
            self.push(format!("{}.scale", prefix), Tensor::ones(&[c]), ParamKind::Weight),
            self.push(format!("{}.shift", prefix), Tensor::zeros(&[c]), ParamKind::Weight),
        )
    }
}

fn layout(spec: &NetworkSpec, params: &mut Vec<Parameter>, seed: u64) -> Vec<Slots> {
    let mut b = Builder {
        params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut slots = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = format!("layer{}", i);
        slots.push(match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                quant,
            } => Slots::Conv {
                q: b.qslot(
                    &p,
                    &[out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    quant,
                ),
                stride,
                padding,
            },
            LayerSpec::Linear {
                in_features,
                out_features,
                quant,
            } => {
                let q = b.qslot(&p, &[in_features, out_features], in_features, quant);
                let bias = b.push(format!("{}.bias", p), Tensor::zeros(&[out_features]), ParamKind::Weight);
                Slots::Linear { q, bias }
            }
            LayerSpec::Affine { channels } => {
                let (scale, shift) = b.affine(&p, channels);
                Slots::Affine { scale, shift }
            }
            LayerSpec::Relu => Slots::Relu,
            LayerSpec::GlobalAvgPool => Slots::Pool,
            LayerSpec::Flatten => Slots::Flatten,
            LayerSpec::Residual { channels: c, quant } => {
                let fan = c * 9;
                let c1 = b.qslot(&format!("{}.conv1", p), &[c, c, 3, 3], fan, quant[0]);
                let a1 = b.affine(&format!("{}.affine1", p), c);
                let c2 = b.qslot(&format!("{}.conv2", p), &[c, c, 3, 3], fan, quant[1]);
                let a2 = b.affine(&format!("{}.affine2", p), c);
                Slots::Residual { c1, a1, c2, a2 }
            }
        });
    }
    slots
}

struct Pass<'a> {
    state: &'a NetworkState,
    g: &'a mut Graph,
    vars: Vec<Option<Var>>,
    trainable: bool,
    quantize: bool,
    ranges: Option<&'a mut Vec<(f64, f64)>>,
}

impl Pass<'_> {
    fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let t = self.state.params[idx].value.clone();
        let v = if self.trainable {
            self.g.variable(t)
        } else {
            self.g.constant(t)
        };
        self.vars[idx] = Some(v);
        v
    }

    /// Quantized (or pass-through) input and weight of one layer.
    fn operands(&mut self, x: Var, q: &QSlot) -> Result<(Var, Var)> {
        if let Some(r) = self.ranges.as_deref_mut() {
            r.push(self.g.value(x).min_max());
        }
        let w = self.param(q.weight);
        if !self.quantize {
            return Ok((x, w));
        }
        let ste = self.state.ste;
        let xq = if q.quant.input.enabled {
            let ix = self.param(q.ix);
            self.g.fake_quant(x, ix, q.quant.input, ste)?
        } else {
            x
        };
        let wq = if q.quant.weight.enabled {
            let iw = self.param(q.iw);
            self.g.fake_quant(w, iw, q.quant.weight, ste)?
        } else {
            w
        };
        Ok((xq, wq))
    }

    fn conv(&mut self, x: Var, q: &QSlot, stride: usize, padding: usize) -> Result<Var> {
        let (xq, wq) = self.operands(x, q)?;
        self.g.conv2d(xq, wq, stride, padding)
    }

    fn affine(&mut self, x: Var, (s, t): (usize, usize)) -> Result<Var> {
        let s = self.param(s);
        let t = self.param(t);
        self.g.channel_affine(x, s, t)
    }

    fn run(&mut self, input: Var) -> Result<(Var, Var)> {
        let slots = &self.state.slots;
        let last_pool = slots.iter().rposition(|s| matches!(s, Slots::Pool));
        let last_linear = slots.iter().rposition(|s| matches!(s, Slots::Linear { .. }));
        let feature_at = last_pool.or(last_linear);
        let mut x = input;
        let mut features = input;
        for (i, slot) in slots.iter().enumerate() {
            if Some(i) == feature_at {
                features = x;
            }
            x = match slot {
                Slots::Conv { q, stride, padding } => self.conv(x, q, *stride, *padding)?,
                Slots::Linear { q, bias } => {
                    let (xq, wq) = self.operands(x, q)?;
                    let y = self.g.matmul(xq, wq)?;
                    let b = self.param(*bias);
                    self.g.channel_bias(y, b)?
                }
                Slots::Affine { scale, shift } => self.affine(x, (*scale, *shift))?,
                Slots::Relu => self.g.relu(x),
                Slots::Pool => self.g.global_avg_pool(x)?,
                Slots::Flatten => self.g.flatten(x)?,
                Slots::Residual { c1, a1, c2, a2 } => {
                    let h = self.conv(x, c1, 1, 1)?;
                    let h = self.affine(h, *a1)?;
                    let h = self.g.relu(h);
                    let h = self.conv(h, c2, 1, 1)?;
                    let h = self.affine(h, *a2)?;
                    let s = self.g.add(h, x)?;
                    self.g.relu(s)
                }
            };
        }
        Ok((x, features))
    }
}

impl NetworkState {
    /// Fresh network with He-normal weights, unit affine scales, zero
    /// biases and shifts. Intervals are placeholders until
    /// [`NetworkState::init_intervals_minmax`] runs.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let slots = layout(spec, &mut params, seed);
        Ok(NetworkState {
            spec: spec.clone(),
            params,
            slots,
            precision: Precision::FullPrecision,
            intervals_ready: false,
            ste: SteMode::default(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn intervals_ready(&self) -> bool {
        self.intervals_ready
    }

    pub fn ste(&self) -> SteMode {
        self.ste
    }

    pub fn set_ste(&mut self, ste: SteMode) {
        self.ste = ste;
    }

    /// Re-derives every quantizer for a new target bit-width.
    pub fn set_bits(&mut self, bits: u32) -> Result<()> {
        let spec = self.spec.with_bits(bits)?;
        let mut scratch = Vec::new();
        self.slots = layout(&spec, &mut scratch, 0);
        self.spec = spec;
        Ok(())
    }

    pub fn reset_optimizer_state(&mut self) {
        self.params.iter_mut().for_each(Parameter::reset_state);
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn qslots(&self) -> Vec<QSlot> {
        let mut out = Vec::new();
        for s in &self.slots {
            match s {
                Slots::Conv { q, .. } | Slots::Linear { q, .. } => out.push(*q),
                Slots::Residual { c1, c2, .. } => out.extend([*c1, *c2]),
                _ => {}
            }
        }
        out
    }

    /// Quantizers of each conv/linear layer in execution order.
    pub fn layer_quant(&self) -> Vec<LayerQuant> {
        self.qslots().iter().map(|q| q.quant).collect()
    }

    /// `(I_W, I_X)` of each conv/linear layer in execution order.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.qslots()
            .iter()
            .map(|q| (self.params[q.iw].value.item(), self.params[q.ix].value.item()))
            .collect()
    }

    /// Weights as the forward pass sees them in the current precision mode.
    pub fn effective_weights(&self) -> Result<Vec<Tensor>> {
        self.qslots()
            .iter()
            .map(|q| {
                let w = &self.params[q.weight].value;
                if self.precision == Precision::Quantized && q.quant.weight.enabled {
                    quant::quantize_dequantize_checked(w, self.params[q.iw].value.item(), &q.quant.weight)
                } else {
                    Ok(w.clone())
                }
            })
            .collect()
    }

    /// Sets every interval from the weight ranges and the input ranges seen
    /// by a full-precision pass over `probe`.
    pub fn init_intervals_minmax(&mut self, probe: &Tensor) -> Result<()> {
        let mut ranges = Vec::new();
        {
            let mut g = Graph::new();
            self.run_pass(&mut g, probe, false, false, Some(&mut ranges))?;
        }
        for (q, (lo, hi)) in self.qslots().into_iter().zip(ranges) {
            let iw = quant::minmax_interval(&self.params[q.weight].value, &q.quant.weight)?;
            let ix = quant::interval_from_range(lo, hi, &q.quant.input);
            self.params[q.iw].value = Tensor::scalar(iw);
            self.params[q.ix].value = Tensor::scalar(ix);
        }
        self.intervals_ready = true;
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let want = self.spec.input.dims();
        if input.rank() != want.len() + 1 || input.shape()[1..] != want[..] {
            return Err(QkdError::Dimension(format!(
                "network '{}' expects [N, {:?}] input, got {:?}",
                self.spec.name,
                want,
                input.shape()
            )));
        }
        Ok(())
    }

    fn run_pass(
        &self,
        g: &mut Graph,
        input: &Tensor,
        trainable: bool,
        quantize: bool,
        ranges: Option<&mut Vec<(f64, f64)>>,
    ) -> Result<Forward> {
        self.check_input(input)?;
        let x = g.constant(input.clone());
        let mut pass = Pass {
            state: self,
            g,
            vars: vec![None; self.params.len()],
            trainable,
            quantize,
            ranges,
        };
        let (logits, features) = pass.run(x)?;
        Ok(Forward {
            logits,
            features,
            param_vars: pass.vars,
        })
    }

    /// Records a forward pass on `g`. With `trainable` set, parameters are
    /// graph variables whose gradients [`NetworkState::accumulate_grads`]
    /// can collect; otherwise they are constants.
    pub fn forward_graph(&self, g: &mut Graph, input: &Tensor, trainable: bool) -> Result<Forward> {
        let quantize = match self.precision {
            Precision::FullPrecision => false,
            Precision::Quantized if self.intervals_ready => true,
            Precision::Quantized => {
                return Err(QkdError::State(format!(
                    "network '{}' is in quantized mode but its intervals are not initialized",
                    self.spec.name
                )))
            }
        };
        self.run_pass(g, input, trainable, quantize, None)
    }

    /// Logits for a batch, without gradient bookkeeping.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, input, false)?;
        Ok(g.value(f.logits).clone())
    }

    /// Logits and last-block features for a batch.
    pub fn forward_with_features(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, input, false)?;
        Ok((g.value(f.logits).clone(), g.value(f.features).clone()))
    }

    /// Adds the gradients of one backward pass into `Parameter::grad`.
    pub fn accumulate_grads(&mut self, fwd: &Forward, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&fwd.param_vars) {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                p.grad.add_assign(g);
            }
        }
    }

    pub(crate) fn from_parts(
        spec: NetworkSpec,
        params: Vec<Parameter>,
        precision: Precision,
        intervals_ready: bool,
        ste: SteMode,
    ) -> Result<Self> {
        let mut reference = Vec::new();
        let slots = layout(&spec, &mut reference, 0);
        if reference.len() != params.len() {
            return Err(QkdError::Spec(format!(
                "'{}' has {} parameters, got {}",
                spec.name,
                reference.len(),
                params.len()
            )));
        }
        for (r, p) in reference.iter().zip(&params) {
            if r.name != p.name || r.value.shape() != p.value.shape() || r.kind != p.kind {
                return Err(QkdError::Spec(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    p.name,
                    p.value.shape(),
                    r.name,
                    r.value.shape()
                )));
            }
        }
        Ok(NetworkState {
            spec,
            params,
            slots,
            precision,
            intervals_ready,
            ste,
        })
    }
}
