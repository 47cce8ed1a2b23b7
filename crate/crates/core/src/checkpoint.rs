//! Binary checkpoint format.
//!
//! ```text
//! "QKDF" | version u32 | name (u32 len + utf-8) | num_classes u32 | bits u32
//! | input rank u32 + dims u32... | precision u8 | intervals_ready u8 | ste u8
//! | param count u32 | params...
//! param: name | kind u8 | rank u32 | dims u64... | values f64...
//!        | slot flags u8 | adam steps u64 | momentum? adam_m? adam_v?
//! ```
//!
//! All integers and floats are little-endian. Values are written as raw
//! IEEE-754 bits, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{QkdError, Result};
use crate::models::{InputShape, NetworkSpec, NetworkState, Precision};
use crate::optim::{IntervalRole, OptimState, ParamKind, Parameter};
use crate::quant::SteMode;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QKDF";
pub const VERSION: u32 = 1;

const HAS_MOMENTUM: u8 = 1;
const HAS_ADAM_M: u8 = 2;
const HAS_ADAM_V: u8 = 4;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values(&mut self, t: &Tensor) {
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(QkdError::format(
                self.pos as u64,
                format!("truncated while reading {}", what),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| QkdError::format(at, format!("{} is not utf-8", what)))
    }
    fn values(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 8, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| QkdError::format(self.pos as u64, e.to_string()))
    }
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Interval(IntervalRole::Weight) => 1,
        ParamKind::Interval(IntervalRole::Activation) => 2,
    }
}

/// Serializes a network state, including optimizer moments.
pub fn encode(state: &NetworkState) -> Vec<u8> {
    let spec = state.spec();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&spec.name);
    w.u32(spec.num_classes as u32);
    w.u32(spec.bits);
    let dims = spec.input.dims();
    w.u32(dims.len() as u32);
    dims.iter().for_each(|&d| w.u32(d as u32));
    w.u8(match state.precision() {
        Precision::FullPrecision => 0,
        Precision::Quantized => 1,
    });
    w.u8(state.intervals_ready() as u8);
    w.u8(match state.ste() {
        SteMode::Clipped => 0,
        SteMode::Identity => 1,
    });
    w.u32(state.params().len() as u32);
    for p in state.params() {
        w.str(&p.name);
        w.u8(kind_code(p.kind));
        w.u32(p.value.rank() as u32);
        p.value.shape().iter().for_each(|&d| w.u64(d as u64));
        w.values(&p.value);
        let s = &p.state;
        let flags = s.momentum.as_ref().map_or(0, |_| HAS_MOMENTUM)
            | s.adam_m.as_ref().map_or(0, |_| HAS_ADAM_M)
            | s.adam_v.as_ref().map_or(0, |_| HAS_ADAM_V);
        w.u8(flags);
        w.u64(s.adam_steps);
        for t in [&s.momentum, &s.adam_m, &s.adam_v].into_iter().flatten() {
            w.values(t);
        }
    }
    w.0
}

/// Parses a checkpoint. When `expected_name` is given, a checkpoint for a
/// different architecture is rejected.
pub fn decode(bytes: &[u8], expected_name: Option<&str>) -> Result<NetworkState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(QkdError::format(0, "bad magic, expected \"QKDF\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(QkdError::format(4, format!("unsupported version {}", version)));
    }
    let name_at = r.pos as u64;
    let name = r.str("spec name")?;
    if let Some(want) = expected_name {
        if want != name {
            return Err(QkdError::format(
                name_at,
                format!("checkpoint is for '{}', expected '{}'", name, want),
            ));
        }
    }
    let num_classes = r.u32("class count")? as usize;
    let bits = r.u32("bits")?;
    let rank = r.u32("input rank")? as usize;
    if rank > 3 {
        return Err(QkdError::format(r.pos as u64 - 4, format!("input rank {}", rank)));
    }
    let dims = (0..rank)
        .map(|_| r.u32("input dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header_end = r.pos as u64;
    let input = InputShape::from_dims(&dims).map_err(|e| QkdError::format(header_end, e.to_string()))?;
    let precision = match r.u8("precision")? {
        0 => Precision::FullPrecision,
        1 => Precision::Quantized,
        v => return Err(QkdError::format(r.pos as u64 - 1, format!("precision code {}", v))),
    };
    let intervals_ready = r.u8("interval flag")? != 0;
    let ste = match r.u8("ste")? {
        0 => SteMode::Clipped,
        1 => SteMode::Identity,
        v => return Err(QkdError::format(r.pos as u64 - 1, format!("ste code {}", v))),
    };
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let pname = r.str("parameter name")?;
        let kind = match r.u8("parameter kind")? {
            0 => ParamKind::Weight,
            1 => ParamKind::Interval(IntervalRole::Weight),
            2 => ParamKind::Interval(IntervalRole::Activation),
            v => return Err(QkdError::format(r.pos as u64 - 1, format!("parameter kind {}", v))),
        };
        let prank = r.u32("parameter rank")? as usize;
        if prank > 8 {
            return Err(QkdError::format(r.pos as u64 - 4, format!("parameter rank {}", prank)));
        }
        let shape = (0..prank)
            .map(|_| r.u64("parameter dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let value = r.values(&shape, &pname)?;
        let flags = r.u8("slot flags")?;
        let adam_steps = r.u64("adam steps")?;
        let slot = |bit: u8, r: &mut Reader| -> Result<Option<Tensor>> {
            if flags & bit != 0 {
                r.values(&shape, "optimizer slot").map(Some)
            } else {
                Ok(None)
            }
        };
        let momentum = slot(HAS_MOMENTUM, &mut r)?;
        let adam_m = slot(HAS_ADAM_M, &mut r)?;
        let adam_v = slot(HAS_ADAM_V, &mut r)?;
        let mut p = Parameter::new(pname, value, kind);
        p.state = OptimState {
            momentum,
            adam_m,
            adam_v,
            adam_steps,
        };
        params.push(p);
    }
    if r.pos != bytes.len() {
        return Err(QkdError::format(r.pos as u64, "trailing bytes after last parameter"));
    }
    let spec = NetworkSpec::named(&name, input, num_classes, bits)
        .map_err(|e| QkdError::format(name_at, e.to_string()))?;
    NetworkState::from_parts(spec, params, precision, intervals_ready, ste)
        .map_err(|e| QkdError::format(header_end, e.to_string()))
}

pub fn save_state(state: &NetworkState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| QkdError::io(dir, e))?;
    }
    fs::write(path, encode(state)).map_err(|e| QkdError::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<NetworkState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| QkdError::io(path, e))?;
    decode(&bytes, None)
}

/// Loads a checkpoint that must belong to the named architecture.
pub fn load_state_for(path: impl AsRef<Path>, spec_name: &str) -> Result<NetworkState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| QkdError::io(path, e))?;
    decode(&bytes, Some(spec_name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim;

    fn trained_state() -> NetworkState {
        let spec = NetworkSpec::named("mlp-s", InputShape::Vector(4), 3, 2).unwrap();
        let mut s = NetworkState::build(&spec, 9).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.9, -1.0, 0.5, 0.0, 0.25]).unwrap();
        s.init_intervals_minmax(&x).unwrap();
        s.set_precision(Precision::Quantized);
        for p in s.params_mut() {
            p.grad = p.value.map(|v| v * 0.5 + 0.01);
        }
        let (w, i): (Vec<_>, Vec<_>) = s.params_mut().iter_mut().partition(|p| p.kind == ParamKind::Weight);
        optim::sgd_step(w, 0.1, 0.9, 1e-4).unwrap();
        optim::adam_step(i, 0.01, 0.9, 0.999, 1e-8).unwrap();
        // Gradients are transient and not persisted.
        s.zero_grads();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = trained_state();
        let bytes = encode(&s);
        let back = decode(&bytes, None).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.intervals(), s.intervals());
        assert!(back.params().iter().any(|p| p.state.adam_m.is_some()));
    }

    #[test]
    fn wrong_name_rejected() {
        let bytes = encode(&trained_state());
        match decode(&bytes, Some("mlp-t")) {
            Err(QkdError::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&trained_state());
        assert!(matches!(decode(&bytes[..bytes.len() - 3], None), Err(QkdError::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, None), Err(QkdError::Format { offset: 0, .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode(&ver, None), Err(QkdError::Format { offset: 4, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, None).is_err());
    }
}
