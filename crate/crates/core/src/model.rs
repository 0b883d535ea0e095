//! The backbone network, its parameters and checkpoint files.
//!
//! The backbone is a stack of conv+ReLU blocks followed by global average
//! pooling and a linear head producing one logit per class. Predictions are
//! the elementwise sigmoid of those logits. Both training branches call the
//! same forward function with the same [`ModelParams`], so weight sharing is
//! structural rather than a copy.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Tensor, Var};

/// Shape of the backbone: one conv block per entry of `widths`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 64,
            width: 64,
            widths: vec![16, 32, 64],
            kernel_sizes: vec![3, 3, 3],
            strides: vec![2, 2, 2],
            num_classes: 8,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("architecture: {msg}")));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return bad("input channels and size must be positive".into());
        }
        if self.widths.is_empty() {
            return bad("at least one conv block is required".into());
        }
        if self.kernel_sizes.len() != self.widths.len() || self.strides.len() != self.widths.len() {
            return bad(format!(
                "widths, kernel_sizes and strides must have equal length ({}, {}, {})",
                self.widths.len(),
                self.kernel_sizes.len(),
                self.strides.len()
            ));
        }
        if self.widths.contains(&0) || self.kernel_sizes.contains(&0) || self.strides.contains(&0) {
            return bad("widths, kernel sizes and strides must be positive".into());
        }
        let (mut h, mut w) = (self.height, self.width);
        for (i, (&k, &s)) in self.kernel_sizes.iter().zip(&self.strides).enumerate() {
            let pad = k / 2;
            if k > h + 2 * pad || k > w + 2 * pad {
                return bad(format!("block {} kernel {k} larger than its {h}x{w} input", i + 1));
            }
            h = (h + 2 * pad - k) / s + 1;
            w = (w + 2 * pad - k) / s + 1;
        }
        Ok(())
    }

    /// One-line `key=value` rendering used in checkpoint headers.
    pub fn describe(&self) -> String {
        format!(
            "in_channels={} height={} width={} widths={} kernels={} strides={} classes={}",
            self.in_channels,
            self.height,
            self.width,
            join(&self.widths),
            join(&self.kernel_sizes),
            join(&self.strides),
            self.num_classes
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let err = |d: String| Error::format("architecture descriptor", d);
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| x.parse().map_err(|_| err(format!("bad list entry {x:?}"))))
                .collect()
        };
        let mut arch = Architecture {
            widths: Vec::new(),
            kernel_sizes: Vec::new(),
            strides: Vec::new(),
            ..Default::default()
        };
        let mut seen = HashSet::new();
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {field:?}")))?;
            let num = || value.parse::<usize>().map_err(|_| err(format!("bad {key} {value:?}")));
            match key {
                "in_channels" => arch.in_channels = num()?,
                "height" => arch.height = num()?,
                "width" => arch.width = num()?,
                "classes" => arch.num_classes = num()?,
                "widths" => arch.widths = list(value)?,
                "kernels" => arch.kernel_sizes = list(value)?,
                "strides" => arch.strides = list(value)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
            seen.insert(key);
        }
        if seen.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", seen.len())));
        }
        arch.validate()?;
        Ok(arch)
    }

    /// Expected `(name, shape)` of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_c = self.in_channels;
        for (i, (&w, &k)) in self.widths.iter().zip(&self.kernel_sizes).enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![w, in_c, k, k]));
            out.push((format!("conv{}.bias", i + 1), vec![w]));
            in_c = w;
        }
        out.push(("head.weight".into(), vec![self.num_classes, in_c]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

/// The learnable parameters of one backbone, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    tensors: Vec<(String, Tensor)>,
}

/// Fan-in of a weight tensor: every dimension except the leading one.
pub fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

/// He-uniform bound `sqrt(6 / fan_in)`, giving standard deviation `sqrt(2 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl ModelParams {
    /// Weights drawn from a fan-in scaled uniform distribution, biases zero.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".weight") {
                    let b = init_bound(fan_in(&shape));
                    let dist = Uniform::new_inclusive(-b, b);
                    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
                } else {
                    Tensor::zeros(shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    /// Builds a parameter set from explicit tensors, checking names and shapes.
    pub fn from_tensors(arch: &Architecture, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::ArchMismatch {
                expected: format!("{} parameter tensors", expected.len()),
                found: format!("{}", tensors.len()),
            });
        }
        for ((ename, eshape), (name, t)) in expected.iter().zip(&tensors) {
            if ename != name || eshape.as_slice() != t.shape() {
                return Err(Error::ArchMismatch {
                    expected: format!("{ename} {eshape:?}"),
                    found: format!("{name} {:?}", t.shape()),
                });
            }
            t.check_finite(name)?;
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        self.tensors.iter().try_for_each(|(n, t)| t.check_finite(n))
    }

    /// FNV-1a hash over names, shapes and the exact bits of every value.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            t.shape().iter().for_each(|d| eat(&(*d as u64).to_le_bytes()));
            t.data().iter().for_each(|v| eat(&v.to_bits().to_le_bytes()));
        }
        h
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(_, t)| graph.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Graph handles for one [`ModelParams`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; zeros where nothing reached a leaf.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
            })
            .collect()
    }
}

/// Records the backbone forward pass for `input[N,C,H,W]`, returning `[N,K]` logits.
pub fn forward(arch: &Architecture, graph: &mut Graph, params: &BoundParams, input: Var) -> Result<Var> {
    let s = graph.value(input).shape();
    if s.len() != 4 || s[1] != arch.in_channels || s[2] != arch.height || s[3] != arch.width {
        return Err(Error::shape(
            "forward",
            format!(
                "expected input [N,{},{},{}], got {s:?}",
                arch.in_channels, arch.height, arch.width
            ),
        ));
    }
    let v = params.vars();
    let mut h = input;
    for (i, (&k, &stride)) in arch.kernel_sizes.iter().zip(&arch.strides).enumerate() {
        let conv = graph.conv2d(h, v[2 * i], v[2 * i + 1], stride, k / 2)?;
        h = graph.relu(conv);
    }
    let pooled = graph.global_avg_pool(h)?;
    let n = arch.widths.len();
    graph.linear(pooled, v[2 * n], v[2 * n + 1])
}

/// Rows per chunk when scoring large batches without gradients.
const INFERENCE_CHUNK: usize = 64;

/// Logits for a batch without recording gradients.
pub fn forward_logits(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let count = INFERENCE_CHUNK.min(n - start);
        let chunk = if count == n { batch.clone() } else { batch.slice_rows(start, count)? };
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(chunk);
        let out = forward(params.arch(), &mut g, &bound, x)?;
        parts.push(g.value(out).clone());
        start += count;
    }
    if parts.is_empty() {
        return Err(Error::Empty("prediction batch".into()));
    }
    Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
}

/// Class probabilities `sigmoid(f(I))`.
pub fn predict(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    Ok(sigmoid(&forward_logits(params, batch)?))
}

const MAGIC: &[u8; 8] = b"MSLCKPT1";

/// Writes a checkpoint: magic, u64 LE header length, text header, raw LE f64 data.
///
/// Header lines are `arch <descriptor>` followed by one
/// `param <name> <dims joined by x> <byte offset> f64le` per tensor.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut header = format!("arch {}\n", params.arch.describe());
    let mut offset = 0usize;
    for (name, t) in &params.tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("param {name} {} {offset} f64le\n", dims.join("x")));
        offset += t.len() * 8;
    }
    let mut bytes = Vec::with_capacity(16 + header.len() + offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for t in params.tensors() {
        t.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { detail, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })
}

/// Loads a checkpoint and checks it was saved for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &Architecture) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.arch() != expected {
        let (e, f) = (expected, params.arch());
        let (expected, found) = if e.num_classes != f.num_classes {
            (format!("K={}", e.num_classes), format!("K={}", f.num_classes))
        } else {
            (e.describe(), f.describe())
        };
        return Err(Error::ArchMismatch { expected, found });
    }
    Ok(params)
}

fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let err = |d: String| Error::format("checkpoint", d);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("missing magic bytes".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| err(format!("header length {header_len} exceeds file size")))?;
    let header = std::str::from_utf8(&bytes[16..data_start]).map_err(|_| err("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    let arch_line = lines
        .next()
        .and_then(|l| l.strip_prefix("arch "))
        .ok_or_else(|| err("first header line must start with `arch `".into()))?;
    let arch = Architecture::parse(arch_line)?;

    let data = &bytes[data_start..];
    let mut expected_offset = 0usize;
    let mut tensors = Vec::new();
    let mut names = HashSet::new();
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        let [tag, name, dims, offset, dtype] = fields[..] else {
            return Err(err(format!("bad header line {line:?}")));
        };
        if tag != "param" || dtype != "f64le" {
            return Err(err(format!("bad header line {line:?}")));
        }
        if !names.insert(name) {
            return Err(err(format!("duplicate parameter {name}")));
        }
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| err(format!("bad shape {dims:?}"))))
            .collect::<Result<_>>()?;
        let offset: usize = offset.parse().map_err(|_| err(format!("bad offset {offset:?}")))?;
        if offset != expected_offset {
            return Err(err(format!("{name}: offset {offset}, expected {expected_offset}")));
        }
        let count: usize = shape.iter().product();
        let end = offset + count * 8;
        if end > data.len() {
            return Err(err(format!(
                "truncated data: {name} needs bytes {offset}..{end}, file has {}",
                data.len()
            )));
        }
        let values = data[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name.to_string(), Tensor::new(shape, values)?));
        expected_offset = end;
    }
    if expected_offset != data.len() {
        return Err(err(format!(
            "{} trailing bytes after parameter data",
            data.len() - expected_offset
        )));
    }
    ModelParams::from_tensors(&arch, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(k: usize) -> Architecture {
        Architecture {
            in_channels: 3,
            height: 8,
            width: 8,
            widths: vec![2, 3],
            kernel_sizes: vec![3, 3],
            strides: vec![1, 2],
            num_classes: k,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = Architecture::default();
        let a = ModelParams::init(&arch, 7).unwrap();
        let b = ModelParams::init(&arch, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert_ne!(a, ModelParams::init(&arch, 8).unwrap());
    }

    #[test]
    fn init_std_matches_fan_in_target() {
        // conv3 of the default architecture has 64*32*3*3 = 18432 weights.
        let params = ModelParams::init(&Architecture::default(), 3).unwrap();
        let w = params.get("conv3.weight").unwrap();
        assert!(w.len() >= 10_000);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0 / fan_in(w.shape()) as f64).sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "std {std} target {target}");
    }

    #[test]
    fn invalid_descriptors_are_rejected() {
        let mut arch = tiny_arch(0);
        assert!(ModelParams::init(&arch, 0).is_err());
        arch.num_classes = 2;
        arch.strides.pop();
        assert!(arch.validate().is_err());
    }

    #[test]
    fn zero_model_predicts_one_half() {
        let arch = tiny_arch(4);
        let mut params = ModelParams::init(&arch, 1).unwrap();
        params.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let batch = Tensor::from_fn(vec![2, 3, 8, 8], |i| (i % 7) as f64 / 7.0);
        let logits = forward_logits(&params, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = predict(&params, &batch).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn duplicated_rows_give_identical_logits() {
        let arch = tiny_arch(3);
        let params = ModelParams::init(&arch, 5).unwrap();
        let img = Tensor::from_fn(vec![1, 3, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0);
        let batch = Tensor::stack_rows(&[&img, &img]).unwrap();
        let before = params.fingerprint();
        let logits = forward_logits(&params, &batch).unwrap();
        assert_eq!(logits.data()[..3], logits.data()[3..]);
        assert_eq!(before, params.fingerprint());
        let p = predict(&params, &batch).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_rejects_wrong_input_size() {
        let arch = tiny_arch(3);
        let params = ModelParams::init(&arch, 5).unwrap();
        let err = forward_logits(&params, &Tensor::zeros(vec![1, 3, 9, 8])).unwrap_err();
        assert!(err.to_string().contains("expected input"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arch = tiny_arch(3);
        let params = ModelParams::init(&arch, 11).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint_for(&path, &arch).unwrap();
        assert_eq!(params.fingerprint(), loaded.fingerprint());
        let batch = Tensor::from_fn(vec![2, 3, 8, 8], |i| (i % 5) as f64 * 0.2);
        let a = forward_logits(&params, &batch).unwrap();
        let b = forward_logits(&loaded, &batch).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ModelParams::init(&tiny_arch(3), 1).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [4, 20, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(load_checkpoint(&path).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn mismatched_class_count_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ModelParams::init(&tiny_arch(3), 1).unwrap(), &path).unwrap();
        let err = load_checkpoint_for(&path, &tiny_arch(5)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("K=5") && msg.contains("K=3"), "{msg}");
    }

    #[test]
    fn descriptor_round_trips() {
        let arch = Architecture::default();
        assert_eq!(Architecture::parse(&arch.describe()).unwrap(), arch);
    }
}
