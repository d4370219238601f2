//! On-disk formats.
//!
//! Binary files are little-endian and start with a 4-byte magic and a `u16`
//! version. Values are stored as `f32`, so `f32` data round-trips bitwise and
//! `f64` data round-trips through `f32` rounding. Text files are line-based
//! `key = value` documents. Every file is published atomically (temp file +
//! rename in the target directory).
//!
//! Tensor file layout (`SCAP`):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SCAP`                            |
//! | 4      | 2    | version (1)                             |
//! | 6      | 1    | dtype: 0 real f32, 1 complex f32, 2 u16 |
//! | 7      | 1    | rank (4)                                |
//! | 8      | 16   | dims, four `u32`                        |
//! | 24     | …    | payload, row-major, complex interleaved |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use sha2::{Digest, Sha256};

use crate::autoencoder::{AutoencoderParams, Branch, LayerAutoencoder};
use crate::error::{invalid, Result, ScapError};
use crate::network::{Cost, Layer, NetworkSpec};
use crate::nn::{ActivationPool, BatchNormParams, CapturePoint, CapturedLayer, ConvParams, LayerParams, LinearParams, ModelState};
use crate::prune::{KMin, LayerPruneStats, PruneMask, PruneReport};
use crate::scalar::Scalar;
use crate::scoring::{FusionKind, FusionRule, ImportanceVector};
use crate::tensor::{CTensor4, Matrix, Shape4, Tensor4};

pub const FORMAT_VERSION: u16 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const TENSOR_MAGIC: &[u8; 4] = b"SCAP";
const AUTOENCODER_MAGIC: &[u8; 4] = b"SCAE";
const MODEL_MAGIC: &[u8; 4] = b"SCMD";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum DType {
    Real = 0,
    Complex = 1,
    Labels = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::Real),
            1 => Some(DType::Complex),
            2 => Some(DType::Labels),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DType::Real => "f32 real",
            DType::Complex => "f32 complex",
            DType::Labels => "u16 labels",
        }
    }

    fn element_bytes(self) -> usize {
        match self {
            DType::Real => 4,
            DType::Complex => 8,
            DType::Labels => 2,
        }
    }
}

/// Writes `bytes` to `path` through a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ScapError::Io(e.error))?;
    Ok(())
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ScapError::MissingInput { path: path.to_path_buf(), what: what.into() },
        _ => ScapError::Io(e),
    })
}

pub fn read_text(path: &Path, what: &str) -> Result<String> {
    String::from_utf8(read_file(path, what)?)
        .map_err(|e| ScapError::Format { offset: e.utf8_error().valid_up_to() as u64, message: "file is not UTF-8".into() })
}

fn format_err(offset: usize, message: impl Into<String>) -> ScapError {
    ScapError::Format { offset: offset as u64, message: message.into() }
}

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(format_err(self.pos, format!("truncated {what}: expected {n} bytes, found {left}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.pos, "size overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn scalars<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let start = self.pos;
        let vals = self.f32s(n, what)?;
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(format_err(start + 4 * i, format!("non-finite value in {what}")));
        }
        Ok(vals.into_iter().map(|v| T::lit(f64::from(v))).collect())
    }

    fn header(&mut self, magic: &[u8; 4], kind: &str) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(format_err(0, format!("bad magic {:?}: not a {kind} file", String::from_utf8_lossy(got))));
        }
        let version = self.u16("version")?;
        if version > FORMAT_VERSION {
            return Err(format_err(
                4,
                format!("{kind} file has format version {version}, newer than the supported version {FORMAT_VERSION}; upgrade the tool"),
            ));
        }
        if version == 0 {
            return Err(format_err(4, "format version 0 is invalid"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(self.pos, format!("{} unexpected trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.u16(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| invalid!("value {v} does not fit in 32 bits"))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn scalars<T: Scalar>(&mut self, vals: &[T]) {
        for v in vals {
            self.0.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
}

fn tensor_header(dtype: DType, s: Shape4) -> Result<Writer> {
    let mut w = Writer::new(TENSOR_MAGIC);
    w.u8(dtype as u8);
    w.u8(4);
    for d in s.dims() {
        w.u32(d)?;
    }
    Ok(w)
}

pub fn encode_tensor<T: Scalar>(t: &Tensor4<T>) -> Result<Vec<u8>> {
    let mut w = tensor_header(DType::Real, t.shape())?;
    w.scalars(t.data());
    Ok(w.0)
}

pub fn encode_ctensor<T: Scalar>(t: &CTensor4<T>) -> Result<Vec<u8>> {
    let mut w = tensor_header(DType::Complex, t.shape())?;
    for c in t.data() {
        w.scalars(&[c.re, c.im]);
    }
    Ok(w.0)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut w = tensor_header(DType::Labels, Shape4::new(labels.len(), 1, 1, 1))?;
    for &l in labels {
        w.u16(u16::try_from(l).map_err(|_| invalid!("label {l} does not fit in 16 bits"))?);
    }
    Ok(w.0)
}

fn decode_header(r: &mut Reader<'_>, want: DType) -> Result<Shape4> {
    r.header(TENSOR_MAGIC, "tensor")?;
    let tag = r.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| format_err(6, format!("unknown dtype tag {tag}")))?;
    if dtype != want {
        return Err(format_err(6, format!("expected a {} tensor, file holds {}", want.name(), dtype.name())));
    }
    let rank = r.u8("rank")?;
    if rank != 4 {
        return Err(format_err(7, format!("rank {rank} is not supported (expected 4)")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32("dims")? as usize;
    }
    let shape = Shape4::from(dims);
    let expected = shape
        .len()
        .checked_mul(dtype.element_bytes())
        .ok_or_else(|| format_err(8, "dimensions overflow"))?;
    let actual = r.buf.len() - HEADER_LEN;
    if actual != expected {
        return Err(format_err(
            HEADER_LEN,
            format!("payload for {shape} should be {expected} bytes, file has {actual}"),
        ));
    }
    Ok(shape)
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor4<T>> {
    let mut r = Reader::new(bytes);
    let shape = decode_header(&mut r, DType::Real)?;
    let data = r.scalars(shape.len(), "payload")?;
    r.finish()?;
    Tensor4::new(shape, data)
}

pub fn decode_ctensor<T: Scalar>(bytes: &[u8]) -> Result<CTensor4<T>> {
    let mut r = Reader::new(bytes);
    let shape = decode_header(&mut r, DType::Complex)?;
    let flat: Vec<T> = r.scalars(shape.len() * 2, "payload")?;
    r.finish()?;
    CTensor4::new(shape, flat.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect())
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes);
    let shape = decode_header(&mut r, DType::Labels)?;
    let labels = (0..shape.len()).map(|_| r.u16("labels").map(usize::from)).collect::<Result<_>>()?;
    r.finish()?;
    Ok(labels)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor4<T>) -> Result<()> {
    write_atomic(path, &encode_tensor(t)?)
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor4<T>> {
    decode_tensor(&read_file(path, "tensor file")?)
}

pub fn write_ctensor<T: Scalar>(path: &Path, t: &CTensor4<T>) -> Result<()> {
    write_atomic(path, &encode_ctensor(t)?)
}

pub fn read_ctensor<T: Scalar>(path: &Path) -> Result<CTensor4<T>> {
    decode_ctensor(&read_file(path, "complex tensor file")?)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_atomic(path, &encode_labels(labels)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    decode_labels(&read_file(path, "label file")?)
}

/// Autoencoder checkpoint (`SCAE`): layer id, row width `N`, bottleneck,
/// then the real and imaginary branches (tag, `W1`, `W2`) and the per-epoch
/// loss history.
pub fn encode_autoencoder<T: Scalar>(ae: &LayerAutoencoder<T>) -> Result<Vec<u8>> {
    let mut w = Writer::new(AUTOENCODER_MAGIC);
    w.u32(ae.layer_id)?;
    w.u32(ae.real.n)?;
    w.u32(ae.real.bottleneck)?;
    for branch in [&ae.real, &ae.imag] {
        if (branch.n, branch.bottleneck) != (ae.real.n, ae.real.bottleneck) {
            return Err(invalid!("branches of layer {} disagree on their widths", ae.layer_id));
        }
        w.u8(branch.branch.tag());
        w.scalars(branch.w1.data());
        w.scalars(branch.w2.data());
    }
    w.u32(ae.loss_history.len())?;
    w.scalars(&ae.loss_history);
    Ok(w.0)
}

/// Decodes an autoencoder checkpoint; `expected_n` (the plane size `H·W` of
/// the layer input) is checked when given.
pub fn decode_autoencoder<T: Scalar>(bytes: &[u8], expected_n: Option<usize>) -> Result<LayerAutoencoder<T>> {
    let mut r = Reader::new(bytes);
    r.header(AUTOENCODER_MAGIC, "autoencoder checkpoint")?;
    let layer_id = r.u32("layer id")? as usize;
    let n = r.u32("width")? as usize;
    let bottleneck = r.u32("bottleneck")? as usize;
    if let Some(want) = expected_n {
        if want != n {
            return Err(ScapError::Validation(format!(
                "autoencoder for layer {layer_id} has row width N = {n}, the network needs N = {want}"
            )));
        }
    }
    if n == 0 || bottleneck == 0 || bottleneck > n {
        return Err(format_err(10, format!("invalid widths N = {n}, bottleneck = {bottleneck}")));
    }
    let branch = |r: &mut Reader<'_>| -> Result<AutoencoderParams<T>> {
        let at = r.pos;
        let tag = r.u8("branch tag")?;
        let kind = Branch::from_tag(tag).ok_or_else(|| format_err(at, format!("unknown branch tag {tag}")))?;
        let w1 = Matrix::new(bottleneck, n, r.scalars(bottleneck * n, "W1")?)?;
        let w2 = Matrix::new(n, bottleneck, r.scalars(n * bottleneck, "W2")?)?;
        Ok(AutoencoderParams { n, bottleneck, w1, w2, branch: kind })
    };
    let real = branch(&mut r)?;
    let imag = branch(&mut r)?;
    let epochs = r.u32("loss history length")? as usize;
    let loss_history = r.scalars(epochs, "loss history")?;
    r.finish()?;
    Ok(LayerAutoencoder { layer_id, real, imag, loss_history })
}

pub fn save_autoencoder<T: Scalar>(path: &Path, ae: &LayerAutoencoder<T>) -> Result<()> {
    write_atomic(path, &encode_autoencoder(ae)?)
}

pub fn load_autoencoder<T: Scalar>(path: &Path, expected_n: Option<usize>) -> Result<LayerAutoencoder<T>> {
    decode_autoencoder(&read_file(path, "autoencoder checkpoint")?, expected_n)
}

fn write_layer_params<T: Scalar>(w: &mut Writer, p: &LayerParams<T>) {
    for t in p.trainable() {
        w.scalars(t);
    }
    if let LayerParams::Conv(ConvParams { bn: Some(bn), .. }) = p {
        w.scalars(&bn.mean);
        w.scalars(&bn.var);
        w.scalars(&[bn.eps]);
    }
}

fn read_layer_params<T: Scalar>(r: &mut Reader<'_>, layer: &Layer) -> Result<LayerParams<T>> {
    Ok(match layer {
        Layer::Conv(c) => {
            let weight = r.scalars(c.weight_len(), "conv weight")?;
            let bias = if c.bias { Some(r.scalars(c.out_channels, "conv bias")?) } else { None };
            let bn = if c.batchnorm {
                let gamma = r.scalars(c.out_channels, "batchnorm scale")?;
                let beta = r.scalars(c.out_channels, "batchnorm shift")?;
                let mean = r.scalars(c.out_channels, "batchnorm mean")?;
                let var = r.scalars(c.out_channels, "batchnorm variance")?;
                let eps = r.scalars::<T>(1, "batchnorm epsilon")?[0];
                Some(BatchNormParams { gamma, beta, mean, var, eps })
            } else {
                None
            };
            LayerParams::Conv(ConvParams { weight, bias, bn })
        }
        Layer::Linear(l) => LayerParams::Linear(LinearParams {
            weight: r.scalars(l.in_features * l.out_features, "linear weight")?,
            bias: if l.bias { Some(r.scalars(l.out_features, "linear bias")?) } else { None },
        }),
        _ => LayerParams::Stateless,
    })
}

/// Model checkpoint (`SCMD`): seed, the network spec as text, then each
/// layer's parameters followed by the momentum buffers, in layer order.
pub fn encode_model<T: Scalar>(m: &ModelState<T>) -> Result<Vec<u8>> {
    m.validate()?;
    let mut w = Writer::new(MODEL_MAGIC);
    w.u64(m.seed);
    let spec = m.spec.to_string();
    w.u32(spec.len())?;
    w.0.extend_from_slice(spec.as_bytes());
    for p in &m.layers {
        write_layer_params(&mut w, p);
    }
    for v in &m.velocity {
        for buf in v.trainable() {
            w.scalars(buf);
        }
    }
    Ok(w.0)
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>> {
    let mut r = Reader::new(bytes);
    r.header(MODEL_MAGIC, "model checkpoint")?;
    let seed = r.u64("seed")?;
    let len = r.u32("spec length")? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len, "spec text")?).map_err(|_| format_err(at, "embedded spec is not UTF-8"))?;
    let spec = NetworkSpec::parse(text)?;
    let layers = spec.layers.iter().map(|l| read_layer_params(&mut r, l)).collect::<Result<Vec<_>>>()?;
    let mut velocity: Vec<LayerParams<T>> = layers.iter().map(LayerParams::zeros_like).collect();
    for v in &mut velocity {
        for buf in v.trainable_mut() {
            *buf = r.scalars(buf.len(), "momentum buffer")?;
        }
    }
    r.finish()?;
    let m = ModelState { spec, layers, velocity, seed };
    m.validate()?;
    Ok(m)
}

pub fn save_model<T: Scalar>(path: &Path, m: &ModelState<T>) -> Result<()> {
    write_atomic(path, &encode_model(m)?)
}

/// Loads a model checkpoint; when `spec` is given the embedded spec must match it.
pub fn load_model<T: Scalar>(path: &Path, spec: Option<&NetworkSpec>) -> Result<ModelState<T>> {
    let m: ModelState<T> = decode_model(&read_file(path, "model checkpoint")?)?;
    if let Some(spec) = spec {
        if &m.spec != spec {
            return Err(ScapError::Validation(format!(
                "checkpoint {} was saved for a different network than the given spec",
                path.display()
            )));
        }
    }
    Ok(m)
}

/// Images and labels as a pair of tensor files in one directory.
pub fn write_dataset<T: Scalar>(dir: &Path, images: &Tensor4<T>, labels: &[usize]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor(&dir.join("images.scap"), images)?;
    write_labels(&dir.join("labels.scap"), labels)
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<(Tensor4<T>, Vec<usize>)> {
    let images: Tensor4<T> = read_tensor(&dir.join("images.scap"))?;
    let labels = read_labels(&dir.join("labels.scap"))?;
    if images.shape().b != labels.len() {
        return Err(ScapError::Validation(format!(
            "dataset {} has {} images and {} labels",
            dir.display(),
            images.shape().b,
            labels.len()
        )));
    }
    Ok((images, labels))
}

/// Parsed `key = value` text with an optional trailing table.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    order: Vec<String>,
    /// Lines after a `[name]` marker, with their line numbers.
    pub table: Vec<(usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, table_marker: Option<&str>) -> Result<Self> {
        let mut kv = KeyValues::default();
        let mut in_table = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if Some(line) == table_marker {
                in_table = true;
                continue;
            }
            if in_table {
                kv.table.push((i + 1, line.to_string()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ScapError::Parse { line: i + 1, message: format!("expected key = value, found '{line}'") })?;
            let key = k.trim().to_string();
            if kv.entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(ScapError::Parse { line: i + 1, message: format!("duplicate key '{key}'") });
            }
            kv.order.push(key);
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| ScapError::Parse { line: 0, message: format!("missing key '{key}'") })
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let (line, raw) = self
            .entries
            .get(key)
            .ok_or_else(|| ScapError::Parse { line: 0, message: format!("missing key '{key}'") })?;
        raw.parse().map_err(|_| ScapError::Parse { line: *line, message: format!("invalid value '{raw}' for '{key}'") })
    }

    /// Keys with the given prefix, in file order, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, String)> {
        self.order
            .iter()
            .filter_map(|k| k.strip_prefix(prefix).map(|s| (s.to_string(), self.entries[k].1.clone())))
            .collect()
    }
}

/// Activation pool directory: a manifest plus one `(X, Y)` tensor pair per conv layer.
pub fn write_pool<T: Scalar>(dir: &Path, pool: &ActivationPool<T>, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "# activation pool").unwrap();
    writeln!(manifest, "format_version = {FORMAT_VERSION}").unwrap();
    writeln!(manifest, "capture_point = {}", pool.capture_point).unwrap();
    writeln!(manifest, "samples = {}", pool.samples()).unwrap();
    writeln!(manifest, "seed = {seed}").unwrap();
    writeln!(manifest, "[layers]").unwrap();
    for l in &pool.layers {
        let stem = format!("layer{:02}", l.layer_index);
        write_tensor(&dir.join(format!("{stem}.x.scap")), &l.x)?;
        write_tensor(&dir.join(format!("{stem}.y.scap")), &l.y)?;
        writeln!(manifest, "{} {stem}.x.scap {stem}.y.scap", l.layer_index).unwrap();
    }
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}

pub fn read_pool<T: Scalar>(dir: &Path) -> Result<(ActivationPool<T>, u64)> {
    let kv = KeyValues::parse(&read_text(&dir.join("manifest.txt"), "activation pool manifest")?, Some("[layers]"))?;
    check_text_version(&kv)?;
    let capture_point: CapturePoint = kv.get("capture_point")?.parse()?;
    let samples: usize = kv.parse_value("samples")?;
    let seed: u64 = kv.parse_value("seed")?;
    let mut layers = Vec::new();
    for (line, row) in &kv.table {
        let parts: Vec<&str> = row.split_whitespace().collect();
        let [idx, xf, yf] = parts[..] else {
            return Err(ScapError::Parse { line: *line, message: "expected '<layer> <x file> <y file>'".into() });
        };
        let layer_index = idx.parse().map_err(|_| ScapError::Parse { line: *line, message: format!("bad layer index '{idx}'") })?;
        let x: Tensor4<T> = read_tensor(&dir.join(xf))?;
        let y: Tensor4<T> = read_tensor(&dir.join(yf))?;
        if x.shape().b != samples || y.shape().b != samples {
            return Err(ScapError::Validation(format!("layer {layer_index}: pool files disagree with samples = {samples}")));
        }
        layers.push(CapturedLayer { layer_index, x, y });
    }
    Ok((ActivationPool { capture_point, layers }, seed))
}

fn check_text_version(kv: &KeyValues) -> Result<()> {
    let v: u16 = kv.parse_value("format_version")?;
    if v > FORMAT_VERSION {
        return Err(ScapError::Validation(format!(
            "file has format version {v}, newer than the supported version {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

pub fn emit_mask(mask: &PruneMask, spec: &NetworkSpec) -> String {
    let mut s = String::new();
    writeln!(s, "# kept output channels per conv layer").unwrap();
    writeln!(s, "format_version = {FORMAT_VERSION}").unwrap();
    writeln!(s, "[keep]").unwrap();
    for (keep, layer) in mask.keep.iter().zip(spec.conv_layers()) {
        let list: Vec<String> = keep.iter().map(usize::to_string).collect();
        writeln!(s, "{layer} {}", list.join(",")).unwrap();
    }
    s
}

pub fn parse_mask(text: &str, spec: &NetworkSpec) -> Result<PruneMask> {
    let kv = KeyValues::parse(text, Some("[keep]"))?;
    check_text_version(&kv)?;
    let convs = spec.conv_layers();
    let mut keep = Vec::new();
    for (j, (line, row)) in kv.table.iter().enumerate() {
        let err = |message: String| ScapError::Parse { line: *line, message };
        let (layer, list) = row.split_once(' ').unwrap_or((row.as_str(), ""));
        let layer: usize = layer.parse().map_err(|_| err(format!("bad layer index '{layer}'")))?;
        if convs.get(j) != Some(&layer) {
            return Err(err(format!("keep-set {j} names layer {layer}, which is not conv layer {j} of the network")));
        }
        let set = list
            .trim()
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| err(format!("bad channel index '{s}'"))))
            .collect::<Result<Vec<usize>>>()?;
        keep.push(set);
    }
    let mask = PruneMask { keep };
    mask.validate(spec)?;
    Ok(mask)
}

/// Per-layer importance scores, one table row per channel.
pub fn emit_scores<T: Scalar>(scores: &[ImportanceVector<T>], fusion: FusionRule) -> String {
    let mut s = String::new();
    writeln!(s, "# channel importance scores").unwrap();
    writeln!(s, "format_version = {FORMAT_VERSION}").unwrap();
    writeln!(s, "fusion = {}", fusion.kind).unwrap();
    writeln!(s, "alpha = {}", fusion.alpha).unwrap();
    writeln!(s, "[channels]").unwrap();
    writeln!(s, "# layer channel fid i_fid i_l1 fused normalized").unwrap();
    for iv in scores {
        for k in 0..iv.len() {
            writeln!(
                s,
                "{} {k} {} {} {} {} {}",
                iv.layer_id,
                iv.fid[k].to_f64_lossy(),
                iv.i_fid[k].to_f64_lossy(),
                iv.i_l1[k].to_f64_lossy(),
                iv.fused[k].to_f64_lossy(),
                iv.normalized[k].to_f64_lossy()
            )
            .unwrap();
        }
    }
    s
}

pub fn parse_scores(text: &str) -> Result<(Vec<ImportanceVector<f64>>, FusionRule)> {
    let kv = KeyValues::parse(text, Some("[channels]"))?;
    check_text_version(&kv)?;
    let fusion = FusionRule::new(kv.get("fusion")?.parse::<FusionKind>()?, kv.parse_value("alpha")?)?;
    let mut out: Vec<ImportanceVector<f64>> = Vec::new();
    for (line, row) in &kv.table {
        let err = |message: String| ScapError::Parse { line: *line, message };
        let parts: Vec<&str> = row.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(err(format!("expected 7 columns, found {}", parts.len())));
        }
        let layer: usize = parts[0].parse().map_err(|_| err("bad layer index".into()))?;
        let channel: usize = parts[1].parse().map_err(|_| err("bad channel index".into()))?;
        let vals = parts[2..]
            .iter()
            .map(|p| p.parse::<f64>().map_err(|_| err(format!("bad number '{p}'"))))
            .collect::<Result<Vec<f64>>>()?;
        if out.last().map(|iv| iv.layer_id) != Some(layer) {
            out.push(ImportanceVector { layer_id: layer, fid: vec![], i_fid: vec![], i_l1: vec![], fused: vec![], normalized: vec![] });
        }
        let iv = out.last_mut().expect("pushed above");
        if channel != iv.len() {
            return Err(err(format!("layer {layer}: expected channel {}, found {channel}", iv.len())));
        }
        iv.fid.push(vals[0]);
        iv.i_fid.push(vals[1]);
        iv.i_l1.push(vals[2]);
        iv.fused.push(vals[3]);
        iv.normalized.push(vals[4]);
    }
    Ok((out, fusion))
}

/// Settings that determine a report's numbers, rendered canonically.
fn canonical_config(r: &PruneReport) -> String {
    let mut s = String::new();
    writeln!(s, "tau={}", r.tau).unwrap();
    writeln!(s, "fusion={}", r.fusion.kind).unwrap();
    writeln!(s, "alpha={}", r.fusion.alpha).unwrap();
    writeln!(s, "kmin={}", r.k_min).unwrap();
    writeln!(s, "capture_point={}", r.capture_point).unwrap();
    for (k, v) in &r.config {
        writeln!(s, "{k}={v}").unwrap();
    }
    s
}

/// SHA-256 of the canonical configuration, hex encoded.
pub fn config_hash(r: &PruneReport) -> String {
    hex::encode(Sha256::digest(canonical_config(r).as_bytes()))
}

pub fn emit_report(r: &PruneReport) -> String {
    let mut s = String::new();
    writeln!(s, "# structured pruning report").unwrap();
    writeln!(s, "format_version = {FORMAT_VERSION}").unwrap();
    writeln!(s, "tool_version = {TOOL_VERSION}").unwrap();
    writeln!(s, "config_hash = {}", config_hash(r)).unwrap();
    writeln!(s, "tau = {}", r.tau).unwrap();
    writeln!(s, "fusion = {}", r.fusion.kind).unwrap();
    writeln!(s, "alpha = {}", r.fusion.alpha).unwrap();
    writeln!(s, "kmin = {}", r.k_min).unwrap();
    writeln!(s, "capture_point = {}", r.capture_point).unwrap();
    writeln!(s, "baseline_flops = {}", r.baseline.macs).unwrap();
    writeln!(s, "baseline_elementwise = {}", r.baseline.elementwise).unwrap();
    writeln!(s, "baseline_params = {}", r.baseline.params).unwrap();
    writeln!(s, "pruned_flops = {}", r.pruned.macs).unwrap();
    writeln!(s, "pruned_elementwise = {}", r.pruned.elementwise).unwrap();
    writeln!(s, "pruned_params = {}", r.pruned.params).unwrap();
    writeln!(s, "fr_percent = {}", r.fr).unwrap();
    writeln!(s, "pr_percent = {}", r.pr).unwrap();
    writeln!(s, "safeguard_triggered = {}", r.any_safeguard()).unwrap();
    for (k, v) in &r.config {
        writeln!(s, "config.{k} = {v}").unwrap();
    }
    writeln!(s, "[layers]").unwrap();
    writeln!(s, "# layer kept total safeguard").unwrap();
    for l in &r.layers {
        writeln!(s, "{} {} {} {}", l.layer_index, l.kept, l.total, l.safeguard).unwrap();
    }
    s
}

pub fn parse_report(text: &str) -> Result<PruneReport> {
    let kv = KeyValues::parse(text, Some("[layers]"))?;
    check_text_version(&kv)?;
    let fusion = FusionRule::new(kv.get("fusion")?.parse()?, kv.parse_value("alpha")?)?;
    let mut layers = Vec::new();
    for (line, row) in &kv.table {
        let err = |message: &str| ScapError::Parse { line: *line, message: message.into() };
        let parts: Vec<&str> = row.split_whitespace().collect();
        let [idx, kept, total, flag] = parts[..] else {
            return Err(err("expected '<layer> <kept> <total> <safeguard>'"));
        };
        layers.push(LayerPruneStats {
            layer_index: idx.parse().map_err(|_| err("bad layer index"))?,
            kept: kept.parse().map_err(|_| err("bad kept count"))?,
            total: total.parse().map_err(|_| err("bad total count"))?,
            safeguard: flag.parse().map_err(|_| err("safeguard must be true or false"))?,
        });
    }
    let report = PruneReport {
        tau: kv.parse_value("tau")?,
        fusion,
        k_min: kv.get("kmin")?.parse::<KMin>()?,
        capture_point: kv.get("capture_point")?.parse()?,
        layers,
        baseline: Cost {
            macs: kv.parse_value("baseline_flops")?,
            elementwise: kv.parse_value("baseline_elementwise")?,
            params: kv.parse_value("baseline_params")?,
        },
        pruned: Cost {
            macs: kv.parse_value("pruned_flops")?,
            elementwise: kv.parse_value("pruned_elementwise")?,
            params: kv.parse_value("pruned_params")?,
        },
        fr: kv.parse_value("fr_percent")?,
        pr: kv.parse_value("pr_percent")?,
        config: kv.with_prefix("config."),
    };
    if kv.get("config_hash")? != config_hash(&report) {
        return Err(ScapError::Validation("report config_hash does not match its settings".into()));
    }
    Ok(report)
}

pub fn write_report(path: &Path, r: &PruneReport) -> Result<()> {
    write_atomic(path, emit_report(r).as_bytes())
}

pub fn read_report(path: &Path) -> Result<PruneReport> {
    parse_report(&read_text(path, "prune report")?)
}

/// Conventional file names inside a run directory.
pub mod layout {
    use super::*;

    pub fn model(dir: &Path) -> PathBuf {
        dir.join("model.scmd")
    }

    pub fn pool(dir: &Path) -> PathBuf {
        dir.join("pool")
    }

    pub fn autoencoder(dir: &Path, layer_index: usize) -> PathBuf {
        dir.join("autoencoders").join(format!("layer{layer_index:02}.scae"))
    }

    pub fn scores(dir: &Path) -> PathBuf {
        dir.join("scores.txt")
    }

    pub fn tau_dir(dir: &Path, tau: f64) -> PathBuf {
        dir.join(format!("tau-{tau:.2}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::bundled;
    use crate::nn::synthetic_dataset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random32(shape: impl Into<Shape4>, seed: u64) -> Tensor4<f32> {
        let shape = shape.into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::new(shape, (0..shape.len()).map(|_| rng.random_range(-10.0f32..10.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_round_trips_bitwise() {
        let t = random32([2, 3, 4, 4], 1);
        let back: Tensor4<f32> = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.shape(), t.shape());

        let empty = Tensor4::<f32>::zeros([0, 3, 4, 4]);
        let bytes = encode_tensor(&empty).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_tensor::<f32>(&bytes).unwrap(), empty);

        let c = CTensor4::from_parts(&random32([1, 2, 3, 3], 2), &random32([1, 2, 3, 3], 3)).unwrap();
        assert_eq!(decode_ctensor::<f32>(&encode_ctensor(&c).unwrap()).unwrap(), c);

        let labels = vec![0, 3, 1, 65535];
        assert_eq!(decode_labels(&encode_labels(&labels).unwrap()).unwrap(), labels);
        assert!(encode_labels(&[70000]).is_err());
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_tensor(&Tensor4::<f32>::filled([1, 1, 1, 2], 1.5)).unwrap();
        assert_eq!(&bytes[..4], b"SCAP");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 4);
        assert_eq!(&bytes[8..24], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[24..28], &1.5f32.to_le_bytes());
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = encode_tensor(&random32([2, 3, 4, 4], 4)).unwrap();
        match decode_tensor::<f32>(&bytes[..bytes.len() - 10]) {
            Err(ScapError::Format { offset, message }) => {
                assert_eq!(offset, 24);
                assert!(message.contains("384") && message.contains("374"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor::<f32>(&bad), Err(ScapError::Format { offset: 0, .. })));
        let mut future = bytes.clone();
        future[4] = 2;
        match decode_tensor::<f32>(&future) {
            Err(ScapError::Format { offset: 4, message }) => assert!(message.contains("newer")),
            other => panic!("{other:?}"),
        }
        assert!(decode_ctensor::<f32>(&bytes).is_err());
        assert!(matches!(decode_tensor::<f32>(&bytes[..5]), Err(ScapError::Format { .. })));
    }

    fn trained_ae() -> LayerAutoencoder<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = AutoencoderParams::<f32>::init(16, Branch::Real, &mut rng).unwrap();
        let imag = AutoencoderParams::<f32>::init(16, Branch::Imaginary, &mut rng).unwrap();
        LayerAutoencoder { layer_id: 2, real, imag, loss_history: vec![0.9, 0.5, 0.25] }
    }

    #[test]
    fn autoencoder_checkpoint_round_trip() {
        let ae = trained_ae();
        let bytes = encode_autoencoder(&ae).unwrap();
        assert_eq!(decode_autoencoder::<f32>(&bytes, Some(16)).unwrap(), ae);
        match decode_autoencoder::<f32>(&bytes, Some(64)) {
            Err(ScapError::Validation(m)) => assert!(m.contains("16") && m.contains("64"), "{m}"),
            other => panic!("{other:?}"),
        }
        let mut future = bytes.clone();
        future[4] = 9;
        assert!(decode_autoencoder::<f32>(&future, None).is_err());
        assert!(decode_autoencoder::<f32>(&bytes[..bytes.len() - 1], None).is_err());
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let text = "input channels=2 height=6 width=6\nconv in=2 out=3 kernel=3 pad=1 bias=true bn=true act=relu\nmaxpool kernel=2\nflatten\nlinear in=27 out=4 bias=true\n";
        let mut m = ModelState::<f32>::init(NetworkSpec::parse(text).unwrap(), 3).unwrap();
        let data = synthetic_dataset::<f32>(8, 4, 2, 6, 1).unwrap();
        m.backward_and_step(&data.images, &data.labels, 0.1, 0.9, 1e-4).unwrap();
        let back: ModelState<f32> = decode_model(&encode_model(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let toy = NetworkSpec::parse(bundled::TOY).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.scmd");
        save_model(&path, &m).unwrap();
        assert!(matches!(load_model::<f32>(&path, Some(&toy)), Err(ScapError::Validation(_))));
        assert!(matches!(load_model::<f32>(&dir.path().join("nope"), None), Err(ScapError::MissingInput { .. })));
    }

    #[test]
    fn files_are_written_atomically_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let t = random32([1, 1, 2, 2], 6);
        let p = dir.path().join("t.scap");
        write_tensor(&p, &t).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor::<f32>(&p).unwrap(), t);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn mask_and_scores_round_trip() {
        let spec = NetworkSpec::parse(bundled::TOY).unwrap();
        let mask = PruneMask { keep: vec![vec![0, 3], vec![1, 2, 7], vec![5]] };
        assert_eq!(parse_mask(&emit_mask(&mask, &spec), &spec).unwrap(), mask);
        let bad = emit_mask(&mask, &spec).replace("1,2,7", "1,2,9");
        assert!(parse_mask(&bad, &spec).is_err());

        let iv = ImportanceVector {
            layer_id: 3,
            fid: vec![0.1, 0.123456789012345],
            i_fid: vec![0.9, 1.0 - 0.123456789012345],
            i_l1: vec![1.0 / 3.0, 0.5],
            fused: vec![0.7, 0.2],
            normalized: vec![1.0, 0.0],
        };
        let rule = FusionRule::new(FusionKind::PowMul, 0.25).unwrap();
        let (back, r) = parse_scores(&emit_scores(std::slice::from_ref(&iv), rule)).unwrap();
        assert_eq!(back, vec![iv]);
        assert_eq!(r, rule);
    }

    fn report() -> PruneReport {
        PruneReport {
            tau: 0.5,
            fusion: FusionRule::default(),
            k_min: KMin::Default,
            capture_point: CapturePoint::PostActivation,
            layers: vec![
                LayerPruneStats { layer_index: 0, kept: 4, total: 8, safeguard: false },
                LayerPruneStats { layer_index: 2, kept: 2, total: 8, safeguard: true },
            ],
            baseline: Cost { macs: 64768, elementwise: 5120, params: 1514 },
            pruned: Cost { macs: 20000, elementwise: 0, params: 500 },
            fr: 100.0 * (1.0 - 20000.0 / 64768.0),
            pr: 100.0 * (1.0 - 500.0 / 1514.0),
            config: vec![("seed".into(), "0".into()), ("ae.epochs".into(), "30".into())],
        }
    }

    #[test]
    fn report_round_trips_and_hash_guards_settings() {
        let r = report();
        let text = emit_report(&r);
        assert_eq!(parse_report(&text).unwrap(), r);
        assert_eq!(emit_report(&parse_report(&text).unwrap()), text);
        assert!(text.contains(&format!("tool_version = {TOOL_VERSION}")));
        let tampered = text.replace("tau = 0.5", "tau = 0.6");
        assert!(matches!(parse_report(&tampered), Err(ScapError::Validation(_))));
        let mut other = r.clone();
        other.config[0].1 = "1".into();
        assert_ne!(config_hash(&other), config_hash(&r));
    }
}
