//! Model bundles and the `NMLV` binary file format.
//!
//! Layout (all multi-byte values little-endian):
//!
//! ```text
//! "NMLV" | version:u32 = 1 | kind:u8 | layer_count:u32 | input_dim:u32
//!        | hidden_dim:u32 | output_dim:u32
//!        | norm: hes_sigma, pose_mean[6], pose_std[6], dq_sigma   (14 x f32)
//!        | tensors (f32, row-major)
//!        | crc32 of every preceding byte
//! ```
//!
//! Tensor order for a GRU stack is, per layer, `W_ih[3H x in]`, `W_hh[3H x H]`,
//! `b_ih[3H]`, `b_hh[3H]` with gate blocks ordered (reset, update, candidate),
//! followed by the head `W_out[out x H]`, `b_out[out]`. An MLP stores `W`, `b`
//! per affine layer; widths are `in -> H -> ... -> H -> out`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::kernels::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"NMLV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 1 + 4 * 4;
pub const NORM_FLOATS: usize = 14;
pub const CRC_LEN: usize = 4;

/// Default scale of the d/q current standardization, in increments.
pub const DQ_SIGMA: f32 = 8000.0;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"NMLV\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown model kind tag {0}")]
    UnknownKind(u8),
    #[error("stream truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("size mismatch: header implies {expected} bytes, stream has {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Corrupt { stored: u32, computed: u32 },
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    GruStack = 0,
    Mlp = 1,
}

impl ModelKind {
    fn from_tag(tag: u8) -> Result<Self, FormatError> {
        match tag {
            0 => Ok(ModelKind::GruStack),
            1 => Ok(ModelKind::Mlp),
            t => Err(FormatError::UnknownKind(t)),
        }
    }
}

/// Normalization constants carried inside every model file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSpec {
    pub hes_sigma: f32,
    pub pose_mean: [f32; 6],
    pub pose_std: [f32; 6],
    pub dq_sigma: f32,
}

impl Default for NormSpec {
    fn default() -> Self {
        Self {
            hes_sigma: 1.0,
            pose_mean: [0.0; 6],
            pose_std: [1.0; 6],
            dq_sigma: DQ_SIGMA,
        }
    }
}

impl NormSpec {
    pub fn validate(&self) -> Result<(), FormatError> {
        let positive = |v: f32| v.is_finite() && v > 0.0;
        if !positive(self.hes_sigma) || !positive(self.dq_sigma) || !self.pose_std.iter().all(|&s| positive(s)) {
            return Err(FormatError::Invalid("normalization scales must be finite and > 0".into()));
        }
        if !self.pose_mean.iter().all(|m| m.is_finite()) {
            return Err(FormatError::Invalid("pose mean must be finite".into()));
        }
        Ok(())
    }

    fn to_floats(self) -> [f32; NORM_FLOATS] {
        let mut out = [0.0; NORM_FLOATS];
        out[0] = self.hes_sigma;
        out[1..7].copy_from_slice(&self.pose_mean);
        out[7..13].copy_from_slice(&self.pose_std);
        out[13] = self.dq_sigma;
        out
    }

    fn from_floats(f: &[f32]) -> Self {
        let mut pose_mean = [0.0; 6];
        let mut pose_std = [0.0; 6];
        pose_mean.copy_from_slice(&f[1..7]);
        pose_std.copy_from_slice(&f[7..13]);
        Self {
            hes_sigma: f[0],
            pose_mean,
            pose_std,
            dq_sigma: f[13],
        }
    }
}

/// An affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }
}

/// One GRU layer; gate blocks are stacked (reset, update, candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub w_ih: DenseMatrix,
    pub w_hh: DenseMatrix,
    pub b_ih: Vec<f32>,
    pub b_hh: Vec<f32>,
}

impl GruLayer {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w_ih: DenseMatrix::zeros(3 * hidden, inputs),
            w_hh: DenseMatrix::zeros(3 * hidden, hidden),
            b_ih: vec![0.0; 3 * hidden],
            b_hh: vec![0.0; 3 * hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn inputs(&self) -> usize {
        self.w_ih.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    GruStack { layers: Vec<GruLayer>, head: Linear },
    Mlp { layers: Vec<Linear> },
}

/// Weights plus normalization constants of a deployable model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub network: Network,
    pub norm: NormSpec,
}

impl ModelBundle {
    pub fn kind(&self) -> ModelKind {
        match self.network {
            Network::GruStack { .. } => ModelKind::GruStack,
            Network::Mlp { .. } => ModelKind::Mlp,
        }
    }

    pub fn layer_count(&self) -> usize {
        match &self.network {
            Network::GruStack { layers, .. } => layers.len(),
            Network::Mlp { layers } => layers.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.network {
            Network::GruStack { layers, .. } => layers.first().map_or(0, GruLayer::inputs),
            Network::Mlp { layers } => layers.first().map_or(0, Linear::inputs),
        }
    }

    /// Hidden width; zero for a single-layer MLP.
    pub fn hidden_dim(&self) -> usize {
        match &self.network {
            Network::GruStack { layers, .. } => layers.first().map_or(0, GruLayer::hidden),
            Network::Mlp { layers } if layers.len() > 1 => layers[0].outputs(),
            Network::Mlp { .. } => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.network {
            Network::GruStack { head, .. } => head.outputs(),
            Network::Mlp { layers } => layers.last().map_or(0, Linear::outputs),
        }
    }

    /// Widths `[in, H, ..., H, out]` of the affine chain (MLP) or the per-layer
    /// input widths followed by the output width (GRU stack).
    pub fn layer_dims(&self) -> Vec<usize> {
        match &self.network {
            Network::GruStack { layers, head } => {
                let mut dims: Vec<usize> = layers.iter().map(GruLayer::inputs).collect();
                dims.push(head.inputs());
                dims.push(head.outputs());
                dims
            }
            Network::Mlp { layers } => {
                let mut dims: Vec<usize> = layers.iter().map(Linear::inputs).collect();
                dims.extend(layers.last().map(Linear::outputs));
                dims
            }
        }
    }

    /// All-zero GRU stack with the given shape.
    pub fn zeros_gru(input: usize, hidden: usize, layers: usize, output: usize, norm: NormSpec) -> Self {
        let layers = (0..layers)
            .map(|l| GruLayer::zeros(if l == 0 { input } else { hidden }, hidden))
            .collect();
        Self {
            network: Network::GruStack {
                layers,
                head: Linear::zeros(hidden, output),
            },
            norm,
        }
    }

    /// All-zero MLP; `layers` counts affine layers.
    pub fn zeros_mlp(input: usize, hidden: usize, layers: usize, output: usize, norm: NormSpec) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let i = if l == 0 { input } else { hidden };
                let o = if l + 1 == layers { output } else { hidden };
                Linear::zeros(i, o)
            })
            .collect();
        Self {
            network: Network::Mlp { layers },
            norm,
        }
    }

    /// GRU stack with weights drawn uniformly from ±1/sqrt(H), the usual
    /// initialization range of training frameworks.
    pub fn random_gru<R: Rng + ?Sized>(
        rng: &mut R,
        input: usize,
        hidden: usize,
        layers: usize,
        output: usize,
        norm: NormSpec,
    ) -> Self {
        let k = 1.0 / (hidden as f32).sqrt();
        let mut m = Self::zeros_gru(input, hidden, layers, output, norm);
        m.fill_uniform(rng, k);
        m
    }

    pub fn random_mlp<R: Rng + ?Sized>(
        rng: &mut R,
        input: usize,
        hidden: usize,
        layers: usize,
        output: usize,
        norm: NormSpec,
    ) -> Self {
        let mut m = Self::zeros_mlp(input, hidden, layers, output, norm);
        let k = 1.0 / (input.max(hidden) as f32).sqrt();
        m.fill_uniform(rng, k);
        m
    }

    fn fill_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R, k: f32) {
        let mut tensors = Vec::new();
        self.visit_tensors(&mut |t: &[f32]| tensors.push(t.len()));
        let mut values: Vec<Vec<f32>> = tensors
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(-k..=k)).collect())
            .collect();
        values.reverse();
        self.replace_tensors(&mut || values.pop().expect("tensor count"));
    }

    /// Visits every tensor in file order.
    pub fn visit_tensors(&self, f: &mut dyn FnMut(&[f32])) {
        match &self.network {
            Network::GruStack { layers, head } => {
                for l in layers {
                    f(l.w_ih.data());
                    f(l.w_hh.data());
                    f(&l.b_ih);
                    f(&l.b_hh);
                }
                f(head.weight.data());
                f(&head.bias);
            }
            Network::Mlp { layers } => {
                for l in layers {
                    f(l.weight.data());
                    f(&l.bias);
                }
            }
        }
    }

    fn replace_tensors(&mut self, next: &mut dyn FnMut() -> Vec<f32>) {
        fn mat(m: &mut DenseMatrix, next: &mut dyn FnMut() -> Vec<f32>) {
            *m = DenseMatrix::new(m.rows(), m.cols(), next()).expect("shape preserved");
        }
        match &mut self.network {
            Network::GruStack { layers, head } => {
                for l in layers {
                    mat(&mut l.w_ih, next);
                    mat(&mut l.w_hh, next);
                    l.b_ih = next();
                    l.b_hh = next();
                }
                mat(&mut head.weight, next);
                head.bias = next();
            }
            Network::Mlp { layers } => {
                for l in layers {
                    mat(&mut l.weight, next);
                    l.bias = next();
                }
            }
        }
    }

    /// Number of f32 values across all tensors.
    pub fn tensor_floats(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |t| n += t.len());
        n
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<(), FormatError> {
        self.norm.validate()?;
        let bad = |msg: String| Err(FormatError::Invalid(msg));
        match &self.network {
            Network::GruStack { layers, head } => {
                if layers.is_empty() {
                    return bad("GRU stack has no layers".into());
                }
                let h = layers[0].hidden();
                if h == 0 {
                    return bad("hidden size is zero".into());
                }
                for (i, l) in layers.iter().enumerate() {
                    let expect_in = if i == 0 { l.inputs() } else { h };
                    if l.inputs() == 0
                        || l.inputs() != expect_in
                        || l.hidden() != h
                        || l.w_ih.rows() != 3 * h
                        || l.w_hh.rows() != 3 * h
                        || l.b_ih.len() != 3 * h
                        || l.b_hh.len() != 3 * h
                    {
                        return bad(format!("GRU layer {i} has inconsistent shapes"));
                    }
                }
                if head.inputs() != h || head.bias.len() != head.outputs() || head.outputs() == 0 {
                    return bad("output head has inconsistent shapes".into());
                }
            }
            Network::Mlp { layers } => {
                if layers.is_empty() {
                    return bad("MLP has no layers".into());
                }
                for (i, l) in layers.iter().enumerate() {
                    if l.bias.len() != l.outputs() || l.inputs() == 0 || l.outputs() == 0 {
                        return bad(format!("MLP layer {i} has inconsistent shapes"));
                    }
                    if i > 0 && l.inputs() != layers[i - 1].outputs() {
                        return bad(format!("MLP layer {i} input does not match previous output"));
                    }
                    let last = i + 1 == layers.len();
                    if !last && l.outputs() != layers[0].outputs() {
                        return bad("MLP hidden layers must share one width".into());
                    }
                }
            }
        }
        let mut finite = true;
        self.visit_tensors(&mut |t| finite &= t.iter().all(|v| v.is_finite()));
        if !finite {
            return bad("non-finite weight".into());
        }
        Ok(())
    }
}

/// Header fields as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: ModelKind,
    pub layer_count: u32,
    pub input_dim: u32,
    pub hidden_dim: u32,
    pub output_dim: u32,
}

impl Header {
    /// f32 count of the tensor section implied by the header.
    pub fn tensor_floats(&self) -> Option<usize> {
        // u128 so that corrupted headers cannot overflow
        let l = self.layer_count as u128;
        let i = self.input_dim as u128;
        let h = self.hidden_dim as u128;
        let o = self.output_dim as u128;
        let n = match self.kind {
            ModelKind::GruStack => {
                if l == 0 {
                    return None;
                }
                let first = 3 * h * i + 3 * h * h + 6 * h;
                let rest = 6 * h * h + 6 * h;
                first + rest * (l - 1) + o * h + o
            }
            ModelKind::Mlp => match l {
                0 => return None,
                1 => o * i + o,
                _ => h * i + h + (l - 2) * (h * h + h) + o * h + o,
            },
        };
        usize::try_from(n).ok()
    }

    /// Total file size in bytes implied by the header.
    pub fn file_len(&self) -> Option<usize> {
        let t = self.tensor_floats()?.checked_mul(4)?;
        t.checked_add(HEADER_LEN + NORM_FLOATS * 4 + CRC_LEN)
    }
}

/// Serializes a bundle, returning the number of bytes written.
pub fn write_model<W: Write>(bundle: &ModelBundle, sink: &mut W) -> Result<usize, FormatError> {
    let bytes = encode_model(bundle)?;
    sink.write_all(&bytes)?;
    Ok(bytes.len())
}

/// Encodes a bundle into its on-disk byte representation.
pub fn encode_model(bundle: &ModelBundle) -> Result<Vec<u8>, FormatError> {
    bundle.validate()?;
    let header = Header {
        kind: bundle.kind(),
        layer_count: bundle.layer_count() as u32,
        input_dim: bundle.input_dim() as u32,
        hidden_dim: bundle.hidden_dim() as u32,
        output_dim: bundle.output_dim() as u32,
    };
    let len = header
        .file_len()
        .ok_or_else(|| FormatError::Invalid("model too large".into()))?;
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(header.kind as u8);
    for v in [header.layer_count, header.input_dim, header.hidden_dim, header.output_dim] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in bundle.norm.to_floats() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    bundle.visit_tensors(&mut |t| {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len(), len);
    Ok(out)
}

/// Reads and fully validates a bundle from a stream.
pub fn read_model<R: Read>(source: &mut R) -> Result<ModelBundle, FormatError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelBundle, FormatError> {
    let truncated = |expected: usize| FormatError::Truncated {
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let header = Header {
        kind: ModelKind::from_tag(bytes[8])?,
        layer_count: u32_at(bytes, 9),
        input_dim: u32_at(bytes, 13),
        hidden_dim: u32_at(bytes, 17),
        output_dim: u32_at(bytes, 21),
    };
    let expected = header
        .file_len()
        .ok_or_else(|| FormatError::Invalid(format!("header describes no valid model: {header:?}")))?;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() != expected {
        return Err(FormatError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[..expected - CRC_LEN];
    let stored = u32_at(bytes, expected - CRC_LEN);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Corrupt { stored, computed });
    }

    let mut floats = body[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let norm_vals: Vec<f32> = floats.by_ref().take(NORM_FLOATS).collect();
    let norm = NormSpec::from_floats(&norm_vals);
    let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
    let matrix = |rows: usize, cols: usize, data: Vec<f32>| {
        DenseMatrix::new(rows, cols, data).map_err(|e| FormatError::Invalid(e.to_string()))
    };

    let l = header.layer_count as usize;
    let i = header.input_dim as usize;
    let h = header.hidden_dim as usize;
    let o = header.output_dim as usize;
    let network = match header.kind {
        ModelKind::GruStack => {
            let mut layers = Vec::with_capacity(l);
            for li in 0..l {
                let inp = if li == 0 { i } else { h };
                let w_ih = matrix(3 * h, inp, take(3 * h * inp))?;
                let w_hh = matrix(3 * h, h, take(3 * h * h))?;
                let b_ih = take(3 * h);
                let b_hh = take(3 * h);
                layers.push(GruLayer { w_ih, w_hh, b_ih, b_hh });
            }
            let weight = matrix(o, h, take(o * h))?;
            let bias = take(o);
            Network::GruStack {
                layers,
                head: Linear { weight, bias },
            }
        }
        ModelKind::Mlp => {
            let mut layers = Vec::with_capacity(l);
            for li in 0..l {
                let inp = if li == 0 { i } else { h };
                let out = if li + 1 == l { o } else { h };
                let weight = matrix(out, inp, take(out * inp))?;
                let bias = take(out);
                layers.push(Linear { weight, bias });
            }
            Network::Mlp { layers }
        }
    };
    let bundle = ModelBundle { network, norm };
    bundle.validate()?;
    Ok(bundle)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<usize, FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_model(bundle, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle, FormatError> {
    read_model(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_payload_size_matches_hand_count() {
        let m = ModelBundle::zeros_gru(3, 2, 1, 1, NormSpec::default());
        assert_eq!(m.tensor_floats() * 4, 180);
        let bytes = encode_model(&m).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + NORM_FLOATS * 4 + 180 + CRC_LEN);
    }

    #[test]
    fn empty_model_rejected_before_write() {
        let m = ModelBundle {
            network: Network::Mlp { layers: vec![] },
            norm: NormSpec::default(),
        };
        let mut sink = Vec::new();
        assert!(matches!(write_model(&m, &mut sink), Err(FormatError::Invalid(_))));
        assert!(sink.is_empty());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = ModelBundle::random_gru(&mut rng, 5, 4, 3, 2, NormSpec::default());
        let mut buf = Vec::new();
        let n = write_model(&m, &mut buf).unwrap();
        assert_eq!(n, buf.len());
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), buf);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_model(&ModelBundle::zeros_mlp(2, 3, 2, 1, NormSpec::default())).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_model(&bytes), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode_model(&ModelBundle::zeros_mlp(2, 3, 2, 1, NormSpec::default())).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_model(&bytes), Err(FormatError::UnsupportedVersion(2))));
    }

    #[test]
    fn flipped_payload_bit_is_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ModelBundle::random_gru(&mut rng, 3, 2, 1, 1, NormSpec::default());
        let mut bytes = encode_model(&m).unwrap();
        let at = HEADER_LEN + NORM_FLOATS * 4 + 17;
        bytes[at] ^= 0x10;
        assert!(matches!(decode_model(&bytes), Err(FormatError::Corrupt { .. })));
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let bytes = encode_model(&ModelBundle::zeros_gru(3, 2, 2, 1, NormSpec::default())).unwrap();
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(decode_model(&bytes[..10]), Err(FormatError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(FormatError::SizeMismatch { .. })));
    }

    #[test]
    fn header_predicts_file_size() {
        for (l, i, h, o) in [(1, 156, 8, 96), (4, 156, 16, 96), (2, 3, 5, 7)] {
            let m = ModelBundle::zeros_gru(i, h, l, o, NormSpec::default());
            let header = Header {
                kind: ModelKind::GruStack,
                layer_count: l as u32,
                input_dim: i as u32,
                hidden_dim: h as u32,
                output_dim: o as u32,
            };
            assert_eq!(header.file_len().unwrap(), encode_model(&m).unwrap().len());
        }
        for l in 1..4 {
            let m = ModelBundle::zeros_mlp(6, 16, l, 6, NormSpec::default());
            let header = Header {
                kind: ModelKind::Mlp,
                layer_count: l as u32,
                input_dim: 6,
                hidden_dim: m.hidden_dim() as u32,
                output_dim: 6,
            };
            assert_eq!(header.file_len().unwrap(), encode_model(&m).unwrap().len());
        }
    }

    #[test]
    fn invalid_norm_rejected() {
        let mut m = ModelBundle::zeros_mlp(2, 2, 1, 2, NormSpec::default());
        m.norm.pose_std[3] = 0.0;
        assert!(encode_model(&m).is_err());
    }
}
