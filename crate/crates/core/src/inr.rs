//! SIREN networks and the `.insp` file format.
//!
//! Layers use the row-vector convention `h_i = sigma_i(h_{i-1} W_i + b_i)`
//! with `W_i` of shape `d_{i-1} x d_i`. The first layer's sine argument is
//! scaled by `omega0`; deeper sine layers are unscaled and the last layer is
//! affine.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{gemm, uniform_from, DenseMatrix, ParamLayout, SeedTree, Trans};

pub const DEFAULT_OMEGA0: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenNetwork {
    omega0: f64,
    layers: Vec<Layer>,
}

impl SirenNetwork {
    /// Assembles a network from explicit layers. Every layer but the last is
    /// a sine layer; a single layer is a plain affine map.
    pub fn from_layers(omega0: f64, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        if !(omega0 > 0.0) || !omega0.is_finite() {
            return Err(Error::contract(format!("omega0 must be positive, got {omega0}")));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::contract(format!(
                    "layer {i}: bias length {} != fan_out {}",
                    l.bias.len(),
                    l.fan_out()
                )));
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(Error::contract(format!(
                    "layer {i}: fan_in {} does not chain with previous fan_out {}",
                    l.fan_in(),
                    layers[i - 1].fan_out()
                )));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::contract(format!("layer {i}: non-finite parameter")));
            }
        }
        if layers[0].fan_in() == 0 || layers.last().unwrap().fan_out() == 0 {
            return Err(Error::contract("input and output dimensions must be positive"));
        }
        Ok(Self { omega0, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::fan_out)
            .collect()
    }

    /// Multiplier applied inside the sine of layer `i`.
    #[inline]
    pub fn sine_scale(&self, i: usize) -> f64 {
        if i == 0 {
            self.omega0
        } else {
            1.0
        }
    }

    #[inline]
    pub fn is_sine_layer(&self, i: usize) -> bool {
        i + 1 < self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn param_layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new();
        for (i, l) in self.layers.iter().enumerate() {
            layout.push(format!("layer{i}.weight"), l.weight.as_slice().len());
            layout.push(format!("layer{i}.bias"), l.bias.len());
        }
        layout
    }

    /// Parameters in file order: per layer, weights row-major then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Evaluates the network at one coordinate.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "coordinate has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weight.vec_mul(&h);
            for (zj, bj) in z.iter_mut().zip(&l.bias) {
                *zj += bj;
            }
            if self.is_sine_layer(i) {
                let s = self.sine_scale(i);
                for zj in &mut z {
                    *zj = (s * *zj).sin();
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Evaluates many coordinates at once; `points` is row-major `n x m`,
    /// the result row-major `n x c`.
    pub fn forward_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        let m = self.input_dim();
        if !points.len().is_multiple_of(m) {
            return Err(Error::contract("point buffer is not a multiple of the input dimension"));
        }
        let n = points.len() / m;
        let mut h = points.to_vec();
        let mut width = m;
        for (i, l) in self.layers.iter().enumerate() {
            let out = l.fan_out();
            let mut z = vec![0.0; n * out];
            for row in z.chunks_exact_mut(out) {
                row.copy_from_slice(&l.bias);
            }
            gemm(
                Trans::No,
                Trans::No,
                n,
                out,
                width,
                1.0,
                &h,
                width,
                l.weight.as_slice(),
                out,
                1.0,
                &mut z,
                out,
            );
            if self.is_sine_layer(i) {
                let s = self.sine_scale(i);
                for v in &mut z {
                    *v = (s * *v).sin();
                }
            }
            h = z;
            width = out;
        }
        Ok(h)
    }

    /// Precomposes the network with the affine coordinate map
    /// `x -> A x + t`, so that the result evaluates `self(A x + t)`.
    pub fn compose_affine(&self, a: &DenseMatrix, t: &[f64]) -> Result<SirenNetwork> {
        let m = self.input_dim();
        if a.rows() != m || a.cols() != m || t.len() != m {
            return Err(Error::contract(format!(
                "affine map must be {m}x{m} with a length-{m} offset"
            )));
        }
        let mut out = self.clone();
        let first = &self.layers[0];
        // (A x + t)^T W = x^T (A^T W) + t^T W
        let new_w = a.transpose().matmul(&first.weight)?;
        let shift = first.weight.vec_mul(t);
        let l0 = &mut out.layers[0];
        l0.weight = new_w;
        for (b, s) in l0.bias.iter_mut().zip(shift) {
            *b += s;
        }
        Ok(out)
    }
}

/// Builds a randomly initialized SIREN.
///
/// First-layer weights are uniform in `(-1/m, 1/m)`. Hidden sine layers use
/// `(-sqrt(6/fan_in), sqrt(6/fan_in))`, which together with the unscaled
/// sine reproduces the usual SIREN activation statistics. The final affine
/// layer uses `(-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0)`. Biases start
/// at zero.
pub fn build_siren(
    input_dim: usize,
    output_dim: usize,
    hidden: &[usize],
    omega0: f64,
    seed: u64,
) -> Result<SirenNetwork> {
    if input_dim == 0 || output_dim == 0 {
        return Err(Error::contract("input and output dimensions must be >= 1"));
    }
    if hidden.is_empty() {
        return Err(Error::contract("at least one hidden layer is required"));
    }
    if hidden.contains(&0) {
        return Err(Error::contract("hidden widths must be positive"));
    }
    let tree = SeedTree::new(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    let n_layers = dims.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let bound = if i == 0 {
            1.0 / fan_in as f64
        } else if i + 1 < n_layers {
            (6.0 / fan_in as f64).sqrt()
        } else {
            (6.0 / fan_in as f64).sqrt() / omega0
        };
        let mut rng = tree.stream(i as u64);
        // open interval: redraw the (measure-zero) exact lower endpoint
        let w: Vec<f64> = uniform_from(&mut rng, -bound, bound, fan_in * fan_out)
            .into_iter()
            .map(|v| if v == -bound { 0.0 } else { v })
            .collect();
        layers.push(Layer {
            weight: DenseMatrix::from_vec(fan_in, fan_out, w)?,
            bias: vec![0.0; fan_out],
        });
    }
    SirenNetwork::from_layers(omega0, layers)
}

/// Rotation matrix in the plane, angle in radians.
pub fn rotation2(angle: f64) -> DenseMatrix {
    let (s, c) = angle.sin_cos();
    DenseMatrix::from_vec(2, 2, vec![c, -s, s, c]).expect("finite rotation")
}

pub fn degrees(d: f64) -> f64 {
    d * PI / 180.0
}

// ---------------------------------------------------------------------------
// file format

pub const INR_MAGIC: &[u8; 4] = b"INSP";
pub const INR_VERSION: u16 = 1;

/// Serializes a network:
///
/// ```text
/// "INSP" | u16 version | u8 m | u8 c | u16 n_layers | u16 hidden widths (n_layers-1)
///        | f64 omega0 | f64 params... | u32 crc32
/// ```
///
/// All integers and floats little-endian; the CRC covers every preceding byte.
pub fn save_inr(net: &SirenNetwork) -> Result<Vec<u8>> {
    let m = u8::try_from(net.input_dim())
        .map_err(|_| Error::contract("input dimension does not fit the file header"))?;
    let c = u8::try_from(net.output_dim())
        .map_err(|_| Error::contract("output dimension does not fit the file header"))?;
    let n_layers = u16::try_from(net.layers().len())
        .map_err(|_| Error::contract("too many layers for the file header"))?;
    let mut buf = Vec::with_capacity(32 + net.param_count() * 8);
    buf.extend_from_slice(INR_MAGIC);
    buf.extend_from_slice(&INR_VERSION.to_le_bytes());
    buf.push(m);
    buf.push(c);
    buf.extend_from_slice(&n_layers.to_le_bytes());
    for w in net.hidden_widths() {
        let w = u16::try_from(w).map_err(|_| Error::contract("layer width exceeds u16"))?;
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.extend_from_slice(&net.omega0().to_le_bytes());
    for p in net.flat_params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn load_inr(bytes: &[u8]) -> Result<SirenNetwork> {
    let body = verify_envelope(bytes, INR_MAGIC, "INSP", INR_VERSION)?;
    let mut r = ByteReader::new(body, 6);
    let m = r.u8()? as usize;
    let c = r.u8()? as usize;
    let n_layers = r.u16()? as usize;
    if n_layers == 0 {
        return Err(Error::Header("zero layers".into()));
    }
    let mut dims = vec![m];
    for _ in 0..n_layers - 1 {
        dims.push(r.u16()? as usize);
    }
    dims.push(c);
    let omega0 = r.f64()?;
    let n_params: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let expected = r.pos() + n_params * 8;
    if body.len() != expected {
        return Err(Error::Header(format!(
            "architecture implies {expected} bytes before checksum, file has {}",
            body.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for w in dims.windows(2) {
        let weights = r.f64_vec(w[0] * w[1])?;
        let bias = r.f64_vec(w[1])?;
        layers.push(Layer {
            weight: DenseMatrix::from_vec(w[0], w[1], weights)
                .map_err(|e| Error::Header(e.to_string()))?,
            bias,
        });
    }
    SirenNetwork::from_layers(omega0, layers).map_err(|e| Error::Header(e.to_string()))
}

/// Checks length, magic, version and trailing CRC32; returns the bytes
/// covered by the checksum.
pub(crate) fn verify_envelope<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    magic_name: &'static str,
    version: u16,
) -> Result<&'a [u8]> {
    const MIN: usize = 4 + 2 + 4;
    if bytes.len() < MIN {
        return Err(Error::Truncated {
            needed: MIN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: magic_name,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::VersionMismatch {
            found,
            expected: version,
        });
    }
    Ok(body)
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], pos: usize) -> Self {
        Self { buf, pos }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                needed: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_neuron(w1: f64, b1: f64, w2: f64, omega0: f64) -> SirenNetwork {
        SirenNetwork::from_layers(
            omega0,
            vec![
                Layer {
                    weight: DenseMatrix::from_vec(1, 1, vec![w1]).unwrap(),
                    bias: vec![b1],
                },
                Layer {
                    weight: DenseMatrix::from_vec(1, 1, vec![w2]).unwrap(),
                    bias: vec![0.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn shapes_follow_the_width_list() {
        let net = build_siren(2, 1, &[16, 16], 30.0, 1).unwrap();
        let shapes: Vec<_> = net
            .layers()
            .iter()
            .map(|l| (l.weight.rows(), l.weight.cols()))
            .collect();
        assert_eq!(shapes, vec![(2, 16), (16, 16), (16, 1)]);
        assert_eq!(net, build_siren(2, 1, &[16, 16], 30.0, 1).unwrap());
        assert!(net.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn first_layer_bound() {
        let net = build_siren(1, 1, &[8], 30.0, 5).unwrap();
        assert!(net.layers()[0]
            .weight
            .as_slice()
            .iter()
            .all(|&w| w > -1.0 && w < 1.0));
        let net2 = build_siren(2, 1, &[64, 64], 30.0, 5).unwrap();
        assert!(net2.layers()[0]
            .weight
            .as_slice()
            .iter()
            .all(|&w| w.abs() < 0.5));
    }

    #[test]
    fn empty_hidden_is_rejected() {
        assert!(matches!(build_siren(2, 1, &[], 30.0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn one_neuron_hand_value() {
        let net = one_neuron(2.0, 0.5, 3.0, 1.0);
        let y = net.forward(&[0.0]).unwrap();
        assert_eq!(y, vec![3.0 * 0.5f64.sin()]);
        assert_eq!(y, net.forward(&[0.0]).unwrap());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = build_siren(2, 3, &[8, 8], 30.0, 2).unwrap();
        let zeros = vec![0.0; net.param_count()];
        net.set_flat_params(&zeros).unwrap();
        for x in [[0.1, -0.4], [1.0, 1.0], [-0.7, 0.2]] {
            assert_eq!(net.forward(&x).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn single_affine_layer_is_exact() {
        let w = DenseMatrix::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let net = SirenNetwork::from_layers(
            30.0,
            vec![Layer {
                weight: w.clone(),
                bias: vec![0.1, -0.2],
            }],
        )
        .unwrap();
        let x = [0.3, -0.6];
        let direct = [
            x[0] * 0.5 + x[1] * 2.0 + 0.1,
            x[0] * -1.0 + x[1] * 0.25 - 0.2,
        ];
        assert_eq!(net.forward(&x).unwrap(), direct.to_vec());
    }

    #[test]
    fn batch_matches_pointwise() {
        let net = build_siren(2, 2, &[12, 9], 30.0, 11).unwrap();
        let pts = [0.1, 0.2, -0.5, 0.9, 0.0, -1.0];
        let batch = net.forward_batch(&pts).unwrap();
        for (p, row) in pts.chunks(2).zip(batch.chunks(2)) {
            let single = net.forward(p).unwrap();
            for (a, b) in single.iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let net = build_siren(2, 1, &[4], 30.0, 0).unwrap();
        assert!(matches!(net.forward(&[0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let net = build_siren(2, 3, &[7, 5], 30.0, 9).unwrap();
        let bytes = save_inr(&net).unwrap();
        let back = load_inr(&bytes).unwrap();
        assert_eq!(net.omega0().to_bits(), back.omega0().to_bits());
        let a = net.flat_params();
        let b = back.flat_params();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(save_inr(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let net = build_siren(2, 1, &[4], 30.0, 3).unwrap();
        let bytes = save_inr(&net).unwrap();

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(
            load_inr(truncated),
            Err(Error::Checksum { .. }) | Err(Error::Truncated { .. })
        ));
        assert!(matches!(load_inr(&bytes[..5]), Err(Error::Truncated { .. })));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(load_inr(&flipped), Err(Error::Checksum { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(load_inr(&magic), Err(Error::BadMagic { .. })));

        let mut version = bytes[..bytes.len() - 4].to_vec();
        version[4] = 9;
        let crc = crc32fast::hash(&version);
        version.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(load_inr(&version), Err(Error::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn affine_precomposition() {
        let net = build_siren(2, 1, &[10, 10], 30.0, 4).unwrap();
        let a = rotation2(0.3);
        let t = [0.05, -0.1];
        let moved = net.compose_affine(&a, &t).unwrap();
        let x = [0.2, -0.35];
        let ax = [
            a.get(0, 0) * x[0] + a.get(0, 1) * x[1] + t[0],
            a.get(1, 0) * x[0] + a.get(1, 1) * x[1] + t[1],
        ];
        let lhs = moved.forward(&x).unwrap()[0];
        let rhs = net.forward(&ax).unwrap()[0];
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
