//! Binary voxel volumes, the `.pdtv` file encoding, the signal-space mapping
//! and a synthetic porous-media generator.
//!
//! Voxels are stored row-major over `(D, H, W)` with `W` fastest. Value 1 is
//! pore, 0 is matrix.
//!
//! `.pdtv` layout (all integers little-endian):
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 0..4         | magic `PDTV`                    |
//! | 4            | version, `1`                    |
//! | 5..17        | `D`, `H`, `W` as `u32`          |
//! | 17..         | `D·H·W` bytes, each 0 or 1      |

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rng;

pub type Dims = [usize; 3];

const MAGIC: &[u8; 4] = b"PDTV";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 17;

pub fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryVolume {
    dims: Dims,
    voxels: Vec<u8>,
}

impl BinaryVolume {
    pub fn new(dims: Dims, voxels: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(invalid(format!("volume extents must be positive, got {dims:?}")));
        }
        if voxels.len() != voxel_count(dims) {
            return Err(Error::DimMismatch(format!(
                "{dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                voxels.len()
            )));
        }
        if let Some((offset, &value)) = voxels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryVoxel { offset, value });
        }
        Ok(Self { dims, voxels })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            voxels: vec![0; voxel_count(dims)],
        }
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    voxels.push(u8::from(f(z, y, x)));
                }
            }
        }
        Self { dims, voxels }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.voxels[self.index(z, y, x)] == 1
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, pore: bool) {
        let i = self.index(z, y, x);
        self.voxels[i] = u8::from(pore);
    }

    pub fn pore_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn porosity(&self) -> f64 {
        self.pore_count() as f64 / self.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            dims: self.dims,
            voxels: self.voxels.iter().map(|v| 1 - v).collect(),
        }
    }

    /// `2·voxel − 1`: pore → +1, matrix → −1.
    pub fn to_signed(&self) -> SignedVolume {
        SignedVolume {
            dims: self.dims,
            values: self.voxels.iter().map(|&v| 2.0 * f64::from(v) - 1.0).collect(),
        }
    }

    /// Pore indicator as reals in {0, 1}.
    pub fn to_indicator(&self) -> Vec<f64> {
        self.voxels.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.voxels.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.voxels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: "PDTV".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(u32::from(bytes[4])));
        }
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let o = 5 + 4 * i;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        }
        let n = voxel_count(dims);
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < n {
            return Err(Error::Truncated(format!(
                "payload has {} bytes, dims {dims:?} need {n}",
                payload.len()
            )));
        }
        if payload.len() > n {
            return Err(Error::TrailingData(payload.len() - n));
        }
        Self::new(dims, payload.to_vec())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Real-valued field over voxel dims; nominally in [−1, 1] in signal space.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedVolume {
    dims: Dims,
    values: Vec<f64>,
}

impl SignedVolume {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != voxel_count(dims) {
            return Err(Error::DimMismatch(format!(
                "{dims:?} needs {} values, got {}",
                voxel_count(dims),
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sign threshold at zero: positive → pore.
    pub fn to_binary(&self) -> BinaryVolume {
        BinaryVolume {
            dims: self.dims,
            voxels: self.values.iter().map(|&v| u8::from(v > 0.0)).collect(),
        }
    }

    /// Copy of the box starting at `origin` with extents `size`.
    pub fn extract(&self, origin: Dims, size: Dims) -> SignedVolume {
        let mut values = Vec::with_capacity(voxel_count(size));
        for z in 0..size[0] {
            for y in 0..size[1] {
                let row = ((origin[0] + z) * self.dims[1] + origin[1] + y) * self.dims[2] + origin[2];
                values.extend_from_slice(&self.values[row..row + size[2]]);
            }
        }
        SignedVolume { dims: size, values }
    }
}

/// Parameters of the thresholded correlated Gaussian field generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub porosity: f64,
    pub corr_len: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(invalid("synth size must be positive"));
        }
        if !(self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(invalid(format!("porosity {} must lie in (0, 1)", self.porosity)));
        }
        if !(self.corr_len >= 1.0) {
            return Err(invalid(format!("correlation length {} must be >= 1", self.corr_len)));
        }
        if self.corr_len > self.size as f64 / 2.0 {
            return Err(invalid(format!(
                "correlation length {} exceeds half the volume edge {}",
                self.corr_len, self.size
            )));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Convolve along one axis of a `dims` field with reflective boundaries.
fn smooth_axis(field: &[f64], dims: Dims, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let n = dims[axis];
    let stride = strides[axis];
    let mut out = vec![0.0; field.len()];
    let mut line = vec![0.0; n];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    for i in 0..dims[others[0]] {
        for j in 0..dims[others[1]] {
            let base = i * strides[others[0]] + j * strides[others[1]];
            for (p, l) in line.iter_mut().enumerate() {
                *l = field[base + p * stride];
            }
            for p in 0..n {
                let mut acc = 0.0;
                for (q, w) in kernel.iter().enumerate() {
                    acc += w * line[reflect(p as isize + q as isize - radius, n)];
                }
                out[base + p * stride] = acc;
            }
        }
    }
    out
}

/// White noise smoothed by a separable Gaussian of std `corr_len`, then
/// thresholded so that exactly `round(φ·N)` voxels are pore.
pub fn synth_grf(spec: &SynthSpec) -> Result<BinaryVolume> {
    spec.validate()?;
    let dims = [spec.size; 3];
    let n = voxel_count(dims);
    let mut field = rng::normal_field(spec.seed, "synth-grf", 0, n);
    let kernel = gaussian_kernel(spec.corr_len);
    for axis in 0..3 {
        field = smooth_axis(&field, dims, axis, &kernel);
    }
    let pores = (spec.porosity * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut voxels = vec![0u8; n];
    for &i in &order[..pores] {
        voxels[i] = 1;
    }
    Ok(BinaryVolume { dims, voxels })
}

/// Uncorrelated Bernoulli(φ) volume (test and reference data).
pub fn bernoulli(dims: Dims, porosity: f64, seed: u64) -> BinaryVolume {
    let mut rng = rng::stream(seed, "bernoulli", 0);
    let voxels = (0..voxel_count(dims))
        .map(|_| u8::from(rng.random::<f64>() < porosity))
        .collect();
    BinaryVolume { dims, voxels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_mapping() {
        let v = BinaryVolume::new([1, 1, 2], vec![1, 0]).unwrap();
        assert_eq!(v.to_signed().values(), &[1.0, -1.0]);
        assert_eq!(v.to_signed().to_binary(), v);
    }

    #[test]
    fn signed_mean_is_affine_in_porosity() {
        let v = BinaryVolume::from_fn([4, 4, 4], |z, _, _| z == 0);
        assert_eq!(v.porosity(), 0.25);
        let s = v.to_signed();
        let mean = s.values().iter().sum::<f64>() / s.len() as f64;
        assert_eq!(mean, -0.5);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = bernoulli([3, 3, 3], 0.5, 11);
        assert_eq!(BinaryVolume::decode(&v.encode()).unwrap(), v);
    }

    #[test]
    fn decode_errors() {
        let v = bernoulli([3, 3, 3], 0.5, 11);
        let mut bytes = v.encode();
        let short = &bytes[..bytes.len() - 1];
        assert!(BinaryVolume::decode(short)
            .unwrap_err()
            .to_string()
            .starts_with("truncated"));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(BinaryVolume::decode(&bytes)
            .unwrap_err()
            .to_string()
            .starts_with("bad magic"));
        let mut bytes = v.encode();
        bytes[HEADER_LEN] = 2;
        assert!(matches!(
            BinaryVolume::decode(&bytes),
            Err(Error::NonBinaryVoxel { offset: 0, value: 2 })
        ));
        let mut bytes = v.encode();
        bytes.push(0);
        assert!(matches!(BinaryVolume::decode(&bytes), Err(Error::TrailingData(1))));
    }

    #[test]
    fn synth_is_deterministic_and_exact() {
        let spec = SynthSpec {
            size: 32,
            porosity: 0.25,
            corr_len: 2.0,
            seed: 7,
        };
        let a = synth_grf(&spec).unwrap();
        let b = synth_grf(&spec).unwrap();
        assert_eq!(a, b);
        let expected = (0.25f64 * 32768.0).round() as usize;
        assert_eq!(a.pore_count(), expected);
        assert!((a.porosity() - 0.25).abs() <= 0.002);
    }

    #[test]
    fn synth_rejects_long_correlation() {
        let spec = SynthSpec {
            size: 8,
            porosity: 0.3,
            corr_len: 5.0,
            seed: 1,
        };
        assert!(synth_grf(&spec).is_err());
    }

    #[test]
    fn extract_box() {
        let dims = [3, 4, 5];
        let values: Vec<f64> = (0..60).map(f64::from).collect();
        let s = SignedVolume::new(dims, values).unwrap();
        let e = s.extract([1, 2, 3], [2, 2, 2]);
        assert_eq!(e.values(), &[33.0, 34.0, 38.0, 39.0, 53.0, 54.0, 58.0, 59.0]);
    }

    #[test]
    fn reflect_stays_in_range() {
        for i in -20..20 {
            assert!(reflect(i, 5) < 5);
        }
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(5, 5), 4);
    }
}
