//! Dense voxel grids over the unit cube.
//!
//! Lattice nodes sit at cell corners: an axis with `R` nodes spans `[0, 1]`
//! with node `i` at `i / (R - 1)`. Queries outside the cube are clamped.

use std::io::{Read, Write};

use rand::Rng;

use crate::autodiff::{Stencil, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::real::{softplus, DType, Real};

pub const GRID_MAGIC: &[u8; 4] = b"MFG1";

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    resolution: [usize; 3],
    channels: usize,
    values: Tensor<T>,
}

impl<T: Real> VoxelGrid<T> {
    pub fn filled(resolution: [usize; 3], channels: usize, value: T) -> Result<Self> {
        Self::check_dims(resolution, channels)?;
        let n = resolution.iter().product::<usize>() * channels;
        Self::from_values(resolution, channels, vec![value; n])
    }

    pub fn uniform_random(resolution: [usize; 3], channels: usize, bound: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::check_dims(resolution, channels)?;
        let n = resolution.iter().product::<usize>() * channels;
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Self::from_values(resolution, channels, data)
    }

    pub fn from_values(resolution: [usize; 3], channels: usize, data: Vec<T>) -> Result<Self> {
        Self::check_dims(resolution, channels)?;
        let [rx, ry, rz] = resolution;
        let values = Tensor::new(vec![rx, ry, rz, channels], data)?;
        Ok(VoxelGrid { resolution, channels, values })
    }

    fn check_dims(resolution: [usize; 3], channels: usize) -> Result<()> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(invalid(format!("grid resolution {resolution:?} needs >= 2 nodes per axis")));
        }
        if channels == 0 {
            return Err(invalid("grid needs at least one channel"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> VoxelGrid<U> {
        VoxelGrid { resolution: self.resolution, channels: self.channels, values: self.values.cast() }
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.values
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        let [_, ry, rz] = self.resolution;
        (i * ry + j) * rz + k
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> &[T] {
        let v = self.node_index(i, j, k);
        &self.values.data()[v * self.channels..(v + 1) * self.channels]
    }

    pub fn node_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [T] {
        let v = self.node_index(i, j, k);
        let c = self.channels;
        &mut self.values.data_mut()[v * c..(v + 1) * c]
    }

    /// The 8 surrounding lattice nodes of `x` and their trilinear weights.
    pub fn stencil(&self, x: [f64; 3]) -> Stencil<T> {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let r = self.resolution[a];
            let u = x[a].clamp(0.0, 1.0) * (r - 1) as f64;
            let i = (u.floor() as usize).min(r - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut index = [0usize; 8];
        let mut weight = [T::zero(); 8];
        for corner in 0..8 {
            let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
            let w = |d: usize, f: f64| if d == 1 { f } else { 1.0 - f };
            index[corner] = self.node_index(base[0] + dx, base[1] + dy, base[2] + dz);
            weight[corner] = T::of(w(dx, frac[0]) * w(dy, frac[1]) * w(dz, frac[2]));
        }
        Stencil { index, weight }
    }

    /// Trilinear interpolation of all channels at `x`.
    pub fn interpolate(&self, x: [f64; 3]) -> Vec<T> {
        let s = self.stencil(x);
        let c = self.channels;
        let data = self.values.data();
        let mut out = vec![T::zero(); c];
        for (&i, &w) in s.index.iter().zip(&s.weight) {
            for (o, &v) in out.iter_mut().zip(&data[i * c..(i + 1) * c]) {
                *o += w * v;
            }
        }
        out
    }

    /// Records the grid values as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.param(self.values.clone())
    }

    /// Records the grid values as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Var {
        tape.constant(self.values.clone())
    }

    /// Batched interpolation on the tape; output is `(points, channels)`.
    pub fn interp_on(&self, tape: &mut Tape<T>, bound: Var, points: &[[f64; 3]]) -> Result<Var> {
        let stencils = points.iter().map(|&p| self.stencil(p)).collect();
        tape.interp(bound, stencils)
    }

    pub fn write_blob(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.values.numel() * T::DTYPE.size());
        buf.extend_from_slice(GRID_MAGIC);
        for v in self.resolution {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.channels as u32).to_le_bytes());
        buf.extend_from_slice(&(T::DTYPE as u32).to_le_bytes());
        for &v in self.values.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_blob(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a grid blob. Data stored in the other float width is converted.
    pub fn read_blob(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format(format!("bad grid magic {magic:?}")));
        }
        let mut header = [0u32; 5];
        for h in header.iter_mut() {
            *h = read_u32(r)?;
        }
        let [rx, ry, rz, c, code] = header;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let n = (rx as usize)
            .checked_mul(ry as usize)
            .and_then(|v| v.checked_mul(rz as usize))
            .and_then(|v| v.checked_mul(c as usize))
            .ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
        let data = read_floats(r, n, dtype)?;
        Self::from_values([rx as usize, ry as usize, rz as usize], c as usize, data)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_blob(mut bytes: &[u8]) -> Result<Self> {
        Self::read_blob(&mut bytes)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_floats<T: Real>(r: &mut impl Read, n: usize, dtype: DType) -> Result<Vec<T>> {
    let mut bytes = vec![0u8; n * dtype.size()];
    r.read_exact(&mut bytes)?;
    Ok(match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
    })
}

/// Density activation applied after interpolation.
pub fn density_activation<T: Real>(raw: T) -> T {
    softplus(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, res: [usize; 3], c: usize) -> VoxelGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelGrid::uniform_random(res, c, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn exact_at_lattice_nodes() {
        let g = random_grid(1, [4, 5, 3], 2);
        for i in 0..4 {
            for j in 0..5 {
                for k in 0..3 {
                    let x = [i as f64 / 3.0, j as f64 / 4.0, k as f64 / 2.0];
                    let v = g.interpolate(x);
                    for (a, b) in v.iter().zip(g.node(i, j, k)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let g = random_grid(2, [4, 4, 4], 1);
        let v = g.interpolate([0.5 / 3.0, 1.5 / 3.0, 2.5 / 3.0])[0];
        let mut mean = 0.0;
        for (i, j, k) in cell_corners(0, 1, 2) {
            mean += g.node(i, j, k)[0];
        }
        assert!((v - mean / 8.0).abs() < 1e-12);
    }

    fn cell_corners(i: usize, j: usize, k: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    out.push((i + a, j + b, k + c));
                }
            }
        }
        out
    }

    #[test]
    fn out_of_bounds_queries_clamp() {
        let g = random_grid(3, [3, 3, 3], 1);
        assert_eq!(g.interpolate([-2.0, 0.5, 7.0]), g.interpolate([0.0, 0.5, 1.0]));
    }

    #[test]
    fn affine_along_axis_within_cell() {
        let g = random_grid(4, [5, 5, 5], 3);
        let (y, z) = (0.31, 0.77);
        let xs = [0.26, 0.33, 0.40];
        let v: Vec<_> = xs.iter().map(|&x| g.interpolate([x, y, z])).collect();
        for ch in 0..3 {
            let slope1 = (v[1][ch] - v[0][ch]) / (xs[1] - xs[0]);
            let slope2 = (v[2][ch] - v[1][ch]) / (xs[2] - xs[1]);
            assert!((slope1 - slope2).abs() < 1e-9);
        }
    }

    #[test]
    fn softplus_values() {
        assert!((density_activation(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((density_activation(30.0f64) - 30.0).abs() < 1e-12);
        // ln(1 + e^-30) = e^-30 - e^-60/2 + ...
        let reference = (-30f64).exp() - (-60f64).exp() / 2.0;
        assert!((density_activation(-30.0f64) - reference).abs() / reference < 1e-14);
        assert!(density_activation(-800.0f64) >= 0.0);
        assert!(density_activation(800.0f64).is_finite());
    }

    #[test]
    fn rejects_degenerate_dims() {
        assert!(VoxelGrid::<f32>::filled([1, 4, 4], 1, 0.0).is_err());
        assert!(VoxelGrid::<f32>::filled([4, 4, 4], 0, 0.0).is_err());
    }

    #[test]
    fn blob_rejects_bad_magic_and_truncation() {
        let g = random_grid(5, [2, 3, 4], 2);
        let mut blob = g.to_blob();
        assert_eq!(&blob[..4], b"MFG1");
        assert_eq!(blob.len(), 24 + 2 * 3 * 4 * 2 * 8);
        assert!(VoxelGrid::<f64>::from_blob(&blob[..blob.len() - 1]).is_err());
        blob[0] = b'X';
        assert!(VoxelGrid::<f64>::from_blob(&blob).is_err());
    }

    proptest::proptest! {
        #[test]
        fn blob_round_trip_is_bit_exact(seed in 0u64..1000, rx in 2usize..6, c in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: VoxelGrid<f32> = VoxelGrid::uniform_random([rx, 3, 2], c, 5.0, &mut rng).unwrap();
            let blob = g.to_blob();
            let back = VoxelGrid::<f32>::from_blob(&blob).unwrap();
            proptest::prop_assert_eq!(&back, &g);
            proptest::prop_assert_eq!(back.to_blob(), blob);
        }
    }
}
