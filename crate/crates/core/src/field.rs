//! Voxel grids: geometry, SH coefficient volumes, binary masks, and streamlines.
//!
//! Voxel `(i, j, k)` spans `origin + [i, i+1) * spacing` (per axis) and has its
//! center at `origin + (i + 0.5) * spacing`. A world point belongs to the voxel
//! obtained by flooring its continuous voxel coordinates. Storage is x-fastest.

use crate::scalar::vec3::Vec3;
use crate::scalar::Real;
use crate::{Error, Result};

/// Grid geometry: voxel counts, voxel edge lengths (mm) and the world position
/// of the corner of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    pub dims: [usize; 3],
    pub spacing: Vec3<T>,
    pub origin: Vec3<T>,
}

pub type VoxelIndex = [usize; 3];

/// Face-neighbor offsets in the fixed order used by state and feature assembly:
/// center, +x, -x, +y, -y, +z, -z.
pub const NEIGHBOR_OFFSETS: [[isize; 3]; 7] = [
    [0, 0, 0],
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

impl<T: Real> GridSpec<T> {
    pub fn new(dims: [usize; 3], spacing: Vec3<T>, origin: Vec3<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(Error::InvalidGrid("spacing must be positive and finite".into()));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Isotropic grid with its origin at the world origin.
    pub fn isotropic(dims: [usize; 3], spacing_mm: T) -> Result<Self> {
        Self::new(dims, [spacing_mm; 3], [T::zero(); 3])
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn min_spacing(&self) -> T {
        self.spacing[0].min(self.spacing[1]).min(self.spacing[2])
    }

    /// Continuous voxel coordinates `(p - origin) / spacing` (corner convention).
    pub fn world_to_voxel(&self, p: &Vec3<T>) -> Vec3<T> {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn voxel_to_world(&self, c: &Vec3<T>) -> Vec3<T> {
        [
            self.origin[0] + c[0] * self.spacing[0],
            self.origin[1] + c[1] * self.spacing[1],
            self.origin[2] + c[2] * self.spacing[2],
        ]
    }

    pub fn voxel_center(&self, v: VoxelIndex) -> Vec3<T> {
        let half = T::lit(0.5);
        self.voxel_to_world(&[
            T::from_usize_lossy(v[0]) + half,
            T::from_usize_lossy(v[1]) + half,
            T::from_usize_lossy(v[2]) + half,
        ])
    }

    /// Integer voxel containing `p` (may be outside the grid).
    pub fn containing_voxel_signed(&self, p: &Vec3<T>) -> [i64; 3] {
        let c = self.world_to_voxel(p);
        [
            c[0].floor().to_i64().unwrap_or(i64::MIN),
            c[1].floor().to_i64().unwrap_or(i64::MIN),
            c[2].floor().to_i64().unwrap_or(i64::MIN),
        ]
    }

    /// Voxel containing `p`, or `None` when `p` lies outside the grid.
    pub fn containing_voxel(&self, p: &Vec3<T>) -> Option<VoxelIndex> {
        self.checked_index(self.containing_voxel_signed(p))
    }

    pub fn checked_index(&self, v: [i64; 3]) -> Option<VoxelIndex> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            if v[a] < 0 || v[a] >= self.dims[a] as i64 {
                return None;
            }
            out[a] = v[a] as usize;
        }
        Some(out)
    }

    pub fn offset(&self, v: VoxelIndex, d: [isize; 3]) -> Option<VoxelIndex> {
        self.checked_index([
            v[0] as i64 + d[0] as i64,
            v[1] as i64 + d[1] as i64,
            v[2] as i64 + d[2] as i64,
        ])
    }

    #[inline]
    pub fn linear(&self, v: VoxelIndex) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> VoxelIndex {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    pub fn cast<U: Real>(&self) -> GridSpec<U> {
        GridSpec {
            dims: self.dims,
            spacing: crate::scalar::vec3::cast(&self.spacing),
            origin: crate::scalar::vec3::cast(&self.origin),
        }
    }
}

/// Per-voxel vectors of spherical-harmonic coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ShField<T> {
    pub spec: GridSpec<T>,
    pub n_coeff: usize,
    pub coeffs: Vec<T>,
}

impl<T: Real> ShField<T> {
    pub fn zeros(spec: GridSpec<T>, n_coeff: usize) -> Self {
        Self { spec, n_coeff, coeffs: vec![T::zero(); spec.n_voxels() * n_coeff] }
    }

    pub fn from_vec(spec: GridSpec<T>, n_coeff: usize, coeffs: Vec<T>) -> Result<Self> {
        if coeffs.len() != spec.n_voxels() * n_coeff {
            return Err(Error::Shape(format!(
                "field needs {} values, got {}",
                spec.n_voxels() * n_coeff,
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("field coefficients".into()));
        }
        Ok(Self { spec, n_coeff, coeffs })
    }

    #[inline]
    pub fn voxel(&self, v: VoxelIndex) -> &[T] {
        let i = self.spec.linear(v) * self.n_coeff;
        &self.coeffs[i..i + self.n_coeff]
    }

    #[inline]
    pub fn voxel_mut(&mut self, v: VoxelIndex) -> &mut [T] {
        let i = self.spec.linear(v) * self.n_coeff;
        &mut self.coeffs[i..i + self.n_coeff]
    }

    /// Trilinear interpolation between voxel centers; out-of-grid positions
    /// clamp to the border voxels.
    pub fn interp(&self, p: &Vec3<T>) -> Vec<T> {
        let c = self.spec.world_to_voxel(p);
        let half = T::lit(0.5);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let n = self.spec.dims[a];
            let max = T::from_usize_lossy(n - 1);
            let x = (c[a] - half).max(T::zero()).min(max);
            let f = x.floor();
            let i = f.to_usize().unwrap_or(0).min(n - 1);
            lo[a] = i;
            hi[a] = (i + 1).min(n - 1);
            frac[a] = x - f;
        }
        let mut out = vec![T::zero(); self.n_coeff];
        for corner in 0..8 {
            let mut w = T::one();
            let mut v = [0usize; 3];
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    v[a] = hi[a];
                } else {
                    w *= T::one() - frac[a];
                    v[a] = lo[a];
                }
            }
            if w == T::zero() {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(self.voxel(v)) {
                *o += w * x;
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ShField<U> {
        ShField {
            spec: self.spec.cast(),
            n_coeff: self.n_coeff,
            coeffs: self.coeffs.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }
}

/// Binary voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingMask<T> {
    pub spec: GridSpec<T>,
    pub voxels: Vec<bool>,
}

impl<T: Real> TrackingMask<T> {
    pub fn empty(spec: GridSpec<T>) -> Self {
        Self { spec, voxels: vec![false; spec.n_voxels()] }
    }

    pub fn full(spec: GridSpec<T>) -> Self {
        Self { spec, voxels: vec![true; spec.n_voxels()] }
    }

    pub fn from_vec(spec: GridSpec<T>, voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != spec.n_voxels() {
            return Err(Error::Shape(format!(
                "mask needs {} voxels, got {}",
                spec.n_voxels(),
                voxels.len()
            )));
        }
        Ok(Self { spec, voxels })
    }

    #[inline]
    pub fn get(&self, v: VoxelIndex) -> bool {
        self.voxels[self.spec.linear(v)]
    }

    #[inline]
    pub fn set(&mut self, v: VoxelIndex, on: bool) {
        let i = self.spec.linear(v);
        self.voxels[i] = on;
    }

    /// Whether the voxel containing `p` is set; false outside the grid.
    pub fn contains_point(&self, p: &Vec3<T>) -> bool {
        self.spec.containing_voxel(p).is_some_and(|v| self.get(v))
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        self.voxels
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| self.spec.unravel(i))
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.voxels.iter().zip(&other.voxels).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.voxels.iter().zip(&other.voxels).filter(|(&a, &b)| a && b).count()
    }

    /// Dilation by a discrete Euclidean ball of `ceil(radius_mm / min_spacing)` voxels.
    pub fn dilate(&self, radius_mm: T) -> Result<Self> {
        if !(radius_mm >= T::zero()) {
            return Err(Error::InvalidArgument("dilation radius must be >= 0".into()));
        }
        let r = (radius_mm / self.spec.min_spacing()).ceil().to_i64().unwrap_or(0);
        if r == 0 {
            return Ok(self.clone());
        }
        let mut ball = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy + dz * dz <= r * r {
                        ball.push([dx as isize, dy as isize, dz as isize]);
                    }
                }
            }
        }
        let mut out = self.clone();
        for v in self.indices() {
            for &d in &ball {
                if let Some(n) = self.spec.offset(v, d) {
                    out.set(n, true);
                }
            }
        }
        Ok(out)
    }
}

/// Ordered polyline in millimeters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Streamline<T> {
    pub points: Vec<Vec3<T>>,
}

impl<T: Real> Streamline<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of segment lengths.
    pub fn arc_length(&self) -> T {
        self.points
            .windows(2)
            .map(|w| crate::scalar::vec3::dist(&w[0], &w[1]))
            .fold(T::zero(), |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_spec(n: usize) -> GridSpec<f64> {
        GridSpec::isotropic([n; 3], 1.0).unwrap()
    }

    #[test]
    fn world_to_voxel_examples() {
        let s = unit_spec(4);
        assert_eq!(s.world_to_voxel(&[2.5, 0.0, 0.0]), [2.5, 0.0, 0.0]);
        let s = GridSpec::new([4; 3], [2.0; 3], [1.0; 3]).unwrap();
        assert_eq!(s.world_to_voxel(&[5.0, 3.0, 1.0]), [2.0, 1.0, 0.0]);
        let s = GridSpec::isotropic([8; 3], 0.375).unwrap();
        assert_eq!(s.world_to_voxel(&[0.375, 0.75, 1.125]), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn corner_points_round_trip() {
        let s = GridSpec::new([5, 6, 7], [0.5, 1.25, 2.0], [-3.0, 1.5, 0.25]).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                for k in 0..7 {
                    let c = [i as f64, j as f64, k as f64];
                    assert_eq!(s.world_to_voxel(&s.voxel_to_world(&c)), c);
                }
            }
        }
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(GridSpec::<f64>::isotropic([0, 2, 2], 1.0).is_err());
        assert!(GridSpec::<f64>::new([2; 3], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn linear_unravel_inverse() {
        let s = GridSpec::<f64>::isotropic([3, 4, 5], 1.0).unwrap();
        for idx in 0..s.n_voxels() {
            assert_eq!(s.linear(s.unravel(idx)), idx);
        }
        assert_eq!(s.linear([1, 0, 0]), 1);
    }

    fn linear_field(n: usize) -> ShField<f64> {
        let s = unit_spec(n);
        let mut f = ShField::zeros(s, 2);
        for idx in 0..s.n_voxels() {
            let v = s.unravel(idx);
            let c = f.voxel_mut(v);
            c[0] = v[0] as f64;
            c[1] = 2.0 * v[1] as f64 - v[2] as f64 + 1.0;
        }
        f
    }

    #[test]
    fn interp_examples() {
        let s = unit_spec(4);
        let mut f = ShField::zeros(s, 3);
        f.coeffs.iter_mut().enumerate().for_each(|(i, c)| *c = [1.5, -2.0, 0.25][i % 3]);
        assert_eq!(f.interp(&[1.3, 2.9, 0.1]), vec![1.5, -2.0, 0.25]);

        let f = linear_field(8);
        assert_eq!(f.interp(&s.voxel_center([3, 0, 0]))[0], 3.0);
        assert!((f.interp(&[4.0, 0.5, 0.5])[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn interp_reproduces_linear_field_in_interior() {
        let f = linear_field(8);
        for &p in &[[1.7, 2.2, 3.9], [0.5, 0.5, 0.5], [6.49, 1.01, 5.5]] {
            let v = f.interp(&p);
            let (x, y, z) = (p[0] - 0.5, p[1] - 0.5, p[2] - 0.5);
            assert!((v[0] - x).abs() < 1e-9);
            assert!((v[1] - (2.0 * y - z + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn interp_clamps_outside() {
        let f = linear_field(6);
        assert_eq!(f.interp(&[-10.0, 0.5, 0.5])[0], 0.0);
        assert_eq!(f.interp(&[100.0, 0.5, 0.5])[0], 5.0);
    }

    #[test]
    fn dilate_examples() {
        let s = unit_spec(5);
        let mut m = TrackingMask::empty(s);
        m.set([2, 2, 2], true);
        assert_eq!(m.dilate(0.0).unwrap(), m);
        assert_eq!(m.dilate(1.0).unwrap().count(), 7);
        // ball radius 2: 33 lattice points with |d|^2 <= 4
        assert_eq!(m.dilate(2.0).unwrap().count(), 33);
        let full = TrackingMask::full(s);
        assert_eq!(full.dilate(3.0).unwrap(), full);
        assert!(m.dilate(-1.0).is_err());
    }

    #[test]
    fn dilate_uses_min_spacing() {
        let s = GridSpec::new([7; 3], [0.5, 1.0, 1.0], [0.0; 3]).unwrap();
        let mut m = TrackingMask::empty(s);
        m.set([3, 3, 3], true);
        // 1 mm over 0.5 mm spacing -> ball of radius 2 voxels
        assert_eq!(m.dilate(1.0).unwrap().count(), 33);
    }

    #[test]
    fn contains_point_uses_floor() {
        let s = unit_spec(3);
        let mut m = TrackingMask::empty(s);
        m.set([1, 1, 1], true);
        assert!(m.contains_point(&[1.0, 1.0, 1.0]));
        assert!(m.contains_point(&[1.999, 1.5, 1.2]));
        assert!(!m.contains_point(&[2.0, 1.5, 1.5]));
        assert!(!m.contains_point(&[-0.1, 1.5, 1.5]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mask_strategy() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
            (prop::collection::vec(any::<bool>(), 216), prop::collection::vec(any::<bool>(), 216))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn dilate_is_monotone_and_extensive((a, extra) in mask_strategy(), r in 0.0f64..2.5) {
                let s = unit_spec(6);
                let ma = TrackingMask::from_vec(s, a.clone()).unwrap();
                let b: Vec<bool> = a.iter().zip(&extra).map(|(&x, &y)| x || y).collect();
                let mb = TrackingMask::from_vec(s, b).unwrap();
                let da = ma.dilate(r).unwrap();
                let db = mb.dilate(r).unwrap();
                prop_assert!(ma.is_subset_of(&da));
                prop_assert!(da.is_subset_of(&db));
            }

            #[test]
            fn interp_exact_at_centers(vals in prop::collection::vec(-5.0f64..5.0, 64), i in 0usize..4, j in 0usize..4, k in 0usize..4) {
                let s = unit_spec(4);
                let f = ShField::from_vec(s, 1, vals).unwrap();
                let got = f.interp(&s.voxel_center([i, j, k]))[0];
                prop_assert_eq!(got, f.voxel([i, j, k])[0]);
            }
        }
    }
}
