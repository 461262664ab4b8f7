//! Synthetic phantoms with analytically known bundles, masks and peaks.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::field::{GridSpec, ShField, Streamline, TrackingMask, VoxelIndex};
use crate::post::voxelize;
use crate::rng::{self, Domain};
use crate::scalar::vec3::{self, Vec3};
use crate::scalar::Real;
use crate::sh::{lobe_samples, ShBasis};
use crate::{Error, Result};

/// Lobe sharpness exponent of the synthetic fODF.
pub const LOBE_SHARPNESS: i32 = 16;
/// Bundle tube radius in voxels.
pub const TUBE_RADIUS_VOX: f64 = 3.0;
/// Distance (voxels) between the bundle and the grid border.
pub const MARGIN_VOX: f64 = 2.0;
pub const MIN_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    Straight,
    Arc,
    Crossing,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Self::Straight),
            "arc" => Ok(Self::Arc),
            "crossing" => Ok(Self::Crossing),
            other => Err(Error::InvalidArgument(format!("unknown phantom kind `{other}`"))),
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Straight => "straight",
            Self::Arc => "arc",
            Self::Crossing => "crossing",
        })
    }
}

/// Analytic centerline of one bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bundle<T> {
    /// Segment from `start` to `end`.
    Line { start: Vec3<T>, end: Vec3<T> },
    /// Quarter circle in the plane `z = center[2]`, from angle 0 to 90 degrees.
    Arc { center: Vec3<T>, radius: T },
}

impl<T: Real> Bundle<T> {
    pub fn centerline_length(&self) -> T {
        match self {
            Self::Line { start, end } => vec3::dist(start, end),
            Self::Arc { radius, .. } => *radius * T::FRAC_PI_2(),
        }
    }

    /// Fiber direction at (or nearest to) `p`.
    pub fn direction_at(&self, p: &Vec3<T>) -> Vec3<T> {
        match self {
            Self::Line { start, end } => vec3::normalized(&vec3::sub(end, start), T::lit(1e-12)).expect("non-degenerate line"),
            Self::Arc { center, .. } => {
                let theta = (p[1] - center[1]).atan2(p[0] - center[0]);
                let theta = theta.max(T::zero()).min(T::FRAC_PI_2());
                [-theta.sin(), theta.cos(), T::zero()]
            }
        }
    }

    /// Distance from `p` to the centerline (perpendicular to the fiber direction).
    pub fn radial_distance(&self, p: &Vec3<T>) -> T {
        match self {
            Self::Line { start, end } => {
                let d = vec3::normalized(&vec3::sub(end, start), T::lit(1e-12)).expect("non-degenerate line");
                let r = vec3::sub(p, start);
                let along = vec3::dot(&r, &d);
                vec3::norm(&vec3::sub(&r, &vec3::scale(&d, along)))
            }
            Self::Arc { center, radius } => {
                let rho = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                ((rho - *radius).powi(2) + (p[2] - center[2]).powi(2)).sqrt()
            }
        }
    }

    /// Fiber at perpendicular offset `(a, b)` from the centerline, sampled every `step` mm.
    fn fiber(&self, a: T, b: T, step: T) -> Streamline<T> {
        match self {
            Self::Line { start, end } => {
                let d = vec3::normalized(&vec3::sub(end, start), T::lit(1e-12)).expect("non-degenerate line");
                let (e1, e2) = perpendicular_frame(&d);
                let off = vec3::add(&vec3::scale(&e1, a), &vec3::scale(&e2, b));
                let len = vec3::dist(start, end);
                let n = (len / step).floor().to_usize().unwrap_or(0) + 1;
                let mut pts: Vec<Vec3<T>> = (0..n)
                    .map(|i| vec3::add(&vec3::add(start, &off), &vec3::scale(&d, T::from_usize_lossy(i) * step)))
                    .collect();
                let last = vec3::add(end, &off);
                if pts.last().is_some_and(|p| vec3::dist(p, &last) > T::lit(1e-9)) {
                    pts.push(last);
                }
                Streamline::new(pts)
            }
            Self::Arc { center, radius } => {
                let r = *radius + a;
                let z = center[2] + b;
                let total = r * T::FRAC_PI_2();
                let n = (total / step).floor().to_usize().unwrap_or(0) + 1;
                let mut angles: Vec<T> = (0..n).map(|i| T::from_usize_lossy(i) * step / r).collect();
                if angles.last().is_some_and(|&t| T::FRAC_PI_2() - t > T::lit(1e-9)) {
                    angles.push(T::FRAC_PI_2());
                }
                Streamline::new(
                    angles
                        .into_iter()
                        .map(|t| [center[0] + r * t.cos(), center[1] + r * t.sin(), z])
                        .collect(),
                )
            }
        }
    }
}

fn perpendicular_frame<T: Real>(d: &Vec3<T>) -> (Vec3<T>, Vec3<T>) {
    let helper = if d[2].abs() < T::lit(0.9) { [T::zero(), T::zero(), T::one()] } else { [T::one(), T::zero(), T::zero()] };
    let e1 = vec3::normalized(&vec3::cross(d, &helper), T::lit(1e-12)).expect("helper not parallel");
    let e2 = vec3::cross(d, &e1);
    (e1, e2)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub fibers_per_bundle: usize,
    pub tube_radius_vox: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { fibers_per_bundle: 500, tube_radius_vox: TUBE_RADIUS_VOX }
    }
}

/// Synthetic subject: field, ground-truth mask, streamlines and per-voxel peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    pub kind: PhantomKind,
    pub field: ShField<T>,
    pub gt_mask: TrackingMask<T>,
    pub gt_streamlines: Vec<Streamline<T>>,
    /// Planted unit directions per voxel (x-fastest), empty outside the bundles.
    pub peaks_gt: Vec<Vec<Vec3<T>>>,
    pub bundles: Vec<Bundle<T>>,
}

impl<T: Real> Phantom<T> {
    /// Longest bundle centerline, in mm.
    pub fn max_path_length(&self) -> T {
        self.bundles.iter().map(|b| b.centerline_length()).fold(T::zero(), |a, b| a.max(b))
    }

    pub fn peaks_at(&self, v: VoxelIndex) -> &[Vec3<T>] {
        &self.peaks_gt[self.field.spec.linear(v)]
    }

    /// Checks the structural invariants: streamlines inside the mask, unit peaks.
    pub fn check_invariants(&self) -> Result<()> {
        let vox = voxelize(&self.gt_streamlines, &self.gt_mask.spec);
        if !vox.is_subset_of(&self.gt_mask) {
            return Err(Error::Numerical("ground-truth streamline leaves the ground-truth mask".into()));
        }
        for p in self.peaks_gt.iter().flatten() {
            if (vec3::norm(p) - T::one()).abs() > T::lit(1e-6) {
                return Err(Error::Numerical("non-unit planted peak".into()));
            }
        }
        if self.field.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("phantom field".into()));
        }
        Ok(())
    }
}

fn bundles_for<T: Real>(kind: PhantomKind, spec: &GridSpec<T>, tube_vox: f64) -> Vec<Bundle<T>> {
    let sp = spec.spacing;
    let lo = |a: usize, pad: f64| spec.origin[a] + T::lit(pad) * sp[a];
    let hi = |a: usize, pad: f64| spec.origin[a] + (T::from_usize_lossy(spec.dims[a]) - T::lit(pad)) * sp[a];
    let mid = |a: usize| spec.origin[a] + T::from_usize_lossy(spec.dims[a]) * sp[a] * T::lit(0.5);
    let m = MARGIN_VOX;
    match kind {
        PhantomKind::Straight => vec![Bundle::Line { start: [lo(0, m), mid(1), mid(2)], end: [hi(0, m), mid(1), mid(2)] }],
        PhantomKind::Crossing => vec![
            Bundle::Line { start: [lo(0, m), mid(1), mid(2)], end: [hi(0, m), mid(1), mid(2)] },
            Bundle::Line { start: [mid(0), lo(1, m), mid(2)], end: [mid(0), hi(1, m), mid(2)] },
        ],
        PhantomKind::Arc => {
            let pad = m + tube_vox;
            let center = [lo(0, pad), lo(1, pad), mid(2)];
            let ext_x = hi(0, pad) - center[0];
            let ext_y = hi(1, pad) - center[1];
            vec![Bundle::Arc { center, radius: ext_x.min(ext_y) }]
        }
    }
}

/// Builds a deterministic phantom of the given kind on `spec`.
pub fn make_phantom<T: Real>(kind: PhantomKind, spec: GridSpec<T>, seed: u64, cfg: &PhantomConfig, basis: &ShBasis<T>) -> Result<Phantom<T>> {
    if spec.dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::GridTooSmall(format!("phantoms need at least {MIN_DIM} voxels per axis, got {:?}", spec.dims)));
    }
    let tube_mm = T::lit(cfg.tube_radius_vox) * spec.min_spacing();
    let step = spec.min_spacing() * T::lit(0.5);
    let bundles = bundles_for(kind, &spec, cfg.tube_radius_vox);

    let mut gt_streamlines = Vec::with_capacity(bundles.len() * cfg.fibers_per_bundle);
    let mut bundle_masks = Vec::with_capacity(bundles.len());
    for (bi, bundle) in bundles.iter().enumerate() {
        let mut fibers = Vec::with_capacity(cfg.fibers_per_bundle);
        for fi in 0..cfg.fibers_per_bundle {
            let mut r = rng::keyed(seed, Domain::Phantom, &[bi as u64, fi as u64]);
            // uniform in the tube cross-section disk
            let rad = tube_mm * T::lit(r.random::<f64>().sqrt());
            let ang = T::lit(r.random::<f64>() * std::f64::consts::TAU);
            fibers.push(bundle.fiber(rad * ang.cos(), rad * ang.sin(), step));
        }
        bundle_masks.push(voxelize(&fibers, &spec));
        gt_streamlines.extend(fibers);
    }

    let mut gt_mask = TrackingMask::empty(spec);
    for m in &bundle_masks {
        for (o, &b) in gt_mask.voxels.iter_mut().zip(&m.voxels) {
            *o |= b;
        }
    }

    let nc = basis.n_coeff();
    let mut field = ShField::zeros(spec, nc);
    let mut peaks_gt = vec![Vec::new(); spec.n_voxels()];
    for v in gt_mask.indices() {
        let center = spec.voxel_center(v);
        let mut lobes = Vec::new();
        for (bundle, m) in bundles.iter().zip(&bundle_masks) {
            if !m.get(v) {
                continue;
            }
            let p = bundle.direction_at(&center);
            let d = bundle.radial_distance(&center) / tube_mm;
            let w = (T::one() - T::lit(0.6) * d * d).max(T::lit(0.2));
            lobes.push((p, w));
        }
        let coeffs = basis.fit(&lobe_samples(&basis.sphere, &lobes, LOBE_SHARPNESS))?;
        field.voxel_mut(v).copy_from_slice(&coeffs);
        peaks_gt[spec.linear(v)] = lobes.into_iter().map(|(p, _)| p).collect();
    }

    Ok(Phantom { kind, field, gt_mask, gt_streamlines, peaks_gt, bundles })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GridSpec<f64> {
        GridSpec::isotropic([n; 3], 1.0).unwrap()
    }

    fn small_cfg() -> PhantomConfig {
        PhantomConfig { fibers_per_bundle: 60, ..Default::default() }
    }

    #[test]
    fn too_small_grid_rejected() {
        let basis = ShBasis::default_order8();
        let err = make_phantom(PhantomKind::Straight, spec(12), 1, &small_cfg(), &basis);
        assert!(matches!(err, Err(Error::GridTooSmall(_))));
    }

    #[test]
    fn straight_is_deterministic_and_axis_aligned() {
        let basis = ShBasis::default_order8();
        let a = make_phantom(PhantomKind::Straight, spec(24), 7, &small_cfg(), &basis).unwrap();
        let b = make_phantom(PhantomKind::Straight, spec(24), 7, &small_cfg(), &basis).unwrap();
        assert_eq!(a, b);
        let mut n = 0;
        for p in a.peaks_gt.iter().flatten() {
            assert!((p[0].abs() - 1.0).abs() < 1e-6 && p[1].abs() < 1e-6 && p[2].abs() < 1e-6);
            n += 1;
        }
        assert!(n > 100);
        a.check_invariants().unwrap();
    }

    #[test]
    fn crossing_overlap_has_two_orthogonal_peaks() {
        let basis = ShBasis::default_order8();
        let ph = make_phantom(PhantomKind::Crossing, spec(24), 3, &small_cfg(), &basis).unwrap();
        let overlap: Vec<_> = ph.peaks_gt.iter().filter(|p| p.len() == 2).collect();
        assert!(!overlap.is_empty());
        for p in overlap {
            let ang = vec3::dot(&p[0], &p[1]).acos().to_degrees();
            assert!((ang - 90.0).abs() < 1e-6);
        }
        assert!(ph.peaks_gt.iter().all(|p| p.len() <= 2));
    }

    #[test]
    fn all_kinds_pass_invariants_across_seeds() {
        let basis = ShBasis::default_order8();
        for kind in [PhantomKind::Straight, PhantomKind::Arc, PhantomKind::Crossing] {
            for seed in 0..5 {
                let ph = make_phantom(kind, spec(20), seed, &small_cfg(), &basis).unwrap();
                ph.check_invariants().unwrap();
                assert!(!ph.gt_mask.is_empty());
            }
        }
    }

    #[test]
    fn arc_peaks_follow_tangent() {
        let basis = ShBasis::default_order8();
        let ph = make_phantom(PhantomKind::Arc, spec(32), 1, &small_cfg(), &basis).unwrap();
        let Bundle::Arc { center, radius } = ph.bundles[0] else { panic!() };
        assert!(radius > 15.0);
        for v in ph.gt_mask.indices() {
            let c = ph.field.spec.voxel_center(v);
            let p = ph.peaks_at(v)[0];
            let radial = vec3::normalized(&[c[0] - center[0], c[1] - center[1], 0.0], 1e-9).unwrap();
            assert!(vec3::dot(&p, &radial).abs() < 1e-9);
        }
    }

    #[test]
    fn kind_parses() {
        assert_eq!("arc".parse::<PhantomKind>().unwrap(), PhantomKind::Arc);
        assert!("spiral".parse::<PhantomKind>().is_err());
        assert_eq!(PhantomKind::Crossing.to_string(), "crossing");
    }
}
