//! Streamline cleaning against reference fibers and voxel-wise tract scores.

use crate::field::{GridSpec, Streamline, TrackingMask};
use crate::scalar::vec3;
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    pub radius_mm: f64,
    pub resample_points: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self { radius_mm: 4.0, resample_points: 32 }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_mm > 0.0) {
            return Err(Error::InvalidArgument("cleaning radius must be > 0".into()));
        }
        if self.resample_points < 2 {
            return Err(Error::InvalidArgument("resample_points must be >= 2".into()));
        }
        Ok(())
    }
}

/// Arc-length-uniform resampling to `n` points; endpoints are kept exactly.
pub fn resample_streamline<T: Real>(s: &Streamline<T>, n: usize) -> Result<Streamline<T>> {
    if s.len() < 2 {
        return Err(Error::InvalidArgument("cannot resample a streamline with fewer than 2 points".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("resampling needs n >= 2".into()));
    }
    let pts = &s.points;
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(T::zero());
    for w in pts.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + vec3::dist(&w[0], &w[1]));
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n);
    out.push(pts[0]);
    let mut seg = 0;
    for i in 1..n - 1 {
        let target = total * T::from_usize_lossy(i) / T::from_usize_lossy(n - 1);
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > T::zero() { ((target - cum[seg]) / len).max(T::zero()).min(T::one()) } else { T::zero() };
        let (a, b) = (pts[seg], pts[seg + 1]);
        out.push([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]);
    }
    out.push(*pts.last().unwrap());
    Ok(Streamline::new(out))
}

/// Minimum average direct-flip distance between equal-length streamlines.
pub fn mdf_distance<T: Real>(a: &Streamline<T>, b: &Streamline<T>) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("MDF needs equal nonzero point counts, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let mut direct = T::zero();
    let mut flipped = T::zero();
    for i in 0..n {
        direct += vec3::dist(&a.points[i], &b.points[i]);
        flipped += vec3::dist(&a.points[i], &b.points[n - 1 - i]);
    }
    Ok(direct.min(flipped) / T::from_usize_lossy(n))
}

/// Per-streamline outcome of cleaning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanRecord {
    pub index: usize,
    pub nearest_mm: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanReport {
    pub records: Vec<CleanRecord>,
}

impl CleanReport {
    pub fn n_kept(&self) -> usize {
        self.records.iter().filter(|r| r.kept).count()
    }

    /// Line-delimited `index=.. nearest_mm=.. kept=..` records.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("index={} nearest_mm={:.6} kept={}\n", r.index, r.nearest_mm, r.kept));
        }
        s
    }
}

/// Keeps streamlines whose nearest reference (MDF over resampled copies) lies within the radius.
///
/// Streamlines with fewer than 2 points are rejected with an infinite distance.
pub fn clean<T: Real>(tract: &[Streamline<T>], references: &[Streamline<T>], cfg: &CleanConfig) -> Result<(Vec<Streamline<T>>, CleanReport)> {
    cfg.validate()?;
    if references.is_empty() {
        return Err(Error::InvalidArgument("cleaning needs at least one reference streamline".into()));
    }
    let refs = references
        .iter()
        .filter(|r| r.len() >= 2)
        .map(|r| resample_streamline(r, cfg.resample_points))
        .collect::<Result<Vec<_>>>()?;
    if refs.is_empty() {
        return Err(Error::InvalidArgument("all reference streamlines are degenerate".into()));
    }
    let radius = T::lit(cfg.radius_mm);
    let mut kept = Vec::new();
    let mut records = Vec::with_capacity(tract.len());
    for (index, s) in tract.iter().enumerate() {
        let nearest = if s.len() < 2 {
            T::infinity()
        } else {
            let rs = resample_streamline(s, cfg.resample_points)?;
            let mut best = T::infinity();
            for r in &refs {
                best = best.min(mdf_distance(&rs, r)?);
            }
            best
        };
        let keep = nearest <= radius;
        if keep {
            kept.push(s.clone());
        }
        records.push(CleanRecord { index, nearest_mm: nearest.to_f64_lossy(), kept: keep });
    }
    Ok((kept, CleanReport { records }))
}

/// Marks every voxel touched by a streamline point or by its segments walked
/// at quarter-voxel steps.
pub fn voxelize<T: Real>(tract: &[Streamline<T>], spec: &GridSpec<T>) -> TrackingMask<T> {
    let mut mask = TrackingMask::empty(*spec);
    let step = spec.min_spacing() * T::lit(0.25);
    let mut mark = |p: &vec3::Vec3<T>| {
        if let Some(v) = spec.containing_voxel(p) {
            mask.set(v, true);
        }
    };
    for s in tract {
        for p in &s.points {
            mark(p);
        }
        for w in s.points.windows(2) {
            let len = vec3::dist(&w[0], &w[1]);
            let n = (len / step).ceil().to_usize().unwrap_or(0);
            for i in 1..n {
                let t = T::from_usize_lossy(i) / T::from_usize_lossy(n);
                mark(&vec3::add(&w[0], &vec3::scale(&vec3::sub(&w[1], &w[0]), t)));
            }
        }
    }
    mask
}

/// Voxel-wise tract agreement. Overreach is normalized by the ground-truth size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TractScores {
    pub dice: f64,
    pub ovl: f64,
    pub ovr: f64,
    pub n_pred: usize,
    pub n_gt: usize,
    pub n_both: usize,
}

impl TractScores {
    pub fn from_counts(n_both: usize, n_pred: usize, n_gt: usize) -> Result<Self> {
        if n_gt == 0 {
            return Err(Error::EmptyGroundTruth);
        }
        let (i, a, b) = (n_both as f64, n_pred as f64, n_gt as f64);
        Ok(Self { dice: 2.0 * i / (a + b), ovl: i / b, ovr: (a - i) / b, n_pred, n_gt, n_both })
    }

    /// `dice=.. ovl=.. ovr=..` on one line.
    pub fn to_kv(&self) -> String {
        format!(
            "dice={:.6} ovl={:.6} ovr={:.6} n_pred={} n_gt={} n_both={}",
            self.dice, self.ovl, self.ovr, self.n_pred, self.n_gt, self.n_both
        )
    }
}

/// Dice, overlap and overreach of `pred` against `gt`.
pub fn score<T: Real>(pred: &TrackingMask<T>, gt: &TrackingMask<T>) -> Result<TractScores> {
    if pred.spec.dims != gt.spec.dims {
        return Err(Error::Shape("prediction and ground truth grids differ".into()));
    }
    TractScores::from_counts(pred.intersection_count(gt), pred.count(), gt.count())
}
