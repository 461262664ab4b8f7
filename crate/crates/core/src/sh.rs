//! Real, antipodally symmetric spherical harmonics: basis evaluation,
//! least-squares fitting on a sphere, fODF amplitudes and peak extraction.
//!
//! The basis keeps even degrees `l = 0, 2, .., L` and orders `m = -l..=l`,
//! flattened in `(l, m)` lexicographic order. It is orthonormal over the unit
//! sphere: `m < 0` maps to `sqrt(2) Re Y_l^|m|`, `m > 0` to `sqrt(2) Im Y_l^m`.

use crate::scalar::vec3::{self, Vec3};
use crate::scalar::Real;
use crate::{Error, Result};

/// Number of coefficients of an even-order symmetric expansion.
pub fn n_coeff(order: usize) -> usize {
    (order / 2 + 1) * (order + 1)
}

/// Flat index of `(l, m)`; `l` must be even.
pub fn index(l: usize, m: isize) -> usize {
    ((l * (l + 1) / 2) as isize + m) as usize
}

fn check_order(order: usize) -> Result<()> {
    if order % 2 == 1 {
        return Err(Error::InvalidArgument(format!("SH order must be even, got {order}")));
    }
    Ok(())
}

/// Evaluates every basis function at unit direction `u` into `out`.
pub fn eval_basis_into<T: Real>(order: usize, u: &Vec3<T>, out: &mut [T]) {
    debug_assert_eq!(out.len(), n_coeff(order));
    let x = u[2].max(-T::one()).min(T::one());
    let s = (T::one() - x * x).max(T::zero()).sqrt();
    let phi = u[1].atan2(u[0]);
    let four_pi = T::lit(4.0) * T::PI();
    let sqrt2 = T::SQRT_2();

    // Fully normalized associated Legendre values p[l][m] for m <= l <= order.
    let mut p = vec![vec![T::zero(); order + 1]; order + 1];
    let mut pmm = (T::one() / four_pi).sqrt();
    for m in 0..=order {
        if m > 0 {
            let k = T::from_usize_lossy(m);
            pmm = -pmm * s * ((T::lit(2.0) * k + T::one()) / (T::lit(2.0) * k)).sqrt();
        }
        p[m][m] = pmm;
        if m < order {
            p[m + 1][m] = x * T::from_usize_lossy(2 * m + 3).sqrt() * pmm;
        }
        for l in m + 2..=order {
            let lf = T::from_usize_lossy(l);
            let mf = T::from_usize_lossy(m);
            let a = ((T::lit(4.0) * lf * lf - T::one()) / (lf * lf - mf * mf)).sqrt();
            let l1 = lf - T::one();
            let b = ((l1 * l1 - mf * mf) / (T::lit(4.0) * l1 * l1 - T::one())).sqrt();
            p[l][m] = a * (x * p[l - 1][m] - b * p[l - 2][m]);
        }
    }

    for l in (0..=order).step_by(2) {
        out[index(l, 0)] = p[l][0];
        for m in 1..=l {
            let mphi = T::from_usize_lossy(m) * phi;
            out[index(l, -(m as isize))] = sqrt2 * p[l][m] * mphi.cos();
            out[index(l, m as isize)] = sqrt2 * p[l][m] * mphi.sin();
        }
    }
}

/// Basis vector at `u`. Rejects odd orders and non-unit directions.
pub fn eval_basis<T: Real>(order: usize, u: &Vec3<T>) -> Result<Vec<T>> {
    check_order(order)?;
    if (vec3::norm(u) - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::InvalidArgument("direction must be unit length".into()));
    }
    let mut out = vec![T::zero(); n_coeff(order)];
    eval_basis_into(order, u, &mut out);
    Ok(out)
}

/// Order implied by a coefficient count, if it is a valid even-order count.
pub fn order_for(n: usize) -> Option<usize> {
    (0..=64).step_by(2).find(|&l| n_coeff(l) == n)
}

/// fODF amplitude `<coeffs, Y(u)>`.
pub fn fodf_amplitude<T: Real>(coeffs: &[T], u: &Vec3<T>) -> Result<T> {
    let order = order_for(coeffs.len())
        .ok_or_else(|| Error::Shape(format!("{} is not an even-order SH length", coeffs.len())))?;
    let mut y = vec![T::zero(); coeffs.len()];
    eval_basis_into(order, u, &mut y);
    Ok(dot(coeffs, &y))
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Antipodally symmetric direction set with a neighborhood graph.
#[derive(Debug, Clone)]
pub struct Sphere<T> {
    pub dirs: Vec<Vec3<T>>,
    /// Indices of directions within the neighborhood angle of each direction.
    pub neighbors: Vec<Vec<u32>>,
    /// Number of leading directions forming one hemisphere (`z > 0`); the rest are their antipodes.
    pub n_half: usize,
}

impl<T: Real> Sphere<T> {
    /// 724 directions: a 362-point Fibonacci lattice on the upper hemisphere
    /// plus antipodes.
    pub fn symmetric_724() -> Self {
        Self::fibonacci_symmetric(362)
    }

    pub fn fibonacci_symmetric(n_half: usize) -> Self {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut dirs = Vec::with_capacity(2 * n_half);
        for i in 0..n_half {
            let z = (i as f64 + 0.5) / n_half as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            dirs.push([T::lit(r * phi.cos()), T::lit(r * phi.sin()), T::lit(z)]);
        }
        for i in 0..n_half {
            let d = dirs[i];
            dirs.push([-d[0], -d[1], -d[2]]);
        }
        // Neighborhood radius ~1.8x the mean lattice spacing.
        let spacing = (4.0 * std::f64::consts::PI / (2 * n_half) as f64).sqrt();
        let cos_r = T::lit((1.8 * spacing).cos());
        let neighbors = dirs
            .iter()
            .enumerate()
            .map(|(i, a)| {
                dirs.iter()
                    .enumerate()
                    .filter(|&(j, b)| j != i && vec3::dot(a, b) >= cos_r)
                    .map(|(j, _)| j as u32)
                    .collect()
            })
            .collect();
        Self { dirs, neighbors, n_half }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }
}

/// Basis matrix over a sphere (rows = directions) with its least-squares pseudo-inverse.
#[derive(Debug, Clone)]
pub struct ShBasis<T> {
    pub order: usize,
    pub sphere: Sphere<T>,
    /// `n_dirs x n_coeff`, row-major.
    pub matrix: Vec<T>,
    /// `n_coeff x n_dirs`, row-major: `(B^T B)^{-1} B^T`.
    pinv: Vec<T>,
}

impl<T: Real> ShBasis<T> {
    pub fn new(order: usize, sphere: Sphere<T>) -> Result<Self> {
        check_order(order)?;
        let nc = n_coeff(order);
        let nd = sphere.len();
        if nd < nc {
            return Err(Error::InvalidArgument("sphere too small for SH fit".into()));
        }
        let mut matrix = vec![T::zero(); nd * nc];
        for (row, u) in matrix.chunks_mut(nc).zip(&sphere.dirs) {
            eval_basis_into(order, u, row);
        }
        // Normal matrix B^T B.
        let mut gram = vec![T::zero(); nc * nc];
        T::gemm(nc, nd, nc, T::one(), &matrix, 1, nc as isize, &matrix, nc as isize, 1, T::zero(), &mut gram, nc as isize, 1);
        let chol = cholesky(&gram, nc)?;
        // pinv column j solves (B^T B) x = B^T e_j, i.e. row j of B.
        let mut pinv = vec![T::zero(); nc * nd];
        for j in 0..nd {
            let x = cholesky_solve(&chol, nc, &matrix[j * nc..(j + 1) * nc]);
            for (r, v) in x.into_iter().enumerate() {
                pinv[r * nd + j] = v;
            }
        }
        Ok(Self { order, sphere, matrix, pinv })
    }

    /// Order-8 basis on the built-in 724-direction sphere.
    pub fn default_order8() -> Self {
        Self::new(8, Sphere::symmetric_724()).expect("order 8 on 724 directions is well posed")
    }

    pub fn n_coeff(&self) -> usize {
        n_coeff(self.order)
    }

    /// Amplitudes of `coeffs` at every sphere direction.
    pub fn amplitudes(&self, coeffs: &[T]) -> Vec<T> {
        let nc = self.n_coeff();
        self.matrix.chunks(nc).map(|row| dot(row, coeffs)).collect()
    }

    /// Least-squares coefficients for amplitudes sampled on the sphere.
    pub fn fit(&self, samples: &[T]) -> Result<Vec<T>> {
        let nd = self.sphere.len();
        if samples.len() != nd {
            return Err(Error::Shape(format!("expected {nd} samples, got {}", samples.len())));
        }
        Ok(self.pinv.chunks(nd).map(|row| dot(row, samples)).collect())
    }
}

fn cholesky<T: Real>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > T::zero()) {
                    return Err(Error::Numerical("normal matrix is not positive definite".into()));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve<T: Real>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let t = l[i * n + k] * y[k];
            y[i] -= t;
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = l[k * n + i] * y[k];
            y[i] -= t;
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Peak-extraction thresholds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakConfig {
    pub rel_threshold: f64,
    pub min_sep_deg: f64,
    pub n_max: usize,
    /// Refine each discrete maximum by local ascent on the continuous sphere.
    pub refine: bool,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self { rel_threshold: 0.25, min_sep_deg: 25.0, n_max: 3, refine: true }
    }
}

/// Fiber directions of one voxel, sorted by decreasing amplitude.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeakSet<T> {
    pub peaks: Vec<Vec3<T>>,
    pub amplitudes: Vec<T>,
}

impl<T: Real> PeakSet<T> {
    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }
}

/// Flips a direction into the `z > 0` half (ties broken on y, then x).
pub fn canonical_sign<T: Real>(u: &Vec3<T>) -> Vec3<T> {
    let flip = if u[2] != T::zero() {
        u[2] < T::zero()
    } else if u[1] != T::zero() {
        u[1] < T::zero()
    } else {
        u[0] < T::zero()
    };
    if flip {
        [-u[0], -u[1], -u[2]]
    } else {
        *u
    }
}

/// Angle between two axes (sign-agnostic), in degrees.
pub fn axial_angle_deg<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    let c = vec3::dot(a, b).abs().min(T::one());
    c.acos().to_degrees()
}

// Rotates `u` by `angle` towards the tangent direction `t` (both unit, orthogonal).
fn tilt<T: Real>(u: &Vec3<T>, t: &Vec3<T>, angle: T) -> Vec3<T> {
    let v = vec3::add(&vec3::scale(u, angle.cos()), &vec3::scale(t, angle.sin()));
    vec3::normalized(&v, T::lit(1e-30)).unwrap_or(*u)
}

fn tangent_frame<T: Real>(u: &Vec3<T>) -> (Vec3<T>, Vec3<T>) {
    let helper = if u[0].abs() < T::lit(0.9) { [T::one(), T::zero(), T::zero()] } else { [T::zero(), T::one(), T::zero()] };
    let e1 = vec3::normalized(&vec3::cross(u, &helper), T::lit(1e-30)).unwrap_or(helper);
    let e2 = vec3::cross(u, &e1);
    (e1, e2)
}

fn refine_peak<T: Real>(order: usize, coeffs: &[T], start: Vec3<T>, start_amp: T) -> (Vec3<T>, T) {
    let mut y = vec![T::zero(); coeffs.len()];
    let mut amp_at = |u: &Vec3<T>| {
        eval_basis_into(order, u, &mut y);
        dot(coeffs, &y)
    };
    let mut u = start;
    let mut best = start_amp;
    let mut step = T::lit(4f64.to_radians());
    let min_step = T::lit(0.005f64.to_radians());
    let n_dirs = 8;
    while step > min_step {
        let (e1, e2) = tangent_frame(&u);
        let mut moved = false;
        for k in 0..n_dirs {
            let ang = T::lit(2.0 * std::f64::consts::PI * k as f64 / n_dirs as f64);
            let t = vec3::add(&vec3::scale(&e1, ang.cos()), &vec3::scale(&e2, ang.sin()));
            let cand = tilt(&u, &t, step);
            let a = amp_at(&cand);
            if a > best {
                best = a;
                u = cand;
                moved = true;
                break;
            }
        }
        if !moved {
            step *= T::lit(0.5);
        }
    }
    (u, best)
}

/// Extracts up to `n_max` fODF peaks.
///
/// Discrete local maxima over the sphere graph are optionally refined, then
/// filtered by relative amplitude and greedily separated by `min_sep_deg`.
/// Returned directions have a positive-z canonical sign. Isotropic or
/// non-positive functions yield an empty set.
pub fn extract_peaks<T: Real>(basis: &ShBasis<T>, coeffs: &[T], cfg: &PeakConfig) -> Result<PeakSet<T>> {
    if coeffs.len() != basis.n_coeff() {
        return Err(Error::Shape(format!(
            "expected {} coefficients, got {}",
            basis.n_coeff(),
            coeffs.len()
        )));
    }
    let amps = basis.amplitudes(coeffs);
    let (lo, hi) = amps.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    if !(hi > T::zero()) || hi - lo <= T::lit(1e-9) * hi.abs() {
        return Ok(PeakSet::default());
    }
    let sphere = &basis.sphere;
    // refinement gains only a few percent at this sampling density, so maxima
    // well below the final floor cannot qualify and are not refined
    let prefloor = T::lit(0.9 * cfg.rel_threshold) * hi;
    let mut cands: Vec<(Vec3<T>, T)> = (0..sphere.n_half)
        .filter(|&i| amps[i] > T::zero() && amps[i] >= prefloor && sphere.neighbors[i].iter().all(|&j| amps[i] >= amps[j as usize]))
        .map(|i| {
            if cfg.refine {
                refine_peak(basis.order, coeffs, sphere.dirs[i], amps[i])
            } else {
                (sphere.dirs[i], amps[i])
            }
        })
        .map(|(u, a)| (canonical_sign(&u), a))
        .collect();
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let global = cands.first().map_or(hi, |c| c.1.max(hi));
    let floor = T::lit(cfg.rel_threshold) * global;
    let min_sep = T::lit(cfg.min_sep_deg);
    let mut out = PeakSet::default();
    for (u, a) in cands {
        if out.len() >= cfg.n_max || a < floor {
            break;
        }
        if out.peaks.iter().all(|p| axial_angle_deg(p, &u) >= min_sep) {
            out.peaks.push(u);
            out.amplitudes.push(a);
        }
    }
    Ok(out)
}

/// Samples of the sharp symmetric lobe sum `sum_p w_p |u . p|^k` on the sphere.
pub fn lobe_samples<T: Real>(sphere: &Sphere<T>, peaks: &[(Vec3<T>, T)], sharpness: i32) -> Vec<T> {
    sphere
        .dirs
        .iter()
        .map(|u| {
            peaks
                .iter()
                .fold(T::zero(), |acc, (p, w)| acc + *w * vec3::dot(u, p).abs().powi(sharpness))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(v: [f64; 3]) -> [f64; 3] {
        vec3::normalized(&v, 1e-12).unwrap()
    }

    #[test]
    fn coefficient_counts() {
        assert_eq!(n_coeff(0), 1);
        assert_eq!(n_coeff(4), 15);
        assert_eq!(n_coeff(8), 45);
        assert_eq!(eval_basis(8, &[0.0, 0.0, 1.0f64]).unwrap().len(), 45);
        assert_eq!(eval_basis(4, &[0.0, 1.0, 0.0f64]).unwrap().len(), 15);
        assert!(eval_basis(3, &[0.0, 0.0, 1.0f64]).is_err());
        assert!(eval_basis(2, &[0.0, 0.0, 2.0f64]).is_err());
    }

    #[test]
    fn order_zero_is_constant() {
        let y = eval_basis(0, &unit([0.3, -0.2, 0.9])).unwrap();
        assert_abs_diff_eq!(y[0], 0.5 / std::f64::consts::PI.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn degree_two_matches_closed_form() {
        let pi = std::f64::consts::PI;
        for v in [[0.3, -0.2, 0.9], [1.0, 0.0, 0.0], [-0.5, 0.7, -0.1], [0.0, 0.0, -1.0]] {
            let u = unit(v);
            let (x, y, z) = (u[0], u[1], u[2]);
            let b = eval_basis(2, &u).unwrap();
            let c = (15.0 / pi).sqrt();
            let want = [
                0.5 / pi.sqrt(),
                0.25 * c * (x * x - y * y),
                -0.5 * c * x * z,
                0.25 * (5.0 / pi).sqrt() * (3.0 * z * z - 1.0),
                -0.5 * c * y * z,
                0.5 * c * x * y,
            ];
            for i in 0..6 {
                assert_abs_diff_eq!(b[i], want[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn basis_is_even() {
        let u = unit([0.1, 0.8, -0.3]);
        let a = eval_basis(8, &u).unwrap();
        let b = eval_basis(8, &[-u[0], -u[1], -u[2]]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_is_symmetric_and_connected() {
        let s = Sphere::<f64>::symmetric_724();
        assert_eq!(s.len(), 724);
        for i in 0..s.n_half {
            let (a, b) = (s.dirs[i], s.dirs[i + s.n_half]);
            assert_eq!(a, [-b[0], -b[1], -b[2]]);
            assert!(a[2] > 0.0);
        }
        assert!(s.neighbors.iter().all(|n| n.len() >= 4));
    }

    #[test]
    fn constant_coefficients_give_constant_amplitude() {
        let mut c = vec![0.0; 45];
        c[0] = 1.0;
        let a = fodf_amplitude(&c, &unit([0.2, 0.4, 0.5])).unwrap();
        assert_abs_diff_eq!(a, 0.5 / std::f64::consts::PI.sqrt(), epsilon = 1e-15);
        assert!(fodf_amplitude(&c[..44], &unit([0.2, 0.4, 0.5])).is_err());
    }

    #[test]
    fn isotropic_yields_no_peaks() {
        let basis = ShBasis::<f64>::default_order8();
        let mut c = vec![0.0; 45];
        c[0] = 3.0;
        let p = extract_peaks(&basis, &c, &PeakConfig::default()).unwrap();
        assert!(p.len() <= 1);
        assert!(p.amplitudes.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
        let zero = extract_peaks(&basis, &vec![0.0; 45], &PeakConfig::default()).unwrap();
        assert!(zero.is_empty());
    }

    #[test]
    fn canonical_sign_is_upper_half() {
        assert_eq!(canonical_sign(&[0.0, 0.0, -1.0f64]), [0.0, 0.0, 1.0]);
        assert_eq!(canonical_sign(&[-1.0, 0.0, 0.0f64]), [1.0, 0.0, 0.0]);
        assert_eq!(canonical_sign(&[1.0, -1.0, 0.0f64]), [-1.0, 1.0, 0.0]);
    }
}
