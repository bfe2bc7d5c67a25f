//! Real, even-order spherical harmonics and direction sets on the sphere.
//!
//! Basis convention (frozen, on-disk contract):
//!
//! * `Y_l0    = N_l0 P_l^0(cos θ)`
//! * `Y_lm    = √2 N_lm P_l^m(cos θ) cos(mφ)` for `m > 0`
//! * `Y_l,-m  = √2 N_lm P_l^m(cos θ) sin(mφ)` for `m > 0`
//!
//! with `N_lm = sqrt((2l+1)/(4π) (l-m)!/(l+m)!)` and `P_l^m` the associated Legendre
//! function *without* the Condon–Shortley phase. The basis is orthonormal on the unit sphere.
//! Coefficients are stored for even `l` only, ordered by `l` ascending then `m` ascending.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported SH order.
pub const MAX_LMAX: usize = 8;

/// Tag written into file headers to identify the coefficient ordering.
pub const SH_ORDERING_TAG: &str = "even_l_asc_m_asc_real_nocs";

/// A unit vector in R³.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction([f64; 3]);

impl Direction {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn new(v: [f64; 3]) -> Result<Self> {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidArgument(format!("cannot normalize {v:?}")));
        }
        Ok(Self([v[0] / n, v[1] / n, v[2] / n]))
    }

    pub const fn z() -> Self {
        Self([0.0, 0.0, 1.0])
    }

    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        let s = theta.sin();
        Self([s * phi.cos(), s * phi.sin(), theta.cos()])
    }

    #[inline]
    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.0[0]
    }
    #[inline]
    pub fn y(&self) -> f64 {
        self.0[1]
    }
    #[inline]
    pub fn z_comp(&self) -> f64 {
        self.0[2]
    }

    #[inline]
    pub fn dot(&self, other: &Direction) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    pub fn neg(&self) -> Self {
        Self([-self.0[0], -self.0[1], -self.0[2]])
    }

    /// Antipodal representative with `z >= 0` (ties broken on `y`, then `x`).
    pub fn upper_hemisphere(&self) -> Self {
        let [x, y, z] = self.0;
        let flip = z < 0.0 || (z == 0.0 && (y < 0.0 || (y == 0.0 && x < 0.0)));
        if flip {
            self.neg()
        } else {
            *self
        }
    }
}

/// Legendre polynomial `P_l(t)` by the three-term recurrence.
pub fn legendre_p(l: usize, t: f64) -> f64 {
    if l == 0 {
        return 1.0;
    }
    let mut p_prev = 1.0;
    let mut p = t;
    for k in 1..l {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * t * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = next;
    }
    p
}

/// Number of stored coefficients for an even `lmax`.
#[inline]
pub const fn n_coeffs(lmax: usize) -> usize {
    (lmax + 1) * (lmax + 2) / 2
}

/// Flat index of `(l, m)` in the even-order ordering.
#[inline]
pub fn sh_index(l: usize, m: i32) -> usize {
    l * l.saturating_sub(1) / 2 + (m + l as i32) as usize
}

/// Inverse of [`sh_index`].
pub fn sh_degree_order(index: usize) -> (usize, i32) {
    let mut l = 0;
    loop {
        if index < n_coeffs(l) {
            let m = index as i32 - sh_index(l, 0) as i32;
            return (l, m);
        }
        l += 2;
    }
}

pub fn validate_lmax(lmax: usize) -> Result<()> {
    if lmax % 2 != 0 || lmax > MAX_LMAX {
        return Err(Error::InvalidArgument(format!("lmax must be even and <= {MAX_LMAX}, got {lmax}")));
    }
    Ok(())
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

fn norm_lm(l: usize, m: usize) -> f64 {
    ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - m) / factorial(l + m)).sqrt()
}

/// Fills `out[..n_coeffs(lmax)]` with every even-order basis function at `dir`.
pub fn eval_sh_basis(lmax: usize, dir: &Direction, out: &mut [f64]) {
    debug_assert!(lmax % 2 == 0 && lmax <= MAX_LMAX);
    let [x, y, z] = dir.as_array();
    // q[l][m] holds P_l^m(z) / sin^m(θ), a polynomial in z.
    let mut q = [[0.0f64; MAX_LMAX + 1]; MAX_LMAX + 1];
    let mut dfact = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            dfact *= (2 * m - 1) as f64;
        }
        q[m][m] = dfact;
        if m < lmax {
            q[m + 1][m] = z * (2 * m + 1) as f64 * dfact;
        }
        for l in (m + 2)..=lmax {
            q[l][m] = ((2 * l - 1) as f64 * z * q[l - 1][m] - (l + m - 1) as f64 * q[l - 2][m]) / (l - m) as f64;
        }
    }
    // (x + iy)^m = sin^m(θ) e^{imφ}
    let mut re = [0.0f64; MAX_LMAX + 1];
    let mut im = [0.0f64; MAX_LMAX + 1];
    re[0] = 1.0;
    for m in 1..=lmax {
        re[m] = re[m - 1] * x - im[m - 1] * y;
        im[m] = re[m - 1] * y + im[m - 1] * x;
    }
    for l in (0..=lmax).step_by(2) {
        out[sh_index(l, 0)] = norm_lm(l, 0) * q[l][0];
        for m in 1..=l {
            let c = std::f64::consts::SQRT_2 * norm_lm(l, m) * q[l][m];
            out[sh_index(l, m as i32)] = c * re[m];
            out[sh_index(l, -(m as i32))] = c * im[m];
        }
    }
}

/// Single real SH basis value.
pub fn eval_real_sh(l: usize, m: i32, dir: &Direction) -> Result<f64> {
    if l % 2 != 0 || l > MAX_LMAX || m.unsigned_abs() as usize > l {
        return Err(Error::InvalidArgument(format!(
            "invalid SH index (l={l}, m={m}); need even l <= {MAX_LMAX}, |m| <= l"
        )));
    }
    let mut buf = [0.0; n_coeffs(MAX_LMAX)];
    eval_sh_basis(l, dir, &mut buf);
    Ok(buf[sh_index(l, m)])
}

/// Even-order real SH expansion of an antipodally symmetric function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShSeries {
    lmax: usize,
    coeffs: Vec<f64>,
}

impl ShSeries {
    pub fn new(lmax: usize, coeffs: Vec<f64>) -> Result<Self> {
        validate_lmax(lmax)?;
        if coeffs.len() != n_coeffs(lmax) {
            return Err(Error::Shape(format!(
                "lmax {lmax} needs {} coefficients, got {}",
                n_coeffs(lmax),
                coeffs.len()
            )));
        }
        Ok(Self { lmax, coeffs })
    }

    pub fn zeros(lmax: usize) -> Result<Self> {
        Self::new(lmax, vec![0.0; n_coeffs(lmax)])
    }

    /// Uniform distribution with unit mass: `p_00 = 1/(2√π)`.
    pub fn isotropic(lmax: usize) -> Result<Self> {
        let mut s = Self::zeros(lmax)?;
        s.coeffs[0] = unit_mass_p00();
        Ok(s)
    }

    #[inline]
    pub fn lmax(&self) -> usize {
        self.lmax
    }

    #[inline]
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn get(&self, l: usize, m: i32) -> f64 {
        self.coeffs[sh_index(l, m)]
    }

    /// Integral over the sphere, `√(4π)·p_00`.
    pub fn mass(&self) -> f64 {
        (4.0 * PI).sqrt() * self.coeffs[0]
    }

    /// Copy truncated or zero-padded to another order.
    pub fn with_lmax(&self, lmax: usize) -> Result<Self> {
        validate_lmax(lmax)?;
        let mut c = vec![0.0; n_coeffs(lmax)];
        let n = c.len().min(self.coeffs.len());
        c[..n].copy_from_slice(&self.coeffs[..n]);
        Self::new(lmax, c)
    }
}

/// `p_00` of a unit-mass distribution.
#[inline]
pub fn unit_mass_p00() -> f64 {
    0.5 / PI.sqrt()
}

/// Value of the series at `dir`.
pub fn eval_sh_series(s: &ShSeries, dir: &Direction) -> f64 {
    let mut buf = [0.0; n_coeffs(MAX_LMAX)];
    eval_sh_basis(s.lmax, dir, &mut buf);
    s.coeffs.iter().zip(&buf).map(|(c, y)| c * y).sum()
}

/// Antipodally symmetric Coulomb energy: every point interacts with the others and their antipodes.
pub fn electrostatic_energy(dirs: &[Direction]) -> f64 {
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let (a, b) = (dirs[i].as_array(), dirs[j].as_array());
            let dm = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            let dp = ((a[0] + b[0]).powi(2) + (a[1] + b[1]).powi(2) + (a[2] + b[2]).powi(2)).sqrt();
            e += 1.0 / dm.max(1e-12) + 1.0 / dp.max(1e-12);
        }
    }
    e
}

const REPULSION_ITERS: usize = 1000;

/// Random unit vectors on the upper hemisphere, reproducible from `seed`.
pub fn random_hemisphere_directions(n: usize, seed: u64) -> Vec<Direction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            if let Ok(d) = Direction::new(v) {
                break d.upper_hemisphere();
            }
        })
        .collect()
}

/// `n` well-spread directions on the upper hemisphere, from electrostatic repulsion of
/// antipodally paired charges (gradient descent, 1000 iterations, adaptive step).
pub fn hemisphere_directions(n: usize, seed: u64) -> Vec<Direction> {
    let mut dirs = random_hemisphere_directions(n, seed);
    if n < 2 {
        return dirs;
    }
    let mut energy = electrostatic_energy(&dirs);
    let mut step = 0.1 / (n * n) as f64;
    let mut forces = vec![[0.0f64; 3]; n];
    for _ in 0..REPULSION_ITERS {
        for f in forces.iter_mut() {
            *f = [0.0; 3];
        }
        for i in 0..n {
            let a = dirs[i].as_array();
            for j in (i + 1)..n {
                let b = dirs[j].as_array();
                for sign in [-1.0, 1.0] {
                    let d = [a[0] + sign * b[0], a[1] + sign * b[1], a[2] + sign * b[2]];
                    let r2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).max(1e-24);
                    let inv = 1.0 / (r2 * r2.sqrt());
                    for k in 0..3 {
                        forces[i][k] += d[k] * inv;
                        forces[j][k] += sign * d[k] * inv;
                    }
                }
            }
        }
        let trial: Vec<Direction> = dirs
            .iter()
            .zip(&forces)
            .map(|(p, f)| {
                let a = p.as_array();
                let radial = a[0] * f[0] + a[1] * f[1] + a[2] * f[2];
                let t = [
                    a[0] + step * (f[0] - radial * a[0]),
                    a[1] + step * (f[1] - radial * a[1]),
                    a[2] + step * (f[2] - radial * a[2]),
                ];
                Direction::new(t).unwrap_or(*p)
            })
            .collect();
        let e = electrostatic_energy(&trial);
        if e < energy {
            dirs = trial;
            energy = e;
            step *= 1.2;
        } else {
            step *= 0.5;
        }
    }
    dirs.into_iter().map(|d| d.upper_hemisphere()).collect()
}

/// Flips every second direction (odd indices) to the opposite hemisphere.
pub fn flip_half(dirs: &[Direction]) -> Vec<Direction> {
    dirs.iter().enumerate().map(|(i, d)| if i % 2 == 1 { d.neg() } else { *d }).collect()
}

/// Product quadrature rule on the sphere.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    pub dirs: Vec<Direction>,
    pub weights: Vec<f64>,
}

impl SphereGrid {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(&Direction) -> f64) -> f64 {
        self.dirs.iter().zip(&self.weights).map(|(d, w)| w * f(d)).sum()
    }
}

pub const DEFAULT_GRID_THETA: usize = 65;
pub const DEFAULT_GRID_PHI: usize = 64;

/// Polar-angle rule of a product sphere grid. Both use equispaced θ nodes including the poles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarRule {
    /// Composite Simpson in θ times the sin θ Jacobian.
    Simpson,
    /// Clenshaw–Curtis weights in cos θ: exact for polynomials in cos θ of degree < n_theta.
    ClenshawCurtis,
}

/// Composite Simpson in θ (with the sin θ Jacobian) times a uniform periodic rule in φ.
///
/// The θ weights are rescaled so that `Σ w sin θ = 2` exactly, which makes the total
/// weight `4π` to rounding; the rescaling changes the rule by O(h⁴).
pub fn sphere_quadrature_grid(n_theta: usize, n_phi: usize) -> Result<SphereGrid> {
    sphere_quadrature_grid_with(PolarRule::Simpson, n_theta, n_phi)
}

/// The grid used by the numeric forward model unless configured otherwise:
/// 65 × 64 nodes with Clenshaw–Curtis polar weights.
pub fn default_sphere_grid() -> SphereGrid {
    sphere_quadrature_grid_with(PolarRule::ClenshawCurtis, DEFAULT_GRID_THETA, DEFAULT_GRID_PHI)
        .expect("default grid sizes are valid")
}

pub fn sphere_quadrature_grid_with(rule: PolarRule, n_theta: usize, n_phi: usize) -> Result<SphereGrid> {
    if n_theta < 3 || n_theta % 2 == 0 {
        return Err(Error::InvalidArgument(format!("n_theta must be odd and >= 3, got {n_theta}")));
    }
    if n_phi < 4 || n_phi % 2 == 1 {
        return Err(Error::InvalidArgument(format!("n_phi must be even and >= 4, got {n_phi}")));
    }
    let h = PI / (n_theta - 1) as f64;
    let thetas: Vec<f64> = (0..n_theta).map(|j| j as f64 * h).collect();
    let polar = match rule {
        PolarRule::Simpson => {
            let mut w: Vec<f64> = thetas
                .iter()
                .enumerate()
                .map(|(j, theta)| {
                    let simpson = if j == 0 || j == n_theta - 1 {
                        1.0
                    } else if j % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    simpson * h / 3.0 * theta.sin()
                })
                .collect();
            let total: f64 = w.iter().sum();
            for v in w.iter_mut() {
                *v *= 2.0 / total;
            }
            w
        }
        PolarRule::ClenshawCurtis => clenshaw_curtis_weights(n_theta - 1),
    };
    let dphi = 2.0 * PI / n_phi as f64;
    let mut dirs = Vec::with_capacity(n_theta * n_phi);
    let mut weights = Vec::with_capacity(n_theta * n_phi);
    for (&theta, &w) in thetas.iter().zip(&polar) {
        for k in 0..n_phi {
            dirs.push(Direction::from_spherical(theta, k as f64 * dphi));
            weights.push(w * dphi);
        }
    }
    Ok(SphereGrid { dirs, weights })
}

/// Clenshaw–Curtis weights on `t_j = cos(jπ/n)`, `j = 0..=n`, for `∫_{-1}^{1} f(t) dt`; `n` even.
fn clenshaw_curtis_weights(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (0..=n)
        .map(|j| {
            let theta = j as f64 * PI / nf;
            let mut s = 1.0;
            for k in 1..=n / 2 {
                let bk = if 2 * k == n { 1.0 } else { 2.0 };
                s -= bk / (4.0 * (k * k) as f64 - 1.0) * (2.0 * k as f64 * theta).cos();
            }
            let cj = if j == 0 || j == n { 1.0 } else { 2.0 };
            cj / nf * s
        })
        .collect()
}

/// Least-squares-free projection of `f` onto the basis using a quadrature grid.
pub fn project_to_sh(lmax: usize, grid: &SphereGrid, f: impl Fn(&Direction) -> f64) -> Result<ShSeries> {
    validate_lmax(lmax)?;
    let n = n_coeffs(lmax);
    let mut c = vec![0.0; n];
    let mut buf = [0.0; n_coeffs(MAX_LMAX)];
    for (d, w) in grid.dirs.iter().zip(&grid.weights) {
        let v = w * f(d);
        eval_sh_basis(lmax, d, &mut buf);
        for (ci, yi) in c.iter_mut().zip(&buf[..n]) {
            *ci += v * yi;
        }
    }
    ShSeries::new(lmax, c)
}

/// Reads the "x y z" per line direction format. Blank lines and `#` comments are skipped.
pub fn read_directions<R: BufRead>(reader: R) -> Result<Vec<Direction>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 3 {
            return Err(Error::Format(format!("line {}: expected 3 values, got {}", lineno + 1, vals.len())));
        }
        out.push(Direction::new([vals[0], vals[1], vals[2]])?);
    }
    Ok(out)
}

pub fn write_directions<W: Write>(mut w: W, dirs: &[Direction]) -> Result<()> {
    for d in dirs {
        let [x, y, z] = d.as_array();
        writeln!(w, "{x:.17e} {y:.17e} {z:.17e}")?;
    }
    Ok(())
}
