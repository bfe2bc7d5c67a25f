//! Synthetic ground truth: smooth parameter fields, band-limited FODs, the optimized
//! acquisition protocol and noise injection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::forward::{gauss_legendre_unit, synth_volume, AcquisitionPoint, IntegrationMode, Protocol, SmParams};
use crate::sh::{
    eval_sh_basis, flip_half, hemisphere_directions, legendre_p, n_coeffs, validate_lmax, Direction, ShSeries,
};
use crate::volume::{ParamVolume, SignalVolume, VoxelGrid};

/// Signal-to-noise ratio; `inf` means noiseless. Serialized as a number or the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snr(pub f64);

impl Snr {
    pub const INFINITE: Snr = Snr(f64::INFINITY);
    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Text(t) if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity") => Ok(Snr::INFINITE),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad SNR '{t}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FiberConfig {
    Single,
    Crossing,
    /// Single fibers with a crossing region around the centre.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Gaussian,
    Rician,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// mm
    pub voxel_size: [f64; 3],
    pub seed: u64,
    pub lmax: usize,
    /// Gaussian smoothing width in voxels.
    pub smoothness: f64,
    pub fibers: FiberConfig,
    pub snr: Snr,
    pub noise: NoiseKind,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            voxel_size: [3.0, 3.0, 3.0],
            seed: 0,
            lmax: 2,
            smoothness: 4.0,
            fibers: FiberConfig::Mixed,
            snr: Snr::INFINITE,
            noise: NoiseKind::None,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::Config(format!("phantom dims must be >= 4, got {:?}", self.dims)));
        }
        validate_lmax(self.lmax).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(Error::Config(format!("smoothness must be > 0, got {}", self.smoothness)));
        }
        if !(self.snr.0 > 0.0) {
            return Err(Error::Config(format!("SNR must be > 0 or inf, got {}", self.snr.0)));
        }
        if self.noise != NoiseKind::None && !self.snr.is_finite() {
            return Err(Error::Config("noisy phantom needs a finite SNR".into()));
        }
        VoxelGrid::new(self.dims, self.voxel_size)?;
        Ok(())
    }

    pub fn grid(&self) -> VoxelGrid {
        VoxelGrid { dims: self.dims, voxel_size: self.voxel_size }
    }
}

/// Sub-ranges of the kernel bounds used for ground truth.
pub const D_I_RANGE: (f64, f64) = (1.5, 3.0);
pub const D_E_RANGE: (f64, f64) = (1.0, 2.5);
pub const D_P_RANGE: (f64, f64) = (0.3, 1.2);
pub const F_I_RANGE: (f64, f64) = (0.3, 0.9);
pub const S0_RANGE: (f64, f64) = (80.0, 120.0);
/// Minimum gap enforced between `D_e` and `D_p`.
pub const DP_GAP: f64 = 0.2;
const W_ISO_RANGE: (f64, f64) = (0.1, 0.5);

/// Shells: b in s/mm², direction count, b_delta.
pub const DEFAULT_SHELLS: [(f64, usize, f64); 6] =
    [(0.0, 4, 1.0), (1000.0, 20, 1.0), (2000.0, 40, 1.0), (8000.0, 40, 1.0), (5000.0, 35, 0.8), (2000.0, 15, 0.0)];

/// The 154-point multi-shell, multi-shape protocol.
pub fn default_protocol() -> Protocol {
    let mut pts = Vec::new();
    for (s, &(b, n, bd)) in DEFAULT_SHELLS.iter().enumerate() {
        for u in flip_half(&hemisphere_directions(n, s as u64)) {
            pts.push(AcquisitionPoint::from_s_per_mm2(b, bd, u).expect("valid shell"));
        }
    }
    Protocol::new(pts).expect("non-empty")
}

/// Separable Gaussian filter with mirrored (`d c b a | a b c d`) boundaries.
pub fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let reflect = |i: isize, n: isize| -> usize {
        let period = 2 * n;
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - 1 - j;
        }
        j as usize
    };
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / strides[axis]) % dims[axis];
            let base = idx - pos * strides[axis];
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let j = reflect(pos as isize + t as isize - radius, n);
                acc += w * cur[base + j * strides[axis]];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Largest adjacent-voxel step of a unit field, as a fraction of its range, at length-scale `ℓ`.
fn max_step(length_scale: f64) -> f64 {
    0.4 / length_scale
}

/// Smoothed white noise rescaled to `[0, 1]` by its own min and max, then contracted about
/// 0.5 if needed so no adjacent-voxel step exceeds `0.4/ℓ`.
fn unit_field(dims: [usize; 3], sigma: f64, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = dims[0] * dims[1] * dims[2];
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let s = gaussian_smooth(&white, dims, sigma);
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let u: Vec<f64> = s.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut steepest: f64 = 0.0;
    for (i, v) in u.iter().enumerate() {
        for a in 0..3 {
            if (i / strides[a]) % dims[a] + 1 < dims[a] {
                steepest = steepest.max((v - u[i + strides[a]]).abs());
            }
        }
    }
    let c = (max_step(sigma) / steepest).min(1.0);
    u.iter().map(|v| 0.5 + c * (v - 0.5)).collect()
}

/// Smoothed white noise scaled to unit standard deviation.
fn standard_field(dims: [usize; 3], sigma: f64, seed: u64, stream: u64) -> Vec<f64> {
    let u = unit_field(dims, sigma, seed, stream);
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    let sd = (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / u.len() as f64).sqrt();
    u.iter().map(|v| (v - mean) / sd).collect()
}

/// SH coefficients of `(q+1)/(4π)·(n·μ)^q`, a unit-mass, non-negative lobe band-limited to `q`.
pub fn lobe_coefficients(q: usize, mu: &Direction) -> ShSeries {
    let (t, w) = gauss_legendre_unit(64);
    let mut y = vec![0.0; n_coeffs(q)];
    eval_sh_basis(q, mu, &mut y);
    let mut c = vec![0.0; n_coeffs(q)];
    for l in (0..=q).step_by(2) {
        // ∫_{-1}^{1} t^q P_l(t) dt over the symmetric half-interval rule
        let j: f64 = 2.0 * t.iter().zip(&w).map(|(t, w)| w * t.powi(q as i32) * legendre_p(l, *t)).sum::<f64>();
        let f = (q + 1) as f64 / 2.0 * j;
        let lo = crate::sh::sh_index(l, -(l as i32));
        for k in lo..lo + 2 * l + 1 {
            c[k] = f * y[k];
        }
    }
    ShSeries::new(q, c).expect("valid order")
}

/// Ground-truth parameters for every voxel (including border voxels).
pub fn generate_parameter_fields(spec: &PhantomSpec) -> Result<ParamVolume> {
    spec.validate()?;
    let dims = spec.dims;
    let (sig, seed) = (spec.smoothness, spec.seed);
    let map = |u: f64, r: (f64, f64)| r.0 + (r.1 - r.0) * u;
    let di = unit_field(dims, sig, seed, 1);
    let de = unit_field(dims, sig, seed, 2);
    let dp = unit_field(dims, sig, seed, 3);
    let fi = unit_field(dims, sig, seed, 4);
    let s0 = unit_field(dims, sig, seed, 5);
    let wiso = unit_field(dims, sig, seed, 6);
    let dir1: Vec<Vec<f64>> = (0..3).map(|k| standard_field(dims, sig, seed, 10 + k)).collect();
    let dir2: Vec<Vec<f64>> = (0..3).map(|k| standard_field(dims, sig, seed, 20 + k)).collect();
    let grid = spec.grid();
    let base1 = [0.8, 0.5, 0.35];
    let base2 = [-0.3, 0.2, 0.9];
    let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let r0 = *dims.iter().min().unwrap() as f64 / 5.0;
    let q = spec.lmax;
    let mut params = Vec::with_capacity(grid.n_voxels());
    for v in 0..grid.n_voxels() {
        let d_e = map(de[v], D_E_RANGE);
        let dp_max = D_P_RANGE.1.min(d_e - DP_GAP);
        let d_p = D_P_RANGE.0 + (dp_max - D_P_RANGE.0) * dp[v];
        let mu1 = Direction::new(std::array::from_fn(|k| base1[k] + 0.6 * dir1[k][v]))?;
        let helper: [f64; 3] = std::array::from_fn(|k| base2[k] + 0.6 * dir2[k][v]);
        let mu2 = orthogonal_to(&mu1, helper);
        let c = grid.coords(v);
        let r2: f64 = (0..3).map(|k| (c[k] as f64 - centre[k]).powi(2)).sum();
        let w2 = match spec.fibers {
            FiberConfig::Single => 0.0,
            FiberConfig::Crossing => 0.5,
            FiberConfig::Mixed => 0.5 * (-r2 / (2.0 * r0 * r0)).exp(),
        };
        let w_iso = map(wiso[v], W_ISO_RANGE);
        let l1 = lobe_coefficients(q, &mu1);
        let l2 = lobe_coefficients(q, &mu2);
        let mut coeffs: Vec<f64> =
            l1.coeffs().iter().zip(l2.coeffs()).map(|(a, b)| (1.0 - w_iso) * ((1.0 - w2) * a + w2 * b)).collect();
        coeffs[0] += w_iso * crate::sh::unit_mass_p00();
        params.push(SmParams {
            d_i: map(di[v], D_I_RANGE),
            d_e,
            d_p,
            f_i: map(fi[v], F_I_RANGE),
            s0: map(s0[v], S0_RANGE),
            fod: ShSeries::new(q, coeffs)?,
        });
    }
    ParamVolume::new(grid, q, params)
}

fn orthogonal_to(mu: &Direction, helper: [f64; 3]) -> Direction {
    let m = mu.as_array();
    let cross =
        |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    Direction::new(cross(m, helper))
        .or_else(|_| Direction::new(cross(m, [1.0, 0.0, 0.0])))
        .or_else(|_| Direction::new(cross(m, [0.0, 1.0, 0.0])))
        .expect("some axis is not parallel")
}

/// Interior voxels (one-voxel border excluded) with `D_p < D_e`.
pub fn wm_mask(fields: &ParamVolume) -> Vec<bool> {
    let g = fields.grid;
    (0..g.n_voxels())
        .map(|v| {
            let c = g.coords(v);
            let interior = (0..3).all(|k| c[k] >= 1 && c[k] + 1 < g.dims[k]);
            interior && fields.params[v].is_physical()
        })
        .collect()
}

/// Adds noise with per-voxel `σ = mean(b=0 signal)/SNR`; returns the noisy volume and σ map.
pub fn add_noise(clean: &SignalVolume, protocol: &Protocol, spec: &PhantomSpec) -> Result<(SignalVolume, Vec<f64>)> {
    let n = clean.grid.n_voxels();
    if spec.noise == NoiseKind::None || !spec.snr.is_finite() {
        return Ok((clean.clone(), vec![0.0; n]));
    }
    let b0 = protocol.b0_indices();
    if b0.is_empty() {
        return Err(Error::NoB0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(100);
    let mut out = clean.clone();
    let mut sigma = vec![0.0; n];
    for v in 0..n {
        let row = clean.row(v);
        let s = b0.iter().map(|&i| row[i]).sum::<f64>() / b0.len() as f64 / spec.snr.0;
        sigma[v] = s;
        let dst = &mut out.signals[v * clean.n_meas..(v + 1) * clean.n_meas];
        for x in dst.iter_mut() {
            let e1: f64 = StandardNormal.sample(&mut rng);
            match spec.noise {
                NoiseKind::Gaussian => *x += s * e1,
                NoiseKind::Rician => {
                    let e2: f64 = StandardNormal.sample(&mut rng);
                    *x = ((*x + s * e1).powi(2) + (s * e2).powi(2)).sqrt();
                }
                NoiseKind::None => unreachable!(),
            }
        }
    }
    Ok((out, sigma))
}

/// Everything a simulation run produces.
pub struct Phantom {
    pub protocol: Protocol,
    pub truth: ParamVolume,
    pub mask: Vec<bool>,
    pub clean: SignalVolume,
    pub signals: SignalVolume,
    pub sigma: Vec<f64>,
}

/// Ground truth, mask, clean and noisy signals under the default protocol.
pub fn simulate(spec: &PhantomSpec) -> Result<Phantom> {
    simulate_with(spec, &default_protocol(), None)
}

/// As [`simulate`], with an explicit protocol and optional per-voxel protocols.
pub fn simulate_with(spec: &PhantomSpec, protocol: &Protocol, per_voxel: Option<&[Protocol]>) -> Result<Phantom> {
    let truth = generate_parameter_fields(spec)?;
    let mask = wm_mask(&truth);
    let mode = match per_voxel {
        Some(p) if p.iter().any(|q| q.min_b_delta() < 0.0) => IntegrationMode::Numeric,
        None if protocol.min_b_delta() < 0.0 => IntegrationMode::Numeric,
        _ => IntegrationMode::Analytic,
    };
    let mut clean = synth_volume(&truth, &mask, protocol, per_voxel, mode)?;
    if let Some(p) = per_voxel {
        clean.protocols = Some(p.to_vec());
    }
    let (signals, sigma) = add_noise(&clean, protocol, spec)?;
    Ok(Phantom { protocol: protocol.clone(), truth, mask, clean, signals, sigma })
}
