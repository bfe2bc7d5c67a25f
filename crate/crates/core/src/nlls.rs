//! Voxelwise Levenberg–Marquardt fitting.
//!
//! Kernel parameters are optimized through the same bounded activations as the network heads
//! (scaled sigmoid for diffusivities and `f_i`, softplus for `S_0`); FOD coefficients are free
//! apart from `p_00`, which stays at the unit-mass value.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, IntegrationMode, KernelBounds, NumericGrid, Protocol, SmParams, N_KERNEL};
use crate::inr::{sigmoid, softplus, softplus_inv};
use crate::sh::{n_coeffs, ShSeries};
use crate::volume::{isotropic_params, ParamVolume, SignalVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NllsConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Stop when the step is shorter than `step_tolerance·(|z| + step_tolerance)`.
    pub step_tolerance: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub multi_start: usize,
    pub lmax: usize,
    pub integration: IntegrationMode,
    pub bounds: KernelBounds,
    pub seed: u64,
}

impl Default for NllsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            initial_damping: 1e-3,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-12,
            multi_start: 3,
            lmax: 2,
            integration: IntegrationMode::Analytic,
            bounds: KernelBounds::default(),
            seed: 0,
        }
    }
}

impl NllsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.multi_start == 0 {
            return Err(Error::Config("max_iterations and multi_start must be positive".into()));
        }
        for (name, v) in [
            ("initial_damping", self.initial_damping),
            ("step_tolerance", self.step_tolerance),
            ("cost_tolerance", self.cost_tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        crate::sh::validate_lmax(self.lmax).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Unconstrained coordinates of a parameter vector.
#[derive(Clone, Copy, Debug)]
struct Reparam {
    bounds: KernelBounds,
    lmax: usize,
}

impl Reparam {
    /// Internal length: four bounded kernel values, `S_0`, and the SH coefficients after `p_00`.
    fn len(&self) -> usize {
        N_KERNEL + n_coeffs(self.lmax) - 1
    }

    fn params(&self, z: &[f64]) -> SmParams {
        let r = self.bounds.as_array();
        let k: Vec<f64> = (0..4).map(|j| r[j].min + r[j].width() * sigmoid(z[j])).collect();
        let mut fod = ShSeries::isotropic(self.lmax).expect("valid lmax");
        fod.coeffs_mut()[1..].copy_from_slice(&z[N_KERNEL..]);
        SmParams { d_i: k[0], d_e: k[1], d_p: k[2], f_i: k[3], s0: softplus(z[4]), fod }
    }

    /// Derivative of each model parameter (flat layout, minus `p_00`) with respect to `z`.
    fn chain(&self, z: &[f64]) -> Vec<f64> {
        let r = self.bounds.as_array();
        let mut d = vec![1.0; self.len()];
        for j in 0..4 {
            let s = sigmoid(z[j]);
            d[j] = r[j].width() * s * (1.0 - s);
        }
        d[4] = sigmoid(z[4]);
        d
    }

    fn internal(&self, kernel: [f64; 4], s0: f64) -> Vec<f64> {
        let r = self.bounds.as_array();
        let mut z = vec![0.0; self.len()];
        for j in 0..4 {
            let u = ((kernel[j] - r[j].min) / r[j].width()).clamp(1e-9, 1.0 - 1e-9);
            z[j] = (u / (1.0 - u)).ln();
        }
        z[4] = softplus_inv(s0);
        z
    }
}

/// Outcome of one voxel fit.
#[derive(Clone, Debug)]
pub struct VoxelFit {
    pub params: SmParams,
    /// Sum of squared residuals.
    pub cost: f64,
    pub iterations: usize,
    /// Set when a non-finite residual stopped a restart.
    pub flag: Option<String>,
}

struct Run {
    z: Vec<f64>,
    cost: f64,
    iterations: usize,
    flag: Option<String>,
}

/// Residuals and Jacobian with respect to the internal variables.
fn residuals(
    model: &ForwardModel,
    rp: &Reparam,
    signal: &[f64],
    z: &[f64],
    jac: Option<&mut DMatrix<f64>>,
) -> (Vec<f64>, f64) {
    let p = rp.params(z);
    let nm = signal.len();
    let mut pred = vec![0.0; nm];
    match jac {
        None => model.predict(&p, &mut pred),
        Some(j) => {
            let np = model.n_params();
            let mut full = vec![0.0; nm * np];
            model.predict_jacobian(&p, &mut pred, &mut full);
            let d = rp.chain(z);
            for i in 0..nm {
                for c in 0..rp.len() {
                    // internal column c maps to flat column c, skipping p_00 at N_KERNEL
                    let col = if c < N_KERNEL { c } else { c + 1 };
                    j[(i, c)] = full[i * np + col] * d[c];
                }
            }
        }
    }
    let r: Vec<f64> = pred.iter().zip(signal).map(|(p, s)| p - s).collect();
    let cost = r.iter().map(|v| v * v).sum();
    (r, cost)
}

fn levenberg_marquardt(model: &ForwardModel, rp: &Reparam, signal: &[f64], z0: Vec<f64>, cfg: &NllsConfig) -> Run {
    let (nm, nz) = (signal.len(), rp.len());
    let mut jac = DMatrix::zeros(nm, nz);
    let mut z = z0;
    let (mut r, mut cost) = residuals(model, rp, signal, &z, Some(&mut jac));
    if !cost.is_finite() {
        return Run { z, cost, iterations: 0, flag: Some("non-finite residual at the start point".into()) };
    }
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    let mut fresh = true;
    let (mut jtj, mut g) = (DMatrix::zeros(nz, nz), DVector::zeros(nz));
    while iterations < cfg.max_iterations {
        iterations += 1;
        if fresh {
            jtj = jac.tr_mul(&jac);
            g = jac.tr_mul(&DVector::from_column_slice(&r));
            fresh = false;
        }
        let scale = jtj.diagonal().max().max(f64::MIN_POSITIVE);
        let mut a = jtj.clone();
        for j in 0..nz {
            a[(j, j)] += lambda * jtj[(j, j)].max(1e-12 * scale);
        }
        let step = match a.clone().cholesky() {
            Some(c) => c.solve(&(-&g)),
            None => match a.lu().solve(&(-&g)) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            },
        };
        let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if step.norm() <= cfg.step_tolerance * (znorm + cfg.step_tolerance) {
            break;
        }
        let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let (_, trial_cost) = residuals(model, rp, signal, &trial, None);
        if !trial_cost.is_finite() {
            return Run { z, cost, iterations, flag: Some("non-finite residual".into()) };
        }
        if trial_cost < cost {
            let decrease = (cost - trial_cost) / cost;
            z = trial;
            let (nr, nc) = residuals(model, rp, signal, &z, Some(&mut jac));
            r = nr;
            cost = nc;
            fresh = true;
            lambda = (lambda / 10.0).max(1e-15);
            if decrease < cfg.cost_tolerance || cost == 0.0 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
    }
    Run { z, cost, iterations, flag: None }
}

/// Start points shared by every voxel: the range midpoint, then seeded interior draws.
fn start_kernels(cfg: &NllsConfig) -> Vec<[f64; 4]> {
    let r = cfg.bounds.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.multi_start)
        .map(|k| {
            std::array::from_fn(|j| {
                let u = if k == 0 { 0.5 } else { rng.random_range(0.05..0.95) };
                r[j].min + u * r[j].width()
            })
        })
        .collect()
}

fn initial_s0(signal: &[f64], protocol: &Protocol) -> f64 {
    let b0 = protocol.b0_indices();
    let m = if b0.is_empty() {
        signal.iter().cloned().fold(0.0, f64::max)
    } else {
        b0.iter().map(|&i| signal[i]).sum::<f64>() / b0.len() as f64
    };
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

fn fit_with_model(
    model: &ForwardModel,
    signal: &[f64],
    protocol: &Protocol,
    starts: &[[f64; 4]],
    cfg: &NllsConfig,
) -> VoxelFit {
    let rp = Reparam { bounds: cfg.bounds, lmax: cfg.lmax };
    let s0 = initial_s0(signal, protocol);
    let mut best: Option<Run> = None;
    let mut flag = None;
    for k in starts {
        let run = levenberg_marquardt(model, &rp, signal, rp.internal(*k, s0), cfg);
        if run.flag.is_some() {
            flag = run.flag.clone();
        }
        if best.as_ref().is_none_or(|b| !(b.cost <= run.cost)) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one start");
    VoxelFit { params: rp.params(&best.z), cost: best.cost, iterations: best.iterations, flag }
}

fn build_model(protocol: &Protocol, cfg: &NllsConfig, grid: Option<&Arc<NumericGrid>>) -> Result<ForwardModel> {
    match grid {
        Some(g) => ForwardModel::numeric(protocol, g.clone()),
        None => ForwardModel::analytic(protocol, cfg.lmax),
    }
}

fn numeric_grid(cfg: &NllsConfig) -> Result<Option<Arc<NumericGrid>>> {
    Ok(match cfg.integration {
        IntegrationMode::Numeric => Some(Arc::new(NumericGrid::default_for(cfg.lmax)?)),
        IntegrationMode::Analytic => None,
    })
}

/// Best-of-restarts least-squares fit of one voxel.
pub fn lm_fit_voxel(signal: &[f64], protocol: &Protocol, cfg: &NllsConfig) -> Result<VoxelFit> {
    cfg.validate()?;
    if signal.len() != protocol.len() {
        return Err(Error::Shape(format!("{} signals for {} acquisitions", signal.len(), protocol.len())));
    }
    let model = build_model(protocol, cfg, numeric_grid(cfg)?.as_ref())?;
    Ok(fit_with_model(&model, signal, protocol, &start_kernels(cfg), cfg))
}

/// Parameter maps from independent voxel fits.
#[derive(Clone, Debug)]
pub struct VolumeFit {
    pub params: ParamVolume,
    /// Residual sum of squares per voxel (zero outside the mask).
    pub cost: Vec<f64>,
    /// Voxels whose fit hit a non-finite residual; their best-so-far estimate is kept.
    pub flagged: Vec<(usize, String)>,
}

/// Fits every masked voxel; unmasked voxels hold zero kernel values and an isotropic FOD.
pub fn lm_fit_volume(volume: &SignalVolume, protocol: &Protocol, cfg: &NllsConfig) -> Result<VolumeFit> {
    cfg.validate()?;
    volume.validate()?;
    if volume.n_meas != protocol.len() {
        return Err(Error::Shape(format!("volume has {} measurements, protocol {}", volume.n_meas, protocol.len())));
    }
    let grid = numeric_grid(cfg)?;
    let shared = match &volume.protocols {
        None => Some(build_model(protocol, cfg, grid.as_ref())?),
        Some(_) => None,
    };
    let starts = start_kernels(cfg);
    let nvox = volume.grid.n_voxels();
    let fits: Vec<Result<Option<VoxelFit>>> = (0..nvox)
        .into_par_iter()
        .map(|v| {
            if !volume.mask[v] {
                return Ok(None);
            }
            let proto = volume.protocol_for(v, protocol);
            let local;
            let model = match &shared {
                Some(m) => m,
                None => {
                    local = build_model(proto, cfg, grid.as_ref())?;
                    &local
                }
            };
            Ok(Some(fit_with_model(model, volume.row(v), proto, &starts, cfg)))
        })
        .collect();
    let mut params = Vec::with_capacity(nvox);
    let mut cost = vec![0.0; nvox];
    let mut flagged = Vec::new();
    for (v, f) in fits.into_iter().enumerate() {
        match f? {
            Some(fit) => {
                if let Some(msg) = fit.flag {
                    flagged.push((v, msg));
                }
                cost[v] = fit.cost;
                params.push(fit.params);
            }
            None => params.push(isotropic_params(cfg.lmax, [0.0; 5])),
        }
    }
    if !flagged.is_empty() {
        log::warn!("{} voxel fit(s) hit non-finite residuals", flagged.len());
    }
    Ok(VolumeFit { params: ParamVolume::new(volume.grid, cfg.lmax, params)?, cost, flagged })
}
