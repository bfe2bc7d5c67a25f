//! Losses, the FOD non-negativity penalty, Adam, and the training loop that fits a
//! coordinate network to a signal volume through the forward model.

use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, IntegrationMode, NumericGrid, Protocol, SmParams, N_KERNEL};
use crate::inr::{cst, softplus_inv, CoordinateBox, Inr, InrConfig, InrWeights, Preset, Real};
use crate::sh::{eval_sh_basis, hemisphere_directions, n_coeffs, Direction, ShSeries};
use crate::volume::SignalVolume;

/// Switch point between the power series and the asymptotic expansion of `I_0`/`I_1`.
const BESSEL_SWITCH: f64 = 20.0;

/// `ln I_0(z)` for `z >= 0`.
pub fn log_i0(z: f64) -> f64 {
    let z = z.abs();
    if z <= BESSEL_SWITCH {
        log_i0_series(z)
    } else {
        log_i0_asymptotic(z)
    }
}

fn log_i0_series(z: f64) -> f64 {
    {
        let q = z * z / 4.0;
        let (mut term, mut sum) = (1.0f64, 1.0f64);
        for k in 1..200 {
            term *= q / (k * k) as f64;
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        sum.ln()
    }
}

fn log_i0_asymptotic(z: f64) -> f64 {
    z - 0.5 * (2.0 * std::f64::consts::PI * z).ln() + asymptotic_series(0.0, z).ln()
}

/// `Σ_k (-1)^k a_k(ν) / z^k` from `I_ν(z) ~ e^z/√(2πz)·Σ`.
fn asymptotic_series(nu: f64, z: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for k in 1..=16 {
        let j = (2 * k - 1) as f64;
        term *= -(mu - j * j) / (k as f64 * 8.0 * z);
        sum += term;
    }
    sum
}

/// `I_1(z)/I_0(z)` for `z >= 0`.
pub fn bessel_i1_i0(z: f64) -> f64 {
    if z <= BESSEL_SWITCH {
        let h = z / 2.0;
        let q = h * h;
        let (mut t0, mut s0) = (1.0f64, 1.0f64);
        let (mut t1, mut s1) = (h, h);
        for k in 1..200 {
            let kf = k as f64;
            t0 *= q / (kf * kf);
            t1 *= q / (kf * (kf + 1.0));
            s0 += t0;
            s1 += t1;
            if t0 < s0 * 1e-17 && t1 < s1 * 1e-17 {
                break;
            }
        }
        s1 / s0
    } else {
        asymptotic_series(1.0, z) / asymptotic_series(0.0, z)
    }
}

fn check_lengths(pred: &[f64], meas: &[f64]) -> Result<()> {
    if pred.len() != meas.len() {
        return Err(Error::Shape(format!("{} predictions vs {} measurements", pred.len(), meas.len())));
    }
    Ok(())
}

pub fn mse_loss(pred: &[f64], meas: &[f64]) -> Result<f64> {
    check_lengths(pred, meas)?;
    if pred.is_empty() {
        return Err(Error::Shape("empty vectors".into()));
    }
    Ok(pred.iter().zip(meas).map(|(p, m)| (p - m).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Rician negative log-likelihood `−Σ[ln(m/σ²) − (m²+p²)/(2σ²) + ln I_0(mp/σ²)]`.
///
/// Measurements equal to zero contribute only their prediction-dependent part.
pub fn rician_nll(pred: &[f64], meas: &[f64], sigma: f64) -> Result<f64> {
    check_lengths(pred, meas)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let mut nll = 0.0;
    for (&p, &m) in pred.iter().zip(meas) {
        if m < 0.0 {
            return Err(Error::InvalidArgument(format!("negative magnitude {m}")));
        }
        let lm = if m > 0.0 { (m / s2).ln() } else { 0.0 };
        nll -= lm - (m * m + p * p) / (2.0 * s2) + log_i0(m * p / s2);
    }
    Ok(nll)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Rician,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "rician" => Ok(Self::Rician),
            _ => Err(Error::Config(format!("unknown loss '{s}'"))),
        }
    }
}

/// Per-voxel data term normalized by the number of measurements; writes `∂/∂pred` into `grad`.
pub fn data_term(kind: LossKind, pred: &[f64], meas: &[f64], sigma: f64, grad: &mut [f64]) -> f64 {
    let n = pred.len() as f64;
    match kind {
        LossKind::Mse => {
            let mut l = 0.0;
            for ((p, m), g) in pred.iter().zip(meas).zip(grad.iter_mut()) {
                let r = p - m;
                l += r * r;
                *g = 2.0 * r / n;
            }
            l / n
        }
        LossKind::Rician => {
            let s2 = sigma * sigma;
            let mut l = 0.0;
            for ((&p, &m), g) in pred.iter().zip(meas).zip(grad.iter_mut()) {
                let m = m.max(0.0);
                let z = m * p / s2;
                let lm = if m > 0.0 { (m / s2).ln() } else { 0.0 };
                l -= lm - (m * m + p * p) / (2.0 * s2) + log_i0(z);
                // d ln I0(z)/dz = I1/I0, z ≥ 0 for p ≥ 0
                let r = if z >= 0.0 { bessel_i1_i0(z) } else { -bessel_i1_i0(-z) };
                *g = (p / s2 - m / s2 * r) / n;
            }
            l / n
        }
    }
}

/// Directions at which FOD negativity is sampled, with their SH basis values.
#[derive(Clone, Debug)]
pub struct PenaltyDirections {
    pub dirs: Vec<Direction>,
    lmax: usize,
    sh: Vec<f64>,
}

impl PenaltyDirections {
    pub fn new(dirs: Vec<Direction>, lmax: usize) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::InvalidArgument("no penalty directions".into()));
        }
        let n = n_coeffs(lmax);
        let mut sh = vec![0.0; dirs.len() * n];
        for (d, row) in dirs.iter().zip(sh.chunks_exact_mut(n)) {
            eval_sh_basis(lmax, d, row);
        }
        Ok(Self { dirs, lmax, sh })
    }

    /// Repulsion directions on the hemisphere; antipodal symmetry covers the other half.
    pub fn repulsion(count: usize, lmax: usize, seed: u64) -> Result<Self> {
        Self::new(hemisphere_directions(count, seed), lmax)
    }

    /// `λ·mean_k max(0, −P(n_k))`; adds `∂/∂p_lm` scaled by `scale` into `grad` when given.
    pub fn penalty(&self, coeffs: &[f64], weight: f64, grad: Option<(&mut [f64], f64)>) -> f64 {
        let n = n_coeffs(self.lmax);
        assert_eq!(coeffs.len(), n, "FOD order does not match penalty table");
        let k = self.dirs.len() as f64;
        let mut sum = 0.0;
        let mut neg_rows = Vec::new();
        for (i, row) in self.sh.chunks_exact(n).enumerate() {
            let v: f64 = row.iter().zip(coeffs).map(|(a, b)| a * b).sum();
            if v < 0.0 {
                sum -= v;
                neg_rows.push(i);
            }
        }
        if let Some((g, scale)) = grad {
            for i in neg_rows {
                for (gj, y) in g.iter_mut().zip(&self.sh[i * n..(i + 1) * n]) {
                    *gj -= scale * weight / k * y;
                }
            }
        }
        weight * sum / k
    }

    /// Mean of `max(0, −P)` and of `max(0, P)` over the directions.
    pub fn masses(&self, coeffs: &[f64]) -> (f64, f64) {
        let n = n_coeffs(self.lmax);
        let (mut neg, mut pos) = (0.0, 0.0);
        for row in self.sh.chunks_exact(n) {
            let v: f64 = row.iter().zip(coeffs).map(|(a, b)| a * b).sum();
            if v < 0.0 {
                neg -= v;
            } else {
                pos += v;
            }
        }
        let k = self.dirs.len() as f64;
        (neg / k, pos / k)
    }
}

/// `λ_c·(1/|dirs|)·Σ max(0, −P(n_k))`.
pub fn fod_negativity_penalty(fod: &ShSeries, dirs: &[Direction], weight: f64) -> Result<f64> {
    Ok(PenaltyDirections::new(dirs.to_vec(), fod.lmax())?.penalty(fod.coeffs(), weight, None))
}

/// Adam moment estimates, one buffer per trainable array.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any update is non-finite.
pub fn adam_step<T: Real>(weights: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if weights.len() != grads.len()
        || weights.len() != state.m.len()
        || weights.iter().zip(grads).zip(&state.m).any(|((w, g), m)| w.len() != g.len() || w.len() != m.len())
    {
        return Err(Error::Shape("weights, gradients and optimizer state disagree".into()));
    }
    let t = state.t + 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let (tb1, tb2, teps) = (cst::<T>(b1), cst::<T>(b2), cst::<T>(state.eps));
    let (one_b1, one_b2) = (cst::<T>(1.0 - b1), cst::<T>(1.0 - b2));
    let (ic1, ic2, tlr) = (cst::<T>(1.0 / c1), cst::<T>(1.0 / c2), cst::<T>(lr));
    let mut new_m = Vec::with_capacity(grads.len());
    let mut new_v = Vec::with_capacity(grads.len());
    let mut new_w = Vec::with_capacity(grads.len());
    for (a, ((w, g), (m, v))) in weights.iter().zip(grads).zip(state.m.iter().zip(&state.v)).enumerate() {
        let mut mm = Vec::with_capacity(w.len());
        let mut vv = Vec::with_capacity(w.len());
        let mut ww = Vec::with_capacity(w.len());
        for i in 0..w.len() {
            let mi = tb1 * m[i] + one_b1 * g[i];
            let vi = tb2 * v[i] + one_b2 * g[i] * g[i];
            let step = tlr * (mi * ic1) / ((vi * ic2).sqrt() + teps);
            let wi = w[i] - step;
            if !wi.is_finite() {
                return Err(Error::NonFiniteUpdate(a));
            }
            mm.push(mi);
            vv.push(vi);
            ww.push(wi);
        }
        new_m.push(mm);
        new_v.push(vv);
        new_w.push(ww);
    }
    for (w, nw) in weights.iter_mut().zip(new_w) {
        w.copy_from_slice(&nw);
    }
    state.m = new_m;
    state.v = new_v;
    state.t = t;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Voxels per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub penalty_directions: usize,
    pub penalty_weight: f64,
    pub integration: IntegrationMode,
    /// Start the `S_0` head at the mean b=0 signal instead of `softplus(0)`.
    pub init_s0_from_data: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 500,
            learning_rate: 1e-4,
            loss: LossKind::Mse,
            penalty_directions: 300,
            penalty_weight: 1.0,
            integration: IntegrationMode::Analytic,
            init_s0_from_data: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings, or smaller batches and a higher rate for desk-scale phantoms.
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::default(),
            Preset::Desk => Self { batch_size: 64, learning_rate: 2e-4, ..Self::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.penalty_directions == 0 {
            return Err(Error::Config("epochs, batch_size and penalty_directions must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return Err(Error::Config(format!("bad penalty weight {}", self.penalty_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub penalty_mean: f64,
}

pub fn write_loss_csv<W: Write>(history: &[EpochStats], mut w: W) -> Result<()> {
    writeln!(w, "epoch,mean_loss,penalty_mean")?;
    for h in history {
        writeln!(w, "{},{},{}", h.epoch, h.mean_loss, h.penalty_mean)?;
    }
    Ok(())
}

/// Everything needed to evaluate the training objective on a batch of voxels.
pub struct Objective {
    lmax: usize,
    kind: LossKind,
    coords: Vec<[f64; 3]>,
    n_meas: usize,
    signals: Vec<f64>,
    sigma: Vec<f64>,
    /// Masked voxel indices; `coords`, `sigma` and model choice are indexed by position here.
    pub voxels: Vec<usize>,
    models: Models,
    penalty: PenaltyDirections,
    penalty_weight: f64,
}

enum Models {
    Shared(ForwardModel),
    PerVoxel(Vec<ForwardModel>),
}

/// Loss of one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchValue {
    pub loss: f64,
    pub penalty: f64,
}

impl Objective {
    pub fn new(
        volume: &SignalVolume,
        protocol: &Protocol,
        sigma_map: Option<&[f64]>,
        lmax: usize,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        volume.validate()?;
        if volume.n_meas != protocol.len() {
            return Err(Error::Shape(format!(
                "volume has {} measurements, protocol {}",
                volume.n_meas,
                protocol.len()
            )));
        }
        let voxels = volume.masked_indices();
        if voxels.is_empty() {
            return Err(Error::InvalidArgument("mask is empty".into()));
        }
        let sigma = match (cfg.loss, sigma_map) {
            (LossKind::Rician, None) => return Err(Error::Config("rician loss requires a sigma map".into())),
            (_, Some(s)) => {
                if s.len() != volume.grid.n_voxels() {
                    return Err(Error::Shape("sigma map does not match the volume".into()));
                }
                let v: Vec<f64> = voxels.iter().map(|&i| s[i]).collect();
                if cfg.loss == LossKind::Rician {
                    if let Some(i) = v.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
                        return Err(Error::Config(format!(
                            "rician loss needs sigma > 0; voxel {} has {}",
                            voxels[i], v[i]
                        )));
                    }
                }
                v
            }
            (LossKind::Mse, None) => vec![0.0; voxels.len()],
        };
        let models = match &volume.protocols {
            None => Models::Shared(ForwardModel::new(protocol, lmax, cfg.integration)?),
            Some(per) => {
                let grid = match cfg.integration {
                    IntegrationMode::Numeric => Some(Arc::new(NumericGrid::default_for(lmax)?)),
                    IntegrationMode::Analytic => None,
                };
                let ms = voxels
                    .iter()
                    .map(|&v| match &grid {
                        Some(g) => ForwardModel::numeric(&per[v], g.clone()),
                        None => ForwardModel::analytic(&per[v], lmax),
                    })
                    .collect::<Result<_>>()?;
                Models::PerVoxel(ms)
            }
        };
        let bx = CoordinateBox::new(&volume.grid);
        let coords = voxels
            .iter()
            .map(|&v| {
                let [x, y, z] = volume.grid.coords(v);
                bx.voxel(x, y, z)
            })
            .collect();
        let n_meas = volume.n_meas;
        let mut signals = Vec::with_capacity(voxels.len() * n_meas);
        for &v in &voxels {
            signals.extend_from_slice(volume.row(v));
        }
        Ok(Self {
            lmax,
            kind: cfg.loss,
            coords,
            n_meas,
            signals,
            sigma,
            voxels,
            models,
            penalty: PenaltyDirections::repulsion(cfg.penalty_directions, lmax, cfg.seed)?,
            penalty_weight: cfg.penalty_weight,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }

    fn model(&self, pos: usize) -> &ForwardModel {
        match &self.models {
            Models::Shared(m) => m,
            Models::PerVoxel(v) => &v[pos],
        }
    }

    /// Mean measured b=0 signal over the mask, if the protocol has b=0 points.
    pub fn mean_b0(&self, protocol: &Protocol) -> Option<f64> {
        let b0 = protocol.b0_indices();
        if b0.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for row in self.signals.chunks_exact(self.n_meas) {
            sum += b0.iter().map(|&i| row[i]).sum::<f64>() / b0.len() as f64;
        }
        Some(sum / self.n_voxels() as f64)
    }

    /// Batch loss (mean over voxels of data term plus penalty) and its gradient
    /// with respect to the network weights. `batch` holds positions into [`Self::voxels`].
    pub fn evaluate<T: Real>(
        &self,
        net: &Inr<T>,
        batch: &[usize],
        epoch: usize,
        batch_index: usize,
    ) -> Result<(BatchValue, InrWeights<T>)> {
        let coords: Vec<[f64; 3]> = batch.iter().map(|&i| self.coords[i]).collect();
        let cache = net.forward_cache(&coords);
        let np = N_KERNEL + n_coeffs(self.lmax);
        let scale = 1.0 / batch.len() as f64;
        let rows: Vec<(f64, f64, Vec<f64>)> = batch
            .par_iter()
            .enumerate()
            .map(|(r, &pos)| {
                let flat: Vec<f64> = cache.params.row(r).iter().map(|v| v.to_f64().unwrap()).collect();
                let p = SmParams::from_slice(self.lmax, &flat).expect("consistent layout");
                let meas = &self.signals[pos * self.n_meas..(pos + 1) * self.n_meas];
                let model = self.model(pos);
                let mut pred = model.predict_vec(&p);
                let mut dl = vec![0.0; self.n_meas];
                let data = data_term(self.kind, &pred, meas, self.sigma[pos], &mut dl);
                let mut grad = vec![0.0; np];
                for g in dl.iter_mut() {
                    *g *= scale;
                }
                model.predict_vjp(&p, &dl, &mut pred, &mut grad);
                let pen =
                    self.penalty.penalty(p.fod.coeffs(), self.penalty_weight, Some((&mut grad[N_KERNEL..], scale)));
                (data, pen, grad)
            })
            .collect();
        let bad: Vec<usize> = batch
            .iter()
            .zip(&rows)
            .filter(|(_, (d, p, g))| !(d.is_finite() && p.is_finite() && g.iter().all(|v| v.is_finite())))
            .map(|(&pos, _)| self.voxels[pos])
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFiniteLoss { epoch, batch: batch_index, voxels: bad });
        }
        let mut d_params = Array2::<T>::zeros((batch.len(), np));
        let mut value = BatchValue::default();
        for (r, (data, pen, grad)) in rows.iter().enumerate() {
            value.loss += (data + pen) * scale;
            value.penalty += pen * scale;
            for (j, g) in grad.iter().enumerate() {
                d_params[[r, j]] = cst(*g);
            }
        }
        let grads = net.backward(&cache, &d_params)?;
        Ok((value, grads))
    }

    /// Post-fit FOD negativity: mean negative and mean positive mass over all voxels.
    pub fn fod_masses<T: Real>(&self, net: &Inr<T>) -> (f64, f64) {
        let flat = net.forward_flat_chunked(&self.coords);
        let (mut neg, mut pos) = (0.0, 0.0);
        for row in flat.rows() {
            let c: Vec<f64> = row.iter().skip(N_KERNEL).map(|v| v.to_f64().unwrap()).collect();
            let (n, p) = self.penalty.masses(&c);
            neg += n;
            pos += p;
        }
        let k = self.n_voxels() as f64;
        (neg / k, pos / k)
    }
}

pub struct FitResult {
    pub inr: Inr<f32>,
    pub history: Vec<EpochStats>,
}

/// Trains a fresh network on the masked voxels of `volume`.
pub fn fit(
    volume: &SignalVolume,
    protocol: &Protocol,
    sigma_map: Option<&[f64]>,
    inr_cfg: &InrConfig,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    inr_cfg.validate()?;
    if cfg.integration == IntegrationMode::Analytic {
        let min_bd = match &volume.protocols {
            Some(per) => per.iter().map(Protocol::min_b_delta).fold(f64::INFINITY, f64::min),
            None => protocol.min_b_delta(),
        };
        if min_bd < 0.0 {
            return Err(Error::AnalyticDomain(format!("b_delta = {min_bd} in the protocol; use numeric integration")));
        }
    }
    let obj = Objective::new(volume, protocol, sigma_map, inr_cfg.lmax, cfg)?;
    let mut net = Inr::<f32>::new(inr_cfg.clone())?;
    if cfg.init_s0_from_data {
        if let Some(m) = obj.mean_b0(protocol).filter(|m| *m > 0.0) {
            net.weights.head.b[4] = softplus_inv(m) as f32;
        }
    }
    let sizes: Vec<usize> = net.weights.arrays().iter().map(|(a, _)| a.len()).collect();
    let mut adam = AdamState::<f32>::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..obj.n_voxels()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut pen, mut count) = (0.0, 0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (v, g) = obj.evaluate(&net, batch, epoch, bi)?;
            let n = batch.len();
            loss += v.loss * n as f64;
            pen += v.penalty * n as f64;
            count += n;
            let ga: Vec<&[f32]> = g.arrays().into_iter().map(|(a, _)| a).collect();
            adam_step(&mut net.weights.arrays_mut(), &ga, &mut adam, cfg.learning_rate)?;
        }
        let stats = EpochStats { epoch, mean_loss: loss / count as f64, penalty_mean: pen / count as f64 };
        if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            log::info!("epoch {epoch}: loss {:.6e}, penalty {:.3e}", stats.mean_loss, stats.penalty_mean);
        }
        history.push(stats);
    }
    Ok(FitResult { inr: net, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::AcquisitionPoint;
    use crate::sh::unit_mass_p00;
    use crate::volume::VoxelGrid;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    // Bessel oracles by direct quadrature: I_ν(z) = (1/π)∫₀^π e^{z cos t} cos(νt) dt, scaled by e^{-z}.
    fn scaled_bessel(nu: f64, z: f64) -> f64 {
        let n = 20000;
        let h = std::f64::consts::PI / n as f64;
        let mut s = 0.0;
        for k in 0..=n {
            let t = k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            s += w * (z * (t.cos() - 1.0)).exp() * (nu * t).cos();
        }
        s * h / std::f64::consts::PI
    }

    #[test]
    fn log_i0_against_quadrature() {
        for z in [0.0, 0.3, 2.0, 7.5, 19.9, 20.1, 35.0, 80.0, 400.0] {
            let expect = z + scaled_bessel(0.0, z).ln();
            assert_abs_diff_eq!(log_i0(z), expect, epsilon = 1e-9 * (1.0 + expect.abs()));
            let ratio = scaled_bessel(1.0, z) / scaled_bessel(0.0, z);
            assert_abs_diff_eq!(bessel_i1_i0(z), ratio, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_i0_branch_continuity() {
        for z in [20.0 - 1e-6, 20.0, 20.0 + 1e-6] {
            assert_abs_diff_eq!(log_i0_series(z), log_i0_asymptotic(z), epsilon = 1e-8);
        }
        // across the switch the only change is the function's own slope I1/I0
        let (a, b) = (log_i0(20.0 - 1e-6), log_i0(20.0 + 1e-6));
        assert_abs_diff_eq!(b - a, 2e-6 * bessel_i1_i0(20.0), epsilon = 1e-8);
        assert_abs_diff_eq!(bessel_i1_i0(20.0 - 1e-6), bessel_i1_i0(20.0 + 1e-6), epsilon = 1e-8);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        let (x, y) = ([0.3, -1.2, 4.0], [1.0, 0.5, 2.0]);
        let a = 3.7;
        let ax: Vec<f64> = x.iter().map(|v| v * a).collect();
        let ay: Vec<f64> = y.iter().map(|v| v * a).collect();
        assert_abs_diff_eq!(mse_loss(&ax, &ay).unwrap(), a * a * mse_loss(&x, &y).unwrap(), epsilon = 1e-12);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn rician_minimizer_oracle() {
        let sigma = 1.0;
        let f = |m: f64| move |p: f64| rician_nll(&[p], &[m], sigma).unwrap();
        let p50 = golden_min(f(50.0), 0.0, 100.0);
        assert!((p50 - 50.0).abs() / 50.0 < 1e-3, "{p50}");
        let p2 = golden_min(f(2.0), 0.0, 10.0);
        assert!(p2 < 2.0, "{p2}");
        assert!(rician_nll(&[1.0], &[1.0], 0.0).is_err());
        assert!(rician_nll(&[1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn data_term_gradients_match_finite_differences() {
        let meas = [3.0, 0.5, 7.0, 0.0];
        let pred = [2.5, 0.9, 6.0, 0.3];
        for kind in [LossKind::Mse, LossKind::Rician] {
            let mut g = [0.0; 4];
            let l = data_term(kind, &pred, &meas, 0.8, &mut g);
            if kind == LossKind::Rician {
                let sum = rician_nll(&pred, &meas, 0.8).unwrap();
                assert_abs_diff_eq!(l, sum / 4.0, epsilon = 1e-12);
            }
            for i in 0..4 {
                let mut p = pred;
                p[i] += 1e-6;
                let mut m = pred;
                m[i] -= 1e-6;
                let mut s = [0.0; 4];
                let fd = (data_term(kind, &p, &meas, 0.8, &mut s) - data_term(kind, &m, &meas, 0.8, &mut s)) / 2e-6;
                assert_abs_diff_eq!(g[i], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn penalty_examples() {
        let dirs = hemisphere_directions(50, 1);
        let iso = ShSeries::isotropic(4).unwrap();
        assert_eq!(fod_negativity_penalty(&iso, &dirs, 1.0).unwrap(), 0.0);
        let mut neg = iso.clone();
        neg.coeffs_mut()[0] = -unit_mass_p00();
        // P ≡ -1/(4π) everywhere
        let expect = 2.5 / (4.0 * std::f64::consts::PI);
        assert_abs_diff_eq!(fod_negativity_penalty(&neg, &dirs, 2.5).unwrap(), expect, epsilon = 1e-14);
    }

    #[test]
    fn penalty_shrinks_with_negative_lobes() {
        let dirs = hemisphere_directions(300, 2);
        let pos = ShSeries::isotropic(2).unwrap();
        let mut lobed = pos.clone();
        lobed.coeffs_mut()[crate::sh::sh_index(2, 0)] = 0.6;
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let c: Vec<f64> = lobed.coeffs().iter().zip(pos.coeffs()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let p = fod_negativity_penalty(&ShSeries::new(2, c).unwrap(), &dirs, 1.0).unwrap();
            assert!(p <= prev + 1e-15);
            prev = p;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut w = vec![1.0f64, -2.0, 0.5];
        let g = vec![0.3, -4.0, 1e-3];
        let mut st = AdamState::<f64>::new(&[3]);
        adam_step(&mut [w.as_mut_slice()], &[g.as_slice()], &mut st, 0.01).unwrap();
        assert_abs_diff_eq!(w[0], 0.99, epsilon = 1e-9);
        assert_abs_diff_eq!(w[1], -1.99, epsilon = 1e-9);
        assert_abs_diff_eq!(w[2], 0.49, epsilon = 1e-7);
        let mut w = vec![1.0f64, -2.0];
        let before = w.clone();
        let mut st = AdamState::<f64>::new(&[2]);
        adam_step(&mut [w.as_mut_slice()], &[[0.0, 0.0].as_slice()], &mut st, 0.01).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn adam_quadratic_bowl() {
        let mut w = vec![1.0f64];
        let mut st = AdamState::<f64>::new(&[1]);
        for _ in 0..2000 {
            let g = [2.0 * w[0]];
            adam_step(&mut [w.as_mut_slice()], &[g.as_slice()], &mut st, 1e-2).unwrap();
        }
        assert!(w[0].abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut w = vec![1.0f64];
        let mut st = AdamState::<f64>::new(&[1]);
        let r = adam_step(&mut [w.as_mut_slice()], &[[f64::NAN].as_slice()], &mut st, 1e-2);
        assert!(matches!(r, Err(Error::NonFiniteUpdate(0))));
        assert_eq!(w, vec![1.0]);
    }

    fn small_protocol() -> Protocol {
        let mut pts = vec![AcquisitionPoint::new(0.0, 1.0, Direction::z()).unwrap()];
        for (i, d) in hemisphere_directions(12, 4).into_iter().enumerate() {
            let b = if i % 2 == 0 { 1.0 } else { 2.5 };
            pts.push(AcquisitionPoint::new(b, 1.0, d).unwrap());
        }
        Protocol::new(pts).unwrap()
    }

    fn tiny_volume(kind: LossKind) -> (SignalVolume, Protocol, Vec<f64>) {
        let proto = small_protocol();
        let grid = VoxelGrid::new([2, 2, 1], [1.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = proto.len();
        let signals: Vec<f64> = (0..4 * n).map(|_| rng.random_range(0.2..1.2)).collect();
        let _ = kind;
        (SignalVolume::new(grid, vec![true; 4], n, signals).unwrap(), proto, vec![0.3; 4])
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for kind in [LossKind::Mse, LossKind::Rician] {
            let (vol, proto, sigma) = tiny_volume(kind);
            let cfg = TrainConfig { loss: kind, penalty_directions: 40, ..Default::default() };
            let obj = Objective::new(&vol, &proto, Some(&sigma), 2, &cfg).unwrap();
            let icfg = InrConfig { n_p: 8, n_h: 16, sigma2: 1.0, lmax: 2, seed: 1, ..Default::default() };
            let mut net = Inr::<f64>::new(icfg).unwrap();
            // give the FOD head visible negative lobes so the penalty is active
            for v in net.weights.head.w.iter_mut() {
                *v *= 100.0;
            }
            let batch = [0, 1, 2, 3];
            let (_, g) = obj.evaluate(&net, &batch, 0, 0).unwrap();
            let ga = g.arrays();
            let h = 1e-4;
            for (ai, (arr, _)) in net.weights.arrays().iter().enumerate() {
                for j in (0..arr.len()).step_by(5) {
                    let mut p = net.clone();
                    p.weights.arrays_mut()[ai][j] += h;
                    let mut m = net.clone();
                    m.weights.arrays_mut()[ai][j] -= h;
                    let fd = (obj.evaluate(&p, &batch, 0, 0).unwrap().0.loss
                        - obj.evaluate(&m, &batch, 0, 0).unwrap().0.loss)
                        / (2.0 * h);
                    let an = ga[ai].0[j];
                    assert!(
                        (fd - an).abs() <= 1e-4 * an.abs().max(1e-3),
                        "{kind:?} array {ai} idx {j}: fd {fd} an {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn rician_without_sigma_is_config_error() {
        let (vol, proto, _) = tiny_volume(LossKind::Rician);
        let cfg = TrainConfig { loss: LossKind::Rician, ..Default::default() };
        assert!(matches!(Objective::new(&vol, &proto, None, 2, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn single_voxel_overfit() {
        let proto = small_protocol();
        let truth = SmParams {
            d_i: 2.2,
            d_e: 1.6,
            d_p: 0.5,
            f_i: 0.6,
            s0: 1.0,
            fod: {
                let mut f = ShSeries::isotropic(2).unwrap();
                f.coeffs_mut()[crate::sh::sh_index(2, 0)] = 0.2;
                f.coeffs_mut()[crate::sh::sh_index(2, 1)] = 0.05;
                f
            },
        };
        let model = ForwardModel::analytic(&proto, 2).unwrap();
        let s = model.predict_vec(&truth);
        let grid = VoxelGrid::new([1, 1, 1], [1.0; 3]).unwrap();
        let vol = SignalVolume::new(grid, vec![true], proto.len(), s.clone()).unwrap();
        let icfg = InrConfig { n_p: 16, n_h: 32, seed: 2, ..Default::default() };
        let cfg = TrainConfig { epochs: 3000, batch_size: 1, learning_rate: 1e-3, ..Default::default() };
        let res = fit(&vol, &proto, None, &icfg, &cfg).unwrap();
        let p = res.inr.forward(CoordinateBox::new(&grid).voxel(0, 0, 0));
        let pred = model.predict_vec(&p);
        let err = (pred.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / s.iter().map(|v| v * v).sum::<f64>())
        .sqrt();
        assert!(err < 1e-3, "relative rmse {err}");
        assert!(res.history.iter().all(|h| h.mean_loss.is_finite()));
    }

    #[test]
    fn zero_signal_drives_s0_to_zero() {
        let proto = small_protocol();
        let grid = VoxelGrid::new([1, 1, 1], [1.0; 3]).unwrap();
        let vol = SignalVolume::new(grid, vec![true], proto.len(), vec![0.0; proto.len()]).unwrap();
        let icfg = InrConfig { n_p: 8, n_h: 16, seed: 2, ..Default::default() };
        let cfg = TrainConfig { epochs: 300, batch_size: 1, learning_rate: 1e-2, ..Default::default() };
        let res = fit(&vol, &proto, None, &icfg, &cfg).unwrap();
        let first = res.history[0].mean_loss;
        let last = res.history.last().unwrap().mean_loss;
        assert!(last < 1e-3 * first, "{first} -> {last}");
        let p = res.inr.forward(CoordinateBox::new(&grid).voxel(0, 0, 0));
        assert!(p.s0 < 0.05, "{}", p.s0);
    }

    #[test]
    fn analytic_mode_rejects_negative_b_delta() {
        let mut pts = small_protocol().points().to_vec();
        pts.push(AcquisitionPoint::new(1.0, -0.5, Direction::z()).unwrap());
        let proto = Protocol::new(pts).unwrap();
        let grid = VoxelGrid::new([1, 1, 1], [1.0; 3]).unwrap();
        let vol = SignalVolume::new(grid, vec![true], proto.len(), vec![1.0; proto.len()]).unwrap();
        let r = fit(&vol, &proto, None, &InrConfig { n_p: 4, n_h: 4, ..Default::default() }, &TrainConfig::default());
        assert!(matches!(r, Err(Error::AnalyticDomain(_))));
    }

    #[test]
    fn nan_signal_reports_voxel() {
        let proto = small_protocol();
        let grid = VoxelGrid::new([2, 1, 1], [1.0; 3]).unwrap();
        let mut s = vec![1.0; 2 * proto.len()];
        s[proto.len() + 3] = f64::NAN;
        let vol = SignalVolume::new(grid, vec![true; 2], proto.len(), s).unwrap();
        let icfg = InrConfig { n_p: 4, n_h: 4, ..Default::default() };
        let r = fit(&vol, &proto, None, &icfg, &TrainConfig { epochs: 1, ..Default::default() });
        match r {
            Err(Error::NonFiniteLoss { epoch: 0, batch: 0, voxels }) => assert_eq!(voxels, vec![1]),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
