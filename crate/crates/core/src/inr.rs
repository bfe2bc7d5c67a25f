//! Coordinate network mapping a scaled 3-D position to Standard Model parameters.
//!
//! Architecture: Fourier features `[cos 2πAx, sin 2πAx]` with a fixed Gaussian matrix `A`,
//! four ReLU layers of width `n_h`, and one linear output layer whose columns form the heads
//! (`D_i, D_e, D_p, f_i, S_0`, then the SH coefficients). Kernel heads go through a scaled
//! sigmoid, `S_0` through softplus, SH coefficients are linear.
//!
//! The network is generic over the float type: training and bulk inference run in `f32`,
//! gradient checks in `f64`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{KernelBounds, SmParams, N_KERNEL};
use crate::sh::{n_coeffs, unit_mass_p00, validate_lmax, ShSeries};
use crate::volume::{ParamVolume, VoxelGrid};

pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cst<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("unknown preset '{s}'"))),
        }
    }
}

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InrConfig {
    /// Number of Fourier encodings (rows of `A`).
    pub n_p: usize,
    /// Hidden width.
    pub n_h: usize,
    /// Variance of the entries of `A`.
    pub sigma2: f64,
    pub lmax: usize,
    /// Pin `p_00` to `1/(2√π)` instead of predicting it.
    pub fix_p00: bool,
    pub bounds: KernelBounds,
    pub seed: u64,
}

impl Default for InrConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl InrConfig {
    pub fn preset(p: Preset) -> Self {
        let (n_p, n_h, sigma2) = match p {
            Preset::Desk => (512, 256, 0.25),
            Preset::Paper => (5000, 2048, 3.5),
        };
        Self { n_p, n_h, sigma2, lmax: 2, fix_p00: true, bounds: KernelBounds::default(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        validate_lmax(self.lmax).map_err(|e| Error::Config(e.to_string()))?;
        if self.n_p == 0 || self.n_h == 0 {
            return Err(Error::Config("n_p and n_h must be positive".into()));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(Error::Config(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        for r in self.bounds.as_array() {
            if !(r.min.is_finite() && r.max.is_finite() && r.max > r.min) {
                return Err(Error::Config(format!("bad bounds {r:?}")));
            }
        }
        Ok(())
    }

    /// Number of SH outputs produced by the head.
    pub fn n_sh_out(&self) -> usize {
        n_coeffs(self.lmax) - usize::from(self.fix_p00)
    }

    /// Width of the output layer.
    pub fn n_out(&self) -> usize {
        N_KERNEL + self.n_sh_out()
    }

    /// Length of the flat parameter layout `[D_i, D_e, D_p, f_i, S_0, p_00, ...]`.
    pub fn n_params(&self) -> usize {
        N_KERNEL + n_coeffs(self.lmax)
    }
}

/// The fixed matrix `A` (`n_p × 3`), entries `N(0, σ²)`.
///
/// Entries are `σ·z` with `z` drawn from a stream that depends only on the seed, so the same
/// seed gives the same directions at every `σ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingMatrix {
    pub rows: Vec<[f64; 3]>,
    pub sigma2: f64,
}

impl EncodingMatrix {
    pub fn new(n_p: usize, sigma2: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let sd = sigma2.sqrt();
        let rows = (0..n_p)
            .map(|_| {
                let z: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
                [sd * z[0], sd * z[1], sd * z[2]]
            })
            .collect();
        Self { rows, sigma2 }
    }

    pub fn zeros(n_p: usize) -> Self {
        Self { rows: vec![[0.0; 3]; n_p], sigma2: 0.0 }
    }

    pub fn n_p(&self) -> usize {
        self.rows.len()
    }

    /// `[cos 2πAx, sin 2πAx]` for one coordinate.
    pub fn encode(&self, x: [f64; 3]) -> Vec<f64> {
        let mut out = Array2::<f64>::zeros((1, 2 * self.n_p()));
        self.encode_into(&[x], out.view_mut());
        out.into_raw_vec_and_offset().0
    }

    fn encode_into<T: Real>(&self, xs: &[[f64; 3]], mut out: ndarray::ArrayViewMut2<T>) {
        let np = self.n_p();
        let tau = 2.0 * std::f64::consts::PI;
        for (x, mut row) in xs.iter().zip(out.rows_mut()) {
            let row = row.as_slice_mut().expect("standard layout");
            let (c, s) = row.split_at_mut(np);
            for (k, a) in self.rows.iter().enumerate() {
                let z: T = cst(tau * (a[0] * x[0] + a[1] * x[1] + a[2] * x[2]));
                let (sn, cs) = z.sin_cos();
                c[k] = cs;
                s[k] = sn;
            }
        }
    }
}

/// Fully connected layer, `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Real> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { w: Array2::zeros((n_in, n_out)), b: Array1::zeros(n_out) }
    }

    fn apply(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        for mut row in y.rows_mut() {
            row.zip_mut_with(&self.b, |a, &b| *a = *a + b);
        }
        y
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense { w: self.w.mapv(|v| cst(v.to_f64().unwrap())), b: self.b.mapv(|v| cst(v.to_f64().unwrap())) }
    }
}

/// All trainable arrays: four hidden layers and the output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InrWeights<T: Real> {
    pub hidden: Vec<Dense<T>>,
    pub head: Dense<T>,
}

pub const N_HIDDEN: usize = 4;

impl<T: Real> InrWeights<T> {
    pub fn zeros(cfg: &InrConfig) -> Self {
        let mut hidden = vec![Dense::zeros(2 * cfg.n_p, cfg.n_h)];
        for _ in 1..N_HIDDEN {
            hidden.push(Dense::zeros(cfg.n_h, cfg.n_h));
        }
        Self { hidden, head: Dense::zeros(cfg.n_h, cfg.n_out()) }
    }

    /// Kaiming-uniform hidden layers with zero bias; output layer scaled by 0.01.
    pub fn init(cfg: &InrConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut w = Self::zeros(cfg);
        let mut fill = |d: &mut Dense<T>, gain: f64| {
            let bound = (6.0 / d.w.nrows() as f64).sqrt() * gain;
            d.w.mapv_inplace(|_| cst(rng.random_range(-bound..bound)));
        };
        for d in w.hidden.iter_mut() {
            fill(d, 1.0);
        }
        fill(&mut w.head, 0.01);
        w
    }

    /// Arrays in a fixed order: `(w, b)` per hidden layer, then the head.
    pub fn arrays(&self) -> Vec<(&[T], [usize; 2])> {
        let mut v = Vec::new();
        for d in self.hidden.iter().chain(std::iter::once(&self.head)) {
            v.push((d.w.as_slice().expect("standard layout"), [d.w.nrows(), d.w.ncols()]));
            v.push((d.b.as_slice().expect("standard layout"), [1, d.b.len()]));
        }
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::new();
        for d in self.hidden.iter_mut().chain(std::iter::once(&mut self.head)) {
            v.push(d.w.as_slice_mut().expect("standard layout"));
            v.push(d.b.as_slice_mut().expect("standard layout"));
        }
        v
    }

    pub fn array_names() -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..N_HIDDEN {
            v.push(format!("hidden{i}.w"));
            v.push(format!("hidden{i}.b"));
        }
        v.push("head.w".into());
        v.push("head.b".into());
        v
    }

    pub fn n_weights(&self) -> usize {
        self.arrays().iter().map(|(a, _)| a.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> InrWeights<U> {
        InrWeights { hidden: self.hidden.iter().map(Dense::cast).collect(), head: self.head.cast() }
    }
}

/// Maps voxel positions to `[-1, 1]³`, preserving the aspect ratio of the field of view.
///
/// A voxel-index position `q` (voxel centres at integers) lands at physical
/// `(q + 0.5)·voxel_size`; the box is centred and scaled by half its longest extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateBox {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
}

impl CoordinateBox {
    pub fn new(grid: &VoxelGrid) -> Self {
        Self { dims: grid.dims, voxel_size: grid.voxel_size }
    }

    fn half_extent(&self) -> f64 {
        (0..3).map(|a| self.dims[a] as f64 * self.voxel_size[a]).fold(0.0, f64::max) / 2.0
    }

    /// Scaled coordinate of a (possibly fractional) voxel-index position.
    pub fn scale(&self, q: [f64; 3]) -> [f64; 3] {
        let h = self.half_extent();
        std::array::from_fn(|a| {
            let vs = self.voxel_size[a];
            ((q[a] + 0.5) * vs - self.dims[a] as f64 * vs / 2.0) / h
        })
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.scale([x as f64, y as f64, z as f64])
    }

    /// Lattice `factor` times finer along every axis, x-fastest. Fine point `j` sits at
    /// voxel-index position `j / factor`, so every `factor`-th point is a voxel centre.
    pub fn lattice(&self, factor: usize) -> (VoxelGrid, Vec<[f64; 3]>) {
        let k = factor as f64;
        let dims = self.dims.map(|d| d * factor);
        let mut pts = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    pts.push(self.scale([x as f64 / k, y as f64 / k, z as f64 / k]));
                }
            }
        }
        let grid = VoxelGrid { dims, voxel_size: self.voxel_size.map(|v| v / k) };
        (grid, pts)
    }
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T: Real> {
    gamma: Array2<T>,
    acts: Vec<Array2<T>>,
    raw: Array2<T>,
    /// Network outputs in the flat parameter layout, one row per coordinate.
    pub params: Array2<T>,
}

/// Encoding plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Inr<T: Real> {
    pub config: InrConfig,
    pub encoding: EncodingMatrix,
    pub weights: InrWeights<T>,
}

impl<T: Real> Inr<T> {
    pub fn new(config: InrConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoding: EncodingMatrix::new(config.n_p, config.sigma2, config.seed),
            weights: InrWeights::init(&config),
            config,
        })
    }

    pub fn from_parts(config: InrConfig, encoding: EncodingMatrix, weights: InrWeights<T>) -> Result<Self> {
        config.validate()?;
        let expect = InrWeights::<T>::zeros(&config);
        let ok = encoding.n_p() == config.n_p
            && weights.hidden.len() == N_HIDDEN
            && weights.arrays().iter().zip(expect.arrays()).all(|((_, s1), (_, s2))| *s1 == s2);
        if !ok {
            return Err(Error::Config("weight shapes do not match the configuration".into()));
        }
        Ok(Self { config, encoding, weights })
    }

    pub fn cast<U: Real>(&self) -> Inr<U> {
        Inr { config: self.config.clone(), encoding: self.encoding.clone(), weights: self.weights.cast() }
    }

    /// Forward pass over a batch of scaled coordinates, keeping activations.
    pub fn forward_cache(&self, coords: &[[f64; 3]]) -> ForwardCache<T> {
        let mut gamma = Array2::<T>::zeros((coords.len(), 2 * self.config.n_p));
        self.encoding.encode_into(coords, gamma.view_mut());
        let mut acts = Vec::with_capacity(N_HIDDEN);
        for (i, layer) in self.weights.hidden.iter().enumerate() {
            let input = if i == 0 { &gamma } else { &acts[i - 1] };
            let mut h = layer.apply(input);
            h.mapv_inplace(|v| v.max(T::zero()));
            acts.push(h);
        }
        let raw = self.weights.head.apply(&acts[N_HIDDEN - 1]);
        let params = self.map_heads(&raw);
        ForwardCache { gamma, acts, raw, params }
    }

    fn map_heads(&self, raw: &Array2<T>) -> Array2<T> {
        let cfg = &self.config;
        let bounds = cfg.bounds.as_array();
        let off = usize::from(cfg.fix_p00);
        let mut p = Array2::<T>::zeros((raw.nrows(), cfg.n_params()));
        for (r, mut row) in raw.rows().into_iter().zip(p.rows_mut()) {
            for (k, b) in bounds.iter().enumerate() {
                row[k] = cst::<T>(b.min) + cst::<T>(b.width()) * sigmoid(r[k]);
            }
            row[4] = softplus(r[4]);
            if cfg.fix_p00 {
                row[N_KERNEL] = cst(unit_mass_p00());
            }
            for j in 0..cfg.n_sh_out() {
                row[N_KERNEL + off + j] = r[N_KERNEL + j];
            }
        }
        p
    }

    /// Network outputs in the flat parameter layout (`n × n_params`).
    pub fn forward_flat(&self, coords: &[[f64; 3]]) -> Array2<T> {
        self.forward_cache(coords).params
    }

    pub fn forward(&self, x: [f64; 3]) -> SmParams {
        self.forward_batch(&[x]).pop().expect("one output")
    }

    /// Order-preserving batched forward; large inputs are split into chunks evaluated in parallel.
    pub fn forward_batch(&self, coords: &[[f64; 3]]) -> Vec<SmParams> {
        let lmax = self.config.lmax;
        let flat = self.forward_flat_chunked(coords);
        flat.rows()
            .into_iter()
            .map(|r| {
                let v: Vec<f64> = r.iter().map(|x| x.to_f64().unwrap()).collect();
                SmParams::from_slice(lmax, &v).expect("consistent layout")
            })
            .collect()
    }

    pub fn forward_flat_chunked(&self, coords: &[[f64; 3]]) -> Array2<T> {
        const CHUNK: usize = 2048;
        if coords.len() <= CHUNK {
            return self.forward_flat(coords);
        }
        let parts: Vec<Array2<T>> = coords.par_chunks(CHUNK).map(|c| self.forward_flat(c)).collect();
        let views: Vec<ArrayView2<T>> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    }

    /// Reverse pass. `d_params` holds `∂L/∂(flat parameters)` per coordinate; returns
    /// `∂L/∂weights`. The encoding matrix is fixed and gets no gradient.
    pub fn backward(&self, cache: &ForwardCache<T>, d_params: &Array2<T>) -> Result<InrWeights<T>> {
        let cfg = &self.config;
        let off = usize::from(cfg.fix_p00);
        let bounds = cfg.bounds.as_array();
        let mut d_raw = Array2::<T>::zeros(cache.raw.raw_dim());
        for ((r, g), mut d) in cache.raw.rows().into_iter().zip(d_params.rows()).zip(d_raw.rows_mut()) {
            for (k, b) in bounds.iter().enumerate() {
                let s = sigmoid(r[k]);
                d[k] = g[k] * cst::<T>(b.width()) * s * (T::one() - s);
            }
            d[4] = g[4] * sigmoid(r[4]);
            for j in 0..cfg.n_sh_out() {
                d[N_KERNEL + j] = g[N_KERNEL + off + j];
            }
        }
        let mut grads = InrWeights::zeros(cfg);
        let last = &cache.acts[N_HIDDEN - 1];
        grads.head.w = last.t().dot(&d_raw);
        grads.head.b = d_raw.sum_axis(Axis(0));
        check_finite(&grads.head, "head")?;
        let mut delta = d_raw.dot(&self.weights.head.w.t());
        for i in (0..N_HIDDEN).rev() {
            // ReLU mask
            ndarray::Zip::from(&mut delta).and(&cache.acts[i]).for_each(|d, &a| {
                if a <= T::zero() {
                    *d = T::zero();
                }
            });
            let input = if i == 0 { &cache.gamma } else { &cache.acts[i - 1] };
            grads.hidden[i].w = input.t().dot(&delta);
            grads.hidden[i].b = delta.sum_axis(Axis(0));
            check_finite(&grads.hidden[i], &format!("hidden layer {i}"))?;
            if i > 0 {
                delta = delta.dot(&self.weights.hidden[i].w.t());
            }
        }
        Ok(grads)
    }

    /// Parameters at every voxel centre of `grid`.
    pub fn infer_volume(&self, grid: &VoxelGrid) -> Result<ParamVolume> {
        let bx = CoordinateBox::new(grid);
        let (_, pts) = bx.lattice(1);
        ParamVolume::new(*grid, self.config.lmax, self.forward_batch(&pts))
    }
}

fn check_finite<T: Real>(d: &Dense<T>, name: &str) -> Result<()> {
    if d.w.iter().chain(d.b.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(name.into()))
    }
}

/// FOD of a flat parameter row.
pub fn fod_from_row<T: Real>(lmax: usize, row: &[T]) -> ShSeries {
    ShSeries::new(lmax, row[N_KERNEL..].iter().map(|v| v.to_f64().unwrap()).collect()).expect("consistent layout")
}

/// Slice of kernel columns of a flat parameter array.
pub fn kernel_columns<T: Real>(flat: &Array2<T>) -> ArrayView2<'_, T> {
    flat.slice(s![.., ..N_KERNEL])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny() -> InrConfig {
        InrConfig { n_p: 8, n_h: 16, sigma2: 1.0, lmax: 2, fix_p00: true, seed: 3, ..Default::default() }
    }

    #[test]
    fn encode_examples() {
        let enc = EncodingMatrix::new(6, 3.5, 1);
        let g = enc.encode([0.0; 3]);
        assert!(g[..6].iter().all(|&v| v == 1.0));
        assert!(g[6..].iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            assert!(enc.encode(x).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let z = EncodingMatrix::zeros(4);
        assert_eq!(z.encode([0.3, -0.2, 0.9]), z.encode([-0.7, 0.1, 0.0]));
    }

    #[test]
    fn encoding_scales_with_sigma() {
        let a = EncodingMatrix::new(10, 1.0, 5);
        let b = EncodingMatrix::new(10, 4.0, 5);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            for k in 0..3 {
                assert_abs_diff_eq!(rb[k], 2.0 * ra[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_gives_midpoints() {
        let mut net = Inr::<f64>::new(tiny()).unwrap();
        net.weights.head = Dense::zeros(16, tiny().n_out());
        let p = net.forward([0.2, -0.4, 0.1]);
        assert_abs_diff_eq!(p.d_i, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.d_e, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.d_p, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p.f_i, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.s0, 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.fod.coeffs()[0], unit_mass_p00(), epsilon = 1e-15);
    }

    #[test]
    fn outputs_respect_bounds_for_large_weights() {
        let mut net = Inr::<f64>::new(tiny()).unwrap();
        for a in net.weights.arrays_mut() {
            for v in a.iter_mut() {
                *v *= 500.0;
            }
        }
        let b = KernelBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let p = net.forward(x);
            assert!(p.check_bounds(&b).is_ok(), "{p:?}");
            assert!(p.s0 >= 0.0);
        }
    }

    #[test]
    fn batch_matches_single_and_permutation() {
        let net = Inr::<f64>::new(tiny()).unwrap();
        let xs = [[0.1, 0.2, 0.3], [-0.5, 0.0, 0.9], [0.7, -0.7, -0.1]];
        let batch = net.forward_batch(&xs);
        for (x, p) in xs.iter().zip(&batch) {
            let single = net.forward(*x);
            for (a, b) in single.to_vec().iter().zip(p.to_vec()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
        }
        let perm = net.forward_batch(&[xs[2], xs[0], xs[1]]);
        assert_eq!(perm[0], batch[2]);
        assert_eq!(perm[1], batch[0]);
    }

    #[test]
    fn continuity_under_small_sigma() {
        let cfg = InrConfig { sigma2: 0.5, ..tiny() };
        let net = Inr::<f64>::new(cfg).unwrap();
        let x = [0.1, 0.2, -0.3];
        let p0 = net.forward(x).to_vec();
        let mut prev = f64::INFINITY;
        for h in [1e-1, 1e-2, 1e-3, 1e-4] {
            let p1 = net.forward([x[0] + h, x[1], x[2]]).to_vec();
            let d = p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= prev + 1e-15);
            prev = d;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn deterministic_init() {
        assert_eq!(Inr::<f32>::new(tiny()).unwrap(), Inr::<f32>::new(tiny()).unwrap());
        assert_ne!(
            Inr::<f32>::new(tiny()).unwrap().weights,
            Inr::<f32>::new(InrConfig { seed: 4, ..tiny() }).unwrap().weights
        );
    }

    #[test]
    fn s0_bias_gradient_is_sigmoid() {
        // L = Σ S_0 over the batch; ∂L/∂(S_0 bias) = Σ sigmoid(pre-activation).
        let net = Inr::<f64>::new(tiny()).unwrap();
        let xs = [[0.1, 0.2, 0.3], [-0.5, 0.0, 0.9]];
        let cache = net.forward_cache(&xs);
        let mut d = Array2::zeros(cache.params.raw_dim());
        d.column_mut(4).fill(1.0);
        let g = net.backward(&cache, &d).unwrap();
        let expect: f64 = cache.raw.column(4).iter().map(|&r| 1.0 / (1.0 + (-r).exp())).sum();
        assert_abs_diff_eq!(g.head.b[4], expect, epsilon = 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Loss = Σ_rows c·params with fixed random c.
        let net = Inr::<f64>::new(InrConfig { fix_p00: false, ..tiny() }).unwrap();
        let xs = [[0.1, 0.2, 0.3], [-0.5, 0.0, 0.9], [0.3, -0.8, 0.2]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Array2::from_shape_fn((3, net.config.n_params()), |_| rng.random_range(-1.0..1.0));
        let loss = |n: &Inr<f64>| (n.forward_flat(&xs) * &c).sum();
        let g = net.backward(&net.forward_cache(&xs), &c).unwrap();
        let ga = g.arrays();
        for (ai, (arr, _)) in net.weights.arrays().iter().enumerate() {
            for j in (0..arr.len()).step_by(7) {
                let mut p = net.clone();
                p.weights.arrays_mut()[ai][j] += 1e-5;
                let mut m = net.clone();
                m.weights.arrays_mut()[ai][j] -= 1e-5;
                let fd = (loss(&p) - loss(&m)) / 2e-5;
                let an = ga[ai].0[j];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "array {ai} idx {j}: fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn box_preserves_aspect_and_lattice_hits_centres() {
        let grid = VoxelGrid::new([4, 2, 2], [1.0, 2.0, 1.0]).unwrap();
        let bx = CoordinateBox::new(&grid);
        // extents 4, 4, 2 mm → half extent 2
        assert_eq!(bx.voxel(0, 0, 0), [-0.75, -0.5, -0.25]);
        assert_eq!(bx.voxel(3, 1, 1), [0.75, 0.5, 0.25]);
        let (fine, pts) = bx.lattice(3);
        assert_eq!(fine.dims, [12, 6, 6]);
        assert_eq!(pts[fine.index(9, 3, 3)], bx.voxel(3, 1, 1));
        let (_, same) = bx.lattice(1);
        assert_eq!(same[grid.index(2, 1, 0)], bx.voxel(2, 1, 0));
    }

    #[test]
    fn f32_and_f64_agree() {
        let n64 = Inr::<f64>::new(tiny()).unwrap();
        let n32 = n64.cast::<f32>();
        let x = [0.3, -0.1, 0.5];
        for (a, b) in n64.forward(x).to_vec().iter().zip(n32.forward(x).to_vec()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4 * (1.0 + a.abs()));
        }
    }
}
