//! Standard Model signal equation: a stick (intra-axonal) and a zeppelin (extra-axonal)
//! kernel convolved with an SH fiber orientation distribution.
//!
//! Two integration routes are provided and cross-checked against each other:
//! the SH-domain convolution through per-order kernel responses (analytic), and direct
//! quadrature of the integrand over the sphere (numeric, also valid for `b_delta < 0`).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::{self, eval_sh_basis, n_coeffs, sh_index, Direction, ShSeries, SphereGrid, MAX_LMAX};
use crate::volume::{ParamVolume, SignalVolume};

/// One diffusion measurement setting. `b` is in ms/μm².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionPoint {
    pub b: f64,
    pub b_delta: f64,
    pub u: Direction,
}

impl AcquisitionPoint {
    pub fn new(b: f64, b_delta: f64, u: Direction) -> Result<Self> {
        if !(b.is_finite() && b >= 0.0) {
            return Err(Error::InvalidArgument(format!("b must be >= 0, got {b}")));
        }
        if !(-0.5..=1.0).contains(&b_delta) {
            return Err(Error::InvalidArgument(format!("b_delta must lie in [-0.5, 1], got {b_delta}")));
        }
        Ok(Self { b, b_delta, u })
    }

    /// Builds a point from a b-value given in s/mm².
    pub fn from_s_per_mm2(b_s_mm2: f64, b_delta: f64, u: Direction) -> Result<Self> {
        Self::new(b_s_mm2 / 1000.0, b_delta, u)
    }
}

/// Ordered list of acquisitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    points: Vec<AcquisitionPoint>,
}

pub const PROTOCOL_HEADER: &str = "b bdelta ux uy uz";

impl Protocol {
    pub fn new(points: Vec<AcquisitionPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("protocol is empty".into()));
        }
        if !points.iter().any(|p| p.b == 0.0) {
            log::warn!("protocol has no b=0 acquisition");
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[AcquisitionPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.points[i].b == 0.0).collect()
    }

    pub fn min_b_delta(&self) -> f64 {
        self.points.iter().map(|p| p.b_delta).fold(f64::INFINITY, f64::min)
    }

    /// Parses the text format: header `b bdelta ux uy uz`, then one acquisition per line with b in s/mm².
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, l)) => {
                    let l = l?;
                    if !l.trim().is_empty() {
                        break l;
                    }
                }
                None => return Err(Error::Format("protocol file is empty".into())),
            }
        };
        if header.split_whitespace().collect::<Vec<_>>() != PROTOCOL_HEADER.split_whitespace().collect::<Vec<_>>() {
            return Err(Error::Format(format!("protocol header must be '{PROTOCOL_HEADER}', got '{header}'")));
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("protocol line {}: {e}", i + 1)))?;
            if v.len() != 5 {
                return Err(Error::Format(format!("protocol line {}: expected 5 columns, got {}", i + 1, v.len())));
            }
            let u = if v[0] == 0.0 && v[2] == 0.0 && v[3] == 0.0 && v[4] == 0.0 {
                Direction::z()
            } else {
                Direction::new([v[2], v[3], v[4]])?
            };
            points.push(AcquisitionPoint::from_s_per_mm2(v[0], v[1], u)?);
        }
        Self::new(points)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{PROTOCOL_HEADER}")?;
        for p in &self.points {
            let [x, y, z] = p.u.as_array();
            writeln!(w, "{} {} {} {} {}", p.b * 1000.0, p.b_delta, x, y, z)?;
        }
        Ok(())
    }
}

/// Closed interval of allowed values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }
    pub fn width(&self) -> f64 {
        self.max - self.min
    }
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Physiological bounds of the kernel parameters (diffusivities in μm²/ms).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBounds {
    pub d_i: Range,
    pub d_e: Range,
    pub d_p: Range,
    pub f_i: Range,
}

impl Default for KernelBounds {
    fn default() -> Self {
        Self {
            d_i: Range::new(0.0, 4.0),
            d_e: Range::new(0.0, 4.0),
            d_p: Range::new(0.0, 1.5),
            f_i: Range::new(0.0, 1.0),
        }
    }
}

impl KernelBounds {
    pub fn as_array(&self) -> [Range; 4] {
        [self.d_i, self.d_e, self.d_p, self.f_i]
    }
}

/// Names of the five kernel components, in storage order.
pub const KERNEL_NAMES: [&str; 5] = ["D_i", "D_e", "D_p", "f_i", "S_0"];
/// Number of non-SH parameters.
pub const N_KERNEL: usize = 5;

/// Per-location model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmParams {
    pub d_i: f64,
    pub d_e: f64,
    pub d_p: f64,
    pub f_i: f64,
    pub s0: f64,
    pub fod: ShSeries,
}

impl SmParams {
    pub fn kernel(&self) -> [f64; N_KERNEL] {
        [self.d_i, self.d_e, self.d_p, self.f_i, self.s0]
    }

    pub fn lmax(&self) -> usize {
        self.fod.lmax()
    }

    /// Flat layout: `[D_i, D_e, D_p, f_i, S_0, p_00, p_2-2, ...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.kernel().to_vec();
        v.extend_from_slice(self.fod.coeffs());
        v
    }

    pub fn from_slice(lmax: usize, v: &[f64]) -> Result<Self> {
        if v.len() != N_KERNEL + n_coeffs(lmax) {
            return Err(Error::Shape(format!(
                "expected {} parameters for lmax {lmax}, got {}",
                N_KERNEL + n_coeffs(lmax),
                v.len()
            )));
        }
        Ok(Self {
            d_i: v[0],
            d_e: v[1],
            d_p: v[2],
            f_i: v[3],
            s0: v[4],
            fod: ShSeries::new(lmax, v[N_KERNEL..].to_vec())?,
        })
    }

    pub fn check_bounds(&self, bounds: &KernelBounds) -> Result<()> {
        let k = self.kernel();
        for (i, r) in bounds.as_array().iter().enumerate() {
            if !r.contains(k[i]) {
                return Err(Error::InvalidArgument(format!(
                    "{} = {} outside [{}, {}]",
                    KERNEL_NAMES[i], k[i], r.min, r.max
                )));
            }
        }
        if !(self.s0.is_finite() && self.s0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("S_0 = {} must be >= 0", self.s0)));
        }
        if self.fod.coeffs().iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite FOD coefficient".into()));
        }
        Ok(())
    }

    /// `D_e > D_p`.
    pub fn is_physical(&self) -> bool {
        self.d_e > self.d_p
    }
}

/// Axisymmetric tensor attenuation for `cos2 = (n·u)²`.
pub fn zeppelin_attenuation(b: f64, b_delta: f64, cos2: f64, d_par: f64, d_perp: f64) -> f64 {
    let mean_d = (d_par + 2.0 * d_perp) / 3.0;
    (-b * mean_d - b * b_delta * (cos2 - 1.0 / 3.0) * (d_par - d_perp)).exp()
}

const GL_ORDER: usize = 64;

struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `P_l(t_k)` for even l, row-major `[l/2][k]`.
    legendre: Vec<[f64; GL_ORDER]>,
}

/// Gauss–Legendre rule of order `n` mapped to `[0, 1]`, nodes by Newton iteration on `P_n`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..n {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1, 1] -> [0, 1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn gl() -> &'static GaussLegendre {
    static GL: OnceLock<GaussLegendre> = OnceLock::new();
    GL.get_or_init(|| {
        let (nodes, weights) = gauss_legendre_unit(GL_ORDER);
        let legendre = (0..=MAX_LMAX / 2)
            .map(|h| {
                let mut row = [0.0; GL_ORDER];
                for (k, t) in nodes.iter().enumerate() {
                    row[k] = sh::legendre_p(2 * h, *t);
                }
                row
            })
            .collect();
        GaussLegendre { nodes, weights, legendre }
    })
}

/// `∫₀¹ exp(-α t²) P_l(t) dt` by 64-point Gauss–Legendre quadrature.
pub fn per_order_response(l: usize, alpha: f64) -> f64 {
    let g = gl();
    g.nodes.iter().zip(&g.weights).map(|(t, w)| w * (-alpha * t * t).exp() * sh::legendre_p(l, *t)).sum()
}

/// Responses `k_l(α)` and derivatives `dk_l/dα` for every even `l <= lmax`, indexed by `l/2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct OrderResponses {
    pub k: [f64; MAX_LMAX / 2 + 1],
    pub dk: [f64; MAX_LMAX / 2 + 1],
}

pub fn order_responses(lmax: usize, alpha: f64) -> OrderResponses {
    let g = gl();
    let mut r = OrderResponses::default();
    let nh = lmax / 2 + 1;
    for k in 0..GL_ORDER {
        let t2 = g.nodes[k] * g.nodes[k];
        let e = g.weights[k] * (-alpha * t2).exp();
        for h in 0..nh {
            let v = e * g.legendre[h][k];
            r.k[h] += v;
            r.dk[h] -= v * t2;
        }
    }
    r
}

fn check_analytic_domain(p: &SmParams, a: &AcquisitionPoint) -> Result<()> {
    if a.b_delta < 0.0 {
        return Err(Error::AnalyticDomain(format!("b_delta = {} < 0", a.b_delta)));
    }
    if !p.is_physical() {
        return Err(Error::AnalyticDomain(format!("D_e = {} must exceed D_p = {}", p.d_e, p.d_p)));
    }
    Ok(())
}

/// Prefactors and convolution arguments of the two compartments.
#[derive(Clone, Copy, Debug)]
struct Compartments {
    alpha_i: f64,
    alpha_e: f64,
    e_i: f64,
    e_e: f64,
}

#[inline]
fn compartments(b: f64, bd: f64, d_i: f64, d_e: f64, d_p: f64) -> Compartments {
    let dd = d_e - d_p;
    Compartments {
        alpha_i: b * bd * d_i,
        alpha_e: b * bd * dd,
        e_i: (b * bd * d_i / 3.0 - b * d_i / 3.0).exp(),
        e_e: (b * bd * dd / 3.0 - b * (d_e + 2.0 * d_p) / 3.0).exp(),
    }
}

/// Signal via SH-domain convolution. Requires `b_delta >= 0` and `D_e > D_p`.
pub fn synth_signal_analytic(p: &SmParams, a: &AcquisitionPoint) -> Result<f64> {
    check_analytic_domain(p, a)?;
    let lmax = p.lmax();
    let c = compartments(a.b, a.b_delta, p.d_i, p.d_e, p.d_p);
    let ri = order_responses(lmax, c.alpha_i);
    let re = order_responses(lmax, c.alpha_e);
    let mut y = [0.0; n_coeffs(MAX_LMAX)];
    eval_sh_basis(lmax, &a.u, &mut y);
    let (mut ci, mut ce) = (0.0, 0.0);
    for l in (0..=lmax).step_by(2) {
        let q: f64 = (-(l as i32)..=l as i32).map(|m| p.fod.coeffs()[sh_index(l, m)] * y[sh_index(l, m)]).sum();
        ci += ri.k[l / 2] * q;
        ce += re.k[l / 2] * q;
    }
    let four_pi = 4.0 * PI;
    Ok(p.s0 * (p.f_i * c.e_i * four_pi * ci + (1.0 - p.f_i) * c.e_e * four_pi * ce))
}

/// Signal by quadrature of the convolution integrand over `grid`. Valid for any `b_delta`.
pub fn synth_signal_numeric(p: &SmParams, a: &AcquisitionPoint, grid: &SphereGrid) -> f64 {
    let c = compartments(a.b, a.b_delta, p.d_i, p.d_e, p.d_p);
    let (mut ci, mut ce) = (0.0, 0.0);
    for (n, w) in grid.dirs.iter().zip(&grid.weights) {
        let cos2 = n.dot(&a.u).powi(2);
        let fod = sh::eval_sh_series(&p.fod, n);
        ci += w * (-c.alpha_i * cos2).exp() * fod;
        ce += w * (-c.alpha_e * cos2).exp() * fod;
    }
    p.s0 * (p.f_i * c.e_i * ci + (1.0 - p.f_i) * c.e_e * ce)
}

/// Which integration route a [`ForwardModel`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationMode {
    #[default]
    Analytic,
    Numeric,
}

impl std::str::FromStr for IntegrationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "numeric" => Ok(Self::Numeric),
            _ => Err(Error::Config(format!("unknown integration mode '{s}'"))),
        }
    }
}

/// Quadrature grid with its SH basis table, shared between models.
#[derive(Debug)]
pub struct NumericGrid {
    grid: SphereGrid,
    lmax: usize,
    sh: Vec<f64>,
}

impl NumericGrid {
    pub fn new(grid: SphereGrid, lmax: usize) -> Result<Self> {
        sh::validate_lmax(lmax)?;
        let n = n_coeffs(lmax);
        let mut table = vec![0.0; grid.len() * n];
        for (d, row) in grid.dirs.iter().zip(table.chunks_exact_mut(n)) {
            eval_sh_basis(lmax, d, row);
        }
        Ok(Self { grid, lmax, sh: table })
    }

    pub fn default_for(lmax: usize) -> Result<Self> {
        Self::new(sh::default_sphere_grid(), lmax)
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }
}

#[derive(Clone, Debug)]
enum Route {
    Analytic { shells: Vec<(f64, f64)>, shell_of: Vec<usize> },
    Numeric(Arc<NumericGrid>),
}

/// A protocol prepared for repeated signal evaluation and differentiation.
///
/// The analytic route does not enforce `D_e > D_p`: the per-order responses stay accurate
/// for negative convolution arguments, which lets optimizers pass through that region.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    lmax: usize,
    points: Vec<AcquisitionPoint>,
    sh_u: Vec<f64>,
    route: Route,
}

impl ForwardModel {
    pub fn new(protocol: &Protocol, lmax: usize, mode: IntegrationMode) -> Result<Self> {
        match mode {
            IntegrationMode::Analytic => Self::analytic(protocol, lmax),
            IntegrationMode::Numeric => Self::numeric(protocol, Arc::new(NumericGrid::default_for(lmax)?)),
        }
    }

    pub fn analytic(protocol: &Protocol, lmax: usize) -> Result<Self> {
        sh::validate_lmax(lmax)?;
        convolution_self_test()?;
        if protocol.min_b_delta() < 0.0 {
            return Err(Error::AnalyticDomain(format!("protocol contains b_delta = {}", protocol.min_b_delta())));
        }
        let mut index: HashMap<(u64, u64), usize> = HashMap::new();
        let mut shells = Vec::new();
        let shell_of = protocol
            .points()
            .iter()
            .map(|p| {
                *index.entry((p.b.to_bits(), p.b_delta.to_bits())).or_insert_with(|| {
                    shells.push((p.b, p.b_delta));
                    shells.len() - 1
                })
            })
            .collect();
        Ok(Self {
            lmax,
            points: protocol.points().to_vec(),
            sh_u: Self::sh_table(protocol, lmax),
            route: Route::Analytic { shells, shell_of },
        })
    }

    pub fn numeric(protocol: &Protocol, grid: Arc<NumericGrid>) -> Result<Self> {
        let lmax = grid.lmax;
        Ok(Self {
            lmax,
            points: protocol.points().to_vec(),
            sh_u: Self::sh_table(protocol, lmax),
            route: Route::Numeric(grid),
        })
    }

    fn sh_table(protocol: &Protocol, lmax: usize) -> Vec<f64> {
        let n = n_coeffs(lmax);
        let mut t = vec![0.0; protocol.len() * n];
        for (p, row) in protocol.points().iter().zip(t.chunks_exact_mut(n)) {
            eval_sh_basis(lmax, &p.u, row);
        }
        t
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn n_measurements(&self) -> usize {
        self.points.len()
    }

    /// Length of the flat parameter vector (`5 + n_coeffs(lmax)`).
    pub fn n_params(&self) -> usize {
        N_KERNEL + n_coeffs(self.lmax)
    }

    pub fn mode(&self) -> IntegrationMode {
        match self.route {
            Route::Analytic { .. } => IntegrationMode::Analytic,
            Route::Numeric(_) => IntegrationMode::Numeric,
        }
    }

    fn check_lmax(&self, p: &SmParams) {
        assert_eq!(p.lmax(), self.lmax, "parameter lmax does not match the forward model");
    }

    /// Predicted signals for every acquisition.
    pub fn predict(&self, p: &SmParams, out: &mut [f64]) {
        self.check_lmax(p);
        self.pass(p, out, Sink::Predict);
    }

    pub fn predict_vec(&self, p: &SmParams) -> Vec<f64> {
        let mut out = vec![0.0; self.n_measurements()];
        self.predict(p, &mut out);
        out
    }

    /// Vector–Jacobian product: accumulates `Σ_i dl_ds[i]·∂S_i/∂θ` into `grad` (flat layout of
    /// [`SmParams::to_vec`]) and writes the predictions into `out`.
    pub fn predict_vjp(&self, p: &SmParams, dl_ds: &[f64], out: &mut [f64], grad: &mut [f64]) {
        self.check_lmax(p);
        assert_eq!(grad.len(), self.n_params());
        self.pass(p, out, Sink::Vjp(dl_ds, grad));
    }

    /// Full Jacobian, row-major `n_measurements × n_params`, overwriting `jac`.
    pub fn predict_jacobian(&self, p: &SmParams, out: &mut [f64], jac: &mut [f64]) {
        self.check_lmax(p);
        assert_eq!(jac.len(), self.n_measurements() * self.n_params());
        jac.fill(0.0);
        self.pass(p, out, Sink::Jacobian(jac));
    }

    fn pass(&self, p: &SmParams, out: &mut [f64], sink: Sink<'_>) {
        match &self.route {
            Route::Analytic { .. } => self.analytic_pass(p, out, sink),
            Route::Numeric(g) => self.numeric_pass(g, p, out, sink),
        }
    }

    fn analytic_pass(&self, p: &SmParams, out: &mut [f64], mut sink: Sink<'_>) {
        let Route::Analytic { shells, shell_of } = &self.route else { unreachable!() };
        let lmax = self.lmax;
        let nh = lmax / 2 + 1;
        let n = n_coeffs(lmax);
        let np = self.n_params();
        let coeffs = p.fod.coeffs();
        let four_pi = 4.0 * PI;
        let per_shell: Vec<(Compartments, OrderResponses, OrderResponses)> = shells
            .iter()
            .map(|&(b, bd)| {
                let c = compartments(b, bd, p.d_i, p.d_e, p.d_p);
                (c, order_responses(lmax, c.alpha_i), order_responses(lmax, c.alpha_e))
            })
            .collect();
        let (s0, f) = (p.s0, p.f_i);
        for (i, acq) in self.points.iter().enumerate() {
            let (c, ri, re) = &per_shell[shell_of[i]];
            let y = &self.sh_u[i * n..(i + 1) * n];
            let mut q = [0.0; MAX_LMAX / 2 + 1];
            for l in (0..=lmax).step_by(2) {
                let lo = sh_index(l, -(l as i32));
                q[l / 2] = coeffs[lo..lo + 2 * l + 1].iter().zip(&y[lo..lo + 2 * l + 1]).map(|(a, b)| a * b).sum();
            }
            let (mut ci, mut ce, mut dci, mut dce) = (0.0, 0.0, 0.0, 0.0);
            for h in 0..nh {
                ci += ri.k[h] * q[h];
                ce += re.k[h] * q[h];
                dci += ri.dk[h] * q[h];
                dce += re.dk[h] * q[h];
            }
            let (ci, ce, dci, dce) = (four_pi * ci, four_pi * ce, four_pi * dci, four_pi * dce);
            let unit = f * c.e_i * ci + (1.0 - f) * c.e_e * ce;
            out[i] = s0 * unit;
            let Some((g, grad)) = sink.target(i, np) else {
                continue;
            };
            let (b, bd) = (acq.b, acq.b_delta);
            let d_ei = c.e_i * b * (bd - 1.0) / 3.0;
            grad[0] += g * s0 * f * (d_ei * ci + c.e_i * dci * b * bd);
            let d_ee_de = c.e_e * (b * bd - b) / 3.0;
            let d_ee_dp = c.e_e * (-b * bd - 2.0 * b) / 3.0;
            grad[1] += g * s0 * (1.0 - f) * (d_ee_de * ce + c.e_e * dce * b * bd);
            grad[2] += g * s0 * (1.0 - f) * (d_ee_dp * ce - c.e_e * dce * b * bd);
            grad[3] += g * s0 * (c.e_i * ci - c.e_e * ce);
            grad[4] += g * unit;
            for l in (0..=lmax).step_by(2) {
                let w = g * s0 * four_pi * (f * c.e_i * ri.k[l / 2] + (1.0 - f) * c.e_e * re.k[l / 2]);
                let lo = sh_index(l, -(l as i32));
                for j in lo..lo + 2 * l + 1 {
                    grad[N_KERNEL + j] += w * y[j];
                }
            }
        }
    }

    fn numeric_pass(&self, g: &NumericGrid, p: &SmParams, out: &mut [f64], mut sink: Sink<'_>) {
        let n = n_coeffs(self.lmax);
        let np = self.n_params();
        let coeffs = p.fod.coeffs();
        let ng = g.grid.len();
        let fod: Vec<f64> = g.sh.chunks_exact(n).map(|row| row.iter().zip(coeffs).map(|(a, b)| a * b).sum()).collect();
        let vjp = matches!(sink, Sink::Vjp(..));
        let mut dl_dfod = vec![0.0; if vjp { ng } else { 0 }];
        let (s0, f) = (p.s0, p.f_i);
        for (i, acq) in self.points.iter().enumerate() {
            let c = compartments(acq.b, acq.b_delta, p.d_i, p.d_e, p.d_p);
            let (mut ci, mut ce, mut dci, mut dce) = (0.0, 0.0, 0.0, 0.0);
            let mut target = sink.target(i, np);
            let gi = target.as_ref().map(|t| t.0).unwrap_or(0.0);
            for k in 0..ng {
                let cos2 = g.grid.dirs[k].dot(&acq.u).powi(2);
                let w = g.grid.weights[k];
                let ei = (-c.alpha_i * cos2).exp();
                let ee = (-c.alpha_e * cos2).exp();
                ci += w * ei * fod[k];
                ce += w * ee * fod[k];
                if gi != 0.0 {
                    dci -= w * ei * cos2 * fod[k];
                    dce -= w * ee * cos2 * fod[k];
                    let h = s0 * w * (f * c.e_i * ei + (1.0 - f) * c.e_e * ee);
                    if vjp {
                        dl_dfod[k] += gi * h;
                    } else if let Some((_, row)) = target.as_mut() {
                        let y = &g.sh[k * n..(k + 1) * n];
                        for j in 0..n {
                            row[N_KERNEL + j] += h * y[j];
                        }
                    }
                }
            }
            let unit = f * c.e_i * ci + (1.0 - f) * c.e_e * ce;
            out[i] = s0 * unit;
            let Some((_, grad)) = target else {
                continue;
            };
            let (b, bd) = (acq.b, acq.b_delta);
            let d_ei = c.e_i * b * (bd - 1.0) / 3.0;
            grad[0] += gi * s0 * f * (d_ei * ci + c.e_i * dci * b * bd);
            let d_ee_de = c.e_e * (b * bd - b) / 3.0;
            let d_ee_dp = c.e_e * (-b * bd - 2.0 * b) / 3.0;
            grad[1] += gi * s0 * (1.0 - f) * (d_ee_de * ce + c.e_e * dce * b * bd);
            grad[2] += gi * s0 * (1.0 - f) * (d_ee_dp * ce - c.e_e * dce * b * bd);
            grad[3] += gi * s0 * (c.e_i * ci - c.e_e * ce);
            grad[4] += gi * unit;
        }
        if let Sink::Vjp(_, grad) = sink {
            for (k, row) in g.sh.chunks_exact(n).enumerate() {
                let d = dl_dfod[k];
                if d != 0.0 {
                    for j in 0..n {
                        grad[N_KERNEL + j] += d * row[j];
                    }
                }
            }
        }
    }
}

/// Where derivative contributions of one measurement go.
enum Sink<'a> {
    Predict,
    Vjp(&'a [f64], &'a mut [f64]),
    Jacobian(&'a mut [f64]),
}

impl Sink<'_> {
    fn target(&mut self, i: usize, np: usize) -> Option<(f64, &mut [f64])> {
        match self {
            Sink::Predict => None,
            Sink::Vjp(d, g) => (d[i] != 0.0).then(|| (d[i], &mut **g)),
            Sink::Jacobian(j) => Some((1.0, &mut j[i * np..(i + 1) * np])),
        }
    }
}

/// Compares the analytic convolution against dense numeric quadrature on fixed cases and
/// fails if the SH-convolution normalization disagrees. Runs once per process.
pub fn convolution_self_test() -> Result<()> {
    static RESULT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    RESULT
        .get_or_init(|| {
            let grid = sh::default_sphere_grid();
            let mut coeffs = vec![0.0; n_coeffs(4)];
            coeffs[0] = sh::unit_mass_p00();
            coeffs[sh_index(2, 0)] = 0.15;
            coeffs[sh_index(2, 1)] = -0.05;
            coeffs[sh_index(4, -3)] = 0.04;
            let p = SmParams {
                d_i: 2.2,
                d_e: 1.7,
                d_p: 0.6,
                f_i: 0.55,
                s0: 1.0,
                fod: ShSeries::new(4, coeffs).map_err(|e| e.to_string())?,
            };
            let u = Direction::new([0.2, 0.4, 0.9]).map_err(|e| e.to_string())?;
            for (b, bd) in [(1.0, 1.0), (3.0, 0.5), (2.0, 0.0)] {
                let a = AcquisitionPoint { b, b_delta: bd, u };
                let sa = synth_signal_analytic(&p, &a).map_err(|e| e.to_string())?;
                let sn = synth_signal_numeric(&p, &a, &grid);
                if ((sa - sn) / sn).abs() > 1e-6 {
                    return Err(format!("analytic {sa} vs numeric {sn} at b={b}, b_delta={bd}"));
                }
            }
            Ok(())
        })
        .clone()
        .map_err(|e| Error::Config(format!("forward-model self-test failed: {e}")))
}

/// `sqrt(4π/5)·||p_2·||`, a rotation-invariant measure of FOD anisotropy.
pub fn p2_invariant(s: &ShSeries) -> Result<f64> {
    if s.lmax() < 2 {
        return Err(Error::InvalidArgument("p2 needs lmax >= 2".into()));
    }
    let sum: f64 = (-2..=2).map(|m| s.get(2, m).powi(2)).sum();
    Ok((4.0 * PI / 5.0).sqrt() * sum.sqrt())
}

/// Synthesizes signals for every unmasked voxel. Masked voxels get all-zero rows.
///
/// `overrides`, when present, holds one protocol per voxel (same length and order as
/// `protocol`) and replaces `protocol` for that voxel.
pub fn synth_volume(
    field: &ParamVolume,
    mask: &[bool],
    protocol: &Protocol,
    overrides: Option<&[Protocol]>,
    mode: IntegrationMode,
) -> Result<SignalVolume> {
    let nvox = field.grid.n_voxels();
    if mask.len() != nvox {
        return Err(Error::Shape(format!("mask has {} voxels, field {}", mask.len(), nvox)));
    }
    if let Some(o) = overrides {
        if o.len() != nvox {
            return Err(Error::Shape(format!("{} voxel protocols for {} voxels", o.len(), nvox)));
        }
    }
    let lmax = field.lmax;
    let bounds = KernelBounds::default();
    let numeric_grid = match mode {
        IntegrationMode::Numeric => Some(Arc::new(NumericGrid::default_for(lmax)?)),
        IntegrationMode::Analytic => None,
    };
    let build = |proto: &Protocol| -> Result<ForwardModel> {
        match &numeric_grid {
            Some(g) => ForwardModel::numeric(proto, g.clone()),
            None => ForwardModel::analytic(proto, lmax),
        }
    };
    let shared = if overrides.is_none() { Some(build(protocol)?) } else { None };
    let nm = protocol.len();
    let rows: Vec<std::result::Result<Vec<f64>, (usize, String)>> = (0..nvox)
        .into_par_iter()
        .map(|v| {
            if !mask[v] {
                return Ok(vec![0.0; nm]);
            }
            let p = &field.params[v];
            p.check_bounds(&bounds).map_err(|e| (v, e.to_string()))?;
            if mode == IntegrationMode::Analytic && !p.is_physical() {
                return Err((v, format!("D_e = {} <= D_p = {}", p.d_e, p.d_p)));
            }
            let local;
            let model = match (&shared, overrides) {
                (Some(m), _) => m,
                (None, Some(o)) => {
                    if o[v].len() != nm {
                        return Err((v, "voxel protocol length differs".into()));
                    }
                    local = build(&o[v]).map_err(|e| (v, e.to_string()))?;
                    &local
                }
                (None, None) => unreachable!(),
            };
            Ok(model.predict_vec(p))
        })
        .collect();
    let mut failures = Vec::new();
    let mut signals = Vec::with_capacity(nvox * nm);
    for r in rows {
        match r {
            Ok(row) => signals.extend(row),
            Err(f) => {
                failures.push(f);
                signals.extend(std::iter::repeat_n(0.0, nm));
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::VoxelFailures(failures));
    }
    Ok(SignalVolume {
        grid: field.grid,
        mask: mask.to_vec(),
        n_meas: nm,
        signals,
        protocols: overrides.map(|o| o.to_vec()),
    })
}
