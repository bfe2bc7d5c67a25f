use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use smfit_core::forward::{IntegrationMode, Protocol};
use smfit_core::gradnl::{corrected_volume_protocol, needs_numeric};
use smfit_core::io::{read_checkpoint, write_checkpoint, RunConfig, VolumeFile};
use smfit_core::metrics::{score_volume, upsample as upsample_inr, write_score_csv};
use smfit_core::nlls::lm_fit_volume;
use smfit_core::phantom::{default_protocol, simulate_with};
use smfit_core::train::{fit as train_fit, write_loss_csv};
use smfit_core::volume::SignalVolume;
use thiserror::Error;

use crate::render::render_slice;
use crate::Common;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] smfit_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing input: {0}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    /// 3 for a non-finite training loss, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(smfit_core::Error::NonFiniteLoss { .. }) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Loads the configuration and applies command-line overrides.
fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(p) = c.preset {
        cfg.preset = p;
    }
    let mut inr = cfg.inr_config();
    let mut train = cfg.train_config();
    if let Some(s) = c.seed {
        cfg.phantom.seed = s;
        cfg.nlls.seed = s;
        inr.seed = s;
        train.seed = s;
    }
    if let Some(l) = c.loss {
        train.loss = l;
    }
    if let Some(l) = c.lmax {
        cfg.phantom.lmax = l;
        cfg.nlls.lmax = l;
        inr.lmax = l;
    }
    if let Some(m) = c.integration {
        cfg.nlls.integration = m;
        train.integration = m;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(g) = &c.grad_dev {
        cfg.inputs.grad_dev = Some(g.clone());
    }
    cfg.inr = Some(inr);
    cfg.train = Some(train);
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    seed: u64,
    /// SHA-256 of every output file, by file name.
    outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit_seconds: Option<f64>,
}

/// Writes outputs into the run directory and records their hashes.
struct Outputs {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf(), hashes: BTreeMap::new() })
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, data).map_err(io_err(&path))?;
        self.hashes.insert(name.to_string(), hex::encode(Sha256::digest(data)));
        Ok(())
    }

    fn volume(&mut self, name: &str, v: &VolumeFile) -> Result<()> {
        let mut buf = Vec::new();
        v.write(&mut buf)?;
        self.bytes(name, &buf)
    }

    fn finish(self, command: &'static str, seed: u64, fit_seconds: Option<f64>) -> Result<()> {
        let m = Manifest { command, seed, outputs: self.hashes, fit_seconds };
        let text = serde_json::to_string_pretty(&m).map_err(smfit_core::Error::from)?;
        let path = self.dir.join("manifest.json");
        fs::write(&path, format!("{text}\n")).map_err(io_err(&path))?;
        println!("{text}");
        Ok(())
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &'static str) -> Result<&'a Path> {
    p.as_deref().ok_or(CliError::Missing(what))
}

fn load_volume(p: &Option<PathBuf>, what: &'static str) -> Result<VolumeFile> {
    Ok(VolumeFile::load(require(p, what)?)?)
}

fn load_protocol(cfg: &RunConfig) -> Result<Protocol> {
    match &cfg.inputs.protocol {
        Some(p) => {
            let f = fs::File::open(p).map_err(io_err(p))?;
            Ok(Protocol::read(BufReader::new(f))?)
        }
        None => Ok(default_protocol()),
    }
}

/// Signals with mask and, when a deviation field is given, per-voxel protocols. Returns the
/// integration mode to use (numeric when any corrected `b_delta` is negative).
fn load_signals(
    cfg: &RunConfig,
    protocol: &Protocol,
    mode: IntegrationMode,
) -> Result<(SignalVolume, IntegrationMode)> {
    let sig = load_volume(&cfg.inputs.signals, "inputs.signals")?;
    let n = sig.n_voxels();
    let mask = match &cfg.inputs.mask {
        Some(_) => load_volume(&cfg.inputs.mask, "inputs.mask")?.to_mask()?,
        None => vec![true; n],
    };
    let mut vol = sig.to_signals(mask)?;
    if vol.n_meas != protocol.len() {
        return Err(CliError::Invalid(format!(
            "signal volume has {} measurements, protocol {}",
            vol.n_meas,
            protocol.len()
        )));
    }
    let mut mode = mode;
    if let Some(p) = &cfg.inputs.grad_dev {
        let field = VolumeFile::load(p)?.to_deviation()?;
        let protos = corrected_volume_protocol(protocol, &field, &vol.grid, &vol.mask)?;
        if needs_numeric(&protos) && mode == IntegrationMode::Analytic {
            log::warn!("corrected protocols contain negative b_delta; switching to numeric integration");
            mode = IntegrationMode::Numeric;
        }
        vol.protocols = Some(protos);
    }
    Ok((vol, mode))
}

fn protocol_text(p: &Protocol) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    p.write(&mut buf)?;
    Ok(buf)
}

pub fn simulate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let spec = &cfg.phantom;
    let protocol = default_protocol();
    let per_voxel = match &cfg.inputs.grad_dev {
        Some(p) => {
            let field = VolumeFile::load(p)?.to_deviation()?;
            let grid = spec.grid();
            Some(corrected_volume_protocol(&protocol, &field, &grid, &vec![true; grid.n_voxels()])?)
        }
        None => None,
    };
    let ph = simulate_with(spec, &protocol, per_voxel.as_deref())?;
    let grid = ph.truth.grid;
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.volume("signals.smv", &VolumeFile::from_signals(&ph.signals))?;
    out.volume("truth.smv", &VolumeFile::from_params(&ph.truth))?;
    out.volume("sigma.smv", &VolumeFile::from_scalar(&grid, &ph.sigma)?)?;
    out.volume("mask.smv", &VolumeFile::from_mask(&grid, &ph.mask)?)?;
    out.bytes("protocol.txt", &protocol_text(&ph.protocol)?)?;
    out.finish("simulate", spec.seed, None)
}

pub fn fit(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let (inr_cfg, mut train) = (cfg.inr_config(), cfg.train_config());
    let protocol = load_protocol(&cfg)?;
    let (vol, mode) = load_signals(&cfg, &protocol, train.integration)?;
    train.integration = mode;
    let sigma = match &cfg.inputs.sigma {
        Some(_) => Some(load_volume(&cfg.inputs.sigma, "inputs.sigma")?.to_scalar()?),
        None => None,
    };
    let start = Instant::now();
    let result = train_fit(&vol, &protocol, sigma.as_deref(), &inr_cfg, &train)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut out = Outputs::new(&cfg.out_dir)?;
    let mut ckpt = Vec::new();
    write_checkpoint(&mut ckpt, &result.inr, &vol.grid)?;
    out.bytes("checkpoint.smck", &ckpt)?;
    let mut csv = Vec::new();
    write_loss_csv(&result.history, &mut csv)?;
    out.bytes("loss.csv", &csv)?;
    let params = upsample_inr(&result.inr, &vol.grid, 1)?;
    out.volume("params.smv", &VolumeFile::from_params(&params))?;
    out.finish("fit", train.seed, Some(seconds))
}

pub fn nlls(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    let protocol = load_protocol(&cfg)?;
    let (vol, mode) = load_signals(&cfg, &protocol, cfg.nlls.integration)?;
    cfg.nlls.integration = mode;
    let start = Instant::now();
    let fit = lm_fit_volume(&vol, &protocol, &cfg.nlls)?;
    let seconds = start.elapsed().as_secs_f64();
    for (v, msg) in fit.flagged.iter().take(10) {
        log::warn!("voxel {v}: {msg}");
    }
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.volume("params.smv", &VolumeFile::from_params(&fit.params))?;
    out.volume("cost.smv", &VolumeFile::from_scalar(&vol.grid, &fit.cost)?)?;
    out.finish("nlls", cfg.nlls.seed, Some(seconds))
}

pub fn score(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let est = load_volume(&cfg.inputs.estimate, "inputs.estimate")?.to_params()?;
    let gt = load_volume(&cfg.inputs.truth, "inputs.truth")?.to_params()?;
    let mask = match &cfg.inputs.mask {
        Some(_) => load_volume(&cfg.inputs.mask, "inputs.mask")?.to_mask()?,
        None => vec![true; gt.grid.n_voxels()],
    };
    let rows = score_volume(&est, &gt, &mask)?;
    let mut csv = Vec::new();
    write_score_csv(&rows, &mut csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.bytes("score.csv", &csv)?;
    let path = out.dir.join("manifest.json");
    let m = Manifest { command: "score", seed: cfg.phantom.seed, outputs: out.hashes, fit_seconds: None };
    let text = serde_json::to_string_pretty(&m).map_err(smfit_core::Error::from)?;
    fs::write(&path, format!("{text}\n")).map_err(io_err(&path))?;
    Ok(())
}

pub fn upsample(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    if cfg.upsample_factor == 0 {
        return Err(CliError::Invalid("upsample_factor must be >= 1".into()));
    }
    let path = require(&cfg.inputs.checkpoint, "inputs.checkpoint")?;
    let f = fs::File::open(path).map_err(io_err(path))?;
    let (inr, grid) = read_checkpoint(BufReader::new(f))?;
    let fine = upsample_inr(&inr, &grid, cfg.upsample_factor)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.volume("upsampled.smv", &VolumeFile::from_params(&fine))?;
    out.volume("p2.smv", &VolumeFile::from_scalar(&fine.grid, &fine.p2_map()?)?)?;
    out.finish("upsample", inr.config.seed, None)
}

pub fn render(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let vol = load_volume(&cfg.inputs.volume, "inputs.volume")?;
    let (name, image) = render_slice(&vol, &cfg.render)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.bytes(&name, &image)?;
    out.finish("render", cfg.phantom.seed, None)
}
