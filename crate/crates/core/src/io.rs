//! On-disk formats: volume container, network checkpoints and run configuration.
//!
//! A volume file is one line of JSON, a newline, then `nx·ny·nz·components` little-endian
//! `f32` values. Components are the slowest axis, then z, y, x (x fastest), so component
//! `c` is a contiguous x-fastest block.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradnl::GradientDeviationField;
use crate::inr::{EncodingMatrix, Inr, InrConfig, InrWeights, Preset};
use crate::nlls::NllsConfig;
use crate::phantom::PhantomSpec;
use crate::sh::SH_ORDERING_TAG;
use crate::train::TrainConfig;
use crate::volume::{lmax_from_components, ParamVolume, SignalVolume, VoxelGrid};

pub const VOLUME_MAGIC: &str = "SMVOL1";
pub const CHECKPOINT_MAGIC: &str = "SMCKPT1";
const DTYPE: &str = "f32le";
const MAX_HEADER: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub magic: String,
    pub dims: [usize; 3],
    pub components: usize,
    /// mm
    pub voxel_size: [f64; 3],
    pub dtype: String,
    /// The single component is a 0/1 mask.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub mask: bool,
    /// Present on parameter volumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sh_ordering: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub header: VolumeHeader,
    pub data: Vec<f32>,
}

fn header_for(grid: &VoxelGrid, components: usize) -> VolumeHeader {
    VolumeHeader {
        magic: VOLUME_MAGIC.into(),
        dims: grid.dims,
        components,
        voxel_size: grid.voxel_size,
        dtype: DTYPE.into(),
        mask: false,
        sh_ordering: None,
    }
}

/// Reads a JSON header line.
fn read_header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = Vec::new();
    r.by_ref().take(MAX_HEADER as u64).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing or oversized header line".into()));
    }
    line.pop();
    String::from_utf8(line).map_err(|_| Error::Format("header is not UTF-8".into()))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("payload shorter than {} bytes", n * 4)),
        _ => Error::Io(e),
    })?;
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn expect_end<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(())
}

impl VolumeFile {
    pub fn new(header: VolumeHeader, data: Vec<f32>) -> Result<Self> {
        let f = Self { header, data };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.magic != VOLUME_MAGIC {
            return Err(Error::Format(format!("bad magic '{}'", h.magic)));
        }
        if h.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype '{}'", h.dtype)));
        }
        if h.components == 0 || h.dims.contains(&0) {
            return Err(Error::Format("empty volume".into()));
        }
        if h.mask && h.components != 1 {
            return Err(Error::Format("a mask volume has one component".into()));
        }
        if self.data.len() != self.n_voxels() * h.components {
            return Err(Error::Format(format!(
                "{} values for {:?} x {} components",
                self.data.len(),
                h.dims,
                h.components
            )));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.header.dims.iter().product()
    }

    pub fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::new(self.header.dims, self.header.voxel_size)
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let header: VolumeHeader = serde_json::from_str(&read_header_line(&mut r)?)?;
        if header.magic != VOLUME_MAGIC {
            return Err(Error::Format(format!("bad magic '{}'", header.magic)));
        }
        if header.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype '{}'", header.dtype)));
        }
        let n = header
            .dims
            .iter()
            .chain(std::iter::once(&header.components))
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::Format("volume size overflows".into()))?;
        let data = read_f32s(&mut r, n)?;
        expect_end(&mut r)?;
        Self::new(header, data)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        write_f32s(&mut w, &self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        self.write(std::io::BufWriter::new(f))
    }

    /// Values of component `c`, x-fastest.
    pub fn component(&self, c: usize) -> Result<&[f32]> {
        if c >= self.header.components {
            return Err(Error::InvalidArgument(format!(
                "component {c} out of range (volume has {})",
                self.header.components
            )));
        }
        let n = self.n_voxels();
        Ok(&self.data[c * n..(c + 1) * n])
    }

    /// Builds a volume from voxel-major rows (`rows[v]` holds every component of voxel `v`).
    fn from_rows(grid: &VoxelGrid, components: usize, rows: impl Fn(usize, usize) -> f64) -> Self {
        let n = grid.n_voxels();
        let mut data = Vec::with_capacity(n * components);
        for c in 0..components {
            data.extend((0..n).map(|v| rows(v, c) as f32));
        }
        Self { header: header_for(grid, components), data }
    }

    fn value(&self, v: usize, c: usize) -> f64 {
        self.data[c * self.n_voxels() + v] as f64
    }

    pub fn from_scalar(grid: &VoxelGrid, values: &[f64]) -> Result<Self> {
        if values.len() != grid.n_voxels() {
            return Err(Error::Shape(format!("{} values for {} voxels", values.len(), grid.n_voxels())));
        }
        Ok(Self::from_rows(grid, 1, |v, _| values[v]))
    }

    pub fn to_scalar(&self) -> Result<Vec<f64>> {
        if self.header.components != 1 {
            return Err(Error::Format(format!("expected 1 component, found {}", self.header.components)));
        }
        Ok(self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn from_mask(grid: &VoxelGrid, mask: &[bool]) -> Result<Self> {
        let values: Vec<f64> = mask.iter().map(|&m| f64::from(u8::from(m))).collect();
        let mut f = Self::from_scalar(grid, &values)?;
        f.header.mask = true;
        Ok(f)
    }

    pub fn to_mask(&self) -> Result<Vec<bool>> {
        let v = self.to_scalar()?;
        if v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(v.iter().map(|&x| x == 1.0).collect())
    }

    pub fn from_params(p: &ParamVolume) -> Self {
        let mut f = Self::from_rows(&p.grid, p.n_components(), |v, c| {
            let q = &p.params[v];
            if c < crate::forward::N_KERNEL {
                q.kernel()[c]
            } else {
                q.fod.coeffs()[c - crate::forward::N_KERNEL]
            }
        });
        f.header.sh_ordering = Some(SH_ORDERING_TAG.into());
        f
    }

    pub fn to_params(&self) -> Result<ParamVolume> {
        match &self.header.sh_ordering {
            Some(t) if t == SH_ORDERING_TAG => {}
            Some(t) => return Err(Error::Format(format!("unsupported SH ordering '{t}'"))),
            None => return Err(Error::Format("not a parameter volume (no SH ordering tag)".into())),
        }
        let nc = self.header.components;
        let lmax = lmax_from_components(nc)?;
        let n = self.n_voxels();
        let mut flat = Vec::with_capacity(n * nc);
        for v in 0..n {
            flat.extend((0..nc).map(|c| self.value(v, c)));
        }
        ParamVolume::from_flat(self.grid()?, lmax, &flat)
    }

    /// Signals only; mask and per-voxel protocols travel separately.
    pub fn from_signals(s: &SignalVolume) -> Self {
        Self::from_rows(&s.grid, s.n_meas, |v, c| s.signals[v * s.n_meas + c])
    }

    pub fn to_signals(&self, mask: Vec<bool>) -> Result<SignalVolume> {
        let (n, nm) = (self.n_voxels(), self.header.components);
        let mut sig = Vec::with_capacity(n * nm);
        for v in 0..n {
            sig.extend((0..nm).map(|c| self.value(v, c)));
        }
        SignalVolume::new(self.grid()?, mask, nm, sig)
    }

    pub fn from_deviation(f: &GradientDeviationField) -> Self {
        let flat = f.to_flat();
        Self::from_rows(&f.grid, 9, |v, c| flat[v * 9 + c])
    }

    pub fn to_deviation(&self) -> Result<GradientDeviationField> {
        if self.header.components != 9 {
            return Err(Error::Format(format!("deviation field needs 9 components, found {}", self.header.components)));
        }
        let n = self.n_voxels();
        let mut flat = Vec::with_capacity(n * 9);
        for v in 0..n {
            flat.extend((0..9).map(|c| self.value(v, c)));
        }
        GradientDeviationField::from_flat(self.grid()?, &flat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayShape {
    pub name: String,
    pub shape: [usize; 2],
}

/// Everything needed to rebuild a network; the encoding matrix is regenerated from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub magic: String,
    pub dtype: String,
    pub sh_ordering: String,
    pub config: InrConfig,
    /// Voxel grid the coordinates were scaled against.
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub arrays: Vec<ArrayShape>,
}

pub fn write_checkpoint<W: Write>(mut w: W, inr: &Inr<f32>, grid: &VoxelGrid) -> Result<()> {
    let names = InrWeights::<f32>::array_names();
    let arrays = inr.weights.arrays();
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        dtype: DTYPE.into(),
        sh_ordering: SH_ORDERING_TAG.into(),
        config: inr.config.clone(),
        dims: grid.dims,
        voxel_size: grid.voxel_size,
        arrays: names.into_iter().zip(&arrays).map(|(name, (_, shape))| ArrayShape { name, shape: *shape }).collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (a, _) in &arrays {
        write_f32s(&mut w, a)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(Inr<f32>, VoxelGrid)> {
    let header: CheckpointHeader = serde_json::from_str(&read_header_line(&mut r)?)?;
    if header.magic != CHECKPOINT_MAGIC || header.dtype != DTYPE {
        return Err(Error::Format(format!("not a checkpoint ('{}', '{}')", header.magic, header.dtype)));
    }
    if header.sh_ordering != SH_ORDERING_TAG {
        return Err(Error::Format(format!("unsupported SH ordering '{}'", header.sh_ordering)));
    }
    header.config.validate()?;
    let mut weights = InrWeights::<f32>::zeros(&header.config);
    {
        let expect = weights.arrays();
        if expect.len() != header.arrays.len() || expect.iter().zip(&header.arrays).any(|((_, s), a)| *s != a.shape) {
            return Err(Error::Format("array shapes do not match the configuration".into()));
        }
    }
    for dst in weights.arrays_mut() {
        let src = read_f32s(&mut r, dst.len())?;
        dst.copy_from_slice(&src);
    }
    expect_end(&mut r)?;
    let c = &header.config;
    let encoding = EncodingMatrix::new(c.n_p, c.sigma2, c.seed);
    let grid = VoxelGrid::new(header.dims, header.voxel_size)?;
    Ok((Inr::from_parts(header.config, encoding, weights)?, grid))
}

/// Input locations; relative paths resolve against the configuration file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub signals: Option<PathBuf>,
    pub protocol: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub sigma: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub estimate: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub grad_dev: Option<PathBuf>,
    /// Volume to render.
    pub volume: Option<PathBuf>,
}

impl Inputs {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.signals,
            &mut self.protocol,
            &mut self.mask,
            &mut self.sigma,
            &mut self.truth,
            &mut self.estimate,
            &mut self.checkpoint,
            &mut self.grad_dev,
            &mut self.volume,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Component name (`D_i`, `D_e`, `D_p`, `f_i`, `S_0`, `p2`) or index.
    pub component: String,
    pub plane: Plane,
    /// Slice index; the middle slice when absent.
    pub slice: Option<usize>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { component: "p2".into(), plane: Plane::Axial, slice: None }
    }
}

/// Options of every subcommand in one document. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub phantom: PhantomSpec,
    /// Network settings; the preset's when absent.
    pub inr: Option<InrConfig>,
    /// Training settings; the preset's when absent.
    pub train: Option<TrainConfig>,
    pub nlls: NllsConfig,
    pub inputs: Inputs,
    pub out_dir: PathBuf,
    pub upsample_factor: usize,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            phantom: PhantomSpec::default(),
            inr: None,
            train: None,
            nlls: NllsConfig::default(),
            inputs: Inputs::default(),
            out_dir: PathBuf::from("out"),
            upsample_factor: 8,
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a configuration file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.inputs.resolve(base);
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn inr_config(&self) -> InrConfig {
        self.inr.clone().unwrap_or_else(|| InrConfig::preset(self.preset))
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| TrainConfig::preset(self.preset))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::isotropic_params;

    fn grid() -> VoxelGrid {
        VoxelGrid::new([3, 2, 2], [1.5, 1.5, 2.0]).unwrap()
    }

    #[test]
    fn volume_roundtrip_is_bitwise() {
        let data: Vec<f32> = (0..24).map(|i| (i as f32).sin() * 1e-3 + f32::MIN_POSITIVE).collect();
        let mut h = header_for(&grid(), 2);
        h.sh_ordering = None;
        let f = VolumeFile::new(h, data.clone()).unwrap();
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        let back = VolumeFile::read(&buf[..]).unwrap();
        assert_eq!(back.header, f.header);
        assert!(back.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        let header_len = buf.iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(buf.len() - header_len, 24 * 4);
        assert!(String::from_utf8_lossy(&buf[..header_len]).contains("\"magic\":\"SMVOL1\""));
    }

    #[test]
    fn payload_is_component_slowest_x_fastest() {
        let g = grid();
        let p = ParamVolume::new(
            g,
            2,
            (0..12).map(|v| isotropic_params(2, [v as f64 / 10.0, 1.0, 0.5, 0.3, 100.0 + v as f64])).collect(),
        )
        .unwrap();
        let f = VolumeFile::from_params(&p);
        assert_eq!(f.header.components, 11);
        assert_eq!(f.data[1], 0.1);
        assert_eq!(f.component(4).unwrap()[2], 102.0);
        let back = f.to_params().unwrap().to_flat();
        assert!(back.iter().zip(p.to_flat()).all(|(a, b)| *a == b as f32 as f64));
        assert!(f.component(11).is_err());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let f = VolumeFile::from_scalar(&grid(), &[1.0; 12]).unwrap();
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        assert!(VolumeFile::read(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(VolumeFile::read(&extra[..]).is_err());
        let bad = String::from_utf8_lossy(&buf).replacen("SMVOL1", "SMVOL2", 1);
        assert!(VolumeFile::read(bad.as_bytes()).is_err());
        let unknown = String::from_utf8_lossy(&buf).replacen("{", "{\"extra\":1,", 1);
        assert!(VolumeFile::read(unknown.as_bytes()).is_err());
        assert!(f.to_params().is_err());
    }

    #[test]
    fn mask_and_deviation_roundtrip() {
        let m = vec![true, false, true, true, false, false, true, true, true, false, true, true];
        let f = VolumeFile::from_mask(&grid(), &m).unwrap();
        assert!(f.header.mask);
        assert_eq!(f.to_mask().unwrap(), m);
        let d = GradientDeviationField::synthetic(grid(), 0.1, 1);
        let back = VolumeFile::from_deviation(&d).to_deviation().unwrap();
        for (a, b) in back.tensors.iter().zip(&d.tensors) {
            assert!((a - b).amax() < 1e-7);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = InrConfig { n_p: 6, n_h: 8, lmax: 4, seed: 3, ..InrConfig::default() };
        let inr: Inr<f32> = Inr::new(cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &inr, &grid()).unwrap();
        let (back, g) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, inr);
        assert_eq!(g, grid());
        assert!(read_checkpoint(&buf[..buf.len() - 4]).is_err());
    }

    #[test]
    fn run_config_defaults_and_strictness() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.inr_config(), InrConfig::preset(Preset::Desk));
        let c = RunConfig::from_json(r#"{"preset": "paper", "phantom": {"snr": "inf"}}"#).unwrap();
        assert_eq!(c.train_config().batch_size, 500);
        assert!(RunConfig::from_json(r#"{"epochs": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 3, "lr": 1}}"#).is_err());
    }
}
