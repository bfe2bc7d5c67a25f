//! 8-bit PGM slices with fixed per-parameter windows.

use smfit_core::forward::KERNEL_NAMES;
use smfit_core::io::{Plane, RenderConfig, VolumeFile};

use crate::commands::CliError;

/// Display window: fixed for the kernel maps and p2, data-driven otherwise (symmetric about
/// zero for signed maps).
fn window(name: &str, values: &[f64]) -> (f64, f64) {
    match name {
        "D_i" | "D_e" | "D_p" => (0.0, 4.0),
        "f_i" => (0.0, 1.0),
        "p2" => (0.0, 2.0),
        _ => {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let m = lo.abs().max(hi.abs());
            if !(m.is_finite() && m > 0.0) {
                (0.0, 1.0)
            } else if lo < 0.0 {
                (-m, m)
            } else {
                (0.0, hi)
            }
        }
    }
}

/// Values of the requested component and its display name.
fn component(vol: &VolumeFile, spec: &str) -> Result<(String, Vec<f64>), CliError> {
    let is_params = vol.header.sh_ordering.is_some();
    if spec == "p2" {
        if !is_params {
            return Err(CliError::Invalid("p2 needs a parameter volume".into()));
        }
        return Ok(("p2".into(), vol.to_params()?.p2_map()?));
    }
    let index = match KERNEL_NAMES.iter().position(|n| *n == spec) {
        Some(i) if is_params => i,
        Some(_) => return Err(CliError::Invalid(format!("{spec} needs a parameter volume"))),
        None => spec.parse::<usize>().map_err(|_| CliError::Invalid(format!("unknown component '{spec}'")))?,
    };
    let values = vol.component(index)?.iter().map(|&v| v as f64).collect();
    let name =
        if is_params && index < KERNEL_NAMES.len() { KERNEL_NAMES[index].to_string() } else { format!("c{index}") };
    Ok((name, values))
}

/// Encodes one slice; returns the file name and the PGM bytes.
pub fn render_slice(vol: &VolumeFile, cfg: &RenderConfig) -> Result<(String, Vec<u8>), CliError> {
    let (name, values) = component(vol, &cfg.component)?;
    let [nx, ny, nz] = vol.header.dims;
    // (fixed axis, image columns axis, image rows axis)
    let (fixed, cols, rows) = match cfg.plane {
        Plane::Axial => (2, 0, 1),
        Plane::Coronal => (1, 0, 2),
        Plane::Sagittal => (0, 1, 2),
    };
    let dims = [nx, ny, nz];
    let slice = cfg.slice.unwrap_or(dims[fixed] / 2);
    if slice >= dims[fixed] {
        return Err(CliError::Invalid(format!("slice {slice} out of range (0..{})", dims[fixed])));
    }
    let (lo, hi) = window(&name, &values);
    let (w, h) = (dims[cols], dims[rows]);
    let mut img = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in (0..h).rev() {
        for c in 0..w {
            let mut pos = [0; 3];
            pos[fixed] = slice;
            pos[cols] = c;
            pos[rows] = r;
            let v = values[pos[0] + nx * (pos[1] + ny * pos[2])];
            let t = if v.is_finite() { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
            img.push((255.0 * t).round() as u8);
        }
    }
    let plane = format!("{:?}", cfg.plane).to_lowercase();
    Ok((format!("{name}_{plane}_{slice}.pgm"), img))
}
