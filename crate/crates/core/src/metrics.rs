//! Scoring and map utilities.

use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::inr::{CoordinateBox, Inr, Real};
use crate::volume::{ParamVolume, VoxelGrid};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Sample correlation coefficient.
pub fn pearson_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if a.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two samples".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    Ok((a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt())
}

/// Mean of `est − truth`.
pub fn mean_signed_error(est: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(est, truth)?;
    if est.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    Ok(est.iter().zip(truth).map(|(e, t)| e - t).sum::<f64>() / est.len() as f64)
}

fn masked<'a>(v: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = f64> + 'a {
    v.iter().zip(mask).filter(|(_, m)| **m).map(|(x, _)| *x)
}

/// Median over masked voxels of `|a − b|`.
pub fn median_abs_diff(a: &[f64], b: &[f64], mask: &[bool]) -> Result<f64> {
    check_pair(a, b)?;
    if mask.len() != a.len() {
        return Err(Error::Shape(format!("mask has {} voxels, maps {}", mask.len(), a.len())));
    }
    let mut d: Vec<f64> = masked(a, mask).zip(masked(b, mask)).map(|(x, y)| (x - y).abs()).collect();
    if d.is_empty() {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Ok(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

/// Signed `a − b`.
pub fn difference_map(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub parameter: String,
    pub rho: f64,
    pub rmse: f64,
}

/// Names of the scored maps.
pub const SCORED: [&str; 5] = ["D_i", "D_e", "D_p", "f_i", "p2"];

/// Masked maps of `D_i, D_e, D_p, f_i, p2`.
pub fn scored_maps(v: &ParamVolume, mask: &[bool]) -> Result<Vec<Vec<f64>>> {
    if mask.len() != v.grid.n_voxels() {
        return Err(Error::Shape(format!("mask has {} voxels, volume {}", mask.len(), v.grid.n_voxels())));
    }
    let mut maps: Vec<Vec<f64>> = (0..4).map(|c| masked(&v.component(c), mask).collect()).collect();
    maps.push(masked(&v.p2_map()?, mask).collect());
    Ok(maps)
}

/// ρ and RMSE per scored map over the masked voxels.
pub fn score_volume(est: &ParamVolume, gt: &ParamVolume, mask: &[bool]) -> Result<Vec<ScoreRow>> {
    if est.grid.dims != gt.grid.dims {
        return Err(Error::Shape(format!("grids {:?} and {:?}", est.grid.dims, gt.grid.dims)));
    }
    let (e, g) = (scored_maps(est, mask)?, scored_maps(gt, mask)?);
    SCORED
        .iter()
        .zip(e.iter().zip(&g))
        .map(|(name, (a, b))| Ok(ScoreRow { parameter: name.to_string(), rho: pearson_rho(a, b)?, rmse: rmse(a, b)? }))
        .collect()
}

pub fn write_score_csv<W: Write>(rows: &[ScoreRow], mut w: W) -> Result<()> {
    writeln!(w, "parameter,rho,rmse")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.parameter, r.rho, r.rmse)?;
    }
    Ok(())
}

/// Network evaluated on the lattice `factor` times finer than `grid`.
pub fn upsample<T: Real>(inr: &Inr<T>, grid: &VoxelGrid, factor: usize) -> Result<ParamVolume> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be >= 1".into()));
    }
    let (fine, pts) = CoordinateBox::new(grid).lattice(factor);
    ParamVolume::new(fine, inr.config.lmax, inr.forward_batch(&pts))
}

/// Mean absolute difference between axis neighbours that are both inside the mask.
pub fn total_variation(map: &[f64], dims: [usize; 3], mask: &[bool]) -> Result<f64> {
    let n = dims[0] * dims[1] * dims[2];
    if map.len() != n || mask.len() != n {
        return Err(Error::Shape(format!("{} values, {} mask entries for {n} voxels", map.len(), mask.len())));
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for a in 0..3 {
            if (i / strides[a]) % dims[a] + 1 < dims[a] && mask[i + strides[a]] {
                sum += (map[i + strides[a]] - map[i]).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no neighbouring voxel pairs in mask".into()));
    }
    Ok(sum / count as f64)
}

/// Trilinear interpolation of a coarse map onto the `factor`-times finer lattice, using the
/// same point placement as [`CoordinateBox::lattice`] (clamped past the last voxel centre).
pub fn trilinear_upsample(map: &[f64], dims: [usize; 3], factor: usize) -> Result<Vec<f64>> {
    if map.len() != dims[0] * dims[1] * dims[2] || factor == 0 {
        return Err(Error::Shape(format!("{} values for dims {dims:?}", map.len())));
    }
    let k = factor as f64;
    let weights = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..dims[a] * factor)
            .map(|j| {
                let q = (j as f64 / k).min((dims[a] - 1) as f64);
                let lo = q.floor() as usize;
                let hi = (lo + 1).min(dims[a] - 1);
                (lo, hi, q - lo as f64)
            })
            .collect()
    };
    let (wx, wy, wz) = (weights(0), weights(1), weights(2));
    let at = |x: usize, y: usize, z: usize| map[x + dims[0] * (y + dims[1] * z)];
    let mut out = Vec::with_capacity(wx.len() * wy.len() * wz.len());
    for &(z0, z1, tz) in &wz {
        for &(y0, y1, ty) in &wy {
            for &(x0, x1, tx) in &wx {
                let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                let c = |z| lerp(lerp(at(x0, y0, z), at(x1, y0, z), tx), lerp(at(x0, y1, z), at(x1, y1, z), tx), ty);
                out.push(lerp(c(z0), c(z1), tz));
            }
        }
    }
    Ok(out)
}

/// Fine-lattice mask: each fine point inherits the mask of the coarse voxel it starts in.
pub fn refine_mask(mask: &[bool], dims: [usize; 3], factor: usize) -> Vec<bool> {
    let f = dims.map(|d| d * factor);
    let mut out = Vec::with_capacity(f[0] * f[1] * f[2]);
    for z in 0..f[2] {
        for y in 0..f[1] {
            for x in 0..f[0] {
                out.push(mask[x / factor + dims[0] * (y / factor + dims[1] * (z / factor))]);
            }
        }
    }
    out
}

/// Axis-aligned high-frequency energy: mean squared second difference along x, y and z over
/// fine points whose two axis neighbours are also inside the mask. Piecewise-constant or
/// piecewise-linear resampling concentrates energy here at coarse voxel boundaries.
pub fn second_difference_energy(map: &[f64], dims: [usize; 3], mask: &[bool]) -> Result<f64> {
    let n = dims[0] * dims[1] * dims[2];
    if map.len() != n || mask.len() != n {
        return Err(Error::Shape(format!("{} values, {} mask entries for {n} voxels", map.len(), mask.len())));
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for a in 0..3 {
            let c = (i / strides[a]) % dims[a];
            if c == 0 || c + 1 == dims[a] {
                continue;
            }
            let (lo, hi) = (i - strides[a], i + strides[a]);
            if mask[lo] && mask[hi] {
                sum += (map[hi] - 2.0 * map[i] + map[lo]).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no interior points in mask".into()));
    }
    Ok(sum / count as f64)
}

/// Axis-aligned spectral energy above the coarse Nyquist frequency of a map upsampled by
/// `factor`. Along each axis, every run of consecutive masked points at least `2·factor` long
/// has the chord between its end points subtracted and is Fourier transformed; the power in
/// bins above `1/(2·factor)` cycles per sample is summed. Returns that power per run sample.
pub fn axis_high_frequency_energy(map: &[f64], dims: [usize; 3], mask: &[bool], factor: usize) -> Result<f64> {
    let n = dims[0] * dims[1] * dims[2];
    if map.len() != n || mask.len() != n {
        return Err(Error::Shape(format!("{} values, {} mask entries for {n} voxels", map.len(), mask.len())));
    }
    if factor == 0 {
        return Err(Error::InvalidArgument("factor must be >= 1".into()));
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut planner = FftPlanner::<f64>::new();
    let (mut power, mut samples) = (0.0, 0usize);
    let mut run: Vec<usize> = Vec::new();
    let mut flush = |run: &mut Vec<usize>, power: &mut f64, samples: &mut usize| {
        let len = run.len();
        if len >= 2 * factor {
            let (first, last) = (map[run[0]], map[run[len - 1]]);
            let mut buf: Vec<Complex<f64>> = run
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let chord = first + (last - first) * j as f64 / (len - 1) as f64;
                    Complex::new(map[i] - chord, 0.0)
                })
                .collect();
            planner.plan_fft_forward(len).process(&mut buf);
            for (j, c) in buf.iter().enumerate() {
                // |frequency| in cycles per sample is min(j, len - j) / len
                if 2 * factor * j.min(len - j) > len {
                    *power += c.norm_sqr() / len as f64;
                }
            }
            *samples += len;
        }
        run.clear();
    };
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for ic in 0..dims[c] {
            for ib in 0..dims[b] {
                for ia in 0..dims[a] {
                    let i = ia * strides[a] + ib * strides[b] + ic * strides[c];
                    if mask[i] {
                        run.push(i);
                    } else {
                        flush(&mut run, &mut power, &mut samples);
                    }
                }
                flush(&mut run, &mut power, &mut samples);
            }
        }
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("no masked runs long enough".into()));
    }
    Ok(power / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::SmParams;
    use crate::inr::InrConfig;
    use crate::volume::isotropic_params;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 4.0, 7.0];
        assert_abs_diff_eq!(pearson_rho(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(pearson_rho(&a, &neg).unwrap(), -1.0, epsilon = 1e-15);
        let aff: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert_abs_diff_eq!(pearson_rho(&a, &aff).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(pearson_rho(&a, &[1.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson_rho(&[1.0], &[2.0]).is_err());
        assert!(pearson_rho(&a, &[1.0]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt(), epsilon = 1e-15);
        let (a, b) = ([0.3, -1.0, 2.0], [1.0, 1.0, 0.0]);
        assert!(rmse(&a, &b).unwrap() >= mean_signed_error(&a, &b).unwrap().abs());
        assert!(rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn median_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let mask = [true, true, false, true];
        assert_eq!(median_abs_diff(&a, &a, &mask).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        assert_eq!(median_abs_diff(&a, &b, &mask).unwrap(), 0.5);
        assert_eq!(median_abs_diff(&[0.0, 0.0], &[1.0, 3.0], &[true, true]).unwrap(), 2.0);
        assert!(median_abs_diff(&a, &a, &[false; 4]).is_err());
    }

    fn random_volume(n: usize, seed: u64) -> ParamVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        let grid = VoxelGrid::new([n, 1, 1], [1.0; 3]).unwrap();
        let params = (0..n)
            .map(|_| {
                let mut p = isotropic_params(2, [1.5 + u.sample(&mut rng), 1.0 + u.sample(&mut rng), 0.5, 0.6, 100.0]);
                p.d_p = 0.3 + 0.5 * u.sample(&mut rng);
                p.f_i = 0.3 + 0.5 * u.sample(&mut rng);
                for c in &mut p.fod.coeffs_mut()[1..] {
                    *c = 0.2 * (u.sample(&mut rng) - 0.5);
                }
                p
            })
            .collect();
        ParamVolume::new(grid, 2, params).unwrap()
    }

    #[test]
    fn score_identity_and_noise() {
        let gt = random_volume(4000, 1);
        let mask = vec![true; 4000];
        for row in score_volume(&gt, &gt, &mask).unwrap() {
            assert_abs_diff_eq!(row.rho, 1.0, epsilon = 1e-12);
            assert_eq!(row.rmse, 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut est = gt.clone();
        for p in &mut est.params {
            p.d_i += noise.sample(&mut rng);
            p.d_e += noise.sample(&mut rng);
            p.d_p += noise.sample(&mut rng);
            p.f_i += noise.sample(&mut rng);
        }
        let rows = score_volume(&est, &gt, &mask).unwrap();
        for r in &rows[..4] {
            assert!((r.rmse - 0.01).abs() < 0.001, "{r:?}");
        }
        let mut csv = Vec::new();
        write_score_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("parameter,rho,rmse\nD_i,"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn score_is_mask_order_invariant() {
        let (a, b) = (random_volume(50, 3), random_volume(50, 4));
        let mask: Vec<bool> = (0..50).map(|i| i % 3 != 0).collect();
        let rows = score_volume(&a, &b, &mask).unwrap();
        let perm: Vec<usize> = (0..50).rev().collect();
        let shuffle = |v: &ParamVolume| {
            ParamVolume::new(v.grid, 2, perm.iter().map(|&i| v.params[i].clone()).collect::<Vec<SmParams>>()).unwrap()
        };
        let pmask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let rows2 = score_volume(&shuffle(&a), &shuffle(&b), &pmask).unwrap();
        for (r, s) in rows.iter().zip(&rows2) {
            assert_abs_diff_eq!(r.rho, s.rho, epsilon = 1e-12);
            assert_abs_diff_eq!(r.rmse, s.rmse, epsilon = 1e-12);
        }
    }

    #[test]
    fn total_variation_of_ramp() {
        let dims = [4, 3, 2];
        let map: Vec<f64> = (0..24).map(|i| (i % 4) as f64).collect();
        // x-pairs differ by 1, y and z pairs by 0
        let pairs = (3 * 3 * 2 + 4 * 2 * 2 + 4 * 3) as f64;
        let tv = total_variation(&map, dims, &[true; 24]).unwrap();
        assert_abs_diff_eq!(tv, 18.0 / pairs, epsilon = 1e-15);
        assert_eq!(total_variation(&[1.0; 24], dims, &[true; 24]).unwrap(), 0.0);
    }

    #[test]
    fn trilinear_hits_coarse_values_and_is_exact_for_affine_maps() {
        let dims = [3, 4, 2];
        let f = |x: f64, y: f64, z: f64| 0.5 + 2.0 * x - y + 3.0 * z;
        let mut map = Vec::new();
        for z in 0..2 {
            for y in 0..4 {
                for x in 0..3 {
                    map.push(f(x as f64, y as f64, z as f64));
                }
            }
        }
        let k = 4;
        let fine = trilinear_upsample(&map, dims, k).unwrap();
        let fd = dims.map(|d| d * k);
        for z in 0..fd[2] {
            for y in 0..fd[1] {
                for x in 0..fd[0] {
                    let q = |j: usize, n: usize| (j as f64 / k as f64).min((n - 1) as f64);
                    let v = fine[x + fd[0] * (y + fd[1] * z)];
                    assert_abs_diff_eq!(v, f(q(x, 3), q(y, 4), q(z, 2)), epsilon = 1e-12);
                }
            }
        }
        assert_eq!(trilinear_upsample(&map, dims, 1).unwrap(), map);
    }

    #[test]
    fn second_difference_orders_staircase_linear_and_smooth() {
        // 1-D profile sampled coarsely, resampled three ways on an 8x finer line
        let (n, k) = (16, 8);
        let g = |t: f64| (t * 0.4).sin();
        let coarse: Vec<f64> = (0..n).map(|i| g(i as f64)).collect();
        let nf = n * k;
        let stair: Vec<f64> = (0..nf).map(|j| coarse[j / k]).collect();
        let linear = trilinear_upsample(&coarse, [n, 1, 1], k).unwrap();
        let smooth: Vec<f64> = (0..nf).map(|j| g(j as f64 / k as f64)).collect();
        let mask = vec![true; nf];
        let e = |m: &[f64]| second_difference_energy(&m[..nf - k], [nf - k, 1, 1], &mask[..nf - k]).unwrap();
        assert!(e(&smooth) < e(&linear));
        assert!(e(&linear) < e(&stair));
    }

    #[test]
    fn high_frequency_energy_orders_staircase_linear_and_smooth() {
        let (n, k) = (16, 8);
        let g = |t: f64| (t * 0.4).sin() + 0.3 * (t * 0.9).cos();
        let coarse: Vec<f64> = (0..n).map(|i| g(i as f64)).collect();
        let nf = (n - 1) * k + 1;
        let stair: Vec<f64> = (0..nf).map(|j| coarse[(j + k / 2) / k]).collect();
        let linear = trilinear_upsample(&coarse, [n, 1, 1], k).unwrap()[..nf].to_vec();
        let smooth: Vec<f64> = (0..nf).map(|j| g(j as f64 / k as f64)).collect();
        let mask = vec![true; nf];
        let e = |m: &[f64]| axis_high_frequency_energy(m, [nf, 1, 1], &mask, k).unwrap();
        assert!(e(&smooth) < e(&linear), "{} {}", e(&smooth), e(&linear));
        assert!(e(&linear) < e(&stair));
        // linear ramps carry none, and a tone above the cutoff carries about A²/2
        let ramp: Vec<f64> = (0..nf).map(|j| 0.5 - 0.01 * j as f64).collect();
        assert_abs_diff_eq!(e(&ramp), 0.0, epsilon = 1e-20);
        let tone: Vec<f64> = (0..128).map(|j| (2.0 * PI * 32.0 * j as f64 / 128.0).cos()).collect();
        let t = axis_high_frequency_energy(&tone, [128, 1, 1], &vec![true; 128], k).unwrap();
        assert!((t - 0.5).abs() < 0.02, "{t}");
        // the cutoff is respected: a tone below it is ignored up to detrending leakage
        let low: Vec<f64> = (0..128).map(|j| (2.0 * PI * 2.0 * j as f64 / 128.0).sin()).collect();
        assert!(axis_high_frequency_energy(&low, [128, 1, 1], &vec![true; 128], k).unwrap() < 1e-3);
    }

    #[test]
    fn high_frequency_energy_respects_mask_runs() {
        let dims = [20, 3, 2];
        let n = 120;
        let map: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64).collect();
        let none = vec![false; n];
        assert!(axis_high_frequency_energy(&map, dims, &none, 2).is_err());
        let mut mask = vec![false; n];
        for x in 2..10 {
            mask[x] = true;
        }
        let e = axis_high_frequency_energy(&map, dims, &mask, 2).unwrap();
        let seg = map[2..10].to_vec();
        assert_abs_diff_eq!(
            e,
            axis_high_frequency_energy(&seg, [8, 1, 1], &vec![true; 8], 2).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn upsample_factor_one_matches_inference() {
        let cfg = InrConfig { n_p: 8, n_h: 16, ..InrConfig::default() };
        let inr: Inr<f64> = Inr::new(cfg).unwrap();
        let grid = VoxelGrid::new([3, 2, 2], [2.0, 2.0, 2.5]).unwrap();
        let up = upsample(&inr, &grid, 1).unwrap();
        assert_eq!(up, inr.infer_volume(&grid).unwrap());
        let fine = upsample(&inr, &grid, 2).unwrap();
        assert_eq!(fine.grid.dims, [6, 4, 4]);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    assert_eq!(fine.params[fine.grid.index(2 * x, 2 * y, 2 * z)], up.params[grid.index(x, y, z)]);
                }
            }
        }
        let m = refine_mask(&[true, false, true, true, true, true, true, true, true, true, true, true], grid.dims, 2);
        assert!(!m[2] && !m[3] && m[0] && m[4]);
    }
}
