//! In-memory voxel containers shared by the fitting, simulation and scoring code.
//!
//! Voxels are linearised x-fastest: `index = x + nx·(y + ny·z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{p2_invariant, Protocol, SmParams, N_KERNEL};
use crate::sh::{n_coeffs, ShSeries};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    /// Voxel size in mm.
    pub voxel_size: [f64; 3],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("empty grid {dims:?}")));
        }
        if voxel_size.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::InvalidArgument(format!("bad voxel size {voxel_size:?}")));
        }
        Ok(Self { dims, voxel_size })
    }

    #[inline]
    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }
}

/// Measured or synthesized signals, one row of `n_meas` values per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalVolume {
    pub grid: VoxelGrid,
    pub mask: Vec<bool>,
    pub n_meas: usize,
    pub signals: Vec<f64>,
    /// Optional voxel-specific protocols (gradient non-uniformity), one per voxel.
    pub protocols: Option<Vec<Protocol>>,
}

impl SignalVolume {
    pub fn new(grid: VoxelGrid, mask: Vec<bool>, n_meas: usize, signals: Vec<f64>) -> Result<Self> {
        let v = Self { grid, mask, n_meas, signals, protocols: None };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_voxels();
        if self.mask.len() != n {
            return Err(Error::Shape(format!("mask has {} entries for {} voxels", self.mask.len(), n)));
        }
        if self.signals.len() != n * self.n_meas {
            return Err(Error::Shape(format!(
                "{} signal values for {} voxels x {} measurements",
                self.signals.len(),
                n,
                self.n_meas
            )));
        }
        if let Some(p) = &self.protocols {
            if p.len() != n || p.iter().any(|q| q.len() != self.n_meas) {
                return Err(Error::Shape("voxel protocols do not match the volume".into()));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.signals[voxel * self.n_meas..(voxel + 1) * self.n_meas]
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Protocol used at `voxel`: the override when present, else `default`.
    pub fn protocol_for<'a>(&'a self, voxel: usize, default: &'a Protocol) -> &'a Protocol {
        match &self.protocols {
            Some(p) => &p[voxel],
            None => default,
        }
    }
}

/// One [`SmParams`] per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVolume {
    pub grid: VoxelGrid,
    pub lmax: usize,
    pub params: Vec<SmParams>,
}

impl ParamVolume {
    pub fn new(grid: VoxelGrid, lmax: usize, params: Vec<SmParams>) -> Result<Self> {
        if params.len() != grid.n_voxels() {
            return Err(Error::Shape(format!("{} parameter sets for {} voxels", params.len(), grid.n_voxels())));
        }
        if params.iter().any(|p| p.lmax() != lmax) {
            return Err(Error::Shape("mixed SH orders in parameter volume".into()));
        }
        Ok(Self { grid, lmax, params })
    }

    pub fn n_components(&self) -> usize {
        N_KERNEL + n_coeffs(self.lmax)
    }

    /// Component `c` of every voxel (`0..5` kernel, then SH coefficients).
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.params.iter().map(|p| if c < N_KERNEL { p.kernel()[c] } else { p.fod.coeffs()[c - N_KERNEL] }).collect()
    }

    pub fn p2_map(&self) -> Result<Vec<f64>> {
        self.params.iter().map(|p| p2_invariant(&p.fod)).collect()
    }

    /// Voxel-major flat layout `[voxel][component]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.to_vec()).collect()
    }

    pub fn from_flat(grid: VoxelGrid, lmax: usize, data: &[f64]) -> Result<Self> {
        let nc = N_KERNEL + n_coeffs(lmax);
        if data.len() != grid.n_voxels() * nc {
            return Err(Error::Shape(format!(
                "{} values for {} voxels x {} components",
                data.len(),
                grid.n_voxels(),
                nc
            )));
        }
        let params = data.chunks_exact(nc).map(|c| SmParams::from_slice(lmax, c)).collect::<Result<_>>()?;
        Self::new(grid, lmax, params)
    }

    pub fn uniform(grid: VoxelGrid, p: SmParams) -> Self {
        Self { grid, lmax: p.lmax(), params: vec![p; grid.n_voxels()] }
    }
}

/// `lmax` implied by a component count `5 + (lmax+1)(lmax+2)/2`.
pub fn lmax_from_components(n: usize) -> Result<usize> {
    (0..=crate::sh::MAX_LMAX)
        .step_by(2)
        .find(|&l| N_KERNEL + n_coeffs(l) == n)
        .ok_or_else(|| Error::Format(format!("{n} components is not a parameter volume")))
}

/// Parameters with an isotropic unit-mass FOD.
pub fn isotropic_params(lmax: usize, kernel: [f64; 5]) -> SmParams {
    SmParams {
        d_i: kernel[0],
        d_e: kernel[1],
        d_p: kernel[2],
        f_i: kernel[3],
        s0: kernel[4],
        fod: ShSeries::isotropic(lmax).expect("valid lmax"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = VoxelGrid::new([3, 4, 5], [1.0; 3]).unwrap();
        for i in 0..g.n_voxels() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
    }

    #[test]
    fn flat_roundtrip_and_components() {
        let g = VoxelGrid::new([2, 1, 1], [1.0; 3]).unwrap();
        let pv = ParamVolume::new(
            g,
            2,
            vec![isotropic_params(2, [1.0, 2.0, 0.5, 0.3, 90.0]), isotropic_params(2, [2.0, 2.5, 0.4, 0.6, 110.0])],
        )
        .unwrap();
        assert_eq!(pv.n_components(), 11);
        assert_eq!(pv.component(0), vec![1.0, 2.0]);
        assert_eq!(pv.component(4), vec![90.0, 110.0]);
        let back = ParamVolume::from_flat(g, 2, &pv.to_flat()).unwrap();
        assert_eq!(back, pv);
        assert_eq!(lmax_from_components(50).unwrap(), 8);
        assert!(lmax_from_components(7).is_err());
        assert!(ParamVolume::from_flat(g, 2, &[0.0; 3]).is_err());
    }

    #[test]
    fn signal_volume_validation() {
        let g = VoxelGrid::new([2, 2, 1], [1.0; 3]).unwrap();
        assert!(SignalVolume::new(g, vec![true; 4], 3, vec![0.0; 12]).is_ok());
        assert!(SignalVolume::new(g, vec![true; 3], 3, vec![0.0; 12]).is_err());
        assert!(SignalVolume::new(g, vec![true; 4], 3, vec![0.0; 11]).is_err());
    }
}
