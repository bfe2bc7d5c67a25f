//! Gradient non-uniformity: per-voxel effective acquisition settings.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::forward::{AcquisitionPoint, Protocol};
use crate::sh::Direction;
use crate::volume::VoxelGrid;

/// Per-voxel deviation tensors `L`; the effective gradient is `(I + L)·g`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDeviationField {
    pub grid: VoxelGrid,
    pub tensors: Vec<Matrix3<f64>>,
}

impl GradientDeviationField {
    pub fn new(grid: VoxelGrid, tensors: Vec<Matrix3<f64>>) -> Result<Self> {
        if tensors.len() != grid.n_voxels() {
            return Err(Error::Shape(format!("{} tensors for {} voxels", tensors.len(), grid.n_voxels())));
        }
        if let Some(v) = tensors.iter().position(|l| l.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidArgument(format!("non-finite deviation tensor at voxel {v}")));
        }
        let big = tensors.iter().filter(|l| l.amax() > 0.5).count();
        if big > 0 {
            log::warn!("{big} voxel(s) have deviation entries above 0.5");
        }
        Ok(Self { grid, tensors })
    }

    pub fn zeros(grid: VoxelGrid) -> Self {
        Self { grid, tensors: vec![Matrix3::zeros(); grid.n_voxels()] }
    }

    /// Nine row-major components per voxel.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|l| l.transpose().as_slice().to_vec()).collect()
    }

    pub fn from_flat(grid: VoxelGrid, data: &[f64]) -> Result<Self> {
        if data.len() != grid.n_voxels() * 9 {
            return Err(Error::Shape(format!("{} values for {} voxels x 9", data.len(), grid.n_voxels())));
        }
        Self::new(grid, data.chunks_exact(9).map(Matrix3::from_row_slice).collect())
    }

    /// Smoothly varying field `m·(A₀ + x·A_x + y·A_y + z·A_z)` over the `[−1, 1]` box, with
    /// seeded standard-normal matrices scaled by 1/3.
    pub fn synthetic(grid: VoxelGrid, magnitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            Matrix3::from_fn(|_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v / 3.0
            })
        };
        let basis = [draw(), draw(), draw(), draw()];
        let tensors = (0..grid.n_voxels())
            .map(|v| {
                let c = grid.coords(v);
                let x: [f64; 3] = std::array::from_fn(|a| {
                    if grid.dims[a] > 1 {
                        2.0 * c[a] as f64 / (grid.dims[a] - 1) as f64 - 1.0
                    } else {
                        0.0
                    }
                });
                magnitude * (basis[0] + basis[1] * x[0] + basis[2] * x[1] + basis[3] * x[2])
            })
            .collect();
        Self { grid, tensors }
    }
}

fn b_tensor(a: &AcquisitionPoint) -> Matrix3<f64> {
    let u = Vector3::new(a.u.x(), a.u.y(), a.u.z_comp());
    let third = Matrix3::identity() / 3.0;
    a.b * (a.b_delta * (u * u.transpose() - third) + third)
}

/// Hemisphere convention: positive z, ties broken by y then x.
fn canonical(v: Vector3<f64>) -> Vector3<f64> {
    let key = if v.z != 0.0 {
        v.z
    } else if v.y != 0.0 {
        v.y
    } else {
        v.x
    };
    if key < 0.0 {
        -v
    } else {
        v
    }
}

/// Effective acquisition under deviation `l`, re-projected to the nearest axisymmetric
/// b-tensor by eigenvalue grouping.
pub fn corrected_acquisition(a: &AcquisitionPoint, l: &Matrix3<f64>) -> Result<AcquisitionPoint> {
    if l.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite deviation tensor".into()));
    }
    if a.b == 0.0 || l.iter().all(|&x| x == 0.0) {
        return Ok(*a);
    }
    let m = Matrix3::identity() + l;
    let bt = m * b_tensor(a) * m.transpose();
    let bt = 0.5 * (bt + bt.transpose());
    let b = bt.trace();
    let eig = SymmetricEigen::new(bt);
    if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).any(|x| !x.is_finite()) {
        log::warn!("non-finite eigen-decomposition; keeping the nominal acquisition");
        return Ok(*a);
    }
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (axial, rest) =
        if a.b_delta >= 0.0 { (order[2], [order[0], order[1]]) } else { (order[0], [order[1], order[2]]) };
    let par = eig.eigenvalues[axial];
    let perp = 0.5 * (eig.eigenvalues[rest[0]] + eig.eigenvalues[rest[1]]);
    let mut b_delta = (par - perp) / (par + 2.0 * perp);
    if !(-0.5 - 1e-9..=1.0 + 1e-9).contains(&b_delta) {
        log::warn!("corrected b_delta {b_delta} outside [-0.5, 1]; clamped");
    }
    b_delta = b_delta.clamp(-0.5, 1.0);
    let v = canonical(eig.eigenvectors.column(axial).into_owned());
    let u = Direction::new([v.x, v.y, v.z])?;
    AcquisitionPoint::new(b, b_delta, u)
}

/// One corrected protocol per voxel; unmasked voxels keep the nominal protocol.
pub fn corrected_volume_protocol(
    protocol: &Protocol,
    field: &GradientDeviationField,
    grid: &VoxelGrid,
    mask: &[bool],
) -> Result<Vec<Protocol>> {
    if field.grid.dims != grid.dims {
        return Err(Error::Shape(format!("deviation field {:?} vs volume {:?}", field.grid.dims, grid.dims)));
    }
    if mask.len() != grid.n_voxels() {
        return Err(Error::Shape(format!("mask has {} voxels, volume {}", mask.len(), grid.n_voxels())));
    }
    field
        .tensors
        .iter()
        .zip(mask)
        .map(|(l, &m)| {
            if !m {
                return Ok(protocol.clone());
            }
            let pts = protocol.points().iter().map(|a| corrected_acquisition(a, l)).collect::<Result<Vec<_>>>()?;
            Protocol::new(pts)
        })
        .collect()
}

/// Whether any corrected protocol needs the numeric forward path.
pub fn needs_numeric(protocols: &[Protocol]) -> bool {
    protocols.iter().any(|p| p.min_b_delta() < 0.0)
}
