//! Spatiotemporal SVD clutter rejection and power Doppler.
//!
//! Each slice's frame stack is reshaped into a Casorati matrix (space ×
//! time); the strongest singular components carry the quasi-static tissue
//! echo and are subtracted, leaving blood signal whose per-pixel temporal
//! energy is the power Doppler image.

use nalgebra::{Complex, DMatrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamform::IqFrameStack;
use crate::geometry::Pose;
use crate::grid::GridSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ClutterError {
    #[error("rank cut {n_cut} out of range (must be < {max})")]
    RankOutOfRange { n_cut: usize, max: usize },
    #[error("empty singular value sequence")]
    EmptySpectrum,
}

/// Space × time reshaping of a frame stack. Row `i + j·nx` holds the time
/// series of pixel (i, j); data is row-major `(space, time)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CasoratiMatrix {
    pub data: Vec<Complex64>,
    pub n_space: usize,
    pub n_time: usize,
    pub grid: GridSpec,
    pub pose: Pose,
}

impl CasoratiMatrix {
    #[inline]
    pub fn at(&self, space: usize, time: usize) -> Complex64 {
        self.data[space * self.n_time + time]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Reshape a frame stack into its Casorati matrix. Exact and bijective:
/// pixel (i, j) of frame k lands at (i + j·nx, k).
pub fn to_casorati(stack: &IqFrameStack) -> CasoratiMatrix {
    let (nx, nz) = (stack.nx(), stack.nz());
    let n_space = nx * nz;
    let n_time = stack.n_frames;
    let mut data = vec![Complex64::default(); n_space * n_time];
    for k in 0..n_time {
        let frame = stack.frame(k);
        for i in 0..nx {
            for j in 0..nz {
                data[(i + j * nx) * n_time + k] = frame[i * nz + j];
            }
        }
    }
    CasoratiMatrix {
        data,
        n_space,
        n_time,
        grid: stack.grid.clone(),
        pose: stack.pose,
    }
}

/// Inverse of [`to_casorati`].
pub fn to_stack(m: &CasoratiMatrix, frame_rate_hz: f64) -> IqFrameStack {
    let (nx, nz) = (m.grid.dims[0], m.grid.dims[2]);
    let mut frames = vec![Complex64::default(); m.n_space * m.n_time];
    for k in 0..m.n_time {
        for i in 0..nx {
            for j in 0..nz {
                frames[k * m.n_space + i * nz + j] = m.at(i + j * nx, k);
            }
        }
    }
    IqFrameStack {
        frames,
        grid: m.grid.clone(),
        n_frames: m.n_time,
        frame_rate_hz,
        pose: m.pose,
    }
}

fn to_dmatrix(m: &CasoratiMatrix) -> DMatrix<Complex<f64>> {
    DMatrix::from_fn(m.n_space, m.n_time, |r, c| m.at(r, c))
}

/// Eigen-pairs of the Hermitian Gram matrix of the short side, sorted by
/// descending eigenvalue. Returns (eigenvalues, eigenvectors) with
/// eigenvectors as columns.
fn gram_eigen(matrix: &DMatrix<Complex<f64>>) -> (Vec<f64>, DMatrix<Complex<f64>>) {
    let gram = if matrix.ncols() <= matrix.nrows() {
        matrix.adjoint() * matrix
    } else {
        matrix * matrix.adjoint()
    };
    let eig = gram.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Remove the `n_cut` strongest singular components: returns `m` minus its
/// rank-`n_cut` truncated SVD. The decomposition runs on the Gram matrix of
/// the short side, which is exact and much faster for the tall stacks this
/// pipeline produces.
pub fn svd_filter(m: &CasoratiMatrix, n_cut: usize) -> Result<CasoratiMatrix, ClutterError> {
    let max = m.n_space.min(m.n_time);
    if n_cut >= max {
        return Err(ClutterError::RankOutOfRange { n_cut, max });
    }
    if n_cut == 0 {
        return Ok(m.clone());
    }
    let mat = to_dmatrix(m);
    let (_, vectors) = gram_eigen(&mat);
    let filtered = if mat.ncols() <= mat.nrows() {
        // right singular vectors: remove M Vk Vk^H
        let vk = vectors.columns(0, n_cut);
        let coeff = &mat * vk; // n_space × k
        &mat - coeff * vk.adjoint()
    } else {
        // left singular vectors: remove Uk Uk^H M
        let uk = vectors.columns(0, n_cut);
        let coeff = uk.adjoint() * &mat; // k × n_time
        &mat - uk * coeff
    };
    let mut out = m.clone();
    for r in 0..m.n_space {
        for c in 0..m.n_time {
            out.data[r * m.n_time + c] = filtered[(r, c)];
        }
    }
    Ok(out)
}

/// Singular values of the Casorati matrix, descending.
pub fn singular_values(m: &CasoratiMatrix) -> Vec<f64> {
    let mat = to_dmatrix(m);
    let (values, _) = gram_eigen(&mat);
    values.into_iter().map(|v| v.sqrt()).collect()
}

/// Per-pixel Doppler energy: mean |value|² over time.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSlice {
    /// Pixel layout `ix * nz + iz`, like one stack frame.
    pub energy: Vec<f64>,
    pub grid: GridSpec,
    pub pose: Pose,
}

impl PowerSlice {
    #[inline]
    pub fn at(&self, ix: usize, iz: usize) -> f64 {
        self.energy[ix * self.grid.dims[2] + iz]
    }
}

pub fn power_doppler(m: &CasoratiMatrix) -> PowerSlice {
    let (nx, nz) = (m.grid.dims[0], m.grid.dims[2]);
    let mut energy = vec![0.0; m.n_space];
    for s in 0..m.n_space {
        let row = &m.data[s * m.n_time..(s + 1) * m.n_time];
        let e: f64 = row.iter().map(|v| v.norm_sqr()).sum::<f64>() / m.n_time as f64;
        let (i, j) = (s % nx, s / nx);
        energy[i * nz + j] = e;
    }
    PowerSlice {
        energy,
        grid: m.grid.clone(),
        pose: m.pose,
    }
}

/// Smallest k whose cumulative energy (σ²) reaches 95% of the total.
/// The sequence must be sorted descending.
pub fn choose_rank(singular_values: &[f64]) -> Result<usize, ClutterError> {
    choose_rank_with_fraction(singular_values, 0.95)
}

/// [`choose_rank`] with a configurable energy fraction.
pub fn choose_rank_with_fraction(
    singular_values: &[f64],
    energy_fraction: f64,
) -> Result<usize, ClutterError> {
    if singular_values.is_empty() {
        return Err(ClutterError::EmptySpectrum);
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Ok(0);
    }
    let target = energy_fraction * total;
    let mut cum = 0.0;
    for (k, s) in singular_values.iter().enumerate() {
        cum += s * s;
        if cum >= target {
            return Ok(k + 1);
        }
    }
    Ok(singular_values.len())
}

/// How the clutter rank is picked per slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Remove a fixed number of components on every slice.
    Fixed { n_cut: usize },
    /// Adaptive per slice: the 95%-energy heuristic of [`choose_rank`],
    /// capped at `cap_fraction` of the frame count.
    Adaptive {
        energy_fraction: f64,
        cap_fraction: f64,
    },
}

impl Default for RankMode {
    fn default() -> Self {
        RankMode::Adaptive {
            energy_fraction: 0.95,
            cap_fraction: 0.25,
        }
    }
}

impl RankMode {
    /// Resolve the rank for a spectrum of `n_time` frames.
    pub fn resolve(&self, singular_values: &[f64], n_time: usize) -> Result<usize, ClutterError> {
        match *self {
            RankMode::Fixed { n_cut } => Ok(n_cut),
            RankMode::Adaptive {
                energy_fraction,
                cap_fraction,
            } => {
                let k = choose_rank_with_fraction(singular_values, energy_fraction)?;
                let cap = ((n_time as f64 * cap_fraction).floor() as usize).max(1);
                Ok(k.min(cap))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform::{acquire_slice, AcquisitionSettings};
    use crate::geometry::ProbeModel;
    use crate::phantom::{BolusParams, Ellipsoid, PhantomSpec, VesselGraph, VesselSegmentSpec};
    use crate::rf_sim::Pulse;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn slice_grid(nx: usize, nz: usize) -> GridSpec {
        GridSpec::new([0.0, 0.0, 4.0], [0.05, 0.2, 0.05], [nx, 1, nz]).unwrap()
    }

    fn stack_from_values(nx: usize, nz: usize, frames: Vec<Complex64>) -> IqFrameStack {
        let n_frames = frames.len() / (nx * nz);
        IqFrameStack {
            frames,
            grid: slice_grid(nx, nz),
            n_frames,
            frame_rate_hz: 500.0,
            pose: Pose::new(0.0, 0.0),
        }
    }

    fn random_casorati(n_space: usize, n_time: usize, seed: u64) -> CasoratiMatrix {
        // nx chosen so n_space = nx * nz factorizes; use nz = 1
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Complex64> = (0..n_space * n_time)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        CasoratiMatrix {
            data,
            n_space,
            n_time,
            grid: GridSpec::new([0.0; 3], [0.05; 3], [n_space, 1, 1]).unwrap(),
            pose: Pose::new(0.0, 0.0),
        }
    }

    #[test]
    fn casorati_reshape_is_exact_round_trip() {
        // 2x2 pixels, 3 frames
        let mut frames = Vec::new();
        for k in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    frames.push(Complex64::new(
                        (100 * k + 10 * i + j) as f64,
                        -((k + i + j) as f64),
                    ));
                }
            }
        }
        let stack = stack_from_values(2, 2, frames);
        let m = to_casorati(&stack);
        assert_eq!((m.n_space, m.n_time), (4, 3));
        // pixel (i,j) frame k at (i + j*nx, k)
        for k in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(m.at(i + j * 2, k), stack.frame(k)[i * 2 + j]);
                }
            }
        }
        let back = to_stack(&m, stack.frame_rate_hz);
        assert_eq!(back, stack);
        // Frobenius norm preserved exactly
        let f_stack: f64 = stack.frames.iter().map(|v| v.norm_sqr()).sum();
        assert_eq!(m.frobenius_sq(), f_stack);
    }

    #[test]
    fn filter_with_zero_cut_is_identity() {
        let m = random_casorati(12, 7, 1);
        let out = svd_filter(&m, 0).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn rank_one_matrix_is_annihilated_by_one_cut() {
        let n_space = 20;
        let n_time = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<Complex64> = (0..n_space)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let v: Vec<Complex64> = (0..n_time)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let mut m = random_casorati(n_space, n_time, 3);
        for r in 0..n_space {
            for c in 0..n_time {
                m.data[r * n_time + c] = u[r] * v[c];
            }
        }
        let before = m.frobenius_sq();
        let out = svd_filter(&m, 1).unwrap();
        assert!(
            out.frobenius_sq() <= 1e-20 * before,
            "residual {} of {}",
            out.frobenius_sq(),
            before
        );
    }

    #[test]
    fn residual_energy_matches_full_svd_oracle() {
        let m = random_casorati(50, 40, 7);
        let n_cut = 5;
        let filtered = svd_filter(&m, n_cut).unwrap();

        // independent oracle: nalgebra's full SVD of the same matrix
        let mat = to_dmatrix(&m);
        let svd = mat.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.as_slice().to_vec();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected_residual: f64 = sv[n_cut..].iter().map(|s| s * s).sum();
        assert_relative_eq!(
            filtered.frobenius_sq(),
            expected_residual,
            max_relative = 1e-9
        );
    }

    #[test]
    fn energy_partition_holds_for_every_cut() {
        let m = random_casorati(30, 12, 11);
        let total = m.frobenius_sq();
        for k in 0..12 {
            let filtered = svd_filter(&m, k).unwrap();
            // removed part = m - filtered
            let removed_sq: f64 = m
                .data
                .iter()
                .zip(&filtered.data)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum();
            assert_relative_eq!(
                filtered.frobenius_sq() + removed_sq,
                total,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn residual_norm_is_non_increasing_in_cut() {
        let m = random_casorati(25, 10, 13);
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let res = svd_filter(&m, k).unwrap().frobenius_sq();
            assert!(res <= prev + 1e-12 * m.frobenius_sq());
            prev = res;
        }
        assert!(matches!(
            svd_filter(&m, 10),
            Err(ClutterError::RankOutOfRange { n_cut: 10, max: 10 })
        ));
    }

    #[test]
    fn power_doppler_of_zero_matrix_is_zero() {
        let mut m = random_casorati(6, 4, 17);
        m.data.iter_mut().for_each(|v| *v = Complex64::default());
        let p = power_doppler(&m);
        assert!(p.energy.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn power_doppler_of_rotating_phasor_is_amplitude_squared() {
        let n_time = 16;
        let amp = 2.5;
        let mut m = random_casorati(4, n_time, 19);
        for s in 0..4 {
            for t in 0..n_time {
                let phase = 0.3 * t as f64 + s as f64;
                m.data[s * n_time + t] = Complex64::from_polar(amp, phase);
            }
        }
        let p = power_doppler(&m);
        for &e in &p.energy {
            assert_relative_eq!(e, amp * amp, max_relative = 1e-12);
        }
    }

    #[test]
    fn choose_rank_handles_the_reference_cases() {
        assert_eq!(choose_rank(&[1.0, 0.0, 0.0]).unwrap(), 1);
        // equal values: 95% of total first reached at ceil(0.95 * 4) = 4
        assert_eq!(choose_rank(&[3.0, 3.0, 3.0, 3.0]).unwrap(), 4);
        assert_eq!(
            choose_rank(&[]).unwrap_err(),
            ClutterError::EmptySpectrum
        );
        assert_eq!(choose_rank(&[0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn choose_rank_matches_cumulative_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut sv: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..10.0)).collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = choose_rank(&sv).unwrap();
        // independent cumulative-sum script
        let total: f64 = sv.iter().map(|s| s * s).sum();
        let mut cum = 0.0;
        let mut expected = sv.len();
        for (i, s) in sv.iter().enumerate() {
            cum += s * s;
            if cum >= 0.95 * total {
                expected = i + 1;
                break;
            }
        }
        assert_eq!(k, expected);
    }

    #[test]
    fn adaptive_rank_mode_applies_the_cap() {
        let sv = vec![3.0, 3.0, 3.0, 3.0];
        let mode = RankMode::default();
        // uncapped heuristic says 4; n_time = 4 caps it at 1
        assert_eq!(mode.resolve(&sv, 4).unwrap(), 1);
        assert_eq!(mode.resolve(&sv, 400).unwrap(), 4);
        assert_eq!(
            RankMode::Fixed { n_cut: 2 }.resolve(&sv, 4).unwrap(),
            2
        );
    }

    /// Small end-to-end anchor: static tissue 40 dB over slow blood; the
    /// adaptive filter must suppress tissue pixels to <= 1e-4 of their
    /// pre-filter energy and leave vessels at least 20 dB over background.
    #[test]
    fn static_tissue_is_suppressed_and_vessels_stand_out() {
        let tree = VesselGraph::from_specs(
            &[VesselSegmentSpec {
                centerline_mm: vec![[-0.8, 0.0, 4.3], [0.8, 0.0, 5.3]],
                diameter_mm: 0.25,
                flow_speed_mm_s: 3.0,
            }],
            vec![],
        );
        let spec = PhantomSpec {
            tumor: Ellipsoid {
                center_mm: [0.0, 0.0, 4.8],
                semi_axes_mm: [1.1, 0.5, 1.1],
            },
            tree,
            tissue_scatterer_density_per_mm3: 120.0,
            blood_scatterer_density_per_mm3: 800.0,
            tissue_to_blood_amplitude_ratio_db: 40.0,
            bolus: BolusParams::default(),
            rng_seed: 31,
        };
        let probe = ProbeModel::default();
        let pulse = Pulse::default();
        let grid = GridSpec::new([-0.6, 0.0, 4.2], [0.05, 0.2, 0.05], [25, 1, 25]).unwrap();
        let settings = AcquisitionSettings {
            n_frames: 32,
            frame_rate_hz: 500.0,
            noise_rms: 0.0,
            noise_seed: 0,
        };
        let stack = acquire_slice(
            &spec,
            &Pose::new(0.0, 0.0),
            &probe,
            &pulse,
            &grid,
            &settings,
        )
        .unwrap();
        let m = to_casorati(&stack);
        let sv = singular_values(&m);
        let n_cut = RankMode::default().resolve(&sv, m.n_time).unwrap();
        let filtered = svd_filter(&m, n_cut).unwrap();

        let before = power_doppler(&m);
        let after = power_doppler(&filtered);

        // classify pixels by distance to the vessel axis
        let mut vessel = Vec::new();
        let mut tissue = Vec::new();
        for ix in 0..25 {
            for iz in 0..25 {
                let x = grid.origin_mm[0] + ix as f64 * 0.05;
                let z = grid.origin_mm[2] + iz as f64 * 0.05;
                // distance to the segment in-plane
                let (a, b) = ([-0.8, 4.3], [0.8, 5.3]);
                let d = {
                    let vx = b[0] - a[0];
                    let vz = b[1] - a[1];
                    let t = (((x - a[0]) * vx + (z - a[1]) * vz) / (vx * vx + vz * vz))
                        .clamp(0.0, 1.0);
                    ((x - a[0] - t * vx).powi(2) + (z - a[1] - t * vz).powi(2)).sqrt()
                };
                if d < 0.08 {
                    vessel.push((ix, iz));
                } else if d > 0.3 {
                    tissue.push((ix, iz));
                }
            }
        }
        assert!(vessel.len() > 10 && tissue.len() > 100);

        let mean = |pix: &[(usize, usize)], p: &PowerSlice| {
            pix.iter().map(|&(i, j)| p.at(i, j)).sum::<f64>() / pix.len() as f64
        };
        let tissue_before = mean(&tissue, &before);
        let tissue_after = mean(&tissue, &after);
        assert!(
            tissue_after <= 1e-4 * tissue_before,
            "tissue retains {} of its energy",
            tissue_after / tissue_before
        );
        let vessel_after = mean(&vessel, &after);
        assert!(
            vessel_after / tissue_after >= 100.0,
            "vessel/background only {:.1}",
            vessel_after / tissue_after
        );
    }
}
