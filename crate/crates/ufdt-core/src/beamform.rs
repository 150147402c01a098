//! Delay-and-sum beamforming of plane-wave channel data into complex
//! baseband images, coherent compounding across steering angles, and the
//! per-slice ultrafast acquisition loop.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fft;
use crate::geometry::{Pose, ProbeModel};
use crate::grid::GridSpec;
use crate::phantom::{advance, seed_scatterers, PhantomError, PhantomSpec, ScattererCloud};
use crate::rf_sim::{
    simulate_rx_windowed, PlaneWaveTx, Pulse, RfChannelData, RfSimError, RxWindow,
};

#[derive(Debug, Error, PartialEq)]
pub enum BeamformError {
    #[error("no images to compound")]
    EmptyCompound,
    #[error("compound inputs have mismatched grids")]
    GridMismatch,
    #[error("acquisition needs at least one frame and a positive frame rate")]
    BadAcquisitionSettings,
    #[error(transparent)]
    Rf(#[from] RfSimError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

/// Complex baseband image on a slice grid (axes 0 and 2 are x'/z').
#[derive(Debug, Clone, PartialEq)]
pub struct IqImage {
    pub pixels: Vec<Complex64>,
    pub grid: GridSpec,
    pub tx_angle_deg: f64,
}

impl IqImage {
    #[inline]
    pub fn at(&self, ix: usize, iz: usize) -> Complex64 {
        self.pixels[ix * self.grid.dims[2] + iz]
    }
}

/// Delay-and-sum one plane-wave emission onto the grid.
///
/// Channels are promoted to analytic signals, sampled at the transmit +
/// receive delay with linear interpolation, summed over the f-number
/// aperture (half-aperture = depth / (2 f#), rectangular apodization) and
/// mixed down by the two-way carrier phase at the pixel depth. Pixels whose
/// aperture holds no element stay zero.
pub fn das_beamform(
    rf: &RfChannelData,
    tx: &PlaneWaveTx,
    grid: &GridSpec,
    probe: &ProbeModel,
) -> IqImage {
    let analytic: Vec<Vec<Complex64>> = (0..rf.n_elements)
        .map(|e| fft::analytic_signal(rf.channel(e)))
        .collect();
    let c = rf.sound_speed_mm_us;
    let fs = rf.sample_rate_mhz;
    let f0 = probe.center_freq_mhz;
    let angle = tx.angle_deg.to_radians();
    let (sin_a, cos_a) = (angle.sin(), angle.cos());
    let [nx, _, nz] = grid.dims;
    let n_samp = rf.n_samples;
    let half_elem = 0.5 * (probe.element_count as f64 - 1.0);

    let mut pixels = vec![Complex64::default(); nx * nz];
    pixels
        .par_chunks_mut(nz)
        .enumerate()
        .for_each(|(ix, row)| {
            let x = grid.origin_mm[0] + ix as f64 * grid.spacing_mm[0];
            for (iz, out) in row.iter_mut().enumerate() {
                let z = grid.origin_mm[2] + iz as f64 * grid.spacing_mm[2];
                if z <= 0.0 {
                    continue;
                }
                let half_ap = z / (2.0 * probe.f_number);
                let e_lo = (((x - half_ap) / probe.pitch_mm) + half_elem).ceil().max(0.0) as usize;
                let e_hi_f = ((x + half_ap) / probe.pitch_mm) + half_elem;
                if e_hi_f < 0.0 {
                    continue;
                }
                let e_hi = (e_hi_f.floor() as usize).min(rf.n_elements - 1);
                if e_lo > e_hi {
                    continue;
                }
                let tau_tx = (z * cos_a + x * sin_a) / c;
                let mut acc = Complex64::default();
                for e in e_lo..=e_hi {
                    let xe = (e as f64 - half_elem) * probe.pitch_mm;
                    let tau = tau_tx + ((x - xe).hypot(z)) / c;
                    let s = (tau - rf.t0_us) * fs;
                    if s < 0.0 || s > (n_samp - 1) as f64 {
                        continue;
                    }
                    let s0 = s.floor() as usize;
                    let frac = s - s0 as f64;
                    let ch = &analytic[e];
                    let v = if frac == 0.0 {
                        ch[s0]
                    } else {
                        ch[s0] * (1.0 - frac) + ch[(s0 + 1).min(n_samp - 1)] * frac
                    };
                    acc += v;
                }
                // demodulate to baseband at the two-way carrier phase
                let phase = -2.0 * std::f64::consts::PI * f0 * (2.0 * z / c);
                *out = acc * Complex64::from_polar(1.0, phase);
            }
        });

    IqImage {
        pixels,
        grid: grid.clone(),
        tx_angle_deg: tx.angle_deg,
    }
}

/// Coherent compounding: complex mean over the steered images.
pub fn compound(images: &[IqImage]) -> Result<IqImage, BeamformError> {
    let first = images.first().ok_or(BeamformError::EmptyCompound)?;
    if images.iter().any(|im| im.grid != first.grid) {
        return Err(BeamformError::GridMismatch);
    }
    let scale = 1.0 / images.len() as f64;
    let mut pixels = vec![Complex64::default(); first.pixels.len()];
    for im in images {
        for (acc, &v) in pixels.iter_mut().zip(&im.pixels) {
            *acc += v;
        }
    }
    for v in pixels.iter_mut() {
        *v *= scale;
    }
    Ok(IqImage {
        pixels,
        grid: first.grid.clone(),
        tx_angle_deg: 0.0,
    })
}

/// Ultrafast acquisition settings for one slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSettings {
    pub n_frames: usize,
    pub frame_rate_hz: f64,
    /// RMS of white receiver noise added to every channel sample; 0 turns
    /// noise off.
    pub noise_rms: f64,
    pub noise_seed: u64,
}

impl Default for AcquisitionSettings {
    fn default() -> Self {
        Self {
            n_frames: 400,
            frame_rate_hz: 500.0,
            noise_rms: 0.0,
            noise_seed: 0,
        }
    }
}

/// Compounded frame stack for one slice pose: `n_frames` complex images on
/// the slice grid, pixels `[frame][ix * nz + iz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrameStack {
    pub frames: Vec<Complex64>,
    pub grid: GridSpec,
    pub n_frames: usize,
    pub frame_rate_hz: f64,
    pub pose: Pose,
}

impl IqFrameStack {
    pub fn nx(&self) -> usize {
        self.grid.dims[0]
    }

    pub fn nz(&self) -> usize {
        self.grid.dims[2]
    }

    pub fn frame(&self, f: usize) -> &[Complex64] {
        let n = self.nx() * self.nz();
        &self.frames[f * n..(f + 1) * n]
    }
}

/// Acquire the ultrafast Doppler stack for one slice pose: seed the phantom
/// scatterers, then for each emission advance the blood by one pulse
/// repetition interval (PRF = frame rate × compound angles), simulate,
/// beamform, and compound every full angle set into a frame.
pub fn acquire_slice(
    spec: &PhantomSpec,
    pose: &Pose,
    probe: &ProbeModel,
    pulse: &Pulse,
    grid: &GridSpec,
    settings: &AcquisitionSettings,
) -> Result<IqFrameStack, BeamformError> {
    let cloud = seed_scatterers(spec)?;
    acquire_slice_from_cloud(&cloud, pose, probe, pulse, grid, settings)
}

/// [`acquire_slice`] starting from an existing scatterer cloud.
pub fn acquire_slice_from_cloud(
    cloud: &ScattererCloud,
    pose: &Pose,
    probe: &ProbeModel,
    pulse: &Pulse,
    grid: &GridSpec,
    settings: &AcquisitionSettings,
) -> Result<IqFrameStack, BeamformError> {
    if settings.n_frames < 1 || !(settings.frame_rate_hz > 0.0) {
        return Err(BeamformError::BadAcquisitionSettings);
    }
    let angles = PlaneWaveTx::compound_set();
    let prf_dt_s = 1.0 / (settings.frame_rate_hz * angles.len() as f64);
    let window = RxWindow::for_slice_grid(grid, probe, pulse);
    let mut frames = Vec::with_capacity(settings.n_frames * grid.dims[0] * grid.dims[2]);
    let mut cloud = cloud.clone();
    for f in 0..settings.n_frames {
        let mut images = Vec::with_capacity(angles.len());
        for (a_i, tx) in angles.iter().enumerate() {
            let emission = f * angles.len() + a_i;
            if emission > 0 {
                cloud = advance(&cloud, prf_dt_s);
            }
            let mut rf = simulate_rx_windowed(&cloud, tx, probe, pulse, pose, &window)?;
            if settings.noise_rms > 0.0 {
                add_receiver_noise(&mut rf, settings.noise_rms, settings.noise_seed, emission);
            }
            images.push(das_beamform(&rf, tx, grid, probe));
        }
        let frame = compound(&images)?;
        frames.extend_from_slice(&frame.pixels);
    }

    Ok(IqFrameStack {
        frames,
        grid: grid.clone(),
        n_frames: settings.n_frames,
        frame_rate_hz: settings.frame_rate_hz,
        pose: *pose,
    })
}

/// White Gaussian noise on every channel sample, seeded per emission so the
/// stream is independent of threading and slice order.
fn add_receiver_noise(rf: &mut RfChannelData, rms: f64, seed: u64, emission: usize) {
    let mixed = seed ^ (emission as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let dist = Normal::new(0.0, rms).unwrap();
    for v in rf.samples.iter_mut() {
        *v += dist.sample(&mut rng);
    }
}
