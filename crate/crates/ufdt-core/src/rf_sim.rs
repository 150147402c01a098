//! Plane-wave transmit / receive channel-data simulation from point
//! scatterers.
//!
//! Each scatterer returns a delayed copy of the transmit pulse on every
//! element; the delay is the plane-wave path to the scatterer plus the
//! element receive path, both at a fixed soft-tissue sound speed. Amplitude
//! is weighted by a cosine element directivity and a Gaussian elevation
//! profile focused at the probe's elevation focus. Contributions superpose
//! linearly; there is no attenuation or multiple scattering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, ProbeModel, SOUND_SPEED_MM_PER_US};
use crate::phantom::ScattererCloud;

#[derive(Debug, Error, PartialEq)]
pub enum RfSimError {
    #[error("scatterer {index} sits behind the array (z' = {z_mm:.4} mm <= 0)")]
    ScattererBehindArray { index: usize, z_mm: f64 },
    #[error("steering angle {0} deg outside +-30 deg")]
    SteeringAngleOutOfRange(f64),
    #[error("cannot derive a record window from an empty cloud")]
    EmptyCloud,
}

/// Gaussian-enveloped sinusoidal pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub center_freq_mhz: f64,
    pub fractional_bandwidth: f64,
}

impl Pulse {
    pub fn new(center_freq_mhz: f64, fractional_bandwidth: f64) -> Self {
        Self {
            center_freq_mhz,
            fractional_bandwidth,
        }
    }

    /// Envelope time constant, µs, set so the −6 dB spectral width over the
    /// center frequency equals the fractional bandwidth.
    pub fn sigma_us(&self) -> f64 {
        (2.0 * 2.0f64.ln()).sqrt()
            / (std::f64::consts::PI * self.fractional_bandwidth * self.center_freq_mhz)
    }

    /// Pulse half-support, µs; the waveform is negligible beyond it.
    pub fn half_support_us(&self) -> f64 {
        4.5 * self.sigma_us()
    }

    #[inline]
    pub fn eval(&self, t_us: f64) -> f64 {
        let s = self.sigma_us();
        (-0.5 * (t_us / s) * (t_us / s)).exp()
            * (2.0 * std::f64::consts::PI * self.center_freq_mhz * t_us).cos()
    }
}

impl Default for Pulse {
    fn default() -> Self {
        Self::new(15.0, 0.85)
    }
}

/// One plane-wave transmission, steered `angle_deg` from the probe normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneWaveTx {
    pub angle_deg: f64,
}

impl PlaneWaveTx {
    pub fn new(angle_deg: f64) -> Result<Self, RfSimError> {
        if angle_deg.abs() > 30.0 {
            return Err(RfSimError::SteeringAngleOutOfRange(angle_deg));
        }
        Ok(Self { angle_deg })
    }

    /// The compounding sequence: −7° to 7° in 2° steps.
    pub fn compound_set() -> Vec<PlaneWaveTx> {
        (-7..=7)
            .step_by(2)
            .map(|a| PlaneWaveTx {
                angle_deg: a as f64,
            })
            .collect()
    }
}

/// Record window for the receive samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxWindow {
    pub t0_us: f64,
    pub n_samples: usize,
}

impl RxWindow {
    /// Window long enough for every pixel of a slice grid (axes 0 and 2 are
    /// x'/z') under any steering angle of the compound set.
    pub fn for_slice_grid(
        grid: &crate::grid::GridSpec,
        probe: &ProbeModel,
        pulse: &Pulse,
    ) -> Self {
        let c = SOUND_SPEED_MM_PER_US;
        let z_max = grid.origin_mm[2] + (grid.dims[2] as f64 - 1.0) * grid.spacing_mm[2];
        let x_half =
            0.5 * (grid.dims[0] as f64 - 1.0) * grid.spacing_mm[0] + 0.5 * probe.aperture_mm();
        let max_steer = 7.0f64.to_radians().sin();
        let t_max = (z_max + x_half * max_steer) / c
            + z_max.hypot(x_half) / c
            + 2.0 * pulse.half_support_us();
        let fs = 4.0 * pulse.center_freq_mhz;
        Self {
            t0_us: 0.0,
            n_samples: (t_max * fs).ceil() as usize,
        }
    }
}

/// Real channel data: element-major sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RfChannelData {
    pub samples: Vec<f64>,
    pub n_elements: usize,
    pub n_samples: usize,
    pub sample_rate_mhz: f64,
    pub t0_us: f64,
    pub sound_speed_mm_us: f64,
}

impl RfChannelData {
    #[inline]
    pub fn channel(&self, e: usize) -> &[f64] {
        &self.samples[e * self.n_samples..(e + 1) * self.n_samples]
    }
}

/// World-frame scatterers mapped into the probe frame of `pose`, one plane
/// wave in, per-element echo traces out. The record window is derived from
/// the scatterer depths.
pub fn simulate_rx(
    cloud: &ScattererCloud,
    tx: &PlaneWaveTx,
    probe: &ProbeModel,
    pulse: &Pulse,
    pose: &Pose,
) -> Result<RfChannelData, RfSimError> {
    if cloud.is_empty() {
        return Err(RfSimError::EmptyCloud);
    }
    let c = SOUND_SPEED_MM_PER_US;
    let mut z_max = 0.0f64;
    for p in &cloud.positions_mm {
        let q = pose.world_to_probe(*p);
        z_max = z_max.max(q[2]);
    }
    let half_width = 0.5 * probe.aperture_mm();
    let t_max = 2.0 * (z_max + half_width) / c + 2.0 * pulse.half_support_us();
    let window = RxWindow {
        t0_us: 0.0,
        n_samples: (t_max * 4.0 * pulse.center_freq_mhz).ceil() as usize,
    };
    simulate_rx_windowed(cloud, tx, probe, pulse, pose, &window)
}

/// [`simulate_rx`] with an explicit record window, so frame stacks share
/// identical sampling.
pub fn simulate_rx_windowed(
    cloud: &ScattererCloud,
    tx: &PlaneWaveTx,
    probe: &ProbeModel,
    pulse: &Pulse,
    pose: &Pose,
    window: &RxWindow,
) -> Result<RfChannelData, RfSimError> {
    if tx.angle_deg.abs() > 30.0 {
        return Err(RfSimError::SteeringAngleOutOfRange(tx.angle_deg));
    }
    let c = SOUND_SPEED_MM_PER_US;
    let fs = 4.0 * pulse.center_freq_mhz;
    let n_samples = window.n_samples;
    let n_elements = probe.element_count;

    // probe-frame scatterers, rejecting anything behind the array
    let mut local: Vec<([f64; 3], f64)> = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.positions_mm.iter().enumerate() {
        let q = pose.world_to_probe(*p);
        if q[2] <= 0.0 {
            return Err(RfSimError::ScattererBehindArray {
                index: i,
                z_mm: q[2],
            });
        }
        local.push((q, cloud.amplitudes[i]));
    }

    let angle = tx.angle_deg.to_radians();
    let (sin_a, cos_a) = (angle.sin(), angle.cos());
    let sigma_f = 0.5 * probe.elevation_width_mm;
    let zf = probe.elevation_focus_mm;
    let half_support = pulse.half_support_us();

    let mut samples = vec![0.0f64; n_elements * n_samples];
    samples
        .par_chunks_mut(n_samples)
        .enumerate()
        .for_each(|(e, row)| {
            let xe = probe.element_x_mm(e);
            for &(q, amp) in &local {
                if amp == 0.0 {
                    continue;
                }
                let (x, y, z) = (q[0], q[1], q[2]);
                let tau_tx = (z * cos_a + x * sin_a) / c;
                let dx = x - xe;
                let d = (dx * dx + y * y + z * z).sqrt();
                let tau = tau_tx + d / c;
                // cosine directivity and defocus-widened Gaussian elevation
                let sigma_y = sigma_f * (1.0 + ((z - zf) / zf).powi(2)).sqrt();
                let w = (z / d) * (-0.5 * (y / sigma_y) * (y / sigma_y)).exp() * amp;
                if w == 0.0 {
                    continue;
                }
                let s_lo =
                    (((tau - half_support) - window.t0_us) * fs).floor().max(0.0) as usize;
                let s_hi =
                    ((((tau + half_support) - window.t0_us) * fs).ceil() as usize).min(n_samples);
                for s in s_lo..s_hi {
                    let t = window.t0_us + s as f64 / fs;
                    row[s] += w * pulse.eval(t - tau);
                }
            }
        });

    Ok(RfChannelData {
        samples,
        n_elements,
        n_samples,
        sample_rate_mhz: fs,
        t0_us: window.t0_us,
        sound_speed_mm_us: c,
    })
}
