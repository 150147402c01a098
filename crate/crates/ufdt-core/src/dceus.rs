//! Contrast-enhanced perfusion analytics: time-of-arrival and
//! mean-of-intensity parametric maps over 3×3-pixel regions of a bolus
//! intensity movie, with non-perfused detection and spatial summaries.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fft;

#[derive(Debug, Error, PartialEq)]
pub enum DceusError {
    #[error("movie must have at least one frame and positive frame interval")]
    BadMovie,
    #[error("noise standard deviation must be positive")]
    BadNoiseSd,
    #[error("low-pass cutoff {cutoff_hz} Hz at or above Nyquist {nyquist_hz} Hz")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("no perfused regions")]
    AllNonPerfused,
}

/// Nonnegative intensity frames over time, pixels `[frame][ix * ny + iy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMovie {
    pub frames: Vec<f64>,
    pub nx: usize,
    pub ny: usize,
    pub n_frames: usize,
    pub frame_interval_s: f64,
}

impl IntensityMovie {
    pub fn new(
        frames: Vec<f64>,
        nx: usize,
        ny: usize,
        frame_interval_s: f64,
    ) -> Result<Self, DceusError> {
        if nx == 0 || ny == 0 || frame_interval_s <= 0.0 || frames.is_empty() {
            return Err(DceusError::BadMovie);
        }
        if frames.len() % (nx * ny) != 0 {
            return Err(DceusError::BadMovie);
        }
        let n_frames = frames.len() / (nx * ny);
        Ok(Self {
            frames,
            nx,
            ny,
            n_frames,
            frame_interval_s,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 * self.frame_interval_s
    }

    #[inline]
    pub fn at(&self, frame: usize, ix: usize, iy: usize) -> f64 {
        self.frames[frame * self.nx * self.ny + ix * self.ny + iy]
    }
}

/// Which parameter a map holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Time of arrival, seconds.
    Toa,
    /// Mean of intensity, arbitrary units.
    Moi,
}

/// Parameter values over the 3×3-pixel region lattice. Non-perfused regions
/// carry no value (NaN) and are excluded from summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    pub values: Vec<f64>,
    pub nonperfused: Vec<bool>,
    pub nx_regions: usize,
    pub ny_regions: usize,
    pub kind: ParamKind,
}

impl ParamMap {
    #[inline]
    pub fn at(&self, rx: usize, ry: usize) -> f64 {
        self.values[rx * self.ny_regions + ry]
    }

    /// Copy the non-perfused flags from another map over the same lattice
    /// (MoI maps take their perfusion classification from the TOA pass).
    pub fn adopt_nonperfused(&mut self, other: &ParamMap) {
        assert_eq!(
            (self.nx_regions, self.ny_regions),
            (other.nx_regions, other.ny_regions)
        );
        for (idx, &flag) in other.nonperfused.iter().enumerate() {
            if flag {
                self.nonperfused[idx] = true;
                self.values[idx] = f64::NAN;
            }
        }
    }
}

/// Region size of the parametric maps, pixels per side.
pub const REGION_PX: usize = 3;

/// Mean intensity trace of one 3×3 region.
fn region_trace(movie: &IntensityMovie, rx: usize, ry: usize) -> Vec<f64> {
    let mut trace = Vec::with_capacity(movie.n_frames);
    for f in 0..movie.n_frames {
        let mut acc = 0.0;
        for dx in 0..REGION_PX {
            for dy in 0..REGION_PX {
                acc += movie.at(f, rx * REGION_PX + dx, ry * REGION_PX + dy);
            }
        }
        trace.push(acc / (REGION_PX * REGION_PX) as f64);
    }
    trace
}

/// Time-of-arrival map: per region, the first sample time at which the mean
/// intensity reaches 90% of its maximum. A region whose peak intensity
/// stays below 3× the noise standard deviation is flagged non-perfused and
/// carries no value. Trailing pixels that do not fill a full region are
/// ignored.
pub fn toa_map(movie: &IntensityMovie, noise_sd: f64) -> Result<ParamMap, DceusError> {
    if !(noise_sd > 0.0) {
        return Err(DceusError::BadNoiseSd);
    }
    let nx_regions = movie.nx / REGION_PX;
    let ny_regions = movie.ny / REGION_PX;
    let mut values = vec![f64::NAN; nx_regions * ny_regions];
    let mut nonperfused = vec![false; nx_regions * ny_regions];
    for rx in 0..nx_regions {
        for ry in 0..ny_regions {
            let trace = region_trace(movie, rx, ry);
            let peak = trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let idx = rx * ny_regions + ry;
            if peak < 3.0 * noise_sd {
                nonperfused[idx] = true;
                continue;
            }
            let threshold = 0.9 * peak;
            if let Some(k) = trace.iter().position(|&v| v >= threshold) {
                values[idx] = k as f64 * movie.frame_interval_s;
            } else {
                nonperfused[idx] = true;
            }
        }
    }
    Ok(ParamMap {
        values,
        nonperfused,
        nx_regions,
        ny_regions,
        kind: ParamKind::Toa,
    })
}

/// Zero-phase ideal low-pass of one trace: frequency bins above the cutoff
/// are zeroed symmetrically, leaving DC (and therefore the mean) untouched.
fn lowpass_trace(trace: &[f64], cutoff_hz: f64, frame_interval_s: f64) -> Vec<f64> {
    let n = trace.len();
    let mut buf: Vec<Complex64> = trace.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft::fft_inplace(&mut buf);
    let df = 1.0 / (n as f64 * frame_interval_s);
    for (k, v) in buf.iter_mut().enumerate() {
        let freq = if k <= n / 2 {
            k as f64 * df
        } else {
            (n - k) as f64 * df
        };
        if freq > cutoff_hz {
            *v = Complex64::default();
        }
    }
    fft::ifft_inplace(&mut buf);
    buf.iter().map(|v| v.re).collect()
}

/// Mean-of-intensity map: per region, the temporal mean of the zero-phase
/// low-pass-filtered intensity trace. Perfusion flags are not set here;
/// adopt them from the TOA map when reporting.
pub fn moi_map(movie: &IntensityMovie, lowpass_cutoff_hz: f64) -> Result<ParamMap, DceusError> {
    let nyquist = 0.5 / movie.frame_interval_s;
    if lowpass_cutoff_hz >= nyquist {
        return Err(DceusError::CutoffAboveNyquist {
            cutoff_hz: lowpass_cutoff_hz,
            nyquist_hz: nyquist,
        });
    }
    let nx_regions = movie.nx / REGION_PX;
    let ny_regions = movie.ny / REGION_PX;
    let mut values = vec![f64::NAN; nx_regions * ny_regions];
    for rx in 0..nx_regions {
        for ry in 0..ny_regions {
            let trace = region_trace(movie, rx, ry);
            let filtered = lowpass_trace(&trace, lowpass_cutoff_hz, movie.frame_interval_s);
            values[rx * ny_regions + ry] =
                filtered.iter().sum::<f64>() / filtered.len() as f64;
        }
    }
    Ok(ParamMap {
        values,
        nonperfused: vec![false; nx_regions * ny_regions],
        nx_regions,
        ny_regions,
        kind: ParamKind::Moi,
    })
}

/// Spatial mean and population standard deviation over perfused regions.
pub fn spatial_summary(map: &ParamMap) -> Result<(f64, f64), DceusError> {
    let vals: Vec<f64> = map
        .values
        .iter()
        .zip(&map.nonperfused)
        .filter(|(v, &np)| !np && v.is_finite())
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return Err(DceusError::AllNonPerfused);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
