//! Probe model, scan planning and probe-frame / world-frame transforms.
//!
//! The probe frame (x', y', z') has x' along the piezo elements, z' along
//! ultrasound propagation (depth) and y' out of the imaging plane. A slice
//! pose rotates the probe by `theta` about the fixed z axis (the depth axis
//! through the grid center) and translates it by `y_offset` along y'. Angles
//! are degrees at every interface and converted to radians in exactly one
//! place ([`Pose::rotation`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridSpec;

/// Speed of sound used throughout, mm/µs (soft tissue).
pub const SOUND_SPEED_MM_PER_US: f64 = 1.540;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error("scan plan must have at least one theta and one y step")]
    EmptyPlan,
    #[error("scan steps must be positive")]
    NonPositiveStep,
    #[error(
        "y extent {extent_mm:.3} mm exceeds aperture overlap bound {bound_mm:.3} mm \
         (aperture {aperture_mm:.3} mm + one y step)"
    )]
    YExtentExceedsAperture {
        extent_mm: f64,
        bound_mm: f64,
        aperture_mm: f64,
    },
}

/// Linear-array probe description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub element_count: usize,
    pub pitch_mm: f64,
    pub center_freq_mhz: f64,
    pub fractional_bandwidth: f64,
    pub elevation_width_mm: f64,
    pub elevation_focus_mm: f64,
    pub f_number: f64,
}

impl Default for ProbeModel {
    /// 128 elements, 0.08 mm pitch, 15 MHz, 85% bandwidth, 1.1 mm elevation
    /// aperture focused at 5 mm, f/1 receive.
    fn default() -> Self {
        Self {
            element_count: 128,
            pitch_mm: 0.08,
            center_freq_mhz: 15.0,
            fractional_bandwidth: 0.85,
            elevation_width_mm: 1.1,
            elevation_focus_mm: 5.0,
            f_number: 1.0,
        }
    }
}

impl ProbeModel {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.element_count < 2 {
            return Err(GeometryError::InvalidProbe(format!(
                "element_count {} < 2",
                self.element_count
            )));
        }
        if !(self.pitch_mm > 0.0) {
            return Err(GeometryError::InvalidProbe("pitch must be > 0".into()));
        }
        if !(self.fractional_bandwidth > 0.0 && self.fractional_bandwidth < 2.0) {
            return Err(GeometryError::InvalidProbe(
                "fractional bandwidth must be in (0, 2)".into(),
            ));
        }
        if !(self.f_number > 0.0) {
            return Err(GeometryError::InvalidProbe("f-number must be > 0".into()));
        }
        Ok(())
    }

    /// Full active aperture, mm.
    pub fn aperture_mm(&self) -> f64 {
        self.element_count as f64 * self.pitch_mm
    }

    /// Lateral center of element `e`, in the probe frame (array centered on
    /// x' = 0).
    pub fn element_x_mm(&self, e: usize) -> f64 {
        (e as f64 - 0.5 * (self.element_count as f64 - 1.0)) * self.pitch_mm
    }

    /// Wavelength at the center frequency, mm.
    pub fn wavelength_mm(&self) -> f64 {
        SOUND_SPEED_MM_PER_US / self.center_freq_mhz
    }
}

/// One slice pose of the scan: rotation `theta` about the fixed z axis
/// (angle from x to x'), then translation `y_offset` along y'.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub theta_deg: f64,
    pub y_offset_mm: f64,
}

impl Pose {
    pub fn new(theta_deg: f64, y_offset_mm: f64) -> Self {
        Self {
            theta_deg,
            y_offset_mm,
        }
    }

    /// (sin θ, cos θ). The single degrees→radians conversion site.
    #[inline]
    pub fn rotation(&self) -> (f64, f64) {
        let r = self.theta_deg.to_radians();
        (r.sin(), r.cos())
    }

    /// Map a probe-frame point (x', y', z') into the world frame.
    #[inline]
    pub fn probe_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.rotation();
        let y = p[1] + self.y_offset_mm;
        [c * p[0] - s * y, s * p[0] + c * y, p[2]]
    }

    /// Map a world point into the probe frame (inverse of
    /// [`Pose::probe_to_world`]).
    #[inline]
    pub fn world_to_probe(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.rotation();
        [
            c * p[0] + s * p[1],
            -s * p[0] + c * p[1] - self.y_offset_mm,
            p[2],
        ]
    }
}

/// Map an in-plane slice point (x', z') of a posed slice into the world
/// frame. The slice plane sits at y' = 0 of the posed probe.
#[inline]
pub fn slice_to_world(pose: &Pose, p: [f64; 2]) -> [f64; 3] {
    pose.probe_to_world([p[0], 0.0, p[1]])
}

/// Full scan plan: the set of probe orientations, the y' translations within
/// each orientation, and the common in-plane pixel grid of every slice.
///
/// The slice grid is a [`GridSpec`] with a singleton y dimension; axes 0 and
/// 2 are x' and z'.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub thetas_deg: Vec<f64>,
    pub y_steps_mm: Vec<f64>,
    #[serde(rename = "grid")]
    pub slice_grid: GridSpec,
}

impl ScanGeometry {
    /// Slice poses in acquisition order: theta-major, then y.
    pub fn poses(&self) -> Vec<Pose> {
        let mut out = Vec::with_capacity(self.thetas_deg.len() * self.y_steps_mm.len());
        for &t in &self.thetas_deg {
            for &y in &self.y_steps_mm {
                out.push(Pose::new(t, y));
            }
        }
        out
    }

    pub fn n_slices(&self) -> usize {
        self.thetas_deg.len() * self.y_steps_mm.len()
    }

    /// Scanned extent along y', mm (step count × step size). The step size
    /// is carried by the slice grid's y spacing.
    pub fn y_extent_mm(&self) -> f64 {
        self.y_steps_mm.len() as f64 * self.slice_grid.spacing_mm[1]
    }
}

/// Default in-plane pixel spacing, mm (≈ λ/2 at 15 MHz).
pub const DEFAULT_PIXEL_MM: f64 = 0.05;

/// Plan a scan of `n_thetas` orientations at `theta_step_deg` increments,
/// `n_y` slices per orientation at `y_step_mm` increments. The y offsets are
/// centered on the rotation axis so every orientation sweeps the same
/// cylinder.
///
/// The slice grid defaults to a square footprint matching the y extent at
/// [`DEFAULT_PIXEL_MM`] spacing, with depth centered on the probe's
/// elevation focus; override it afterwards for custom regions.
///
/// Fails when the y extent exceeds the probe aperture by more than one step
/// (the rotated volumes would no longer overlap).
pub fn plan_scan(
    probe: &ProbeModel,
    n_thetas: usize,
    theta_step_deg: f64,
    n_y: usize,
    y_step_mm: f64,
) -> Result<ScanGeometry, GeometryError> {
    probe.validate()?;
    if n_thetas < 1 || n_y < 1 {
        return Err(GeometryError::EmptyPlan);
    }
    if !(theta_step_deg > 0.0) || !(y_step_mm > 0.0) {
        return Err(GeometryError::NonPositiveStep);
    }
    let extent = n_y as f64 * y_step_mm;
    let bound = probe.aperture_mm() + y_step_mm;
    if extent > bound + 1e-12 {
        return Err(GeometryError::YExtentExceedsAperture {
            extent_mm: extent,
            bound_mm: bound,
            aperture_mm: probe.aperture_mm(),
        });
    }

    let thetas_deg = (0..n_thetas).map(|i| i as f64 * theta_step_deg).collect();
    let mid = 0.5 * (n_y as f64 - 1.0);
    let y_steps_mm = (0..n_y).map(|i| (i as f64 - mid) * y_step_mm).collect();

    let dx = DEFAULT_PIXEL_MM;
    let nx = (extent / dx).round().max(1.0) as usize + 1;
    let nz = nx;
    let zf = probe.elevation_focus_mm;
    let z0 = (zf - 0.5 * (nz as f64 - 1.0) * dx).max(0.5);
    let slice_grid = GridSpec::new(
        [-0.5 * (nx as f64 - 1.0) * dx, 0.0, z0],
        [dx, y_step_mm, dx],
        [nx, 1, nz],
    )
    .expect("slice grid construction");

    Ok(ScanGeometry {
        thetas_deg,
        y_steps_mm,
        slice_grid,
    })
}
