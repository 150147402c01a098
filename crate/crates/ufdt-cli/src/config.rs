//! Pipeline configuration: one JSON file drives every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ufdt_core::beamform::AcquisitionSettings;
use ufdt_core::clutter::RankMode;
use ufdt_core::geometry::{plan_scan, GeometryError, ProbeModel, ScanGeometry};
use ufdt_core::grid::{GridSpec, IndexBox};
use ufdt_core::phantom::{
    generate_tree, BolusParams, Ellipsoid, PhantomError, PhantomSpec, TreeParams, VesselGraph,
};
use ufdt_core::rf_sim::Pulse;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid scan plan: {0}")]
    Geometry(#[from] GeometryError),
    #[error("invalid phantom: {0}")]
    Phantom(#[from] PhantomError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Scan-plan parameters; the slice grid is derived from the plan and can be
/// tightened around the region of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub n_thetas: usize,
    pub theta_step_deg: f64,
    pub n_y: usize,
    pub y_step_mm: f64,
    #[serde(default = "default_pixel_mm")]
    pub pixel_mm: f64,
    /// Override the in-plane x' extent (mm); defaults to the y sweep extent.
    #[serde(default)]
    pub slice_x_extent_mm: Option<f64>,
    /// Override the in-plane depth range [z_min, z_max] (mm).
    #[serde(default)]
    pub slice_z_range_mm: Option<[f64; 2]>,
}

fn default_pixel_mm() -> f64 {
    ufdt_core::geometry::DEFAULT_PIXEL_MM
}

impl ScanConfig {
    pub fn geometry(&self, probe: &ProbeModel) -> Result<ScanGeometry, ConfigError> {
        let mut geom = plan_scan(
            probe,
            self.n_thetas,
            self.theta_step_deg,
            self.n_y,
            self.y_step_mm,
        )?;
        let dx = self.pixel_mm;
        let x_extent = self
            .slice_x_extent_mm
            .unwrap_or(self.n_y as f64 * self.y_step_mm);
        let nx = (x_extent / dx).round().max(1.0) as usize + 1;
        let (z0, nz) = match self.slice_z_range_mm {
            Some([z_min, z_max]) => {
                if !(z_max > z_min) || z_min <= 0.0 {
                    return Err(ConfigError::Invalid(
                        "slice_z_range_mm must be increasing and positive".into(),
                    ));
                }
                (z_min, ((z_max - z_min) / dx).round().max(1.0) as usize + 1)
            }
            None => {
                let nz = nx;
                (
                    (probe.elevation_focus_mm - 0.5 * (nz as f64 - 1.0) * dx).max(0.5),
                    nz,
                )
            }
        };
        geom.slice_grid = GridSpec::new(
            [-0.5 * (nx as f64 - 1.0) * dx, 0.0, z0],
            [dx, self.y_step_mm, dx],
            [nx, 1, nz],
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(geom)
    }
}

/// Which vessel tree the phantom carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeConfig {
    /// Wide-range branching tree whose diameter histogram follows an
    /// exponential trend.
    Default,
    /// Tree tuned to the published tumor regime (about half the length in
    /// 0.08-0.16 mm vessels, about three quarters under 0.2 mm).
    PaperCalibrated,
    Custom(TreeParams),
}

impl TreeConfig {
    pub fn params(&self) -> TreeParams {
        match self {
            TreeConfig::Default => TreeParams::default(),
            TreeConfig::PaperCalibrated => TreeParams::paper_calibrated(),
            TreeConfig::Custom(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub tree: TreeConfig,
    pub tumor: Ellipsoid,
    pub tissue_scatterer_density_per_mm3: f64,
    pub blood_scatterer_density_per_mm3: f64,
    #[serde(default = "default_ratio_db")]
    pub tissue_to_blood_amplitude_ratio_db: f64,
    #[serde(default)]
    pub bolus: BolusOverride,
}

fn default_ratio_db() -> f64 {
    40.0
}

/// Bolus parameters with defaults, so configs only name what they change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BolusOverride {
    pub start_delay_s: Option<f64>,
    pub peak_time_s: Option<f64>,
    pub shape_alpha: Option<f64>,
    pub amplitude: Option<f64>,
    pub baseline_noise_sd: Option<f64>,
}

impl BolusOverride {
    pub fn resolve(&self) -> BolusParams {
        let d = BolusParams::default();
        BolusParams {
            start_delay_s: self.start_delay_s.unwrap_or(d.start_delay_s),
            peak_time_s: self.peak_time_s.unwrap_or(d.peak_time_s),
            shape_alpha: self.shape_alpha.unwrap_or(d.shape_alpha),
            amplitude: self.amplitude.unwrap_or(d.amplitude),
            baseline_noise_sd: self.baseline_noise_sd.unwrap_or(d.baseline_noise_sd),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub n_frames: usize,
    pub frame_rate_hz: f64,
    #[serde(default)]
    pub noise_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WienerConfig {
    #[serde(default = "default_epsilon_floor")]
    pub epsilon_floor: f64,
    /// Spectral noise floor; estimated from the threshold noise corner when
    /// absent.
    #[serde(default)]
    pub noise_variance: Option<f64>,
    #[serde(default)]
    pub smooth_spectrum: bool,
    /// PSF kernel size in voxels (volume spacing).
    #[serde(default = "default_psf_dims")]
    pub psf_dims: [usize; 3],
}

fn default_epsilon_floor() -> f64 {
    1e-3
}

fn default_psf_dims() -> [usize; 3] {
    [33, 33, 25]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    #[serde(default = "default_z_score")]
    pub z_score: f64,
    /// Noise region as an explicit voxel box; defaults to the low corner
    /// spanning `noise_corner_fraction` of each axis.
    #[serde(default)]
    pub noise_region: Option<IndexBox>,
    #[serde(default = "default_corner_fraction")]
    pub noise_corner_fraction: f64,
}

fn default_z_score() -> f64 {
    3.0
}

fn default_corner_fraction() -> f64 {
    0.2
}

impl ThresholdConfig {
    pub fn region_for(&self, dims: [usize; 3]) -> IndexBox {
        self.noise_region.unwrap_or_else(|| {
            let hi = [
                ((dims[0] as f64 * self.noise_corner_fraction).ceil() as usize).max(2),
                ((dims[1] as f64 * self.noise_corner_fraction).ceil() as usize).max(2),
                ((dims[2] as f64 * self.noise_corner_fraction).ceil() as usize).max(2),
            ];
            IndexBox::new([0, 0, 0], hi)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    pub center_mm: [f64; 3],
    pub spacing_mm: f64,
    pub dims: [usize; 3],
}

impl VolumeConfig {
    pub fn grid(&self) -> Result<GridSpec, ConfigError> {
        GridSpec::centered(self.center_mm, [self.spacing_mm; 3], self.dims)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DceusConfig {
    /// Imaging plane grid: dims [nx, ny, 1] at the plane's z.
    pub grid: GridSpec,
    #[serde(default = "default_frame_interval")]
    pub frame_interval_s: f64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_cutoff")]
    pub lowpass_cutoff_hz: f64,
    /// Apply the low-pass filter before the 90% arrival search too.
    #[serde(default)]
    pub toa_on_filtered: bool,
}

fn default_frame_interval() -> f64 {
    0.1
}

fn default_duration() -> f64 {
    60.0
}

fn default_cutoff() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub probe: ProbeModel,
    #[serde(default)]
    pub pulse: Pulse,
    pub scan: ScanConfig,
    pub acquisition: AcquisitionConfig,
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub filter: RankMode,
    #[serde(default = "default_wiener")]
    pub wiener: WienerConfig,
    #[serde(default = "default_threshold")]
    pub threshold: ThresholdConfig,
    pub volume: VolumeConfig,
    pub dceus: DceusConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_wiener() -> WienerConfig {
    WienerConfig {
        epsilon_floor: default_epsilon_floor(),
        noise_variance: None,
        smooth_spectrum: false,
        psf_dims: default_psf_dims(),
    }
}

fn default_threshold() -> ThresholdConfig {
    ThresholdConfig {
        z_score: default_z_score(),
        noise_region: None,
        noise_corner_fraction: default_corner_fraction(),
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: PipelineConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.probe
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.acquisition.n_frames == 0 || self.acquisition.frame_rate_hz <= 0.0 {
            return Err(ConfigError::Invalid(
                "acquisition needs frames and a positive frame rate".into(),
            ));
        }
        self.scan.geometry(&self.probe)?;
        self.volume.grid()?;
        self.resolved_phantom()?.validate()?;
        Ok(())
    }

    /// The concrete phantom this config describes (tree generated from the
    /// config seed).
    pub fn resolved_phantom(&self) -> Result<PhantomSpec, ConfigError> {
        let tree: VesselGraph = generate_tree(self.seed, &self.phantom.tree.params())?;
        Ok(PhantomSpec {
            tumor: self.phantom.tumor.clone(),
            tree,
            tissue_scatterer_density_per_mm3: self.phantom.tissue_scatterer_density_per_mm3,
            blood_scatterer_density_per_mm3: self.phantom.blood_scatterer_density_per_mm3,
            tissue_to_blood_amplitude_ratio_db: self.phantom.tissue_to_blood_amplitude_ratio_db,
            bolus: self.phantom.bolus.resolve(),
            rng_seed: self.seed,
        })
    }

    pub fn acquisition_settings(&self) -> AcquisitionSettings {
        AcquisitionSettings {
            n_frames: self.acquisition.n_frames,
            frame_rate_hz: self.acquisition.frame_rate_hz,
            noise_rms: self.acquisition.noise_rms,
            noise_seed: self.seed ^ 0xA5A5_5A5A_0F0F_F0F0,
        }
    }

    /// Hash identifying cache entries for this configuration's PSF: probe,
    /// pulse, scan plan and kernel geometry.
    pub fn psf_cache_key(&self) -> String {
        let geom = self
            .scan
            .geometry(&self.probe)
            .expect("validated geometry");
        let payload = serde_json::json!({
            "probe": self.probe,
            "pulse": self.pulse,
            "geom": geom,
            "spacing": self.volume.spacing_mm,
            "psf_dims": self.wiener.psf_dims,
        });
        let mut hasher = Sha256::new();
        hasher.update(payload.to_string().as_bytes());
        hex_prefix(&hasher.finalize())
    }

    /// Hash of the full configuration (stage provenance stamp).
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(self).expect("serializable").as_bytes());
        hex_prefix(&hasher.finalize())
    }
}

fn hex_prefix(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
