//! Stage orchestration: each stage reads its declared inputs from the
//! output directory, writes its declared outputs, and nothing else, so any
//! stage can be deleted and reproduced byte-identically from its inputs.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use serde::{Deserialize, Serialize};

use ufdt_core::beamform::acquire_slice_from_cloud;
use ufdt_core::clutter::{power_doppler, singular_values, svd_filter, to_casorati, PowerSlice};
use ufdt_core::dceus::{moi_map, spatial_summary, toa_map, IntensityMovie};
use ufdt_core::fusion::{
    assemble_volume, register, simulate_psf, spectral_noise_floor, sum_volumes, wiener_deconvolve,
    PsfKernel, WienerSpec,
};
use ufdt_core::geometry::{Pose, ScanGeometry};
use ufdt_core::grid::GridSpec;
use ufdt_core::phantom::{
    arrival_field, bolus_intensity_with_arrival, seed_scatterers, PhantomSpec,
};
use ufdt_core::stats::{one_way_anova, t_test, GroupSamples, TTestKind};
use ufdt_core::vessel::{
    diameter_histogram, distance_transform, extract_segments, fit_exponential,
    normalized_distribution, scale_normalizations, skeletonize, threshold_volume,
    SkeletonOptions, TumorRegion, VesselError,
};

use crate::config::PipelineConfig;
use crate::formats;

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Scan,
    Reconstruct,
    Quantify,
    Dceus,
    Report,
    All,
}

impl Stage {
    pub fn parse(name: &str) -> Option<Stage> {
        Some(match name {
            "phantom" => Stage::Phantom,
            "scan" => Stage::Scan,
            "reconstruct" => Stage::Reconstruct,
            "quantify" => Stage::Quantify,
            "dceus" => Stage::Dceus,
            "report" => Stage::Report,
            "all" => Stage::All,
            _ => return None,
        })
    }

    /// Distinct process exit code for failures in this stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Stage::Phantom => 10,
            Stage::Scan => 20,
            Stage::Reconstruct => 30,
            Stage::Quantify => 40,
            Stage::Dceus => 50,
            Stage::Report => 60,
            Stage::All => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Scan => "scan",
            Stage::Reconstruct => "reconstruct",
            Stage::Quantify => "quantify",
            Stage::Dceus => "dceus",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

/// A stage failure carrying the exit code the process should return. A
/// missing input carries the code of the stage that should have produced
/// it.
#[derive(Debug)]
pub struct StageFailure {
    pub exit_code: i32,
    pub message: String,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for StageFailure {}

fn fail(stage: Stage, err: anyhow::Error) -> StageFailure {
    StageFailure {
        exit_code: stage.exit_code(),
        message: format!("{} stage failed: {err:#}", stage.name()),
    }
}

fn missing_input(producer: Stage, path: &Path) -> StageFailure {
    StageFailure {
        exit_code: producer.exit_code(),
        message: format!(
            "missing input {}: run the {} stage first",
            path.display(),
            producer.name()
        ),
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub cache_dir: Option<PathBuf>,
}

pub struct RunContext {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl RunContext {
    pub fn new(mut config: PipelineConfig, overrides: &Overrides) -> Self {
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        let out_dir = overrides
            .out_dir
            .clone()
            .unwrap_or_else(|| config.out_dir.clone());
        let cache_dir = overrides
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os("UFDT_CACHE_DIR").map(PathBuf::from))
            .unwrap_or_else(|| out_dir.join("cache"));
        Self {
            config,
            out_dir,
            cache_dir,
        }
    }

    fn dir(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(stage.name())
    }
}

/// Run one stage (or the whole chain) inside a worker pool of the requested
/// size. Results are independent of the worker count.
pub fn run(stage: Stage, ctx: &RunContext, workers: Option<usize>) -> Result<(), StageFailure> {
    let run_inner = || -> Result<(), StageFailure> {
        match stage {
            Stage::Phantom => run_phantom(ctx),
            Stage::Scan => run_scan(ctx),
            Stage::Reconstruct => run_reconstruct(ctx),
            Stage::Quantify => run_quantify(ctx),
            Stage::Dceus => run_dceus(ctx),
            Stage::Report => run_report(ctx),
            Stage::All => {
                run_phantom(ctx)?;
                run_scan(ctx)?;
                run_reconstruct(ctx)?;
                run_quantify(ctx)?;
                run_dceus(ctx)?;
                run_report(ctx)
            }
        }
    };
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| fail(stage, anyhow!(e)))?;
            pool.install(run_inner)
        }
        None => run_inner(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PhantomArtifact {
    config_hash: String,
    total_length_mm: f64,
    spec: PhantomSpec,
}

fn phantom_json(ctx: &RunContext) -> PathBuf {
    ctx.dir(Stage::Phantom).join("phantom.json")
}

fn load_phantom(ctx: &RunContext, consumer: Stage) -> Result<PhantomSpec, StageFailure> {
    let path = phantom_json(ctx);
    if !path.exists() {
        return Err(missing_input(Stage::Phantom, &path));
    }
    let artifact: PhantomArtifact = serde_json::from_str(
        &std::fs::read_to_string(&path).map_err(|e| fail(consumer, anyhow!(e)))?,
    )
    .map_err(|e| fail(consumer, anyhow!(e)))?;
    Ok(artifact.spec)
}

fn run_phantom(ctx: &RunContext) -> Result<(), StageFailure> {
    let stage = Stage::Phantom;
    let dir = ctx.dir(stage);
    (|| -> Result<()> {
        formats::ensure_dir(&dir)?;
        let spec = ctx.config.resolved_phantom()?;
        formats::write_segments_tsv(&dir.join("segments.tsv"), &spec.tree)?;
        let artifact = PhantomArtifact {
            config_hash: ctx.config.config_hash(),
            total_length_mm: spec.tree.total_length_mm(),
            spec,
        };
        std::fs::write(
            dir.join("phantom.json"),
            serde_json::to_string_pretty(&artifact)?,
        )?;
        eprintln!(
            "phantom: {} segments, total length {:.2} mm",
            artifact.spec.tree.segments.len(),
            artifact.total_length_mm
        );
        Ok(())
    })()
    .map_err(|e| fail(stage, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanManifest {
    config_hash: String,
    geometry: ScanGeometry,
    n_frames: usize,
    frame_rate_hz: f64,
}

fn run_scan(ctx: &RunContext) -> Result<(), StageFailure> {
    let stage = Stage::Scan;
    let spec = load_phantom(ctx, stage)?;
    let dir = ctx.dir(stage);
    (|| -> Result<()> {
        formats::ensure_dir(&dir)?;
        let geom = ctx.config.scan.geometry(&ctx.config.probe)?;
        let base_settings = ctx.config.acquisition_settings();
        let cloud = seed_scatterers(&spec)?;

        let jobs: Vec<(usize, usize, Pose)> = geom
            .thetas_deg
            .iter()
            .enumerate()
            .flat_map(|(ti, &t)| {
                geom.y_steps_mm
                    .iter()
                    .enumerate()
                    .map(move |(yi, &y)| (ti, yi, Pose::new(t, y)))
                    .collect::<Vec<_>>()
            })
            .collect();

        jobs.par_iter().try_for_each(|(ti, yi, pose)| -> Result<()> {
            let mut settings = base_settings;
            // decorrelate receiver noise across slices
            settings.noise_seed ^= ((ti * 1000 + yi) as u64).wrapping_mul(0x517C_C1B7_2722_0A95);
            let stack = acquire_slice_from_cloud(
                &cloud,
                pose,
                &ctx.config.probe,
                &ctx.config.pulse,
                &geom.slice_grid,
                &settings,
            )?;
            formats::write_iq_stack(&dir.join(formats::slice_stem(*ti, *yi)), &stack)?;
            Ok(())
        })?;

        let manifest = ScanManifest {
            config_hash: ctx.config.config_hash(),
            geometry: geom,
            n_frames: base_settings.n_frames,
            frame_rate_hz: base_settings.frame_rate_hz,
        };
        std::fs::write(
            dir.join("scan_manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        eprintln!(
            "scan: {} slices x {} frames written",
            manifest.geometry.n_slices(),
            manifest.n_frames
        );
        Ok(())
    })()
    .map_err(|e| fail(stage, e))
}

/// Load or simulate the PSF kernel, cached on disk keyed by the acquisition
/// geometry hash.
fn obtain_psf(ctx: &RunContext, geom: &ScanGeometry) -> Result<PsfKernel> {
    let key = ctx.config.psf_cache_key();
    let cached = ctx.cache_dir.join(format!("psf_{key}"));
    if cached.with_extension("raw").exists() {
        let volume = formats::read_volume(&cached)?;
        eprintln!("reconstruct: psf cache hit ({key})");
        return Ok(PsfKernel { volume });
    }
    let kernel_grid = GridSpec::centered(
        [0.0, 0.0, ctx.config.probe.elevation_focus_mm],
        [ctx.config.volume.spacing_mm; 3],
        ctx.config.wiener.psf_dims,
    )
    .map_err(|e| anyhow!("psf grid: {e}"))?;
    eprintln!("reconstruct: simulating psf ({key})");
    let psf = simulate_psf(
        &ctx.config.probe,
        &ctx.config.pulse,
        geom,
        ctx.config.probe.elevation_focus_mm,
        &kernel_grid,
    )?;
    formats::ensure_dir(&ctx.cache_dir)?;
    formats::write_volume(&cached, &psf.volume)?;
    // re-read so cache hits and misses use bit-identical (f32-quantized) data
    let volume = formats::read_volume(&cached)?;
    Ok(PsfKernel { volume })
}

#[derive(Debug, Serialize, Deserialize)]
struct ReconstructSummary {
    config_hash: String,
    rank_per_slice: Vec<usize>,
    registration_offsets_voxels: Vec<[f64; 3]>,
    wiener_noise_variance: f64,
    psf_key: String,
}

fn run_reconstruct(ctx: &RunContext) -> Result<(), StageFailure> {
    let stage = Stage::Reconstruct;
    let scan_dir = ctx.dir(Stage::Scan);
    let manifest_path = scan_dir.join("scan_manifest.json");
    if !manifest_path.exists() {
        return Err(missing_input(Stage::Scan, &manifest_path));
    }
    let dir = ctx.dir(stage);
    (|| -> Result<()> {
        formats::ensure_dir(&dir)?;
        formats::ensure_dir(&dir.join("power"))?;
        let manifest: ScanManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let geom = &manifest.geometry;
        let out_grid = ctx.config.volume.grid()?;

        // clutter filter every slice, in parallel
        let jobs: Vec<(usize, usize)> = (0..geom.thetas_deg.len())
            .flat_map(|ti| (0..geom.y_steps_mm.len()).map(move |yi| (ti, yi)))
            .collect();
        let filtered: Vec<(PowerSlice, usize)> = jobs
            .par_iter()
            .map(|&(ti, yi)| -> Result<(PowerSlice, usize)> {
                let stack = formats::read_iq_stack(&scan_dir.join(formats::slice_stem(ti, yi)))?;
                let m = to_casorati(&stack);
                let sv = singular_values(&m);
                let n_cut = ctx
                    .config
                    .filter
                    .resolve(&sv, m.n_time)
                    .map_err(|e| anyhow!(e))?
                    .min(m.n_space.min(m.n_time).saturating_sub(1));
                let cleaned = svd_filter(&m, n_cut).map_err(|e| anyhow!(e))?;
                let slice = power_doppler(&cleaned);
                formats::write_power_slice(
                    &dir.join("power").join(formats::slice_stem(ti, yi)),
                    &slice,
                )?;
                Ok((slice, n_cut))
            })
            .collect::<Result<_>>()?;
        let rank_per_slice: Vec<usize> = filtered.iter().map(|(_, r)| *r).collect();

        // assemble one volume per orientation
        let n_y = geom.y_steps_mm.len();
        let mut volumes = Vec::with_capacity(geom.thetas_deg.len());
        for (ti, &theta) in geom.thetas_deg.iter().enumerate() {
            let slices: Vec<PowerSlice> = (0..n_y)
                .map(|yi| filtered[ti * n_y + yi].0.clone())
                .collect();
            volumes.push(assemble_volume(&slices, geom, theta, &out_grid)?);
        }

        let offsets = register(&volumes, 0)?;
        let fused = sum_volumes(&volumes, &offsets)?;
        formats::write_volume(&dir.join("volume_fused"), &fused)?;
        // deconvolve the f32-quantized volume exactly as persisted
        let fused = formats::read_volume(&dir.join("volume_fused"))?;

        let psf = obtain_psf(ctx, geom)?;
        formats::write_volume(&dir.join("psf"), &psf.volume)?;

        let noise_variance = match ctx.config.wiener.noise_variance {
            Some(v) => v,
            None => {
                let region = ctx.config.threshold.region_for(fused.grid.dims);
                spectral_noise_floor(&fused, &region)
            }
        };
        let wiener = WienerSpec {
            noise_variance,
            epsilon_floor: ctx.config.wiener.epsilon_floor,
            smooth_spectrum: ctx.config.wiener.smooth_spectrum,
        };
        let deconvolved = wiener_deconvolve(&fused, &psf, &wiener)?;
        formats::write_volume(&dir.join("volume_deconvolved"), &deconvolved)?;

        let summary = ReconstructSummary {
            config_hash: ctx.config.config_hash(),
            rank_per_slice,
            registration_offsets_voxels: offsets,
            wiener_noise_variance: noise_variance,
            psf_key: ctx.config.psf_cache_key(),
        };
        std::fs::write(
            dir.join("reconstruct.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        eprintln!(
            "reconstruct: fused {} orientations into {:?} voxels",
            geom.thetas_deg.len(),
            out_grid.dims
        );
        Ok(())
    })()
    .map_err(|e| fail(stage, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuantifySummary {
    pub config_hash: String,
    pub zeta0_mm: f64,
    pub n_segments: usize,
    /// Absent when fewer than three diameter bins are populated.
    pub fit_rate_per_mm: Option<f64>,
    pub fit_amplitude_mm: Option<f64>,
    pub fit_r_squared: Option<f64>,
    pub small_vessel_fraction: f64,
    pub mid_band_fraction: f64,
    pub tumor_volume_mm3: f64,
    pub tumor_radius_mm: f64,
}

fn run_quantify(ctx: &RunContext) -> Result<(), StageFailure> {
    let stage = Stage::Quantify;
    let vol_path = ctx.dir(Stage::Reconstruct).join("volume_deconvolved");
    if !vol_path.with_extension("raw").exists() {
        return Err(missing_input(Stage::Reconstruct, &vol_path.with_extension("raw")));
    }
    let dir = ctx.dir(stage);
    (|| -> Result<()> {
        formats::ensure_dir(&dir)?;
        let vol = formats::read_volume(&vol_path)?;
        let region = ctx.config.threshold.region_for(vol.grid.dims);
        let mut mask = threshold_volume(&vol, &region, ctx.config.threshold.z_score)
            .map_err(|e| anyhow!(e))?;
        // the spectral deconvolution wraps at the volume faces; the
        // outermost shell is untrusted
        clear_boundary_shell(&mut mask, 2);
        let skeleton = skeletonize(&mask, &SkeletonOptions::default());
        let edt = distance_transform(&mask);
        formats::write_skeleton_csv(&dir.join("skeleton.csv"), &skeleton, &edt)?;

        let graph = extract_segments(&skeleton, &mask).map_err(|e| anyhow!(e))?;
        formats::write_segments_tsv(&dir.join("segments.tsv"), &graph)?;

        let h = diameter_histogram(&graph);
        let normalized = normalized_distribution(&h).map_err(|e| anyhow!(e))?;
        let tumor = TumorRegion::from_ellipsoid(&ctx.config.phantom.tumor, &vol.grid);
        let scaled = scale_normalizations(&h, &tumor);
        formats::write_histogram_csv(
            &dir.join("histogram.csv"),
            &h,
            &normalized,
            &scaled.zeta_over_volume,
            &scaled.zeta_over_radius,
        )?;

        let fit = match fit_exponential(&h) {
            Ok(f) => Some(f),
            Err(VesselError::TooFewBins { .. }) => None,
            Err(e) => return Err(anyhow!(e)),
        };
        let mid_band: f64 = normalized
            .iter()
            .filter(|b| b.phi_center_mm >= 0.08 && b.phi_center_mm < 0.16)
            .map(|b| b.zeta_mm)
            .sum();
        let summary = QuantifySummary {
            config_hash: ctx.config.config_hash(),
            zeta0_mm: h.total_length_mm,
            n_segments: graph.segments.len(),
            fit_rate_per_mm: fit.map(|f| f.rate_per_mm),
            fit_amplitude_mm: fit.map(|f| f.amplitude_mm),
            fit_r_squared: fit.map(|f| f.r_squared),
            small_vessel_fraction: scaled.small_vessel_fraction,
            mid_band_fraction: mid_band,
            tumor_volume_mm3: tumor.volume_mm3,
            tumor_radius_mm: tumor.radius_mm,
        };
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        eprintln!(
            "quantify: {} segments, zeta0 {:.2} mm, fit R^2 {}",
            summary.n_segments,
            summary.zeta0_mm,
            summary
                .fit_r_squared
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "n/a".into())
        );
        Ok(())
    })()
    .map_err(|e| fail(stage, e))
}

/// Clear mask voxels within `shell` voxels of any volume face.
fn clear_boundary_shell(mask: &mut ufdt_core::vessel::BinaryMask, shell: usize) {
    let [nx, ny, nz] = mask.grid.dims;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let edge = i
                    .min(j)
                    .min(k)
                    .min(nx - 1 - i)
                    .min(ny - 1 - j)
                    .min(nz - 1 - k);
                if edge < shell && mask.get(i, j, k) {
                    mask.set(i, j, k, false);
                }
            }
        }
    }
}

fn run_dceus(ctx: &RunContext) -> Result<(), StageFailure> {
    let stage = Stage::Dceus;
    let spec = load_phantom(ctx, stage)?;
    let dir = ctx.dir(stage);
    (|| -> Result<()> {
        formats::ensure_dir(&dir)?;
        let cfg = &ctx.config.dceus;
        let grid = &cfg.grid;
        let (nx, ny) = (grid.dims[0], grid.dims[1]);
        let n_frames = (cfg.duration_s / cfg.frame_interval_s).round() as usize;
        let arrival = arrival_field(&spec, grid);
        let mut frames = Vec::with_capacity(n_frames * nx * ny);
        for f in 0..n_frames {
            let t = f as f64 * cfg.frame_interval_s;
            let vol = bolus_intensity_with_arrival(&spec, t, grid, &arrival);
            // volume layout is z-fastest with nz = 1, so this is [ix*ny+iy]
            frames.extend_from_slice(&vol.data);
        }
        let movie = IntensityMovie::new(frames, nx, ny, cfg.frame_interval_s)
            .map_err(|e| anyhow!(e))?;

        let noise_sd = spec.bolus.baseline_noise_sd.max(1e-9);
        let toa = toa_map(&movie, noise_sd).map_err(|e| anyhow!(e))?;
        let mut moi = moi_map(&movie, cfg.lowpass_cutoff_hz).map_err(|e| anyhow!(e))?;
        moi.adopt_nonperfused(&toa);

        formats::write_param_map_csv(&dir.join("toa.csv"), &toa)?;
        formats::write_param_map_csv(&dir.join("moi.csv"), &moi)?;

        let mut out = String::from("kind,spatial_mean,spatial_sd,n_perfused,n_nonperfused\n");
        for (name, map) in [("MoI", &moi), ("TOA", &toa)] {
            let n_np = map.nonperfused.iter().filter(|&&b| b).count();
            let n_p = map.values.len() - n_np;
            match spatial_summary(map) {
                Ok((mean, sd)) => {
                    out.push_str(&format!("{name},{mean:.6},{sd:.6},{n_p},{n_np}\n"));
                }
                Err(_) => out.push_str(&format!("{name},nan,nan,{n_p},{n_np}\n")),
            }
        }
        std::fs::write(dir.join("summary.csv"), out)?;
        eprintln!("dceus: {n_frames} frames over {nx}x{ny} pixels");
        Ok(())
    })()
    .map_err(|e| fail(stage, e))
}

fn run_report(ctx: &RunContext) -> Result<(), StageFailure> {
    let stage = Stage::Report;
    let hist_path = ctx.dir(Stage::Quantify).join("histogram.csv");
    if !hist_path.exists() {
        return Err(missing_input(Stage::Quantify, &hist_path));
    }
    let summary_path = ctx.dir(Stage::Quantify).join("summary.json");
    if !summary_path.exists() {
        return Err(missing_input(Stage::Quantify, &summary_path));
    }
    let dceus_summary = ctx.dir(Stage::Dceus).join("summary.csv");
    if !dceus_summary.exists() {
        return Err(missing_input(Stage::Dceus, &dceus_summary));
    }
    let dir = ctx.dir(stage);
    (|| -> Result<()> {
        formats::ensure_dir(&dir)?;
        let hist = formats::read_histogram_csv(&hist_path)?;
        let summary: QuantifySummary =
            serde_json::from_str(&std::fs::read_to_string(&summary_path)?)?;
        let dceus_lines = std::fs::read_to_string(&dceus_summary)?;
        let toa_rows = formats::read_param_map_csv(&ctx.dir(Stage::Dceus).join("toa.csv"))?;

        let mut out = String::new();
        out.push_str("section,key,value\n");
        out.push_str(&format!("quantify,zeta0_mm,{:.6}\n", summary.zeta0_mm));
        out.push_str(&format!("quantify,n_segments,{}\n", summary.n_segments));
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "nan".into());
        out.push_str(&format!(
            "quantify,fit_rate_per_mm,{}\n",
            fmt_opt(summary.fit_rate_per_mm)
        ));
        out.push_str(&format!(
            "quantify,fit_r_squared,{}\n",
            fmt_opt(summary.fit_r_squared)
        ));
        out.push_str(&format!(
            "quantify,small_vessel_fraction,{:.6}\n",
            summary.small_vessel_fraction
        ));
        out.push_str(&format!(
            "quantify,zeta0_over_volume,{:.6}\n",
            summary.zeta0_mm / summary.tumor_volume_mm3
        ));
        out.push_str(&format!(
            "quantify,zeta0_over_radius,{:.6}\n",
            summary.zeta0_mm / summary.tumor_radius_mm
        ));
        for row in &hist {
            out.push_str(&format!(
                "histogram,phi_{:.2},{:.6};{:.6};{:.6};{:.6}\n",
                row[0], row[1], row[2], row[3], row[4]
            ));
        }
        for line in dceus_lines.lines().skip(1) {
            if let Some((kind, rest)) = line.split_once(',') {
                out.push_str(&format!("dceus,{kind},{rest}\n"));
            }
        }

        // spatial-hierarchy statistics: perfused TOA values grouped by ring
        // distance from the map center
        let (n_rows, n_cols) = (
            toa_rows.len(),
            toa_rows.first().map(|r| r.len()).unwrap_or(0),
        );
        let mut rings: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for (rx, row) in toa_rows.iter().enumerate() {
            for (ry, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                let dx = (rx as f64 - n_rows as f64 / 2.0) / (n_rows as f64 / 2.0);
                let dy = (ry as f64 - n_cols as f64 / 2.0) / (n_cols as f64 / 2.0);
                let r = dx.hypot(dy);
                let ring = if r < 0.4 {
                    0
                } else if r < 0.8 {
                    1
                } else {
                    2
                };
                rings[ring].push(v);
            }
        }
        let populated: Vec<Vec<f64>> = rings.into_iter().filter(|g| g.len() >= 2).collect();
        if populated.len() >= 2 {
            if let Ok((f_stat, p)) = one_way_anova(&GroupSamples::new(populated.clone())) {
                out.push_str(&format!("stats,toa_ring_anova_f,{f_stat:.6}\n"));
                out.push_str(&format!("stats,toa_ring_anova_p,{p:.6}\n"));
            }
            if let Ok(t) = t_test(&populated[0], &populated[populated.len() - 1], TTestKind::Welch)
            {
                out.push_str(&format!("stats,toa_center_vs_rim_t,{:.6}\n", t.t));
                out.push_str(&format!("stats,toa_center_vs_rim_p,{:.6}\n", t.p));
                out.push_str(&format!(
                    "stats,toa_center_vs_rim_significant,{}\n",
                    t.significant
                ));
            }
        }
        std::fs::write(dir.join("report.csv"), out)?;
        eprintln!("report: written to {}", dir.join("report.csv").display());
        Ok(())
    })()
    .map_err(|e| fail(stage, e))
}
