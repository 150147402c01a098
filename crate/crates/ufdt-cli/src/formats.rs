//! On-disk formats: raw little-endian arrays with JSON sidecars, TSV vessel
//! records and CSV analytics tables.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use ufdt_core::beamform::IqFrameStack;
use ufdt_core::clutter::PowerSlice;
use ufdt_core::dceus::ParamMap;
use ufdt_core::geometry::Pose;
use ufdt_core::grid::{GridSpec, Volume};
use ufdt_core::phantom::{VesselGraph, VesselSegment};
use ufdt_core::vessel::{DiameterHistogram, HistogramBin};

/// Sidecar for a scalar volume: raw little-endian float32, C order with z
/// fastest, in the fixed world frame.
#[derive(Debug, Serialize, Deserialize)]
struct VolumeSidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    frame: String,
    sample: String,
}

pub fn write_volume(base: &Path, vol: &Volume) -> Result<()> {
    let raw_path = base.with_extension("raw");
    let mut w = BufWriter::new(fs::File::create(&raw_path)?);
    for &v in &vol.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = VolumeSidecar {
        dims: vol.grid.dims,
        spacing_mm: vol.grid.spacing_mm,
        origin_mm: vol.grid.origin_mm,
        frame: "world".into(),
        sample: "float32-le".into(),
    };
    fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_volume(base: &Path) -> Result<Volume> {
    let sidecar: VolumeSidecar = serde_json::from_str(
        &fs::read_to_string(base.with_extension("json"))
            .with_context(|| format!("missing sidecar for {}", base.display()))?,
    )?;
    let grid = GridSpec::new(sidecar.origin_mm, sidecar.spacing_mm, sidecar.dims)
        .map_err(|e| anyhow::anyhow!("bad sidecar grid: {e}"))?;
    let raw = fs::read(base.with_extension("raw"))
        .with_context(|| format!("missing raw data for {}", base.display()))?;
    if raw.len() != grid.len() * 4 {
        bail!(
            "{}: raw size {} does not match dims {:?}",
            base.display(),
            raw.len(),
            sidecar.dims
        );
    }
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Volume { grid, data })
}

#[derive(Debug, Serialize, Deserialize)]
struct IqSidecar {
    grid: GridSpec,
    n_frames: usize,
    frame_rate_hz: f64,
    pose: Pose,
    sample: String,
}

pub fn write_iq_stack(base: &Path, stack: &IqFrameStack) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(base.with_extension("iq"))?);
    for v in &stack.frames {
        w.write_all(&(v.re as f32).to_le_bytes())?;
        w.write_all(&(v.im as f32).to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = IqSidecar {
        grid: stack.grid.clone(),
        n_frames: stack.n_frames,
        frame_rate_hz: stack.frame_rate_hz,
        pose: stack.pose,
        sample: "complex64-le".into(),
    };
    fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_iq_stack(base: &Path) -> Result<IqFrameStack> {
    let sidecar: IqSidecar = serde_json::from_str(
        &fs::read_to_string(base.with_extension("json"))
            .with_context(|| format!("missing sidecar for {}", base.display()))?,
    )?;
    let raw = fs::read(base.with_extension("iq"))
        .with_context(|| format!("missing iq data for {}", base.display()))?;
    let n_px = sidecar.grid.dims[0] * sidecar.grid.dims[2];
    if raw.len() != sidecar.n_frames * n_px * 8 {
        bail!("{}: iq size mismatch", base.display());
    }
    let frames: Vec<Complex64> = raw
        .chunks_exact(8)
        .map(|b| {
            Complex64::new(
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                f32::from_le_bytes([b[4], b[5], b[6], b[7]]) as f64,
            )
        })
        .collect();
    Ok(IqFrameStack {
        frames,
        grid: sidecar.grid,
        n_frames: sidecar.n_frames,
        frame_rate_hz: sidecar.frame_rate_hz,
        pose: sidecar.pose,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PowerSidecar {
    grid: GridSpec,
    pose: Pose,
    sample: String,
}

pub fn write_power_slice(base: &Path, slice: &PowerSlice) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(base.with_extension("raw"))?);
    for &v in &slice.energy {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = PowerSidecar {
        grid: slice.grid.clone(),
        pose: slice.pose,
        sample: "float32-le".into(),
    };
    fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_power_slice(base: &Path) -> Result<PowerSlice> {
    let sidecar: PowerSidecar = serde_json::from_str(
        &fs::read_to_string(base.with_extension("json"))
            .with_context(|| format!("missing sidecar for {}", base.display()))?,
    )?;
    let raw = fs::read(base.with_extension("raw"))?;
    let energy: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if energy.len() != sidecar.grid.dims[0] * sidecar.grid.dims[2] {
        bail!("{}: power slice size mismatch", base.display());
    }
    Ok(PowerSlice {
        energy,
        grid: sidecar.grid,
        pose: sidecar.pose,
    })
}

/// Line-delimited vessel records:
/// `id<TAB>length_mm<TAB>mean_diameter_mm<TAB>x,y,z;x,y,z;...`
pub fn write_segments_tsv(path: &Path, graph: &VesselGraph) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# id\tlength_mm\tmean_diameter_mm\tcenterline_mm")?;
    for (id, seg) in graph.segments.iter().enumerate() {
        let line = seg
            .centerline_mm
            .iter()
            .map(|p| format!("{:.6},{:.6},{:.6}", p[0], p[1], p[2]))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            w,
            "{id}\t{:.6}\t{:.6}\t{line}",
            seg.length_mm, seg.mean_diameter_mm
        )?;
    }
    // connectivity block
    for &(a, b) in &graph.connectivity {
        writeln!(w, "C\t{a}\t{b}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_segments_tsv(path: &Path) -> Result<VesselGraph> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("missing vessel records {}", path.display()))?;
    let mut graph = VesselGraph::default();
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] == "C" {
            graph
                .connectivity
                .push((fields[1].parse()?, fields[2].parse()?));
            continue;
        }
        let centerline: Vec<[f64; 3]> = fields[3]
            .split(';')
            .map(|triple| {
                let mut it = triple.split(',').map(|v| v.parse::<f64>());
                Ok([
                    it.next().unwrap()?,
                    it.next().unwrap()?,
                    it.next().unwrap()?,
                ])
            })
            .collect::<Result<_>>()?;
        graph.segments.push(VesselSegment {
            centerline_mm: centerline,
            length_mm: fields[1].parse()?,
            mean_diameter_mm: fields[2].parse()?,
            flow_speed_mm_s: 0.0,
        });
    }
    Ok(graph)
}

/// Histogram table with every normalization, one row per bin.
pub fn write_histogram_csv(
    path: &Path,
    h: &DiameterHistogram,
    normalized: &[HistogramBin],
    zeta_over_volume: &[HistogramBin],
    zeta_over_radius: &[HistogramBin],
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(
        w,
        "phi_center_mm,zeta_mm,zeta_over_zeta0,zeta_over_volume,zeta_over_radius"
    )?;
    for i in 0..h.bins.len() {
        writeln!(
            w,
            "{:.4},{:.9},{:.9},{:.9},{:.9}",
            h.bins[i].phi_center_mm,
            h.bins[i].zeta_mm,
            normalized[i].zeta_mm,
            zeta_over_volume[i].zeta_mm,
            zeta_over_radius[i].zeta_mm
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_histogram_csv(path: &Path) -> Result<Vec<[f64; 5]>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("missing histogram {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()?;
        if vals.len() != 5 {
            bail!("bad histogram row: {line}");
        }
        rows.push([vals[0], vals[1], vals[2], vals[3], vals[4]]);
    }
    Ok(rows)
}

/// Parametric map as a CSV grid; non-perfused regions emit `nan`.
pub fn write_param_map_csv(path: &Path, map: &ParamMap) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for rx in 0..map.nx_regions {
        let row: Vec<String> = (0..map.ny_regions)
            .map(|ry| {
                let v = map.at(rx, ry);
                if map.nonperfused[rx * map.ny_regions + ry] || v.is_nan() {
                    "nan".into()
                } else {
                    format!("{v:.6}")
                }
            })
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_param_map_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("missing parameter map {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        rows.push(
            line.split(',')
                .map(|v| {
                    if v == "nan" {
                        f64::NAN
                    } else {
                        v.parse().unwrap_or(f64::NAN)
                    }
                })
                .collect(),
        );
    }
    Ok(rows)
}

/// Skeleton voxel export: one `x_mm,y_mm,z_mm,diameter_mm` row per voxel.
pub fn write_skeleton_csv(
    path: &Path,
    skeleton: &ufdt_core::vessel::BinaryMask,
    edt: &[f64],
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "x_mm,y_mm,z_mm,diameter_mm")?;
    let [nx, ny, nz] = skeleton.grid.dims;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                if skeleton.get(i, j, k) {
                    let p = skeleton.grid.voxel_center(i, j, k);
                    let d = 2.0 * edt[skeleton.grid.index(i, j, k)];
                    writeln!(w, "{:.4},{:.4},{:.4},{:.4}", p[0], p[1], p[2], d)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))
}

/// Deterministic per-slice file stem.
pub fn slice_stem(theta_idx: usize, y_idx: usize) -> PathBuf {
    PathBuf::from(format!("slice_t{theta_idx:03}_y{y_idx:03}"))
}
