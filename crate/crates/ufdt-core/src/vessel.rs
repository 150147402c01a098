//! Vessel-network quantification: z-score thresholding, medial-axis
//! thinning, segment extraction with diameters from the distance transform,
//! and the diameter-binned cumulative-length analytics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, IndexBox, Volume};
use crate::phantom::{Ellipsoid, VesselGraph, VesselSegment};

#[derive(Debug, Error, PartialEq)]
pub enum VesselError {
    #[error("noise region is empty")]
    EmptyNoiseRegion,
    #[error("noise region has zero variance")]
    ZeroVarianceNoise,
    #[error("mask and volume grids differ")]
    GridMismatch,
    #[error("graph has no vessels")]
    EmptyGraph,
    #[error("need at least {needed} nonempty bins for a fit, got {got}")]
    TooFewBins { needed: usize, got: usize },
}

/// Boolean voxel field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: GridSpec,
    pub voxels: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.len();
        Self {
            grid,
            voxels: vec![false; n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.voxels[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.grid.index(i, j, k);
        self.voxels[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&b| b).count()
    }

    /// Number of 26-connected foreground components.
    pub fn component_count(&self) -> usize {
        let [nx, ny, nz] = self.grid.dims;
        let mut seen = vec![false; self.voxels.len()];
        let mut components = 0;
        let mut stack = Vec::new();
        for start in 0..self.voxels.len() {
            if !self.voxels[start] || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                let (i, j, k) = unflatten(idx, ny, nz);
                for (di, dj, dk) in NEIGHBORS_26 {
                    let (ni, nj, nk) = (
                        i as i64 + di as i64,
                        j as i64 + dj as i64,
                        k as i64 + dk as i64,
                    );
                    if ni < 0
                        || nj < 0
                        || nk < 0
                        || ni >= nx as i64
                        || nj >= ny as i64
                        || nk >= nz as i64
                    {
                        continue;
                    }
                    let nidx = ((ni as usize) * ny + nj as usize) * nz + nk as usize;
                    if self.voxels[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        components
    }
}

#[inline]
fn unflatten(idx: usize, ny: usize, nz: usize) -> (usize, usize, usize) {
    (idx / (ny * nz), (idx / nz) % ny, idx % nz)
}

const NEIGHBORS_26: [(i8, i8, i8); 26] = {
    let mut out = [(0i8, 0i8, 0i8); 26];
    let mut n = 0;
    let mut di = -1i8;
    while di <= 1 {
        let mut dj = -1i8;
        while dj <= 1 {
            let mut dk = -1i8;
            while dk <= 1 {
                if !(di == 0 && dj == 0 && dk == 0) {
                    out[n] = (di, dj, dk);
                    n += 1;
                }
                dk += 1;
            }
            dj += 1;
        }
        di += 1;
    }
    out
};

/// Threshold a power volume against the noise statistics of a designated
/// vessel-free region: voxel kept iff (value − mean) / σ > `z_score`.
pub fn threshold_volume(
    vol: &Volume,
    noise_region: &IndexBox,
    z_score: f64,
) -> Result<BinaryMask, VesselError> {
    if noise_region.is_empty() {
        return Err(VesselError::EmptyNoiseRegion);
    }
    let (mean, var) = vol.box_stats(noise_region);
    if var <= 0.0 {
        return Err(VesselError::ZeroVarianceNoise);
    }
    let sigma = var.sqrt();
    let mut mask = BinaryMask::empty(vol.grid.clone());
    for (out, &v) in mask.voxels.iter_mut().zip(&vol.data) {
        *out = (v - mean) / sigma > z_score;
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Euclidean distance transform
// ---------------------------------------------------------------------------

const EDT_INF: f64 = 1e20;

/// Squared-distance lower-envelope transform along one line (Felzenszwalb &
/// Huttenlocher), with sample spacing `w`.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        out[0] = f[0];
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -EDT_INF;
    z[1] = EDT_INF;
    let w2 = w * w;
    let sq = |q: usize| w2 * (q * q) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * w2 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    // should not happen with z[0] = -inf, but stay safe
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = EDT_INF;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = w * (q as f64 - p as f64);
        out[q] = d * d + f[p];
    }
}

/// Exact Euclidean distance (mm) from every foreground voxel to the nearest
/// background voxel center. Background voxels map to 0. Outside the grid
/// counts as nothing: masks touching the boundary see only in-grid
/// background.
pub fn distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let [nx, ny, nz] = mask.grid.dims;
    let [wx, wy, wz] = mask.grid.spacing_mm;
    let mut d: Vec<f64> = mask
        .voxels
        .iter()
        .map(|&b| if b { EDT_INF } else { 0.0 })
        .collect();

    // z axis (contiguous)
    let mut line = vec![0.0; nz];
    let mut out = vec![0.0; nz];
    for i in 0..nx {
        for j in 0..ny {
            let base = (i * ny + j) * nz;
            line.copy_from_slice(&d[base..base + nz]);
            edt_1d(&line, wz, &mut out);
            d[base..base + nz].copy_from_slice(&out);
        }
    }
    // y axis
    let mut line = vec![0.0; ny];
    let mut out = vec![0.0; ny];
    for i in 0..nx {
        for k in 0..nz {
            for j in 0..ny {
                line[j] = d[(i * ny + j) * nz + k];
            }
            edt_1d(&line, wy, &mut out);
            for j in 0..ny {
                d[(i * ny + j) * nz + k] = out[j];
            }
        }
    }
    // x axis
    let mut line = vec![0.0; nx];
    let mut out = vec![0.0; nx];
    for j in 0..ny {
        for k in 0..nz {
            for i in 0..nx {
                line[i] = d[(i * ny + j) * nz + k];
            }
            edt_1d(&line, wx, &mut out);
            for i in 0..nx {
                d[(i * ny + j) * nz + k] = out[i];
            }
        }
    }
    for v in d.iter_mut() {
        *v = v.sqrt();
    }
    d
}

// ---------------------------------------------------------------------------
// Topology-preserving thinning
// ---------------------------------------------------------------------------

/// Neighborhood occupancy around one voxel, center excluded, indexed by
/// (di+1)*9 + (dj+1)*3 + (dk+1).
fn neighborhood(mask: &[bool], dims: [usize; 3], i: usize, j: usize, k: usize) -> [bool; 27] {
    let [nx, ny, nz] = dims;
    let mut nb = [false; 27];
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            for dk in -1i64..=1 {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                if ni < 0
                    || nj < 0
                    || nk < 0
                    || ni >= nx as i64
                    || nj >= ny as i64
                    || nk >= nz as i64
                {
                    continue;
                }
                let occ = mask[((ni as usize) * ny + nj as usize) * nz + nk as usize];
                nb[((di + 1) * 9 + (dj + 1) * 3 + (dk + 1)) as usize] = occ;
            }
        }
    }
    nb
}

fn nb_index(di: i64, dj: i64, dk: i64) -> usize {
    ((di + 1) * 9 + (dj + 1) * 3 + (dk + 1)) as usize
}

fn nb_offset(idx: usize) -> (i64, i64, i64) {
    (
        (idx / 9) as i64 - 1,
        ((idx / 3) % 3) as i64 - 1,
        (idx % 3) as i64 - 1,
    )
}

/// Number of 26-connected components of foreground in the 26-neighborhood.
fn object_components_26(nb: &[bool; 27]) -> usize {
    let mut seen = [false; 27];
    let mut components = 0;
    let mut stack = Vec::with_capacity(26);
    for start in 0..27 {
        if start == 13 || !nb[start] || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (ai, aj, ak) = nb_offset(idx);
            for other in 0..27 {
                if other == 13 || seen[other] || !nb[other] {
                    continue;
                }
                let (bi, bj, bk) = nb_offset(other);
                if (ai - bi).abs() <= 1 && (aj - bj).abs() <= 1 && (ak - bk).abs() <= 1 {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
    }
    components
}

/// Number of 6-connected background components within the 18-neighborhood
/// that touch a face neighbor of the center.
fn background_components_6(nb: &[bool; 27]) -> usize {
    let in_n18 = |idx: usize| {
        let (a, b, c) = nb_offset(idx);
        let m = a.abs() + b.abs() + c.abs();
        (1..=2).contains(&m)
    };
    let faces: [usize; 6] = [
        nb_index(1, 0, 0),
        nb_index(-1, 0, 0),
        nb_index(0, 1, 0),
        nb_index(0, -1, 0),
        nb_index(0, 0, 1),
        nb_index(0, 0, -1),
    ];
    let mut seen = [false; 27];
    let mut components = 0;
    let mut stack = Vec::with_capacity(18);
    for &start in &faces {
        if nb[start] || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (ai, aj, ak) = nb_offset(idx);
            for other in 0..27 {
                if other == 13 || seen[other] || nb[other] || !in_n18(other) {
                    continue;
                }
                let (bi, bj, bk) = nb_offset(other);
                if (ai - bi).abs() + (aj - bj).abs() + (ak - bk).abs() == 1 {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
    }
    components
}

/// Simple-point test (Malandain–Bertrand): deleting the voxel preserves
/// topology iff the foreground of its 26-neighborhood is one component and
/// the background within its 18-neighborhood is one face-connected
/// component.
fn is_simple(nb: &[bool; 27]) -> bool {
    object_components_26(nb) == 1 && background_components_6(nb) == 1
}

fn neighbor_count(nb: &[bool; 27]) -> usize {
    nb.iter().filter(|&&b| b).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonOptions {
    /// Remove endpoint branches shorter than this many voxels after
    /// thinning (junction spurs only).
    pub prune_spurs_below: usize,
    /// Also prune endpoint branches shorter than the inscribed vessel
    /// radius at the junction they hang off: such branches never extend
    /// beyond the local maximal ball and are thinning artifacts, not
    /// vessels.
    pub prune_radius_spurs: bool,
}

impl Default for SkeletonOptions {
    fn default() -> Self {
        Self {
            prune_spurs_below: 2,
            prune_radius_spurs: true,
        }
    }
}

/// Medial-axis thinning: delete simple border points from the six face
/// directions in turn, keeping curve endpoints, until stable. Within each
/// direction the deletions run over the eight parity subfields; voxels of
/// one subfield are never in each other's neighborhoods, so deletions in a
/// sub-pass cannot cascade along a structure (which would otherwise eat
/// two-voxel-wide ribbons end to end). The result is a subset of the mask,
/// one voxel wide away from junctions, with the input's component count.
pub fn skeletonize(mask: &BinaryMask, opts: &SkeletonOptions) -> BinaryMask {
    let dims = mask.grid.dims;
    let [nx, ny, nz] = dims;
    let data = mask.voxels.clone();

    const DIRECTIONS: [(i64, i64, i64); 6] = [
        (0, 0, 1),
        (0, 0, -1),
        (0, 1, 0),
        (0, -1, 0),
        (1, 0, 0),
        (-1, 0, 0),
    ];

    let is_background = |data: &[bool], i: i64, j: i64, k: i64| {
        if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
            return true;
        }
        !data[((i as usize) * ny + j as usize) * nz + k as usize]
    };

    let mut candidates = Vec::new();
    let mut thin_to_convergence = |data: &mut Vec<bool>| loop {
        let mut deleted = false;
        for (di, dj, dk) in DIRECTIONS {
            for subfield in 0..8usize {
                candidates.clear();
                for i in 0..nx {
                    for j in 0..ny {
                        for k in 0..nz {
                            if (i % 2) * 4 + (j % 2) * 2 + (k % 2) != subfield {
                                continue;
                            }
                            let idx = (i * ny + j) * nz + k;
                            if !data[idx] {
                                continue;
                            }
                            if !is_background(
                                data,
                                i as i64 + di,
                                j as i64 + dj,
                                k as i64 + dk,
                            ) {
                                continue;
                            }
                            let nb = neighborhood(data, dims, i, j, k);
                            if neighbor_count(&nb) <= 1 {
                                continue; // endpoint
                            }
                            if is_simple(&nb) {
                                candidates.push((i, j, k));
                            }
                        }
                    }
                }
                for &(i, j, k) in &candidates {
                    let idx = (i * ny + j) * nz + k;
                    data[idx] = false;
                    deleted = true;
                }
            }
        }
        if !deleted {
            break;
        }
    };

    let prune = opts.prune_spurs_below > 0 || opts.prune_radius_spurs;
    let edt = if opts.prune_radius_spurs {
        Some(distance_transform(mask))
    } else {
        None
    };
    // pruning exposes residual bar tips that become deletable, so alternate
    // until the voxel set stops changing
    let mut skeleton = BinaryMask {
        grid: mask.grid.clone(),
        voxels: data,
    };
    loop {
        thin_to_convergence(&mut skeleton.voxels);
        if !prune {
            break;
        }
        let before = skeleton.count();
        prune_spurs(&mut skeleton, opts.prune_spurs_below, edt.as_deref());
        if skeleton.count() == before {
            break;
        }
    }
    skeleton
}

/// Remove endpoint→junction branches shorter than `min_voxels`, or shorter
/// than the inscribed radius at their junction when `edt` is given.
fn prune_spurs(skeleton: &mut BinaryMask, min_voxels: usize, edt: Option<&[f64]>) {
    let dims = skeleton.grid.dims;
    let [nx, ny, nz] = dims;
    let min_spacing = skeleton
        .grid
        .spacing_mm
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    // longest spur any rule could remove, to bound the endpoint walks
    let walk_cap = match edt {
        Some(d) => {
            let max_r = d.iter().cloned().fold(0.0f64, f64::max);
            min_voxels.max((max_r / min_spacing).ceil() as usize + 2)
        }
        None => min_voxels,
    };
    loop {
        let mut removed_any = false;
        let mut to_remove: Vec<Vec<usize>> = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let idx = (i * ny + j) * nz + k;
                    if !skeleton.voxels[idx] {
                        continue;
                    }
                    if neighbor_count(&neighborhood(&skeleton.voxels, dims, i, j, k)) != 1 {
                        continue;
                    }
                    // walk from the endpoint until a junction or another end
                    let mut path = vec![idx];
                    let (mut ci, mut cj, mut ck) = (i, j, k);
                    loop {
                        let nb = neighborhood(&skeleton.voxels, dims, ci, cj, ck);
                        let mut next = None;
                        let mut n_obj = 0;
                        for o in 0..27 {
                            if o == 13 || !nb[o] {
                                continue;
                            }
                            n_obj += 1;
                            let (di, dj, dk) = nb_offset(o);
                            let nidx = ((ci as i64 + di) as usize * ny
                                + (cj as i64 + dj) as usize)
                                * nz
                                + (ck as i64 + dk) as usize;
                            if !path.contains(&nidx) {
                                next = Some(nidx);
                            }
                        }
                        if n_obj >= 3 {
                            // reached a junction: the spur is the path so far
                            // without the junction voxel itself
                            let junction = path.pop().unwrap();
                            let mut threshold = min_voxels;
                            if let Some(d) = edt {
                                threshold = threshold
                                    .max((d[junction] / min_spacing).ceil() as usize + 1);
                            }
                            if path.len() < threshold {
                                to_remove.push(path);
                            }
                            break;
                        }
                        match next {
                            Some(nidx) if path.len() <= walk_cap => {
                                path.push(nidx);
                                let (a, b, c) = unflatten(nidx, ny, nz);
                                ci = a;
                                cj = b;
                                ck = c;
                            }
                            _ => break, // long branch or free-standing line: keep
                        }
                    }
                }
            }
        }
        for path in to_remove {
            for idx in path {
                if skeleton.voxels[idx] {
                    skeleton.voxels[idx] = false;
                    removed_any = true;
                }
            }
        }
        if !removed_any {
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Segment extraction
// ---------------------------------------------------------------------------

/// Split the skeleton at junction voxels and measure every branch.
///
/// Per segment: length is the sum of Euclidean steps between consecutive
/// centerline voxels, extended to the centroid of any junction cluster the
/// branch attaches to (the true centerlines meet at the junction point, but
/// junction voxels belong to no segment); mean diameter is twice the mean
/// mask distance transform over the centerline voxels, with a half-voxel
/// surface-quantization offset. Connectivity pairs segments meeting at the
/// same junction cluster.
pub fn extract_segments(
    skeleton: &BinaryMask,
    mask: &BinaryMask,
) -> Result<VesselGraph, VesselError> {
    if skeleton.grid != mask.grid {
        return Err(VesselError::GridMismatch);
    }
    let dims = skeleton.grid.dims;
    let [nx, ny, nz] = dims;
    let grid = &skeleton.grid;
    let edt = distance_transform(mask);

    // degree classification
    let n = skeleton.voxels.len();
    let mut degree = vec![0u8; n];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let idx = (i * ny + j) * nz + k;
                if skeleton.voxels[idx] {
                    degree[idx] =
                        neighbor_count(&neighborhood(&skeleton.voxels, dims, i, j, k)) as u8;
                }
            }
        }
    }
    let is_junction = |idx: usize| skeleton.voxels[idx] && degree[idx] >= 3;

    // junction clusters (26-connected groups of junction voxels)
    let mut cluster = vec![usize::MAX; n];
    let mut n_clusters = 0;
    for start in 0..n {
        if !is_junction(start) || cluster[start] != usize::MAX {
            continue;
        }
        let id = n_clusters;
        n_clusters += 1;
        let mut stack = vec![start];
        cluster[start] = id;
        while let Some(idx) = stack.pop() {
            let (i, j, k) = unflatten(idx, ny, nz);
            for (di, dj, dk) in NEIGHBORS_26 {
                let (a, b, c) = (
                    i as i64 + di as i64,
                    j as i64 + dj as i64,
                    k as i64 + dk as i64,
                );
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let nidx = ((a as usize) * ny + b as usize) * nz + c as usize;
                if is_junction(nidx) && cluster[nidx] == usize::MAX {
                    cluster[nidx] = id;
                    stack.push(nidx);
                }
            }
        }
    }

    // centroid of each junction cluster, for branch length extension
    let mut centroid_acc: Vec<([f64; 3], usize)> = vec![([0.0; 3], 0); n_clusters];
    for idx in 0..n {
        if is_junction(idx) {
            let (i, j, k) = unflatten(idx, ny, nz);
            let p = grid.voxel_center(i, j, k);
            let entry = &mut centroid_acc[cluster[idx]];
            for a in 0..3 {
                entry.0[a] += p[a];
            }
            entry.1 += 1;
        }
    }
    let centroids: Vec<[f64; 3]> = centroid_acc
        .iter()
        .map(|(acc, count)| {
            let c = (*count).max(1) as f64;
            [acc[0] / c, acc[1] / c, acc[2] / c]
        })
        .collect();

    // neighbors ordered face -> edge -> vertex so path walks prefer the
    // tightest connection and do not cut staircase corners
    let neighbors_of = |idx: usize| -> Vec<usize> {
        let (i, j, k) = unflatten(idx, ny, nz);
        let mut out: Vec<(u8, usize)> = Vec::new();
        for (di, dj, dk) in NEIGHBORS_26 {
            let (a, b, c) = (
                i as i64 + di as i64,
                j as i64 + dj as i64,
                k as i64 + dk as i64,
            );
            if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                continue;
            }
            let nidx = ((a as usize) * ny + b as usize) * nz + c as usize;
            if skeleton.voxels[nidx] {
                let rank = (di.abs() + dj.abs() + dk.abs()) as u8;
                out.push((rank, nidx));
            }
        }
        out.sort();
        out.into_iter().map(|(_, idx)| idx).collect()
    };

    let mut visited = vec![false; n];
    let mut graph = VesselGraph::default();
    // junction clusters adjacent to each segment, for connectivity
    let mut segment_clusters: Vec<Vec<usize>> = Vec::new();

    for start in 0..n {
        if !skeleton.voxels[start] || visited[start] || is_junction(start) {
            continue;
        }
        // walk to one end of this branch, never revisiting a voxel
        let mut probe_seen: Vec<usize> = vec![start];
        let mut end = start;
        loop {
            let next = neighbors_of(end)
                .into_iter()
                .find(|&nb| !is_junction(nb) && !visited[nb] && !probe_seen.contains(&nb));
            match next {
                Some(nb) => {
                    probe_seen.push(nb);
                    end = nb;
                }
                None => break,
            }
        }
        // walk back across from that end, collecting the ordered path
        let mut path = vec![end];
        visited[end] = true;
        let mut cur = end;
        loop {
            let next = neighbors_of(cur)
                .into_iter()
                .find(|&nb| !is_junction(nb) && !visited[nb]);
            match next {
                Some(nb) => {
                    visited[nb] = true;
                    path.push(nb);
                    cur = nb;
                }
                None => break,
            }
        }
        if path.len() < 2 {
            continue; // lone voxel: no measurable length
        }

        // voxel centers zigzag when the true axis runs between lattice rows,
        // inflating path length by up to sqrt(2); smooth before measuring
        let centers = smooth_centerline(
            &path
                .iter()
                .map(|&idx| {
                    let (i, j, k) = unflatten(idx, ny, nz);
                    grid.voxel_center(i, j, k)
                })
                .collect::<Vec<_>>(),
        );
        let mut length: f64 = centers
            .windows(2)
            .map(|w| {
                (0..3)
                    .map(|a| (w[1][a] - w[0][a]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        // per-voxel radius: blend the voxel's own distance value with the
        // largest value in its neighborhood (the skeleton voxel can sit up
        // to a voxel off the true axis, which biases the former low and
        // the latter high on digital tubes); the median over the path
        // shrugs off the fattened crotch voxels next to junctions
        let mut radii: Vec<f64> = path
            .iter()
            .map(|&idx| {
                let (i, j, k) = unflatten(idx, ny, nz);
                let mut ridge = edt[idx];
                for (di, dj, dk) in NEIGHBORS_26 {
                    let (a, b, c) = (
                        i as i64 + di as i64,
                        j as i64 + dj as i64,
                        k as i64 + dk as i64,
                    );
                    if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64
                        || c >= nz as i64
                    {
                        continue;
                    }
                    ridge = ridge.max(edt[((a as usize) * ny + b as usize) * nz + c as usize]);
                }
                0.5 * (edt[idx] + ridge)
            })
            .collect();
        radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean_radius = if radii.len() % 2 == 1 {
            radii[radii.len() / 2]
        } else {
            0.5 * (radii[radii.len() / 2 - 1] + radii[radii.len() / 2])
        };

        // junction clusters this branch attaches to; span the gap between
        // the terminal voxel and the junction centroid
        let mut clusters_here = Vec::new();
        for (&tip, tip_center) in [path[0], *path.last().unwrap()]
            .iter()
            .zip([centers[0], *centers.last().unwrap()])
        {
            let mut nearest: Option<(f64, usize)> = None;
            for nb in neighbors_of(tip) {
                if !is_junction(nb) {
                    continue;
                }
                let c = cluster[nb];
                if !clusters_here.contains(&c) {
                    clusters_here.push(c);
                }
                let d = (0..3)
                    .map(|a| (centroids[c][a] - tip_center[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if nearest.map_or(true, |(best, _)| d < best) {
                    nearest = Some((d, c));
                }
            }
            if let Some((d, _)) = nearest {
                length += d;
            }
        }

        // fixed sub-voxel offset against the surface-quantization bias,
        // calibrated on digital tubes of known diameter (2.4 to 7 voxels)
        // across orientations
        let min_spacing = grid
            .spacing_mm
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        graph.segments.push(VesselSegment {
            centerline_mm: centers,
            mean_diameter_mm: 2.0 * mean_radius + 0.64 * min_spacing,
            length_mm: length,
            flow_speed_mm_s: 0.0,
        });
        segment_clusters.push(clusters_here);
    }

    // connectivity: segments sharing a junction cluster
    for a in 0..segment_clusters.len() {
        for b in a + 1..segment_clusters.len() {
            if segment_clusters[a]
                .iter()
                .any(|c| segment_clusters[b].contains(c))
            {
                graph.connectivity.push((a, b));
            }
        }
    }
    Ok(graph)
}

/// Two passes of a 5-point moving average over the interior points, ends
/// anchored.
fn smooth_centerline(pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    if pts.len() <= 2 {
        return pts.to_vec();
    }
    let mut cur = pts.to_vec();
    for _ in 0..2 {
        let mut next = cur.clone();
        for t in 1..cur.len() - 1 {
            let lo = t.saturating_sub(2);
            let hi = (t + 2).min(cur.len() - 1);
            let mut acc = [0.0; 3];
            for p in &cur[lo..=hi] {
                for a in 0..3 {
                    acc[a] += p[a];
                }
            }
            let n = (hi - lo + 1) as f64;
            next[t] = [acc[0] / n, acc[1] / n, acc[2] / n];
        }
        cur = next;
    }
    cur
}

// ---------------------------------------------------------------------------
// Histogram analytics
// ---------------------------------------------------------------------------

/// Fixed diameter bin width, mm.
pub const DIAMETER_BIN_MM: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Bin center φ, mm; the bin spans [φ−0.02, φ+0.02).
    pub phi_center_mm: f64,
    /// Cumulative length ζ of all segments whose mean diameter falls in the
    /// bin, mm (or a normalized variant of it).
    pub zeta_mm: f64,
}

/// Diameter-binned cumulative vessel length, 0.04 mm bins with edges on
/// multiples of 0.04 mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiameterHistogram {
    pub bin_width_mm: f64,
    pub bins: Vec<HistogramBin>,
    /// Total network length ζ₀ = Σ bins.
    pub total_length_mm: f64,
}

/// Assign each segment's full length to the single bin containing its mean
/// diameter (half-open bins, lower bin wins on edges).
pub fn diameter_histogram(graph: &VesselGraph) -> DiameterHistogram {
    let mut acc: Vec<f64> = Vec::new();
    for seg in &graph.segments {
        let bin = (seg.mean_diameter_mm / DIAMETER_BIN_MM).floor() as usize;
        if acc.len() <= bin {
            acc.resize(bin + 1, 0.0);
        }
        acc[bin] += seg.length_mm;
    }
    let bins: Vec<HistogramBin> = acc
        .iter()
        .enumerate()
        .map(|(i, &zeta)| HistogramBin {
            phi_center_mm: (i as f64 + 0.5) * DIAMETER_BIN_MM,
            zeta_mm: zeta,
        })
        .collect();
    let total_length_mm = bins.iter().map(|b| b.zeta_mm).sum();
    DiameterHistogram {
        bin_width_mm: DIAMETER_BIN_MM,
        bins,
        total_length_mm,
    }
}

/// ζ/ζ₀ per bin. The fractions sum to exactly 1: any floating-point residue
/// is folded into the largest bin.
pub fn normalized_distribution(h: &DiameterHistogram) -> Result<Vec<HistogramBin>, VesselError> {
    if !(h.total_length_mm > 0.0) {
        return Err(VesselError::EmptyGraph);
    }
    let mut out: Vec<HistogramBin> = h
        .bins
        .iter()
        .map(|b| HistogramBin {
            phi_center_mm: b.phi_center_mm,
            zeta_mm: b.zeta_mm / h.total_length_mm,
        })
        .collect();
    let largest = out
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.zeta_mm.partial_cmp(&b.1.zeta_mm).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    // nudge the largest bin until the in-order sum is exactly 1
    for _ in 0..8 {
        let sum: f64 = out.iter().map(|b| b.zeta_mm).sum();
        if sum == 1.0 {
            break;
        }
        out[largest].zeta_mm += 1.0 - sum;
    }
    Ok(out)
}

/// Tumor support region with the size measures of the scale analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct TumorRegion {
    pub mask: BinaryMask,
    pub volume_mm3: f64,
    /// Length scale: cubic root of the volume.
    pub radius_mm: f64,
}

impl TumorRegion {
    pub fn new(mask: BinaryMask, volume_mm3: f64) -> Self {
        Self {
            mask,
            volume_mm3,
            radius_mm: volume_mm3.cbrt(),
        }
    }

    /// Analytic ellipsoid region rasterized on `grid`.
    pub fn from_ellipsoid(e: &Ellipsoid, grid: &GridSpec) -> Self {
        let mut mask = BinaryMask::empty(grid.clone());
        let [nx, ny, nz] = grid.dims;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    if e.contains(grid.voxel_center(i, j, k)) {
                        mask.set(i, j, k, true);
                    }
                }
            }
        }
        Self::new(mask, e.volume_mm3())
    }
}

/// Size-normalized distributions: ζ/volume (mm/mm³), ζ/radius (mm/mm), and
/// the fraction of total length in vessels under 0.2 mm.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNormalized {
    pub zeta_over_volume: Vec<HistogramBin>,
    pub zeta_over_radius: Vec<HistogramBin>,
    pub small_vessel_fraction: f64,
}

pub fn scale_normalizations(h: &DiameterHistogram, region: &TumorRegion) -> ScaleNormalized {
    let scale = |denom: f64| -> Vec<HistogramBin> {
        h.bins
            .iter()
            .map(|b| HistogramBin {
                phi_center_mm: b.phi_center_mm,
                zeta_mm: b.zeta_mm / denom,
            })
            .collect()
    };
    let small: f64 = h
        .bins
        .iter()
        .filter(|b| b.phi_center_mm < 0.2)
        .map(|b| b.zeta_mm)
        .sum();
    ScaleNormalized {
        zeta_over_volume: scale(region.volume_mm3),
        zeta_over_radius: scale(region.radius_mm),
        small_vessel_fraction: if h.total_length_mm > 0.0 {
            small / h.total_length_mm
        } else {
            0.0
        },
    }
}

/// Log-linear least-squares fit ζ ≈ amplitude · exp(−rate · φ) over nonempty
/// bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialFit {
    pub rate_per_mm: f64,
    pub amplitude_mm: f64,
    pub r_squared: f64,
    /// Set when the log-lengths have no variance (constant bins): the fit is
    /// a perfect but uninformative horizontal line.
    pub degenerate: bool,
}

pub fn fit_exponential(h: &DiameterHistogram) -> Result<ExponentialFit, VesselError> {
    let pts: Vec<(f64, f64)> = h
        .bins
        .iter()
        .filter(|b| b.zeta_mm > 0.0)
        .map(|b| (b.phi_center_mm, b.zeta_mm.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(VesselError::TooFewBins {
            needed: 3,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - (intercept + slope * p.0);
            e * e
        })
        .sum();
    let (r_squared, degenerate) = if syy == 0.0 {
        (1.0, true)
    } else {
        (1.0 - ss_res / syy, false)
    };
    Ok(ExponentialFit {
        rate_per_mm: -slope,
        amplitude_mm: intercept.exp(),
        r_squared,
        degenerate,
    })
}

/// Rasterize a vessel graph's tubes into a mask (ground-truth rendering for
/// oracle comparisons).
pub fn rasterize_graph(graph: &VesselGraph, grid: &GridSpec) -> BinaryMask {
    BinaryMask {
        grid: grid.clone(),
        voxels: crate::phantom::rasterize(graph, grid),
    }
}
