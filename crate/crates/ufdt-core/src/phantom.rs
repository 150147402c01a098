//! Synthetic vascular phantoms.
//!
//! A phantom is a branching vessel tree with known geometry (the ground
//! truth for the quantification stage), a cloud of tissue and blood
//! scatterers driving the RF simulator, and a bolus perfusion field for the
//! contrast-imaging comparison. Everything is seeded and deterministic.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("diameter decay {0} >= 1 would never terminate")]
    NonTerminatingTree(f64),
    #[error("invalid phantom parameter: {0}")]
    InvalidParams(String),
}

/// Axis-aligned ellipsoid standing in for the imaged tissue region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0
            * std::f64::consts::PI
            * self.semi_axes_mm[0]
            * self.semi_axes_mm[1]
            * self.semi_axes_mm[2]
    }
}

/// A single vessel: centerline polyline plus its summary measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselSegment {
    pub centerline_mm: Vec<[f64; 3]>,
    pub mean_diameter_mm: f64,
    pub length_mm: f64,
    /// Blood speed along the centerline; 0 for graphs recovered from images.
    pub flow_speed_mm_s: f64,
}

/// Explicit description of one vessel for hand-built phantoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselSegmentSpec {
    pub centerline_mm: Vec<[f64; 3]>,
    pub diameter_mm: f64,
    pub flow_speed_mm_s: f64,
}

/// Vessel network: segments plus endpoint adjacency. For generated trees,
/// connectivity pairs are (parent, child) and segment 0 is the root.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VesselGraph {
    pub segments: Vec<VesselSegment>,
    pub connectivity: Vec<(usize, usize)>,
}

pub fn polyline_length(line: &[[f64; 3]]) -> f64 {
    line.windows(2)
        .map(|w| {
            (0..3)
                .map(|a| (w[1][a] - w[0][a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

impl VesselGraph {
    pub fn from_specs(specs: &[VesselSegmentSpec], connectivity: Vec<(usize, usize)>) -> Self {
        let segments = specs
            .iter()
            .map(|s| VesselSegment {
                centerline_mm: s.centerline_mm.clone(),
                mean_diameter_mm: s.diameter_mm,
                length_mm: polyline_length(&s.centerline_mm),
                flow_speed_mm_s: s.flow_speed_mm_s,
            })
            .collect();
        Self {
            segments,
            connectivity,
        }
    }

    /// Total network length ζ₀.
    pub fn total_length_mm(&self) -> f64 {
        self.segments.iter().map(|s| s.length_mm).sum()
    }

    /// Transit-time delay (s) from the network roots to each segment start,
    /// walking parent→child connectivity. Roots (segments that are nobody's
    /// child) start at delay 0. Segments with zero flow get infinite delay.
    pub fn segment_start_delays_s(&self) -> Vec<f64> {
        let n = self.segments.len();
        let mut is_child = vec![false; n];
        for &(_, c) in &self.connectivity {
            if c < n {
                is_child[c] = true;
            }
        }
        let mut delay = vec![f64::INFINITY; n];
        let mut queue: Vec<usize> = (0..n).filter(|&i| !is_child[i]).collect();
        for &r in &queue {
            delay[r] = 0.0;
        }
        while let Some(seg) = queue.pop() {
            let s = &self.segments[seg];
            let transit = if s.flow_speed_mm_s > 0.0 {
                s.length_mm / s.flow_speed_mm_s
            } else {
                f64::INFINITY
            };
            let out = delay[seg] + transit;
            for &(p, c) in &self.connectivity {
                if p == seg && out < delay[c] {
                    delay[c] = out;
                    queue.push(c);
                }
            }
        }
        delay
    }
}

/// Point on a segment at arc length `s`, carrying a parallel-transported
/// normal frame so radial offsets stay consistent along curved centerlines.
/// Returns (position, unit tangent) with the radial offset applied.
pub fn segment_point(
    centerline: &[[f64; 3]],
    s_mm: f64,
    radial_mm: [f64; 2],
) -> ([f64; 3], [f64; 3]) {
    assert!(centerline.len() >= 2, "polyline needs at least 2 points");
    let mut t_prev = direction(centerline[0], centerline[1]);
    let (mut n1, mut n2) = normal_basis(t_prev);
    let mut remaining = s_mm.max(0.0);
    for w in centerline.windows(2) {
        let seg_len = dist(w[0], w[1]);
        if seg_len == 0.0 {
            continue;
        }
        let t = direction(w[0], w[1]);
        let (rn1, rn2) = transport(n1, n2, t_prev, t);
        n1 = rn1;
        n2 = rn2;
        t_prev = t;
        if remaining <= seg_len {
            let base = [
                w[0][0] + t[0] * remaining,
                w[0][1] + t[1] * remaining,
                w[0][2] + t[2] * remaining,
            ];
            let pos = [
                base[0] + radial_mm[0] * n1[0] + radial_mm[1] * n2[0],
                base[1] + radial_mm[0] * n1[1] + radial_mm[1] * n2[1],
                base[2] + radial_mm[0] * n1[2] + radial_mm[1] * n2[2],
            ];
            return (pos, t);
        }
        remaining -= seg_len;
    }
    // clamp to the end
    let last = centerline[centerline.len() - 1];
    let pos = [
        last[0] + radial_mm[0] * n1[0] + radial_mm[1] * n2[0],
        last[1] + radial_mm[0] * n1[1] + radial_mm[1] * n2[1],
        last[2] + radial_mm[0] * n1[2] + radial_mm[1] * n2[2],
    ];
    (pos, t_prev)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (b[i] - a[i]).powi(2)).sum::<f64>().sqrt()
}

fn direction(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    let d = dist(a, b);
    [(b[0] - a[0]) / d, (b[1] - a[1]) / d, (b[2] - a[2]) / d]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Arbitrary unit vector orthogonal to `t`, plus the completing basis vector.
fn normal_basis(t: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let pick = if t[0].abs() <= t[1].abs() && t[0].abs() <= t[2].abs() {
        [1.0, 0.0, 0.0]
    } else if t[1].abs() <= t[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let n1 = normalize(cross(t, pick));
    let n2 = cross(t, n1);
    (n1, n2)
}

/// Minimal rotation carrying `from` onto `to`, applied to the normal pair.
fn transport(
    n1: [f64; 3],
    n2: [f64; 3],
    from: [f64; 3],
    to: [f64; 3],
) -> ([f64; 3], [f64; 3]) {
    let axis = cross(from, to);
    let sin = dot(axis, axis).sqrt();
    let cos = dot(from, to);
    if sin < 1e-14 {
        return if cos > 0.0 { (n1, n2) } else { (neg(n1), n2) };
    }
    let k = [axis[0] / sin, axis[1] / sin, axis[2] / sin];
    (rodrigues(n1, k, sin, cos), rodrigues(n2, k, sin, cos))
}

fn neg(v: [f64; 3]) -> [f64; 3] {
    [-v[0], -v[1], -v[2]]
}

fn rodrigues(v: [f64; 3], k: [f64; 3], sin: f64, cos: f64) -> [f64; 3] {
    let kxv = cross(k, v);
    let kdv = dot(k, v);
    [
        v[0] * cos + kxv[0] * sin + k[0] * kdv * (1.0 - cos),
        v[1] * cos + kxv[1] * sin + k[1] * kdv * (1.0 - cos),
        v[2] * cos + kxv[2] * sin + k[2] * kdv * (1.0 - cos),
    ]
}

/// Branching-tree generator parameters. Child vessels shrink geometrically
/// in diameter and length; directions fan out around the parent direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub root_start_mm: [f64; 3],
    pub root_direction: [f64; 3],
    pub root_length_mm: f64,
    pub root_diameter_mm: f64,
    /// Branching levels below the root (0 = root only).
    pub generations: usize,
    /// Children per branch point.
    pub branching: usize,
    /// Child diameter = parent diameter × decay; must be < 1.
    pub diameter_decay: f64,
    /// Child length = parent length × decay.
    pub length_decay: f64,
    /// Polar angle of children away from the parent direction, degrees.
    pub spread_angle_deg: f64,
    /// Uniform relative jitter on child lengths (± fraction).
    pub length_jitter: f64,
    /// Uniform relative jitter on child diameters (± fraction).
    pub diameter_jitter: f64,
    /// Random bend applied at intermediate polyline points, degrees.
    pub bend_deg: f64,
    /// Points per segment centerline (≥ 2; > 2 gives gently curved vessels).
    pub polyline_points: usize,
    /// Blood speed in the root, mm/s.
    pub flow_speed_mm_s: f64,
    /// Child speed = parent speed × decay.
    pub flow_speed_decay: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            root_start_mm: [-2.4, -0.6, 4.0],
            root_direction: [1.0, 0.25, 0.35],
            root_length_mm: 1.6,
            root_diameter_mm: 0.36,
            generations: 7,
            branching: 2,
            diameter_decay: 0.84,
            length_decay: 0.95,
            spread_angle_deg: 32.0,
            length_jitter: 0.06,
            diameter_jitter: 0.03,
            bend_deg: 7.0,
            polyline_points: 3,
            flow_speed_mm_s: 8.0,
            flow_speed_decay: 0.9,
        }
    }
}

impl TreeParams {
    /// Parameter set tuned so the diameter-binned length distribution of the
    /// generated network matches the published tumor regime: roughly half of
    /// the cumulative length in 0.08–0.16 mm vessels and roughly three
    /// quarters below 0.2 mm.
    pub fn paper_calibrated() -> Self {
        Self {
            root_start_mm: [-2.4, -0.6, 4.0],
            root_direction: [1.0, 0.25, 0.35],
            root_length_mm: 1.45,
            root_diameter_mm: 0.30,
            generations: 6,
            branching: 3,
            diameter_decay: 0.80,
            length_decay: 0.395,
            spread_angle_deg: 32.0,
            length_jitter: 0.18,
            diameter_jitter: 0.14,
            bend_deg: 6.0,
            polyline_points: 3,
            flow_speed_mm_s: 8.0,
            flow_speed_decay: 0.9,
        }
    }
}

/// Grow a deterministic branching tree. Same seed, same tree.
pub fn generate_tree(seed: u64, params: &TreeParams) -> Result<VesselGraph, PhantomError> {
    if params.diameter_decay >= 1.0 {
        return Err(PhantomError::NonTerminatingTree(params.diameter_decay));
    }
    if params.branching < 1 || params.polyline_points < 2 {
        return Err(PhantomError::InvalidParams(
            "branching >= 1 and polyline_points >= 2 required".into(),
        ));
    }
    if !(params.root_length_mm > 0.0) || !(params.root_diameter_mm > 0.0) {
        return Err(PhantomError::InvalidParams(
            "root length and diameter must be positive".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = VesselGraph::default();

    struct Tip {
        start: [f64; 3],
        dir: [f64; 3],
        length: f64,
        diameter: f64,
        speed: f64,
        generation: usize,
        parent: Option<usize>,
    }

    let mut frontier = vec![Tip {
        start: params.root_start_mm,
        dir: normalize(params.root_direction),
        length: params.root_length_mm,
        diameter: params.root_diameter_mm,
        speed: params.flow_speed_mm_s,
        generation: 0,
        parent: None,
    }];

    while let Some(tip) = frontier.pop() {
        // build a gently bent polyline
        let n_pts = params.polyline_points;
        let mut line = Vec::with_capacity(n_pts);
        let mut p = tip.start;
        let mut d = tip.dir;
        line.push(p);
        let step = tip.length / (n_pts - 1) as f64;
        for _ in 1..n_pts {
            if params.bend_deg > 0.0 {
                d = jitter_direction(&mut rng, d, params.bend_deg);
            }
            p = [p[0] + d[0] * step, p[1] + d[1] * step, p[2] + d[2] * step];
            line.push(p);
        }
        let id = graph.segments.len();
        graph.segments.push(VesselSegment {
            length_mm: polyline_length(&line),
            mean_diameter_mm: tip.diameter,
            flow_speed_mm_s: tip.speed,
            centerline_mm: line.clone(),
        });
        if let Some(parent) = tip.parent {
            graph.connectivity.push((parent, id));
        }

        if tip.generation < params.generations {
            let end = *line.last().unwrap();
            for _ in 0..params.branching {
                let child_dir = spread_direction(&mut rng, d, params.spread_angle_deg);
                let lj = 1.0 + params.length_jitter * rng.gen_range(-1.0..1.0);
                let dj = 1.0 + params.diameter_jitter * rng.gen_range(-1.0..1.0);
                frontier.push(Tip {
                    start: end,
                    dir: child_dir,
                    length: tip.length * params.length_decay * lj,
                    diameter: tip.diameter * params.diameter_decay * dj,
                    speed: tip.speed * params.flow_speed_decay,
                    generation: tip.generation + 1,
                    parent: Some(id),
                });
            }
        }
    }
    Ok(graph)
}

/// Rotate `dir` away from itself by `polar_deg` at a random azimuth.
fn spread_direction(rng: &mut ChaCha8Rng, dir: [f64; 3], polar_deg: f64) -> [f64; 3] {
    let (n1, n2) = normal_basis(dir);
    let az = rng.gen_range(0.0..std::f64::consts::TAU);
    let polar = polar_deg.to_radians();
    let (sp, cp) = (polar.sin(), polar.cos());
    normalize([
        dir[0] * cp + (n1[0] * az.cos() + n2[0] * az.sin()) * sp,
        dir[1] * cp + (n1[1] * az.cos() + n2[1] * az.sin()) * sp,
        dir[2] * cp + (n1[2] * az.cos() + n2[2] * az.sin()) * sp,
    ])
}

fn jitter_direction(rng: &mut ChaCha8Rng, dir: [f64; 3], max_deg: f64) -> [f64; 3] {
    let polar = rng.gen_range(0.0..max_deg);
    spread_direction(rng, dir, polar)
}

/// Bolus kinetics for the perfusion field: a gamma-variate wash-in delayed by
/// transit time from the tree root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BolusParams {
    /// Arrival time of contrast at the tree root, s.
    pub start_delay_s: f64,
    /// Time to peak after local arrival, s.
    pub peak_time_s: f64,
    /// Gamma-variate shape exponent.
    pub shape_alpha: f64,
    /// Peak intensity, arbitrary units.
    pub amplitude: f64,
    /// Standard deviation of the baseline noise floor.
    pub baseline_noise_sd: f64,
}

impl Default for BolusParams {
    fn default() -> Self {
        Self {
            start_delay_s: 2.0,
            peak_time_s: 8.0,
            shape_alpha: 2.0,
            amplitude: 100.0,
            baseline_noise_sd: 0.5,
        }
    }
}

/// Complete phantom description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub tumor: Ellipsoid,
    pub tree: VesselGraph,
    pub tissue_scatterer_density_per_mm3: f64,
    pub blood_scatterer_density_per_mm3: f64,
    pub tissue_to_blood_amplitude_ratio_db: f64,
    pub bolus: BolusParams,
    pub rng_seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.tissue_scatterer_density_per_mm3 >= 0.0)
            || !(self.blood_scatterer_density_per_mm3 >= 0.0)
        {
            return Err(PhantomError::InvalidParams(
                "scatterer densities must be nonnegative".into(),
            ));
        }
        if !self.tissue_to_blood_amplitude_ratio_db.is_finite() {
            return Err(PhantomError::InvalidParams(
                "amplitude ratio must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScattererLabel {
    Tissue,
    Blood,
}

/// Bookkeeping for a blood scatterer: where it sits on its vessel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloodTrack {
    pub segment: usize,
    pub arc_mm: f64,
    pub radial_mm: [f64; 2],
}

/// Point scatterers with motion state. Tissue scatterers never move; blood
/// scatterers ride their segment's centerline and wrap around at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct ScattererCloud {
    pub positions_mm: Vec<[f64; 3]>,
    pub amplitudes: Vec<f64>,
    pub velocities_mm_s: Vec<[f64; 3]>,
    pub labels: Vec<ScattererLabel>,
    tracks: Vec<Option<BloodTrack>>,
    graph: Arc<VesselGraph>,
}

impl ScattererCloud {
    /// Build a static cloud directly (no motion state). Useful for point
    /// targets and hand-made test scenes.
    pub fn from_parts(
        positions_mm: Vec<[f64; 3]>,
        amplitudes: Vec<f64>,
        velocities_mm_s: Vec<[f64; 3]>,
        labels: Vec<ScattererLabel>,
    ) -> Self {
        let n = positions_mm.len();
        assert!(
            amplitudes.len() == n && velocities_mm_s.len() == n && labels.len() == n,
            "mismatched scatterer arrays"
        );
        Self {
            positions_mm,
            amplitudes,
            velocities_mm_s,
            labels,
            tracks: vec![None; n],
            graph: Arc::new(VesselGraph::default()),
        }
    }

    /// Single unit-amplitude static scatterer at `p`.
    pub fn single_point(p: [f64; 3]) -> Self {
        Self::from_parts(
            vec![p],
            vec![1.0],
            vec![[0.0; 3]],
            vec![ScattererLabel::Tissue],
        )
    }

    pub fn len(&self) -> usize {
        self.positions_mm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions_mm.is_empty()
    }

    pub fn blood_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l == ScattererLabel::Blood)
            .count()
    }
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Seed tissue scatterers uniformly in the tumor ellipsoid and blood
/// scatterers uniformly inside the vessel tubes. Amplitudes are zero-mean
/// Gaussian with RMS set by the configured tissue/blood ratio.
pub fn seed_scatterers(spec: &PhantomSpec) -> Result<ScattererCloud, PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let graph = Arc::new(spec.tree.clone());

    let mut cloud = ScattererCloud {
        positions_mm: Vec::new(),
        amplitudes: Vec::new(),
        velocities_mm_s: Vec::new(),
        labels: Vec::new(),
        tracks: Vec::new(),
        graph: graph.clone(),
    };

    // tissue: rejection-sample the ellipsoid bounding box
    let n_tissue = sample_poisson(
        &mut rng,
        spec.tissue_scatterer_density_per_mm3 * spec.tumor.volume_mm3(),
    );
    let tissue_amp = Normal::new(0.0, 1.0).unwrap();
    let c = spec.tumor.center_mm;
    let ax = spec.tumor.semi_axes_mm;
    let mut placed = 0;
    while placed < n_tissue {
        let p = [
            c[0] + ax[0] * rng.gen_range(-1.0..1.0),
            c[1] + ax[1] * rng.gen_range(-1.0..1.0),
            c[2] + ax[2] * rng.gen_range(-1.0..1.0),
        ];
        if !spec.tumor.contains(p) {
            continue;
        }
        cloud.positions_mm.push(p);
        cloud.amplitudes.push(tissue_amp.sample(&mut rng));
        cloud.velocities_mm_s.push([0.0; 3]);
        cloud.labels.push(ScattererLabel::Tissue);
        cloud.tracks.push(None);
        placed += 1;
    }

    // blood: per segment, Poisson count over the tube volume
    let blood_rms = 10f64.powf(-spec.tissue_to_blood_amplitude_ratio_db / 20.0);
    let blood_amp = Normal::new(0.0, blood_rms).unwrap();
    for (seg_idx, seg) in graph.segments.iter().enumerate() {
        let radius = 0.5 * seg.mean_diameter_mm;
        let tube_volume = std::f64::consts::PI * radius * radius * seg.length_mm;
        let n = sample_poisson(
            &mut rng,
            spec.blood_scatterer_density_per_mm3 * tube_volume,
        );
        for _ in 0..n {
            let arc = rng.gen_range(0.0..seg.length_mm);
            let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let radial = [r * phi.cos(), r * phi.sin()];
            let (pos, tangent) = segment_point(&seg.centerline_mm, arc, radial);
            cloud.positions_mm.push(pos);
            cloud.amplitudes.push(blood_amp.sample(&mut rng));
            cloud.velocities_mm_s.push([
                tangent[0] * seg.flow_speed_mm_s,
                tangent[1] * seg.flow_speed_mm_s,
                tangent[2] * seg.flow_speed_mm_s,
            ]);
            cloud.labels.push(ScattererLabel::Blood);
            cloud.tracks.push(Some(BloodTrack {
                segment: seg_idx,
                arc_mm: arc,
                radial_mm: radial,
            }));
        }
    }
    Ok(cloud)
}

/// Advance blood scatterers by `dt` seconds along their segment, wrapping
/// back to the segment start on exit. Tissue stays put; counts are conserved.
pub fn advance(cloud: &ScattererCloud, dt_s: f64) -> ScattererCloud {
    assert!(dt_s >= 0.0, "dt must be nonnegative");
    let mut out = cloud.clone();
    for i in 0..out.len() {
        let Some(track) = out.tracks[i] else { continue };
        let seg = &cloud.graph.segments[track.segment];
        if seg.length_mm <= 0.0 {
            continue;
        }
        let arc = (track.arc_mm + seg.flow_speed_mm_s * dt_s).rem_euclid(seg.length_mm);
        let (pos, tangent) = segment_point(&seg.centerline_mm, arc, track.radial_mm);
        out.positions_mm[i] = pos;
        out.velocities_mm_s[i] = [
            tangent[0] * seg.flow_speed_mm_s,
            tangent[1] * seg.flow_speed_mm_s,
            tangent[2] * seg.flow_speed_mm_s,
        ];
        out.tracks[i] = Some(BloodTrack {
            arc_mm: arc,
            ..track
        });
    }
    out
}

/// Visit every voxel of `grid` inside a vessel tube. The callback receives
/// (flat voxel index, segment index, arc length along the segment's
/// straight-line chord walk, distance to the centerline).
pub fn for_each_tube_voxel(
    graph: &VesselGraph,
    grid: &GridSpec,
    mut visit: impl FnMut(usize, usize, f64, f64),
) {
    for (seg_idx, seg) in graph.segments.iter().enumerate() {
        let radius = 0.5 * seg.mean_diameter_mm;
        let mut arc_prefix = 0.0;
        for w in seg.centerline_mm.windows(2) {
            let (a, b) = (w[0], w[1]);
            let seg_len = dist(a, b);
            if seg_len == 0.0 {
                continue;
            }
            // voxel bounding box of the capsule, clipped to the grid
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut outside = false;
            for ax in 0..3 {
                let min = a[ax].min(b[ax]) - radius;
                let max = a[ax].max(b[ax]) + radius;
                let lo_i = ((min - grid.origin_mm[ax]) / grid.spacing_mm[ax]).floor() as i64;
                let hi_i = ((max - grid.origin_mm[ax]) / grid.spacing_mm[ax]).ceil() as i64;
                let lo_c = lo_i.max(0);
                let hi_c = hi_i.min(grid.dims[ax] as i64 - 1);
                if lo_c > hi_c {
                    outside = true;
                    break;
                }
                lo[ax] = lo_c as usize;
                hi[ax] = hi_c as usize;
            }
            if outside {
                arc_prefix += seg_len;
                continue;
            }
            let d = direction(a, b);
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let p = grid.voxel_center(i, j, k);
                        let v = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                        let t = dot(v, d).clamp(0.0, seg_len);
                        let q = [a[0] + d[0] * t, a[1] + d[1] * t, a[2] + d[2] * t];
                        let r = dist(p, q);
                        if r <= radius {
                            visit(grid.index(i, j, k), seg_idx, arc_prefix + t, r);
                        }
                    }
                }
            }
            arc_prefix += seg_len;
        }
    }
}

/// Rasterize the vessel tubes into a boolean voxel field on `grid`.
pub fn rasterize(graph: &VesselGraph, grid: &GridSpec) -> Vec<bool> {
    let mut mask = vec![false; grid.len()];
    for_each_tube_voxel(graph, grid, |idx, _, _, _| mask[idx] = true);
    mask
}

/// Gamma-variate wash-in curve, peak 1 at `x = 1` (x = elapsed / peak time).
fn gamma_variate(x: f64, alpha: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x.powf(alpha) * (alpha * (1.0 - x)).exp()
    }
}

/// Contrast arrival time (s) for every voxel inside a vessel, infinity
/// elsewhere. Arrival = root delay + transit from root + local transit.
pub fn arrival_field(spec: &PhantomSpec, grid: &GridSpec) -> Vec<f64> {
    let delays = spec.tree.segment_start_delays_s();
    let mut arrival = vec![f64::INFINITY; grid.len()];
    for_each_tube_voxel(&spec.tree, grid, |idx, seg_idx, arc, _| {
        let seg = &spec.tree.segments[seg_idx];
        let local = if seg.flow_speed_mm_s > 0.0 {
            arc / seg.flow_speed_mm_s
        } else {
            f64::INFINITY
        };
        let t = spec.bolus.start_delay_s + delays[seg_idx] + local;
        if t < arrival[idx] {
            arrival[idx] = t;
        }
    });
    arrival
}

/// Bolus intensity field at time `t`: a delayed gamma-variate inside the
/// vessels on top of a baseline noise floor. Deterministic for a given
/// (spec seed, t).
pub fn bolus_intensity(spec: &PhantomSpec, t_s: f64, grid: &GridSpec) -> Volume {
    bolus_intensity_with_arrival(spec, t_s, grid, &arrival_field(spec, grid))
}

/// Same as [`bolus_intensity`] with a precomputed arrival field, for movie
/// rendering without re-rasterizing every frame.
pub fn bolus_intensity_with_arrival(
    spec: &PhantomSpec,
    t_s: f64,
    grid: &GridSpec,
    arrival: &[f64],
) -> Volume {
    assert!(t_s >= 0.0, "time must be nonnegative");
    assert_eq!(arrival.len(), grid.len());
    let mut vol = Volume::zeros(grid.clone());
    let sd = spec.bolus.baseline_noise_sd;
    if sd > 0.0 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.rng_seed ^ t_s.to_bits().rotate_left(17));
        let noise = Normal::new(0.0, sd).unwrap();
        for v in vol.data.iter_mut() {
            *v = noise.sample(&mut rng).abs();
        }
    }
    for (v, &arr) in vol.data.iter_mut().zip(arrival) {
        if arr.is_finite() {
            let x = (t_s - arr) / spec.bolus.peak_time_s;
            *v += spec.bolus.amplitude * gamma_variate(x, spec.bolus.shape_alpha);
        }
    }
    vol
}
