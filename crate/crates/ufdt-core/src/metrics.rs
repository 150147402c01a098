//! Shared measurement helpers: peak widths on profiles and volumes.

use crate::grid::Volume;

/// Full width at half maximum of a sampled profile, in `spacing` units, with
/// linear interpolation of the half-max crossings around the global peak.
/// Returns `None` when the profile never drops below half maximum on either
/// side (peak cut by the window) or is non-positive.
pub fn fwhm_1d(profile: &[f64], spacing: f64) -> Option<f64> {
    if profile.is_empty() {
        return None;
    }
    let (peak_idx, &peak) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
    if !(peak > 0.0) {
        return None;
    }
    let half = 0.5 * peak;

    let mut left = None;
    for i in (0..peak_idx).rev() {
        if profile[i] <= half {
            let frac = (half - profile[i]) / (profile[i + 1] - profile[i]);
            left = Some(i as f64 + frac);
            break;
        }
    }
    let mut right = None;
    for i in peak_idx + 1..profile.len() {
        if profile[i] <= half {
            let frac = (profile[i - 1] - half) / (profile[i - 1] - profile[i]);
            right = Some((i - 1) as f64 + frac);
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Some((r - l) * spacing),
        _ => None,
    }
}

/// FWHM along the three grid axes through a given voxel, in mm.
pub fn fwhm_axes(vol: &Volume, through: [usize; 3]) -> [Option<f64>; 3] {
    let [nx, ny, nz] = vol.grid.dims;
    let [i, j, k] = through;
    let px: Vec<f64> = (0..nx).map(|a| vol.get(a, j, k)).collect();
    let py: Vec<f64> = (0..ny).map(|a| vol.get(i, a, k)).collect();
    let pz: Vec<f64> = (0..nz).map(|a| vol.get(i, j, a)).collect();
    [
        fwhm_1d(&px, vol.grid.spacing_mm[0]),
        fwhm_1d(&py, vol.grid.spacing_mm[1]),
        fwhm_1d(&pz, vol.grid.spacing_mm[2]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    #[test]
    fn gaussian_profile_fwhm() {
        let sigma = 3.0;
        let n = 61;
        let profile: Vec<f64> = (0..n)
            .map(|i| (-((i as f64 - 30.0) / sigma).powi(2) / 2.0).exp())
            .collect();
        let fwhm = fwhm_1d(&profile, 0.5).unwrap();
        let expected = 2.0 * (2.0_f64.ln() * 2.0).sqrt() * sigma * 0.5;
        assert!((fwhm - expected).abs() < 0.02 * expected, "{fwhm} vs {expected}");
    }

    #[test]
    fn clipped_peak_returns_none() {
        let profile = vec![0.9, 0.95, 1.0];
        assert!(fwhm_1d(&profile, 1.0).is_none());
    }

    #[test]
    fn fwhm_axes_of_separable_blob() {
        let g = GridSpec::centered([0.0; 3], [0.1, 0.1, 0.2], [41, 41, 41]).unwrap();
        let v = Volume::from_fn(g, |p| {
            (-(p[0] / 0.3).powi(2) - (p[1] / 0.4).powi(2) - (p[2] / 0.5).powi(2)).exp()
        });
        let w = fwhm_axes(&v, v.argmax());
        // e^{-(x/a)^2} has FWHM = 2 a sqrt(ln 2)
        let expect = |a: f64| 2.0 * a * (2.0_f64.ln()).sqrt();
        assert!((w[0].unwrap() - expect(0.3)).abs() < 0.02);
        assert!((w[1].unwrap() - expect(0.4)).abs() < 0.02);
        assert!((w[2].unwrap() - expect(0.5)).abs() < 0.05);
    }
}
