//! Thin FFT helpers over rustfft: 1-D transforms, 3-D transforms on the
//! z-fastest volume layout, and analytic-signal construction.

use num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place forward FFT (unnormalized).
pub fn fft_inplace(data: &mut [Complex64]) {
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(data.len()).process(data);
}

/// In-place inverse FFT, normalized by 1/N.
pub fn ifft_inplace(data: &mut [Complex64]) {
    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(data.len()).process(data);
    let scale = 1.0 / data.len() as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}

/// Analytic signal of a real sequence via the frequency-domain Hilbert
/// construction: keep DC and Nyquist, double positive frequencies, zero
/// negative ones.
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_inplace(&mut buf);
    let half = n / 2;
    for (k, v) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == half) {
            // DC and Nyquist unchanged
        } else if k < half || (n % 2 == 1 && k == half) {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    ifft_inplace(&mut buf);
    buf
}

/// 3-D FFT over a z-fastest C-order array of shape `dims`. `inverse` applies
/// the normalized inverse transform.
pub fn fft3_inplace(data: &mut [Complex64], dims: [usize; 3], inverse: bool) {
    let [nx, ny, nz] = dims;
    assert_eq!(data.len(), nx * ny * nz);
    let mut planner = FftPlanner::new();

    // z axis: contiguous runs
    let fz = if inverse {
        planner.plan_fft_inverse(nz)
    } else {
        planner.plan_fft_forward(nz)
    };
    for run in data.chunks_exact_mut(nz) {
        fz.process(run);
    }

    // y axis: stride nz within each x plane
    let fy = if inverse {
        planner.plan_fft_inverse(ny)
    } else {
        planner.plan_fft_forward(ny)
    };
    let mut scratch = vec![Complex64::default(); ny];
    for i in 0..nx {
        let plane = i * ny * nz;
        for k in 0..nz {
            for j in 0..ny {
                scratch[j] = data[plane + j * nz + k];
            }
            fy.process(&mut scratch);
            for j in 0..ny {
                data[plane + j * nz + k] = scratch[j];
            }
        }
    }

    // x axis: stride ny*nz
    let fx = if inverse {
        planner.plan_fft_inverse(nx)
    } else {
        planner.plan_fft_forward(nx)
    };
    let stride = ny * nz;
    let mut scratch = vec![Complex64::default(); nx];
    for jk in 0..stride {
        for i in 0..nx {
            scratch[i] = data[i * stride + jk];
        }
        fx.process(&mut scratch);
        for i in 0..nx {
            data[i * stride + jk] = scratch[i];
        }
    }

    if inverse {
        let scale = 1.0 / (nx * ny * nz) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fft3_round_trip() {
        let dims = [4, 3, 5];
        let n = 60;
        let orig: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let mut buf = orig.clone();
        fft3_inplace(&mut buf, dims, false);
        fft3_inplace(&mut buf, dims, true);
        for (a, b) in buf.iter().zip(&orig) {
            assert_relative_eq!(a.re, b.re, epsilon = 1e-12);
            assert_relative_eq!(a.im, b.im, epsilon = 1e-12);
        }
    }

    #[test]
    fn fft3_delta_gives_flat_spectrum() {
        let dims = [2, 2, 2];
        let mut buf = vec![Complex64::default(); 8];
        buf[0] = Complex64::new(1.0, 0.0);
        fft3_inplace(&mut buf, dims, false);
        for v in &buf {
            assert_relative_eq!(v.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(v.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn analytic_signal_of_cosine_is_unit_modulus_phasor() {
        let n = 256;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 16.0 * i as f64 / n as f64).cos())
            .collect();
        let a = analytic_signal(&x);
        for v in &a {
            assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-9);
        }
        // real part reproduces the input
        for (av, xv) in a.iter().zip(&x) {
            assert_relative_eq!(av.re, *xv, epsilon = 1e-9);
        }
    }
}
