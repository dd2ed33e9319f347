use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::denoiser::{check_finite, Grid};
use crate::error::{Error, Result};

/// Power spectrum `|F(u, v)|^2` of one channel with the zero frequency moved
/// to index `(H/2, W/2)`.
pub fn centered_power_spectrum(channel: ArrayView2<'_, f64>) -> Array2<f64> {
    let (h, w) = channel.dim();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = channel.iter().map(|&v| Complex::new(v, 0.0)).collect();

    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }

    let (cy, cx) = (h / 2, w / 2);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[(y + cy) % h, (x + cx) % w]] = buf[y * w + x].norm_sqr();
        }
    }
    out
}

/// Fraction of spectral energy beyond `radius_fraction` of the Nyquist radius,
/// averaged over channels.
///
/// Radii are normalized per axis so that the Nyquist frequency of each axis
/// sits at 1. A channel with no energy contributes 0.
pub fn high_freq_energy(image: &Grid, radius_fraction: f64) -> Result<f64> {
    check_finite(image, "image")?;
    if !(radius_fraction > 0.0 && radius_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "radius fraction {radius_fraction} outside (0, 1)"
        )));
    }
    let channels = image.shape()[0];
    if channels == 0 || image.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let mut acc = 0.0;
    for channel in image.outer_iter() {
        let power = centered_power_spectrum(channel);
        let (h, w) = power.dim();
        let (cy, cx) = (h / 2, w / 2);
        let (ny, nx) = (h as f64 / 2.0, w as f64 / 2.0);
        let mut total = 0.0;
        let mut high = 0.0;
        for ((y, x), &p) in power.indexed_iter() {
            total += p;
            let fy = (y as f64 - cy as f64) / ny;
            let fx = (x as f64 - cx as f64) / nx;
            if (fy * fy + fx * fx).sqrt() > radius_fraction {
                high += p;
            }
        }
        if total > 0.0 {
            acc += high / total;
        }
    }
    Ok(acc / channels as f64)
}
