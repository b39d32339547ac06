//! Reference oracles for the acceptance suite.

use ndarray::Array2;
use num_complex::Complex64;

/// Brute-force degradation: keeps the centered `(H/s)×(W/s)` frequency
/// block of an orthonormal O(N²) DFT, scales it by `1/s` and inverts it onto
/// the small grid, returning the real part.
///
/// Centering phases of the forward and inverse transforms cancel, so plain
/// uncentered sums over signed frequencies suffice.
pub fn dft_degrade(x: &Array2<f64>, s: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let (lh, lw) = (h / s, w / s);
    let tau = std::f64::consts::TAU;
    let freqs = |n: usize| (0..n).map(move |i| i as f64 - (n / 2) as f64);
    let mut k = Array2::<Complex64>::zeros((lh, lw));
    for (iu, u) in freqs(lh).enumerate() {
        for (iv, v) in freqs(lw).enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for ((y, xx), &val) in x.indexed_iter() {
                let phase = -tau * (u * y as f64 / h as f64 + v * xx as f64 / w as f64);
                acc += Complex64::from_polar(val, phase);
            }
            k[(iu, iv)] = acc;
        }
    }
    let norm = 1.0 / ((h * w * lh * lw) as f64).sqrt() / s as f64;
    Array2::from_shape_fn((lh, lw), |(m, n)| {
        let mut acc = Complex64::new(0.0, 0.0);
        for (iu, u) in freqs(lh).enumerate() {
            for (iv, v) in freqs(lw).enumerate() {
                let phase = tau * (u * m as f64 / lh as f64 + v * n as f64 / lw as f64);
                acc += k[(iu, iv)] * Complex64::from_polar(1.0, phase);
            }
        }
        acc.re * norm
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_one_reproduces_input() {
        let x = Array2::from_shape_fn((4, 6), |(y, x)| (y * 6 + x) as f64 * 0.1);
        let y = dft_degrade(&x, 1);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn constant_survives() {
        let x = Array2::from_elem((8, 8), 0.7);
        assert!(dft_degrade(&x, 2).iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn single_cosine_inside_band_is_subsampled() {
        // A cosine at frequency 1 on 8 samples keeps its amplitude on 4.
        let x = Array2::from_shape_fn((8, 8), |(_, c)| (std::f64::consts::TAU * c as f64 / 8.0).cos());
        let y = dft_degrade(&x, 2);
        for ((_, c), v) in y.indexed_iter() {
            let want = (std::f64::consts::TAU * c as f64 / 4.0).cos();
            assert!((v - want).abs() < 1e-12);
        }
    }
}
