//! Centered orthonormal 2D Fourier transforms and low-resolution simulation
//! by central k-space truncation.
//!
//! Conventions: the DC coefficient of an `H×W` grid sits at `(H/2, W/2)`
//! (integer division), and both directions are scaled by `1/√(HW)` so the
//! pair is unitary.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative bound on the imaginary residue accepted by [`ifft2c`].
pub const IMAG_RESIDUE_TOL: f64 = 1e-4;

/// Complex k-space with the DC coefficient at the grid center.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceGrid {
    data: Array2<Complex64>,
}

impl KSpaceGrid {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::shape("k-space grid must be non-empty"));
        }
        Ok(KSpaceGrid { data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    /// Index of the DC coefficient.
    pub fn center(&self) -> (usize, usize) {
        (self.height() / 2, self.width() / 2)
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            Ok(())
        } else {
            Err(Error::domain("k-space grid contains non-finite values"))
        }
    }
}

/// Integer isotropic scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ScaleFactor(usize);

impl ScaleFactor {
    pub fn new(s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::config("scale factor must be at least 1"));
        }
        Ok(ScaleFactor(s))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Fails unless `s` divides both dimensions.
    pub fn check_divides(self, height: usize, width: usize) -> Result<()> {
        if height % self.0 != 0 || width % self.0 != 0 {
            return Err(Error::config(format!(
                "scale factor {} does not divide image size {height}x{width}",
                self.0
            )));
        }
        Ok(())
    }
}

impl TryFrom<usize> for ScaleFactor {
    type Error = Error;

    fn try_from(s: usize) -> Result<Self> {
        ScaleFactor::new(s)
    }
}

impl From<ScaleFactor> for usize {
    fn from(s: ScaleFactor) -> usize {
        s.0
    }
}

enum Direction {
    Forward,
    Inverse,
}

/// Unshifted orthonormal 2D DFT, in place.
fn fft2_in_place(data: &mut Array2<Complex64>, dir: Direction) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = match dir {
        Direction::Forward => (planner.plan_fft_forward(w), planner.plan_fft_forward(h)),
        Direction::Inverse => (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h)),
    };
    let mut buf = vec![Complex64::default(); w.max(h)];
    for mut row in data.rows_mut() {
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            *b = *v;
        }
        row_fft.process(&mut buf[..w]);
        for (v, b) in row.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
    for mut col in data.columns_mut() {
        for (b, v) in buf.iter_mut().zip(col.iter()) {
            *b = *v;
        }
        col_fft.process(&mut buf[..h]);
        for (v, b) in col.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    data.mapv_inplace(|z| z * norm);
}

/// Moves index `j` to `(j + n/2) mod n` on both axes.
fn fftshift(data: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let mut out = Array2::zeros((h, w));
    for ((y, x), v) in data.indexed_iter() {
        out[((y + h / 2) % h, (x + w / 2) % w)] = *v;
    }
    out
}

/// Inverse of [`fftshift`].
fn ifftshift(data: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = data.dim();
    Array2::from_shape_fn((h, w), |(y, x)| data[((y + h / 2) % h, (x + w / 2) % w)])
}

/// Centered orthonormal 2D DFT of a real image.
pub fn fft2c(image: &Array2<f64>) -> Result<KSpaceGrid> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("image must be non-empty"));
    }
    if !image.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("image contains non-finite values"));
    }
    let complex = image.mapv(|v| Complex64::new(v, 0.0));
    let mut shifted = ifftshift(&complex);
    fft2_in_place(&mut shifted, Direction::Forward);
    KSpaceGrid::new(fftshift(&shifted))
}

/// Centered orthonormal inverse DFT, keeping the full complex result.
pub fn ifft2c_complex(k: &KSpaceGrid) -> Result<Array2<Complex64>> {
    k.check_finite()?;
    let mut shifted = ifftshift(k.data());
    fft2_in_place(&mut shifted, Direction::Inverse);
    Ok(fftshift(&shifted))
}

/// Centered orthonormal inverse DFT of a grid that encodes a real image.
///
/// The imaginary residue must stay below [`IMAG_RESIDUE_TOL`] times the
/// largest real magnitude; it is dropped afterwards.
pub fn ifft2c(k: &KSpaceGrid) -> Result<Array2<f64>> {
    let complex = ifft2c_complex(k)?;
    let real_max = complex.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    let imag_max = complex.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if imag_max > IMAG_RESIDUE_TOL * real_max {
        return Err(Error::numeric(format!(
            "inverse transform is not real: imaginary residue {imag_max:.3e} vs real peak {real_max:.3e}"
        )));
    }
    Ok(complex.mapv(|z| z.re))
}

/// Central `(H/s)×(W/s)` block of `k`, scaled by `1/s`.
///
/// The block is placed so the DC coefficient lands on the new center.
pub fn truncate_center(k: &KSpaceGrid, s: ScaleFactor) -> Result<KSpaceGrid> {
    let (h, w) = (k.height(), k.width());
    s.check_divides(h, w)?;
    let (lh, lw) = (h / s.get(), w / s.get());
    let (y0, x0) = (h / 2 - lh / 2, w / 2 - lw / 2);
    let scale = 1.0 / s.get() as f64;
    let block = Array2::from_shape_fn((lh, lw), |(y, x)| k.data[(y0 + y, x0 + x)] * scale);
    KSpaceGrid::new(block)
}

/// Simulated low-resolution acquisition: keep the central k-space block and
/// transform back.
///
/// For even block sizes the lowest (Nyquist) row and column of the block
/// have no conjugate partner inside it, so the inverse carries an imaginary
/// part; the real part is returned, which equals averaging that line with
/// its mirror.
pub fn degrade(hr: &Array2<f64>, s: ScaleFactor) -> Result<Array2<f64>> {
    let (h, w) = hr.dim();
    s.check_divides(h, w)?;
    let k = fft2c(hr)?;
    let lr = truncate_center(&k, s)?;
    Ok(ifft2c_complex(&lr)?.mapv(|z| z.re))
}

/// Embeds a centered low-resolution grid in a zero `(s·h)×(s·w)` grid,
/// scaled by `s`.
///
/// Unpaired Nyquist lines of an even-sized block are mirrored onto the
/// opposite edge so the padded grid is conjugate symmetric whenever the
/// block came from a real image.
pub fn zero_pad_center(k: &KSpaceGrid, s: ScaleFactor) -> Result<KSpaceGrid> {
    let (lh, lw) = (k.height(), k.width());
    let (h, w) = (lh * s.get(), lw * s.get());
    let (y0, x0) = (h / 2 - lh / 2, w / 2 - lw / 2);
    let scale = s.get() as f64;
    let mut out = Array2::<Complex64>::zeros((h, w));
    let mirror_y = s.get() > 1 && lh % 2 == 0;
    let mirror_x = s.get() > 1 && lw % 2 == 0;
    for ((y, x), v) in k.data.indexed_iter() {
        let val = *v * scale;
        let ty = y0 + y;
        let tx = x0 + x;
        out[(ty, tx)] = val;
        let my = mirror_y && y == 0;
        let mx = mirror_x && x == 0;
        if my {
            out[(ty + lh, tx)] = val;
        }
        if mx {
            out[(ty, tx + lw)] = val;
        }
        if my && mx {
            out[(ty + lh, tx + lw)] = val;
        }
    }
    KSpaceGrid::new(out)
}

/// Zero-filled k-space interpolation of a low-resolution image to
/// `s`-times its size. Used as the non-learned baseline.
pub fn zero_fill_upsample(lr: &Array2<f64>, s: ScaleFactor) -> Result<Array2<f64>> {
    let k = fft2c(lr)?;
    let padded = zero_pad_center(&k, s)?;
    Ok(ifft2c_complex(&padded)?.mapv(|z| z.re))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0))
    }

    fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_image_has_only_dc() {
        let c = 0.37;
        let k = fft2c(&Array2::from_elem((4, 4), c)).unwrap();
        assert_eq!(k.center(), (2, 2));
        for ((y, x), z) in k.data().indexed_iter() {
            if (y, x) == (2, 2) {
                assert!((z.re - 4.0 * c).abs() < 1e-12 && z.im.abs() < 1e-12);
            } else {
                assert!(z.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn single_pixel_is_identity() {
        let k = fft2c(&Array2::from_elem((1, 1), 2.5)).unwrap();
        assert!((k.data()[(0, 0)] - Complex64::new(2.5, 0.0)).norm() < 1e-15);
        assert_eq!(ifft2c(&k).unwrap()[(0, 0)], 2.5);
    }

    #[test]
    fn round_trip_odd_and_even_sizes() {
        for (h, w) in [(16, 16), (5, 7), (6, 9)] {
            let x = random_image(h, w, 3);
            let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
            assert!(max_abs(&x, &back) < 1e-5);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = Array2::zeros((4, 4));
        x[(1, 1)] = f64::NAN;
        assert!(matches!(fft2c(&x), Err(Error::Domain(_))));
        let mut k = KSpaceGrid::zeros(2, 2).unwrap();
        k.data_mut()[(0, 0)] = Complex64::new(f64::INFINITY, 0.0);
        assert!(ifft2c(&k).is_err());
    }

    #[test]
    fn zero_and_dc_only_grids_invert_analytically() {
        assert!(ifft2c(&KSpaceGrid::zeros(6, 4).unwrap())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let c = 0.6;
        let mut k = KSpaceGrid::zeros(6, 4).unwrap();
        let center = k.center();
        k.data_mut()[center] = Complex64::new(24f64.sqrt() * c, 0.0);
        let img = ifft2c(&k).unwrap();
        assert!(img.iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn ifft2c_rejects_non_hermitian_grid() {
        let mut k = KSpaceGrid::zeros(4, 4).unwrap();
        k.data_mut()[(2, 2)] = Complex64::new(0.0, 1.0);
        assert!(matches!(ifft2c(&k), Err(Error::Numeric(_))));
    }

    #[test]
    fn truncation_slices_and_scales() {
        let data = Array2::from_shape_fn((4, 4), |(y, x)| Complex64::new((y * 4 + x) as f64, 1.0));
        let k = KSpaceGrid::new(data.clone()).unwrap();
        assert_eq!(truncate_center(&k, ScaleFactor::new(1).unwrap()).unwrap(), k);
        let t = truncate_center(&k, ScaleFactor::new(2).unwrap()).unwrap();
        assert_eq!(t.height(), 2);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(t.data()[(y, x)], data[(y + 1, x + 1)] * 0.5);
            }
        }
    }

    #[test]
    fn truncation_keeps_dc_at_center() {
        let mut k = KSpaceGrid::zeros(8, 8).unwrap();
        k.data_mut()[(4, 4)] = Complex64::new(3.0, 0.0);
        let t = truncate_center(&k, ScaleFactor::new(2).unwrap()).unwrap();
        for ((y, x), z) in t.data().indexed_iter() {
            let want = if (y, x) == (2, 2) { 1.5 } else { 0.0 };
            assert_eq!(z.re, want);
        }
    }

    #[test]
    fn non_divisible_scale_is_config_error() {
        let k = KSpaceGrid::zeros(6, 6).unwrap();
        assert!(matches!(
            truncate_center(&k, ScaleFactor::new(4).unwrap()),
            Err(Error::Config(_))
        ));
        assert!(ScaleFactor::new(0).is_err());
        assert!(degrade(&Array2::zeros((65, 65)), ScaleFactor::new(2).unwrap()).is_err());
    }

    #[test]
    fn constant_image_degrades_to_same_constant() {
        let c = 0.42;
        let lr = degrade(&Array2::from_elem((8, 8), c), ScaleFactor::new(2).unwrap()).unwrap();
        assert_eq!(lr.dim(), (4, 4));
        assert!(lr.iter().all(|v| (v - c).abs() < 1e-5));
    }

    #[test]
    fn scale_one_is_identity() {
        let x = random_image(12, 10, 9);
        let y = degrade(&x, ScaleFactor::new(1).unwrap()).unwrap();
        assert!(max_abs(&x, &y) < 1e-5);
    }

    #[test]
    fn upsample_then_degrade_is_idempotent() {
        for (size, s) in [(8, 2), (12, 3), (16, 4)] {
            let s = ScaleFactor::new(s).unwrap();
            let lr = degrade(&random_image(size, size, 5), s).unwrap();
            let up = zero_fill_upsample(&lr, s).unwrap();
            assert_eq!(up.dim(), (size, size));
            let again = degrade(&up, s).unwrap();
            assert!(max_abs(&lr, &again) < 1e-4);
        }
    }

    #[test]
    fn zero_fill_upsample_of_hermitian_block_is_real() {
        let s = ScaleFactor::new(2).unwrap();
        let lr = random_image(6, 6, 11);
        let padded = zero_pad_center(&fft2c(&lr).unwrap(), s).unwrap();
        assert!(ifft2c(&padded).is_ok());
    }
}
