//! Image quality metrics, significance testing and error-map export.

use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Side length of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Default absolute error mapped to full white in error maps.
pub const ERROR_SATURATION: f64 = 0.2;

fn to_f64<A: Copy + Into<f64>>(a: &Array2<A>) -> Array2<f64> {
    a.mapv(Into::into)
}

fn same_shape<A, B>(a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("images differ in size: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn mse<A: Copy + Into<f64>>(pred: &Array2<A>, gt: &Array2<A>) -> Result<f64> {
    same_shape(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::shape("empty image"));
    }
    let mut acc = 0.0;
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        let d = p.into() - g.into();
        acc += d * d;
    });
    Ok(acc / pred.len() as f64)
}

/// `10·log10(max² / MSE)`; `+∞` when the images are identical.
pub fn psnr<A: Copy + Into<f64>>(pred: &Array2<A>, gt: &Array2<A>, max_val: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

/// `‖pred − gt‖² / ‖gt‖²`.
pub fn nmse<A: Copy + Into<f64>>(pred: &Array2<A>, gt: &Array2<A>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut err, mut energy) = (0.0, 0.0);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        let (p, g): (f64, f64) = (p.into(), g.into());
        err += (p - g) * (p - g);
        energy += g * g;
    });
    if energy == 0.0 {
        return Err(Error::domain("nmse is undefined for an all-zero reference"));
    }
    Ok(err / energy)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Separable valid-region filtering with the SSIM window.
fn filter_valid(img: &Array2<f64>, win: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(i, j)| (0..SSIM_WINDOW).map(|k| win[k] * img[[i, j + k]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..SSIM_WINDOW).map(|k| win[k] * rows[[i + k, j]]).sum::<f64>())
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5)
/// over all fully contained windows, dynamic range 1.
pub fn ssim<A: Copy + Into<f64>>(pred: &Array2<A>, gt: &Array2<A>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let (x, y) = (to_f64(pred), to_f64(gt));
    let win = gaussian_window();
    let mx = filter_valid(&x, &win);
    let my = filter_valid(&y, &win);
    let sxx = filter_valid(&(&x * &x), &win);
    let syy = filter_valid(&(&y * &y), &win);
    let sxy = filter_valid(&(&x * &y), &win);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    Zip::from(&mx)
        .and(&my)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .for_each(|&mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    Ok(total / mx.len() as f64)
}

/// Result of a two-sided paired t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    #[serde(with = "float_or_inf")]
    pub t: f64,
    pub p: f64,
    pub n: usize,
}

/// Paired t-test on `a − b` with `n − 1` degrees of freedom.
///
/// All-zero differences give `t = 0, p = 1`; constant nonzero differences
/// give `t = ±∞, p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::config(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("paired t-test on non-finite scores"));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, n }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                n,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::numeric(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, n })
}

/// `|pred − gt| / saturation`, clamped to `[0, 1]`.
pub fn error_map<A: Copy + Into<f64>>(pred: &Array2<A>, gt: &Array2<A>, saturation: f64) -> Result<Array2<f64>> {
    same_shape(pred, gt)?;
    if !(saturation > 0.0 && saturation.is_finite()) {
        return Err(Error::config(format!("error-map saturation must be positive, got {saturation}")));
    }
    Ok(Zip::from(pred)
        .and(gt)
        .map_collect(|&p, &g| ((p.into() - g.into()).abs() / saturation).clamp(0.0, 1.0)))
}

/// Quantises `[0, 1]` values to 8-bit grey levels.
pub fn to_gray8<A: Copy + Into<f64>>(img: &Array2<A>) -> image::GrayImage {
    let (h, w) = img.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v: f64 = img[[y as usize, x as usize]].into();
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        image::Luma([(v * 255.0).round() as u8])
    })
}

pub fn save_png<A: Copy + Into<f64>>(img: &Array2<A>, path: &Path) -> Result<()> {
    to_gray8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Scores for one reconstructed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl SampleMetrics {
    pub fn compute<A: Copy + Into<f64>>(id: impl Into<String>, pred: &Array2<A>, gt: &Array2<A>) -> Result<Self> {
        Ok(SampleMetrics {
            id: id.into(),
            psnr: psnr(pred, gt, 1.0)?,
            ssim: ssim(pred, gt)?,
            nmse: nmse(pred, gt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Per-sample records plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn new(samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("no samples to report".into()));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate {
            count: samples.len(),
            psnr: mean(|s| s.psnr),
            ssim: mean(|s| s.ssim),
            nmse: mean(|s| s.nmse),
        };
        Ok(MetricReport { samples, aggregate })
    }

    pub fn psnr_vector(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.psnr).collect()
    }

    pub fn ssim_vector(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.ssim).collect()
    }
}

/// Serialises infinities as the strings `"inf"` / `"-inf"`.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(i, j)| f(i, j))
    }

    fn textured(seed: u64) -> Array2<f64> {
        img(16, 16, |i, j| (((i * 7 + j * 13) as u64 * (seed + 3)) % 17) as f64 / 17.0)
    }

    #[test]
    fn psnr_examples() {
        let gt = textured(1);
        assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), f64::INFINITY);
        let pred = gt.mapv(|v| v + 0.1);
        assert!((psnr(&pred, &gt, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let half = psnr(&pred.mapv(|v| v * 0.5), &gt.mapv(|v| v * 0.5), 1.0).unwrap();
        assert!((half - 20.0 - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!(psnr(&gt, &img(4, 4, |_, _| 0.0), 1.0).is_err());
    }

    #[test]
    fn nmse_examples() {
        let gt = textured(2);
        assert_eq!(nmse(&gt, &gt).unwrap(), 0.0);
        assert!((nmse(&gt.mapv(|_| 0.0), &gt).unwrap() - 1.0).abs() < 1e-15);
        assert!((nmse(&gt.mapv(|v| 2.0 * v), &gt).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(nmse(&gt, &gt.mapv(|_| 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn ssim_identity_and_size_guard() {
        let a = textured(3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&img(10, 20, |_, _| 0.0), &img(10, 20, |_, _| 0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (v1, v2) = (0.3, 0.7);
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let want = (2.0 * v1 * v2 + c1) * c2 / ((v1 * v1 + v2 * v2 + c1) * c2);
        let got = ssim(&img(12, 12, |_, _| v1), &img(12, 12, |_, _| v2)).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let a = textured(4);
        let b = textured(5);
        let win = gaussian_window();
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=16 - SSIM_WINDOW {
            for j in 0..=16 - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let wt = win[u] * win[v];
                        let (x, y) = (a[[i + u, j + v]], b[[i + u, j + v]]);
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn t_test_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_t_test(&a, &a).unwrap().p, 1.0);
        let r = paired_t_test(&[2.0; 4], &[1.0; 4]).unwrap();
        assert!(r.p < 1e-12 && r.t == f64::INFINITY);
        let d = [1.2, 0.8, 1.0, 1.1, 0.9];
        let r = paired_t_test(&d, &[0.0; 5]).unwrap();
        // mean 1, sd sqrt(0.1/4), t = 1 / (sd / √5)
        let t = 1.0 / ((0.1f64 / 4.0).sqrt() / 5f64.sqrt());
        assert!((r.t - t).abs() < 1e-9 && (r.t - 14.142).abs() < 1e-3);
        // two-sided critical value for 4 dof at 0.001 is 8.610
        assert!(r.p < 0.001);
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn t_test_p_matches_table_values() {
        // 4 dof two-sided: t = 2.776 ↔ p = 0.05, t = 4.604 ↔ p = 0.01
        let p_at = |t: f64| {
            let dist = StudentsT::new(0.0, 1.0, 4.0).unwrap();
            2.0 * dist.sf(t)
        };
        assert!((p_at(2.776) - 0.05).abs() < 1e-3);
        assert!((p_at(4.604) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn error_map_examples() {
        let gt = textured(6);
        assert!(error_map(&gt, &gt, ERROR_SATURATION).unwrap().iter().all(|&v| v == 0.0));
        let m = error_map(&gt.mapv(|v| v + 0.1), &gt, 0.2).unwrap();
        assert!(m.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let m = error_map(&gt.mapv(|v| v - 0.5), &gt, 0.2).unwrap();
        assert!(m.iter().all(|&v| v == 1.0));
        assert!(error_map(&gt, &gt, 0.0).is_err());
    }

    #[test]
    fn png_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = img(3, 5, |i, j| (i * 5 + j) as f64 / 14.0);
        save_png(&m, &path).unwrap();
        let back = image::open(&path).unwrap().to_luma8();
        assert_eq!(back.dimensions(), (5, 3));
        assert_eq!(back.get_pixel(4, 2).0[0], 255);
        assert_eq!(back.get_pixel(0, 0).0[0], 0);
    }

    #[test]
    fn report_serialises_infinite_psnr() {
        let gt = textured(7);
        let r = MetricReport::new(vec![SampleMetrics::compute("a", &gt, &gt).unwrap()]).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"psnr\":\"inf\""));
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000, shift in -0.3f64..0.3) {
            let a = textured(seed);
            let b = img(16, 16, |i, j| a[[(i + 3) % 16, j]] * 0.8 + shift);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn psnr_decreases_with_mse(e1 in 0.001f64..0.5, e2 in 0.001f64..0.5) {
            prop_assume!((e1 - e2).abs() > 1e-6);
            let gt = textured(1);
            let p1 = psnr(&gt.mapv(|v| v + e1), &gt, 1.0).unwrap();
            let p2 = psnr(&gt.mapv(|v| v + e2), &gt, 1.0).unwrap();
            prop_assert_eq!(e1 < e2, p1 > p2);
        }

        #[test]
        fn t_test_swap_negates_t(d in proptest::collection::vec(-5f64..5.0, 2..12)) {
            let zeros = vec![0.0; d.len()];
            let ab = paired_t_test(&d, &zeros).unwrap();
            let ba = paired_t_test(&zeros, &d).unwrap();
            prop_assert!(ab.t == -ba.t || (ab.t == 0.0 && ba.t == 0.0));
            prop_assert_eq!(ab.p, ba.p);
        }
    }
}
