//! Evaluation metrics: NRMSE, PSNR, SSIM on magnitude images, and mean
//! absolute field error in Hz over a support mask. Masked values are the
//! headline numbers; whole-image values ride along in the report.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::ComplexImage;

/// Magnitude image of a complex image.
pub fn magnitude(img: &ComplexImage) -> Array2<f64> {
    img.mapv(|v| v.norm())
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// ||est - ref|| / ||ref|| over all pixels.
pub fn nrmse(est: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    check_same_shape(est, reference)?;
    let denom: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("nrmse of a zero reference".into()));
    }
    let num: f64 = est
        .iter()
        .zip(reference.iter())
        .map(|(e, r)| (e - r) * (e - r))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// 20 log10(max(ref) / rmse); +infinity when the images coincide.
pub fn psnr(est: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    check_same_shape(est, reference)?;
    let peak = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mse: f64 = est
        .iter()
        .zip(reference.iter())
        .map(|(e, r)| (e - r) * (e - r))
        .sum::<f64>()
        / est.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// Mean |est - ref| over masked pixels, in Hz.
pub fn b0_mae(est: &Array2<f64>, reference: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    check_same_shape(est, reference)?;
    if mask.dim() != est.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs field {:?}",
            mask.dim(),
            est.dim()
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((&e, &r), &m) in est.iter().zip(reference.iter()).zip(mask.iter()) {
        if m {
            acc += (e - r).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("field error over an empty mask".into()));
    }
    Ok(acc / count as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            let v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Local SSIM map over all centers where the full 11x11 window fits,
/// shape (h - 10, w - 10).
fn ssim_map(est: &Array2<f64>, reference: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_shape(est, reference)?;
    let (h, w) = est.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::UndefinedMetric(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range == 0.0 {
        // flat reference: identical images are perfectly similar, anything
        // else has no meaningful dynamic range to compare against
        return if est == reference {
            Ok(Array2::ones((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1)))
        } else {
            Err(Error::UndefinedMetric(
                "ssim against a constant reference".into(),
            ))
        };
    }
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let win = gaussian_window();
    let mut map = Array2::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for ci in 0..=h - SSIM_WINDOW {
        for cj in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..SSIM_WINDOW {
                for dj in 0..SSIM_WINDOW {
                    let g = win[di * SSIM_WINDOW + dj];
                    let x = est[[ci + di, cj + dj]];
                    let y = reference[[ci + di, cj + dj]];
                    mx += g * x;
                    my += g * y;
                    mxx += g * x * x;
                    myy += g * y * y;
                    mxy += g * x * y;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cxy = mxy - mx * my;
            map[[ci, cj]] = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(map)
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03,
/// dynamic range from the reference).
pub fn ssim(est: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    let map = ssim_map(est, reference)?;
    Ok(map.mean().unwrap())
}

/// NRMSE restricted to masked pixels.
pub fn nrmse_masked(
    est: &Array2<f64>,
    reference: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<f64> {
    check_same_shape(est, reference)?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut any = false;
    for ((&e, &r), &m) in est.iter().zip(reference.iter()).zip(mask.iter()) {
        if m {
            num += (e - r) * (e - r);
            den += r * r;
            any = true;
        }
    }
    if !any {
        return Err(Error::UndefinedMetric("nrmse over an empty mask".into()));
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("nrmse of a zero reference".into()));
    }
    Ok((num / den).sqrt())
}

/// PSNR restricted to masked pixels (peak over the masked reference).
pub fn psnr_masked(
    est: &Array2<f64>,
    reference: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<f64> {
    check_same_shape(est, reference)?;
    let mut peak = f64::NEG_INFINITY;
    let mut mse = 0.0;
    let mut count = 0usize;
    for ((&e, &r), &m) in est.iter().zip(reference.iter()).zip(mask.iter()) {
        if m {
            peak = peak.max(r);
            mse += (e - r) * (e - r);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("psnr over an empty mask".into()));
    }
    let mse = mse / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// Mean local SSIM over window centers whose center pixel is masked.
pub fn ssim_masked(
    est: &Array2<f64>,
    reference: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<f64> {
    let map = ssim_map(est, reference)?;
    let half = SSIM_WINDOW / 2;
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((ci, cj), &v) in map.indexed_iter() {
        if mask[[ci + half, cj + half]] {
            acc += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "ssim mask excludes every full window".into(),
        ));
    }
    Ok(acc / count as f64)
}

/// JSON-nullable dB value: non-finite serializes as null (the +infinity
/// sentinel for identical images).
mod db_sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// One set of metric readings (either masked or whole-image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub nrmse: f64,
    #[serde(with = "db_sentinel")]
    pub psnr_db: f64,
    pub ssim: f64,
    /// Absent when no field estimate exists.
    pub b0_mae_hz: Option<f64>,
}

/// Identifies what was evaluated; carries both metric variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub views: usize,
    pub accel: usize,
    pub seed: u64,
    pub masked: MetricValues,
    pub unmasked: MetricValues,
}

/// Evaluation summary; headline values are masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nrmse: f64,
    #[serde(with = "db_sentinel")]
    pub psnr_db: f64,
    pub ssim: f64,
    /// Absent when no field estimate exists.
    pub b0_mae_hz: Option<f64>,
    pub mask_pixels: usize,
    pub scenario: Scenario,
}

/// Computes the full report for an image pair (complex, magnitudes taken
/// here), an optional field pair, and a support mask.
pub fn evaluate(
    est_image: &ComplexImage,
    ref_image: &ComplexImage,
    est_field: Option<&Array2<f64>>,
    ref_field: &Array2<f64>,
    mask: &Array2<bool>,
    views: usize,
    accel: usize,
    seed: u64,
) -> Result<MetricReport> {
    let est_mag = magnitude(est_image);
    let ref_mag = magnitude(ref_image);
    let mask_pixels = mask.iter().filter(|&&m| m).count();
    let all = Array2::from_elem(mask.dim(), true);
    let unmasked = MetricValues {
        nrmse: nrmse(&est_mag, &ref_mag)?,
        psnr_db: psnr(&est_mag, &ref_mag)?,
        ssim: ssim(&est_mag, &ref_mag)?,
        b0_mae_hz: est_field
            .map(|f| b0_mae(f, ref_field, &all))
            .transpose()?,
    };
    let masked = MetricValues {
        nrmse: nrmse_masked(&est_mag, &ref_mag, mask)?,
        psnr_db: psnr_masked(&est_mag, &ref_mag, mask)?,
        ssim: ssim_masked(&est_mag, &ref_mag, mask)?,
        b0_mae_hz: est_field
            .map(|f| b0_mae(f, ref_field, mask))
            .transpose()?,
    };
    Ok(MetricReport {
        nrmse: masked.nrmse,
        psnr_db: masked.psnr_db,
        ssim: masked.ssim,
        b0_mae_hz: masked.b0_mae_hz,
        mask_pixels,
        scenario: Scenario {
            views,
            accel,
            seed,
            masked,
            unmasked,
        },
    })
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

    #[test]
    fn nrmse_examples() {
        let r = random_image(8, 8, 1);
        assert_eq!(nrmse(&r, &r).unwrap(), 0.0);
        let double = r.mapv(|v| 2.0 * v);
        assert!((nrmse(&double, &r).unwrap() - 1.0).abs() < 1e-12);
        // unit-norm reference plus constant c: nrmse = c * sqrt(P)
        let mut unit = random_image(4, 4, 2);
        let norm = unit.iter().map(|v| v * v).sum::<f64>().sqrt();
        unit.mapv_inplace(|v| v / norm);
        let c = 0.05;
        let shifted = unit.mapv(|v| v + c);
        let expect = c * 16f64.sqrt();
        assert!((nrmse(&shifted, &unit).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn nrmse_zero_reference_errors() {
        let z = Array2::zeros((4, 4));
        let e = random_image(4, 4, 3);
        assert!(matches!(nrmse(&e, &z), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn psnr_examples() {
        let r = random_image(8, 8, 4);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        // rmse = peak/100 -> 40 dB: add a constant error of that size
        let peak = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e40 = r.mapv(|v| v + peak / 100.0);
        assert!((psnr(&e40, &r).unwrap() - 40.0).abs() < 1e-9);
        let e20 = r.mapv(|v| v + peak / 10.0);
        assert!((psnr(&e20, &r).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn nrmse_psnr_monotone_relation() {
        let r = random_image(8, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut prev: Option<(f64, f64)> = None;
        for scale in [0.01, 0.05, 0.2] {
            let e = r.mapv(|v| v + rng.gen_range(-1.0..1.0) * scale);
            let n = nrmse(&e, &r).unwrap();
            let p = psnr(&e, &r).unwrap();
            if let Some((pn, pp)) = prev {
                assert!(n > pn);
                assert!(p < pp);
            }
            prev = Some((n, p));
        }
    }

    #[test]
    fn permutation_covariance() {
        let r = random_image(6, 6, 7);
        let e = random_image(6, 6, 8);
        let mask = Array2::from_shape_fn((6, 6), |(i, j)| (i + j) % 3 != 0);
        // fixed permutation: reverse of the flat order
        let perm = |a: &Array2<f64>| {
            let mut v: Vec<f64> = a.iter().cloned().collect();
            v.reverse();
            Array2::from_shape_vec((6, 6), v).unwrap()
        };
        let perm_mask = {
            let mut v: Vec<bool> = mask.iter().cloned().collect();
            v.reverse();
            Array2::from_shape_vec((6, 6), v).unwrap()
        };
        assert!((nrmse(&e, &r).unwrap() - nrmse(&perm(&e), &perm(&r)).unwrap()).abs() < 1e-12);
        assert!((psnr(&e, &r).unwrap() - psnr(&perm(&e), &perm(&r)).unwrap()).abs() < 1e-12);
        let a = b0_mae(&e, &r, &mask).unwrap();
        let b = b0_mae(&perm(&e), &perm(&r), &perm_mask).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ssim_identical_is_one() {
        let r = random_image(16, 16, 9);
        assert!((ssim(&r, &r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_contrast_is_low() {
        // structured image with strong edges, inverted about its midpoint
        let r = Array2::from_shape_fn((32, 32), |(i, j)| {
            if (i / 4 + j / 4) % 2 == 0 {
                1.0
            } else {
                0.2
            }
        });
        let inv = r.mapv(|v| -v + 1.2);
        let s = ssim(&inv, &r).unwrap();
        assert!(s < 0.5, "ssim={s}");
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let r = Array2::from_shape_fn((24, 24), |(i, j)| {
            ((i as f64 / 5.0).sin() + (j as f64 / 3.0).cos() + 2.0) / 4.0
        });
        let noisy = |sigma: f64, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            r.mapv(|v| v + rng.gen_range(-1.0..1.0) * sigma)
        };
        let floor = ssim(&noisy(10.0, 10), &r).unwrap();
        let mut prev = 1.0;
        for (sigma, seed) in [(0.01, 11), (0.05, 12), (0.15, 13)] {
            let s = ssim(&noisy(sigma, seed), &r).unwrap();
            assert!(s < prev, "sigma={sigma}: {s} !< {prev}");
            assert!(s > floor, "sigma={sigma}: {s} !> floor {floor}");
            assert!(s < 1.0);
            prev = s;
        }
    }

    #[test]
    fn ssim_small_image_errors() {
        let r = random_image(8, 8, 14);
        assert!(matches!(ssim(&r, &r), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ssim_constant_reference() {
        let r = Array2::from_elem((12, 12), 0.7);
        assert_eq!(ssim(&r, &r).unwrap(), 1.0);
        let e = random_image(12, 12, 15);
        assert!(ssim(&e, &r).is_err());
    }

    #[test]
    fn b0_mae_examples() {
        let r = random_image(8, 8, 16).mapv(|v| v * 100.0);
        let mask = Array2::from_elem((8, 8), true);
        assert_eq!(b0_mae(&r, &r, &mask).unwrap(), 0.0);
        let offset = r.mapv(|v| v + 2.0);
        assert!((b0_mae(&offset, &r, &mask).unwrap() - 2.0).abs() < 1e-12);
        let checker = Array2::from_shape_fn((8, 8), |(i, j)| {
            r[[i, j]] + if (i + j) % 2 == 0 { 1.0 } else { -1.0 }
        });
        assert!((b0_mae(&checker, &r, &mask).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn b0_mae_ignores_outside_mask() {
        let r = random_image(8, 8, 17);
        let mask = Array2::from_shape_fn((8, 8), |(i, _)| i < 4);
        let mut e = r.clone();
        for i in 4..8 {
            for j in 0..8 {
                e[[i, j]] += 1e6;
            }
        }
        assert!((b0_mae(&e, &r, &mask).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn b0_mae_empty_mask_errors() {
        let r = random_image(4, 4, 18);
        let mask = Array2::from_elem((4, 4), false);
        assert!(matches!(
            b0_mae(&r, &r, &mask),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn masked_variants_match_unmasked_on_full_mask() {
        let r = random_image(16, 16, 19);
        let e = random_image(16, 16, 20);
        let full = Array2::from_elem((16, 16), true);
        assert!(
            (nrmse(&e, &r).unwrap() - nrmse_masked(&e, &r, &full).unwrap()).abs() < 1e-12
        );
        assert!((psnr(&e, &r).unwrap() - psnr_masked(&e, &r, &full).unwrap()).abs() < 1e-12);
        assert!((ssim(&e, &r).unwrap() - ssim_masked(&e, &r, &full).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        use num_complex::Complex64;
        let img = Array2::from_shape_fn((16, 16), |(i, j)| {
            Complex64::new(((i * j) % 7) as f64 / 7.0 + 0.1, 0.0)
        });
        let field = Array2::from_elem((16, 16), 5.0);
        let mask = Array2::from_elem((16, 16), true);
        let report =
            evaluate(&img, &img, Some(&field), &field, &mask, 2, 4, 42).unwrap();
        assert_eq!(report.nrmse, 0.0);
        assert_eq!(report.ssim, 1.0);
        assert_eq!(report.b0_mae_hz, Some(0.0));
        assert!(report.psnr_db.is_infinite());
        let json: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        let obj = json.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            vec!["b0_mae_hz", "mask_pixels", "nrmse", "psnr_db", "scenario", "ssim"]
        );
        // infinite psnr serializes as the null sentinel
        assert!(obj["psnr_db"].is_null());
        let scen = obj["scenario"].as_object().unwrap();
        assert!(scen.contains_key("masked"));
        assert!(scen.contains_key("unmasked"));
        // round trip restores the sentinel
        let back: MetricReport = serde_json::from_value(json).unwrap();
        assert!(back.psnr_db.is_infinite());
    }
}
