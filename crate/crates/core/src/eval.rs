//! Quantitative protocols: image-quality metrics, anomaly-map entropy,
//! pixel-level detection against lesion masks, threshold calibration and
//! the histogram-matching baseline.

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::perceptual::FeatureExtractor;

/// Mean absolute difference.
pub fn mae(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    if !a.same_extents(b) {
        return Err(Error::shape(
            "mae",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    Ok(sum / a.numel() as f64)
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;

/// Mean local structural similarity over sliding Gaussian-weighted
/// windows (7x7, sigma 1.5, k1 = 0.01, k2 = 0.03, unit data range).
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    if !a.same_extents(b) {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let weights = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = weights[dy * SSIM_WINDOW + dx];
                    let x = a.get(oy + dy, ox + dx);
                    let y = b.get(oy + dy, ox + dx);
                    mx += wgt * x;
                    my += wgt * y;
                    mxx += wgt * x * x;
                    myy += wgt * y * y;
                    mxy += wgt * x * y;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w = vec![0.0; size * size];
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            w[y * size + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Perceptual distance through the fixed extractor: features are
/// unit-normalized along channels at every position, then squared
/// differences are averaged per tap and across taps.
pub fn perceptual_distance(a: &ImageGrid, b: &ImageGrid, psi: &FeatureExtractor) -> Result<f64> {
    let fa = psi.extract(a)?;
    let fb = psi.extract(b)?;
    let eps = 1e-10;
    let mut total = 0.0;
    let mut taps = 0usize;
    for ((_, ta), (_, tb)) in fa.taps().iter().zip(fb.taps()) {
        let shape = ta.shape();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let da = ta.data();
        let db = tb.data();
        let mut tap_sum = 0.0;
        for p in 0..hw {
            let mut na = 0.0;
            let mut nb = 0.0;
            for cc in 0..c {
                na += da[cc * hw + p] * da[cc * hw + p];
                nb += db[cc * hw + p] * db[cc * hw + p];
            }
            let na = na.sqrt() + eps;
            let nb = nb.sqrt() + eps;
            for cc in 0..c {
                let d = da[cc * hw + p] / na - db[cc * hw + p] / nb;
                tap_sum += d * d;
            }
        }
        total += tap_sum / hw as f64;
        taps += 1;
    }
    Ok(total / taps as f64)
}

/// Shannon entropy (bits) of the binned value distribution of an anomaly
/// map; values must lie in [0,1].
pub fn entropy_error(values: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Config(format!("entropy needs >= 2 bins, got {bins}")));
    }
    if values.is_empty() {
        return Err(Error::Config("entropy of an empty map".into()));
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("map value {v} outside [0,1]")));
        }
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// 1 when at least `rho` of the mask pixels exceed tau
    pub tp: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binarizes the map at `tau` and scores it pixel-wise against the lesion
/// mask. The sample counts as a true positive when at least `rho` of the
/// mask pixels exceed the threshold.
pub fn detect(
    map: &ImageGrid,
    mask: &crate::image::Mask,
    tau: f64,
    rho: f64,
) -> Result<Detection> {
    if (map.height(), map.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape(
            "detect",
            format!(
                "{}x{} map vs {}x{} mask",
                map.height(),
                map.width(),
                mask.height(),
                mask.width()
            ),
        ));
    }
    let mask_size = mask.count();
    if mask_size == 0 {
        return Err(Error::Config("detect needs a non-empty lesion mask".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (&v, &m) in map.data().iter().zip(mask.data()) {
        if v > tau {
            if m {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = tp as f64 / mask_size as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Detection {
        tp: (tp as f64 / mask_size as f64) >= rho,
        precision,
        recall,
        f1,
    })
}

/// Pooled q-quantile of healthy residual values (linear interpolation).
pub fn calibrate_tau(healthy_maps: &[&ImageGrid], q: f64) -> Result<f64> {
    if healthy_maps.is_empty() {
        return Err(Error::Config("tau calibration needs >= 1 healthy map".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} outside [0,1]")));
    }
    let mut pooled: Vec<f64> = healthy_maps
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(quantile_sorted(&pooled, q))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Classic CDF specification: each content value is pushed through the
/// binned content CDF (mid-bin rank) and pulled back through the exact
/// empirical inverse CDF of the reference values.
pub fn histogram_match(
    content: &ImageGrid,
    reference: &ImageGrid,
    bins: usize,
) -> Result<ImageGrid> {
    if bins < 2 {
        return Err(Error::Config(format!(
            "histogram matching needs >= 2 bins, got {bins}"
        )));
    }
    if !content.in_unit_range() || !reference.in_unit_range() {
        return Err(Error::Config(
            "histogram matching expects values in [0,1]".into(),
        ));
    }
    let bin_of = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
    let mut hist = vec![0usize; bins];
    for &v in content.data() {
        hist[bin_of(v)] += 1;
    }
    // mid-bin cumulative rank per content bin
    let n_c = content.numel() as f64;
    let mut midrank = vec![0.0; bins];
    let mut cum = 0usize;
    for k in 0..bins {
        midrank[k] = (cum as f64 + 0.5 * hist[k] as f64) / n_c;
        cum += hist[k];
    }
    let mut ref_sorted: Vec<f64> = reference.data().to_vec();
    ref_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_r = ref_sorted.len() as f64;

    let out: Vec<f64> = content
        .data()
        .iter()
        .map(|&v| {
            let c = midrank[bin_of(v)];
            // inverse empirical CDF with mid-rank alignment
            let pos = (c * n_r - 0.5).clamp(0.0, n_r - 1.0);
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            ref_sorted[lo] * (1.0 - frac) + ref_sorted[hi] * frac
        })
        .collect();
    ImageGrid::new(content.height(), content.width(), out)
}

/// Two-sample Kolmogorov–Smirnov statistic over raw value samples.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut sa: Vec<f64> = a.to_vec();
    let mut sb: Vec<f64> = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d = 0.0f64;
    while i < sa.len() && j < sb.len() {
        // advance both sides past every sample tied at the current value
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
