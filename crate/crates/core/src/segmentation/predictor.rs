//! Reference nucleus predictor working on the DAPI plane.
//!
//! Foreground is the Gaussian-smoothed DAPI above an Otsu threshold (with a
//! floor). Object probability is the Euclidean distance to background
//! normalized by its maximum within each connected component, so component
//! centers score 1. Ray distances march through the smoothed field and stop
//! at the sub-pixel threshold crossing.

use serde::{Deserialize, Serialize};

use super::ProbDistMaps;
use crate::error::{Error, Result};
use crate::image::{Channel, MultiChannelImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferencePredictorConfig {
    pub n_rays: usize,
    /// Gaussian pre-smoothing of DAPI in working-scale pixels.
    pub smoothing_sigma: f64,
    /// Lower bound on the foreground threshold.
    pub min_threshold: f64,
    /// Components smaller than this many pixels are dropped.
    pub min_component_area: usize,
    /// Ray marching step in pixels.
    pub ray_step: f64,
}

impl Default for ReferencePredictorConfig {
    fn default() -> Self {
        Self { n_rays: 32, smoothing_sigma: 1.0, min_threshold: 0.1, min_component_area: 20, ray_step: 0.25 }
    }
}

impl ReferencePredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rays < 3 {
            return Err(Error::config("segmentation.reference.n_rays", "must be >= 3"));
        }
        if !(self.smoothing_sigma >= 0.0) {
            return Err(Error::config("segmentation.reference.smoothing_sigma", "must be >= 0"));
        }
        if !(self.min_threshold > 0.0 && self.min_threshold < 1.0) {
            return Err(Error::config("segmentation.reference.min_threshold", "must lie in (0, 1)"));
        }
        if !(self.ray_step > 0.0 && self.ray_step <= 1.0) {
            return Err(Error::config("segmentation.reference.ray_step", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with edge clamping.
fn smooth(plane: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / norm).collect();
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[sx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[sy * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Otsu threshold over 256 bins on `[0, 1]`; `None` for a constant input.
pub fn otsu_threshold(values: &[f32]) -> Option<f64> {
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    for v in values {
        let b = ((v.clamp(0.0, 1.0) as f64) * (BINS - 1) as f64).round() as usize;
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(f64, usize)> = None;
    for (t, c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += *c as f64;
        sum0 += t as f64 * *c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, t));
        }
    }
    best.map(|(_, t)| (t as f64 + 0.5) / (BINS - 1) as f64)
}

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from each foreground pixel to the nearest background
/// pixel; the image border counts as background.
fn distance_to_background(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
    // pad by one so the border acts as background
    let (pw, ph) = (w + 2, h + 2);
    let big = 1e18;
    let mut g = vec![0f64; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                g[(y + 1) * pw + x + 1] = big;
            }
        }
    }
    let mut col = vec![0f64; ph];
    let mut col_out = vec![0f64; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = g[y * pw + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..ph {
            g[y * pw + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; pw];
    for y in 0..ph {
        edt_1d(&g[y * pw..(y + 1) * pw], &mut row_out);
        g[y * pw..(y + 1) * pw].copy_from_slice(&row_out);
    }
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = g[(y + 1) * pw + x + 1].sqrt();
        }
    }
    out
}

/// 4-connected component labels (0 = background, labels from 1).
fn label_components(mask: &[bool], w: usize, h: usize) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![0u32; w * h];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

fn bilinear(f: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| f[yy * w + xx] as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Dense maps for `image` from its DAPI plane.
pub fn predict_maps(image: &MultiChannelImage, cfg: &ReferencePredictorConfig) -> Result<ProbDistMaps> {
    cfg.validate()?;
    let (w, h) = image.dims();
    let n = cfg.n_rays;
    let field = smooth(image.plane(Channel::Dapi), w, h, cfg.smoothing_sigma);
    let thr = otsu_threshold(&field).unwrap_or(cfg.min_threshold).max(cfg.min_threshold);
    let raw_mask: Vec<bool> = field.iter().map(|v| *v as f64 >= thr).collect();
    let (labels, sizes) = label_components(&raw_mask, w, h);
    let mask: Vec<bool> = labels.iter().map(|l| *l != 0 && sizes[*l as usize] >= cfg.min_component_area).collect();
    let edt = distance_to_background(&mask, w, h);
    let mut peak = vec![0f64; sizes.len()];
    for (i, l) in labels.iter().enumerate() {
        if mask[i] {
            peak[*l as usize] = peak[*l as usize].max(edt[i]);
        }
    }
    let dirs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n as f64;
            (t.cos(), t.sin())
        })
        .collect();
    let max_len = (w + h) as f64;
    let mut maps = ProbDistMaps::zeros(w, h, n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            let p = (edt[i] / peak[labels[i] as usize]).clamp(0.0, 1.0) as f32;
            let dist = dirs.iter().map(|&(dx, dy)| {
                let (x0, y0) = (x as f64, y as f64);
                let mut prev_t = 0.0;
                let mut prev_v = field[i] as f64;
                let mut t = cfg.ray_step;
                while t < max_len {
                    let (sx, sy) = (x0 + t * dx, y0 + t * dy);
                    // leaving the raster ends the ray at the last pixel center reached
                    if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                        return prev_t as f32;
                    }
                    let v = bilinear(&field, w, h, sx, sy);
                    if v < thr {
                        let frac = if prev_v > v { (prev_v - thr) / (prev_v - v) } else { 0.0 };
                        return (prev_t + frac.clamp(0.0, 1.0) * (t - prev_t)) as f32;
                    }
                    prev_t = t;
                    prev_v = v;
                    t += cfg.ray_step;
                }
                prev_t as f32
            });
            maps.set(x, y, p, dist);
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{polygon_iou, Point, StarPolygon};
    use crate::segmentation::{segment, SegConfig};

    #[test]
    fn otsu_splits_two_levels() {
        let mut v = vec![0.0f32; 500];
        v.extend(vec![0.6f32; 300]);
        let t = otsu_threshold(&v).unwrap();
        assert!(t > 0.0 && t < 0.6);
        assert!(otsu_threshold(&[0.3; 10]).is_none());
    }

    #[test]
    fn edt_matches_brute_force() {
        let (w, h) = (13, 9);
        let mask: Vec<bool> = (0..w * h).map(|i| (i * 7919) % 11 != 0).collect();
        let d = distance_to_background(&mask, w, h);
        for y in 0..h {
            for x in 0..w {
                if !mask[y * w + x] {
                    assert_eq!(d[y * w + x], 0.0);
                    continue;
                }
                let mut best = f64::INFINITY;
                for yy in -1..=h as i64 {
                    for xx in -1..=w as i64 {
                        let bg = xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 || !mask[yy as usize * w + xx as usize];
                        if bg {
                            best = best.min(((xx - x as i64).pow(2) as f64 + (yy - y as i64).pow(2) as f64).sqrt());
                        }
                    }
                }
                assert!((d[y * w + x] - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blank_image_has_no_foreground() {
        let img = MultiChannelImage::new(40, 30);
        let m = predict_maps(&img, &ReferencePredictorConfig::default()).unwrap();
        assert!(m.prob().iter().all(|p| *p == 0.0));
    }

    #[test]
    fn disc_is_recovered() {
        let truth = StarPolygon::new(Point::new(30.0, 25.0), vec![12.0; 32], 1.0).unwrap();
        let mut img = MultiChannelImage::new(64, 50);
        for y in 0..50 {
            for x in 0..64 {
                if truth.contains(Point::new(x as f64, y as f64)) {
                    img.set(Channel::Dapi, x, y, 0.55);
                }
            }
        }
        let m = predict_maps(&img, &ReferencePredictorConfig::default()).unwrap();
        let out = segment::<f64>(&m, &SegConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert!(polygon_iou(&out[0], &truth, 4) > 0.9, "{}", polygon_iou(&out[0], &truth, 4));
    }
}
