//! FISH signal localization and classification inside a nucleus crop.
//!
//! Two predictors produce [`SignalBox`]es: a Laplacian-of-Gaussian blob
//! detector working directly on the HER2 and CEP17 planes, and an anchor
//! decoder for dense detection-head outputs produced by an external model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{Channel, MultiChannelImage};
use crate::num::{lit, total_cmp, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalClass {
    #[serde(rename = "HER2")]
    Her2,
    #[serde(rename = "HER2Cluster")]
    Her2Cluster,
    #[serde(rename = "CEP17")]
    Cep17,
}

impl SignalClass {
    /// Fixed class order of detection heads.
    pub const HEAD_ORDER: [SignalClass; 3] = [SignalClass::Her2, SignalClass::Her2Cluster, SignalClass::Cep17];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Signal class emitted for single spots in `channel`.
    pub fn single_for(channel: Channel) -> Option<Self> {
        match channel {
            Channel::Her2 => Some(SignalClass::Her2),
            Channel::Cep17 => Some(SignalClass::Cep17),
            Channel::Dapi => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalBox<T> {
    pub class: SignalClass,
    #[serde(rename = "box")]
    pub bbox: BBox<T>,
    pub score: T,
}

impl<T: Real> SignalBox<T> {
    pub fn new(class: SignalClass, bbox: BBox<T>, score: T) -> Self {
        Self { class, bbox, score }
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self { bbox: self.bbox.translate(dx, dy), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Laplacian-of-Gaussian scale in pixels.
    pub log_sigma: f64,
    /// Minimum normalized LoG response for a peak.
    pub peak_threshold: f64,
    /// Boxes linked when their IoU exceeds this.
    pub cluster_merge_iou: f64,
    /// Smallest linked component reported as a cluster.
    pub cluster_min_peaks: usize,
    pub box_nms_iou: f64,
    /// Minimum sigmoid score for decoded anchors.
    pub score_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            log_sigma: 1.5,
            peak_threshold: 0.2,
            cluster_merge_iou: 0.15,
            cluster_min_peaks: 3,
            box_nms_iou: 0.5,
            score_threshold: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.log_sigma > 0.0) {
            return Err(Error::config("detector.log_sigma", "must be > 0"));
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.peak_threshold) {
            return Err(Error::config("detector.peak_threshold", "must lie in (0, 1)"));
        }
        if !unit(self.cluster_merge_iou) {
            return Err(Error::config("detector.cluster_merge_iou", "must lie in (0, 1)"));
        }
        if !unit(self.box_nms_iou) {
            return Err(Error::config("detector.box_nms_iou", "must lie in (0, 1)"));
        }
        if !unit(self.score_threshold) {
            return Err(Error::config("detector.score_threshold", "must lie in (0, 1)"));
        }
        if self.cluster_min_peaks < 2 {
            return Err(Error::config("detector.cluster_min_peaks", "must be >= 2"));
        }
        Ok(())
    }

    /// Half-width of a single-spot box, `round(2 * sigma)`.
    pub fn box_half_width(&self) -> f64 {
        (2.0 * self.log_sigma).round()
    }

    /// Area of a single-spot box, `(4 * sigma)^2` with the rounded half-width.
    pub fn singleton_area(&self) -> f64 {
        (2.0 * self.box_half_width()).powi(2)
    }
}

// ---------------------------------------------------------------------------
// Laplacian of Gaussian
// ---------------------------------------------------------------------------

/// Scale-normalized LoG response `-sigma^2 * lap(G_sigma * I)`, zero padded.
pub fn log_response(plane: &[f32], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);

    let (w, h) = (width as i64, height as i64);
    let mut tmp = vec![0.0f64; width * height];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = x + ki as i64 - radius;
                if (0..w).contains(&xx) {
                    acc += k * plane[(y * w + xx) as usize] as f64;
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut smooth = vec![0.0f64; width * height];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = y + ki as i64 - radius;
                if (0..h).contains(&yy) {
                    acc += k * tmp[(yy * w + x) as usize];
                }
            }
            smooth[(y * w + x) as usize] = acc;
        }
    }
    let at = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            smooth[(y * w + x) as usize]
        } else {
            0.0
        }
    };
    let s2 = sigma * sigma;
    let mut out = vec![0.0f64; width * height];
    for y in 0..h {
        for x in 0..w {
            let lap = at(x + 1, y) + at(x - 1, y) + at(x, y + 1) + at(x, y - 1) - 4.0 * at(x, y);
            out[(y * w + x) as usize] = -s2 * lap;
        }
    }
    out
}

/// LoG response of a unit-amplitude Gaussian spot whose width matches the
/// filter scale; used to normalize scores into `[0, 1]`.
const UNIT_SPOT_RESPONSE: f64 = 0.5;

/// Single-scale LoG spot detector on one signal channel of `crop`.
pub fn detect_blobs_log(crop: &MultiChannelImage, channel: Channel, cfg: &DetectorConfig) -> Vec<SignalBox<f64>> {
    let Some(class) = SignalClass::single_for(channel) else {
        return Vec::new();
    };
    let (w, h) = crop.dims();
    let plane = crop.plane(channel);
    if plane.iter().all(|v| *v == 0.0) {
        return Vec::new();
    }
    let resp = log_response(plane, w, h, cfg.log_sigma);
    let hw = cfg.box_half_width();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = resp[y * w + x];
            let score = (v / UNIT_SPOT_RESPONSE).clamp(0.0, 1.0);
            if score < cfg.peak_threshold || !is_peak(&resp, w, h, x, y) {
                continue;
            }
            let (cx, cy) = (x as f64, y as f64);
            let bbox = BBox::new(cx - hw, cy - hw, cx + hw, cy + hw).clamp_to(w as f64, h as f64);
            out.push(SignalBox::new(class, bbox, score));
        }
    }
    out
}

/// 8-neighborhood maximum; plateaus resolve to their first pixel in raster order.
fn is_peak(resp: &[f64], w: usize, h: usize, x: usize, y: usize) -> bool {
    let v = resp[y * w + x];
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let n = resp[ny as usize * w + nx as usize];
            let earlier = dy < 0 || (dy == 0 && dx < 0);
            if n > v || (earlier && n == v) {
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Cluster merging
// ---------------------------------------------------------------------------

/// Minimal union-find with path halving and union by size.
pub(crate) struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSets {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

/// Component id per box under the "IoU > threshold" relation.
pub fn overlap_components<T: Real>(boxes: &[SignalBox<T>], iou_threshold: T) -> Vec<usize> {
    let mut sets = DisjointSets::new(boxes.len());
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if boxes[i].bbox.iou(&boxes[j].bbox) > iou_threshold {
                sets.union(i, j);
            }
        }
    }
    (0..boxes.len()).map(|i| sets.find(i)).collect()
}

/// Replaces each linked group of at least `cluster_min_peaks` HER2 boxes by a
/// single HER2-Cluster box spanning the group. Non-HER2 boxes pass through.
pub fn merge_clusters<T: Real>(boxes: &[SignalBox<T>], cfg: &DetectorConfig) -> Vec<SignalBox<T>> {
    let her2: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].class == SignalClass::Her2).collect();
    let subset: Vec<SignalBox<T>> = her2.iter().map(|&i| boxes[i].clone()).collect();
    let comp = overlap_components(&subset, lit(cfg.cluster_merge_iou));
    let mut sizes = std::collections::HashMap::new();
    for c in &comp {
        *sizes.entry(*c).or_insert(0usize) += 1;
    }

    let mut merged: std::collections::HashMap<usize, SignalBox<T>> = std::collections::HashMap::new();
    for (k, b) in subset.iter().enumerate() {
        if sizes[&comp[k]] >= cfg.cluster_min_peaks {
            merged
                .entry(comp[k])
                .and_modify(|m| {
                    m.bbox = m.bbox.union(&b.bbox);
                    if b.score > m.score {
                        m.score = b.score;
                    }
                })
                .or_insert_with(|| SignalBox::new(SignalClass::Her2Cluster, b.bbox, b.score));
        }
    }

    let mut out = Vec::with_capacity(boxes.len());
    let mut emitted = std::collections::HashSet::new();
    let mut her2_pos = 0;
    for b in boxes {
        if b.class != SignalClass::Her2 {
            out.push(b.clone());
            continue;
        }
        let c = comp[her2_pos];
        her2_pos += 1;
        match merged.get(&c) {
            Some(m) => {
                if emitted.insert(c) {
                    out.push(m.clone());
                }
            }
            None => out.push(b.clone()),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Box NMS
// ---------------------------------------------------------------------------

/// Greedy box NMS. Order: descending score, ties by ascending `(y0, x0, class)`.
/// A box is kept iff its IoU with every kept box (of the same class when
/// `per_class`) is at most `iou_threshold`. Output is in keep order.
pub fn nms_boxes<T: Real>(boxes: &[SignalBox<T>], iou_threshold: T, per_class: bool) -> Vec<SignalBox<T>> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&boxes[a], &boxes[b]);
        total_cmp(q.score, p.score)
            .then(total_cmp(p.bbox.y0, q.bbox.y0))
            .then(total_cmp(p.bbox.x0, q.bbox.x0))
            .then(p.class.cmp(&q.class))
    });
    let mut kept: Vec<SignalBox<T>> = Vec::new();
    for i in order {
        let cand = &boxes[i];
        let suppressed = kept
            .iter()
            .filter(|k| !per_class || k.class == cand.class)
            .any(|k| k.bbox.iou(&cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(cand.clone());
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Anchor decoding
// ---------------------------------------------------------------------------

/// Anchor layout shared by every cell of a detection head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    /// Cell size in pixels; cell `(i, j)` is centered at `((j + .5) * stride, (i + .5) * stride)`.
    pub stride: f64,
    /// Anchor `(width, height)` templates.
    pub anchors: Vec<(f64, f64)>,
}

impl AnchorGrid {
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.stride, (row as f64 + 0.5) * self.stride)
    }

    /// Grid dims `(rows, cols)` covering a crop.
    pub fn grid_dims(&self, crop_width: usize, crop_height: usize) -> (usize, usize) {
        (
            (crop_height as f64 / self.stride).ceil() as usize,
            (crop_width as f64 / self.stride).ceil() as usize,
        )
    }
}

/// Dense head outputs: class logits `[A*C, H, W]` (channel `a*C + c`) and
/// box deltas `[A*4, H, W]` (channel `a*4 + {tx, ty, tw, th}`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub class_logits: Tensor,
    pub box_deltas: Tensor,
}

/// Sidecar descriptor stored next to head-map tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDescriptor {
    pub stride: f64,
    pub anchors: Vec<(f64, f64)>,
    pub classes: Vec<SignalClass>,
}

impl HeadDescriptor {
    pub fn grid(&self) -> Result<AnchorGrid> {
        if self.classes != SignalClass::HEAD_ORDER {
            return Err(Error::Format(format!(
                "head class order must be HER2, HER2Cluster, CEP17; found {:?}",
                self.classes
            )));
        }
        if !(self.stride > 0.0) || self.anchors.is_empty() {
            return Err(Error::Format("descriptor needs a positive stride and at least one anchor".into()));
        }
        Ok(AnchorGrid { stride: self.stride, anchors: self.anchors.clone() })
    }

    pub fn from_grid(grid: &AnchorGrid) -> Self {
        Self { stride: grid.stride, anchors: grid.anchors.clone(), classes: SignalClass::HEAD_ORDER.to_vec() }
    }
}

impl HeadMaps {
    pub fn load(descriptor: &Path, class_logits: &Path, box_deltas: &Path) -> Result<(AnchorGrid, HeadMaps)> {
        let text = std::fs::read_to_string(descriptor).map_err(|e| Error::io(descriptor, e))?;
        let desc: HeadDescriptor = serde_json::from_str(&text)?;
        let grid = desc.grid()?;
        let maps = HeadMaps { class_logits: Tensor::read(class_logits)?, box_deltas: Tensor::read(box_deltas)? };
        Ok((grid, maps))
    }

    fn check(&self, grid: &AnchorGrid) -> Result<(usize, usize)> {
        let a = grid.anchors.len();
        let c = SignalClass::HEAD_ORDER.len();
        let cls = self.class_logits.dims();
        if cls.len() != 3 || cls[0] != a * c {
            return Err(Error::Shape {
                tensor: "class_logits".into(),
                reason: format!("expected [{}, H, W], found {cls:?}", a * c),
            });
        }
        let (h, w) = (cls[1], cls[2]);
        self.box_deltas.expect_dims("box_deltas", &[a * 4, h, w])?;
        Ok((h, w))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Decodes every (cell, anchor, class) whose sigmoid score reaches `score_threshold`.
///
/// `center = anchor_center + (tx * aw, ty * ah)`, `size = (aw * e^tw, ah * e^th)`.
pub fn decode_anchors<T: Real>(head: &HeadMaps, grid: &AnchorGrid, score_threshold: T) -> Result<Vec<SignalBox<T>>> {
    let (h, w) = head.check(grid)?;
    let c = SignalClass::HEAD_ORDER.len();
    let plane = h * w;
    let cls = head.class_logits.data();
    let reg = head.box_deltas.data();
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let cell = row * w + col;
            let (acx, acy) = grid.cell_center(row, col);
            for (a, &(aw, ah)) in grid.anchors.iter().enumerate() {
                for (ci, class) in SignalClass::HEAD_ORDER.iter().enumerate() {
                    let logit: T = lit(cls[(a * c + ci) * plane + cell] as f64);
                    let score = sigmoid(logit);
                    if score < score_threshold {
                        continue;
                    }
                    let d = |k: usize| -> T { lit(reg[(a * 4 + k) * plane + cell] as f64) };
                    let (aw, ah) = (lit::<T>(aw), lit::<T>(ah));
                    let cx = lit::<T>(acx) + d(0) * aw;
                    let cy = lit::<T>(acy) + d(1) * ah;
                    let bw = aw * d(2).exp();
                    let bh = ah * d(3).exp();
                    out.push(SignalBox::new(*class, BBox::from_center(cx, cy, bw, bh), score));
                }
            }
        }
    }
    Ok(out)
}

/// Logit written for assigned anchors; unassigned entries get its negation.
pub const ENCODE_LOGIT: f32 = 10.0;

/// Inverse of [`decode_anchors`]: writes each box into the anchor of the cell
/// containing its center with the best anchor-shape IoU, falling back to the
/// next best free anchor in that cell.
pub fn encode_head_maps(boxes: &[SignalBox<f64>], grid: &AnchorGrid, rows: usize, cols: usize) -> Result<HeadMaps> {
    let a_n = grid.anchors.len();
    let c = SignalClass::HEAD_ORDER.len();
    let plane = rows * cols;
    let mut cls = Tensor::new(vec![a_n * c, rows, cols], vec![-ENCODE_LOGIT; a_n * c * plane])?;
    let mut reg = Tensor::zeros(vec![a_n * 4, rows, cols]);
    let mut used = vec![false; a_n * plane];
    for b in boxes {
        let ctr = b.bbox.center();
        let col = (ctr.x / grid.stride).floor();
        let row = (ctr.y / grid.stride).floor();
        if col < 0.0 || row < 0.0 || col as usize >= cols || row as usize >= rows {
            return Err(Error::Input(format!("box center ({}, {}) outside the head grid", ctr.x, ctr.y)));
        }
        let (row, col) = (row as usize, col as usize);
        let cell = row * cols + col;
        let (acx, acy) = grid.cell_center(row, col);
        let mut ranked: Vec<usize> = (0..a_n).collect();
        let shape_iou = |k: usize| {
            let (aw, ah) = grid.anchors[k];
            BBox::from_center(0.0, 0.0, aw, ah).iou(&BBox::from_center(0.0, 0.0, b.bbox.width(), b.bbox.height()))
        };
        ranked.sort_by(|&p, &q| shape_iou(q).total_cmp(&shape_iou(p)).then(p.cmp(&q)));
        let a = ranked
            .into_iter()
            .find(|&k| !used[k * plane + cell])
            .ok_or_else(|| Error::Input(format!("no free anchor in cell ({row}, {col})")))?;
        used[a * plane + cell] = true;
        let (aw, ah) = grid.anchors[a];
        cls.data_mut()[(a * c + b.class.index()) * plane + cell] = ENCODE_LOGIT;
        let r = reg.data_mut();
        r[(a * 4) * plane + cell] = ((ctr.x - acx) / aw) as f32;
        r[(a * 4 + 1) * plane + cell] = ((ctr.y - acy) / ah) as f32;
        r[(a * 4 + 2) * plane + cell] = (b.bbox.width() / aw).ln() as f32;
        r[(a * 4 + 3) * plane + cell] = (b.bbox.height() / ah).ln() as f32;
    }
    Ok(HeadMaps { class_logits: cls, box_deltas: reg })
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Signal predictor for one crop.
#[derive(Clone, Debug)]
pub enum SignalPredictor<'a> {
    Reference,
    External { grid: &'a AnchorGrid, head: &'a HeadMaps },
}

/// Reference: LoG on both channels, HER2 cluster merge, per-class NMS.
/// External: anchor decoding then per-class NMS. Boxes are clamped to the crop.
pub fn detect_signals(crop: &MultiChannelImage, predictor: &SignalPredictor<'_>, cfg: &DetectorConfig) -> Result<Vec<SignalBox<f64>>> {
    let (w, h) = crop.dims();
    let raw = match predictor {
        SignalPredictor::Reference => {
            let mut her2 = detect_blobs_log(crop, Channel::Her2, cfg);
            her2 = merge_clusters(&her2, cfg);
            her2.extend(detect_blobs_log(crop, Channel::Cep17, cfg));
            her2
        }
        SignalPredictor::External { grid, head } => decode_anchors(head, grid, cfg.score_threshold)?,
    };
    let kept = nms_boxes(&raw, cfg.box_nms_iou, true);
    Ok(kept
        .into_iter()
        .map(|mut b| {
            b.bbox = b.bbox.clamp_to(w as f64, h as f64);
            b
        })
        .filter(|b| b.bbox.is_valid())
        .collect())
}
