//! Star-convex nucleus segmentation from dense probability and ray-distance
//! maps: candidate generation, greedy polygon NMS and masked crop extraction.

mod predictor;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_of, ray_directions, vertices_with, BBox, Point, Raster, StarPolygon};
use crate::image::{Channel, MultiChannelImage};
use crate::num::{lit, total_cmp, Real};
use crate::tensor::Tensor;

pub use predictor::{otsu_threshold, predict_maps, ReferencePredictorConfig};

/// Dense detector output: object probability `[H, W]` and ray distances
/// `[n_rays, H, W]`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDistMaps {
    width: usize,
    height: usize,
    n_rays: usize,
    prob: Vec<f32>,
    dist: Vec<f32>,
}

impl ProbDistMaps {
    pub fn zeros(width: usize, height: usize, n_rays: usize) -> Self {
        Self { width, height, n_rays, prob: vec![0.0; width * height], dist: vec![0.0; n_rays * width * height] }
    }

    pub fn new(width: usize, height: usize, n_rays: usize, prob: Vec<f32>, dist: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input("maps need positive dims".into()));
        }
        if n_rays < 3 {
            return Err(Error::Input(format!("maps need at least 3 rays, got {n_rays}")));
        }
        if prob.len() != width * height {
            return Err(Error::Shape { tensor: "prob".into(), reason: format!("expected {} values", width * height) });
        }
        if dist.len() != n_rays * width * height {
            return Err(Error::Shape {
                tensor: "dist".into(),
                reason: format!("expected {} values", n_rays * width * height),
            });
        }
        if prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("prob values must lie in [0, 1]".into()));
        }
        if dist.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::Input("dist values must be finite and >= 0".into()));
        }
        Ok(Self { width, height, n_rays, prob, dist })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_rays(&self) -> usize {
        self.n_rays
    }

    pub fn prob(&self) -> &[f32] {
        &self.prob
    }

    pub fn prob_at(&self, x: usize, y: usize) -> f32 {
        self.prob[y * self.width + x]
    }

    pub fn dist_at(&self, k: usize, x: usize, y: usize) -> f32 {
        self.dist[(k * self.height + y) * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize, p: f32, d: impl Iterator<Item = f32>) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        self.prob[i] = p;
        for (k, v) in d.enumerate() {
            self.dist[k * plane + i] = v;
        }
    }

    /// Window `[x0, x0 + w) x [y0, y0 + h)`, which must lie inside the maps.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "window outside maps");
        let mut out = Self::zeros(w, h, self.n_rays);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x0 + x, y0 + y);
                out.set(x, y, self.prob_at(sx, sy), (0..self.n_rays).map(|k| self.dist_at(k, sx, sy)));
            }
        }
        out
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        (
            Tensor::new(vec![self.height, self.width], self.prob.clone()).expect("prob dims"),
            Tensor::new(vec![self.n_rays, self.height, self.width], self.dist.clone()).expect("dist dims"),
        )
    }

    pub fn from_tensors(prob: Tensor, dist: Tensor) -> Result<Self> {
        if prob.rank() != 2 {
            return Err(Error::Shape { tensor: "prob".into(), reason: format!("expected [H, W], found {:?}", prob.dims()) });
        }
        let (h, w) = (prob.dims()[0], prob.dims()[1]);
        if dist.rank() != 3 || dist.dims()[1] != h || dist.dims()[2] != w {
            return Err(Error::Shape {
                tensor: "dist".into(),
                reason: format!("expected [n_rays, {h}, {w}], found {:?}", dist.dims()),
            });
        }
        let n = dist.dims()[0];
        Self::new(w, h, n, prob.into_data(), dist.into_data())
    }

    pub fn read(prob: &Path, dist: &Path) -> Result<Self> {
        Self::from_tensors(Tensor::read(prob)?, Tensor::read(dist)?)
    }

    pub fn write(&self, prob: &Path, dist: &Path) -> Result<()> {
        let (p, d) = self.to_tensors();
        p.write(prob)?;
        d.write(dist)
    }
}

/// Polygon edges prepared for repeated ray casting.
struct EdgeList {
    /// `(ax, ay, ex, ey)` with `e = b - a`.
    edges: Vec<(f64, f64, f64, f64)>,
}

impl EdgeList {
    fn new(v: &[Point<f64>]) -> Self {
        let n = v.len();
        Self { edges: (0..n).map(|i| (v[i].x, v[i].y, v[(i + 1) % n].x - v[i].x, v[(i + 1) % n].y - v[i].y)).collect() }
    }

    /// Nearest boundary crossing along `(dx, dy)` from `p`.
    fn first_hit(&self, p: Point<f64>, dx: f64, dy: f64) -> Option<f64> {
        let mut best = f64::INFINITY;
        for &(ax, ay, ex, ey) in &self.edges {
            // both endpoints clearly on one side of the ray's line: no hit.
            // The margin keeps vertex grazes on the exact path below.
            let (wx, wy) = (ax - p.x, ay - p.y);
            let sa = dx * wy - dy * wx;
            let sb = dx * (wy + ey) - dy * (wx + ex);
            if (sa > 1e-9 && sb > 1e-9) || (sa < -1e-9 && sb < -1e-9) {
                continue;
            }
            let denom = dx * ey - dy * ex;
            if denom.abs() <= 1e-12 {
                continue;
            }
            let t = (wx * ey - wy * ex) / denom;
            if t <= 1e-12 || t >= best {
                continue;
            }
            let u = (wx * dy - wy * dx) / denom;
            if (0.0..=1.0).contains(&u) {
                best = t;
            }
        }
        best.is_finite().then_some(best)
    }
}

/// Ground-truth map renderer.
///
/// `prob` is 1 at pixel centers inside any polygon, else 0. Inside pixels
/// store the exact first-hit distance along each ray to the boundary of the
/// polygon that owns them; earlier polygons win overlaps.
pub fn render_maps<T: Real>(polygons: &[StarPolygon<T>], width: usize, height: usize, n_rays: usize) -> ProbDistMaps {
    let mut maps = ProbDistMaps::zeros(width, height, n_rays);
    let dirs: Vec<(f64, f64)> = (0..n_rays)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n_rays as f64;
            (t.cos(), t.sin())
        })
        .collect();
    let mut owned = vec![false; width * height];
    for poly in polygons {
        let verts: Vec<Point<f64>> =
            poly.vertices().iter().map(|p| Point::new(p.x.to_f64().unwrap_or(0.0), p.y.to_f64().unwrap_or(0.0))).collect();
        let edges = EdgeList::new(&verts);
        let raster = Raster::of_vertices(&verts, 1);
        for (r, c0, c1) in raster.iter_spans() {
            if r < 0 || r >= height as i64 {
                continue;
            }
            let y = r as usize;
            for c in c0.max(0)..c1.min(width as i64) {
                let x = c as usize;
                if owned[y * width + x] {
                    continue;
                }
                owned[y * width + x] = true;
                let p = Point::new(x as f64, y as f64);
                maps.set(x, y, 1.0, dirs.iter().map(|&(dx, dy)| edges.first_hit(p, dx, dy).unwrap_or(0.0) as f32));
            }
        }
    }
    maps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub prob_threshold: f64,
    pub nms_iou: f64,
    /// Samples per pixel axis when rasterizing polygons for IoU.
    pub supersample: u32,
    pub candidate_cap: usize,
    pub reference: ReferencePredictorConfig,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            nms_iou: 0.4,
            supersample: 4,
            candidate_cap: 100_000,
            reference: ReferencePredictorConfig::default(),
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.prob_threshold) {
            return Err(Error::config("segmentation.prob_threshold", "must lie in (0, 1)"));
        }
        if !open(self.nms_iou) {
            return Err(Error::config("segmentation.nms_iou", "must lie in (0, 1)"));
        }
        if self.supersample < 1 {
            return Err(Error::config("segmentation.supersample", "must be >= 1"));
        }
        if self.candidate_cap < 1 {
            return Err(Error::config("segmentation.candidate_cap", "must be >= 1"));
        }
        self.reference.validate()
    }
}

/// One polygon per pixel with `prob >= prob_threshold`, ordered by descending
/// score then row-major position, truncated to `cap`. Pixels whose rays give a
/// degenerate polygon are skipped.
pub fn candidates_from_maps<T: Real>(maps: &ProbDistMaps, prob_threshold: f64, cap: usize) -> Vec<StarPolygon<T>> {
    let mut hits: Vec<(f32, usize)> = maps
        .prob
        .iter()
        .enumerate()
        .filter(|(_, p)| **p as f64 >= prob_threshold)
        .map(|(i, p)| (*p, i))
        .collect();
    // stable: equal scores keep row-major order
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::with_capacity(hits.len().min(cap));
    for (p, i) in hits {
        if out.len() == cap {
            break;
        }
        let (x, y) = (i % maps.width, i / maps.width);
        let d: Vec<T> = (0..maps.n_rays).map(|k| lit(maps.dist_at(k, x, y) as f64)).collect();
        if let Ok(poly) = StarPolygon::new(Point::new(lit(x as f64), lit(y as f64)), d, lit(p as f64)) {
            out.push(poly);
        }
    }
    out
}

/// Greedy NMS order: descending score, then ascending row-major center.
pub fn nms_order<T: Real>(polys: &[StarPolygon<T>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..polys.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (&polys[a], &polys[b]);
        total_cmp(q.score, p.score)
            .then(total_cmp(p.center.y, q.center.y))
            .then(total_cmp(p.center.x, q.center.x))
    });
    idx
}

const GRID_CELL: f64 = 32.0;

fn cell_range<T: Real>(b: &BBox<T>) -> (i64, i64, i64, i64) {
    let f = |v: T| (v.to_f64().unwrap_or(0.0) / GRID_CELL).floor() as i64;
    (f(b.x0), f(b.y0), f(b.x1), f(b.y1))
}

/// Greedy polygon NMS: a candidate is kept iff its rasterized IoU with every
/// already kept polygon is at most `iou_threshold`. Output is in keep order.
pub fn nms_polygons<T: Real>(candidates: &[StarPolygon<T>], iou_threshold: T, supersample: u32) -> Vec<StarPolygon<T>> {
    let order = nms_order(candidates);
    let mut kept: Vec<(usize, BBox<T>, Raster)> = Vec::new();
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut seen = Vec::new();
    let mut dirs: Vec<(T, T)> = Vec::new();
    'cand: for i in order {
        let poly = &candidates[i];
        if dirs.len() != poly.n_rays() {
            dirs = ray_directions(poly.n_rays());
        }
        let verts = vertices_with(poly.center, &poly.distances, &dirs);
        let bb = bbox_of(&verts);
        let (cx0, cy0, cx1, cy1) = cell_range(&bb);
        seen.clear();
        for gy in cy0..=cy1 {
            for gx in cx0..=cx1 {
                if let Some(v) = grid.get(&(gx, gy)) {
                    seen.extend(v.iter().copied());
                }
            }
        }
        seen.sort_unstable();
        seen.dedup();
        let mut raster: Option<Raster> = None;
        for &k in &seen {
            let (_, kb, kr) = &kept[k];
            if !kb.touches(&bb) {
                continue;
            }
            let r = raster.get_or_insert_with(|| Raster::of_vertices(&verts, supersample));
            if lit::<T>(r.iou(kr)) > iou_threshold {
                continue 'cand;
            }
        }
        let r = raster.unwrap_or_else(|| Raster::of_vertices(&verts, supersample));
        let id = kept.len();
        for gy in cy0..=cy1 {
            for gx in cx0..=cx1 {
                grid.entry((gx, gy)).or_default().push(id);
            }
        }
        kept.push((i, bb, r));
    }
    kept.into_iter().map(|(i, _, _)| candidates[i].clone()).collect()
}

/// `candidates_from_maps` followed by `nms_polygons`.
pub fn segment<T: Real>(maps: &ProbDistMaps, cfg: &SegConfig) -> Result<Vec<StarPolygon<T>>> {
    cfg.validate()?;
    let cands = candidates_from_maps::<T>(maps, cfg.prob_threshold, cfg.candidate_cap);
    Ok(nms_polygons(&cands, lit(cfg.nms_iou), cfg.supersample))
}

/// Masked nucleus crop.
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusCrop<T = f64> {
    /// Crop pixels; everything outside the polygon is zero.
    pub image: MultiChannelImage,
    /// Slide position of the crop's pixel `(0, 0)`.
    pub offset: (usize, usize),
    /// Row-major pixel-center containment mask.
    pub mask: Vec<bool>,
    /// Polygon in crop coordinates.
    pub polygon: StarPolygon<T>,
}

/// Crop window `[floor(min) - margin, ceil(max) + margin)` per axis, clamped.
pub fn crop_window<T: Real>(bbox: &BBox<T>, margin: usize, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
    let m = margin as f64;
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let x0 = (f(bbox.x0).floor() - m).max(0.0);
    let y0 = (f(bbox.y0).floor() - m).max(0.0);
    let x1 = (f(bbox.x1).ceil() + m).min(width as f64);
    let y1 = (f(bbox.y1).ceil() + m).min(height as f64);
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::OutOfBounds);
    }
    Ok((x0 as usize, y0 as usize, (x1 - x0) as usize, (y1 - y0) as usize))
}

/// Cuts the polygon's bounding box plus `margin` out of `image` and zeroes
/// every pixel whose center lies outside the polygon.
pub fn extract_crop<T: Real>(image: &MultiChannelImage, polygon: &StarPolygon<T>, margin: usize) -> Result<NucleusCrop<T>> {
    let (x0, y0, w, h) = crop_window(&polygon.bbox(), margin, image.width(), image.height())?;
    let mut sub = image.sub_image(x0, y0, w, h);
    let mut mask = vec![false; w * h];
    for (r, c0, c1) in polygon.raster(1).iter_spans() {
        let y = r - y0 as i64;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for c in (c0 - x0 as i64).max(0)..(c1 - x0 as i64).min(w as i64) {
            mask[y as usize * w + c as usize] = true;
        }
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::OutOfBounds);
    }
    for c in Channel::ALL {
        for (v, m) in sub.plane_mut(c).iter_mut().zip(&mask) {
            if !*m {
                *v = 0.0;
            }
        }
    }
    let polygon = polygon.translate(lit(-(x0 as f64)), lit(-(y0 as f64)));
    Ok(NucleusCrop { image: sub, offset: (x0, y0), mask, polygon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::polygon_iou;

    fn regular(cx: f64, cy: f64, r: f64, n: usize) -> StarPolygon<f64> {
        StarPolygon::new(Point::new(cx, cy), vec![r; n], 1.0).unwrap()
    }

    #[test]
    fn empty_render_is_zero() {
        let m = render_maps::<f64>(&[], 20, 10, 8);
        assert!(m.prob().iter().all(|p| *p == 0.0));
        assert!(candidates_from_maps::<f64>(&m, 0.5, 100).is_empty());
        assert!(segment::<f64>(&m, &SegConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn center_of_regular_polygon_sees_circumradius() {
        // rays of the maps coincide with the polygon's vertex directions
        let m = render_maps(&[regular(20.0, 20.0, 9.0, 16)], 40, 40, 16);
        assert_eq!(m.prob_at(20, 20), 1.0);
        for k in 0..16 {
            assert!((m.dist_at(k, 20, 20) - 9.0).abs() < 1e-5);
        }
        assert_eq!(m.prob_at(0, 0), 0.0);
        assert_eq!(m.dist_at(3, 0, 0), 0.0);
    }

    #[test]
    fn off_center_square_distances() {
        // square |x-20| + |y-20| <= 10 rotated: n=4 diamond
        let sq = regular(20.0, 20.0, 10.0, 4);
        let m = render_maps(&[sq], 40, 40, 8);
        // at (23, 20): the edge toward +x is at x=30, along +y hits x+y=... edge from (30,20) to (20,30)
        let (px, py) = (23.0f64, 20.0f64);
        let expect: Vec<f64> = (0..8)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / 8.0;
                let (dx, dy) = (t.cos(), t.sin());
                // |x-20| + |y-20| = 10 along the ray: solve piecewise by bisection
                let (mut lo, mut hi) = (0.0, 40.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if (px + mid * dx - 20.0).abs() + (py + mid * dy - 20.0).abs() <= 10.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            })
            .collect();
        for (k, e) in expect.iter().enumerate() {
            assert!((m.dist_at(k, 23, 20) as f64 - e).abs() < 1e-5, "ray {k}: {} vs {e}", m.dist_at(k, 23, 20));
        }
    }

    #[test]
    fn earlier_polygon_wins_overlap() {
        let a = regular(10.0, 10.0, 6.0, 16);
        let b = regular(14.0, 10.0, 6.0, 16);
        let m = render_maps(&[a.clone(), b], 30, 20, 16);
        // (12, 10) is inside both; its +x ray must end on a's boundary (~x=16)
        let d = m.dist_at(0, 12, 10) as f64;
        let e = a.ray_exit_distance(Point::new(12.0, 10.0), 0.0).unwrap();
        assert!((d - e).abs() < 1e-5);
    }

    #[test]
    fn single_hot_pixel_gives_one_candidate() {
        let mut m = ProbDistMaps::zeros(10, 10, 4);
        m.set(3, 7, 1.0, [2.0, 2.0, 2.0, 2.0].into_iter());
        let c = candidates_from_maps::<f64>(&m, 0.5, 10);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].center.x, c[0].center.y), (3.0, 7.0));
    }

    #[test]
    fn candidate_cap_keeps_best() {
        let mut m = ProbDistMaps::zeros(5, 1, 4);
        for (x, p) in [0.6f32, 0.9, 0.7, 0.9, 0.55].iter().enumerate() {
            m.set(x, 0, *p, [1.0; 4].into_iter());
        }
        let c = candidates_from_maps::<f64>(&m, 0.5, 3);
        let xs: Vec<f64> = c.iter().map(|p| p.center.x).collect();
        assert_eq!(xs, vec![1.0, 3.0, 2.0]);
    }

    #[test]
    fn duplicate_suppressed() {
        let mut a = regular(10.0, 10.0, 5.0, 8);
        a.score = 0.8;
        let mut b = a.clone();
        b.score = 0.9;
        let kept = nms_polygons(&[a, b], 0.5, 4);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn disjoint_polygons_round_trip() {
        let gt = vec![regular(20.0, 20.0, 8.0, 32), regular(60.0, 25.0, 11.0, 32), regular(35.0, 60.0, 9.5, 32)];
        let m = render_maps(&gt, 90, 80, 32);
        let out = segment::<f64>(&m, &SegConfig::default()).unwrap();
        assert_eq!(out.len(), 3);
        for g in &gt {
            assert!(out.iter().any(|p| polygon_iou(p, g, 4) >= 0.85));
        }
        assert_eq!(out, segment::<f64>(&m, &SegConfig::default()).unwrap());
    }

    #[test]
    fn tensor_round_trip() {
        let m = render_maps(&[regular(8.0, 8.0, 4.0, 8)], 16, 12, 8);
        let (p, d) = m.to_tensors();
        assert_eq!(d.dims(), &[8, 12, 16]);
        assert_eq!(ProbDistMaps::from_tensors(p, d).unwrap(), m);
        let bad = Tensor::zeros(vec![8, 12, 15]);
        let err = ProbDistMaps::from_tensors(Tensor::zeros(vec![12, 16]), bad).unwrap_err();
        assert!(err.to_string().contains("dist"));
    }

    #[test]
    fn crop_of_60px_box_is_80px() {
        let img = MultiChannelImage::filled(200, 200, [0.5, 0.25, 0.75]);
        let poly = regular(100.0, 100.0, 30.0, 4);
        let c = extract_crop(&img, &poly, 10).unwrap();
        assert_eq!(c.image.dims(), (80, 80));
        assert_eq!(c.offset, (60, 60));
        assert_eq!(c.image.get(Channel::Dapi, 40, 40), 0.5);
        assert_eq!(c.image.get(Channel::Dapi, 1, 1), 0.0);
    }

    #[test]
    fn crop_clamps_at_corner_and_rejects_outside() {
        let img = MultiChannelImage::filled(50, 50, [0.5; 3]);
        let c = extract_crop(&img, &regular(2.0, 2.0, 8.0, 16), 10).unwrap();
        assert!(c.image.width() <= 16 + 20 && c.image.height() <= 16 + 20);
        assert_eq!(c.offset, (0, 0));
        assert!(matches!(extract_crop(&img, &regular(200.0, 200.0, 8.0, 16), 3), Err(Error::OutOfBounds)));
    }

    #[test]
    fn crop_pastes_back() {
        let mut img = MultiChannelImage::new(64, 48);
        for y in 0..48 {
            for x in 0..64 {
                for (i, c) in Channel::ALL.iter().enumerate() {
                    img.set(*c, x, y, ((x * 7 + y * 13 + i * 5) % 17) as f32 / 17.0);
                }
            }
        }
        let poly = StarPolygon::new(Point::new(30.3, 20.6), (0..16).map(|k| 6.0 + (k % 3) as f64).collect(), 1.0).unwrap();
        let c = extract_crop(&img, &poly, 4).unwrap();
        let mut canvas = MultiChannelImage::new(64, 48);
        for y in 0..c.image.height() {
            for x in 0..c.image.width() {
                for ch in Channel::ALL {
                    canvas.set(ch, x + c.offset.0, y + c.offset.1, c.image.get(ch, x, y));
                }
            }
        }
        for y in 0..48 {
            for x in 0..64 {
                let inside = poly.contains(Point::new(x as f64, y as f64));
                for ch in Channel::ALL {
                    let expect = if inside { img.get(ch, x, y) } else { 0.0 };
                    assert_eq!(canvas.get(ch, x, y), expect, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn raising_threshold_never_adds_candidates() {
        let m = render_maps(&[regular(10.0, 10.0, 6.0, 8)], 24, 24, 8);
        let mut prob = m.prob().to_vec();
        for (i, p) in prob.iter_mut().enumerate() {
            *p *= ((i % 7) as f32 + 1.0) / 7.0;
        }
        let (_, d) = m.to_tensors();
        let m = ProbDistMaps::new(24, 24, 8, prob, d.into_data()).unwrap();
        let mut last = usize::MAX;
        for t in [0.05, 0.2, 0.4, 0.6, 0.8, 0.99] {
            let n = candidates_from_maps::<f64>(&m, t, usize::MAX).len();
            assert!(n <= last);
            last = n;
        }
    }
}
