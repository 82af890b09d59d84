//! Star-convex polygons, rectangles and rasterized overlap.
//!
//! Coordinates follow the image convention: `x` is the column, `y` the row
//! (increasing downward) and pixel `(c, r)` has its center at `(c, r)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{from_usize, lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Real> BBox<T> {
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let two = lit::<T>(2.0);
        Self::new(cx - w / two, cy - h / two, cx + w / two, cy + h / two)
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x1 - self.x0
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Point<T> {
        let two = lit::<T>(2.0);
        Point::new((self.x0 + self.x1) / two, (self.y0 + self.y1) / two)
    }

    pub fn area(&self) -> T {
        self.width().max(T::zero()) * self.height().max(T::zero())
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    /// True when the closed rectangles share at least one point.
    pub fn touches(&self, o: &Self) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }

    pub fn intersection_area(&self, o: &Self) -> T {
        let w = self.x1.min(o.x1) - self.x0.max(o.x0);
        let h = self.y1.min(o.y1) - self.y0.max(o.y0);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    pub fn iou(&self, o: &Self) -> T {
        let inter = self.intersection_area(o);
        let union = self.area() + o.area() - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            inter / union
        }
    }

    pub fn union(&self, o: &Self) -> Self {
        Self::new(self.x0.min(o.x0), self.y0.min(o.y0), self.x1.max(o.x1), self.y1.max(o.y1))
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn clamp_to(&self, w: T, h: T) -> Self {
        let z = T::zero();
        Self::new(self.x0.max(z).min(w), self.y0.max(z).min(h), self.x1.max(z).min(w), self.y1.max(z).min(h))
    }
}

/// Star-convex polygon: a center plus radial distances along equally spaced rays.
///
/// Ray `k` of `n` points at angle `2*pi*k/n`; vertex `k` is
/// `center + d_k * (cos, sin)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarPolygon<T> {
    pub center: Point<T>,
    pub distances: Vec<T>,
    pub score: T,
}

/// Vertices of the star polygon defined by `center` and `distances`.
pub fn polygon_from_rays<T: Real>(center: Point<T>, distances: &[T]) -> Result<Vec<Point<T>>> {
    validate_rays(distances)?;
    Ok(vertices_unchecked(center, distances))
}

fn validate_rays<T: Real>(distances: &[T]) -> Result<()> {
    if distances.len() < 3 {
        return Err(Error::DegeneratePolygon(format!("{} rays, need at least 3", distances.len())));
    }
    if distances.iter().any(|d| !d.is_finite() || *d < T::zero()) {
        return Err(Error::DegeneratePolygon("ray distances must be finite and >= 0".into()));
    }
    let positive = distances.iter().filter(|d| **d > T::zero()).count();
    if positive < 3 {
        return Err(Error::DegeneratePolygon(format!("{positive} positive distances, need at least 3")));
    }
    Ok(())
}

/// `(cos, sin)` of every ray angle for `n` rays.
pub fn ray_directions<T: Real>(n: usize) -> Vec<(T, T)> {
    let step = T::TAU() / from_usize::<T>(n);
    (0..n)
        .map(|k| {
            let theta = step * from_usize::<T>(k);
            (theta.cos(), theta.sin())
        })
        .collect()
}

/// Vertices from precomputed [`ray_directions`]; bit-identical to
/// [`StarPolygon::vertices`].
pub fn vertices_with<T: Real>(center: Point<T>, distances: &[T], dirs: &[(T, T)]) -> Vec<Point<T>> {
    distances.iter().zip(dirs).map(|(&d, &(c, s))| Point::new(center.x + d * c, center.y + d * s)).collect()
}

fn vertices_unchecked<T: Real>(center: Point<T>, distances: &[T]) -> Vec<Point<T>> {
    vertices_with(center, distances, &ray_directions(distances.len()))
}

impl<T: Real> StarPolygon<T> {
    pub fn new(center: Point<T>, distances: Vec<T>, score: T) -> Result<Self> {
        validate_rays(&distances)?;
        Ok(Self { center, distances, score })
    }

    #[inline]
    pub fn n_rays(&self) -> usize {
        self.distances.len()
    }

    pub fn ray_angle(&self, k: usize) -> T {
        T::TAU() * from_usize::<T>(k) / from_usize::<T>(self.n_rays())
    }

    pub fn vertices(&self) -> Vec<Point<T>> {
        vertices_unchecked(self.center, &self.distances)
    }

    pub fn bbox(&self) -> BBox<T> {
        bbox_of(&self.vertices())
    }

    /// Shoelace area of the vertex polygon.
    pub fn area(&self) -> T {
        let v = self.vertices();
        let n = v.len();
        let mut acc = T::zero();
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            acc += a.x * b.y - b.x * a.y;
        }
        acc.abs() / lit(2.0)
    }

    /// Even-odd containment; a point exactly on a left/top edge counts as inside.
    pub fn contains(&self, p: Point<T>) -> bool {
        contains_point(&self.vertices(), p)
    }

    /// Maps the polygon through `q = scale * p + offset`.
    pub fn affine(&self, scale: T, dx: T, dy: T) -> Self {
        Self {
            center: Point::new(self.center.x * scale + dx, self.center.y * scale + dy),
            distances: self.distances.iter().map(|d| *d * scale).collect(),
            score: self.score,
        }
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        self.affine(T::one(), dx, dy)
    }

    /// Distance from `p` along direction `theta` to the first boundary crossing.
    pub fn ray_exit_distance(&self, p: Point<T>, theta: T) -> Option<T> {
        ray_exit(&self.vertices(), p, theta.cos(), theta.sin())
    }

    /// Sample-lattice rasterization at `supersample` samples per pixel axis.
    pub fn raster(&self, supersample: u32) -> Raster {
        Raster::of_vertices(&self.vertices(), supersample)
    }
}

/// Bounding box of a non-empty vertex list.
pub fn bbox_of<T: Real>(v: &[Point<T>]) -> BBox<T> {
    let mut b = BBox::new(v[0].x, v[0].y, v[0].x, v[0].y);
    for p in &v[1..] {
        b.x0 = b.x0.min(p.x);
        b.y0 = b.y0.min(p.y);
        b.x1 = b.x1.max(p.x);
        b.y1 = b.y1.max(p.y);
    }
    b
}

pub(crate) fn contains_point<T: Real>(v: &[Point<T>], p: Point<T>) -> bool {
    let n = v.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub(crate) fn ray_exit<T: Real>(v: &[Point<T>], p: Point<T>, dx: T, dy: T) -> Option<T> {
    let n = v.len();
    let eps = lit::<T>(1e-12);
    let mut best: Option<T> = None;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let denom = dx * ey - dy * ex;
        if denom.abs() <= eps {
            continue;
        }
        let (wx, wy) = (a.x - p.x, a.y - p.y);
        let t = (wx * ey - wy * ex) / denom;
        let u = (wx * dy - wy * dx) / denom;
        if t > eps && u >= T::zero() && u <= T::one() && best.is_none_or(|bt| t < bt) {
            best = Some(t);
        }
    }
    best
}

/// Rasterization of a polygon on the global sample lattice.
///
/// For supersampling factor `s`, sample `(j, i)` sits at
/// `((j + 0.5) / s - 0.5, (i + 0.5) / s - 0.5)`, i.e. `s x s` evenly spaced
/// sub-pixel centers per pixel. With `s = 1` samples are pixel centers, so a
/// raster doubles as a pixel mask. Each row stores half-open column spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    supersample: u32,
    row0: i64,
    row_start: Vec<u32>,
    spans: Vec<(i64, i64)>,
    count: u64,
}

/// `ceil` without a libm call; the result only seeds an exact search.
#[inline]
fn fast_ceil(x: f64) -> i64 {
    let t = x as i64;
    if (t as f64) < x { t + 1 } else { t }
}

impl Raster {
    pub fn of_vertices<T: Real>(v: &[Point<T>], supersample: u32) -> Self {
        assert!(supersample >= 1, "supersample must be >= 1");
        let v: Vec<(f64, f64)> =
            v.iter().map(|p| (p.x.to_f64().unwrap_or(f64::NAN), p.y.to_f64().unwrap_or(f64::NAN))).collect();
        let s = supersample as f64;
        // multiplying by 1/s is exact for powers of two
        let inv = 1.0 / s;
        let pow2 = supersample.is_power_of_two();
        let sample = |i: i64| if pow2 { (i as f64 + 0.5) * inv - 0.5 } else { (i as f64 + 0.5) / s - 0.5 };
        let index_of = |c: f64| (c + 0.5) * s - 0.5;
        // first lattice index whose sample is >= c, exact against `sample`
        let first_at_or_after = |c: f64| -> i64 {
            let mut j = fast_ceil(index_of(c));
            while sample(j - 1) >= c {
                j -= 1;
            }
            while sample(j) < c {
                j += 1;
            }
            j
        };

        let (mut ymin, mut ymax) = (v[0].1, v[0].1);
        for p in &v {
            ymin = ymin.min(p.1);
            ymax = ymax.max(p.1);
        }
        let row0 = fast_ceil(index_of(ymin)) - 2;
        let row1 = fast_ceil(index_of(ymax)) + 1;
        let nrows = (row1 - row0 + 1).max(0) as usize;

        // An edge crosses sample row y iff min(ay, by) <= y < max(ay, by),
        // matching the even-odd point test.
        let n = v.len();
        let mut per_row = vec![0u32; nrows + 1];
        let mut crossings: Vec<(i64, f64)> = Vec::with_capacity(2 * nrows + 4);
        for e in 0..n {
            let (a, b) = (v[e], v[(e + 1) % n]);
            if a.1 == b.1 {
                continue;
            }
            let (lo, hi) = if a.1 < b.1 { (a.1, b.1) } else { (b.1, a.1) };
            let mut i = first_at_or_after(lo);
            loop {
                let y = sample(i);
                if y >= hi {
                    break;
                }
                crossings.push((i, a.0 + (y - a.1) * (b.0 - a.0) / (b.1 - a.1)));
                per_row[(i - row0) as usize] += 1;
                i += 1;
            }
        }
        // counting sort by row, then by x within each row
        let mut row_start: Vec<u32> = Vec::with_capacity(nrows + 1);
        let mut acc = 0u32;
        for c in per_row.iter().take(nrows) {
            row_start.push(acc);
            acc += c;
        }
        row_start.push(acc);
        let mut fill = row_start.clone();
        let mut xs = vec![0f64; crossings.len()];
        for (i, x) in &crossings {
            let r = (i - row0) as usize;
            xs[fill[r] as usize] = *x;
            fill[r] += 1;
        }

        let mut span_start = Vec::with_capacity(nrows + 1);
        let mut spans = Vec::with_capacity(nrows);
        let mut count = 0u64;
        for r in 0..nrows {
            span_start.push(spans.len() as u32);
            let row = &mut xs[row_start[r] as usize..row_start[r + 1] as usize];
            if row.len() > 2 {
                row.sort_unstable_by(f64::total_cmp);
            } else if row.len() == 2 && row[0] > row[1] {
                row.swap(0, 1);
            }
            for pair in row.chunks_exact(2) {
                let (j0, j1) = (first_at_or_after(pair[0]), first_at_or_after(pair[1]));
                if j1 > j0 {
                    spans.push((j0, j1));
                    count += (j1 - j0) as u64;
                }
            }
        }
        span_start.push(spans.len() as u32);
        Self { supersample, row0, row_start: span_start, spans, count }
    }

    #[inline]
    pub fn count(&self) -> u64 {
        self.count
    }

    #[inline]
    pub fn supersample(&self) -> u32 {
        self.supersample
    }

    fn nrows(&self) -> i64 {
        self.row_start.len() as i64 - 1
    }

    /// Column spans of lattice row `i`.
    pub fn row(&self, i: i64) -> &[(i64, i64)] {
        let r = i - self.row0;
        if r < 0 || r >= self.nrows() {
            return &[];
        }
        let r = r as usize;
        &self.spans[self.row_start[r] as usize..self.row_start[r + 1] as usize]
    }

    /// Iterates `(row, col_start, col_end)` for every span.
    pub fn iter_spans(&self) -> impl Iterator<Item = (i64, i64, i64)> + '_ {
        (0..self.nrows()).flat_map(move |r| {
            let i = self.row0 + r;
            self.row(i).iter().map(move |&(a, b)| (i, a, b))
        })
    }

    pub fn intersection_count(&self, o: &Raster) -> u64 {
        assert_eq!(self.supersample, o.supersample, "rasters on different lattices");
        let lo = self.row0.max(o.row0);
        let hi = (self.row0 + self.nrows()).min(o.row0 + o.nrows());
        let mut total = 0u64;
        for i in lo..hi {
            let (a, b) = (self.row(i), o.row(i));
            let (mut p, mut q) = (0, 0);
            while p < a.len() && q < b.len() {
                let s = a[p].0.max(b[q].0);
                let e = a[p].1.min(b[q].1);
                if e > s {
                    total += (e - s) as u64;
                }
                if a[p].1 < b[q].1 {
                    p += 1;
                } else {
                    q += 1;
                }
            }
        }
        total
    }

    pub fn iou(&self, o: &Raster) -> f64 {
        let inter = self.intersection_count(o);
        let union = self.count + o.count - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Rasterized intersection-over-union on a shared `supersample` lattice.
///
/// Polygons with disjoint bounding boxes return 0 without rasterizing.
pub fn polygon_iou<T: Real>(a: &StarPolygon<T>, b: &StarPolygon<T>, supersample: u32) -> T {
    if !a.bbox().touches(&b.bbox()) {
        return T::zero();
    }
    lit(a.raster(supersample).iou(&b.raster(supersample)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn poly(cx: f64, cy: f64, d: Vec<f64>) -> StarPolygon<f64> {
        StarPolygon::new(Point::new(cx, cy), d, 1.0).unwrap()
    }

    #[test]
    fn axis_vertices() {
        let v = polygon_from_rays(Point::new(10.0, 10.0), &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let expect = [(11.0, 10.0), (10.0, 11.0), (9.0, 10.0), (10.0, 9.0)];
        for (p, e) in v.iter().zip(expect) {
            assert_abs_diff_eq!(p.x, e.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.y, e.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_distance_gives_regular_polygon() {
        for n in [3usize, 5, 8, 32] {
            let v = polygon_from_rays(Point::new(0.0f64, 0.0), &vec![2.5; n]).unwrap();
            for p in &v {
                assert_abs_diff_eq!(p.x.hypot(p.y), 2.5, epsilon = 1e-12);
            }
            let side = |i: usize| {
                let (a, b) = (v[i], v[(i + 1) % n]);
                (a.x - b.x).hypot(a.y - b.y)
            };
            for i in 1..n {
                assert_abs_diff_eq!(side(i), side(0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_rays_rejected() {
        assert!(polygon_from_rays(Point::new(0.0, 0.0), &[1.0, 1.0]).is_err());
        assert!(polygon_from_rays(Point::new(0.0, 0.0), &[1.0, 1.0, 0.0, 0.0]).is_err());
        assert!(polygon_from_rays(Point::new(0.0, 0.0), &[1.0, -1.0, 1.0, 1.0]).is_err());
        assert!(polygon_from_rays(Point::new(0.0, 0.0), &[1.0, 0.0, 1.0, 1.0]).is_ok());
    }

    #[test]
    fn generic_over_f32() {
        let p: StarPolygon<f32> = StarPolygon::new(Point::new(5.0, 5.0), vec![3.0; 16], 0.5).unwrap();
        assert!(p.contains(Point::new(5.0, 5.0)));
        assert_eq!(polygon_iou(&p, &p, 4), 1.0f32);
    }

    #[test]
    fn identical_and_disjoint_iou() {
        let a = poly(10.0, 10.0, vec![4.0; 12]);
        assert_eq!(polygon_iou(&a, &a, 4), 1.0);
        let b = poly(30.0, 10.0, vec![4.0; 12]);
        assert_eq!(polygon_iou(&a, &b, 4), 0.0);
    }

    #[test]
    fn raster_matches_point_test_at_pixel_centers() {
        let p = poly(7.3, 6.8, vec![3.0, 5.0, 2.0, 4.5, 6.0, 1.5, 3.3, 4.0]);
        let r = p.raster(1);
        let mut inside = std::collections::HashSet::new();
        for (i, a, b) in r.iter_spans() {
            for j in a..b {
                inside.insert((j, i));
            }
        }
        for y in -2..20i64 {
            for x in -2..20i64 {
                let want = p.contains(Point::new(x as f64, y as f64));
                assert_eq!(inside.contains(&(x, y)), want, "pixel ({x},{y})");
            }
        }
        assert_eq!(r.count() as usize, inside.len());
    }

    #[test]
    fn ray_exit_from_center_hits_vertices() {
        let d = vec![3.0, 5.0, 2.0, 4.5, 6.0, 1.5, 3.3, 4.0];
        let p = poly(0.0, 0.0, d.clone());
        for (k, dk) in d.iter().enumerate() {
            let t = p.ray_exit_distance(p.center, p.ray_angle(k)).unwrap();
            assert_abs_diff_eq!(t, *dk, epsilon = 1e-9);
        }
    }

    #[test]
    fn area_of_square_diamond() {
        let p = poly(0.0, 0.0, vec![1.0; 4]);
        assert_abs_diff_eq!(p.area(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn box_iou_basics() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert_abs_diff_eq!(a.iou(&b), 2.0 / 6.0, epsilon = 1e-12);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(a.iou(&a), 1.0);
    }
}
