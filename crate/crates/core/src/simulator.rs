//! Seeded synthetic FISH slides with exact ground truth.
//!
//! All randomness comes from one `ChaCha8Rng` seeded with the 64-bit seed, so
//! a `(config, seed)` pair always produces the same slide. Nuclei are drawn
//! directly as star polygons with smooth low-harmonic radius jitter; DAPI
//! fills each polygon, FISH signals are isotropic Gaussian spots in the HER2
//! and CEP17 planes, artifact nuclei are saturated in every channel and
//! smears are elongated streaks in the signal planes only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classify::NucleusClass;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point, StarPolygon};
use crate::image::{Channel, MultiChannelImage};
use crate::scoring::{
    estimate_cluster_copies, grade_nucleus, slide_status, ClusterCopyRule, GradingInput, ScoringConfig, SlideStatus,
};
use crate::signal::SignalClass;

/// Fractions of generated nuclei per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMix {
    pub normal: f64,
    pub low_amp: f64,
    pub high_amp: f64,
    pub artifact: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        Self { normal: 0.6, low_amp: 0.15, high_amp: 0.15, artifact: 0.1 }
    }
}

impl ClassMix {
    fn weights(&self) -> [(NucleusClass, f64); 4] {
        [
            (NucleusClass::Normal, self.normal),
            (NucleusClass::LowAmp, self.low_amp),
            (NucleusClass::HighAmp, self.high_amp),
            (NucleusClass::Artifact, self.artifact),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive nucleus count range.
    pub nuclei: (usize, usize),
    /// Inclusive mean-radius range in px.
    pub radius: (f64, f64),
    pub n_rays: usize,
    /// Relative amplitude of the radius jitter of regular nuclei.
    pub shape_jitter: f64,
    /// Relative amplitude of the radius jitter of artifact blobs.
    pub artifact_jitter: f64,
    pub class_mix: ClassMix,
    pub psf_sigma: f64,
    pub spot_amplitude: f64,
    pub dapi_level: f64,
    pub noise_sigma: f64,
    /// Expected smears per megapixel.
    pub artifact_density: f64,
    pub allow_overlap: bool,
    /// Minimum boundary gap between non-overlapping nuclei in px.
    pub min_gap: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 1600,
            height: 1200,
            nuclei: (20, 30),
            radius: (22.0, 30.0),
            n_rays: 32,
            shape_jitter: 0.1,
            artifact_jitter: 0.2,
            class_mix: ClassMix::default(),
            psf_sigma: 1.5,
            spot_amplitude: 0.6,
            dapi_level: 0.55,
            noise_sigma: 0.04,
            artifact_density: 4.0,
            allow_overlap: false,
            min_gap: 6.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Default geometry without noise or smears.
    pub fn noiseless() -> Self {
        Self { noise_sigma: 0.0, artifact_density: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("sim.width/height", "canvas dims must be positive"));
        }
        if self.nuclei.0 > self.nuclei.1 {
            return Err(Error::config("sim.nuclei", "min exceeds max"));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::config("sim.radius", "need 0 < min <= max"));
        }
        if self.n_rays < 3 {
            return Err(Error::config("sim.n_rays", "must be >= 3"));
        }
        let m = &self.class_mix;
        let fr = [m.normal, m.low_amp, m.high_amp, m.artifact];
        if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("sim.class_mix", "fractions must be >= 0 and sum to 1"));
        }
        if !(self.psf_sigma > 0.0) {
            return Err(Error::config("sim.psf_sigma", "must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("sim.noise_sigma", "must be >= 0"));
        }
        if !(self.artifact_density >= 0.0) {
            return Err(Error::config("sim.artifact_density", "must be >= 0"));
        }
        for (field, v) in [
            ("sim.shape_jitter", self.shape_jitter),
            ("sim.artifact_jitter", self.artifact_jitter),
        ] {
            if !(0.0..0.5).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 0.5)"));
            }
        }
        for (field, v) in [("sim.spot_amplitude", self.spot_amplitude), ("sim.dapi_level", self.dapi_level)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(field, "must lie in (0, 1]"));
            }
        }
        if !(self.min_gap >= 0.0) {
            return Err(Error::config("sim.min_gap", "must be >= 0"));
        }
        Ok(())
    }

    /// Half-width of a single-spot box, `round(2 * psf_sigma)`.
    pub fn box_half_width(&self) -> f64 {
        (2.0 * self.psf_sigma).round()
    }

    pub fn singleton_area(&self) -> f64 {
        (2.0 * self.box_half_width()).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSignal {
    pub class: SignalClass,
    #[serde(rename = "box")]
    pub bbox: BBox<f64>,
    pub true_copies: u32,
    /// Rendered spot centers (one for singles).
    pub spots: Vec<Point<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtNucleus {
    pub id: usize,
    pub polygon: StarPolygon<f64>,
    pub class: NucleusClass,
    pub signals: Vec<GtSignal>,
    pub her2_copies: u32,
    pub cep17_copies: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub nuclei: Vec<GtNucleus>,
    pub status: SlideStatus,
}

impl GroundTruth {
    pub fn polygons(&self) -> Vec<StarPolygon<f64>> {
        self.nuclei.iter().map(|n| n.polygon.clone()).collect()
    }

    /// Slide status from the stored copy counts under `cfg`.
    pub fn regrade(&self, cfg: &ScoringConfig) -> SlideStatus {
        slide_status(self.nuclei.iter().map(gt_grading_input), cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn gt_grading_input(n: &GtNucleus) -> GradingInput {
    GradingInput {
        class: n.class,
        her2_copies: n.her2_copies,
        cep17_copies: n.cep17_copies,
        consistent: true,
        inclusion: None,
    }
}

/// Copy-count rule used for simulated clusters: the scoring default with the
/// simulator's singleton box area as reference.
fn cluster_rule() -> ClusterCopyRule {
    ClusterCopyRule::default()
}

/// Smooth star-polygon radii: mean radius times `1 + jitter * s(theta)`,
/// with `s` a random combination of harmonics 2..=4 scaled to `[-1, 1]`.
fn jittered_radii(rng: &mut ChaCha8Rng, n: usize, r: f64, jitter: f64) -> Vec<f64> {
    let coeffs: Vec<(f64, f64)> = (2..=4)
        .map(|m| {
            let w = 1.0 / (m * m) as f64;
            (w * rng.random_range(-1.0..=1.0), w * rng.random_range(-1.0..=1.0))
        })
        .collect();
    let norm: f64 = coeffs.iter().map(|(a, b)| (a * a + b * b).sqrt()).sum::<f64>().max(1e-12);
    (0..n)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / n as f64;
            let s: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(i, (a, b))| {
                    let m = (i + 2) as f64;
                    a * (m * t).cos() + b * (m * t).sin()
                })
                .sum::<f64>()
                / norm;
            r * (1.0 + jitter * s)
        })
        .collect()
}

fn pick_class(rng: &mut ChaCha8Rng, mix: &ClassMix) -> NucleusClass {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let w = mix.weights();
    for (c, f) in w {
        acc += f;
        if u < acc {
            return c;
        }
    }
    // rounding slack: last class with positive weight
    w.iter().rev().find(|(_, f)| *f > 0.0).map(|(c, _)| *c).unwrap_or(NucleusClass::Normal)
}

const SPOT_SPACING: i64 = 7;
const CLUSTER_STEP: i64 = 4;
const PLACEMENT_TRIES: usize = 400;

struct SpotLayout<'a> {
    polygon: &'a StarPolygon<f64>,
    /// Spots are kept within this radius of the polygon center.
    reach: f64,
    her2: Vec<(i64, i64)>,
    cep17: Vec<(i64, i64)>,
}

impl SpotLayout<'_> {
    fn admissible(&self, p: (i64, i64)) -> bool {
        let (cx, cy) = (self.polygon.center.x, self.polygon.center.y);
        let (dx, dy) = (p.0 as f64 - cx, p.1 as f64 - cy);
        (dx * dx + dy * dy).sqrt() <= self.reach && self.polygon.contains(Point::new(p.0 as f64, p.1 as f64))
    }

    fn spaced(taken: &[(i64, i64)], p: (i64, i64)) -> bool {
        taken.iter().all(|q| (q.0 - p.0).abs().max((q.1 - p.1).abs()) >= SPOT_SPACING)
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> (i64, i64) {
        let r = self.reach * rng.random::<f64>().sqrt();
        let t = std::f64::consts::TAU * rng.random::<f64>();
        ((self.polygon.center.x + r * t.cos()).round() as i64, (self.polygon.center.y + r * t.sin()).round() as i64)
    }

    fn add_single(&mut self, rng: &mut ChaCha8Rng, her2: bool) -> Result<(i64, i64)> {
        for _ in 0..PLACEMENT_TRIES {
            let p = self.random_point(rng);
            let taken = if her2 { &self.her2 } else { &self.cep17 };
            if self.admissible(p) && Self::spaced(taken, p) {
                if her2 {
                    self.her2.push(p);
                } else {
                    self.cep17.push(p);
                }
                return Ok(p);
            }
        }
        Err(Error::Placement(format!(
            "no room for another {} spot in nucleus at ({:.1}, {:.1})",
            if her2 { "HER2" } else { "CEP17" },
            self.polygon.center.x,
            self.polygon.center.y
        )))
    }

    /// Staircase chain of `k` spots with alternating x and y steps of
    /// `CLUSTER_STEP`, so each spot touches at most two chain neighbours.
    fn add_cluster(&mut self, rng: &mut ChaCha8Rng, k: usize) -> Result<Vec<(i64, i64)>> {
        for _ in 0..PLACEMENT_TRIES {
            let sx = if rng.random::<bool>() { CLUSTER_STEP } else { -CLUSTER_STEP };
            let sy = if rng.random::<bool>() { CLUSTER_STEP } else { -CLUSTER_STEP };
            let x_first = rng.random::<bool>();
            let start = self.random_point(rng);
            let mut chain = vec![start];
            for i in 1..k {
                let last = chain[i - 1];
                let along_x = (i % 2 == 1) == x_first;
                chain.push(if along_x { (last.0 + sx, last.1) } else { (last.0, last.1 + sy) });
            }
            if chain.iter().all(|p| self.admissible(*p) && Self::spaced(&self.her2, *p)) {
                self.her2.extend(chain.iter().copied());
                return Ok(chain);
            }
        }
        Err(Error::Placement(format!(
            "no room for a {k}-spot cluster in nucleus at ({:.1}, {:.1})",
            self.polygon.center.x, self.polygon.center.y
        )))
    }
}

fn spot_box(p: (i64, i64), hw: f64) -> BBox<f64> {
    BBox::new(p.0 as f64 - hw, p.1 as f64 - hw, p.0 as f64 + hw, p.1 as f64 + hw)
}

fn single(class: SignalClass, p: (i64, i64), hw: f64) -> GtSignal {
    GtSignal { class, bbox: spot_box(p, hw), true_copies: 1, spots: vec![Point::new(p.0 as f64, p.1 as f64)] }
}

/// Draws the FISH signals of one nucleus.
///
/// Normal: (HER2, CEP17) in {(1,1), (1,2), (2,2)}. LowAmp: CEP17 1-2 and
/// HER2 from `2*CEP17` to 5. HighAmp: either 6-7 HER2 singles or one cluster
/// of 6-8 chained spots plus at most one HER2 single; CEP17 1-2.
pub fn place_signals(
    polygon: &StarPolygon<f64>,
    class: NucleusClass,
    rng: &mut ChaCha8Rng,
    cfg: &SimConfig,
) -> Result<Vec<GtSignal>> {
    let hw = cfg.box_half_width();
    let min_d = polygon.distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut layout = SpotLayout { polygon, reach: 0.75 * min_d - hw, her2: Vec::new(), cep17: Vec::new() };
    if layout.reach <= 0.0 {
        return Err(Error::Placement(format!("nucleus with min radius {min_d:.1} px is too small for signals")));
    }
    let mut out = Vec::new();
    let (n_her2, n_cep17, cluster) = match class {
        NucleusClass::Normal => {
            let (h, c) = [(1, 1), (1, 2), (2, 2)][rng.random_range(0..3)];
            (h, c, None)
        }
        NucleusClass::LowAmp => {
            let c = rng.random_range(1..=2usize);
            (rng.random_range(2 * c..=5), c, None)
        }
        NucleusClass::HighAmp => {
            let c = rng.random_range(1..=2usize);
            if rng.random::<bool>() {
                (rng.random_range(6..=7usize), c, None)
            } else {
                (rng.random_range(0..=1usize), c, Some(rng.random_range(6..=8usize)))
            }
        }
        NucleusClass::Artifact | NucleusClass::Background => {
            return Err(Error::Placement(format!("class {class:?} carries no signals")));
        }
    };
    if let Some(k) = cluster {
        let chain = layout.add_cluster(rng, k)?;
        let bbox = chain.iter().map(|p| spot_box(*p, hw)).reduce(|a, b| a.union(&b)).expect("non-empty chain");
        let copies = estimate_cluster_copies(bbox.area(), cfg.singleton_area(), &cluster_rule())?;
        out.push(GtSignal {
            class: SignalClass::Her2Cluster,
            bbox,
            true_copies: copies,
            spots: chain.iter().map(|p| Point::new(p.0 as f64, p.1 as f64)).collect(),
        });
    }
    for _ in 0..n_her2 {
        let p = layout.add_single(rng, true)?;
        out.push(single(SignalClass::Her2, p, hw));
    }
    for _ in 0..n_cep17 {
        let p = layout.add_single(rng, false)?;
        out.push(single(SignalClass::Cep17, p, hw));
    }
    Ok(out)
}

/// Random sequential placement can jam; redraw the layout a few times
/// before giving up on a nucleus.
fn place_with_retries(
    polygon: &StarPolygon<f64>,
    class: NucleusClass,
    rng: &mut ChaCha8Rng,
    cfg: &SimConfig,
) -> Result<Vec<GtSignal>> {
    let mut last = None;
    for _ in 0..8 {
        match place_signals(polygon, class, rng, cfg) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn counts(signals: &[GtSignal]) -> (u32, u32) {
    let mut h = 0;
    let mut c = 0;
    for s in signals {
        match s.class {
            SignalClass::Cep17 => c += s.true_copies,
            _ => h += s.true_copies,
        }
    }
    (h, c)
}

fn add_spot(plane: &mut [f32], w: usize, h: usize, cx: f64, cy: f64, amp: f64, sx: f64, sy: f64, angle: f64) {
    let r = (4.0 * sx.max(sy)).ceil() as i64;
    let (cos, sin) = (angle.cos(), angle.sin());
    let (x0, x1) = ((cx.floor() as i64 - r).max(0), (cx.ceil() as i64 + r).min(w as i64 - 1));
    let (y0, y1) = ((cy.floor() as i64 - r).max(0), (cy.ceil() as i64 + r).min(h as i64 - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
            let g = amp * (-(u * u) / (2.0 * sx * sx) - (v * v) / (2.0 * sy * sy)).exp();
            let px = &mut plane[y as usize * w + x as usize];
            *px = (*px as f64 + g) as f32;
        }
    }
}

/// Renders one slide and its ground truth.
pub fn simulate_slide(cfg: &SimConfig, seed: u64) -> Result<(MultiChannelImage, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let count = rng.random_range(cfg.nuclei.0..=cfg.nuclei.1);

    let mut placed: Vec<(StarPolygon<f64>, NucleusClass, f64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = pick_class(&mut rng, &cfg.class_mix);
        let jitter = if class == NucleusClass::Artifact { cfg.artifact_jitter } else { cfg.shape_jitter };
        let mut ok = None;
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.random_range(cfg.radius.0..=cfg.radius.1);
            let d = jittered_radii(&mut rng, cfg.n_rays, r, jitter);
            let extent = d.iter().copied().fold(0.0, f64::max);
            let lo = extent + 2.0;
            if w as f64 - lo <= lo || h as f64 - lo <= lo {
                return Err(Error::Placement(format!("canvas {w}x{h} cannot hold a nucleus of radius {extent:.1}")));
            }
            let cx = rng.random_range(lo..=w as f64 - lo);
            let cy = rng.random_range(lo..=h as f64 - lo);
            let clear = cfg.allow_overlap
                || placed.iter().all(|(p, _, e)| {
                    let dd = ((p.center.x - cx).powi(2) + (p.center.y - cy).powi(2)).sqrt();
                    dd >= e + extent + cfg.min_gap
                });
            if clear {
                ok = Some((StarPolygon::new(Point::new(cx, cy), d, 1.0)?, extent));
                break;
            }
        }
        let (poly, extent) =
            ok.ok_or_else(|| Error::Placement(format!("could not place nucleus {} of {count} without overlap", placed.len() + 1)))?;
        placed.push((poly, class, extent));
    }

    let mut nuclei = Vec::with_capacity(count);
    for (id, (polygon, class, _)) in placed.into_iter().enumerate() {
        let signals = if class.is_gradable() { place_with_retries(&polygon, class, &mut rng, cfg)? } else { Vec::new() };
        let (her2, cep17) = counts(&signals);
        nuclei.push(GtNucleus { id, polygon, class, signals, her2_copies: her2, cep17_copies: cep17 });
    }

    let mut img = MultiChannelImage::new(w, h);
    for n in &nuclei {
        let saturated = n.class == NucleusClass::Artifact;
        for (r, c0, c1) in n.polygon.raster(1).iter_spans() {
            if r < 0 || r >= h as i64 {
                continue;
            }
            for c in c0.max(0)..c1.min(w as i64) {
                let (x, y) = (c as usize, r as usize);
                if saturated {
                    for ch in Channel::ALL {
                        img.set(ch, x, y, 1.0);
                    }
                } else {
                    img.set(Channel::Dapi, x, y, img.get(Channel::Dapi, x, y).max(cfg.dapi_level as f32));
                }
            }
        }
        for s in &n.signals {
            let ch = if s.class == SignalClass::Cep17 { Channel::Cep17 } else { Channel::Her2 };
            for p in &s.spots {
                add_spot(img.plane_mut(ch), w, h, p.x, p.y, cfg.spot_amplitude, cfg.psf_sigma, cfg.psf_sigma, 0.0);
            }
        }
    }

    let expected = cfg.artifact_density * (w * h) as f64 / 1e6;
    let smears = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
    for _ in 0..smears {
        let ch = if rng.random::<bool>() { Channel::Her2 } else { Channel::Cep17 };
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(0.15..0.35);
        add_spot(img.plane_mut(ch), w, h, cx, cy, amp, rng.random_range(8.0..20.0), rng.random_range(2.0..4.0), angle);
    }

    if cfg.noise_sigma > 0.0 {
        for ch in Channel::ALL {
            for v in img.plane_mut(ch) {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v as f64 + cfg.noise_sigma * n) as f32;
            }
        }
    }
    img.map_intensities(|v| v.clamp(0.0, 1.0));

    let mut gt = GroundTruth {
        schema: crate::report::SCHEMA.to_string(),
        width: w,
        height: h,
        seed,
        nuclei,
        status: SlideStatus {
            status: crate::scoring::AmplificationStatus::Indeterminate,
            evaluable_count: 0,
            mean_ratio: None,
            mean_her2_copies: None,
        },
    };
    gt.status = gt.regrade(&ScoringConfig::default());
    debug_assert!(gt.nuclei.iter().all(|n| !n.class.is_gradable()
        || grade_nucleus(n.her2_copies, n.cep17_copies, &ScoringConfig::default()) == Some(n.class)));
    Ok((img, gt))
}

/// `simulate_slide(cfg, cfg.seed)`.
pub fn simulate(cfg: &SimConfig) -> Result<(MultiChannelImage, GroundTruth)> {
    simulate_slide(cfg, cfg.seed)
}
