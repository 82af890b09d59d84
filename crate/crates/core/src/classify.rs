//! Nucleus classification: rule-based grading, external logits, class
//! activation maps and the second-opinion cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Channel;
use crate::num::{from_usize, lit, Real};
use crate::scoring::{grade_nucleus, nucleus_counts, ScoringConfig};
use crate::segmentation::NucleusCrop;
use crate::signal::SignalBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NucleusClass {
    Artifact,
    Background,
    Normal,
    LowAmp,
    HighAmp,
}

impl NucleusClass {
    /// Enum order, also the logit order of external classifiers.
    pub const ALL: [NucleusClass; 5] =
        [NucleusClass::Artifact, NucleusClass::Background, NucleusClass::Normal, NucleusClass::LowAmp, NucleusClass::HighAmp];

    /// Normal, LowAmp and HighAmp take part in slide grading.
    pub fn is_gradable(self) -> bool {
        matches!(self, NucleusClass::Normal | NucleusClass::LowAmp | NucleusClass::HighAmp)
    }

    pub fn name(self) -> &'static str {
        match self {
            NucleusClass::Artifact => "Artifact",
            NucleusClass::Background => "Background",
            NucleusClass::Normal => "Normal",
            NucleusClass::LowAmp => "LowAmp",
            NucleusClass::HighAmp => "HighAmp",
        }
    }
}

impl std::str::FromStr for NucleusClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NucleusClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown nucleus class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// DAPI level counted as nuclear stain.
    pub dapi_threshold: f64,
    /// Below this stained fraction of the polygon the crop is Background.
    pub min_dapi_coverage: f64,
    /// Intensity counted as saturated in any channel.
    pub saturation_level: f64,
    /// Above this saturated fraction the crop is an Artifact.
    pub max_saturated_fraction: f64,
    /// Polygon area bound in full-resolution px^2.
    pub max_area: f64,
    /// Bound on the longer over the shorter bounding-box side.
    pub max_aspect_ratio: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            dapi_threshold: 0.2,
            min_dapi_coverage: 0.5,
            saturation_level: 0.98,
            max_saturated_fraction: 0.2,
            max_area: 12_000.0,
            max_aspect_ratio: 3.0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for (field, v) in [
            ("classifier.dapi_threshold", self.dapi_threshold),
            ("classifier.min_dapi_coverage", self.min_dapi_coverage),
            ("classifier.saturation_level", self.saturation_level),
            ("classifier.max_saturated_fraction", self.max_saturated_fraction),
        ] {
            if !unit(v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.max_area > 0.0) {
            return Err(Error::config("classifier.max_area", "must be > 0"));
        }
        if !(self.max_aspect_ratio >= 1.0) {
            return Err(Error::config("classifier.max_aspect_ratio", "must be >= 1"));
        }
        Ok(())
    }
}

/// Filter-class rules on a masked crop: Background or Artifact with the
/// triggering rule, `None` when the crop passes on to grading.
pub fn filter_rules(crop: &NucleusCrop, cfg: &ClassifierConfig) -> Option<(NucleusClass, String)> {
    let img = &crop.image;
    let inside = crop.mask.iter().filter(|m| **m).count();
    if inside == 0 {
        return Some((NucleusClass::Background, "polygon covers no pixel of the crop".into()));
    }
    let dapi = img.plane(Channel::Dapi);
    let stained = crop.mask.iter().zip(dapi).filter(|(m, v)| **m && **v as f64 >= cfg.dapi_threshold).count();
    let coverage = stained as f64 / inside as f64;
    if coverage < cfg.min_dapi_coverage {
        return Some((
            NucleusClass::Background,
            format!("DAPI coverage {coverage:.3} below {:.3}", cfg.min_dapi_coverage),
        ));
    }
    let saturated = (0..crop.mask.len())
        .filter(|&i| crop.mask[i] && Channel::ALL.iter().any(|c| img.plane(*c)[i] as f64 >= cfg.saturation_level))
        .count();
    let sat_frac = saturated as f64 / inside as f64;
    if sat_frac > cfg.max_saturated_fraction {
        return Some((
            NucleusClass::Artifact,
            format!("saturated fraction {sat_frac:.3} above {:.3}", cfg.max_saturated_fraction),
        ));
    }
    let area = crop.polygon.area();
    if area > cfg.max_area {
        return Some((NucleusClass::Artifact, format!("area {area:.0} px^2 above {:.0}", cfg.max_area)));
    }
    let b = crop.polygon.bbox();
    let (long, short) = (b.width().max(b.height()), b.width().min(b.height()));
    let aspect = if short > 0.0 { long / short } else { f64::INFINITY };
    if aspect > cfg.max_aspect_ratio {
        return Some((NucleusClass::Artifact, format!("aspect ratio {aspect:.2} above {:.2}", cfg.max_aspect_ratio)));
    }
    None
}

/// Grading step of the rule classifier: the nucleus grade from copy counts,
/// Artifact when the ratio is undefined.
pub fn grade_by_counts(her2: u32, cep17: u32, scoring: &ScoringConfig) -> (NucleusClass, String) {
    match grade_nucleus(her2, cep17, scoring) {
        Some(class) => (
            class,
            format!(
                "HER2 {her2} / CEP17 {cep17} = {:.3} against ratio threshold {} and high-amp copies {}",
                her2 as f64 / cep17 as f64,
                scoring.ratio_threshold,
                scoring.high_amp_mean_her2_copies
            ),
        ),
        None => (NucleusClass::Artifact, format!("no CEP17 signal (HER2 {her2}), ratio undefined")),
    }
}

/// Rule-based class of a masked crop plus the rule that decided it.
pub fn classify_by_rules(
    crop: &NucleusCrop,
    signals: &[SignalBox<f64>],
    cfg: &ClassifierConfig,
    scoring: &ScoringConfig,
    reference_area: f64,
) -> (NucleusClass, String) {
    if let Some(hit) = filter_rules(crop, cfg) {
        return hit;
    }
    match nucleus_counts(signals, reference_area, &scoring.cluster) {
        Ok((her2, cep17)) => grade_by_counts(her2, cep17, scoring),
        Err(e) => (NucleusClass::Artifact, format!("signal counting failed: {e}")),
    }
}

/// Softmax over five logits in [`NucleusClass::ALL`] order; ties go to the
/// earlier class.
pub fn classify_by_scores<T: Real>(logits: &[T]) -> Result<(NucleusClass, Vec<T>)> {
    if logits.len() != NucleusClass::ALL.len() {
        return Err(Error::Input(format!("expected 5 logits, got {}", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("logits must be finite".into()));
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|v| (*v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    let probs: Vec<T> = e.into_iter().map(|v| v / z).collect();
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Ok((NucleusClass::ALL[best], probs))
}

/// Saliency grid with values in `[0, 1]`, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

/// Class-weighted feature sum min-max normalized to `[0, 1]`, before upsampling.
/// A constant map normalizes to zeros.
pub fn cam_grid<T: Real>(features: &[T], dims: (usize, usize, usize), weights: &[T]) -> Result<CamMap<T>> {
    let (c, h, w) = dims;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape { tensor: "features".into(), reason: format!("dims {dims:?} must be positive") });
    }
    if features.len() != c * h * w {
        return Err(Error::Shape {
            tensor: "features".into(),
            reason: format!("expected {} values for {dims:?}, found {}", c * h * w, features.len()),
        });
    }
    if weights.len() != c {
        return Err(Error::Shape {
            tensor: "class_weights".into(),
            reason: format!("expected {c} weights, found {}", weights.len()),
        });
    }
    let plane = h * w;
    let mut raw = vec![T::zero(); plane];
    for (ch, wt) in weights.iter().enumerate() {
        for (r, f) in raw.iter_mut().zip(&features[ch * plane..(ch + 1) * plane]) {
            *r += *wt * *f;
        }
    }
    let lo = raw.iter().copied().fold(T::infinity(), T::min);
    let hi = raw.iter().copied().fold(T::neg_infinity(), T::max);
    let values = if hi > lo { raw.into_iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![T::zero(); plane] };
    Ok(CamMap { width: w, height: h, values })
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn upsample_bilinear<T: Real>(map: &CamMap<T>, width: usize, height: usize) -> CamMap<T> {
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, T) {
        let s = (from_usize::<T>(dst) + lit(0.5)) * from_usize::<T>(src_len) / from_usize::<T>(dst_len) - lit(0.5);
        let s = s.max(T::zero()).min(from_usize::<T>(src_len - 1));
        let i0 = s.floor().to_usize().unwrap_or(0);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - from_usize::<T>(i0))
    };
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, map.height, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, map.width, width);
            let at = |r: usize, c: usize| map.values[r * map.width + c];
            let top = at(y0, x0) * (T::one() - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (T::one() - fx) + at(y1, x1) * fx;
            values.push((top * (T::one() - fy) + bot * fy).max(T::zero()).min(T::one()));
        }
    }
    CamMap { width, height, values }
}

/// [`cam_grid`] upsampled to the crop dims.
pub fn compute_cam<T: Real>(
    features: &[T],
    dims: (usize, usize, usize),
    weights: &[T],
    crop_dims: (usize, usize),
) -> Result<CamMap<T>> {
    let grid = cam_grid(features, dims, weights)?;
    Ok(upsample_bilinear(&grid, crop_dims.0, crop_dims.1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum SecondOpinion {
    Consistent,
    Discrepant { classifier: NucleusClass, detector: NucleusClass },
}

impl SecondOpinion {
    pub fn is_consistent(self) -> bool {
        matches!(self, SecondOpinion::Consistent)
    }
}

pub fn second_opinion(a: NucleusClass, b: NucleusClass) -> SecondOpinion {
    if a == b {
        SecondOpinion::Consistent
    } else {
        SecondOpinion::Discrepant { classifier: a, detector: b }
    }
}
