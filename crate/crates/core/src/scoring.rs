//! Copy counting, per-nucleus grading and slide-level HER2 status.

use serde::{Deserialize, Serialize};

use crate::classify::NucleusClass;
use crate::error::{Error, Result};
use crate::signal::{SignalBox, SignalClass};

/// Where the singleton box area used to size clusters comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceArea {
    /// Median HER2-single box area over the slide, falling back to the
    /// detector's `(4 sigma)^2` when the slide has no singles.
    SlideMedian,
    /// Fixed area in px^2.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterCopyRule {
    pub reference_area: ReferenceArea,
    pub cap: u32,
    pub floor: u32,
}

impl Default for ClusterCopyRule {
    fn default() -> Self {
        Self { reference_area: ReferenceArea::SlideMedian, cap: 20, floor: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub ratio_threshold: f64,
    pub high_amp_mean_her2_copies: f64,
    pub min_evaluable_nuclei: usize,
    pub cluster: ClusterCopyRule,
    pub include_discrepant: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            ratio_threshold: 2.0,
            high_amp_mean_her2_copies: 6.0,
            min_evaluable_nuclei: 20,
            cluster: ClusterCopyRule::default(),
            include_discrepant: false,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_threshold > 0.0) {
            return Err(Error::config("scoring.ratio_threshold", "must be > 0"));
        }
        if !(self.high_amp_mean_her2_copies > 0.0) {
            return Err(Error::config("scoring.high_amp_mean_her2_copies", "must be > 0"));
        }
        if self.min_evaluable_nuclei < 1 {
            return Err(Error::config("scoring.min_evaluable_nuclei", "must be >= 1"));
        }
        if self.cluster.floor == 0 || self.cluster.cap < self.cluster.floor {
            return Err(Error::config("scoring.cluster", "need 0 < floor <= cap"));
        }
        if let ReferenceArea::Fixed(a) = self.cluster.reference_area {
            if !(a > 0.0) {
                return Err(Error::config("scoring.cluster.reference_area", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// `clamp(round(cluster_area / reference_area), floor, cap)`.
pub fn estimate_cluster_copies(cluster_area: f64, reference_area: f64, rule: &ClusterCopyRule) -> Result<u32> {
    if !(cluster_area > 0.0) || !(reference_area > 0.0) {
        return Err(Error::Input(format!(
            "cluster copy estimate needs positive areas, got {cluster_area} / {reference_area}"
        )));
    }
    let raw = (cluster_area / reference_area).round();
    Ok((raw.min(u32::MAX as f64) as u32).clamp(rule.floor, rule.cap))
}

/// Median HER2-single box area over `signals`, or `fallback` when there are none.
pub fn reference_singleton_area<'a>(signals: impl IntoIterator<Item = &'a SignalBox<f64>>, fallback: f64) -> f64 {
    let mut areas: Vec<f64> = signals
        .into_iter()
        .filter(|s| s.class == SignalClass::Her2)
        .map(|s| s.bbox.area())
        .filter(|a| *a > 0.0)
        .collect();
    if areas.is_empty() {
        return fallback;
    }
    areas.sort_by(f64::total_cmp);
    let n = areas.len();
    if n % 2 == 1 {
        areas[n / 2]
    } else {
        0.5 * (areas[n / 2 - 1] + areas[n / 2])
    }
}

/// Resolves the configured reference area for a slide.
pub fn resolve_reference_area<'a>(
    rule: &ClusterCopyRule,
    slide_signals: impl IntoIterator<Item = &'a SignalBox<f64>>,
    detector_fallback: f64,
) -> f64 {
    match rule.reference_area {
        ReferenceArea::Fixed(a) => a,
        ReferenceArea::SlideMedian => reference_singleton_area(slide_signals, detector_fallback),
    }
}

/// `(her2_copies, cep17_copies)` for one nucleus.
pub fn nucleus_counts(signals: &[SignalBox<f64>], reference_area: f64, rule: &ClusterCopyRule) -> Result<(u32, u32)> {
    let mut her2 = 0u32;
    let mut cep17 = 0u32;
    for s in signals {
        match s.class {
            SignalClass::Her2 => her2 += 1,
            SignalClass::Her2Cluster => her2 += estimate_cluster_copies(s.bbox.area(), reference_area, rule)?,
            SignalClass::Cep17 => cep17 += 1,
        }
    }
    Ok((her2, cep17))
}

/// HER2/CEP17 ratio; undefined without CEP17.
pub fn ratio(her2: u32, cep17: u32) -> Option<f64> {
    (cep17 >= 1).then(|| her2 as f64 / cep17 as f64)
}

/// Per-nucleus grade from copy counts, `None` when the ratio is undefined.
pub fn grade_nucleus(her2: u32, cep17: u32, cfg: &ScoringConfig) -> Option<NucleusClass> {
    let r = ratio(her2, cep17)?;
    Some(if r < cfg.ratio_threshold {
        NucleusClass::Normal
    } else if her2 as f64 >= cfg.high_amp_mean_her2_copies {
        NucleusClass::HighAmp
    } else {
        NucleusClass::LowAmp
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    FilterClass,
    NoCep17,
    Discrepant,
    ManuallyExcluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusScore {
    pub her2_copies: u32,
    pub cep17_copies: u32,
    pub ratio: Option<f64>,
    pub evaluable: bool,
    pub exclusion: Option<ExclusionReason>,
}

/// Everything slide grading needs to know about one nucleus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradingInput {
    pub class: NucleusClass,
    pub her2_copies: u32,
    pub cep17_copies: u32,
    /// Both opinions agree (or only one opinion exists).
    pub consistent: bool,
    /// Manual inclusion override: `Some(false)` excludes, `Some(true)` includes
    /// a discrepant nucleus.
    pub inclusion: Option<bool>,
}

impl GradingInput {
    pub fn score(&self, cfg: &ScoringConfig) -> NucleusScore {
        let ratio = ratio(self.her2_copies, self.cep17_copies);
        let exclusion = if !self.class.is_gradable() {
            Some(ExclusionReason::FilterClass)
        } else if ratio.is_none() {
            Some(ExclusionReason::NoCep17)
        } else {
            match self.inclusion {
                Some(false) => Some(ExclusionReason::ManuallyExcluded),
                Some(true) => None,
                None if self.consistent || cfg.include_discrepant => None,
                None => Some(ExclusionReason::Discrepant),
            }
        };
        NucleusScore {
            her2_copies: self.her2_copies,
            cep17_copies: self.cep17_copies,
            ratio,
            evaluable: exclusion.is_none(),
            exclusion,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AmplificationStatus {
    Negative,
    PositiveLow,
    PositiveHigh,
    Indeterminate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideStatus {
    pub status: AmplificationStatus,
    pub evaluable_count: usize,
    /// Pooled `sum(HER2) / sum(CEP17)` over evaluable nuclei.
    pub mean_ratio: Option<f64>,
    pub mean_her2_copies: Option<f64>,
}

/// Slide status over the evaluable nuclei among `inputs`.
pub fn slide_status<I>(inputs: I, cfg: &ScoringConfig) -> SlideStatus
where
    I: IntoIterator<Item = GradingInput>,
{
    let mut n = 0usize;
    let (mut her2, mut cep17) = (0u64, 0u64);
    for g in inputs {
        if g.score(cfg).evaluable {
            n += 1;
            her2 += g.her2_copies as u64;
            cep17 += g.cep17_copies as u64;
        }
    }
    let mean_ratio = (cep17 > 0).then(|| her2 as f64 / cep17 as f64);
    let mean_her2 = (n > 0).then(|| her2 as f64 / n as f64);
    let status = match (n >= cfg.min_evaluable_nuclei, mean_ratio, mean_her2) {
        (true, Some(r), Some(m)) => {
            if r < cfg.ratio_threshold {
                AmplificationStatus::Negative
            } else if m >= cfg.high_amp_mean_her2_copies {
                AmplificationStatus::PositiveHigh
            } else {
                AmplificationStatus::PositiveLow
            }
        }
        _ => AmplificationStatus::Indeterminate,
    };
    SlideStatus { status, evaluable_count: n, mean_ratio, mean_her2_copies: mean_her2 }
}
