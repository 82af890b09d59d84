//! Slide report: per-nucleus records, slide status, review state.
//!
//! Machine decisions are never overwritten. Reviews and threshold changes only
//! touch the effective fields, which [`SlideReport::refresh`] derives from the
//! stored signals, the machine opinions and the review state.

use serde::{Deserialize, Serialize};

use crate::classify::{grade_by_counts, second_opinion, CamMap, NucleusClass, SecondOpinion};
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::geometry::StarPolygon;
use crate::pipeline::PipelineConfig;
use crate::scoring::{grade_nucleus, nucleus_counts, resolve_reference_area, slide_status, GradingInput, NucleusScore, ScoringConfig, SlideStatus};
use crate::signal::SignalBox;

pub const SCHEMA: &str = "fishgrade/1";

/// RFC 3339 UTC timestamp, the report's only nondeterministic value.
pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpinionSource {
    Reference,
    External,
}

/// The image-classifier opinion on one nucleus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOpinion {
    pub source: OpinionSource,
    pub class: NucleusClass,
    pub rationale: String,
    /// Reference classifier only: a filter rule decided the class, so it does
    /// not follow the grading thresholds.
    pub filtered: bool,
    pub probabilities: Option<Vec<f64>>,
    pub cam: Option<CamMap<f64>>,
    /// Why no CAM is stored.
    pub cam_note: Option<String>,
}

/// Reviewer state of one nucleus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Review {
    /// Class set by a reviewer, replacing the machine class.
    pub class: Option<NucleusClass>,
    /// `Some(false)` excludes from grading, `Some(true)` forces inclusion.
    pub inclusion: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusRecord {
    pub id: usize,
    /// Slide coordinates.
    pub polygon: StarPolygon<f64>,
    pub crop_offset: (usize, usize),
    pub crop_dims: (usize, usize),
    pub classifier: ClassifierOpinion,
    /// Grade implied by the signal counts; `None` when the ratio is undefined.
    pub detector_class: Option<NucleusClass>,
    /// Slide coordinates.
    pub signals: Vec<SignalBox<f64>>,
    /// Absent when either opinion is not a grade.
    pub second_opinion: Option<SecondOpinion>,
    pub review: Review,
    pub effective_class: NucleusClass,
    pub score: NucleusScore,
    /// Stage failure that turned this nucleus into an Artifact.
    pub error: Option<String>,
}

impl NucleusRecord {
    pub(crate) fn new(id: usize, polygon: StarPolygon<f64>) -> Self {
        Self {
            id,
            polygon,
            crop_offset: (0, 0),
            crop_dims: (0, 0),
            classifier: ClassifierOpinion {
                source: OpinionSource::Reference,
                class: NucleusClass::Artifact,
                rationale: String::new(),
                filtered: true,
                probabilities: None,
                cam: None,
                cam_note: None,
            },
            detector_class: None,
            signals: Vec::new(),
            second_opinion: None,
            review: Review::default(),
            effective_class: NucleusClass::Artifact,
            score: NucleusScore { her2_copies: 0, cep17_copies: 0, ratio: None, evaluable: false, exclusion: None },
            error: None,
        }
    }

    /// Machine class after the pipeline and any threshold change.
    pub fn machine_class(&self) -> NucleusClass {
        if self.error.is_some() {
            NucleusClass::Artifact
        } else {
            self.classifier.class
        }
    }

    fn grading_input(&self) -> GradingInput {
        GradingInput {
            class: self.effective_class,
            her2_copies: self.score.her2_copies,
            cep17_copies: self.score.cep17_copies,
            consistent: self.review.class.is_some() || self.second_opinion.is_none_or(|s| s.is_consistent()),
            inclusion: self.review.inclusion,
        }
    }

    fn refresh(&mut self, reference_area: f64, cfg: &ScoringConfig) {
        let counts = nucleus_counts(&self.signals, reference_area, &cfg.cluster);
        let (her2, cep17) = match counts {
            Ok(c) => c,
            Err(e) => {
                self.error.get_or_insert_with(|| e.to_string());
                (0, 0)
            }
        };
        if self.error.is_some() {
            self.classifier.class = NucleusClass::Artifact;
            self.classifier.rationale = format!("stage error: {}", self.error.as_deref().unwrap_or_default());
            self.detector_class = None;
        } else {
            if self.classifier.source == OpinionSource::Reference && !self.classifier.filtered {
                (self.classifier.class, self.classifier.rationale) = grade_by_counts(her2, cep17, cfg);
            }
            self.detector_class = grade_nucleus(her2, cep17, cfg);
        }
        let machine = self.machine_class();
        self.second_opinion = match self.detector_class {
            Some(d) if machine.is_gradable() => Some(second_opinion(machine, d)),
            _ => None,
        };
        self.effective_class = self.review.class.unwrap_or(machine);
        self.score = NucleusScore { her2_copies: her2, cep17_copies: cep17, ratio: None, evaluable: false, exclusion: None };
        self.score = self.grading_input().score(cfg);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideInfo {
    pub width: usize,
    pub height: usize,
    pub working_width: usize,
    pub working_height: usize,
    /// SHA-256 of the decoded pixel data.
    pub input_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReviewAction {
    SetClass { class: NucleusClass },
    Exclude,
    /// Lifts a manual exclusion; otherwise forces inclusion of the nucleus.
    Include,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReviewChange {
    Nucleus { nucleus_id: usize, action: ReviewAction },
    Scoring { scoring: ScoringConfig },
}

/// One entry of the append-only review log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewEvent {
    pub seq: u64,
    pub actor: String,
    pub at: String,
    #[serde(flatten)]
    pub change: ReviewChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideReport {
    pub schema: String,
    pub tool_version: String,
    pub created_at: String,
    pub slide: SlideInfo,
    pub config: PipelineConfig,
    /// HER2 single-box area used for cluster copy estimates.
    pub reference_area: f64,
    pub nuclei: Vec<NucleusRecord>,
    pub status: SlideStatus,
    pub metrics: Option<MetricsReport>,
    pub review_log: Vec<ReviewEvent>,
}

impl SlideReport {
    /// Recomputes every derived field from stored signals, opinions, reviews
    /// and the scoring configuration.
    pub fn refresh(&mut self) {
        let cfg = self.config.scoring.clone();
        self.reference_area = resolve_reference_area(
            &cfg.cluster,
            self.nuclei.iter().filter(|n| n.error.is_none()).flat_map(|n| &n.signals),
            self.config.detector.singleton_area(),
        );
        for n in &mut self.nuclei {
            n.refresh(self.reference_area, &cfg);
        }
        self.status = slide_status(self.nuclei.iter().map(|n| n.grading_input()), &cfg);
        if let Some(m) = &mut self.metrics {
            m.predicted_status = self.status.status;
            m.status_agrees = m.predicted_status == m.true_status;
        }
    }

    /// Re-grades under new thresholds without re-running detection.
    pub fn regrade(&mut self, scoring: ScoringConfig) -> Result<()> {
        scoring.validate()?;
        self.config.scoring = scoring;
        self.refresh();
        Ok(())
    }

    fn nucleus_mut(&mut self, id: usize) -> Result<&mut NucleusRecord> {
        self.nuclei.iter_mut().find(|n| n.id == id).ok_or(Error::UnknownNucleus(id))
    }

    /// Applies a nucleus override.
    pub fn review(&mut self, nucleus_id: usize, action: &ReviewAction) -> Result<()> {
        let n = self.nucleus_mut(nucleus_id)?;
        match action {
            ReviewAction::SetClass { class } => {
                // setting the machine class back clears the override
                n.review.class = (*class != n.machine_class()).then_some(*class);
            }
            ReviewAction::Exclude => n.review.inclusion = Some(false),
            ReviewAction::Include => {
                n.review.inclusion = if n.review.inclusion == Some(false) { None } else { Some(true) };
            }
        }
        self.refresh();
        Ok(())
    }

    /// Validates and applies a change, then appends it to the review log.
    pub fn apply(&mut self, actor: &str, change: ReviewChange) -> Result<&ReviewEvent> {
        self.apply_event(ReviewEvent { seq: self.review_log.len() as u64 + 1, actor: actor.to_string(), at: timestamp(), change })
    }

    /// Applies a logged event as-is; used for replay.
    pub fn apply_event(&mut self, event: ReviewEvent) -> Result<&ReviewEvent> {
        match &event.change {
            ReviewChange::Nucleus { nucleus_id, action } => self.review(*nucleus_id, action)?,
            ReviewChange::Scoring { scoring } => self.regrade(scoring.clone())?,
        }
        self.review_log.push(event);
        Ok(self.review_log.last().expect("just pushed"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// JSON with `created_at` blanked, for determinism comparisons.
    pub fn to_json_without_timestamp(&self) -> Result<String> {
        let mut r = self.clone();
        r.created_at.clear();
        r.to_json()
    }

    pub fn signal_count(&self) -> usize {
        self.nuclei.iter().map(|n| n.signals.len()).sum()
    }
}
