//! Whole-slide orchestration.
//!
//! The slide is block-mean downscaled to working scale, tiled, segmented per
//! tile and stitched with a global polygon NMS. Every nucleus is then cut out
//! at full resolution, its signals detected, graded twice and pooled into the
//! slide status.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{classify_by_scores, compute_cam, filter_rules, ClassifierConfig, NucleusClass};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_slide, EvalConfig, SlidePrediction};
use crate::geometry::StarPolygon;
use crate::image::{downscale, MultiChannelImage};
use crate::report::{ClassifierOpinion, NucleusRecord, OpinionSource, SlideInfo, SlideReport, SCHEMA};
use crate::scoring::ScoringConfig;
use crate::segmentation::{extract_crop, nms_polygons, predict_maps, segment, ProbDistMaps, SegConfig};
use crate::signal::{detect_signals, DetectorConfig, HeadMaps, SignalPredictor};
use crate::simulator::GroundTruth;
use crate::tensor::Tensor;

/// Where nucleus probability and distance maps come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentationSource {
    #[default]
    Reference,
    /// Working-scale maps as "FGT1" tensors.
    External { prob: PathBuf, dist: PathBuf },
}

/// Where per-nucleus signal detections come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSource {
    #[default]
    Reference,
    /// Directory with `descriptor.json` plus `<id>.logits.fgt` and
    /// `<id>.deltas.fgt` per nucleus id.
    External { dir: PathBuf },
}

/// Where the image-classifier opinion comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierSource {
    #[default]
    Reference,
    /// `logits` is `[N, 5]`; `ids` is a JSON array naming the nucleus id of
    /// each row. Optional `features` `[N, C, h, w]` and `weights` `[5, C]`
    /// enable class activation maps.
    External { logits: PathBuf, ids: PathBuf, features: Option<PathBuf>, weights: Option<PathBuf> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Predictors {
    pub segmentation: SegmentationSource,
    pub signals: SignalSource,
    pub classifier: ClassifierSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Segmentation runs at `1 / downscale` of the input resolution.
    pub downscale: usize,
    /// Tile edge in working-scale pixels.
    pub tile: usize,
    pub overlap: usize,
    /// Margin around a nucleus bounding box when cropping, full-scale pixels.
    pub crop_margin: usize,
    pub segmentation: SegConfig,
    pub detector: DetectorConfig,
    pub classifier: ClassifierConfig,
    pub scoring: ScoringConfig,
    pub evaluation: EvalConfig,
    pub predictors: Predictors,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            downscale: 2,
            tile: 1024,
            overlap: 128,
            crop_margin: 10,
            segmentation: SegConfig::default(),
            detector: DetectorConfig::default(),
            classifier: ClassifierConfig::default(),
            scoring: ScoringConfig::default(),
            evaluation: EvalConfig::default(),
            predictors: Predictors::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downscale < 1 {
            return Err(Error::config("downscale", "must be >= 1"));
        }
        if self.tile == 0 {
            return Err(Error::config("tile", "must be positive"));
        }
        if self.overlap >= self.tile {
            return Err(Error::config("overlap", "must be smaller than tile"));
        }
        self.segmentation.validate()?;
        self.detector.validate()?;
        self.classifier.validate()?;
        self.scoring.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

fn axis_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + tile >= dim {
            let last = dim - tile;
            if out.last() != Some(&last) {
                out.push(last);
            }
            return out;
        }
        out.push(o);
        o += stride;
    }
}

/// Row-major tiles with stride `tile - overlap`; the last origin on each axis
/// is pulled back to `dim - tile` so no tile overruns the image.
pub fn tile_image(dims: (usize, usize), tile: usize, overlap: usize) -> Result<Vec<TileSpec>> {
    if tile == 0 || overlap >= tile {
        return Err(Error::config("overlap", "need 0 <= overlap < tile"));
    }
    let (w, h) = dims;
    if w == 0 || h == 0 {
        return Ok(Vec::new());
    }
    let stride = tile - overlap;
    let xs = axis_origins(w, tile, stride);
    let ys = axis_origins(h, tile, stride);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| TileSpec { x, y, width: tile.min(w), height: tile.min(h) }))
        .collect())
}

/// True when a tile-local polygon reaches an edge of the tile that is not an
/// image edge. Such polygons may be clipped and are left to a neighbor tile.
pub fn touches_seam(poly: &StarPolygon<f64>, tile: &TileSpec, dims: (usize, usize)) -> bool {
    let b = poly.bbox();
    (tile.x > 0 && b.x0 < 1.0)
        || (tile.y > 0 && b.y0 < 1.0)
        || (tile.x + tile.width < dims.0 && b.x1 > tile.width as f64 - 2.0)
        || (tile.y + tile.height < dims.1 && b.y1 > tile.height as f64 - 2.0)
}

/// Global NMS over polygons already in slide coordinates.
pub fn stitch_nuclei(polygons: &[StarPolygon<f64>], iou_threshold: f64, supersample: u32) -> Vec<StarPolygon<f64>> {
    nms_polygons(polygons, iou_threshold, supersample)
}

/// Maps a working-scale polygon to full resolution. Working pixel `i` is the
/// mean of full pixels `f*i .. f*i + f - 1`, centered at `f*i + (f - 1)/2`.
pub fn to_full_scale(poly: &StarPolygon<f64>, factor: usize) -> StarPolygon<f64> {
    let f = factor as f64;
    poly.affine(f, (f - 1.0) / 2.0, (f - 1.0) / 2.0)
}

/// Orders polygons row-major by center.
pub fn sort_row_major(polys: &mut [StarPolygon<f64>]) {
    polys.sort_by(|a, b| a.center.y.total_cmp(&b.center.y).then(a.center.x.total_cmp(&b.center.x)));
}

/// Segments every tile of the working-scale image. Polygons come back in
/// slide (working-scale) coordinates with seam-touching ones removed.
pub fn segment_tiles(
    working: &MultiChannelImage,
    cfg: &PipelineConfig,
    external: Option<&ProbDistMaps>,
) -> Result<Vec<(TileSpec, Vec<StarPolygon<f64>>)>> {
    let dims = working.dims();
    if let Some(m) = external {
        if (m.width(), m.height()) != dims {
            return Err(Error::Shape {
                tensor: "prob".into(),
                reason: format!("maps are {}x{}, working image is {}x{}", m.width(), m.height(), dims.0, dims.1),
            });
        }
    }
    let tiles = tile_image(dims, cfg.tile, cfg.overlap)?;
    tiles
        .par_iter()
        .map(|t| {
            let maps = match external {
                Some(m) => m.window(t.x, t.y, t.width, t.height),
                None => predict_maps(&working.sub_image(t.x, t.y, t.width, t.height), &cfg.segmentation.reference)?,
            };
            let polys: Vec<StarPolygon<f64>> = segment(&maps, &cfg.segmentation)?;
            let kept = polys
                .into_iter()
                .filter(|p| !touches_seam(p, t, dims))
                .map(|p| p.translate(t.x as f64, t.y as f64))
                .collect();
            Ok((*t, kept))
        })
        .collect()
}

/// [`segment_tiles`] followed by [`stitch_nuclei`]; working-scale polygons.
pub fn segment_tiled(working: &MultiChannelImage, cfg: &PipelineConfig, external: Option<&ProbDistMaps>) -> Result<Vec<StarPolygon<f64>>> {
    let all: Vec<StarPolygon<f64>> = segment_tiles(working, cfg, external)?.into_iter().flat_map(|(_, p)| p).collect();
    Ok(stitch_nuclei(&all, cfg.segmentation.nms_iou, cfg.segmentation.supersample))
}

// ---------------------------------------------------------------------------
// External predictor inputs
// ---------------------------------------------------------------------------

struct ExternalClassifier {
    /// Row index per nucleus id.
    rows: std::collections::BTreeMap<usize, usize>,
    logits: Tensor,
    cam: Option<(Tensor, Tensor)>,
}

impl ExternalClassifier {
    fn load(logits: &Path, ids: &Path, features: Option<&Path>, weights: Option<&Path>) -> Result<Self> {
        let logits_t = Tensor::read(logits)?;
        let text = std::fs::read_to_string(ids).map_err(|e| Error::io(ids, e))?;
        let id_list: Vec<usize> = serde_json::from_str(&text)?;
        let n = id_list.len();
        logits_t.expect_dims("logits", &[n, NucleusClass::ALL.len()])?;
        let cam = match (features, weights) {
            (Some(f), Some(w)) => {
                let (f, w) = (Tensor::read(f)?, Tensor::read(w)?);
                let fd = f.dims().to_vec();
                if fd.len() != 4 || fd[0] != n {
                    return Err(Error::Shape { tensor: "features".into(), reason: format!("expected [{n}, C, h, w], found {fd:?}") });
                }
                w.expect_dims("class_weights", &[NucleusClass::ALL.len(), fd[1]])?;
                Some((f, w))
            }
            (None, None) => None,
            _ => return Err(Error::Input("features and weights must be supplied together".into())),
        };
        let rows = id_list.into_iter().enumerate().map(|(row, id)| (id, row)).collect();
        Ok(Self { rows, logits: logits_t, cam })
    }
}

/// Inputs loaded once per slide.
struct Loaded {
    classifier: Option<ExternalClassifier>,
}

fn load_externals(p: &Predictors) -> Result<Loaded> {
    let classifier = match &p.classifier {
        ClassifierSource::Reference => None,
        ClassifierSource::External { logits, ids, features, weights } => {
            Some(ExternalClassifier::load(logits, ids, features.as_deref(), weights.as_deref())?)
        }
    };
    Ok(Loaded { classifier })
}

// ---------------------------------------------------------------------------
// Per-nucleus stages
// ---------------------------------------------------------------------------

fn detect_for(id: usize, crop: &MultiChannelImage, cfg: &PipelineConfig) -> Result<Vec<crate::SignalBox>> {
    match &cfg.predictors.signals {
        SignalSource::Reference => detect_signals(crop, &SignalPredictor::Reference, &cfg.detector),
        SignalSource::External { dir } => {
            let (grid, head) = HeadMaps::load(
                &dir.join("descriptor.json"),
                &dir.join(format!("{id}.logits.fgt")),
                &dir.join(format!("{id}.deltas.fgt")),
            )?;
            detect_signals(crop, &SignalPredictor::External { grid: &grid, head: &head }, &cfg.detector)
        }
    }
}

fn classifier_opinion(
    id: usize,
    crop: &crate::segmentation::NucleusCrop,
    cfg: &PipelineConfig,
    ext: Option<&ExternalClassifier>,
) -> Result<ClassifierOpinion> {
    let Some(ext) = ext else {
        let filter = filter_rules(crop, &cfg.classifier);
        let filtered = filter.is_some();
        let (class, rationale) = filter.unwrap_or((NucleusClass::Artifact, String::new()));
        // graded opinions are filled in by `NucleusRecord::refresh`
        return Ok(ClassifierOpinion {
            source: OpinionSource::Reference,
            class,
            rationale,
            filtered,
            probabilities: None,
            cam: None,
            cam_note: Some("reference classifier has no feature maps".into()),
        });
    };
    let row = *ext.rows.get(&id).ok_or_else(|| Error::Input(format!("no classifier logits for nucleus {id}")))?;
    let k = NucleusClass::ALL.len();
    let (class, probs) = classify_by_scores(&ext.logits.data()[row * k..(row + 1) * k].iter().map(|v| *v as f64).collect::<Vec<_>>())?;
    let (cam, cam_note) = match &ext.cam {
        Some((f, w)) => {
            let d = f.dims();
            let (c, h, wd) = (d[1], d[2], d[3]);
            let per = c * h * wd;
            let feats: Vec<f64> = f.data()[row * per..(row + 1) * per].iter().map(|v| *v as f64).collect();
            let ci = NucleusClass::ALL.iter().position(|x| *x == class).unwrap_or(0);
            let weights: Vec<f64> = w.data()[ci * c..(ci + 1) * c].iter().map(|v| *v as f64).collect();
            (Some(compute_cam(&feats, (c, h, wd), &weights, crop.image.dims())?), None)
        }
        None => (None, Some("no feature maps supplied".into())),
    };
    Ok(ClassifierOpinion {
        source: OpinionSource::External,
        class,
        rationale: format!("external classifier, p = {:.3}", probs[NucleusClass::ALL.iter().position(|x| *x == class).unwrap_or(0)]),
        filtered: false,
        probabilities: Some(probs),
        cam,
        cam_note,
    })
}

/// Everything the per-nucleus stages produced, before slide-level grading.
fn process_nucleus(
    id: usize,
    polygon: &StarPolygon<f64>,
    image: &MultiChannelImage,
    cfg: &PipelineConfig,
    ext: Option<&ExternalClassifier>,
) -> NucleusRecord {
    let mut rec = NucleusRecord::new(id, polygon.clone());
    let stage = || -> Result<(ClassifierOpinion, Vec<crate::SignalBox>, (usize, usize), (usize, usize))> {
        let crop = extract_crop(image, polygon, cfg.crop_margin)?;
        let local = detect_for(id, &crop.image, cfg)?;
        let (ox, oy) = (crop.offset.0 as f64, crop.offset.1 as f64);
        let signals = local.iter().map(|s| s.translate(ox, oy)).collect();
        let opinion = classifier_opinion(id, &crop, cfg, ext)?;
        Ok((opinion, signals, crop.offset, crop.image.dims()))
    };
    match stage() {
        Ok((opinion, signals, offset, dims)) => {
            rec.classifier = opinion;
            rec.signals = signals;
            rec.crop_offset = offset;
            rec.crop_dims = dims;
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Progress sink receiving a fraction in `[0, 1]`.
pub type Progress<'a> = &'a (dyn Fn(f64) + Sync);

pub fn run_pipeline(image: &MultiChannelImage, cfg: &PipelineConfig, gt: Option<&GroundTruth>) -> Result<SlideReport> {
    run_pipeline_with_progress(image, cfg, gt, &|_| {})
}

/// Full slide run. Stage failures for one nucleus mark it Artifact with the
/// error recorded; only unusable inputs or configuration abort the slide.
pub fn run_pipeline_with_progress(
    image: &MultiChannelImage,
    cfg: &PipelineConfig,
    gt: Option<&GroundTruth>,
    progress: Progress<'_>,
) -> Result<SlideReport> {
    cfg.validate()?;
    let seg_maps = match &cfg.predictors.segmentation {
        SegmentationSource::Reference => None,
        SegmentationSource::External { prob, dist } => Some(ProbDistMaps::read(prob, dist)?),
    };
    progress(0.0);
    let working = downscale(image, cfg.downscale)?;
    let working_polys = segment_tiled(&working, cfg, seg_maps.as_ref())?;
    progress(0.4);
    let mut polys: Vec<StarPolygon<f64>> = working_polys.iter().map(|p| to_full_scale(p, cfg.downscale)).collect();
    sort_row_major(&mut polys);
    run_stages(image, polys, cfg, gt, &|p| progress(0.4 + 0.6 * p))
}

/// Everything after segmentation: crops, signals, opinions and grading for
/// full-scale `polygons`, which receive ids in the given order.
pub fn run_stages(
    image: &MultiChannelImage,
    polygons: Vec<StarPolygon<f64>>,
    cfg: &PipelineConfig,
    gt: Option<&GroundTruth>,
    progress: Progress<'_>,
) -> Result<SlideReport> {
    cfg.validate()?;
    let loaded = load_externals(&cfg.predictors)?;
    let polys = polygons;
    let total = polys.len().max(1) as f64;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let nuclei: Vec<NucleusRecord> = polys
        .par_iter()
        .enumerate()
        .map(|(id, p)| {
            let rec = process_nucleus(id, p, image, cfg, loaded.classifier.as_ref());
            let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            progress(0.9 * n as f64 / total);
            rec
        })
        .collect();

    let mut report = SlideReport {
        schema: SCHEMA.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_at: crate::report::timestamp(),
        slide: SlideInfo {
            width: image.width(),
            height: image.height(),
            working_width: image.width().div_ceil(cfg.downscale),
            working_height: image.height().div_ceil(cfg.downscale),
            input_hash: image.content_hash(),
        },
        config: cfg.clone(),
        reference_area: 0.0,
        nuclei,
        status: crate::scoring::slide_status(std::iter::empty(), &cfg.scoring),
        metrics: None,
        review_log: Vec::new(),
    };
    report.refresh();
    if let Some(gt) = gt {
        let pred = SlidePrediction {
            polygons: report.nuclei.iter().map(|n| n.polygon.clone()).collect(),
            signals: report.nuclei.iter().flat_map(|n| n.signals.iter().cloned()).collect(),
            status: report.status.status,
        };
        report.metrics = Some(evaluate_slide(&pred, gt, &cfg.evaluation));
    }
    progress(1.0);
    Ok(report)
}
