//! PNG overlays of a report on its slide.
//!
//! The slide is drawn 8-bit with R=HER2, G=CEP17, B=DAPI below a status banner
//! of [`BANNER_HEIGHT`] rows, so overlay row `y + BANNER_HEIGHT` shows slide
//! row `y`.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use crate::classify::NucleusClass;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{Channel, MultiChannelImage};
use crate::report::SlideReport;
use crate::scoring::AmplificationStatus;
use crate::signal::SignalClass;

pub const BANNER_HEIGHT: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Polygon outlines colored by effective class.
    Nuclei,
    /// Signal boxes colored by signal class.
    Signals,
    /// Outlines and boxes.
    All,
}

pub fn class_color(c: NucleusClass) -> Rgb<u8> {
    Rgb(match c {
        NucleusClass::Artifact => [255, 0, 255],
        NucleusClass::Background => [128, 128, 128],
        NucleusClass::Normal => [0, 255, 255],
        NucleusClass::LowAmp => [255, 255, 0],
        NucleusClass::HighAmp => [255, 96, 0],
    })
}

pub fn signal_color(c: SignalClass) -> Rgb<u8> {
    Rgb(match c {
        SignalClass::Her2 => [255, 160, 160],
        SignalClass::Her2Cluster => [255, 255, 255],
        SignalClass::Cep17 => [160, 255, 160],
    })
}

pub fn status_color(s: AmplificationStatus) -> Rgb<u8> {
    Rgb(match s {
        AmplificationStatus::Negative => [40, 160, 40],
        AmplificationStatus::PositiveLow => [230, 160, 0],
        AmplificationStatus::PositiveHigh => [210, 30, 30],
        AmplificationStatus::Indeterminate => [110, 110, 110],
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn base_canvas(image: &MultiChannelImage, status: AmplificationStatus) -> RgbImage {
    let (w, h) = image.dims();
    let mut out = RgbImage::from_pixel(w as u32, h as u32 + BANNER_HEIGHT, status_color(status));
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(image.get(Channel::Her2, x, y)),
                to_u8(image.get(Channel::Cep17, x, y)),
                to_u8(image.get(Channel::Dapi, x, y)),
            ];
            out.put_pixel(x as u32, y as u32 + BANNER_HEIGHT, Rgb(px));
        }
    }
    out
}

/// Sets slide pixel `(x, y)` if it is on the canvas.
fn plot(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    let y = y + BANNER_HEIGHT as i64;
    if x >= 0 && y >= BANNER_HEIGHT as i64 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line between slide pixels.
fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        plot(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn rect(img: &mut RgbImage, b: &BBox<f64>, c: Rgb<u8>) {
    let (x0, y0) = (b.x0.round() as i64, b.y0.round() as i64);
    let (x1, y1) = ((b.x1.round() as i64 - 1).max(x0), (b.y1.round() as i64 - 1).max(y0));
    line(img, (x0, y0), (x1, y0), c);
    line(img, (x1, y0), (x1, y1), c);
    line(img, (x1, y1), (x0, y1), c);
    line(img, (x0, y1), (x0, y0), c);
}

/// Counts of what an overlay drew.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlayStats {
    pub outlines: usize,
    pub boxes: usize,
}

pub fn render_overlay(image: &MultiChannelImage, report: &SlideReport, layer: Layer) -> (RgbImage, OverlayStats) {
    let mut img = base_canvas(image, report.status.status);
    let mut stats = OverlayStats::default();
    if matches!(layer, Layer::Nuclei | Layer::All) {
        for n in &report.nuclei {
            let v: Vec<(i64, i64)> =
                n.polygon.vertices().iter().map(|p| (p.x.round() as i64, p.y.round() as i64)).collect();
            let c = class_color(n.effective_class);
            for i in 0..v.len() {
                line(&mut img, v[i], v[(i + 1) % v.len()], c);
            }
            stats.outlines += 1;
        }
    }
    if matches!(layer, Layer::Signals | Layer::All) {
        for s in report.nuclei.iter().flat_map(|n| &n.signals) {
            rect(&mut img, &s.bbox, signal_color(s.class));
            stats.boxes += 1;
        }
    }
    (img, stats)
}

/// Crop-sized heat map of a nucleus CAM blended over its crop.
pub fn render_cam(image: &MultiChannelImage, report: &SlideReport, nucleus_id: usize) -> Result<RgbImage> {
    let n = report.nuclei.iter().find(|n| n.id == nucleus_id).ok_or(Error::UnknownNucleus(nucleus_id))?;
    let cam = n.classifier.cam.as_ref().ok_or_else(|| Error::NoCam {
        id: nucleus_id,
        reason: n.classifier.cam_note.clone().unwrap_or_else(|| "not computed".into()),
    })?;
    let (ox, oy) = n.crop_offset;
    let mut out = RgbImage::new(cam.width as u32, cam.height as u32);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (sx, sy) = (ox + x, oy + y);
            let dapi = if sx < image.width() && sy < image.height() { image.get(Channel::Dapi, sx, sy) } else { 0.0 };
            let heat = cam.values[y * cam.width + x].clamp(0.0, 1.0) as f32;
            let g = to_u8(0.5 * dapi);
            out.put_pixel(x as u32, y as u32, Rgb([to_u8(heat).max(g), g, to_u8(0.5 * dapi + 0.5 * (1.0 - heat))]));
        }
    }
    Ok(out)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}
