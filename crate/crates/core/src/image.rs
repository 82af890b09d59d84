//! Three-channel fluorescence raster and the raster-level operations on it.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fluorescence channel. The discriminant is the plane index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Dapi = 0,
    Her2 = 1,
    Cep17 = 2,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Dapi, Channel::Her2, Channel::Cep17];
}

/// Row-major raster with DAPI, HER2 and CEP17 planes, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelImage {
    width: usize,
    height: usize,
    planes: [Vec<f32>; 3],
}

impl MultiChannelImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    /// Image with every pixel of plane `c` set to `levels[c]`.
    pub fn filled(width: usize, height: usize, levels: [f32; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let n = width * height;
        Self {
            width,
            height,
            planes: levels.map(|v| vec![v.clamp(0.0, 1.0); n]),
        }
    }

    /// Builds an image from planes ordered `[DAPI, HER2, CEP17]`.
    pub fn from_planes(width: usize, height: usize, planes: [Vec<f32>; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image dimensions {width}x{height}")));
        }
        for p in &planes {
            if p.len() != width * height {
                return Err(Error::Input(format!(
                    "plane length {} does not match {width}x{height}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input("intensity outside [0, 1]".into()));
            }
        }
        Ok(Self { width, height, planes })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn plane(&self, c: Channel) -> &[f32] {
        &self.planes[c as usize]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: Channel) -> &mut [f32] {
        &mut self.planes[c as usize]
    }

    #[inline]
    pub fn get(&self, c: Channel, x: usize, y: usize) -> f32 {
        self.planes[c as usize][y * self.width + x]
    }

    /// Stores `v` clamped to `[0, 1]`.
    #[inline]
    pub fn set(&mut self, c: Channel, x: usize, y: usize, v: f32) {
        self.planes[c as usize][y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Copies the window `[x0, x0+w) x [y0, y0+h)`; the window must lie inside the image.
    pub fn sub_image(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height && w > 0 && h > 0);
        let planes = std::array::from_fn(|c| {
            let src = &self.planes[c];
            let mut out = Vec::with_capacity(w * h);
            for y in y0..y0 + h {
                out.extend_from_slice(&src[y * self.width + x0..y * self.width + x0 + w]);
            }
            out
        });
        Self { width: w, height: h, planes }
    }

    /// SHA-256 over the dimensions and the little-endian plane data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        for p in &self.planes {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Applies `f` to every intensity and clamps the result.
    pub fn map_intensities(&mut self, f: impl Fn(f32) -> f32) {
        for p in &mut self.planes {
            for v in p.iter_mut() {
                *v = f(*v).clamp(0.0, 1.0);
            }
        }
    }
}

/// Block-mean pooling by an integer factor. Output dims are `ceil(dim / factor)`;
/// partial edge blocks average over the pixels they actually contain.
pub fn downscale(image: &MultiChannelImage, factor: usize) -> Result<MultiChannelImage> {
    if factor == 0 {
        return Err(Error::config("downscale_factor", "must be >= 1"));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (w, h) = image.dims();
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    let planes = std::array::from_fn(|c| {
        let src = &image.planes[c];
        let mut out = vec![0.0f32; ow * oh];
        for oy in 0..oh {
            let ys = oy * factor..((oy + 1) * factor).min(h);
            for ox in 0..ow {
                let xs = ox * factor..((ox + 1) * factor).min(w);
                let mut acc = 0.0f64;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += src[y * w + x] as f64;
                    }
                }
                let n = (ys.len() * xs.len()) as f64;
                out[oy * ow + ox] = ((acc / n) as f32).clamp(0.0, 1.0);
            }
        }
        out
    });
    Ok(MultiChannelImage { width: ow, height: oh, planes })
}

/// Geometric and photometric augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Number of clockwise quarter turns, `0..=3`.
    pub rot90: u8,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f32,
    pub contrast: f32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { rot90: 0, hflip: false, vflip: false, brightness: 0.0, contrast: 1.0 }
    }
}

/// Rotation, then flips, then `v' = (v - 0.5) * contrast + 0.5 + brightness`, clamped.
pub fn augment(image: &MultiChannelImage, spec: &AugmentSpec) -> Result<MultiChannelImage> {
    if spec.rot90 > 3 {
        return Err(Error::Input(format!("rot90 count {} not in 0..=3", spec.rot90)));
    }
    let mut out = image.clone();
    for _ in 0..spec.rot90 {
        out = rotate_cw(&out);
    }
    if spec.hflip {
        out = remap(&out, out.width, out.height, |x, y, w, _| ((w - 1 - x), y));
    }
    if spec.vflip {
        out = remap(&out, out.width, out.height, |x, y, _, h| (x, (h - 1 - y)));
    }
    if spec.brightness != 0.0 || spec.contrast != 1.0 {
        let (b, c) = (spec.brightness, spec.contrast);
        out.map_intensities(|v| (v - 0.5) * c + 0.5 + b);
    }
    Ok(out)
}

fn rotate_cw(img: &MultiChannelImage) -> MultiChannelImage {
    // new(x', y') = old(y', h - 1 - x')
    let (w, h) = img.dims();
    remap(img, h, w, move |nx, ny, _, _| (ny, h - 1 - nx))
}

/// Builds a `nw x nh` image where pixel `(x, y)` reads `src(f(x, y, nw, nh))`.
fn remap(
    img: &MultiChannelImage,
    nw: usize,
    nh: usize,
    f: impl Fn(usize, usize, usize, usize) -> (usize, usize),
) -> MultiChannelImage {
    let planes = std::array::from_fn(|c| {
        let src = &img.planes[c];
        let mut out = Vec::with_capacity(nw * nh);
        for y in 0..nh {
            for x in 0..nw {
                let (sx, sy) = f(x, y, nw, nh);
                out.push(src[sy * img.width + sx]);
            }
        }
        out
    });
    MultiChannelImage { width: nw, height: nh, planes }
}

/// Where each fluorescence channel lives in an RGB file.
///
/// The textual form lists the RGB letter holding HER2, CEP17 and DAPI in that
/// order; the default `"RGB"` means R=HER2, G=CEP17, B=DAPI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ChannelMap {
    her2: usize,
    cep17: usize,
    dapi: usize,
}

impl Default for ChannelMap {
    fn default() -> Self {
        Self { her2: 0, cep17: 1, dapi: 2 }
    }
}

impl std::str::FromStr for ChannelMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let slot = |c: char| match c.to_ascii_uppercase() {
            'R' => Some(0),
            'G' => Some(1),
            'B' => Some(2),
            _ => None,
        };
        let chars: Vec<char> = s.chars().collect();
        let bad = || Error::Input(format!("channel map {s:?}: expected a permutation of RGB"));
        if chars.len() != 3 {
            return Err(bad());
        }
        let slots: Vec<usize> = chars.iter().map(|&c| slot(c).ok_or_else(bad)).collect::<Result<_>>()?;
        if slots[0] == slots[1] || slots[0] == slots[2] || slots[1] == slots[2] {
            return Err(bad());
        }
        Ok(Self { her2: slots[0], cep17: slots[1], dapi: slots[2] })
    }
}

impl TryFrom<String> for ChannelMap {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ChannelMap> for String {
    fn from(m: ChannelMap) -> String {
        [m.her2, m.cep17, m.dapi].iter().map(|&i| ['R', 'G', 'B'][i]).collect()
    }
}

impl ChannelMap {
    fn slot(&self, c: Channel) -> usize {
        match c {
            Channel::Dapi => self.dapi,
            Channel::Her2 => self.her2,
            Channel::Cep17 => self.cep17,
        }
    }
}

/// Decodes an 8/16-bit PNG or TIFF.
pub fn decode_image(bytes: &[u8], map: ChannelMap) -> Result<MultiChannelImage> {
    let dynimg = image::load_from_memory(bytes)?;
    Ok(from_dynamic(dynimg, map))
}

pub fn read_image(path: &Path, map: ChannelMap) -> Result<MultiChannelImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, map)
}

fn from_dynamic(img: DynamicImage, map: ChannelMap) -> MultiChannelImage {
    let rgb = img.into_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let planes = std::array::from_fn(|c| {
        let slot = map.slot(Channel::ALL[c]);
        rgb.pixels().map(|p| p.0[slot].clamp(0.0, 1.0)).collect()
    });
    MultiChannelImage { width: w, height: h, planes }
}

/// Encodes as a 16-bit-per-channel RGB PNG using `map`.
pub fn encode_png16(image: &MultiChannelImage, map: ChannelMap) -> Result<Vec<u8>> {
    let (w, h) = image.dims();
    let mut buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in Channel::ALL {
            let v = image.get(c, x as usize, y as usize);
            px.0[map.slot(c)] = (v * 65535.0).round() as u16;
        }
    }
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageRgb16(buf).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png16(image: &MultiChannelImage, path: &Path, map: ChannelMap) -> Result<()> {
    let bytes = encode_png16(image, map)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
