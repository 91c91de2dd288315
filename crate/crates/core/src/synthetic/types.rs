use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the adaptation problem an image belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "s" => Ok(Domain::Source),
            "target" | "t" => Ok(Domain::Target),
            other => Err(Error::UnknownDomain(other.to_string())),
        }
    }
}

/// Names of the renderable action units, in bit order.
pub const AU_NAMES: [&str; 10] = [
    "AU1", "AU2", "AU4", "AU6", "AU12", "AU15", "AU25", "AU5", "AU9", "AU26",
];

pub const MIN_AUS: usize = 3;
pub const MAX_AUS: usize = AU_NAMES.len();

/// Binary AU activation vector of fixed length `K`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct AuLabels {
    bits: Vec<u8>,
}

impl AuLabels {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if !(MIN_AUS..=MAX_AUS).contains(&bits.len()) {
            return Err(Error::invalid(
                "au",
                format!("length {} outside [{MIN_AUS}, {MAX_AUS}]", bits.len()),
            ));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid("au", format!("bit value {b} is not 0/1")));
        }
        Ok(Self { bits })
    }

    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        Self::new(bits.iter().map(|&b| b as u8).collect())
    }

    pub fn zeros(k: usize) -> Result<Self> {
        Self::new(vec![0; k])
    }

    /// Decodes the low `k` bits of `code` (bit 0 is AU index 0).
    pub fn from_code(code: u32, k: usize) -> Result<Self> {
        Self::new((0..k).map(|i| ((code >> i) & 1) as u8).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, k: usize) -> bool {
        self.bits[k] == 1
    }

    pub fn with_toggled(&self, k: usize) -> Self {
        let mut bits = self.bits.clone();
        bits[k] ^= 1;
        Self { bits }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

impl TryFrom<Vec<u8>> for AuLabels {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<AuLabels> for Vec<u8> {
    fn from(l: AuLabels) -> Self {
        l.bits
    }
}

/// Inclusive range a generated parameter must lie in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f32,
    pub max: f32,
}

impl Range {
    pub const fn new(min: f32, max: f32) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn check(&self, field: &'static str, v: f32) -> Result<()> {
        if v.is_finite() && self.contains(v) {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                field,
                value: v as f64,
                min: self.min as f64,
                max: self.max as f64,
            })
        }
    }

    pub fn lerp(&self, t: f32) -> f32 {
        self.min + (self.max - self.min) * t
    }

    pub fn overlaps(&self, other: &Range) -> bool {
        self.min <= other.max && other.min <= self.max
    }
}

/// Per-identity face geometry, in normalized image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    /// Horizontal semi-axis of the face ellipse.
    pub face_width: f32,
    /// Vertical semi-axis of the face ellipse.
    pub face_height: f32,
    /// Horizontal offset of each eye centre from the midline.
    pub eye_spacing: f32,
    /// Vertical position of the neutral brows.
    pub brow_height: f32,
    /// Half-width of the neutral mouth.
    pub mouth_width: f32,
    pub skin: [f32; 3],
}

impl FaceGeometry {
    pub const FACE_WIDTH: Range = Range::new(0.30, 0.38);
    pub const FACE_HEIGHT: Range = Range::new(0.38, 0.44);
    pub const EYE_SPACING: Range = Range::new(0.13, 0.17);
    pub const BROW_HEIGHT: Range = Range::new(0.25, 0.29);
    pub const MOUTH_WIDTH: Range = Range::new(0.12, 0.18);
    pub const SKIN: [Range; 3] = [
        Range::new(0.60, 0.95),
        Range::new(0.45, 0.80),
        Range::new(0.35, 0.70),
    ];

    pub fn validate(&self) -> Result<()> {
        Self::FACE_WIDTH.check("geometry.face_width", self.face_width)?;
        Self::FACE_HEIGHT.check("geometry.face_height", self.face_height)?;
        Self::EYE_SPACING.check("geometry.eye_spacing", self.eye_spacing)?;
        Self::BROW_HEIGHT.check("geometry.brow_height", self.brow_height)?;
        Self::MOUTH_WIDTH.check("geometry.mouth_width", self.mouth_width)?;
        const SKIN_FIELDS: [&str; 3] = ["geometry.skin.r", "geometry.skin.g", "geometry.skin.b"];
        for ((r, v), name) in Self::SKIN.iter().zip(self.skin).zip(SKIN_FIELDS) {
            r.check(name, v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: u32,
    pub geometry: FaceGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Flat,
    Speckle,
    Stripes,
}

/// Acquisition style shared by all frames of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyleSpec {
    pub domain: Domain,
    pub background_hue: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub tint: f32,
    pub texture: Texture,
    pub texture_strength: f32,
}

/// Sampling ranges for one domain's style parameters.
#[derive(Clone, Debug)]
pub struct StyleDistribution {
    pub background_hue: Range,
    pub brightness: Range,
    pub contrast: Range,
    pub tint: Range,
    pub textures: &'static [Texture],
    pub texture_strength: Range,
}

const SOURCE_STYLE: StyleDistribution = StyleDistribution {
    background_hue: Range::new(0.02, 0.18),
    brightness: Range::new(-0.05, 0.05),
    contrast: Range::new(0.90, 1.10),
    tint: Range::new(0.0, 0.03),
    textures: &[Texture::Flat, Texture::Speckle],
    texture_strength: Range::new(0.0, 0.04),
};

const TARGET_STYLE: StyleDistribution = StyleDistribution {
    background_hue: Range::new(0.50, 0.70),
    brightness: Range::new(-0.25, -0.15),
    contrast: Range::new(0.35, 0.50),
    tint: Range::new(0.15, 0.25),
    textures: &[Texture::Stripes],
    texture_strength: Range::new(0.15, 0.22),
};

impl StyleDistribution {
    pub fn for_domain(domain: Domain) -> &'static StyleDistribution {
        match domain {
            Domain::Source => &SOURCE_STYLE,
            Domain::Target => &TARGET_STYLE,
        }
    }
}

impl DomainStyleSpec {
    /// Style parameters must be inside the global envelope; the per-domain
    /// ranges are only used for sampling.
    pub const BACKGROUND_HUE: Range = Range::new(0.0, 1.0);
    pub const BRIGHTNESS: Range = Range::new(-0.5, 0.5);
    pub const CONTRAST: Range = Range::new(0.2, 2.0);
    pub const TINT: Range = Range::new(0.0, 0.5);
    pub const TEXTURE_STRENGTH: Range = Range::new(0.0, 0.3);

    pub fn validate(&self) -> Result<()> {
        Self::BACKGROUND_HUE.check("style.background_hue", self.background_hue)?;
        Self::BRIGHTNESS.check("style.brightness", self.brightness)?;
        Self::CONTRAST.check("style.contrast", self.contrast)?;
        Self::TINT.check("style.tint", self.tint)?;
        Self::TEXTURE_STRENGTH.check("style.texture_strength", self.texture_strength)?;
        Ok(())
    }
}

/// Row-major `H x W x 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FaceImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Channel-first copy (`3 x H x W`), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * 3 {
            return Err(Error::Shape(format!(
                "CHW buffer has {} values, expected 3x{height}x{width}",
                chw.len()
            )));
        }
        let mut data = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                data[i * 3 + c] = chw[c * plane + i];
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// The image as it reads back after 8-bit storage.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8())
    }

    pub fn mean_abs_diff(&self, other: &FaceImage) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// One rendered face with every factor that produced it.
#[derive(Clone, Debug)]
pub struct ToyFaceSample {
    pub image: FaceImage,
    pub au: AuLabels,
    pub identity: IdentitySpec,
    pub style: DomainStyleSpec,
    pub frame_seed: u64,
}

impl ToyFaceSample {
    pub fn domain(&self) -> Domain {
        self.style.domain
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn au_labels_reject_bad_bits() {
        assert!(AuLabels::new(vec![0, 1, 2]).is_err());
        assert!(AuLabels::new(vec![0, 1]).is_err());
        assert!(AuLabels::new(vec![0; 11]).is_err());
        assert_eq!(AuLabels::from_code(0b101, 3).unwrap().bits(), &[1, 0, 1]);
    }

    #[test]
    fn domain_style_ranges_are_separated() {
        let s = StyleDistribution::for_domain(Domain::Source);
        let t = StyleDistribution::for_domain(Domain::Target);
        let disjoint = [
            !s.background_hue.overlaps(&t.background_hue),
            !s.brightness.overlaps(&t.brightness),
            !s.contrast.overlaps(&t.contrast),
            !s.tint.overlaps(&t.tint),
        ]
        .iter()
        .filter(|&&d| d)
        .count();
        assert!(disjoint >= 2, "only {disjoint} separated style dimensions");
    }

    #[test]
    fn chw_round_trip() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 18.0).collect();
        let img = FaceImage::new(2, 3, data).unwrap();
        let back = FaceImage::from_chw(2, 3, &img.to_chw()).unwrap();
        assert_eq!(img, back);
    }
}
