//! Procedural toy-face renderer.
//!
//! A face is drawn in normalized coordinates (`u` to the right, `v` down,
//! both in `[0, 1]`) and then passed through a per-pixel style transform.
//! Every AU belongs to exactly one horizontal band of the image and its
//! strokes are clipped to that band, so toggling an AU bit can only change
//! pixels inside [`region_mask`] of that AU. The style transform is
//! pointwise, which keeps that property after styling.

use std::f32::consts::PI;

use crate::error::{Error, Result};
use crate::synthetic::types::{
    AuLabels, DomainStyleSpec, FaceGeometry, FaceImage, IdentitySpec, Texture,
};

pub const DEFAULT_SIZE: usize = 64;

const FACE_CENTER: (f32, f32) = (0.5, 0.53);
const EYE_ROW: f32 = 0.44;
const MOUTH_ROW: f32 = 0.71;
const SENSOR_NOISE: f32 = 0.01;
const TINT_DIRECTION: [f32; 3] = [-0.5, 0.1, 1.0];
const STRIPE_FREQUENCY: f32 = 7.0;

/// Horizontal image band that owns a group of AUs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Brow,
    Eye,
    Nose,
    Mouth,
    Chin,
}

impl Band {
    /// Half-open `[lo, hi)` extent in normalized `v`.
    pub fn extent(self) -> (f32, f32) {
        match self {
            Band::Brow => (0.12, 0.37),
            Band::Eye => (0.37, 0.52),
            Band::Nose => (0.52, 0.60),
            Band::Mouth => (0.60, 0.86),
            Band::Chin => (0.86, 0.98),
        }
    }

    fn contains(self, v: f32) -> bool {
        let (lo, hi) = self.extent();
        v >= lo && v < hi
    }

    const ALL: [Band; 5] = [Band::Brow, Band::Eye, Band::Nose, Band::Mouth, Band::Chin];
}

/// Band owning AU bit `k`.
pub fn au_band(k: usize) -> Band {
    match k {
        0..=2 => Band::Brow,
        3 | 7 => Band::Eye,
        4..=6 => Band::Mouth,
        8 => Band::Nose,
        _ => Band::Chin,
    }
}

/// Pixels (as `y * width + x`) that AU bit `k` is allowed to modify.
pub fn region_mask(k: usize, height: usize, width: usize) -> Vec<bool> {
    let band = au_band(k);
    (0..height)
        .flat_map(|y| {
            let v = (y as f32 + 0.5) / height as f32;
            std::iter::repeat(band.contains(v)).take(width)
        })
        .collect()
}

/// Analytic landmark positions `(u, v)` of an identity: face centre, the two
/// eye centres, the mouth centre and the two inner brow ends at rest.
pub fn landmarks(identity: &IdentitySpec) -> Vec<(&'static str, f32, f32)> {
    let g = &identity.geometry;
    vec![
        ("face_center", FACE_CENTER.0, FACE_CENTER.1),
        ("left_eye", 0.5 - g.eye_spacing, EYE_ROW),
        ("right_eye", 0.5 + g.eye_spacing, EYE_ROW),
        ("mouth", 0.5, MOUTH_ROW),
        ("left_brow_inner", 0.5 - 0.06, g.brow_height),
        ("right_brow_inner", 0.5 + 0.06, g.brow_height),
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct Renderer {
    pub height: usize,
    pub width: usize,
}

impl Default for Renderer {
    fn default() -> Self {
        Self::new(DEFAULT_SIZE, DEFAULT_SIZE)
    }
}

impl Renderer {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn render(
        &self,
        au: &AuLabels,
        identity: &IdentitySpec,
        style: &DomainStyleSpec,
        frame_seed: u64,
    ) -> Result<FaceImage> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(
                "size",
                format!("{}x{} is below the 8x8 minimum", self.height, self.width),
            ));
        }
        identity.geometry.validate()?;
        style.validate()?;
        let (h, w) = (self.height, self.width);
        let painter = Painter::new(au, &identity.geometry, w);
        let background = hsv_to_rgb(style.background_hue, 0.45, 0.75);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let v = (y as f32 + 0.5) / h as f32;
            for x in 0..w {
                let u = (x as f32 + 0.5) / w as f32;
                let raw = painter.shade(u, v, background);
                let styled = apply_style(raw, u, v, x, y, style, frame_seed);
                data.extend_from_slice(&styled);
            }
        }
        FaceImage::new(h, w, data)
    }

    /// Styled image without the final clamp; used to check that style edits
    /// act as a global affine map.
    pub fn render_unclamped(
        &self,
        au: &AuLabels,
        identity: &IdentitySpec,
        style: &DomainStyleSpec,
        frame_seed: u64,
    ) -> Result<Vec<f32>> {
        identity.geometry.validate()?;
        style.validate()?;
        let (h, w) = (self.height, self.width);
        let painter = Painter::new(au, &identity.geometry, w);
        let background = hsv_to_rgb(style.background_hue, 0.45, 0.75);
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let v = (y as f32 + 0.5) / h as f32;
            for x in 0..w {
                let u = (x as f32 + 0.5) / w as f32;
                let raw = painter.shade(u, v, background);
                out.extend_from_slice(&style_unclamped(raw, u, v, x, y, style, frame_seed));
            }
        }
        Ok(out)
    }
}

/// Renders at the default 64x64 resolution.
pub fn render_face(
    au: &AuLabels,
    identity: &IdentitySpec,
    style: &DomainStyleSpec,
    frame_seed: u64,
) -> Result<FaceImage> {
    Renderer::default().render(au, identity, style, frame_seed)
}

struct Segment {
    a: (f32, f32),
    b: (f32, f32),
    half_thickness: f32,
}

impl Segment {
    fn distance(&self, u: f32, v: f32) -> f32 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((u - self.a.0) * dx + (v - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (px, py) = (self.a.0 + t * dx - u, self.a.1 + t * dy - v);
        (px * px + py * py).sqrt()
    }
}

struct Ellipse {
    center: (f32, f32),
    radii: (f32, f32),
}

/// Band-clipped stroke sets derived from the AU bits and geometry.
struct Painter {
    geometry: FaceGeometry,
    ink: [f32; 3],
    pixel: f32,
    brows: Vec<Segment>,
    eyes: Vec<Ellipse>,
    creases: Vec<Segment>,
    nose_wrinkles: Vec<Segment>,
    mouth_line: Vec<Segment>,
    mouth_curl: f32,
    mouth_open: f32,
    chin: Vec<Segment>,
}

impl Painter {
    fn new(au: &AuLabels, geometry: &FaceGeometry, width: usize) -> Self {
        let on = |k: usize| -> f32 {
            if k < au.len() && au.get(k) {
                1.0
            } else {
                0.0
            }
        };
        let g = geometry;

        // Brows: AU1 lifts the inner end, AU2 the outer end, AU4 lowers both
        // and pulls the inner ends together.
        let inner_dv = -0.07 * on(0) + 0.06 * on(2);
        let outer_dv = -0.07 * on(1) + 0.03 * on(2);
        let inner_du = 0.03 * on(2);
        let brow_half = 0.024;
        let mut brows = Vec::new();
        for side in [-1.0f32, 1.0] {
            let inner = (0.5 + side * (0.06 - inner_du), g.brow_height + inner_dv);
            let outer = (0.5 + side * (g.eye_spacing + 0.08), g.brow_height + outer_dv);
            brows.push(Segment {
                a: inner,
                b: outer,
                half_thickness: brow_half,
            });
        }

        // Eyes: AU6 narrows the aperture and adds a crease, AU5 widens it.
        let aperture = 0.032 - 0.022 * on(3) + 0.022 * on(7);
        let mut eyes = Vec::new();
        let mut creases = Vec::new();
        for side in [-1.0f32, 1.0] {
            let cx = 0.5 + side * g.eye_spacing;
            eyes.push(Ellipse {
                center: (cx, EYE_ROW),
                radii: (0.055, aperture),
            });
            if on(3) > 0.0 {
                creases.push(Segment {
                    a: (cx - 0.05, 0.495),
                    b: (cx + 0.05, 0.495),
                    half_thickness: 0.014,
                });
            }
        }

        let mut nose_wrinkles = Vec::new();
        if on(8) > 0.0 {
            for side in [-1.0f32, 1.0] {
                nose_wrinkles.push(Segment {
                    a: (0.5 + side * 0.08, 0.545),
                    b: (0.5 + side * 0.03, 0.57),
                    half_thickness: 0.012,
                });
            }
        }

        // Mouth: AU12 curls the corners up, AU15 pulls them down, AU25 opens
        // the lips.
        let curl = 0.075 * on(4) - 0.05 * on(5);
        let steps = 16;
        let point = |t: f32| (0.5 + t * g.mouth_width, MOUTH_ROW - curl * t * t);
        let mouth_line = (0..steps)
            .map(|i| {
                let t0 = -1.0 + 2.0 * i as f32 / steps as f32;
                let t1 = -1.0 + 2.0 * (i + 1) as f32 / steps as f32;
                Segment {
                    a: point(t0),
                    b: point(t1),
                    half_thickness: 0.018,
                }
            })
            .collect();
        let mouth_open = 0.06 * on(6);

        let mut chin = Vec::new();
        if on(9) > 0.0 {
            chin.push(Segment {
                a: (0.42, 0.905),
                b: (0.58, 0.905),
                half_thickness: 0.015,
            });
        }

        Self {
            geometry: g.clone(),
            ink: g.skin.map(|c| c * 0.22),
            pixel: 1.0 / width as f32,
            brows,
            eyes,
            creases,
            nose_wrinkles,
            mouth_line,
            mouth_curl: curl,
            mouth_open,
            chin,
        }
    }

    fn coverage_from_distance(&self, dist: f32, half: f32) -> f32 {
        ((half - dist) / self.pixel + 0.5).clamp(0.0, 1.0)
    }

    fn stroke_coverage(&self, segments: &[Segment], u: f32, v: f32) -> f32 {
        segments
            .iter()
            .map(|s| self.coverage_from_distance(s.distance(u, v), s.half_thickness))
            .fold(0.0, f32::max)
    }

    /// Unstyled colour of one pixel.
    fn shade(&self, u: f32, v: f32, background: [f32; 3]) -> [f32; 3] {
        let g = &self.geometry;
        let du = (u - FACE_CENTER.0) / g.face_width;
        let dv = (v - FACE_CENTER.1) / g.face_height;
        let radial = (du * du + dv * dv).sqrt();
        let face_alpha = ((1.0 - radial) * g.face_width / self.pixel + 0.5).clamp(0.0, 1.0);
        let mut color = mix(background, g.skin, face_alpha);

        // AU-independent nose.
        let nose = Segment {
            a: (0.5, 0.50),
            b: (0.5, 0.575),
            half_thickness: 0.01,
        };
        let nose_cov = self.coverage_from_distance(nose.distance(u, v), nose.half_thickness);
        color = mix(color, self.ink.map(|c| c * 1.6), nose_cov * 0.6);

        for band in Band::ALL {
            if !band.contains(v) {
                continue;
            }
            let cov = match band {
                Band::Brow => self.stroke_coverage(&self.brows, u, v),
                Band::Eye => {
                    let eye = self
                        .eyes
                        .iter()
                        .map(|e| {
                            let eu = (u - e.center.0) / e.radii.0;
                            let ev = (v - e.center.1) / e.radii.1;
                            let r = (eu * eu + ev * ev).sqrt();
                            ((1.0 - r) * e.radii.1 / self.pixel + 0.5).clamp(0.0, 1.0)
                        })
                        .fold(0.0, f32::max);
                    eye.max(self.stroke_coverage(&self.creases, u, v))
                }
                Band::Nose => self.stroke_coverage(&self.nose_wrinkles, u, v),
                Band::Mouth => {
                    let line = self.stroke_coverage(&self.mouth_line, u, v);
                    let t = (u - 0.5) / g.mouth_width;
                    let open = if self.mouth_open > 0.0 && t.abs() < 1.0 {
                        let top = MOUTH_ROW - self.mouth_curl * t * t;
                        let bottom = top + self.mouth_open * (1.0 - t * t);
                        ((v - top).min(bottom - v) / self.pixel + 0.5).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    line.max(open)
                }
                Band::Chin => self.stroke_coverage(&self.chin, u, v),
            };
            color = mix(color, self.ink, cov);
        }
        color
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` keyed on a frame seed, a pixel and a channel.
fn hash01(seed: u64, x: usize, y: usize, c: u64) -> f32 {
    let key = splitmix64(seed ^ splitmix64(((y as u64) << 32) | x as u64) ^ c.wrapping_mul(0xA24B_AED4_963E_E407));
    (key >> 40) as f32 / (1u64 << 24) as f32
}

fn style_unclamped(
    raw: [f32; 3],
    u: f32,
    v: f32,
    x: usize,
    y: usize,
    style: &DomainStyleSpec,
    frame_seed: u64,
) -> [f32; 3] {
    let texture = match style.texture {
        Texture::Flat => 0.0,
        Texture::Speckle => style.texture_strength * (hash01(frame_seed, x, y, 7) * 2.0 - 1.0),
        Texture::Stripes => {
            style.texture_strength * (2.0 * PI * STRIPE_FREQUENCY * (u + v)).sin()
        }
    };
    let mut out = [0.0; 3];
    for c in 0..3 {
        let noise = SENSOR_NOISE * (hash01(frame_seed, x, y, c as u64) * 2.0 - 1.0);
        out[c] = style.contrast * (raw[c] - 0.5)
            + 0.5
            + style.brightness
            + style.tint * TINT_DIRECTION[c]
            + texture
            + noise;
    }
    out
}

fn apply_style(
    raw: [f32; 3],
    u: f32,
    v: f32,
    x: usize,
    y: usize,
    style: &DomainStyleSpec,
    frame_seed: u64,
) -> [f32; 3] {
    style_unclamped(raw, u, v, x, y, style, frame_seed).map(|c| c.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::types::Domain;

    pub(crate) fn identity() -> IdentitySpec {
        IdentitySpec {
            identity_id: 3,
            geometry: FaceGeometry {
                face_width: 0.34,
                face_height: 0.41,
                eye_spacing: 0.15,
                brow_height: 0.27,
                mouth_width: 0.15,
                skin: [0.8, 0.62, 0.5],
            },
        }
    }

    pub(crate) fn style(domain: Domain) -> DomainStyleSpec {
        match domain {
            Domain::Source => DomainStyleSpec {
                domain,
                background_hue: 0.1,
                brightness: 0.0,
                contrast: 1.0,
                tint: 0.01,
                texture: Texture::Speckle,
                texture_strength: 0.02,
            },
            Domain::Target => DomainStyleSpec {
                domain,
                background_hue: 0.6,
                brightness: -0.15,
                contrast: 0.65,
                tint: 0.12,
                texture: Texture::Stripes,
                texture_strength: 0.1,
            },
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let au = AuLabels::new(vec![1, 0, 1, 0, 1]).unwrap();
        let a = render_face(&au, &identity(), &style(Domain::Target), 17).unwrap();
        let b = render_face(&au, &identity(), &style(Domain::Target), 17).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn toggling_an_au_changes_only_its_band() {
        let r = Renderer::new(48, 48);
        let base = AuLabels::new(vec![0, 1, 0, 1, 0, 0, 1, 0, 0, 1]).unwrap();
        for domain in [Domain::Source, Domain::Target] {
            let img0 = r.render(&base, &identity(), &style(domain), 5).unwrap();
            for k in 0..base.len() {
                let img1 = r
                    .render(&base.with_toggled(k), &identity(), &style(domain), 5)
                    .unwrap();
                let mask = region_mask(k, 48, 48);
                let mut changed_inside = 0;
                for (p, inside) in mask.iter().enumerate() {
                    let differs = (0..3).any(|c| img0.data()[p * 3 + c] != img1.data()[p * 3 + c]);
                    if *inside {
                        changed_inside += differs as usize;
                    } else {
                        assert!(!differs, "AU {k} changed pixel {p} outside its band");
                    }
                }
                assert!(changed_inside > 0, "AU {k} has no visible effect");
            }
        }
    }

    #[test]
    fn brightness_is_a_global_shift() {
        let r = Renderer::default();
        let au = AuLabels::new(vec![1, 1, 0, 0, 1]).unwrap();
        let s0 = style(Domain::Source);
        let mut s1 = s0.clone();
        s1.brightness += 0.2;
        let a = r.render_unclamped(&au, &identity(), &s0, 9).unwrap();
        let b = r.render_unclamped(&au, &identity(), &s1, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 0.2).abs() < 1e-5);
        }
        // Landmarks are a function of geometry only, and the clamped render
        // at each landmark moves by exactly the shift when it stays in range.
        let ca = r.render(&au, &identity(), &s0, 9).unwrap();
        let cb = r.render(&au, &identity(), &s1, 9).unwrap();
        for (_, u, v) in landmarks(&identity()) {
            let x = (u * 64.0) as usize;
            let y = (v * 64.0) as usize;
            for c in 0..3 {
                let (pa, pb) = (ca.get(x, y, c), cb.get(x, y, c));
                if pb < 1.0 {
                    assert!((pb - pa - 0.2).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn out_of_range_parameter_names_field() {
        let mut id = identity();
        id.geometry.eye_spacing = 0.4;
        let err = render_face(&AuLabels::zeros(5).unwrap(), &id, &style(Domain::Source), 0)
            .unwrap_err();
        assert!(err.to_string().contains("eye_spacing"), "{err}");

        let mut st = style(Domain::Source);
        st.contrast = 5.0;
        let err = render_face(&AuLabels::zeros(5).unwrap(), &identity(), &st, 0).unwrap_err();
        assert!(err.to_string().contains("contrast"), "{err}");
    }
}
