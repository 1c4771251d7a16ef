//! Deterministic synthetic pedestrian scenes with exact visibility labels.
//!
//! Each figure is a body rectangle of aspect ratio 0.41 topped by a head
//! disc. Occluders cover a figure from the bottom and are painted with the
//! background texture, so occluded parts are indistinguishable from the
//! scene behind. Visibility is measured by counting rendered pixels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::boxes::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::init::{derive_seed, rng, Rng};
use crate::tensor::Tensor;

pub const FIGURE_ASPECT: f64 = 0.41;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Gradient,
    Noise,
}

impl FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "flat" => Texture::Flat,
            "gradient" => Texture::Gradient,
            "noise" => Texture::Noise,
            other => return Err(Error::Config(format!("unknown texture `{other}`"))),
        })
    }
}

impl fmt::Display for Texture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Texture::Flat => "flat",
            Texture::Gradient => "gradient",
            Texture::Noise => "noise",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_figure_height: f64,
    pub max_figure_height: f64,
    pub occluder_probability: f64,
    pub min_occlusion: f64,
    pub max_occlusion: f64,
    pub max_clutter: usize,
    pub texture: Texture,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 128,
            height: 128,
            min_instances: 1,
            max_instances: 4,
            min_figure_height: 24.0,
            max_figure_height: 96.0,
            occluder_probability: 0.5,
            min_occlusion: 0.0,
            max_occlusion: 0.8,
            max_clutter: 3,
            texture: Texture::Noise,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("scene size must be positive".into());
        }
        if self.min_instances > self.max_instances {
            return bad("scene.min_instances exceeds scene.max_instances".into());
        }
        if !(self.min_figure_height >= 4.0 && self.min_figure_height <= self.max_figure_height) {
            return bad("figure height range must satisfy 4 <= min <= max".into());
        }
        if self.max_figure_height > self.height as f64 || self.max_figure_height * FIGURE_ASPECT > self.width as f64 {
            return bad("figures must fit inside the image".into());
        }
        if !(0.0..=1.0).contains(&self.occluder_probability) {
            return bad("occluder probability must lie in [0, 1]".into());
        }
        if !(0.0 <= self.min_occlusion && self.min_occlusion <= self.max_occlusion && self.max_occlusion <= 0.8) {
            return bad("occlusion range must satisfy 0 <= min <= max <= 0.8".into());
        }
        Ok(())
    }
}

/// One rendered scene. `image` is `1 x 3 x H x W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
    /// Occluder rectangle per ground truth, if any.
    pub occluders: Vec<Option<BBox>>,
}

/// Pixels covered by a figure with full extent `b`: a head disc in the top
/// part and a body rectangle below it. A pixel belongs to the figure when
/// its centre does.
pub fn figure_contains(b: &BBox, px: f64, py: f64) -> bool {
    let w = b.width();
    let r = 0.5 * w * 0.7;
    let (cx, _) = b.center();
    let head_cy = b.y1 + r;
    let body_top = b.y1 + 2.0 * r;
    let in_body = px >= b.x1 && px < b.x2 && py >= body_top && py < b.y2;
    let in_head = (px - cx).powi(2) + (py - head_cy).powi(2) <= r * r;
    in_body || in_head
}

/// Integer pixel bounds `[x0, x1) x [y0, y1)` covering `b` inside the image.
fn pixel_span(b: &BBox, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let x0 = b.x1.floor().max(0.0) as usize;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil().max(0.0) as usize).min(w);
    let y1 = (b.y2.ceil().max(0.0) as usize).min(h);
    (x0, x1, y0, y1)
}

/// Figure pixels per row, top to bottom, for rows `y0..y1`.
fn figure_rows(b: &BBox, w: usize, h: usize) -> (usize, Vec<usize>) {
    let (x0, x1, y0, y1) = pixel_span(b, w, h);
    let rows = (y0..y1)
        .map(|y| (x0..x1).filter(|&x| figure_contains(b, x as f64 + 0.5, y as f64 + 0.5)).count())
        .collect();
    (y0, rows)
}

/// Fraction of the figure's pixels not covered by `occluder`.
pub fn measured_visibility(b: &BBox, occluder: Option<&BBox>, w: usize, h: usize) -> f64 {
    let (x0, x1, y0, y1) = pixel_span(b, w, h);
    let (mut total, mut hidden) = (0usize, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if figure_contains(b, px, py) {
                total += 1;
                if occluder.is_some_and(|o| px >= o.x1 && px < o.x2 && py >= o.y1 && py < o.y2) {
                    hidden += 1;
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        1.0 - hidden as f64 / total as f64
    }
}

struct Background {
    base: [f32; 3],
    slope: [f32; 3],
    noise: Vec<f32>,
}

impl Background {
    fn new(texture: Texture, w: usize, h: usize, rng: &mut Rng) -> Background {
        let mut base = [0.0f32; 3];
        for c in &mut base {
            *c = rng.random_range(0.25..0.6);
        }
        let mut slope = [0.0f32; 3];
        if texture != Texture::Flat {
            for s in &mut slope {
                *s = rng.random_range(-0.25..0.25);
            }
        }
        let noise = if texture == Texture::Noise {
            (0..3 * w * h).map(|_| rng.random_range(-0.08..0.08)).collect()
        } else {
            Vec::new()
        };
        Background { base, slope, noise }
    }

    fn at(&self, c: usize, x: usize, y: usize, w: usize, h: usize) -> f32 {
        let t = 0.5 * (x as f32 / w as f32 + y as f32 / h as f32);
        let n = if self.noise.is_empty() { 0.0 } else { self.noise[(c * h + y) * w + x] };
        (self.base[c] + self.slope[c] * (t - 0.5) + n).clamp(0.0, 1.0)
    }
}

fn random_color(rng: &mut Rng) -> [f32; 3] {
    // one channel pushed high, one low, so figures stand out from the
    // greyish background
    let hi = rng.random_range(0..3);
    let lo = (hi + rng.random_range(1..3)) % 3;
    let mut c = [0.0f32; 3];
    for (i, v) in c.iter_mut().enumerate() {
        *v = if i == hi {
            rng.random_range(0.8..1.0)
        } else if i == lo {
            rng.random_range(0.0..0.15)
        } else {
            rng.random_range(0.1..0.9)
        };
    }
    c
}

/// Number of bottom rows to hide so the hidden pixel share is closest to
/// `fraction`.
fn rows_for_fraction(rows: &[usize], fraction: f64) -> usize {
    let total: usize = rows.iter().sum();
    if total == 0 || fraction <= 0.0 {
        return 0;
    }
    let mut best = (f64::INFINITY, 0);
    let mut hidden = 0usize;
    for k in 0..=rows.len() {
        if k > 0 {
            hidden += rows[rows.len() - k];
        }
        let err = (hidden as f64 / total as f64 - fraction).abs();
        if err < best.0 {
            best = (err, k);
        }
    }
    best.1
}

/// Renders scene `index` of a dataset.
pub fn generate_scene(config: &SceneConfig, index: usize) -> Scene {
    let (w, h) = (config.width, config.height);
    let mut r = rng(derive_seed(config.seed, index as u64));
    let bg = Background::new(config.texture, w, h, &mut r);
    let mut img = vec![0.0f32; 3 * w * h];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                img[(c * h + y) * w + x] = bg.at(c, x, y, w, h);
            }
        }
    }

    // Clutter: boxy distractors without a head, drawn first so figures and
    // occluders cover them.
    let clutter = if config.max_clutter > 0 { r.random_range(0..=config.max_clutter) } else { 0 };
    for _ in 0..clutter {
        let cw = r.random_range(6.0..(w as f64 * 0.4).max(7.0));
        let ch = r.random_range(6.0..(h as f64 * 0.3).max(7.0));
        let x1 = r.random_range(0.0..(w as f64 - cw).max(0.5));
        let y1 = r.random_range(0.0..(h as f64 - ch).max(0.5));
        let color = random_color(&mut r);
        let b = BBox::new(x1, y1, x1 + cw, y1 + ch);
        let (x0, xe, y0, ye) = pixel_span(&b, w, h);
        for y in y0..ye {
            for x in x0..xe {
                for c in 0..3 {
                    img[(c * h + y) * w + x] = color[c];
                }
            }
        }
    }

    let count = r.random_range(config.min_instances..=config.max_instances);
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let fh = r.random_range(config.min_figure_height..=config.max_figure_height);
            let fw = fh * FIGURE_ASPECT;
            let x1 = r.random_range(0.0..=(w as f64 - fw));
            let y1 = r.random_range(0.0..=(h as f64 - fh));
            let b = BBox::new(x1, y1, x1 + fw, y1 + fh);
            let grown = BBox::new(b.x1 - 2.0, b.y1 - 2.0, b.x2 + 2.0, b.y2 + 2.0);
            if boxes.iter().all(|o| o.intersection(&grown) == 0.0) {
                boxes.push(b);
                break;
            }
        }
    }

    let mut gts = Vec::with_capacity(boxes.len());
    let mut occluders = Vec::with_capacity(boxes.len());
    for b in &boxes {
        let color = random_color(&mut r);
        let (x0, xe, y0, ye) = pixel_span(b, w, h);
        for y in y0..ye {
            for x in x0..xe {
                if figure_contains(b, x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = color[c];
                    }
                }
            }
        }
        let fraction = if r.random_bool(config.occluder_probability) {
            r.random_range(config.min_occlusion..=config.max_occlusion)
        } else {
            0.0
        };
        let (row0, rows) = figure_rows(b, w, h);
        let k = rows_for_fraction(&rows, fraction);
        let occluder = (k > 0).then(|| {
            let top = (row0 + rows.len() - k) as f64;
            let margin = r.random_range(0.0..1.5);
            BBox::new(b.x1 - margin, top, b.x2 + margin, (row0 + rows.len()) as f64)
        });
        if let Some(o) = &occluder {
            let (x0, xe, y0, ye) = pixel_span(o, w, h);
            for y in y0..ye {
                for x in x0..xe {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if px >= o.x1 && px < o.x2 && py >= o.y1 && py < o.y2 {
                        for c in 0..3 {
                            img[(c * h + y) * w + x] = bg.at(c, x, y, w, h);
                        }
                    }
                }
            }
        }
        let visibility = measured_visibility(b, occluder.as_ref(), w, h);
        gts.push(GroundTruth { bbox: *b, visibility });
        occluders.push(occluder);
    }

    let image = Tensor::new([1, 3, h, w], img).expect("image buffer sized to shape");
    Scene { image, gts, occluders }
}

/// Renders `count` scenes; scene `i` depends only on `(config, i)`.
pub fn generate_dataset(config: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    config.validate()?;
    Ok((0..count).into_par_iter().map(|i| generate_scene(config, i)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VisibilityBin {
    None,
    Partial,
    Heavy,
    /// Visibility below 0.2.
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeightBin {
    /// At least 50 pixels.
    Tall,
    /// In `[20, 50)`.
    Medium,
    /// Below 20 pixels.
    Small,
}

pub fn visibility_bin(v: f64) -> VisibilityBin {
    if v >= 1.0 {
        VisibilityBin::None
    } else if v >= 0.65 {
        VisibilityBin::Partial
    } else if v >= 0.2 {
        VisibilityBin::Heavy
    } else {
        VisibilityBin::Other
    }
}

pub fn height_bin(h: f64) -> HeightBin {
    if h >= 50.0 {
        HeightBin::Tall
    } else if h >= 20.0 {
        HeightBin::Medium
    } else {
        HeightBin::Small
    }
}

/// Instance histogram over visibility and height bins; every instance lands
/// in exactly one cell.
pub fn split_by_bins<'a>(gts: impl IntoIterator<Item = &'a GroundTruth>) -> BTreeMap<(VisibilityBin, HeightBin), usize> {
    let mut out = BTreeMap::new();
    for g in gts {
        *out.entry((visibility_bin(g.visibility), height_bin(g.bbox.height()))).or_insert(0) += 1;
    }
    out
}
