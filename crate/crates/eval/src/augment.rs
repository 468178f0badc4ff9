//! Random crop, horizontal stretch and Gaussian noise with consistent box
//! updates. Output images keep the input size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::{BBox, GroundTruth};
use crate::image::Image;

/// Gray used where a narrowing stretch exposes canvas.
const PAD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Crop window side as a fraction of the image side, sampled uniformly.
    pub crop: (f32, f32),
    /// Horizontal scale factor, sampled uniformly.
    pub stretch: (f32, f32),
    pub noise_sigma: f32,
    pub seed: u64,
    /// Boxes keeping less than this fraction of their area are dropped.
    pub min_visible: f32,
    /// Crop attempts before giving up and leaving the image uncropped.
    pub max_retries: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            crop: (0.7, 1.0),
            stretch: (0.8, 1.25),
            noise_sigma: 0.02,
            seed: 0,
            min_visible: 0.2,
            max_retries: 10,
        }
    }
}

impl AugmentSpec {
    /// A spec that leaves every image and box untouched.
    pub fn identity() -> Self {
        AugmentSpec {
            crop: (1.0, 1.0),
            stretch: (1.0, 1.0),
            noise_sigma: 0.0,
            ..AugmentSpec::default()
        }
    }
}

impl AugmentSpec {
    /// Parse `key=value` lines (`crop`, `stretch`, `noise`, `seed`,
    /// `min_visible`, `retries`); ranges are written `lo,hi`. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut spec = AugmentSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| format!("line {}: {m}", i + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |s: &str| s.trim().parse::<f32>().map_err(|_| err(&format!("bad number {s:?}")));
            let range = |s: &str| -> std::result::Result<(f32, f32), String> {
                match s.split_once(',') {
                    Some((a, b)) => Ok((num(a)?, num(b)?)),
                    None => num(s).map(|x| (x, x)),
                }
            };
            match k {
                "crop" => spec.crop = range(v)?,
                "stretch" => spec.stretch = range(v)?,
                "noise" => spec.noise_sigma = num(v)?,
                "min_visible" => spec.min_visible = num(v)?,
                "seed" => spec.seed = v.parse().map_err(|_| err(&format!("bad seed {v:?}")))?,
                "retries" => spec.max_retries = v.parse().map_err(|_| err(&format!("bad count {v:?}")))?,
                other => return Err(err(&format!("unknown key {other:?}"))),
            }
        }
        let ok_range = |(lo, hi): (f32, f32)| lo > 0.0 && lo <= hi;
        if !ok_range(spec.crop) || spec.crop.1 > 1.0 {
            return Err(format!("crop range {:?} must lie in (0, 1]", spec.crop));
        }
        if !ok_range(spec.stretch) {
            return Err(format!("stretch range {:?} must be positive and ordered", spec.stretch));
        }
        if spec.noise_sigma < 0.0 || !spec.noise_sigma.is_finite() {
            return Err(format!("noise sigma {} must be non-negative", spec.noise_sigma));
        }
        Ok(spec)
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Boxes re-expressed inside `window`: clipped to it, shifted to its origin,
/// and dropped when less than `min_visible` of the original area remains.
pub fn clip_boxes(gts: &[GroundTruth], window: BBox, min_visible: f32) -> Vec<GroundTruth> {
    gts.iter()
        .filter_map(|g| {
            let inter = g.bbox.intersect(&window)?;
            if inter.area() < min_visible * g.bbox.area() {
                return None;
            }
            Some(GroundTruth {
                bbox: BBox::new(
                    inter.x1 - window.x1,
                    inter.y1 - window.y1,
                    inter.x2 - window.x1,
                    inter.y2 - window.y1,
                ),
                class: g.class,
            })
        })
        .collect()
}

fn scale_boxes(gts: &[GroundTruth], sx: f32, sy: f32, dx: f32) -> Vec<GroundTruth> {
    gts.iter()
        .map(|g| GroundTruth {
            bbox: BBox::new(
                g.bbox.x1 * sx + dx,
                g.bbox.y1 * sy,
                g.bbox.x2 * sx + dx,
                g.bbox.y2 * sy,
            ),
            class: g.class,
        })
        .collect()
}

/// Crop `[x0, x0 + w) x [y0, y0 + h)`.
pub fn crop(img: &Image, gts: &[GroundTruth], x0: usize, y0: usize, w: usize, h: usize, min_visible: f32) -> (Image, Vec<GroundTruth>) {
    let window = BBox::new(x0 as f32, y0 as f32, (x0 + w) as f32, (y0 + h) as f32);
    (img.crop(x0, y0, w, h), clip_boxes(gts, window, min_visible))
}

/// Scale the content horizontally by `factor` about the image center while
/// keeping the canvas size: wider content is center-cropped, narrower
/// content is padded.
pub fn stretch(img: &Image, gts: &[GroundTruth], factor: f32, min_visible: f32) -> (Image, Vec<GroundTruth>) {
    let (w, h) = (img.width, img.height);
    let sw = ((w as f32 * factor).round() as usize).max(1);
    if sw == w {
        return (img.clone(), gts.to_vec());
    }
    let scaled = img.resize(sw, h);
    let sx = sw as f32 / w as f32;
    if sw > w {
        let x0 = (sw - w) / 2;
        let boxes = scale_boxes(gts, sx, 1.0, 0.0);
        crop(&scaled, &boxes, x0, 0, w, h, min_visible)
    } else {
        let x0 = (w - sw) / 2;
        let mut out = Image::filled(w, h, [PAD; 3]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..sw {
                    out.set(c, x0 + x, y, scaled.get(c, x, y));
                }
            }
        }
        (out, scale_boxes(gts, sx, 1.0, x0 as f32))
    }
}

/// Add i.i.d. Gaussian noise, clamping to `[0, 1]`.
pub fn add_noise(img: &mut Image, sigma: f32, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in &mut img.data {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Crop (zooming back to full size), stretch, then noise.
pub fn augment_with(img: &Image, gts: &[GroundTruth], spec: &AugmentSpec, rng: &mut impl Rng) -> (Image, Vec<GroundTruth>) {
    let (w, h) = (img.width, img.height);
    let mut cur = (img.clone(), gts.to_vec());
    for _ in 0..spec.max_retries.max(1) {
        let f = sample(rng, spec.crop).clamp(0.05, 1.0);
        let (cw, ch) = (((w as f32 * f).round() as usize).clamp(1, w), ((h as f32 * f).round() as usize).clamp(1, h));
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        let (cropped, boxes) = crop(img, gts, x0, y0, cw, ch, spec.min_visible);
        if gts.is_empty() || !boxes.is_empty() {
            let sx = w as f32 / cw as f32;
            let sy = h as f32 / ch as f32;
            cur = (cropped.resize(w, h), scale_boxes(&boxes, sx, sy, 0.0));
            break;
        }
    }
    let factor = sample(rng, spec.stretch);
    let (mut out, boxes) = {
        let (s_img, s_boxes) = stretch(&cur.0, &cur.1, factor, spec.min_visible);
        if s_boxes.is_empty() && !cur.1.is_empty() {
            cur
        } else {
            (s_img, s_boxes)
        }
    };
    add_noise(&mut out, spec.noise_sigma, rng);
    (out, boxes)
}

/// Augment with a generator seeded from `spec.seed` and `index`, so each
/// sample of a dataset gets its own reproducible stream.
pub fn augment(img: &Image, gts: &[GroundTruth], spec: &AugmentSpec, index: u64) -> (Image, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    augment_with(img, gts, spec, &mut rng)
}
