//! Deterministic toy detection data: colored shapes on a noisy background.
//!
//! Class 0 is a filled red disk, class 1 a filled green square and class 2 a
//! blue ring. Shapes never overlap, and every box lies inside the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::{BBox, GroundTruth};
use crate::dataset::Sample;
use crate::image::Image;

pub const FIXTURE_SIZE: usize = 64;
pub const FIXTURE_CLASSES: usize = 3;

const COLORS: [[f32; 3]; 3] = [[0.9, 0.15, 0.1], [0.15, 0.85, 0.2], [0.2, 0.35, 0.95]];

fn paint(img: &mut Image, class: usize, cx: f32, cy: f32, r: f32) {
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let inside = match class {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r && dy.abs() <= r,
                _ => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= r && d >= 0.55 * r
                }
            };
            if inside {
                for (c, v) in COLORS[class].iter().enumerate() {
                    img.set(c, x, y, *v);
                }
            }
        }
    }
}

/// `n` image/label pairs, identical for identical `(n, seed)`. Images are
/// quantized to 8 bits so they survive a PPM round trip unchanged.
pub fn synth_fixtures(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    let s = FIXTURE_SIZE as f32;
    (0..n)
        .map(|i| {
            let mut img = Image::filled(FIXTURE_SIZE, FIXTURE_SIZE, [0.25, 0.12, 0.08]);
            for v in &mut img.data {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            let count = rng.random_range(1..=3);
            let mut placed: Vec<(f32, f32, f32)> = Vec::new();
            let mut gts = Vec::new();
            let mut attempts = 0;
            while placed.len() < count && attempts < 200 {
                attempts += 1;
                let r = rng.random_range(6.0f32..12.0).round();
                let cx = rng.random_range(r + 1.0..s - r - 1.0).round();
                let cy = rng.random_range(r + 1.0..s - r - 1.0).round();
                if placed.iter().any(|&(px, py, pr)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() < pr + r + 4.0) {
                    continue;
                }
                let class = rng.random_range(0..FIXTURE_CLASSES);
                paint(&mut img, class, cx, cy, r);
                placed.push((cx, cy, r));
                gts.push(GroundTruth {
                    bbox: BBox::new(cx - r, cy - r, cx + r, cy + r),
                    class,
                });
            }
            Sample {
                stem: format!("fixture_{i:04}"),
                image: img.quantized(),
                gts,
            }
        })
        .collect()
}
