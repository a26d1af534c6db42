//! Procedural images of textured shapes with image-level labels and
//! held-out segmentation masks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::Image;
use crate::error::{Error, Result};

pub const MAX_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Solid,
    Stripes,
}

/// Appearance of class `c` (0-based): a shape, a texture and a hue.
pub fn class_style(c: usize) -> (Shape, Texture, [f64; 3]) {
    let shape = [Shape::Disk, Shape::Square, Shape::Triangle][c % 3];
    let texture = if c < 3 { Texture::Solid } else { Texture::Stripes };
    let color = [
        [0.9, 0.15, 0.15],
        [0.15, 0.85, 0.2],
        [0.2, 0.3, 0.95],
        [0.95, 0.85, 0.1],
        [0.1, 0.85, 0.9],
        [0.85, 0.2, 0.9],
    ][c];
    (shape, texture, color)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub image_labels: Vec<bool>,
    /// Per pixel: 0 for background, `c + 1` for class `c`.
    pub gt_mask: Vec<u8>,
}

struct Placed {
    shape: Shape,
    cy: f64,
    cx: f64,
    r: f64,
}

impl Placed {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.shape {
            Shape::Disk => dy * dy + dx * dx <= self.r * self.r,
            Shape::Square => dy.abs() <= self.r * 0.85 && dx.abs() <= self.r * 0.85,
            // apex up, base at cy + r
            Shape::Triangle => {
                let t = (dy + self.r) / (2.0 * self.r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.r
            }
        }
    }
}

/// Draws sample `index` of the stream identified by `seed`.
pub fn generate_sample(size: usize, num_classes: usize, seed: u64, index: u64) -> Result<SyntheticSample> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::config(format!("num_classes {num_classes} outside [1, {MAX_CLASSES}]")));
    }
    if size < 16 {
        return Err(Error::config(format!("image size {size} below 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let base: f64 = rng.gen_range(0.35..0.6);
    let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let period = rng.gen_range(6..12) as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let sz = size as f64;
    let (r_lo, r_hi) = (sz * 0.11, sz * 0.22);
    let count = rng.gen_range(1..=3usize);
    let mut gt = vec![0u8; size * size];
    let mut placed: Vec<(Placed, usize)> = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(0..num_classes);
        let shape = class_style(class).0;
        for _ in 0..50 {
            let r = rng.gen_range(r_lo..r_hi);
            let cy = rng.gen_range(r..sz - r);
            let cx = rng.gen_range(r..sz - r);
            let cand = Placed { shape, cy, cx, r };
            // bounding circles one pixel apart never overlap
            let clear = placed
                .iter()
                .all(|(p, _)| ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt() > p.r + r + 1.0);
            if clear {
                placed.push((cand, class));
                break;
            }
        }
    }

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let hit = placed.iter().find(|(p, _)| p.contains(fy, fx));
            let noise: f64 = rng.gen_range(-0.04..0.04);
            let rgb = match hit {
                Some((_, class)) => {
                    gt[y * size + x] = (*class + 1) as u8;
                    let (_, texture, color) = class_style(*class);
                    let shade = match texture {
                        Texture::Solid => 1.0,
                        Texture::Stripes if ((x + y) / 3) % 2 == 0 => 1.0,
                        Texture::Stripes => 0.45,
                    };
                    color.map(|c| c * shade)
                }
                None => {
                    let wave = 0.08 * ((fx + fy) * std::f64::consts::TAU / period + phase).sin();
                    [0, 1, 2].map(|k| base + tint[k] + wave)
                }
            };
            data.extend(rgb.iter().map(|v| (v + noise).clamp(0.0, 1.0)));
        }
    }
    let mut image_labels = vec![false; num_classes];
    for &l in &gt {
        if l > 0 {
            image_labels[l as usize - 1] = true;
        }
    }
    Ok(SyntheticSample {
        image: Image::new(size, size, data)?,
        image_labels,
        gt_mask: gt,
    })
}

/// `n` samples with indices `offset..offset + n` of the stream `seed`.
pub fn generate_range(n: usize, offset: u64, size: usize, num_classes: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    (0..n as u64)
        .map(|i| generate_sample(size, num_classes, seed, offset + i))
        .collect()
}

pub fn generate_dataset(n: usize, num_classes: usize, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    generate_range(n, 0, size, num_classes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_dataset(1, 3, 64, 9).unwrap();
        let b = generate_dataset(1, 3, 64, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(1, 3, 64, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_match_masks() {
        for s in generate_dataset(200, 6, 64, 1).unwrap() {
            for c in 0..6 {
                let present = s.gt_mask.iter().any(|&l| l as usize == c + 1);
                assert_eq!(present, s.image_labels[c]);
            }
            assert!(s.image_labels.iter().any(|&b| b));
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn class_histogram_is_near_uniform() {
        let n = 1000;
        let c = 3;
        let data = generate_dataset(n, c, 32, 4).unwrap();
        let mut counts = vec![0usize; c];
        for s in &data {
            for (k, &p) in s.image_labels.iter().enumerate() {
                counts[k] += p as usize;
            }
        }
        let mean = counts.iter().sum::<usize>() as f64 / c as f64;
        for &k in &counts {
            assert!((k as f64 - mean).abs() <= 0.2 * mean, "{counts:?}");
            assert!(k >= n / (2 * c));
        }
    }

    #[test]
    fn bad_arguments() {
        assert!(generate_dataset(0, 3, 64, 0).is_err());
        assert!(generate_dataset(1, 7, 64, 0).is_err());
    }

    #[test]
    fn shapes_are_distinct_per_class() {
        let styles: Vec<_> = (0..MAX_CLASSES).map(|c| (class_style(c).0, class_style(c).1)).collect();
        for i in 0..styles.len() {
            for j in i + 1..styles.len() {
                assert_ne!(styles[i], styles[j]);
            }
        }
    }
}
