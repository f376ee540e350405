//! Deterministic synthetic dataset: procedural glyph categories rendered into
//! small single-channel images with exact binary masks.
//!
//! Generation is a pure function of `(spec, category, split, index)`: each
//! sample derives its own stream from those values, so any sample can be
//! produced in isolation and the whole dataset is reproducible bitwise.
//! Labels alternate positive/negative, giving an exact 50/50 balance per
//! category. Positive samples render the category glyph (random position,
//! scale, rotation) over noise and clutter; both classes may additionally
//! carry a distractor glyph from another category, so presence of ink alone
//! does not decide the class. The mask marks exactly the category-glyph
//! pixels, so a nonzero mask and a positive label coincide by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Rng, Shape, Tensor};

/// Procedural glyph families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Disk,
    Cross,
    Triangle,
    Ring,
    Bar,
}

/// One procedural category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub name: String,
    pub glyph: Glyph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x5452,
            Split::Val => 0x5641,
            Split::Test => 0x5445,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 512,
            val: 128,
            test: 200,
        }
    }
}

impl SplitSizes {
    pub fn of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Full description of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeWorldSpec {
    pub categories: Vec<CategoryDef>,
    /// Square image edge in pixels; one channel.
    pub image_size: usize,
    /// Probability that a sample (either class) contains a distractor glyph
    /// from another category.
    pub clutter: f64,
    /// Additive Gaussian pixel noise.
    pub noise_std: f64,
    /// Glyph half-extent in pixels, sampled uniformly.
    pub scale_range: (f64, f64),
    /// Documented bounds on the mean positive-pixel fraction of positives.
    pub fill_range: (f64, f64),
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for ShapeWorldSpec {
    fn default() -> Self {
        ShapeWorldSpec {
            categories: vec![
                CategoryDef {
                    name: "disk".into(),
                    glyph: Glyph::Disk,
                },
                CategoryDef {
                    name: "cross".into(),
                    glyph: Glyph::Cross,
                },
                CategoryDef {
                    name: "triangle".into(),
                    glyph: Glyph::Triangle,
                },
                CategoryDef {
                    name: "ring".into(),
                    glyph: Glyph::Ring,
                },
                CategoryDef {
                    name: "bar".into(),
                    glyph: Glyph::Bar,
                },
            ],
            image_size: 32,
            clutter: 1.0,
            noise_std: 0.13,
            scale_range: (5.5, 10.5),
            fill_range: (0.02, 0.5),
            splits: SplitSizes::default(),
            seed: 7,
        }
    }
}

impl ShapeWorldSpec {
    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("unknown category `{name}`")))
    }

    pub fn image_shape(&self) -> Shape {
        Shape::new(vec![1, self.image_size, self.image_size])
    }
}

/// One generated sample. `label` is 1 when the category glyph is present; the
/// mask marks exactly its pixels and is all-zero otherwise.
#[derive(Debug, Clone)]
pub struct Sample<E: Element> {
    pub image: Tensor<E>,
    pub label: usize,
    pub mask: Tensor<E>,
}

struct PlacedGlyph {
    glyph: Glyph,
    cx: f64,
    cy: f64,
    scale: f64,
    rot: f64,
}

impl PlacedGlyph {
    fn draw(glyph: Glyph, size: usize, rng: &mut Rng, scale_range: (f64, f64)) -> Self {
        let scale = rng.uniform(scale_range.0, scale_range.1);
        let margin = scale + 1.0;
        let hi = size as f64 - margin;
        let cx = rng.uniform(margin, hi);
        let cy = rng.uniform(margin, hi);
        let rot = rng.uniform(0.0, std::f64::consts::TAU);
        PlacedGlyph {
            glyph,
            cx,
            cy,
            scale,
            rot,
        }
    }

    /// Inside test at pixel center (x, y), in the glyph's unit frame.
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin, cos) = self.rot.sin_cos();
        let u = (dx * cos + dy * sin) / self.scale;
        let v = (-dx * sin + dy * cos) / self.scale;
        match self.glyph {
            Glyph::Disk => u * u + v * v <= 1.0,
            Glyph::Ring => {
                let r2 = u * u + v * v;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
            Glyph::Cross => {
                (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0)
            }
            Glyph::Bar => u.abs() <= 1.0 && v.abs() <= 0.22,
            Glyph::Triangle => {
                // Equilateral triangle inscribed in the unit circle, apex at
                // (0, -1), base at v = 0.5.
                let s3 = 3f64.sqrt();
                v <= 0.5 && v >= s3 * u - 1.0 && v >= -s3 * u - 1.0
            }
        }
    }
}

fn render_glyph(size: usize, placed: &PlacedGlyph) -> Vec<bool> {
    let mut px = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 + 0.5;
            let fy = y as f64 + 0.5;
            if placed.contains(fx, fy) {
                px[y * size + x] = true;
            }
        }
    }
    px
}

/// Produces sample `index` of the given category dataset and split. Pure:
/// identical arguments always yield a bitwise-identical sample.
pub fn generate<E: Element>(
    spec: &ShapeWorldSpec,
    category: usize,
    split: Split,
    index: usize,
) -> Result<Sample<E>> {
    if category >= spec.categories.len() {
        return Err(Error::Config(format!(
            "category index {category} out of range ({} categories)",
            spec.categories.len()
        )));
    }
    let size = spec.image_size;
    let mut rng = Rng::for_stream(
        spec.seed,
        &format!("sample-{category}-{}-{index}", split.tag()),
    );
    let positive = index % 2 == 0;

    let mut image = vec![0.0f64; size * size];
    let mut mask = vec![false; size * size];

    // Clutter blobs: small axis-aligned rectangles, present on both classes.
    let blob_count = rng.below(3) + 1;
    for _ in 0..blob_count {
        let bw = rng.below(3) + 2;
        let bh = rng.below(3) + 2;
        let bx = rng.below(size - bw);
        let by = rng.below(size - bh);
        let intensity = rng.uniform(0.25, 0.7);
        for y in by..by + bh {
            for x in bx..bx + bw {
                image[y * size + x] += intensity;
            }
        }
    }

    // Distractor glyph from a different category, on either class; never the
    // category itself, so the mask semantics stay exact.
    let roll = rng.uniform(0.0, 1.0);
    if spec.categories.len() > 1 && roll < spec.clutter {
        let mut other = rng.below(spec.categories.len() - 1);
        if other >= category {
            other += 1;
        }
        let placed =
            PlacedGlyph::draw(spec.categories[other].glyph, size, &mut rng, spec.scale_range);
        let glyph_px = render_glyph(size, &placed);
        let intensity = rng.uniform(0.5, 0.9);
        for (i, &inside) in glyph_px.iter().enumerate() {
            if inside {
                image[i] += intensity;
            }
        }
    }

    if positive {
        let placed =
            PlacedGlyph::draw(spec.categories[category].glyph, size, &mut rng, spec.scale_range);
        let glyph_px = render_glyph(size, &placed);
        let intensity = rng.uniform(0.7, 1.0);
        for (i, &inside) in glyph_px.iter().enumerate() {
            if inside {
                image[i] += intensity;
                mask[i] = true;
            }
        }
    }

    if spec.noise_std > 0.0 {
        for v in image.iter_mut() {
            let n: f64 = rng.normal();
            *v += n * spec.noise_std;
        }
    }

    let shape = spec.image_shape();
    let image = Tensor::from_fn(&shape, |i| E::from_f64(image[i]));
    let mask_t = Tensor::from_fn(&shape, |i| if mask[i] { E::ONE } else { E::ZERO });
    Ok(Sample {
        image,
        label: positive as usize,
        mask: mask_t,
    })
}

/// Exports one category/split as a documented flat binary for inspection.
///
/// Layout (all integers little-endian u32 after a 4-byte magic):
/// `b"SHPW"`, version (1), element bytes (4 or 8), image edge, channel count
/// (1), sample count; then per sample: label u32, image (edge*edge elements,
/// little-endian IEEE-754), mask (same layout).
pub fn export_dataset<E: Element>(
    path: impl AsRef<std::path::Path>,
    spec: &ShapeWorldSpec,
    category: usize,
    split: Split,
) -> Result<()> {
    let count = spec.splits.of(split);
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(b"SHPW");
    for v in [1u32, E::BYTES as u32, spec.image_size as u32, 1, count as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..count {
        let s = generate::<E>(spec, category, split, i)?;
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        out.extend_from_slice(&s.image.to_le_bytes());
        out.extend_from_slice(&s.mask.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = ShapeWorldSpec::default();
        let a = generate::<f64>(&spec, 2, Split::Train, 17).unwrap();
        let b = generate::<f64>(&spec, 2, Split::Train, 17).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask.data(), b.mask.data());
        assert_eq!(a.label, b.label);
        let c = generate::<f64>(&spec, 2, Split::Train, 18).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn mask_nonzero_iff_label_positive() {
        let spec = ShapeWorldSpec::default();
        for cat in 0..spec.categories.len() {
            for i in 0..40 {
                let s = generate::<f64>(&spec, cat, Split::Val, i).unwrap();
                let mask_pixels = s.mask.data().iter().filter(|&&v| v > 0.0).count();
                if s.label == 1 {
                    assert!(mask_pixels > 0, "positive sample with empty mask");
                } else {
                    assert_eq!(mask_pixels, 0, "negative sample with nonzero mask");
                }
            }
        }
    }

    #[test]
    fn labels_are_balanced_exactly() {
        let spec = ShapeWorldSpec::default();
        let pos = (0..100)
            .map(|i| generate::<f32>(&spec, 0, Split::Test, i).unwrap().label)
            .sum::<usize>();
        assert_eq!(pos, 50);
    }

    #[test]
    fn mean_fill_fraction_within_documented_range() {
        let spec = ShapeWorldSpec::default();
        for cat in 0..spec.categories.len() {
            let mut total = 0.0;
            let mut positives = 0usize;
            for i in 0..1000 {
                let s = generate::<f32>(&spec, cat, Split::Train, i).unwrap();
                if s.label == 1 {
                    let frac = s.mask.data().iter().filter(|&&v| v > 0.0).count() as f64
                        / s.mask.len() as f64;
                    total += frac;
                    positives += 1;
                }
            }
            let mean = total / positives as f64;
            assert!(
                mean >= spec.fill_range.0 && mean <= spec.fill_range.1,
                "category {cat}: mean fill {mean}"
            );
        }
    }

    #[test]
    fn export_writes_documented_header() {
        let spec = ShapeWorldSpec {
            splits: SplitSizes {
                train: 4,
                val: 2,
                test: 2,
            },
            ..ShapeWorldSpec::default()
        };
        let path = std::env::temp_dir().join(format!("shapeworld-{}.bin", std::process::id()));
        export_dataset::<f32>(&path, &spec, 0, Split::Val).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"SHPW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 32);
        let per_sample = 4 + 2 * 32 * 32 * 4;
        assert_eq!(bytes.len(), 24 + 2 * per_sample);
        std::fs::remove_file(&path).unwrap();
    }
}
