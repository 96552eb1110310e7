//! Deterministic synthetic detection corpus: soft elliptical "face"
//! blobs over textured backgrounds with rectangular distractors,
//! stratified into small/medium/large size tiers.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// COCO-style area thresholds standing in for dataset difficulty tiers.
pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;
/// Smallest rendered face area.
pub const MIN_AREA: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeTier {
    Small,
    Medium,
    Large,
}

impl SizeTier {
    pub fn from_area(area: f64) -> SizeTier {
        if area < SMALL_MAX_AREA {
            SizeTier::Small
        } else if area < MEDIUM_MAX_AREA {
            SizeTier::Medium
        } else {
            SizeTier::Large
        }
    }

    pub fn all() -> [SizeTier; 3] {
        [SizeTier::Small, SizeTier::Medium, SizeTier::Large]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthParams {
    pub resolution: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    /// Sampling weights for small/medium/large faces; need not sum to 1.
    pub tier_mix: [f64; 3],
    pub max_distractors: usize,
    /// Background noise amplitude.
    pub noise: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            resolution: 128,
            min_faces: 1,
            max_faces: 10,
            tier_mix: [0.4, 0.4, 0.2],
            max_distractors: 3,
            noise: 0.05,
        }
    }
}

impl SynthParams {
    /// Largest face area renderable fully inside the image.
    fn max_area(&self) -> f64 {
        let side = self.resolution as f64 - 4.0;
        side * side / ASPECT_MAX
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::config("resolution must be positive"));
        }
        if self.min_faces == 0 || self.min_faces > self.max_faces {
            return Err(Error::config("need 1 <= min_faces <= max_faces"));
        }
        if self.tier_mix.iter().any(|&w| w < 0.0 || !w.is_finite())
            || self.tier_mix.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("tier_mix weights must be >= 0 with a positive sum"));
        }
        // every requested tier must fit inside the image
        let max_area = self.max_area();
        let tier_min = [MIN_AREA, SMALL_MAX_AREA, MEDIUM_MAX_AREA];
        for (i, &w) in self.tier_mix.iter().enumerate() {
            if w > 0.0 && tier_min[i] >= max_area {
                return Err(Error::config(format!(
                    "tier {:?} does not fit in a {}px image",
                    SizeTier::all()[i],
                    self.resolution
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub tier: SizeTier,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    /// (1, res, res) grayscale image.
    pub image: Array3<f32>,
    pub gt: Vec<GtBox>,
    pub seed: u64,
}

const ASPECT_MAX: f64 = 1.25;

fn sample_tier(rng: &mut ChaCha8Rng, mix: &[f64; 3]) -> usize {
    let total: f64 = mix.iter().sum();
    let mut t = rng.gen_range(0.0..total);
    for (i, &w) in mix.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    2
}

/// Render one scene. Bit-identical for the same (params, seed).
pub fn generate_scene(params: &SynthParams, seed: u64) -> Result<SynthScene> {
    params.validate()?;
    let res = params.resolution;
    let resf = res as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // textured background: smooth diagonal gradient plus uniform noise
    let (gx, gy) = (rng.gen_range(-0.2f32..0.2), rng.gen_range(-0.2f32..0.2));
    let bias = rng.gen_range(-0.1f32..0.1);
    let mut img = Array3::from_shape_fn((1, res, res), |(_, y, x)| {
        bias + gx * (x as f32 / res as f32) + gy * (y as f32 / res as f32)
    });
    if params.noise > 0.0 {
        for v in img.iter_mut() {
            *v += rng.gen_range(-params.noise..params.noise);
        }
    }

    // sharp-edged rectangular distractors (unlabeled)
    let n_distract = rng.gen_range(0..=params.max_distractors);
    for _ in 0..n_distract {
        let w = rng.gen_range(4..(res / 3).max(5));
        let h = rng.gen_range(4..(res / 3).max(5));
        let x0 = rng.gen_range(0..res - w);
        let y0 = rng.gen_range(0..res - h);
        let fill = rng.gen_range(-0.6f32..-0.2);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img[[0, y, x]] += fill;
            }
        }
    }

    // soft elliptical faces
    let tier_area = [
        (MIN_AREA, SMALL_MAX_AREA),
        (SMALL_MAX_AREA, MEDIUM_MAX_AREA),
        (MEDIUM_MAX_AREA, f64::INFINITY),
    ];
    let max_area = params.max_area();
    let n_faces = rng.gen_range(params.min_faces..=params.max_faces);
    let mut gt = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let mut tier = sample_tier(&mut rng, &params.tier_mix);
        if tier_area[tier].0 >= max_area {
            tier = 0; // requested tier validated feasible; fallback is defensive
        }
        let (lo, hi) = tier_area[tier];
        let hi = hi.min(max_area);
        let area = rng.gen_range(lo..hi);
        let aspect = rng.gen_range(1.0 / ASPECT_MAX..ASPECT_MAX);
        let w = (area * aspect).sqrt();
        let h = area / w;
        let cx = rng.gen_range(w / 2.0 + 0.5..resf - w / 2.0 - 0.5);
        let cy = rng.gen_range(h / 2.0 + 0.5..resf - h / 2.0 - 0.5);
        let bbox = BBox::from_center(cx, cy, w, h);
        let amp = rng.gen_range(0.6f32..1.0);
        // soft falloff inside the box-inscribed ellipse
        let (rx, ry) = (w / 2.0, h / 2.0);
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(res);
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(res);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let r2 = dx * dx + dy * dy;
                if r2 < 1.0 {
                    img[[0, y, x]] += amp * (1.0 - r2 as f32).powf(1.5);
                }
            }
        }
        gt.push(GtBox {
            bbox,
            tier: SizeTier::from_area(bbox.area()),
        });
    }

    Ok(SynthScene {
        image: img,
        gt,
        seed,
    })
}

/// Scene i uses seed `base_seed + i`.
pub fn generate_corpus(n: usize, params: &SynthParams, base_seed: u64) -> Result<Vec<SynthScene>> {
    if n == 0 {
        return Err(Error::config("corpus size must be positive"));
    }
    params.validate()?;
    (0..n)
        .map(|i| generate_scene(params, base_seed.wrapping_add(i as u64)))
        .collect()
}

/// One line of the ground-truth file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: u64,
    pub boxes: Vec<(f64, f64, f64, f64)>,
}

impl GtRecord {
    pub fn from_scene(image_id: u64, scene: &SynthScene) -> Self {
        Self {
            image_id,
            boxes: scene
                .gt
                .iter()
                .map(|g| (g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2))
                .collect(),
        }
    }

    pub fn gt_boxes(&self) -> Result<Vec<GtBox>> {
        self.boxes
            .iter()
            .map(|&(x1, y1, x2, y2)| {
                let bbox = BBox::new(x1, y1, x2, y2)?;
                Ok(GtBox {
                    bbox,
                    tier: SizeTier::from_area(bbox.area()),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let p = SynthParams::default();
        let a = generate_corpus(5, &p, 99).unwrap();
        let b = generate_corpus(5, &p, 99).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.gt.len(), sb.gt.len());
            for (ga, gb) in sa.gt.iter().zip(&sb.gt) {
                assert_eq!(ga.bbox, gb.bbox);
                assert_eq!(ga.tier, gb.tier);
            }
        }
    }

    #[test]
    fn different_seed_differs() {
        let p = SynthParams::default();
        let a = generate_scene(&p, 1).unwrap();
        let b = generate_scene(&p, 2).unwrap();
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn boxes_fully_inside_image() {
        let p = SynthParams::default();
        for scene in generate_corpus(50, &p, 7).unwrap() {
            for g in &scene.gt {
                assert!(g.bbox.x1 >= 0.0 && g.bbox.y1 >= 0.0);
                assert!(g.bbox.x2 <= 128.0 && g.bbox.y2 <= 128.0);
            }
        }
    }

    #[test]
    fn forced_large_tier_only() {
        let p = SynthParams {
            tier_mix: [0.0, 0.0, 1.0],
            min_faces: 1,
            max_faces: 1,
            ..SynthParams::default()
        };
        for scene in generate_corpus(20, &p, 3).unwrap() {
            assert!(scene.gt.iter().all(|g| g.tier == SizeTier::Large));
        }
    }

    #[test]
    fn tier_mix_realized_within_two_percent() {
        let p = SynthParams {
            tier_mix: [0.2, 0.3, 0.5],
            min_faces: 4,
            max_faces: 8,
            ..SynthParams::default()
        };
        let corpus = generate_corpus(1000, &p, 11).unwrap();
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for s in &corpus {
            for g in &s.gt {
                counts[match g.tier {
                    SizeTier::Small => 0,
                    SizeTier::Medium => 1,
                    SizeTier::Large => 2,
                }] += 1;
                total += 1;
            }
        }
        for (i, &want) in [0.2, 0.3, 0.5].iter().enumerate() {
            let got = counts[i] as f64 / total as f64;
            assert!(
                (got - want).abs() <= 0.02,
                "tier {i}: realized {got:.3} vs requested {want}"
            );
        }
    }

    #[test]
    fn infeasible_tier_rejected() {
        let p = SynthParams {
            resolution: 64,
            tier_mix: [0.0, 0.0, 1.0],
            ..SynthParams::default()
        };
        assert!(matches!(generate_scene(&p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tier_matches_area_thresholds() {
        assert_eq!(SizeTier::from_area(100.0), SizeTier::Small);
        assert_eq!(SizeTier::from_area(1024.0), SizeTier::Medium);
        assert_eq!(SizeTier::from_area(9216.0), SizeTier::Large);
    }
}
