//! Deterministic generator of synthetic multi-class raster scenes with dense
//! ground truth, plus a point-annotation sampler producing sparse labels.
//!
//! Classes have distinct mean colors with Gaussian pixel noise, so class
//! evidence is local and spatially contiguous regions genuinely share a
//! category.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMatrix, Raster};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub n_regions: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.k > 255 {
            return Err(Error::Config("k must fit in a u8 label".into()));
        }
        if self.n_regions < self.k {
            return Err(Error::Config(format!(
                "n_regions ({}) must be >= k ({}) so every class can appear",
                self.n_regions, self.k
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("scene must be at least 4x4".into()));
        }
        Ok(())
    }
}

/// Distinct mean color per class, spread over the RGB cube away from the
/// clamp boundaries.
fn class_color(class: usize, k: usize) -> [f64; 3] {
    let t = (class - 1) as f64 / k as f64;
    let angle = t * std::f64::consts::TAU;
    [
        0.5 + 0.35 * angle.cos(),
        0.5 + 0.35 * (angle + 2.0).sin(),
        0.5 + 0.35 * (1.7 * angle).sin().abs() - 0.175,
    ]
}

fn paint_shapes(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> LabelMatrix {
    let (h, w) = (spec.height, spec.width);
    let mut gt = LabelMatrix::new(h, w, vec![1; h * w]).unwrap();
    for region in 0..spec.n_regions {
        // first k-1 regions cycle through classes 2..=k so every class gets a
        // chance to appear; the rest are free
        let class = if region < spec.k - 1 {
            (region + 2) as u8
        } else {
            rng.gen_range(1..=spec.k) as u8
        };
        let cr = rng.gen_range(0..h) as f64;
        let cc = rng.gen_range(0..w) as f64;
        let min_r = (h.min(w) / 8).max(2) as f64;
        let max_r = (h.min(w) / 3).max(3) as f64;
        if rng.gen_bool(0.5) {
            // axis-aligned rectangle
            let half_h = rng.gen_range(min_r..=max_r);
            let half_w = rng.gen_range(min_r..=max_r);
            for r in 0..h {
                for c in 0..w {
                    if (r as f64 - cr).abs() <= half_h && (c as f64 - cc).abs() <= half_w {
                        gt.set(r, c, class);
                    }
                }
            }
        } else {
            // axis-aligned ellipse (convex blob)
            let ra = rng.gen_range(min_r..=max_r);
            let rb = rng.gen_range(min_r..=max_r);
            for r in 0..h {
                for c in 0..w {
                    let dr = (r as f64 - cr) / ra;
                    let dc = (c as f64 - cc) / rb;
                    if dr * dr + dc * dc <= 1.0 {
                        gt.set(r, c, class);
                    }
                }
            }
        }
    }
    gt
}

/// Generates one scene: a 3-channel image and its dense ground truth.
/// Deterministic per `spec.seed`; every class in `[1, k]` occupies at least
/// one pixel.
pub fn gen_scene(spec: &SceneSpec) -> Result<(Raster, LabelMatrix)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gt = None;
    for _attempt in 0..100 {
        let candidate = paint_shapes(&mut rng, spec);
        let mut present = vec![false; spec.k + 1];
        for &l in &candidate.labels {
            present[l as usize] = true;
        }
        if present[1..].iter().all(|&p| p) {
            gt = Some(candidate);
            break;
        }
    }
    let gt = gt.ok_or_else(|| {
        Error::Data(format!("could not place all {} classes after 100 attempts", spec.k))
    })?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut image = Raster::zeros(spec.height, spec.width, 3);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let color = class_color(gt.get(r, c) as usize, spec.k);
            for ch in 0..3 {
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.set(r, c, ch, (color[ch] + n).clamp(0.0, 1.0));
            }
        }
    }
    Ok((image, gt))
}

/// Uniformly samples up to `points_per_class` pixels per present class from
/// the dense ground truth, without replacement. Classes with fewer pixels than
/// requested yield all their pixels.
pub fn sample_points(dense_gt: &LabelMatrix, points_per_class: usize, seed: u64) -> LabelMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &l) in dense_gt.labels.iter().enumerate() {
        if l != 0 {
            by_class[l as usize].push(i);
        }
    }
    let mut points = LabelMatrix::zeros(dense_gt.height, dense_gt.width);
    for (class, support) in by_class.iter_mut().enumerate() {
        if support.is_empty() {
            continue;
        }
        support.shuffle(&mut rng);
        for &i in support.iter().take(points_per_class) {
            points.labels[i] = class as u8;
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec { height: 32, width: 32, k: 4, n_regions: 6, noise_sigma: 0.08, seed: 7 }
    }

    #[test]
    fn gen_scene_deterministic() {
        let (i1, g1) = gen_scene(&spec()).unwrap();
        let (i2, g2) = gen_scene(&spec()).unwrap();
        assert_eq!(i1, i2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn all_classes_present() {
        for seed in 0..10 {
            let mut s = spec();
            s.seed = seed;
            let (_, gt) = gen_scene(&s).unwrap();
            for class in 1..=s.k as u8 {
                assert!(gt.labels.contains(&class), "seed {seed} missing class {class}");
            }
        }
    }

    #[test]
    fn zero_noise_gives_exact_class_colors() {
        let mut s = spec();
        s.noise_sigma = 0.0;
        let (img, gt) = gen_scene(&s).unwrap();
        let first = gt.labels[0];
        let idx = gt.labels.iter().position(|&l| l == first).unwrap();
        for (i, &l) in gt.labels.iter().enumerate() {
            if l == first {
                for ch in 0..3 {
                    assert_eq!(img.data[i * 3 + ch], img.data[idx * 3 + ch]);
                }
            }
        }
    }

    #[test]
    fn small_scene_both_classes() {
        let s = SceneSpec { height: 16, width: 16, k: 2, n_regions: 2, noise_sigma: 0.0, seed: 1 };
        let (_, gt) = gen_scene(&s).unwrap();
        assert!(gt.labels.contains(&1));
        assert!(gt.labels.contains(&2));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.k = 1;
        assert!(matches!(gen_scene(&s), Err(Error::Config(_))));
        let mut s = spec();
        s.n_regions = 2;
        assert!(matches!(gen_scene(&s), Err(Error::Config(_))));
    }

    #[test]
    fn sample_points_agree_with_gt() {
        let (_, gt) = gen_scene(&spec()).unwrap();
        let pts = sample_points(&gt, 5, 3);
        assert!(pts.labeled_count() > 0);
        assert!(pts.labeled_count() <= 4 * 5);
        for (p, g) in pts.labels.iter().zip(&gt.labels) {
            if *p != 0 {
                assert_eq!(p, g);
            }
        }
    }

    #[test]
    fn sample_points_exhausts_small_classes() {
        let mut gt = LabelMatrix::zeros(4, 4);
        gt.set(0, 0, 2);
        gt.set(0, 1, 2);
        for i in 0..16 {
            if gt.labels[i] == 0 {
                gt.labels[i] = 1;
            }
        }
        let pts = sample_points(&gt, 10, 0);
        // class 2 has only 2 pixels, both sampled
        assert_eq!(pts.labels.iter().filter(|&&l| l == 2).count(), 2);
        assert_eq!(pts.labels.iter().filter(|&&l| l == 1).count(), 10);
    }

    #[test]
    fn default_spec_is_sparse() {
        let s = SceneSpec { height: 64, width: 64, k: 4, n_regions: 8, noise_sigma: 0.08, seed: 2 };
        let (_, gt) = gen_scene(&s).unwrap();
        let pts = sample_points(&gt, 5, 11);
        let fraction = pts.labeled_count() as f64 / (64.0 * 64.0);
        assert!(fraction < 0.01, "labeled fraction {fraction} not sparse");
    }
}
