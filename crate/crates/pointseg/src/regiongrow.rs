//! Seeded region growing: expands sparse point labels into an expanded label
//! matrix using the base classifier's probability map.
//!
//! An unlabeled pixel receives class `c` when its argmax probability is `c`
//! (ties toward the lowest class index), that probability is at least `tau`,
//! and it is 8-connected to a pixel already carrying label `c`. The update is
//! repeated to a fixed point; labeled pixels are never relabeled.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grid::{LabelMatrix, Raster};

/// Region-growing parameters.
#[derive(Debug, Clone, Copy)]
pub struct GrowParams {
    pub tau: f64,
}

impl GrowParams {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Domain(format!("tau must be in (0,1], got {tau}")));
        }
        Ok(GrowParams { tau })
    }
}

/// Initializes the expanded label matrix from the point annotations.
pub fn init_expanded(y: &LabelMatrix) -> LabelMatrix {
    y.clone()
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn check_geometry(e: &LabelMatrix, p_b: &Raster) -> Result<()> {
    if e.height != p_b.height || e.width != p_b.width {
        return Err(Error::Shape(format!(
            "label matrix {}x{} does not match probability raster {}x{}",
            e.height, e.width, p_b.height, p_b.width
        )));
    }
    Ok(())
}

/// For each pixel, the class it may adopt: argmax of `p_b` (ties toward the
/// lowest class) when that probability is at least `tau`, else 0.
fn admissible_classes(p_b: &Raster, tau: f64) -> Vec<u8> {
    let mut adm = vec![0u8; p_b.height * p_b.width];
    for r in 0..p_b.height {
        for c in 0..p_b.width {
            let mut best = 0usize;
            let mut best_v = p_b.get(r, c, 0);
            for ch in 1..p_b.channels {
                let v = p_b.get(r, c, ch);
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            if best_v >= tau {
                adm[r * p_b.width + c] = (best + 1) as u8;
            }
        }
    }
    adm
}

/// Grows `e` to the fixed point of the update rule using a frontier queue.
pub fn grow(e: &LabelMatrix, p_b: &Raster, g: GrowParams) -> Result<LabelMatrix> {
    check_geometry(e, p_b)?;
    let (h, w) = (e.height, e.width);
    let adm = admissible_classes(p_b, g.tau);
    let mut out = e.clone();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if out.get(r, c) != 0 {
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let label = out.get(r, c);
        for (dr, dc) in NEIGHBORS {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if out.get(nr, nc) == 0 && adm[nr * w + nc] == label {
                out.set(nr, nc, label);
                queue.push_back((nr, nc));
            }
        }
    }
    Ok(out)
}

/// Independent oracle for [`grow`]: per-class breadth-first flood from the
/// seeds of each class over that class's admissible pixel set, unioned with
/// the original seeds.
pub fn grow_oracle(y: &LabelMatrix, p_b: &Raster, g: GrowParams) -> Result<LabelMatrix> {
    check_geometry(y, p_b)?;
    let (h, w) = (y.height, y.width);
    let mut classes: Vec<u8> = y.labels.iter().copied().filter(|&l| l != 0).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = y.clone();
    for class in classes {
        // mask of pixels this class may flood into
        let mut mask = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut best = 0usize;
                let mut best_v = p_b.get(r, c, 0);
                for ch in 1..p_b.channels {
                    let v = p_b.get(r, c, ch);
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                mask[r * w + c] = (best + 1) as u8 == class && best_v >= g.tau;
            }
        }
        let mut visited = vec![false; h * w];
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if y.get(r, c) == class {
                    visited[r * w + c] = true;
                    stack.push((r, c));
                }
            }
        }
        while let Some((r, c)) = stack.pop() {
            for (dr, dc) in NEIGHBORS {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                let i = nr * w + nc;
                if !visited[i] && y.labels[i] == 0 && mask[i] {
                    visited[i] = true;
                    out.labels[i] = class;
                    stack.push((nr, nc));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Raster;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn prob_1x3(class1: [f64; 3]) -> Raster {
        // two classes; class-2 probability is the complement
        let mut data = Vec::new();
        for p in class1 {
            data.push(p);
            data.push(1.0 - p);
        }
        Raster::new(1, 3, 2, data).unwrap()
    }

    #[test]
    fn init_expanded_copies() {
        let y = LabelMatrix::new(2, 2, vec![0, 3, 0, 0]).unwrap();
        let e = init_expanded(&y);
        assert_eq!(e, y);
        assert_eq!(init_expanded(&e), e);
    }

    #[test]
    fn tau_one_sub_one_probs_no_growth() {
        let y = LabelMatrix::new(1, 3, vec![1, 0, 0]).unwrap();
        let p = prob_1x3([0.99, 0.97, 0.50]);
        let g = GrowParams::new(1.0).unwrap();
        assert_eq!(grow(&y, &p, g).unwrap(), y);
    }

    #[test]
    fn grow_1x3_hand_trace() {
        let y = LabelMatrix::new(1, 3, vec![1, 0, 0]).unwrap();
        let p = prob_1x3([0.99, 0.97, 0.50]);
        let g = GrowParams::new(0.95).unwrap();
        let e = grow(&y, &p, g).unwrap();
        assert_eq!(e.labels, vec![1, 1, 0]);
    }

    #[test]
    fn grow_floods_full_component() {
        let mut y = LabelMatrix::zeros(3, 3);
        y.set(1, 1, 2);
        let mut data = Vec::new();
        for _ in 0..9 {
            data.extend_from_slice(&[0.04, 0.96]);
        }
        let p = Raster::new(3, 3, 2, data).unwrap();
        let g = GrowParams::new(0.95).unwrap();
        let e = grow(&y, &p, g).unwrap();
        assert!(e.labels.iter().all(|&l| l == 2));
    }

    #[test]
    fn oracle_matches_hand_examples() {
        let g = GrowParams::new(0.95).unwrap();
        let y = LabelMatrix::new(1, 3, vec![1, 0, 0]).unwrap();
        let p = prob_1x3([0.99, 0.97, 0.50]);
        assert_eq!(grow_oracle(&y, &p, g).unwrap().labels, vec![1, 1, 0]);

        let y2 = LabelMatrix::zeros(3, 3);
        let p2 = Raster::new(3, 3, 2, vec![0.9, 0.1].repeat(9)).unwrap();
        assert_eq!(grow_oracle(&y2, &p2, g).unwrap(), y2);
    }

    #[test]
    fn seeds_kept_even_against_argmax() {
        // seed says class 2 but probabilities favor class 1 everywhere; the
        // seed keeps its label and the neighbor stays unlabeled because its
        // admissible class has no adjacent source
        let y = LabelMatrix::new(1, 2, vec![2, 0]).unwrap();
        let p = Raster::new(1, 2, 2, vec![0.99, 0.01, 0.99, 0.01]).unwrap();
        let g = GrowParams::new(0.95).unwrap();
        let e = grow(&y, &p, g).unwrap();
        assert_eq!(e.labels, vec![2, 0]);

        // with an explicit class-2-favoring neighbor map the seed propagates
        // its annotated class even though its own pixel disagrees with argmax
        let p2 = Raster::new(1, 2, 2, vec![0.99, 0.01, 0.01, 0.99]).unwrap();
        let e2 = grow(&y, &p2, g).unwrap();
        assert_eq!(e2.labels, vec![2, 2]);
    }

    pub(super) fn random_instance(
        rng: &mut ChaCha8Rng,
    ) -> (LabelMatrix, Raster, GrowParams) {
        let h = rng.gen_range(1..=32);
        let w = rng.gen_range(1..=32);
        let k = rng.gen_range(2..=6);
        let mut y = LabelMatrix::zeros(h, w);
        let n_seeds = rng.gen_range(0..=8);
        for _ in 0..n_seeds {
            let r = rng.gen_range(0..h);
            let c = rng.gen_range(0..w);
            y.set(r, c, rng.gen_range(1..=k) as u8);
        }
        let mut p = Raster::zeros(h, w, k);
        for r in 0..h {
            for c in 0..w {
                let mut vals: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = vals.iter().sum();
                for v in vals.iter_mut() {
                    *v /= sum;
                }
                // sometimes sharpen so the threshold is reachable
                if rng.gen_bool(0.5) {
                    let j = rng.gen_range(0..k);
                    let boost = rng.gen_range(0.5..1.0);
                    for (i, v) in vals.iter_mut().enumerate() {
                        *v = if i == j { boost } else { (1.0 - boost) / (k - 1) as f64 };
                    }
                }
                for (ch, v) in vals.iter().enumerate() {
                    p.set(r, c, ch, *v);
                }
            }
        }
        let tau = *[0.5, 0.8, 0.95].choose(rng).unwrap();
        (y, p, GrowParams::new(tau).unwrap())
    }

    #[test]
    fn grow_matches_oracle_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let (y, p, g) = random_instance(&mut rng);
            let e = init_expanded(&y);
            assert_eq!(grow(&e, &p, g).unwrap(), grow_oracle(&y, &p, g).unwrap());
        }
    }

    #[test]
    fn grow_laws_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..100 {
            let (y, p, g) = random_instance(&mut rng);
            let e = init_expanded(&y);
            let grown = grow(&e, &p, g).unwrap();
            // monotone: never relabels, only adds
            for (before, after) in e.labels.iter().zip(&grown.labels) {
                if *before != 0 {
                    assert_eq!(before, after);
                }
            }
            // idempotent
            assert_eq!(grow(&grown, &p, g).unwrap(), grown);
            // threshold monotone
            let low = GrowParams::new((g.tau - 0.3).max(0.05)).unwrap();
            let grown_low = grow(&e, &p, low).unwrap();
            for (hi, lo) in grown.labels.iter().zip(&grown_low.labels) {
                if *hi != 0 {
                    assert_eq!(hi, lo);
                }
            }
        }
    }
}
