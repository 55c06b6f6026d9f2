//! Raster data model, patch geometry, and one-hot encoding.
//!
//! All rasters are row-major, channel-last: `index = (r * W + c) * C + ch`.
//! Label matrices store one integer per pixel in `[0, k]`, with `0` meaning
//! unlabeled/ignored.

use crate::error::{Error, Result};

/// Dense H x W x C grid of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raster data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Raster { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Raster { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.idx(r, c, ch)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        let i = self.idx(r, c, ch);
        self.data[i] = v;
    }

    /// Checks that every pixel's channel values lie in [0,1] and sum to 1
    /// within `tol`.
    pub fn validate_probability(&self, tol: f64) -> Result<()> {
        for r in 0..self.height {
            for c in 0..self.width {
                let mut sum = 0.0;
                for ch in 0..self.channels {
                    let v = self.get(r, c, ch);
                    if !(-tol..=1.0 + tol).contains(&v) {
                        return Err(Error::Domain(format!(
                            "probability {v} out of range at ({r},{c},{ch})"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > tol {
                    return Err(Error::Domain(format!(
                        "probabilities at ({r},{c}) sum to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-pixel argmax over channels, ties broken toward the lowest channel.
    /// Returns labels in `[1, channels]`.
    pub fn argmax_labels(&self) -> LabelMatrix {
        let mut labels = vec![0u8; self.height * self.width];
        for r in 0..self.height {
            for c in 0..self.width {
                let mut best = 0usize;
                let mut best_v = self.get(r, c, 0);
                for ch in 1..self.channels {
                    let v = self.get(r, c, ch);
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                labels[r * self.width + c] = (best + 1) as u8;
            }
        }
        LabelMatrix { height: self.height, width: self.width, labels }
    }
}

/// H x W integer labels in `[0, k]`; 0 = unlabeled/ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label data length {} does not match {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        Ok(LabelMatrix { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMatrix { height, width, labels: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.labels[r * self.width + c] = v;
    }

    /// Number of labeled (nonzero) pixels.
    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn validate_classes(&self, k: usize) -> Result<()> {
        for &l in &self.labels {
            if l as usize > k {
                return Err(Error::Domain(format!("label {l} exceeds class count {k}")));
            }
        }
        Ok(())
    }

    pub fn crop(&self, spec: PatchSpec) -> Result<LabelMatrix> {
        spec.check_inside(self.height, self.width)?;
        let mut labels = Vec::with_capacity(spec.size * spec.size);
        for r in 0..spec.size {
            let row = spec.origin_row + r;
            let start = row * self.width + spec.origin_col;
            labels.extend_from_slice(&self.labels[start..start + spec.size]);
        }
        Ok(LabelMatrix { height: spec.size, width: spec.size, labels })
    }
}

/// Square window inside a parent raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin_row: usize,
    pub origin_col: usize,
    pub size: usize,
}

impl PatchSpec {
    pub fn new(origin_row: usize, origin_col: usize, size: usize) -> Self {
        PatchSpec { origin_row, origin_col, size }
    }

    fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        if self.origin_row + self.size > height || self.origin_col + self.size > width {
            return Err(Error::Geometry(format!(
                "patch ({},{}) size {} exceeds raster {}x{}",
                self.origin_row, self.origin_col, self.size, height, width
            )));
        }
        Ok(())
    }
}

/// One-hot encodes labels into a k-channel raster. Pixels with label 0 encode
/// to all-zero channel rows.
pub fn one_hot(labels: &LabelMatrix, k: usize) -> Result<Raster> {
    labels.validate_classes(k)?;
    let mut out = Raster::zeros(labels.height, labels.width, k);
    for r in 0..labels.height {
        for c in 0..labels.width {
            let l = labels.get(r, c);
            if l > 0 {
                out.set(r, c, l as usize - 1, 1.0);
            }
        }
    }
    Ok(out)
}

/// Copies the window described by `spec` out of `r`.
pub fn crop(r: &Raster, spec: PatchSpec) -> Result<Raster> {
    spec.check_inside(r.height, r.width)?;
    let ch = r.channels;
    let mut data = Vec::with_capacity(spec.size * spec.size * ch);
    for row in 0..spec.size {
        let src_row = spec.origin_row + row;
        let start = (src_row * r.width + spec.origin_col) * ch;
        data.extend_from_slice(&r.data[start..start + spec.size * ch]);
    }
    Raster::new(spec.size, spec.size, ch, data)
}

fn axis_positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut positions = Vec::new();
    let mut p = 0;
    loop {
        if p + patch >= len {
            positions.push(len - patch);
            break;
        }
        positions.push(p);
        p += stride;
    }
    positions
}

/// Tile origins covering an h x w image with square patches. The last tile in
/// each axis is clamped so its far edge touches the image border.
pub fn tile_positions(h: usize, w: usize, patch: usize, stride: usize) -> Result<Vec<PatchSpec>> {
    if patch > h || patch > w {
        return Err(Error::Geometry(format!("patch {patch} exceeds image {h}x{w}")));
    }
    if stride == 0 {
        return Err(Error::Geometry("stride must be >= 1".into()));
    }
    let rows = axis_positions(h, patch, stride);
    let cols = axis_positions(w, patch, stride);
    let mut specs = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            specs.push(PatchSpec::new(r, c, patch));
        }
    }
    Ok(specs)
}

/// Fuses overlapping probability tiles into a full-image probability raster.
/// Overlaps are averaged, then each pixel is renormalized to sum to 1.
pub fn stitch(tiles: &[(PatchSpec, Raster)], h: usize, w: usize, k: usize) -> Result<Raster> {
    let mut acc = Raster::zeros(h, w, k);
    let mut counts = vec![0u32; h * w];
    for (spec, tile) in tiles {
        if tile.height != spec.size || tile.width != spec.size || tile.channels != k {
            return Err(Error::Shape(format!(
                "tile {}x{}x{} does not match spec size {} with {k} channels",
                tile.height, tile.width, tile.channels, spec.size
            )));
        }
        spec.check_inside(h, w)?;
        for r in 0..spec.size {
            for c in 0..spec.size {
                let (gr, gc) = (spec.origin_row + r, spec.origin_col + c);
                counts[gr * w + gc] += 1;
                for ch in 0..k {
                    let i = acc.idx(gr, gc, ch);
                    acc.data[i] += tile.get(r, c, ch);
                }
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            let n = counts[r * w + c];
            if n == 0 {
                return Err(Error::Geometry(format!("pixel ({r},{c}) not covered by any tile")));
            }
            let mut sum = 0.0;
            for ch in 0..k {
                let i = acc.idx(r, c, ch);
                acc.data[i] /= n as f64;
                sum += acc.data[i];
            }
            if sum > 0.0 {
                for ch in 0..k {
                    let i = acc.idx(r, c, ch);
                    acc.data[i] /= sum;
                }
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_basic() {
        let m = LabelMatrix::new(1, 1, vec![2]).unwrap();
        let r = one_hot(&m, 3).unwrap();
        assert_eq!(r.data, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_unlabeled_is_zero_row() {
        let m = LabelMatrix::new(1, 1, vec![0]).unwrap();
        let r = one_hot(&m, 3).unwrap();
        assert_eq!(r.data, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_two_rows() {
        let m = LabelMatrix::new(2, 1, vec![1, 3]).unwrap();
        let r = one_hot(&m, 3).unwrap();
        assert_eq!(r.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let m = LabelMatrix::new(1, 1, vec![4]).unwrap();
        assert!(matches!(one_hot(&m, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn one_hot_argmax_roundtrip() {
        let m = LabelMatrix::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let r = one_hot(&m, 4).unwrap();
        assert_eq!(r.argmax_labels(), m);
    }

    fn iota_raster(h: usize, w: usize, ch: usize) -> Raster {
        let data = (0..h * w * ch).map(|i| i as f64).collect();
        Raster::new(h, w, ch, data).unwrap()
    }

    #[test]
    fn crop_identity() {
        let r = iota_raster(4, 4, 2);
        let out = crop(&r, PatchSpec::new(0, 0, 4)).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn crop_interior() {
        let r = iota_raster(4, 4, 1);
        let out = crop(&r, PatchSpec::new(1, 1, 2)).unwrap();
        assert_eq!(out.data, vec![5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn crop_composes() {
        let r = iota_raster(4, 4, 3);
        let once = crop(&r, PatchSpec::new(1, 1, 2)).unwrap();
        let twice = crop(&once, PatchSpec::new(0, 0, 2)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn crop_out_of_bounds() {
        let r = iota_raster(4, 4, 1);
        assert!(matches!(crop(&r, PatchSpec::new(3, 0, 2)), Err(Error::Geometry(_))));
    }

    #[test]
    fn tile_positions_single() {
        let specs = tile_positions(128, 128, 128, 40).unwrap();
        assert_eq!(specs, vec![PatchSpec::new(0, 0, 128)]);
    }

    #[test]
    fn tile_positions_exact_fit() {
        let specs = tile_positions(168, 168, 128, 40).unwrap();
        let origins: Vec<(usize, usize)> =
            specs.iter().map(|s| (s.origin_row, s.origin_col)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 40), (40, 0), (40, 40)]);
    }

    #[test]
    fn tile_positions_clamped() {
        let specs = tile_positions(150, 150, 128, 40).unwrap();
        let origins: Vec<(usize, usize)> =
            specs.iter().map(|s| (s.origin_row, s.origin_col)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 22), (22, 0), (22, 22)]);
    }

    #[test]
    fn tile_positions_patch_too_large() {
        assert!(matches!(tile_positions(16, 16, 32, 8), Err(Error::Geometry(_))));
    }

    #[test]
    fn stitch_single_tile_identity() {
        let tile = Raster::new(2, 2, 2, vec![0.2, 0.8, 0.6, 0.4, 0.5, 0.5, 1.0, 0.0]).unwrap();
        let out = stitch(&[(PatchSpec::new(0, 0, 2), tile.clone())], 2, 2, 2).unwrap();
        for (a, b) in out.data.iter().zip(tile.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stitch_averages_overlap() {
        let t1 = Raster::new(1, 1, 2, vec![0.2, 0.8]).unwrap();
        let t2 = Raster::new(1, 1, 2, vec![0.6, 0.4]).unwrap();
        let out = stitch(
            &[(PatchSpec::new(0, 0, 1), t1), (PatchSpec::new(0, 0, 1), t2)],
            1,
            1,
            2,
        )
        .unwrap();
        assert!((out.data[0] - 0.4).abs() < 1e-12);
        assert!((out.data[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn stitch_identical_tiles_unchanged() {
        let t = Raster::new(1, 2, 2, vec![0.3, 0.7, 0.9, 0.1]).unwrap();
        let out = stitch(
            &[(PatchSpec::new(0, 0, 1), crop(&t, PatchSpec::new(0, 0, 1)).unwrap()),
              (PatchSpec::new(0, 0, 1), crop(&t, PatchSpec::new(0, 0, 1)).unwrap()),
              (PatchSpec::new(0, 1, 1), crop(&t, PatchSpec::new(0, 1, 1)).unwrap())],
            1,
            2,
            2,
        )
        .unwrap();
        for (a, b) in out.data.iter().zip(t.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stitch_uncovered_pixel_errors() {
        let t = Raster::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let res = stitch(&[(PatchSpec::new(0, 0, 1), t)], 1, 2, 2);
        assert!(matches!(res, Err(Error::Geometry(_))));
    }
}
