//! Pixel-centered patch extraction with reflect padding.

use crate::data::ReducedCube;
use crate::error::{Error, Result};
use crate::Real;

/// One B×B×d patch per labeled pixel, in row-major pixel order.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patch_size: usize,
    pub dim: usize,
    pub patches: Vec<Vec<Real>>,
    /// Center-pixel class ids, all >= 1.
    pub center_labels: Vec<u16>,
    pub center_coords: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Mirror an out-of-range coordinate without duplicating the edge sample
/// (index -1 maps to 1, index n maps to n-2).
pub fn reflect_index(t: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut t = t.rem_euclid(period);
    if t >= n {
        t = period - t;
    }
    t as usize
}

/// Extract the patch centered on (row, col); borders reflect.
pub fn extract_patch(reduced: &ReducedCube, row: usize, col: usize, b: usize) -> Vec<Real> {
    let half = (b / 2) as isize;
    let d = reduced.dim;
    let mut out = vec![0.0 as Real; b * b * d];
    for pr in 0..b {
        let sr = reflect_index(row as isize + pr as isize - half, reduced.height);
        for pc in 0..b {
            let sc = reflect_index(col as isize + pc as isize - half, reduced.width);
            let src = reduced.pixel(sr, sc);
            let dst = &mut out[(pr * b + pc) * d..(pr * b + pc + 1) * d];
            dst.copy_from_slice(src);
        }
    }
    out
}

/// One patch per labeled pixel (label > 0), centered on it, with the
/// center pixel's label. B must be odd.
pub fn extract_patches(reduced: &ReducedCube, labels: &[u16], b: usize) -> Result<PatchSet> {
    if b % 2 == 0 {
        return Err(Error::invalid(format!("patch size {b} must be odd")));
    }
    if labels.len() != reduced.height * reduced.width {
        return Err(Error::shape(
            "extract_patches",
            format!("{} labels", reduced.height * reduced.width),
            format!("{}", labels.len()),
        ));
    }
    let mut patches = Vec::new();
    let mut center_labels = Vec::new();
    let mut center_coords = Vec::new();
    for row in 0..reduced.height {
        for col in 0..reduced.width {
            let label = labels[row * reduced.width + col];
            if label == 0 {
                continue;
            }
            patches.push(extract_patch(reduced, row, col, b));
            center_labels.push(label);
            center_coords.push((row, col));
        }
    }
    if patches.is_empty() {
        return Err(Error::invalid("extract_patches: no labeled pixels"));
    }
    Ok(PatchSet {
        patch_size: b,
        dim: reduced.dim,
        patches,
        center_labels,
        center_coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reduced(h: usize, w: usize, d: usize, seed: u64) -> ReducedCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ReducedCube {
            height: h,
            width: w,
            dim: d,
            scores: (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            basis: vec![],
            mean: vec![],
            explained: vec![],
            rank_deficient: false,
        }
    }

    #[test]
    fn interior_patch_is_the_literal_neighborhood() {
        let r = reduced(7, 7, 2, 1);
        let patch = extract_patch(&r, 3, 3, 3);
        for pr in 0..3 {
            for pc in 0..3 {
                let src = r.pixel(2 + pr, 2 + pc);
                assert_eq!(&patch[(pr * 3 + pc) * 2..(pr * 3 + pc + 1) * 2], src);
            }
        }
    }

    #[test]
    fn corner_reflection_mirrors_without_edge_duplication() {
        // 3x3 image, patch at (0,0) with B=3: out-of-range index -1 must
        // read row/col 1.
        let r = reduced(3, 3, 1, 2);
        let at = |row: usize, col: usize| r.pixel(row, col)[0];
        let patch = extract_patch(&r, 0, 0, 3);
        let expected = [
            at(1, 1), at(1, 0), at(1, 1),
            at(0, 1), at(0, 0), at(0, 1),
            at(1, 1), at(1, 0), at(1, 1),
        ];
        assert_eq!(patch, expected);
    }

    #[test]
    fn reflect_index_hand_cases() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(2, 5), 2);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn one_patch_per_labeled_pixel() {
        let r = reduced(4, 5, 3, 3);
        let mut labels = vec![0u16; 20];
        labels[3] = 1;
        labels[7] = 2;
        labels[19] = 1;
        let set = extract_patches(&r, &labels, 3).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.center_labels, vec![1, 2, 1]);
        assert_eq!(set.center_coords, vec![(0, 3), (1, 2), (3, 4)]);
    }

    #[test]
    fn even_patch_size_is_rejected() {
        let r = reduced(4, 4, 1, 4);
        let labels = vec![1u16; 16];
        assert!(extract_patches(&r, &labels, 4).is_err());
    }

    #[test]
    fn all_unlabeled_is_rejected() {
        let r = reduced(4, 4, 1, 5);
        let labels = vec![0u16; 16];
        assert!(extract_patches(&r, &labels, 3).is_err());
    }

    #[test]
    fn unpadding_interior_patch_recovers_raw_values() {
        let r = reduced(9, 9, 2, 6);
        let b = 5;
        let patch = extract_patch(&r, 4, 4, b);
        for pr in 0..b {
            for pc in 0..b {
                let src = r.pixel(4 + pr - 2, 4 + pc - 2);
                assert_eq!(&patch[(pr * b + pc) * 2..(pr * b + pc + 1) * 2], src);
            }
        }
    }
}
