//! Core data types: patch grids as feature-level image surrogates, regions,
//! and C-way K-shot episodes.
//!
//! A [`PatchGrid`] replaces "pixel image + frozen backbone": pooling the
//! patches of a region plays the role of extracting a feature for the cropped
//! region, so everything downstream operates on plain feature vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::real::{real, Real};
use crate::{Error, Result, EPS_NORM};

/// Dense feature vector of fixed length `d` within one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector<T> {
    values: Vec<T>,
}

impl<T: Real> FeatureVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        FeatureVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> T {
        linalg::norm(&self.values)
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// Cosine similarity between two feature vectors.
///
/// Fails with [`Error::ZeroVector`] when either norm is at or below the
/// `1e-12` guard.
pub fn cosine<T: Real>(u: &FeatureVector<T>, v: &FeatureVector<T>) -> Result<T> {
    linalg::cosine(u.values(), v.values())
}

/// Half-open patch-index rectangle `[row0,row1) x [col0,col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl RegionBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Result<Self> {
        if row0 >= row1 || col0 >= col1 {
            return Err(Error::BoxOutOfBounds {
                row0,
                col0,
                row1,
                col1,
                rows: row1,
                cols: col1,
            });
        }
        Ok(RegionBox {
            row0,
            col0,
            row1,
            col1,
        })
    }

    /// The box covering a whole `rows x cols` grid.
    pub fn full(rows: usize, cols: usize) -> Self {
        RegionBox {
            row0: 0,
            col0: 0,
            row1: rows,
            col1: cols,
        }
    }

    pub fn rows(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn cols(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    fn check_within(&self, rows: usize, cols: usize) -> Result<()> {
        if self.row1 > rows || self.col1 > cols || self.row0 >= self.row1 || self.col0 >= self.col1
        {
            return Err(Error::BoxOutOfBounds {
                row0: self.row0,
                col0: self.col0,
                row1: self.row1,
                col1: self.col1,
                rows,
                cols,
            });
        }
        Ok(())
    }
}

/// One sample: an `H x W` grid of `d`-dimensional patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    sample_id: u64,
    rows: usize,
    cols: usize,
    dim: usize,
    /// `rows * cols * dim`, patch-major.
    data: Vec<T>,
}

impl<T: Real> PatchGrid<T> {
    pub fn new(sample_id: u64, rows: usize, cols: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::ConfigInvalid(format!(
                "grid dims must be positive, got {rows}x{cols}x{dim}"
            )));
        }
        if data.len() != rows * cols * dim {
            return Err(Error::DimensionMismatch {
                left: data.len(),
                right: rows * cols * dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "non-finite patch entry in sample {sample_id}"
            )));
        }
        Ok(PatchGrid {
            sample_id,
            rows,
            cols,
            dim,
            data,
        })
    }

    /// Builds a grid from per-patch rows, validating a consistent `d`.
    pub fn from_patches(sample_id: u64, patches: Vec<Vec<FeatureVector<T>>>) -> Result<Self> {
        let rows = patches.len();
        let cols = patches.first().map_or(0, |r| r.len());
        let dim = patches
            .first()
            .and_then(|r| r.first())
            .map_or(0, |p| p.dim());
        let mut data = Vec::with_capacity(rows * cols * dim);
        for row in &patches {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    left: row.len(),
                    right: cols,
                });
            }
            for p in row {
                if p.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        left: p.dim(),
                        right: dim,
                    });
                }
                data.extend_from_slice(p.values());
            }
        }
        PatchGrid::new(sample_id, rows, cols, dim, data)
    }

    pub fn sample_id(&self) -> u64 {
        self.sample_id
    }

    pub fn with_sample_id(mut self, sample_id: u64) -> Self {
        self.sample_id = sample_id;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub(crate) fn patch_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.cols + col) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Scales every patch entry; used by scale-invariance checks.
    pub fn scaled(&self, factor: T) -> Self {
        let mut g = self.clone();
        linalg::scale(&mut g.data, factor);
        g
    }
}

/// Mean of the patch vectors inside `bbox`; the feature of a cropped region.
pub fn pool_region<T: Real>(grid: &PatchGrid<T>, bbox: &RegionBox) -> Result<FeatureVector<T>> {
    bbox.check_within(grid.rows, grid.cols)?;
    let mut acc = vec![T::zero(); grid.dim];
    for r in bbox.row0..bbox.row1 {
        for c in bbox.col0..bbox.col1 {
            linalg::axpy(&mut acc, T::one(), grid.patch(r, c));
        }
    }
    let inv = T::one() / real::<T>(bbox.area() as f64);
    linalg::scale(&mut acc, inv);
    Ok(FeatureVector::new(acc))
}

/// Whole-sample feature: the full-grid pooled mean.
pub fn image_feature<T: Real>(grid: &PatchGrid<T>) -> FeatureVector<T> {
    pool_region(grid, &RegionBox::full(grid.rows, grid.cols))
        .expect("full box is always in bounds")
}

/// Crops `k` square `side x side` regions at offsets drawn uniformly from the
/// supplied RNG, and pools each one.
pub fn crop_random_regions<T: Real, R: Rng>(
    grid: &PatchGrid<T>,
    k: usize,
    side: usize,
    rng: &mut R,
) -> Result<Vec<(RegionBox, FeatureVector<T>)>> {
    let limit = grid.rows.min(grid.cols);
    if side == 0 || side > limit {
        return Err(Error::SideTooLarge { side, limit });
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let row0 = rng.random_range(0..=grid.rows - side);
        let col0 = rng.random_range(0..=grid.cols - side);
        let bbox = RegionBox {
            row0,
            col0,
            row1: row0 + side,
            col1: col0 + side,
        };
        let feature = pool_region(grid, &bbox)?;
        out.push((bbox, feature));
    }
    Ok(out)
}

/// Ground-truth pollution tag, filled by the generator and read only by
/// evaluation code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTag {
    Clean,
    Id,
    Ood,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSample<T> {
    pub grid: PatchGrid<T>,
    /// 1-based class label in `1..=C`.
    pub label: usize,
    pub noise: NoiseTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySample<T> {
    pub grid: PatchGrid<T>,
    /// `None` marks an out-of-distribution query (serialized as label 0).
    pub label: Option<usize>,
    pub noise: NoiseTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub ood_ratio: f64,
    pub clutter_ratio: f64,
}

/// One C-way K-shot task: labeled support set plus query set.
///
/// The noise tags are ground truth for evaluation; adaptation code never
/// reads them (checked by test: flipping every tag leaves the adapted head
/// bit-identical).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    pub class_count: usize,
    pub shots: usize,
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub support: Vec<SupportSample<T>>,
    pub query: Vec<QuerySample<T>>,
    pub meta: EpisodeMeta,
}

impl<T: Real> Episode<T> {
    /// Validates the episode invariants; used by the constructor paths in
    /// `gen` and `io`.
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.shots == 0 {
            return Err(Error::ConfigInvalid(
                "class count and shots must be positive".into(),
            ));
        }
        for s in &self.support {
            if s.label == 0 || s.label > self.class_count {
                return Err(Error::Schema(format!(
                    "support label {} outside 1..={}",
                    s.label, self.class_count
                )));
            }
            self.check_grid(&s.grid)?;
        }
        for q in &self.query {
            if let Some(label) = q.label {
                if label == 0 || label > self.class_count {
                    return Err(Error::Schema(format!(
                        "query label {} outside 1..={}",
                        label, self.class_count
                    )));
                }
            }
            self.check_grid(&q.grid)?;
        }
        Ok(())
    }

    fn check_grid(&self, grid: &PatchGrid<T>) -> Result<()> {
        if grid.rows != self.rows || grid.cols != self.cols || grid.dim != self.dim {
            return Err(Error::Schema(format!(
                "sample {} is {}x{}x{}, episode is {}x{}x{}",
                grid.sample_id, grid.rows, grid.cols, grid.dim, self.rows, self.cols, self.dim
            )));
        }
        Ok(())
    }

    /// Support samples of one class, in support order.
    pub fn support_of_class(&self, label: usize) -> impl Iterator<Item = &SupportSample<T>> {
        self.support.iter().filter(move |s| s.label == label)
    }

    /// Returns a copy with every patch entry multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        let mut e = self.clone();
        for s in &mut e.support {
            s.grid = s.grid.scaled(factor);
        }
        for q in &mut e.query {
            q.grid = q.grid.scaled(factor);
        }
        e
    }
}

/// Region side used when a config leaves it unset: `ceil(min(H, W) / 2)`,
/// mirroring the best-performing crop-to-image ratio.
pub fn default_region_side(rows: usize, cols: usize) -> usize {
    rows.min(cols).div_ceil(2)
}

#[allow(unused_imports)]
pub(crate) use crate::linalg::cosine as cosine_slices;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f64]) -> FeatureVector<f64> {
        FeatureVector::new(v.to_vec())
    }

    #[test]
    fn cosine_identity_orthogonal_and_diagonal() {
        assert_relative_eq!(cosine(&fv(&[1.0, 0.0]), &fv(&[1.0, 0.0])).unwrap(), 1.0);
        assert_relative_eq!(cosine(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap(), 0.0);
        // (1,1) vs (1,0): 1/sqrt(2)
        assert_relative_eq!(
            cosine(&fv(&[1.0, 1.0]), &fv(&[1.0, 0.0])).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-9
        );
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let z = fv(&[0.0, 0.0]);
        assert!(matches!(
            cosine(&z, &fv(&[1.0, 0.0])),
            Err(Error::ZeroVector(_))
        ));
        let tiny = fv(&[1e-13, 0.0]);
        assert!(cosine(&tiny, &fv(&[1.0, 0.0])).is_err());
    }

    /// 2x2 grid with d=1 patches 0,2,4,6 in row-major order.
    fn ramp_grid() -> PatchGrid<f64> {
        PatchGrid::new(0, 2, 2, 1, vec![0.0, 2.0, 4.0, 6.0]).unwrap()
    }

    #[test]
    fn pool_region_singleton_and_mean() {
        let g = ramp_grid();
        let single = pool_region(&g, &RegionBox::new(1, 1, 2, 2).unwrap()).unwrap();
        assert_eq!(single.values(), &[6.0]);
        let all = pool_region(&g, &RegionBox::full(2, 2)).unwrap();
        assert_eq!(all.values(), &[3.0]);
    }

    #[test]
    fn pool_region_constant_field_returns_the_patch() {
        let g = PatchGrid::new(1, 3, 3, 2, vec![0.5; 3 * 3 * 2]).unwrap();
        let f = pool_region(&g, &RegionBox::new(0, 1, 2, 3).unwrap()).unwrap();
        assert_eq!(f.values(), &[0.5, 0.5]);
    }

    #[test]
    fn pool_region_rejects_out_of_bounds() {
        let g = ramp_grid();
        let bad = RegionBox {
            row0: 0,
            col0: 0,
            row1: 3,
            col1: 1,
        };
        assert!(matches!(
            pool_region(&g, &bad),
            Err(Error::BoxOutOfBounds { .. })
        ));
    }

    #[test]
    fn image_feature_matches_full_box_and_mean() {
        let g = ramp_grid();
        assert_eq!(
            image_feature(&g),
            pool_region(&g, &RegionBox::full(2, 2)).unwrap()
        );
        let two = PatchGrid::new(2, 2, 1, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(image_feature(&two).values(), &[2.0]);
    }

    #[test]
    fn crop_regions_count_bounds_and_determinism() {
        let g = PatchGrid::new(3, 8, 8, 2, vec![1.0; 8 * 8 * 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let crops = crop_random_regions(&g, 4, 3, &mut rng).unwrap();
        assert_eq!(crops.len(), 4);
        for (b, _) in &crops {
            assert_eq!(b.rows(), 3);
            assert_eq!(b.cols(), 3);
            assert!(b.row1 <= 8 && b.col1 <= 8);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let crops2 = crop_random_regions(&g, 4, 3, &mut rng2).unwrap();
        assert_eq!(
            crops.iter().map(|(b, _)| *b).collect::<Vec<_>>(),
            crops2.iter().map(|(b, _)| *b).collect::<Vec<_>>()
        );
    }

    #[test]
    fn crop_full_side_square_grid_gives_full_box() {
        let g = PatchGrid::new(4, 5, 5, 1, vec![0.0; 25]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crops = crop_random_regions(&g, 3, 5, &mut rng).unwrap();
        for (b, _) in &crops {
            assert_eq!(*b, RegionBox::full(5, 5));
        }
        assert!(matches!(
            crop_random_regions(&g, 1, 6, &mut rng),
            Err(Error::SideTooLarge { .. })
        ));
    }

    #[test]
    fn default_region_side_is_half_rounded_up() {
        assert_eq!(default_region_side(8, 8), 4);
        assert_eq!(default_region_side(7, 9), 4);
        assert_eq!(default_region_side(1, 1), 1);
    }

    proptest! {
        /// Pooling a box equals the area-weighted mix of pooled disjoint
        /// sub-boxes covering it.
        #[test]
        fn pooling_is_linear_over_splits(
            rows in 2usize..6, cols in 2usize..6, dim in 1usize..4,
            seed in 0u64..1000, split in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let g = PatchGrid::new(0, rows, cols, dim, data).unwrap();
            let split = split.min(rows - 1);
            let top = RegionBox::new(0, 0, split, cols).unwrap();
            let bottom = RegionBox::new(split, 0, rows, cols).unwrap();
            let whole = pool_region(&g, &RegionBox::full(rows, cols)).unwrap();
            let pt = pool_region(&g, &top).unwrap();
            let pb = pool_region(&g, &bottom).unwrap();
            let (wt, wb) = (top.area() as f64, bottom.area() as f64);
            for i in 0..dim {
                let mixed = (wt * pt.values()[i] + wb * pb.values()[i]) / (wt + wb);
                prop_assert!((mixed - whole.values()[i]).abs() < 1e-12);
            }
        }

        /// Cosine is invariant under positive scaling of either argument.
        #[test]
        fn cosine_scale_invariance(
            a in proptest::collection::vec(-5.0f64..5.0, 2..6),
            c1 in 0.01f64..100.0, c2 in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
            let b: Vec<f64> = a.iter().rev().map(|x| x + 0.25).collect();
            prop_assume!(b.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
            let base = cosine(&fv(&a), &fv(&b)).unwrap();
            let scaled = cosine(
                &fv(&a.iter().map(|x| x * c1).collect::<Vec<_>>()),
                &fv(&b.iter().map(|x| x * c2).collect::<Vec<_>>()),
            )
            .unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
