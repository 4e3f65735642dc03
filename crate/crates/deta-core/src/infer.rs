//! Noise-robust inference heads: a nearest-centroid classifier over the
//! memory bank's clean region embeddings ("local" NCC), the plain image-level
//! NCC baseline, and maximum-softmax OOD scoring.

use std::collections::BTreeMap;

use crate::adapt::{head_forward, HeadParams};
use crate::cora::MemoryBank;
use crate::episode::{image_feature, pool_region, Episode, FeatureVector, PatchGrid};
use crate::linalg;
use crate::real::{real, Real};
use crate::{Error, Result, EPS_NORM};

/// Per-class mean embedding of the memory bank's clean regions. Centroids
/// are plain means of unit embeddings, not re-normalized; cosine absorbs the
/// scale.
#[derive(Clone, Debug)]
pub struct LocalCentroids<T> {
    /// `centroids[c-1]` belongs to class `c`.
    pub centroids: Vec<Vec<T>>,
}

/// Re-pools every stored `(sample_id, box)` from its support grid, embeds it,
/// and averages per class.
pub fn local_centroids<T: Real>(
    params: &HeadParams<T>,
    bank: &MemoryBank<T>,
    episode: &Episode<T>,
) -> Result<LocalCentroids<T>> {
    let grids: BTreeMap<u64, &PatchGrid<T>> = episode
        .support
        .iter()
        .map(|s| (s.grid.sample_id(), &s.grid))
        .collect();
    let mut centroids = Vec::with_capacity(episode.class_count);
    for class in 1..=episode.class_count {
        let entries = bank.entries(class);
        if entries.is_empty() {
            return Err(Error::EmptyBankClass(class));
        }
        let mut acc = vec![T::zero(); params.embed_dim];
        for entry in entries {
            let grid = grids
                .get(&entry.sample_id)
                .ok_or(Error::MissingPrevState(entry.sample_id))?;
            let feature = pool_region(grid, &entry.bbox)?;
            let embedding = head_forward(params, &feature)?;
            linalg::axpy(&mut acc, T::one(), embedding.values());
        }
        linalg::scale(&mut acc, T::one() / real::<T>(entries.len() as f64));
        centroids.push(acc);
    }
    Ok(LocalCentroids { centroids })
}

/// Argmax of cosine similarity to the given centroids; ties resolve to the
/// lowest class index.
pub fn predict_with_centroids<T: Real>(
    params: &HeadParams<T>,
    centroids: &[Vec<T>],
    query: &PatchGrid<T>,
) -> Result<usize> {
    let scores = centroid_cosines(params, centroids, query)?;
    let mut best = 0usize;
    for (c, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = c;
        }
    }
    Ok(best + 1)
}

/// Cosines between the embedded query and each centroid.
pub fn centroid_cosines<T: Real>(
    params: &HeadParams<T>,
    centroids: &[Vec<T>],
    query: &PatchGrid<T>,
) -> Result<Vec<T>> {
    let embedding = head_forward(params, &image_feature(query))?;
    let eps = real::<T>(EPS_NORM);
    centroids
        .iter()
        .map(|c| {
            let n = linalg::norm(c);
            if n <= eps {
                return Err(Error::DegeneratePrototype(0));
            }
            // Query embedding is unit norm.
            Ok(linalg::dot(embedding.values(), c) / n)
        })
        .collect()
}

/// Classifies a query against the memory bank's per-class clean-region
/// centroids.
pub fn local_ncc_predict<T: Real>(
    params: &HeadParams<T>,
    bank: &MemoryBank<T>,
    episode: &Episode<T>,
    query: &PatchGrid<T>,
) -> Result<usize> {
    let lc = local_centroids(params, bank, episode)?;
    predict_with_centroids(params, &lc.centroids, query)
}

/// Unit embeddings of the support images, paired with their labels. This is
/// what the plain NCC baseline consumes.
pub fn support_image_embeddings<T: Real>(
    params: &HeadParams<T>,
    episode: &Episode<T>,
) -> Result<Vec<(usize, FeatureVector<T>)>> {
    episode
        .support
        .iter()
        .map(|s| Ok((s.label, head_forward(params, &image_feature(&s.grid))?)))
        .collect()
}

/// Image-level nearest centroid classifier: per-class mean of the support
/// image embeddings, argmax cosine, lowest index on ties.
pub fn ncc_predict<T: Real>(
    params: &HeadParams<T>,
    support: &[(usize, FeatureVector<T>)],
    query: &PatchGrid<T>,
) -> Result<usize> {
    let class_count = support.iter().map(|(l, _)| *l).max().unwrap_or(0);
    if class_count == 0 {
        return Err(Error::EmptyList);
    }
    let dim = support[0].1.dim();
    let mut centroids = vec![vec![T::zero(); dim]; class_count];
    let mut counts = vec![0usize; class_count];
    for (label, e) in support {
        linalg::axpy(&mut centroids[label - 1], T::one(), e.values());
        counts[label - 1] += 1;
    }
    for (c, count) in centroids.iter_mut().zip(&counts) {
        if *count == 0 {
            return Err(Error::EmptyList);
        }
        linalg::scale(c, T::one() / real::<T>(*count as f64));
    }
    predict_with_centroids(params, &centroids, query)
}

/// Maximum temperature-scaled softmax over the cosine scores: the kernel of
/// the OOD score.
pub fn mcm_from_cosines<T: Real>(cosines: &[T], tau: T) -> T {
    let scaled: Vec<T> = cosines.iter().map(|&c| c / tau).collect();
    linalg::softmax(&scaled)
        .into_iter()
        .fold(T::neg_infinity(), |m, p| if p > m { p } else { m })
}

/// MCM-style ID-ness score of a query against class centroids (bank
/// centroids or prototypes): in `(1/C, 1]`, higher is more ID-like.
/// Centroids must be nonzero; `tau > 0`.
pub fn mcm_score<T: Real>(
    params: &HeadParams<T>,
    centroids: &[Vec<T>],
    query: &PatchGrid<T>,
    tau: T,
) -> Result<T> {
    let cosines = centroid_cosines(params, centroids, query)?;
    Ok(mcm_from_cosines(&cosines, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{adapt_task, AdaptConfig};
    use crate::gen::{generate_episode, GenConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn separable_episode(seed: u64) -> Episode<f64> {
        generate_episode(&GenConfig {
            c: 3,
            k: 4,
            queries_per_class: 5,
            d: 8,
            h: 4,
            w: 4,
            n_ood_classes: 2,
            cluster_sep: 6.0,
            patch_noise_sd: 0.2,
            clutter_ratio: 0.0,
            ood_ratio: 0.0,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_class_always_predicts_it() {
        let mut e = separable_episode(1);
        e.class_count = 1;
        e.support.retain(|s| s.label == 1);
        e.query.retain(|q| q.label == Some(1));
        let cfg = AdaptConfig {
            max_iterations: 2,
            embed_dim: 8,
            seed: 2,
            ..AdaptConfig::default()
        };
        // CoRA needs two classes, so build the bank by hand from full boxes.
        let params = HeadParams::init_seeded(8, 8, 8, 3);
        let mut bank = MemoryBank::new(2 * e.shots);
        bank.update(e.support.iter().map(|s| {
            (
                s.label,
                crate::cora::BankEntry {
                    sample_id: s.grid.sample_id(),
                    bbox: crate::episode::RegionBox::full(4, 4),
                    weight: 1.0,
                },
            )
        }));
        let _ = cfg;
        for q in &e.query {
            assert_eq!(local_ncc_predict(&params, &bank, &e, &q.grid).unwrap(), 1);
        }
    }

    #[test]
    fn query_matching_a_centroid_wins() {
        let params = HeadParams::init_seeded(8, 8, 8, 5);
        let e = separable_episode(7);
        // Centroid 2 equals the embedded query; others orthogonalized away.
        let q = &e.query[0].grid;
        let eq = head_forward(&params, &image_feature(q)).unwrap();
        let mut other1 = vec![0.0; 8];
        let mut other2 = vec![0.0; 8];
        // Build vectors orthogonal to eq by Gram-Schmidt on basis vectors.
        other1[0] = 1.0;
        other2[1] = 1.0;
        let proj = |v: &mut Vec<f64>, e: &[f64]| {
            let d: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            for (x, ei) in v.iter_mut().zip(e) {
                *x -= d * ei;
            }
        };
        proj(&mut other1, eq.values());
        proj(&mut other2, eq.values());
        let centroids = vec![other1, eq.values().to_vec(), other2];
        assert_eq!(predict_with_centroids(&params, &centroids, q).unwrap(), 2);
    }

    #[test]
    fn empty_bank_class_is_an_error() {
        let e = separable_episode(9);
        let params = HeadParams::init_seeded(8, 8, 8, 3);
        let mut bank = MemoryBank::new(4);
        bank.update([(
            1usize,
            crate::cora::BankEntry {
                sample_id: e.support[0].grid.sample_id(),
                bbox: crate::episode::RegionBox::full(4, 4),
                weight: 1.0,
            },
        )]);
        assert!(matches!(
            local_ncc_predict(&params, &bank, &e, &e.query[0].grid),
            Err(Error::EmptyBankClass(2))
        ));
    }

    #[test]
    fn ncc_single_support_per_class_recovers_it() {
        let e = separable_episode(11);
        let params = HeadParams::init_seeded(8, 8, 8, 4);
        let mut support = support_image_embeddings(&params, &e).unwrap();
        // Keep one support per class.
        let mut seen = std::collections::BTreeSet::new();
        support.retain(|(l, _)| seen.insert(*l));
        // Query = one of the support grids itself.
        let s0 = &e.support[0];
        assert_eq!(ncc_predict(&params, &support, &s0.grid).unwrap(), s0.label);
    }

    #[test]
    fn tie_breaks_to_lowest_class_index() {
        let params = HeadParams::init_seeded(8, 8, 8, 6);
        let e = separable_episode(13);
        let q = &e.query[0].grid;
        let eq = head_forward(&params, &image_feature(q)).unwrap();
        // Two identical centroids: exact tie, class 1 must win.
        let centroids = vec![eq.values().to_vec(), eq.values().to_vec()];
        assert_eq!(predict_with_centroids(&params, &centroids, q).unwrap(), 1);
    }

    #[test]
    fn local_and_global_ncc_agree_on_clean_separable_episodes() {
        let e = separable_episode(17);
        let cfg = AdaptConfig {
            max_iterations: 10,
            embed_dim: 16,
            seed: 23,
            ..AdaptConfig::default()
        };
        let out = adapt_task(&e, &cfg).unwrap();
        let support = support_image_embeddings(&out.head, &e).unwrap();
        let lc = local_centroids(&out.head, &out.bank, &e).unwrap();
        let mut agree = 0usize;
        for q in &e.query {
            let a = predict_with_centroids(&out.head, &lc.centroids, &q.grid).unwrap();
            let b = ncc_predict(&out.head, &support, &q.grid).unwrap();
            if a == b {
                agree += 1;
            }
        }
        assert!(
            agree as f64 >= 0.95 * e.query.len() as f64,
            "only {agree}/{} agree",
            e.query.len()
        );
    }

    #[test]
    fn prediction_is_invariant_to_support_order() {
        let e = separable_episode(19);
        let params = HeadParams::init_seeded(8, 8, 8, 8);
        let mut support = support_image_embeddings(&params, &e).unwrap();
        let q = &e.query[3].grid;
        let base = ncc_predict(&params, &support, q).unwrap();
        support.reverse();
        assert_eq!(ncc_predict(&params, &support, q).unwrap(), base);
    }

    #[test]
    fn mcm_equal_cosines_hits_the_floor() {
        let s = mcm_from_cosines(&[0.4f64, 0.4, 0.4, 0.4], 1.0);
        assert_relative_eq!(s, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn mcm_sharpens_toward_one_as_tau_vanishes() {
        let s = mcm_from_cosines(&[0.9f64, 0.1], 1e-3);
        assert!(s > 0.9999);
        // tau = 1 hand value: e^0.9 / (e^0.9 + e^0.1)
        let s1 = mcm_from_cosines(&[0.9f64, 0.1], 1.0);
        let expect = 0.9f64.exp() / (0.9f64.exp() + 0.1f64.exp());
        assert_relative_eq!(s1, expect, epsilon = 1e-9);
        assert!((expect - 0.6900).abs() < 5e-5);
    }

    proptest! {
        /// Adding a constant to every cosine does not move the MCM score.
        #[test]
        fn mcm_shift_invariance(
            cos in proptest::collection::vec(-1.0f64..1.0, 2..6),
            shift in -0.5f64..0.5,
            tau in 0.05f64..4.0,
        ) {
            let base = mcm_from_cosines(&cos, tau);
            let shifted: Vec<f64> = cos.iter().map(|c| c + shift).collect();
            let moved = mcm_from_cosines(&shifted, tau);
            prop_assert!((base - moved).abs() < 1e-9);
        }
    }
}
