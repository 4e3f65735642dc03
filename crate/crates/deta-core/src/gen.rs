//! Synthetic episode generator with controllable ID clutter and OOD-sample
//! noise.
//!
//! Each in-task class is a Gaussian patch cluster around an "object" mean;
//! the object means sit at exactly `cluster_sep` pairwise distance. ID
//! clutter replaces a fraction of each sample's patches with draws from a
//! background cluster shared across classes. OOD noise replaces support
//! samples with draws from extra class clusters that never appear among the
//! task labels, keeping the (now wrong) support label.

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episode::{
    Episode, EpisodeMeta, NoiseTag, PatchGrid, QuerySample, SupportSample,
};
use crate::real::{real, Real};
use crate::{Error, Result};

/// Episode generator parameters. The JSON config file mirrors these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub queries_per_class: usize,
    pub d: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    /// How many unseen classes back the OOD pool.
    pub n_ood_classes: usize,
    /// Pairwise distance between ID object means.
    pub cluster_sep: f64,
    pub patch_noise_sd: f64,
    /// Fraction of patches per ID sample drawn from the background cluster.
    pub clutter_ratio: f64,
    /// Fraction of support shots per class replaced by OOD samples.
    pub ood_ratio: f64,
    /// Fraction of queries per class replaced by OOD queries.
    pub query_ood_ratio: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let patch_noise_sd = 0.5;
        GenConfig {
            c: 5,
            k: 10,
            queries_per_class: 10,
            d: 16,
            h: 8,
            w: 8,
            n_ood_classes: 5,
            // 4x the patch noise: the clean task is easy, so measured
            // degradation is attributable to the injected noise.
            cluster_sep: 4.0 * patch_noise_sd,
            patch_noise_sd,
            clutter_ratio: 0.3,
            ood_ratio: 0.3,
            query_ood_ratio: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.c < 2 {
            return fail(format!("C must be at least 2, got {}", self.c));
        }
        if self.k == 0 {
            return fail("K must be positive".into());
        }
        if self.d == 0 || self.h == 0 || self.w == 0 {
            return fail(format!(
                "dims must be positive, got d={} H={} W={}",
                self.d, self.h, self.w
            ));
        }
        if self.d < self.c + 1 {
            return fail(format!(
                "d={} too small: need d >= C+1 = {} for separated object and background means",
                self.d,
                self.c + 1
            ));
        }
        if !(0.0..=1.0).contains(&self.clutter_ratio) {
            return fail(format!("clutter_ratio {} outside [0,1]", self.clutter_ratio));
        }
        if !(0.0..1.0).contains(&self.ood_ratio) {
            return fail(format!("ood_ratio {} outside [0,1)", self.ood_ratio));
        }
        if !(0.0..1.0).contains(&self.query_ood_ratio) {
            return fail(format!(
                "query_ood_ratio {} outside [0,1)",
                self.query_ood_ratio
            ));
        }
        if self.cluster_sep < 0.0 || self.patch_noise_sd < 0.0 {
            return fail("cluster_sep and patch_noise_sd must be nonnegative".into());
        }
        let needs_pool = self.ood_ratio > 0.0 || self.query_ood_ratio > 0.0;
        if needs_pool && self.n_ood_classes == 0 {
            return fail("OOD noise requested but n_ood_classes is 0".into());
        }
        Ok(())
    }
}

/// Floor with a one-part-per-billion guard so that ratios like 0.3 * 10
/// land on the intended integer.
pub(crate) fn floor_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64) + 1e-9).floor() as usize
}

/// Generator ground truth that is not part of the episode itself.
#[derive(Clone, Debug)]
pub struct GenTruth {
    /// Per support sample: `H*W` flags, `true` where the patch was drawn from
    /// the background cluster. All-false for OOD replacements.
    pub support_clutter: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct GeneratedEpisode<T> {
    pub episode: Episode<T>,
    pub truth: GenTruth,
}

struct Means {
    /// Index 0..C-1: ID object means; index C: background.
    id_and_bg: Vec<Vec<f64>>,
    ood: Vec<Vec<f64>>,
}

fn build_means(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Means> {
    // Orthogonal basis directions at radius sep/sqrt(2) give exact pairwise
    // distance cluster_sep.
    let radius = cfg.cluster_sep / std::f64::consts::SQRT_2;
    let mut id_and_bg = Vec::with_capacity(cfg.c + 1);
    for axis in 0..=cfg.c {
        let mut m = vec![0.0; cfg.d];
        m[axis] = radius;
        id_and_bg.push(m);
    }
    // OOD means are random directions at the same radius, kept away from
    // every ID mean. Correlation with the ID subspace is intentional: that is
    // what lets a mislabeled OOD sample pull a centroid toward another class.
    let min_dist = 0.5 * cfg.cluster_sep;
    let mut ood: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_ood_classes);
    for _ in 0..cfg.n_ood_classes {
        let mut accepted = None;
        for _ in 0..10_000 {
            let mut v: Vec<f64> = (0..cfg.d)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-9 {
                continue;
            }
            for x in v.iter_mut() {
                *x *= radius / n;
            }
            let far_enough = id_and_bg[..cfg.c]
                .iter()
                .chain(ood.iter())
                .all(|m| dist(m, &v) >= min_dist);
            if far_enough {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => ood.push(v),
            None => {
                return Err(Error::ConfigInvalid(
                    "could not place OOD means away from ID means; \
                     raise d or lower n_ood_classes"
                        .into(),
                ))
            }
        }
    }
    Ok(Means { id_and_bg, ood })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn gaussian_grid<T: Real>(
    id: u64,
    cfg: &GenConfig,
    mean: &[f64],
    rng: &mut ChaCha8Rng,
) -> PatchGrid<T> {
    let mut data = Vec::with_capacity(cfg.h * cfg.w * cfg.d);
    for _ in 0..cfg.h * cfg.w {
        for (j, m) in mean.iter().enumerate() {
            let _ = j;
            let z: f64 = StandardNormal.sample(rng);
            data.push(real::<T>(m + cfg.patch_noise_sd * z));
        }
    }
    PatchGrid::new(id, cfg.h, cfg.w, cfg.d, data).expect("generated grid is well-formed")
}

/// Overwrites `n_clutter` random patches with background draws; returns the
/// per-patch mask.
fn apply_clutter<T: Real>(
    grid: &mut PatchGrid<T>,
    cfg: &GenConfig,
    bg_mean: &[f64],
    n_clutter: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    let cells = cfg.h * cfg.w;
    let mut mask = vec![false; cells];
    if n_clutter == 0 {
        return mask;
    }
    let chosen = index_sample(rng, cells, n_clutter);
    for cell in chosen.iter() {
        mask[cell] = true;
        let (r, c) = (cell / cfg.w, cell % cfg.w);
        let p = grid.patch_mut(r, c);
        for (x, m) in p.iter_mut().zip(bg_mean) {
            let z: f64 = StandardNormal.sample(rng);
            *x = real::<T>(m + cfg.patch_noise_sd * z);
        }
    }
    mask
}

/// Generates one episode plus its patch-level ground truth. Deterministic:
/// equal configs produce bitwise-identical output.
pub fn generate_with_truth<T: Real>(cfg: &GenConfig) -> Result<GeneratedEpisode<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = build_means(cfg, &mut rng)?;
    let bg_mean = means.id_and_bg[cfg.c].clone();
    let n_clutter = floor_count(cfg.clutter_ratio, cfg.h * cfg.w);
    let id_tag = if n_clutter > 0 {
        NoiseTag::Id
    } else {
        NoiseTag::Clean
    };

    let mut next_id: u64 = 0;
    let mut take_id = || {
        let id = next_id;
        next_id += 1;
        id
    };

    // Support: per class, K ID samples.
    let mut support = Vec::with_capacity(cfg.c * cfg.k);
    let mut support_clutter = Vec::with_capacity(cfg.c * cfg.k);
    for class in 1..=cfg.c {
        for _ in 0..cfg.k {
            let mut grid = gaussian_grid::<T>(take_id(), cfg, &means.id_and_bg[class - 1], &mut rng);
            let mask = apply_clutter(&mut grid, cfg, &bg_mean, n_clutter, &mut rng);
            support_clutter.push(mask);
            support.push(SupportSample {
                grid,
                label: class,
                noise: id_tag,
            });
        }
    }

    // Queries: per class, ID queries with the same clutter statistics, then a
    // floor(query_ood_ratio * qpc) subset replaced by OOD queries.
    let mut ood_rotation = 0usize;
    let mut query = Vec::with_capacity(cfg.c * cfg.queries_per_class);
    for class in 1..=cfg.c {
        let mut class_queries = Vec::with_capacity(cfg.queries_per_class);
        for _ in 0..cfg.queries_per_class {
            let mut grid = gaussian_grid::<T>(take_id(), cfg, &means.id_and_bg[class - 1], &mut rng);
            apply_clutter(&mut grid, cfg, &bg_mean, n_clutter, &mut rng);
            class_queries.push(QuerySample {
                grid,
                label: Some(class),
                noise: id_tag,
            });
        }
        let n_ood = floor_count(cfg.query_ood_ratio, cfg.queries_per_class);
        if n_ood > 0 {
            let chosen = index_sample(&mut rng, cfg.queries_per_class, n_ood);
            for idx in chosen.iter() {
                let mean = &means.ood[ood_rotation % means.ood.len()];
                ood_rotation += 1;
                let id = class_queries[idx].grid.sample_id();
                class_queries[idx] = QuerySample {
                    grid: gaussian_grid::<T>(id, cfg, mean, &mut rng),
                    label: None,
                    noise: NoiseTag::Ood,
                };
            }
        }
        query.extend(class_queries);
    }

    let mut generated = GeneratedEpisode {
        episode: Episode {
            class_count: cfg.c,
            shots: cfg.k,
            dim: cfg.d,
            rows: cfg.h,
            cols: cfg.w,
            support,
            query,
            meta: EpisodeMeta {
                seed: cfg.seed,
                ood_ratio: cfg.ood_ratio,
                clutter_ratio: cfg.clutter_ratio,
            },
        },
        truth: GenTruth { support_clutter },
    };

    // Support OOD noise goes through the same injection path exposed to
    // callers.
    if cfg.ood_ratio > 0.0 {
        let per_class = floor_count(cfg.ood_ratio, cfg.k);
        let needed = per_class * cfg.c;
        let mut pool = Vec::with_capacity(needed);
        for _ in 0..needed {
            let mean = &means.ood[ood_rotation % means.ood.len()];
            ood_rotation += 1;
            pool.push(gaussian_grid::<T>(take_id(), cfg, mean, &mut rng));
        }
        let inject_seed = rng.random::<u64>();
        let (episode, replaced) =
            inject_ood_noise_traced(&generated.episode, cfg.ood_ratio, &pool, inject_seed)?;
        generated.episode = episode;
        for idx in replaced {
            generated.truth.support_clutter[idx] = vec![false; cfg.h * cfg.w];
        }
    }

    generated.episode.validate()?;
    Ok(generated)
}

/// See [`generate_with_truth`]; drops the ground-truth masks.
pub fn generate_episode<T: Real>(cfg: &GenConfig) -> Result<Episode<T>> {
    Ok(generate_with_truth(cfg)?.episode)
}

/// Replaces `floor(alpha * K_c)` support samples per class with OOD pool
/// samples carrying that class's (wrong) label. Support size is unchanged.
pub fn inject_ood_noise<T: Real>(
    episode: &Episode<T>,
    alpha: f64,
    ood_pool: &[PatchGrid<T>],
    seed: u64,
) -> Result<Episode<T>> {
    inject_ood_noise_traced(episode, alpha, ood_pool, seed).map(|(e, _)| e)
}

/// As [`inject_ood_noise`], also reporting which support indices were
/// replaced.
pub fn inject_ood_noise_traced<T: Real>(
    episode: &Episode<T>,
    alpha: f64,
    ood_pool: &[PatchGrid<T>],
    seed: u64,
) -> Result<(Episode<T>, Vec<usize>)> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::ConfigInvalid(format!("alpha {alpha} outside [0,1)")));
    }
    let mut out = episode.clone();
    if alpha == 0.0 {
        return Ok((out, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool_cursor = 0usize;
    let mut replaced_indices = Vec::new();
    for class in 1..=episode.class_count {
        let members: Vec<usize> = (0..episode.support.len())
            .filter(|&i| episode.support[i].label == class)
            .collect();
        let n_replace = floor_count(alpha, members.len());
        if n_replace == 0 {
            continue;
        }
        if pool_cursor + n_replace > ood_pool.len() {
            return Err(Error::PoolExhausted {
                needed: pool_cursor + n_replace,
                available: ood_pool.len(),
            });
        }
        let mut chosen: Vec<usize> = index_sample(&mut rng, members.len(), n_replace).into_vec();
        chosen.sort_unstable();
        for local in chosen {
            let idx = members[local];
            let grid = ood_pool[pool_cursor].clone();
            pool_cursor += 1;
            if grid.rows() != episode.rows
                || grid.cols() != episode.cols
                || grid.dim() != episode.dim
            {
                return Err(Error::ConfigInvalid(
                    "OOD pool grid shape does not match the episode".into(),
                ));
            }
            out.support[idx] = SupportSample {
                grid,
                label: class,
                noise: NoiseTag::Ood,
            };
            replaced_indices.push(idx);
        }
    }
    Ok((out, replaced_indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract() {
        let cfg = GenConfig {
            seed: 3,
            ..GenConfig::default()
        };
        let e: Episode<f64> = generate_episode(&cfg).unwrap();
        assert_eq!(e.support.len(), 50);
        for class in 1..=5 {
            assert_eq!(e.support_of_class(class).count(), 10);
        }
        assert_eq!(e.query.len(), 50);
    }

    #[test]
    fn no_ood_requested_means_no_ood_tags() {
        let cfg = GenConfig {
            ood_ratio: 0.0,
            query_ood_ratio: 0.0,
            seed: 5,
            ..GenConfig::default()
        };
        let e: Episode<f64> = generate_episode(&cfg).unwrap();
        assert!(e.support.iter().all(|s| s.noise != NoiseTag::Ood));
        assert!(e.query.iter().all(|q| q.noise != NoiseTag::Ood));
    }

    #[test]
    fn clutter_free_samples_are_tagged_clean() {
        let cfg = GenConfig {
            clutter_ratio: 0.0,
            ood_ratio: 0.0,
            seed: 5,
            ..GenConfig::default()
        };
        let e: Episode<f64> = generate_episode(&cfg).unwrap();
        assert!(e.support.iter().all(|s| s.noise == NoiseTag::Clean));
    }

    #[test]
    fn ood_marginals_match_floor_semantics() {
        for (alpha, expect) in [(0.1, 1), (0.3, 3), (0.5, 5), (0.7, 7)] {
            let cfg = GenConfig {
                ood_ratio: alpha,
                seed: 17,
                ..GenConfig::default()
            };
            let e: Episode<f64> = generate_episode(&cfg).unwrap();
            for class in 1..=cfg.c {
                let n_ood = e
                    .support_of_class(class)
                    .filter(|s| s.noise == NoiseTag::Ood)
                    .count();
                assert_eq!(n_ood, expect, "alpha={alpha} class={class}");
            }
            assert_eq!(e.support.len(), 50);
        }
    }

    #[test]
    fn injection_with_zero_alpha_is_identity() {
        let cfg = GenConfig {
            ood_ratio: 0.0,
            seed: 9,
            ..GenConfig::default()
        };
        let e: Episode<f64> = generate_episode(&cfg).unwrap();
        let out = inject_ood_noise(&e, 0.0, &[], 1).unwrap();
        assert_eq!(e, out);
    }

    #[test]
    fn injection_floor_arithmetic_and_pool_exhaustion() {
        let cfg = GenConfig {
            ood_ratio: 0.0,
            seed: 21,
            ..GenConfig::default()
        };
        let gen: GeneratedEpisode<f64> = generate_with_truth(&cfg).unwrap();
        let e = gen.episode;
        // Build a pool of 15 OOD-ish grids (ids above every episode id).
        let pool: Vec<PatchGrid<f64>> = (0..15)
            .map(|i| {
                PatchGrid::new(10_000 + i, cfg.h, cfg.w, cfg.d, vec![0.25; cfg.h * cfg.w * cfg.d])
                    .unwrap()
            })
            .collect();
        let out = inject_ood_noise(&e, 0.3, &pool, 2).unwrap();
        for class in 1..=cfg.c {
            let n = out
                .support_of_class(class)
                .filter(|s| s.noise == NoiseTag::Ood)
                .count();
            assert_eq!(n, 3);
        }
        assert!(matches!(
            inject_ood_noise(&e, 0.7, &pool, 2),
            Err(Error::PoolExhausted { .. })
        ));
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let cfg = GenConfig {
            ood_ratio: 0.3,
            query_ood_ratio: 0.2,
            seed: 33,
            ..GenConfig::default()
        };
        let a: Episode<f64> = generate_episode(&cfg).unwrap();
        let b: Episode<f64> = generate_episode(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_dim = GenConfig {
            d: 4,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_episode::<f64>(&bad_dim),
            Err(Error::ConfigInvalid(_))
        ));
        let bad_ratio = GenConfig {
            ood_ratio: 1.0,
            ..GenConfig::default()
        };
        assert!(bad_ratio.validate().is_err());
    }

    #[test]
    fn floor_count_handles_representation_noise() {
        assert_eq!(floor_count(0.3, 10), 3);
        assert_eq!(floor_count(0.7, 10), 7);
        assert_eq!(floor_count(0.1, 10), 1);
        assert_eq!(floor_count(0.3, 3), 0);
        assert_eq!(floor_count(0.0, 10), 0);
    }
}
