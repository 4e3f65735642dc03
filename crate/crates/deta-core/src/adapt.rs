//! Task adaptation: a two-layer projection head trained with a
//! clean-prototype loss plus an entropy-maximization penalty on detected
//! noisy regions, one plain gradient-descent step per iteration.
//!
//! Per iteration the loop crops fresh regions from every support sample,
//! weighs them (CoRA), refreshes the per-image weights and the memory bank,
//! builds one region-swapped image per class to rectify the prototypes, and
//! updates the head. The pooled patch features ("backbone output") are
//! frozen; only the head is trainable.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cora::{
    accumulate_image_weights, compute_region_weights, partition, update_memory_bank,
    AccumulatorState, CroppedRegion, MemoryBank, RegionWeightTable,
};
use crate::episode::{
    crop_random_regions, default_region_side, image_feature, Episode, FeatureVector, PatchGrid,
    RegionBox,
};
use crate::linalg;
use crate::real::{real, Real};
use crate::{Error, Result, EPS_NORM};

/// Two-layer MLP head mapping pooled `d`-dim features to unit-norm `m`-dim
/// embeddings: `e = normalize(W2 relu(W1 x + b1) + b2)`.
///
/// Weights are stored transposed for row-contiguous matvecs: `w1` is
/// `hidden_dim x input_dim`, `w2` is `embed_dim x hidden_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// Default embedding width of the head.
pub const DEFAULT_EMBED_DIM: usize = 128;

/// Default hidden width for a given input/embedding size.
pub fn default_hidden_dim(input_dim: usize, embed_dim: usize) -> usize {
    input_dim.max(embed_dim)
}

impl<T: Real> HeadParams<T> {
    /// Glorot-uniform weight init (`+-sqrt(6/(fan_in+fan_out))`), zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        let mut sample = |fan_in: usize, fan_out: usize, len: usize| -> Vec<T> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..len)
                .map(|_| real::<T>(rng.random_range(-limit..=limit)))
                .collect()
        };
        let w1 = sample(input_dim, hidden_dim, hidden_dim * input_dim);
        let w2 = sample(hidden_dim, embed_dim, embed_dim * hidden_dim);
        HeadParams {
            input_dim,
            hidden_dim,
            embed_dim,
            w1,
            b1: vec![T::zero(); hidden_dim],
            w2,
            b2: vec![T::zero(); embed_dim],
        }
    }

    pub fn init_seeded(input_dim: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(input_dim, hidden_dim, embed_dim, &mut rng)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn forward_cached(&self, x: &[T]) -> Result<ForwardCache<T>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                left: x.len(),
                right: self.input_dim,
            });
        }
        let h = self.hidden_dim;
        let m = self.embed_dim;
        let mut hpre = self.b1.clone();
        for (j, row) in self.w1.chunks_exact(self.input_dim).enumerate() {
            hpre[j] += linalg::dot(row, x);
        }
        let hpost: Vec<T> = hpre
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let mut u = self.b2.clone();
        for (o, row) in self.w2.chunks_exact(h).enumerate() {
            u[o] += linalg::dot(row, &hpost);
        }
        let u_norm = linalg::norm(&u);
        if u_norm <= real::<T>(EPS_NORM) {
            return Err(Error::ZeroEmbedding);
        }
        let mut e = u.clone();
        linalg::scale(&mut e, T::one() / u_norm);
        debug_assert_eq!(e.len(), m);
        Ok(ForwardCache {
            x: x.to_vec(),
            hpre,
            hpost,
            u_norm,
            e,
        })
    }

    /// Applies one gradient-descent step: `p <- p - lr * g`.
    pub fn step(&mut self, grads: &HeadGrads<T>, lr: T) {
        let update = |p: &mut [T], g: &[T]| {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi = *pi - lr * *gi;
            }
        };
        update(&mut self.w1, &grads.w1);
        update(&mut self.b1, &grads.b1);
        update(&mut self.w2, &grads.w2);
        update(&mut self.b2, &grads.b2);
    }
}

/// Embeds a pooled feature into the unit sphere.
pub fn head_forward<T: Real>(
    params: &HeadParams<T>,
    feature: &FeatureVector<T>,
) -> Result<FeatureVector<T>> {
    Ok(FeatureVector::new(
        params.forward_cached(feature.values())?.e,
    ))
}

struct ForwardCache<T> {
    x: Vec<T>,
    hpre: Vec<T>,
    hpost: Vec<T>,
    u_norm: T,
    e: Vec<T>,
}

/// Gradient with the same shape as [`HeadParams`].
#[derive(Clone, Debug)]
pub struct HeadGrads<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> HeadGrads<T> {
    pub fn zeros_like(params: &HeadParams<T>) -> Self {
        HeadGrads {
            w1: vec![T::zero(); params.w1.len()],
            b1: vec![T::zero(); params.b1.len()],
            w2: vec![T::zero(); params.w2.len()],
            b2: vec![T::zero(); params.b2.len()],
        }
    }

    fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|g| g.is_finite())
    }
}

/// Backprop of `dL/de` through normalization and both layers into `grads`.
fn backward_feature<T: Real>(
    params: &HeadParams<T>,
    cache: &ForwardCache<T>,
    g_e: &[T],
    grads: &mut HeadGrads<T>,
) {
    let h = params.hidden_dim;
    // e = u / |u|  =>  g_u = (g_e - (g_e . e) e) / |u|
    let inner = linalg::dot(g_e, &cache.e);
    let inv = T::one() / cache.u_norm;
    let g_u: Vec<T> = g_e
        .iter()
        .zip(&cache.e)
        .map(|(g, e)| (*g - inner * *e) * inv)
        .collect();
    // u = W2 hpost + b2
    let mut g_hpost = vec![T::zero(); h];
    for (o, row) in params.w2.chunks_exact(h).enumerate() {
        let g = g_u[o];
        linalg::axpy(&mut grads.w2[o * h..(o + 1) * h], g, &cache.hpost);
        grads.b2[o] += g;
        linalg::axpy(&mut g_hpost, g, row);
    }
    // ReLU gate, then layer 1.
    let d = params.input_dim;
    for j in 0..h {
        if cache.hpre[j] > T::zero() {
            let g = g_hpost[j];
            linalg::axpy(&mut grads.w1[j * d..(j + 1) * d], g, &cache.x);
            grads.b1[j] += g;
        }
    }
}

/// Weighted class prototypes plus the coefficients needed to route gradient
/// back into the contributing image embeddings.
#[derive(Clone, Debug)]
pub struct Prototypes<T> {
    /// `mu[c-1]` is the prototype of class `c`; not unit-norm.
    pub mu: Vec<Vec<T>>,
    /// Per class: `(image index, coefficient)` with `mu_c = sum coeff * e_i`.
    pub contributors: Vec<Vec<(usize, T)>>,
}

impl<T: Real> Prototypes<T> {
    pub fn class_count(&self) -> usize {
        self.mu.len()
    }
}

/// Builds per-class weighted mean prototypes from unit image embeddings.
///
/// Images with `omega < rho` are zeroed out of the sum; the divisor counts
/// the surviving images. When a whole class is zeroed out (or its weighted
/// sum cancels to zero), the class falls back to the plain unweighted mean of
/// its image embeddings.
pub fn weighted_prototypes<T: Real>(
    embeddings: &[FeatureVector<T>],
    labels: &[usize],
    omegas: &[T],
    class_count: usize,
    rho: T,
) -> Result<Prototypes<T>> {
    let views: Vec<&[T]> = embeddings.iter().map(|e| e.values()).collect();
    build_prototypes(&views, labels, omegas, class_count, rho)
}

fn build_prototypes<T: Real>(
    embeddings: &[&[T]],
    labels: &[usize],
    omegas: &[T],
    class_count: usize,
    rho: T,
) -> Result<Prototypes<T>> {
    if embeddings.len() != labels.len() || embeddings.len() != omegas.len() {
        return Err(Error::DimensionMismatch {
            left: embeddings.len(),
            right: labels.len().max(omegas.len()),
        });
    }
    let dim = embeddings.first().map_or(0, |e| e.len());
    let eps = real::<T>(EPS_NORM);
    let mut mu = Vec::with_capacity(class_count);
    let mut contributors = Vec::with_capacity(class_count);
    for class in 1..=class_count {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::AllImagesFiltered(class));
        }
        let surviving: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| omegas[i] >= rho)
            .collect();
        let mut coeffs: Vec<(usize, T)> = if surviving.is_empty() {
            // Every image filtered: fall back to the unweighted mean.
            let inv = T::one() / real::<T>(members.len() as f64);
            members.iter().map(|&i| (i, inv)).collect()
        } else {
            let inv = T::one() / real::<T>(surviving.len() as f64);
            surviving.iter().map(|&i| (i, omegas[i] * inv)).collect()
        };
        let mut m = vec![T::zero(); dim];
        for &(i, c) in &coeffs {
            linalg::axpy(&mut m, c, embeddings[i]);
        }
        if linalg::norm(&m) <= eps && !surviving.is_empty() {
            // Weighted sum cancelled; retry unweighted over all members.
            let inv = T::one() / real::<T>(members.len() as f64);
            coeffs = members.iter().map(|&i| (i, inv)).collect();
            m = vec![T::zero(); dim];
            for &(i, c) in &coeffs {
                linalg::axpy(&mut m, c, embeddings[i]);
            }
        }
        mu.push(m);
        contributors.push(coeffs);
    }
    Ok(Prototypes { mu, contributors })
}

/// Softmax over cosine similarities to the class prototypes.
pub fn class_posteriors<T: Real>(
    embedding: &FeatureVector<T>,
    prototypes: &Prototypes<T>,
) -> Result<Vec<T>> {
    let scores = prototype_scores(embedding.values(), prototypes)?;
    Ok(linalg::softmax(&scores))
}

fn prototype_scores<T: Real>(embedding: &[T], prototypes: &Prototypes<T>) -> Result<Vec<T>> {
    let eps = real::<T>(EPS_NORM);
    let e_norm = linalg::norm(embedding);
    if e_norm <= eps {
        return Err(Error::ZeroVector(EPS_NORM));
    }
    prototypes
        .mu
        .iter()
        .enumerate()
        .map(|(c, mu)| {
            let n = linalg::norm(mu);
            if n <= eps {
                return Err(Error::DegeneratePrototype(c + 1));
            }
            Ok(linalg::dot(embedding, mu) / (n * e_norm))
        })
        .collect()
}

/// Softmax floor inside logs.
const LOG_FLOOR: f64 = 1e-12;

/// Cross-entropy of clean regions against their class prototypes, weighted
/// by the region weights (zeroed below `rho`), divided by the full region
/// count regardless of zeroing.
pub fn clean_prototype_loss<T: Real>(
    region_embeddings: &[FeatureVector<T>],
    lambdas: &[T],
    labels: &[usize],
    prototypes: &Prototypes<T>,
    rho: T,
) -> Result<T> {
    if region_embeddings.is_empty() {
        return Err(Error::EmptyList);
    }
    let floor = real::<T>(LOG_FLOOR);
    let mut total = T::zero();
    for ((e, &lam), &label) in region_embeddings.iter().zip(lambdas).zip(labels) {
        if lam < rho {
            continue;
        }
        let p = class_posteriors(e, prototypes)?;
        let py = p[label - 1].max(floor);
        total -= lam * py.ln();
    }
    Ok(total / real::<T>(region_embeddings.len() as f64))
}

/// Negative mean Shannon entropy of the posteriors of the detected noisy
/// regions; zero when none were detected.
pub fn noise_entropy_loss<T: Real>(
    noisy_embeddings: &[FeatureVector<T>],
    prototypes: &Prototypes<T>,
) -> Result<T> {
    if noisy_embeddings.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for e in noisy_embeddings {
        let p = class_posteriors(e, prototypes)?;
        total -= linalg::entropy(&p);
    }
    Ok(total / real::<T>(noisy_embeddings.len() as f64))
}

/// One image entering the prototype construction.
#[derive(Clone, Debug)]
pub struct ImageEntry<T> {
    pub feature: FeatureVector<T>,
    pub label: usize,
    pub omega: T,
}

/// One cropped support region entering the losses.
#[derive(Clone, Debug)]
pub struct RegionEntry<T> {
    pub feature: FeatureVector<T>,
    pub label: usize,
    pub lambda: T,
    pub noisy: bool,
}

/// Everything one loss/gradient evaluation needs. `images` holds the support
/// images plus any region-swapped augmentations (which carry their base
/// image's weight); `regions` holds exactly the `N_s * k` support crops.
#[derive(Clone, Debug)]
pub struct IterationBatch<T> {
    pub class_count: usize,
    pub images: Vec<ImageEntry<T>>,
    pub regions: Vec<RegionEntry<T>>,
}

/// Loss value only; shares the forward path with the gradient version.
pub fn total_loss<T: Real>(
    params: &HeadParams<T>,
    batch: &IterationBatch<T>,
    beta: T,
    rho: T,
) -> Result<T> {
    evaluate(params, batch, beta, rho, Mode::ValueOnly).map(|(l, _)| l)
}

/// Loss and its exact gradient w.r.t. every head parameter. Gradient flows
/// through region embeddings, image embeddings, and the prototypes built
/// from them; `detach_prototypes` cuts the image/prototype path.
pub fn total_loss_and_grad<T: Real>(
    params: &HeadParams<T>,
    batch: &IterationBatch<T>,
    beta: T,
    rho: T,
    detach_prototypes: bool,
) -> Result<(T, HeadGrads<T>)> {
    let (loss, grads) = evaluate(
        params,
        batch,
        beta,
        rho,
        Mode::WithGrad { detach_prototypes },
    )?;
    Ok((loss, grads.expect("gradient requested")))
}

enum Mode {
    ValueOnly,
    WithGrad { detach_prototypes: bool },
}

fn evaluate<T: Real>(
    params: &HeadParams<T>,
    batch: &IterationBatch<T>,
    beta: T,
    rho: T,
    mode: Mode,
) -> Result<(T, Option<HeadGrads<T>>)> {
    if batch.regions.is_empty() {
        return Err(Error::EmptyList);
    }
    let want_grad = matches!(mode, Mode::WithGrad { .. });
    let detach = matches!(mode, Mode::WithGrad { detach_prototypes: true });
    let c_count = batch.class_count;
    let m = params.embed_dim;
    let eps = real::<T>(EPS_NORM);
    let floor = real::<T>(LOG_FLOOR);

    // Embed images, build prototypes.
    let image_caches: Vec<ForwardCache<T>> = batch
        .images
        .iter()
        .map(|img| params.forward_cached(img.feature.values()))
        .collect::<Result<_>>()?;
    let image_embeddings: Vec<&[T]> = image_caches.iter().map(|c| c.e.as_slice()).collect();
    let labels: Vec<usize> = batch.images.iter().map(|i| i.label).collect();
    let omegas: Vec<T> = batch.images.iter().map(|i| i.omega).collect();
    let prototypes = build_prototypes(&image_embeddings, &labels, &omegas, c_count, rho)?;
    let mu_norms: Vec<T> = prototypes
        .mu
        .iter()
        .enumerate()
        .map(|(c, mu)| {
            let n = linalg::norm(mu);
            if n <= eps {
                Err(Error::DegeneratePrototype(c + 1))
            } else {
                Ok(n)
            }
        })
        .collect::<Result<_>>()?;

    let region_caches: Vec<ForwardCache<T>> = batch
        .regions
        .iter()
        .map(|r| params.forward_cached(r.feature.values()))
        .collect::<Result<_>>()?;

    let n_regions = real::<T>(batch.regions.len() as f64);
    let noisy_count = batch.regions.iter().filter(|r| r.noisy).count();
    let inv_noisy = if noisy_count > 0 {
        T::one() / real::<T>(noisy_count as f64)
    } else {
        T::zero()
    };

    let mut grads = want_grad.then(|| HeadGrads::zeros_like(params));
    // dL/d mu_c accumulated over all regions.
    let mut g_mu = vec![vec![T::zero(); m]; c_count];
    let mut clean_loss = T::zero();
    let mut noise_loss = T::zero();
    let mut scores = vec![T::zero(); c_count];
    let mut dl_ds = vec![T::zero(); c_count];

    for (region, cache) in batch.regions.iter().zip(&region_caches) {
        for c in 0..c_count {
            // Region embeddings are unit norm, so the cosine is a scaled dot.
            scores[c] = linalg::dot(&cache.e, &prototypes.mu[c]) / mu_norms[c];
        }
        let p = linalg::softmax(&scores);
        for v in dl_ds.iter_mut() {
            *v = T::zero();
        }
        let mut active = false;

        // Clean prototype term: -lambda/N * log p_y, lambda zeroed below rho.
        if region.lambda >= rho {
            let y = region.label - 1;
            let py = p[y].max(floor);
            clean_loss -= region.lambda * py.ln();
            if want_grad && py > floor {
                let coeff = region.lambda / n_regions;
                for c in 0..c_count {
                    let indicator = if c == y { T::one() } else { T::zero() };
                    dl_ds[c] -= coeff * (indicator - p[c]);
                }
                active = true;
            }
        }

        // Noise entropy term: -H(p)/|N| per detected noisy region.
        if region.noisy {
            let h_p = linalg::entropy(&p);
            noise_loss -= h_p;
            if want_grad {
                // dH/ds_c = -p_c (ln p_c + H)
                let coeff = beta * inv_noisy;
                for c in 0..c_count {
                    if p[c] > floor {
                        dl_ds[c] += coeff * p[c] * (p[c].ln() + h_p);
                    }
                }
                active = true;
            }
        }

        if let (Some(grads), true) = (grads.as_mut(), active) {
            // Route through s_c = (e_r . mu_c) / |mu_c|.
            let mut g_e = vec![T::zero(); m];
            for c in 0..c_count {
                let g = dl_ds[c];
                if g == T::zero() {
                    continue;
                }
                let inv_norm = T::one() / mu_norms[c];
                linalg::axpy(&mut g_e, g * inv_norm, &prototypes.mu[c]);
                if !detach {
                    // d s / d mu = (e_r - s * mu_hat) / |mu|
                    let s = scores[c];
                    let gm = &mut g_mu[c];
                    for (slot, (er, mu)) in cache.e.iter().zip(&prototypes.mu[c]).enumerate() {
                        gm[slot] += g * (*er - s * *mu * inv_norm) * inv_norm;
                    }
                }
            }
            backward_feature(params, cache, &g_e, grads);
        }
    }

    // Prototype gradient flows into the contributing image embeddings.
    if let Some(grads) = grads.as_mut() {
        if !detach {
            for (c, coeffs) in prototypes.contributors.iter().enumerate() {
                for &(img_idx, coeff) in coeffs {
                    if coeff == T::zero() {
                        continue;
                    }
                    let mut g_e = vec![T::zero(); m];
                    linalg::axpy(&mut g_e, coeff, &g_mu[c]);
                    backward_feature(params, &image_caches[img_idx], &g_e, grads);
                }
            }
        }
    }

    let loss = clean_loss / n_regions + beta * noise_loss * inv_noisy;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    if let Some(g) = &grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
    }
    Ok((loss, grads))
}

/// Pastes the donor's patches inside the stored box onto the base grid;
/// everything else (and the label) stays the base's.
pub fn intraswap<T: Real>(
    base: &PatchGrid<T>,
    base_label: usize,
    donor: &PatchGrid<T>,
    donor_label: usize,
    bbox: &RegionBox,
) -> Result<PatchGrid<T>> {
    if base_label != donor_label {
        return Err(Error::ClassMismatch {
            left: base_label,
            right: donor_label,
        });
    }
    if bbox.row1 > base.rows().min(donor.rows()) || bbox.col1 > base.cols().min(donor.cols()) {
        return Err(Error::BoxOutOfBounds {
            row0: bbox.row0,
            col0: bbox.col0,
            row1: bbox.row1,
            col1: bbox.col1,
            rows: base.rows().min(donor.rows()),
            cols: base.cols().min(donor.cols()),
        });
    }
    let mut out = base.clone();
    for r in bbox.row0..bbox.row1 {
        for c in bbox.col0..bbox.col1 {
            out.patch_mut(r, c).copy_from_slice(donor.patch(r, c));
        }
    }
    Ok(out)
}

/// Region-level mixing of two labeled grids: the box content comes from `b`,
/// the rest from `a`, and the label is the `mix`-weighted one-hot blend.
/// Kept as an ablation baseline next to [`intraswap`].
pub fn cutmix<T: Real>(
    a: (&PatchGrid<T>, usize),
    b: (&PatchGrid<T>, usize),
    bbox: &RegionBox,
    mix: T,
    class_count: usize,
) -> Result<(PatchGrid<T>, Vec<T>)> {
    let (grid_a, label_a) = a;
    let (grid_b, label_b) = b;
    if mix < T::zero() || mix > T::one() {
        return Err(Error::ConfigInvalid(format!(
            "cutmix mix weight {mix} outside [0,1]"
        )));
    }
    if label_a == 0 || label_a > class_count || label_b == 0 || label_b > class_count {
        return Err(Error::ConfigInvalid(format!(
            "cutmix labels ({label_a}, {label_b}) outside 1..={class_count}"
        )));
    }
    if bbox.row1 > grid_a.rows().min(grid_b.rows()) || bbox.col1 > grid_a.cols().min(grid_b.cols())
    {
        return Err(Error::BoxOutOfBounds {
            row0: bbox.row0,
            col0: bbox.col0,
            row1: bbox.row1,
            col1: bbox.col1,
            rows: grid_a.rows().min(grid_b.rows()),
            cols: grid_a.cols().min(grid_b.cols()),
        });
    }
    let mut out = grid_a.clone();
    for r in bbox.row0..bbox.row1 {
        for c in bbox.col0..bbox.col1 {
            out.patch_mut(r, c).copy_from_slice(grid_b.patch(r, c));
        }
    }
    let mut label = vec![T::zero(); class_count];
    label[label_a - 1] += mix;
    label[label_b - 1] += T::one() - mix;
    Ok((out, label))
}

/// Adaptation hyperparameters. JSON config files mirror these fields;
/// everything has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Iterations of the adaptation loop.
    pub max_iterations: usize,
    /// Regions cropped per support image and iteration.
    pub regions_per_image: usize,
    /// Square crop side in patches; `None` means `ceil(min(H, W)/2)`.
    pub region_side: Option<usize>,
    /// Threshold separating clean from noisy regions and images.
    pub weight_threshold: f64,
    /// Coefficient of the noise entropy loss (1.0 is the OOD-detection
    /// setting, 0.3 the classification one).
    pub noise_loss_coeff: f64,
    /// Momentum of the image-weight accumulator.
    pub momentum: f64,
    pub learning_rate: f64,
    /// Region-swapped images built per class and iteration.
    pub intraswap_per_class: usize,
    pub embed_dim: usize,
    /// `None` means `max(d, embed_dim)`.
    pub hidden_dim: Option<usize>,
    /// Cut the gradient path through the prototypes.
    pub detach_prototypes: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            max_iterations: 40,
            regions_per_image: 4,
            region_side: None,
            weight_threshold: 0.3,
            noise_loss_coeff: 0.3,
            momentum: 0.7,
            learning_rate: 0.01,
            intraswap_per_class: 1,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: None,
            detach_prototypes: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.max_iterations == 0 || self.regions_per_image == 0 || self.embed_dim == 0 {
            return fail("iterations, regions per image, and embed dim must be positive".into());
        }
        if self.weight_threshold <= 0.0 {
            return fail(format!(
                "weight_threshold must be positive, got {}",
                self.weight_threshold
            ));
        }
        if self.noise_loss_coeff < 0.0 {
            return fail(format!(
                "noise_loss_coeff must be nonnegative, got {}",
                self.noise_loss_coeff
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0,1]", self.momentum));
        }
        if self.learning_rate <= 0.0 {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.region_side == Some(0) || self.hidden_dim == Some(0) {
            return fail("region_side and hidden_dim must be positive when set".into());
        }
        Ok(())
    }
}

/// Result of adapting one task.
#[derive(Clone, Debug)]
pub struct AdaptOutcome<T> {
    pub head: HeadParams<T>,
    pub bank: MemoryBank<T>,
    pub accumulator: AccumulatorState<T>,
    pub loss_trace: Vec<T>,
}

/// Per-iteration view handed to an observer (weight dumps, tracing).
pub struct IterationView<'a, T> {
    pub t: usize,
    pub table: &'a RegionWeightTable<T>,
    pub accumulator: &'a AccumulatorState<T>,
    pub loss: T,
}

/// Runs the full adaptation loop on one episode. Deterministic in
/// `cfg.seed`; the episode's noise annotations are never read.
pub fn adapt_task<T: Real>(episode: &Episode<T>, cfg: &AdaptConfig) -> Result<AdaptOutcome<T>> {
    adapt_task_observed(episode, cfg, |_: IterationView<T>| {})
}

pub fn adapt_task_observed<T: Real>(
    episode: &Episode<T>,
    cfg: &AdaptConfig,
    mut observer: impl FnMut(IterationView<T>),
) -> Result<AdaptOutcome<T>> {
    cfg.validate()?;
    episode.validate()?;
    let rho = real::<T>(cfg.weight_threshold);
    let beta = real::<T>(cfg.noise_loss_coeff);
    let lr = real::<T>(cfg.learning_rate);
    let side = cfg
        .region_side
        .unwrap_or_else(|| default_region_side(episode.rows, episode.cols));
    let hidden = cfg
        .hidden_dim
        .unwrap_or_else(|| default_hidden_dim(episode.dim, cfg.embed_dim));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = HeadParams::<T>::init(episode.dim, hidden, cfg.embed_dim, &mut rng);

    // Frozen pooled features of the support images.
    let support_features: Vec<FeatureVector<T>> = episode
        .support
        .iter()
        .map(|s| image_feature(&s.grid))
        .collect();
    let grid_by_id: BTreeMap<u64, usize> = episode
        .support
        .iter()
        .enumerate()
        .map(|(i, s)| (s.grid.sample_id(), i))
        .collect();
    let class_members: Vec<Vec<usize>> = (1..=episode.class_count)
        .map(|c| {
            (0..episode.support.len())
                .filter(|&i| episode.support[i].label == c)
                .collect()
        })
        .collect();

    let mut bank = MemoryBank::new(2 * episode.shots);
    let mut accumulator = AccumulatorState::new(real::<T>(cfg.momentum));
    let mut loss_trace = Vec::with_capacity(cfg.max_iterations);

    for t in 1..=cfg.max_iterations {
        // Fresh crops from every support image.
        let mut regions = Vec::with_capacity(episode.support.len() * cfg.regions_per_image);
        for s in &episode.support {
            for (bbox, feature) in
                crop_random_regions(&s.grid, cfg.regions_per_image, side, &mut rng)?
            {
                regions.push(CroppedRegion {
                    sample_id: s.grid.sample_id(),
                    label: s.label,
                    bbox,
                    feature,
                });
            }
        }
        let table = compute_region_weights(&regions)?;
        let part = partition(&table, rho);
        accumulate_image_weights(&mut accumulator, &table.lambdas_by_sample())?;
        update_memory_bank(&mut bank, &table, &part.clean);

        // One region-swapped image per class (per configured count) to
        // rectify the prototypes; these are never region-cropped.
        let mut images: Vec<ImageEntry<T>> = episode
            .support
            .iter()
            .zip(&support_features)
            .map(|(s, f)| ImageEntry {
                feature: f.clone(),
                label: s.label,
                omega: accumulator
                    .omega(s.grid.sample_id())
                    .expect("all support samples were just accumulated"),
            })
            .collect();
        for (class_idx, members) in class_members.iter().enumerate() {
            let class = class_idx + 1;
            let entries = bank.entries(class);
            if entries.is_empty() || members.is_empty() {
                continue;
            }
            for _ in 0..cfg.intraswap_per_class {
                let entry = &entries[rng.random_range(0..entries.len())];
                let clean_members: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&i| {
                        accumulator
                            .omega(episode.support[i].grid.sample_id())
                            .is_some_and(|w| w >= rho)
                    })
                    .collect();
                let pick_from = if clean_members.is_empty() {
                    members
                } else {
                    &clean_members
                };
                let base_idx = pick_from[rng.random_range(0..pick_from.len())];
                let base = &episode.support[base_idx];
                let donor = &episode.support[grid_by_id[&entry.sample_id]];
                let swapped = intraswap(&base.grid, base.label, &donor.grid, donor.label, &entry.bbox)?;
                images.push(ImageEntry {
                    feature: image_feature(&swapped),
                    label: class,
                    omega: accumulator
                        .omega(base.grid.sample_id())
                        .expect("base image is accumulated"),
                });
            }
        }

        let batch = IterationBatch {
            class_count: episode.class_count,
            images,
            regions: table
                .records
                .iter()
                .map(|r| RegionEntry {
                    feature: r.feature.clone(),
                    label: r.label,
                    lambda: r.lambda,
                    noisy: r.lambda < rho,
                })
                .collect(),
        };
        let (loss, grads) =
            total_loss_and_grad(&head, &batch, beta, rho, cfg.detach_prototypes)?;
        head.step(&grads, lr);
        loss_trace.push(loss);
        observer(IterationView {
            t,
            table: &table,
            accumulator: &accumulator,
            loss,
        });
    }

    Ok(AdaptOutcome {
        head,
        bank,
        accumulator,
        loss_trace,
    })
}
