//! Contrastive relevance aggregation: parameter-free region weighting from
//! in-class vs out-of-class cosine statistics, the momentum accumulator that
//! turns region weights into image weights, and the per-class memory bank of
//! clean regions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::episode::{FeatureVector, RegionBox};
use crate::linalg;
use crate::real::{real, Real};
use crate::{Error, Result, EPS_NORM};

/// A cropped region before weighting.
#[derive(Clone, Debug)]
pub struct CroppedRegion<T> {
    pub sample_id: u64,
    pub label: usize,
    pub bbox: RegionBox,
    pub feature: FeatureVector<T>,
}

/// A region with its relevance statistics and final weight.
#[derive(Clone, Debug)]
pub struct RegionRecord<T> {
    pub sample_id: u64,
    pub label: usize,
    pub bbox: RegionBox,
    pub feature: FeatureVector<T>,
    /// Mean cosine to in-class regions, own sample's regions excluded.
    pub phi: T,
    /// Mean cosine to all out-of-class regions.
    pub psi: T,
    /// Softmax of `phi` within the class.
    pub phi_norm: T,
    /// Softmax of `psi` within the class.
    pub psi_norm: T,
    /// `phi_norm / psi_norm`.
    pub lambda: T,
}

/// All regions of one iteration, weighted, in input order.
#[derive(Clone, Debug)]
pub struct RegionWeightTable<T> {
    pub records: Vec<RegionRecord<T>>,
}

impl<T: Real> RegionWeightTable<T> {
    /// Region weights grouped per sample, preserving region order.
    pub fn lambdas_by_sample(&self) -> BTreeMap<u64, Vec<T>> {
        let mut map: BTreeMap<u64, Vec<T>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.sample_id).or_default().push(r.lambda);
        }
        map
    }
}

/// Index partition of a weight table into clean and noisy regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
}

/// Scores every region by contrasting in-class and out-of-class relevance.
///
/// For region j of sample i in class c, with `Z_c` the class's regions and
/// `Z_i` the sample's own regions:
/// `phi = mean cos to Z_c \ Z_i`, `psi = mean cos to regions outside Z_c`,
/// both softmax-normalized inside the class, and `lambda = phi~ / psi~`.
pub fn compute_region_weights<T: Real>(
    regions: &[CroppedRegion<T>],
) -> Result<RegionWeightTable<T>> {
    let n = regions.len();
    if n == 0 {
        return Err(Error::EmptyList);
    }

    // Group by class, and by sample within class, to validate preconditions.
    let mut class_members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in regions.iter().enumerate() {
        class_members.entry(r.label).or_default().push(i);
    }
    if class_members.len() < 2 {
        return Err(Error::TooFewClasses(class_members.len()));
    }
    for (&label, members) in &class_members {
        let mut samples: Vec<u64> = members.iter().map(|&i| regions[i].sample_id).collect();
        samples.sort_unstable();
        samples.dedup();
        if samples.len() < 2 {
            return Err(Error::TooFewSamples {
                label,
                count: samples.len(),
            });
        }
    }

    // Unit-normalized features; cosine of a pair is then a plain dot product.
    let eps = real::<T>(EPS_NORM);
    let dim = regions[0].feature.dim();
    let mut unit = vec![T::zero(); n * dim];
    for (i, r) in regions.iter().enumerate() {
        if r.feature.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: r.feature.dim(),
                right: dim,
            });
        }
        let norm = r.feature.norm();
        if norm <= eps {
            return Err(Error::ZeroVector(EPS_NORM));
        }
        let row = &mut unit[i * dim..(i + 1) * dim];
        row.copy_from_slice(r.feature.values());
        linalg::scale(row, T::one() / norm);
    }

    // Symmetric cosine Gram matrix.
    let mut gram = vec![T::zero(); n * n];
    for i in 0..n {
        gram[i * n + i] = T::one();
        for j in (i + 1)..n {
            let d = linalg::dot(&unit[i * dim..(i + 1) * dim], &unit[j * dim..(j + 1) * dim]);
            gram[i * n + j] = d;
            gram[j * n + i] = d;
        }
    }

    let row_sum = |i: usize, indices: &[usize]| -> T {
        indices.iter().map(|&j| gram[i * n + j]).sum()
    };
    let all: Vec<usize> = (0..n).collect();

    let mut phi = vec![T::zero(); n];
    let mut psi = vec![T::zero(); n];
    for (_, members) in &class_members {
        for &i in members {
            let class_sum = row_sum(i, members);
            let own: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&j| regions[j].sample_id == regions[i].sample_id)
                .collect();
            let own_sum = row_sum(i, &own);
            let in_count = members.len() - own.len();
            debug_assert!(in_count > 0);
            phi[i] = (class_sum - own_sum) / real::<T>(in_count as f64);
            let out_count = n - members.len();
            debug_assert!(out_count > 0);
            psi[i] = (row_sum(i, &all) - class_sum) / real::<T>(out_count as f64);
        }
    }

    // Per-class softmax normalization of both statistics.
    let mut phi_norm = vec![T::zero(); n];
    let mut psi_norm = vec![T::zero(); n];
    for (_, members) in &class_members {
        let sm_phi = linalg::softmax(&members.iter().map(|&i| phi[i]).collect::<Vec<_>>());
        let sm_psi = linalg::softmax(&members.iter().map(|&i| psi[i]).collect::<Vec<_>>());
        for (slot, &i) in members.iter().enumerate() {
            phi_norm[i] = sm_phi[slot];
            psi_norm[i] = sm_psi[slot];
        }
    }

    let records = regions
        .iter()
        .enumerate()
        .map(|(i, r)| RegionRecord {
            sample_id: r.sample_id,
            label: r.label,
            bbox: r.bbox,
            feature: r.feature.clone(),
            phi: phi[i],
            psi: psi[i],
            phi_norm: phi_norm[i],
            psi_norm: psi_norm[i],
            lambda: phi_norm[i] / psi_norm[i],
        })
        .collect();
    Ok(RegionWeightTable { records })
}

/// Splits a weight table at the threshold: `lambda < rho` is noisy, ties go
/// clean.
pub fn partition<T: Real>(table: &RegionWeightTable<T>, rho: T) -> Partition {
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for (i, r) in table.records.iter().enumerate() {
        if r.lambda < rho {
            noisy.push(i);
        } else {
            clean.push(i);
        }
    }
    Partition { clean, noisy }
}

/// Momentum-accumulated per-image weights.
///
/// The first update sets each image's weight to the mean of its region
/// weights; later updates mix with momentum `gamma`:
/// `w_t = gamma * w_{t-1} + (1 - gamma) * mean(lambdas)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorState<T> {
    omega: BTreeMap<u64, T>,
    /// Number of updates applied so far.
    t: usize,
    gamma: T,
}

impl<T: Real> AccumulatorState<T> {
    pub fn new(gamma: T) -> Self {
        AccumulatorState {
            omega: BTreeMap::new(),
            t: 0,
            gamma,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn omega(&self, sample_id: u64) -> Option<T> {
        self.omega.get(&sample_id).copied()
    }

    pub fn omegas(&self) -> &BTreeMap<u64, T> {
        &self.omega
    }
}

/// Applies one iteration of the momentum recurrence to `state`.
pub fn accumulate_image_weights<T: Real>(
    state: &mut AccumulatorState<T>,
    per_image_lambdas: &BTreeMap<u64, Vec<T>>,
) -> Result<()> {
    let first = state.t == 0;
    for (&sample_id, lambdas) in per_image_lambdas {
        if lambdas.is_empty() {
            return Err(Error::EmptyList);
        }
        let mean = lambdas.iter().copied().sum::<T>() / real::<T>(lambdas.len() as f64);
        if first {
            state.omega.insert(sample_id, mean);
        } else {
            let prev = *state
                .omega
                .get(&sample_id)
                .ok_or(Error::MissingPrevState(sample_id))?;
            let g = state.gamma;
            state
                .omega
                .insert(sample_id, g * prev + (T::one() - g) * mean);
        }
    }
    state.t += 1;
    Ok(())
}

/// A stored clean region: where it came from and how much it weighed when it
/// entered the bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry<T> {
    pub sample_id: u64,
    pub bbox: RegionBox,
    pub weight: T,
}

/// Per-class store of the highest-weight clean regions, capacity `2K` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank<T> {
    capacity_per_class: usize,
    classes: BTreeMap<usize, Vec<BankEntry<T>>>,
}

impl<T: Real> MemoryBank<T> {
    /// `capacity_per_class` is `2K` for a K-shot task.
    pub fn new(capacity_per_class: usize) -> Self {
        MemoryBank {
            capacity_per_class,
            classes: BTreeMap::new(),
        }
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn entries(&self, label: usize) -> &[BankEntry<T>] {
        self.classes.get(&label).map_or(&[], |v| v.as_slice())
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    /// Merges incoming clean regions: deduplicates identical
    /// `(sample_id, bbox)` keeping the larger weight, sorts by weight
    /// descending, and keeps the top `capacity_per_class` per class.
    pub fn update(&mut self, incoming: impl IntoIterator<Item = (usize, BankEntry<T>)>) {
        for (label, entry) in incoming {
            let slot = self.classes.entry(label).or_default();
            match slot
                .iter_mut()
                .find(|e| e.sample_id == entry.sample_id && e.bbox == entry.bbox)
            {
                Some(existing) => {
                    if entry.weight > existing.weight {
                        existing.weight = entry.weight;
                    }
                }
                None => slot.push(entry),
            }
        }
        for slot in self.classes.values_mut() {
            // Weight descending; stable deterministic tie-break on identity.
            slot.sort_by(|a, b| {
                b.weight
                    .partial_cmp(&a.weight)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.sample_id.cmp(&b.sample_id))
                    .then_with(|| a.bbox.cmp(&b.bbox))
            });
            slot.truncate(self.capacity_per_class);
        }
    }
}

/// Feeds the clean side of a partition into the bank with `lambda` as the
/// stored weight.
pub fn update_memory_bank<T: Real>(
    bank: &mut MemoryBank<T>,
    table: &RegionWeightTable<T>,
    clean: &[usize],
) {
    bank.update(clean.iter().map(|&i| {
        let r = &table.records[i];
        (
            r.label,
            BankEntry {
                sample_id: r.sample_id,
                bbox: r.bbox,
                weight: r.lambda,
            },
        )
    }));
}
