//! Deliberately naive reference implementations used only to verify the main
//! paths (in the acceptance suite and `bench --check`). Nothing here shares
//! code with what it checks: the region-weight oracle evaluates the weighting
//! definitions pair by pair, the gradient oracle uses central finite
//! differences, and the metric oracles count exhaustively.

use crate::adapt::{total_loss, HeadGrads, HeadParams, IterationBatch};
use crate::cora::CroppedRegion;
use crate::episode::cosine;

/// Naive evaluation of the region-weighting chain: per-pair cosine means,
/// plain softmax inside each class, ratio. Field order matches
/// `RegionRecord`: `(phi, psi, phi_norm, psi_norm, lambda)`.
pub fn cora_brute_force(regions: &[CroppedRegion<f64>]) -> Vec<(f64, f64, f64, f64, f64)> {
    let n = regions.len();
    let mut phi = vec![0.0; n];
    let mut psi = vec![0.0; n];
    for i in 0..n {
        let mut in_class = Vec::new();
        let mut out_class = Vec::new();
        for j in 0..n {
            if regions[j].label == regions[i].label {
                if regions[j].sample_id != regions[i].sample_id {
                    in_class.push(j);
                }
            } else {
                out_class.push(j);
            }
        }
        phi[i] = in_class
            .iter()
            .map(|&j| cosine(&regions[i].feature, &regions[j].feature).unwrap())
            .sum::<f64>()
            / in_class.len() as f64;
        psi[i] = out_class
            .iter()
            .map(|&j| cosine(&regions[i].feature, &regions[j].feature).unwrap())
            .sum::<f64>()
            / out_class.len() as f64;
    }
    (0..n)
        .map(|i| {
            let class: Vec<usize> = (0..n).filter(|&j| regions[j].label == regions[i].label).collect();
            let z_phi: f64 = class.iter().map(|&j| phi[j].exp()).sum();
            let z_psi: f64 = class.iter().map(|&j| psi[j].exp()).sum();
            let pn = phi[i].exp() / z_phi;
            let sn = psi[i].exp() / z_psi;
            (phi[i], psi[i], pn, sn, pn / sn)
        })
        .collect()
}

/// Central-difference gradient of the adaptation loss, one probe per
/// parameter.
pub fn finite_difference_grad(
    params: &HeadParams<f64>,
    batch: &IterationBatch<f64>,
    beta: f64,
    rho: f64,
    step: f64,
) -> HeadGrads<f64> {
    let mut grads = HeadGrads::zeros_like(params);
    let mut probe = params.clone();
    let blocks: [(fn(&mut HeadParams<f64>) -> &mut Vec<f64>, fn(&mut HeadGrads<f64>) -> &mut Vec<f64>); 4] = [
        (|p| &mut p.w1, |g| &mut g.w1),
        (|p| &mut p.b1, |g| &mut g.b1),
        (|p| &mut p.w2, |g| &mut g.w2),
        (|p| &mut p.b2, |g| &mut g.b2),
    ];
    for (param_block, grad_block) in blocks {
        let len = param_block(&mut probe).len();
        for i in 0..len {
            let original = param_block(&mut probe)[i];
            param_block(&mut probe)[i] = original + step;
            let plus = total_loss(&probe, batch, beta, rho).expect("probe loss");
            param_block(&mut probe)[i] = original - step;
            let minus = total_loss(&probe, batch, beta, rho).expect("probe loss");
            param_block(&mut probe)[i] = original;
            grad_block(&mut grads)[i] = (plus - minus) / (2.0 * step);
        }
    }
    grads
}

/// `max_i |a_i - b_i| / max(1, |a_i|, |b_i|)` over every parameter.
pub fn max_relative_error(a: &HeadGrads<f64>, b: &HeadGrads<f64>) -> f64 {
    let pairs = a
        .w1
        .iter()
        .zip(&b.w1)
        .chain(a.b1.iter().zip(&b.b1))
        .chain(a.w2.iter().zip(&b.w2))
        .chain(a.b2.iter().zip(&b.b2));
    pairs
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Exhaustive pairwise AUROC: `(#{id > ood} + 0.5 #ties) / (n_id * n_ood)`.
pub fn auroc_pairwise(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &s in id_scores {
        for &o in ood_scores {
            if s > o {
                wins += 1.0;
            } else if s == o {
                wins += 0.5;
            }
        }
    }
    wins / (id_scores.len() as f64 * ood_scores.len() as f64)
}

/// FPR at 95% TPR by direct enumeration of every candidate threshold.
pub fn fpr_by_enumeration(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let n = id_scores.len();
    let needed = (19 * n).div_ceil(20);
    // The threshold is the largest candidate admitting >= 95% of ID scores.
    let mut best: Option<f64> = None;
    for &cand in id_scores {
        let admitted = id_scores.iter().filter(|&&s| s >= cand).count();
        if admitted >= needed && best.is_none_or(|b| cand > b) {
            best = Some(cand);
        }
    }
    let t = best.expect("nonempty id scores");
    ood_scores.iter().filter(|&&s| s >= t).count() as f64 / ood_scores.len() as f64
}
