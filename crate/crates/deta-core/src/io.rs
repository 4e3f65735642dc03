//! Episode and model (de)serialization.
//!
//! Episode files are a single JSON object:
//!
//! ```json
//! {"d":16,"H":8,"W":8,"C":5,"K":10,
//!  "support":[{"id":0,"label":1,"noise":"clean","patches":[[[0.1,...],...],...]}],
//!  "query":[{"id":50,"label":1,"noise":"clean","patches":[[[...]]]}],
//!  "meta":{"seed":7,"ood_ratio":0.3,"clutter_ratio":0.3}}
//! ```
//!
//! `patches` is `H` rows of `W` patches of `d` floats. Boxes elsewhere in the
//! crate are half-open `[row0,row1) x [col0,col1)` patch-index rectangles.
//! Query `label` 0 marks an out-of-distribution query (no true in-task label);
//! it always pairs with `"noise":"ood"`. Support entries carry the same
//! `noise` key so that a write/read round trip preserves the evaluation
//! ground truth; readers accept support entries without it (defaulting to
//! `"clean"`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, HeadParams};
use crate::cora::MemoryBank;
use crate::episode::{
    Episode, EpisodeMeta, FeatureVector, NoiseTag, PatchGrid, QuerySample, SupportSample,
};
use crate::real::Real;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct RawEpisode<T> {
    d: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "K")]
    k: usize,
    support: Vec<RawSupport<T>>,
    query: Vec<RawQuery<T>>,
    meta: EpisodeMeta,
}

#[derive(Serialize, Deserialize)]
struct RawSupport<T> {
    id: u64,
    label: usize,
    #[serde(default = "default_noise")]
    noise: NoiseTag,
    patches: Vec<Vec<Vec<T>>>,
}

#[derive(Serialize, Deserialize)]
struct RawQuery<T> {
    id: u64,
    /// 0 = OOD marker.
    label: usize,
    noise: NoiseTag,
    patches: Vec<Vec<Vec<T>>>,
}

fn default_noise() -> NoiseTag {
    NoiseTag::Clean
}

fn grid_to_patches<T: Real>(grid: &PatchGrid<T>) -> Vec<Vec<Vec<T>>> {
    (0..grid.rows())
        .map(|r| {
            (0..grid.cols())
                .map(|c| grid.patch(r, c).to_vec())
                .collect()
        })
        .collect()
}

fn patches_to_grid<T: Real>(
    id: u64,
    patches: Vec<Vec<Vec<T>>>,
    rows: usize,
    cols: usize,
    dim: usize,
) -> Result<PatchGrid<T>> {
    if patches.len() != rows {
        return Err(Error::Schema(format!(
            "sample {id}: {} patch rows, header says H={rows}",
            patches.len()
        )));
    }
    let nested: Vec<Vec<FeatureVector<T>>> = patches
        .into_iter()
        .map(|row| {
            if row.len() != cols {
                return Err(Error::Schema(format!(
                    "sample {id}: {} patch cols, header says W={cols}",
                    row.len()
                )));
            }
            row.into_iter()
                .map(|p| {
                    if p.len() != dim {
                        return Err(Error::Schema(format!(
                            "sample {id}: patch length {}, header says d={dim}",
                            p.len()
                        )));
                    }
                    Ok(FeatureVector::new(p))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let grid = PatchGrid::from_patches(id, nested)?;
    Ok(grid)
}

/// Serializes an episode to the JSON schema above.
pub fn episode_to_json<T: Real>(episode: &Episode<T>) -> Result<String> {
    episode.validate()?;
    let raw = RawEpisode {
        d: episode.dim,
        h: episode.rows,
        w: episode.cols,
        c: episode.class_count,
        k: episode.shots,
        support: episode
            .support
            .iter()
            .map(|s| RawSupport {
                id: s.grid.sample_id(),
                label: s.label,
                noise: s.noise,
                patches: grid_to_patches(&s.grid),
            })
            .collect(),
        query: episode
            .query
            .iter()
            .map(|q| RawQuery {
                id: q.grid.sample_id(),
                label: q.label.unwrap_or(0),
                noise: q.noise,
                patches: grid_to_patches(&q.grid),
            })
            .collect(),
        meta: episode.meta,
    };
    Ok(serde_json::to_string(&raw)?)
}

/// Parses and validates an episode from its JSON form.
pub fn episode_from_json<T: Real>(text: &str) -> Result<Episode<T>> {
    let raw: RawEpisode<T> = serde_json::from_str(text)?;
    let support = raw
        .support
        .into_iter()
        .map(|s| {
            Ok(SupportSample {
                grid: patches_to_grid(s.id, s.patches, raw.h, raw.w, raw.d)?,
                label: s.label,
                noise: s.noise,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let query = raw
        .query
        .into_iter()
        .map(|q| {
            let label = match q.label {
                0 => None,
                l => Some(l),
            };
            if (label.is_none()) != (q.noise == NoiseTag::Ood) {
                return Err(Error::Schema(format!(
                    "query {}: label 0 must pair with noise \"ood\"",
                    q.id
                )));
            }
            Ok(QuerySample {
                grid: patches_to_grid(q.id, q.patches, raw.h, raw.w, raw.d)?,
                label,
                noise: q.noise,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let episode = Episode {
        class_count: raw.c,
        shots: raw.k,
        dim: raw.d,
        rows: raw.h,
        cols: raw.w,
        support,
        query,
        meta: raw.meta,
    };
    episode.validate()?;
    Ok(episode)
}

pub fn write_episode<T: Real>(episode: &Episode<T>, path: &Path) -> Result<()> {
    fs::write(path, episode_to_json(episode)?)?;
    Ok(())
}

pub fn read_episode<T: Real>(path: &Path) -> Result<Episode<T>> {
    let text = fs::read_to_string(path)?;
    episode_from_json(&text)
}

/// Everything `eval` needs on top of the episode file: the adapted head, the
/// clean-region memory bank, and the adaptation config used to produce them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile<T> {
    pub head: HeadParams<T>,
    pub bank: MemoryBank<T>,
    pub config: AdaptConfig,
}

pub fn write_model<T: Real>(model: &ModelFile<T>, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string(model)?)?;
    Ok(())
}

pub fn read_model<T: Real>(path: &Path) -> Result<ModelFile<T>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
