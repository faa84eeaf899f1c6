//! All-way K-shot episode sampling over species and keypoint splits.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::data::{aux_keypoints, Dataset, Sample, AUX_NODES, AUX_PATHS, BASE_KEYPOINTS, NOVEL_KEYPOINTS, NUM_KEYPOINTS};
use crate::error::{param, Error, Result};
use crate::fskd::Keypoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeypointSet {
    Base,
    Novel,
    All,
}

impl KeypointSet {
    pub fn ids(self) -> Vec<usize> {
        match self {
            KeypointSet::Base => BASE_KEYPOINTS.to_vec(),
            KeypointSet::Novel => NOVEL_KEYPOINTS.to_vec(),
            KeypointSet::All => (0..NUM_KEYPOINTS).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KeypointSet::Base => "base",
            KeypointSet::Novel => "novel",
            KeypointSet::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [KeypointSet::Base, KeypointSet::Novel, KeypointSet::All].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeciesPool {
    Seen,
    Unseen,
}

/// Species held out from training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeciesSplit {
    pub unseen: Vec<usize>,
    pub total: usize,
}

impl SpeciesSplit {
    pub fn new(total: usize, unseen: Vec<usize>) -> Result<Self> {
        if unseen.iter().any(|&s| s >= total) {
            return param(format!("unseen species {unseen:?} outside 0..{total}"));
        }
        Ok(Self { unseen, total })
    }

    pub fn seen(&self) -> Vec<usize> {
        (0..self.total).filter(|s| !self.unseen.contains(s)).collect()
    }

    pub fn pool(&self, p: SpeciesPool) -> Vec<usize> {
        match p {
            SpeciesPool::Seen => self.seen(),
            SpeciesPool::Unseen => self.unseen.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub k: usize,
    pub queries: usize,
    pub keypoints: KeypointSet,
    pub species: SpeciesPool,
    /// Append the auxiliary path keypoints as extra types.
    pub aux: bool,
}

impl EpisodeSpec {
    pub fn train(k: usize, queries: usize, aux: bool) -> Self {
        Self { k, queries, keypoints: KeypointSet::Base, species: SpeciesPool::Seen, aux }
    }

    pub fn test(k: usize, queries: usize, keypoints: KeypointSet) -> Self {
        Self { k, queries, keypoints, species: SpeciesPool::Unseen, aux: false }
    }
}

/// Auxiliary keypoint type ids follow the annotated ones.
pub fn aux_type(path: usize, node: usize) -> usize {
    NUM_KEYPOINTS + path * AUX_NODES.len() + node
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub species: usize,
    pub supports: Vec<usize>,
    pub queries: Vec<usize>,
    /// Keypoint type ids; ids past the annotated schema are auxiliary.
    pub types: Vec<usize>,
}

/// Keypoints of `sample` for the given type ids.
pub fn keypoints_for(sample: &Sample, types: &[usize]) -> Vec<Keypoint> {
    let aux = if types.iter().any(|&t| t >= NUM_KEYPOINTS) {
        aux_keypoints(&sample.keypoints, &AUX_PATHS, &AUX_NODES)
    } else {
        Vec::new()
    };
    types
        .iter()
        .map(|&t| if t < NUM_KEYPOINTS { sample.keypoints[t] } else { aux[t - NUM_KEYPOINTS] })
        .collect()
}

pub fn sample_episode(data: &Dataset, split: &SpeciesSplit, spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    let pool = split.pool(spec.species);
    let species = *pool
        .choose(rng)
        .ok_or_else(|| Error::Contract(format!("{:?} species pool is empty", spec.species)))?;
    let items = data.of_species(species);
    let need = spec.k + spec.queries;
    if spec.k == 0 || spec.queries == 0 || items.len() < need {
        return param(format!("{} supports and {} queries from {} images", spec.k, spec.queries, items.len()));
    }
    let picked: Vec<usize> = index::sample(rng, items.len(), need).into_iter().map(|i| items[i]).collect();
    let mut types = spec.keypoints.ids();
    if spec.aux {
        for p in 0..AUX_PATHS.len() {
            types.extend((0..AUX_NODES.len()).map(|n| aux_type(p, n)));
        }
    }
    Ok(Episode {
        species,
        supports: picked[..spec.k].to_vec(),
        queries: picked[spec.k..].to_vec(),
        types,
    })
}
