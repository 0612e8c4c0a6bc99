//! Bootstrap balancing of the labeled unsafe set and warm-start retraining on the union of
//! the original training set and the balanced set.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micronet::{train, LabeledDataset, Network, Sample, Target, TrainConfig};
use crate::selector::UnsafeSet;

/// Per-cluster multisets of image ids, all nonempty clusters of the same size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedUnsafeSet {
    pub clusters: Vec<Vec<String>>,
}

impl BalancedUnsafeSet {
    pub fn total(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.clusters.iter().flatten()
    }
}

/// Resamples `items` to exactly `target` elements. When growing, every item is kept once and
/// the rest is drawn with replacement; when shrinking, a uniform subset without replacement is
/// kept.
pub fn bootstrap_to<T: Clone, R: Rng + ?Sized>(items: &[T], target: usize, rng: &mut R) -> Vec<T> {
    if target == items.len() {
        return items.to_vec();
    }
    if items.is_empty() {
        return Vec::new();
    }
    if target < items.len() {
        return items.choose_multiple(rng, target).cloned().collect();
    }
    let mut out = items.to_vec();
    out.extend((items.len()..target).map(|_| items[rng.gen_range(0..items.len())].clone()));
    out
}

/// Brings every nonempty group up to the size of the largest one by bootstrap resampling.
/// Empty groups stay empty.
pub fn balance_groups(groups: &[Vec<String>], seed: u64) -> Result<Vec<Vec<String>>> {
    let max = groups.iter().map(Vec::len).max().unwrap_or(0);
    if max == 0 {
        return Err(Error::invalid("cannot balance: every cluster is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(groups
        .iter()
        .enumerate()
        .map(|(c, g)| {
            if g.is_empty() {
                log::warn!("cluster {c} has no unsafe images and is skipped during balancing");
            }
            bootstrap_to(g, max, &mut rng)
        })
        .collect())
}

pub fn balance(unsafe_set: &UnsafeSet, seed: u64) -> Result<BalancedUnsafeSet> {
    let groups: Vec<Vec<String>> = unsafe_set
        .selected
        .iter()
        .map(|s| s.iter().map(|x| x.id.clone()).collect())
        .collect();
    Ok(BalancedUnsafeSet {
        clusters: balance_groups(&groups, seed)?,
    })
}

/// Attaches images and labels to the balanced ids, keeping duplicates.
pub fn label_balanced(
    balanced: &BalancedUnsafeSet,
    images: &HashMap<String, Sample>,
) -> Result<LabeledDataset> {
    balanced
        .iter()
        .map(|id| {
            images
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("label for unsafe image {id}")))
        })
        .collect::<Result<Vec<_>>>()
        .map(LabeledDataset::new)
}

/// Builds a labeled dataset from the labels CSV content (`id -> class`) and an image lookup.
pub fn attach_labels(
    balanced: &BalancedUnsafeSet,
    labels: &HashMap<String, Target>,
    images: &HashMap<String, crate::micronet::Tensor>,
) -> Result<LabeledDataset> {
    balanced
        .iter()
        .map(|id| {
            let target = labels
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("label for unsafe image {id}")))?;
            let image = images
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("image file for unsafe image {id}")))?;
            Ok(Sample {
                id: id.clone(),
                image: image.clone(),
                target: target.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(LabeledDataset::new)
}

/// Trains on the original training set followed by the balanced set. With
/// `config.warm_start` the current weights are the starting point.
pub fn retrain(
    network: &Network,
    original: &LabeledDataset,
    balanced: &LabeledDataset,
    config: &TrainConfig,
) -> Result<Network> {
    train(network, &original.union(balanced), config)
}
