//! Triplet loss and in-batch violating-triplet mining.
//!
//! The loss for one (anchor, positive, negative) triple of embeddings is
//!
//! ```text
//! L = max(0, ‖a - p‖² - ‖a - n‖² + alpha)
//! ```
//!
//! and a batch's loss is the sum over its mined triplets. Training only on
//! triplets that still violate the margin is what makes the method cheap:
//! triplets the model already separates contribute nothing but compute.
//!
//! Mining walks every identity in the batch, takes each of its embeddings
//! as an anchor, measures L2 distances to every other-identity embedding,
//! and then for each remaining same-identity embedding (the positive)
//! collects the negatives with `negative_dist - positive_dist < alpha`,
//! picking one uniformly at random. Every ordered (anchor, positive) pair
//! is considered exactly once, and the final triplet list is shuffled.
//!
//! The violation check uses plain L2 distances by default while the loss
//! uses squared distances; [`MiningMetric::SqL2`] switches the check to
//! squared distances for consistency with the loss.

mod train;

pub use train::{train, TrainParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::types::{Embedding, Triplet};

/// Margin parameters for the loss and the violation check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLossParams {
    pub alpha: f64,
}

impl Default for TripletLossParams {
    fn default() -> Self {
        TripletLossParams { alpha: 0.2 }
    }
}

/// Distance used by the miner's violation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningMetric {
    /// Plain L2 norms (the default).
    L2,
    /// Squared L2, matching the loss.
    SqL2,
}

impl Default for MiningMetric {
    fn default() -> Self {
        MiningMetric::L2
    }
}

/// Batch composition: P identities x K images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub identities_per_batch: usize,
    pub images_per_identity: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        BatchPlan {
            identities_per_batch: 16,
            images_per_identity: 8,
        }
    }
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.images_per_identity
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities_per_batch < 2 || self.images_per_identity < 2 {
            return Err(Error::Config(
                "batch plan needs at least 2 identities and 2 images per identity".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch mining telemetry.
///
/// `candidates` counts the ordered (anchor, positive) pairs examined;
/// `used` counts the triplets actually emitted and trained on, so
/// `used <= candidates`. A shrinking `used` across epochs is the expected
/// starvation signature of a model that is learning to separate identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub epoch: usize,
    pub candidates: u64,
    pub used: u64,
    pub mean_loss: f64,
}

/// Embeddings of one identity within a batch.
#[derive(Debug, Clone)]
pub struct IdentityGroup {
    pub identity: u32,
    pub embeddings: Vec<Embedding>,
}

fn check_same_len(a: &[f64], p: &[f64], n: &[f64]) -> Result<()> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::Contract(format!(
            "embedding length mismatch: {} / {} / {}",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hinge loss of one triplet: `max(0, ‖a-p‖² - ‖a-n‖² + alpha)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], params: &TripletLossParams) -> Result<f64> {
    check_same_len(a, p, n)?;
    Ok((sq_dist(a, p) - sq_dist(a, n) + params.alpha).max(0.0))
}

/// Gradients of [`triplet_loss`] with respect to each embedding.
///
/// Zero vectors when the hinge is inactive; otherwise
/// `dL/da = 2(n - p)`, `dL/dp = -2(a - p)`, `dL/dn = 2(a - n)`.
pub fn triplet_loss_grad(
    a: &[f64],
    p: &[f64],
    n: &[f64],
    params: &TripletLossParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_same_len(a, p, n)?;
    let d = a.len();
    let active = sq_dist(a, p) - sq_dist(a, n) + params.alpha > 0.0;
    if !active {
        return Ok((vec![0.0; d], vec![0.0; d], vec![0.0; d]));
    }
    let mut ga = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let mut gn = vec![0.0; d];
    for i in 0..d {
        ga[i] = 2.0 * (n[i] - p[i]);
        gp[i] = -2.0 * (a[i] - p[i]);
        gn[i] = 2.0 * (a[i] - n[i]);
    }
    Ok((ga, gp, gn))
}

/// Mine the violating triplets of a batch.
///
/// See the module docs for the exact loop structure. Identities with fewer
/// than two embeddings contribute no anchors (their embeddings still serve
/// as negatives); fewer than two identities is an error. Negative choice is
/// drawn from a per-anchor sub-stream of `rng`, so the result is
/// independent of evaluation order; the returned list is shuffled with the
/// `shuffle` sub-stream.
pub fn select_triplets(
    groups: &[IdentityGroup],
    params: &TripletLossParams,
    metric: MiningMetric,
    rng: &RngState,
) -> Result<Vec<Triplet>> {
    if groups.len() < 2 {
        return Err(Error::Contract(format!(
            "mining needs at least 2 identities, got {}",
            groups.len()
        )));
    }
    {
        let mut ids: Vec<u32> = groups.iter().map(|g| g.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != groups.len() {
            return Err(Error::Contract("duplicate identity among mining groups".into()));
        }
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        match metric {
            MiningMetric::L2 => sq_dist(a, b).sqrt(),
            MiningMetric::SqL2 => sq_dist(a, b),
        }
    };

    let mut triplets = Vec::new();
    let mut anchor_index = 0usize;
    for (gi, group) in groups.iter().enumerate() {
        for (i, anchor) in group.embeddings.iter().enumerate() {
            let mut anchor_rng = rng.stream(&format!("a{anchor_index}")).rng();
            anchor_index += 1;
            // Distances from this anchor to every other-identity embedding,
            // in group-then-member order.
            let negatives: Vec<(&Embedding, f64)> = groups
                .iter()
                .enumerate()
                .filter(|(gj, _)| *gj != gi)
                .flat_map(|(_, g)| g.embeddings.iter())
                .map(|e| (e, dist(&anchor.values, &e.values)))
                .collect();
            for (j, positive) in group.embeddings.iter().enumerate() {
                if j == i {
                    continue;
                }
                let positive_dist = dist(&anchor.values, &positive.values);
                let violators: Vec<&Embedding> = negatives
                    .iter()
                    .filter(|(_, nd)| nd - positive_dist < params.alpha)
                    .map(|(e, _)| *e)
                    .collect();
                if violators.is_empty() {
                    continue;
                }
                use rand::Rng;
                let pick = anchor_rng.random_range(0..violators.len());
                triplets.push(Triplet {
                    anchor: anchor.sample_id,
                    positive: positive.sample_id,
                    negative: violators[pick].sample_id,
                });
            }
        }
    }
    let mut shuffle_rng = rng.stream("shuffle").rng();
    shuffle(&mut triplets, &mut shuffle_rng);
    Ok(triplets)
}

/// Ordered (anchor, positive) pairs a batch of these groups will examine.
pub fn candidate_pairs(groups: &[IdentityGroup]) -> u64 {
    groups
        .iter()
        .map(|g| {
            let k = g.embeddings.len() as u64;
            k * k.saturating_sub(1)
        })
        .sum()
}

fn shuffle<T>(xs: &mut [T], r: &mut impl rand::Rng) {
    for i in (1..xs.len()).rev() {
        let j = r.random_range(0..=i);
        xs.swap(i, j);
    }
}
