//! The training loop: sample identity-balanced batches, embed, mine
//! violating triplets, and step the optimizer on their summed loss.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{self, EncoderConfig, OptimizerState, Weights};
use crate::rng::RngState;
use crate::types::{Dataset, Sample, Split};

use super::{
    candidate_pairs, select_triplets, triplet_loss, triplet_loss_grad, BatchPlan, IdentityGroup,
    MiningMetric, MiningReport, TripletLossParams,
};

/// Everything the training loop needs besides the data and encoder shape.
#[derive(Debug, Clone)]
pub struct TrainParams {
    pub epochs: usize,
    pub plan: BatchPlan,
    pub loss: TripletLossParams,
    pub metric: MiningMetric,
    /// Initial optimizer state (kind, learning rate).
    pub optimizer: OptimizerState,
    /// Save a checkpoint every N epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Stream per-epoch [`MiningReport`]s as JSON lines.
    pub mining_log: Option<PathBuf>,
}

impl TrainParams {
    pub fn new(epochs: usize) -> Self {
        TrainParams {
            epochs,
            plan: BatchPlan::default(),
            loss: TripletLossParams::default(),
            metric: MiningMetric::default(),
            optimizer: OptimizerState::adam(1e-3),
            checkpoint_every: 25,
            checkpoint_path: None,
            mining_log: None,
        }
    }
}

/// Train an encoder on the train split of `dataset`.
///
/// Per epoch, `ceil(train_size / (P*K))` batches of P identities x K images
/// are drawn; each batch is embedded, mined, and — when any triplet
/// violates the margin — stepped with gradients averaged over the mined
/// triplets. A batch with no violating triplets changes nothing. Fully
/// deterministic in `rng`: initialization, batch composition, and negative
/// selection all draw from named sub-streams.
pub fn train(
    dataset: &Dataset,
    config: &EncoderConfig,
    params: &TrainParams,
    rng: &RngState,
) -> Result<(Weights, Vec<MiningReport>)> {
    config.validate()?;
    params.plan.validate()?;
    if params.loss.alpha < 0.0 {
        return Err(Error::Config("alpha must be non-negative".into()));
    }
    let train_samples: Vec<&Sample> = dataset.split(Split::Train).collect();
    if train_samples.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let batch_size = params.plan.batch_size();
    if batch_size > train_samples.len() {
        return Err(Error::Config(format!(
            "batch plan needs {batch_size} samples but the train split has {}",
            train_samples.len()
        )));
    }

    // Identity index, deterministic order. Only identities with at least
    // two images can anchor a triplet.
    let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in train_samples.iter().enumerate() {
        by_identity.entry(s.identity).or_default().push(i);
    }
    let eligible: Vec<u32> = by_identity
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(&id, _)| id)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Config(
            "need at least 2 identities with 2+ train images".into(),
        ));
    }

    let mut weights = model::init(config, rng)?;
    let mut opt = params.optimizer.clone();
    let mut reports = Vec::with_capacity(params.epochs);
    let mut log = match &params.mining_log {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };

    let batches_per_epoch = train_samples.len().div_ceil(batch_size);
    for epoch in 0..params.epochs {
        let mut candidates = 0u64;
        let mut used = 0u64;
        let mut loss_sum = 0.0f64;

        for batch_idx in 0..batches_per_epoch {
            let bstate = rng.stream(&format!("batch/e{epoch}/b{batch_idx}"));
            let batch = compose_batch(&bstate, &eligible, &by_identity, &params.plan);

            // Rows follow group order; remember each sample's row.
            let members: Vec<usize> = batch.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            let batch_samples: Vec<&Sample> = members.iter().map(|&i| train_samples[i]).collect();
            let input = model::batch_from_samples(&batch_samples, config)?;
            let (embeddings, cache) = model::forward(&weights, input.view())?;

            let mut row_of = std::collections::HashMap::new();
            let mut groups = Vec::with_capacity(batch.len());
            let mut row = 0usize;
            for (identity, idxs) in &batch {
                let mut g = IdentityGroup {
                    identity: *identity,
                    embeddings: Vec::with_capacity(idxs.len()),
                };
                for &i in idxs {
                    let sid = train_samples[i].sample_id;
                    row_of.insert(sid, row);
                    g.embeddings
                        .push(crate::types::Embedding::new(sid, embeddings.row(row).to_vec()));
                    row += 1;
                }
                groups.push(g);
            }
            candidates += candidate_pairs(&groups);

            let miner_rng = rng.stream(&format!("miner/e{epoch}/b{batch_idx}"));
            let triplets = select_triplets(&groups, &params.loss, params.metric, &miner_rng)?;
            if triplets.is_empty() {
                continue;
            }

            // Accumulate loss gradients on the embeddings; scale by the
            // triplet count for step-size stability.
            let n = embeddings.nrows();
            let d = embeddings.ncols();
            let mut d_emb = Array2::<f64>::zeros((n, d));
            let mut batch_loss = 0.0;
            for t in &triplets {
                let (ra, rp, rn) = (row_of[&t.anchor], row_of[&t.positive], row_of[&t.negative]);
                let a = embeddings.row(ra).to_vec();
                let p = embeddings.row(rp).to_vec();
                let neg = embeddings.row(rn).to_vec();
                batch_loss += triplet_loss(&a, &p, &neg, &params.loss)?;
                let (ga, gp, gn) = triplet_loss_grad(&a, &p, &neg, &params.loss)?;
                for k in 0..d {
                    d_emb[(ra, k)] += ga[k];
                    d_emb[(rp, k)] += gp[k];
                    d_emb[(rn, k)] += gn[k];
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric {
                    layer: "triplet_loss".into(),
                    msg: format!("non-finite batch loss at epoch {epoch}"),
                });
            }
            let scale = 1.0 / triplets.len() as f64;
            d_emb.mapv_inplace(|v| v * scale);

            let grads = model::backward(&weights, &cache, d_emb.view())?;
            let (w2, o2) = model::apply_update(weights, &grads, opt)?;
            weights = w2;
            opt = o2;

            used += triplets.len() as u64;
            loss_sum += batch_loss;
        }

        let report = MiningReport {
            epoch,
            candidates,
            used,
            mean_loss: if used > 0 { loss_sum / used as f64 } else { 0.0 },
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&report)
                .map_err(|e| Error::Invalid(format!("mining report serialization: {e}")))?;
            writeln!(w, "{line}").map_err(|e| {
                Error::io(params.mining_log.as_ref().unwrap(), e)
            })?;
        }
        reports.push(report);

        if let Some(path) = &params.checkpoint_path {
            if params.checkpoint_every > 0 && (epoch + 1) % params.checkpoint_every == 0 {
                model::save_checkpoint(&weights, &opt, path)?;
            }
        }
    }

    if let Some(w) = log.as_mut() {
        w.flush()
            .map_err(|e| Error::io(params.mining_log.as_ref().unwrap(), e))?;
    }
    if let Some(path) = &params.checkpoint_path {
        model::save_checkpoint(&weights, &opt, path)?;
    }
    Ok((weights, reports))
}

/// One batch: up to P identities, up to K images each, drawn without
/// replacement from per-batch shuffles.
fn compose_batch(
    bstate: &RngState,
    eligible: &[u32],
    by_identity: &BTreeMap<u32, Vec<usize>>,
    plan: &BatchPlan,
) -> Vec<(u32, Vec<usize>)> {
    let mut r = bstate.rng();
    let mut ids: Vec<u32> = eligible.to_vec();
    shuffle(&mut ids, &mut r);
    ids.truncate(plan.identities_per_batch);
    ids.iter()
        .map(|&id| {
            let mut pool = by_identity[&id].clone();
            shuffle(&mut pool, &mut r);
            pool.truncate(plan.images_per_identity);
            (id, pool)
        })
        .collect()
}

fn shuffle<T>(xs: &mut [T], r: &mut impl Rng) {
    for i in (1..xs.len()).rev() {
        let j = r.random_range(0..=i);
        xs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_dataset, AugmentParams, DatasetParams};

    fn small_dataset(dir: &std::path::Path, seed: u64) -> Dataset {
        let params = DatasetParams {
            n_identities: 3,
            imgs_per_id: 4,
            size: (16, 16),
            spots_per_identity: 4,
            augment: AugmentParams {
                copies_per_image: 1,
                noise_sigma: 0.0,
                ..AugmentParams::default()
            },
            split_frac: 0.75,
            split_by_identity: false,
        };
        build_dataset(&params, dir, &RngState::new(seed)).unwrap();
        crate::io::load_dataset(dir.join("manifest.jsonl")).unwrap()
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input: (16, 16, 1),
            conv_blocks: vec![4],
            embed_dim: 8,
        }
    }

    fn small_params(epochs: usize) -> TrainParams {
        let mut p = TrainParams::new(epochs);
        p.plan = BatchPlan {
            identities_per_batch: 2,
            images_per_identity: 2,
        };
        p.checkpoint_every = 0;
        p
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 1);
        let cfg = small_config();
        let (w, reports) = train(&ds, &cfg, &small_params(0), &RngState::new(5)).unwrap();
        let init = crate::model::init(&cfg, &RngState::new(5)).unwrap();
        assert_eq!(w.tensors, init.tensors);
        assert!(reports.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 2);
        let cfg = small_config();
        let (w1, r1) = train(&ds, &cfg, &small_params(2), &RngState::new(9)).unwrap();
        let (w2, r2) = train(&ds, &cfg, &small_params(2), &RngState::new(9)).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(w1.tensors, w2.tensors);
    }

    #[test]
    fn no_violations_means_no_update() {
        // All images of an identity are bit-identical (no noise, identity
        // augmentations), so every positive distance is exactly zero and a
        // zero margin admits no violators: mining comes back empty for
        // every batch and the weights never move.
        let dir = tempfile::tempdir().unwrap();
        let params = DatasetParams {
            n_identities: 2,
            imgs_per_id: 4,
            size: (16, 16),
            spots_per_identity: 4,
            augment: AugmentParams {
                tilt_max_deg: 0.0,
                vshift_max_frac: 0.0,
                brightness_range: (1.0, 1.0),
                noise_sigma: 0.0,
                copies_per_image: 1,
            },
            split_frac: 0.75,
            split_by_identity: false,
        };
        build_dataset(&params, dir.path(), &RngState::new(3)).unwrap();
        let ds = crate::io::load_dataset(dir.path().join("manifest.jsonl")).unwrap();
        let cfg = small_config();
        let mut p = small_params(1);
        p.loss = TripletLossParams { alpha: 0.0 };
        let (w, reports) = train(&ds, &cfg, &p, &RngState::new(4)).unwrap();
        let init = crate::model::init(&cfg, &RngState::new(4)).unwrap();
        assert_eq!(w.tensors, init.tensors);
        assert_eq!(reports[0].used, 0);
        assert_eq!(reports[0].mean_loss, 0.0);
        assert!(reports[0].candidates > 0);
    }

    #[test]
    fn mining_log_streams_one_line_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 5);
        let cfg = small_config();
        let mut p = small_params(3);
        let log = dir.path().join("mining.jsonl");
        p.mining_log = Some(log.clone());
        let (_, reports) = train(&ds, &cfg, &p, &RngState::new(6)).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for (line, report) in lines.iter().zip(&reports) {
            let parsed: MiningReport = serde_json::from_str(line).unwrap();
            assert_eq!(&parsed, report);
        }
        assert!(lines[0].starts_with("{\"epoch\":0,\"candidates\":"));
    }

    #[test]
    fn batch_plan_larger_than_train_split_is_startup_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 7);
        let cfg = small_config();
        let mut p = small_params(1);
        p.plan = BatchPlan {
            identities_per_batch: 50,
            images_per_identity: 50,
        };
        assert!(matches!(
            train(&ds, &cfg, &p, &RngState::new(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoints_written_at_end() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 8);
        let cfg = small_config();
        let mut p = small_params(1);
        let ckpt = dir.path().join("model.ckpt");
        p.checkpoint_path = Some(ckpt.clone());
        let (w, _) = train(&ds, &cfg, &p, &RngState::new(2)).unwrap();
        let (loaded, _) = crate::model::load_checkpoint(&ckpt).unwrap();
        assert_eq!(w.tensors, loaded.tensors);
    }
}
