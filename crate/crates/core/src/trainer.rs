//! Pretraining loop: per-step random channel sampling, pairwise CLIP loss
//! over the three towers, AdamW with linear warmup + cosine decay, validation
//! loss tracking and best-checkpoint selection.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ChipIndex, Split};
use crate::loss::{multimodal_clip_loss, multimodal_clip_loss_grad, EmbeddingBatch};
use crate::model::{
    sample_channel, save_checkpoint, Modality, TowerSet, MAX_TEMPERATURE, MIN_TEMPERATURE,
};
use crate::rng::child_rng;
use crate::synth::ModalityChip;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps between validation evaluations; 0 means once per epoch.
    pub eval_every: usize,
    /// Dedicated seed for validation channel sampling, so the metric is
    /// comparable across checkpoints.
    pub val_seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Fail on a chip missing a modality (default) instead of skipping it.
    pub fail_fast_missing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 0,
            val_seed: 0x56414c,
            checkpoint_dir: None,
            fail_fast_missing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2 for contrastive training"));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        Ok(())
    }
}

/// One chip's rasters across modalities (None = missing).
#[derive(Debug, Clone)]
pub struct TrainChip {
    pub chip_id: u64,
    pub modalities: [Option<ModalityChip>; 3],
}

impl TrainChip {
    pub fn complete(chip_id: u64, s1: ModalityChip, s2: ModalityChip, gunw: ModalityChip) -> Self {
        TrainChip {
            chip_id,
            modalities: [Some(s1), Some(s2), Some(gunw)],
        }
    }
}

/// Split-tagged chip access. Every `get` is recorded so tests can assert the
/// test split is never touched during pretraining.
#[derive(Debug)]
pub struct Dataset {
    index: ChipIndex,
    chips: BTreeMap<u64, TrainChip>,
    access_log: Mutex<Vec<u64>>,
}

impl Dataset {
    pub fn new(index: ChipIndex, chips: Vec<TrainChip>) -> Dataset {
        let chips = chips.into_iter().map(|c| (c.chip_id, c)).collect();
        Dataset {
            index,
            chips,
            access_log: Mutex::new(Vec::new()),
        }
    }

    pub fn index(&self) -> &ChipIndex {
        &self.index
    }

    pub fn get(&self, chip_id: u64) -> Option<&TrainChip> {
        self.access_log.lock().unwrap().push(chip_id);
        self.chips.get(&chip_id)
    }

    /// Chip ids present in the store and assigned to `split`, ascending.
    pub fn ids_in(&self, split: Split) -> Vec<u64> {
        self.index
            .chips
            .iter()
            .filter(|c| c.split == split && self.chips.contains_key(&c.id))
            .map(|c| c.id)
            .collect()
    }

    pub fn accessed_chip_ids(&self) -> Vec<u64> {
        self.access_log.lock().unwrap().clone()
    }

    pub fn accessed_splits(&self) -> Vec<Split> {
        self.accessed_chip_ids()
            .iter()
            .filter_map(|&id| self.index.split_of(id))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub step: usize,
    pub val_loss: f64,
    pub checkpoint_stem: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    pub evals: Vec<EvalPoint>,
}

impl TrainHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

/// Best checkpoint = minimal validation loss, ties broken by earliest step.
pub fn select_best(evals: &[EvalPoint]) -> Result<&EvalPoint> {
    evals
        .iter()
        .min_by(|a, b| {
            a.val_loss
                .partial_cmp(&b.val_loss)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.step.cmp(&b.step))
        })
        .ok_or_else(|| Error::invalid("no evaluated checkpoints"))
}

/// Fixed chunk count for gradient reduction: per-sample gradients are
/// accumulated into chunk buffers (samples in index order within a chunk)
/// and the chunks summed in order, so the result is independent of the
/// worker count.
const GRAD_CHUNKS: usize = 8;

struct BatchSample {
    chip_id: u64,
    images: [Array2<f64>; 3],
}

/// Gather the per-modality single-channel images for a batch. Channel choice
/// is keyed on (seed_space, chip position) so it is order-independent.
fn gather_batch(
    data: &Dataset,
    ids: &[u64],
    channel_seed: u64,
    fail_fast: bool,
) -> Result<Vec<BatchSample>> {
    let mut out = Vec::with_capacity(ids.len());
    for &chip_id in ids {
        let chip = data
            .get(chip_id)
            .ok_or_else(|| Error::missing(format!("chip {chip_id} not in dataset")))?;
        let mut images = Vec::with_capacity(3);
        let mut missing = None;
        for m in Modality::ALL {
            match &chip.modalities[m.idx()] {
                Some(mc) => {
                    let mut rng = child_rng(channel_seed, &[chip_id, m.code() as u64]);
                    let k = sample_channel(mc, &mut rng)?;
                    images.push(mc.channels.index_axis(ndarray::Axis(0), k).to_owned());
                }
                None => {
                    missing = Some(m);
                    break;
                }
            }
        }
        if let Some(m) = missing {
            if fail_fast {
                return Err(Error::missing(format!(
                    "chip {chip_id} is missing modality {}",
                    m.name()
                )));
            }
            eprintln!(
                "warning: skipping chip {chip_id} (missing modality {})",
                m.name()
            );
            continue;
        }
        let images: [Array2<f64>; 3] = images.try_into().expect("three modalities");
        out.push(BatchSample { chip_id, images });
    }
    Ok(out)
}

fn batch_embeddings(
    towers: &TowerSet,
    samples: &[BatchSample],
) -> Result<[EmbeddingBatch; 3]> {
    use rayon::prelude::*;
    let d = towers.config.embed_dim;
    let embs: Vec<Result<[Array1<f64>; 3]>> = samples
        .par_iter()
        .map(|s| {
            let mut per = Vec::with_capacity(3);
            for m in Modality::ALL {
                per.push(towers.encode(m, &s.images[m.idx()])?);
            }
            Ok(per.try_into().expect("three embeddings"))
        })
        .collect();
    let n = samples.len();
    let chip_ids: Vec<u64> = samples.iter().map(|s| s.chip_id).collect();
    let mut rows = [
        Array2::zeros((n, d)),
        Array2::zeros((n, d)),
        Array2::zeros((n, d)),
    ];
    for (i, e) in embs.into_iter().enumerate() {
        let e = e?;
        for m in Modality::ALL {
            rows[m.idx()].row_mut(i).assign(&e[m.idx()]);
        }
    }
    let [r0, r1, r2] = rows;
    Ok([
        EmbeddingBatch::new(Modality::S1Grdm, chip_ids.clone(), r0)?,
        EmbeddingBatch::new(Modality::S2Rgbm, chip_ids.clone(), r1)?,
        EmbeddingBatch::new(Modality::Gunw, chip_ids, r2)?,
    ])
}

/// Loss + full parameter gradient (including log-temperature) on one batch.
fn batch_loss_and_grad(towers: &TowerSet, samples: &[BatchSample]) -> Result<(f64, Vec<f64>)> {
    use rayon::prelude::*;
    let batches = batch_embeddings(towers, samples)?;
    let temperature = towers.temperature();
    let (loss, d_rows, d_temp) = multimodal_clip_loss_grad(&batches, temperature)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("train loss is not finite ({loss})")));
    }

    let n_params = towers.n_params();
    let chunk_grads: Vec<Vec<f64>> = (0..GRAD_CHUNKS)
        .into_par_iter()
        .map(|chunk| -> Result<Vec<f64>> {
            let mut grad = vec![0.0; n_params];
            for (i, s) in samples.iter().enumerate() {
                if i % GRAD_CHUNKS != chunk {
                    continue;
                }
                for m in Modality::ALL {
                    let (_, cache) = towers.encode_with_cache(m, &s.images[m.idx()])?;
                    let d_emb = d_rows[m.idx()].row(i).to_owned();
                    towers.encode_backward(m, &cache, &d_emb, &mut grad);
                }
            }
            Ok(grad)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut grad = vec![0.0; n_params];
    for cg in &chunk_grads {
        for (g, c) in grad.iter_mut().zip(cg.iter()) {
            *g += c;
        }
    }
    // temperature gradient through exp, zero when the clamp is active
    let lt_idx = n_params - 1;
    grad[lt_idx] = if towers.temperature_in_range() {
        d_temp * temperature
    } else {
        0.0
    };
    Ok((loss, grad))
}

/// Mean multimodal CLIP loss over the validation split with the fixed
/// validation channel-sampling seed.
pub fn validate(towers: &TowerSet, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let ids = data.ids_in(Split::Val);
    if ids.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let mut losses = Vec::new();
    for chunk in ids.chunks(cfg.batch_size) {
        if chunk.len() < 2 && !losses.is_empty() {
            continue; // a trailing singleton carries no contrastive signal
        }
        let samples = gather_batch(data, chunk, cfg.val_seed, cfg.fail_fast_missing)?;
        if samples.is_empty() {
            continue;
        }
        let batches = batch_embeddings(towers, &samples)?;
        losses.push(multimodal_clip_loss(&batches, towers.temperature())?);
    }
    if losses.is_empty() {
        return Err(Error::invalid("validation split produced no usable batches"));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    // 5% linear warmup, then cosine decay to zero
    let warmup = ((total_steps as f64) * 0.05).ceil().max(1.0) as usize;
    if step < warmup {
        base_lr * (step + 1) as f64 / warmup as f64
    } else if total_steps <= warmup {
        base_lr
    } else {
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Run the pretraining loop; mutates `towers` in place and returns the
/// step-by-step history. Deterministic given the config seed.
pub fn train(towers: &mut TowerSet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let train_ids = data.ids_in(Split::Train);
    if train_ids.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "train split has {} chips, need at least batch_size={}",
            train_ids.len(),
            cfg.batch_size
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let batches_per_epoch = train_ids.len() / cfg.batch_size;
    let total_steps = batches_per_epoch * cfg.epochs;
    let eval_every = if cfg.eval_every == 0 {
        batches_per_epoch
    } else {
        cfg.eval_every
    };

    let n_params = towers.n_params();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let lt_idx = n_params - 1;

    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        // deterministic shuffle of the train ids
        let mut ids = train_ids.clone();
        let mut rng = child_rng(cfg.seed, &[0x455_04f43, epoch as u64]);
        for i in (1..ids.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            ids.swap(i, j);
        }

        for b in 0..batches_per_epoch {
            let batch_ids = &ids[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let channel_seed =
                crate::rng::derive_seed(cfg.seed, &[0x4348_414e, step as u64]);
            let samples = gather_batch(data, batch_ids, channel_seed, cfg.fail_fast_missing)?;
            if samples.len() < 2 {
                step += 1;
                continue;
            }
            let (loss, grad) = batch_loss_and_grad(towers, &samples)?;

            let lr = lr_at(step, total_steps, cfg.learning_rate);
            let t = (step + 1) as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for i in 0..n_params {
                m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
                m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                let wd = if i == lt_idx { 0.0 } else { cfg.weight_decay };
                towers.params[i] -=
                    lr * (mhat / (vhat.sqrt() + eps) + wd * towers.params[i]);
            }
            // keep the learnable temperature inside its clamp window
            towers.params[lt_idx] = towers.params[lt_idx].clamp(
                MIN_TEMPERATURE.ln(),
                MAX_TEMPERATURE.ln(),
            );

            step += 1;
            let is_eval = step % eval_every == 0 || step == total_steps;
            let val_loss = if is_eval {
                Some(validate(towers, data, cfg)?)
            } else {
                None
            };
            if let Some(vl) = val_loss {
                let stem = if let Some(dir) = &cfg.checkpoint_dir {
                    let stem = dir.join(format!("ckpt_{step:06}"));
                    save_checkpoint(&stem, towers, step, Some(vl))?;
                    Some(stem)
                } else {
                    None
                };
                history.evals.push(EvalPoint {
                    step,
                    val_loss: vl,
                    checkpoint_stem: stem,
                });
            }
            history.records.push(HistoryRecord {
                step,
                train_loss: loss,
                val_loss,
            });
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("history.jsonl");
        let mut text = String::new();
        for r in &history.records {
            text.push_str(&serde_json::to_string(r).expect("serializable record"));
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assign_splits, build_grid, DEFAULT_PATTERN};
    use crate::model::EncoderConfig;
    use crate::synth::{gen_latents, render_modality};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            image_hw: 16,
            patch: 8,
            depth: 1,
            width: 32,
            heads: 2,
            embed_dim: 16,
            mlp_ratio: 2.0,
        }
    }

    fn make_dataset(n_cols: u32, hw: usize, single_channel: bool) -> Dataset {
        let grid = build_grid("test", 1, n_cols, 448).unwrap();
        let index = assign_splits(&grid, 1, &DEFAULT_PATTERN, 0).unwrap().index;
        let chips: Vec<TrainChip> = (0..n_cols as u64)
            .map(|id| {
                let l = gen_latents(5, id, hw).unwrap();
                let mk = |m: Modality| {
                    let chip = render_modality(&l, m, 0.05, id).unwrap();
                    if single_channel {
                        let mut mask = vec![false; chip.n_channels()];
                        mask[0] = true;
                        chip.with_mask(mask).unwrap()
                    } else {
                        chip
                    }
                };
                TrainChip::complete(id, mk(Modality::S1Grdm), mk(Modality::S2Rgbm), mk(Modality::Gunw))
            })
            .collect();
        Dataset::new(index, chips)
    }

    fn quick_cfg(batch: usize, epochs: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            epochs,
            learning_rate: lr,
            weight_decay: 0.01,
            seed,
            eval_every: 0,
            val_seed: 99,
            checkpoint_dir: None,
            fail_fast_missing: true,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise_unchanged() {
        let data = make_dataset(10, 16, false);
        let mut towers = TowerSet::init(tiny_config(), 1).unwrap();
        let before = towers.params.clone();
        train(&mut towers, &data, &quick_cfg(4, 2, 0.0, 3)).unwrap();
        assert_eq!(before, towers.params);
    }

    #[test]
    fn same_seed_reproduces_loss_curve_exactly() {
        let data1 = make_dataset(10, 16, false);
        let data2 = make_dataset(10, 16, false);
        let mut t1 = TowerSet::init(tiny_config(), 1).unwrap();
        let mut t2 = TowerSet::init(tiny_config(), 1).unwrap();
        let h1 = train(&mut t1, &data1, &quick_cfg(4, 2, 1e-3, 7)).unwrap();
        let h2 = train(&mut t2, &data2, &quick_cfg(4, 2, 1e-3, 7)).unwrap();
        assert_eq!(h1.train_losses(), h2.train_losses());
        assert_eq!(t1.params, t2.params);
    }

    #[test]
    fn single_step_decreases_frozen_batch_loss() {
        // single-channel chips freeze the channel choice, so consecutive
        // epochs see the identical batch
        for lr in [1e-3, 1e-4] {
            let data = make_dataset(5, 16, true);
            let mut towers = TowerSet::init(tiny_config(), 2).unwrap();
            let cfg = TrainConfig {
                batch_size: 3, // train split of 5-col grid has 3 chips
                epochs: 2,
                learning_rate: lr,
                weight_decay: 0.0,
                seed: 11,
                ..quick_cfg(3, 2, lr, 11)
            };
            let h = train(&mut towers, &data, &cfg).unwrap();
            assert_eq!(h.records.len(), 2);
            assert!(
                h.records[1].train_loss < h.records[0].train_loss,
                "lr={lr}: loss did not decrease ({} -> {})",
                h.records[0].train_loss,
                h.records[1].train_loss
            );
        }
    }

    #[test]
    fn test_split_never_accessed() {
        let data = make_dataset(10, 16, false);
        let mut towers = TowerSet::init(tiny_config(), 1).unwrap();
        train(&mut towers, &data, &quick_cfg(4, 1, 1e-3, 0)).unwrap();
        validate(&towers, &data, &quick_cfg(4, 1, 1e-3, 0)).unwrap();
        let splits = data.accessed_splits();
        assert!(!splits.is_empty());
        assert!(splits.iter().all(|&s| s != Split::Test));
    }

    #[test]
    fn select_best_picks_min_with_earliest_tie() {
        let mk = |step: usize, val: f64| EvalPoint {
            step,
            val_loss: val,
            checkpoint_stem: None,
        };
        let evals = vec![mk(1, 0.9), mk(2, 0.5), mk(3, 0.6)];
        assert_eq!(select_best(&evals).unwrap().step, 2);
        let ties = vec![mk(1, 0.5), mk(2, 0.5)];
        assert_eq!(select_best(&ties).unwrap().step, 1);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn select_best_matches_bruteforce_scan() {
        let mut rng = child_rng(123, &[]);
        let evals: Vec<EvalPoint> = (0..100)
            .map(|i| EvalPoint {
                step: i,
                val_loss: rand::Rng::gen_range(&mut rng, 0.0..1.0),
                checkpoint_stem: None,
            })
            .collect();
        let best = select_best(&evals).unwrap();
        let mut oracle = 0usize;
        for (i, e) in evals.iter().enumerate() {
            if e.val_loss < evals[oracle].val_loss {
                oracle = i;
            }
        }
        assert_eq!(best.step, evals[oracle].step);
    }

    #[test]
    fn missing_modality_fails_fast() {
        let grid = build_grid("t", 1, 5, 448).unwrap();
        let index = assign_splits(&grid, 1, &DEFAULT_PATTERN, 0).unwrap().index;
        let chips: Vec<TrainChip> = (0..5u64)
            .map(|id| {
                let l = gen_latents(5, id, 16).unwrap();
                let mut tc = TrainChip::complete(
                    id,
                    render_modality(&l, Modality::S1Grdm, 0.05, id).unwrap(),
                    render_modality(&l, Modality::S2Rgbm, 0.05, id).unwrap(),
                    render_modality(&l, Modality::Gunw, 0.05, id).unwrap(),
                );
                if id == 1 {
                    tc.modalities[2] = None;
                }
                tc
            })
            .collect();
        let data = Dataset::new(index, chips);
        let mut towers = TowerSet::init(tiny_config(), 1).unwrap();
        let err = train(&mut towers, &data, &quick_cfg(3, 1, 1e-3, 0)).unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
    }

    #[test]
    fn empty_validation_split_rejected() {
        let grid = build_grid("t", 1, 4, 448).unwrap();
        // all-train index: no val chips
        let chips: Vec<TrainChip> = (0..4u64)
            .map(|id| {
                let l = gen_latents(5, id, 16).unwrap();
                TrainChip::complete(
                    id,
                    render_modality(&l, Modality::S1Grdm, 0.05, id).unwrap(),
                    render_modality(&l, Modality::S2Rgbm, 0.05, id).unwrap(),
                    render_modality(&l, Modality::Gunw, 0.05, id).unwrap(),
                )
            })
            .collect();
        let data = Dataset::new(grid, chips);
        let towers = TowerSet::init(tiny_config(), 1).unwrap();
        assert!(validate(&towers, &data, &quick_cfg(2, 1, 1e-3, 0)).is_err());
    }

    #[test]
    fn history_jsonl_written() {
        let data = make_dataset(10, 16, false);
        let mut towers = TowerSet::init(tiny_config(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(4, 1, 1e-3, 0);
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let h = train(&mut towers, &data, &cfg).unwrap();
        assert!(!h.evals.is_empty());
        let text = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
        assert_eq!(text.lines().count(), h.records.len());
        // checkpoint stems exist on disk
        let stem = h.evals[0].checkpoint_stem.as_ref().unwrap();
        assert!(stem.with_extension("json").exists());
        assert!(stem.with_extension("bin").exists());
    }
}
