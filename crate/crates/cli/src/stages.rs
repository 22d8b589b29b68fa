//! Pipeline stages and the resume manifest. Every stage reads and writes
//! files under one run directory, so individual stages can be re-run or the
//! whole pipeline resumed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use triclip_core::datastore::{
    read_chip, write_chip, ChipRecord, EmbeddingSet, ManifestEntry, ProbeModality, StoreManifest,
};
use triclip_core::grid::{assign_splits, build_grid, parse_pattern, ChipIndex, Split};
use triclip_core::model::{load_checkpoint, EmbedMode, Modality, TowerSet};
use triclip_core::probe::{min_shots_for_95, run_ablation, AblationReport, LabelTable};
use triclip_core::rng::{child_rng, derive_seed};
use triclip_core::synth::{derive_label, gen_latents, render_modality_opts, Task};
use triclip_core::trainer::{select_best, train, Dataset, TrainChip, TrainConfig};
use triclip_core::viz::{emit_scatter, morans_i_permutation_test, tsne};
use triclip_core::{Error, Result};

use crate::config::RunConfig;

/// Canonical file layout inside a run directory.
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Paths {
        Paths {
            root: root.to_path_buf(),
        }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index.json")
    }
    pub fn chips_dir(&self) -> PathBuf {
        self.root.join("chips")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.json")
    }
    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn best(&self) -> PathBuf {
        self.checkpoints_dir().join("best.json")
    }
    pub fn embeddings_dir(&self) -> PathBuf {
        self.root.join("embeddings")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.json")
    }
    pub fn projection(&self) -> PathBuf {
        self.root.join("projection.json")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

pub const STAGES: [&str; 8] = [
    "gen", "split", "pretrain", "embed", "ablate", "project", "plot", "report",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> RunManifest {
        std::fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// A stage can be skipped when its input hash is unchanged and every
    /// recorded output still exists.
    pub fn can_skip(&self, stage: &str, input_hash: &str) -> bool {
        self.stages.get(stage).is_some_and(|r| {
            r.input_hash == input_hash && r.outputs.iter().all(|p| p.exists())
        })
    }

    pub fn record(&mut self, stage: &str, input_hash: &str, outputs: Vec<PathBuf>) {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                input_hash: input_hash.to_string(),
                outputs,
            },
        );
    }
}

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    format!("{:x}", h.finalize())
}

fn json_of<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Input hash for a stage: its config sections plus the upstream stage hash,
/// which transitively pins everything the stage depends on.
pub fn stage_hash(cfg: &RunConfig, manifest: &RunManifest, stage: &str) -> String {
    let upstream = |name: &str| {
        manifest
            .stages
            .get(name)
            .map(|r| r.input_hash.clone())
            .unwrap_or_default()
    };
    match stage {
        "gen" => sha_hex(&[
            "gen",
            &cfg.seed.to_string(),
            &json_of(&cfg.aoi),
            &json_of(&cfg.chips),
        ]),
        "split" => sha_hex(&["split", &cfg.seed.to_string(), &json_of(&cfg.aoi)]),
        "pretrain" => sha_hex(&[
            "pretrain",
            &upstream("gen"),
            &upstream("split"),
            &json_of(&cfg.encoder),
            &json_of(&cfg.train),
        ]),
        "embed" => sha_hex(&["embed", &upstream("pretrain"), &cfg.embed_mode]),
        "ablate" => sha_hex(&["ablate", &upstream("embed"), &json_of(&cfg.ablation)]),
        "project" => sha_hex(&["project", &upstream("embed"), &json_of(&cfg.project)]),
        "plot" => sha_hex(&["plot", &upstream("project")]),
        "report" => sha_hex(&["report", &upstream("ablate"), &upstream("project")]),
        other => sha_hex(&["unknown", other]),
    }
}

fn n_chips(cfg: &RunConfig) -> u64 {
    cfg.aoi.rows as u64 * cfg.aoi.cols as u64
}

/// Generate every chip (all three modalities), the continuous label table,
/// and the chip-store manifest.
pub fn stage_gen(cfg: &RunConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let dir = paths.chips_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut labels = LabelTable::default();
    let mut entries = Vec::new();
    for chip_id in 0..n_chips(cfg) {
        let latents = gen_latents(cfg.seed, chip_id, cfg.chips.hw)?;
        let mut vals = [0.0; 4];
        for task in Task::ALL {
            vals[task.idx()] = derive_label(&latents, task);
        }
        labels.insert(chip_id, vals);
        for modality in Modality::ALL {
            let chip = render_modality_opts(
                &latents,
                modality,
                cfg.chips.noise_level,
                cfg.chips.gunw_downscale,
                derive_seed(cfg.seed, &[0x47454e, chip_id]),
            )?;
            let record = ChipRecord::from_chip(&chip)?;
            let path = write_chip(&record, &dir)?;
            entries.push(ManifestEntry {
                file: path
                    .file_name()
                    .expect("chip file name")
                    .to_string_lossy()
                    .into_owned(),
                chip_id,
                modality,
                c: record.c,
                h: record.h,
                w: record.w,
            });
        }
    }
    let store = StoreManifest {
        aoi_name: cfg.aoi.name.clone(),
        hw: cfg.chips.hw,
        entries,
    };
    let manifest_path = store.save(&dir)?;
    labels.save_json(&paths.labels())?;
    println!(
        "gen: wrote {} chips x 3 modalities to {}",
        n_chips(cfg),
        dir.display()
    );
    Ok(vec![manifest_path, paths.labels()])
}

/// Assign banded train/val/test splits and persist the chip index.
pub fn stage_split(cfg: &RunConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let grid = build_grid(
        &cfg.aoi.name,
        cfg.aoi.rows,
        cfg.aoi.cols,
        cfg.aoi.chip_size_m,
    )?;
    let pattern = parse_pattern(&cfg.aoi.pattern)?;
    let assignment = assign_splits(&grid, cfg.aoi.band_width, &pattern, cfg.seed)?;
    if assignment.ratio_warning {
        eprintln!(
            "warning: split fractions {:?} deviate more than 5 percentage points from 60/20/20",
            assignment.fractions
        );
    }
    assignment.index.save_json(&paths.index())?;
    println!(
        "split: train/val/test fractions {:.3}/{:.3}/{:.3}",
        assignment.fractions[0], assignment.fractions[1], assignment.fractions[2]
    );
    Ok(vec![paths.index()])
}

/// Load the chip store as a [`Dataset`] keyed by the split index.
fn load_dataset(paths: &Paths) -> Result<Dataset> {
    let index = ChipIndex::load_json(&paths.index())?;
    let dir = paths.chips_dir();
    let store = StoreManifest::load(&dir)?;
    let mut by_chip: BTreeMap<u64, [Option<triclip_core::synth::ModalityChip>; 3]> =
        BTreeMap::new();
    for entry in &store.entries {
        let record = read_chip(&dir.join(&entry.file))?;
        let chip = record.to_chip()?;
        by_chip.entry(entry.chip_id).or_default()[entry.modality.idx()] = Some(chip);
    }
    let chips = by_chip
        .into_iter()
        .map(|(chip_id, modalities)| TrainChip { chip_id, modalities })
        .collect();
    Ok(Dataset::new(index, chips))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub stem: PathBuf,
    pub step: usize,
    pub val_loss: f64,
}

/// Pretrain the three towers, checkpointing at every validation point, and
/// record which checkpoint won.
pub fn stage_pretrain(cfg: &RunConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let data = load_dataset(paths)?;
    let mut towers = TowerSet::init(cfg.encoder.clone(), derive_seed(cfg.seed, &[0x494e4954]))?;
    let train_cfg = TrainConfig {
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        learning_rate: cfg.train.learning_rate,
        weight_decay: cfg.train.weight_decay,
        seed: cfg.seed,
        eval_every: cfg.train.eval_every,
        checkpoint_dir: Some(paths.checkpoints_dir()),
        ..TrainConfig::default()
    };
    let history = train(&mut towers, &data, &train_cfg)?;
    let accessed = data.accessed_splits();
    if accessed.iter().any(|&s| s == Split::Test) {
        return Err(Error::invalid(
            "pretraining touched the test split; refusing to continue",
        ));
    }
    let best = select_best(&history.evals)?;
    let record = BestCheckpoint {
        stem: best
            .checkpoint_stem
            .clone()
            .ok_or_else(|| Error::missing("best eval has no checkpoint on disk"))?,
        step: best.step,
        val_loss: best.val_loss,
    };
    let text = serde_json::to_string_pretty(&record).expect("serializable");
    std::fs::write(paths.best(), text).map_err(|e| Error::io(paths.best(), e))?;
    println!(
        "pretrain: {} steps, best val loss {:.4} at step {}",
        history.records.len(),
        best.val_loss,
        best.step
    );
    Ok(vec![paths.best()])
}

/// Embed every chip with the selected checkpoint and persist per-modality
/// embedding files.
pub fn stage_embed(cfg: &RunConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let best_text =
        std::fs::read_to_string(paths.best()).map_err(|e| Error::io(paths.best(), e))?;
    let best: BestCheckpoint =
        serde_json::from_str(&best_text).map_err(|e| Error::format(paths.best(), e.to_string()))?;
    let (towers, _) = load_checkpoint(&best.stem)?;
    let mode = EmbedMode::parse(&cfg.embed_mode)?;

    let dir = paths.chips_dir();
    let store = StoreManifest::load(&dir)?;
    let mut set = EmbeddingSet::new(towers.config.embed_dim);
    for entry in &store.entries {
        let chip = read_chip(&dir.join(&entry.file))?.to_chip()?;
        let mut rng = child_rng(cfg.seed, &[0x454d42, entry.chip_id, entry.modality.code() as u64]);
        let emb = towers.embed_chip(&chip, mode, &mut rng)?;
        set.insert(entry.chip_id, entry.modality, emb.to_vec())?;
    }
    let out = paths.embeddings_dir();
    set.save_dir(&out)?;
    println!("embed: {} chips embedded with {:?}", set.len(), mode);
    Ok(vec![
        out.join("emb_s1grdm.bin"),
        out.join("emb_s2rgbm.bin"),
        out.join("emb_gunw.bin"),
    ])
}

/// Random Forest few-shot ablation over modalities, tasks, and sample sizes.
pub fn stage_ablate(cfg: &RunConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let embeddings = EmbeddingSet::load_dir(&paths.embeddings_dir())?;
    let labels = LabelTable::load_json(&paths.labels())?;
    let index = ChipIndex::load_json(&paths.index())?;
    let mut ab = cfg.ablation.clone();
    ab.seed = derive_seed(cfg.seed, &[0x41424c54]);
    let report = run_ablation(&embeddings, &labels, &index, &ab)?;
    report.save_json(&paths.ablation())?;
    println!(
        "ablate: {} cells over pool {} / test {}",
        report.cells.len(),
        report.n_train_pool,
        report.n_test
    );
    Ok(vec![paths.ablation()])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Projection {
    pub modality: String,
    pub chip_ids: Vec<u64>,
    pub coords: Vec<[f64; 2]>,
    pub kl_trace: Vec<f64>,
}

impl Projection {
    pub fn load(path: &Path) -> Result<Projection> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// t-SNE projection of test-split embeddings.
pub fn stage_project(cfg: &RunConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let embeddings = EmbeddingSet::load_dir(&paths.embeddings_dir())?;
    let index = ChipIndex::load_json(&paths.index())?;
    let pm = ProbeModality::parse(&cfg.project.modality)?;
    let mut ids: Vec<u64> = index
        .chip_ids_in(Split::Test)
        .into_iter()
        .filter(|&id| embeddings.get(id, Modality::S2Rgbm).is_some())
        .collect();
    ids.truncate(cfg.project.max_points);
    if ids.len() < 4 {
        return Err(Error::invalid(format!(
            "projection needs at least 4 embedded test chips, found {}",
            ids.len()
        )));
    }
    let first = embeddings.features(ids[0], pm)?;
    let mut x = triclip_core::ndarray::Array2::zeros((ids.len(), first.len()));
    for (i, &id) in ids.iter().enumerate() {
        for (j, v) in embeddings.features(id, pm)?.into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let mut tcfg = cfg.project.tsne.clone();
    tcfg.seed = derive_seed(cfg.seed, &[0x50524f4a]);
    if tcfg.perplexity >= (ids.len() - 1) as f64 {
        let clamped = ((ids.len() - 1) as f64 / 3.0).max(2.0);
        eprintln!(
            "warning: perplexity {} too high for {} points, using {clamped}",
            tcfg.perplexity,
            ids.len()
        );
        tcfg.perplexity = clamped;
    }
    let result = tsne(&x, &tcfg)?;
    let projection = Projection {
        modality: pm.name().to_string(),
        chip_ids: ids,
        coords: (0..result.coords.nrows())
            .map(|i| [result.coords[[i, 0]], result.coords[[i, 1]]])
            .collect(),
        kl_trace: result.kl_trace,
    };
    let text = serde_json::to_string_pretty(&projection).expect("serializable");
    std::fs::write(paths.projection(), text).map_err(|e| Error::io(paths.projection(), e))?;
    println!(
        "project: {} points, final KL {:.4}",
        projection.chip_ids.len(),
        projection.kl_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(vec![paths.projection()])
}

/// One label-colored scatter SVG per task.
pub fn stage_plot(_cfg: &RunConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let projection = Projection::load(&paths.projection())?;
    let labels = LabelTable::load_json(&paths.labels())?;
    let dir = paths.plots_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = projection.chip_ids.len();
    let mut coords = triclip_core::ndarray::Array2::zeros((n, 2));
    for (i, c) in projection.coords.iter().enumerate() {
        coords[[i, 0]] = c[0];
        coords[[i, 1]] = c[1];
    }
    let mut outputs = Vec::new();
    for task in Task::ALL {
        let values: Vec<f64> = projection
            .chip_ids
            .iter()
            .map(|&id| {
                labels
                    .value(id, task)
                    .ok_or_else(|| Error::missing(format!("no label for chip {id}")))
            })
            .collect::<Result<_>>()?;
        let path = dir.join(format!("tsne_{}.svg", task.name().replace('-', "_")));
        emit_scatter(
            &path,
            &coords,
            &values,
            &format!("t-SNE ({}) colored by {}", projection.modality, task.name()),
            true,
        )?;
        outputs.push(path);
    }
    println!("plot: wrote {} SVGs to {}", outputs.len(), dir.display());
    Ok(outputs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub full_accuracy_modsconcat: Option<f64>,
    pub min_shots_for_95: Option<usize>,
    pub morans_i: Option<f64>,
    pub morans_p: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub aoi: String,
    pub n_chips: u64,
    pub split_fractions: [f64; 3],
    pub best_val_loss: Option<f64>,
    pub tasks: Vec<TaskSummary>,
}

/// Aggregate ablation + projection results into report.json and report.md.
pub fn stage_report(cfg: &RunConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let index = ChipIndex::load_json(&paths.index())?;
    let ablation = AblationReport::load_json(&paths.ablation())?;
    let projection = Projection::load(&paths.projection())?;
    let labels = LabelTable::load_json(&paths.labels())?;
    let best_val_loss = std::fs::read_to_string(paths.best())
        .ok()
        .and_then(|t| serde_json::from_str::<BestCheckpoint>(&t).ok())
        .map(|b| b.val_loss);

    let n = projection.chip_ids.len();
    let mut coords = triclip_core::ndarray::Array2::zeros((n, 2));
    for (i, c) in projection.coords.iter().enumerate() {
        coords[[i, 0]] = c[0];
        coords[[i, 1]] = c[1];
    }

    let mut tasks = Vec::new();
    for task in Task::ALL {
        let full = ablation
            .cell(ProbeModality::ModsConcat, task, "full")
            .map(|c| c.mean_accuracy);
        let min_shots = min_shots_for_95(&ablation, ProbeModality::ModsConcat, task);
        let values: Vec<f64> = projection
            .chip_ids
            .iter()
            .filter_map(|&id| labels.value(id, task))
            .collect();
        let (mi, mp) = if values.len() == n && n >= 8 {
            match morans_i_permutation_test(
                &values,
                &coords,
                4.min(n - 1),
                199,
                derive_seed(cfg.seed, &[0x524550, task.idx() as u64]),
            ) {
                Ok((i, p)) => (Some(i), Some(p)),
                Err(_) => (None, None), // e.g. constant labels
            }
        } else {
            (None, None)
        };
        tasks.push(TaskSummary {
            task: task.name().to_string(),
            full_accuracy_modsconcat: full,
            min_shots_for_95: min_shots,
            morans_i: mi,
            morans_p: mp,
        });
    }
    let report = Report {
        aoi: index.aoi_name.clone(),
        n_chips: index.n_chips() as u64,
        split_fractions: index.split_fractions(),
        best_val_loss,
        tasks,
    };
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    std::fs::write(paths.report_json(), text).map_err(|e| Error::io(paths.report_json(), e))?;

    let mut md = String::new();
    md.push_str(&format!("# Run report: {}\n\n", report.aoi));
    md.push_str(&format!(
        "- chips: {} (train/val/test {:.2}/{:.2}/{:.2})\n",
        report.n_chips,
        report.split_fractions[0],
        report.split_fractions[1],
        report.split_fractions[2]
    ));
    if let Some(v) = report.best_val_loss {
        md.push_str(&format!("- best validation loss: {v:.4}\n"));
    }
    md.push_str("\n| task | full acc (concat) | min shots for 95% | Moran's I | p |\n");
    md.push_str("|---|---|---|---|---|\n");
    let fmt_opt = |o: Option<f64>| o.map_or("-".to_string(), |v| format!("{v:.3}"));
    for t in &report.tasks {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            t.task,
            fmt_opt(t.full_accuracy_modsconcat),
            t.min_shots_for_95
                .map_or("-".to_string(), |v| v.to_string()),
            fmt_opt(t.morans_i),
            fmt_opt(t.morans_p),
        ));
    }
    md.push_str("\n## Ablation grid (mean accuracy over repeats)\n\n");
    md.push_str("| modality | task | size | effective | mean | std |\n|---|---|---|---|---|---|\n");
    for c in &ablation.cells {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {:.3} | {:.3} |\n",
            c.modality, c.task, c.size, c.effective_size, c.mean_accuracy, c.std_accuracy
        ));
    }
    std::fs::write(paths.report_md(), md).map_err(|e| Error::io(paths.report_md(), e))?;
    println!("report: wrote {}", paths.report_md().display());
    Ok(vec![paths.report_json(), paths.report_md()])
}

pub fn run_stage(cfg: &RunConfig, paths: &Paths, stage: &str) -> Result<Vec<PathBuf>> {
    match stage {
        "gen" => stage_gen(cfg, paths),
        "split" => stage_split(cfg, paths),
        "pretrain" => stage_pretrain(cfg, paths),
        "embed" => stage_embed(cfg, paths),
        "ablate" => stage_ablate(cfg, paths),
        "project" => stage_project(cfg, paths),
        "plot" => stage_plot(cfg, paths),
        "report" => stage_report(cfg, paths),
        other => Err(Error::invalid(format!("unknown stage '{other}'"))),
    }
}

/// Run all stages in order, skipping any whose inputs are unchanged and
/// whose outputs are still on disk.
pub fn run_all(cfg: &RunConfig, paths: &Paths, force: bool) -> Result<()> {
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    cfg.save(&paths.config())?;
    let mut manifest = RunManifest::load(&paths.run_manifest());
    for stage in STAGES {
        let hash = stage_hash(cfg, &manifest, stage);
        if !force && manifest.can_skip(stage, &hash) {
            println!("{stage}: up to date, skipping");
            // keep the recorded hash (it already matches)
            continue;
        }
        let outputs = run_stage(cfg, paths, stage)?;
        manifest.record(stage, &hash, outputs);
        manifest.save(&paths.run_manifest())?;
    }
    Ok(())
}
