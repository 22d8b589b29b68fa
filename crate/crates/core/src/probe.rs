//! Frozen-embedding probing: balanced label binarization, a from-scratch
//! Random Forest classifier, and the few-shot ablation grid with the
//! shots-to-95%-of-full-accuracy readout.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{EmbeddingSet, ProbeModality};
use crate::error::{Error, Result};
use crate::grid::{ChipIndex, Split};
use crate::rng::child_rng;
use crate::synth::Task;

/// Binarize continuous label values into balanced classes: the lower half
/// (by value, ties broken by ascending chip id) gets class 0, the upper half
/// class 1. Class counts differ by at most one. Returns the split threshold
/// (value of the first chip placed in class 1) and per-chip classes aligned
/// with the input order.
pub fn binarize_balanced(ids: &[u64], values: &[f64]) -> Result<(f64, Vec<u8>)> {
    if ids.len() != values.len() {
        return Err(Error::invalid("ids and values length mismatch"));
    }
    if ids.is_empty() {
        return Err(Error::invalid("cannot binarize an empty label set"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("label values must be finite".into()));
    }
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite values")
            .then(ids[a].cmp(&ids[b]))
    });
    let n_zero = n.div_ceil(2);
    let mut classes = vec![0u8; n];
    for &i in &order[n_zero..] {
        classes[i] = 1;
    }
    let threshold = values[order[n_zero.min(n - 1)]];
    Ok((threshold, classes))
}

/// Continuous per-task label values keyed by chip id, ordered as
/// [`Task::ALL`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelTable {
    pub values: BTreeMap<u64, [f64; 4]>,
}

impl LabelTable {
    pub fn insert(&mut self, chip_id: u64, values: [f64; 4]) {
        self.values.insert(chip_id, values);
    }

    pub fn value(&self, chip_id: u64, task: Task) -> Option<f64> {
        self.values.get(&chip_id).map(|v| v[task.idx()])
    }

    /// Balanced binary classes for `task` over every chip in the table.
    pub fn binarized(&self, task: Task) -> Result<BTreeMap<u64, u8>> {
        let ids: Vec<u64> = self.values.keys().copied().collect();
        let vals: Vec<f64> = self.values.values().map(|v| v[task.idx()]).collect();
        let (_, classes) = binarize_balanced(&ids, &vals)?;
        Ok(ids.into_iter().zip(classes).collect())
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<LabelTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            n_trees: 50,
            max_depth: 7,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        class: u8,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_one(&self, row: &[f64]) -> u8 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { class } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
}

fn majority(labels: impl Iterator<Item = u8>) -> u8 {
    let mut counts = [0usize; 2];
    for l in labels {
        counts[l as usize] += 1;
    }
    // ties resolve to class 0
    u8::from(counts[1] > counts[0])
}

fn gini_of_counts(c0: usize, c1: usize) -> f64 {
    let n = (c0 + c1) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = c0 as f64 / n;
    let p1 = c1 as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

/// Best (threshold, weighted child Gini) for one feature over the node's
/// samples, scanning midpoints between consecutive distinct sorted values.
fn best_split_on_feature(
    x: &Array2<f64>,
    y: &[u8],
    idxs: &[usize],
    feature: usize,
) -> Option<(f64, f64)> {
    let mut pairs: Vec<(f64, u8)> = idxs.iter().map(|&i| (x[[i, feature]], y[i])).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
    let n = pairs.len();
    let total1 = pairs.iter().filter(|p| p.1 == 1).count();
    let total0 = n - total1;
    let (mut left0, mut left1) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n - 1 {
        if pairs[i].1 == 1 {
            left1 += 1;
        } else {
            left0 += 1;
        }
        if pairs[i].0 == pairs[i + 1].0 {
            continue;
        }
        let right0 = total0 - left0;
        let right1 = total1 - left1;
        let nl = (left0 + left1) as f64;
        let nr = (right0 + right1) as f64;
        let score = (nl * gini_of_counts(left0, left1) + nr * gini_of_counts(right0, right1))
            / n as f64;
        let thr = 0.5 * (pairs[i].0 + pairs[i + 1].0);
        if best.is_none() || score < best.unwrap().1 {
            best = Some((thr, score));
        }
    }
    best
}

fn grow_tree(
    x: &Array2<f64>,
    y: &[u8],
    idxs: Vec<usize>,
    depth: usize,
    cfg: &RfConfig,
    n_sub_features: usize,
    rng: &mut impl Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let c1 = idxs.iter().filter(|&&i| y[i] == 1).count();
    let c0 = idxs.len() - c1;
    let make_leaf = |nodes: &mut Vec<Node>| {
        nodes.push(Node::Leaf {
            class: u8::from(c1 > c0),
        });
        nodes.len() - 1
    };
    if depth >= cfg.max_depth || idxs.len() < cfg.min_samples_split || c0 == 0 || c1 == 0 {
        return make_leaf(nodes);
    }

    let n_features = x.ncols();
    let mut features: Vec<usize> = (0..n_features).collect();
    features.shuffle(rng);
    features.truncate(n_sub_features);
    features.sort_unstable(); // scan order independent of the shuffle result

    let mut best: Option<(usize, f64, f64)> = None;
    for &f in &features {
        if let Some((thr, score)) = best_split_on_feature(x, y, &idxs, f) {
            if best.is_none() || score < best.unwrap().2 {
                best = Some((f, thr, score));
            }
        }
    }
    let Some((feature, threshold, _)) = best else {
        return make_leaf(nodes);
    };
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        idxs.iter().partition(|&&i| x[[i, feature]] <= threshold);
    if left_idx.is_empty() || right_idx.is_empty() {
        return make_leaf(nodes);
    }

    let slot = nodes.len();
    nodes.push(Node::Leaf { class: 0 }); // placeholder until children exist
    let left = grow_tree(x, y, left_idx, depth + 1, cfg, n_sub_features, rng, nodes);
    let right = grow_tree(x, y, right_idx, depth + 1, cfg, n_sub_features, rng, nodes);
    nodes[slot] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    slot
}

/// Fit a Random Forest: `n_trees` trees on bootstrap resamples, each split
/// choosing among ceil(sqrt(F)) randomly drawn features by Gini impurity.
pub fn rf_fit(x: &Array2<f64>, y: &[u8], cfg: &RfConfig, seed: u64) -> Result<Forest> {
    let n = x.nrows();
    if n == 0 || n != y.len() {
        return Err(Error::invalid(format!(
            "feature matrix rows ({n}) must be nonzero and match labels ({})",
            y.len()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::invalid("feature matrix has no columns"));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be binary (0/1)"));
    }
    let n_sub = (x.ncols() as f64).sqrt().ceil() as usize;
    let trees = (0..cfg.n_trees)
        .map(|t| {
            let mut rng = child_rng(seed, &[0x464f52, t as u64]);
            let idxs: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let mut nodes = Vec::new();
            grow_tree(x, y, idxs, 0, cfg, n_sub, &mut rng, &mut nodes);
            Tree { nodes }
        })
        .collect();
    Ok(Forest {
        trees,
        n_features: x.ncols(),
    })
}

/// Majority vote across trees; exact ties go to class 0.
pub fn rf_predict(forest: &Forest, x: &Array2<f64>) -> Result<Vec<u8>> {
    if x.ncols() != forest.n_features {
        return Err(Error::invalid(format!(
            "forest expects {} features, got {}",
            forest.n_features,
            x.ncols()
        )));
    }
    Ok((0..x.nrows())
        .map(|i| {
            let row: Vec<f64> = x.row(i).to_vec();
            majority(forest.trees.iter().map(|t| t.predict_one(&row)))
        })
        .collect())
}

/// Per-tree votes for one sample, for vote-recount checks.
pub fn rf_votes(forest: &Forest, row: &[f64]) -> Vec<u8> {
    forest.trees.iter().map(|t| t.predict_one(row)).collect()
}

pub fn accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / pred.len() as f64
}

/// Requested training-set sizes for the ablation; `Full` means every train
/// chip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleSize {
    N(usize),
    Full(String),
}

impl SampleSize {
    pub fn full() -> SampleSize {
        SampleSize::Full("full".to_string())
    }

    pub fn requested(&self, pool: usize) -> usize {
        match self {
            SampleSize::N(n) => *n,
            SampleSize::Full(_) => pool,
        }
    }

    pub fn label(&self) -> String {
        match self {
            SampleSize::N(n) => n.to_string(),
            SampleSize::Full(_) => "full".to_string(),
        }
    }
}

pub fn default_sizes() -> Vec<SampleSize> {
    let mut v: Vec<SampleSize> = [5usize, 10, 100, 250, 500, 1000, 5000, 20000]
        .into_iter()
        .map(SampleSize::N)
        .collect();
    v.push(SampleSize::full());
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub sizes: Vec<SampleSize>,
    pub repeats: usize,
    pub rf: RfConfig,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            sizes: default_sizes(),
            repeats: 10,
            rf: RfConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub modality: String,
    pub task: String,
    pub size: String,
    /// Actual training-set size after clamping to the available pool.
    pub effective_size: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub repeats: usize,
    pub n_train_pool: usize,
    pub n_test: usize,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, modality: ProbeModality, task: Task, size: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| {
            c.modality == modality.name() && c.task == task.name() && c.size == size
        })
    }

    pub fn cells_for(&self, modality: ProbeModality, task: Task) -> Vec<&AblationCell> {
        self.cells
            .iter()
            .filter(|c| c.modality == modality.name() && c.task == task.name())
            .collect()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<AblationReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn feature_matrix(
    embeddings: &EmbeddingSet,
    ids: &[u64],
    pm: ProbeModality,
) -> Result<Array2<f64>> {
    let first = embeddings.features(ids[0], pm)?;
    let d = first.len();
    let mut x = Array2::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        let f = embeddings.features(id, pm)?;
        for (j, v) in f.into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    Ok(x)
}

/// Run the full few-shot ablation: for each probe modality, task, sample
/// size, and repeat, fit a Random Forest on a fresh subsample of the train
/// pool and score it on the test split. Oversized requests are clamped to
/// the pool with a warning.
pub fn run_ablation(
    embeddings: &EmbeddingSet,
    labels: &LabelTable,
    index: &ChipIndex,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    if cfg.sizes.is_empty() {
        return Err(Error::invalid("at least one sample size is required"));
    }
    let has_emb = |id: &u64| embeddings.get(*id, crate::model::Modality::S2Rgbm).is_some();
    let train_pool: Vec<u64> = index
        .chip_ids_in(Split::Train)
        .into_iter()
        .filter(|id| has_emb(id) && labels.values.contains_key(id))
        .collect();
    let test_ids: Vec<u64> = index
        .chip_ids_in(Split::Test)
        .into_iter()
        .filter(|id| has_emb(id) && labels.values.contains_key(id))
        .collect();
    if train_pool.is_empty() || test_ids.is_empty() {
        return Err(Error::invalid(
            "ablation needs embedded, labeled chips in both train and test splits",
        ));
    }

    let modalities = [
        ProbeModality::S1Grdm,
        ProbeModality::S2Rgbm,
        ProbeModality::Gunw,
        ProbeModality::ModsConcat,
    ];
    let mut cells = Vec::new();
    for (mi, &pm) in modalities.iter().enumerate() {
        let x_train_full = feature_matrix(embeddings, &train_pool, pm)?;
        let x_test = feature_matrix(embeddings, &test_ids, pm)?;
        for (ti, task) in Task::ALL.into_iter().enumerate() {
            let classes = labels.binarized(task)?;
            let y_train_full: Vec<u8> = train_pool.iter().map(|id| classes[id]).collect();
            let y_test: Vec<u8> = test_ids.iter().map(|id| classes[id]).collect();
            for (si, size) in cfg.sizes.iter().enumerate() {
                let requested = size.requested(train_pool.len());
                let effective = requested.min(train_pool.len());
                if effective < requested {
                    eprintln!(
                        "warning: sample size {requested} clamped to train pool size {effective}"
                    );
                }
                if effective < 2 {
                    return Err(Error::invalid(format!(
                        "sample size {} is too small to fit a classifier",
                        size.label()
                    )));
                }
                let mut accs = Vec::with_capacity(cfg.repeats);
                for rep in 0..cfg.repeats {
                    let mut rng = child_rng(
                        cfg.seed,
                        &[0x41424c, mi as u64, ti as u64, si as u64, rep as u64],
                    );
                    let mut order: Vec<usize> = (0..train_pool.len()).collect();
                    order.shuffle(&mut rng);
                    order.truncate(effective);
                    let rows: Vec<usize> = order;
                    let x_sub = x_train_full.select(ndarray::Axis(0), &rows);
                    let y_sub: Vec<u8> = rows.iter().map(|&i| y_train_full[i]).collect();
                    let fit_seed =
                        crate::rng::derive_seed(cfg.seed, &[0x464954, mi as u64, ti as u64, si as u64, rep as u64]);
                    let forest = rf_fit(&x_sub, &y_sub, &cfg.rf, fit_seed)?;
                    let pred = rf_predict(&forest, &x_test)?;
                    accs.push(accuracy(&pred, &y_test));
                }
                let (mean, std) = mean_std(&accs);
                cells.push(AblationCell {
                    modality: pm.name().to_string(),
                    task: task.name().to_string(),
                    size: size.label(),
                    effective_size: effective,
                    accuracies: accs,
                    mean_accuracy: mean,
                    std_accuracy: std,
                });
            }
        }
    }
    Ok(AblationReport {
        repeats: cfg.repeats,
        n_train_pool: train_pool.len(),
        n_test: test_ids.len(),
        cells,
    })
}

/// Smallest effective sample size whose mean accuracy reaches 95% of the
/// full-size mean accuracy for (modality, task). `None` when no size
/// qualifies or the cells are missing.
pub fn min_shots_for_95(
    report: &AblationReport,
    modality: ProbeModality,
    task: Task,
) -> Option<usize> {
    let cells = report.cells_for(modality, task);
    let full = cells.iter().max_by_key(|c| c.effective_size)?;
    let target = 0.95 * full.mean_accuracy;
    let mut ordered: Vec<&&AblationCell> = cells.iter().collect();
    ordered.sort_by_key(|c| c.effective_size);
    ordered
        .iter()
        .find(|c| c.mean_accuracy >= target)
        .map(|c| c.effective_size)
}
