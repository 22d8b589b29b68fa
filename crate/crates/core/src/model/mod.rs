//! Three single-channel ViT encoder towers with random channel selection.

pub mod vit;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::child_rng;
use crate::synth::ModalityChip;

pub use vit::{EncodeCache, Layout, TensorSpec};

/// Input modalities. The order here fixes the concatenation order of the
/// `modsconcat` pseudo-modality: (s1grdm, s2rgbm, gunw).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    S1Grdm,
    S2Rgbm,
    Gunw,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::S1Grdm, Modality::S2Rgbm, Modality::Gunw];

    pub fn name(self) -> &'static str {
        match self {
            Modality::S1Grdm => "s1grdm",
            Modality::S2Rgbm => "s2rgbm",
            Modality::Gunw => "gunw",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Modality::S1Grdm => 0,
            Modality::S2Rgbm => 1,
            Modality::Gunw => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Modality> {
        Modality::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::invalid(format!("unknown modality code {code}")))
    }

    pub fn parse(s: &str) -> Result<Modality> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown modality '{s}'")))
    }

    pub fn idx(self) -> usize {
        self.code() as usize
    }

    /// Fixed input-normalization constants `(mean, std)` estimated once over a
    /// large sample of rendered chips. Raw pixel values share a large
    /// per-modality brightness offset; without removing it the patch embedding
    /// is dominated by that constant and all embeddings start nearly parallel,
    /// which stalls contrastive training at the uniform-softmax saddle.
    /// Normalizing with dataset-level constants (rather than per image)
    /// preserves cross-chip brightness differences that downstream probes use.
    pub fn norm_stats(self) -> (f64, f64) {
        match self {
            Modality::S1Grdm => (0.42, 0.185),
            Modality::S2Rgbm => (0.31, 0.197),
            Modality::Gunw => (0.45, 0.101),
        }
    }
}

/// ViT hyperparameters shared by the three towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_hw: usize,
    pub patch: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale default: trains in minutes on one CPU core while
    /// exercising every code path (multiple blocks, multiple heads).
    fn default() -> Self {
        EncoderConfig {
            image_hw: 32,
            patch: 8,
            depth: 2,
            width: 64,
            heads: 4,
            embed_dim: 32,
            mlp_ratio: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_hw == 0 || self.patch == 0 || self.image_hw % self.patch != 0 {
            return Err(Error::invalid(format!(
                "image_hw {} must be a positive multiple of patch {}",
                self.image_hw, self.patch
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::invalid("depth, embed_dim and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_hw / self.patch;
        side * side
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }
}

/// Closed-form trainable parameter count for one tower.
pub fn param_count(cfg: &EncoderConfig) -> usize {
    let p = cfg.patch * cfg.patch;
    let c = cfg.width;
    let t = cfg.tokens();
    let h = cfg.mlp_hidden();
    let d = cfg.embed_dim;
    let per_block = 2 * c            // ln1
        + c * 3 * c + 3 * c          // qkv
        + c * c + c                  // attn out
        + 2 * c                      // ln2
        + c * h + h                  // mlp in
        + h * c + c; // mlp out
    p * c + c + t * c + cfg.depth * per_block + c * d + d
}

pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;
/// CLIP convention: initial inverse scale 1/0.07.
pub const INIT_TEMPERATURE: f64 = 0.07;

/// One parameter set per modality plus a shared learnable log-temperature,
/// all stored in a single flat f64 vector:
/// `[s1grdm | s2rgbm | gunw | log_temperature]`.
#[derive(Debug, Clone)]
pub struct TowerSet {
    pub config: EncoderConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

/// How a multi-channel chip is reduced to one embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbedMode {
    /// Sample one available channel uniformly (the pretraining procedure).
    RandomSingle,
    /// Encode a specific channel; it must be available.
    Fixed(usize),
    /// Re-normalized mean of the per-available-channel embeddings.
    MeanOverChannels,
}

impl EmbedMode {
    pub fn parse(s: &str) -> Result<EmbedMode> {
        match s {
            "random" | "random-single" => Ok(EmbedMode::RandomSingle),
            "mean" | "mean-over-channels" => Ok(EmbedMode::MeanOverChannels),
            other => {
                if let Some(k) = other.strip_prefix("fixed:") {
                    let k: usize = k
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad fixed channel '{other}'")))?;
                    Ok(EmbedMode::Fixed(k))
                } else {
                    Err(Error::invalid(format!("unknown embed mode '{other}'")))
                }
            }
        }
    }
}

/// Standardize a raster with the modality's fixed [`Modality::norm_stats`]
/// constants. Applied by every encode path before patchification.
pub fn normalize_input(modality: Modality, image: &Array2<f64>) -> Array2<f64> {
    let (mean, std) = modality.norm_stats();
    image.mapv(|v| (v - mean) / std)
}

/// Uniformly sample one available channel index.
pub fn sample_channel<R: Rng>(chip: &ModalityChip, rng: &mut R) -> Result<usize> {
    let available: Vec<usize> = chip
        .channel_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if available.is_empty() {
        return Err(Error::missing(format!(
            "chip {} ({}) has no available channels",
            chip.chip_id,
            chip.modality.name()
        )));
    }
    Ok(available[rng.gen_range(0..available.len())])
}

impl TowerSet {
    /// Random init: weights N(0, 0.02^2), biases zero, layer-norm gains one.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<TowerSet> {
        config.validate()?;
        let layout = Layout::new(&config);
        let per_tower = layout.total;
        let mut params = vec![0.0; per_tower * 3 + 1];
        for modality in Modality::ALL {
            let base = modality.idx() * per_tower;
            for (ti, spec) in layout.tensors.iter().enumerate() {
                let slice = &mut params[base + spec.offset..base + spec.offset + spec.len()];
                if spec.name.ends_with("gamma") {
                    slice.fill(1.0);
                } else if spec.shape.len() == 1 {
                    // biases and layer-norm shifts stay zero
                } else {
                    let mut rng =
                        child_rng(seed, &[0x494e_4954, modality.code() as u64, ti as u64]);
                    for v in slice.iter_mut() {
                        *v = 0.02 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        params[per_tower * 3] = INIT_TEMPERATURE.ln();
        Ok(TowerSet {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: EncoderConfig, params: Vec<f64>) -> Result<TowerSet> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total * 3 + 1 {
            return Err(Error::invalid(format!(
                "parameter vector length {} does not match layout ({})",
                params.len(),
                layout.total * 3 + 1
            )));
        }
        Ok(TowerSet {
            config,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn per_tower_len(&self) -> usize {
        self.layout.total
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn tower(&self, m: Modality) -> &[f64] {
        let n = self.layout.total;
        &self.params[m.idx() * n..(m.idx() + 1) * n]
    }

    pub fn log_temperature(&self) -> f64 {
        self.params[self.layout.total * 3]
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature()
            .exp()
            .clamp(MIN_TEMPERATURE, MAX_TEMPERATURE)
    }

    /// True when the temperature gradient is not killed by the clamp.
    pub fn temperature_in_range(&self) -> bool {
        let t = self.log_temperature().exp();
        (MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&t)
    }

    /// Encode a single-channel raster with the given tower.
    pub fn encode(&self, modality: Modality, image: &Array2<f64>) -> Result<Array1<f64>> {
        let normed = normalize_input(modality, image);
        let (e, _) =
            vit::forward(&self.config, &self.layout, self.tower(modality), &normed, false)?;
        Ok(e)
    }

    /// Encode with cached activations for a later [`Self::encode_backward`].
    pub fn encode_with_cache(
        &self,
        modality: Modality,
        image: &Array2<f64>,
    ) -> Result<(Array1<f64>, EncodeCache)> {
        let normed = normalize_input(modality, image);
        let (e, cache) =
            vit::forward(&self.config, &self.layout, self.tower(modality), &normed, true)?;
        Ok((e, cache.expect("cache requested")))
    }

    /// Accumulate d(loss)/d(params) for one encode into `grad`, which has the
    /// same layout as `self.params`.
    pub fn encode_backward(
        &self,
        modality: Modality,
        cache: &EncodeCache,
        d_embedding: &Array1<f64>,
        grad: &mut [f64],
    ) {
        let n = self.layout.total;
        vit::backward(
            &self.config,
            &self.layout,
            self.tower(modality),
            cache,
            d_embedding,
            &mut grad[modality.idx() * n..(modality.idx() + 1) * n],
        );
    }

    /// Embed one chip according to the channel-selection mode.
    pub fn embed_chip<R: Rng>(
        &self,
        chip: &ModalityChip,
        mode: EmbedMode,
        rng: &mut R,
    ) -> Result<Array1<f64>> {
        chip.validate()?;
        let channel_image = |k: usize| chip.channels.index_axis(ndarray::Axis(0), k).to_owned();
        match mode {
            EmbedMode::RandomSingle => {
                let k = sample_channel(chip, rng)?;
                self.encode(chip.modality, &channel_image(k))
            }
            EmbedMode::Fixed(k) => {
                if k >= chip.channel_mask.len() || !chip.channel_mask[k] {
                    return Err(Error::missing(format!(
                        "channel {k} not available on chip {} ({})",
                        chip.chip_id,
                        chip.modality.name()
                    )));
                }
                self.encode(chip.modality, &channel_image(k))
            }
            EmbedMode::MeanOverChannels => {
                let mut acc: Option<Array1<f64>> = None;
                let mut n = 0usize;
                for (k, &avail) in chip.channel_mask.iter().enumerate() {
                    if !avail {
                        continue;
                    }
                    let e = self.encode(chip.modality, &channel_image(k))?;
                    acc = Some(match acc {
                        None => e,
                        Some(a) => a + e,
                    });
                    n += 1;
                }
                let mean = acc.ok_or_else(|| Error::missing("no available channels"))?
                    / n as f64;
                let norm = mean.dot(&mean).sqrt();
                if norm < 1e-30 {
                    return Err(Error::Numeric(
                        "mean-over-channels embedding collapsed to zero".into(),
                    ));
                }
                Ok(mean.mapv(|v| v / norm))
            }
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"TCKP";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

/// Manifest written next to the parameter blob.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: EncoderConfig,
    pub step: usize,
    pub val_loss: Option<f64>,
    pub dtype: String,
    pub total_params: usize,
    tensors: Vec<CheckpointTensor>,
}

/// Write `<stem>.json` + `<stem>.bin` (flat little-endian f32 blob).
pub fn save_checkpoint(
    stem: &Path,
    towers: &TowerSet,
    step: usize,
    val_loss: Option<f64>,
) -> Result<(PathBuf, PathBuf)> {
    let layout = towers.layout();
    let mut tensors = Vec::new();
    for modality in Modality::ALL {
        let base = modality.idx() * layout.total;
        for spec in &layout.tensors {
            tensors.push(CheckpointTensor {
                name: format!("{}.{}", modality.name(), spec.name),
                offset: base + spec.offset,
                shape: spec.shape.clone(),
            });
        }
    }
    tensors.push(CheckpointTensor {
        name: "log_temperature".into(),
        offset: layout.total * 3,
        shape: vec![1],
    });

    let manifest = CheckpointManifest {
        config: towers.config.clone(),
        step,
        val_loss,
        dtype: "f32".into(),
        total_params: towers.params.len(),
        tensors,
    };

    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let mut bytes = Vec::with_capacity(towers.params.len() * 4 + 4);
    bytes.extend_from_slice(CKPT_MAGIC);
    for &v in &towers.params {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok((json_path, bin_path))
}

pub fn load_checkpoint(stem: &Path) -> Result<(TowerSet, CheckpointManifest)> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if manifest.dtype != "f32" {
        return Err(Error::format(
            &json_path,
            format!("unsupported checkpoint dtype '{}'", manifest.dtype),
        ));
    }

    let mut f = std::fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() < 4 || &bytes[0..4] != CKPT_MAGIC {
        return Err(Error::format(&bin_path, "bad checkpoint magic".to_string()));
    }
    let payload = &bytes[4..];
    if payload.len() != manifest.total_params * 4 {
        return Err(Error::format(
            &bin_path,
            format!(
                "truncated parameter blob: {} bytes for {} params",
                payload.len(),
                manifest.total_params
            ),
        ));
    }
    let params: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let towers = TowerSet::from_params(manifest.config.clone(), params)?;
    Ok((towers, manifest))
}
