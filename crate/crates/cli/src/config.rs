//! Run configuration: one JSON file drives every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use triclip_core::model::EncoderConfig;
use triclip_core::probe::AblationConfig;
use triclip_core::viz::TsneConfig;
use triclip_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AoiSection {
    pub name: String,
    pub rows: u32,
    pub cols: u32,
    pub chip_size_m: u32,
    pub band_width: u32,
    /// Split band pattern, e.g. "TTTVE" (train/train/train/val/test).
    pub pattern: String,
}

impl Default for AoiSection {
    fn default() -> Self {
        AoiSection {
            name: "synthetic-aoi".to_string(),
            rows: 10,
            cols: 10,
            chip_size_m: 448,
            band_width: 1,
            pattern: "TTTVE".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChipSection {
    pub hw: usize,
    pub noise_level: f64,
    pub gunw_downscale: usize,
}

impl Default for ChipSection {
    fn default() -> Self {
        ChipSection {
            hw: 32,
            noise_level: 0.05,
            gunw_downscale: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Steps between validation evals; 0 = once per epoch.
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 5,
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectSection {
    pub tsne: TsneConfig,
    /// Cap on how many test-split chips are projected.
    pub max_points: usize,
    /// Feature source: s1grdm | s2rgbm | gunw | modsconcat.
    pub modality: String,
}

impl Default for ProjectSection {
    fn default() -> Self {
        ProjectSection {
            tsne: TsneConfig {
                perplexity: 10.0,
                n_iters: 500,
                exaggeration_iters: 125,
                ..TsneConfig::default()
            },
            max_points: 500,
            modality: "modsconcat".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub aoi: AoiSection,
    pub chips: ChipSection,
    pub encoder: EncoderConfig,
    pub train: TrainSection,
    /// Embedding reduction over channels: mean | random | fixed:<k>.
    pub embed_mode: String,
    pub ablation: AblationConfig,
    pub project: ProjectSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            aoi: AoiSection::default(),
            chips: ChipSection::default(),
            encoder: EncoderConfig::default(),
            train: TrainSection::default(),
            embed_mode: "mean".to_string(),
            ablation: AblationConfig {
                sizes: vec![
                    triclip_core::probe::SampleSize::N(5),
                    triclip_core::probe::SampleSize::N(10),
                    triclip_core::probe::SampleSize::N(25),
                    triclip_core::probe::SampleSize::full(),
                ],
                repeats: 3,
                ..AblationConfig::default()
            },
            project: ProjectSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable config");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.chips.hw != self.encoder.image_hw {
            return Err(Error::invalid(format!(
                "chip size {} must match encoder image size {}",
                self.chips.hw, self.encoder.image_hw
            )));
        }
        triclip_core::grid::parse_pattern(&self.aoi.pattern)?;
        triclip_core::model::EmbedMode::parse(&self.embed_mode)?;
        triclip_core::datastore::ProbeModality::parse(&self.project.modality)?;
        if self.project.max_points < 4 {
            return Err(Error::invalid("project.max_points must be >= 4"));
        }
        Ok(())
    }
}
