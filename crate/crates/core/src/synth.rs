//! Deterministic synthetic multimodal chips.
//!
//! Each chip gets four smooth latent terrain fields (vegetation, built-up,
//! cropland, water) keyed on (seed, chip_id). The three modalities are
//! rendered as fixed nonlinear mixtures of those latents plus independent
//! noise, so cross-modal structure is real and downstream labels have an
//! exact oracle (the latent field mean).

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::rng::child_rng;

/// Downstream label tasks; each maps to one latent factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "modisveg")]
    ModisVeg,
    #[serde(rename = "ghsbuilts")]
    GhsBuiltS,
    #[serde(rename = "esawc-crops")]
    EsaWcCrops,
    #[serde(rename = "esawc-pwater")]
    EsaWcPWater,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::ModisVeg,
        Task::GhsBuiltS,
        Task::EsaWcCrops,
        Task::EsaWcPWater,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::ModisVeg => "modisveg",
            Task::GhsBuiltS => "ghsbuilts",
            Task::EsaWcCrops => "esawc-crops",
            Task::EsaWcPWater => "esawc-pwater",
        }
    }

    /// Position in [`Task::ALL`], used for label-table columns.
    pub fn idx(self) -> usize {
        self.factor()
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task '{s}'")))
    }

    fn factor(self) -> usize {
        match self {
            Task::ModisVeg => 0,
            Task::GhsBuiltS => 1,
            Task::EsaWcCrops => 2,
            Task::EsaWcPWater => 3,
        }
    }
}

/// Per-chip latent factor maps, values in [0,1].
/// Field order: vegetation, builtup, cropland, water.
#[derive(Debug, Clone)]
pub struct LatentFields {
    pub seed: u64,
    pub chip_id: u64,
    pub hw: usize,
    pub fields: [Array2<f64>; 4],
}

impl LatentFields {
    pub fn field(&self, task: Task) -> &Array2<f64> {
        &self.fields[task.factor()]
    }
}

/// One chip's raster for one modality: channel stack plus availability mask.
#[derive(Debug, Clone)]
pub struct ModalityChip {
    pub chip_id: u64,
    pub modality: Modality,
    /// C x H x W.
    pub channels: Array3<f64>,
    pub channel_mask: Vec<bool>,
    /// Pixels of native resolution per output pixel before upsampling.
    pub native_scale: u32,
}

impl ModalityChip {
    pub fn n_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn hw(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_channels();
        if self.channel_mask.len() != c {
            return Err(Error::invalid(format!(
                "channel_mask length {} != channel count {c}",
                self.channel_mask.len()
            )));
        }
        if !self.channel_mask.iter().any(|&m| m) {
            return Err(Error::missing(
                "chip has no available channels (all-false mask)".to_string(),
            ));
        }
        match self.modality {
            Modality::S2Rgbm | Modality::S1Grdm => {
                if c != 9 {
                    return Err(Error::invalid(format!(
                        "{} requires 9 channels, got {c}",
                        self.modality.name()
                    )));
                }
            }
            Modality::Gunw => {
                if !(2..=5).contains(&c) {
                    return Err(Error::invalid(format!(
                        "gunw requires 2..=5 channels, got {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mark channels unavailable. Masked channels are zeroed so stored and
    /// in-memory forms agree.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.n_channels() {
            return Err(Error::invalid("mask length mismatch"));
        }
        self.channel_mask = mask;
        for (k, &avail) in self.channel_mask.clone().iter().enumerate() {
            if !avail {
                self.channels.index_axis_mut(ndarray::Axis(0), k).fill(0.0);
            }
        }
        self.validate()?;
        Ok(self)
    }
}

/// Separable Gaussian blur with kernel radius `radius`.
fn gaussian_blur(field: &Array2<f64>, radius: usize) -> Array2<f64> {
    if radius == 0 {
        return field.clone();
    }
    let sigma = (radius as f64 / 2.0).max(0.5);
    let kernel: Vec<f64> = (-(radius as isize)..=(radius as isize))
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let (h, w) = field.dim();
    let r = radius as isize;

    // horizontal pass, clamped borders
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let jj = (j as isize + ki as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * field[[i, jj]];
            }
            tmp[[i, j]] = acc / ksum;
        }
    }
    // vertical pass
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let ii = (i as isize + ki as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[[ii, j]];
            }
            out[[i, j]] = acc / ksum;
        }
    }
    out
}

fn minmax_normalize(field: &mut Array2<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in field.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        field.fill(0.5);
    } else {
        field.mapv_inplace(|v| (v - lo) / (hi - lo));
    }
}

/// Generate the four latent fields for one chip, amplitude 1.
pub fn gen_latents(seed: u64, chip_id: u64, hw: usize) -> Result<LatentFields> {
    gen_latents_amp(seed, chip_id, hw, 1.0)
}

/// As [`gen_latents`] with a configurable amplitude; amplitude 0 yields
/// constant 0.5 fields (the degenerate zero-noise mode).
pub fn gen_latents_amp(seed: u64, chip_id: u64, hw: usize, amplitude: f64) -> Result<LatentFields> {
    if hw < 8 {
        return Err(Error::invalid(format!("latent field size {hw} < 8")));
    }
    let radius = hw / 8;
    let mut fields: Vec<Array2<f64>> = Vec::with_capacity(4);
    for factor in 0..4u64 {
        let mut rng = child_rng(seed, &[0x4c41_5445_4e54, chip_id, factor]); // "LATENT"
        let mut noise = Array2::zeros((hw, hw));
        for v in noise.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let mut field = gaussian_blur(&noise, radius);
        minmax_normalize(&mut field);
        // built-up and water are zero-inflated in the real label sources;
        // the quartic transform reproduces that skew.
        if factor == 1 || factor == 3 {
            field.mapv_inplace(|v| v.powi(4));
        }
        field.mapv_inplace(|v| 0.5 + amplitude * (v - 0.5));
        fields.push(field);
    }
    let fields: [Array2<f64>; 4] = fields.try_into().unwrap();
    Ok(LatentFields {
        seed,
        chip_id,
        hw,
        fields,
    })
}

/// Unclamped linear mixtures shared between modalities; index = band.
fn optical_mixture(v: f64, b: f64, c: f64, w: f64, band: usize) -> f64 {
    match band {
        0 => 0.20 + 0.30 * b + 0.40 * c - 0.25 * v - 0.15 * w,
        1 => 0.15 + 0.50 * v + 0.25 * c + 0.05 * b - 0.10 * w,
        _ => 0.10 + 0.50 * w + 0.25 * b - 0.15 * v,
    }
}

fn bilinear_upsample(src: &Array2<f64>, out_hw: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let mut out = Array2::zeros((out_hw, out_hw));
    let sy = sh as f64 / out_hw as f64;
    let sx = sw as f64 / out_hw as f64;
    for i in 0..out_hw {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_hw {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            out[[i, j]] = src[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                + src[[y0, x1]] * (1.0 - wy) * wx
                + src[[y1, x0]] * wy * (1.0 - wx)
                + src[[y1, x1]] * wy * wx;
        }
    }
    out
}

pub const DEFAULT_GUNW_DOWNSCALE: usize = 4;

/// Render one modality from the latent fields.
///
/// Channel layouts:
/// - `s2rgbm`: month-major triples, channel `3m+k` = optical band k, month m.
/// - `s1grdm`: per month `(vv, vh, log(vv) - log(vh))`.
/// - `gunw`: 2..=5 coherence-like channels rendered at reduced resolution
///   and bilinearly upsampled.
pub fn render_modality(
    latents: &LatentFields,
    modality: Modality,
    noise_level: f64,
    rng_seed: u64,
) -> Result<ModalityChip> {
    render_modality_opts(latents, modality, noise_level, DEFAULT_GUNW_DOWNSCALE, rng_seed)
}

pub fn render_modality_opts(
    latents: &LatentFields,
    modality: Modality,
    noise_level: f64,
    gunw_downscale: usize,
    rng_seed: u64,
) -> Result<ModalityChip> {
    if noise_level < 0.0 {
        return Err(Error::invalid("noise_level must be >= 0"));
    }
    let hw = latents.hw;
    let mut rng = child_rng(rng_seed, &[0x52_454e_4445_52, modality.code() as u64]);
    let [veg, blt, crp, wtr] = &latents.fields;

    let chip = match modality {
        Modality::S2Rgbm => {
            let mut channels = Array3::zeros((9, hw, hw));
            for month in 0..3 {
                for band in 0..3 {
                    let ch = month * 3 + band;
                    for i in 0..hw {
                        for j in 0..hw {
                            let base = optical_mixture(
                                veg[[i, j]],
                                blt[[i, j]],
                                crp[[i, j]],
                                wtr[[i, j]],
                                band,
                            )
                            .clamp(0.0, 1.0);
                            let n: f64 = rng.sample(StandardNormal);
                            channels[[ch, i, j]] = base + noise_level * n;
                        }
                    }
                }
            }
            ModalityChip {
                chip_id: latents.chip_id,
                modality,
                channels,
                channel_mask: vec![true; 9],
                native_scale: 1,
            }
        }
        Modality::S1Grdm => {
            let mut channels = Array3::zeros((9, hw, hw));
            for month in 0..3 {
                for i in 0..hw {
                    for j in 0..hw {
                        let (v, b, c, w) = (veg[[i, j]], blt[[i, j]], crp[[i, j]], wtr[[i, j]]);
                        // vv tracks the optical band-0 mixture so the two
                        // modalities carry genuine shared signal
                        let vv_base = (-1.2 + 1.5 * optical_mixture(v, b, c, w, 0)).exp();
                        let vh_base = (-1.6 + 0.7 * v + 0.5 * b + 0.2 * c - 1.5 * w).exp();
                        let nv: f64 = rng.sample(StandardNormal);
                        let nh: f64 = rng.sample(StandardNormal);
                        let vv = vv_base * (noise_level * nv).exp();
                        let vh = vh_base * (noise_level * nh).exp();
                        channels[[month * 3, i, j]] = vv;
                        channels[[month * 3 + 1, i, j]] = vh;
                        channels[[month * 3 + 2, i, j]] = vv.ln() - vh.ln();
                    }
                }
            }
            ModalityChip {
                chip_id: latents.chip_id,
                modality,
                channels,
                channel_mask: vec![true; 9],
                native_scale: 1,
            }
        }
        Modality::Gunw => {
            if gunw_downscale == 0 || hw % gunw_downscale != 0 {
                return Err(Error::invalid(format!(
                    "gunw downscale {gunw_downscale} must divide chip size {hw}"
                )));
            }
            let n_channels = rng.gen_range(2..=5usize);
            let small = hw / gunw_downscale;
            let mut channels = Array3::zeros((n_channels, hw, hw));
            for ch in 0..n_channels {
                let mut coarse = Array2::zeros((small, small));
                for i in 0..small {
                    for j in 0..small {
                        // average-pool the latents down to native resolution
                        let (mut v, mut b, mut c, mut w) = (0.0, 0.0, 0.0, 0.0);
                        for di in 0..gunw_downscale {
                            for dj in 0..gunw_downscale {
                                let (ii, jj) = (i * gunw_downscale + di, j * gunw_downscale + dj);
                                v += veg[[ii, jj]];
                                b += blt[[ii, jj]];
                                c += crp[[ii, jj]];
                                w += wtr[[ii, jj]];
                            }
                        }
                        let a = (gunw_downscale * gunw_downscale) as f64;
                        let (v, b, c, w) = (v / a, b / a, c / a, w / a);
                        let n: f64 = rng.sample(StandardNormal);
                        coarse[[i, j]] = (0.85 - 0.45 * v - 0.35 * w - 0.15 * c + 0.10 * b
                            - 0.05 * ch as f64
                            + noise_level * n)
                            .clamp(0.0, 1.0);
                    }
                }
                let up = bilinear_upsample(&coarse, hw);
                channels
                    .index_axis_mut(ndarray::Axis(0), ch)
                    .assign(&up);
            }
            ModalityChip {
                chip_id: latents.chip_id,
                modality,
                channels,
                channel_mask: vec![true; n_channels],
                native_scale: gunw_downscale as u32,
            }
        }
    };
    chip.validate()?;
    Ok(chip)
}

/// The label oracle: spatial mean of the task's latent field.
pub fn derive_label(latents: &LatentFields, task: Task) -> f64 {
    let f = latents.field(task);
    f.sum() / f.len() as f64
}
