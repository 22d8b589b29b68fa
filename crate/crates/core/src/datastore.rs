//! Bit-exact persistence: one binary file per (chip, modality) plus a JSON
//! manifest, and per-modality embedding tables.
//!
//! Chip file layout (all little-endian):
//! `magic "TCHP" | version u16 | chip_id u64 | modality u8 | dtype u8 |
//!  C u32 | H u32 | W u32 | native_scale u32 | mask C bytes |
//!  payload C*H*W f32 (channel-major)`.
//! Masked-out channels are stored as zeros.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::synth::ModalityChip;

pub const CHIP_MAGIC: &[u8; 4] = b"TCHP";
pub const CHIP_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// On-disk form of one chip raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipRecord {
    pub chip_id: u64,
    pub modality: Modality,
    pub c: u32,
    pub h: u32,
    pub w: u32,
    pub native_scale: u32,
    pub mask: Vec<bool>,
    /// channel-major C*H*W
    pub payload: Vec<f32>,
}

impl ChipRecord {
    pub fn validate(&self) -> Result<()> {
        let n = (self.c as usize) * (self.h as usize) * (self.w as usize);
        if self.payload.len() != n {
            return Err(Error::invalid(format!(
                "payload length {} != C*H*W = {n}",
                self.payload.len()
            )));
        }
        if self.mask.len() != self.c as usize {
            return Err(Error::invalid(format!(
                "mask length {} != channel count {}",
                self.mask.len(),
                self.c
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::missing("all channels masked out".to_string()));
        }
        Ok(())
    }

    pub fn from_chip(chip: &ModalityChip) -> Result<ChipRecord> {
        chip.validate()?;
        let (c, h, w) = {
            let s = chip.channels.shape();
            (s[0], s[1], s[2])
        };
        let plane = h * w;
        let mut payload = vec![0f32; c * plane];
        for (k, &avail) in chip.channel_mask.iter().enumerate() {
            if !avail {
                continue; // masked channels stay zero on disk
            }
            for (i, &v) in chip
                .channels
                .index_axis(ndarray::Axis(0), k)
                .iter()
                .enumerate()
            {
                payload[k * plane + i] = v as f32;
            }
        }
        Ok(ChipRecord {
            chip_id: chip.chip_id,
            modality: chip.modality,
            c: c as u32,
            h: h as u32,
            w: w as u32,
            native_scale: chip.native_scale,
            mask: chip.channel_mask.clone(),
            payload,
        })
    }

    pub fn to_chip(&self) -> Result<ModalityChip> {
        self.validate()?;
        let (c, h, w) = (self.c as usize, self.h as usize, self.w as usize);
        let data: Vec<f64> = self.payload.iter().map(|&v| v as f64).collect();
        let channels = Array3::from_shape_vec((c, h, w), data)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(ModalityChip {
            chip_id: self.chip_id,
            modality: self.modality,
            channels,
            channel_mask: self.mask.clone(),
            native_scale: self.native_scale,
        })
    }
}

pub fn chip_file_name(chip_id: u64, modality: Modality) -> String {
    format!("chip_{chip_id:08}_{}.tcp", modality.name())
}

/// Write a chip record into `dir`; returns the file path.
pub fn write_chip(record: &ChipRecord, dir: &Path) -> Result<PathBuf> {
    record.validate()?;
    let path = dir.join(chip_file_name(record.chip_id, record.modality));
    let mut bytes = Vec::with_capacity(34 + record.mask.len() + record.payload.len() * 4);
    bytes.extend_from_slice(CHIP_MAGIC);
    bytes.extend_from_slice(&CHIP_VERSION.to_le_bytes());
    bytes.extend_from_slice(&record.chip_id.to_le_bytes());
    bytes.push(record.modality.code());
    bytes.push(DTYPE_F32);
    bytes.extend_from_slice(&record.c.to_le_bytes());
    bytes.extend_from_slice(&record.h.to_le_bytes());
    bytes.extend_from_slice(&record.w.to_le_bytes());
    bytes.extend_from_slice(&record.native_scale.to_le_bytes());
    for &m in &record.mask {
        bytes.push(u8::from(m));
    }
    for (k, &v) in record.payload.iter().enumerate() {
        let ch = k / ((record.h as usize) * (record.w as usize));
        let stored = if record.mask[ch] { v } else { 0.0 };
        bytes.extend_from_slice(&stored.to_le_bytes());
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn take<'a>(buf: &'a [u8], cursor: &mut usize, n: usize, path: &Path, field: &str) -> Result<&'a [u8]> {
    if *cursor + n > buf.len() {
        return Err(Error::format(
            path,
            format!("truncated file while reading {field}"),
        ));
    }
    let out = &buf[*cursor..*cursor + n];
    *cursor += n;
    Ok(out)
}

pub fn read_chip(path: &Path) -> Result<ChipRecord> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;

    let mut cur = 0usize;
    let magic = take(&buf, &mut cur, 4, path, "magic")?;
    if magic != CHIP_MAGIC {
        return Err(Error::format(path, "bad magic (field: magic)".to_string()));
    }
    let version = u16::from_le_bytes(take(&buf, &mut cur, 2, path, "version")?.try_into().unwrap());
    if version != CHIP_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version} (field: version)"),
        ));
    }
    let chip_id = u64::from_le_bytes(take(&buf, &mut cur, 8, path, "chip_id")?.try_into().unwrap());
    let modality = Modality::from_code(take(&buf, &mut cur, 1, path, "modality")?[0])
        .map_err(|e| Error::format(path, format!("{e} (field: modality)")))?;
    let dtype = take(&buf, &mut cur, 1, path, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::format(
            path,
            format!("unsupported dtype code {dtype} (field: dtype)"),
        ));
    }
    let c = u32::from_le_bytes(take(&buf, &mut cur, 4, path, "C")?.try_into().unwrap());
    let h = u32::from_le_bytes(take(&buf, &mut cur, 4, path, "H")?.try_into().unwrap());
    let w = u32::from_le_bytes(take(&buf, &mut cur, 4, path, "W")?.try_into().unwrap());
    let native_scale =
        u32::from_le_bytes(take(&buf, &mut cur, 4, path, "native_scale")?.try_into().unwrap());
    let mask: Vec<bool> = take(&buf, &mut cur, c as usize, path, "mask")?
        .iter()
        .map(|&b| b != 0)
        .collect();
    let n = (c as usize) * (h as usize) * (w as usize);
    let payload_bytes = take(&buf, &mut cur, n * 4, path, "payload")?;
    if cur != buf.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", buf.len() - cur),
        ));
    }
    let payload: Vec<f32> = payload_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let record = ChipRecord {
        chip_id,
        modality,
        c,
        h,
        w,
        native_scale,
        mask,
        payload,
    };
    record.validate()?;
    Ok(record)
}

/// JSON manifest listing every chip file in a store directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreManifest {
    pub aoi_name: String,
    pub hw: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub chip_id: u64,
    pub modality: Modality,
    pub c: u32,
    pub h: u32,
    pub w: u32,
}

impl StoreManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<StoreManifest> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

/// Which feature table a probe runs on: one real modality or the
/// concatenated pseudo-modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeModality {
    S1Grdm,
    S2Rgbm,
    Gunw,
    ModsConcat,
}

impl ProbeModality {
    pub const ALL: [ProbeModality; 4] = [
        ProbeModality::S1Grdm,
        ProbeModality::S2Rgbm,
        ProbeModality::Gunw,
        ProbeModality::ModsConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeModality::S1Grdm => "s1grdm",
            ProbeModality::S2Rgbm => "s2rgbm",
            ProbeModality::Gunw => "gunw",
            ProbeModality::ModsConcat => "modsconcat",
        }
    }

    pub fn parse(s: &str) -> Result<ProbeModality> {
        ProbeModality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown probe modality '{s}'")))
    }
}

/// Per-chip, per-modality unit-norm embedding vectors.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    pub dim: usize,
    entries: BTreeMap<u64, [Option<Vec<f64>>; 3]>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> EmbeddingSet {
        EmbeddingSet {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, chip_id: u64, modality: Modality, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding length {} != dim {}",
                v.len(),
                self.dim
            )));
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!(
                "embedding for chip {chip_id} has norm {norm}, expected unit"
            )));
        }
        self.entries.entry(chip_id).or_default()[modality.idx()] = Some(v);
        Ok(())
    }

    pub fn get(&self, chip_id: u64, modality: Modality) -> Option<&Vec<f64>> {
        self.entries.get(&chip_id)?[modality.idx()].as_ref()
    }

    pub fn chip_ids(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fixed-order concatenation (s1grdm, s2rgbm, gunw), length 3*dim.
    pub fn concat_embeddings(&self, chip_id: u64) -> Result<Vec<f64>> {
        let slot = self
            .entries
            .get(&chip_id)
            .ok_or_else(|| Error::missing(format!("chip {chip_id} has no embeddings")))?;
        let missing: Vec<&str> = Modality::ALL
            .iter()
            .filter(|m| slot[m.idx()].is_none())
            .map(|m| m.name())
            .collect();
        if !missing.is_empty() {
            return Err(Error::missing(format!(
                "chip {chip_id} is missing modalities: {}",
                missing.join(", ")
            )));
        }
        let mut out = Vec::with_capacity(3 * self.dim);
        for m in Modality::ALL {
            out.extend_from_slice(slot[m.idx()].as_ref().unwrap());
        }
        Ok(out)
    }

    /// Feature vector for a probe modality.
    pub fn features(&self, chip_id: u64, pm: ProbeModality) -> Result<Vec<f64>> {
        match pm {
            ProbeModality::ModsConcat => self.concat_embeddings(chip_id),
            ProbeModality::S1Grdm => self
                .get(chip_id, Modality::S1Grdm)
                .cloned()
                .ok_or_else(|| Error::missing(format!("chip {chip_id} missing s1grdm"))),
            ProbeModality::S2Rgbm => self
                .get(chip_id, Modality::S2Rgbm)
                .cloned()
                .ok_or_else(|| Error::missing(format!("chip {chip_id} missing s2rgbm"))),
            ProbeModality::Gunw => self
                .get(chip_id, Modality::Gunw)
                .cloned()
                .ok_or_else(|| Error::missing(format!("chip {chip_id} missing gunw"))),
        }
    }

    /// Write one `emb_<modality>.bin` per modality:
    /// `magic "TEMB" | version u16 | modality u8 | dim u32 | n u64 |
    ///  n x (chip_id u64, dim f64 LE)`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for m in Modality::ALL {
            let path = dir.join(format!("emb_{}.bin", m.name()));
            let rows: Vec<(&u64, &Vec<f64>)> = self
                .entries
                .iter()
                .filter_map(|(id, slot)| slot[m.idx()].as_ref().map(|v| (id, v)))
                .collect();
            let mut bytes = Vec::with_capacity(19 + rows.len() * (8 + self.dim * 8));
            bytes.extend_from_slice(b"TEMB");
            bytes.extend_from_slice(&1u16.to_le_bytes());
            bytes.push(m.code());
            bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
            bytes.extend_from_slice(&(rows.len() as u64).to_le_bytes());
            for (id, v) in rows {
                bytes.extend_from_slice(&id.to_le_bytes());
                for &x in v {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<EmbeddingSet> {
        let mut set: Option<EmbeddingSet> = None;
        for m in Modality::ALL {
            let path = dir.join(format!("emb_{}.bin", m.name()));
            if !path.exists() {
                continue;
            }
            let buf = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let mut cur = 0usize;
            let magic = take(&buf, &mut cur, 4, &path, "magic")?;
            if magic != b"TEMB" {
                return Err(Error::format(&path, "bad magic".to_string()));
            }
            let _version =
                u16::from_le_bytes(take(&buf, &mut cur, 2, &path, "version")?.try_into().unwrap());
            let code = take(&buf, &mut cur, 1, &path, "modality")?[0];
            if code != m.code() {
                return Err(Error::format(&path, "modality code mismatch".to_string()));
            }
            let dim =
                u32::from_le_bytes(take(&buf, &mut cur, 4, &path, "dim")?.try_into().unwrap())
                    as usize;
            let n =
                u64::from_le_bytes(take(&buf, &mut cur, 8, &path, "n")?.try_into().unwrap());
            let set = set.get_or_insert_with(|| EmbeddingSet::new(dim));
            if set.dim != dim {
                return Err(Error::format(&path, "dim mismatch across modalities".to_string()));
            }
            for _ in 0..n {
                let id = u64::from_le_bytes(
                    take(&buf, &mut cur, 8, &path, "chip_id")?.try_into().unwrap(),
                );
                let vals = take(&buf, &mut cur, dim * 8, &path, "vector")?;
                let v: Vec<f64> = vals
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                set.insert(id, m, v)
                    .map_err(|e| Error::format(&path, e.to_string()))?;
            }
        }
        set.ok_or_else(|| Error::missing(format!("no embedding files in {}", dir.display())))
    }
}
