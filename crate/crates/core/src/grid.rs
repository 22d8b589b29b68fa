//! Rectangular chip grid for an abstract AOI with band-structured
//! train/validation/test splits.
//!
//! Splits are assigned to contiguous vertical bands of columns from a
//! repeating split cycle, which reproduces the striping of geographically
//! aware splits while keeping the 60/20/20 ratio.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn idx(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    /// Parse a one-letter code (T/V/E) as used in split-cycle patterns.
    pub fn from_code(c: char) -> Result<Split> {
        match c.to_ascii_uppercase() {
            'T' => Ok(Split::Train),
            'V' => Ok(Split::Val),
            'E' => Ok(Split::Test),
            other => Err(Error::invalid(format!(
                "unknown split code '{other}' (expected T, V or E)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipEntry {
    pub id: u64,
    pub row: u32,
    pub col: u32,
    pub split: Split,
}

/// The AOI grid: chip ids are dense in `[0, rows*cols)`, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChipIndex {
    pub aoi_name: String,
    pub chip_size_m: u32,
    pub rows: u32,
    pub cols: u32,
    pub chips: Vec<ChipEntry>,
}

impl ChipIndex {
    pub fn n_chips(&self) -> usize {
        self.chips.len()
    }

    pub fn split_of(&self, chip_id: u64) -> Option<Split> {
        self.chips.get(chip_id as usize).map(|c| c.split)
    }

    pub fn chip_ids_in(&self, split: Split) -> Vec<u64> {
        self.chips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    /// Fraction of chips per split, ordered (train, val, test).
    pub fn split_fractions(&self) -> [f64; 3] {
        let mut counts = [0usize; 3];
        for c in &self.chips {
            counts[c.split.idx()] += 1;
        }
        let n = self.chips.len().max(1) as f64;
        [
            counts[0] as f64 / n,
            counts[1] as f64 / n,
            counts[2] as f64 / n,
        ]
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<ChipIndex> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Result of [`assign_splits`]: the updated index plus a ratio check.
///
/// `ratio_warning` is set when the realized fractions fall outside
/// 60/20/20 +- 5 percentage points (degenerate band layouts).
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub index: ChipIndex,
    pub fractions: [f64; 3],
    pub ratio_warning: bool,
}

/// Build a grid with `rows * cols` chips; every chip starts as train until
/// [`assign_splits`] is applied.
pub fn build_grid(aoi_name: &str, rows: u32, cols: u32, chip_size_m: u32) -> Result<ChipIndex> {
    if rows == 0 || cols == 0 || chip_size_m == 0 {
        return Err(Error::invalid(format!(
            "grid dimensions must be positive (rows={rows}, cols={cols}, chip_size_m={chip_size_m})"
        )));
    }
    let mut chips = Vec::with_capacity(rows as usize * cols as usize);
    for r in 0..rows {
        for c in 0..cols {
            chips.push(ChipEntry {
                id: (r as u64) * (cols as u64) + c as u64,
                row: r,
                col: c,
                split: Split::Train,
            });
        }
    }
    Ok(ChipIndex {
        aoi_name: aoi_name.to_string(),
        chip_size_m,
        rows,
        cols,
        chips,
    })
}

/// Group columns into contiguous bands of width `band_width_chips` and give
/// each band one split from the cycled `pattern`. The seed rotates the
/// starting point of the cycle; everything else is deterministic.
pub fn assign_splits(
    index: &ChipIndex,
    band_width_chips: u32,
    pattern: &[Split],
    seed: u64,
) -> Result<SplitAssignment> {
    if band_width_chips == 0 {
        return Err(Error::invalid("band width must be >= 1"));
    }
    if band_width_chips > index.cols {
        return Err(Error::invalid(format!(
            "band width {band_width_chips} wider than grid ({} cols)",
            index.cols
        )));
    }
    if pattern.is_empty() {
        return Err(Error::invalid("split pattern must be non-empty"));
    }
    let mut counts = [0usize; 3];
    for s in pattern {
        counts[s.idx()] += 1;
    }
    // multiset ratio 3:1:1
    if counts[1] == 0 || counts[0] != 3 * counts[1] || counts[1] != counts[2] {
        return Err(Error::invalid(format!(
            "split pattern must have a 3:1:1 train:val:test ratio, got {counts:?}"
        )));
    }

    let offset = (seed % pattern.len() as u64) as usize;
    let mut out = index.clone();
    for chip in &mut out.chips {
        let band = (chip.col / band_width_chips) as usize;
        chip.split = pattern[(band + offset) % pattern.len()];
    }

    let fractions = out.split_fractions();
    let target = [0.6, 0.2, 0.2];
    let ratio_warning = fractions
        .iter()
        .zip(target.iter())
        .any(|(f, t)| (f - t).abs() > 0.05);

    Ok(SplitAssignment {
        index: out,
        fractions,
        ratio_warning,
    })
}

/// Parse a pattern string like "T,T,T,V,E" or "TTTVE".
pub fn parse_pattern(s: &str) -> Result<Vec<Split>> {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(Split::from_code)
        .collect()
}

pub const DEFAULT_PATTERN: [Split; 5] = [
    Split::Train,
    Split::Train,
    Split::Train,
    Split::Val,
    Split::Test,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_grid() {
        let g = build_grid("a", 1, 1, 448).unwrap();
        assert_eq!(g.n_chips(), 1);
        assert_eq!(g.chips[0].id, 0);
    }

    #[test]
    fn ids_dense_and_unique() {
        let g = build_grid("a", 10, 20, 448).unwrap();
        assert_eq!(g.n_chips(), 200);
        for (i, c) in g.chips.iter().enumerate() {
            assert_eq!(c.id, i as u64);
        }
    }

    #[test]
    fn conus_scale_chip_count() {
        // 409 x 409 at 448 m is the same order of magnitude as the ~167K
        // chips of the largest real AOI.
        let g = build_grid("conus", 409, 409, 448).unwrap();
        assert_eq!(g.n_chips(), 167_281);
    }

    #[test]
    fn rejects_empty_grid() {
        assert!(build_grid("a", 0, 4, 448).is_err());
        assert!(build_grid("a", 4, 0, 448).is_err());
        assert!(build_grid("a", 4, 4, 0).is_err());
    }

    #[test]
    fn five_bands_exact_split() {
        let g = build_grid("a", 4, 5, 448).unwrap();
        let a = assign_splits(&g, 1, &DEFAULT_PATTERN, 0).unwrap();
        assert_eq!(a.fractions, [0.6, 0.2, 0.2]);
        assert!(!a.ratio_warning);
    }

    #[test]
    fn single_band_degenerate_warns() {
        let g = build_grid("a", 4, 3, 448).unwrap();
        let a = assign_splits(&g, 3, &DEFAULT_PATTERN, 0).unwrap();
        assert!(a.ratio_warning);
        assert!(a.index.chips.iter().all(|c| c.split == Split::Train));
    }

    #[test]
    fn twenty_by_twenty_band_width_two() {
        // 10 bands over a 5-cycle: every pattern element lands on exactly
        // two bands of 40 chips, for any rotation.
        let g = build_grid("a", 20, 20, 448).unwrap();
        for seed in [0u64, 1, 2, 9] {
            let a = assign_splits(&g, 2, &DEFAULT_PATTERN, seed).unwrap();
            let mut counts = [0usize; 3];
            for c in &a.index.chips {
                counts[c.split.idx()] += 1;
            }
            assert_eq!(counts, [240, 80, 80]);
        }
    }

    #[test]
    fn band_wider_than_grid_rejected() {
        let g = build_grid("a", 4, 3, 448).unwrap();
        assert!(assign_splits(&g, 4, &DEFAULT_PATTERN, 0).is_err());
    }

    #[test]
    fn bad_pattern_ratio_rejected() {
        let g = build_grid("a", 4, 6, 448).unwrap();
        let p = parse_pattern("T,T,V,E").unwrap();
        assert!(assign_splits(&g, 1, &p, 0).is_err());
    }

    #[test]
    fn bands_are_uniform() {
        // adjacent chips in the same band always share a split
        let g = build_grid("a", 6, 30, 448).unwrap();
        let a = assign_splits(&g, 3, &DEFAULT_PATTERN, 7).unwrap();
        for c in &a.index.chips {
            let band = c.col / 3;
            for other in &a.index.chips {
                if other.col / 3 == band {
                    assert_eq!(other.split, c.split);
                }
            }
        }
    }

    #[test]
    fn deterministic_assignment() {
        let g = build_grid("a", 8, 25, 448).unwrap();
        let a = assign_splits(&g, 2, &DEFAULT_PATTERN, 5).unwrap();
        let b = assign_splits(&g, 2, &DEFAULT_PATTERN, 5).unwrap();
        assert_eq!(a.index.chips, b.index.chips);
    }

    #[test]
    fn json_roundtrip() {
        let g = build_grid("roundtrip", 3, 5, 448).unwrap();
        let a = assign_splits(&g, 1, &DEFAULT_PATTERN, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.json");
        a.index.save_json(&path).unwrap();
        let back = ChipIndex::load_json(&path).unwrap();
        assert_eq!(back.chips, a.index.chips);
        assert_eq!(back.aoi_name, "roundtrip");
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!(parse_pattern("T,T,T,V,E").unwrap(), DEFAULT_PATTERN);
        assert_eq!(parse_pattern("tttve").unwrap(), DEFAULT_PATTERN);
        assert!(parse_pattern("T,X").is_err());
    }
}
