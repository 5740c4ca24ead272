//! Paired-dataset management: scanning, validation, loading, synthesis.
//!
//! A dataset root holds `rain/` and `norain/` subdirectories with matching
//! filenames (or `rain-X.png`/`norain-X.png` style names under
//! [`PairNaming::Prefixed`]). Scanning is deterministic: pairs are sorted
//! byte-wise by filename.

mod imageio;
mod rain;

pub use imageio::{load_image, save_image};
pub use rain::{generate_clean_image, synthesize_pair, RainParams};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How rainy files map to their clean counterparts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairNaming {
    /// `rain/X` pairs with `norain/X`.
    Same,
    /// `rain/rain-X` pairs with `norain/norain-X`.
    Prefixed,
}

/// One validated pair of files with identical dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub name: String,
    pub rain: PathBuf,
    pub norain: PathBuf,
    pub width: u32,
    pub height: u32,
}

/// Sorted manifest of validated pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub pairs: Vec<PairEntry>,
}

/// Problems found while scanning; strict mode turns these into errors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub orphan_rain: Vec<String>,
    pub orphan_norain: Vec<String>,
    pub dimension_mismatches: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.orphan_rain.is_empty()
            && self.orphan_norain.is_empty()
            && self.dimension_mismatches.is_empty()
    }

    fn describe(&self) -> String {
        let mut parts = Vec::new();
        if !self.orphan_rain.is_empty() {
            parts.push(format!("rain files without counterpart: {:?}", self.orphan_rain));
        }
        if !self.orphan_norain.is_empty() {
            parts.push(format!(
                "norain files without counterpart: {:?}",
                self.orphan_norain
            ));
        }
        if !self.dimension_mismatches.is_empty() {
            parts.push(format!(
                "dimension mismatches: {:?}",
                self.dimension_mismatches
            ));
        }
        parts.join("; ")
    }
}

/// A loaded pair ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct ImagePair<T> {
    pub name: String,
    pub rainy: Tensor<T>,
    pub clean: Tensor<T>,
}

fn list_files(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            if let Some(name) = entry.file_name().to_str() {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

/// Expected `norain/` filename for a rain file under the naming scheme, or
/// None when the rain filename does not fit the scheme.
fn counterpart_name(naming: PairNaming, rain_name: &str) -> Option<String> {
    match naming {
        PairNaming::Same => Some(rain_name.to_string()),
        PairNaming::Prefixed => rain_name
            .strip_prefix("rain-")
            .map(|rest| format!("norain-{rest}")),
    }
}

/// Scans a dataset root, validating pairing and dimensions. Returns the
/// manifest of valid pairs plus a report of problems; in strict mode any
/// problem is an error naming the offending files.
pub fn scan_dataset(
    root: &Path,
    naming: PairNaming,
    strict: bool,
) -> Result<(PairedDataset, ValidationReport)> {
    let rain_dir = root.join("rain");
    let norain_dir = root.join("norain");
    let rain_files = list_files(&rain_dir)?;
    let norain_files = list_files(&norain_dir)?;

    let mut report = ValidationReport::default();
    let mut pairs = Vec::new();
    let mut matched_norain = BTreeSet::new();

    for rain_name in &rain_files {
        let Some(norain_name) = counterpart_name(naming, rain_name) else {
            report.orphan_rain.push(rain_name.clone());
            continue;
        };
        if !norain_files.contains(&norain_name) {
            report.orphan_rain.push(rain_name.clone());
            continue;
        }
        matched_norain.insert(norain_name.clone());
        let rain_path = rain_dir.join(rain_name);
        let norain_path = norain_dir.join(&norain_name);
        let rd = image::image_dimensions(&rain_path)?;
        let nd = image::image_dimensions(&norain_path)?;
        if rd != nd {
            report.dimension_mismatches.push(format!(
                "{rain_name}: rain {}x{} vs norain {}x{}",
                rd.0, rd.1, nd.0, nd.1
            ));
            continue;
        }
        pairs.push(PairEntry {
            name: rain_name.clone(),
            rain: rain_path,
            norain: norain_path,
            width: rd.0,
            height: rd.1,
        });
    }
    for norain_name in &norain_files {
        if !matched_norain.contains(norain_name) {
            report.orphan_norain.push(norain_name.clone());
        }
    }

    if strict && !report.is_clean() {
        return Err(Error::Validation(report.describe()));
    }
    // BTreeSet iteration already gave byte-wise lexicographic order.
    Ok((
        PairedDataset {
            root: root.to_path_buf(),
            pairs,
        },
        report,
    ))
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One `rain_path<TAB>norain_path` line per pair.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&format!("{}\t{}\n", p.rain.display(), p.norain.display()));
        }
        out
    }

    /// Decodes every pair into memory.
    pub fn load<T: Scalar>(&self) -> Result<Vec<ImagePair<T>>> {
        self.pairs
            .iter()
            .map(|p| {
                Ok(ImagePair {
                    name: p.name.clone(),
                    rainy: load_image(&p.rain)?,
                    clean: load_image(&p.norain)?,
                })
            })
            .collect()
    }
}
