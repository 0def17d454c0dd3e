use anyhow::{bail, Context, Result};
use sgareg_core::io;
use sgareg_core::network::TrainPair;
use sgareg_core::synth::SyntheticPair;
use sgareg_core::volume::LabelMap;
use std::path::{Path, PathBuf};

pub const MOVING: &str = "moving.rvf";
pub const MOVING_LABELS: &str = "moving_labels.rvf";
pub const FIXED: &str = "fixed.rvf";
pub const FIXED_LABELS: &str = "fixed_labels.rvf";
pub const GT_FIELD: &str = "gt_field.rvf";

pub fn pair_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("pair_{i:03}"))
}

pub fn write_pair(dir: &Path, pair: &SyntheticPair) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    io::write_volume(dir.join(MOVING), &pair.moving.volume)?;
    io::write_labels(dir.join(MOVING_LABELS), &pair.moving.labels)?;
    io::write_volume(dir.join(FIXED), &pair.fixed.volume)?;
    io::write_labels(dir.join(FIXED_LABELS), &pair.fixed.labels)?;
    io::write_field(dir.join(GT_FIELD), &pair.field.field)?;
    Ok(())
}

/// A pair loaded back from a data directory.
pub struct StoredPair {
    pub id: String,
    pub images: TrainPair,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
}

/// Every `pair_*` directory under `root`, in name order.
pub fn read_pairs(root: &Path) -> Result<Vec<StoredPair>> {
    let entries = std::fs::read_dir(root).with_context(|| format!("reading data directory {}", root.display()))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("pair_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no pair_* directories in {}", root.display());
    }
    dirs.iter()
        .map(|d| {
            Ok(StoredPair {
                id: d.file_name().unwrap().to_string_lossy().into_owned(),
                images: TrainPair { moving: io::read_volume(d.join(MOVING))?, fixed: io::read_volume(d.join(FIXED))? },
                moving_labels: io::read_labels(d.join(MOVING_LABELS))?,
                fixed_labels: io::read_labels(d.join(FIXED_LABELS))?,
            })
        })
        .collect()
}
