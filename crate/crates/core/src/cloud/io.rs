//! SemanticKITTI scan files.
//!
//! A `.bin` file holds one record of four little-endian `f32` per point
//! (`x, y, z, intensity`). A `.label` file holds one little-endian `u32`
//! per point; the low 16 bits are the semantic class, the high 16 bits the
//! instance id (ignored here, written as zero).
//!
//! Datasets follow `<root>/sequences/<NN>/velodyne/<id>.bin` with labels in
//! the sibling `labels/<id>.label`.

use std::fs;
use std::path::{Path, PathBuf};

use super::LabeledCloud;
use crate::error::{Error, Result};

const POINT_BYTES: usize = 16;

pub fn load_kitti_scan(bin_path: &Path, label_path: Option<&Path>) -> Result<LabeledCloud> {
    let raw = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    if raw.len() % POINT_BYTES != 0 {
        return Err(Error::Format {
            path: bin_path.to_path_buf(),
            message: format!(
                "{} bytes is not a multiple of the {POINT_BYTES}-byte point record",
                raw.len()
            ),
        });
    }
    let n = raw.len() / POINT_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in raw.chunks_exact(POINT_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let (x, y, z, r) = (f(0), f(1), f(2), f(3));
        if ![x, y, z, r].iter().all(|v| v.is_finite()) {
            return Err(Error::Data {
                ordinal: i,
                message: format!("non-finite value in {}", bin_path.display()),
            });
        }
        points.push([x as f64, y as f64, z as f64]);
        intensity.push(r);
    }

    let (labels, unlabeled) = match label_path {
        Some(lp) => {
            let raw = fs::read(lp).map_err(|e| Error::io(lp, e))?;
            if raw.len() % 4 != 0 || raw.len() / 4 != n {
                return Err(Error::Format {
                    path: lp.to_path_buf(),
                    message: format!(
                        "scan {} has {n} points but label file has {} bytes ({} words)",
                        bin_path.display(),
                        raw.len(),
                        raw.len() as f64 / 4.0
                    ),
                });
            }
            let labels = raw
                .chunks_exact(4)
                .map(|w| u32::from_le_bytes(w.try_into().unwrap()) & 0xFFFF)
                .collect();
            (labels, false)
        }
        None => (vec![0; n], true),
    };

    let mut cloud = LabeledCloud::with_intensity(points, labels, Some(intensity))?;
    cloud.unlabeled = unlabeled;
    Ok(cloud)
}

/// Writes the scan; missing intensity is written as `0.0`.
pub fn save_kitti_scan(cloud: &LabeledCloud, bin_path: &Path, label_path: &Path) -> Result<()> {
    let mut bin = Vec::with_capacity(cloud.len() * POINT_BYTES);
    for (i, p) in cloud.points.iter().enumerate() {
        let r = cloud.intensity.as_ref().map_or(0.0, |int| int[i]);
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, r] {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut lab = Vec::with_capacity(cloud.len() * 4);
    for &l in &cloud.labels {
        lab.extend_from_slice(&(l & 0xFFFF).to_le_bytes());
    }
    for (path, bytes) in [(bin_path, &bin), (label_path, &lab)] {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// One scan of a dataset laid out like SemanticKITTI.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ScanEntry {
    pub sequence: String,
    pub id: String,
    pub bin: PathBuf,
    pub label: PathBuf,
}

impl ScanEntry {
    pub fn new(root: &Path, sequence: &str, id: &str) -> Self {
        let seq = root.join("sequences").join(sequence);
        Self {
            sequence: sequence.to_string(),
            id: id.to_string(),
            bin: seq.join("velodyne").join(format!("{id}.bin")),
            label: seq.join("labels").join(format!("{id}.label")),
        }
    }

    /// Same scan under another dataset root.
    pub fn rebase(&self, root: &Path) -> Self {
        Self::new(root, &self.sequence, &self.id)
    }

    pub fn load(&self) -> Result<LabeledCloud> {
        let label = self.label.exists().then_some(self.label.as_path());
        load_kitti_scan(&self.bin, label)
    }

    pub fn save(&self, cloud: &LabeledCloud) -> Result<()> {
        save_kitti_scan(cloud, &self.bin, &self.label)
    }
}

/// Lists every `.bin` under `<root>/sequences/*/velodyne`, sorted.
pub fn list_scans(root: &Path) -> Result<Vec<ScanEntry>> {
    let seq_root = root.join("sequences");
    let mut out = Vec::new();
    let seqs = fs::read_dir(&seq_root).map_err(|e| Error::io(&seq_root, e))?;
    for seq in seqs {
        let seq = seq.map_err(|e| Error::io(&seq_root, e))?;
        let sequence = seq.file_name().to_string_lossy().into_owned();
        let velo = seq.path().join("velodyne");
        let Ok(files) = fs::read_dir(&velo) else {
            continue;
        };
        for f in files {
            let f = f.map_err(|e| Error::io(&velo, e))?;
            let path = f.path();
            if path.extension().is_some_and(|e| e == "bin") {
                let id = path.file_stem().unwrap().to_string_lossy().into_owned();
                out.push(ScanEntry::new(root, &sequence, &id));
            }
        }
    }
    out.sort();
    Ok(out)
}
