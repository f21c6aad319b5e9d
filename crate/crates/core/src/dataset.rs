//! On-disk datasets: NIfTI image/label/scribble triples listed in `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ScribbleAnnotation, SegmentationMask, Shape3, Volume};
use crate::error::{Error, Result};
use crate::io;
use crate::preprocessing::{window_and_normalize, DEFAULT_LEVEL, DEFAULT_WINDOW};
use crate::scalar::Scalar;
use crate::synthetic::{generate_phantom_with, synthesize_scribbles_with, PhantomOptions, ScribbleOptions};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// How stored image intensities relate to the network input range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    /// Raw Hounsfield units; windowed to 400/50 on load.
    #[default]
    Hu,
    /// Already in [0, 1].
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub label: String,
    pub scribble: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    #[serde(default)]
    pub intensity: Intensity,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::write(dir.as_ref().join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// A loaded case, intensities normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct Case<T> {
    pub id: String,
    pub volume: Volume<T>,
    pub labels: SegmentationMask,
    pub scribble: ScribbleAnnotation,
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = Manifest::load(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn load_case<T: Scalar>(&self, entry: &CaseEntry) -> Result<Case<T>> {
        let c = self.manifest.num_classes;
        let mut volume: Volume<T> = io::read_volume(self.root.join(&entry.image))?;
        volume.id = entry.id.clone();
        if self.manifest.intensity == Intensity::Hu {
            volume = window_and_normalize(&volume, DEFAULT_WINDOW, DEFAULT_LEVEL)?;
        }
        let (labels, _) = io::read_segmentation(self.root.join(&entry.label), c)?;
        let scribble = io::read_scribble(self.root.join(&entry.scribble), c)?;
        if labels.shape() != volume.shape() || scribble.shape() != volume.shape() {
            return Err(Error::InvalidArgument(format!(
                "case {}: image, label and scribble shapes differ",
                entry.id
            )));
        }
        Ok(Case {
            id: entry.id.clone(),
            volume,
            labels,
            scribble,
        })
    }

    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<Vec<Case<T>>> {
        self.manifest.split(split).map(|e| self.load_case(e)).collect()
    }
}

/// Train/val/test counts for `count` cases: 70/10/20 rounded, test takes the rest.
pub fn split_counts(count: usize) -> (usize, usize, usize) {
    let train = ((count as f64) * 0.7).round() as usize;
    let val = (((count as f64) * 0.1).round() as usize).min(count - train);
    (train, val, count - train - val)
}

/// Options for [`write_phantom_dataset`].
#[derive(Clone, Debug)]
pub struct PhantomDatasetOptions {
    pub count: usize,
    pub seed: u64,
    pub phantom: PhantomOptions,
    pub scribble: ScribbleOptions,
}

/// Per-case seed so each case is independent of `count`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(1)
}

/// Generates phantoms with scribbles and writes them with a manifest to `out_dir`.
pub fn write_phantom_dataset(out_dir: impl AsRef<Path>, opts: &PhantomDatasetOptions) -> Result<Manifest> {
    if opts.count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let out = out_dir.as_ref();
    let (train, val, _) = split_counts(opts.count);
    // generate everything first so a failure leaves no partial dataset behind
    let mut cases = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let seed = case_seed(opts.seed, i);
        let phantom = generate_phantom_with::<f32>(seed, &opts.phantom)?;
        let scribble = synthesize_scribbles_with(&phantom.labels, seed ^ 0x5CB1, &opts.scribble)?;
        cases.push((phantom, scribble));
    }
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(opts.count);
    for (i, (phantom, scribble)) in cases.into_iter().enumerate() {
        let id = format!("case_{i:03}");
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        let entry = CaseEntry {
            image: format!("{id}_img.nii.gz"),
            label: format!("{id}_lab.nii.gz"),
            scribble: format!("{id}_scr.nii.gz"),
            id,
            split,
        };
        let spacing = phantom.volume.spacing;
        io::write_volume(out.join(&entry.image), &phantom.volume)?;
        io::write_segmentation(out.join(&entry.label), &phantom.labels, spacing)?;
        io::write_scribble(out.join(&entry.scribble), &scribble, spacing)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        num_classes: opts.phantom.num_classes,
        intensity: Intensity::Normalized,
        cases: entries,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// Phantom dataset options with the given size and class count and default shapes.
pub fn phantom_dataset_options(count: usize, seed: u64, size: Shape3, num_classes: usize) -> PhantomDatasetOptions {
    PhantomDatasetOptions {
        count,
        seed,
        phantom: PhantomOptions {
            size,
            num_classes,
            ..PhantomOptions::default()
        },
        scribble: ScribbleOptions::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(10), (7, 1, 2));
        assert_eq!(split_counts(30), (21, 3, 6));
        assert_eq!(split_counts(1), (1, 0, 0));
        assert_eq!(split_counts(3), (2, 0, 1));
    }

    #[test]
    fn write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let opts = phantom_dataset_options(3, 7, [16, 16, 16], 3);
        let manifest = write_phantom_dataset(dir.path(), &opts).unwrap();
        assert_eq!(manifest.cases.len(), 3);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        let train: Vec<Case<f32>> = ds.load_split(Split::Train).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train[0].volume.shape(), [16, 16, 16]);
        assert!(train[0].volume.is_normalized());
        let direct = generate_phantom_with::<f32>(case_seed(7, 0), &opts.phantom).unwrap();
        assert_eq!(train[0].labels.labels, direct.labels.labels);
        assert_eq!(train[0].volume.data, direct.volume.data);
    }

    #[test]
    fn zero_count_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        assert!(write_phantom_dataset(&out, &phantom_dataset_options(0, 0, [16; 3], 3)).is_err());
        assert!(!out.exists());
    }
}
