//! Synthetic bridge facade corpus: geometry, rasterization, PGM files and a
//! JSON manifest.

pub mod bridge;
pub mod pgm;
pub mod raster;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bridge::{
    generate_spec, generate_spec_sized, nominal_spec, render, variant_seed, BridgeSpec, Family,
    Jitter, Subtype,
};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use raster::{RasterImage, BACKGROUND, DEFAULT_HEIGHT, DEFAULT_WIDTH, INK};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub subtype: Subtype,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn counts(&self) -> BTreeMap<Subtype, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.subtype).or_insert(0) += 1;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records =
            serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
        Ok(DatasetManifest { records })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.records).expect("records serialize");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub per_subtype: usize,
    pub master_seed: u64,
    pub width: usize,
    pub height: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            per_subtype: 1200,
            master_seed: 0,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
        }
    }
}

pub fn file_name(subtype: Subtype, index: usize) -> String {
    format!("{}_{index:04}.pgm", subtype.name())
}

/// Renders `per_subtype` variants of every subtype into `out_dir`.
pub fn build_dataset(out_dir: impl AsRef<Path>, opts: &DatasetOptions) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(Subtype, usize)> = Subtype::ALL
        .iter()
        .flat_map(|&s| (0..opts.per_subtype).map(move |i| (s, i)))
        .collect();
    let rendered: Vec<(ManifestRecord, Vec<u8>)> = jobs
        .par_iter()
        .map(|&(s, i)| {
            let spec = generate_spec_sized(s, i as u64, opts.master_seed, opts.width, opts.height);
            let img = render(&spec)?;
            let record = ManifestRecord {
                file: file_name(s, i),
                subtype: s,
                seed: spec.seed,
            };
            Ok((record, encode_pgm(&img)))
        })
        .collect::<Result<_>>()?;
    let mut manifest = DatasetManifest::default();
    for (record, bytes) in rendered {
        let path = out_dir.join(&record.file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.records.push(record);
    }
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub file: String,
    pub subtype: Subtype,
    pub image: RasterImage,
}

/// Loads every image listed in `dir/manifest.json`, in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::read(dir)?;
    manifest
        .records
        .par_iter()
        .map(|r| {
            let path: PathBuf = dir.join(&r.file);
            Ok(LabeledImage {
                file: r.file.clone(),
                subtype: r.subtype,
                image: read_pgm(&path)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(n: usize, seed: u64) -> DatasetOptions {
        DatasetOptions {
            per_subtype: n,
            master_seed: seed,
            ..Default::default()
        }
    }

    #[test]
    fn small_build_matches_listing() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(dir.path(), &opts(2, 7)).unwrap();
        assert_eq!(m.len(), 16);
        assert!(m.counts().values().all(|&c| c == 2));
        let pgms = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
            .count();
        assert_eq!(pgms, 16);
        assert_eq!(DatasetManifest::read(dir.path()).unwrap(), m);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 16);
        assert!(loaded.iter().all(|l| l.image.is_mirror_symmetric()));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(a.path(), &opts(2, 11)).unwrap();
        build_dataset(b.path(), &opts(2, 11)).unwrap();
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.is_io_or_format());
        assert!(err.to_string().contains("manifest.json"));
    }

    #[test]
    fn subtypes_are_distinguishable() {
        let mut between = Vec::new();
        for (i, a) in Subtype::ALL.iter().enumerate() {
            for b in &Subtype::ALL[i + 1..] {
                let ia = render(&nominal_spec(*a, 192, 48)).unwrap();
                let ib = render(&nominal_spec(*b, 192, 48)).unwrap();
                between.push(ia.mean_l1(&ib));
            }
        }
        let mut within = Vec::new();
        for s in Subtype::ALL {
            let imgs: Vec<_> = (0..5).map(|i| render(&generate_spec(s, i, 0)).unwrap()).collect();
            for i in 0..5 {
                for j in i + 1..5 {
                    within.push(imgs[i].mean_l1(&imgs[j]));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&between) > mean(&within), "{} vs {}", mean(&between), mean(&within));
    }

    #[test]
    fn every_subtype_survives_full_jitter_range() {
        for s in Subtype::ALL {
            for i in 0..1200 {
                render(&generate_spec(s, i, 2024)).unwrap();
            }
        }
    }
}
