//! On-disk layout of datasets and AM output directories.
//!
//! A dataset directory holds `index.json` and one binary cloud file per
//! instance under `clouds/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pcam_core::io::{read_binary, read_ply, write_binary};
use pcam_core::shapes::{DatasetConfig, DatasetSplit, LabeledCloud};
use pcam_core::{Error, PointCloud, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    file: String,
    label: usize,
    instance_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    schema_version: u32,
    class_names: Vec<String>,
    seed: u64,
    config: Option<DatasetConfig>,
    train: Vec<Entry>,
    test: Vec<Entry>,
}

/// Writes the dataset and returns every file written, index last.
pub fn save_dataset(dir: &Path, split: &DatasetSplit, config: Option<&DatasetConfig>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("clouds"))?;
    let mut written = Vec::new();
    let mut entries = |items: &[LabeledCloud], prefix: &str| -> Result<Vec<Entry>> {
        items
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let file = format!("clouds/{prefix}_{i:05}.bin");
                let path = dir.join(&file);
                write_binary(&path, &c.cloud)?;
                written.push(path);
                Ok(Entry { file, label: c.label, instance_id: c.instance_id })
            })
            .collect()
    };
    let train = entries(&split.train, "train")?;
    let test = entries(&split.test, "test")?;
    let index = Index {
        schema_version: 1,
        class_names: split.class_names.clone(),
        seed: split.seed,
        config: config.cloned(),
        train,
        test,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?)?;
    written.push(path);
    Ok(written)
}

/// Loads a dataset and lists the files it was read from.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, Vec<PathBuf>)> {
    let index_path = dir.join("index.json");
    let index: Index = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
    let mut files = vec![index_path];
    let mut load = |entries: &[Entry]| -> Result<Vec<LabeledCloud>> {
        entries
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                let cloud = read_binary(&path)?;
                files.push(path);
                Ok(LabeledCloud { cloud, label: e.label, instance_id: e.instance_id })
            })
            .collect()
    };
    let train = load(&index.train)?;
    let test = load(&index.test)?;
    let split = DatasetSplit { train, test, class_names: index.class_names, seed: index.seed };
    split.validate()?;
    Ok((split, files))
}

pub fn am_stem(class_name: &str, index: usize) -> String {
    format!("{class_name}_{index}")
}

/// AM outputs per class index, plus every file read.
pub type AmOutputs = (BTreeMap<usize, Vec<PointCloud>>, Vec<PathBuf>);

/// Reads `<class>_<i>.ply` for `i = 0, 1, …` until the first gap, for every
/// class. Classes with no outputs map to an empty list.
pub fn load_am_outputs(dir: &Path, class_names: &[String]) -> Result<AmOutputs> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} is not a directory", dir.display()))));
    }
    let mut out = BTreeMap::new();
    let mut files = Vec::new();
    for (label, name) in class_names.iter().enumerate() {
        let mut clouds = Vec::new();
        loop {
            let path = dir.join(format!("{}.ply", am_stem(name, clouds.len())));
            if !path.exists() {
                break;
            }
            clouds.push(read_ply(&path)?);
            files.push(path);
        }
        out.insert(label, clouds);
    }
    Ok((out, files))
}
