//! Misclassification review: every wrongly predicted test instance next to
//! the AM outputs of its true and predicted classes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pcam_core::classifier::ClassifierModel;
use pcam_core::io::write_ply;
use pcam_core::shapes::DatasetSplit;
use pcam_core::{Error, PointCloud, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRow {
    /// Position in the test split.
    pub test_index: usize,
    pub instance_id: u64,
    pub true_label: usize,
    pub true_name: String,
    pub predicted_label: usize,
    pub predicted_name: String,
    pub confidence: f64,
}

/// Rows for all misclassified test instances. `am` maps a class to its AM
/// output; every class involved in a mistake must have one.
pub fn review(model: &ClassifierModel, split: &DatasetSplit, am: &BTreeMap<usize, PointCloud>) -> Result<Vec<ReviewRow>> {
    let clouds: Vec<&PointCloud> = split.test.iter().map(|c| &c.cloud).collect();
    let bundles = model.forward_batch(&clouds)?;
    let mut rows = Vec::new();
    for (i, (item, b)) in split.test.iter().zip(&bundles).enumerate() {
        let (pred, conf) = b
            .probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
        if pred == item.label {
            continue;
        }
        let name = |k: usize| split.class_names.get(k).cloned().unwrap_or_else(|| format!("class-{k}"));
        for k in [item.label, pred] {
            if !am.contains_key(&k) {
                return Err(Error::Contract(format!("no AM output for class `{}`", name(k))));
            }
        }
        rows.push(ReviewRow {
            test_index: i,
            instance_id: item.instance_id,
            true_label: item.label,
            true_name: name(item.label),
            predicted_label: pred,
            predicted_name: name(pred),
            confidence: conf,
        });
    }
    Ok(rows)
}

/// Writes `<k>_instance.ply`, `<k>_am_true.ply` and `<k>_am_pred.ply` per row.
pub fn write_bundle(dir: &Path, split: &DatasetSplit, rows: &[ReviewRow], am: &BTreeMap<usize, PointCloud>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (k, r) in rows.iter().enumerate() {
        let items = [
            ("instance", &split.test[r.test_index].cloud),
            ("am_true", &am[&r.true_label]),
            ("am_pred", &am[&r.predicted_label]),
        ];
        for (tag, cloud) in items {
            let path = dir.join(format!("{k:04}_{tag}.ply"));
            write_ply(&path, cloud)?;
            written.push(path);
        }
    }
    Ok(written)
}
