//! Group-activity evaluation metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Volleyball label order used by [`volleyball_merge_map`].
pub const VOLLEYBALL_LABELS: [&str; 8] = [
    "r_set",
    "r_spike",
    "r_pass",
    "r_winpoint",
    "l_set",
    "l_spike",
    "l_pass",
    "l_winpoint",
];

/// Merges right set/pass into a right pass-set class and left set/pass into
/// a left pass-set class; the other classes keep their own id.
pub fn volleyball_merge_map() -> BTreeMap<usize, usize> {
    BTreeMap::from([
        (0, 0),
        (2, 0),
        (1, 1),
        (3, 2),
        (4, 3),
        (6, 3),
        (5, 4),
        (7, 5),
    ])
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    ensure!(a == b, Shape, "{a} predictions for {b} ground-truth labels");
    ensure!(a >= 1, Precondition, "metrics need at least one sample");
    Ok(())
}

/// Fraction of exactly correct predictions.
pub fn mca(preds: &[usize], gts: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), gts.len())?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean per-class recall over classes present in `gts`.
pub fn mpca(preds: &[usize], gts: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(preds.len(), gts.len())?;
    let mut support = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&p, &g) in preds.iter().zip(gts) {
        ensure!(
            g < num_classes,
            Validation,
            "label {g} out of range for {num_classes} classes"
        );
        support[g] += 1;
        if p == g {
            hits[g] += 1;
        }
    }
    let recalls: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .map(|(&s, &h)| h as f64 / s as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// [`mca`] after mapping both predictions and labels through `merge_map`.
pub fn merged_mca(
    preds: &[usize],
    gts: &[usize],
    merge_map: &BTreeMap<usize, usize>,
) -> Result<f64> {
    let map = |v: &usize| -> Result<usize> {
        merge_map
            .get(v)
            .copied()
            .ok_or_else(|| Error::Validation(format!("label {v} missing from merge map")))
    };
    let p: Vec<usize> = preds.iter().map(map).collect::<Result<_>>()?;
    let g: Vec<usize> = gts.iter().map(map).collect::<Result<_>>()?;
    mca(&p, &g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multi-label precision/recall/F1. Sample-averaged by default: per-sample
/// scores (an empty prediction scores P = 0) averaged over samples. With
/// `micro`, counts are pooled over all samples first.
pub fn group_prf(
    pred_sets: &[BTreeSet<usize>],
    gt_sets: &[BTreeSet<usize>],
    micro: bool,
) -> Result<Prf> {
    check_lengths(pred_sets.len(), gt_sets.len())?;
    ensure!(
        gt_sets.iter().all(|g| !g.is_empty()),
        Validation,
        "ground-truth label sets must be non-empty"
    );
    if micro {
        let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (p, g) in pred_sets.iter().zip(gt_sets) {
            tp += p.intersection(g).count();
            np += p.len();
            ng += g.len();
        }
        let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
        let recall = tp as f64 / ng as f64;
        return Ok(Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        });
    }
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for (p, g) in pred_sets.iter().zip(gt_sets) {
        let tp = p.intersection(g).count() as f64;
        let precision = if p.is_empty() {
            0.0
        } else {
            tp / p.len() as f64
        };
        let recall = tp / g.len() as f64;
        ps += precision;
        rs += recall;
        fs += f1(precision, recall);
    }
    let n = pred_sets.len() as f64;
    Ok(Prf {
        precision: ps / n,
        recall: rs / n,
        f1: fs / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub name: String,
    pub support: usize,
    /// Recall of the class; `None` without support.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub num_samples: usize,
    pub mca: f64,
    pub mpca: f64,
    pub merged_mca: Option<f64>,
    pub group: Option<Prf>,
    pub per_class: Vec<ClassRow>,
    /// `confusion[gt][pred]`; for multi-label data, rows count each ground
    /// truth label against each predicted label of the sample.
    pub confusion: Vec<Vec<usize>>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl EvalReport {
    /// Single-label report; `merge_map` adds the merged accuracy.
    pub fn single_label(
        preds: &[usize],
        gts: &[usize],
        label_names: &[String],
        merge_map: Option<&BTreeMap<usize, usize>>,
    ) -> Result<Self> {
        let k = label_names.len();
        ensure!(
            preds.iter().chain(gts).all(|&l| l < k),
            Validation,
            "label out of range for {k} classes"
        );
        let mut confusion = vec![vec![0usize; k]; k];
        for (&p, &g) in preds.iter().zip(gts) {
            confusion[g][p] += 1;
        }
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            num_samples: preds.len(),
            mca: mca(preds, gts)?,
            mpca: mpca(preds, gts, k)?,
            merged_mca: merge_map.map(|m| merged_mca(preds, gts, m)).transpose()?,
            group: None,
            per_class: per_class(&confusion, label_names),
            confusion,
        })
    }

    /// Multi-label report. `mca`/`mpca` score exact set matches and
    /// per-label recall respectively.
    pub fn multi_label(
        pred_sets: &[BTreeSet<usize>],
        gt_sets: &[BTreeSet<usize>],
        label_names: &[String],
        micro: bool,
    ) -> Result<Self> {
        let k = label_names.len();
        let group = group_prf(pred_sets, gt_sets, micro)?;
        let mut confusion = vec![vec![0usize; k]; k];
        let mut support = vec![0usize; k];
        let mut hits = vec![0usize; k];
        for (p, g) in pred_sets.iter().zip(gt_sets) {
            for &gl in g {
                ensure!(
                    gl < k,
                    Validation,
                    "label {gl} out of range for {k} classes"
                );
                support[gl] += 1;
                hits[gl] += p.contains(&gl) as usize;
                for &pl in p {
                    ensure!(
                        pl < k,
                        Validation,
                        "label {pl} out of range for {k} classes"
                    );
                    confusion[gl][pl] += 1;
                }
            }
        }
        let exact = pred_sets
            .iter()
            .zip(gt_sets)
            .filter(|(p, g)| p == g)
            .count();
        let recalls: Vec<f64> = support
            .iter()
            .zip(&hits)
            .filter(|(&s, _)| s > 0)
            .map(|(&s, &h)| h as f64 / s as f64)
            .collect();
        let per_class = (0..k)
            .map(|c| ClassRow {
                name: label_names[c].clone(),
                support: support[c],
                accuracy: (support[c] > 0).then(|| hits[c] as f64 / support[c] as f64),
            })
            .collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            num_samples: pred_sets.len(),
            mca: exact as f64 / pred_sets.len() as f64,
            mpca: recalls.iter().sum::<f64>() / recalls.len().max(1) as f64,
            merged_mca: None,
            group: Some(group),
            per_class,
            confusion,
        })
    }

    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "samples     {}\nMCA         {:.4}\nMPCA        {:.4}\n",
            self.num_samples, self.mca, self.mpca
        );
        if let Some(m) = self.merged_mca {
            out += &format!("Merged MCA  {m:.4}\n");
        }
        if let Some(g) = self.group {
            out += &format!(
                "P_g {:.4}  R_g {:.4}  F_g {:.4}\n",
                g.precision, g.recall, g.f1
            );
        }
        out += "\nclass                 support  accuracy\n";
        for row in &self.per_class {
            let acc = row.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            out += &format!("{:<20} {:>8}  {:>8}\n", row.name, row.support, acc);
        }
        out
    }
}

fn per_class(confusion: &[Vec<usize>], names: &[String]) -> Vec<ClassRow> {
    confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let support: usize = row.iter().sum();
            ClassRow {
                name: names[c].clone(),
                support,
                accuracy: (support > 0).then(|| row[c] as f64 / support as f64),
            }
        })
        .collect()
}
