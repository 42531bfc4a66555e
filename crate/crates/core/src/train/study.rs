use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{make_folds, FoldPlan};
use super::trainer::{synthesize_volume, train_fold, TrainOutcome};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, evaluate, EvalOptions, MetricsRow, Report};
use crate::phantom::SubjectData;
use crate::volume::{save_volume, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub initial_val_l1: f64,
    pub best_val_l1: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldSummary>,
    pub outcomes: Vec<TrainOutcome>,
    /// Synthetic CT per subject, in subject order.
    pub synthetic: Vec<Volume3D>,
    /// Test-set metrics per subject, in subject order.
    pub report: Report,
}

/// k-fold cross-validation: train each fold, synthesize its test subjects
/// with the best-validation generator and evaluate them against their CT.
///
/// With `out`, writes `plan.json`, `fold_<k>/` (loss log and checkpoints),
/// `sct/<id>_sct.hdr`, `rows/<id>.json`, `folds.json` and `table.csv`.
pub fn run_study(data: &[SubjectData], k: usize, cfg: &TrainConfig, out: Option<&Path>) -> Result<StudyResult> {
    cfg.validate()?;
    let plan = make_folds(data.len(), k, cfg.seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let names = |ids: &[usize]| ids.iter().map(|&i| data[i].id.clone()).collect::<Vec<_>>();
    let mut synthetic: Vec<Option<Volume3D>> = vec![None; data.len()];
    let mut rows: Vec<Option<MetricsRow>> = vec![None; data.len()];
    let mut folds = Vec::with_capacity(k);
    let mut outcomes = Vec::with_capacity(k);

    for (fi, fold) in plan.folds.iter().enumerate() {
        let outcome = train_fold(fold, fi, data, cfg)?;
        if let Some(dir) = out {
            outcome.write(&dir.join(format!("fold_{fi}")))?;
        }
        for &t in &fold.test {
            let s = &data[t];
            let sct = synthesize_volume(&outcome.best, &s.mr)?;
            rows[t] = Some(evaluate(&s.id, &s.ct, &sct, &EvalOptions::default())?);
            synthetic[t] = Some(sct);
        }
        folds.push(FoldSummary {
            fold: fi,
            train: names(&fold.train),
            val: names(&fold.val),
            test: names(&fold.test),
            initial_val_l1: outcome.initial_val_l1,
            best_val_l1: outcome.best_val_l1,
            best_epoch: outcome.best_epoch,
        });
        outcomes.push(outcome);
    }

    let rows: Vec<MetricsRow> = rows.into_iter().map(|r| r.expect("every subject tested once")).collect();
    let synthetic: Vec<Volume3D> = synthetic.into_iter().map(|v| v.expect("every subject tested once")).collect();
    let report = aggregate_report(&rows)?;

    if let Some(dir) = out {
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("plan.json", serde_json::to_string_pretty(&plan)? + "\n")?;
        write("folds.json", serde_json::to_string_pretty(&folds)? + "\n")?;
        for sub in ["sct", "rows"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (s, (sct, row)) in data.iter().zip(synthetic.iter().zip(&rows)) {
            save_volume(sct, dir.join("sct").join(format!("{}_sct.hdr", s.id)))?;
            write(&format!("rows/{}.json", s.id), serde_json::to_string_pretty(row)? + "\n")?;
        }
        write("table.csv", report.to_csv())?;
    }

    Ok(StudyResult {
        plan,
        folds,
        outcomes,
        synthetic,
        report,
    })
}
