//! Test-split evaluation of a trained model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{in_split, Sample, Split};
use crate::error::{Error, Result};
use crate::kernels::{cross_entropy, one_hot};
use crate::metrics::{
    accuracy, cohens_kappa, ensemble_preactivation, localization_score, select_best_branch, uniform_baseline, AgreementBand,
    BranchScore, ConfusionMatrix, PredictionRow,
};
use crate::tensor::Tensor;
use crate::train::{argmax, evaluate, predict};
use crate::zoo::BuiltModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub name: String,
    pub accuracy: f64,
    pub loss: f64,
    pub kappa: f64,
    pub band: AgreementBand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub branch: String,
    pub mean_score: f64,
    /// Mean roi share of the image: the score of a uniform mask.
    pub mean_baseline: f64,
    pub ratio: f64,
    pub degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backbone: String,
    pub parameters: usize,
    pub test_samples: usize,
    /// Head chosen on the validation split.
    pub selected: String,
    pub accuracy: f64,
    pub loss: f64,
    pub kappa: f64,
    pub band: AgreementBand,
    pub confusion: Vec<Vec<u64>>,
    pub heads: Vec<HeadReport>,
    pub ensemble: Option<HeadReport>,
    pub localization: Vec<LocalizationReport>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn head_report(name: &str, probs: &Tensor, labels: &[usize], classes: usize) -> Result<(HeadReport, ConfusionMatrix)> {
    let predicted: Vec<usize> = probs.data().chunks(classes).map(argmax).collect();
    let cm = ConfusionMatrix::from_labels(labels, &predicted, classes)?;
    let kappa = cohens_kappa(&cm)?;
    Ok((
        HeadReport {
            name: name.to_string(),
            accuracy: accuracy(&cm)?,
            loss: cross_entropy(probs, &one_hot(labels, classes)?)?,
            kappa: kappa.value,
            band: kappa.band,
        },
        cm,
    ))
}

/// Mean localization score of every branch's masks over `samples`.
pub fn localization(model: &BuiltModel, samples: &[&Sample], batch_size: usize) -> Result<Vec<LocalizationReport>> {
    let preds = predict(model, samples, batch_size, true)?;
    let [h, w] = model.spec().input;
    let mut out = Vec::new();
    for (b, branch) in model.branches().iter().enumerate() {
        let [mh, mw, _] = branch.attention.input_shape();
        let factor = h / mh;
        if mh * factor != h || mw * factor != w {
            log::warn!("{}: mask {mh}x{mw} does not tile the {h}x{w} input; skipped", branch.name);
            continue;
        }
        let (mut score, mut baseline, mut degenerate) = (0.0, 0.0, 0);
        for (i, s) in samples.iter().enumerate() {
            let l = localization_score(&preds.masks[b].batch_item(i), &s.roi, factor)?;
            score += l.score;
            degenerate += l.degenerate as usize;
            baseline += uniform_baseline(&s.roi, h, w);
        }
        let n = samples.len() as f64;
        out.push(LocalizationReport {
            branch: branch.name.clone(),
            mean_score: score / n,
            mean_baseline: baseline / n,
            ratio: score / baseline,
            degenerate,
        });
    }
    Ok(out)
}

/// Evaluates every head on the test split, picks the reported head by
/// validation accuracy and adds the ensemble and localization summaries.
/// Also returns the selected head's test predictions.
pub fn evaluate_model(model: &BuiltModel, samples: &[Sample], batch_size: usize) -> Result<(EvalReport, Vec<PredictionRow>)> {
    let test = in_split(samples, Split::Test);
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let val = in_split(samples, Split::Val);
    let names = model.head_names();
    let weights = model.spec().branch_weights();
    let selection_pool = if val.is_empty() {
        log::warn!("no validation samples; selecting the head on the test split");
        &test
    } else {
        &val
    };
    let sel = evaluate(model, selection_pool, batch_size, &weights, false)?;
    let scores: Vec<BranchScore> = names
        .iter()
        .zip(&sel.heads)
        .map(|(n, h)| BranchScore {
            name: n.clone(),
            val_accuracy: h.accuracy,
            val_loss: h.loss,
        })
        .collect();
    let selected = select_best_branch(&scores)?;

    let classes = model.spec().classes;
    let preds = predict(model, &test, batch_size, false)?;
    let mut heads = Vec::new();
    let mut selected_cm = None;
    for (i, (name, probs)) in names.iter().zip(&preds.probs).enumerate() {
        let (report, cm) = head_report(name, probs, &preds.labels, classes)?;
        if i == selected {
            selected_cm = Some(cm);
        }
        heads.push(report);
    }
    let ensemble = if preds.logits.len() > 1 {
        let probs = ensemble_preactivation(&preds.logits)?;
        Some(head_report("ensemble", &probs, &preds.labels, classes)?.0)
    } else {
        None
    };
    let rows = preds
        .ids
        .iter()
        .zip(&preds.labels)
        .zip(preds.probs[selected].data().chunks(classes))
        .map(|((&id, &truth), p)| PredictionRow {
            id,
            truth,
            predicted: argmax(p),
            probs: p.to_vec(),
        })
        .collect();
    let chosen = heads[selected].clone();
    let report = EvalReport {
        backbone: model.spec().backbone.id().to_string(),
        parameters: model.parameter_count(),
        test_samples: test.len(),
        selected: chosen.name,
        accuracy: chosen.accuracy,
        loss: chosen.loss,
        kappa: chosen.kappa,
        band: chosen.band,
        confusion: selected_cm.expect("selected head evaluated").rows(),
        heads,
        ensemble,
        localization: localization(model, &test, batch_size)?,
    };
    Ok((report, rows))
}
