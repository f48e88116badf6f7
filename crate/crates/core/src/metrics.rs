//! Accuracy, confusion matrices, Cohen's kappa, branch selection, the
//! pre-activation ensemble and mask localization scores.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::upsample_nearest;
use crate::data::Roi;
use crate::error::{Error, Result};
use crate::kernels::softmax;
use crate::tensor::Tensor;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!("label {t} or prediction {p} outside {classes} classes")));
            }
            m.counts[t * classes + p] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.to_vec()).collect()
    }

    /// Relabels classes: new class `i` is old class `perm[i]`, on both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let c = self.classes;
        let mut out = Self::new(c);
        for i in 0..c {
            for j in 0..c {
                out.counts[i * c + j] = self.get(perm[i], perm[j]);
            }
        }
        out
    }
}

fn require_nonempty(m: &ConfusionMatrix) -> Result<()> {
    if m.total() == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    Ok(())
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64> {
    require_nonempty(m)?;
    Ok(m.trace() as f64 / m.total() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgreementBand {
    Slight,
    Fair,
    Moderate,
    Substantial,
    AlmostPerfect,
}

impl fmt::Display for AgreementBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgreementBand::Slight => "slight",
            AgreementBand::Fair => "fair",
            AgreementBand::Moderate => "moderate",
            AgreementBand::Substantial => "substantial",
            AgreementBand::AlmostPerfect => "almost perfect",
        })
    }
}

/// Bands: below 0.20 slight, 0.20-0.40 fair, then moderate, substantial and
/// almost perfect above 0.40, 0.60 and 0.80.
pub fn agreement_band(kappa: f64) -> AgreementBand {
    if kappa < 0.20 {
        AgreementBand::Slight
    } else if kappa <= 0.40 {
        AgreementBand::Fair
    } else if kappa <= 0.60 {
        AgreementBand::Moderate
    } else if kappa <= 0.80 {
        AgreementBand::Substantial
    } else {
        AgreementBand::AlmostPerfect
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    pub band: AgreementBand,
    /// Chance agreement was 1, so kappa was set to 0.
    pub degenerate: bool,
}

pub fn cohens_kappa(m: &ConfusionMatrix) -> Result<Kappa> {
    require_nonempty(m)?;
    let n = m.total() as f64;
    let c = m.classes();
    let p_o = m.trace() as f64 / n;
    let p_e: f64 = (0..c)
        .map(|k| {
            let row: u64 = (0..c).map(|j| m.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| m.get(i, k)).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        log::warn!("chance agreement is 1; kappa reported as 0");
        return Ok(Kappa {
            value: 0.0,
            band: agreement_band(0.0),
            degenerate: true,
        });
    }
    let value = (p_o - p_e) / (1.0 - p_e);
    Ok(Kappa {
        value,
        band: agreement_band(value),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchScore {
    pub name: String,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// Highest validation accuracy, then lowest validation loss, then the
/// shallower (earlier) branch.
pub fn select_best_branch(scores: &[BranchScore]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no branches to choose from".into()));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let b = &scores[best];
        if s.val_accuracy > b.val_accuracy || (s.val_accuracy == b.val_accuracy && s.val_loss < b.val_loss) {
            best = i;
        }
    }
    Ok(best)
}

/// Mean of the branch logits followed by a softmax.
pub fn ensemble_preactivation(branch_logits: &[Tensor]) -> Result<Tensor> {
    let first = branch_logits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no branch logits to ensemble".into()))?;
    if first.rank() != 2 {
        return Err(Error::shape("ensemble", format!("expected (batch, classes) logits, got {:?}", first.shape())));
    }
    if let Some(bad) = branch_logits.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape("ensemble", format!("{:?} vs {:?}", first.shape(), bad.shape())));
    }
    let k = branch_logits.len() as f64;
    let mean = Tensor::from_fn(first.shape(), |i| branch_logits.iter().map(|t| t.data()[i]).sum::<f64>() / k);
    Ok(softmax(&mean))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub score: f64,
    /// The mask had no mass at all; score is 0.
    pub degenerate: bool,
}

/// Share of mask mass inside `roi` after nearest upsampling of the
/// (h, w, 1) mask by `factor` to input resolution.
pub fn localization_score(mask: &Tensor, roi: &Roi, factor: usize) -> Result<Localization> {
    let up = upsample_nearest(mask, factor)?;
    let (h, w) = (up.shape()[0], up.shape()[1]);
    if !roi.fits(h, w) {
        return Err(Error::InvalidArgument(format!("roi {roi:?} outside the {h}x{w} upsampled mask")));
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for (i, &v) in up.data().iter().enumerate() {
        let (y, x) = (i / w, i % w);
        if (roi.top..roi.top + roi.height).contains(&y) && (roi.left..roi.left + roi.width).contains(&x) {
            inside += v;
        } else {
            outside += v;
        }
    }
    let total = inside + outside;
    if total <= 0.0 {
        return Ok(Localization {
            score: 0.0,
            degenerate: true,
        });
    }
    Ok(Localization {
        score: inside / total,
        degenerate: false,
    })
}

/// Mask-free reference: the roi's share of the image area.
pub fn uniform_baseline(roi: &Roi, h: usize, w: usize) -> f64 {
    roi.area() as f64 / (h * w) as f64
}

/// One row of a prediction dump.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub id: usize,
    pub truth: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

/// Writes `id,truth,predicted,p0..p{C-1}`.
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let classes = rows.first().map_or(0, |r| r.probs.len());
    let mut header = vec!["id".to_string(), "truth".into(), "predicted".into()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        let mut rec = vec![r.id.to_string(), r.truth.to_string(), r.predicted.to_string()];
        rec.extend(r.probs.iter().map(|p| p.to_string()));
        w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::format(path, "short prediction row"));
        let int = |i: usize| -> Result<usize> { field(i)?.parse().map_err(|_| Error::format(path, "bad integer")) };
        let probs = (3..rec.len())
            .map(|i| field(i)?.parse::<f64>().map_err(|_| Error::format(path, "bad probability")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(PredictionRow {
            id: int(0)?,
            truth: int(1)?,
            predicted: int(2)?,
            probs,
        });
    }
    Ok(rows)
}
