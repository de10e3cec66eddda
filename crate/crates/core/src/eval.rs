//! AUC and mean logloss over a frozen model.

use std::cmp::Ordering;
use std::fmt;

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::memory::UserMemoryStore;
use crate::model::{predict, ModelParams};
use crate::train::{logistic_loss, logistic_loss_from_logit};

/// Scores with parallel binary labels. Logits, when kept, give an exact
/// logloss even where the probability has rounded to 0 or 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub logits: Option<Vec<f64>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim("ScoredSet", scores.len(), labels.len()));
        }
        Ok(ScoredSet {
            scores,
            labels,
            logits: None,
        })
    }

    pub fn from_pairs(pairs: &[(f64, u8)]) -> Self {
        ScoredSet {
            scores: pairs.iter().map(|p| p.0).collect(),
            labels: pairs.iter().map(|p| p.1).collect(),
            logits: None,
        }
    }

    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn push_with_logit(&mut self, score: f64, logit: f64, label: u8) {
        self.push(score, label);
        self.logits.get_or_insert_with(Vec::new).push(logit);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Area under the ROC curve by sorting, with tied scores contributing 1/2
/// per positive-negative pair. Equal to
/// `(concordant + ties / 2) / (positives * negatives)`.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    if set.scores.len() != set.labels.len() {
        return Err(Error::dim("auc", set.scores.len(), set.labels.len()));
    }
    if let Some(s) = set.scores.iter().find(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("AUC of NaN score {s}")));
    }
    let positives = set.labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = set.labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({positives} positives, {negatives} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[a]
            .partial_cmp(&set.scores[b])
            .unwrap_or(Ordering::Equal)
    });

    let (mut concordant, mut ties, mut negatives_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let score = set.scores[order[i]];
        let (mut pos, mut neg) = (0u64, 0u64);
        while i < order.len() && set.scores[order[i]] == score {
            if set.labels[order[i]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        concordant += pos * negatives_below;
        ties += pos * neg;
        negatives_below += neg;
    }
    Ok((concordant as f64 + 0.5 * ties as f64) / (positives as f64 * negatives as f64))
}

/// Mean binary cross-entropy; uses logits when the set carries them.
pub fn mean_logloss(set: &ScoredSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::UndefinedMetric("logloss of an empty set".into()));
    }
    let total: f64 = match &set.logits {
        Some(logits) => logits
            .iter()
            .zip(&set.labels)
            .map(|(&s, &y)| logistic_loss_from_logit(s, y))
            .sum(),
        None => set
            .scores
            .iter()
            .zip(&set.labels)
            .map(|(&p, &y)| logistic_loss(p, y))
            .sum(),
    };
    Ok(total / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "model,auc,logloss,n";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6e},{}",
            self.model, self.auc, self.logloss, self.n
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: AUC {:.6}, logloss {:.6}, n = {}",
            self.model,
            self.auc,
            // six significant digits
            SigFig(self.logloss),
            self.n
        )
    }
}

struct SigFig(f64);

impl fmt::Display for SigFig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        if v == 0.0 || !v.is_finite() {
            return write!(f, "{v}");
        }
        let digits = 6 - 1 - v.abs().log10().floor() as i32;
        write!(f, "{:.*}", digits.max(0) as usize, v)
    }
}

/// Scores every test instance against the frozen parameters and memory.
pub fn score_all<I>(params: &ModelParams, memory: &UserMemoryStore, test: I) -> Result<ScoredSet>
where
    I: IntoIterator<Item = Result<Instance>>,
{
    let mut set = ScoredSet::default();
    for inst in test {
        let inst = inst?;
        let (y_hat, cache) = predict(params, &inst, memory)?;
        set.push_with_logit(y_hat, cache.logit, inst.label);
    }
    Ok(set)
}

pub fn evaluate_model<I>(
    params: &ModelParams,
    memory: &UserMemoryStore,
    test: I,
) -> Result<EvalReport>
where
    I: IntoIterator<Item = Result<Instance>>,
{
    let set = score_all(params, memory, test)?;
    if set.is_empty() {
        return Err(Error::EmptyStream("test stream yielded no instances"));
    }
    Ok(EvalReport {
        model: params.kind.name().to_string(),
        auc: auc(&set)?,
        logloss: mean_logloss(&set)?,
        n: set.len(),
    })
}
