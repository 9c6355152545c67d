//! Soft detectors, ROC curves, AUC and agreement statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::Family;

/// Score sign applied so that a higher oriented score always means "more
/// likely reassigned".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Orientation {
    Positive,
    Negative,
}

impl Orientation {
    pub fn sign(self) -> f64 {
        match self {
            Orientation::Positive => 1.0,
            Orientation::Negative => -1.0,
        }
    }

    pub fn apply(self, score: f64) -> f64 {
        match self {
            Orientation::Positive => score,
            Orientation::Negative => -score,
        }
    }
}

impl From<Orientation> for i8 {
    fn from(o: Orientation) -> i8 {
        match o {
            Orientation::Positive => 1,
            Orientation::Negative => -1,
        }
    }
}

impl TryFrom<i8> for Orientation {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, Self::Error> {
        match v {
            1 => Ok(Orientation::Positive),
            -1 => Ok(Orientation::Negative),
            other => Err(format!("orientation must be 1 or -1, got {other}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftDetector {
    pub model_ref: String,
    pub family: Family,
    pub orientation: Orientation,
}

impl SoftDetector {
    pub fn new(model_ref: impl Into<String>, family: Family) -> Self {
        SoftDetector {
            model_ref: model_ref.into(),
            family,
            orientation: Orientation::Positive,
        }
    }
}

/// Scores over a labelled dataset. `labels[i]` is true when the field of
/// instance `i` was reassigned.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: scores.len(),
                right: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(Error::LengthMismatch { left: 0, right: 0 });
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFiniteScore);
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.n_pos();
        p > 0 && p < self.len()
    }

    pub fn oriented(&self, orientation: Orientation) -> ScoreSet {
        ScoreSet {
            scores: self.scores.iter().map(|&s| orientation.apply(s)).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Distinct scores in descending order: the finite crisp thresholds.
    pub fn thresholds(&self) -> Vec<f64> {
        let mut t = self.scores.clone();
        t.sort_by(|a, b| b.total_cmp(a));
        t.dedup();
        t
    }

    /// `(tp, fp)` of the crisp decision `score >= threshold`.
    pub fn counts_at(&self, threshold: f64) -> (usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            if s >= threshold {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        (tp, fp)
    }
}

/// `count / total` as used for every stored rate, so that recomputation from
/// counts is bit-identical.
pub fn rate(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Oriented-score threshold for single-detector curves, or the rule index
    /// for composite curves. `+inf` marks the all-negative point.
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

impl RocPoint {
    pub fn from_counts(tp: usize, fp: usize, n_pos: usize, n_neg: usize, threshold: f64) -> Self {
        RocPoint {
            fpr: rate(fp, n_neg),
            tpr: rate(tp, n_pos),
            threshold,
            tp,
            fp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    points: Vec<RocPoint>,
    n_pos: usize,
    n_neg: usize,
}

impl RocCurve {
    /// Validate and wrap a point list. Points must be sorted, monotone in both
    /// coordinates and span (0,0) to (1,1).
    pub fn new(points: Vec<RocPoint>, n_pos: usize, n_neg: usize) -> Result<Self> {
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::SingleClassValidation);
        }
        let bad = |msg: &str| Err(Error::InvalidEnsemble(format!("invalid ROC curve: {msg}")));
        let (Some(first), Some(last)) = (points.first(), points.last()) else {
            return bad("no points");
        };
        if (first.tp, first.fp) != (0, 0) || (last.tp, last.fp) != (n_pos, n_neg) {
            return bad("curve must run from (0,0) to (1,1)");
        }
        for p in &points {
            if p.tp > n_pos || p.fp > n_neg || p.fpr != rate(p.fp, n_neg) || p.tpr != rate(p.tp, n_pos) {
                return bad("point rates disagree with counts");
            }
        }
        if points.windows(2).any(|w| w[1].fp < w[0].fp || w[1].tp < w[0].tp) {
            return bad("points are not monotone");
        }
        Ok(RocCurve {
            points,
            n_pos,
            n_neg,
        })
    }

    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.n_neg
    }

    /// Area under the curve by the trapezoid rule.
    pub fn auc(&self) -> f64 {
        auc(self)
    }

    /// Highest tpr among points with `fpr <= max_fpr`.
    pub fn max_tpr_at(&self, max_fpr: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr <= max_fpr)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }

    /// Write `fpr,tpr,threshold` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fpr", "tpr", "threshold"])?;
        for p in &self.points {
            w.write_record([p.fpr.to_string(), p.tpr.to_string(), format_threshold(p.threshold)])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn format_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else if t == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        t.to_string()
    }
}

/// Sweep thresholds `+inf` followed by every distinct score in descending
/// order; the decision rule is `score >= threshold`.
pub fn roc_curve(set: &ScoreSet) -> Result<RocCurve> {
    if !set.has_both_classes() {
        return Err(Error::SingleClassValidation);
    }
    let (n_pos, n_neg) = (set.n_pos(), set.n_neg());
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut points = vec![RocPoint::from_counts(0, 0, n_pos, n_neg, f64::INFINITY)];
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < order.len() {
        let threshold = set.scores[order[k]];
        while k < order.len() && set.scores[order[k]] == threshold {
            if set.labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint::from_counts(tp, fp, n_pos, n_neg, threshold));
    }
    Ok(RocCurve {
        points,
        n_pos,
        n_neg,
    })
}

/// Trapezoidal area, accumulated on integer counts so the result is the
/// correctly rounded value of the exact rational area.
pub fn auc(roc: &RocCurve) -> f64 {
    let twice_area: u128 = roc
        .points
        .windows(2)
        .map(|w| (w[1].fp - w[0].fp) as u128 * (w[0].tp + w[1].tp) as u128)
        .sum();
    twice_area as f64 / (2 * roc.n_pos as u128 * roc.n_neg as u128) as f64
}

/// Choose the sign that makes the detector's validation AUC at least 0.5.
/// Returns the oriented detector and its oriented validation AUC.
pub fn orient_detector(mut detector: SoftDetector, validation: &ScoreSet) -> Result<(SoftDetector, f64)> {
    let raw = auc(&roc_curve(validation)?);
    if raw < 0.5 {
        detector.orientation = Orientation::Negative;
        let oriented = auc(&roc_curve(&validation.oriented(Orientation::Negative))?);
        Ok((detector, oriented))
    } else {
        detector.orientation = Orientation::Positive;
        Ok((detector, raw))
    }
}

/// Cohen's kappa between two boolean decision vectors.
pub fn cohen_kappa(a: &[bool], b: &[bool]) -> Result<f64> {
    let to_bins = |v: &[bool]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
    kappa_from_bins(&to_bins(a), &to_bins(b), 2)
}

/// Quadratically weighted kappa over `bins`-quantile discretisations of two
/// score vectors.
pub fn weighted_kappa(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::BadConfig("weighted kappa needs at least 2 bins".into()));
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    kappa_from_bins(&quantile_bins(a, bins)?, &quantile_bins(b, bins)?, bins)
}

/// Empirical quantile bin of each value: `floor(q * #{v < x} / n)`. Tied
/// values share a bin, and any strictly increasing transform leaves the
/// binning unchanged.
pub fn quantile_bins(values: &[f64], q: usize) -> Result<Vec<usize>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFiniteScore);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len();
    Ok(values
        .iter()
        .map(|&x| {
            let below = sorted.partition_point(|&v| v < x);
            (q * below / n).min(q - 1)
        })
        .collect())
}

/// Kappa with quadratic weights `1 - ((i-j)/(q-1))^2`, computed on scaled
/// integer tables so that the degenerate cases come out exact. With `q = 2`
/// this is Cohen's unweighted kappa.
fn kappa_from_bins(a: &[usize], b: &[usize], q: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let n = a.len() as i128;
    let d = (q - 1) as i128;
    let weight = |i: usize, j: usize| d * d - (i as i128 - j as i128).pow(2);

    let observed: i128 = a.iter().zip(b).map(|(&i, &j)| weight(i, j)).sum();
    let mut marg_a = vec![0i128; q];
    let mut marg_b = vec![0i128; q];
    for (&i, &j) in a.iter().zip(b) {
        marg_a[i] += 1;
        marg_b[j] += 1;
    }
    let mut expected: i128 = 0;
    for (i, &ca) in marg_a.iter().enumerate() {
        for (j, &cb) in marg_b.iter().enumerate() {
            expected += weight(i, j) * ca * cb;
        }
    }
    // kappa = (Po - Pe) / (1 - Pe), scaled by n^2 (q-1)^2.
    let num = n * observed - expected;
    let den = n * n * d * d - expected;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}
