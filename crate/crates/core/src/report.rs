//! Precision, recall, F-measure and the per-field report files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{RocCurve, RocPoint};
use crate::error::{Error, Result};
use crate::fusion::Method;
use crate::io;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_point(tp: usize, fp: usize, n_pos: usize, n_neg: usize) -> Self {
        ConfusionCounts {
            tp,
            fp,
            fn_: n_pos - tp,
            tn: n_neg - fp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Metrics {
        precision,
        recall,
        f_measure: f_measure(precision, recall),
    }
}

/// Metrics at an ROC point, reading counts back as `round(rate * n)`.
pub fn point_to_metrics(fpr: f64, tpr: f64, n_pos: usize, n_neg: usize) -> Metrics {
    let tp = ((tpr * n_pos as f64).round() as usize).min(n_pos);
    let fp = ((fpr * n_neg as f64).round() as usize).min(n_neg);
    metrics_from_counts(&ConfusionCounts::from_point(tp, fp, n_pos, n_neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestF {
    /// Position of the point on the curve.
    pub index: usize,
    pub point: RocPoint,
    pub metrics: Metrics,
}

/// The point with the highest F-measure; ties go to the lower fpr, then the
/// lower tpr.
pub fn best_f_point(roc: &RocCurve, n_pos: usize, n_neg: usize) -> BestF {
    let mut best: Option<BestF> = None;
    for (index, p) in roc.points().iter().enumerate() {
        let metrics = point_to_metrics(p.fpr, p.tpr, n_pos, n_neg);
        let better = match &best {
            None => true,
            Some(b) => {
                let (f, bf) = (metrics.f_measure, b.metrics.f_measure);
                f > bf || (f == bf && (p.fpr, p.tpr) < (b.point.fpr, b.point.tpr))
            }
        };
        if better {
            best = Some(BestF {
                index,
                point: *p,
                metrics,
            });
        }
    }
    best.expect("a validated curve has at least two points")
}

/// Relative TPR gain, or `"n/a"` when the baseline TPR is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Improvement {
    Value(f64),
    NotAvailable,
}

impl Improvement {
    pub fn value(self) -> Option<f64> {
        match self {
            Improvement::Value(v) => Some(v),
            Improvement::NotAvailable => None,
        }
    }

    fn format(self, decimals: usize) -> String {
        match self {
            Improvement::Value(v) => format!("{v:.decimals$}"),
            Improvement::NotAvailable => "n/a".into(),
        }
    }
}

impl Serialize for Improvement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Improvement::Value(v) => s.serialize_f64(*v),
            Improvement::NotAvailable => s.serialize_str("n/a"),
        }
    }
}

impl<'de> Deserialize<'de> for Improvement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Improvement::Value(v)),
            Repr::Str(s) if s == "n/a" => Ok(Improvement::NotAvailable),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected improvement {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtfprComparison {
    pub tpr_ensemble: f64,
    pub tpr_single: f64,
    pub improvement: Improvement,
}

/// Relative improvement `(tpr_e - tpr_s) / tpr_s` from already-read TPRs.
pub fn improvement(tpr_ensemble: f64, tpr_single: f64) -> Improvement {
    if tpr_single == 0.0 {
        Improvement::NotAvailable
    } else {
        Improvement::Value((tpr_ensemble - tpr_single) / tpr_single)
    }
}

/// Compare the best TPR each curve reaches without exceeding `mtfpr`.
pub fn mtfpr_improvement(ensemble: &RocCurve, single: &RocCurve, mtfpr: f64) -> Result<MtfprComparison> {
    if !(0.0..=1.0).contains(&mtfpr) {
        return Err(Error::BadConfig(format!("mtfpr must lie in [0, 1], got {mtfpr}")));
    }
    let tpr_ensemble = ensemble.max_tpr_at(mtfpr);
    let tpr_single = single.max_tpr_at(mtfpr);
    Ok(MtfprComparison {
        tpr_ensemble,
        tpr_single,
        improvement: improvement(tpr_ensemble, tpr_single),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleSummary {
    /// Model file of the single detector with the best validation AUC.
    pub model: String,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingSummary {
    pub rule: usize,
    pub fpr: f64,
    pub tpr: f64,
    pub metrics: Metrics,
}

/// Test-set results for one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldReport {
    pub field: String,
    pub method: Method,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auc: f64,
    /// Best-F point of the test curve; `threshold` is its rule index.
    pub best: RocPoint,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// The operating rule fixed on validation, measured on test.
    pub operating: OperatingSummary,
    pub mtfpr: f64,
    pub tpr_ensemble: f64,
    pub tpr_single: f64,
    pub improvement: Improvement,
    pub best_single: SingleSummary,
    pub roc: RocCurve,
}

impl FieldReport {
    /// Assemble a report from the ensemble and single-detector test curves.
    pub fn new(
        field: impl Into<String>,
        method: Method,
        ensemble_roc: RocCurve,
        single_roc: &RocCurve,
        best_single_model: impl Into<String>,
        operating: OperatingSummary,
        mtfpr: f64,
    ) -> Result<Self> {
        let (n_pos, n_neg) = (ensemble_roc.n_pos(), ensemble_roc.n_neg());
        let best = best_f_point(&ensemble_roc, n_pos, n_neg);
        let cmp = mtfpr_improvement(&ensemble_roc, single_roc, mtfpr)?;
        Ok(FieldReport {
            field: field.into(),
            method,
            n_pos,
            n_neg,
            auc: ensemble_roc.auc(),
            best: best.point,
            precision: best.metrics.precision,
            recall: best.metrics.recall,
            f_measure: best.metrics.f_measure,
            operating,
            mtfpr,
            tpr_ensemble: cmp.tpr_ensemble,
            tpr_single: cmp.tpr_single,
            improvement: cmp.improvement,
            best_single: SingleSummary {
                model: best_single_model.into(),
                auc: single_roc.auc(),
            },
            roc: ensemble_roc,
        })
    }
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "field",
    "method",
    "auc",
    "precision",
    "recall",
    "f_measure",
    "mtfpr",
    "tpr_ensemble",
    "tpr_single",
    "improvement",
];

/// File-system safe version of a field name.
pub fn file_stem(field: &str) -> String {
    field
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct ReportFile<'a> {
    fields: &'a [FieldReport],
}

/// Write `report.json`, `summary.csv` and `roc/<field>.csv` under `out_dir`.
/// Returns the written paths.
pub fn emit_report(out_dir: &Path, reports: &[FieldReport]) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::BadConfig("no field reports to emit".into()));
    }
    let mut written = Vec::new();

    let json_path = out_dir.join("report.json");
    io::write_json(&json_path, &ReportFile { fields: reports })?;
    written.push(json_path);

    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(SUMMARY_HEADER)?;
    for r in reports {
        let d4 = |v: f64| format!("{v:.4}");
        summary.write_record([
            r.field.clone(),
            r.method.to_string(),
            d4(r.auc),
            d4(r.precision),
            d4(r.recall),
            d4(r.f_measure),
            d4(r.mtfpr),
            d4(r.tpr_ensemble),
            d4(r.tpr_single),
            r.improvement.format(4),
        ])?;
    }
    let bytes = summary.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    let summary_path = out_dir.join("summary.csv");
    io::write_atomic(&summary_path, &bytes)?;
    written.push(summary_path);

    for r in reports {
        let mut buf = Vec::new();
        r.roc.write_csv(&mut buf)?;
        let path = out_dir.join("roc").join(format!("{}.csv", file_stem(&r.field)));
        io::write_atomic(&path, &buf)?;
        written.push(path);
    }
    Ok(written)
}
