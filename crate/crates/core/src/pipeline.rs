//! Per-field orchestration: splits, model grids, fusion, test evaluation and
//! live prediction.
//!
//! For a field `F`, reports whose `F` was reassigned form class R and the rest
//! form class NR. Each class is shuffled once and cut into 70% train, 10%
//! validation and 20% test. The HMM-R family trains on R's 70%, the HMM-NR
//! family on NR's 70%, and both share the one validation draw. The ensemble is
//! evaluated on the two 20% test portions, which neither family trained on.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{roc_curve, RocCurve, RocPoint, ScoreSet, SoftDetector};
use crate::encoding::{build_vocabulary, encode, ObservationSequence};
use crate::error::{Error, Result};
use crate::fusion::{
    bbc2_combine, ibc_combine, wpibc_build, wpibc_select_crisp, EnsembleModel, Fusion, Method,
    Prediction, ScoredDetector, WpibcConfig,
};
use crate::hmm::{baum_welch_train, mix_seed, model_name, Family, TrainConfig, TrainSummary, TrainedModel};
use crate::io;
use crate::report::{point_to_metrics, FieldReport, OperatingSummary};
use crate::trace::{select_trace, Dialect, Extractor, Frame, RawBugReport, StackTrace, TracePolicy};

/// Smallest class that still leaves every partition non-empty.
pub const MIN_CLASS_SIZE: usize = 10;

/// One line of the trace JSONL: the selected trace of a report plus its labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub dialect: Dialect,
    pub frames: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, bool>,
}

impl TraceRecord {
    pub fn new(trace: &StackTrace, labels: BTreeMap<String, bool>) -> Self {
        TraceRecord {
            id: trace.report_id.clone(),
            dialect: trace.dialect,
            frames: trace.function_names().map(str::to_string).collect(),
            labels,
        }
    }

    pub fn to_trace(&self) -> StackTrace {
        StackTrace {
            report_id: self.id.clone(),
            frames: self.frames.iter().map(Frame::new).collect(),
            dialect: self.dialect,
        }
    }
}

/// Extract and select one trace per report. Reports without a trace are
/// skipped; the second value counts them.
pub fn extract_records(
    reports: &[RawBugReport],
    extractor: &Extractor,
    policy: TracePolicy,
) -> (Vec<TraceRecord>, usize) {
    let mut skipped = 0;
    let records = reports
        .iter()
        .filter_map(|r| match select_trace(extractor.extract_report(r), policy) {
            Some(t) if !t.is_empty() => Some(TraceRecord::new(&t, r.labels.clone())),
            _ => {
                skipped += 1;
                None
            }
        })
        .collect();
    (records, skipped)
}

/// Every field name that appears in any record's labels.
pub fn fields_in(records: &[TraceRecord]) -> BTreeSet<String> {
    records.iter().flat_map(|r| r.labels.keys().cloned()).collect()
}

/// Traces of one field, split by class.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDataset {
    pub field: String,
    pub r: Vec<StackTrace>,
    pub nr: Vec<StackTrace>,
}

impl FieldDataset {
    /// Records without a label for `field` are ignored.
    pub fn from_records(field: &str, records: &[TraceRecord]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let (mut r, mut nr) = (Vec::new(), Vec::new());
        for rec in records {
            let Some(&label) = rec.labels.get(field) else { continue };
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::DuplicateReportId(rec.id.clone()));
            }
            if rec.frames.is_empty() {
                continue;
            }
            if label {
                r.push(rec.to_trace());
            } else {
                nr.push(rec.to_trace());
            }
        }
        Ok(FieldDataset {
            field: field.to_string(),
            r,
            nr,
        })
    }

    pub fn class(&self, family: Family) -> &[StackTrace] {
        match family {
            Family::R => &self.r,
            Family::NR => &self.nr,
        }
    }

    fn by_id(&self) -> HashMap<&str, (&StackTrace, bool)> {
        self.r
            .iter()
            .map(|t| (t.report_id.as_str(), (t, true)))
            .chain(self.nr.iter().map(|t| (t.report_id.as_str(), (t, false))))
            .collect()
    }
}

/// Traces with reassignment labels, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledTraces {
    pub traces: Vec<StackTrace>,
    pub labels: Vec<bool>,
}

impl LabeledTraces {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn push_all(&mut self, traces: &[&StackTrace], label: bool) {
        for t in traces {
            self.traces.push((*t).clone());
            self.labels.push(label);
        }
    }
}

/// Report ids of one class, cut 70/10/20.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl ClassPartition {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Round-to-nearest `percent`% of `n`, halves rounding up.
fn percent_of(n: usize, percent: usize) -> usize {
    (n * percent + 50) / 100
}

/// Partition sizes `(train, validation, test)` of a class of size `n`.
pub fn partition_sizes(n: usize) -> (usize, usize, usize) {
    let validation = percent_of(n, 10);
    let test = percent_of(n, 20);
    (n - validation - test, validation, test)
}

/// The persisted split of one field, shared by both model families.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSplit {
    pub field: String,
    pub seed: u64,
    pub r: ClassPartition,
    pub nr: ClassPartition,
}

/// The data one model family sees.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train_class: Family,
    pub seed: u64,
    /// Training traces, all from `train_class`.
    pub train: Vec<StackTrace>,
    /// 10% of each class.
    pub validation: LabeledTraces,
    /// 20% of `train_class` plus 90% of the other class.
    pub test: LabeledTraces,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn family_index(f: Family) -> u64 {
    match f {
        Family::R => 0,
        Family::NR => 1,
    }
}

/// Shuffle each class with a seed derived from `(seed, field, class)` and cut
/// it 70/10/20. Traces are sorted by report id first, so input order does not
/// matter.
pub fn split_field(data: &FieldDataset, seed: u64) -> Result<FieldSplit> {
    for family in Family::BOTH {
        let size = data.class(family).len();
        if size < MIN_CLASS_SIZE {
            return Err(Error::ClassTooSmall {
                field: data.field.clone(),
                class: family.as_str(),
                size,
                min: MIN_CLASS_SIZE,
            });
        }
    }
    let base = mix_seed(seed, fnv1a(&data.field));
    let partition = |family: Family| {
        let mut ids: Vec<String> = data.class(family).iter().map(|t| t.report_id.clone()).collect();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base, family_index(family)));
        ids.shuffle(&mut rng);
        let (_, n_val, n_test) = partition_sizes(ids.len());
        let train = ids.split_off(n_val + n_test);
        let test = ids.split_off(n_val);
        ClassPartition {
            train,
            validation: ids,
            test,
        }
    };
    Ok(FieldSplit {
        field: data.field.clone(),
        seed,
        r: partition(Family::R),
        nr: partition(Family::NR),
    })
}

/// Split for the family trained on `train_class`.
pub fn split_dataset(data: &FieldDataset, train_class: Family, seed: u64) -> Result<DatasetSplit> {
    split_field(data, seed)?.family_split(data, train_class)
}

impl FieldSplit {
    pub fn partition(&self, family: Family) -> &ClassPartition {
        match family {
            Family::R => &self.r,
            Family::NR => &self.nr,
        }
    }

    fn resolve<'a>(
        ids: &[String],
        lookup: &HashMap<&str, (&'a StackTrace, bool)>,
    ) -> Result<Vec<&'a StackTrace>> {
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .map(|(t, _)| *t)
                    .ok_or_else(|| Error::UnknownReportId(id.clone()))
            })
            .collect()
    }

    fn check_ids(&self, data: &FieldDataset) -> Result<()> {
        let lookup = data.by_id();
        for family in Family::BOTH {
            let part = self.partition(family);
            for id in part.train.iter().chain(&part.validation).chain(&part.test) {
                match lookup.get(id.as_str()) {
                    Some((_, label)) if *label == family.label() => {}
                    _ => return Err(Error::UnknownReportId(id.clone())),
                }
            }
        }
        Ok(())
    }

    pub fn family_split(&self, data: &FieldDataset, train_class: Family) -> Result<DatasetSplit> {
        self.check_ids(data)?;
        let lookup = data.by_id();
        let own = self.partition(train_class);
        let other = self.partition(train_class.other());
        let train = Self::resolve(&own.train, &lookup)?.into_iter().cloned().collect();
        let mut test = LabeledTraces::default();
        test.push_all(&Self::resolve(&own.test, &lookup)?, train_class.label());
        let cross: Vec<String> = other.test.iter().chain(&other.train).cloned().collect();
        test.push_all(&Self::resolve(&cross, &lookup)?, train_class.other().label());
        Ok(DatasetSplit {
            train_class,
            seed: self.seed,
            train,
            validation: self.validation(data)?,
            test,
        })
    }

    /// The shared validation set: R's 10% then NR's 10%.
    pub fn validation(&self, data: &FieldDataset) -> Result<LabeledTraces> {
        self.labeled(data, |p| &p.validation)
    }

    /// Test set for the ensemble: the 20% test portion of each class.
    pub fn ensemble_test(&self, data: &FieldDataset) -> Result<LabeledTraces> {
        self.labeled(data, |p| &p.test)
    }

    fn labeled(&self, data: &FieldDataset, pick: impl Fn(&ClassPartition) -> &Vec<String>) -> Result<LabeledTraces> {
        self.check_ids(data)?;
        let lookup = data.by_id();
        let mut out = LabeledTraces::default();
        out.push_all(&Self::resolve(pick(&self.r), &lookup)?, true);
        out.push_all(&Self::resolve(pick(&self.nr), &lookup)?, false);
        Ok(out)
    }
}

/// Hidden-state counts to train, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateGrid(Vec<usize>);

impl StateGrid {
    pub fn new(states: Vec<usize>) -> Result<Self> {
        if states.is_empty() || states[0] == 0 || states.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::BadConfig(
                "state grid must be non-empty, positive and strictly increasing".into(),
            ));
        }
        Ok(StateGrid(states))
    }

    /// `start, start+step, ...` up to and including `end`.
    pub fn range(start: usize, end: usize, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::BadConfig("state grid step must be positive".into()));
        }
        StateGrid::new((start..=end).step_by(step).collect())
    }

    pub fn states(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for StateGrid {
    fn default() -> Self {
        StateGrid::range(10, 200, 10).expect("static grid")
    }
}

impl FromStr for StateGrid {
    type Err = String;

    /// Accepts `start..end:step` or a comma-separated list.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        let grid = if let Some((range, step)) = s.split_once(':') {
            let (start, end) = range
                .split_once("..")
                .ok_or_else(|| format!("expected start..end:step, got {s:?}"))?;
            StateGrid::range(num(start)?, num(end)?, num(step)?)
        } else {
            StateGrid::new(s.split(',').map(num).collect::<std::result::Result<_, _>>()?)
        };
        grid.map_err(|e| e.to_string())
    }
}

impl fmt::Display for StateGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Seed for one model of the grid.
pub fn model_seed(seed: u64, field: &str, family: Family, n_states: usize) -> u64 {
    mix_seed(mix_seed(seed, fnv1a(field)), family_index(family) << 32 | n_states as u64)
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::BadConfig(format!("cannot start worker pool: {e}")))
}

/// Train one HMM per (family, N): R-family models first, each family in grid
/// order. Each family encodes against a vocabulary of its own training traces.
pub fn train_field_models(
    split: &FieldSplit,
    data: &FieldDataset,
    grid: &StateGrid,
    config: &TrainConfig,
    jobs: Option<usize>,
) -> Result<Vec<TrainedModel>> {
    config.validate()?;
    let mut corpora = Vec::new();
    for family in Family::BOTH {
        let train = split.family_split(data, family)?.train;
        let vocab = build_vocabulary(&train)?;
        let seqs: Vec<ObservationSequence> = train.iter().map(|t| encode(t, &vocab)).collect::<Result<_>>()?;
        corpora.push((family, vocab, seqs));
    }
    let tasks: Vec<(usize, usize)> = (0..corpora.len())
        .flat_map(|c| grid.states().iter().map(move |&n| (c, n)))
        .collect();
    pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(c, n)| {
                let (family, vocab, seqs) = &corpora[c];
                let seed = model_seed(config.seed, &data.field, *family, n);
                let cfg = TrainConfig { seed, ..*config };
                let (hmm, log) = baum_welch_train(seqs, n, vocab.len(), &cfg)?;
                log::info!(
                    "{}: trained {} in {} iterations, loglik {:.4}",
                    data.field,
                    model_name(*family, n),
                    log.best().iterations(),
                    log.final_log_likelihood
                );
                TrainedModel::new(
                    *family,
                    data.field.clone(),
                    hmm,
                    vocab.clone(),
                    TrainSummary {
                        seed,
                        iters: log.best().iterations(),
                        final_loglik: log.final_log_likelihood,
                    },
                )
            })
            .collect()
    })
}

/// Raw scores of every model on every trace, one column per model.
pub fn score_matrix(models: &[TrainedModel], data: &LabeledTraces) -> Result<Vec<Vec<f64>>> {
    models
        .par_iter()
        .map(|m| data.traces.iter().map(|t| m.score_trace(t)).collect())
        .collect()
}

/// Relative path of a model file under an artifact root.
pub fn model_file(field: &str, family: Family, n_states: usize) -> String {
    format!(
        "models/{}/{}.json",
        crate::report::file_stem(field),
        model_name(family, n_states)
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub method: Method,
    pub wpibc: WpibcConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            method: Method::Wpibc,
            wpibc: WpibcConfig::default(),
        }
    }
}

/// Orient every model on the validation set.
pub fn scored_detectors(
    models: &[TrainedModel],
    validation: &LabeledTraces,
) -> Result<Vec<ScoredDetector>> {
    let columns = score_matrix(models, validation)?;
    models
        .iter()
        .zip(columns)
        .map(|(m, col)| {
            let detector = SoftDetector::new(model_file(&m.field, m.family, m.hmm.n_states()), m.family);
            ScoredDetector::orient(detector, &ScoreSet::new(col, validation.labels.clone())?)
        })
        .collect()
}

/// Wrap, orient and fuse the models of one field on its validation set. The
/// operating rule is the best-F rule on validation.
pub fn build_field_ensemble(
    field: &str,
    models: &[TrainedModel],
    validation: &LabeledTraces,
    config: &EnsembleConfig,
) -> Result<Fusion> {
    if models.is_empty() {
        return Err(Error::TooFewDetectors { needed: 1, got: 0 });
    }
    let detectors = scored_detectors(models, validation)?;
    match config.method {
        Method::Wpibc => wpibc_build(field, &detectors, &config.wpibc),
        Method::Ibc => ibc_combine(field, &detectors, &config.wpibc.ibc),
        Method::Bbc2 => {
            let crisp: Vec<_> = detectors
                .iter()
                .enumerate()
                .flat_map(|(i, d)| wpibc_select_crisp(d, i, config.wpibc.d))
                .collect();
            bbc2_combine(field, &detectors, &crisp)
        }
    }
}

/// Base models of an ensemble, in base order.
pub fn ensemble_bases<'a>(ensemble: &EnsembleModel, models: &'a [TrainedModel]) -> Result<Vec<&'a TrainedModel>> {
    ensemble
        .bases
        .iter()
        .map(|b| {
            models
                .iter()
                .find(|m| model_file(&m.field, m.family, m.hmm.n_states()) == b.model_file)
                .ok_or_else(|| Error::InvalidEnsemble(format!("missing base model {}", b.model_file)))
        })
        .collect()
}

/// Test ROC of a fused detector: every stored rule evaluated on the test set,
/// keeping the rules not dominated by a rule with fewer false positives. The
/// two trivial corners are added when no rule lands on them. A point's
/// `threshold` is its rule index; corners added here carry `+inf`/`-inf`.
pub fn ensemble_test_curve(ensemble: &EnsembleModel, raw: &[Vec<f64>], labels: &[bool]) -> Result<RocCurve> {
    let mut points = ensemble.evaluate_rules(raw, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    points.sort_by(|a, b| {
        a.fp.cmp(&b.fp)
            .then(b.tp.cmp(&a.tp))
            .then(a.threshold.total_cmp(&b.threshold))
    });
    let mut curve = vec![RocPoint::from_counts(0, 0, n_pos, n_neg, f64::INFINITY)];
    let mut synthetic_origin = true;
    for p in points {
        if (p.tp, p.fp) == (0, 0) {
            if synthetic_origin {
                curve[0] = p;
                synthetic_origin = false;
            }
        } else if p.tp > curve.last().expect("origin").tp {
            curve.push(p);
        }
    }
    let last = *curve.last().expect("origin");
    if (last.tp, last.fp) != (n_pos, n_neg) {
        curve.push(RocPoint::from_counts(n_pos, n_neg, n_pos, n_neg, f64::NEG_INFINITY));
    }
    RocCurve::new(curve, n_pos, n_neg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleResult {
    pub model: String,
    pub validation_auc: f64,
    pub test_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldEvaluation {
    pub report: FieldReport,
    /// Every single oriented detector, in model order.
    pub singles: Vec<SingleResult>,
}

impl FieldEvaluation {
    pub fn max_single_test_auc(&self) -> f64 {
        self.singles.iter().map(|s| s.test_auc).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Measure the ensemble and every single model on `test`. The baseline for
/// the MTFPR comparison is the single detector with the best validation AUC.
pub fn evaluate_field(
    ensemble: &EnsembleModel,
    models: &[TrainedModel],
    validation: &LabeledTraces,
    test: &LabeledTraces,
    mtfpr: f64,
) -> Result<FieldEvaluation> {
    let detectors = scored_detectors(models, validation)?;
    let test_raw = score_matrix(models, test)?;

    let mut singles = Vec::with_capacity(models.len());
    let mut single_curves = Vec::with_capacity(models.len());
    for (d, col) in detectors.iter().zip(&test_raw) {
        let set = ScoreSet::new(col.clone(), test.labels.clone())?.oriented(d.detector.orientation);
        let curve = roc_curve(&set)?;
        singles.push(SingleResult {
            model: d.detector.model_ref.clone(),
            validation_auc: d.auc,
            test_auc: curve.auc(),
        });
        single_curves.push(curve);
    }
    let best_single = (0..detectors.len())
        .max_by(|&a, &b| detectors[a].auc.total_cmp(&detectors[b].auc).then(b.cmp(&a)))
        .ok_or(Error::TooFewDetectors { needed: 1, got: 0 })?;

    let bases = ensemble_bases(ensemble, models)?;
    let base_raw: Vec<Vec<f64>> = bases
        .iter()
        .map(|b| {
            let i = models.iter().position(|m| std::ptr::eq(m, *b)).expect("base from models");
            test_raw[i].clone()
        })
        .collect();
    let curve = ensemble_test_curve(ensemble, &base_raw, &test.labels)?;

    let (n_pos, n_neg) = (curve.n_pos(), curve.n_neg());
    let op = ensemble.evaluate_rules(&base_raw, &test.labels)?[ensemble.operating_rule];
    let operating = OperatingSummary {
        rule: ensemble.operating_rule,
        fpr: op.fpr,
        tpr: op.tpr,
        metrics: point_to_metrics(op.fpr, op.tpr, n_pos, n_neg),
    };
    let report = FieldReport::new(
        ensemble.field.clone(),
        ensemble.method,
        curve,
        &single_curves[best_single],
        singles[best_single].model.clone(),
        operating,
        mtfpr,
    )?;
    Ok(FieldEvaluation { report, singles })
}

/// Everything a pipeline run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub grid: StateGrid,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub mtfpr: f64,
    pub jobs: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            grid: StateGrid::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            mtfpr: 0.12,
            jobs: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FieldRun {
    pub split: FieldSplit,
    pub models: Vec<TrainedModel>,
    pub fusion: Fusion,
    pub evaluation: FieldEvaluation,
}

/// Split, train, fuse and evaluate one field in memory.
pub fn run_field(data: &FieldDataset, config: &PipelineConfig) -> Result<FieldRun> {
    let split = split_field(data, config.seed)?;
    let train = TrainConfig {
        seed: config.seed,
        ..config.train
    };
    let models = train_field_models(&split, data, &config.grid, &train, config.jobs)?;
    let validation = split.validation(data)?;
    let fusion = build_field_ensemble(&data.field, &models, &validation, &config.ensemble)?;
    let test = split.ensemble_test(data)?;
    let evaluation = evaluate_field(&fusion.ensemble, &models, &validation, &test, config.mtfpr)?;
    Ok(FieldRun {
        split,
        models,
        fusion,
        evaluation,
    })
}

/// Outcome of predicting one report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldPrediction {
    pub id: String,
    pub field: String,
    /// `None` when the report has no usable trace.
    pub decision: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Raw score per base detector; bases the operating rule does not use are
    /// left unscored.
    pub scores: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<crate::fusion::TraceStep>,
}

pub const NO_STACK_TRACE: &str = "no-stack-trace";

/// Score a trace under the bases the operating rule needs and apply it.
pub fn predict_trace(ensemble: &EnsembleModel, bases: &[&TrainedModel], trace: &StackTrace) -> Result<FieldPrediction> {
    if bases.len() != ensemble.bases.len() {
        return Err(Error::LengthMismatch {
            left: bases.len(),
            right: ensemble.bases.len(),
        });
    }
    let required = ensemble.required_bases();
    let scores: Vec<Option<f64>> = bases
        .iter()
        .enumerate()
        .map(|(i, m)| required.contains(&i).then(|| m.score_trace(trace)).transpose())
        .collect::<Result<_>>()?;
    let Prediction { decision, trace: steps } = ensemble.predict(&scores)?;
    Ok(FieldPrediction {
        id: trace.report_id.clone(),
        field: ensemble.field.clone(),
        decision: Some(decision),
        reason: None,
        scores,
        trace: steps,
    })
}

/// Extract, select and predict. A report without a trace is an outcome,
/// not an error.
pub fn predict_field(
    ensemble: &EnsembleModel,
    bases: &[&TrainedModel],
    extractor: &Extractor,
    policy: TracePolicy,
    report: &RawBugReport,
) -> Result<FieldPrediction> {
    match select_trace(extractor.extract_report(report), policy) {
        Some(trace) if !trace.is_empty() => predict_trace(ensemble, bases, &trace),
        _ => Ok(FieldPrediction {
            id: report.id.clone(),
            field: ensemble.field.clone(),
            decision: None,
            reason: Some(NO_STACK_TRACE.into()),
            scores: vec![None; ensemble.bases.len()],
            trace: Vec::new(),
        }),
    }
}

/// On-disk artifact layout rooted at one directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model_path(&self, field: &str, family: Family, n_states: usize) -> PathBuf {
        self.root.join(model_file(field, family, n_states))
    }

    pub fn ensemble_path(&self, field: &str) -> PathBuf {
        self.root
            .join("ensembles")
            .join(format!("{}.json", crate::report::file_stem(field)))
    }

    pub fn split_path(&self, field: &str) -> PathBuf {
        self.root
            .join("splits")
            .join(format!("{}.json", crate::report::file_stem(field)))
    }

    pub fn write_split(&self, split: &FieldSplit) -> Result<PathBuf> {
        let path = self.split_path(&split.field);
        io::write_json(&path, split)?;
        Ok(path)
    }

    pub fn read_split(&self, field: &str) -> Result<FieldSplit> {
        io::read_json(&self.split_path(field))
    }

    pub fn write_models(&self, models: &[TrainedModel]) -> Result<Vec<PathBuf>> {
        models
            .iter()
            .map(|m| {
                let path = self.model_path(&m.field, m.family, m.hmm.n_states());
                io::write_json(&path, &m.to_file())?;
                Ok(path)
            })
            .collect()
    }

    pub fn read_model(&self, relative: &str) -> Result<TrainedModel> {
        TrainedModel::from_file(io::read_json(&self.root.join(relative))?)
    }

    /// Every model of `field` on the grid, R family first.
    pub fn read_models(&self, field: &str, grid: &StateGrid) -> Result<Vec<TrainedModel>> {
        Family::BOTH
            .iter()
            .flat_map(|&f| grid.states().iter().map(move |&n| model_file(field, f, n)))
            .map(|rel| self.read_model(&rel))
            .collect()
    }

    /// Every model file present for `field`, R family first, then by N.
    pub fn discover_models(&self, field: &str) -> Result<Vec<TrainedModel>> {
        let dir = self.root.join("models").join(crate::report::file_stem(field));
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut models = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                models.push(TrainedModel::from_file(io::read_json(&path)?)?);
            }
        }
        models.sort_by_key(|m| (family_index(m.family), m.hmm.n_states()));
        Ok(models)
    }

    pub fn write_ensemble(&self, ensemble: &EnsembleModel) -> Result<PathBuf> {
        let path = self.ensemble_path(&ensemble.field);
        io::write_json(&path, ensemble)?;
        Ok(path)
    }

    pub fn read_ensemble(&self, field: &str) -> Result<EnsembleModel> {
        let ensemble: EnsembleModel = io::read_json(&self.ensemble_path(field))?;
        ensemble.check()?;
        Ok(ensemble)
    }

    /// Load the base models an ensemble refers to, in base order.
    pub fn read_bases(&self, ensemble: &EnsembleModel) -> Result<Vec<TrainedModel>> {
        ensemble.bases.iter().map(|b| self.read_model(&b.model_file)).collect()
    }
}
