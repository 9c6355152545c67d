use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Hmm;
use crate::encoding::{encode, Vocabulary};
use crate::error::{Error, Result};
use crate::trace::StackTrace;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Which class a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// Traces of reports whose field was reassigned.
    R,
    /// Traces of reports whose field was not reassigned.
    NR,
}

impl Family {
    pub const BOTH: [Family; 2] = [Family::R, Family::NR];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::R => "R",
            Family::NR => "NR",
        }
    }

    pub fn other(self) -> Family {
        match self {
            Family::R => Family::NR,
            Family::NR => Family::R,
        }
    }

    /// The label value of the class this family is trained on.
    pub fn label(self) -> bool {
        self == Family::R
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "R" | "r" => Ok(Family::R),
            "NR" | "nr" => Ok(Family::NR),
            other => Err(format!("unknown family {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub iters: usize,
    pub final_loglik: f64,
}

/// A trained HMM together with the alphabet it indexes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub family: Family,
    pub field: String,
    pub hmm: Hmm,
    pub vocab: Vocabulary,
    pub train: TrainSummary,
}

impl TrainedModel {
    pub fn new(
        family: Family,
        field: impl Into<String>,
        hmm: Hmm,
        vocab: Vocabulary,
        train: TrainSummary,
    ) -> Result<Self> {
        if hmm.n_symbols() != vocab.len() {
            return Err(Error::InvalidModel(format!(
                "emission width {} does not match vocabulary size {}",
                hmm.n_symbols(),
                vocab.len()
            )));
        }
        Ok(TrainedModel {
            family,
            field: field.into(),
            hmm,
            vocab,
            train,
        })
    }

    /// Stable identifier, e.g. `R-N10`.
    pub fn name(&self) -> String {
        model_name(self.family, self.hmm.n_states())
    }

    /// Per-symbol log-likelihood of a trace under this model.
    pub fn score_trace(&self, trace: &StackTrace) -> Result<f64> {
        let seq = encode(trace, &self.vocab)?;
        self.hmm.score_sequence(&seq.symbols)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: "hmm".into(),
            family: self.family,
            field: self.field.clone(),
            n_states: self.hmm.n_states(),
            vocab: self.vocab.clone(),
            pi: self.hmm.pi().to_vec(),
            a: self.hmm.a_rows(),
            b: self.hmm.b_rows(),
            train: self.train.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        if file.kind != "hmm" {
            return Err(Error::InvalidModel(format!("unexpected kind {:?}", file.kind)));
        }
        if file.n_states != file.pi.len() {
            return Err(Error::InvalidModel("n_states does not match pi".into()));
        }
        let hmm = Hmm::new(file.pi, file.a, file.b)?;
        TrainedModel::new(file.family, file.field, hmm, file.vocab, file.train)
    }
}

pub fn model_name(family: Family, n_states: usize) -> String {
    format!("{family}-N{n_states}")
}

/// On-disk JSON layout of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub kind: String,
    pub family: Family,
    pub field: String,
    pub n_states: usize,
    pub vocab: Vocabulary,
    pub pi: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub train: TrainSummary,
}
