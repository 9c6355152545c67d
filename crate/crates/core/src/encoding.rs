//! Function names to discrete observation symbols.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::trace::StackTrace;

/// Name reserved for index 0, the bucket for functions unseen at training.
pub const UNK: &str = "<UNK>";

/// Observation alphabet: `UNK` followed by the training function names in
/// lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuild from a serialized symbol list, which must start with `UNK`.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.first().map(String::as_str) != Some(UNK) {
            return Err(Error::InvalidModel(format!(
                "vocabulary must start with {UNK}"
            )));
        }
        if symbols.len() < 2 {
            return Err(Error::InvalidModel(
                "vocabulary needs at least one function name".into(),
            ));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, name) in symbols.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!(
                    "duplicate vocabulary entry {name:?}"
                )));
            }
        }
        Ok(Vocabulary { symbols, index })
    }

    /// Alphabet size M, including `UNK`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn lookup(&self, name: &str) -> usize {
        self.index.get(name).copied().unwrap_or(0)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.symbols.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let symbols = Vec::<String>::deserialize(deserializer)?;
        Vocabulary::from_symbols(symbols).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSequence {
    pub report_id: String,
    pub symbols: Vec<usize>,
}

impl ObservationSequence {
    pub fn new(report_id: impl Into<String>, symbols: Vec<usize>) -> Self {
        ObservationSequence {
            report_id: report_id.into(),
            symbols,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

pub fn build_vocabulary<'a, I>(training_traces: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a StackTrace>,
{
    let names: BTreeSet<&str> = training_traces
        .into_iter()
        .flat_map(|t| t.function_names())
        .filter(|n| *n != UNK)
        .collect();
    if names.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let symbols = std::iter::once(UNK.to_string())
        .chain(names.into_iter().map(str::to_string))
        .collect();
    Vocabulary::from_symbols(symbols)
}

pub fn encode(trace: &StackTrace, vocab: &Vocabulary) -> Result<ObservationSequence> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace(trace.report_id.clone()));
    }
    Ok(ObservationSequence {
        report_id: trace.report_id.clone(),
        symbols: trace.function_names().map(|n| vocab.lookup(n)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Dialect, Frame};
    use proptest::prelude::*;

    fn trace(fns: &[&str]) -> StackTrace {
        StackTrace {
            report_id: "r1".into(),
            frames: fns.iter().map(|f| Frame::new(*f)).collect(),
            dialect: Dialect::Gnome,
        }
    }

    #[test]
    fn vocabulary_is_sorted_and_deduplicated() {
        let v = build_vocabulary([&trace(&["b", "a", "b"])]).unwrap();
        assert_eq!(v.symbols(), [UNK, "a", "b"]);
        assert_eq!(v.len(), 3);

        let v = build_vocabulary([&trace(&["f"])]).unwrap();
        assert_eq!(v.symbols(), [UNK, "f"]);

        let empty: [&StackTrace; 0] = [];
        assert!(matches!(build_vocabulary(empty), Err(Error::EmptyCorpus)));
        assert!(matches!(
            build_vocabulary([&trace(&[])]),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_maps_unknown_to_zero() {
        let v = build_vocabulary([&trace(&["a", "b"])]).unwrap();
        assert_eq!(encode(&trace(&["a", "b", "a"]), &v).unwrap().symbols, [1, 2, 1]);
        assert_eq!(encode(&trace(&["c"]), &v).unwrap().symbols, [0]);
        assert!(matches!(encode(&trace(&[]), &v), Err(Error::EmptyTrace(_))));
    }

    #[test]
    fn vocabulary_serde_round_trip() {
        let v = build_vocabulary([&trace(&["x", "y"])]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["<UNK>","x","y"]"#);
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x","y"]"#).is_err());
    }

    proptest! {
        #[test]
        fn vocabulary_ignores_input_order(
            names in prop::collection::vec(prop::collection::vec("[a-e]{1,3}", 1..6), 1..6),
            seed in any::<u64>(),
        ) {
            let traces: Vec<StackTrace> = names
                .iter()
                .map(|fns| trace(&fns.iter().map(String::as_str).collect::<Vec<_>>()))
                .collect();
            let mut shuffled = traces.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = build_vocabulary(&traces).unwrap();
            let b = build_vocabulary(&shuffled).unwrap();
            prop_assert_eq!(&a, &b);

            for t in &traces {
                let seq = encode(t, &a).unwrap();
                prop_assert_eq!(seq.len(), t.len());
                prop_assert!(seq.symbols.iter().all(|&s| s < a.len()));
            }
        }
    }
}
