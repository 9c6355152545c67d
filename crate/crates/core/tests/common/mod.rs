#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reassign_core::detector::{ScoreSet, SoftDetector};
use reassign_core::fusion::ScoredDetector;
use reassign_core::hmm::{Family, Hmm};
use reassign_core::pipeline::FieldDataset;
use reassign_core::trace::{Dialect, Frame, StackTrace};

pub struct GoldenCase {
    pub name: String,
    pub dialect: Dialect,
    pub text: String,
    pub expected: Vec<Vec<String>>,
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let mut out = Vec::new();
    for dialect in [Dialect::Eclipse, Dialect::Gnome] {
        let dir = fixtures_dir().join(dialect.as_str());
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        names.sort();
        for txt in names {
            let json = txt.with_extension("json");
            let expected: Vec<Vec<String>> =
                serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
            out.push(GoldenCase {
                name: format!("{}/{}", dialect, txt.file_stem().unwrap().to_string_lossy()),
                dialect,
                text: fs::read_to_string(&txt).unwrap(),
                expected,
            });
        }
    }
    out
}

pub fn render_frame(frame: &Frame, dialect: Dialect) -> String {
    let source = frame.source.as_deref().unwrap_or("-");
    match dialect {
        Dialect::Eclipse => format!("{} ({source})", frame.function),
        Dialect::Gnome => format!("#{} {} ({source})", frame.position.unwrap_or(0), frame.function),
    }
}

pub fn render(traces: &[StackTrace]) -> Vec<Vec<String>> {
    traces
        .iter()
        .map(|t| t.frames.iter().map(|f| render_frame(f, t.dialect)).collect())
        .collect()
}

fn stochastic(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

pub fn random_hmm(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Hmm {
    let pi = stochastic(rng, n);
    let a = (0..n).map(|_| stochastic(rng, n)).collect();
    let b = (0..n).map(|_| stochastic(rng, m)).collect();
    Hmm::new(pi, a, b).unwrap()
}

const OWN: usize = 12;
const SHARED: usize = 6;

/// Three-state generator whose emissions put `own_mass` on its own function
/// names and the rest on names shared with the other class.
fn class_generator(own_mass: f64) -> Hmm {
    let n = 3;
    let m = OWN + SHARED;
    let pi = vec![0.5, 0.3, 0.2];
    let a = vec![
        vec![0.6, 0.3, 0.1],
        vec![0.1, 0.6, 0.3],
        vec![0.3, 0.1, 0.6],
    ];
    let b = (0..n)
        .map(|s| {
            let mut row = vec![0.0; m];
            let block = OWN / n;
            let mut own_total = 0.0;
            for (k, x) in row.iter_mut().take(OWN).enumerate() {
                *x = if k / block == s { 4.0 } else { 1.0 };
                own_total += *x;
            }
            for x in row.iter_mut().take(OWN) {
                *x *= own_mass / own_total;
            }
            for x in row.iter_mut().skip(OWN) {
                *x = (1.0 - own_mass) / SHARED as f64;
            }
            row
        })
        .collect();
    Hmm::new(pi, a, b).unwrap()
}

fn symbol_name(prefix: &str, symbol: usize) -> String {
    if symbol < OWN {
        format!("{prefix}_handler_{symbol}")
    } else {
        format!("shared_util_{}", symbol - OWN)
    }
}

/// Two well-separated trace populations: `n_per_class` reassigned traces
/// and as many stable ones, lengths uniform in 5..=30.
pub fn synthetic_dataset(field: &str, n_per_class: usize, seed: u64) -> FieldDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen_r = class_generator(0.8);
    let gen_nr = class_generator(0.8);
    let make = |gen: &Hmm, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<StackTrace> {
        (0..n_per_class)
            .map(|i| {
                let len = rng.random_range(5..=30);
                let frames = gen
                    .sample(rng, len)
                    .into_iter()
                    .map(|s| Frame::new(symbol_name(prefix, s)))
                    .collect();
                StackTrace {
                    report_id: format!("{prefix}-{i:05}"),
                    frames,
                    dialect: Dialect::Gnome,
                }
            })
            .collect()
    };
    let r = make(&gen_r, "r", &mut rng);
    let nr = make(&gen_nr, "nr", &mut rng);
    FieldDataset {
        field: field.to_string(),
        r,
        nr,
    }
}

/// Labels with both classes and `k` noisy detectors. Some detectors score
/// positives lower so orientation is exercised; scores are rounded to
/// produce ties.
pub fn random_detector_set(seed: u64) -> (Vec<Vec<f64>>, Vec<bool>, Vec<ScoredDetector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(30..=80);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let k = rng.random_range(2..=5);
    let mut raw = Vec::with_capacity(k);
    for _ in 0..k {
        let signal = rng.random_range(-1.5..2.0);
        let column: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let noise: f64 = (0..3).map(|_| rng.random_range(-1.0..1.0)).sum();
                let s = if l { signal } else { 0.0 } + noise;
                (s * 20.0).round() / 20.0
            })
            .collect();
        raw.push(column);
    }
    let detectors = scored(&raw, &labels);
    (raw, labels, detectors)
}

pub fn scored(raw: &[Vec<f64>], labels: &[bool]) -> Vec<ScoredDetector> {
    raw.iter()
        .enumerate()
        .map(|(i, column)| {
            let set = ScoreSet::new(column.clone(), labels.to_vec()).unwrap();
            let family = if i % 2 == 0 { Family::R } else { Family::NR };
            ScoredDetector::orient(SoftDetector::new(format!("d{i}"), family), &set).unwrap()
        })
        .collect()
}
