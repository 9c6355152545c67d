use serde::{Deserialize, Serialize};

use super::{init_hmm, normalize, Hmm};
use crate::encoding::ObservationSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Upper bound on EM updates per restart.
    pub max_iters: usize,
    /// Stop once the relative total log-likelihood gain drops below this.
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub emission_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 100,
            rel_tol: 1e-4,
            restarts: 3,
            seed: 42,
            emission_floor: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::BadConfig("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::BadConfig("rel_tol must be positive".into()));
        }
        if self.restarts < 1 {
            return Err(Error::BadConfig("restarts must be at least 1".into()));
        }
        if !(self.emission_floor >= 0.0 && self.emission_floor < 1.0) {
            return Err(Error::BadConfig("emission_floor must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Seed used for the initial model of restart `r`.
    pub fn restart_seed(&self, r: usize) -> u64 {
        mix_seed(self.seed, r as u64)
    }
}

/// Log-likelihood trajectory of one restart. Entry 0 is the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartLog {
    pub seed: u64,
    pub log_likelihoods: Vec<f64>,
}

impl RestartLog {
    pub fn iterations(&self) -> usize {
        self.log_likelihoods.len().saturating_sub(1)
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihoods.last().expect("log has at least the initial entry")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub restarts: Vec<RestartLog>,
    pub best_restart: usize,
    /// Total log-likelihood of the returned (floored) model.
    pub final_log_likelihood: f64,
}

impl TrainLog {
    pub fn best(&self) -> &RestartLog {
        &self.restarts[self.best_restart]
    }
}

/// Expected sufficient statistics pooled over all training sequences.
struct Counts {
    pi: Vec<f64>,
    trans: Vec<f64>,
    emit: Vec<f64>,
    log_likelihood: f64,
}

impl Counts {
    fn zeros(n: usize, m: usize) -> Self {
        Counts {
            pi: vec![0.0; n],
            trans: vec![0.0; n * n],
            emit: vec![0.0; n * m],
            log_likelihood: 0.0,
        }
    }
}

/// Baum-Welch EM over a fixed set of sequences, one update per [`step`].
///
/// The E-step for the current model is always already computed, so
/// [`log_likelihood`] is available without extra work.
///
/// [`step`]: BaumWelch::step
/// [`log_likelihood`]: BaumWelch::log_likelihood
pub struct BaumWelch<'a> {
    sequences: Vec<&'a [usize]>,
    model: Hmm,
    counts: Counts,
    history: Vec<f64>,
}

impl<'a> BaumWelch<'a> {
    pub fn new(model: Hmm, sequences: &'a [ObservationSequence]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let seqs: Vec<&[usize]> = sequences.iter().map(|s| s.symbols.as_slice()).collect();
        for s in &seqs {
            model.check_symbols(s)?;
        }
        let counts = expected_counts(&model, &seqs);
        let history = vec![counts.log_likelihood];
        Ok(BaumWelch {
            sequences: seqs,
            model,
            counts,
            history,
        })
    }

    pub fn model(&self) -> &Hmm {
        &self.model
    }

    pub fn into_model(self) -> Hmm {
        self.model
    }

    /// Total log-likelihood of the current model over all sequences.
    pub fn log_likelihood(&self) -> f64 {
        self.counts.log_likelihood
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// One M-step followed by the E-step of the new model. Returns the new
    /// total log-likelihood.
    pub fn step(&mut self) -> f64 {
        maximize(&mut self.model, &self.counts);
        self.counts = expected_counts(&self.model, &self.sequences);
        self.history.push(self.counts.log_likelihood);
        self.counts.log_likelihood
    }
}

/// Multi-restart Baum-Welch. Each restart iterates EM until the relative gain
/// in total log-likelihood falls below `config.rel_tol` or `config.max_iters`
/// updates have run; the restart with the best final log-likelihood wins and
/// gets the emission floor applied.
pub fn baum_welch_train(
    sequences: &[ObservationSequence],
    n_states: usize,
    n_symbols: usize,
    config: &TrainConfig,
) -> Result<(Hmm, TrainLog)> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }

    let mut best: Option<(Hmm, f64)> = None;
    let mut logs = Vec::with_capacity(config.restarts);
    let mut best_restart = 0;
    for r in 0..config.restarts {
        let seed = config.restart_seed(r);
        let mut em = BaumWelch::new(init_hmm(n_states, n_symbols, seed)?, sequences)?;
        let mut prev = em.log_likelihood();
        for _ in 0..config.max_iters {
            let cur = em.step();
            if !converging(prev, cur, config.rel_tol) {
                break;
            }
            prev = cur;
        }
        let final_ll = em.log_likelihood();
        logs.push(RestartLog {
            seed,
            log_likelihoods: em.history().to_vec(),
        });
        log::debug!("restart {r} (N={n_states}): {} iterations, loglik {final_ll}", logs[r].iterations());
        if best.as_ref().is_none_or(|(_, ll)| final_ll > *ll) {
            best = Some((em.into_model(), final_ll));
            best_restart = r;
        }
    }

    let (mut model, _) = best.expect("at least one restart");
    if config.emission_floor > 0.0 {
        model.apply_emission_floor(config.emission_floor);
    }
    let final_log_likelihood = sequences
        .iter()
        .map(|s| model.forward_log_likelihood(&s.symbols))
        .sum::<Result<f64>>()?;
    Ok((
        model,
        TrainLog {
            restarts: logs,
            best_restart,
            final_log_likelihood,
        },
    ))
}

/// Whether EM should keep going after moving from `prev` to `cur`.
fn converging(prev: f64, cur: f64, rel_tol: f64) -> bool {
    if !cur.is_finite() {
        return false;
    }
    if !prev.is_finite() {
        return true;
    }
    if prev == 0.0 {
        return false;
    }
    (cur - prev) / prev.abs() >= rel_tol
}

fn expected_counts(model: &Hmm, sequences: &[&[usize]]) -> Counts {
    let n = model.n_states();
    let m = model.n_symbols();
    let mut counts = Counts::zeros(n, m);
    let mut weighted = vec![0.0; n];
    for obs in sequences {
        let Some(fp) = model.forward_pass(obs) else {
            counts.log_likelihood = f64::NEG_INFINITY;
            continue;
        };
        counts.log_likelihood += fp.log_likelihood();
        let beta = model.backward_pass(obs, &fp.scale);

        for t in 0..obs.len() {
            let alpha_t = &fp.alpha[t * n..(t + 1) * n];
            let beta_t = &beta[t * n..(t + 1) * n];
            for i in 0..n {
                let g = alpha_t[i] * beta_t[i];
                if t == 0 {
                    counts.pi[i] += g;
                }
                counts.emit[i * m + obs[t]] += g;
            }
            if t + 1 < obs.len() {
                let next = obs[t + 1];
                let beta_next = &beta[(t + 1) * n..(t + 2) * n];
                for (j, w) in weighted.iter_mut().enumerate() {
                    *w = model.emit(j, next) * beta_next[j] / fp.scale[t + 1];
                }
                for (i, &ai) in alpha_t.iter().enumerate() {
                    if ai == 0.0 {
                        continue;
                    }
                    let row = &mut counts.trans[i * n..(i + 1) * n];
                    for ((c, &aij), &w) in row.iter_mut().zip(model.a_row(i)).zip(&weighted) {
                        *c += ai * aij * w;
                    }
                }
            }
        }
    }
    counts
}

/// Re-estimate parameters from pooled counts. Rows without any expected mass
/// keep their previous values.
fn maximize(model: &mut Hmm, counts: &Counts) {
    let n = model.n_states();
    let m = model.n_symbols();
    let (pi, a, b) = model.parts_mut();

    let mut new_pi = counts.pi.clone();
    if normalize(&mut new_pi).is_some() {
        pi.copy_from_slice(&new_pi);
    }
    for i in 0..n {
        let mut row = counts.trans[i * n..(i + 1) * n].to_vec();
        if normalize(&mut row).is_some() {
            a[i * n..(i + 1) * n].copy_from_slice(&row);
        }
        let mut row = counts.emit[i * m..(i + 1) * m].to_vec();
        if normalize(&mut row).is_some() {
            b[i * m..(i + 1) * m].copy_from_slice(&row);
        }
    }
}

/// SplitMix64 finaliser over `seed ^ stream`, used to derive independent
/// seeds for restarts and training jobs.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
