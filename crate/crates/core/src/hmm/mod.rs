//! Discrete hidden Markov models.
//!
//! Inference uses per-step scaling: the forward variables are renormalised to
//! sum to one at every time step, and the log-likelihood is recovered as the
//! sum of the log normalisers. Backward variables share the forward scale
//! factors, so state and transition posteriors come out normalised without any
//! log-space arithmetic.

mod file;
mod train;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use file::{model_name, Family, ModelFile, TrainSummary, TrainedModel};
pub use train::{baum_welch_train, BaumWelch, RestartLog, TrainConfig, TrainLog};
pub(crate) use train::mix_seed;

use crate::error::{Error, Result};

/// Tolerance used when validating that probability rows sum to one.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Relative size of the random perturbation applied around the uniform
/// distribution at initialisation.
const INIT_JITTER: f64 = 0.5;

/// A discrete HMM `(A, B, pi)` with `n_states` hidden states and `n_symbols`
/// observation symbols. Matrices are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Hmm {
    n_states: usize,
    n_symbols: usize,
    pi: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Hmm {
    pub fn new(pi: Vec<f64>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        let n = pi.len();
        if n == 0 {
            return Err(Error::BadDimensions("a model needs at least one state".into()));
        }
        if a.len() != n || a.iter().any(|row| row.len() != n) {
            return Err(Error::BadDimensions(format!("transition matrix must be {n}x{n}")));
        }
        if b.len() != n {
            return Err(Error::BadDimensions(format!("emission matrix must have {n} rows")));
        }
        let m = b[0].len();
        if m < 2 || b.iter().any(|row| row.len() != m) {
            return Err(Error::BadDimensions(
                "emission rows must share a width of at least 2".into(),
            ));
        }
        let hmm = Hmm {
            n_states: n,
            n_symbols: m,
            pi,
            a: a.concat(),
            b: b.concat(),
        };
        hmm.validate()?;
        Ok(hmm)
    }

    fn validate(&self) -> Result<()> {
        let check = |name: &str, row: &[f64]| -> Result<()> {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidModel(format!("{name} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidModel(format!("{name} sums to {sum}, not 1")));
            }
            Ok(())
        };
        check("pi", &self.pi)?;
        for i in 0..self.n_states {
            check(&format!("transition row {i}"), self.a_row(i))?;
            check(&format!("emission row {i}"), self.b_row(i))?;
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn a_row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n_states..(i + 1) * self.n_states]
    }

    pub fn b_row(&self, i: usize) -> &[f64] {
        &self.b[i * self.n_symbols..(i + 1) * self.n_symbols]
    }

    pub fn a_rows(&self) -> Vec<Vec<f64>> {
        self.a.chunks(self.n_states).map(<[f64]>::to_vec).collect()
    }

    pub fn b_rows(&self) -> Vec<Vec<f64>> {
        self.b.chunks(self.n_symbols).map(<[f64]>::to_vec).collect()
    }

    #[inline]
    fn emit(&self, state: usize, symbol: usize) -> f64 {
        self.b[state * self.n_symbols + symbol]
    }

    fn check_symbols(&self, obs: &[usize]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::EmptyTrace(String::new()));
        }
        match obs.iter().find(|&&s| s >= self.n_symbols) {
            Some(&symbol) => Err(Error::SymbolOutOfRange {
                symbol,
                n_symbols: self.n_symbols,
            }),
            None => Ok(()),
        }
    }

    /// Scaled forward pass. `None` when the sequence has zero probability.
    fn forward_pass(&self, obs: &[usize]) -> Option<ForwardPass> {
        let n = self.n_states;
        let t_len = obs.len();
        let mut alpha = vec![0.0; t_len * n];
        let mut scale = vec![0.0; t_len];

        for i in 0..n {
            alpha[i] = self.pi[i] * self.emit(i, obs[0]);
        }
        scale[0] = normalize(&mut alpha[..n])?;

        for t in 1..t_len {
            let (prev, cur) = alpha.split_at_mut(t * n);
            let prev = &prev[(t - 1) * n..];
            let cur = &mut cur[..n];
            for (i, &p) in prev.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (c, &aij) in cur.iter_mut().zip(self.a_row(i)) {
                    *c += p * aij;
                }
            }
            for (j, c) in cur.iter_mut().enumerate() {
                *c *= self.emit(j, obs[t]);
            }
            scale[t] = normalize(cur)?;
        }
        Some(ForwardPass { alpha, scale })
    }

    /// Scaled backward pass sharing the forward scale factors.
    fn backward_pass(&self, obs: &[usize], scale: &[f64]) -> Vec<f64> {
        let n = self.n_states;
        let t_len = obs.len();
        let mut beta = vec![0.0; t_len * n];
        beta[(t_len - 1) * n..].fill(1.0);
        let mut weighted = vec![0.0; n];
        for t in (0..t_len - 1).rev() {
            let next = &beta[(t + 1) * n..(t + 2) * n];
            for (j, w) in weighted.iter_mut().enumerate() {
                *w = self.emit(j, obs[t + 1]) * next[j] / scale[t + 1];
            }
            for i in 0..n {
                beta[t * n + i] = self.a_row(i).iter().zip(&weighted).map(|(a, w)| a * w).sum();
            }
        }
        beta
    }

    /// Natural-log likelihood `log P(O | model)`. Returns `-inf` if the
    /// sequence is impossible under the model.
    pub fn forward_log_likelihood(&self, obs: &[usize]) -> Result<f64> {
        self.check_symbols(obs)?;
        Ok(match self.forward_pass(obs) {
            Some(fp) => fp.log_likelihood(),
            None => f64::NEG_INFINITY,
        })
    }

    pub fn forward_backward_posteriors(&self, obs: &[usize]) -> Result<Posteriors> {
        self.check_symbols(obs)?;
        let n = self.n_states;
        let fp = self.forward_pass(obs).ok_or(Error::ZeroLikelihood)?;
        let beta = self.backward_pass(obs, &fp.scale);
        let t_len = obs.len();

        let gamma: Vec<f64> = fp.alpha.iter().zip(&beta).map(|(a, b)| a * b).collect();
        let mut xi = vec![0.0; t_len.saturating_sub(1) * n * n];
        for t in 0..t_len.saturating_sub(1) {
            let out = &mut xi[t * n * n..(t + 1) * n * n];
            for i in 0..n {
                let ai = fp.alpha[t * n + i];
                for j in 0..n {
                    out[i * n + j] = ai
                        * self.a[i * n + j]
                        * self.emit(j, obs[t + 1])
                        * beta[(t + 1) * n + j]
                        / fp.scale[t + 1];
                }
            }
        }
        Ok(Posteriors {
            n_states: n,
            len: t_len,
            gamma,
            xi,
            log_likelihood: fp.log_likelihood(),
        })
    }

    /// Per-symbol log-likelihood, `log P(O | model) / T`.
    pub fn score_sequence(&self, obs: &[usize]) -> Result<f64> {
        Ok(self.forward_log_likelihood(obs)? / obs.len() as f64)
    }

    /// Draw an observation sequence of length `len`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut state = draw(rng, &self.pi);
        for t in 0..len {
            if t > 0 {
                state = draw(rng, self.a_row(state));
            }
            out.push(draw(rng, self.b_row(state)));
        }
        out
    }

    pub(crate) fn from_raw_parts(
        n_states: usize,
        n_symbols: usize,
        pi: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(pi.len(), n_states);
        debug_assert_eq!(a.len(), n_states * n_states);
        debug_assert_eq!(b.len(), n_states * n_symbols);
        Hmm {
            n_states,
            n_symbols,
            pi,
            a,
            b,
        }
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (&mut self.pi, &mut self.a, &mut self.b)
    }

    /// Raise every emission probability to at least `floor` and renormalise.
    pub fn apply_emission_floor(&mut self, floor: f64) {
        for row in self.b.chunks_mut(self.n_symbols) {
            for p in row.iter_mut() {
                *p = p.max(floor);
            }
            normalize(row);
        }
    }
}

/// Randomly initialised model: uniform rows perturbed by seeded noise, then
/// renormalised.
pub fn init_hmm(n_states: usize, n_symbols: usize, seed: u64) -> Result<Hmm> {
    if n_states < 1 || n_symbols < 2 {
        return Err(Error::BadDimensions(format!(
            "need N >= 1 and M >= 2, got N={n_states}, M={n_symbols}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = |len: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..len)
            .map(|_| 1.0 + INIT_JITTER * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        normalize(&mut v);
        v
    };
    let pi = row(n_states);
    let a = (0..n_states).flat_map(|_| row(n_states)).collect();
    let b = (0..n_states).flat_map(|_| row(n_symbols)).collect();
    Ok(Hmm::from_raw_parts(n_states, n_symbols, pi, a, b))
}

struct ForwardPass {
    /// Normalised forward variables, `T x N`.
    alpha: Vec<f64>,
    /// Per-step normalisers; `P(O) = prod(scale)`.
    scale: Vec<f64>,
}

impl ForwardPass {
    fn log_likelihood(&self) -> f64 {
        self.scale.iter().map(|c| c.ln()).sum()
    }
}

/// State (`gamma`) and transition (`xi`) posteriors for one sequence.
#[derive(Clone, Debug)]
pub struct Posteriors {
    n_states: usize,
    len: usize,
    gamma: Vec<f64>,
    xi: Vec<f64>,
    pub log_likelihood: f64,
}

impl Posteriors {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `P(state_t = i | O)`.
    pub fn gamma(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.n_states..(t + 1) * self.n_states]
    }

    /// `P(state_t = i, state_{t+1} = j | O)` for `t < T - 1`.
    pub fn xi(&self, t: usize, i: usize, j: usize) -> f64 {
        let n = self.n_states;
        self.xi[t * n * n + i * n + j]
    }
}

/// Normalise in place; returns the original sum, or `None` if it was zero.
pub(crate) fn normalize(v: &mut [f64]) -> Option<f64> {
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return None;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Some(sum)
}

fn draw<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
