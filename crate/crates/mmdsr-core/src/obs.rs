//! Per-modality observation models (decoders): linear Gaussian, cumulative
//! logit ordinal, reference-class categorical, and Poisson / zero-inflated
//! Poisson / negative-binomial counts.
//!
//! Each family provides plain per-time-step log-likelihood evaluation, a
//! sampler, and a tape builder used by training. The decoder parameters are
//! shared storage between the encoder (VAE) path and the reconstruction
//! path — the builders reference the same named inputs.
//!
//! Conventions:
//! - Observation variances are `VAR_FLOOR + exp(raw)`, keeping them above
//!   the floor with nonzero gradient everywhere.
//! - Ordinal cutpoints are parameterized as a first cutpoint plus softplus
//!   increments, so they stay strictly increasing under gradient descent.
//! - Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before logs.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::diff::{Array, DiffError, NodeId, Tape};
use crate::series::MultimodalSeries;

/// Floor for observation and posterior variances.
pub const VAR_FLOOR: f64 = 1e-5;
/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("negative count {0} at entry {1}")]
    NegativeCount(f64, usize),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const LN_2PI: f64 = 1.8378770664093453;

// ---------------------------------------------------------------------------
// Gaussian

/// Linear Gaussian decoder `x ~ N(loading · z, diag(Γ))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDecoder {
    pub n: usize,
    pub k: usize,
    /// `n × k` factor loading.
    pub loading: Vec<f64>,
    /// Raw log-variances; `Γ_i = VAR_FLOOR + exp(raw_i)`.
    pub gamma_raw: Vec<f64>,
}

impl GaussianDecoder {
    pub fn gamma(&self) -> Vec<f64> {
        self.gamma_raw.iter().map(|r| VAR_FLOOR + r.exp()).collect()
    }

    pub fn mean(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| dot(&self.loading[i * self.k..(i + 1) * self.k], z))
            .collect()
    }
}

/// Sum over observed entries of the Gaussian log-density; masked entries
/// contribute zero.
pub fn gaussian_loglik(x: &[f64], z: &[f64], dec: &GaussianDecoder, mask: &[bool]) -> f64 {
    let gamma = dec.gamma();
    let mean = dec.mean(z);
    let mut ll = 0.0;
    for i in 0..dec.n {
        if mask[i] {
            let r = x[i] - mean[i];
            ll += -0.5 * (LN_2PI + gamma[i].ln() + r * r / gamma[i]);
        }
    }
    ll
}

// ---------------------------------------------------------------------------
// Ordinal

/// Cumulative-logit ordinal decoder. Cutpoint parameters are stored flat,
/// per variable: `[c_1_raw, Δ_2_raw, …, Δ_{L−1}_raw]` with
/// `c_j = c_{j−1} + softplus(Δ_j_raw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalDecoder {
    pub k: usize,
    /// Levels per variable (`L_i ≥ 2`).
    pub levels: Vec<usize>,
    /// `n_vars × k` regression weights.
    pub betas: Vec<f64>,
    /// Flat raw cutpoint parameters, `Σ_i (L_i − 1)` values.
    pub cut_raw: Vec<f64>,
}

impl OrdinalDecoder {
    pub fn n_vars(&self) -> usize {
        self.levels.len()
    }

    /// Offset of variable `i` in `cut_raw`.
    pub fn cut_offset(&self, i: usize) -> usize {
        self.levels[..i].iter().map(|l| l - 1).sum()
    }

    /// Strictly increasing cutpoints of variable `i` (length `L_i − 1`).
    pub fn cutpoints(&self, i: usize) -> Vec<f64> {
        let off = self.cut_offset(i);
        let raw = &self.cut_raw[off..off + self.levels[i] - 1];
        let mut out = Vec::with_capacity(raw.len());
        let mut c = raw[0];
        out.push(c);
        for &d in &raw[1..] {
            c += softplus(d);
            out.push(c);
        }
        out
    }
}

/// Probability mass over the `L_i` levels of variable `i` at latent state `z`:
/// `p(o = k) = p(o ≤ k) − p(o ≤ k−1)` with logistic cumulative links
/// `p(o ≤ k) = σ(c_k − β_i · z)`.
pub fn ordinal_probs(z: &[f64], dec: &OrdinalDecoder, var: usize) -> Vec<f64> {
    let l = dec.levels[var];
    let u = dot(&dec.betas[var * dec.k..(var + 1) * dec.k], z);
    let cuts = dec.cutpoints(var);
    let mut probs = Vec::with_capacity(l);
    let mut prev = 0.0;
    for level in 0..l {
        let cum = if level + 1 < l {
            logistic(cuts[level] - u)
        } else {
            1.0
        };
        probs.push(clamp_prob(cum - prev).max(0.0));
        prev = cum;
    }
    probs
}

/// Log-mass of observed levels (0-based), masked entries contributing zero.
pub fn ordinal_loglik(o: &[f64], z: &[f64], dec: &OrdinalDecoder, mask: &[bool]) -> f64 {
    let mut ll = 0.0;
    for i in 0..dec.n_vars() {
        if mask[i] {
            let probs = ordinal_probs(z, dec, i);
            let level = o[i].round() as usize;
            ll += clamp_prob(probs[level.min(probs.len() - 1)]).ln();
        }
    }
    ll
}

// ---------------------------------------------------------------------------
// Categorical

/// Reference-class softmax decoder: class `K` carries implicit zero logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDecoder {
    pub k: usize,
    /// Classes per variable (`K_i ≥ 2`).
    pub classes: Vec<usize>,
    /// Flat `Σ_i (K_i − 1) × k` weights, variable-major.
    pub betas: Vec<f64>,
}

impl CategoricalDecoder {
    pub fn n_vars(&self) -> usize {
        self.classes.len()
    }

    pub fn beta_offset(&self, i: usize) -> usize {
        self.classes[..i].iter().map(|c| (c - 1) * self.k).sum()
    }
}

/// Class probabilities of variable `var` at `z`:
/// `π_i = exp(β_i · z) / (1 + Σ_j exp(β_j · z))`, `π_K = 1 / (1 + Σ_j …)`.
pub fn categorical_probs(z: &[f64], dec: &CategoricalDecoder, var: usize) -> Vec<f64> {
    let kc = dec.classes[var];
    let off = dec.beta_offset(var);
    let mut logits = Vec::with_capacity(kc);
    for c in 0..kc - 1 {
        logits.push(dot(&dec.betas[off + c * dec.k..off + (c + 1) * dec.k], z));
    }
    logits.push(0.0);
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    for e in exps.iter_mut() {
        *e /= s;
    }
    exps
}

pub fn categorical_loglik(o: &[f64], z: &[f64], dec: &CategoricalDecoder, mask: &[bool]) -> f64 {
    let mut ll = 0.0;
    for i in 0..dec.n_vars() {
        if mask[i] {
            let probs = categorical_probs(z, dec, i);
            let class = o[i].round() as usize;
            ll += clamp_prob(probs[class.min(probs.len() - 1)]).ln();
        }
    }
    ll
}

// ---------------------------------------------------------------------------
// Counts

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CountFamily {
    Poisson,
    Zip,
    NegBinomial,
}

/// Count decoder with log-link rates `log λ = γ₀ + γ · z`; ZIP adds a
/// zero-inflation logit, the negative binomial a per-channel log-dispersion.
#[derive(Clone, Debug, PartialEq)]
pub struct CountDecoder {
    pub family: CountFamily,
    pub n: usize,
    pub k: usize,
    pub gamma0: Vec<f64>,
    /// `n × k` rate weights.
    pub gammas: Vec<f64>,
    /// ZIP only: zero-logit intercept and `n × k` weights.
    pub zero_beta0: Vec<f64>,
    pub zero_betas: Vec<f64>,
    /// Negative binomial only: per-channel `log φ`.
    pub log_phi: Vec<f64>,
}

impl CountDecoder {
    pub fn log_rate(&self, z: &[f64], channel: usize) -> f64 {
        self.gamma0[channel] + dot(&self.gammas[channel * self.k..(channel + 1) * self.k], z)
    }

    pub fn zero_logit(&self, z: &[f64], channel: usize) -> f64 {
        self.zero_beta0[channel]
            + dot(&self.zero_betas[channel * self.k..(channel + 1) * self.k], z)
    }
}

fn poisson_log_mass(c: f64, log_lambda: f64) -> f64 {
    c * log_lambda - log_lambda.exp() - ln_gamma(c + 1.0)
}

fn neg_binomial_log_mass(c: f64, log_mu: f64, phi: f64) -> f64 {
    let mu = log_mu.exp();
    let denom = (mu + phi).ln();
    ln_gamma(c + phi) - ln_gamma(phi) - ln_gamma(c + 1.0) + phi * (phi.ln() - denom)
        + c * (log_mu - denom)
}

fn zip_log_mass(c: f64, log_lambda: f64, zero_logit: f64) -> f64 {
    let ln_pi = -softplus(-zero_logit);
    let ln_1m_pi = -softplus(zero_logit);
    if c == 0.0 {
        // ln(π + (1−π) e^{−λ}), evaluated in log space
        let a = ln_pi;
        let b = ln_1m_pi - log_lambda.exp();
        let mx = a.max(b);
        mx + ((a - mx).exp() + (b - mx).exp()).ln()
    } else {
        ln_1m_pi + poisson_log_mass(c, log_lambda)
    }
}

/// Family-specific log-mass summed over observed channels. Counts must be
/// nonnegative.
pub fn count_loglik(
    c_t: &[f64],
    z: &[f64],
    dec: &CountDecoder,
    mask: &[bool],
) -> Result<f64, ObsError> {
    let mut ll = 0.0;
    for ch in 0..dec.n {
        let c = c_t[ch];
        if c < 0.0 {
            return Err(ObsError::NegativeCount(c, ch));
        }
        if !mask[ch] {
            continue;
        }
        let log_rate = dec.log_rate(z, ch);
        ll += match dec.family {
            CountFamily::Poisson => poisson_log_mass(c, log_rate),
            CountFamily::Zip => zip_log_mass(c, log_rate, dec.zero_logit(z, ch)),
            CountFamily::NegBinomial => {
                neg_binomial_log_mass(c, log_rate, dec.log_phi[ch].exp())
            }
        };
    }
    Ok(ll)
}

/// Log-mass of a single count under the decoder's family at the given
/// channel (used by normalization checks and evaluation).
pub fn count_log_mass(dec: &CountDecoder, z: &[f64], channel: usize, c: f64) -> f64 {
    let log_rate = dec.log_rate(z, channel);
    match dec.family {
        CountFamily::Poisson => poisson_log_mass(c, log_rate),
        CountFamily::Zip => zip_log_mass(c, log_rate, dec.zero_logit(z, channel)),
        CountFamily::NegBinomial => neg_binomial_log_mass(c, log_rate, dec.log_phi[channel].exp()),
    }
}

// ---------------------------------------------------------------------------
// Decoder bank

/// All decoders of one model, shared between the encoder path and the
/// reconstruction path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecoderBank {
    pub gaussian: Option<GaussianDecoder>,
    pub ordinal: Option<OrdinalDecoder>,
    pub count: Option<CountDecoder>,
    pub categorical: Option<CategoricalDecoder>,
}

/// One sampled multimodal observation.
#[derive(Clone, Debug, Default)]
pub struct SampledObs {
    pub continuous: Vec<f64>,
    pub ordinal: Vec<f64>,
    pub counts: Vec<f64>,
    pub categorical: Vec<f64>,
}

impl DecoderBank {
    /// Draws one observation per channel from every configured decoder at `z`.
    /// `gaussian_noise = false` returns the Gaussian mean instead of a draw.
    pub fn sample(&self, z: &[f64], rng: &mut impl Rng, gaussian_noise: bool) -> SampledObs {
        let mut out = SampledObs::default();
        if let Some(g) = &self.gaussian {
            let mean = g.mean(z);
            let gamma = g.gamma();
            out.continuous = mean
                .iter()
                .zip(&gamma)
                .map(|(&m, &v)| {
                    if gaussian_noise {
                        let e: f64 = rng.sample(StandardNormal);
                        m + v.sqrt() * e
                    } else {
                        m
                    }
                })
                .collect();
        }
        if let Some(o) = &self.ordinal {
            for i in 0..o.n_vars() {
                let probs = ordinal_probs(z, o, i);
                out.ordinal.push(sample_index(&probs, rng) as f64);
            }
        }
        if let Some(c) = &self.count {
            for ch in 0..c.n {
                let rate = c.log_rate(z, ch).min(20.0).exp();
                let draw = match c.family {
                    CountFamily::Poisson => sample_poisson(rate, rng),
                    CountFamily::Zip => {
                        let pi = logistic(c.zero_logit(z, ch));
                        if rng.gen::<f64>() < pi {
                            0.0
                        } else {
                            sample_poisson(rate, rng)
                        }
                    }
                    CountFamily::NegBinomial => {
                        let phi = c.log_phi[ch].exp();
                        // Gamma–Poisson mixture with mean `rate`
                        let gamma = Gamma::new(phi, rate / phi).expect("valid gamma");
                        sample_poisson(gamma.sample(rng), rng)
                    }
                };
                out.counts.push(draw);
            }
        }
        if let Some(cat) = &self.categorical {
            for i in 0..cat.n_vars() {
                let probs = categorical_probs(z, cat, i);
                out.categorical.push(sample_index(&probs, rng) as f64);
            }
        }
        out
    }

    /// Total log-likelihood of one multimodal series under a latent
    /// trajectory `z_seq` (`[T][k]` row-major, `k` matching the decoders).
    pub fn loglik_series(
        &self,
        series: &MultimodalSeries,
        z_seq: &[f64],
        k: usize,
    ) -> Result<f64, ObsError> {
        let t_len = series.t_len;
        let mut ll = 0.0;
        for t in 0..t_len {
            let z = &z_seq[t * k..(t + 1) * k];
            if let Some(g) = &self.gaussian {
                let row = &series.continuous.values[t * g.n..(t + 1) * g.n];
                let mask = &series.continuous.mask[t * g.n..(t + 1) * g.n];
                ll += gaussian_loglik(row, z, g, mask);
            }
            if let Some(o) = &self.ordinal {
                let n = o.n_vars();
                let row = &series.ordinal.values[t * n..(t + 1) * n];
                let mask = &series.ordinal.mask[t * n..(t + 1) * n];
                ll += ordinal_loglik(row, z, o, mask);
            }
            if let Some(c) = &self.count {
                let row = &series.counts.values[t * c.n..(t + 1) * c.n];
                let mask = &series.counts.mask[t * c.n..(t + 1) * c.n];
                ll += count_loglik(row, z, c, mask)?;
            }
            if let Some(cat) = &self.categorical {
                let n = cat.n_vars();
                let row = &series.categorical.values[t * n..(t + 1) * n];
                let mask = &series.categorical.mask[t * n..(t + 1) * n];
                ll += categorical_loglik(row, z, cat, mask);
            }
        }
        Ok(ll)
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_poisson(rate: f64, rng: &mut impl Rng) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(0.0)
}

// ---------------------------------------------------------------------------
// Tape builders

/// Named tape inputs for every decoder parameter, column-shaped for
/// `[k, n]` latent matrices.
pub struct BankNodes {
    pub gaussian: Option<GaussNodes>,
    pub ordinal: Option<OrdNodes>,
    pub count: Option<CountNodes>,
    pub categorical: Option<CatNodes>,
}

pub struct GaussNodes {
    pub loading: NodeId,   // [n, k]
    pub gamma_raw: NodeId, // [n, 1]
    n: usize,
}

pub struct OrdNodes {
    pub betas: NodeId,   // [n_vars, k]
    pub cut_raw: NodeId, // [total_cuts, 1]
    levels: Vec<usize>,
}

pub struct CountNodes {
    pub gamma0: NodeId, // [n, 1]
    pub gammas: NodeId, // [n, k]
    pub zero_beta0: Option<NodeId>,
    pub zero_betas: Option<NodeId>,
    pub log_phi: Option<NodeId>, // [n, 1]
    family: CountFamily,
    n: usize,
}

pub struct CatNodes {
    pub betas: NodeId, // [total_rows, k]
    classes: Vec<usize>,
}

impl BankNodes {
    /// Declares inputs matching `bank`'s shapes under `prefix`.
    pub fn declare(tape: &mut Tape, bank: &DecoderBank, prefix: &str) -> Self {
        let gaussian = bank.gaussian.as_ref().map(|g| GaussNodes {
            loading: tape.input(&format!("{prefix}gauss_loading"), &[g.n, g.k]),
            gamma_raw: tape.input(&format!("{prefix}gauss_gamma_raw"), &[g.n, 1]),
            n: g.n,
        });
        let ordinal = bank.ordinal.as_ref().map(|o| OrdNodes {
            betas: tape.input(&format!("{prefix}ord_betas"), &[o.n_vars(), o.k]),
            cut_raw: tape.input(&format!("{prefix}ord_cut_raw"), &[o.cut_raw.len(), 1]),
            levels: o.levels.clone(),
        });
        let count = bank.count.as_ref().map(|c| CountNodes {
            gamma0: tape.input(&format!("{prefix}count_gamma0"), &[c.n, 1]),
            gammas: tape.input(&format!("{prefix}count_gammas"), &[c.n, c.k]),
            zero_beta0: (c.family == CountFamily::Zip)
                .then(|| tape.input(&format!("{prefix}count_zero_beta0"), &[c.n, 1])),
            zero_betas: (c.family == CountFamily::Zip)
                .then(|| tape.input(&format!("{prefix}count_zero_betas"), &[c.n, c.k])),
            log_phi: (c.family == CountFamily::NegBinomial)
                .then(|| tape.input(&format!("{prefix}count_log_phi"), &[c.n, 1])),
            family: c.family,
            n: c.n,
        });
        let categorical = bank.categorical.as_ref().map(|c| CatNodes {
            betas: tape.input(
                &format!("{prefix}cat_betas"),
                &[c.betas.len() / c.k, c.k],
            ),
            classes: c.classes.clone(),
        });
        Self {
            gaussian,
            ordinal,
            count,
            categorical,
        }
    }

    /// Appends the summed negative log-likelihood of `targets` given a latent
    /// matrix node `z` of shape `[k, n]`. Masked entries contribute zero.
    pub fn nll(
        &self,
        tape: &mut Tape,
        z: NodeId,
        targets: &WindowTargets,
    ) -> Result<NodeId, DiffError> {
        let n = targets.n;
        let mut terms: Vec<NodeId> = Vec::new();
        if let Some(g) = &self.gaussian {
            let x = tape.constant(targets.cont_values.clone().expect("targets match bank"));
            let mask = tape.constant(targets.cont_mask.clone().expect("targets match bank"));
            let mean = tape.matmul(g.loading, z)?; // [n_cont, n]
            let resid = tape.sub(x, mean)?;
            let r2 = tape.mul(resid, resid)?;
            let egr = tape.exp(g.gamma_raw);
            let gamma = tape.add_scalar(egr, VAR_FLOOR); // [n_cont,1]
            let quad = tape.div(r2, gamma)?;
            let ln_gamma_node = tape.ln(gamma);
            let with_ln = tape.add(quad, ln_gamma_node)?;
            let with_const = tape.add_scalar(with_ln, LN_2PI);
            let masked = tape.mul(with_const, mask)?;
            let summed = tape.sum(masked);
            terms.push(tape.mul_scalar(summed, 0.5));
        }
        if let Some(o) = &self.ordinal {
            let u_all = tape.matmul(o.betas, z)?; // [n_vars, n]
            let mut cut_off = 0usize;
            for (var, &l) in o.levels.iter().enumerate() {
                let u = tape.slice(u_all, 0, var, var + 1)?; // [1, n]
                let raw = tape.slice(o.cut_raw, 0, cut_off, cut_off + l - 1)?;
                cut_off += l - 1;
                // strictly increasing cutpoints via softplus increments
                let mut cut_nodes = Vec::with_capacity(l - 1);
                let mut cur = tape.slice(raw, 0, 0, 1)?; // [1,1]
                cut_nodes.push(cur);
                for j in 1..l - 1 {
                    let d_raw = tape.slice(raw, 0, j, j + 1)?;
                    let d = tape.softplus(d_raw);
                    cur = tape.add(cur, d)?;
                    cut_nodes.push(cur);
                }
                let cuts = tape.concat(&cut_nodes, 0)?; // [l-1, 1]
                let arg = tape.sub(cuts, u)?; // [l-1, n]
                let cum = tape.logistic(arg);
                let zeros = tape.constant(Array::zeros(&[1, n]));
                let ones = tape.constant(Array::full(&[1, n], 1.0));
                let full = tape.concat(&[zeros, cum, ones], 0)?; // [l+1, n]
                let hi = tape.slice(full, 0, 1, l + 1)?;
                let lo = tape.slice(full, 0, 0, l)?;
                let pm = tape.sub(hi, lo)?;
                let clamped_lo = tape.max_const(pm, PROB_EPS);
                let clamped = tape.min_const(clamped_lo, 1.0 - PROB_EPS);
                let lp = tape.ln(clamped);
                let onehot = tape.constant(targets.ord_onehot[var].clone());
                let picked = tape.mul(lp, onehot)?;
                let s = tape.sum(picked);
                terms.push(tape.mul_scalar(s, -1.0));
            }
        }
        if let Some(c) = &self.count {
            let cvals = tape.constant(targets.count_values.clone().expect("targets match bank"));
            let mask = tape.constant(targets.count_mask.clone().expect("targets match bank"));
            let lnfact = tape.constant(targets.count_lnfact.clone().expect("targets match bank"));
            let zw = tape.matmul(c.gammas, z)?;
            let log_rate = tape.add(zw, c.gamma0)?; // [n_count, n]
            let ll_entries = match c.family {
                CountFamily::Poisson => {
                    let t1 = tape.mul(cvals, log_rate)?;
                    let lam = tape.exp(log_rate);
                    let t2 = tape.sub(t1, lam)?;
                    tape.sub(t2, lnfact)?
                }
                CountFamily::Zip => {
                    let zb = tape.matmul(c.zero_betas.unwrap(), z)?;
                    let eta = tape.add(zb, c.zero_beta0.unwrap())?;
                    let neg_eta = tape.mul_scalar(eta, -1.0);
                    let sp_neg = tape.softplus(neg_eta);
                    let ln_pi = tape.mul_scalar(sp_neg, -1.0);
                    let sp_pos = tape.softplus(eta);
                    let ln_1m_pi = tape.mul_scalar(sp_pos, -1.0);
                    let lam = tape.exp(log_rate);
                    // zero branch: logsumexp(ln π, ln(1−π) − λ)
                    let b_row = tape.sub(ln_1m_pi, lam)?;
                    let a3 = tape.reshape(ln_pi, &[1, c.n, n])?;
                    let b3 = tape.reshape(b_row, &[1, c.n, n])?;
                    let stacked = tape.concat(&[a3, b3], 0)?;
                    let lse = tape.log_sum_exp(stacked, 0)?;
                    let zero_ll = tape.reshape(lse, &[c.n, n])?;
                    // positive branch: ln(1−π) + Poisson
                    let t1 = tape.mul(cvals, log_rate)?;
                    let t2 = tape.sub(t1, lam)?;
                    let t3 = tape.sub(t2, lnfact)?;
                    let pos_ll = tape.add(t3, ln_1m_pi)?;
                    let zmask = tape.constant(targets.count_zero_mask.clone().unwrap());
                    let pmask = tape.constant(targets.count_pos_mask.clone().unwrap());
                    let za = tape.mul(zero_ll, zmask)?;
                    let pa = tape.mul(pos_ll, pmask)?;
                    tape.add(za, pa)?
                }
                CountFamily::NegBinomial => {
                    let phi = tape.exp(c.log_phi.unwrap()); // [n_count, 1]
                    let mu = tape.exp(log_rate);
                    let mu_phi = tape.add(mu, phi)?;
                    let ln_mu_phi = tape.ln(mu_phi);
                    let c_phi = tape.add(cvals, phi)?;
                    let lg_c_phi = tape.ln_gamma(c_phi);
                    let lg_phi = tape.ln_gamma(phi);
                    let ln_phi = tape.ln(phi);
                    let d1 = tape.sub(lg_c_phi, lg_phi)?;
                    let d2 = tape.sub(d1, lnfact)?;
                    let r1 = tape.sub(ln_phi, ln_mu_phi)?;
                    let t1 = tape.mul(phi, r1)?;
                    let r2 = tape.sub(log_rate, ln_mu_phi)?;
                    let t2 = tape.mul(cvals, r2)?;
                    let s1 = tape.add(d2, t1)?;
                    tape.add(s1, t2)?
                }
            };
            let masked = tape.mul(ll_entries, mask)?;
            let s = tape.sum(masked);
            terms.push(tape.mul_scalar(s, -1.0));
        }
        if let Some(cat) = &self.categorical {
            let logits_all = tape.matmul(cat.betas, z)?; // [total_rows, n]
            let mut row_off = 0usize;
            for (var, &kc) in cat.classes.iter().enumerate() {
                let logits = tape.slice(logits_all, 0, row_off, row_off + kc - 1)?;
                row_off += kc - 1;
                let zeros = tape.constant(Array::zeros(&[1, n]));
                let full = tape.concat(&[logits, zeros], 0)?; // [kc, n]
                let log_z = tape.log_sum_exp(full, 0)?; // [1, n]
                let log_probs = tape.sub(full, log_z)?;
                let onehot = tape.constant(targets.cat_onehot[var].clone());
                let picked = tape.mul(log_probs, onehot)?;
                let s = tape.sum(picked);
                terms.push(tape.mul_scalar(s, -1.0));
            }
        }
        let mut total = terms
            .first()
            .copied()
            .unwrap_or_else(|| tape.constant(Array::scalar(0.0)));
        for &t in terms.iter().skip(1) {
            total = tape.add(total, t)?;
        }
        Ok(total)
    }
}

/// Bindings for [`BankNodes::declare`] inputs.
pub fn bind_bank(
    bank: &DecoderBank,
    prefix: &str,
    binds: &mut std::collections::HashMap<String, Array>,
) {
    if let Some(g) = &bank.gaussian {
        binds.insert(
            format!("{prefix}gauss_loading"),
            Array::new(vec![g.n, g.k], g.loading.clone()).unwrap(),
        );
        binds.insert(
            format!("{prefix}gauss_gamma_raw"),
            Array::new(vec![g.n, 1], g.gamma_raw.clone()).unwrap(),
        );
    }
    if let Some(o) = &bank.ordinal {
        binds.insert(
            format!("{prefix}ord_betas"),
            Array::new(vec![o.n_vars(), o.k], o.betas.clone()).unwrap(),
        );
        binds.insert(
            format!("{prefix}ord_cut_raw"),
            Array::new(vec![o.cut_raw.len(), 1], o.cut_raw.clone()).unwrap(),
        );
    }
    if let Some(c) = &bank.count {
        binds.insert(
            format!("{prefix}count_gamma0"),
            Array::new(vec![c.n, 1], c.gamma0.clone()).unwrap(),
        );
        binds.insert(
            format!("{prefix}count_gammas"),
            Array::new(vec![c.n, c.k], c.gammas.clone()).unwrap(),
        );
        if c.family == CountFamily::Zip {
            binds.insert(
                format!("{prefix}count_zero_beta0"),
                Array::new(vec![c.n, 1], c.zero_beta0.clone()).unwrap(),
            );
            binds.insert(
                format!("{prefix}count_zero_betas"),
                Array::new(vec![c.n, c.k], c.zero_betas.clone()).unwrap(),
            );
        }
        if c.family == CountFamily::NegBinomial {
            binds.insert(
                format!("{prefix}count_log_phi"),
                Array::new(vec![c.n, 1], c.log_phi.clone()).unwrap(),
            );
        }
    }
    if let Some(cat) = &bank.categorical {
        binds.insert(
            format!("{prefix}cat_betas"),
            Array::new(vec![cat.betas.len() / cat.k, cat.k], cat.betas.clone()).unwrap(),
        );
    }
}

/// Constant target arrays for one batch of windows, columns ordered
/// `window-major` (`col = w · T + t`) to match latent matrices.
#[derive(Clone, Debug)]
pub struct WindowTargets {
    pub n: usize,
    pub cont_values: Option<Array>,
    pub cont_mask: Option<Array>,
    /// Per ordinal variable: `[L_i, n]` one-hot with the mask folded in.
    pub ord_onehot: Vec<Array>,
    pub count_values: Option<Array>,
    pub count_mask: Option<Array>,
    pub count_lnfact: Option<Array>,
    pub count_zero_mask: Option<Array>,
    pub count_pos_mask: Option<Array>,
    /// Per categorical variable: `[K_i, n]` one-hot with the mask folded in.
    pub cat_onehot: Vec<Array>,
}

impl WindowTargets {
    pub fn from_windows(windows: &[MultimodalSeries]) -> Result<Self, ObsError> {
        let t_len = windows.first().map(|w| w.t_len).unwrap_or(0);
        let n = windows.len() * t_len;
        let layout = windows[0].layout.clone();
        let col = |w: usize, t: usize| w * t_len + t;

        let (cont_values, cont_mask) = if layout.n_cont > 0 {
            let nc = layout.n_cont;
            let mut vals = vec![0.0; nc * n];
            let mut mask = vec![0.0; nc * n];
            for (w, win) in windows.iter().enumerate() {
                for t in 0..t_len {
                    for c in 0..nc {
                        let j = c * n + col(w, t);
                        vals[j] = win.continuous.at(t, c);
                        mask[j] = win.continuous.observed(t, c) as u8 as f64;
                    }
                }
            }
            (
                Some(Array::new(vec![nc, n], vals).unwrap()),
                Some(Array::new(vec![nc, n], mask).unwrap()),
            )
        } else {
            (None, None)
        };

        let mut ord_onehot = Vec::new();
        for (var, &l) in layout.ord_levels.iter().enumerate() {
            let mut oh = vec![0.0; l * n];
            for (w, win) in windows.iter().enumerate() {
                for t in 0..t_len {
                    if win.ordinal.observed(t, var) {
                        let level = (win.ordinal.at(t, var).round() as usize).min(l - 1);
                        oh[level * n + col(w, t)] = 1.0;
                    }
                }
            }
            ord_onehot.push(Array::new(vec![l, n], oh).unwrap());
        }

        let (mut count_values, mut count_mask, mut count_lnfact) = (None, None, None);
        let (mut count_zero_mask, mut count_pos_mask) = (None, None);
        if layout.n_count > 0 {
            let nc = layout.n_count;
            let mut vals = vec![0.0; nc * n];
            let mut mask = vec![0.0; nc * n];
            let mut lf = vec![0.0; nc * n];
            let mut zm = vec![0.0; nc * n];
            let mut pm = vec![0.0; nc * n];
            for (w, win) in windows.iter().enumerate() {
                for t in 0..t_len {
                    for c in 0..nc {
                        let v = win.counts.at(t, c);
                        if v < 0.0 {
                            return Err(ObsError::NegativeCount(v, t * nc + c));
                        }
                        let j = c * n + col(w, t);
                        let obs = win.counts.observed(t, c);
                        vals[j] = v;
                        mask[j] = obs as u8 as f64;
                        lf[j] = ln_gamma(v + 1.0);
                        if obs {
                            if v == 0.0 {
                                zm[j] = 1.0;
                            } else {
                                pm[j] = 1.0;
                            }
                        }
                    }
                }
            }
            count_values = Some(Array::new(vec![nc, n], vals).unwrap());
            count_mask = Some(Array::new(vec![nc, n], mask).unwrap());
            count_lnfact = Some(Array::new(vec![nc, n], lf).unwrap());
            count_zero_mask = Some(Array::new(vec![nc, n], zm).unwrap());
            count_pos_mask = Some(Array::new(vec![nc, n], pm).unwrap());
        }

        let mut cat_onehot = Vec::new();
        for (var, &kc) in layout.cat_classes.iter().enumerate() {
            let mut oh = vec![0.0; kc * n];
            for (w, win) in windows.iter().enumerate() {
                for t in 0..t_len {
                    if win.categorical.observed(t, var) {
                        let class = (win.categorical.at(t, var).round() as usize).min(kc - 1);
                        oh[class * n + col(w, t)] = 1.0;
                    }
                }
            }
            cat_onehot.push(Array::new(vec![kc, n], oh).unwrap());
        }

        Ok(Self {
            n,
            cont_values,
            cont_mask,
            ord_onehot,
            count_values,
            count_mask,
            count_lnfact,
            count_zero_mask,
            count_pos_mask,
            cat_onehot,
        })
    }
}

#[cfg(test)]
mod tests;
