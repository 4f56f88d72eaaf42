//! Piecewise-linear recurrent latent dynamics.
//!
//! The latent state evolves as
//! `z_t = A z_{t-1} + W Σ_b α_b max(0, z_{t-1} − h_b) + h + U s_t`,
//! with diagonal `A`, off-diagonal `W`, and a spline basis of `B` shifted
//! rectifications. The process-noise covariance `Σ` (diagonal) is carried as
//! a parameter but is not sampled during generation or training; it enters
//! the consistency loss only. Noise-driven sampling is available separately.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diff::{DiffError, NodeId, Tape};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("non-finite state at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// All latent-dynamics parameters. `w` and `thresholds` are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DendPlrnnParams {
    pub m: usize,
    pub b_bases: usize,
    /// Diagonal of `A`, length `m`.
    pub a_diag: Vec<f64>,
    /// `m × m`, zero diagonal.
    pub w: Vec<f64>,
    /// Basis slopes, length `b_bases`.
    pub alphas: Vec<f64>,
    /// Basis thresholds, `b_bases × m`.
    pub thresholds: Vec<f64>,
    /// Bias `h`, length `m`.
    pub bias: Vec<f64>,
    /// Input weights `U`, `m × p`.
    pub input_weights: Vec<f64>,
    pub n_inputs: usize,
    /// Diagonal process-noise variances, length `m`, entries > 0.
    pub sigma: Vec<f64>,
}

impl DendPlrnnParams {
    pub fn zeros(m: usize, b_bases: usize, n_inputs: usize) -> Self {
        Self {
            m,
            b_bases,
            a_diag: vec![0.0; m],
            w: vec![0.0; m * m],
            alphas: vec![0.0; b_bases],
            thresholds: vec![0.0; b_bases * m],
            bias: vec![0.0; m],
            input_weights: vec![0.0; m * n_inputs],
            n_inputs,
            sigma: vec![1.0; m],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.a_diag.len() == self.m
            && self.w.len() == self.m * self.m
            && self.alphas.len() == self.b_bases
            && self.thresholds.len() == self.b_bases * self.m
            && self.bias.len() == self.m
            && self.input_weights.len() == self.m * self.n_inputs
            && self.sigma.len() == self.m;
        if !ok {
            return Err(ModelError::Dim("parameter block sizes".into()));
        }
        if self.b_bases == 0 {
            return Err(ModelError::Dim("b_bases must be >= 1".into()));
        }
        for i in 0..self.m {
            if self.w[i * self.m + i] != 0.0 {
                return Err(ModelError::Dim(format!("w[{i},{i}] must be 0")));
            }
        }
        if self.sigma.iter().any(|&s| s <= 0.0) {
            return Err(ModelError::Dim("sigma entries must be > 0".into()));
        }
        Ok(())
    }

    /// Hard-zeros the diagonal of `w` (applied after each optimizer step).
    pub fn zero_w_diagonal(&mut self) {
        for i in 0..self.m {
            self.w[i * self.m + i] = 0.0;
        }
    }

    /// Basis expansion `φ(z) = Σ_b α_b max(0, z − h_b)`.
    pub fn basis(&self, z: &[f64]) -> Vec<f64> {
        let mut phi = vec![0.0; self.m];
        for b in 0..self.b_bases {
            let alpha = self.alphas[b];
            let row = &self.thresholds[b * self.m..(b + 1) * self.m];
            for i in 0..self.m {
                let v = z[i] - row[i];
                if v > 0.0 {
                    phi[i] += alpha * v;
                }
            }
        }
        phi
    }
}

/// Sparse-forcing schedule: replace the first `k` latent states at times
/// `{lτ + 1 : l ∈ ℕ₀}` (1-based step indices).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForcingPlan {
    pub tau: usize,
    pub k: usize,
}

impl ForcingPlan {
    pub fn new(tau: usize, k: usize) -> Self {
        assert!(tau >= 1, "forcing interval must be >= 1");
        Self { tau, k }
    }

    /// Whether the 1-based time index `t` is a forcing time.
    pub fn is_forcing_time(&self, t: usize) -> bool {
        t >= 1 && (t - 1) % self.tau == 0
    }

    /// All forcing times within `1..=t_len`.
    pub fn forcing_times(&self, t_len: usize) -> Vec<usize> {
        (1..=t_len).filter(|&t| self.is_forcing_time(t)).collect()
    }
}

/// One deterministic step of the latent mean dynamics.
pub fn latent_step(
    z_prev: &[f64],
    s_t: Option<&[f64]>,
    params: &DendPlrnnParams,
) -> Result<Vec<f64>, ModelError> {
    let m = params.m;
    if z_prev.len() != m {
        return Err(ModelError::Dim(format!(
            "state length {} != m {}",
            z_prev.len(),
            m
        )));
    }
    let phi = params.basis(z_prev);
    let mut z = vec![0.0; m];
    for i in 0..m {
        let mut acc = params.a_diag[i] * z_prev[i] + params.bias[i];
        let wrow = &params.w[i * m..(i + 1) * m];
        for j in 0..m {
            acc += wrow[j] * phi[j];
        }
        z[i] = acc;
    }
    if let Some(s) = s_t {
        if s.len() != params.n_inputs {
            return Err(ModelError::Dim(format!(
                "input length {} != p {}",
                s.len(),
                params.n_inputs
            )));
        }
        for i in 0..m {
            let urow = &params.input_weights[i * params.n_inputs..(i + 1) * params.n_inputs];
            for (x, u) in s.iter().zip(urow) {
                z[i] += u * x;
            }
        }
    }
    Ok(z)
}

/// Replaces the first `k` entries of `z` by `z_tilde` when `t` (1-based) is a
/// forcing time; otherwise returns `z` unchanged.
pub fn apply_forcing(
    z: &[f64],
    z_tilde: &[f64],
    plan: &ForcingPlan,
    t: usize,
) -> Result<Vec<f64>, ModelError> {
    if plan.k > z.len() {
        return Err(ModelError::Dim(format!(
            "forcing k {} > state dimension {}",
            plan.k,
            z.len()
        )));
    }
    if z_tilde.len() != plan.k {
        return Err(ModelError::Dim(format!(
            "forcing signal length {} != k {}",
            z_tilde.len(),
            plan.k
        )));
    }
    let mut out = z.to_vec();
    if plan.is_forcing_time(t) {
        out[..plan.k].copy_from_slice(z_tilde);
    }
    Ok(out)
}

/// Teacher-forcing source: per-time-step control states of width `k`,
/// covering at least every forcing time of the generated span.
pub struct ForcingSignal<'a> {
    pub plan: ForcingPlan,
    /// Row-major `[T][k]` control values (encoder means during evaluation).
    pub values: &'a [f64],
}

/// Iterates the latent dynamics for `t_len` steps starting from `z1`
/// (inclusive), recording the pre-forcing state at each step. When a forcing
/// signal is supplied, forcing is applied before propagating to the next
/// step. Returns a row-major `[t_len][m]` trajectory.
pub fn generate(
    z1: &[f64],
    t_len: usize,
    inputs: Option<&[f64]>,
    params: &DendPlrnnParams,
    forcing: Option<&ForcingSignal>,
) -> Result<Vec<f64>, ModelError> {
    let m = params.m;
    if t_len == 0 {
        return Err(ModelError::Dim("t_len must be >= 1".into()));
    }
    if let Some(s) = inputs {
        if s.len() != t_len * params.n_inputs {
            return Err(ModelError::Dim("inputs length != t_len * p".into()));
        }
    }
    if let Some(f) = forcing {
        if f.values.len() < t_len * f.plan.k {
            return Err(ModelError::Dim(
                "forcing values do not cover the generated span".into(),
            ));
        }
    }
    let mut out = Vec::with_capacity(t_len * m);
    out.extend_from_slice(z1);
    let mut cur = z1.to_vec();
    for t in 1..=t_len {
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Diverged { step: t });
        }
        if t == t_len {
            break;
        }
        if let Some(f) = forcing {
            let k = f.plan.k;
            cur = apply_forcing(&cur, &f.values[(t - 1) * k..t * k], &f.plan, t)?;
        }
        let s_t = inputs.map(|s| &s[t * params.n_inputs..(t + 1) * params.n_inputs]);
        cur = latent_step(&cur, s_t, params)?;
        out.extend_from_slice(&cur);
    }
    Ok(out)
}

/// As [`generate`], adding `N(0, Σ)` process noise at every step.
pub fn generate_noisy(
    z1: &[f64],
    t_len: usize,
    inputs: Option<&[f64]>,
    params: &DendPlrnnParams,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, ModelError> {
    let m = params.m;
    let mut out = Vec::with_capacity(t_len * m);
    out.extend_from_slice(z1);
    let mut cur = z1.to_vec();
    for t in 1..t_len {
        let s_t = inputs.map(|s| &s[t * params.n_inputs..(t + 1) * params.n_inputs]);
        cur = latent_step(&cur, s_t, params)?;
        for (i, z) in cur.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *z += params.sigma[i].sqrt() * e;
        }
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Diverged { step: t });
        }
        out.extend_from_slice(&cur);
    }
    Ok(out)
}

/// Jacobian of `latent_step` at `z`:
/// `A + W Σ_b α_b diag(1[z − h_b > 0])`, row-major `m × m`.
/// The indicator is 0 at the kink, matching the gradient convention.
pub fn jacobian(z: &[f64], params: &DendPlrnnParams) -> Vec<f64> {
    let m = params.m;
    let mut gate = vec![0.0; m];
    for b in 0..params.b_bases {
        let alpha = params.alphas[b];
        let row = &params.thresholds[b * m..(b + 1) * m];
        for j in 0..m {
            if z[j] - row[j] > 0.0 {
                gate[j] += alpha;
            }
        }
    }
    let mut jac = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            jac[i * m + j] = params.w[i * m + j] * gate[j];
        }
        jac[i * m + i] += params.a_diag[i];
    }
    jac
}

/// Tape node ids for the latent-dynamics parameters, shaped for batched
/// column-state rollouts (`z: [m, batch]`).
pub struct StepNodes {
    pub a_col: NodeId,      // [m, 1]
    pub w: NodeId,          // [m, m]
    pub alphas: NodeId,     // [b, 1, 1]
    pub thresholds: NodeId, // [b, m, 1]
    pub bias: NodeId,       // [m, 1]
    pub m: usize,
    pub b_bases: usize,
}

impl StepNodes {
    /// Declares the latent parameters as named tape inputs. The raw parameter
    /// arrays bound to these names use the same layouts as
    /// [`DendPlrnnParams`] (reshaped to the column forms above).
    pub fn declare(tape: &mut Tape, m: usize, b_bases: usize, prefix: &str) -> Self {
        Self {
            a_col: tape.input(&format!("{prefix}a_diag"), &[m, 1]),
            w: tape.input(&format!("{prefix}w"), &[m, m]),
            alphas: tape.input(&format!("{prefix}alphas"), &[b_bases, 1, 1]),
            thresholds: tape.input(&format!("{prefix}thresholds"), &[b_bases, m, 1]),
            bias: tape.input(&format!("{prefix}bias"), &[m, 1]),
            m,
            b_bases,
        }
    }

    /// Appends one latent step for a `[m, batch]` state node, optionally with
    /// an external-input contribution node (already `U s_t`, `[m, batch]` or
    /// `[m, 1]`).
    pub fn step(
        &self,
        tape: &mut Tape,
        z_prev: NodeId,
        drive: Option<NodeId>,
    ) -> Result<NodeId, DiffError> {
        let batch = tape.node_shape(z_prev)[1];
        let z3 = tape.reshape(z_prev, &[1, self.m, batch])?;
        let shifted = tape.sub(z3, self.thresholds)?; // [b, m, batch]
        let act = tape.max_const(shifted, 0.0);
        let weighted = tape.mul(act, self.alphas)?;
        let phi = tape.sum_axis(weighted, 0)?; // [m, batch]
        let rec = tape.matmul(self.w, phi)?;
        let lin = tape.mul(self.a_col, z_prev)?;
        let t1 = tape.add(lin, rec)?;
        let mut z = tape.add(t1, self.bias)?;
        if let Some(d) = drive {
            z = tape.add(z, d)?;
        }
        Ok(z)
    }
}

/// Bindings for [`StepNodes::declare`] inputs plus a `z` column state, in the
/// shapes the batched rollout expects.
pub fn bind_step_params(
    params: &DendPlrnnParams,
    z: &[f64],
    prefix: &str,
) -> std::collections::HashMap<String, crate::diff::Array> {
    use crate::diff::Array;
    let m = params.m;
    let b = params.b_bases;
    let mut binds = std::collections::HashMap::new();
    binds.insert(
        format!("{prefix}a_diag"),
        Array::new(vec![m, 1], params.a_diag.clone()).unwrap(),
    );
    binds.insert(
        format!("{prefix}w"),
        Array::new(vec![m, m], params.w.clone()).unwrap(),
    );
    binds.insert(
        format!("{prefix}alphas"),
        Array::new(vec![b, 1, 1], params.alphas.clone()).unwrap(),
    );
    binds.insert(
        format!("{prefix}thresholds"),
        Array::new(vec![b, m, 1], params.thresholds.clone()).unwrap(),
    );
    binds.insert(
        format!("{prefix}bias"),
        Array::new(vec![m, 1], params.bias.clone()).unwrap(),
    );
    binds.insert(
        "z".to_string(),
        Array::new(vec![z.len(), 1], z.to_vec()).unwrap(),
    );
    binds
}
