//! Conditional diffusion over item-embedding sequences: the variance schedule,
//! closed-form forward noising, an x0-predicting MLP denoiser with a learnable
//! null condition, classifier-free guidance, and ancestral sampling.
//!
//! Embedding sequences are handled as flat `[R, d]` row blocks, where `R`
//! counts the real (non-padding) positions of a batch and `row_seq[r]` names
//! the sequence row `r` belongs to. Condition vectors and timesteps are per
//! sequence and are broadcast to that sequence's rows.

use serde::{Deserialize, Serialize};

use crate::encoder::{init_matrix, Linear};
use crate::error::{Error, Result};
use crate::numerics::random::normals;
use crate::numerics::{Bound, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const PARAM_PREFIX: &str = "denoiser.";

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    /// Entry `t - 1` holds the value for step `t`.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
}

/// Linearly spaced betas from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(
            "build_schedule",
            format!("need T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"),
        ));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let ok = !beta.is_empty()
            && beta.iter().all(|b| *b > 0.0 && *b < 1.0)
            && beta.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::invalid("schedule", "betas must be non-decreasing in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid("diffusion", format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `ᾱ_{t-1}` with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    /// `(√ᾱ_t, √(1-ᾱ_t))`.
    pub fn marginal(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let ab = self.alpha_bar[t - 1];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Posterior mean coefficients `(on e_t, on e_0)`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let (a, ab, prev) = (self.alpha[t - 1], self.alpha_bar[t - 1], self.alpha_bar_prev(t));
        Ok((a.sqrt() * (1.0 - prev) / (1.0 - ab), prev.sqrt() * (1.0 - a) / (1.0 - ab)))
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.posterior_var[t - 1].sqrt())
    }
}

/// `e_t = √ᾱ_t·e0 + √(1-ᾱ_t)·ε`.
pub fn forward_sample(e0: &[f64], t: usize, noise: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    if e0.len() != noise.len() {
        return Err(Error::Shape {
            op: "forward_sample",
            lhs: vec![e0.len()],
            rhs: vec![noise.len()],
        });
    }
    let (s, n) = sched.marginal(t)?;
    Ok(e0.iter().zip(noise).map(|(x, e)| s * x + n * e).collect())
}

fn combine(a: &[f64], ca: f64, b: &[f64], cb: f64, op: &'static str) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect())
}

/// Mean of `q(e_{t-1} | e_t, e_0)`.
pub fn posterior_mean(e_t: &[f64], e0: &[f64], t: usize, sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    let (ct, c0) = sched.posterior_coefficients(t)?;
    combine(e_t, ct, e0, c0, "posterior_mean")
}

/// Model mean: the posterior mean with `x0_hat` in place of `e_0`.
pub fn predicted_mean(e_t: &[f64], x0_hat: &[f64], t: usize, sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    let (ct, c0) = sched.posterior_coefficients(t)?;
    combine(e_t, ct, x0_hat, c0, "predicted_mean")
}

/// `(1 + ω)·cond - ω·uncond`.
pub fn guide(cond: &[f64], uncond: &[f64], omega: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| (1.0 + omega) * c - omega * u).collect()
}

/// Ancestral sampling from `start` (the `e_T` draw) down to `e_0`.
/// `predict(e_t, t)` returns the (guided) x0 estimate. With an rng, fresh
/// noise is added at every step except the last; without one all noise is 0.
pub fn sample_with<F>(start: Vec<f64>, sched: &DiffusionSchedule, mut rng: Option<&mut Rng>, mut predict: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut e = start;
    for t in (1..=sched.steps()).rev() {
        let x0 = predict(&e, t)?;
        let mut next = predicted_mean(&e, &x0, t, sched)?;
        if let (true, Some(rng)) = (t > 1, rng.as_deref_mut()) {
            let sigma = sched.sigma(t)?;
            for (v, z) in next.iter_mut().zip(normals(rng, e.len())) {
                *v += sigma * z;
            }
        }
        e = next;
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
    /// Probability of replacing the condition with the null token in training.
    pub uncond_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 2.0,
            uncond_prob: 0.1,
        }
    }
}

/// Sinusoidal encoding of step `t` into `dim` values.
pub fn timestep_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim.div_ceil(2);
    (0..dim)
        .map(|i| {
            let freq = (-(10_000f64.ln()) * (i / 2) as f64 / half as f64).exp();
            let x = t as f64 * freq;
            if i % 2 == 0 {
                x.sin()
            } else {
                x.cos()
            }
        })
        .collect()
}

/// Per-position MLP `f(e_t, s, t)`:
/// `out(gelu(hidden(gelu(e_t·Wx + s·Wc + τ(t)·Wt + b))))`, where `τ(t)` is a
/// linear map of the sinusoidal step encoding.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub dim: usize,
    time_proj: Linear,
    in_x: Linear,
    in_cond: ParamId,
    in_time: ParamId,
    hidden: Linear,
    out: Linear,
    null_cond: ParamId,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("denoiser dimension must be positive".into()));
        }
        let name = |part: &str| format!("{PARAM_PREFIX}{part}");
        Ok(Self {
            dim,
            time_proj: Linear::new(store, &name("time_proj"), dim, dim, rng),
            in_x: Linear::new(store, &name("in_x"), dim, dim, rng),
            in_cond: store.add(name("in_cond.weight"), init_matrix(dim, dim, rng)),
            in_time: store.add(name("in_time.weight"), init_matrix(dim, dim, rng)),
            hidden: Linear::new(store, &name("hidden"), dim, dim, rng),
            out: Linear::new(store, &name("out"), dim, dim, rng),
            null_cond: store.add(name("null_cond"), init_matrix(1, dim, rng)),
        })
    }

    /// The learnable empty condition `ξ`, shape `[1, d]`.
    pub fn null_cond(&self) -> ParamId {
        self.null_cond
    }

    /// Conditions for a batch: row `b` is `cond[b]`, or `ξ` where `uncond[b]`.
    /// `cond` has shape `[B, d]`.
    pub fn conditions(&self, tape: &mut Tape, p: &Bound, cond: Var, uncond: &[bool]) -> Result<Var> {
        let b = uncond.len();
        if tape.shape(cond) != [b, self.dim] {
            return Err(Error::Shape {
                op: "conditions",
                lhs: tape.shape(cond).to_vec(),
                rhs: vec![b, self.dim],
            });
        }
        if !uncond.iter().any(|u| *u) {
            return Ok(cond);
        }
        let table = tape.concat_rows(&[cond, p[self.null_cond]])?;
        let idx: Vec<usize> = uncond.iter().enumerate().map(|(i, &u)| if u { b } else { i }).collect();
        tape.gather_rows(table, &idx, &[b])
    }

    /// `f(e_t, s, t)` for `[R, d]` rows. `cond` is `[B, d]`, `steps[b]` the
    /// step of sequence `b`, and `row_seq[r]` the sequence of row `r`.
    pub fn predict_x0(&self, tape: &mut Tape, p: &Bound, e_t: Var, cond: Var, steps: &[usize], row_seq: &[usize]) -> Result<Var> {
        let d = self.dim;
        let b = steps.len();
        let rows = row_seq.len();
        if tape.shape(e_t) != [rows, d] || tape.shape(cond) != [b, d] {
            return Err(Error::Shape {
                op: "predict_x0",
                lhs: tape.shape(e_t).to_vec(),
                rhs: vec![rows, d],
            });
        }
        if row_seq.iter().any(|&s| s >= b) {
            return Err(Error::invalid("predict_x0", "row refers to a missing sequence"));
        }
        let enc: Vec<f64> = steps.iter().flat_map(|&t| timestep_encoding(t, d)).collect();
        let enc = tape.constant(&[b, d], enc)?;
        let tau = self.time_proj.apply(tape, p, enc)?;
        let tc = tape.matmul(tau, p[self.in_time])?;
        let cc = tape.matmul(cond, p[self.in_cond])?;
        let ctx = tape.add(tc, cc)?;
        let ctx = tape.gather_rows(ctx, row_seq, &[rows])?;
        let x = self.in_x.apply(tape, p, e_t)?;
        let h = tape.add(x, ctx)?;
        let h = tape.gelu(h)?;
        let h = self.hidden.apply(tape, p, h)?;
        let h = tape.gelu(h)?;
        self.out.apply(tape, p, h)
    }

    /// Simplified diffusion objective: noises `e0` (`[R, d]`) to each
    /// sequence's step with the given `noise`, and returns the mean squared
    /// error between `e0` and the denoiser's prediction. Conditions flagged in
    /// `uncond` are replaced by `ξ`.
    #[allow(clippy::too_many_arguments)]
    pub fn diffusion_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        sched: &DiffusionSchedule,
        e0: Var,
        cond: Var,
        uncond: &[bool],
        steps: &[usize],
        row_seq: &[usize],
        noise: &[f64],
    ) -> Result<Var> {
        let rows = row_seq.len();
        let (mut sig, mut nse) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        for &s in row_seq {
            let (a, b) = sched.marginal(*steps.get(s).ok_or_else(|| Error::invalid("diffusion_loss", "row refers to a missing sequence"))?)?;
            sig.push(a);
            nse.push(b);
        }
        let eps = tape.constant(&[rows, self.dim], noise.to_vec())?;
        let signal = tape.scale_rows(e0, &sig)?;
        let noisy = tape.scale_rows(eps, &nse)?;
        let e_t = tape.add(signal, noisy)?;
        let cond = self.conditions(tape, p, cond, uncond)?;
        let x0 = self.predict_x0(tape, p, e_t, cond, steps, row_seq)?;
        tape.mse(e0, x0)
    }

    /// Eval-mode prediction on plain values, `cond[b]` of `None` meaning `ξ`.
    pub fn predict_values(&self, store: &ParamStore, e_t: &[f64], cond: &[Option<&[f64]>], steps: &[usize], row_seq: &[usize]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut tape = Tape::new();
        let p = store.bind_where(&mut tape, false, |n| n.starts_with(PARAM_PREFIX));
        let uncond: Vec<bool> = cond.iter().map(Option::is_none).collect();
        let mut flat = Vec::with_capacity(cond.len() * d);
        for c in cond {
            match c {
                Some(v) if v.len() == d => flat.extend_from_slice(v),
                Some(v) => {
                    return Err(Error::Shape {
                        op: "predict_values",
                        lhs: vec![v.len()],
                        rhs: vec![d],
                    })
                }
                None => flat.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        let cv = tape.constant(&[cond.len(), d], flat)?;
        let cv = self.conditions(&mut tape, &p, cv, &uncond)?;
        let ev = tape.constant(&[row_seq.len(), d], e_t.to_vec())?;
        let out = self.predict_x0(&mut tape, &p, ev, cv, steps, row_seq)?;
        Ok(tape.value(out).to_vec())
    }

    /// Guided estimate `(1 + ω)·f(e_t, s, t) - ω·f(e_t, ξ, t)`.
    pub fn guided_values(&self, store: &ParamStore, e_t: &[f64], cond: &[&[f64]], steps: &[usize], row_seq: &[usize], omega: f64) -> Result<Vec<f64>> {
        let some: Vec<Option<&[f64]>> = cond.iter().map(|c| Some(*c)).collect();
        let c = self.predict_values(store, e_t, &some, steps, row_seq)?;
        if omega == 0.0 {
            return Ok(c);
        }
        let none = vec![None; cond.len()];
        let u = self.predict_values(store, e_t, &none, steps, row_seq)?;
        Ok(guide(&c, &u, omega))
    }

    /// Runs all `T` reverse steps for a block of rows, every sequence at the
    /// same step, and returns the sampled `ê_0` rows.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_rows(
        &self,
        store: &ParamStore,
        sched: &DiffusionSchedule,
        start: Vec<f64>,
        cond: &[&[f64]],
        row_seq: &[usize],
        omega: f64,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if start.len() != row_seq.len() * self.dim {
            return Err(Error::Shape {
                op: "sample_rows",
                lhs: vec![start.len()],
                rhs: vec![row_seq.len(), self.dim],
            });
        }
        sample_with(start, sched, Some(rng), |e, t| {
            let steps = vec![t; cond.len()];
            self.guided_values(store, e, cond, &steps, row_seq, omega)
        })
    }

    /// One sequence: `start` is an `[n, d]` draw of `e_T`, `cond` its guidance
    /// signal.
    pub fn sample_view(&self, store: &ParamStore, sched: &DiffusionSchedule, start: &Tensor, cond: &[f64], omega: f64, rng: &mut Rng) -> Result<Tensor> {
        let rows = start.len() / self.dim.max(1);
        let out = self.sample_rows(store, sched, start.values().to_vec(), &[cond], &vec![0; rows], omega, rng)?;
        Tensor::new(start.shape().to_vec(), out)
    }
}
