//! Diagonal Gaussian mixture numerics.
//!
//! Plain-value routines (`gmm_log_pdf`, `gmm_sample`, `mc_kl`) serve
//! evaluation and oracles; [`GmmVars`] exposes the same quantities on a
//! [`Tape`] for training. Both routes share [`mixture_log_prob_row`], so a
//! head compared against an identical copy of itself yields exactly zero
//! per-sample log-ratios.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Lower clamp for component log-scales, `ln 1e-4`.
pub const LOG_SCALE_MIN: f64 = -9.210_340_371_976_182;
/// Upper clamp for component log-scales, `ln 10`.
pub const LOG_SCALE_MAX: f64 = std::f64::consts::LN_10;

/// Output of the policy head for a single state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub logits: Vec<f64>,
    /// Row-major `[C, A]`.
    pub means: Vec<f64>,
    /// Row-major `[C, A]`, clamped to `[LOG_SCALE_MIN, LOG_SCALE_MAX]`.
    pub log_scales: Vec<f64>,
    pub action_dim: usize,
}

impl GmmParams {
    pub fn new(
        logits: Vec<f64>,
        means: Vec<f64>,
        log_scales: Vec<f64>,
        action_dim: usize,
    ) -> Result<Self> {
        let c = logits.len();
        if c == 0 || action_dim == 0 {
            return Err(shape_err("gmm", "need at least one component and one action dim"));
        }
        if means.len() != c * action_dim || log_scales.len() != c * action_dim {
            return Err(shape_err(
                "gmm",
                format!(
                    "{c} components x {action_dim} dims vs means {} / log_scales {}",
                    means.len(),
                    log_scales.len()
                ),
            ));
        }
        let log_scales = log_scales
            .into_iter()
            .map(|v| v.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX))
            .collect();
        Ok(Self {
            logits,
            means,
            log_scales,
            action_dim,
        })
    }

    /// A single diagonal Gaussian.
    pub fn gaussian(mean: &[f64], scale: &[f64]) -> Result<Self> {
        Self::new(
            vec![0.0],
            mean.to_vec(),
            scale.iter().map(|s| s.ln()).collect(),
            mean.len(),
        )
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.components()];
        log_softmax_into(&self.logits, &mut w);
        w.iter_mut().for_each(|v| *v = v.exp());
        w
    }

    pub fn component_mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.action_dim..(c + 1) * self.action_dim]
    }

    /// Index of the highest-weight component (lowest index on ties).
    pub fn dominant_component(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Mean of the dominant component; the deterministic evaluation action.
    pub fn mode_action(&self) -> Vec<f64> {
        self.component_mean(self.dominant_component()).to_vec()
    }
}

/// A diagonal Gaussian with explicit scales.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(shape_err("gaussian", "mean and scale lengths differ"));
        }
        let scale = scale.into_iter().map(|s| s.max(1e-4)).collect();
        Ok(Self { mean, scale })
    }
}

/// Monte-Carlo KL estimate with its per-sample terms.
#[derive(Clone, Debug, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub terms: Vec<f64>,
}

impl KlEstimate {
    pub fn std_error(&self) -> f64 {
        let n = self.terms.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let var = self.terms.iter().map(|t| (t - self.value).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

/// `log Σ_c w_c N(x; mu_c, diag σ_c²)` given log-weights.
///
/// `comp` receives the per-component joint log-densities.
pub(crate) fn mixture_log_prob_row(
    log_w: &[f64],
    means: &[f64],
    log_scales: &[f64],
    x: &[f64],
    comp: &mut [f64],
) -> f64 {
    let a = x.len();
    let mut best = f64::NEG_INFINITY;
    for (c, slot) in comp.iter_mut().enumerate() {
        let mut lp = log_w[c];
        for d in 0..a {
            let ls = log_scales[c * a + d];
            let z = (x[d] - means[c * a + d]) * (-ls).exp();
            lp -= 0.5 * z * z + ls + HALF_LN_2PI;
        }
        *slot = lp;
        best = best.max(lp);
    }
    if best == f64::NEG_INFINITY {
        return best;
    }
    best + comp.iter().map(|v| (v - best).exp()).sum::<f64>().ln()
}

pub fn gmm_log_pdf(p: &GmmParams, a: &[f64]) -> Result<f64> {
    if a.len() != p.action_dim {
        return Err(shape_err(
            "gmm_log_pdf",
            format!("action has {} dims, head has {}", a.len(), p.action_dim),
        ));
    }
    let mut log_w = vec![0.0; p.components()];
    log_softmax_into(&p.logits, &mut log_w);
    let mut comp = vec![0.0; p.components()];
    Ok(mixture_log_prob_row(&log_w, &p.means, &p.log_scales, a, &mut comp))
}

/// Component draws and standard-normal noise for `n` mixture samples.
///
/// Freezing this makes a sampled objective a deterministic function of the
/// head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleNoise {
    pub comp: Vec<usize>,
    pub eps: Vec<f64>,
}

fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

pub fn draw_noise<R: rand::Rng + ?Sized>(p: &GmmParams, n: usize, rng: &mut R) -> SampleNoise {
    let w = p.weights();
    let mut comp = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n * p.action_dim);
    for _ in 0..n {
        comp.push(categorical(&w, rng.random::<f64>()));
        for _ in 0..p.action_dim {
            eps.push(StandardNormal.sample(rng));
        }
    }
    SampleNoise { comp, eps }
}

/// Applies frozen noise: `mu_c + σ_c ⊙ eps`.
pub fn apply_noise(p: &GmmParams, noise: &SampleNoise) -> Vec<Vec<f64>> {
    let a = p.action_dim;
    noise
        .comp
        .iter()
        .enumerate()
        .map(|(s, &c)| {
            (0..a)
                .map(|d| {
                    let k = c * a + d;
                    p.means[k] + p.log_scales[k].exp() * noise.eps[s * a + d]
                })
                .collect()
        })
        .collect()
}

pub fn gmm_sample<R: rand::Rng + ?Sized>(p: &GmmParams, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let noise = draw_noise(p, n, rng);
    apply_noise(p, &noise)
}

/// `Σ_d [ln(σq/σp) + (σp² + (μp − μq)²)/(2σq²) − ½]`.
pub fn gaussian_kl_closed_form(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64> {
    if p.mean.len() != q.mean.len() {
        return Err(shape_err("gaussian_kl", "dimension mismatch"));
    }
    Ok((0..p.mean.len())
        .map(|d| {
            let (sp, sq) = (p.scale[d], q.scale[d]);
            let dm = p.mean[d] - q.mean[d];
            (sq / sp).ln() + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5
        })
        .sum())
}

/// Monte-Carlo estimate of `KL(p_k ‖ p_prev)` with samples from `p_k`.
pub fn mc_kl<R: rand::Rng + ?Sized>(
    p_k: &GmmParams,
    p_prev: &GmmParams,
    n: usize,
    rng: &mut R,
) -> Result<KlEstimate> {
    if p_k.action_dim != p_prev.action_dim {
        return Err(shape_err(
            "mc_kl",
            format!("action dims {} vs {}", p_k.action_dim, p_prev.action_dim),
        ));
    }
    if n == 0 {
        return Err(shape_err("mc_kl", "need at least one sample"));
    }
    let noise = draw_noise(p_k, n, rng);
    mc_kl_with_noise(p_k, p_prev, &noise)
}

pub fn mc_kl_with_noise(p_k: &GmmParams, p_prev: &GmmParams, noise: &SampleNoise) -> Result<KlEstimate> {
    let samples = apply_noise(p_k, noise);
    let mut terms = Vec::with_capacity(samples.len());
    for a in &samples {
        terms.push(gmm_log_pdf(p_k, a)? - gmm_log_pdf(p_prev, a)?);
    }
    let value = terms.iter().sum::<f64>() / terms.len() as f64;
    Ok(KlEstimate {
        value,
        n_samples: terms.len(),
        terms,
    })
}

/// Tape handles of a batched mixture head: `logits [B,C]`,
/// `means`/`log_scales [B,C,A]` (log-scales already clamped).
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    pub logits: Var,
    pub means: Var,
    pub log_scales: Var,
}

impl GmmVars {
    pub fn batch(&self, tape: &Tape) -> usize {
        tape.shape(self.logits)[0]
    }

    pub fn components(&self, tape: &Tape) -> usize {
        tape.shape(self.logits)[1]
    }

    pub fn action_dim(&self, tape: &Tape) -> usize {
        tape.shape(self.means)[2]
    }

    /// Rows `[start, start + len)` of the batch.
    pub fn narrow(&self, tape: &mut Tape, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            logits: tape.narrow(self.logits, 0, start, len)?,
            means: tape.narrow(self.means, 0, start, len)?,
            log_scales: tape.narrow(self.log_scales, 0, start, len)?,
        })
    }

    /// Per-row plain parameters (values only).
    pub fn to_params(&self, tape: &Tape) -> Vec<GmmParams> {
        let (b, c, a) = (self.batch(tape), self.components(tape), self.action_dim(tape));
        let (l, m, s) = (
            tape.value(self.logits).data(),
            tape.value(self.means).data(),
            tape.value(self.log_scales).data(),
        );
        (0..b)
            .map(|i| GmmParams {
                logits: l[i * c..(i + 1) * c].to_vec(),
                means: m[i * c * a..(i + 1) * c * a].to_vec(),
                log_scales: s[i * c * a..(i + 1) * c * a].to_vec(),
                action_dim: a,
            })
            .collect()
    }

    /// Log-density of `actions: [B,S,A]`, output `[B,S]`.
    pub fn log_prob(&self, tape: &mut Tape, actions: Var) -> Result<Var> {
        tape.gmm_log_prob(self.logits, self.means, self.log_scales, actions)
    }

    /// Draws component indices and noise for `n` samples per row.
    pub fn draw_noise<R: rand::Rng + ?Sized>(&self, tape: &Tape, n: usize, rng: &mut R) -> SampleNoise {
        let mut comp = Vec::new();
        let mut eps = Vec::new();
        for p in self.to_params(tape) {
            let SampleNoise { comp: c, eps: e } = draw_noise(&p, n, rng);
            comp.extend(c);
            eps.extend(e);
        }
        SampleNoise { comp, eps }
    }

    /// Reparameterized samples `[B,S,A]`; gradients reach the selected
    /// components' means and scales.
    pub fn sample_pathwise(&self, tape: &mut Tape, noise: &SampleNoise) -> Result<Var> {
        tape.gmm_pathwise(self.means, self.log_scales, noise.comp.clone(), noise.eps.clone())
    }
}
