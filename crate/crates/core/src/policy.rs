//! Multi-modal transformer policy with a Gaussian-mixture head.
//!
//! Each modality has its own MLP encoder to a `latent_dim` token. Tokens of
//! an `L`-step window are ordered by (timestep, [`Modality::ALL`]) and pass
//! through one causal attention block plus a residual feed-forward layer;
//! the final position feeds a linear GMM head.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{attend_last, Activation, AttentionWeights, ParamId, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::gmm::{GmmParams, GmmVars, LOG_SCALE_MAX, LOG_SCALE_MIN};
use crate::seed::rng_from;
use crate::synth::{Modality, MultiModalObs, ACTION_DIM, OBS_DIM};
use crate::tensor::Tensor;

pub const N_MODALITIES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub latent_dim: usize,
    pub context_len: usize,
    pub components: usize,
    pub action_dim: usize,
    /// Width of both hidden layers in every encoder.
    pub hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            context_len: 8,
            components: 5,
            action_dim: ACTION_DIM,
            hidden: 64,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("policy config: {m}")));
        if self.latent_dim == 0 || self.hidden == 0 {
            return bad("latent_dim and hidden must be positive");
        }
        if self.context_len == 0 {
            return bad("context_len must be at least 1");
        }
        if self.components == 0 {
            return bad("components must be at least 1");
        }
        if self.action_dim != ACTION_DIM {
            return bad("action_dim must be 3");
        }
        Ok(())
    }

    /// Maximum number of tokens the attention block accepts.
    pub fn max_tokens(&self) -> usize {
        N_MODALITIES * self.context_len
    }

    pub fn head_width(&self) -> usize {
        self.components * (1 + 2 * self.action_dim)
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (h, d) = (self.hidden, self.latent_dim);
        let mut out = Vec::new();
        for m in Modality::ALL {
            let n = m.name();
            out.push((format!("enc.{n}.w1"), vec![m.dim(), h]));
            out.push((format!("enc.{n}.b1"), vec![h]));
            out.push((format!("enc.{n}.w2"), vec![h, h]));
            out.push((format!("enc.{n}.b2"), vec![h]));
            out.push((format!("enc.{n}.w3"), vec![h, d]));
            out.push((format!("enc.{n}.b3"), vec![d]));
        }
        out.push(("attn.pos".into(), vec![self.max_tokens(), d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("attn.{w}"), vec![d, d]));
            if w != "wk" {
                out.push((format!("attn.b{}", &w[1..]), vec![d]));
            }
        }
        out.push(("ffn.w1".into(), vec![d, d]));
        out.push(("ffn.b1".into(), vec![d]));
        out.push(("ffn.w2".into(), vec![d, d]));
        out.push(("ffn.b2".into(), vec![d]));
        out.push(("head.w".into(), vec![d, self.head_width()]));
        out.push(("head.b".into(), vec![self.head_width()]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// All learnable tensors of a policy, in [`PolicyConfig::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

// Indices into the layout.
const ENC_TENSORS: usize = 6;
const ATTN_BASE: usize = N_MODALITIES * ENC_TENSORS;
const FFN_BASE: usize = ATTN_BASE + 8;
const HEAD_BASE: usize = FFN_BASE + 4;

/// Uniform `±1/sqrt(fan_in)` weights and zero biases.
pub fn init_params(config: &PolicyConfig, seed: u64) -> Result<PolicyParams> {
    config.validate()?;
    let mut rng = rng_from(&[seed, 0x9011c7]);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in config.layout() {
        let t = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let fan_in = if name == "attn.pos" { shape[1] } else { shape[0] };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())?
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(PolicyParams {
        config: config.clone(),
        names,
        tensors,
    })
}

impl PolicyParams {
    /// Checks tensor names and shapes against the config's layout.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.config.layout();
        if layout.len() != self.tensors.len() || layout.len() != self.names.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {n} {:?} does not match layout entry {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { context: format!("parameter {n}") });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// `B` observation windows of length `L`, flat `[B, L, OBS_DIM]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub batch: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl ObsBatch {
    pub fn new(batch: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || len == 0 {
            return Err(shape_err("obs batch", "batch and window length must be positive"));
        }
        if data.len() != batch * len * OBS_DIM {
            return Err(shape_err(
                "obs batch",
                format!("{} values for [{batch}, {len}, {OBS_DIM}]", data.len()),
            ));
        }
        Ok(Self { batch, len, data })
    }

    /// A single window of exactly `len` steps, left-padded with the first
    /// observation when `history` is shorter.
    pub fn from_history(history: &[MultiModalObs], len: usize) -> Result<Self> {
        let first = history
            .first()
            .ok_or_else(|| shape_err("obs batch", "empty observation history"))?;
        let tail = &history[history.len().saturating_sub(len)..];
        let mut data = Vec::with_capacity(len * OBS_DIM);
        for _ in tail.len()..len {
            data.extend(first.to_flat());
        }
        for o in tail {
            data.extend(o.to_flat());
        }
        Self::new(1, len, data)
    }

    /// Concatenates batches along the batch axis.
    pub fn concat(parts: &[&ObsBatch]) -> Result<Self> {
        let len = parts
            .first()
            .ok_or_else(|| shape_err("obs batch", "nothing to concatenate"))?
            .len;
        if parts.iter().any(|p| p.len != len) {
            return Err(shape_err("obs batch", "window lengths differ"));
        }
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Self::new(parts.iter().map(|p| p.batch).sum(), len, data)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    /// `[B*L, dim]` slice of one modality.
    pub fn modality(&self, m: Modality) -> Tensor {
        let (off, dim) = (m.offset(), m.dim());
        let mut out = Vec::with_capacity(self.rows() * dim);
        for r in 0..self.rows() {
            out.extend_from_slice(&self.data[r * OBS_DIM + off..r * OBS_DIM + off + dim]);
        }
        Tensor::new(vec![self.rows(), dim], out).expect("modality slice shape")
    }
}

/// How parameters enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Registered as `ParamId(i)` for layout index `i`.
    Trainable,
    /// Constants; no gradient flows.
    Frozen,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    /// Per-modality latents `[B*L, D]`, in [`Modality::ALL`] order.
    pub latents: [Var; N_MODALITIES],
    /// Token sequence `[B, 5L, D]` fed to the attention block.
    pub tokens: Var,
    pub context: Var,
    pub head: GmmVars,
}

impl PolicyVars {
    pub fn latent(&self, m: Modality) -> Var {
        self.latents[Modality::ALL.iter().position(|&x| x == m).expect("modality")]
    }
}

fn bind(tape: &mut Tape, params: &PolicyParams, binding: Binding) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| match binding {
            Binding::Trainable => tape.param(ParamId(i), t.clone()),
            Binding::Frozen => tape.constant(t.clone()),
        })
        .collect()
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { context: format!("policy forward ({what})") })
    }
}

/// Per-modality encoders; latents `[B*L, D]` in [`Modality::ALL`] order.
pub fn encode(tape: &mut Tape, p: &[Var], obs: &ObsBatch) -> Result<[Var; N_MODALITIES]> {
    let mut out = Vec::with_capacity(N_MODALITIES);
    for (i, m) in Modality::ALL.iter().enumerate() {
        let w = &p[i * ENC_TENSORS..(i + 1) * ENC_TENSORS];
        let x = tape.constant(obs.modality(*m));
        let h = tape.dense(x, w[0], Some(w[1]), Activation::Tanh)?;
        let h = tape.dense(h, w[2], Some(w[3]), Activation::Tanh)?;
        out.push(tape.dense(h, w[4], Some(w[5]), Activation::Identity)?);
    }
    Ok(out.try_into().expect("five modalities"))
}

/// Interleaves latents into `[B, 5L, D]` tokens ordered by (step, modality).
pub fn tokens_from_latents(
    tape: &mut Tape,
    latents: &[Var; N_MODALITIES],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let d = tape.shape(latents[0])[1];
    let parts = latents
        .iter()
        .map(|&z| tape.reshape(z, &[batch, len, 1, d]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&parts, 2)?;
    tape.reshape(stacked, &[batch, N_MODALITIES * len, d])
}

/// Causal attention to the final token followed by a residual feed-forward
/// layer; returns `[B, D]`.
pub fn temporal_aggregate(tape: &mut Tape, p: &[Var], tokens: Var) -> Result<Var> {
    let a = &p[ATTN_BASE..FFN_BASE];
    let weights = AttentionWeights {
        pos: a[0],
        wq: a[1],
        bq: a[2],
        wk: a[3],
        wv: a[4],
        bv: a[5],
        wo: a[6],
        bo: a[7],
    };
    let x = attend_last(tape, tokens, &weights)?;
    let f = &p[FFN_BASE..HEAD_BASE];
    let h = tape.dense(x, f[0], Some(f[1]), Activation::Tanh)?;
    let h = tape.dense(h, f[2], Some(f[3]), Activation::Identity)?;
    tape.add(x, h)
}

/// Linear head split into logits, means and clamped log-scales.
pub fn gmm_head(tape: &mut Tape, p: &[Var], context: Var, config: &PolicyConfig) -> Result<GmmVars> {
    let (c, a) = (config.components, config.action_dim);
    let b = tape.shape(context)[0];
    let raw = tape.dense(context, p[HEAD_BASE], Some(p[HEAD_BASE + 1]), Activation::Identity)?;
    let logits = tape.narrow(raw, 1, 0, c)?;
    let means = tape.narrow(raw, 1, c, c * a)?;
    let means = tape.reshape(means, &[b, c, a])?;
    let ls = tape.narrow(raw, 1, c + c * a, c * a)?;
    let ls = tape.clamp(ls, LOG_SCALE_MIN, LOG_SCALE_MAX);
    let log_scales = tape.reshape(ls, &[b, c, a])?;
    Ok(GmmVars {
        logits,
        means,
        log_scales,
    })
}

/// Full forward pass on a tape.
pub fn forward(tape: &mut Tape, params: &PolicyParams, obs: &ObsBatch, binding: Binding) -> Result<PolicyVars> {
    let cfg = &params.config;
    if obs.len > cfg.context_len {
        return Err(Error::ContextOverflow {
            tokens: N_MODALITIES * obs.len,
            max: cfg.max_tokens(),
        });
    }
    let p = bind(tape, params, binding);
    let latents = encode(tape, &p, obs)?;
    for (m, &z) in Modality::ALL.iter().zip(&latents) {
        check_finite(tape, z, m.name())?;
    }
    let tokens = tokens_from_latents(tape, &latents, obs.batch, obs.len)?;
    let context = temporal_aggregate(tape, &p, tokens)?;
    check_finite(tape, context, "temporal context")?;
    let head = gmm_head(tape, &p, context, cfg)?;
    for v in [head.logits, head.means, head.log_scales] {
        check_finite(tape, v, "gmm head")?;
    }
    Ok(PolicyVars {
        latents,
        tokens,
        context,
        head,
    })
}

/// Head parameters for each window of `obs` under frozen weights.
pub fn policy_forward_batch(params: &PolicyParams, obs: &ObsBatch) -> Result<Vec<GmmParams>> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, obs, Binding::Frozen)?;
    Ok(out.head.to_params(&tape))
}

/// Head parameters for one observation history (left-padded to `L`).
pub fn policy_forward(params: &PolicyParams, history: &[MultiModalObs]) -> Result<GmmParams> {
    let obs = ObsBatch::from_history(history, params.config.context_len)?;
    Ok(policy_forward_batch(params, &obs)?.remove(0))
}

/// Latents `[B*L, D]` per modality under frozen weights.
pub fn encode_values(params: &PolicyParams, obs: &ObsBatch) -> Result<[Tensor; N_MODALITIES]> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, Binding::Frozen);
    let z = encode(&mut tape, &p, obs)?;
    Ok(z.map(|v| tape.value(v).clone()))
}
