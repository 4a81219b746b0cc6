//! Behavioral cloning and distillation objectives.
//!
//! The student is bound as trainable parameters on a tape; the teacher is
//! evaluated on its own tape and enters as constants, so it never receives
//! gradient. Distillation terms use exemplar rows only, while the cloning
//! term covers the union of current and exemplar rows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::gmm::{GmmVars, SampleNoise};
use crate::policy::{forward, Binding, ObsBatch, PolicyParams, PolicyVars, N_MODALITIES};
use crate::seed::Rng;
use crate::synth::{Modality, ACTION_DIM};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_t: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda_i: 0.0,
        lambda_t: 0.0,
        lambda_e: 0.0,
        lambda_p: 0.0,
    };

    pub fn uniform(v: f64) -> Self {
        LossWeights {
            lambda_i: v,
            lambda_t: v,
            lambda_e: v,
            lambda_p: v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("lambda_i", self.lambda_i),
            ("lambda_t", self.lambda_t),
            ("lambda_e", self.lambda_e),
            ("lambda_p", self.lambda_p),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{n} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bc_nll: f64,
    pub l_agentview: f64,
    pub l_handeye: f64,
    pub l_text: f64,
    pub l_extra: f64,
    pub l_policy: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn l_image(&self) -> f64 {
        self.l_agentview + self.l_handeye
    }

    /// `λ_i·l_image + λ_t·l_text + λ_e·l_extra + λ_p·l_policy`.
    pub fn distill(&self, w: &LossWeights) -> f64 {
        w.lambda_i * self.l_image()
            + w.lambda_t * self.l_text
            + w.lambda_e * self.l_extra
            + w.lambda_p * self.l_policy
    }

    /// `bc_nll` plus the weighted distillation terms, in the same order the
    /// tape accumulates them.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let mut t = self.bc_nll;
        t += w.lambda_i * self.l_image();
        t += w.lambda_t * self.l_text;
        t += w.lambda_e * self.l_extra;
        t += w.lambda_p * self.l_policy;
        t
    }
}

/// Windows of observations with the action taken at each window's last step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: ObsBatch,
    /// `[B, A]` row-major.
    pub actions: Vec<f64>,
}

impl Batch {
    pub fn new(obs: ObsBatch, actions: Vec<f64>) -> Result<Self> {
        if actions.len() != obs.batch * ACTION_DIM {
            return Err(shape_err(
                "batch",
                format!("{} action values for {} windows", actions.len(), obs.batch),
            ));
        }
        Ok(Self { obs, actions })
    }

    #[allow(clippy::misnamed_getters)]
    pub fn len(&self) -> usize {
        self.obs.batch
    }

    pub fn is_empty(&self) -> bool {
        self.obs.batch == 0
    }

    pub fn concat(parts: &[&Batch]) -> Result<Self> {
        let obs = ObsBatch::concat(&parts.iter().map(|b| &b.obs).collect::<Vec<_>>())?;
        let actions = parts.iter().flat_map(|b| b.actions.iter().copied()).collect();
        Self::new(obs, actions)
    }
}

/// Source of the sampling noise for the policy-distillation term.
pub enum KlNoise<'a> {
    Sample(&'a mut Rng),
    Frozen(&'a SampleNoise),
}

/// Mean negative log-likelihood of `actions: [B, A]` under the head.
pub fn bc_nll(tape: &mut Tape, head: &GmmVars, actions: &[f64]) -> Result<Var> {
    let b = head.batch(tape);
    if b == 0 {
        return Err(shape_err("bc_nll", "empty batch"));
    }
    let a = tape.constant(Tensor::new(vec![b, 1, head.action_dim(tape)], actions.to_vec())?);
    let lp = head.log_prob(tape, a)?;
    let m = tape.mean(lp)?;
    Ok(tape.scale(m, -1.0))
}

/// `(1/(N·L)) Σ ‖f_k − f_prev‖²` over `[N·L, D]` latents.
pub fn modality_l2(tape: &mut Tape, f_k: Var, f_prev: &Tensor, windows: usize, len: usize) -> Result<Var> {
    if tape.shape(f_k) != f_prev.shape() {
        return Err(shape_err(
            "modality_l2",
            format!("student {:?} vs teacher {:?}", tape.shape(f_k), f_prev.shape()),
        ));
    }
    if windows * len != f_prev.shape()[0] {
        return Err(shape_err("modality_l2", "row count is not N·L"));
    }
    let t = tape.constant(f_prev.clone());
    let d = tape.sub(f_k, t)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / (windows * len) as f64))
}

/// Plain-value [`modality_l2`].
pub fn modality_l2_values(f_k: &Tensor, f_prev: &Tensor, windows: usize, len: usize) -> Result<f64> {
    if f_k.shape() != f_prev.shape() {
        return Err(shape_err("modality_l2", "shape mismatch"));
    }
    let s: f64 = f_k.data().iter().zip(f_prev.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / (windows * len) as f64)
}

/// Per-modality feature-distillation terms, in [`Modality::ALL`] order.
pub fn distill_features(
    tape: &mut Tape,
    student: &[Var; N_MODALITIES],
    teacher: &[Tensor; N_MODALITIES],
    windows: usize,
    len: usize,
) -> Result<[Var; N_MODALITIES]> {
    let mut out = Vec::with_capacity(N_MODALITIES);
    for (s, t) in student.iter().zip(teacher) {
        out.push(modality_l2(tape, *s, t, windows, len)?);
    }
    Ok(out.try_into().expect("five modalities"))
}

/// Teacher head as constants.
fn constant_head(tape: &mut Tape, t: &TeacherOutputs) -> GmmVars {
    GmmVars {
        logits: tape.constant(t.logits.clone()),
        means: tape.constant(t.means.clone()),
        log_scales: tape.constant(t.log_scales.clone()),
    }
}

/// Mean over rows of the Monte-Carlo `KL(student ‖ teacher)` with
/// pathwise samples from the student. Returns the loss and the noise used.
pub fn l_policy(
    tape: &mut Tape,
    student: &GmmVars,
    teacher: &GmmVars,
    n: usize,
    noise: KlNoise<'_>,
) -> Result<(Var, SampleNoise)> {
    if n == 0 {
        return Err(shape_err("l_policy", "need at least one KL sample"));
    }
    let (b, a) = (student.batch(tape), student.action_dim(tape));
    if teacher.action_dim(tape) != a || teacher.batch(tape) != b {
        return Err(shape_err("l_policy", "student and teacher heads differ in shape"));
    }
    let noise = match noise {
        KlNoise::Sample(rng) => student.draw_noise(tape, n, rng),
        KlNoise::Frozen(z) => {
            if z.comp.len() != b * n || z.eps.len() != b * n * a {
                return Err(shape_err("l_policy", "frozen noise does not match batch"));
            }
            z.clone()
        }
    };
    let samples = student.sample_pathwise(tape, &noise)?;
    let lp_k = student.log_prob(tape, samples)?;
    let lp_prev = teacher.log_prob(tape, samples)?;
    let d = tape.sub(lp_k, lp_prev)?;
    Ok((tape.mean(d)?, noise))
}

/// Teacher latents and head on the exemplar windows.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub latents: [Tensor; N_MODALITIES],
    pub logits: Tensor,
    pub means: Tensor,
    pub log_scales: Tensor,
}

pub fn teacher_outputs(teacher: &PolicyParams, obs: &ObsBatch) -> Result<TeacherOutputs> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, teacher, obs, Binding::Frozen)?;
    Ok(TeacherOutputs {
        latents: out.latents.map(|v| tape.value(v).clone()),
        logits: tape.value(out.head.logits).clone(),
        means: tape.value(out.head.means).clone(),
        log_scales: tape.value(out.head.log_scales).clone(),
    })
}

/// Weighted distillation terms on the exemplar rows of a student forward.
pub struct DistillVars {
    /// Per-modality L2 terms in [`Modality::ALL`] order.
    pub features: [Var; N_MODALITIES],
    pub policy: Var,
    pub noise: SampleNoise,
}

impl DistillVars {
    pub fn feature(&self, m: Modality) -> Var {
        self.features[Modality::ALL.iter().position(|&x| x == m).expect("modality")]
    }
}

/// Feature and policy distillation for rows `[start, start + windows)` of a
/// student forward pass against precomputed teacher outputs.
#[allow(clippy::too_many_arguments)]
pub fn l_distill(
    tape: &mut Tape,
    student: &PolicyVars,
    start: usize,
    windows: usize,
    len: usize,
    teacher: &TeacherOutputs,
    n_kl: usize,
    noise: KlNoise<'_>,
) -> Result<DistillVars> {
    let mut lat = Vec::with_capacity(N_MODALITIES);
    for &z in &student.latents {
        lat.push(tape.narrow(z, 0, start * len, windows * len)?);
    }
    let lat: [Var; N_MODALITIES] = lat.try_into().expect("five modalities");
    let features = distill_features(tape, &lat, &teacher.latents, windows, len)?;
    let head = student.head.narrow(tape, start, windows)?;
    let t_head = constant_head(tape, teacher);
    let (policy, noise) = l_policy(tape, &head, &t_head, n_kl, noise)?;
    Ok(DistillVars {
        features,
        policy,
        noise,
    })
}

/// The training objective and its parts.
pub struct TotalLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub student: PolicyVars,
    /// KL noise used, when a distillation term was formed.
    pub noise: Option<SampleNoise>,
}

/// Cloning loss on `current ∪ exemplar` plus distillation on `exemplar`.
///
/// Distillation is skipped (all parts zero) without a teacher or exemplars.
/// Terms with a zero weight are still reported but not added to the graph.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    student: &PolicyParams,
    teacher: Option<&PolicyParams>,
    current: &Batch,
    exemplar: Option<&Batch>,
    weights: &LossWeights,
    n_kl: usize,
    noise: KlNoise<'_>,
) -> Result<TotalLoss> {
    let teacher_out = match (teacher, exemplar) {
        (Some(t), Some(e)) if !e.is_empty() => Some(teacher_outputs(t, &e.obs)?),
        _ => None,
    };
    total_loss_with_teacher(tape, student, teacher_out.as_ref(), current, exemplar, weights, n_kl, noise)
}

/// [`total_loss`] with teacher outputs computed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_teacher(
    tape: &mut Tape,
    student: &PolicyParams,
    teacher: Option<&TeacherOutputs>,
    current: &Batch,
    exemplar: Option<&Batch>,
    weights: &LossWeights,
    n_kl: usize,
    noise: KlNoise<'_>,
) -> Result<TotalLoss> {
    if current.is_empty() {
        return Err(shape_err("total_loss", "current batch is empty"));
    }
    let exemplar = exemplar.filter(|e| !e.is_empty());
    let union = match exemplar {
        Some(e) => Batch::concat(&[current, e])?,
        None => current.clone(),
    };
    let sv = forward(tape, student, &union.obs, Binding::Trainable)?;
    let bc = bc_nll(tape, &sv.head, &union.actions)?;
    let mut br = LossBreakdown {
        bc_nll: tape.value(bc).data()[0],
        ..Default::default()
    };
    let mut loss = bc;
    let mut used_noise = None;

    if let (Some(t), Some(e)) = (teacher, exemplar) {
        let len = e.obs.len;
        let d = l_distill(tape, &sv, current.len(), e.len(), len, t, n_kl, noise)?;
        let val = |tape: &Tape, v: Var| tape.value(v).data()[0];
        let l_img = tape.add(d.feature(Modality::Agentview), d.feature(Modality::Handeye))?;
        let l_extra = tape.add(d.feature(Modality::Joint), d.feature(Modality::Gripper))?;
        br.l_agentview = val(tape, d.feature(Modality::Agentview));
        br.l_handeye = val(tape, d.feature(Modality::Handeye));
        br.l_text = val(tape, d.feature(Modality::Lang));
        br.l_extra = val(tape, l_extra);
        br.l_policy = val(tape, d.policy);
        for (lambda, term) in [
            (weights.lambda_i, l_img),
            (weights.lambda_t, d.feature(Modality::Lang)),
            (weights.lambda_e, l_extra),
            (weights.lambda_p, d.policy),
        ] {
            if lambda != 0.0 {
                let s = tape.scale(term, lambda);
                loss = tape.add(loss, s)?;
            }
        }
        used_noise = Some(d.noise);
    }
    br.total = tape.value(loss).data()[0];
    Ok(TotalLoss {
        loss,
        breakdown: br,
        student: sv,
        noise: used_noise,
    })
}
