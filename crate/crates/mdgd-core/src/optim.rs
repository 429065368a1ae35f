//! The MDGD optimizer family.
//!
//! Per minibatch the training loop computes the task loss for the frozen
//! pre-trained model φ and the current model θ, the visual-alignment loss
//! `L_v(φ,θ) = ‖μ(X^v|φ) − π(X^v|θ)‖₁` between their visual states, and
//! the drift gradients `h_φ = ∇_φ L_v`, `h_θ = ∇_θ L_v`. Each task
//! gradient is then made orthogonal to its own drift direction,
//!
//! ```text
//! ḡ = ∇L_vl − (∇L_vlᵀ h / ‖h‖²) · h,
//! ```
//!
//! after which the full method projects θ's decoupled gradient onto φ's,
//!
//! ```text
//! g̃_θ = (ḡ_θᵀ ḡ_φ / ‖ḡ_φ‖²) · ḡ_φ,     θ ← θ − η·(∇L_vl + ∇L_v + g̃_θ),
//! ```
//!
//! while the masked variant ranks parameter blocks by the cosine between
//! ḡ_θ and ḡ_φ, keeps the top-α fraction, and applies
//! `θ ← θ − η·M⊙(∇L_vl + ∇L_v)`.
//!
//! Degenerate denominators fall back gracefully: orthogonalization passes
//! the gradient through when `‖h‖² < eps_proj`, and the projection returns
//! zero when `‖ḡ_φ‖² < eps_proj`, so every method degrades to plain
//! fine-tuning rather than dividing by ~0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::GradientVector;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{task_loss, visual_stream_node, Batch, ModelParams};
use crate::rng::RngState;

pub const DEFAULT_EPS_PROJ: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain SGD on the task loss.
    Finetune,
    /// Task loss plus the visual-alignment term, no projection.
    FinetuneAlign,
    /// Full update: task + alignment + projected regularizer.
    Mdgd,
    /// Ablation: drops the alignment term but keeps the projection.
    MdgdNoalign,
    /// Parameter-efficient variant using the gradient mask.
    MdgdGm,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Finetune => "finetune",
            Method::FinetuneAlign => "finetune_align",
            Method::Mdgd => "mdgd",
            Method::MdgdNoalign => "mdgd_noalign",
            Method::MdgdGm => "mdgd_gm",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "finetune_align" => Ok(Method::FinetuneAlign),
            "mdgd" => Ok(Method::Mdgd),
            "mdgd_noalign" => Ok(Method::MdgdNoalign),
            "mdgd_gm" => Ok(Method::MdgdGm),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected finetune | finetune_align | mdgd | mdgd_noalign | mdgd_gm)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    Block,
    Element,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LvNormalization {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdgdConfig {
    /// Learning rate η, multiplying the whole combined direction.
    pub eta: f64,
    pub method: Method,
    /// Mask fraction α ∈ (0, 1].
    pub alpha: f64,
    pub mask_granularity: MaskGranularity,
    /// Degeneracy guard for the ‖h‖² and ‖ḡ_φ‖² denominators.
    pub eps_proj: f64,
    pub lv_normalization: LvNormalization,
    pub steps: usize,
    pub batch_size: usize,
}

impl MdgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("optim.eta must be > 0, got {}", self.eta)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "optim.alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.eps_proj < 0.0 {
            return Err(Error::Config("optim.eps_proj must be ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-step scalars for learning-curve traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub l_vl_theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_vl_phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_v: Option<f64>,
    /// Per-block cosine between ḡ_θ and ḡ_φ, in lexicographic block-name
    /// order; zero-norm blocks report 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_cosines: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_block_cosine: Option<f64>,
    pub grad_norm_task: f64,
    /// ‖h_θ‖ = ‖∇_θ L_v‖.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm_drift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_tilde_norm: Option<f64>,
    /// Fraction of blocks (or coordinates) the mask selected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_fraction: Option<f64>,
}

// ---------------------------------------------------------------------------
// losses and drift gradients

/// Builds the visual-alignment loss on both models' tapes. Each tape sees
/// the other model's visual states as a constant, so backward on the first
/// gives `h_θ = ∇_θ L_v` and on the second `h_φ = ∇_φ L_v`.
pub fn visual_alignment_loss(
    phi: &ModelParams,
    theta: &ModelParams,
    batch: &Batch,
    normalization: LvNormalization,
) -> Result<(crate::autograd::LossNode, crate::autograd::LossNode)> {
    if phi.config() != theta.config() {
        return Err(Error::Contract(
            "visual_alignment_loss: φ and θ must share a model config".into(),
        ));
    }
    let mean = normalization == LvNormalization::Mean;

    let mut tape_theta = crate::autograd::Tape::new();
    let pi_node = visual_stream_node(&mut tape_theta, theta, &batch.image_feats)?;
    let mut tape_phi = crate::autograd::Tape::new();
    let mu_node = visual_stream_node(&mut tape_phi, phi, &batch.image_feats)?;

    let mu_value = tape_phi.value(mu_node).clone();
    let pi_value = tape_theta.value(pi_node).clone();

    let theta_loss = tape_theta.l1_dist_const(pi_node, mu_value, mean)?;
    let phi_loss = tape_phi.l1_dist_const(mu_node, pi_value, mean)?;
    Ok((
        crate::autograd::LossNode { tape: tape_theta, node: theta_loss },
        crate::autograd::LossNode { tape: tape_phi, node: phi_loss },
    ))
}

/// Drift gradients of the visual-alignment loss for both models.
#[derive(Debug)]
pub struct DriftGradients {
    pub h_phi: GradientVector,
    pub h_theta: GradientVector,
    /// The shared L_v value.
    pub l_v: f64,
}

pub fn drift_gradients(
    phi: &ModelParams,
    theta: &ModelParams,
    batch: &Batch,
    normalization: LvNormalization,
) -> Result<DriftGradients> {
    let (theta_loss, phi_loss) = visual_alignment_loss(phi, theta, batch, normalization)?;
    let l_v = theta_loss.value();
    Ok(DriftGradients {
        h_theta: theta_loss.backward()?,
        h_phi: phi_loss.backward()?,
        l_v,
    })
}

// ---------------------------------------------------------------------------
// gradient geometry

/// Removes the component of `g` along `h`. Passes `g` through unchanged
/// when `‖h‖² < eps_proj`.
pub fn orthogonalize(
    g: &GradientVector,
    h: &GradientVector,
    eps_proj: f64,
) -> Result<GradientVector> {
    let hh = h.dot(h)?;
    if hh < eps_proj {
        return Ok(g.clone());
    }
    let coef = g.dot(h)? / hh;
    g.axpy(-coef, h)
}

/// Projects ḡ_θ onto the direction of ḡ_φ; zero when `‖ḡ_φ‖² < eps_proj`.
pub fn project_onto(
    g_bar_theta: &GradientVector,
    g_bar_phi: &GradientVector,
    eps_proj: f64,
) -> Result<GradientVector> {
    let pp = g_bar_phi.dot(g_bar_phi)?;
    if pp < eps_proj {
        return Ok(g_bar_phi.scale(0.0));
    }
    let coef = g_bar_theta.dot(g_bar_phi)? / pp;
    Ok(g_bar_phi.scale(coef))
}

// ---------------------------------------------------------------------------
// parameter updates

/// Gradient terms entering one update.
pub struct StepGrads {
    /// ∇_θ L_vl.
    pub task: GradientVector,
    /// ∇_θ L_v (= h_θ).
    pub align: Option<GradientVector>,
    /// g̃_θ.
    pub projected: Option<GradientVector>,
}

fn apply_update(theta: &mut ModelParams, combined: &GradientVector, eta: f64) -> Result<()> {
    let expected: Vec<String> = theta.set().trainable_names();
    let got: Vec<&str> = combined.names().collect();
    if expected.len() != got.len() || !expected.iter().map(|s| s.as_str()).eq(got) {
        return Err(Error::Contract(
            "update gradient keys do not match θ's trainable set".into(),
        ));
    }
    for (name, g) in combined.iter() {
        let p = theta.set_mut().get_mut(name)?;
        for (w, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            if gv != 0.0 {
                *w -= eta * gv;
            }
        }
    }
    Ok(())
}

/// Full-parameter update `θ ← θ − η·(terms per method)`.
pub fn mdgd_step(
    theta: &mut ModelParams,
    grads: &StepGrads,
    eta: f64,
    method: Method,
) -> Result<()> {
    let require = |o: &Option<GradientVector>, what: &str| -> Result<GradientVector> {
        o.clone()
            .ok_or_else(|| Error::Contract(format!("method {method} requires the {what} term")))
    };
    let combined = match method {
        Method::Finetune => grads.task.clone(),
        Method::FinetuneAlign => grads.task.axpy(1.0, &require(&grads.align, "alignment")?)?,
        Method::Mdgd => grads
            .task
            .axpy(1.0, &require(&grads.align, "alignment")?)?
            .axpy(1.0, &require(&grads.projected, "projected")?)?,
        Method::MdgdNoalign => grads.task.axpy(1.0, &require(&grads.projected, "projected")?)?,
        Method::MdgdGm => {
            return Err(Error::Contract(
                "mdgd_gm updates go through mdgd_gm_step with a mask".into(),
            ))
        }
    };
    apply_update(theta, &combined, eta)
}

// ---------------------------------------------------------------------------
// gradient masking

#[derive(Clone, Debug, PartialEq)]
enum MaskEntry {
    Full,
    Empty,
    Elements(Vec<bool>),
}

/// Selection of trainable parameters with the highest gradient-similarity
/// scores.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMask {
    granularity: MaskGranularity,
    entries: BTreeMap<String, MaskEntry>,
    selected: usize,
    total: usize,
}

impl GradientMask {
    /// Selected fraction: blocks for block granularity, coordinates for
    /// element granularity.
    pub fn fraction(&self) -> f64 {
        self.selected as f64 / self.total as f64
    }

    pub fn selected_count(&self) -> usize {
        self.selected
    }

    pub fn granularity(&self) -> MaskGranularity {
        self.granularity
    }

    /// Fully selected block names (block granularity).
    pub fn selected_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| matches!(e, MaskEntry::Full))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    fn entry(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.get(name)
    }
}

/// Per-block cosine between two gradient vectors, `None` where either
/// block has zero norm. Order is lexicographic by name.
pub fn block_cosines(
    g_theta: &GradientVector,
    g_phi: &GradientVector,
) -> Result<Vec<(String, Option<f64>)>> {
    // key agreement is checked by the dot on the full vectors
    g_theta.dot(g_phi)?;
    let mut out = Vec::with_capacity(g_theta.blocks());
    for ((name, a), (_, b)) in g_theta.iter().zip(g_phi.iter()) {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let cos = if na > 0.0 && nb > 0.0 {
            Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
        } else {
            None
        };
        out.push((name.to_string(), cos));
    }
    Ok(out)
}

/// `⌈alpha·n⌉` with a guard against `alpha·n` landing epsilon above an
/// integer in floating point.
fn ceil_fraction(alpha: f64, n: usize) -> usize {
    (((alpha * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Ranks trainable parameters by the similarity of the two decoupled
/// gradients and selects the top-α fraction. Block granularity scores each
/// named tensor by cosine; element granularity scores each coordinate by
/// the normalized elementwise product. Ties break toward the
/// lexicographically smaller name (or lower coordinate index).
pub fn gradient_mask(
    g_bar_theta: &GradientVector,
    g_bar_phi: &GradientVector,
    alpha: f64,
    granularity: MaskGranularity,
) -> Result<GradientMask> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Contract(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    match granularity {
        MaskGranularity::Block => {
            let cosines = block_cosines(g_bar_theta, g_bar_phi)?;
            if cosines.iter().all(|(_, c)| c.is_none()) {
                return Err(Error::Contract(
                    "gradient_mask: every block has zero norm".into(),
                ));
            }
            let total = cosines.len();
            let keep = ceil_fraction(alpha, total);
            let mut ranked: Vec<(f64, &str)> = cosines
                .iter()
                .map(|(n, c)| (c.unwrap_or(f64::NEG_INFINITY), n.as_str()))
                .collect();
            ranked.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).expect("scores are not NaN").then(a.1.cmp(b.1))
            });
            let selected: std::collections::BTreeSet<&str> =
                ranked[..keep].iter().map(|(_, n)| *n).collect();
            let entries = cosines
                .iter()
                .map(|(n, _)| {
                    let e = if selected.contains(n.as_str()) {
                        MaskEntry::Full
                    } else {
                        MaskEntry::Empty
                    };
                    (n.clone(), e)
                })
                .collect();
            Ok(GradientMask { granularity, entries, selected: keep, total })
        }
        MaskGranularity::Element => {
            let nt = g_bar_theta.norm();
            let np = g_bar_phi.norm();
            if nt == 0.0 || np == 0.0 {
                return Err(Error::Contract(
                    "gradient_mask: a gradient vector has zero norm".into(),
                ));
            }
            let ft = g_bar_theta.flatten();
            let fp = g_bar_phi.flatten();
            let total = ft.len();
            let keep = ceil_fraction(alpha, total);
            let denom = nt * np;
            let mut ranked: Vec<(f64, usize)> = ft
                .iter()
                .zip(&fp)
                .enumerate()
                .map(|(i, (a, b))| (a * b / denom, i))
                .collect();
            ranked.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).expect("scores are not NaN").then(a.1.cmp(&b.1))
            });
            let mut bits = vec![false; total];
            for &(_, i) in &ranked[..keep] {
                bits[i] = true;
            }
            // carve the flat bitmask back into named blocks
            let mut entries = BTreeMap::new();
            let mut offset = 0;
            for (name, t) in g_bar_theta.iter() {
                let slice = bits[offset..offset + t.len()].to_vec();
                offset += t.len();
                let entry = if slice.iter().all(|&b| b) {
                    MaskEntry::Full
                } else if slice.iter().all(|&b| !b) {
                    MaskEntry::Empty
                } else {
                    MaskEntry::Elements(slice)
                };
                entries.insert(name.to_string(), entry);
            }
            Ok(GradientMask { granularity, entries, selected: keep, total })
        }
    }
}

/// Masked update `θ ← θ − η·M⊙(∇L_vl + ∇L_v)`; unmasked parameters are
/// bit-identical before and after.
pub fn mdgd_gm_step(
    theta: &mut ModelParams,
    task: &GradientVector,
    align: &GradientVector,
    mask: &GradientMask,
    eta: f64,
) -> Result<()> {
    let combined = task.axpy(1.0, align)?;
    for (name, g) in combined.iter() {
        let entry = mask
            .entry(name)
            .ok_or_else(|| Error::Contract(format!("mask is missing block {name:?}")))?;
        match entry {
            MaskEntry::Empty => {}
            MaskEntry::Full => {
                let p = theta.set_mut().get_mut(name)?;
                for (w, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                    if gv != 0.0 {
                        *w -= eta * gv;
                    }
                }
            }
            MaskEntry::Elements(bits) => {
                let p = theta.set_mut().get_mut(name)?;
                for ((w, &gv), &keep) in p.value.data_mut().iter_mut().zip(g.data()).zip(bits) {
                    if keep && gv != 0.0 {
                        *w -= eta * gv;
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// training loop

const TAG_SHUFFLE: u64 = 0x0010;

/// Runs the selected method over the dataset: θ starts as a copy of φ, φ
/// is never modified, minibatch order is a seeded shuffle per epoch, and
/// one [`StepDiagnostics`] is appended per step.
pub fn train_loop(
    phi: &ModelParams,
    dataset: &Dataset,
    config: &MdgdConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<StepDiagnostics>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("train_loop: dataset is empty".into()));
    }
    let mut theta = phi.clone();
    let mut log = Vec::with_capacity(config.steps);
    let n = dataset.len();
    let mut step = 0usize;
    let mut epoch = 0u64;

    'outer: loop {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = RngState::new(seed).derive(TAG_SHUFFLE).derive(epoch);
        for i in (1..n).rev() {
            let j = rng.next_below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            if step >= config.steps {
                break 'outer;
            }
            let batch = dataset.batch_of(chunk)?;
            log.push(run_step(phi, &mut theta, &batch, config, step)?);
            step += 1;
        }
        epoch += 1;
        if step >= config.steps {
            break;
        }
    }
    Ok((theta, log))
}

fn run_step(
    phi: &ModelParams,
    theta: &mut ModelParams,
    batch: &Batch,
    config: &MdgdConfig,
    step: usize,
) -> Result<StepDiagnostics> {
    match config.method {
        Method::Finetune => {
            let loss = task_loss(theta, batch)?;
            let l_vl_theta = loss.value();
            let task = loss.backward()?;
            let grad_norm_task = task.norm();
            mdgd_step(
                theta,
                &StepGrads { task, align: None, projected: None },
                config.eta,
                Method::Finetune,
            )?;
            Ok(StepDiagnostics {
                step,
                l_vl_theta,
                l_vl_phi: None,
                l_v: None,
                block_cosines: None,
                mean_block_cosine: None,
                grad_norm_task,
                grad_norm_drift: None,
                g_tilde_norm: None,
                mask_fraction: None,
            })
        }
        Method::FinetuneAlign => {
            let loss = task_loss(theta, batch)?;
            let l_vl_theta = loss.value();
            let task = loss.backward()?;
            let grad_norm_task = task.norm();
            let (theta_lv, _phi_lv) =
                visual_alignment_loss(phi, theta, batch, config.lv_normalization)?;
            let l_v = theta_lv.value();
            let h_theta = theta_lv.backward()?;
            let grad_norm_drift = h_theta.norm();
            mdgd_step(
                theta,
                &StepGrads { task, align: Some(h_theta), projected: None },
                config.eta,
                Method::FinetuneAlign,
            )?;
            Ok(StepDiagnostics {
                step,
                l_vl_theta,
                l_vl_phi: None,
                l_v: Some(l_v),
                block_cosines: None,
                mean_block_cosine: None,
                grad_norm_task,
                grad_norm_drift: Some(grad_norm_drift),
                g_tilde_norm: None,
                mask_fraction: None,
            })
        }
        Method::Mdgd | Method::MdgdNoalign | Method::MdgdGm => {
            // Both task losses, both visual encodings, L_v, then the
            // modality-decoupled gradients, in that order.
            let phi_loss = task_loss(phi, batch)?;
            let l_vl_phi = phi_loss.value();
            let grad_phi = phi_loss.backward()?;

            let theta_loss = task_loss(theta, batch)?;
            let l_vl_theta = theta_loss.value();
            let grad_theta = theta_loss.backward()?;
            let grad_norm_task = grad_theta.norm();

            let drift = drift_gradients(phi, theta, batch, config.lv_normalization)?;
            let grad_norm_drift = drift.h_theta.norm();

            let g_bar_phi = orthogonalize(&grad_phi, &drift.h_phi, config.eps_proj)?;
            let g_bar_theta = orthogonalize(&grad_theta, &drift.h_theta, config.eps_proj)?;

            let cosines = block_cosines(&g_bar_theta, &g_bar_phi)?;
            let cos_values: Vec<f64> = cosines.iter().map(|(_, c)| c.unwrap_or(0.0)).collect();
            let mean_cos = cos_values.iter().sum::<f64>() / cos_values.len() as f64;

            let mut g_tilde_norm = None;
            let mut mask_fraction = None;
            if config.method == Method::MdgdGm {
                let mask = gradient_mask(
                    &g_bar_theta,
                    &g_bar_phi,
                    config.alpha,
                    config.mask_granularity,
                )?;
                mask_fraction = Some(mask.fraction());
                mdgd_gm_step(theta, &grad_theta, &drift.h_theta, &mask, config.eta)?;
            } else {
                let g_tilde = project_onto(&g_bar_theta, &g_bar_phi, config.eps_proj)?;
                g_tilde_norm = Some(g_tilde.norm());
                let align = if config.method == Method::Mdgd {
                    Some(drift.h_theta.clone())
                } else {
                    None
                };
                mdgd_step(
                    theta,
                    &StepGrads { task: grad_theta, align, projected: Some(g_tilde) },
                    config.eta,
                    config.method,
                )?;
            }
            Ok(StepDiagnostics {
                step,
                l_vl_theta,
                l_vl_phi: Some(l_vl_phi),
                l_v: Some(drift.l_v),
                block_cosines: Some(cos_values),
                mean_block_cosine: Some(mean_cos),
                grad_norm_task,
                grad_norm_drift: Some(grad_norm_drift),
                g_tilde_norm,
                mask_fraction,
            })
        }
    }
}

/// Forward-only L_v value between two checkpoints on one batch — the
/// post-hoc counterpart of the logged trace, comparable across methods.
pub fn visual_alignment_value(
    phi: &ModelParams,
    theta: &ModelParams,
    batch: &Batch,
    normalization: LvNormalization,
) -> Result<f64> {
    let mu = crate::model::visual_hidden(phi, &batch.image_feats)?;
    let pi = crate::model::visual_hidden(theta, &batch.image_feats)?;
    let mut total = 0.0;
    for (a, b) in mu.data().iter().zip(pi.data()) {
        total += (a - b).abs();
    }
    Ok(match normalization {
        LvNormalization::Sum => total,
        LvNormalization::Mean => total / mu.len() as f64,
    })
}
