//! The toy multimodal sequence model.
//!
//! A visual adapter (shared per-patch projection + two-layer MLP with a
//! smooth GELU nonlinearity) maps image features into model space; a
//! pre-norm causal transformer then runs over one stream of
//! `[visual tokens | instruction tokens | answer tokens]`. Answer logits
//! are teacher-forced; the states the analyses care about are the
//! final-layer hidden vectors at the visual positions (`visual_hidden`)
//! and at the last instruction token (`zvl`).
//!
//! Because the visual prefix sits first under the causal mask,
//! `visual_hidden` depends only on the image features and the parameters —
//! running the transformer over just the `M` visual positions produces
//! bit-identical states to a full forward.
//!
//! The trainable subset is the visual adapter plus the last
//! `trainable_last_k` transformer layers; the token embedding, positional
//! table and output head stay frozen (the head can be unfrozen via
//! `train_output_head`).

use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMeta, LossNode, NodeId, ParamSet, Parameter, Tape};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Init scale for all weight matrices.
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image feature dimension per patch.
    pub d_img: usize,
    /// Number of visual tokens M.
    pub visual_tokens: usize,
    /// Text vocabulary size.
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// How many final transformer layers are trainable.
    pub trainable_last_k: usize,
    /// Unfreeze the output head (frozen by default).
    #[serde(default)]
    pub train_output_head: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} must be a positive multiple of model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.trainable_last_k == 0 || self.trainable_last_k > self.n_layers {
            return Err(Error::Config(format!(
                "model.trainable_last_k {} outside 1..={}",
                self.trainable_last_k, self.n_layers
            )));
        }
        if self.visual_tokens == 0 {
            return Err(Error::Config("model.visual_tokens must be ≥ 1".into()));
        }
        if self.d_img == 0 || self.vocab == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Complete named-parameter set of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    set: ParamSet,
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn param(&self, name: &str) -> Result<&Parameter> {
        self.set.get(name)
    }

    /// Same config with a replaced parameter set (used by gradient checks
    /// that perturb coordinates).
    pub fn with_set(&self, set: ParamSet) -> ModelParams {
        ModelParams { config: self.config.clone(), set }
    }

    /// Rebuilds a `ModelParams` from loaded tensors; names, shapes and the
    /// trainable partition must match what `init_params` would create.
    pub fn from_parts(config: ModelConfig, set: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed);
        let reference = init_params(&config, &mut rng)?;
        if reference.set.len() != set.len() {
            return Err(Error::Format(format!(
                "parameter count {} does not match config ({} expected)",
                set.len(),
                reference.set.len()
            )));
        }
        for p in reference.set.iter() {
            let loaded = set
                .get(&p.name)
                .map_err(|_| Error::Format(format!("missing parameter {:?}", p.name)))?;
            if loaded.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    p.name,
                    loaded.value.shape(),
                    p.value.shape()
                )));
            }
            if loaded.trainable != p.trainable {
                return Err(Error::Format(format!(
                    "parameter {:?} trainable flag does not match config",
                    p.name
                )));
            }
        }
        Ok(ModelParams { config, set })
    }
}

fn layer_name(i: usize, suffix: &str) -> String {
    format!("layer.{i:02}.{suffix}")
}

/// Draws a fresh parameter set: weights `~ Normal(0, 0.02²)` from the
/// seeded stream in a fixed creation order, biases (and layer-norm biases)
/// zero, layer-norm gains one.
pub fn init_params(config: &ModelConfig, rng: &mut RngState) -> Result<ModelParams> {
    config.validate()?;
    let d = config.d_model;
    let mut set = ParamSet::new();

    let weight = |rng: &mut RngState, shape: &[usize]| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.next_normal() * INIT_STD).collect();
        Tensor::new(shape.to_vec(), data).expect("matching length")
    };

    let push = |set: &mut ParamSet, name: String, value: Tensor, trainable: bool| {
        set.insert(Parameter::new(name, value, trainable)).expect("unique names")
    };

    // visual adapter (always trainable)
    push(&mut set, "adapter.proj.w".into(), weight(rng, &[config.d_img, d]), true);
    push(&mut set, "adapter.proj.b".into(), Tensor::zeros(&[d]), true);
    push(&mut set, "adapter.fc1.w".into(), weight(rng, &[d, d]), true);
    push(&mut set, "adapter.fc1.b".into(), Tensor::zeros(&[d]), true);
    push(&mut set, "adapter.fc2.w".into(), weight(rng, &[d, d]), true);
    push(&mut set, "adapter.fc2.b".into(), Tensor::zeros(&[d]), true);

    // frozen embeddings
    push(&mut set, "embed.tok".into(), weight(rng, &[config.vocab, d]), false);
    push(&mut set, "embed.pos".into(), weight(rng, &[config.max_seq, d]), false);

    for i in 0..config.n_layers {
        let trainable = i >= config.n_layers - config.trainable_last_k;
        push(&mut set, layer_name(i, "attn.wq"), weight(rng, &[d, d]), trainable);
        push(&mut set, layer_name(i, "attn.wk"), weight(rng, &[d, d]), trainable);
        push(&mut set, layer_name(i, "attn.wv"), weight(rng, &[d, d]), trainable);
        push(&mut set, layer_name(i, "attn.wo"), weight(rng, &[d, d]), trainable);
        push(&mut set, layer_name(i, "ln1.g"), Tensor::full(&[d], 1.0), trainable);
        push(&mut set, layer_name(i, "ln1.b"), Tensor::zeros(&[d]), trainable);
        push(&mut set, layer_name(i, "ln2.g"), Tensor::full(&[d], 1.0), trainable);
        push(&mut set, layer_name(i, "ln2.b"), Tensor::zeros(&[d]), trainable);
        push(&mut set, layer_name(i, "ffn.w_in"), weight(rng, &[d, config.d_ff]), trainable);
        push(&mut set, layer_name(i, "ffn.b_in"), Tensor::zeros(&[config.d_ff]), trainable);
        push(&mut set, layer_name(i, "ffn.w_out"), weight(rng, &[config.d_ff, d]), trainable);
        push(&mut set, layer_name(i, "ffn.b_out"), Tensor::zeros(&[d]), trainable);
    }

    push(&mut set, "head.w".into(), weight(rng, &[d, config.vocab]), config.train_output_head);

    Ok(ModelParams { config: config.clone(), set })
}

// ---------------------------------------------------------------------------
// batches

/// Row-major token-id matrix with a right-aligned padding mask
/// (`true` = real token; every row is a `true` prefix).
#[derive(Clone, Debug, PartialEq)]
pub struct IdMatrix {
    rows: usize,
    cols: usize,
    ids: Vec<u32>,
    mask: Vec<bool>,
}

impl IdMatrix {
    pub fn new(rows: usize, cols: usize, ids: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != rows * cols || mask.len() != rows * cols {
            return Err(Error::Dim(format!(
                "id matrix {rows}×{cols}: got {} ids, {} mask entries",
                ids.len(),
                mask.len()
            )));
        }
        for r in 0..rows {
            let row = &mask[r * cols..(r + 1) * cols];
            let mut seen_pad = false;
            for &m in row {
                if seen_pad && m {
                    return Err(Error::Contract(format!(
                        "id matrix row {r}: padding mask is not right-aligned"
                    )));
                }
                seen_pad |= !m;
            }
        }
        Ok(IdMatrix { rows, cols, ids, mask })
    }

    /// All-active matrix.
    pub fn full(rows: usize, cols: usize, ids: Vec<u32>) -> Result<Self> {
        let mask = vec![true; rows * cols];
        IdMatrix::new(rows, cols, ids, mask)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn id(&self, r: usize, c: usize) -> u32 {
        self.ids[r * self.cols + c]
    }

    pub fn active(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.cols + c]
    }

    /// Number of real tokens in row `r`.
    pub fn active_len(&self, r: usize) -> usize {
        (0..self.cols).take_while(|&c| self.active(r, c)).count()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }
}

/// One minibatch: image feature blocks plus instruction and answer tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image_feats: Tensor,  // [B, M, d_img]
    pub instr_ids: IdMatrix,  // B×N
    pub answer_ids: IdMatrix, // B×T
}

impl Batch {
    pub fn new(image_feats: Tensor, instr_ids: IdMatrix, answer_ids: IdMatrix) -> Result<Self> {
        let b = match image_feats.shape() {
            [b, _, _] => *b,
            other => {
                return Err(Error::Dim(format!(
                    "image_feats must be [B, M, d_img], got {other:?}"
                )))
            }
        };
        if instr_ids.rows() != b || answer_ids.rows() != b {
            return Err(Error::Dim(format!(
                "batch rows disagree: feats {b}, instr {}, answers {}",
                instr_ids.rows(),
                answer_ids.rows()
            )));
        }
        for r in 0..b {
            if instr_ids.active_len(r) == 0 {
                return Err(Error::Contract(format!("sample {r} has no instruction tokens")));
            }
        }
        Ok(Batch { image_feats, instr_ids, answer_ids })
    }

    pub fn batch_size(&self) -> usize {
        self.image_feats.shape()[0]
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        let [_, m, d_img] = self.image_feats.shape() else {
            return Err(Error::Dim("image_feats must be 3-D".into()));
        };
        if *m != config.visual_tokens || *d_img != config.d_img {
            return Err(Error::Dim(format!(
                "image_feats [B, {m}, {d_img}] does not match config [B, {}, {}]",
                config.visual_tokens, config.d_img
            )));
        }
        let s = config.visual_tokens + self.instr_ids.cols() + self.answer_ids.cols();
        if s > config.max_seq {
            return Err(Error::Capacity(format!(
                "sequence length {s} exceeds max_seq {}",
                config.max_seq
            )));
        }
        for &id in self.instr_ids.ids().iter().chain(self.answer_ids.ids()) {
            if id as usize >= config.vocab {
                return Err(Error::Contract(format!(
                    "token id {id} outside vocabulary {}",
                    config.vocab
                )));
            }
        }
        Ok(())
    }
}

/// Teacher-forced forward outputs.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, T, vocab]` logits at the answer prediction positions.
    pub logits: Tensor,
    /// `[B, M, d_model]` final-layer states at the visual positions.
    pub visual_hidden: Tensor,
    /// `[B, d_model]` final-layer state at the last instruction token.
    pub zvl: Tensor,
}

// ---------------------------------------------------------------------------
// stream construction

struct Layout {
    b: usize,
    m: usize,
    n: usize,
    t: usize,
    s: usize,
    instr_len: Vec<usize>,
    ans_len: Vec<usize>,
}

impl Layout {
    fn visual_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.b * self.m);
        for bi in 0..self.b {
            for j in 0..self.m {
                rows.push(bi * self.s + j);
            }
        }
        rows
    }

    fn zvl_rows(&self) -> Vec<usize> {
        (0..self.b)
            .map(|bi| bi * self.s + self.m + self.instr_len[bi] - 1)
            .collect()
    }

    /// Row predicting answer token `ti` of sample `bi`: the last real
    /// instruction token for `ti == 0`, else the previous answer slot.
    fn pred_row(&self, bi: usize, ti: usize) -> usize {
        if ti == 0 {
            bi * self.s + self.m + self.instr_len[bi] - 1
        } else {
            bi * self.s + self.m + self.n + ti - 1
        }
    }

    fn key_active(&self) -> Vec<bool> {
        let mut active = vec![false; self.b * self.s];
        for bi in 0..self.b {
            for j in 0..self.m {
                active[bi * self.s + j] = true;
            }
            for j in 0..self.instr_len[bi] {
                active[bi * self.s + self.m + j] = true;
            }
            for j in 0..self.ans_len[bi] {
                active[bi * self.s + self.m + self.n + j] = true;
            }
        }
        active
    }
}

fn adapter_chain(tape: &mut Tape, params: &ModelParams, feats2d: NodeId) -> Result<NodeId> {
    let proj_w = tape.param(params.param("adapter.proj.w")?)?;
    let proj_b = tape.param(params.param("adapter.proj.b")?)?;
    let fc1_w = tape.param(params.param("adapter.fc1.w")?)?;
    let fc1_b = tape.param(params.param("adapter.fc1.b")?)?;
    let fc2_w = tape.param(params.param("adapter.fc2.w")?)?;
    let fc2_b = tape.param(params.param("adapter.fc2.b")?)?;

    let projected = tape.matmul(feats2d, proj_w)?;
    let projected = tape.add_row_broadcast(projected, proj_b)?;
    let h = tape.matmul(projected, fc1_w)?;
    let h = tape.add_row_broadcast(h, fc1_b)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, fc2_w)?;
    tape.add_row_broadcast(out, fc2_b)
}

fn transformer_layers(
    tape: &mut Tape,
    params: &ModelParams,
    mut x: NodeId,
    layout: &Layout,
) -> Result<NodeId> {
    let cfg = params.config();
    let key_active = layout.key_active();
    for i in 0..cfg.n_layers {
        let ln1_g = tape.param(params.param(&layer_name(i, "ln1.g"))?)?;
        let ln1_b = tape.param(params.param(&layer_name(i, "ln1.b"))?)?;
        let a = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let wq = tape.param(params.param(&layer_name(i, "attn.wq"))?)?;
        let wk = tape.param(params.param(&layer_name(i, "attn.wk"))?)?;
        let wv = tape.param(params.param(&layer_name(i, "attn.wv"))?)?;
        let wo = tape.param(params.param(&layer_name(i, "attn.wo"))?)?;
        let q = tape.matmul(a, wq)?;
        let k = tape.matmul(a, wk)?;
        let v = tape.matmul(a, wv)?;
        let att = tape.causal_attention(
            q,
            k,
            v,
            AttentionMeta {
                batch: layout.b,
                seq: layout.s,
                heads: cfg.n_heads,
                key_active: key_active.clone(),
            },
        )?;
        let o = tape.matmul(att, wo)?;
        x = tape.add(x, o)?;

        let ln2_g = tape.param(params.param(&layer_name(i, "ln2.g"))?)?;
        let ln2_b = tape.param(params.param(&layer_name(i, "ln2.b"))?)?;
        let c = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let w_in = tape.param(params.param(&layer_name(i, "ffn.w_in"))?)?;
        let b_in = tape.param(params.param(&layer_name(i, "ffn.b_in"))?)?;
        let w_out = tape.param(params.param(&layer_name(i, "ffn.w_out"))?)?;
        let b_out = tape.param(params.param(&layer_name(i, "ffn.b_out"))?)?;
        let f = tape.matmul(c, w_in)?;
        let f = tape.add_row_broadcast(f, b_in)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w_out)?;
        let f = tape.add_row_broadcast(f, b_out)?;
        x = tape.add(x, f)?;
    }
    Ok(x)
}

/// Positional rows for slots `0..s` of each sample.
fn positional(tape: &mut Tape, params: &ModelParams, b: usize, s: usize) -> Result<NodeId> {
    let pos = tape.param(params.param("embed.pos")?)?;
    let mut rows = Vec::with_capacity(b * s);
    for _ in 0..b {
        rows.extend(0..s);
    }
    tape.gather_rows(pos, rows)
}

struct BuiltStream {
    hidden: NodeId,
    layout: Layout,
}

/// Records the full `[visual | instruction | answer]` stream and returns
/// the final-layer hidden states `[B·S × d_model]`.
fn build_stream(
    tape: &mut Tape,
    params: &ModelParams,
    feats: &Tensor,
    instr: &IdMatrix,
    answers: Option<&IdMatrix>,
) -> Result<BuiltStream> {
    let cfg = params.config();
    let [b, m, d_img] = feats.shape() else {
        return Err(Error::Dim("image features must be [B, M, d_img]".into()));
    };
    let (b, m) = (*b, *m);
    if m != cfg.visual_tokens || *d_img != cfg.d_img {
        return Err(Error::Dim(format!(
            "image features [B, {m}, {d_img}] do not match config [B, {}, {}]",
            cfg.visual_tokens, cfg.d_img
        )));
    }
    let n = instr.cols();
    let t = answers.map_or(0, |a| a.cols());
    let s = m + n + t;
    if s > cfg.max_seq {
        return Err(Error::Capacity(format!(
            "sequence length {s} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let layout = Layout {
        b,
        m,
        n,
        t,
        s,
        instr_len: (0..b).map(|r| instr.active_len(r)).collect(),
        ans_len: (0..b).map(|r| answers.map_or(0, |a| a.active_len(r))).collect(),
    };
    if layout.instr_len.iter().any(|&l| l == 0) {
        return Err(Error::Contract("every sample needs an instruction token".into()));
    }

    // visual tokens through the adapter
    let feats2d = tape.leaf(feats.clone().reshape(vec![b * m, cfg.d_img])?);
    let visual = adapter_chain(tape, params, feats2d)?;

    // text embeddings (padded slots gather their ids too; masking keeps
    // them out of attention and the loss)
    let tok = tape.param(params.param("embed.tok")?)?;
    let mut parts = vec![visual];
    let mut src: Vec<(u32, u32)> = Vec::with_capacity(b * s);
    let instr_part = if n > 0 {
        let ids: Vec<usize> = instr.ids().iter().map(|&i| i as usize).collect();
        parts.push(tape.gather_rows(tok, ids)?);
        Some(parts.len() - 1)
    } else {
        None
    };
    let ans_part = if t > 0 {
        let ids: Vec<usize> = answers.unwrap().ids().iter().map(|&i| i as usize).collect();
        parts.push(tape.gather_rows(tok, ids)?);
        Some(parts.len() - 1)
    } else {
        None
    };
    for bi in 0..b {
        for j in 0..m {
            src.push((0, (bi * m + j) as u32));
        }
        if let Some(p) = instr_part {
            for j in 0..n {
                src.push((p as u32, (bi * n + j) as u32));
            }
        }
        if let Some(p) = ans_part {
            for j in 0..t {
                src.push((p as u32, (bi * t + j) as u32));
            }
        }
    }
    let assembled = tape.interleave(parts, src)?;
    let pos = positional(tape, params, b, s)?;
    let x = tape.add(assembled, pos)?;

    let hidden = transformer_layers(tape, params, x, &layout)?;
    Ok(BuiltStream { hidden, layout })
}

/// Records the visual-only stream (`seq = M`) and returns the final-layer
/// states `[B·M × d_model]` — bit-identical to the visual rows of a full
/// forward, at a fraction of the cost.
pub fn visual_stream_node(tape: &mut Tape, params: &ModelParams, feats: &Tensor) -> Result<NodeId> {
    let cfg = params.config();
    let [b, m, d_img] = feats.shape() else {
        return Err(Error::Dim("image features must be [B, M, d_img]".into()));
    };
    let (b, m) = (*b, *m);
    if m != cfg.visual_tokens || *d_img != cfg.d_img {
        return Err(Error::Dim(format!(
            "image features [B, {m}, {d_img}] do not match config [B, {}, {}]",
            cfg.visual_tokens, cfg.d_img
        )));
    }
    let layout = Layout {
        b,
        m,
        n: 0,
        t: 0,
        s: m,
        instr_len: vec![0; b],
        ans_len: vec![0; b],
    };
    let feats2d = tape.leaf(feats.clone().reshape(vec![b * m, cfg.d_img])?);
    let visual = adapter_chain(tape, params, feats2d)?;
    let pos = positional(tape, params, b, m)?;
    let x = tape.add(visual, pos)?;
    transformer_layers(tape, params, x, &layout)
}

// ---------------------------------------------------------------------------
// public operations

/// Adapter output only: `[B, M, d_model]` visual tokens before the
/// transformer.
pub fn encode_visual(params: &ModelParams, image_feats: &Tensor) -> Result<Tensor> {
    let cfg = params.config();
    let [b, m, d_img] = image_feats.shape() else {
        return Err(Error::Dim("image features must be [B, M, d_img]".into()));
    };
    if *d_img != cfg.d_img {
        return Err(Error::Dim(format!(
            "feature dim {d_img} does not match config d_img {}",
            cfg.d_img
        )));
    }
    let (b, m) = (*b, *m);
    let mut tape = Tape::new();
    let feats2d = tape.leaf(image_feats.clone().reshape(vec![b * m, cfg.d_img])?);
    let out = adapter_chain(&mut tape, params, feats2d)?;
    tape.value(out).clone().reshape(vec![b, m, cfg.d_model])
}

/// Teacher-forced forward pass.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<ForwardOutput> {
    batch.validate_for(params.config())?;
    let mut tape = Tape::new();
    let stream = build_stream(
        &mut tape,
        params,
        &batch.image_feats,
        &batch.instr_ids,
        Some(&batch.answer_ids),
    )?;
    let layout = &stream.layout;
    let cfg = params.config();

    let visual = tape.gather_rows(stream.hidden, layout.visual_rows())?;
    let zvl = tape.gather_rows(stream.hidden, layout.zvl_rows())?;

    let mut pred_rows = Vec::with_capacity(layout.b * layout.t);
    for bi in 0..layout.b {
        for ti in 0..layout.t {
            pred_rows.push(layout.pred_row(bi, ti));
        }
    }
    let head = tape.param(params.param("head.w")?)?;
    let pred = tape.gather_rows(stream.hidden, pred_rows)?;
    let logits = tape.matmul(pred, head)?;

    Ok(ForwardOutput {
        logits: tape
            .value(logits)
            .clone()
            .reshape(vec![layout.b, layout.t, cfg.vocab])?,
        visual_hidden: tape
            .value(visual)
            .clone()
            .reshape(vec![layout.b, layout.m, cfg.d_model])?,
        zvl: tape.value(zvl).clone().reshape(vec![layout.b, cfg.d_model])?,
    })
}

/// Mean negative log-likelihood of the unpadded answer tokens, as a scalar
/// node ready for backward.
pub fn task_loss(params: &ModelParams, batch: &Batch) -> Result<LossNode> {
    batch.validate_for(params.config())?;
    let mut tape = Tape::new();
    let stream = build_stream(
        &mut tape,
        params,
        &batch.image_feats,
        &batch.instr_ids,
        Some(&batch.answer_ids),
    )?;
    let layout = &stream.layout;

    let mut pred_rows = Vec::with_capacity(layout.b * layout.t);
    let mut gold = Vec::with_capacity(layout.b * layout.t);
    let mut weights = Vec::with_capacity(layout.b * layout.t);
    for bi in 0..layout.b {
        for ti in 0..layout.t {
            pred_rows.push(layout.pred_row(bi, ti));
            gold.push(batch.answer_ids.id(bi, ti) as usize);
            weights.push(if batch.answer_ids.active(bi, ti) { 1.0 } else { 0.0 });
        }
    }
    let head = tape.param(params.param("head.w")?)?;
    let pred = tape.gather_rows(stream.hidden, pred_rows)?;
    let logits = tape.matmul(pred, head)?;
    let node = tape.masked_cross_entropy(logits, gold, weights)?;
    Ok(LossNode { tape, node })
}

/// Final-layer visual states `[B, M, d_model]` without building the text
/// part of the stream.
pub fn visual_hidden(params: &ModelParams, image_feats: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let node = visual_stream_node(&mut tape, params, image_feats)?;
    let [b, m, _] = image_feats.shape() else {
        return Err(Error::Dim("image features must be [B, M, d_img]".into()));
    };
    tape.value(node)
        .clone()
        .reshape(vec![*b, *m, params.config().d_model])
}

/// Greedy argmax continuation for every sample; ties break toward the
/// smaller token id. Returns `max_len` tokens per sample.
pub fn greedy_decode(
    params: &ModelParams,
    image_feats: &Tensor,
    instr_ids: &IdMatrix,
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    let [b, m, d_img] = image_feats.shape() else {
        return Err(Error::Dim("image features must be [B, M, d_img]".into()));
    };
    let (b, m, d_img) = (*b, *m, *d_img);
    if instr_ids.rows() != b {
        return Err(Error::Dim(format!("instr rows {} != batch {b}", instr_ids.rows())));
    }
    if max_len == 0 {
        return Ok(vec![Vec::new(); b]);
    }
    let results: Vec<Result<Vec<u32>>> = par::map_indexed(b, |bi| {
        let feats = Tensor::new(
            vec![1, m, d_img],
            image_feats.data()[bi * m * d_img..(bi + 1) * m * d_img].to_vec(),
        )?;
        let n_real = instr_ids.active_len(bi);
        let instr = IdMatrix::full(1, n_real, instr_ids.row_ids(bi)[..n_real].to_vec())?;
        let mut generated: Vec<u32> = Vec::with_capacity(max_len);
        for step in 0..max_len {
            let answers = if generated.is_empty() {
                None
            } else {
                Some(IdMatrix::full(1, generated.len(), generated.clone())?)
            };
            let mut tape = Tape::new();
            let stream = build_stream(&mut tape, params, &feats, &instr, answers.as_ref())?;
            let last_row = stream.layout.pred_row(0, step);
            let head = tape.param(params.param("head.w")?)?;
            let pred = tape.gather_rows(stream.hidden, vec![last_row])?;
            let logits = tape.matmul(pred, head)?;
            let row = tape.value(logits).data();
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            generated.push(best as u32);
        }
        Ok(generated)
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests;
