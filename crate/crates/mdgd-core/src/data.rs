//! Procedural multimodal task generator.
//!
//! Each scene has `A` latent attributes with `C` categories each. A fixed
//! per-patch mixing matrix `E_m` (drawn once from the dataset seed) maps
//! the concatenated one-hot attribute vector into `d_img` image features,
//! plus Gaussian pixel noise. Three task families share one scene world:
//!
//! - **pretrain**: a fixed "describe" instruction; the answer spells out
//!   all `A` attribute values — rich visual supervision.
//! - **downstream**: a query about one focus attribute; the single answer
//!   token comes from an alphabet disjoint from the pretrain answers,
//!   which forces an output-distribution shift (the forgetting driver).
//! - **probe**: held-out pretrain-format samples at reserved indices,
//!   scoring per-attribute accuracy of a trained model.
//!
//! Generation is a pure function of `(spec, n, seed)`: every sample is
//! reproducible from the dataset seed, the task tag and the sample index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, IdMatrix};
use crate::rng::RngState;
use crate::spectral::singular_values;
use crate::tensor::Tensor;

/// Scene geometry: attribute layout, noise level and image shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Attribute count A.
    pub attributes: usize,
    /// Categories per attribute C.
    pub categories: usize,
    pub noise_sigma: f64,
    /// Patches per image M.
    pub visual_tokens: usize,
    pub d_img: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.attributes == 0 || self.categories < 2 || self.visual_tokens == 0 || self.d_img == 0
        {
            return Err(Error::Config(
                "scene needs attributes ≥ 1, categories ≥ 2, visual_tokens ≥ 1, d_img ≥ 1".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("scene.noise_sigma must be ≥ 0".into()));
        }
        Ok(())
    }

    /// One-hot width A·C.
    pub fn onehot_width(&self) -> usize {
        self.attributes * self.categories
    }
}

// Stream tags for sample index spaces.
const TAG_MIXING: u64 = 0x0001;
const TAG_PRETRAIN_FAMILY: u64 = 0x0002; // pretrain + probe share a world stream
const TAG_DOWNSTREAM: u64 = 0x0003;

/// Probe samples live at indices `PROBE_INDEX_BASE..` of the pretrain
/// stream, so they are disjoint from any training set smaller than 2³².
pub const PROBE_INDEX_BASE: u64 = 1 << 32;
/// Held-out downstream evaluation indices.
pub const EVAL_INDEX_BASE: u64 = 1 << 33;

/// Per-patch mixing matrices, fixed per dataset seed.
#[derive(Clone, Debug)]
pub struct Mixing {
    /// `visual_tokens` matrices of shape `[d_img × A·C]`, scaled so patch
    /// features are O(1).
    per_patch: Vec<Tensor>,
}

impl Mixing {
    /// Draws the mixing matrices from `seed`, retrying with successor
    /// sub-seeds until the stacked `(M·d_img) × (A·C)` map has full column
    /// rank (σ_min > 1e-6). The stacked map — the whole image — is what
    /// must determine the attributes; a single patch cannot once
    /// `A·C > d_img`.
    pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Mixing> {
        spec.validate()?;
        let w = spec.onehot_width();
        let scale = 1.0 / (spec.attributes as f64).sqrt();
        for attempt in 0..16u64 {
            let mut rng = RngState::new(seed).derive(TAG_MIXING).derive(attempt);
            let per_patch: Vec<Tensor> = (0..spec.visual_tokens)
                .map(|_| {
                    let data: Vec<f64> = (0..spec.d_img * w)
                        .map(|_| rng.next_normal() * scale)
                        .collect();
                    Tensor::new(vec![spec.d_img, w], data).expect("matching length")
                })
                .collect();

            let mut stacked = Vec::with_capacity(spec.visual_tokens * spec.d_img * w);
            for p in &per_patch {
                stacked.extend_from_slice(p.data());
            }
            let stacked = Tensor::new(vec![spec.visual_tokens * spec.d_img, w], stacked)?;
            if spec.visual_tokens * spec.d_img >= w {
                let spectrum = singular_values(&stacked)?;
                let sigma_min = *spectrum.values().last().expect("nonempty spectrum");
                if sigma_min > 1e-6 {
                    return Ok(Mixing { per_patch });
                }
            } else {
                return Err(Error::Config(format!(
                    "scene cannot be invertible: M·d_img = {} < A·C = {w}",
                    spec.visual_tokens * spec.d_img
                )));
            }
        }
        Err(Error::Numeric(
            "mixing generation failed to reach σ_min > 1e-6 in 16 attempts".into(),
        ))
    }

    pub fn patch(&self, m: usize) -> &Tensor {
        &self.per_patch[m]
    }

    /// Noiseless features for an attribute assignment, `[M × d_img]`.
    pub fn clean_features(&self, spec: &SceneSpec, attrs: &[u8]) -> Vec<f64> {
        let w = spec.onehot_width();
        let mut feats = vec![0.0; spec.visual_tokens * spec.d_img];
        for (m, patch) in self.per_patch.iter().enumerate() {
            let out = &mut feats[m * spec.d_img..(m + 1) * spec.d_img];
            for (a, &val) in attrs.iter().enumerate() {
                let col = a * spec.categories + val as usize;
                for (i, o) in out.iter_mut().enumerate() {
                    *o += patch.data()[i * w + col];
                }
            }
        }
        feats
    }
}

// ---------------------------------------------------------------------------
// vocabulary layout

/// Fixed token-id layout shared by every dataset.
pub mod vocab {
    /// Padding id.
    pub const PAD: u32 = 0;
    /// Two-token "describe everything" instruction.
    pub const PRETRAIN_INSTR: [u32; 2] = [1, 2];
    /// Downstream query prefix; followed by the focus attribute's name token.
    pub const DOWNSTREAM_PREFIX: u32 = 3;
    const ATTR_NAME_BASE: u32 = 4;

    pub fn attr_name_token(attr: usize) -> u32 {
        ATTR_NAME_BASE + attr as u32
    }

    pub fn downstream_instr(focus: usize) -> Vec<u32> {
        vec![DOWNSTREAM_PREFIX, attr_name_token(focus)]
    }

    fn pretrain_answer_base(attrs: usize) -> u32 {
        ATTR_NAME_BASE + attrs as u32
    }

    /// Answer token spelling "attribute `attr` has value `val`"; one
    /// disjoint alphabet per attribute.
    pub fn pretrain_answer_token(attr: usize, val: usize, attrs: usize, categories: usize) -> u32 {
        pretrain_answer_base(attrs) + (attr * categories + val) as u32
    }

    /// Downstream answer alphabet, disjoint from every pretrain answer.
    pub fn downstream_answer_token(val: usize, attrs: usize, categories: usize) -> u32 {
        pretrain_answer_base(attrs) + (attrs * categories) as u32 + val as u32
    }

    /// Smallest vocabulary covering all tokens for an (A, C) scene.
    pub fn min_vocab(attrs: usize, categories: usize) -> usize {
        downstream_answer_token(categories - 1, attrs, categories) as usize + 1
    }
}

// ---------------------------------------------------------------------------
// samples and datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Pretrain,
    Downstream,
    Probe,
}

impl std::fmt::Display for TaskTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskTag::Pretrain => write!(f, "pretrain"),
            TaskTag::Downstream => write!(f, "downstream"),
            TaskTag::Probe => write!(f, "probe"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    pub attrs: Vec<u8>,
    /// `[M × d_img]` image features.
    pub image_feats: Tensor,
    pub instr: Vec<u32>,
    pub answer: Vec<u32>,
    pub tag: TaskTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub tag: TaskTag,
    /// Focus attribute for downstream sets; unused otherwise.
    pub focus: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Assembles samples `idx` into a batch (all samples of one dataset
    /// share instruction/answer lengths, so masks are all-active).
    pub fn batch_of(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let m = self.spec.visual_tokens;
        let d = self.spec.d_img;
        let n = self.samples[idx[0]].instr.len();
        let t = self.samples[idx[0]].answer.len();
        let mut feats = Vec::with_capacity(idx.len() * m * d);
        let mut instr = Vec::with_capacity(idx.len() * n);
        let mut answers = Vec::with_capacity(idx.len() * t);
        for &i in idx {
            let s = &self.samples[i];
            if s.instr.len() != n || s.answer.len() != t {
                return Err(Error::Contract(
                    "samples in one batch must share instruction/answer lengths".into(),
                ));
            }
            feats.extend_from_slice(s.image_feats.data());
            instr.extend_from_slice(&s.instr);
            answers.extend_from_slice(&s.answer);
        }
        Batch::new(
            Tensor::new(vec![idx.len(), m, d], feats)?,
            IdMatrix::full(idx.len(), n, instr)?,
            IdMatrix::full(idx.len(), t, answers)?,
        )
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        self.batch_of(&(0..self.len()).collect::<Vec<_>>())
    }
}

fn draw_sample(
    spec: &SceneSpec,
    mixing: &Mixing,
    seed: u64,
    family: u64,
    index: u64,
    tag: TaskTag,
    instr: Vec<u32>,
    answer_of: impl Fn(&[u8]) -> Vec<u32>,
) -> Sample {
    let mut rng = RngState::new(seed).derive(family).derive(index);
    let attrs: Vec<u8> = (0..spec.attributes)
        .map(|_| rng.next_below(spec.categories as u64) as u8)
        .collect();
    let mut feats = mixing.clean_features(spec, &attrs);
    if spec.noise_sigma > 0.0 {
        for f in feats.iter_mut() {
            *f += spec.noise_sigma * rng.next_normal();
        }
    }
    let answer = answer_of(&attrs);
    Sample {
        index,
        attrs,
        image_feats: Tensor::new(vec![spec.visual_tokens, spec.d_img], feats)
            .expect("matching length"),
        instr,
        answer,
        tag,
    }
}

fn gen_family(
    spec: &SceneSpec,
    n: usize,
    seed: u64,
    family: u64,
    index_base: u64,
    tag: TaskTag,
    focus: usize,
    instr: Vec<u32>,
    answer_of: impl Fn(&[u8]) -> Vec<u32> + Copy,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("dataset size must be ≥ 1".into()));
    }
    let mixing = Mixing::generate(spec, seed)?;
    let samples = (0..n as u64)
        .map(|i| {
            draw_sample(spec, &mixing, seed, family, index_base + i, tag, instr.clone(), answer_of)
        })
        .collect();
    Ok(Dataset { spec: spec.clone(), seed, tag, focus, samples })
}

/// Rich-supervision pretraining set: describe all attributes.
pub fn gen_pretrain(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    let (a, c) = (spec.attributes, spec.categories);
    gen_family(
        spec,
        n,
        seed,
        TAG_PRETRAIN_FAMILY,
        0,
        TaskTag::Pretrain,
        0,
        vocab::PRETRAIN_INSTR.to_vec(),
        move |attrs| {
            attrs
                .iter()
                .enumerate()
                .map(|(i, &v)| vocab::pretrain_answer_token(i, v as usize, a, c))
                .collect()
        },
    )
}

/// Narrow-supervision downstream set: one focus attribute, answered in a
/// token alphabet disjoint from the pretrain answers.
pub fn gen_downstream(spec: &SceneSpec, n: usize, seed: u64, focus: usize) -> Result<Dataset> {
    gen_downstream_at(spec, n, seed, focus, 0)
}

/// Held-out downstream samples for evaluation (reserved index range).
pub fn gen_downstream_eval(spec: &SceneSpec, n: usize, seed: u64, focus: usize) -> Result<Dataset> {
    gen_downstream_at(spec, n, seed, focus, EVAL_INDEX_BASE)
}

fn gen_downstream_at(
    spec: &SceneSpec,
    n: usize,
    seed: u64,
    focus: usize,
    index_base: u64,
) -> Result<Dataset> {
    if focus >= spec.attributes {
        return Err(Error::Contract(format!(
            "focus attribute {focus} outside 0..{}",
            spec.attributes
        )));
    }
    let (a, c) = (spec.attributes, spec.categories);
    gen_family(
        spec,
        n,
        seed,
        TAG_DOWNSTREAM,
        index_base,
        TaskTag::Downstream,
        focus,
        vocab::downstream_instr(focus),
        move |attrs| vec![vocab::downstream_answer_token(attrs[focus] as usize, a, c)],
    )
}

/// Held-out pretrain-format probe set; indices are disjoint from any
/// pretraining set by construction.
pub fn gen_probe(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    let (a, c) = (spec.attributes, spec.categories);
    gen_family(
        spec,
        n,
        seed,
        TAG_PRETRAIN_FAMILY,
        PROBE_INDEX_BASE,
        TaskTag::Probe,
        0,
        vocab::PRETRAIN_INSTR.to_vec(),
        move |attrs| {
            attrs
                .iter()
                .enumerate()
                .map(|(i, &v)| vocab::pretrain_answer_token(i, v as usize, a, c))
                .collect()
        },
    )
}
