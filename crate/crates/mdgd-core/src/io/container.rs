//! Single-file binary tensor container for checkpoints and datasets.
//!
//! Layout:
//!
//! ```text
//! magic "MDGD" (4 bytes)
//! format version  (u32 little-endian)
//! manifest length (u64 little-endian)
//! manifest        (UTF-8 TOML: kind, config/dataset metadata, tensor table)
//! payload         (f64 little-endian, tensors concatenated in manifest order)
//! ```
//!
//! The manifest stays greppable text; the payload stores exact float bits,
//! so `load ∘ save ∘ load` is bit-identical. Loaders reject unknown
//! versions loudly rather than reinterpreting. Writes go to a temp file in
//! the target directory followed by a rename.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamSet, Parameter};
use crate::data::{Dataset, Sample, SceneSpec, TaskTag};
use crate::error::{Error, Result};
use crate::io::RunConfig;
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MDGD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    /// Byte offset inside the payload.
    offset: u64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: SceneSpec,
    seed: u64,
    tag: TaskTag,
    focus: usize,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String, // "checkpoint" | "dataset"
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<DatasetMeta>,
    #[serde(default)]
    tensor: Vec<ManifestTensor>,
}

fn write_container(path: &Path, manifest: &Manifest, tensors: &[&Tensor]) -> Result<()> {
    let manifest_text = toml::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest_text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(manifest_text.as_bytes());
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.sync_all().map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_container(path: &Path) -> Result<(Manifest, Vec<f64>)> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{}: not an MDGD container", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: container version {version} unsupported (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Format(format!("{}: truncated manifest", path.display())));
    }
    let manifest_text = std::str::from_utf8(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::Format(format!("{}: manifest is not UTF-8: {e}", path.display())))?;
    let manifest: Manifest = toml::from_str(manifest_text)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {}", path.display(), e.message())))?;

    let payload = &bytes[16 + manifest_len..];
    let mut expected_bytes = 0u64;
    for (i, t) in manifest.tensor.iter().enumerate() {
        if t.offset != expected_bytes {
            return Err(Error::Format(format!(
                "{}: tensor {i} offset {} != running total {expected_bytes}",
                path.display(),
                t.offset
            )));
        }
        expected_bytes += 8 * t.shape.iter().product::<usize>() as u64;
    }
    if payload.len() as u64 != expected_bytes {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, manifest implies {expected_bytes}",
            path.display(),
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((manifest, values))
}

fn slice_tensor(values: &[f64], offset: u64, shape: &[usize]) -> Result<Tensor> {
    let start = offset as usize / 8;
    let len: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), values[start..start + len].to_vec())
}

// ---------------------------------------------------------------------------
// checkpoints

pub fn write_checkpoint(path: &Path, params: &ModelParams, config: &RunConfig) -> Result<()> {
    let mut entries = Vec::with_capacity(params.set().len());
    let mut tensors = Vec::with_capacity(params.set().len());
    let mut offset = 0u64;
    for p in params.set().iter() {
        entries.push(ManifestTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            trainable: p.trainable,
        });
        offset += 8 * p.value.len() as u64;
        tensors.push(&p.value);
    }
    let manifest = Manifest {
        kind: "checkpoint".into(),
        config: Some(config.clone()),
        dataset: None,
        tensor: entries,
    };
    write_container(path, &manifest, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, RunConfig)> {
    let (manifest, values) = read_container(path)?;
    if manifest.kind != "checkpoint" {
        return Err(Error::Format(format!(
            "{}: container holds a {:?}, not a checkpoint",
            path.display(),
            manifest.kind
        )));
    }
    let config = manifest
        .config
        .ok_or_else(|| Error::Format(format!("{}: checkpoint lacks a config", path.display())))?;
    let mut set = ParamSet::new();
    for t in &manifest.tensor {
        set.insert(Parameter::new(
            t.name.clone(),
            slice_tensor(&values, t.offset, &t.shape)?,
            t.trainable,
        ))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    let params = ModelParams::from_parts(config.model.clone(), set)?;
    Ok((params, config))
}

// ---------------------------------------------------------------------------
// datasets

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Contract("cannot serialize an empty dataset".into()));
    }
    let spec = &ds.spec;
    let a = spec.attributes;
    let n_instr = ds.samples[0].instr.len();
    let n_ans = ds.samples[0].answer.len();

    let mut indices = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n * a);
    let mut feats = Vec::with_capacity(n * spec.visual_tokens * spec.d_img);
    let mut instr = Vec::with_capacity(n * n_instr);
    let mut answers = Vec::with_capacity(n * n_ans);
    for s in &ds.samples {
        indices.push(s.index as f64);
        attrs.extend(s.attrs.iter().map(|&v| v as f64));
        feats.extend_from_slice(s.image_feats.data());
        instr.extend(s.instr.iter().map(|&v| v as f64));
        answers.extend(s.answer.iter().map(|&v| v as f64));
    }
    let tensors = [
        ("answer_ids", Tensor::new(vec![n, n_ans], answers)?),
        ("attrs", Tensor::new(vec![n, a], attrs)?),
        ("image_feats", Tensor::new(vec![n, spec.visual_tokens, spec.d_img], feats)?),
        ("indices", Tensor::new(vec![n], indices)?),
        ("instr_ids", Tensor::new(vec![n, n_instr], instr)?),
    ];
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(ManifestTensor {
            name: (*name).into(),
            shape: t.shape().to_vec(),
            offset,
            trainable: false,
        });
        offset += 8 * t.len() as u64;
    }
    let manifest = Manifest {
        kind: "dataset".into(),
        config: None,
        dataset: Some(DatasetMeta {
            spec: spec.clone(),
            seed: ds.seed,
            tag: ds.tag,
            focus: ds.focus,
            n,
        }),
        tensor: entries,
    };
    let refs: Vec<&Tensor> = tensors.iter().map(|(_, t)| t).collect();
    write_container(path, &manifest, &refs)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (manifest, values) = read_container(path)?;
    if manifest.kind != "dataset" {
        return Err(Error::Format(format!(
            "{}: container holds a {:?}, not a dataset",
            path.display(),
            manifest.kind
        )));
    }
    let meta = manifest
        .dataset
        .ok_or_else(|| Error::Format(format!("{}: dataset lacks metadata", path.display())))?;
    let find = |name: &str| -> Result<Tensor> {
        let t = manifest
            .tensor
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("{}: missing tensor {name:?}", path.display())))?;
        slice_tensor(&values, t.offset, &t.shape)
    };
    let indices = find("indices")?;
    let attrs = find("attrs")?;
    let feats = find("image_feats")?;
    let instr = find("instr_ids")?;
    let answers = find("answer_ids")?;

    let n = meta.n;
    let a = meta.spec.attributes;
    let patch = meta.spec.visual_tokens * meta.spec.d_img;
    let n_instr = instr.shape()[1];
    let n_ans = answers.shape()[1];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(Sample {
            index: indices.data()[i] as u64,
            attrs: attrs.data()[i * a..(i + 1) * a].iter().map(|&v| v as u8).collect(),
            image_feats: Tensor::new(
                vec![meta.spec.visual_tokens, meta.spec.d_img],
                feats.data()[i * patch..(i + 1) * patch].to_vec(),
            )?,
            instr: instr.data()[i * n_instr..(i + 1) * n_instr]
                .iter()
                .map(|&v| v as u32)
                .collect(),
            answer: answers.data()[i * n_ans..(i + 1) * n_ans]
                .iter()
                .map(|&v| v as u32)
                .collect(),
            tag: meta.tag,
        });
    }
    Ok(Dataset { spec: meta.spec, seed: meta.seed, tag: meta.tag, focus: meta.focus, samples })
}
