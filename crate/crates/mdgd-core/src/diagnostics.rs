//! Representation analyses and scoring.
//!
//! Everything the learning curves and tables are built from: per-token and
//! dataset-level effective ranks of the visual states, raw representation
//! dumps for external embedding tools, greedy-decode accuracy tables, and
//! a run-comparison merge. All file output is RFC-4180-style CSV (header
//! row, `.` decimal, UTF-8) or JSONL.

use std::io::Write;
use std::path::PathBuf;

use crate::data::{Dataset, TaskTag};
use crate::error::{Error, Result};
use crate::io::RunConfig;
use crate::model::{forward, greedy_decode, visual_hidden, ModelParams};
use crate::optim::StepDiagnostics;
use crate::par;
use crate::spectral::effective_rank;
use crate::tensor::Tensor;

/// Evaluation batches are chunked to keep activation memory flat.
const EVAL_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// effective-rank reports

/// Effective ranks of the final-layer visual states over an eval set.
#[derive(Clone, Debug, PartialEq)]
pub struct ErankReport {
    pub model_tag: String,
    pub eval_set: String,
    /// One erank per visual position: position `j`'s final-layer states
    /// stacked over the eval set into an `n×d_model` matrix.
    pub per_position: Vec<f64>,
    /// Erank of all positions stacked, an `(n·M)×d_model` matrix.
    pub dataset_level: f64,
    /// Position indices sorted by descending erank.
    pub top_positions: Vec<usize>,
}

/// Collects `visual_hidden` over a dataset as one `[n, M, d_model]` block.
fn collect_visual_states(params: &ModelParams, eval: &Dataset) -> Result<Tensor> {
    let cfg = params.config();
    let n = eval.len();
    let m = cfg.visual_tokens;
    let d = cfg.d_model;
    let mut all = Vec::with_capacity(n * m * d);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = eval.batch_of(chunk)?;
        let h = visual_hidden(params, &batch.image_feats)?;
        all.extend_from_slice(h.data());
    }
    Tensor::new(vec![n, m, d], all)
}

pub fn per_token_erank(params: &ModelParams, eval: &Dataset, model_tag: &str) -> Result<ErankReport> {
    if eval.is_empty() {
        return Err(Error::Contract("per_token_erank: eval set is empty".into()));
    }
    let states = collect_visual_states(params, eval)?;
    let [n, m, d] = states.shape() else { unreachable!("collect returns 3-D") };
    let (n, m, d) = (*n, *m, *d);

    let per_position: Vec<Result<f64>> = par::map_indexed(m, |j| {
        let mut mat = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &states.data()[(i * m + j) * d..(i * m + j + 1) * d];
            mat.extend_from_slice(row);
        }
        effective_rank(&Tensor::new(vec![n, d], mat)?)
    });
    let per_position: Vec<f64> = per_position.into_iter().collect::<Result<_>>()?;

    let dataset_level = effective_rank(&states.clone().reshape(vec![n * m, d])?)?;

    let mut top_positions: Vec<usize> = (0..m).collect();
    top_positions.sort_by(|&a, &b| {
        per_position[b]
            .partial_cmp(&per_position[a])
            .expect("eranks are finite")
            .then(a.cmp(&b))
    });
    Ok(ErankReport {
        model_tag: model_tag.to_string(),
        eval_set: eval.tag.to_string(),
        per_position,
        dataset_level,
        top_positions,
    })
}

/// Appends one report's rows to a CSV writer. Schema:
/// `model_tag,eval_set,position,erank,rank` where `position` is `dataset`
/// for the stacked-matrix row (empty rank).
pub fn erank_csv<W: Write>(reports: &[ErankReport], w: &mut W) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io("<erank csv>", e);
    writeln!(w, "model_tag,eval_set,position,erank,rank").map_err(io_err)?;
    for r in reports {
        for (rank, &pos) in r.top_positions.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.model_tag,
                r.eval_set,
                pos,
                r.per_position[pos],
                rank
            )
            .map_err(io_err)?;
        }
        writeln!(w, "{},{},dataset,{},", r.model_tag, r.eval_set, r.dataset_level)
            .map_err(io_err)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// representation dumps

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReprKind {
    /// Final-layer state at the last instruction token.
    Zvl,
    /// Final-layer state at the last visual token.
    VisualLast,
}

impl std::str::FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zvl" => Ok(ReprKind::Zvl),
            "visual_last" => Ok(ReprKind::VisualLast),
            other => Err(Error::Config(format!(
                "unknown representation {other:?} (expected zvl | visual_last)"
            ))),
        }
    }
}

/// Dumps one row per sample: `sample_id, model_tag, v0..v{d_model−1}`.
/// The embedding/T-SNE step happens in external tooling.
pub fn repr_dump<W: Write>(
    params: &ModelParams,
    eval: &Dataset,
    kind: ReprKind,
    model_tag: &str,
    w: &mut W,
) -> Result<()> {
    if eval.is_empty() {
        return Err(Error::Contract("repr_dump: eval set is empty".into()));
    }
    let io_err = |e: std::io::Error| Error::io("<repr csv>", e);
    let cfg = params.config();
    let d = cfg.d_model;
    let mut header = String::from("sample_id,model_tag");
    for j in 0..d {
        header.push_str(&format!(",v{j}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;

    let idx: Vec<usize> = (0..eval.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = eval.batch_of(chunk)?;
        let rows: Tensor = match kind {
            ReprKind::Zvl => forward(params, &batch)?.zvl,
            ReprKind::VisualLast => {
                let h = visual_hidden(params, &batch.image_feats)?;
                let m = cfg.visual_tokens;
                let mut out = Vec::with_capacity(chunk.len() * d);
                for i in 0..chunk.len() {
                    out.extend_from_slice(&h.data()[(i * m + m - 1) * d..(i * m + m) * d]);
                }
                Tensor::new(vec![chunk.len(), d], out)?
            }
        };
        for (i, &sample_i) in chunk.iter().enumerate() {
            let mut line = format!("{},{}", eval.samples[sample_i].index, model_tag);
            for v in &rows.data()[i * d..(i + 1) * d] {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(io_err)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scoring

#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub task: String,
    pub accuracy: f64,
}

/// Greedy-decode exact-match accuracies for one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteScores {
    pub suite: String,
    pub tasks: Vec<TaskScore>,
    /// Arithmetic mean over the suite's tasks.
    pub mean: f64,
}

/// Scores a probe/pretrain-format set per attribute, or a downstream set
/// as a single target task.
pub fn evaluate(params: &ModelParams, eval: &Dataset) -> Result<SuiteScores> {
    if eval.is_empty() {
        return Err(Error::Contract("evaluate: eval set is empty".into()));
    }
    let n = eval.len();
    let t_answer = eval.samples[0].answer.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut decoded: Vec<Vec<u32>> = Vec::with_capacity(n);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = eval.batch_of(chunk)?;
        decoded.extend(greedy_decode(params, &batch.image_feats, &batch.instr_ids, t_answer)?);
    }

    match eval.tag {
        TaskTag::Pretrain | TaskTag::Probe => {
            let a = eval.spec.attributes;
            let mut hits = vec![0usize; a];
            for (sample, out) in eval.samples.iter().zip(&decoded) {
                for (t, (&gold, &got)) in sample.answer.iter().zip(out).enumerate() {
                    if gold == got {
                        hits[t] += 1;
                    }
                }
            }
            let tasks: Vec<TaskScore> = hits
                .iter()
                .enumerate()
                .map(|(t, &h)| TaskScore {
                    task: format!("attr_{t}"),
                    accuracy: h as f64 / n as f64,
                })
                .collect();
            let mean = tasks.iter().map(|t| t.accuracy).sum::<f64>() / a as f64;
            Ok(SuiteScores { suite: "probe".into(), tasks, mean })
        }
        TaskTag::Downstream => {
            let hits = eval
                .samples
                .iter()
                .zip(&decoded)
                .filter(|(s, out)| s.answer.as_slice() == out.as_slice())
                .count();
            let accuracy = hits as f64 / n as f64;
            let tasks = vec![TaskScore { task: format!("focus_{}", eval.focus), accuracy }];
            Ok(SuiteScores { suite: "target".into(), tasks, mean: accuracy })
        }
    }
}

/// Harmonic mean of probe average and target accuracy; 0 when both vanish.
pub fn hscore(avg: f64, target: f64) -> f64 {
    if avg + target == 0.0 {
        0.0
    } else {
        2.0 * avg * target / (avg + target)
    }
}

/// Accuracy table assembled from suite fragments.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub probe: Option<SuiteScores>,
    pub target: Option<SuiteScores>,
}

impl ScoreTable {
    pub fn avg(&self) -> Option<f64> {
        self.probe.as_ref().map(|p| p.mean)
    }

    pub fn target_accuracy(&self) -> Option<f64> {
        self.target.as_ref().map(|t| t.mean)
    }

    pub fn hscore(&self) -> Option<f64> {
        match (self.avg(), self.target_accuracy()) {
            (Some(a), Some(t)) => Some(hscore(a, t)),
            _ => None,
        }
    }

    /// Schema: `suite,task,accuracy,avg,hscore`; the avg column carries
    /// the probe mean, hscore is filled once both suites are present.
    pub fn to_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let io_err = |e: std::io::Error| Error::io("<scores csv>", e);
        writeln!(w, "suite,task,accuracy,avg,hscore").map_err(io_err)?;
        let avg = self.avg().map(|v| v.to_string()).unwrap_or_default();
        let hs = self.hscore().map(|v| v.to_string()).unwrap_or_default();
        for suite in [&self.probe, &self.target].into_iter().flatten() {
            for t in &suite.tasks {
                writeln!(w, "{},{},{},{avg},{hs}", suite.suite, t.task, t.accuracy)
                    .map_err(io_err)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// run comparison

/// Merges run directories into one long-format CSV keyed by
/// `(method, seed, step, metric)`. Step traces come from `train.jsonl`;
/// summary metrics (scores, eranks) are included when their files exist
/// in the run directory. `step` is empty on summary rows.
pub fn compare_runs<W: Write>(run_dirs: &[PathBuf], w: &mut W) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io("<compare csv>", e);
    writeln!(w, "method,seed,step,metric,value").map_err(io_err)?;
    for dir in run_dirs {
        let config_path = dir.join("config.toml");
        let config = RunConfig::load(&config_path)?;
        let method = config.optim.method.to_string();
        let seed = config.seed;

        let log_path = dir.join("train.jsonl");
        let text = std::fs::read_to_string(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let entry: StepDiagnostics = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}: {e}", log_path.display())))?;
            let mut emit = |metric: &str, value: f64| {
                writeln!(w, "{method},{seed},{},{metric},{value}", entry.step).map_err(io_err)
            };
            emit("l_vl_theta", entry.l_vl_theta)?;
            if let Some(v) = entry.l_vl_phi {
                emit("l_vl_phi", v)?;
            }
            if let Some(v) = entry.l_v {
                emit("l_v", v)?;
            }
            if let Some(v) = entry.mean_block_cosine {
                emit("mean_block_cosine", v)?;
            }
            if let Some(v) = entry.g_tilde_norm {
                emit("g_tilde_norm", v)?;
            }
            if let Some(v) = entry.mask_fraction {
                emit("mask_fraction", v)?;
            }
            emit("grad_norm_task", entry.grad_norm_task)?;
        }

        let scores_path = dir.join("scores.csv");
        if scores_path.exists() {
            let text = std::fs::read_to_string(&scores_path)
                .map_err(|e| Error::io(scores_path.display().to_string(), e))?;
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 5 {
                    return Err(Error::Format(format!(
                        "{}: expected 5 columns, got {}",
                        scores_path.display(),
                        fields.len()
                    )));
                }
                writeln!(w, "{method},{seed},,score:{}:{},{}", fields[0], fields[1], fields[2])
                    .map_err(io_err)?;
            }
            // avg/hscore are column-constant; emit once from the first row
            if let Some(first) = text.lines().nth(1) {
                let fields: Vec<&str> = first.split(',').collect();
                if !fields[3].is_empty() {
                    writeln!(w, "{method},{seed},,probe_avg,{}", fields[3]).map_err(io_err)?;
                }
                if !fields[4].is_empty() {
                    writeln!(w, "{method},{seed},,hscore,{}", fields[4]).map_err(io_err)?;
                }
            }
        }

        let erank_path = dir.join("erank.csv");
        if erank_path.exists() {
            let text = std::fs::read_to_string(&erank_path)
                .map_err(|e| Error::io(erank_path.display().to_string(), e))?;
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 5 {
                    return Err(Error::Format(format!(
                        "{}: expected 5 columns, got {}",
                        erank_path.display(),
                        fields.len()
                    )));
                }
                writeln!(
                    w,
                    "{method},{seed},,erank:{}:{}:{},{}",
                    fields[0], fields[1], fields[2], fields[3]
                )
                .map_err(io_err)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_downstream, gen_probe, SceneSpec};
    use crate::model::{init_params, ModelConfig};
    use crate::rng::RngState;
    use approx::assert_abs_diff_eq;

    fn tiny() -> (ModelConfig, SceneSpec) {
        let scene = SceneSpec {
            attributes: 2,
            categories: 2,
            noise_sigma: 0.05,
            visual_tokens: 2,
            d_img: 4,
        };
        let cfg = ModelConfig {
            d_img: 4,
            visual_tokens: 2,
            vocab: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq: 8,
            trainable_last_k: 1,
            train_output_head: false,
            seed: 5,
        };
        (cfg, scene)
    }

    #[test]
    fn constant_visual_states_have_unit_erank() {
        let (cfg, scene) = tiny();
        let mut params = init_params(&cfg, &mut RngState::new(1)).unwrap();
        // zero every parameter except a constant adapter bias: every
        // visual state becomes the same vector up to the positional table
        let names: Vec<String> = params.set().iter().map(|p| p.name.clone()).collect();
        for n in &names {
            let p = params.set_mut().get_mut(n).unwrap();
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        params.set_mut().get_mut("adapter.fc2.b").unwrap().value.data_mut()[0] = 1.0;
        let mut probe = gen_probe(&scene, 6, 3).unwrap();
        // zero noise and identical features so the stack is truly rank-1
        for s in probe.samples.iter_mut() {
            s.image_feats = Tensor::zeros(&[scene.visual_tokens, scene.d_img]);
        }
        let report = per_token_erank(&params, &probe, "zeroed").unwrap();
        for &e in &report.per_position {
            assert_abs_diff_eq!(e, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn identical_params_give_identical_reports() {
        let (cfg, scene) = tiny();
        let phi = init_params(&cfg, &mut RngState::new(2)).unwrap();
        let theta = phi.clone();
        let probe = gen_probe(&scene, 12, 3).unwrap();
        let a = per_token_erank(&phi, &probe, "model").unwrap();
        let b = per_token_erank(&theta, &probe, "model").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn erank_report_is_sample_order_invariant() {
        let (cfg, scene) = tiny();
        let params = init_params(&cfg, &mut RngState::new(2)).unwrap();
        let probe = gen_probe(&scene, 10, 3).unwrap();
        let mut reversed = probe.clone();
        reversed.samples.reverse();
        let a = per_token_erank(&params, &probe, "m").unwrap();
        let b = per_token_erank(&params, &reversed, "m").unwrap();
        // row order shifts Gram accumulation order; differences stay at
        // rounding level even on near-rank-1 stacks
        for (x, y) in a.per_position.iter().zip(&b.per_position) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(a.dataset_level, b.dataset_level, epsilon = 1e-8);
    }

    #[test]
    fn erank_bounds_hold_on_random_model() {
        let (cfg, scene) = tiny();
        let params = init_params(&cfg, &mut RngState::new(7)).unwrap();
        let probe = gen_probe(&scene, 16, 3).unwrap();
        let r = per_token_erank(&params, &probe, "m").unwrap();
        for &e in &r.per_position {
            assert!(e >= 1.0 - 1e-9 && e <= cfg.d_model as f64 + 1e-9);
        }
    }

    #[test]
    fn repr_dump_shape_and_equality() {
        let (cfg, scene) = tiny();
        let phi = init_params(&cfg, &mut RngState::new(3)).unwrap();
        let probe = gen_probe(&scene, 5, 3).unwrap();
        let mut buf_a = Vec::new();
        repr_dump(&phi, &probe, ReprKind::Zvl, "model", &mut buf_a).unwrap();
        let text = String::from_utf8(buf_a.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + probe.len());
        for line in &lines {
            assert_eq!(line.split(',').count(), 2 + cfg.d_model);
        }
        // θ = φ dumps are bytewise equal under the same tag
        let theta = phi.clone();
        let mut buf_b = Vec::new();
        repr_dump(&theta, &probe, ReprKind::Zvl, "model", &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);

        let mut buf_c = Vec::new();
        repr_dump(&phi, &probe, ReprKind::VisualLast, "model", &mut buf_c).unwrap();
        assert_ne!(buf_a, buf_c);
    }

    #[test]
    fn hscore_formula() {
        assert_abs_diff_eq!(hscore(0.6, 0.4), 0.48, epsilon = 1e-15);
        assert_eq!(hscore(0.5, 0.0), 0.0);
        assert_eq!(hscore(0.0, 0.0), 0.0);
        assert_eq!(hscore(1.0, 1.0), 1.0);
    }

    #[test]
    fn hscore_bounds() {
        let mut rng = RngState::new(9);
        for _ in 0..100 {
            let a = rng.next_f64();
            let t = rng.next_f64();
            let h = hscore(a, t);
            assert!(h <= 2.0 * a.min(t) + 1e-15);
            assert!(h <= a.max(t) + 1e-15);
        }
    }

    #[test]
    fn evaluate_probe_reports_one_task_per_attribute() {
        let (cfg, scene) = tiny();
        let params = init_params(&cfg, &mut RngState::new(4)).unwrap();
        let probe = gen_probe(&scene, 8, 3).unwrap();
        let scores = evaluate(&params, &probe).unwrap();
        assert_eq!(scores.tasks.len(), scene.attributes);
        for t in &scores.tasks {
            assert!((0.0..=1.0).contains(&t.accuracy));
        }
    }

    #[test]
    fn untrained_model_scores_near_chance() {
        let (cfg, scene) = tiny();
        let params = init_params(&cfg, &mut RngState::new(6)).unwrap();
        let n = 200;
        let probe = gen_probe(&scene, n, 13).unwrap();
        let scores = evaluate(&params, &probe).unwrap();
        // untrained decoding is deterministic but uninformed; a 3σ binomial
        // band around 1/C covers it unless decoding is degenerate toward a
        // constant inside/outside the answer alphabet
        let chance = 1.0 / scene.categories as f64;
        let sigma = (chance * (1.0 - chance) / n as f64).sqrt();
        for t in &scores.tasks {
            assert!(
                t.accuracy <= chance + 3.0 * sigma + 0.25,
                "suspiciously high untrained accuracy {}",
                t.accuracy
            );
        }
    }

    #[test]
    fn score_table_csv_has_avg_and_hscore_columns() {
        let probe = SuiteScores {
            suite: "probe".into(),
            tasks: vec![
                TaskScore { task: "attr_0".into(), accuracy: 0.8 },
                TaskScore { task: "attr_1".into(), accuracy: 0.4 },
            ],
            mean: 0.6,
        };
        let target = SuiteScores {
            suite: "target".into(),
            tasks: vec![TaskScore { task: "focus_0".into(), accuracy: 0.4 }],
            mean: 0.4,
        };
        let table = ScoreTable { probe: Some(probe), target: Some(target) };
        let mut buf = Vec::new();
        table.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "suite,task,accuracy,avg,hscore");
        assert_eq!(lines.next().unwrap(), "probe,attr_0,0.8,0.6,0.48");
        assert!(text.lines().count() == 4);
    }

    #[test]
    fn evaluate_empty_set_is_contract_error() {
        let (cfg, scene) = tiny();
        let params = init_params(&cfg, &mut RngState::new(4)).unwrap();
        let mut ds = gen_downstream(&scene, 2, 3, 0).unwrap();
        ds.samples.clear();
        assert!(matches!(evaluate(&params, &ds), Err(Error::Contract(_))));
    }

    #[test]
    fn compare_runs_missing_log_lists_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Vec::new();
        let err = compare_runs(&[dir.path().to_path_buf()], &mut out).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("config.toml"), "{msg}");
    }
}
