use super::*;
use crate::autograd::finite_difference_check;
use approx::assert_abs_diff_eq;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_img: 3,
        visual_tokens: 2,
        vocab: 11,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq: 16,
        trainable_last_k: 1,
        train_output_head: false,
        seed: 1,
    }
}

fn random_batch(cfg: &ModelConfig, b: usize, n: usize, t: usize, seed: u64) -> Batch {
    let mut rng = RngState::new(seed);
    let feats = Tensor::new(
        vec![b, cfg.visual_tokens, cfg.d_img],
        (0..b * cfg.visual_tokens * cfg.d_img).map(|_| rng.next_normal()).collect(),
    )
    .unwrap();
    let instr = IdMatrix::full(
        b,
        n,
        (0..b * n).map(|_| rng.next_below(cfg.vocab as u64) as u32).collect(),
    )
    .unwrap();
    let answers = IdMatrix::full(
        b,
        t,
        (0..b * t).map(|_| rng.next_below(cfg.vocab as u64) as u32).collect(),
    )
    .unwrap();
    Batch::new(feats, instr, answers).unwrap()
}

/// Moves every parameter to O(1) scale so gradient coordinates are well
/// away from finite-difference noise.
fn inflate_for_probe(params: &mut ModelParams, seed: u64) {
    let mut rng = RngState::new(seed);
    let names: Vec<String> = params.set().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let p = params.set_mut().get_mut(&name).unwrap();
        for v in p.value.data_mut() {
            *v += 0.4 * rng.next_normal();
        }
    }
}

fn zero_all(params: &mut ModelParams) {
    let names: Vec<String> = params.set().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let p = params.set_mut().get_mut(&name).unwrap();
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = tiny_config();
    let a = init_params(&cfg, &mut RngState::new(9)).unwrap();
    let b = init_params(&cfg, &mut RngState::new(9)).unwrap();
    assert_eq!(a, b);
    let c = init_params(&cfg, &mut RngState::new(10)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_gains_are_ones_and_biases_zero() {
    let cfg = tiny_config();
    let p = init_params(&cfg, &mut RngState::new(1)).unwrap();
    assert!(p.param("layer.00.ln1.g").unwrap().value.data().iter().all(|&v| v == 1.0));
    assert!(p.param("layer.01.ln2.g").unwrap().value.data().iter().all(|&v| v == 1.0));
    assert!(p.param("adapter.fc1.b").unwrap().value.data().iter().all(|&v| v == 0.0));
    assert!(p.param("layer.00.ffn.b_in").unwrap().value.data().iter().all(|&v| v == 0.0));
}

#[test]
fn trainable_partition_is_adapter_plus_last_k() {
    let cfg = tiny_config(); // 2 layers, k = 1
    let p = init_params(&cfg, &mut RngState::new(1)).unwrap();
    assert!(p.param("adapter.proj.w").unwrap().trainable);
    assert!(!p.param("layer.00.attn.wq").unwrap().trainable);
    assert!(p.param("layer.01.attn.wq").unwrap().trainable);
    assert!(!p.param("embed.tok").unwrap().trainable);
    assert!(!p.param("embed.pos").unwrap().trainable);
    assert!(!p.param("head.w").unwrap().trainable);
}

#[test]
fn encode_visual_zero_adapter_gives_zero_tokens() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, &mut RngState::new(1)).unwrap();
    zero_all(&mut params);
    let feats = Tensor::zeros(&[2, cfg.visual_tokens, cfg.d_img]);
    let out = encode_visual(&params, &feats).unwrap();
    assert_eq!(out.shape(), &[2, cfg.visual_tokens, cfg.d_model]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_visual_shape_contract() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(2)).unwrap();
    let mut rng = RngState::new(3);
    let feats = Tensor::new(
        vec![4, cfg.visual_tokens, cfg.d_img],
        (0..4 * cfg.visual_tokens * cfg.d_img).map(|_| rng.next_normal()).collect(),
    )
    .unwrap();
    let out = encode_visual(&params, &feats).unwrap();
    assert_eq!(out.shape(), &[4, cfg.visual_tokens, cfg.d_model]);
    let bad = Tensor::zeros(&[4, cfg.visual_tokens, cfg.d_img + 1]);
    assert!(matches!(encode_visual(&params, &bad), Err(Error::Dim(_))));
}

#[test]
fn encode_visual_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, &mut RngState::new(4)).unwrap();
    inflate_for_probe(&mut params, 17);
    let mut rng = RngState::new(5);
    let feats = Tensor::new(
        vec![2, cfg.visual_tokens, cfg.d_img],
        (0..2 * cfg.visual_tokens * cfg.d_img).map(|_| rng.next_normal()).collect(),
    )
    .unwrap();
    // only the adapter is differentiated here
    let adapter_only = {
        let mut set = ParamSet::new();
        for p in params.set().iter() {
            let mut p = p.clone();
            p.trainable = p.name.starts_with("adapter.");
            set.insert(p).unwrap();
        }
        params.with_set(set)
    };
    let err = finite_difference_check(
        |ps| {
            let m = adapter_only.with_set(ps.clone());
            let mut tape = Tape::new();
            let feats2d = tape.leaf(feats.clone().reshape(vec![
                2 * cfg.visual_tokens,
                cfg.d_img,
            ])?);
            let out = adapter_chain(&mut tape, &m, feats2d)?;
            let node = tape.sum(out);
            Ok(LossNode { tape, node })
        },
        adapter_only.set(),
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "adapter fd error {err:e}");
}

#[test]
fn forward_permutation_equivariance() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(6)).unwrap();
    let batch = random_batch(&cfg, 3, 2, 2, 77);
    let out = forward(&params, &batch).unwrap();

    // reversed sample order
    let b = 3;
    let stride_f = cfg.visual_tokens * cfg.d_img;
    let mut feats = Vec::new();
    let mut instr = Vec::new();
    let mut ans = Vec::new();
    for bi in (0..b).rev() {
        feats.extend_from_slice(&batch.image_feats.data()[bi * stride_f..(bi + 1) * stride_f]);
        instr.extend_from_slice(batch.instr_ids.row_ids(bi));
        ans.extend_from_slice(batch.answer_ids.row_ids(bi));
    }
    let rev = Batch::new(
        Tensor::new(vec![b, cfg.visual_tokens, cfg.d_img], feats).unwrap(),
        IdMatrix::full(b, 2, instr).unwrap(),
        IdMatrix::full(b, 2, ans).unwrap(),
    )
    .unwrap();
    let out_rev = forward(&params, &rev).unwrap();

    let d = cfg.d_model;
    for bi in 0..b {
        let from = (b - 1 - bi) * d;
        assert_eq!(&out.zvl.data()[bi * d..(bi + 1) * d], &out_rev.zvl.data()[from..from + d]);
    }
}

#[test]
fn answer_tokens_do_not_touch_visual_hidden() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(7)).unwrap();
    let batch = random_batch(&cfg, 2, 2, 2, 88);
    let base = forward(&params, &batch).unwrap();

    let mut altered_ids = batch.answer_ids.ids().to_vec();
    altered_ids[0] = (altered_ids[0] + 1) % cfg.vocab as u32;
    let altered = Batch::new(
        batch.image_feats.clone(),
        batch.instr_ids.clone(),
        IdMatrix::full(2, 2, altered_ids).unwrap(),
    )
    .unwrap();
    let out = forward(&params, &altered).unwrap();
    assert_eq!(base.visual_hidden, out.visual_hidden);
    assert_eq!(base.zvl, out.zvl);
    assert_ne!(base.logits, out.logits);
}

#[test]
fn logits_shape_contract() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(8)).unwrap();
    let batch = random_batch(&cfg, 2, 3, 2, 99);
    let out = forward(&params, &batch).unwrap();
    assert_eq!(out.logits.shape(), &[2, 2, cfg.vocab]);
    assert_eq!(out.visual_hidden.shape(), &[2, cfg.visual_tokens, cfg.d_model]);
    assert_eq!(out.zvl.shape(), &[2, cfg.d_model]);
}

#[test]
fn sequence_overflow_is_capacity_error() {
    let cfg = tiny_config(); // max_seq 16
    let params = init_params(&cfg, &mut RngState::new(8)).unwrap();
    let batch = random_batch(&cfg, 1, 8, 8, 99); // 2 + 8 + 8 > 16
    assert!(matches!(task_loss(&params, &batch), Err(Error::Capacity(_))));
}

#[test]
fn task_loss_uniform_logits_is_log_vocab() {
    let mut cfg = tiny_config();
    cfg.vocab = 64;
    let mut params = init_params(&cfg, &mut RngState::new(9)).unwrap();
    zero_all(&mut params);
    let batch = random_batch(&cfg, 2, 2, 3, 12);
    let loss = task_loss(&params, &batch).unwrap();
    assert_abs_diff_eq!(loss.value(), 64.0_f64.ln(), epsilon = 1e-12);
}

#[test]
fn task_loss_ignores_padding_content() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(10)).unwrap();
    let mut rng = RngState::new(13);
    let feats = Tensor::new(
        vec![2, cfg.visual_tokens, cfg.d_img],
        (0..2 * cfg.visual_tokens * cfg.d_img).map(|_| rng.next_normal()).collect(),
    )
    .unwrap();
    // sample 0 has a 2-token instruction inside a 3-wide matrix
    let mask = vec![true, true, false, true, true, true];
    let instr_a = IdMatrix::new(2, 3, vec![1, 2, 9, 3, 4, 5], mask.clone()).unwrap();
    let instr_b = IdMatrix::new(2, 3, vec![1, 2, 7, 3, 4, 5], mask).unwrap(); // pad id differs
    let ans_mask = vec![true, false, true, true];
    let ans_a = IdMatrix::new(2, 2, vec![6, 8, 6, 7], ans_mask.clone()).unwrap();
    let ans_b = IdMatrix::new(2, 2, vec![6, 1, 6, 7], ans_mask).unwrap(); // pad id differs

    let la = task_loss(&params, &Batch::new(feats.clone(), instr_a.clone(), ans_a).unwrap())
        .unwrap()
        .value();
    let lb = task_loss(&params, &Batch::new(feats, instr_b, ans_b).unwrap())
        .unwrap()
        .value();
    assert_eq!(la.to_bits(), lb.to_bits());
}

#[test]
fn fully_padded_answers_is_contract_error() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(10)).unwrap();
    let feats = Tensor::zeros(&[1, cfg.visual_tokens, cfg.d_img]);
    let instr = IdMatrix::full(1, 2, vec![1, 2]).unwrap();
    let ans = IdMatrix::new(1, 2, vec![0, 0], vec![false, false]).unwrap();
    let batch = Batch::new(feats, instr, ans).unwrap();
    assert!(matches!(task_loss(&params, &batch), Err(Error::Contract(_))));
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, &mut RngState::new(11)).unwrap();
    inflate_for_probe(&mut params, 19);
    let batch = random_batch(&cfg, 2, 2, 2, 21);
    let err = finite_difference_check(
        |ps| task_loss(&params.with_set(ps.clone()), &batch),
        params.set(),
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "full-model fd error {err:e}");
}

#[test]
fn frozen_parameters_receive_no_gradient_entries() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(12)).unwrap();
    let batch = random_batch(&cfg, 2, 2, 2, 31);
    let grads = task_loss(&params, &batch).unwrap().backward().unwrap();
    let expected: Vec<String> = params.set().trainable_names();
    let got: Vec<String> = grads.names().map(|s| s.to_string()).collect();
    assert_eq!(expected, got);
    assert!(grads.get("embed.tok").is_none());
    assert!(grads.get("head.w").is_none());
    assert!(grads.get("layer.00.attn.wq").is_none());
}

#[test]
fn visual_hidden_matches_full_forward_bitwise() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(14)).unwrap();
    let batch = random_batch(&cfg, 3, 2, 2, 41);
    let full = forward(&params, &batch).unwrap();
    let visual_only = visual_hidden(&params, &batch.image_feats).unwrap();
    assert_eq!(full.visual_hidden, visual_only);
}

#[test]
fn theta_initialized_from_phi_shares_visual_hidden_bitwise() {
    let cfg = tiny_config();
    let phi = init_params(&cfg, &mut RngState::new(15)).unwrap();
    let theta = phi.clone();
    let feats = random_batch(&cfg, 2, 2, 2, 51).image_feats;
    assert_eq!(
        visual_hidden(&phi, &feats).unwrap(),
        visual_hidden(&theta, &feats).unwrap()
    );
}

#[test]
fn greedy_decode_constructed_fixture() {
    let mut cfg = tiny_config();
    cfg.n_heads = 1;
    let mut params = init_params(&cfg, &mut RngState::new(16)).unwrap();
    zero_all(&mut params);
    let d = cfg.d_model;
    let m = cfg.visual_tokens;
    let n = 2usize;
    // positional one-hots at the two prediction slots; head routes them to
    // tokens 7 then 3 with a decisive margin
    {
        let pos = params.set_mut().get_mut("embed.pos").unwrap();
        pos.value.data_mut()[(m + n - 1) * d] = 1.0; // slot predicting token 0: e0
        pos.value.data_mut()[(m + n) * d + 1] = 1.0; // slot predicting token 1: e1
        let head = params.set_mut().get_mut("head.w").unwrap();
        head.value.data_mut()[7] = 5.0; // row 0 → token 7
        head.value.data_mut()[cfg.vocab + 3] = 5.0; // row 1 → token 3
    }
    let feats = Tensor::zeros(&[1, m, cfg.d_img]);
    let instr = IdMatrix::full(1, n, vec![1, 2]).unwrap();
    let out = greedy_decode(&params, &feats, &instr, 2).unwrap();
    assert_eq!(out, vec![vec![7, 3]]);
}

#[test]
fn greedy_decode_zero_length_and_determinism() {
    let cfg = tiny_config();
    let params = init_params(&cfg, &mut RngState::new(18)).unwrap();
    let batch = random_batch(&cfg, 2, 2, 0, 61);
    let empty = greedy_decode(&params, &batch.image_feats, &batch.instr_ids, 0).unwrap();
    assert_eq!(empty, vec![Vec::<u32>::new(); 2]);
    let a = greedy_decode(&params, &batch.image_feats, &batch.instr_ids, 3).unwrap();
    let b = greedy_decode(&params, &batch.image_feats, &batch.instr_ids, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn greedy_decode_ties_break_to_smaller_id() {
    let cfg = tiny_config();
    let mut params = init_params(&cfg, &mut RngState::new(19)).unwrap();
    zero_all(&mut params); // all logits identical → token 0
    let feats = Tensor::zeros(&[1, cfg.visual_tokens, cfg.d_img]);
    let instr = IdMatrix::full(1, 2, vec![1, 2]).unwrap();
    let out = greedy_decode(&params, &feats, &instr, 2).unwrap();
    assert_eq!(out, vec![vec![0, 0]]);
}

#[test]
fn id_matrix_rejects_non_right_aligned_mask() {
    let r = IdMatrix::new(1, 3, vec![1, 0, 2], vec![true, false, true]);
    assert!(matches!(r, Err(Error::Contract(_))));
}
