use super::*;
use crate::rng::RngState;
use approx::assert_abs_diff_eq;

fn param(name: &str, shape: &[usize], rng: &mut RngState, scale: f64) -> Parameter {
    let data: Vec<f64> = (0..shape.iter().product()).map(|_| rng.next_normal() * scale).collect();
    Parameter::new(name, Tensor::new(shape.to_vec(), data).unwrap(), true)
}

fn set_of(params: Vec<Parameter>) -> ParamSet {
    let mut set = ParamSet::new();
    for p in params {
        set.insert(p).unwrap();
    }
    set
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let w = Parameter::new("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let wn = tape.param(&w).unwrap();
    let loss = tape.sum(wn);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_half_square_norm_is_w() {
    let mut tape = Tape::new();
    let w = Parameter::new("w", Tensor::new(vec![2], vec![3.0, -4.0]).unwrap(), true);
    let wn = tape.param(&w).unwrap();
    let sq = tape.mul(wn, wn).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[3.0, -4.0]);
}

#[test]
fn backward_of_l1_distance_is_sign() {
    let mut tape = Tape::new();
    let w = Parameter::new("w", Tensor::new(vec![1], vec![1.0]).unwrap(), true);
    let wn = tape.param(&w).unwrap();
    let loss = tape
        .l1_dist_const(wn, Tensor::new(vec![1], vec![2.0]).unwrap(), false)
        .unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[-1.0]);
}

#[test]
fn l1_subgradient_at_kink_is_zero() {
    let mut tape = Tape::new();
    let w = Parameter::new("w", Tensor::new(vec![2], vec![2.0, -1.0]).unwrap(), true);
    let wn = tape.param(&w).unwrap();
    let loss = tape
        .l1_dist_const(wn, Tensor::new(vec![2], vec![2.0, 0.0]).unwrap(), false)
        .unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[0.0, -1.0]);
}

#[test]
fn second_backward_is_usage_error() {
    let mut tape = Tape::new();
    let w = Parameter::new("w", Tensor::scalar(2.0), true);
    let wn = tape.param(&w).unwrap();
    let loss = tape.sum(wn);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut tape = Tape::new();
    let w = Parameter::new("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let wn = tape.param(&w).unwrap();
    assert!(matches!(tape.backward(wn), Err(Error::Contract(_))));
}

#[test]
fn binding_a_parameter_twice_is_rejected() {
    let mut tape = Tape::new();
    let w = Parameter::new("w", Tensor::scalar(1.0), true);
    tape.param(&w).unwrap();
    assert!(matches!(tape.param(&w), Err(Error::Usage(_))));
}

#[test]
fn frozen_parameters_get_no_entries() {
    let mut tape = Tape::new();
    let w = Parameter::new("w", Tensor::scalar(2.0), true);
    let frozen = Parameter::new("frozen", Tensor::scalar(3.0), false);
    let wn = tape.param(&w).unwrap();
    let fz = tape.param(&frozen).unwrap();
    let prod = tape.mul(wn, fz).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    assert!(g.get("frozen").is_none());
    assert_eq!(g.get("w").unwrap().data(), &[3.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = RngState::new(8);
    let w = param("w", &[3, 3], &mut rng, 1.0);
    let c = Tensor::new(vec![3, 3], (0..9).map(|_| rng.next_normal()).collect()).unwrap();

    // g(sum of two losses)
    let mut tape = Tape::new();
    let wn = tape.param(&w).unwrap();
    let cn = tape.leaf(c.clone());
    let l1 = {
        let m = tape.mul(wn, cn).unwrap();
        tape.sum(m)
    };
    let l2 = {
        let sq = tape.mul(wn, wn).unwrap();
        tape.sum(sq)
    };
    let combined = tape.add(l1, l2).unwrap();
    let g_sum = tape.backward(combined).unwrap();

    // sum of individual gradients
    let mut t1 = Tape::new();
    let wn1 = t1.param(&w).unwrap();
    let cn1 = t1.leaf(c.clone());
    let m1 = t1.mul(wn1, cn1).unwrap();
    let s1 = t1.sum(m1);
    let g1 = t1.backward(s1).unwrap();

    let mut t2 = Tape::new();
    let wn2 = t2.param(&w).unwrap();
    let sq2 = t2.mul(wn2, wn2).unwrap();
    let s2 = t2.sum(sq2);
    let g2 = t2.backward(s2).unwrap();

    let manual = g1.axpy(1.0, &g2).unwrap();
    for (a, b) in g_sum.flatten().iter().zip(manual.flatten()) {
        assert_abs_diff_eq!(a, &b, epsilon = 1e-12);
    }
}

#[test]
fn fd_check_on_quadratic_is_nearly_exact() {
    let mut rng = RngState::new(4);
    let params = set_of(vec![param("w", &[4], &mut rng, 1.0)]);
    let err = finite_difference_check(
        |ps| {
            let mut tape = Tape::new();
            let wn = tape.param(ps.get("w")?)?;
            let sq = tape.mul(wn, wn)?;
            let s = tape.sum(sq);
            let loss = tape.scale(s, 0.5);
            Ok(LossNode { tape, node: loss })
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-9, "quadratic fd error {err:e}");
}

#[test]
fn fd_check_over_empty_trainable_set_is_zero() {
    let params = set_of(vec![Parameter::new("c", Tensor::scalar(1.0), false)]);
    let err = finite_difference_check(
        |ps| {
            let mut tape = Tape::new();
            let c = tape.param(ps.get("c")?)?;
            let loss = tape.sum(c);
            Ok(LossNode { tape, node: loss })
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn fd_check_rejects_out_of_range_h() {
    let params = ParamSet::new();
    let r = finite_difference_check(
        |_| {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::scalar(0.0));
            Ok(LossNode { tape, node: l })
        },
        &params,
        1e-3,
    );
    assert!(matches!(r, Err(Error::Contract(_))));
}

/// Smooth composite loss exercising one primitive op; probe points use
/// O(1)-scale parameters so no gradient coordinate is vanishingly small.
fn check_op_at_random_points<F>(build: F, shapes: &[(&str, &[usize])], seed: u64)
where
    F: Fn(&ParamSet) -> Result<LossNode> + Copy,
{
    for point in 0..16 {
        let mut rng = RngState::new(seed * 1000 + point);
        let params = set_of(
            shapes
                .iter()
                .map(|(n, s)| param(n, s, &mut rng, 0.7))
                .collect(),
        );
        let err = finite_difference_check(build, &params, 1e-6).unwrap();
        assert!(err <= 1e-4, "op fd error {err:e} at probe point {point}");
    }
}

#[test]
fn fd_matmul_chain() {
    check_op_at_random_points(
        |ps| {
            let mut tape = Tape::new();
            let a = tape.param(ps.get("a")?)?;
            let b = tape.param(ps.get("b")?)?;
            let c = tape.matmul(a, b)?;
            let sq = tape.mul(c, c)?;
            let node = tape.sum(sq);
            Ok(LossNode { tape, node })
        },
        &[("a", &[3, 4]), ("b", &[4, 2])],
        21,
    );
}

#[test]
fn fd_gelu_and_bias() {
    check_op_at_random_points(
        |ps| {
            let mut tape = Tape::new();
            let x = tape.param(ps.get("x")?)?;
            let b = tape.param(ps.get("b")?)?;
            let xb = tape.add_row_broadcast(x, b)?;
            let g = tape.gelu(xb);
            let sq = tape.mul(g, g)?;
            let node = tape.sum(sq);
            Ok(LossNode { tape, node })
        },
        &[("x", &[3, 5]), ("b", &[5])],
        22,
    );
}

#[test]
fn fd_layer_norm() {
    check_op_at_random_points(
        |ps| {
            let mut tape = Tape::new();
            let x = tape.param(ps.get("x")?)?;
            let g = tape.param(ps.get("g")?)?;
            let b = tape.param(ps.get("b")?)?;
            let y = tape.layer_norm(x, g, b, 1e-5)?;
            let sq = tape.mul(y, y)?;
            let node = tape.sum(sq);
            Ok(LossNode { tape, node })
        },
        &[("x", &[4, 6]), ("g", &[6]), ("b", &[6])],
        23,
    );
}

#[test]
fn fd_causal_attention() {
    let meta = || AttentionMeta {
        batch: 2,
        seq: 3,
        heads: 2,
        key_active: vec![true; 6],
    };
    check_op_at_random_points(
        |ps| {
            let mut tape = Tape::new();
            let q = tape.param(ps.get("q")?)?;
            let k = tape.param(ps.get("k")?)?;
            let v = tape.param(ps.get("v")?)?;
            let o = tape.causal_attention(q, k, v, meta())?;
            let sq = tape.mul(o, o)?;
            let node = tape.sum(sq);
            Ok(LossNode { tape, node })
        },
        &[("q", &[6, 4]), ("k", &[6, 4]), ("v", &[6, 4])],
        24,
    );
}

#[test]
fn fd_attention_respects_key_padding() {
    let meta = AttentionMeta {
        batch: 1,
        seq: 4,
        heads: 1,
        key_active: vec![true, false, true, true],
    };
    check_op_at_random_points(
        |ps| {
            let mut tape = Tape::new();
            let q = tape.param(ps.get("q")?)?;
            let k = tape.param(ps.get("k")?)?;
            let v = tape.param(ps.get("v")?)?;
            let o = tape.causal_attention(q, k, v, meta.clone())?;
            let sq = tape.mul(o, o)?;
            let node = tape.sum(sq);
            Ok(LossNode { tape, node })
        },
        &[("q", &[4, 2]), ("k", &[4, 2]), ("v", &[4, 2])],
        25,
    );
}

#[test]
fn fd_masked_cross_entropy() {
    check_op_at_random_points(
        |ps| {
            let mut tape = Tape::new();
            let logits = tape.param(ps.get("logits")?)?;
            let node = tape.masked_cross_entropy(logits, vec![1, 0, 3], vec![1.0, 0.0, 1.0])?;
            Ok(LossNode { tape, node })
        },
        &[("logits", &[3, 5])],
        26,
    );
}

#[test]
fn fd_gather_and_interleave() {
    check_op_at_random_points(
        |ps| {
            let mut tape = Tape::new();
            let a = tape.param(ps.get("a")?)?;
            let b = tape.param(ps.get("b")?)?;
            let inter = tape.interleave(
                vec![a, b],
                vec![(0, 0), (1, 0), (0, 1), (1, 1), (0, 2)],
            )?;
            let picked = tape.gather_rows(inter, vec![0, 2, 4, 1])?;
            let sq = tape.mul(picked, picked)?;
            let node = tape.sum(sq);
            Ok(LossNode { tape, node })
        },
        &[("a", &[3, 4]), ("b", &[2, 4])],
        27,
    );
}

#[test]
fn masked_cross_entropy_uniform_logits() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[2, 64]));
    let node = tape.masked_cross_entropy(logits, vec![5, 9], vec![1.0, 1.0]).unwrap();
    assert_abs_diff_eq!(tape.value(node).item().unwrap(), 64.0_f64.ln(), epsilon = 1e-12);
}

#[test]
fn masked_cross_entropy_confident_logits_vanish() {
    let mut t = Tensor::zeros(&[1, 8]);
    t.data_mut()[3] = 50.0;
    let mut tape = Tape::new();
    let logits = tape.leaf(t);
    let node = tape.masked_cross_entropy(logits, vec![3], vec![1.0]).unwrap();
    assert!(tape.value(node).item().unwrap() < 1e-12);
}

#[test]
fn masked_cross_entropy_fully_padded_is_contract_error() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        tape.masked_cross_entropy(logits, vec![0, 1], vec![0.0, 0.0]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn attention_is_causal() {
    // changing a later row must not affect earlier outputs
    let mut rng = RngState::new(40);
    let mk = |rng: &mut RngState| -> Tensor {
        Tensor::new(vec![4, 2], (0..8).map(|_| rng.next_normal()).collect()).unwrap()
    };
    let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let meta = AttentionMeta { batch: 1, seq: 4, heads: 1, key_active: vec![true; 4] };

    let run = |q: &Tensor, k: &Tensor, v: &Tensor| -> Tensor {
        let mut tape = Tape::new();
        let qn = tape.leaf(q.clone());
        let kn = tape.leaf(k.clone());
        let vn = tape.leaf(v.clone());
        let o = tape.causal_attention(qn, kn, vn, meta.clone()).unwrap();
        tape.value(o).clone()
    };
    let base = run(&q, &k, &v);
    let mut k2 = k.clone();
    k2.data_mut()[3 * 2] += 5.0; // last position's key
    let mut v2 = v.clone();
    v2.data_mut()[3 * 2 + 1] -= 2.0;
    let changed = run(&q, &k2, &v2);
    assert_eq!(&base.data()[..3 * 2], &changed.data()[..3 * 2]);
    assert_ne!(&base.data()[3 * 2..], &changed.data()[3 * 2..]);
}
