use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

use xssl_core::params::{Bound, ParamStore};
use xssl_core::rng::{seeded, Rng};
use xssl_core::tensor::{finite_difference_check_sampled, Tape, Tensor, Var};
use xssl_core::vit::*;

const ENC: EncoderConfig = EncoderConfig {
    in_dim: 12,
    d: 16,
    depth: 2,
    heads: 4,
    mlp_hidden: 24,
};

fn head_cfg(depth: usize) -> HeadConfig {
    HeadConfig {
        enc_d: 16,
        width: 16,
        depth,
        heads: 2,
        mlp_hidden: 20,
    }
}

fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn perturbed(store: &ParamStore, rng: &mut Rng) -> ParamStore {
    let mut s = store.clone();
    for t in s.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.random_range(-1.0..1.0);
        }
    }
    s
}

fn run_head(kind: HeadKind, p: &ParamStore, cfg: &HeadConfig, ctx: &Tensor, groups: &TokenGroups) -> Tensor {
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let c = t.constant(ctx.clone());
    let out = match kind {
        HeadKind::SelfAttn => predict_selfattn(&mut t, &b, cfg, c, groups, (4, 4)),
        HeadKind::CrossAttn => decode_crossattn(&mut t, &b, cfg, c, groups, (4, 4)),
    }
    .unwrap();
    t.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encode_is_jointly_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let p = perturbed(&init_encoder(&ENC, &mut rng).unwrap(), &mut rng);
        let n = 7;
        let rows = rand_t(&mut rng, n, 12);
        let mut positions: Vec<usize> = (0..16).collect();
        positions.shuffle(&mut rng);
        positions.truncate(n);
        let z = encode_rows(&p, &ENC, &rows, &positions, (4, 4)).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pos2: Vec<usize> = perm.iter().map(|&i| positions[i]).collect();
        let z2 = encode_rows(&p, &ENC, &rows.select_rows(&perm), &pos2, (4, 4)).unwrap();
        prop_assert!(z.select_rows(&perm).max_abs_diff(&z2) <= 1e-12);
    }

    #[test]
    fn swapping_masked_positions_swaps_outputs(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let ctx = rand_t(&mut rng, 3, 16);
        for kind in [HeadKind::SelfAttn, HeadKind::CrossAttn] {
            let p = perturbed(&init_head(&head_cfg(2), kind, &mut rng).unwrap(), &mut rng);
            let a = run_head(kind, &p, &head_cfg(2), &ctx, &TokenGroups::single(&[0, 5, 9], &[2, 7, 14]));
            let b = run_head(kind, &p, &head_cfg(2), &ctx, &TokenGroups::single(&[0, 5, 9], &[14, 7, 2]));
            prop_assert!(a.select_rows(&[2, 1, 0]).max_abs_diff(&b) <= 1e-12);
        }
    }
}

#[test]
fn encode_is_deterministic() {
    let mut rng = seeded(1);
    let p = init_encoder(&ENC, &mut rng).unwrap();
    let rows = rand_t(&mut rng, 5, 12);
    let a = encode_rows(&p, &ENC, &rows, &[0, 1, 2, 3, 4], (4, 4)).unwrap();
    let b = encode_rows(&p, &ENC, &rows, &[0, 1, 2, 3, 4], (4, 4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_tokens_at_distinct_positions_differ() {
    let mut rng = seeded(2);
    let p = init_encoder(&ENC, &mut rng).unwrap();
    let row = rand_t(&mut rng, 1, 12);
    let rows = Tensor::vstack(&[&row, &row]).unwrap();
    let z = encode_rows(&p, &ENC, &rows, &[3, 12], (4, 4)).unwrap();
    assert!(z.row(0).iter().zip(z.row(1)).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn head_output_rows_match_queries() {
    let mut rng = seeded(3);
    let ctx = rand_t(&mut rng, 2, 16);
    for kind in [HeadKind::SelfAttn, HeadKind::CrossAttn] {
        let p = init_head(&head_cfg(2), kind, &mut rng).unwrap();
        let out = run_head(kind, &p, &head_cfg(2), &ctx, &TokenGroups::single(&[1, 4], &[0, 6, 8, 15, 3]));
        assert_eq!(out.shape(), &[5, 16]);
    }
}

#[test]
fn depth_zero_identity_predictor_returns_mask_token_plus_position() {
    let mut rng = seeded(4);
    let cfg = head_cfg(0);
    let mut p = init_head(&cfg, HeadKind::SelfAttn, &mut rng).unwrap();
    p.set("in.w", Tensor::eye(16)).unwrap();
    p.set("out.w", Tensor::eye(16)).unwrap();
    let ctx = rand_t(&mut rng, 2, 16);
    let out = run_head(HeadKind::SelfAttn, &p, &cfg, &ctx, &TokenGroups::single(&[0, 1], &[5, 10]));
    let table = sincos_2d(4, 4, 16).unwrap();
    let tok = p.get("mask_token").unwrap();
    for (r, q) in [5usize, 10].into_iter().enumerate() {
        for c in 0..16 {
            let want = tok.data()[c] + table.at(q, c);
            assert!((out.at(r, c) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn predictor_gradient_reaches_context() {
    let mut rng = seeded(5);
    let p = perturbed(&init_head(&head_cfg(2), HeadKind::SelfAttn, &mut rng).unwrap(), &mut rng);
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let ctx = t.leaf(rand_t(&mut rng, 3, 16));
    let out = predict_selfattn(&mut t, &b, &head_cfg(2), ctx, &TokenGroups::single(&[0, 1, 2], &[9, 10]), (4, 4)).unwrap();
    let l = t.sum(out);
    let sq = t.mul(l, l).unwrap();
    t.backward(sq).unwrap();
    assert!(t.grad_or_zeros(ctx).data().iter().any(|g| g.abs() > 1e-8));
}

#[test]
fn perturbing_one_visible_rep_moves_every_decoded_row() {
    let mut rng = seeded(6);
    let cfg = head_cfg(3);
    let p = perturbed(&init_head(&cfg, HeadKind::CrossAttn, &mut rng).unwrap(), &mut rng);
    let ctx = rand_t(&mut rng, 2, 16);
    let groups = TokenGroups::single(&[3, 8], &[0, 1, 2, 12, 15]);
    let a = run_head(HeadKind::CrossAttn, &p, &cfg, &ctx, &groups);
    let mut ctx2 = ctx.clone();
    ctx2.data_mut()[17] += 0.5;
    let b = run_head(HeadKind::CrossAttn, &p, &cfg, &ctx2, &groups);
    for r in 0..5 {
        assert!(a.row(r).iter().zip(b.row(r)).any(|(x, y)| (x - y).abs() > 1e-9), "row {r} unchanged");
    }
}

#[test]
fn single_visible_token_gives_query_independent_attention_read() {
    // one key: softmax is 1 everywhere, so each query reads the value row
    let mut rng = seeded(7);
    let mut t = Tape::new();
    let q = t.constant(rand_t(&mut rng, 4, 8));
    let k = t.constant(rand_t(&mut rng, 1, 8));
    let v = t.constant(rand_t(&mut rng, 1, 8));
    let o = t.attention(q, k, v, &[4], &[1], 2).unwrap();
    let o = t.value(o);
    for r in 1..4 {
        assert_eq!(o.row(r), o.row(0));
    }
}

fn head_gradcheck(kind: HeadKind) -> f64 {
    let mut rng = seeded(8);
    let cfg = head_cfg(2);
    let head = perturbed(&init_head(&cfg, kind, &mut rng).unwrap(), &mut rng);
    let ctx = rand_t(&mut rng, 3, 16);
    let mut params = head.tensors().to_vec();
    params.push(ctx);
    let n = head.len();
    let r = finite_difference_check_sampled(
        |t: &mut Tape, p: &[Var]| {
            let b = Bound::from_vars(&head, p[..n].to_vec())?;
            let groups = TokenGroups::single(&[0, 6, 11], &[2, 9, 13]);
            let out = match kind {
                HeadKind::SelfAttn => predict_selfattn(t, &b, &cfg, p[n], &groups, (4, 4))?,
                HeadKind::CrossAttn => decode_crossattn(t, &b, &cfg, p[n], &groups, (4, 4))?,
            };
            let sq = t.mul(out, out)?;
            Ok(t.sum(sq))
        },
        &params,
        1e-6,
        4,
        99,
    )
    .unwrap();
    r.max_rel_error
}

#[test]
fn both_heads_pass_finite_difference_check() {
    for kind in [HeadKind::SelfAttn, HeadKind::CrossAttn] {
        let e = head_gradcheck(kind);
        assert!(e <= 1e-4, "{kind:?}: {e}");
    }
}
