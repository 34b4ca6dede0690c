use rand::Rng as _;

use xssl_core::affinity::*;
use xssl_core::config::{TrainConfig, Variant};
use xssl_core::hosts::{sample_host_mask, train_step, trainable_tensors, Host, HostState, SaAttachment, StepInputs};
use xssl_core::patch_grid::{patchify, PatchGrid};
use xssl_core::pipeline::{as_dataset, generate_split, prepare_train, pretrain, RunState};
use xssl_core::rng::{seeded, Rng};
use xssl_core::synth::SynthConfig;
use xssl_core::tensor::{AdamWState, Tape, Tensor};
use xssl_core::vit::encode_rows;

fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn loss(a: &Tensor, b: &Tensor) -> f64 {
    gram_loss_value(a, b, GramMode::Mean).unwrap()
}

// modified Gram-Schmidt on a random square matrix
fn random_orthogonal(rng: &mut Rng, d: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::matrix(d, d, (0..d * d).map(|k| cols[k % d][k / d]).collect())
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
    let z = t.matmul(x, y).unwrap();
    t.value(z).clone()
}

#[test]
fn gram_loss_algebra_over_random_instances() {
    let mut rng = seeded(31);
    for _ in 0..1000 {
        let n = rng.random_range(2..9);
        let d = rng.random_range(2..7);
        let a = rand_t(&mut rng, n, d);
        let b = rand_t(&mut rng, n, d);
        let lab = loss(&a, &b);
        assert_eq!(loss(&a, &a), 0.0);
        assert!(lab >= 0.0);
        assert!((lab - loss(&b, &a)).abs() <= 1e-12);

        let q = random_orthogonal(&mut rng, d);
        let rot = loss(&matmul(&a, &q), &b);
        assert!((rot - lab).abs() <= 1e-9, "rotation moved loss {lab} -> {rot}");

        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let p = loss(&a.select_rows(&perm), &b.select_rows(&perm));
        assert!((p - lab).abs() <= 1e-12);
    }
}

#[test]
fn gram_sum_mode_scales_by_entry_count() {
    let mut rng = seeded(32);
    let a = rand_t(&mut rng, 5, 3);
    let b = rand_t(&mut rng, 5, 3);
    let s = gram_loss_value(&a, &b, GramMode::Sum).unwrap();
    assert!((s - 25.0 * loss(&a, &b)).abs() <= 1e-12);
    assert!(gram_loss_value(&a, &rand_t(&mut rng, 4, 3), GramMode::Mean).is_err());
}

#[test]
fn bilinear_by_two_is_block_mean() {
    let mut rng = seeded(33);
    let (gh, gw, d) = (8, 6, 5);
    let hr = RepGrid::new(rand_t(&mut rng, gh * gw, d), gh, gw).unwrap();
    let mr = downsample_reps(&hr, 2, Downsample::Bilinear, None).unwrap();
    assert_eq!((mr.grid_h, mr.grid_w), (4, 3));
    for u in 0..4 {
        for v in 0..3 {
            for c in 0..d {
                let want: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(i, j)| hr.z.at((2 * u + i) * gw + 2 * v + j, c))
                    .sum::<f64>()
                    / 4.0;
                assert!((mr.z.at(u * 3 + v, c) - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn constant_grid_stays_constant_under_every_method() {
    let d = 4;
    let row = [0.5, -1.0, 2.0, 0.25];
    let z = Tensor::matrix(64, d, (0..64 * d).map(|k| row[k % d]).collect());
    let hr = RepGrid::new(z, 8, 8).unwrap();
    let proj = init_projection(2, d);
    for (m, p) in [
        (Downsample::Bilinear, None),
        (Downsample::Bicubic, None),
        (Downsample::LinearProjection, Some(&proj)),
    ] {
        let mr = downsample_reps(&hr, 2, m, p).unwrap();
        for r in 0..16 {
            for c in 0..d {
                assert!((mr.z.at(r, c) - row[c]).abs() <= 1e-12, "{m}");
            }
        }
    }
    assert!(downsample_reps(&hr, 3, Downsample::Bilinear, None).is_err());
}

#[test]
fn scale_one_copy_of_student_gives_zero_loss() {
    let cfg = TrainConfig::desk(Host::Ijepa);
    let syn = SynthConfig::default();
    let scene = &generate_split(&syn, 5, 0, 1).unwrap()[0];
    let patches = patchify(&scene.mr, 8).unwrap();
    let student = HostState::init(&cfg.host_config(), &mut seeded(1)).unwrap().student;
    let cells = vec![1, 2, 5, 6, 9, 15];
    let z = encode_rows(&student, &cfg.encoder, &patches.select_rows(&cells), &cells, (4, 4)).unwrap();
    let sa = SaConfig { s: 1, ..SaConfig::default() };
    let mut t = Tape::new();
    let zs = t.constant(z);
    let batch = SaBatch {
        mr_cells: vec![cells],
        hr_patches: vec![&patches],
    };
    let l = sa_forward(&mut t, zs, &batch, &student, &cfg.encoder, None, &sa, (4, 4)).unwrap();
    assert!(t.value(l).item().abs() <= 1e-24);
}

fn sa_step(downsample: Downsample, m_hr: f64) -> (HostState, SaAttachment, SaAttachment) {
    let cfg = TrainConfig::desk(Host::LatentMim);
    let hcfg = cfg.host_config();
    let syn = SynthConfig::default();
    let scenes = generate_split(&syn, 6, 0, 3).unwrap();
    let mr: Vec<Tensor> = scenes.iter().map(|s| patchify(&s.mr, 8).unwrap()).collect();
    let hr: Vec<Tensor> = scenes.iter().map(|s| patchify(&s.hr, 8).unwrap()).collect();
    let mut state = HostState::init(&hcfg, &mut seeded(2)).unwrap();
    let mut att = SaAttachment {
        cfg: SaConfig { downsample, m_hr, ..SaConfig::default() },
        teacher: HostState::init(&hcfg, &mut seeded(3)).unwrap().student,
        proj: (downsample == Downsample::LinearProjection).then(|| init_projection(2, 64)),
    };
    let before = att.clone();
    let grid = PatchGrid::new(32, 32, 8).unwrap();
    let mut rng = seeded(4);
    let inputs = StepInputs {
        patches: mr.iter().collect(),
        samples: mr.iter().map(|_| sample_host_mask(&hcfg, &grid, &mut rng).unwrap()).collect(),
        hr_patches: hr.iter().collect(),
        sa_cells: None,
    };
    let mut opt = AdamWState::new(Default::default(), trainable_tensors(&state, Some(&att)));
    let l = train_step(&hcfg, &mut state, Some(&mut att), &mut opt, 1e-3, &inputs, (4, 4)).unwrap();
    assert!(l.gram > 0.0);
    (state, before, att)
}

#[test]
fn teacher_moves_only_by_ema() {
    let (_, before, after) = sa_step(Downsample::Bilinear, 1.0);
    assert_eq!(before.teacher, after.teacher);
    let (state, before, after) = sa_step(Downsample::Bilinear, 0.5);
    let mut want = before.teacher.clone();
    hr_teacher_update(&mut want, &state.student, 0.5).unwrap();
    assert_eq!(after.teacher, want);
}

#[test]
fn projection_receives_gradient() {
    let (_, before, after) = sa_step(Downsample::LinearProjection, 0.996);
    assert_ne!(before.proj, after.proj);
}

#[test]
fn zero_lambda_matches_mr_only_bit_for_bit() {
    let syn = SynthConfig::default();
    let ds = as_dataset(&syn, &generate_split(&syn, 9, 0, 16).unwrap());
    let run = |variant: Variant, lambda: f64| {
        let mut cfg = TrainConfig::desk(Host::Ijepa);
        cfg.variant = variant;
        cfg.sa.lambda = lambda;
        cfg.optim.epochs = 2;
        let data = prepare_train(&cfg, &ds).unwrap();
        let r = pretrain(&cfg, &data, RunState::init(&cfg).unwrap(), None, |_, _| Ok(())).unwrap();
        let host: Vec<f64> = r.metrics.iter().map(|m| m.host_loss).collect();
        (r.state.host.student, host)
    };
    let (a, la) = run(Variant::MrOnly, 1.0);
    let (b, lb) = run(Variant::Sa, 0.0);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let (c, _) = run(Variant::Sa, 1.0);
    assert_ne!(a, c);
}
