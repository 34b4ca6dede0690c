use proptest::prelude::*;

use xssl_core::config::{TrainConfig, Variant};
use xssl_core::hosts::*;
use xssl_core::params::ParamStore;
use xssl_core::patch_grid::{patchify, PatchGrid};
use xssl_core::pipeline::{as_dataset, generate_split, prepare_train, pretrain, RunState};
use xssl_core::rng::seeded;
use xssl_core::synth::SynthConfig;
use xssl_core::tensor::{AdamWState, Tensor};

fn store(vals: &[(&str, Vec<f64>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, v) in vals {
        s.push(*n, Tensor::matrix(1, v.len(), v.clone())).unwrap();
    }
    s
}

#[test]
fn ema_half_momentum_example() {
    let mut t = store(&[("w", vec![2.0])]);
    ema_update(&mut t, &store(&[("w", vec![4.0])]), 0.5).unwrap();
    assert_eq!(t.get("w").unwrap().data(), &[3.0]);
}

#[test]
fn ema_endpoints_are_exact() {
    let s = store(&[("a", vec![0.1, -7.3]), ("b", vec![1e-9])]);
    let t0 = store(&[("a", vec![5.5, 2.25]), ("b", vec![-3.0])]);
    let mut t = t0.clone();
    ema_update(&mut t, &s, 1.0).unwrap();
    assert_eq!(t, t0);
    ema_update(&mut t, &s, 0.0).unwrap();
    assert_eq!(t, s);
    assert!(ema_update(&mut t, &s, 1.5).is_err());
}

proptest! {
    #[test]
    fn ema_commutes_with_flattening(a in prop::collection::vec(-5.0f64..5.0, 5), b in prop::collection::vec(-5.0f64..5.0, 5), m in 0.0f64..=1.0) {
        let mut t = store(&[("x", a[..2].to_vec()), ("y", a[2..].to_vec())]);
        let s = store(&[("x", b[..2].to_vec()), ("y", b[2..].to_vec())]);
        ema_update(&mut t, &s, m).unwrap();
        let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| m * x + (1.0 - m) * y).collect();
        prop_assert_eq!(t.flatten(), want);
    }
}

struct Toy {
    cfg: HostConfig,
    patches: Vec<Tensor>,
    grid: PatchGrid,
}

fn toy(host: Host) -> Toy {
    let cfg = TrainConfig::desk(host).host_config();
    let syn = SynthConfig::default();
    let scenes = generate_split(&syn, 11, 0, 4).unwrap();
    Toy {
        cfg,
        patches: scenes.iter().map(|s| patchify(&s.mr, 8).unwrap()).collect(),
        grid: PatchGrid::new(32, 32, 8).unwrap(),
    }
}

fn one_step(toy: &Toy, state: &mut HostState, opt: &mut AdamWState, seed: u64) -> StepLosses {
    let mut rng = seeded(seed);
    let samples = toy
        .patches
        .iter()
        .map(|_| sample_host_mask(&toy.cfg, &toy.grid, &mut rng).unwrap())
        .collect();
    let inputs = StepInputs {
        patches: toy.patches.iter().collect(),
        samples,
        hr_patches: Vec::new(),
        sa_cells: None,
    };
    train_step(&toy.cfg, state, None, opt, 1e-3, &inputs, (4, 4)).unwrap()
}

#[test]
fn target_changes_only_through_ema() {
    for host in [Host::Ijepa, Host::LatentMim] {
        for m in [1.0, 0.9] {
            let mut toy = toy(host);
            toy.cfg.momentum = m;
            let mut state = HostState::init(&toy.cfg, &mut seeded(1)).unwrap();
            // decouple target from student so any leak would show
            ema_update(&mut state.target, &HostState::init(&toy.cfg, &mut seeded(2)).unwrap().student, 0.0).unwrap();
            let target0 = state.target.clone();
            let mut opt = AdamWState::new(Default::default(), trainable_tensors(&state, None));
            one_step(&toy, &mut state, &mut opt, 3);
            let mut want = target0.clone();
            ema_update(&mut want, &state.student, m).unwrap();
            assert_eq!(state.target, want, "{host} m={m}");
            assert_ne!(state.student, target0);
        }
    }
}

#[test]
fn train_step_is_deterministic() {
    for host in [Host::Ijepa, Host::LatentMim] {
        let toy = toy(host);
        let run = || {
            let mut state = HostState::init(&toy.cfg, &mut seeded(4)).unwrap();
            let mut opt = AdamWState::new(Default::default(), trainable_tensors(&state, None));
            let l: Vec<_> = (0..3).map(|i| one_step(&toy, &mut state, &mut opt, i)).collect();
            (state, l)
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn host_loss_is_nonnegative_and_finite() {
    let mut rng = seeded(5);
    for host in [Host::Ijepa, Host::LatentMim] {
        let toy = toy(host);
        for i in 0..8 {
            let state = HostState::init(&toy.cfg, &mut seeded(i)).unwrap();
            let sample = sample_host_mask(&toy.cfg, &toy.grid, &mut rng).unwrap();
            let l = host_loss(&toy.cfg, &state, &toy.patches[i as usize % 4], &sample, (4, 4)).unwrap();
            assert!(l.is_finite() && l >= 0.0, "{host}: {l}");
        }
    }
}

fn first_last_ratio(host: Host) -> f64 {
    let mut cfg = TrainConfig::desk(host);
    cfg.variant = Variant::MrOnly;
    let syn = SynthConfig::default();
    let ds = as_dataset(&syn, &generate_split(&syn, 21, 0, 64).unwrap());
    let data = prepare_train(&cfg, &ds).unwrap();
    let res = pretrain(&cfg, &data, RunState::init(&cfg).unwrap(), None, |_, _| Ok(())).unwrap();
    assert_eq!(res.metrics.len(), 200);
    let mean = |r: &[MetricsRow]| r.iter().map(|m| m.composite_loss).sum::<f64>() / r.len() as f64;
    mean(&res.metrics[196..]) / mean(&res.metrics[..4])
}

#[test]
fn two_hundred_steps_halve_the_composite_loss() {
    for host in [Host::Ijepa, Host::LatentMim] {
        let r = first_last_ratio(host);
        assert!(r < 0.5, "{host}: last/first epoch ratio {r}");
    }
}
