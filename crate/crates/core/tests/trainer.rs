use cyclemap::geometry::shapes::fibonacci_sphere;
use cyclemap::geometry::{NormalizeTransform, PointCloud3};
use cyclemap::losses::{wrap_loss, LossReport};
use cyclemap::networks::{load_checkpoint, SubNetworkSet, StackId};
use cyclemap::pipeline::{forward_2d_branch, make_grid, BranchMode};
use cyclemap::trainer::{
    fit, train_step, warmup, Adam, Phase, RunWriter, TrainConfig, TrainError, Trainer,
    DENSE_SWITCH, WARMUP_END,
};

fn small_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed: 11,
        hidden: vec![16, 16],
        embed_dim: 8,
        checkpoint_every: 10,
        learning_rate: 3e-3,
        ..Default::default()
    }
}

fn net_for(cfg: &TrainConfig) -> SubNetworkSet {
    SubNetworkSet::init(&cfg.architecture(), cfg.seed)
}

fn without_time(r: &[LossReport]) -> Vec<LossReport> {
    r.iter()
        .cloned()
        .map(|mut r| {
            r.wall_time = 0.0;
            r
        })
        .collect()
}

#[test]
fn zero_warmup_leaves_parameters_unchanged() {
    let cfg = TrainConfig {
        warmup_fraction: 0.0,
        ..small_config(20)
    };
    let net = net_for(&cfg);
    let warmed = warmup(net.clone(), &fibonacci_sphere(64), &cfg).unwrap();
    assert_eq!(warmed, net);
}

#[test]
fn warmup_is_deterministic_and_reduces_wrap_loss() {
    let cfg = TrainConfig {
        warmup_fraction: 0.5,
        ..small_config(120)
    };
    let p = fibonacci_sphere(64);
    let net = net_for(&cfg);
    let a = warmup(net.clone(), &p, &cfg).unwrap();
    let b = warmup(net.clone(), &p, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, net);
    let g = make_grid(p.len()).unwrap();
    let before = wrap_loss(&forward_2d_branch(&net, &g).unwrap().p_hat, &p).unwrap();
    let after = wrap_loss(&forward_2d_branch(&a, &g).unwrap().p_hat, &p).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let cfg = TrainConfig {
        w_unwrap: 0.0,
        w_wrap: 0.0,
        w_cycle: 0.0,
        w_distortion: 0.0,
        w_aflip: 0.0,
        ..small_config(5)
    };
    let mut net = net_for(&cfg);
    let before = net.clone();
    let mut adam = Adam::new(net.num_params(), 0.9, 0.999, 1e-8);
    let p = fibonacci_sphere(40);
    let r = train_step(&mut net, &mut adam, &p, &make_grid(40).unwrap(), &cfg, 0).unwrap();
    assert_eq!(r.total, 0.0);
    assert_eq!(net, before);
}

#[test]
fn small_step_decreases_the_objective() {
    let cfg = TrainConfig {
        perturbation: 0.0,
        learning_rate: 1e-4,
        ..small_config(5)
    };
    let p = fibonacci_sphere(48);
    let g = make_grid(48).unwrap();
    let mut net = net_for(&cfg);
    let mut adam = Adam::new(net.num_params(), 0.9, 0.999, 1e-8);
    let first = train_step(&mut net, &mut adam, &p, &g, &cfg, 0).unwrap();
    let second = train_step(&mut net, &mut adam, &p, &g, &cfg, 0).unwrap();
    assert!(second.total < first.total, "{} !< {}", second.total, first.total);
}

#[test]
fn branch_ablations_cut_dataflow() {
    let p = fibonacci_sphere(48);
    let g = make_grid(48).unwrap();
    let cfg3 = TrainConfig {
        branches: BranchMode::ThreeDOnly,
        ..small_config(5)
    };
    let mut net = net_for(&cfg3);
    let before = net.clone();
    let mut adam = Adam::new(net.num_params(), 0.9, 0.999, 1e-8);
    let r = train_step(&mut net, &mut adam, &p, &g, &cfg3, 0).unwrap();
    assert!(r.wrap.is_none() && r.unwrap.is_some());
    for id in [StackId::DeformEmbed, StackId::DeformHead] {
        assert_eq!(net.stack(id), before.stack(id), "{id:?}");
    }
    assert_ne!(net.stack(StackId::Unwrap), before.stack(StackId::Unwrap));

    let cfg2 = TrainConfig {
        branches: BranchMode::TwoDOnly,
        ..small_config(5)
    };
    let mut net = net_for(&cfg2);
    let mut adam = Adam::new(net.num_params(), 0.9, 0.999, 1e-8);
    let r = train_step(&mut net, &mut adam, &p, &g, &cfg2, 0).unwrap();
    assert!(r.unwrap.is_none() && r.wrap.is_some());
    assert_eq!(r.unwrap_active, 0);
}

#[test]
fn schedule_markers_and_checkpoints() {
    let cfg = small_config(40);
    let p = fibonacci_sphere(64);
    assert_eq!(Phase::at(&cfg, 0), Phase::Warmup);
    assert_eq!(Phase::at(&cfg, 4), Phase::Sparse);
    assert_eq!(Phase::at(&cfg, 24), Phase::Dense);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(net_for(&cfg), p.clone(), NormalizeTransform::identity(), cfg.clone()).unwrap();
    assert_eq!(t.sparse_points().len(), 16);
    assert_eq!(t.warmup_points().len(), 16);
    let mut w = RunWriter::create(dir.path(), &cfg).unwrap();
    let log = t.run(cfg.steps, Some(&mut w)).unwrap();
    assert_eq!(log.reports.len(), 40);
    assert!(log.reports.windows(2).all(|w| w[1].step == w[0].step + 1));
    let events: Vec<(&str, u64)> = log.markers.iter().map(|m| (m.event.as_str(), m.step)).collect();
    assert_eq!(events, vec![(WARMUP_END, 4), (DENSE_SWITCH, 24)]);
    assert_eq!(log.checkpoints, vec![10, 20, 30]);
    for name in ["config.snapshot", "log.jsonl", "ckpt_10", "ckpt_20", "ckpt_30", "final.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 42);
    assert_eq!(text.matches(WARMUP_END).count(), 1);
    assert_eq!(text.matches(DENSE_SWITCH).count(), 1);
    let snap = std::fs::read_to_string(dir.path().join("config.snapshot")).unwrap();
    assert_eq!(TrainConfig::from_toml_str(&snap).unwrap(), cfg);
    let last = load_checkpoint(dir.path().join("final.ckpt"), &cfg.architecture()).unwrap();
    assert_eq!(&last.net, t.net());
    assert_eq!(last.step, 40);
}

#[test]
fn resume_replays_the_remaining_stream_bit_exactly() {
    let cfg = small_config(30);
    let p = fibonacci_sphere(64);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(net_for(&cfg), p.clone(), NormalizeTransform::identity(), cfg.clone()).unwrap();
    let mut w = RunWriter::create(dir.path(), &cfg).unwrap();
    let log = full.run(cfg.steps, Some(&mut w)).unwrap();

    let ckpt = load_checkpoint(dir.path().join("ckpt_10"), &cfg.architecture()).unwrap();
    let mut resumed = Trainer::from_checkpoint(ckpt, p.clone(), cfg.clone()).unwrap();
    assert_eq!(resumed.step(), 10);
    let tail = resumed.run(cfg.steps, None).unwrap();
    assert_eq!(without_time(&tail.reports), without_time(&log.reports[10..]));
    assert_eq!(resumed.net(), full.net());

    let (again, again_log) = fit(net_for(&cfg), &p, &cfg).unwrap();
    assert_eq!(&again, full.net());
    assert_eq!(without_time(&again_log.reports), without_time(&log.reports));
}

#[test]
fn non_finite_parameters_abort_with_checkpoint_reference() {
    let cfg = small_config(30);
    let p = fibonacci_sphere(64);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(net_for(&cfg), p.clone(), NormalizeTransform::identity(), cfg.clone()).unwrap();
    let mut w = RunWriter::create(dir.path(), &cfg).unwrap();
    t.run(12, Some(&mut w)).unwrap();
    let mut ckpt = t.checkpoint();
    ckpt.net.stack_mut(StackId::Stitch).layers[0].bias.set(0, 0, f64::NAN);
    let mut broken = Trainer::from_checkpoint(ckpt, p, cfg).unwrap();
    match broken.run(30, Some(&mut w)) {
        Err(TrainError::NonFinite {
            step,
            last_checkpoint,
            ..
        }) => {
            assert_eq!(step, 12);
            assert_eq!(last_checkpoint.unwrap(), dir.path().join("ckpt_10"));
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn invalid_setups_are_rejected() {
    let cfg = small_config(10);
    let tiny = PointCloud3::new(fibonacci_sphere(12).points);
    assert!(matches!(
        Trainer::new(net_for(&cfg), tiny, NormalizeTransform::identity(), cfg.clone()),
        Err(TrainError::Config(_))
    ));
    let other = SubNetworkSet::init(&TrainConfig::default().architecture(), 0);
    assert!(Trainer::new(other, fibonacci_sphere(64), NormalizeTransform::identity(), cfg).is_err());
}
