use flod_core::io::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint_for_level, save_checkpoint};
use flod_core::scene::{generate, Dataset, SyntheticParams};
use flod_core::trainer::{train, EventKind, TrainConfig, Trainer};
use flod_core::Error;

fn tiny_scene(seed: u64) -> Dataset {
    generate(SyntheticParams { seed, gaussians: 3, views: 3, resolution: 16 }).unwrap().dataset
}

fn event_iterations(t: &Trainer<'_>, level: u32, pick: fn(&EventKind) -> bool) -> Vec<u32> {
    t.events().iter().filter(|e| e.level == level && pick(&e.kind)).map(|e| e.iteration).collect()
}

#[test]
fn full_level_one_schedule() {
    let data = tiny_scene(3);
    let cfg = TrainConfig::for_levels(2);
    let mut t = Trainer::new(&data, cfg, 0.2, 4.0, 2).unwrap();
    assert_eq!(t.run_steps(10_000).unwrap(), 10_000);
    assert_eq!(t.level(), 2);
    let densify = event_iterations(&t, 1, |k| matches!(k, EventKind::Densify { .. }));
    let overlap = event_iterations(&t, 1, |k| matches!(k, EventKind::OverlapPrune { .. }));
    let reset = event_iterations(&t, 1, |k| matches!(k, EventKind::OpacityReset { .. }));
    assert_eq!(densify, [2000, 4000]);
    assert_eq!(overlap, [1000, 2000, 3000, 4000]);
    assert_eq!(reset, [3000]);
    let checkpoints = event_iterations(&t, 1, |k| matches!(k, EventKind::Checkpoint { .. }));
    assert_eq!(checkpoints, [10_000]);
}

#[test]
fn no_overlap_pruning_at_top_level() {
    let data = tiny_scene(4);
    let cfg = TrainConfig::for_levels(2).scaled(0.02);
    let mut t = Trainer::new(&data, cfg, 0.2, 4.0, 2).unwrap();
    t.run(None).unwrap();
    assert!(!event_iterations(&t, 1, |k| matches!(k, EventKind::OverlapPrune { .. })).is_empty());
    assert!(event_iterations(&t, 2, |k| matches!(k, EventKind::OverlapPrune { .. })).is_empty());
    // nothing but checkpoints and level starts after each horizon
    for e in t.events() {
        let horizon = TrainConfig::for_levels(2).scaled(0.02).schedules[e.level as usize - 1].density_horizon;
        if matches!(e.kind, EventKind::Densify { .. } | EventKind::OverlapPrune { .. } | EventKind::OpacityReset { .. }) {
            assert!(e.iteration < horizon, "{e:?}");
        }
    }
}

#[test]
fn single_level_has_no_constraint() {
    let data = tiny_scene(5);
    let out = train(&data, TrainConfig::for_levels(1).scaled(0.01), 0.2, 4.0, 1).unwrap();
    assert_eq!(out.model.levels.len(), 1);
    assert_eq!(out.model.levels[0].s_min, 0.0);
    assert!(out.events.iter().all(|e| !matches!(e.kind, EventKind::OverlapPrune { .. })));
}

#[test]
fn resume_matches_straight_run() {
    let data = tiny_scene(6);
    let cfg = TrainConfig::for_levels(3).scaled(0.01);

    let mut straight = Trainer::new(&data, cfg.clone(), 0.1, 4.0, 3).unwrap();
    straight.run_steps(250).unwrap();

    let mut first = Trainer::new(&data, cfg.clone(), 0.1, 4.0, 3).unwrap();
    first.run_steps(130).unwrap();
    assert_eq!(first.level(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    drop(first);
    let ckpt = load_checkpoint_for_level(&path, 2).unwrap();
    let mut resumed = Trainer::resume(&data, cfg, ckpt).unwrap();
    resumed.run_steps(120).unwrap();

    assert_eq!(resumed.checkpoint(), straight.checkpoint());
    straight.run(None).unwrap();
    resumed.run(None).unwrap();
    let a = straight.finish().unwrap();
    let b = resumed.finish().unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.events, b.events);
}

#[test]
fn checkpoint_validation() {
    let data = tiny_scene(7);
    let cfg = TrainConfig::for_levels(2).scaled(0.01);
    let mut t = Trainer::new(&data, cfg.clone(), 0.1, 4.0, 2).unwrap();
    t.run_steps(10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &t.checkpoint()).unwrap();
    assert!(matches!(load_checkpoint_for_level(&path, 2), Err(Error::Validation(_))));

    let mut bytes = encode_checkpoint(&t.checkpoint()).unwrap();
    assert_eq!(decode_checkpoint(&bytes).unwrap(), t.checkpoint());
    bytes[8] = 7;
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::Version { found: 7, .. })));
    assert!(matches!(decode_checkpoint(&bytes[..20]), Err(Error::Parse { .. }) | Err(Error::Version { .. })));

    // a set whose s_min belongs to another level
    let mut wrong = t.checkpoint();
    wrong.set.s_min = 0.0;
    assert!(matches!(Trainer::resume(&data, cfg.clone(), wrong), Err(Error::Validation(_))));

    let mut empty = t.checkpoint();
    empty.set = flod_core::GaussianLevelSet::empty(1, empty.set.s_min);
    assert!(encode_checkpoint(&empty).is_err());

    let mut other = cfg;
    other.seed = 99;
    assert!(Trainer::resume(&data, other, t.checkpoint()).is_err());
}

#[test]
fn saved_levels_are_isolated_from_later_training() {
    let data = tiny_scene(8);
    let cfg = TrainConfig::for_levels(2).scaled(0.01);
    let mut t = Trainer::new(&data, cfg, 0.1, 4.0, 2).unwrap();
    t.run_steps(100).unwrap();
    assert_eq!(t.level(), 2);
    let saved = t.checkpoint().completed[0].clone();
    t.run(None).unwrap();
    let out = t.finish().unwrap();
    assert_eq!(out.model.levels[0], saved);
    assert_ne!(out.model.levels[1].positions, saved.positions);
}

#[test]
fn transitions_preserve_renders_and_constraint() {
    let data = tiny_scene(9);
    let out = train(&data, TrainConfig::for_levels(3).scaled(0.01), 0.1, 4.0, 3).unwrap();
    for r in &out.reports {
        assert_eq!(r.violation_iterations, 0, "level {}", r.level);
        if r.level < 3 {
            let tr = r.transition.as_ref().unwrap();
            assert!(tr.max_abs_diff <= 1e-6, "{tr:?}");
        }
    }
    out.model.validate().unwrap();
}

#[test]
fn empty_point_cloud_fails_initialization() {
    let mut data = tiny_scene(10);
    data.points.clear();
    data.point_colors.clear();
    let r = Trainer::new(&data, TrainConfig::for_levels(2), 0.1, 4.0, 2);
    assert!(matches!(r, Err(Error::Initialization(_))));
}

#[test]
fn non_finite_loss_aborts() {
    let mut data = tiny_scene(11);
    for v in &mut data.train {
        v.image.data[5] = f64::NAN;
    }
    let mut t = Trainer::new(&data, TrainConfig::for_levels(1).scaled(0.01), 0.1, 4.0, 1).unwrap();
    assert!(matches!(t.step(), Err(Error::Diverged { level: 1, iteration: 1, .. })));
}

#[test]
fn bad_arguments_are_rejected() {
    let data = tiny_scene(12);
    assert!(Trainer::new(&data, TrainConfig::for_levels(2), 0.0, 4.0, 2).is_err());
    assert!(Trainer::new(&data, TrainConfig::for_levels(2), 0.1, 1.0, 2).is_err());
    assert!(Trainer::new(&data, TrainConfig::for_levels(2), 0.1, 4.0, 3).is_err());
}

#[test]
fn runs_are_deterministic() {
    let data = tiny_scene(13);
    let cfg = TrainConfig::for_levels(2).scaled(0.01);
    let a = train(&data, cfg.clone(), 0.1, 4.0, 2).unwrap();
    let b = train(&data, cfg, 0.1, 4.0, 2).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.events, b.events);
}
