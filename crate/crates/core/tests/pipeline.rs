use dualview_core::engine::{self, AdaptConfig, PretrainConfig};
use dualview_core::geometry::angle_between;
use dualview_core::model::{forward, Architecture, EstimatorParams};
use dualview_core::simdata::*;

fn small_sim() -> SimConfig {
    SimConfig {
        pretrain_samples: 600,
        rig_samples: 200,
        probe_samples: 40,
        ..SimConfig::default()
    }
}

fn gaze_error(params: &EstimatorParams, data: &[LabeledView]) -> f64 {
    data.iter()
        .map(|v| angle_between(&forward(params, &v.x).unwrap().gaze, &v.label.gaze))
        .sum::<f64>()
        / data.len() as f64
}

fn pretrained(data: &GeneratedData, iterations: usize) -> EstimatorParams {
    let cfg = PretrainConfig {
        iterations,
        ..PretrainConfig::default()
    };
    engine::pretrain(EstimatorParams::init(Architecture::default(), 1), &data.pretrain, &cfg)
        .unwrap()
        .params
}

fn unlabeled(s: &[DualViewSample]) -> Vec<DualViewInputs> {
    s.iter().map(DualViewSample::inputs).collect()
}

#[test]
fn pretraining_cuts_training_error_to_a_tenth() {
    let data = generate_datasets(&SimConfig::default()).unwrap();
    let init = EstimatorParams::init(Architecture::default(), 1);
    let before = gaze_error(&init, &data.pretrain);
    let out = engine::pretrain(init, &data.pretrain, &PretrainConfig::default()).unwrap();
    assert!(out.aborted.is_none());
    let after = gaze_error(&out.params, &data.pretrain);
    // measured 24.13 -> 2.72 deg (ratio 0.1125) with the default seed
    assert!(after / before < 0.125, "ratio {}", after / before);
}

#[test]
fn pretraining_is_bit_reproducible() {
    let data = generate_datasets(&small_sim()).unwrap();
    let a = pretrained(&data, 50);
    let b = pretrained(&data, 50);
    assert_eq!(a, b);
    assert_ne!(a, pretrained(&data, 51));
}

fn adapt_cfg(iterations: usize) -> AdaptConfig {
    AdaptConfig {
        iterations,
        probe_every: 10,
        ..AdaptConfig::default()
    }
}

#[test]
fn adaptation_log_obeys_its_invariants() {
    let data = generate_datasets(&small_sim()).unwrap();
    let params = pretrained(&data, 300);
    let cfg = adapt_cfg(60);
    let out = engine::adapt(params, &unlabeled(&data.rig_set), &data.pretrain, &unlabeled(&data.probe), &cfg).unwrap();
    let recs = &out.log.records;
    assert_eq!(recs.len(), 60);
    assert!(recs.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
    assert_eq!(recs[0].iteration, 1);
    for r in recs {
        assert!((-1.0..=1.0).contains(&r.c));
        assert!((r.l_stb - (r.f - r.c).abs()).abs() < 1e-12);
        let total = r.l_mut + cfg.lambda_stb * r.l_stb + cfg.lambda_pre * r.l_pre;
        assert!((r.total - total).abs() < 1e-9 * total.max(1.0));
    }
    // the momentum trace is reproduced exactly from the logged f values
    assert_eq!(engine::replay_momentum(recs, cfg.eta), 0.0);
    let probed: Vec<usize> = recs.iter().filter(|r| r.probe_consistency.is_some()).map(|r| r.iteration).collect();
    assert_eq!(probed, vec![10, 20, 30, 40, 50, 60]);
    assert!(out.log.initial_probe_consistency.is_some());
}

#[test]
fn adaptation_never_sees_extrinsics() {
    let cfg_sim = small_sim();
    let data = generate_datasets(&cfg_sim).unwrap();
    let params = pretrained(&data, 100);
    let dir = tempfile::tempdir().unwrap();
    write_datasets(dir.path(), &cfg_sim, &data, &serde_json::Value::Null).unwrap();

    // Rewrite the rig file with different extrinsics, world truth and labels
    // but identical features and normalization rotations.
    let mut tampered = data.clone();
    tampered.rig = Rig::yawed(80f64.to_radians(), 3.0).unwrap();
    for s in &mut tampered.rig_set {
        s.world.cam1 = CameraExtrinsics::orbiting(0.3, 0.1, 2.0);
        s.world.cam2 = CameraExtrinsics::orbiting(-0.4, 0.0, 0.5);
        s.world.subject.head_position = s.world.subject.head_position.scale(2.0);
        s.hidden.views.swap(0, 1);
        s.rig_id = "elsewhere".into();
    }
    let other = tempfile::tempdir().unwrap();
    write_datasets(other.path(), &cfg_sim, &tampered, &serde_json::json!({"tampered": true})).unwrap();

    let run = |dir: &std::path::Path| {
        let (_, pairs) = load_unlabeled(&dir.join(RIG_FILE)).unwrap();
        let (_, probe) = load_unlabeled(&dir.join(PROBE_FILE)).unwrap();
        engine::adapt(params.clone(), &pairs, &data.pretrain, &probe, &adapt_cfg(20)).unwrap()
    };
    let a = run(dir.path());
    let b = run(other.path());
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
}

#[test]
fn ablation_arms_zero_their_columns() {
    let data = generate_datasets(&small_sim()).unwrap();
    let params = pretrained(&data, 100);
    let cfg = AdaptConfig {
        enable_stb: false,
        enable_pre: false,
        ..adapt_cfg(20)
    };
    let out = engine::adapt(params, &unlabeled(&data.rig_set), &[], &unlabeled(&data.probe), &cfg).unwrap();
    assert_eq!(out.log.records.len(), 20);
    for r in &out.log.records {
        assert_eq!(r.l_stb, 0.0);
        assert_eq!(r.l_pre, 0.0);
        assert_eq!(r.total, r.l_mut);
        assert!((-1.0..=1.0).contains(&r.c));
    }
}

#[test]
fn non_finite_runs_stop_with_a_partial_log() {
    let data = generate_datasets(&small_sim()).unwrap();
    let cfg = PretrainConfig {
        iterations: 50,
        lr: f64::MAX,
        ..PretrainConfig::default()
    };
    let out = engine::pretrain(EstimatorParams::init(Architecture::default(), 1), &data.pretrain, &cfg).unwrap();
    assert!(out.aborted.is_some());
    assert!(out.log.records.len() < 50);
    assert!(out.params.0.is_finite());
}
