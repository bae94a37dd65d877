mod common;

use beamcast::frontend::DatasetContainer;
use beamcast::model::{load_model, ForwardOptions, Model, RoutingMode, Sample, TrainMask};
use beamcast::train::{
    checkpoint_path, log_path, run_stage, AdamW, AdamWParams, RunOptions, Splits, Stage, StagePlan, TrainConfig, TrainSession,
};
use beamcast::Error;
use common::*;

fn data() -> [DatasetContainer; 3] {
    smoke_dataset(60, 7).split(7)
}

fn splits(parts: &[DatasetContainer; 3]) -> Splits<'_> {
    Splits { train: &parts[0].records, val: &parts[1].records }
}

fn tensor_bytes(m: &Model<f32>, i: usize) -> Vec<u8> {
    m.params.tensor_bytes(i)
}

#[test]
fn stages_leave_frozen_tensors_byte_identical() {
    let parts = data();
    let cfg = smoke_model(&parts[0]);
    let tc = smoke_train(2);
    let start = Model::<f32>::new(&cfg, 3).unwrap();

    let mut m2 = start.clone();
    run_stage(&StagePlan::new(Stage::Two, &tc, 3), &mut m2, splits(&parts), &RunOptions::default()).unwrap();
    let gate = start.layout.gate_tensors();
    let mut gate_moved = false;
    for i in 0..start.params.tensors.len() {
        if gate.contains(&i) {
            gate_moved |= tensor_bytes(&m2, i) != tensor_bytes(&start, i);
        } else {
            assert_eq!(tensor_bytes(&m2, i), tensor_bytes(&start, i), "{}", start.params.tensors[i].name);
        }
    }
    assert!(gate_moved);

    let mut m3 = m2.clone();
    run_stage(&StagePlan::new(Stage::Three, &tc, 3), &mut m3, splits(&parts), &RunOptions::default()).unwrap();
    let l = &start.layout;
    let frozen: Vec<usize> = l
        .expert_first_layers()
        .into_iter()
        .chain(l.attention_tensors())
        .chain(l.embedding_tensors())
        .chain(l.layers.iter().flat_map(|x| [x.ln1_g, x.ln1_b, x.ln2_g, x.ln2_b]))
        .chain(l.layers[0].ffn.iter().flat_map(|f| [f.w1, f.b1, f.w2, f.b2]))
        .collect();
    for i in frozen {
        assert_eq!(tensor_bytes(&m3, i), tensor_bytes(&m2, i), "{}", start.params.tensors[i].name);
    }
    assert_ne!(tensor_bytes(&m3, l.cls), tensor_bytes(&m2, l.cls));
}

#[test]
fn stage_one_leaves_the_gate_untouched() {
    let parts = data();
    let cfg = smoke_model(&parts[0]);
    let start = Model::<f32>::new(&cfg, 4).unwrap();
    let mut m = start.clone();
    run_stage(&StagePlan::new(Stage::One, &smoke_train(1), 4), &mut m, splits(&parts), &RunOptions::default()).unwrap();
    for i in start.layout.gate_tensors() {
        assert_eq!(tensor_bytes(&m, i), tensor_bytes(&start, i));
    }
    assert_ne!(tensor_bytes(&m, start.layout.proj), tensor_bytes(&start, start.layout.proj));
}

#[test]
fn zero_learning_rate_changes_nothing_but_records_loss() {
    let parts = data();
    let cfg = smoke_model(&parts[0]);
    let mut tc = smoke_train(2);
    tc.scheduler.min_lr = 0.0;
    tc.end_to_end.lr = 0.0;
    let start = Model::<f32>::new(&cfg, 5).unwrap();
    let mut m = start.clone();
    let rep = run_stage(&StagePlan::new(Stage::EndToEnd, &tc, 5), &mut m, splits(&parts), &RunOptions::default()).unwrap();
    assert_eq!(m.params, start.params);
    assert!(rep.epochs.iter().all(|e| e.train_loss.is_finite() && e.train_loss > 0.0));
}

#[test]
fn hard_routing_gives_absent_quadrants_zero_gradient() {
    let parts = data();
    let cfg = smoke_model(&parts[0]);
    let m = random_model(&cfg, 6, 0.3).convert::<f32>();
    let mask = TrainMask::all(m.params.tensors.len());
    let train = &parts[0].records;
    for batch in train.chunks(8) {
        let mut grads = m.params.zeros_like();
        let mut present = [false; 4];
        for r in batch {
            present[beamcast::frontend::quadrant(r.scene, r.speed_norm)] = true;
            let s = Sample { x: &r.x, scene: r.scene, speed_norm: r.speed_norm };
            m.forward_backward(&s, None, None, r.class_id as usize, &ForwardOptions::eval(RoutingMode::HardMask), 1.0, &mask, &mut grads)
                .unwrap();
        }
        for (e, &p) in present.iter().enumerate() {
            let norm: f64 = m.layout.expert_tensors(e).iter().map(|&t| grads.l2_norm(t)).sum();
            assert_eq!(norm == 0.0, !p, "expert {e}, present {p}");
        }
    }
}

#[test]
fn stage_three_step_ratio_is_four_under_unit_gradients() {
    let parts = data();
    let cfg = smoke_model(&parts[0]);
    let mut m = Model::<f32>::new(&cfg, 8).unwrap();
    m.params.fill_zero();
    let plan = StagePlan::new(Stage::Three, &TrainConfig::default(), 0);
    let n = m.params.tensors.len();
    let trainable = plan.trainable(&m.layout, n);
    let mut opt = AdamW::new(AdamWParams::default(), &m.params, &trainable);
    let mut grads = m.params.zeros_like();
    for t in &mut grads.tensors {
        t.data.fill(1.0);
    }
    opt.step(&mut m.params, &grads, &plan.tensor_lrs(&m.layout, n, 0));
    let cls = m.params.get(m.layout.cls)[0].abs() as f64;
    let w2 = m.params.get(m.layout.layers[1].ffn[0].w2)[0].abs() as f64;
    assert!((cls / w2 - 4.0).abs() < 1e-5, "{cls} / {w2}");
    assert_eq!(m.params.get(m.layout.layers[1].ffn[0].w1)[0], 0.0);
}

#[test]
fn non_finite_parameters_abort_with_diagnostics() {
    let parts = data();
    let cfg = smoke_model(&parts[0]);
    let mut m = Model::<f32>::new(&cfg, 9).unwrap();
    let cls = m.layout.cls;
    m.params.get_mut(cls)[0] = f32::NAN;
    let err = run_stage(&StagePlan::new(Stage::EndToEnd, &smoke_train(1), 9), &mut m, splits(&parts), &RunOptions::default())
        .unwrap_err();
    match err {
        Error::NumericalAbort { epoch, batch, lr, .. } => {
            assert_eq!((epoch, batch), (0, 0));
            assert!(lr > 0.0);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn stage_without_trainable_tensors_is_a_config_error() {
    let parts = data();
    let cfg = beamcast::model::ModelConfig { uniform_gate: true, ..smoke_model(&parts[0]) };
    let mut m = Model::<f32>::new(&cfg, 1).unwrap();
    let err = run_stage(&StagePlan::new(Stage::Two, &smoke_train(1), 1), &mut m, splits(&parts), &RunOptions::default());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn curriculum_writes_three_checkpoints_and_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let parts = data();
    let cfg = smoke_model(&parts[0]);
    let tc = smoke_train(2);
    let session = TrainSession { model: &cfg, train: &tc, seed: 11, dir: dir.path(), verbose: false };
    let (_, reports) = session.curriculum(splits(&parts)).unwrap();
    assert_eq!(reports.len(), 3);
    for (r, s) in reports.iter().zip(Stage::CURRICULUM) {
        assert_eq!(r.stage, s);
        let (_, meta) = load_model(&cfg, &checkpoint_path(dir.path(), s)).unwrap();
        let meta = meta.unwrap();
        let best = r.epochs.iter().map(|e| e.val_top1).fold(f64::MIN, f64::max);
        assert_eq!(meta.val_top1, best);
        assert_eq!(meta.stage, s.name());
        assert_eq!(meta.epoch as usize, r.best_epoch);
    }
    for r in &reports {
        let log = std::fs::read_to_string(log_path(dir.path(), r.stage)).unwrap();
        assert_eq!(log.lines().count(), r.epochs.len());
    }
    let log1 = std::fs::read_to_string(log_path(dir.path(), Stage::One)).unwrap();
    assert!(log1.starts_with("stage=stage1 epoch=0 lr.all_but_gate="));

    let log2 = std::fs::read(log_path(dir.path(), Stage::Two)).unwrap();
    let (_, again) = session.run(Stage::Two, splits(&parts)).unwrap();
    assert_eq!(again.epochs[0].train_loss, reports[1].epochs[0].train_loss);
    assert_eq!(std::fs::read(log_path(dir.path(), Stage::Two)).unwrap(), log2);

    std::fs::remove_file(checkpoint_path(dir.path(), Stage::One)).unwrap();
    match session.run(Stage::Two, splits(&parts)) {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("stage1.bin")),
        other => panic!("expected a missing-artifact error, got {:?}", other.map(|r| r.1.summary())),
    }
}

#[test]
fn end_to_end_is_deterministic() {
    let parts = data();
    let cfg = smoke_model(&parts[0]);
    let tc = smoke_train(2);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let session = TrainSession { model: &cfg, train: &tc, seed: 12, dir: dir.path(), verbose: false };
        let (m, r) = session.end_to_end(splits(&parts)).unwrap();
        (m.params, r.epochs)
    };
    let (pa, ea) = run();
    let (pb, eb) = run();
    assert_eq!(pa, pb);
    assert_eq!(ea, eb);
}
