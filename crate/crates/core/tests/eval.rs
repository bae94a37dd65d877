mod common;

use beamcast::eval::latency::routing_latency_medians;
use beamcast::eval::metrics::{scene_accuracy, transition_accuracy};
use beamcast::eval::{
    bench_latency, collapse_diagnostic, comparison_report, gate_heatmap, run_ablation, run_sweep, topk_accuracy,
    ExperimentData, ExperimentOptions, MetricsReport, Report, SweepAxis, Variant, Verdict,
};
use beamcast::model::{Model, RoutingMode};
use common::*;
use rand::Rng;

#[test]
fn metrics_match_brute_force_recounts() {
    let mut r = rng(1);
    for set in 0..1000 {
        let n = r.random_range(1..40);
        let c = r.random_range(3..9);
        let coarse = set % 3 == 0;
        let logits: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                (0..c)
                    .map(|_| if coarse { r.random_range(0..3) as f32 } else { r.random::<f32>() })
                    .collect()
            })
            .collect();
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let transitions: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        let quadrants: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        for k in [1, 3, c] {
            assert_eq!(topk_accuracy(&logits, &targets, k).unwrap(), recount_topk(&logits, &targets, k));
        }
        let preds: Vec<usize> = logits
            .iter()
            .map(|l| (0..c).find(|&j| (0..c).all(|i| l[i] < l[j] || (l[i] == l[j] && i >= j))).unwrap())
            .collect();
        let tr = transition_accuracy(&preds, &targets, &transitions);
        let (mut th, mut tn) = (0, 0);
        for i in 0..n {
            if transitions[i] {
                tn += 1;
                th += usize::from(preds[i] == targets[i]);
            }
        }
        assert_eq!(tr.count, tn);
        assert_eq!(tr.value, (tn > 0).then(|| th as f64 / tn as f64));
        let sc = scene_accuracy(&preds, &targets, &quadrants);
        for q in 0..4 {
            let idx: Vec<usize> = (0..n).filter(|&i| quadrants[i] == q).collect();
            let hits = idx.iter().filter(|&&i| preds[i] == targets[i]).count();
            assert_eq!(sc[q].count, idx.len());
            assert_eq!(sc[q].value, (!idx.is_empty()).then(|| hits as f64 / idx.len() as f64));
        }
        let m = MetricsReport::compute(&logits, &targets, &transitions, &quadrants).unwrap();
        assert!(m.top3 >= m.top1);
        assert_eq!(m.scene_counts.iter().sum::<usize>(), m.n_total);
    }
}

#[test]
fn untrained_gate_heatmap_is_uniform() {
    let ds = smoke_dataset(40, 2);
    let cfg = smoke_model(&ds);
    let mut m = Model::<f32>::new(&cfg, 1).unwrap();
    for i in m.layout.gate_tensors() {
        m.params.get_mut(i).fill(0.0);
    }
    let h = gate_heatmap(&m, &ds.records);
    for row in h.rows.iter().flatten() {
        for w in row {
            assert!((w - 0.25).abs() < 1e-7);
        }
    }
    assert_eq!(collapse_diagnostic(&h).1, Verdict::Collapsed);
    let trained = random_model(&cfg, 3, 1.5).convert::<f32>();
    for row in gate_heatmap(&trained, &ds.records).rows.iter().flatten() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    }
}

#[test]
fn benchmark_times_exactly_the_requested_runs() {
    let ds = smoke_dataset(20, 3);
    let m = Model::<f32>::new(&smoke_model(&ds), 1).unwrap();
    let rep = bench_latency(&m, RoutingMode::Top1, 20, 1000, 0).unwrap();
    assert_eq!(rep.timings_ms.len(), 1000);
    assert_eq!((rep.n_warmup, rep.batch_size), (20, 1));
    assert!(rep.p99_ms >= rep.median_ms && rep.median_ms >= 0.0);
    let back = beamcast::eval::LatencyReport::from_report(&Report::parse(&rep.to_report().to_text()).unwrap()).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn top1_is_not_slower_than_soft_dense() {
    let cfg = beamcast::model::ModelConfig {
        d_model: 64,
        ..smoke_model(&smoke_dataset(20, 4))
    };
    let m = Model::<f32>::new(&cfg, 1).unwrap();
    let (top1, soft) = routing_latency_medians(&m, 5, 20, 300, 0).unwrap();
    assert!(top1 <= 1.05 * soft, "top1 {top1} ms vs soft {soft} ms");
}

#[test]
fn ablation_and_sweep_emit_ordered_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ds = smoke_dataset(60, 5);
    let [train, val, test] = ds.split(5);
    let base = beamcast::model::ModelConfig { ..smoke_model(&ds) };
    let data = ExperimentData {
        dims: ds.dims,
        num_classes: ds.num_classes(),
        train: &train.records,
        val: &val.records,
        test: &test.records,
    };
    let opts = ExperimentOptions { seed: 1, dir: dir.path().into(), verbose: false, latency: Some((2, 10)) };
    let tc = smoke_train(1);
    let results = run_ablation(&Variant::ABLATIONS, &base, &tc, data, &opts).unwrap();
    let rep = comparison_report("ablation", &results);
    let parsed = Report::parse(&rep.to_text()).unwrap();
    assert_eq!(parsed, rep);
    let labels: Vec<&str> = parsed.table.as_ref().unwrap().rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["full", "no_moe", "no_context", "no_se", "end_to_end"]);
    assert_eq!(results[0].reports.len(), 3);
    assert_eq!(results[0].eval_mode, RoutingMode::Top1);
    assert_eq!(results[4].eval_mode, RoutingMode::SoftDense);
    assert!(results.iter().all(|r| r.metrics.top3 >= r.metrics.top1));

    let sweep = run_sweep(SweepAxis::Depth, &[2, 4], &base, &tc, data, &opts).unwrap();
    assert_eq!(sweep.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["depth=2", "depth=4"]);
    assert_eq!(sweep[0].model.cfg.moe_layers, vec![0, 1]);
}
