use msl::data::{generate_split, Dataset, DatasetParams, Split};
use msl::evaluation::{
    compare, draw_eval_masks, evaluate, evaluate_masked, evaluate_with_masks, plot_csv, score_dataset, EvalConfig,
    MetricSummary, METRIC_NAMES,
};
use msl::masking::{build_subsets, Mask, MaskSubsets, Subset, SubsetConfig};
use msl::metrics::{predictions_from_jsonl, predictions_to_jsonl, report};
use msl::model::{Architecture, ModelParams};

fn test_set() -> Dataset {
    let p = DatasetParams { n_test: 70, num_classes: 5, seed: 4, ..Default::default() };
    generate_split(&p, Split::Test).unwrap()
}

fn model(seed: u64) -> ModelParams {
    ModelParams::init(&Architecture { num_classes: 5, ..Default::default() }, seed).unwrap()
}

fn masks() -> MaskSubsets {
    build_subsets(&SubsetConfig { count_per_subset: 30, ..Default::default() }).unwrap()
}

#[test]
fn all_ones_masks_match_clean_evaluation() {
    let d = test_set();
    let ones = Mask::ones(64, 64);
    let m = vec![&ones; d.len()];
    assert_eq!(evaluate_with_masks(&model(0), &d, &m, 0.5).unwrap(), evaluate(&model(0), &d, 0.5).unwrap());
}

#[test]
fn zero_model_scores_one_half() {
    let d = test_set();
    let mut p = model(0);
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let sp = score_dataset(&p, &d, None).unwrap();
    assert!(sp.scores().iter().all(|&s| s == 0.5));
    let r = evaluate(&p, &d, 0.5).unwrap();
    assert_eq!(r.prf.or_, 1.0);
    assert_eq!(r.prf.cr, 1.0);
}

#[test]
fn masked_evaluation_is_seeded() {
    let (d, s) = (test_set(), masks());
    let a = evaluate_masked(&model(1), &d, &s, Subset::High, 3, 0.5).unwrap();
    assert_eq!(a, evaluate_masked(&model(1), &d, &s, Subset::High, 3, 0.5).unwrap());
    let drawn = draw_eval_masks(&s, Subset::High, d.len(), 3).unwrap();
    assert_eq!(a, evaluate_with_masks(&model(1), &d, &drawn, 0.5).unwrap());
    assert_ne!(drawn, draw_eval_masks(&s, Subset::High, d.len(), 4).unwrap());
}

#[test]
fn masked_evaluation_leaves_dataset_untouched() {
    let (d, s) = (test_set(), masks());
    let before = d.clone();
    evaluate_masked(&model(1), &d, &s, Subset::High, 0, 0.5).unwrap();
    assert_eq!(d.samples, before.samples);
}

#[test]
fn comparison_rows_and_deltas() {
    let (d, s) = (test_set(), masks());
    let (a, b) = (model(1), model(2));
    let models = vec![("a".to_string(), &a), ("b".to_string(), &b)];
    let cfg = EvalConfig::default();
    let r = compare(&models, &d, Some(&s), &cfg).unwrap();
    let csv = plot_csv(&r);
    assert_eq!(csv.lines().count() - 1, 2 * 2 * METRIC_NAMES.len());
    for m in &r.models {
        assert_eq!(m.masked_runs.len(), cfg.seeds.len());
        let runs: Vec<_> = m.masked_runs.iter().map(|x| MetricSummary::from_report(&x.report)).collect();
        let masked = MetricSummary::mean(&runs);
        assert_eq!(m.masked, Some(masked));
        let deltas = m.deltas.unwrap();
        for ((_, d), (c, mk)) in deltas.named().zip(m.clean_summary().values().into_iter().zip(masked.values())) {
            assert!((d - (mk - c)).abs() < 1e-15);
        }
    }
    let clean_only = compare(&models, &d, None, &cfg).unwrap();
    assert_eq!(plot_csv(&clean_only).lines().count() - 1, 2 * METRIC_NAMES.len());
}

#[test]
fn dumped_predictions_reproduce_the_report() {
    let d = test_set();
    let sp = score_dataset(&model(3), &d, None).unwrap();
    let ids: Vec<String> = d.samples.iter().map(|s| s.id.clone()).collect();
    let (_, back) = predictions_from_jsonl(&predictions_to_jsonl(&ids, &sp)).unwrap();
    let mut direct = evaluate(&model(3), &d, 0.5).unwrap();
    direct.strata.clear();
    direct.notes.retain(|n| !n.starts_with("stratum"));
    assert_eq!(report(&back, 0.5).unwrap(), direct);
}

#[test]
fn incompatible_model_is_rejected() {
    let d = test_set();
    let wrong = ModelParams::init(&Architecture { num_classes: 3, ..Default::default() }, 0).unwrap();
    assert!(evaluate(&wrong, &d, 0.5).is_err());
}

#[test]
fn strata_are_reported_for_synthetic_data() {
    let r = evaluate(&model(0), &test_set(), 0.5).unwrap();
    for name in ["occluded", "non_occluded"] {
        assert!(r.stratum(name).is_some(), "{name}: {:?}", r.notes);
    }
}
