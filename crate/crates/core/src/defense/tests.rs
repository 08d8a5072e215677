use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;

use super::*;
use crate::dataset::{synth_generate, SynthParams};
use crate::models::{train, ModelKind, Side};
use crate::schema::projection::project;
use crate::schema::FeatureBounds;

fn clean_set(n: usize, seed: u64) -> LabeledDataset {
    let schema = Arc::new(FeatureSchema::default_flow());
    synth_generate(&SynthParams::preset("neris", n).unwrap(), schema, seed).unwrap()
}

/// Malicious rows with their modifiables inflated, projected back on the domain.
fn shifted(ds: &LabeledDataset) -> Vec<FeatureVector> {
    let schema = ds.schema();
    let bounds = FeatureBounds::fit(schema.arity(), ds.vectors().iter()).unwrap();
    let cols = schema.group_indices(FeatureGroup::Modifiable);
    ds.with_label(Label::Malicious)
        .vectors()
        .iter()
        .map(|x| {
            let mut v = x.clone();
            for &c in &cols {
                v[c] *= 6.0;
            }
            project(schema, &v, &bounds, x)
        })
        .collect()
}

fn small_params() -> HyperParams {
    HyperParams::Mlp(MlpParams {
        epochs: 20,
        ..MlpParams::new(1, 16)
    })
}

struct Counting(AtomicUsize);

impl FlowClassifier for Counting {
    fn predict_proba(&self, _: &FeatureVector) -> Result<[f64; 2]> {
        self.0.fetch_add(1, Ordering::Relaxed);
        Ok([0.0, 1.0])
    }
}

#[test]
fn partition_covers_schema() {
    let schema = FeatureSchema::default_flow();
    let p = FeaturePartition::from_schema(&schema).unwrap();
    assert_eq!(
        p.groups.iter().map(Vec::len).collect::<Vec<_>>(),
        vec![4, 5, 8]
    );
}

#[test]
fn empty_group_is_rejected() {
    let p = FeaturePartition {
        groups: [vec![0, 1], vec![], vec![2]],
    };
    assert!(matches!(p.validate(3), Err(Error::Partition(_))));
    let p = FeaturePartition {
        groups: [vec![0], vec![1], vec![1]],
    };
    assert!(matches!(p.validate(2), Err(Error::Partition(_))));
    let p = FeaturePartition {
        groups: [vec![0], vec![1], vec![2]],
    };
    assert!(matches!(p.validate(4), Err(Error::Partition(_))));
}

#[test]
fn detector_dataset_is_balanced() {
    let ds = clean_set(100, 1);
    let benign = ds.with_label(Label::Benign);
    let malicious = ds.with_label(Label::Malicious);
    let adv: Vec<FeatureVector> = shifted(&ds)
        .into_iter()
        .chain(shifted(&clean_set(100, 2)))
        .collect();
    assert_eq!(adv.len(), 200);
    let d = build_detector_dataset(&benign, &malicious, &adv, 3).unwrap();
    assert_eq!(
        (d.count(DetLabel::Clean), d.count(DetLabel::Adversarial)),
        (200, 200)
    );
    for (v, &l) in d.vectors().iter().zip(d.labels()) {
        let from_benign = benign.vectors().contains(v);
        if from_benign {
            assert_eq!(l, DetLabel::Clean);
        }
    }
}

#[test]
fn detector_dataset_subsamples_larger_class() {
    let ds = clean_set(100, 1);
    let adv: Vec<FeatureVector> = shifted(&ds)[..30].to_vec();
    let d = build_detector_dataset(
        &ds.with_label(Label::Benign),
        &ds.with_label(Label::Malicious),
        &adv,
        3,
    )
    .unwrap();
    assert_eq!(
        (d.count(DetLabel::Clean), d.count(DetLabel::Adversarial)),
        (30, 30)
    );
}

#[test]
fn unchanged_crafts_are_dropped() {
    let ds = clean_set(50, 1);
    let malicious = ds.with_label(Label::Malicious);
    let mut adv = malicious.vectors()[..10].to_vec();
    adv.extend(shifted(&ds)[..5].iter().cloned());
    let d = build_detector_dataset(&ds.with_label(Label::Benign), &malicious, &adv, 0).unwrap();
    assert_eq!(d.count(DetLabel::Adversarial), 5);
    let r = build_detector_dataset(&ds.with_label(Label::Benign), &malicious, &adv[..10], 0);
    assert!(matches!(r, Err(Error::Detector(_))));
}

#[test]
fn empty_adversarial_set_errors() {
    let ds = clean_set(20, 1);
    let r = build_detector_dataset(
        &ds.with_label(Label::Benign),
        &ds.with_label(Label::Malicious),
        &[],
        0,
    );
    assert!(matches!(r, Err(Error::Detector(_))));
}

#[test]
fn fusion_examples() {
    let (pa, pc) = fuse(&[(1.0, 0.0), (0.0, 1.0), (0.0, 1.0)], &[0.7, 0.3, 0.0]).unwrap();
    assert!((pa - 0.7).abs() < 1e-12 && (pc - 0.3).abs() < 1e-12);
    let (pa, _) = fuse(&[(0.8, 0.2); 3], &[0.2, 0.5, 0.9]).unwrap();
    assert!((pa - 0.8).abs() < 1e-12);
    assert!(matches!(
        fuse(&[(0.5, 0.5); 3], &[0.0; 3]),
        Err(Error::Fusion(_))
    ));
    assert!(matches!(
        fuse(&[(0.5, 0.5); 2], &[1.0; 3]),
        Err(Error::Fusion(_))
    ));
    assert!(matches!(
        fuse(&[(0.5, 0.5)], &[-1.0]),
        Err(Error::Fusion(_))
    ));
    assert!(matches!(
        fuse(&[(f64::NAN, 0.5)], &[1.0]),
        Err(Error::Fusion(_))
    ));
}

#[test]
fn exact_tie_is_clean() {
    let (pa, _) = fuse(&[(0.9, 0.1), (0.1, 0.9)], &[0.5, 0.5]).unwrap();
    assert_eq!(pa, 0.5);
    assert_eq!(decide(pa, 0.5), DetLabel::Clean);
    assert_eq!(decide(0.500001, 0.5), DetLabel::Adversarial);
}

fn pair() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..=1.0).prop_map(|p| (p, 1.0 - p))
}

proptest! {
    #[test]
    fn fused_posteriors_sum_to_one(
        per in prop::collection::vec(pair(), 3),
        w in prop::collection::vec(0.0f64..=1.0, 3),
    ) {
        prop_assume!(w.iter().sum::<f64>() > 1e-9);
        let (pa, pc) = fuse(&per, &w).unwrap();
        prop_assert!((pa + pc - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&pa));
    }

    #[test]
    fn fusion_is_scale_invariant(
        per in prop::collection::vec(pair(), 3),
        w in prop::collection::vec(0.01f64..=1.0, 3),
        k in 0.01f64..100.0,
    ) {
        let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
        let (a, _) = fuse(&per, &w).unwrap();
        let (b, _) = fuse(&per, &scaled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn agreeing_detectors_pass_through(p in pair(), w in prop::collection::vec(0.01f64..=1.0, 3)) {
        let (pa, pc) = fuse(&[p; 3], &w).unwrap();
        prop_assert!((pa - p.0).abs() < 1e-12 && (pc - p.1).abs() < 1e-12);
    }
}

fn trained_ensemble(
    seed: u64,
) -> (
    DetectorEnsemble,
    DetectorDataset,
    LabeledDataset,
    Vec<FeatureVector>,
) {
    let ds = clean_set(150, 4);
    let adv = shifted(&ds);
    let d = build_detector_dataset(
        &ds.with_label(Label::Benign),
        &ds.with_label(Label::Malicious),
        &adv,
        5,
    )
    .unwrap();
    let p = FeaturePartition::from_schema(ds.schema()).unwrap();
    let e = train_ensemble(&p, &d, &small_params(), seed).unwrap();
    (e, d, ds, adv)
}

#[test]
fn weights_are_holdout_recall() {
    let (e, d, _, _) = trained_ensemble(9);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(9, "holdout"));
    let (_, hold) = stratified_split(d.labels(), HOLDOUT_FRACTION, &mut rng);
    let adv: Vec<FeatureVector> = hold
        .iter()
        .filter(|&&i| d.labels()[i] == DetLabel::Adversarial)
        .map(|&i| d.vectors()[i].clone())
        .collect();
    assert!(!adv.is_empty());
    for det in &e.detectors {
        let p = det.estimator.positive_proba_batch(&adv).unwrap();
        let recall = p.iter().filter(|&&p| p > 0.5).count() as f64 / adv.len() as f64;
        assert_eq!(det.weight, recall);
        assert!((0.0..=1.0).contains(&det.weight));
    }
}

#[test]
fn ensemble_training_is_deterministic() {
    let (a, ..) = trained_ensemble(11);
    let (b, ..) = trained_ensemble(11);
    assert_eq!(a, b);
}

#[test]
fn batch_detection_matches_single() {
    let (e, d, ..) = trained_ensemble(2);
    let batch = e.detect_batch(d.vectors()).unwrap();
    for (v, b) in d.vectors().iter().zip(&batch).step_by(17) {
        assert_eq!(&e.detect(v).unwrap(), b);
    }
    assert!(matches!(
        e.detect(&FeatureVector::zeros(3)),
        Err(Error::Input(_))
    ));
}

#[test]
fn rejected_inputs_never_reach_nids() {
    let (e, _, ds, adv) = trained_ensemble(3);
    let nids = Counting(AtomicUsize::new(0));
    let inputs: Vec<FeatureVector> = adv.iter().chain(ds.vectors()).cloned().collect();
    let mut passed = 0;
    let mut rejected = 0;
    for v in &inputs {
        match pipeline_classify(&e, &nids, v).unwrap() {
            PipelineDecision::Rejected => rejected += 1,
            _ => passed += 1,
        }
    }
    assert!(rejected > 0 && passed > 0);
    assert_eq!(nids.0.load(Ordering::Relaxed), passed);
}

#[test]
fn ensemble_round_trips() {
    let (e, d, ..) = trained_ensemble(6);
    let dir = tempfile::tempdir().unwrap();
    e.save(dir.path()).unwrap();
    let back = DetectorEnsemble::load(dir.path()).unwrap();
    assert_eq!(back.weights(), e.weights());
    assert_eq!(
        back.detect_batch(d.vectors()).unwrap(),
        e.detect_batch(d.vectors()).unwrap()
    );
}

#[test]
fn identical_models_never_disagree() {
    let ds = clean_set(100, 8);
    let params = HyperParams::preset(ModelKind::RandomForest, Side::Defender);
    let params = match params {
        HyperParams::RandomForest(mut p) => {
            p.n_estimators = 10;
            HyperParams::RandomForest(p)
        }
        p => p,
    };
    let base = train(&params, Side::Defender, &ds, 1).unwrap();
    let det = AdvTrainDetector {
        base: base.clone(),
        robust: base,
    };
    let flags = det.detect_batch(&shifted(&ds)).unwrap();
    assert!(flags.iter().all(|&l| l == DetLabel::Clean));
}

#[test]
fn robust_model_shares_base_scaler() {
    let ds = clean_set(100, 8);
    let det = train_adv_training_detector(&small_params(), &ds, &shifted(&ds), 4).unwrap();
    assert_eq!(
        det.base.estimator().scaler(),
        det.robust.estimator().scaler()
    );
    assert!(matches!(
        AdvTrainDetector::from_base(det.base.clone(), &ds, &[], 0),
        Err(Error::Detector(_))
    ));
}
