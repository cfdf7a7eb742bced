use graspbridge::costs::CostKind;
use graspbridge::pipeline::persist::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_dataset, load_metrics, save_checkpoint, save_dataset,
    save_metrics,
};
use graspbridge::pipeline::{annotate_all, diversity, eval_alignment, gen_dataset, train, translate, RunConfig, ToyHandSpec, TranslateOptions};
use graspbridge::Error;
use proptest::prelude::*;

fn small_run() -> RunConfig {
    RunConfig {
        cost: CostKind::Contact,
        steps: 30,
        batch_size: 16,
        hidden: vec![16, 16],
        ..RunConfig::default()
    }
}

#[test]
fn train_translate_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let src = gen_dataset(&ToyHandSpec::source_default(), 24, 1).unwrap();
    let tgt = gen_dataset(&ToyHandSpec::target_default(), 24, 2).unwrap();
    save_dataset(&dir.path().join("src.json"), &src).unwrap();
    assert_eq!(load_dataset(&dir.path().join("src.json")).unwrap(), src);

    let out = train(&src, &tgt, &small_run()).unwrap();
    assert_eq!(out.log.len(), 30);
    assert!(out.log.iter().all(|r| r.loss.is_finite() && r.sinkhorn_iters > 0));

    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &out.checkpoint).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck, out.checkpoint);

    let opts = TranslateOptions::default();
    let a = translate(&out.checkpoint, &src.configs(), &opts).unwrap();
    let b = translate(&ck, &src.configs(), &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), src.len());
    let target = ck.meta.target_hand.as_ref().unwrap();
    assert!(a.iter().all(|c| c.hand_id == target.hand_id && c.joints.len() == target.dof()));

    let ann = annotate_all(target, &tgt.object, &a).unwrap();
    let m = eval_alignment(&src.annotations, &ann, 5000, 3).unwrap();
    let scored: Vec<f64> = m.pair_iou.iter().flatten().cloned().collect();
    assert_eq!(m.iou_missing, m.pair_iou.len() - scored.len());
    if let Some(mean) = m.iou_mean {
        assert!((0.0..=1.0).contains(&mean));
        assert!((mean - scored.iter().sum::<f64>() / scored.len() as f64).abs() < 1e-15);
    }
    save_metrics(&dir.path().join("m.json"), &m).unwrap();
    assert_eq!(load_metrics(&dir.path().join("m.json")).unwrap(), m);
}

#[test]
fn translating_the_wrong_hand_is_rejected() {
    let src = gen_dataset(&ToyHandSpec::source_default(), 8, 1).unwrap();
    let tgt = gen_dataset(&ToyHandSpec::target_default(), 8, 2).unwrap();
    let cfg = RunConfig { steps: 2, ..small_run() };
    let ck = train(&src, &tgt, &cfg).unwrap().checkpoint;
    let err = translate(&ck, &tgt.configs(), &TranslateOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn every_truncation_is_a_format_error() {
    let src = gen_dataset(&ToyHandSpec::source_default(), 4, 1).unwrap();
    let tgt = gen_dataset(&ToyHandSpec::target_default(), 4, 2).unwrap();
    let cfg = RunConfig { steps: 1, hidden: vec![4], ..small_run() };
    let bytes = checkpoint_to_bytes(&train(&src, &tgt, &cfg).unwrap().checkpoint).unwrap();
    for cut in (0..bytes.len()).step_by(7) {
        let err = checkpoint_from_bytes(&bytes[..cut]).unwrap_err();
        assert_eq!(err.exit_code(), 4, "cut at {cut}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn diversity_ignores_order(seed in 0u64..1000, rot in 0usize..10) {
        let ds = gen_dataset(&ToyHandSpec::source_default(), 10, seed).unwrap();
        let mut configs = ds.configs();
        let d = diversity(&configs).unwrap();
        configs.rotate_left(rot);
        configs.reverse();
        let e = diversity(&configs).unwrap();
        prop_assert!((d - e).abs() <= 1e-12 * d.max(1.0));
    }

    #[test]
    fn generated_grasps_touch_the_object(seed in 0u64..1000) {
        let ds = gen_dataset(&ToyHandSpec::target_default(), 3, seed).unwrap();
        for a in &ds.annotations {
            prop_assert!(!a.contact.is_empty());
            prop_assert!(a.wrenches.is_some());
            prop_assert_eq!(a.config.joints.len(), 4);
        }
    }
}
