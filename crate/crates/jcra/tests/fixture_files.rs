mod common;

use common::*;
use jcra::coco::{export_coco, parse_dt, parse_gt};
use jcra_core::metrics::{evaluate, EvalParams};
use jcra_core::synth::{generate_dataset, DatasetSpec, Skeleton};
use jcra_core::trainer::sigmas_for;
use proptest::prelude::*;

#[test]
fn five_scene_export_is_byte_stable() {
    let scenes = generate_dataset(&DatasetSpec::toy(99, 5)).unwrap();
    let (gt, dt) = export_coco(&scenes, &Skeleton::mini());
    golden("export5/gt.json", gt.as_bytes());
    golden("export5/dt.json", dt.as_bytes());
    let again = export_coco(&generate_dataset(&DatasetSpec::toy(99, 5)).unwrap(), &Skeleton::mini());
    assert_eq!(again, (gt, dt));
}

#[test]
fn small_checkpoint_fixture_loads() {
    let dir = scratch("fixture_ckpt");
    let (ckpt, trace, cfg) = (dir.join("m.jcra"), dir.join("t.jsonl"), dir.join("c.json"));
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let o = jcra(&["train-toy", "--config", s(&cfg), "--out", s(&ckpt), "--trace", s(&trace)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    golden("small/model.jcra", &std::fs::read(&ckpt).unwrap());
    golden("small/trace.jsonl", &std::fs::read(&trace).unwrap());
    golden("small/config.json", SMALL_CONFIG.as_bytes());

    let stored = jcra::checkpoint::load(&fixture("small/model.jcra"), None).unwrap();
    assert_eq!((stored.cfg.image_h, stored.cfg.num_keypoints), (16, 4));
    let lines = jcra::trace::parse(&std::fs::read_to_string(fixture("small/trace.jsonl")).unwrap()).unwrap();
    assert_eq!(lines.iter().map(|l| l.step).collect::<Vec<_>>(), [10, 20, 30, 40, 50, 60]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perfect_detections_score_one_through_the_files(seed in any::<u64>(), coco in any::<bool>()) {
        let skeleton = if coco { Skeleton::coco17() } else { Skeleton::mini() };
        let spec = DatasetSpec {
            height: 48,
            width: 48,
            skeleton: skeleton.clone(),
            ..DatasetSpec::toy(seed, 4)
        };
        let scenes = generate_dataset(&spec).unwrap();
        let (gt_text, dt_text) = export_coco(&scenes, &skeleton);
        let gt = parse_gt(&gt_text).unwrap();
        let dt = parse_dt(&dt_text, &gt.image_ids, gt.num_keypoints()).unwrap();
        let r = evaluate(&gt.instances, &dt, &EvalParams::coco(sigmas_for(skeleton.len()))).unwrap();
        prop_assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
    }
}
