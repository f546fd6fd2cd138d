use proptest::prelude::*;

use super::*;
use crate::feedback::Strategy as Tag;
use crate::harness::{mean_iou, run_suite, track_synthetic, HarnessSettings, OracleHarness, OracleTruth};
use crate::segnet::NetworkConfig;
use crate::synthdata::{ablation_suite, render, EventKind, EventSpec, ObjectSpec, OracleSegmenter, SceneScript, ShapeKind};

fn scene(events: Vec<EventSpec>, objects: Vec<ObjectSpec>, frames: usize) -> SceneScript {
    SceneScript {
        name: "t".into(),
        width: 96,
        height: 96,
        frame_count: frames,
        noise: 0.0,
        seed: 1,
        background: [0.5, 0.5, 0.5],
        objects,
        events,
    }
}

fn square(x: f64, y: f64, side: f64, color: [f32; 3]) -> ObjectSpec {
    ObjectSpec {
        shape: ShapeKind::Rectangle,
        color,
        size: [side, side],
        waypoints: vec![[0.0, x, y]],
        scale: Vec::new(),
    }
}

fn exact() -> HarnessSettings {
    HarnessSettings {
        oracle: OracleSegmenter::exact(),
        ..HarnessSettings::default()
    }
}

#[test]
fn init_box_is_mask_extent_and_union() {
    let seq = render(&scene(vec![], vec![square(40.0, 40.0, 16.0, [1.0, 0.0, 0.0])], 2)).unwrap();
    let truth = OracleTruth::from_synthetic(&seq);
    let h = OracleHarness { truth: &truth, settings: exact() };
    let tr = Tracker::new(&h, TrackerConfig::default()).unwrap();
    let ts = tr.init_tracklet(&seq.frames[0], &seq.masks[0][0], 1).unwrap();
    assert_eq!(ts.bbox, seq.masks[0][0].bounding_box().unwrap());
    assert_eq!((ts.frame_index, ts.last_estimate), (0, StateEstimate::perfect()));

    let two = BinaryMask::from_rows(&["11000", "11000", "00000", "00011", "00011"]);
    let frame = Image::filled(3, 5, 5, 0.5);
    let ts = tr.init_tracklet(&frame, &two, 1).unwrap();
    assert_eq!(ts.bbox, Box::new(2.0, 2.0, 5.0, 5.0).unwrap());
    assert!(matches!(tr.init_tracklet(&frame, &BinaryMask::empty(5, 5), 1), Err(Error::EmptyMask(_))));
    assert!(tr.init_tracklet(&frame, &BinaryMask::empty(4, 5), 1).is_err());
}

#[test]
fn template_shares_centre_and_scale_with_search() {
    let b = Box::new(50.0, 60.0, 20.0, 30.0).unwrap();
    let sizes = CropSizes { saliency: 257, similarity: 303, template: 127, map: 65 };
    let t = template_region(&b, 2.0, &sizes).unwrap();
    let s = make_search_region(&b, 2.0, 303).unwrap();
    assert_eq!((t.source_box.cx, t.source_box.cy), (s.source_box.cx, s.source_box.cy));
    assert!((t.scale().0 - s.scale().0).abs() < 1e-12);
}

#[test]
fn static_scene_box_reaches_object_in_one_frame() {
    let seq = render(&scene(vec![], vec![square(40.0, 44.0, 18.0, [1.0, 0.0, 0.0])], 4)).unwrap();
    let truth = OracleTruth::from_synthetic(&seq);
    let h = OracleHarness { truth: &truth, settings: exact() };
    let tr = Tracker::new(&h, TrackerConfig::default()).unwrap();
    let mut ts = tr.init_tracklet(&seq.frames[0], &seq.masks[0][0], 1).unwrap();
    let truth = ts.bbox;
    ts.bbox = truth.translated(4.0, -3.0);
    let (_, tel) = tr.step(&mut ts, &seq.frames[1]).unwrap();
    assert_eq!(tel.strategy, Tag::Mask);
    assert!(ts.bbox.iou(&truth) > 0.9, "{:?}", ts.bbox);
    for t in 2..4 {
        tr.step(&mut ts, &seq.frames[t]).unwrap();
        assert!(ts.bbox.iou(&truth) > 0.9);
    }
    assert_eq!(ts.frame_index, 3);
}

#[test]
fn disappearance_falls_back_to_regression() {
    let ev = EventSpec { kind: EventKind::Disappearance, start: 3, end: 6, object: 1, offset: None };
    let seq = render(&scene(vec![ev], vec![square(40.0, 44.0, 18.0, [1.0, 0.0, 0.0])], 7)).unwrap();
    let out = track_synthetic(&seq, &TrackerConfig::default(), &exact()).unwrap();
    let truth = seq.masks[0][0].bounding_box().unwrap();
    for tel in &out.telemetry {
        let b = Box::new(tel.cx, tel.cy, tel.w, tel.h).unwrap();
        if (3..6).contains(&tel.frame) {
            assert_eq!(tel.strategy, Tag::Regression);
            assert_eq!(tel.s_state, 0.0);
        }
        assert!(b.iou(&truth) > 0.8, "frame {} {:?}", tel.frame, b);
    }
    assert_eq!(out.strategy_counts(), (3, 3));
}

#[test]
fn identical_inputs_identical_outputs_and_causal() {
    let s = ablation_suite(5).remove(1);
    let seq = render(&s).unwrap();
    let settings = HarnessSettings::default();
    let a = track_synthetic(&seq, &TrackerConfig::default(), &settings).unwrap();
    let b = track_synthetic(&seq, &TrackerConfig::default(), &settings).unwrap();
    assert_eq!(a, b);

    let mut prefix = s.clone();
    prefix.frame_count = 20;
    prefix.events.retain(|e| e.start < 20);
    for e in prefix.events.iter_mut() {
        e.end = e.end.min(20);
    }
    let short = track_synthetic(&render(&prefix).unwrap(), &TrackerConfig::default(), &settings).unwrap();
    assert_eq!(&a.labels[..20], &short.labels[..]);
    assert_eq!(&a.telemetry[..19], &short.telemetry[..]);
}

#[test]
fn multi_object_equals_independent_runs() {
    let objs = vec![square(30.0, 30.0, 14.0, [1.0, 0.0, 0.0]), square(60.0, 62.0, 20.0, [0.0, 0.0, 1.0])];
    let seq = render(&scene(vec![], objs, 5)).unwrap();
    let settings = HarnessSettings::default();
    let truth = OracleTruth::from_synthetic(&seq);
    let harness = OracleHarness { truth: &truth, settings: settings.clone() };
    let tr = Tracker::new(&harness, TrackerConfig::default()).unwrap();
    let joint = track_synthetic(&seq, &TrackerConfig::default(), &settings).unwrap();

    let mut singles: Vec<_> = (1..=2u8)
        .map(|id| tr.init_tracklet(&seq.frames[0], &seq.masks[0][id as usize - 1], id).unwrap())
        .collect();
    for t in 1..5 {
        let maps: Vec<_> = singles.iter_mut().map(|ts| tr.step(ts, &seq.frames[t]).unwrap().0).collect();
        assert_eq!(aggregate(maps).unwrap().label_map, joint.labels[t]);
    }
    assert!(mean_iou(&seq, &joint).unwrap() > 0.8);
}

#[test]
fn aggregate_examples() {
    let single = aggregate(vec![ProbabilityMap::filled(2, 2, 0.7)]).unwrap();
    let d = single.distribution(0, 0);
    assert!((d[0] - 0.3).abs() < 1e-12 && (d[1] - 0.7).abs() < 1e-12);
    assert!(single.label_map.as_slice().iter().all(|&l| l == 1));

    let two = aggregate(vec![ProbabilityMap::filled(1, 1, 0.6), ProbabilityMap::filled(1, 1, 0.6)]).unwrap();
    let d = two.distribution(0, 0);
    let z = 0.16 + 1.2;
    assert!((d[0] - 0.16 / z).abs() < 1e-12 && (d[1] - 0.6 / z).abs() < 1e-12);
    assert!((d[0] - 0.118).abs() < 1e-3 && (d[1] - 0.441).abs() < 1e-3);
    assert_eq!(*two.label_map.get(0, 0), 1);

    let zeros = aggregate(vec![ProbabilityMap::filled(3, 3, 0.0); 2]).unwrap();
    assert!(zeros.label_map.as_slice().iter().all(|&l| l == 0));
    // ties go to the background
    assert_eq!(*aggregate(vec![ProbabilityMap::filled(1, 1, 0.5)]).unwrap().label_map.get(0, 0), 0);
    assert!(aggregate(vec![ProbabilityMap::filled(1, 1, 0.5), ProbabilityMap::filled(2, 1, 0.5)]).is_err());
    assert!(aggregate(vec![]).is_err());
}

proptest! {
    #[test]
    fn aggregate_distribution_sums_to_one(ps in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 6), 1..5)) {
        let maps: Vec<_> = ps.iter().map(|v| ProbabilityMap::new(Grid::from_vec(3, 2, v.clone()).unwrap()).unwrap()).collect();
        let agg = aggregate(maps).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                let d = agg.distribution(x, y);
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                let l = *agg.label_map.get(x, y) as usize;
                prop_assert!(d.iter().all(|&v| v <= d[l]));
            }
        }
    }

    #[test]
    fn aggregate_is_order_invariant_up_to_relabelling(a in proptest::collection::vec(0.0f64..=1.0, 4), b in proptest::collection::vec(0.0f64..=1.0, 4)) {
        let m = |v: &Vec<f64>| ProbabilityMap::new(Grid::from_vec(2, 2, v.clone()).unwrap()).unwrap();
        let ab = aggregate(vec![m(&a), m(&b)]).unwrap();
        let ba = aggregate(vec![m(&b), m(&a)]).unwrap();
        for i in 0..4 {
            let (x, y) = (i % 2, i / 2);
            let da = ab.distribution(x, y);
            let db = ba.distribution(x, y);
            prop_assert!((da[0] - db[0]).abs() < 1e-12 && (da[1] - db[2]).abs() < 1e-12);
        }
    }
}

#[test]
fn config_rejects_bad_values() {
    let bad = [
        TrackerConfig { mu: 0.0, ..Default::default() },
        TrackerConfig { state_threshold: 1.5, ..Default::default() },
        TrackerConfig { saliency_context: 0.5, ..Default::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    let parsed: TrackerConfig = toml::from_str("mu = 0.25\nstrategy = \"mask_only\"").unwrap();
    assert_eq!((parsed.mu, parsed.strategy), (0.25, BoxStrategy::MaskOnly));
    assert!(toml::from_str::<TrackerConfig>("nope = 1").is_err());
}

#[test]
fn switching_beats_mask_only_on_fast_motion() {
    let suite = ablation_suite(0);
    let settings = HarnessSettings::default();
    let full = run_suite(&suite, &TrackerConfig::default(), &settings).unwrap();
    let mask_only = run_suite(&suite, &TrackerConfig { strategy: BoxStrategy::MaskOnly, ..Default::default() }, &settings).unwrap();
    assert!(full.mean_iou - mask_only.mean_iou > 0.2, "{} vs {}", full.mean_iou, mask_only.mean_iou);
    assert!(full.mean_iou >= 0.7, "{}", full.mean_iou);
    assert!(full.mask_rate > 0.5 && full.mask_rate < 1.0);
}

#[test]
fn global_loop_suppresses_distractor() {
    let suite: Vec<_> = ablation_suite(0)
        .into_iter()
        .filter(|s| s.events.iter().any(|e| e.kind == EventKind::Distractor))
        .collect();
    assert!(!suite.is_empty());
    let settings = HarnessSettings::default();
    let on = run_suite(&suite, &TrackerConfig::default(), &settings).unwrap();
    let off = run_suite(&suite, &TrackerConfig { global_loop: false, ..Default::default() }, &settings).unwrap();
    assert!(on.mean_iou > off.mean_iou, "{} vs {}", on.mean_iou, off.mean_iou);
}

#[test]
fn network_segmenter_runs_and_is_deterministic() {
    let seq = render(&scene(vec![], vec![square(40.0, 44.0, 18.0, [1.0, 0.0, 0.0])], 3)).unwrap();
    let net = SegNet::new(NetworkConfig::toy(), 3).unwrap();
    let seg = NetworkSegmenter { net: &net };
    let tr = Tracker::new(&seg, TrackerConfig::default()).unwrap();
    let run = || track_sequence(&tr, 3, |t| Ok(seq.frames[t].clone()), &seq.labels(0), None).unwrap();
    let a = run();
    assert_eq!(a.labels.len(), 3);
    assert_eq!(a.telemetry.len(), 2);
    assert!(a.telemetry.iter().all(|t| t.s_state.is_finite() && t.w >= 4.0));
    assert_eq!(a, run());
}
