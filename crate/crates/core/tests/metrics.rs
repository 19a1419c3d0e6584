mod common;

use banet::metrics::*;
use banet::net_decoder::Forecast;
use banet::scene::{Point, Scene};
use banet::Error;
use common::brute::{brute_force, random_pair};
use common::*;
use rand::Rng;

fn forecast(scene: &str, actor: &str, trajectories: Vec<Vec<Point>>, confidences: Vec<f64>) -> Forecast {
    Forecast {
        scene_id: scene.into(),
        actor_id: actor.into(),
        targets: trajectories.iter().map(|t| *t.last().unwrap()).collect(),
        trajectories,
        confidences,
    }
}

fn straight(t: usize, end: Point) -> Vec<Point> {
    (1..=t)
        .map(|i| [end[0] * i as f64 / t as f64, end[1] * i as f64 / t as f64])
        .collect()
}

#[test]
fn min_fde_hand_cases() {
    let gt = straight(4, [10.0, 0.0]);
    let ends = [
        [13.0, 0.0],
        [10.0, 1.0],
        [10.0, -2.0],
        [20.0, 0.0],
        [0.0, 0.0],
        [10.0, 5.0],
    ];
    let s: Vec<Vec<Point>> = ends.iter().map(|e| straight(4, *e)).collect();
    let uniform = vec![1.0 / 6.0; 6];
    assert_eq!(min_fde(&s, &gt, &uniform, 6).unwrap(), (1.0, 1));

    let mut exact = s.clone();
    exact[4] = gt.clone();
    assert_eq!(min_fde(&exact, &gt, &uniform, 6).unwrap(), (0.0, 4));

    let conf = vec![0.1, 0.1, 0.1, 0.5, 0.1, 0.1];
    assert_eq!(min_fde(&s, &gt, &conf, 1).unwrap(), (10.0, 3));
    assert!(matches!(min_fde(&s, &gt, &conf, 7), Err(Error::Contract(_))));
    assert!(matches!(min_fde(&s, &gt, &conf, 3), Err(Error::Contract(_))));
}

#[test]
fn min_ade_and_brier_hand_cases() {
    let gt = straight(5, [8.0, 2.0]);
    let offset: Vec<Point> = gt.iter().map(|p| [p[0], p[1] + 1.0]).collect();
    let far: Vec<Point> = gt.iter().map(|p| [p[0] + 4.0, p[1]]).collect();
    let conf = vec![0.5, 0.5];
    assert!((min_ade(&[offset.clone(), far.clone()], &gt, &conf, 2).unwrap().0 - 1.0).abs() < 1e-12);
    assert_eq!(min_ade(&[far.clone(), gt.clone()], &gt, &conf, 2).unwrap(), (0.0, 1));
    let (m, _) = min_ade(&[offset.clone(), far.clone()], &gt, &conf, 2).unwrap();
    for mode in [&offset, &far] {
        assert!(m <= ade(mode, &gt).unwrap());
    }
    assert_eq!(brier(1.0, 0.5), 1.25);
    assert_eq!(brier(0.7, 1.0), 0.7);
    assert!(brier(0.7, 0.2) >= 0.7);
}

#[test]
fn miss_rate_hand_cases() {
    let gt = straight(3, [5.0, 5.0]);
    let hit = forecast("s", "a", vec![gt.clone(); 6], vec![1.0 / 6.0; 6]);
    let off: Vec<Vec<Point>> = (0..6).map(|k| straight(3, [5.0 + 3.0, 5.0 + k as f64 * 0.0])).collect();
    let miss = forecast("s", "b", off, vec![1.0 / 6.0; 6]);
    let gts: Vec<&[Point]> = vec![&gt; 4];
    assert_eq!(miss_rate(&[&hit, &hit, &hit, &hit], &gts, 6).unwrap(), 0.0);
    assert_eq!(miss_rate(&[&hit, &miss, &hit, &hit], &gts, 6).unwrap(), 0.25);
}

#[test]
fn metrics_equal_a_brute_force_pass() {
    let mut r = rng(2024);
    let mut all = Vec::new();
    for _ in 0..1000 {
        let t = r.random_range(1..12);
        let (f, gt) = random_pair(&mut r, t);
        let m = actor_metrics(&f, &gt).unwrap();
        let got = [
            m.brier_min_fde,
            m.min_fde,
            m.min_fde1,
            m.brier_min_ade,
            m.min_ade,
            m.min_ade1,
            f64::from(u8::from(m.miss)),
            f64::from(u8::from(m.miss1)),
        ];
        assert_eq!(got, brute_force(&f, &gt));
        let report = MetricReport::from_actors(&[m], 1).unwrap();
        report.check_invariants().unwrap();
        all.push(m);
    }
    MetricReport::from_actors(&all, 1000)
        .unwrap()
        .check_invariants()
        .unwrap();
}

fn scene_with_gt(id: &str, seed: u64) -> Scene {
    let mut s = tiny_scene(seed, 3);
    s.id = id.into();
    s
}

fn perfect_forecasts(scenes: &[Scene]) -> Vec<Forecast> {
    let mut out = Vec::new();
    for s in scenes {
        for a in s.focal_actors() {
            let gt = a.future_gt.clone().unwrap();
            let mut trajs = vec![gt.clone()];
            trajs.extend((1..6).map(|k| gt.iter().map(|p| [p[0] + k as f64, p[1]]).collect()));
            out.push(forecast(&s.id, &a.id, trajs, vec![0.5, 0.1, 0.1, 0.1, 0.1, 0.1]));
        }
    }
    out
}

#[test]
fn evaluate_averages_focal_actors_and_reports_missing_keys() {
    let scenes = vec![scene_with_gt("s0", 1), scene_with_gt("s1", 2)];
    let preds = perfect_forecasts(&scenes);
    let report = evaluate(&preds, &scenes).unwrap();
    assert_eq!((report.actors, report.scenes), (2, 2));
    assert_eq!((report.min_fde6, report.min_ade6, report.mr6), (0.0, 0.0, 0.0));
    assert!((report.brier_min_fde6 - 0.25).abs() < 1e-12);
    report.check_invariants().unwrap();

    let single = evaluate(&preds[..1], &scenes[..1]).unwrap();
    let m = actor_metrics(
        &preds[0],
        scenes[0].focal_actors().next().unwrap().future_gt.as_ref().unwrap(),
    )
    .unwrap();
    assert_eq!(single, MetricReport::from_actors(&[m], 1).unwrap());

    match evaluate(&preds[..1], &scenes) {
        Err(Error::Evaluation(msg)) => assert!(msg.contains("s1/"), "{msg}"),
        other => panic!("expected an evaluation error, got {other:?}"),
    }
}

#[test]
fn report_layout_follows_the_table_columns() {
    let scenes = vec![scene_with_gt("s0", 3)];
    let report = evaluate(&perfect_forecasts(&scenes), &scenes).unwrap();
    let table = report.table();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, MetricReport::COLUMNS);
    let values: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(values.len(), 8);

    let json = report.to_json();
    let mut last = 0;
    for col in MetricReport::COLUMNS {
        let at = json.find(&format!("\"{col}\"")).unwrap();
        assert!(at > last || last == 0);
        last = at;
    }
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}
