use proptest::prelude::*;

use super::*;

fn shifted(t: &Trajectory, dx: f64, dy: f64) -> Trajectory {
    t.iter().map(|p| [p[0] + dx, p[1] + dy]).collect()
}

fn line(h: usize) -> Trajectory {
    (1..=h).map(|i| [3.0 * i as f64, 0.1 * (i * i) as f64]).collect()
}

// Plain loops, squared-root form instead of hypot.
mod mirror {
    pub fn d(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
    }

    pub fn ade(p: &[Vec<[f64; 2]>], t: &[Vec<[f64; 2]>], k: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            let mut s = 0.0;
            for h in 0..k {
                s += d(p[i][h], t[i][h]);
            }
            total += s / k as f64;
        }
        total / p.len() as f64
    }

    pub fn fde(p: &[Vec<[f64; 2]>], t: &[Vec<[f64; 2]>]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            let h = p[i].len() - 1;
            total += d(p[i][h], t[i][h]);
        }
        total / p.len() as f64
    }

    pub fn mde(p: &[Vec<[f64; 2]>], t: &[Vec<[f64; 2]>]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            let mut m = 0.0f64;
            for h in 0..p[i].len() {
                m = m.max(d(p[i][h], t[i][h]));
            }
            total += m;
        }
        total / p.len() as f64
    }
}

#[test]
fn identical_trajectories_score_zero() {
    let t = vec![line(10), line(10)];
    assert_eq!(ade_full(&t, &t).unwrap(), 0.0);
    assert_eq!(ade_half(&t, &t).unwrap(), 0.0);
    assert_eq!(fde(&t, &t).unwrap(), 0.0);
    assert_eq!(mde(&t, &t).unwrap(), 0.0);
}

#[test]
fn constant_offset() {
    let t = vec![line(10)];
    let p = vec![shifted(&t[0], 1.0, 0.0)];
    assert_eq!(ade_full(&p, &t).unwrap(), 1.0);
    assert_eq!(ade_half(&p, &t).unwrap(), 1.0);
    let q = vec![shifted(&t[0], 3.0, 4.0)];
    assert_eq!(fde(&q, &t).unwrap(), 5.0);
}

#[test]
fn half_horizon_index_arithmetic() {
    assert_eq!(half_horizon(10), 4);
    assert_eq!(half_horizon(15), 7);
    assert_eq!(half_horizon(3), 1);
    assert_eq!(half_horizon(2), 0);

    // waypoint 5 (index 4) is outside the first four
    let t = vec![line(10)];
    let mut p = t.clone();
    p[0][4][0] += 1.0;
    assert_eq!(ade_half(&p, &t).unwrap(), 0.0);
    p[0][3][0] += 1.0;
    assert_eq!(ade_half(&p, &t).unwrap(), 0.25);

    let t15 = vec![line(15)];
    let p15 = vec![shifted(&t15[0], 0.0, 2.0)];
    let mut only_eighth = t15.clone();
    only_eighth[0][7][1] += 2.0;
    assert_eq!(ade_half(&p15, &t15).unwrap(), 2.0);
    assert_eq!(ade_half(&only_eighth, &t15).unwrap(), 0.0);
}

#[test]
fn horizon_too_short() {
    let t = vec![line(2)];
    assert!(matches!(ade_half(&t, &t), Err(MetricsError::HorizonTooShort(2))));
}

#[test]
fn mde_takes_the_worst_waypoint() {
    let t = vec![vec![[0.0, 0.0]; 3]];
    let p = vec![vec![[0.1, 0.0], [0.0, 2.0], [0.5, 0.0]]];
    assert_eq!(mde(&p, &t).unwrap(), 2.0);
}

#[test]
fn length_mismatches() {
    let t = vec![line(10), line(10)];
    assert!(matches!(ade_full(&t[..1], &t), Err(MetricsError::LengthMismatch(_))));
    assert!(matches!(fde(&[], &[]), Err(MetricsError::LengthMismatch(_))));
    let short = vec![line(10), line(9)];
    assert!(matches!(mde(&short, &t), Err(MetricsError::LengthMismatch(_))));
    let both_short = vec![line(9), line(9)];
    assert!(matches!(ade_full(&both_short, &t), Err(MetricsError::LengthMismatch(_))));
}

#[test]
fn five_sample_fixture_by_hand() {
    // H = 3, all targets at the origin, errors chosen as 3-4-5 multiples
    let t: Vec<Trajectory> = vec![vec![[0.0, 0.0]; 3]; 5];
    let p: Vec<Trajectory> = vec![
        vec![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
        vec![[3.0, 4.0], [0.0, 0.0], [0.0, 0.0]],
        vec![[0.0, 0.0], [0.0, 0.0], [6.0, 8.0]],
        vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]],
        vec![[0.0, 2.0], [0.0, 5.0], [0.0, 2.0]],
    ];
    // per-sample means: 0, 5/3, 10/3, 1, 3
    assert!((ade_full(&p, &t).unwrap() - (0.0 + 5.0 / 3.0 + 10.0 / 3.0 + 1.0 + 3.0) / 5.0).abs() < 1e-15);
    // H = 3 scores waypoint 1 only: 0, 5, 0, 1, 2
    assert_eq!(ade_half(&p, &t).unwrap(), 8.0 / 5.0);
    // finals: 0, 0, 10, 1, 2
    assert_eq!(fde(&p, &t).unwrap(), 13.0 / 5.0);
    // maxima: 0, 5, 10, 1, 5
    assert_eq!(mde(&p, &t).unwrap(), 21.0 / 5.0);
}

#[test]
fn report_row_format() {
    let r = EvalReport {
        model: "TridentNet-H10-S3".into(),
        n: 2877,
        ade_full: 1.056245,
        ade_half: 0.336941,
        fde: 2.447714,
        mde: 2.494614,
    };
    assert_eq!(r.row(), "TridentNet-H10-S3  1.056245  0.336941  2.447714  2.494614");
    let text = r.to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["Model", "ADE_FULL", "ADE_HALF", "FDE", "MDE"]);
    assert_eq!(lines[1], r.row());
    // columns line up with the header
    assert_eq!(lines[0].len(), lines[1].len());
}

#[test]
fn text_and_json_agree() {
    let r = EvalReport {
        model: "m".into(),
        n: 3,
        ade_full: 0.123_456_789,
        ade_half: 1.0 / 3.0,
        fde: 2.5,
        mde: 12.000_000_4,
    };
    let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    let row = r.to_text().lines().nth(1).unwrap().to_string();
    let vals: Vec<f64> = row.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    for (v, want) in vals.iter().zip([r.ade_full, r.ade_half, r.fde, r.mde]) {
        assert!((v - want).abs() <= 5e-7 + 1e-12);
    }
}

#[test]
fn echo_generator_scores_zero() {
    use crate::dataset::{build_samples, gen_synthetic_world, BuildOptions, WorldKind};
    let world = gen_synthetic_world(1, WorldKind::Curve);
    let t = &world.tracks[0];
    let samples = build_samples(&t.name, &t.track, &world.map, &world.graph, &t.route, &BuildOptions::new(10, 3.0).with_stride(40)).unwrap();
    let records: Vec<_> = samples.into_iter().map(|s| s.record).collect();
    let r = evaluate_records(&EchoGenerator { horizon: 10 }, "echo", &records).unwrap();
    assert_eq!(r.n, records.len());
    assert_eq!((r.ade_full, r.ade_half, r.fde, r.mde), (0.0, 0.0, 0.0, 0.0));
    assert!(matches!(
        evaluate_records(&EchoGenerator { horizon: 15 }, "echo", &records),
        Err(MetricsError::ConfigMismatch(_))
    ));
}

fn pairs(max_n: usize, max_h: usize) -> impl Strategy<Value = (Vec<Trajectory>, Vec<Trajectory>)> {
    (1..=max_n, 3..=max_h).prop_flat_map(|(n, h)| {
        let traj = proptest::collection::vec(prop::array::uniform2(-50.0..50.0f64), h);
        (
            proptest::collection::vec(traj.clone(), n),
            proptest::collection::vec(traj, n),
        )
    })
}

proptest! {
    #[test]
    fn matches_mirror((p, t) in pairs(6, 16)) {
        let h = t[0].len();
        prop_assert!((ade_full(&p, &t).unwrap() - mirror::ade(&p, &t, h)).abs() <= 1e-12);
        prop_assert!((ade_half(&p, &t).unwrap() - mirror::ade(&p, &t, (h - 1) / 2)).abs() <= 1e-12);
        prop_assert!((fde(&p, &t).unwrap() - mirror::fde(&p, &t)).abs() <= 1e-12);
        prop_assert!((mde(&p, &t).unwrap() - mirror::mde(&p, &t)).abs() <= 1e-12);
    }

    #[test]
    fn orderings_and_self_distance((p, t) in pairs(6, 16)) {
        let (a, f, m) = (ade_full(&p, &t).unwrap(), fde(&p, &t).unwrap(), mde(&p, &t).unwrap());
        let half = ade_half(&p, &t).unwrap();
        prop_assert!(a >= 0.0 && f >= 0.0 && half >= 0.0);
        prop_assert!(m >= f && m >= a && m >= half);
        prop_assert_eq!(ade_full(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(mde(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn translation_and_permutation_invariance((p, t) in pairs(6, 12), dx in -100.0..100.0f64, dy in -100.0..100.0f64, rot in 0usize..6) {
        let ps: Vec<_> = p.iter().map(|x| shifted(x, dx, dy)).collect();
        let ts: Vec<_> = t.iter().map(|x| shifted(x, dx, dy)).collect();
        let mut pr = p.clone();
        let mut tr = t.clone();
        let k = rot % p.len();
        pr.rotate_left(k);
        tr.rotate_left(k);
        for f in [ade_full, ade_half, fde, mde] {
            let base = f(&p, &t).unwrap();
            prop_assert!((f(&ps, &ts).unwrap() - base).abs() <= 1e-12);
            prop_assert!((f(&pr, &tr).unwrap() - base).abs() <= 1e-12);
        }
    }
}
