use super::*;

fn track(ped: i64, frames: impl Iterator<Item = i64>) -> Vec<Observation> {
    frames
        .map(|f| Observation {
            frame: f,
            ped,
            x: f as f64 * 0.1,
            y: ped as f64,
        })
        .collect()
}

fn table(rows: Vec<Observation>) -> SceneTable {
    SceneTable::new("t", rows).unwrap()
}

#[test]
fn four_row_fixture_parses_sorted() {
    let text = "20 2 1.5 2.5\n10 1 0.0 0.0\n# comment\n\n10 2 1.0 2.0\n20 1 0.5 -0.5\n";
    let t = parse_scene(text, "fixture", "fixture.txt").unwrap();
    assert_eq!(t.len(), 4);
    let keys: Vec<_> = t.rows.iter().map(|r| (r.frame, r.ped)).collect();
    assert_eq!(keys, vec![(10, 1), (10, 2), (20, 1), (20, 2)]);
    assert_eq!(t.rows[3].x, 1.5);
}

#[test]
fn empty_file_is_empty_table() {
    let t = parse_scene("", "e", "e.txt").unwrap();
    assert!(t.is_empty());
    assert!(make_windows(&t, &WindowConfig::default()).unwrap().is_empty());
}

#[test]
fn malformed_rows_report_line() {
    match parse_scene("10 1 0 0\n20 1 0.5\n", "s", "s.txt") {
        Err(Error::Parse { line, source_name, .. }) => {
            assert_eq!(line, 2);
            assert_eq!(source_name, "s.txt");
        }
        other => panic!("{other:?}"),
    }
    match parse_scene("10 1 0 0\n10 1 1 1\n", "s", "s.txt") {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("duplicate"));
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_scene("1 1 x 0\n", "s", "s").is_err());
    assert!(parse_scene("1 1 nan 0\n", "s", "s").is_err());
    let t = parse_scene("10.0 3.0 1 2\n", "s", "s").unwrap();
    assert_eq!((t.rows[0].frame, t.rows[0].ped), (10, 3));
}

#[test]
fn load_scene_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("zara.txt");
    std::fs::write(&p, "0 1 1 1\n10 1 2 2\n").unwrap();
    let t = load_scene(&p).unwrap();
    assert_eq!(t.name, "zara");
    assert_eq!(parse_scene(&write_scene(&t), "zara", "x").unwrap(), t);
    assert!(matches!(load_scene(dir.path().join("missing.txt")), Err(Error::Io { .. })));
}

#[test]
fn window_counts() {
    let cfg = WindowConfig::default();
    let n = |frames: usize, stride: usize| {
        let t = table(track(1, (0..frames as i64).map(|f| f * 10)));
        make_windows(&t, &WindowConfig { stride, ..cfg }).unwrap().len()
    };
    assert_eq!(n(20, 1), 1);
    assert_eq!(n(19, 1), 0);
    assert_eq!(n(21, 1), 2);
    assert_eq!(n(30, 1), 11);
    assert_eq!(n(30, 3), 4);
    // Brute-force window count formula.
    for len in 0..50 {
        for stride in 1..5 {
            let expect = if len >= 20 { (len - 20) / stride + 1 } else { 0 };
            assert_eq!(n(len, stride), expect, "len {len} stride {stride}");
        }
    }
    assert!(make_windows(&table(vec![]), &WindowConfig { obs_len: 0, ..cfg }).is_err());
}

#[test]
fn windows_respect_contiguous_runs_and_stride() {
    // 15 frames, a gap, then 22 frames.
    let frames = (0..15).chain(16..38).map(|f| f * 10);
    let t = table(track(1, frames));
    assert_eq!(t.frame_stride(), Some(10));
    let w = make_windows(&t, &WindowConfig::default()).unwrap();
    assert_eq!(w.len(), 3);
    for win in &w {
        assert_eq!(win.obs.len(), 8);
        assert_eq!(win.fut.len(), 12);
        assert!(win.start_frame >= 160);
    }
    assert_eq!(w[0].obs[0].0, 16.0);
    assert_eq!(w[0].fut[0].0, 24.0);
}

#[test]
fn neighbors_ordered_by_distance_and_capped() {
    let mut rows = track(1, (0..20).map(|f| f * 10));
    for (ped, y) in [(2, 5.0), (3, 1.5), (4, -3.0)] {
        rows.extend((0..8).map(|f| Observation {
            frame: f * 10,
            ped,
            x: 0.7,
            y: 1.0 + y,
        }));
    }
    // Ped 5 misses one observed frame and is excluded.
    rows.extend((0..8).filter(|&f| f != 3).map(|f| Observation {
        frame: f * 10,
        ped: 5,
        x: 0.7,
        y: 1.0,
    }));
    let t = table(rows);
    let w = make_windows(&t, &WindowConfig::default()).unwrap();
    let mine: Vec<_> = w.iter().filter(|w| w.ped == 1).collect();
    assert_eq!(mine.len(), 1);
    let peds: Vec<i64> = mine[0].neighbors.iter().map(|n| n.ped).collect();
    assert_eq!(peds, vec![3, 4]);
    assert_eq!(mine[0].neighbors[0].obs.len(), 8);
}

#[test]
fn homography_examples() {
    let pts = vec![(1.0, 2.0), (-3.5, 0.25), (100.0, -7.0)];
    assert_eq!(project_homography(&pts, &Homography::IDENTITY).unwrap(), pts);

    let two = Homography([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]]);
    assert_eq!(project_homography(&pts, &two).unwrap(), pts);

    let (tx, ty) = (4.0, -1.5);
    let tr = Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]);
    let got = project_homography(&pts, &tr).unwrap();
    for ((x, y), (gx, gy)) in pts.iter().zip(&got) {
        assert_eq!((*gx, *gy), (x + tx, y + ty));
    }

    let degenerate = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
    assert!(matches!(degenerate.apply((0.0, 5.0)), Err(Error::Projection { .. })));
}

#[test]
fn homography_file() {
    let h = Homography::parse("1 0 0\n0 1 0\n0 0 1\n", "h").unwrap();
    assert_eq!(h, Homography::IDENTITY);
    assert!(matches!(Homography::parse("1 0\n0 1 0\n0 0 1\n", "h"), Err(Error::Parse { line: 1, .. })));
    assert!(Homography::parse("1 0 0\n0 1 0\n", "h").is_err());
}

#[test]
fn leave_one_out() {
    let scenes: Vec<SceneTable> = ["eth", "hotel", "univ", "zara1", "zara2"]
        .iter()
        .map(|n| SceneTable::new(*n, vec![]).unwrap())
        .collect();
    let s = leave_one_out_split(&scenes, "eth").unwrap();
    assert_eq!(s.test.name, "eth");
    let names: Vec<&str> = s.train.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, vec!["hotel", "univ", "zara1", "zara2"]);

    let one = &scenes[..1];
    let s = leave_one_out_split(one, "eth").unwrap();
    assert!(s.train.is_empty());
    assert!(matches!(leave_one_out_split(&scenes, "atlantis"), Err(Error::UnknownScene(_))));
}

#[test]
fn synthetic_line_futures_are_linear_extrapolations() {
    let t = synth_scene(SynthKind::Line, 6, 0.0, 3).unwrap();
    let w = make_windows(&t, &WindowConfig::default()).unwrap();
    assert!(!w.is_empty());
    for win in &w {
        let (a, b) = (win.obs[6], win.obs[7]);
        let v = (b.0 - a.0, b.1 - a.1);
        for (k, p) in win.fut.iter().enumerate() {
            let e = (b.0 + v.0 * (k + 1) as f64, b.1 + v.1 * (k + 1) as f64);
            assert!((p.0 - e.0).abs() < 1e-9 && (p.1 - e.1).abs() < 1e-9);
        }
    }
}

#[test]
fn synthetic_turn_matches_generator() {
    let tracks = synth_tracks(SynthKind::Turn, 4, 9);
    let t = synth_scene(SynthKind::Turn, 4, 0.0, 9).unwrap();
    for tr in &tracks {
        let rows: Vec<_> = t.rows.iter().filter(|r| r.ped == tr.ped).collect();
        assert_eq!(rows.len(), tr.len);
        assert!(tr.len >= 20);
        let Motion::Arc { c, r, .. } = tr.motion else { panic!() };
        for (s, o) in rows.iter().enumerate() {
            assert_eq!((o.x, o.y), tr.position(s));
            assert!(((o.x - c.0).hypot(o.y - c.1) - r).abs() < 1e-9);
        }
    }
}

#[test]
fn synthetic_scenes_are_deterministic() {
    for kind in [SynthKind::Line, SynthKind::Turn, SynthKind::Crossing] {
        let a = synth_scene(kind, 5, 0.3, 77).unwrap();
        assert_eq!(a, synth_scene(kind, 5, 0.3, 77).unwrap());
        assert_ne!(a, synth_scene(kind, 5, 0.3, 78).unwrap());
        assert_eq!(a.frame_stride(), Some(10));
    }
    let suite = synthetic_suite(4, 0.1, 1).unwrap();
    assert_eq!(suite.len(), 5);
    assert_eq!(suite, synthetic_suite(4, 0.1, 1).unwrap());
    assert!(synth_scene(SynthKind::Line, 1, -1.0, 0).is_err());
}
