use immunegrid::scenario::{builtin_scenario, Axis, Face, InjectSpec, Placement, Scenario};
use immunegrid::service::{RunManager, RunStatus, ServiceError, SliceRequest};

fn small() -> Scenario {
    let mut sc = builtin_scenario("feedback_local").unwrap();
    sc.compartments[0].dims = [12, 12, 4];
    sc.run.ticks = 60;
    sc
}

fn inject(agent: &str, count: u64) -> InjectSpec {
    InjectSpec {
        compartment: "tissue".into(),
        agent: agent.into(),
        placement: Placement::Wall {
            axis: Axis::Z,
            face: Face::High,
        },
        count,
    }
}

#[test]
fn strided_frames_reach_every_subscriber() {
    let m = RunManager::new();
    let id = m.create_run(small(), 1).unwrap().id;
    m.advance(&id, 3).unwrap();
    let slices = vec![SliceRequest {
        compartment: "tissue".into(),
        agent: "C1".into(),
        axis: Axis::Z,
        index: 1,
    }];
    let a = m.subscribe(&id, 4, slices.clone()).unwrap();
    let b = m.subscribe(&id, 4, slices).unwrap();
    m.advance(&id, 20).unwrap();
    let fa: Vec<_> = a.try_iter().collect();
    let fb: Vec<_> = b.try_iter().collect();
    assert_eq!(fa.iter().map(|f| f.tick).collect::<Vec<_>>(), vec![4, 8, 12, 16, 20]);
    assert_eq!(fa, fb);
    let s = &fa[0].slices[0];
    assert_eq!((s.rows, s.cols), (Some(12), Some(12)));
    assert_eq!(s.data.as_ref().unwrap().len(), 144);
}

#[test]
fn frame_census_matches_snapshot_and_injection() {
    let m = RunManager::new();
    let id = m.create_run(small(), 2).unwrap().id;
    m.advance(&id, 5).unwrap();
    let before = m.snapshot(&id, Vec::new()).unwrap();
    let (placed, tick) = m.inject(&id, inject("C2", 77)).unwrap();
    assert_eq!((placed, tick), (77, 5));
    let after = m.snapshot(&id, Vec::new()).unwrap();
    let c2 = |f: &immunegrid::service::Frame| f.census["tissue"].molecules["C2"];
    assert_eq!(c2(&after), c2(&before) + 77);
    // zero counts are kept
    assert!(before.census["tissue"].cells.contains_key("AID"));
}

#[test]
fn advance_clips_and_finishes() {
    let m = RunManager::new();
    let id = m.create_run(small(), 3).unwrap().id;
    let h = m.run_until(&id, 10_000).unwrap();
    assert_eq!((h.tick, h.status), (60, RunStatus::Finished));
    assert_eq!(m.advance(&id, 5).unwrap().tick, 60);
    assert_eq!(m.inject(&id, inject("C1", 1)), Err(ServiceError::Finished(id.clone())));
}

#[test]
fn bad_requests_are_reported() {
    let m = RunManager::new();
    let mut bad = small();
    bad.compartments[0].dims = [0, 1, 1];
    match m.create_run(bad, 1) {
        Err(ServiceError::Invalid(r)) => assert!(!r.errors.is_empty()),
        other => panic!("{other:?}"),
    }
    assert!(matches!(m.advance("r404", 1), Err(ServiceError::NotFound(_))));
    let id = m.create_run(small(), 1).unwrap().id;
    assert!(matches!(m.subscribe(&id, 0, Vec::new()), Err(ServiceError::BadStride)));
    assert!(matches!(m.inject(&id, inject("NOPE", 1)), Err(ServiceError::Inject(_))));
    let f = m
        .snapshot(
            &id,
            vec![SliceRequest {
                compartment: "tissue".into(),
                agent: "OC".into(),
                axis: Axis::Z,
                index: 4,
            }],
        )
        .unwrap();
    assert!(f.slices[0].error.as_deref().unwrap().contains("out of range"));
}

#[test]
fn pause_stops_free_running() {
    let m = RunManager::new();
    let id = m.create_run(small(), 4).unwrap().id;
    assert_eq!(m.resume(&id).unwrap().status, RunStatus::Running);
    let h = m.pause(&id).unwrap();
    assert!(h.status == RunStatus::Paused || h.status == RunStatus::Finished);
    let t = h.tick;
    std::thread::sleep(std::time::Duration::from_millis(50));
    assert_eq!(m.handle(&id).unwrap().tick, t);
}

#[test]
fn shutdown_returns_closed_logs() {
    let m = RunManager::new();
    let a = m.create_run(small(), 5).unwrap().id;
    let b = m.create_run(small(), 6).unwrap().id;
    m.advance(&a, 7).unwrap();
    let logs = m.shutdown();
    assert_eq!(logs.iter().map(|(id, _)| id.clone()).collect::<Vec<_>>(), vec![a, b]);
    for (_, bytes) in logs {
        assert!(immunegrid::eventlog::replay(std::io::Cursor::new(bytes)).unwrap().matches());
    }
    assert!(m.ids().is_empty());
}
