use netslice::scenario::{active_users, admission_flag, load_scenario, save_scenario, SliceId};

const BASELINE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/baseline_paper.cfg");

#[test]
fn baseline_shape() {
    let scn = load_scenario(BASELINE).unwrap();
    assert_eq!(scn.slices.len(), 4);
    assert_eq!(scn.phy.num_prbs, 50);
    assert_eq!(scn.horizon_slots, 500);
    assert_eq!(scn.slices.iter().filter(|s| s.is_rll()).count(), 2);
    let se2 = SliceId::new("se2");
    assert_eq!(scn.active_count(&se2, 100).unwrap(), 2);
    assert_eq!(scn.active_count(&se2, 300).unwrap(), 5);
    assert_eq!(scn.event_slots(), vec![250]);
    assert!(scn
        .users
        .iter()
        .all(|u| u.distance_m > 0.0 && u.distance_m <= scn.phy.cell_radius_m));
}

#[test]
fn active_users_follow_events() {
    let scn = load_scenario(BASELINE).unwrap();
    let before = active_users(&scn, 249).unwrap();
    let after = active_users(&scn, 250).unwrap();
    assert_eq!(after.len(), before.len() + 3);
    // already-active users keep their positions
    for u in &before {
        assert!(after.contains(u));
    }
    assert!(admission_flag(&scn, &SliceId::new("sv1"), 0).unwrap());
    assert!(admission_flag(&scn, &SliceId::new("nope"), 0).is_err());
}

#[test]
fn save_and_reload_round_trip() {
    let scn = load_scenario(BASELINE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.cfg");
    save_scenario(&scn, &path).unwrap();
    assert_eq!(load_scenario(&path).unwrap(), scn);
}

#[test]
fn missing_file_is_an_error() {
    assert!(load_scenario("/nonexistent/scenario.cfg").is_err());
}
