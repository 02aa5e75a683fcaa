//! Scenario file format: loading, validation errors, and save/load
//! round trips.

use mies_core::scenario::{
    load_scenario, save_scenario, synthesize_scenario, validate_scenario, Scenario, ScenarioError,
};
use std::fs;
use std::path::Path;

fn write_micro_files(dir: &Path) {
    fs::write(
        dir.join("scenario.yaml"),
        r#"meta:
  horizon: 24
  ceiling_price: 3000.0
carriers:
  - electricity
generators:
  - id: g1
    alpha: 0.01
    beta: 10.0
    g_min: "series.csv:g1.min"
    g_max: "series.csv:g1.max"
  - id: g2
    alpha: 0.02
    beta: 20.0
    g_min: "series.csv:g2.min"
    g_max: "series.csv:g2.max"
prosumers:
  - id: load
    demands:
      - carrier: electricity
        base: "series.csv:load.base"
"#,
    )
    .unwrap();
    let mut csv = String::from("g1.min,g1.max,g2.min,g2.max,load.base\n");
    for _ in 0..24 {
        csv.push_str("0,100,0,100,60\n");
    }
    fs::write(dir.join("series.csv"), csv).unwrap();
}

#[test]
fn well_formed_file_loads_with_expected_contents() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_files(dir.path());
    let s = load_scenario(dir.path().join("scenario.yaml")).unwrap();
    assert_eq!(s.horizon, 24);
    assert_eq!(s.generators.len(), 2);
    assert_eq!(s.prosumers.len(), 1);
    assert_eq!(s.generators[0].id, "g1");
    assert_eq!(s.generators[0].g_max.get(0), 100.0);
    assert_eq!(s.ceiling_price, 3000.0);
}

#[test]
fn bound_violation_is_reported_with_id_and_hour() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_files(dir.path());
    // Break hour 3 of g1: min 150 above max 100.
    let csv = fs::read_to_string(dir.path().join("series.csv")).unwrap();
    let mut lines: Vec<&str> = csv.lines().collect();
    let broken = "150,100,0,100,60";
    lines[4] = broken; // header + rows 0..2, so index 4 is hour 3
    fs::write(dir.path().join("series.csv"), lines.join("\n")).unwrap();

    let err = load_scenario(dir.path().join("scenario.yaml")).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("g1"), "{text}");
    assert!(text.contains("t=3"), "{text}");
}

#[test]
fn short_timeseries_is_a_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_files(dir.path());
    let csv = fs::read_to_string(dir.path().join("series.csv")).unwrap();
    let shorter: Vec<&str> = csv.lines().take(24).collect(); // header + 23 rows
    fs::write(dir.path().join("series.csv"), shorter.join("\n")).unwrap();

    let err = load_scenario(dir.path().join("scenario.yaml")).unwrap_err();
    assert!(
        matches!(
            err,
            ScenarioError::LengthMismatch {
                expected: 24,
                got: 23,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_files(dir.path());
    let yaml = fs::read_to_string(dir.path().join("scenario.yaml")).unwrap();
    fs::write(
        dir.path().join("scenario.yaml"),
        yaml.replace("ceiling_price: 3000.0", "ceiling_price: 3000.0\n  tipo: 7"),
    )
    .unwrap();
    let err = load_scenario(dir.path().join("scenario.yaml")).unwrap_err();
    assert!(matches!(err, ScenarioError::Parse { .. }), "{err}");
}

#[test]
fn missing_column_names_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_files(dir.path());
    let yaml = fs::read_to_string(dir.path().join("scenario.yaml")).unwrap();
    fs::write(
        dir.path().join("scenario.yaml"),
        yaml.replace("series.csv:load.base", "series.csv:nope"),
    )
    .unwrap();
    let err = load_scenario(dir.path().join("scenario.yaml")).unwrap_err();
    assert!(err.to_string().contains("nope"), "{err}");
}

fn roundtrip(s: &Scenario) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("again.yaml");
    save_scenario(s, &path).unwrap();
    let loaded = load_scenario(&path).unwrap();
    assert_eq!(*s, loaded);
}

#[test]
fn save_load_round_trip_is_identity() {
    roundtrip(&mies_core::scenario::fixtures::micro_scenario(24));
    for seed in 0..8 {
        let s = synthesize_scenario(5 + (seed as usize % 9), 24, seed).unwrap();
        assert!(validate_scenario(&s).is_valid());
        roundtrip(&s);
    }
}
