use std::fs;
use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use msgw::config::RunConfig;
use msgw::data::{
    load_station_csv, make_windows, parse_station_csv, window_count, DataError, MinMaxScaler, SplitPart, RawSeries,
    WIND_SPEED,
};
use msgw::pipeline;
use msgw::synthetic::{generate, SyntheticSpec};
use msgw::train::{Checkpoint, MemoryStore, CheckpointStore};
use proptest::prelude::*;

const STATIONS: [&str; 5] = ["aalborg", "aarhus", "esbjerg", "odense", "roskilde"];

/// Writes synthetic station files named after the default node order.
fn write_stations(dir: &Path, hours: usize, seed: u64) {
    let mut spec = SyntheticSpec::chain(hours, seed);
    spec.node_names = STATIONS.map(String::from).to_vec();
    for s in generate(&spec).unwrap() {
        fs::write(dir.join(format!("{}.csv", s.name)), s.to_csv()).unwrap();
    }
}

fn config(dir: &Path, extra: &[&str]) -> RunConfig {
    let mut overrides = vec![format!("data.dir={:?}", dir.display().to_string())];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &overrides).unwrap()
}

#[test]
fn station_csv_round_trips() {
    let spec = SyntheticSpec::chain(50, 3);
    let stations = generate(&spec).unwrap();
    for s in &stations {
        let back = parse_station_csv(s.to_csv().as_bytes(), &s.name, 0).unwrap();
        assert_eq!(&back, s);
    }
}

#[test]
fn short_gaps_are_interpolated_long_ones_rejected() {
    let text = "timestamp,temperature,pressure,wind_speed,wind_direction\n\
                2001-03-01T00:00:00Z,1,1000,2,10\n\
                2001-03-01T03:00:00Z,4,1003,8,40\n";
    let s = parse_station_csv(text.as_bytes(), "x", 2).unwrap();
    assert_eq!(s.len(), 4);
    assert_eq!(s.rows[1], [2.0, 1001.0, 4.0, 20.0]);
    assert_eq!(s.rows[2], [3.0, 1002.0, 6.0, 30.0]);
    let err = parse_station_csv(text.as_bytes(), "x", 1).unwrap_err();
    assert!(matches!(err, DataError::Gap { missing: 2, .. }), "{err}");
}

#[test]
fn malformed_rows_name_the_line() {
    let text = "timestamp,temperature,pressure,wind_speed,wind_direction\n\
                2001-03-01T00:00:00Z,1,1000,2,10\n\
                2001-03-01T01:00:00Z,1,1000,oops,10\n";
    let err = parse_station_csv(text.as_bytes(), "odense", 3).unwrap_err();
    assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
}

#[test]
fn missing_file_error_names_the_path() {
    let err = load_station_csv(Path::new("/nonexistent/odense.csv"), 3).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/odense.csv"));
}

#[test]
fn year_split_keeps_targets_inside_their_year() {
    let tmp = tempfile::tempdir().unwrap();
    // 2000-01-01 through 2002-12-31
    let hours = 3 * 365 * 24 + 24;
    write_stations(tmp.path(), hours, 1);
    let cfg = config(
        tmp.path(),
        &["data.train_years=[2000]", "data.val_years=[2001]", "data.test_years=[2002]"],
    );
    let raw = pipeline::load_raw(&cfg).unwrap();
    let prepared = pipeline::prepare(&cfg, &raw, None).unwrap();
    let (w, t) = (cfg.model.window as i64, cfg.model.horizon as i64);
    let year_start = |y| Utc.with_ymd_and_hms(y, 1, 1, 0, 0, 0).unwrap();
    for (data, year) in [(&prepared.train, 2000), (prepared.val.as_ref().unwrap(), 2001), (&prepared.test, 2002)] {
        let first = data.target_time(0);
        let last = data.target_time(data.len() - 1);
        assert!(first >= year_start(year) && last < year_start(year + 1));
        for s in [0, data.len() / 2, data.len() - 1] {
            assert_eq!(data.target_time(s) - data.last_input_time(s), Duration::hours(t));
        }
        if year > 2000 {
            // the first target is the first hour of the year, so the input
            // window reaches back into the previous year
            assert_eq!(first, year_start(year));
            assert_eq!(data.last_input_time(0), year_start(year) - Duration::hours(t));
        }
    }
    let train_hours = 366 * 24;
    assert_eq!(prepared.train.len() as i64, train_hours - w - t + 1);
    assert_eq!(prepared.val.as_ref().unwrap().len(), 365 * 24);
}

#[test]
fn scaler_is_fitted_on_training_hours_only() {
    let tmp = tempfile::tempdir().unwrap();
    write_stations(tmp.path(), 1000, 2);
    // a storm in the test part must not leak into the scaling
    let path = tmp.path().join("odense.csv");
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    let storm = lines.len() - 10;
    let mut cols: Vec<String> = lines[storm].split(',').map(String::from).collect();
    cols[3] = "99.5".into();
    lines[storm] = cols.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let cfg = config(tmp.path(), &["data.split=\"fraction\""]);
    let raw = pipeline::load_raw(&cfg).unwrap();
    let prepared = pipeline::prepare(&cfg, &raw, None).unwrap();
    let expected = MinMaxScaler::fit(&raw.slice(0, 700));
    assert_eq!(prepared.scaler, expected);
    let odense = 3;
    assert!(prepared.scaler.max[WIND_SPEED * 5 + odense] < 99.5);
    let normalized = prepared.scaler.normalize(99.5, WIND_SPEED, odense);
    assert!(normalized > 1.0);
}

#[test]
fn reusing_a_scaler_with_other_node_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_stations(tmp.path(), 600, 2);
    let cfg = config(tmp.path(), &["data.split=\"fraction\""]);
    let raw = pipeline::load_raw(&cfg).unwrap();
    let mut scaler = MinMaxScaler::fit(&raw);
    scaler.num_nodes = 4;
    assert!(matches!(
        pipeline::prepare(&cfg, &raw, Some(&scaler)),
        Err(pipeline::PipelineError::Mismatch(_))
    ));
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    write_stations(tmp.path(), 500, 4);
    let cfg = config(
        tmp.path(),
        &[
            "data.split=\"fraction\"",
            "train.epochs=1",
            "model.num_blocks=2",
            "model.residual_channels=4",
            "model.skip_channels=4",
            "model.end_channels=[8]",
        ],
    );
    let raw = pipeline::load_raw(&cfg).unwrap();
    let prepared = pipeline::prepare(&cfg, &raw, None).unwrap();
    let mut store = MemoryStore::new();
    let (net, _) = pipeline::train_from_config(&cfg, &prepared, &mut store, |_| {}).unwrap();
    let ckpt = store.load_best().unwrap().unwrap();

    let path = tmp.path().join("best.stgw");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), fs::read(&path).unwrap());
    let restored = pipeline::restore(&loaded).unwrap();
    let (x, _) = prepared.test.materialize();
    assert_eq!(restored.predict(&x).unwrap(), net.predict(&x).unwrap());

    let again = pipeline::checkpoint_config(&loaded, None, &[]).unwrap();
    assert_eq!(again.model_config().unwrap(), loaded.meta.model);
    assert_eq!(loaded.meta.scaler.as_ref(), Some(&prepared.scaler));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_stations(tmp.path(), 500, 4);
    let cfg = config(
        tmp.path(),
        &["data.split=\"fraction\"", "train.epochs=1", "model.num_blocks=2", "model.residual_channels=4"],
    );
    let raw = pipeline::load_raw(&cfg).unwrap();
    let prepared = pipeline::prepare(&cfg, &raw, None).unwrap();
    let mut store = MemoryStore::new();
    pipeline::train_from_config(&cfg, &prepared, &mut store, |_| {}).unwrap();
    let bytes = store.load_best().unwrap().unwrap().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

fn ramp(len: usize) -> RawSeries {
    let start = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
    let values = (0..len).flat_map(|t| (0..4).map(move |d| (t * 4 + d) as f64)).collect();
    RawSeries::new(start, vec!["a".into()], values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_count_matches_make_windows(len in 1usize..120, w in 1usize..30, t in 1usize..30) {
        let raw = ramp(len);
        let expected = if len >= w + t { len - w - t + 1 } else { 0 };
        prop_assert_eq!(window_count(len, w, t), expected);
        let scaler = MinMaxScaler::fit(&raw);
        let made = make_windows(&SplitPart { series: raw, context: 0 }, &scaler, w, t, &[0]);
        match made {
            Ok(d) => {
                prop_assert_eq!(d.len(), expected);
                // the last target is the last hour of the series
                prop_assert_eq!(d.targets(d.len() - 1)[0], ((len - 1) * 4 + WIND_SPEED) as f64);
            }
            Err(_) => prop_assert_eq!(expected, 0),
        }
    }

    #[test]
    fn lead_in_never_holds_a_target(len in 20usize..120, context in 0usize..20, w in 1usize..10, t in 1usize..10) {
        prop_assume!(context < len);
        let raw = ramp(len);
        let scaler = MinMaxScaler::fit(&raw);
        if let Ok(d) = make_windows(&SplitPart { series: raw, context }, &scaler, w, t, &[0]) {
            let first_target_hour = d.targets(0)[0] as usize / 4;
            prop_assert!(first_target_hour >= context);
            let owned = len - context;
            let possible = window_count(len, w, t).min(owned);
            prop_assert_eq!(d.len(), possible);
        }
    }
}
