use std::fs;

use churnlab::dataset::{generate_synthetic, load_csv, save_csv, stratified_kfold, undersample, GeneratorConfig};
use churnlab::ChurnError;

fn generated(seed: u64) -> churnlab::dataset::Panel {
    generate_synthetic(&GeneratorConfig {
        n_customers: 500,
        churn_rate: 0.04,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

#[test]
fn saved_panel_loads_back_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let panel = generated(1);
    save_csv(&panel, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back, panel);
    assert_eq!(back.n_churners(), 20);

    let again = dir.path().join("q.csv");
    save_csv(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn corrupt_files_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    save_csv(&generated(2), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();

    let no_tag = dir.path().join("no_tag.csv");
    fs::write(&no_tag, text.split_once('\n').unwrap().1).unwrap();
    assert!(matches!(load_csv(&no_tag), Err(ChurnError::Parse { line: 1, .. })));

    // Line 4 is the second customer; break its churn flag.
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<&str> = lines[3].split(',').collect();
    fields[1] = "yes";
    lines[3] = fields.join(",");
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, lines.join("\n")).unwrap();
    match load_csv(&bad) {
        Err(ChurnError::Parse { line, message, .. }) => {
            assert_eq!(line, 4);
            assert!(message.contains("churned"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn folds_and_undersampling_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let panel = generated(3);
    save_csv(&panel, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(stratified_kfold(&panel, 3, 9).unwrap(), stratified_kfold(&back, 3, 9).unwrap());
    let a = undersample(&panel, 2, 4).unwrap();
    let b = undersample(&back, 2, 4).unwrap();
    assert_eq!(a.ids(), b.ids());
    assert_eq!(a.n_churners(), 20);
    assert_eq!(a.len(), 60);
}
