use faas_core::scenario::{run_scenario, RunOptions, ScenarioError};

const END_TO_END: &str = include_str!("../../../scenarios/end_to_end.scn");

#[test]
fn bundled_end_to_end_scenario_passes() {
    let report = run_scenario(END_TO_END, &RunOptions::default()).unwrap_or_else(|e| panic!("{e}"));
    assert!(report.records > 20);
    let forced = report
        .steps
        .iter()
        .any(|s| s.command == "scan" && s.output.to_string().contains("forced_leave"));
    assert!(forced);
}

#[test]
fn failed_expectation_reports_its_line() {
    let broken = END_TO_END.replace(r#"expect {"result":{"op":"SUM","value":555}}"#, r#"expect {"result":{"op":"SUM","value":556}}"#);
    let line = END_TO_END
        .lines()
        .position(|l| l.contains(r#""value":555"#))
        .unwrap()
        + 1;
    assert!(matches!(
        run_scenario(&broken, &RunOptions::default()),
        Err(ScenarioError::AssertionFailed { line: l, .. }) if l == line
    ));
}
