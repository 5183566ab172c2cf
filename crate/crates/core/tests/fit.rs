use tilegraph::characterize::{characterize, Printed, Targets};
use tilegraph::cronet::fit::{fit_config_to_table, FitOptions};
use tilegraph::cronet::Size;
use tilegraph::ElemType;

#[test]
fn fit_recovers_table_totals() {
    let targets = Targets::shipped();
    let report = fit_config_to_table(&targets, &FitOptions::default()).unwrap();
    assert!(report.shipped_admissible);
    let best = report.best().expect("at least one candidate");
    assert!(best.max_mac_err <= 0.10);
    assert!(report.best_checks.iter().all(|c| c.pass), "{:?}", report.best_checks.iter().find(|c| !c.pass));
    let small = characterize(&best.config, Size::SMALL, ElemType::Bf16).unwrap();
    assert!(Printed::parse(&targets.total.params).unwrap().matches(small.totals.parameter_count as f64));
    let macs = Printed::parse(&targets.total.macs[0]).unwrap();
    assert!(macs.rel_err(small.totals.macs as f64) <= 0.10);
    let scores: Vec<f64> = report.candidates.iter().map(|c| c.score).collect();
    assert!(scores.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn fit_is_deterministic() {
    let targets = Targets::shipped();
    let opts = FitOptions { beam: 64, max_candidates: 3 };
    let a = fit_config_to_table(&targets, &opts).unwrap().to_json();
    let b = fit_config_to_table(&targets, &opts).unwrap().to_json();
    assert_eq!(a, b);
}

#[test]
fn impossible_targets_fail_cleanly() {
    let mut doc: toml::Value = toml::from_str(tilegraph::cronet::TABLE_V1).unwrap();
    doc["layer"][0]["params"] = toml::Value::String("7".into());
    let targets = Targets::from_toml(&toml::to_string(&doc).unwrap()).unwrap();
    assert!(fit_config_to_table(&targets, &FitOptions::default()).is_err());
}
