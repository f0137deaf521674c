use std::path::PathBuf;

use lakn::experiment::ExperimentConfig;

fn shipped(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(path).unwrap()
}

#[test]
fn shipped_configs_match_the_fixtures() {
    for (name, mut fixture) in [
        ("planted.json", ExperimentConfig::planted_fixture()),
        ("trained.json", ExperimentConfig::trained_fixture()),
    ] {
        let cfg = shipped(name);
        cfg.validate().unwrap();
        fixture.output = cfg.output.clone();
        assert_eq!(cfg, fixture, "{name}");
    }
}

#[test]
fn configs_round_trip_through_json() {
    for cfg in [ExperimentConfig::default(), ExperimentConfig::trained_fixture()] {
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

#[test]
fn config_errors_name_the_field() {
    let err = ExperimentConfig::from_json(r#"{"uncertainty": {"tau": "high"}}"#).unwrap_err();
    assert!(err.to_string().contains("uncertainty.tau"), "{err}");
}
