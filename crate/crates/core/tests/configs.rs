use std::path::PathBuf;

use cnfem_core::experiments::{ExperimentConfig, ExperimentKind};

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn committed_configs_match_presets() {
    for (name, kind) in [
        ("pincers.toml", ExperimentKind::PincersIllustration),
        ("model1.toml", ExperimentKind::Model1),
        ("model2.toml", ExperimentKind::Model2),
    ] {
        assert_eq!(config(name), ExperimentConfig::preset(kind), "{name}");
    }
}

#[test]
fn fine_model1_config_validates() {
    let c = config("model1_eps2_eighth.toml");
    assert_eq!(c.eps2_values, vec![0.125]);
    assert_eq!(c.domain.build().unwrap().num_elements(), 32 * 16 + 32 * 32);
}
