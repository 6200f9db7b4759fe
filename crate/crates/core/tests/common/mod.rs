#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabsage_core::harness::{ProviderSpec, RunConfig};
use tabsage_core::providers::ProviderConfig;

/// Heart-style synthetic rows whose label mostly follows chest pain and angina.
pub fn synthetic_csv(rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::from("Age,Sex,ChestPainType,Cholesterol,MaxHR,ExerciseAngina,HeartDisease\n");
    let pains = ["ATA", "NAP", "ASY", "TA"];
    for _ in 0..rows {
        let age: u32 = rng.gen_range(30..75);
        let sex = if rng.gen_bool(0.6) { "M" } else { "F" };
        let pain = pains[rng.gen_range(0..4)];
        let chol: u32 = rng.gen_range(150..340) / 10 * 10;
        let hr: u32 = rng.gen_range(90..190) / 10 * 10;
        let angina = if rng.gen_bool(0.4) { "Y" } else { "N" };
        let risk = (pain == "ASY") as u32 * 2 + (angina == "Y") as u32 * 2 + (age > 55) as u32;
        let label = if risk + rng.gen_range(0..2) >= 3 { "1" } else { "0" };
        let _ = writeln!(s, "{age},{sex},{pain},{chol},{hr},{angina},{label}");
    }
    s
}

pub fn write_dataset(dir: &Path, name: &str, rows: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("{name}.csv"));
    std::fs::write(&path, synthetic_csv(rows, seed)).unwrap();
    path
}

pub fn mock_config(data: PathBuf) -> RunConfig {
    RunConfig {
        data,
        label_column: "HeartDisease".into(),
        ..RunConfig::default()
    }
}

pub fn stub_provider(url: &str, model: &str) -> ProviderSpec {
    ProviderSpec::Http(ProviderConfig {
        endpoint_url: url.into(),
        model_id: model.into(),
        api_key_env: String::new(),
        timeout_secs: 10.0,
        max_retries: 0,
        ..ProviderConfig::default()
    })
}

/// Every model call goes through the stub at `url`.
pub fn stub_config(data: PathBuf, url: &str) -> RunConfig {
    RunConfig {
        explainer: stub_provider(url, "explainer"),
        surrogate: stub_provider(url, "surrogate"),
        embedder: stub_provider(url, "embedder"),
        ..mock_config(data)
    }
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}
