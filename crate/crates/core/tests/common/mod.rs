//! Shared fixture plumbing for integration tests: materialize a generated
//! corpus as the on-disk files the pipeline consumes, and build run configs
//! pointing at them.
//!
//! Each test target compiles this module independently and uses a different
//! subset of it.
#![allow(dead_code)]

use adsoup::synth::SynthOutput;
use std::path::{Path, PathBuf};

pub struct Fixture {
    pub corpus: PathBuf,
    pub registry: PathBuf,
    pub annotations: PathBuf,
}

/// Write `ads.jsonl`, `registry.csv`, and `annotations.csv` under `dir`.
pub fn write_fixture(dir: &Path, synth: &SynthOutput) -> Fixture {
    let corpus = dir.join("ads.jsonl");
    let mut jsonl = String::new();
    for ad in &synth.ads {
        jsonl.push_str(&serde_json::to_string(ad).expect("ad serializes"));
        jsonl.push('\n');
    }
    std::fs::write(&corpus, jsonl).expect("write corpus");

    let registry = dir.join("registry.csv");
    synth.registry().save_csv(&registry).expect("write registry");

    let annotations = dir.join("annotations.csv");
    let mut csv = String::from("ad_id,theme_id\n");
    for (ad_id, theme_id) in &synth.annotations {
        csv.push_str(&format!("{ad_id},{theme_id}\n"));
    }
    std::fs::write(&annotations, csv).expect("write annotations");

    Fixture {
        corpus,
        registry,
        annotations,
    }
}

/// A run config as a JSON value; tweak fields before writing.
pub fn config_value(fixture: &Fixture, workdir: &Path) -> serde_json::Value {
    serde_json::json!({
        "paths": {
            "corpus": fixture.corpus,
            "registry": fixture.registry,
            "annotations": fixture.annotations,
            "workdir": workdir,
        }
    })
}

pub fn write_config(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("config json"))
        .expect("write config");
}
