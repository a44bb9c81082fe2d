//! Record every backend exchange of one run, save it as JSON lines, and
//! replay it offline with injected latency on the virtual clock.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use removal_engine::backends::fixtures::{
    recording_backends, replay_backends, replay_options_for, FixtureStore,
};
use removal_engine::backends::Locality;
use removal_engine::oracle::{oracle_backends_with, person_with_shadow, render, OracleOptions};
use removal_engine::pipeline::{run_pipeline, ClockMode, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = person_with_shadow();
    let live = oracle_backends_with(
        scene.clone(),
        OracleOptions {
            reasoner_locality: Locality::Remote,
            ..Default::default()
        },
    );
    let input = render(&scene, &BTreeSet::new());

    let store = Arc::new(FixtureStore::recording());
    let recorded = run_pipeline(
        &input,
        "Remove the person.",
        &recording_backends(&live, store.clone()),
        &PipelineConfig::default(),
    )?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("fixtures.jsonl");
    store.save(&path)?;
    println!("recorded {} exchanges", store.len());

    let mut opts = replay_options_for(&live);
    opts.latency = Duration::from_millis(250);
    let offline = replay_backends(Arc::new(FixtureStore::replay_from(&path)?), opts);
    let cfg = PipelineConfig {
        clock: ClockMode::Virtual,
        ..Default::default()
    };
    let replayed = run_pipeline(&input, "Remove the person.", &offline, &cfg)?;
    println!(
        "identical output: {}",
        replayed.final_digest == recorded.final_digest
    );
    for s in &replayed.timing.stages {
        println!(
            "  {:<12} {:.2}(API) + {:.2}",
            s.stage.to_string(),
            s.remote_s,
            s.local_s
        );
    }
    Ok(())
}
