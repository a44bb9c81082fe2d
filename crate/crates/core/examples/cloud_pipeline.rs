//! Full cloud pipeline (analysis, removal, self-correction) against the
//! oracle world, printing the run record.

use std::collections::BTreeSet;

use removal_engine::oracle::{closure, oracle_backends, person_with_shadow, render};
use removal_engine::pipeline::{run_pipeline, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = person_with_shadow();
    let backends = oracle_backends(scene.clone());
    let input = render(&scene, &BTreeSet::new());

    let record = run_pipeline(
        &input,
        "Remove the person.",
        &backends,
        &PipelineConfig::default(),
    )?;
    println!("{}", record.to_json());

    let person = scene.find_by_name("person").unwrap().id;
    let truth = render(&scene, &closure(&scene, &BTreeSet::from([person]))?);
    println!("matches ground truth: {}", record.final_image == truth);
    Ok(())
}
