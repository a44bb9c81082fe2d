//! A remover that leaves the shadow behind, repaired by the single
//! corrective pass. Then the over-editing case: a simulator description that
//! forgets the tree makes the examiner remove it, unless the conservative
//! knob is on.

use std::collections::BTreeSet;

use removal_engine::oracle::{
    closure, oracle_backends_with, person_with_shadow, render, OracleOptions,
};
use removal_engine::pipeline::{run_pipeline, Mode, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = person_with_shadow();
    let id = |name: &str| scene.find_by_name(name).unwrap().id;
    let input = render(&scene, &BTreeSet::new());
    let truth = render(&scene, &closure(&scene, &BTreeSet::from([id("person")]))?);

    let faulty = oracle_backends_with(
        scene.clone(),
        OracleOptions {
            faulty_object: Some(id("person's shadow")),
            ..Default::default()
        },
    );
    for mode in [Mode::CloudNoCorrection, Mode::CloudFull] {
        let rec = run_pipeline(
            &input,
            "Remove the person.",
            &faulty,
            &PipelineConfig::for_mode(mode),
        )?;
        println!(
            "{mode}: corrective pass {}, residuals {:?}, exact {}",
            rec.corrective_pass,
            rec.correction.map(|c| c.labels).unwrap_or_default(),
            rec.final_image == truth
        );
    }

    let forgetful = oracle_backends_with(
        scene.clone(),
        OracleOptions {
            simulator_omits: BTreeSet::from([id("tree")]),
            ..Default::default()
        },
    );
    for conservative in [false, true] {
        let cfg = PipelineConfig {
            conservative_correction: conservative,
            ..Default::default()
        };
        let rec = run_pipeline(&input, "Remove the person.", &forgetful, &cfg)?;
        println!(
            "conservative={conservative}: examiner flagged {:?}, tree kept {}",
            rec.correction.map(|c| c.labels).unwrap_or_default(),
            rec.final_image == truth
        );
    }
    Ok(())
}
