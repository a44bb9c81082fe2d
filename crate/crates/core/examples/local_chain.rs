//! The four-step prompt chain used for local deployment. Only element
//! enumeration sees the image; the other steps are text-only.

use std::collections::BTreeSet;

use removal_engine::oracle::{oracle_backends, person_with_watering_can, render};
use removal_engine::pipeline::{run_local_chain, run_pipeline, Mode, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = person_with_watering_can();
    let backends = oracle_backends(scene.clone());
    let input = render(&scene, &BTreeSet::new());
    let cfg = PipelineConfig::for_mode(Mode::LocalChain);

    let plan = run_local_chain(&input, "Remove the person.", &backends, &cfg)?;
    println!("reasoning: {}", plan.reasoning);
    println!("plan: {:?}", plan.labels);

    let record = run_pipeline(&input, "Remove the person.", &backends, &cfg)?;
    println!(
        "timing: {:.4} s remote, {:.4} s local",
        record.timing.remote_s(),
        record.timing.local_s()
    );
    Ok(())
}
