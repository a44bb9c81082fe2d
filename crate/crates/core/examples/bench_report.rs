//! Benchmark a small oracle manifest and print the markdown report.

use std::collections::BTreeSet;

use removal_engine::bench::{
    run_bench, write_manifest, BenchBackends, BenchOptions, ManifestEntry, Source,
};
use removal_engine::oracle::{closure, gen_scene, oracle_backends, render};
use removal_engine::pipeline::{Mode, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let scene = gen_scene(11, 5, 0.4)?;
    let input = dir.path().join("scene.png");
    render(&scene, &BTreeSet::new()).save_png(&input)?;

    let mut entries = Vec::new();
    for obj in &scene.objects {
        let gt = dir.path().join(format!("gt{}.png", obj.id));
        render(&scene, &closure(&scene, &BTreeSet::from([obj.id]))?).save_png(&gt)?;
        let categories: BTreeSet<_> = scene
            .edges
            .iter()
            .filter(|e| e.from == obj.id)
            .map(|e| e.kind)
            .collect();
        entries.push(ManifestEntry {
            id: format!("o{}", obj.id),
            input_image: input.clone(),
            instruction: format!("Remove the {}.", obj.name),
            ground_truth: Some(gt),
            categories: categories.into_iter().collect(),
            source: Source::Synthetic,
            scene: None,
        });
    }
    write_manifest(dir.path().join("manifest.jsonl"), &entries)?;

    let backends = BenchBackends::Shared(oracle_backends(scene));
    for mode in [Mode::CloudFull, Mode::LocalChain] {
        let opts = BenchOptions {
            label: Some(mode.to_string()),
            ..Default::default()
        };
        let report = run_bench(&entries, &backends, &PipelineConfig::for_mode(mode), &opts)?;
        println!("{}", report.to_markdown());
    }
    Ok(())
}
