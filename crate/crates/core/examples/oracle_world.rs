//! Generate a seeded scene, list every object's removal closure, and save
//! the full render next to one ground-truth render.
//!
//! `cargo run --example oracle_world -- [seed] [objects]`

use std::collections::BTreeSet;

use removal_engine::oracle::{closure_order, gen_scene, render};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6);
    let scene = gen_scene(seed, n, 0.3)?;

    println!(
        "{} objects, {} edges",
        scene.objects.len(),
        scene.edges.len()
    );
    for e in &scene.edges {
        println!("  {} -> {} ({})", e.from, e.to, e.kind.as_str());
    }
    for obj in &scene.objects {
        let order = closure_order(&scene, &BTreeSet::from([obj.id]))?;
        let names: Vec<_> = order
            .iter()
            .map(|id| scene.object(*id).unwrap().name.as_str())
            .collect();
        println!("remove {:<16} -> {}", obj.name, names.join(", "));
    }

    let dir = std::env::temp_dir().join(format!("oracle-world-{seed}"));
    std::fs::create_dir_all(&dir)?;
    render(&scene, &BTreeSet::new()).save_png(dir.join("scene.png"))?;
    let first = closure_order(&scene, &BTreeSet::from([scene.objects[0].id]))?;
    render(&scene, &first.into_iter().collect()).save_png(dir.join("without_first.png"))?;
    println!("renders in {}", dir.display());
    Ok(())
}
