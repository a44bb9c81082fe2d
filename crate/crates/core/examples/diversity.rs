//! Compare the spread of two embedding sets: cumulative explained variance,
//! components needed per threshold, and a joint t-SNE layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use removal_engine::diversity::{analyze_pair, EmbeddingSet, TsneParams};

/// `n` points whose variance is concentrated in the first `rank` axes.
fn synthetic(label: &str, n: usize, dim: usize, rank: usize, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            (0..dim)
                .map(|d| {
                    let scale = if d < rank { 1.0 } else { 0.02 };
                    1.0 + scale * rng.gen_range(-1.0..1.0)
                })
                .collect()
        })
        .collect();
    EmbeddingSet::new(label, rows).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let narrow = synthetic("narrow", 120, 64, 4, 1);
    let broad = synthetic("broad", 90, 64, 40, 2);
    let params = TsneParams {
        perplexity: 20.0,
        iterations: 500,
        ..Default::default()
    };
    let report = analyze_pair(&narrow, &broad, 0, &params)?;
    println!("matched size {}", report.matched_size);
    for (label, threshold, k) in &report.crossings {
        println!(
            "{label:>7}: {k:>3} components for {:.0}% variance",
            threshold * 100.0
        );
    }
    if let Some((it, kl)) = report.kl_trace.last() {
        println!("final KL {kl:.4} at iteration {it}");
    }
    Ok(())
}
