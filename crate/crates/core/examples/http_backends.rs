//! Run the pipeline against live services configured through `REMOVAL_*`
//! environment variables.
//!
//! `cargo run --example http_backends -- input.png "Remove the dog." out.png`

use removal_engine::backends::http::{http_backends, HttpEndpoints, Localities};
use removal_engine::pipeline::{run_pipeline, PipelineConfig};
use removal_engine::raster::Image;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [input, instruction, output] = args.as_slice() else {
        eprintln!("usage: http_backends INPUT.png INSTRUCTION OUTPUT.png");
        std::process::exit(2);
    };
    let endpoints = match HttpEndpoints::from_env() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("endpoints not configured: {e}");
            std::process::exit(2);
        }
    };
    let backends = http_backends(&endpoints, Localities::default(), 1024)?;
    let image = Image::load_png(input)?;
    let record = run_pipeline(&image, instruction, &backends, &PipelineConfig::default())?;
    record.final_image.save_png(output)?;
    println!("plan: {}", record.plan.labels.join(", "));
    println!(
        "runtime: {:.2}(API) + {:.2}",
        record.timing.remote_s(),
        record.timing.local_s()
    );
    Ok(())
}
