//! Parse analyzer and examiner replies, including smart quotes and
//! trailing prose, and show the canonical rendering.

use removal_engine::parse::{
    format_analyzer_response, parse_analyzer_response, parse_examiner_response,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let replies = [
        "Reasoning: \"The target object is a person. Without the person, the bags and the cup he is holding \
         would appear to float in midair.\"\nTarget Objects: [\"person\", \"the bags\", \"the cup\"]",
        "Reasoning: ``The lamp lights the wall.''\nTarget Objects: [“lamp”, ‘the lamp’s glow’ ]\nHope this helps!",
    ];
    for text in replies {
        let plan = parse_analyzer_response(text)?;
        println!("{:?}", plan.labels);
        println!("{}\n", format_analyzer_response(&plan));
    }

    let exam =
        "Reasoning: \"The shadow is still visible.\"\nObjects to be removed: [\"person's shadow\"]";
    println!("{:?}", parse_examiner_response(exam)?.labels);
    match parse_analyzer_response("I would remove the person.") {
        Ok(p) => println!("unexpected: {p:?}"),
        Err(e) => println!("malformed: {e}"),
    }
    Ok(())
}
