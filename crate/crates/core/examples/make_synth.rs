//! Writes the default synthetic corpus to a directory.
//!
//! Usage: cargo run -p gsrformer-core --example make_synth -- [DIR]
//!
//! DIR defaults to data/synth, which is where the desk preset looks.

use gsrformer_core::dataset::{generate, SynthSpec};
use std::path::PathBuf;

fn main() {
    let dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("data/synth"), PathBuf::from);
    let ds = generate(&SynthSpec::default()).expect("generate");
    ds.save(&dir).expect("save");
    let s = ds.stats();
    println!(
        "wrote {} images ({} verbs, {} role types, mean arity {:.2}, box coverage {:.1}%) to {}",
        s.images,
        s.verbs,
        s.role_types,
        s.mean_arity,
        100.0 * s.box_coverage,
        dir.display()
    );
}
