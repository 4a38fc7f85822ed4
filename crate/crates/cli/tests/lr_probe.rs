//! Scratch probe for desk-preset learning rates. Not part of the suite.

use gsrformer_core::config::RunConfig;
use gsrformer_core::dataset::{generate, SynthSpec};
use gsrformer_core::infer::evaluate;
use gsrformer_core::train::train;

#[test]
#[ignore]
fn probe() {
    let ds = generate(&SynthSpec::default()).unwrap();
    for (le, ld, ee, de) in [
        (0.002, 0.001, 60, 400),
        (0.002, 0.0008, 60, 600),
    ] {
        let mut cfg = RunConfig::desk();
        cfg.train.lr_encoder = le;
        cfg.train.lr_decoder = ld;
        cfg.train.encoder_epochs = ee;
        cfg.train.decoder_epochs = de;
        let t0 = std::time::Instant::now();
        match train(&cfg, &ds, None) {
            Err(e) => println!("lr {le}/{ld} ep {ee}/{de}: diverged: {e}"),
            Ok(out) => {
                let ev = evaluate(&out.model, &out.index, &ds, true).unwrap();
                println!(
                    "lr {le}/{ld} ep {ee}/{de}: enc {:.3}->{:.3} dec {:.3}->{:.3} top1 {:.1} gtv {:.1} ({:.0}s)",
                    out.encoder_epoch_loss.first().unwrap(),
                    out.encoder_epoch_loss.last().unwrap(),
                    out.decoder_epoch_loss.first().unwrap(),
                    out.decoder_epoch_loss.last().unwrap(),
                    ev.report.top1.verb,
                    ev.report.gt_verb.value,
                    t0.elapsed().as_secs_f64(),
                );
            }
        }
    }
}
