//! Seed-pinned synthetic benchmark: one source run, then the loss ablation
//! ladder on the target. Prints one metrics row per adaptation epoch.
//!
//! `cargo run --release -p sfda-core --example benchmark`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfda_core::losses::LossWeights;
use sfda_core::model::{BackboneConfig, Model};
use sfda_core::pipeline::{self, AdaptConfig};
use sfda_core::synthdata::{generate, DomainSpec};

fn main() -> sfda_core::Result<()> {
    let spec = DomainSpec::default();
    let (src, tgt) = generate(&spec)?;
    let cfg = AdaptConfig {
        source_epochs: 30,
        target_epochs: 20,
        ..AdaptConfig::default()
    };
    let bb = BackboneConfig::toy(spec.num_classes);
    let adm = Model::<f32>::toy_adm(&bb);
    let mut source = Model::<f32>::new(bb, adm, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;

    let t0 = Instant::now();
    pipeline::train_source(&mut source, &src.images, &src.labels, &cfg)?;
    let s = pipeline::evaluate(&source, &src.images, &src.labels)?;
    let before = pipeline::evaluate(&source, &tgt.images, &tgt.sidecar.truth)?;
    println!(
        "source acc {:.4}, source-only target acc {:.4} ({:.1}s)",
        s.accuracy,
        before.accuracy,
        t0.elapsed().as_secs_f64()
    );

    let truth = &tgt.sidecar.truth;
    let hard: Vec<usize> = (0..truth.len()).filter(|&i| tgt.sidecar.hard[i]).collect();
    for (name, alpha, beta) in [("baseline", 0.0, 0.0), ("+cst", 0.3, 0.0), ("+cst+cmk", 0.3, 0.1)] {
        let t = Instant::now();
        let mut model = source.clone();
        let run = AdaptConfig {
            weights: LossWeights { alpha, beta },
            ..cfg.clone()
        };
        println!("{name}\n{}", sfda_core::io::metrics::HEADER);
        pipeline::adapt_target(&mut model, &tgt.images, &run, &mut |r| {
            let hits = hard.iter().filter(|&&i| r.predictions[i] == truth[i]).count();
            println!("{} hard_acc {:.4}", r.metrics(truth).to_csv(), hits as f64 / hard.len() as f64);
            Ok(())
        })?;
        let after = pipeline::evaluate(&model, &tgt.images, truth)?;
        println!(
            "{name}: target acc {:.4} ({:+.2} points, {:.1}s)",
            after.accuracy,
            100.0 * (after.accuracy - before.accuracy),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
