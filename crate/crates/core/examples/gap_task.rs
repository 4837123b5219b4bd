//! Trains one architecture on the synthetic gap task and prints test metrics.
//!
//! Usage: `cargo run --release --example gap_task -- <arch> [hidden_width] [seed]`

use std::time::Instant;

use rnode::data::{generate_synthetic, split_dataset};
use rnode::{
    evaluate, train, Arch, GapTaskSpec, Model, ModelConfig, SplitMode, SplitSpec, TrainConfig,
};

fn main() -> rnode::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arch: Arch = args.get(1).map_or("rnode", String::as_str).parse()?;
    let hidden = args
        .get(2)
        .map_or(Ok(16), |s| s.parse())
        .expect("hidden width");
    let seed = args.get(3).map_or(Ok(0), |s| s.parse()).expect("seed");

    let spec = GapTaskSpec::default();
    let seqs = generate_synthetic(&spec, seed)?;
    let splits = split_dataset(
        &seqs,
        &SplitSpec {
            mode: SplitMode::Sequences,
            ..SplitSpec::default()
        },
    )?;
    let model = Model::new(ModelConfig::new(arch, spec.feature_width, hidden, 2), seed)?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(model, &splits.train, &splits.val, &cfg, false)?;
    let report = evaluate(&out.model, &splits.test)?;
    println!(
        "{arch}: params={} best_epoch={} test_acc={:.4} f1={:.4} auc={:.4} time={:.1}s",
        report.param_count,
        out.best_epoch,
        report.accuracy,
        report.weighted_f1,
        report.weighted_auc.unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    for r in out.history.iter().step_by(5) {
        println!(
            "  epoch {:>2} loss {:.4} val_f1 {:.4}",
            r.epoch, r.train_loss, r.val_weighted_f1
        );
    }
    Ok(())
}
