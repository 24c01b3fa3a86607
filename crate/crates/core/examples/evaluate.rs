//! Trains a small ReasoNet briefly, then scores the test split with both
//! score rules and prints accuracy, ROC-AUC and PR-AUC.
//!
//! ```text
//! cargo run --release --example evaluate -- [epochs]
//! ```

use reasonet::cli::evaluate;
use reasonet::graphgen::{Dataset, DatasetSpec, Variant};
use reasonet::metrics::{EvalReport, ScoreRule};
use reasonet::training::{TrainConfig, Trainer};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> reasonet::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(2, |s| s.parse().expect("epoch count"));
    let data = Dataset::generate(&DatasetSpec::new(Variant::Small, 1000, 300, 21))?;
    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config.clone(), data.spec.num_nodes)?;
    for _ in 0..epochs {
        trainer.train_epoch(&data.train)?;
    }

    let records = evaluate(&trainer.model, &data.test, 64)?;
    for rule in [ScoreRule::Selected, ScoreRule::Expected] {
        let r = EvalReport::compute(&records, config.t_max, rule)?;
        println!(
            "{rule:?}: accuracy {:.4}  roc_auc {:.4}  pr_auc {:.4}  ({} instances)",
            r.accuracy, r.roc_auc, r.pr_auc, r.count
        );
    }
    let wrong: Vec<_> = records.iter().filter(|r| !r.is_correct()).take(5).collect();
    println!("\nfirst misclassified test instances:");
    for r in wrong {
        println!(
            "  #{:<4} label {:<3} predicted {:<3} P(Yes) {:.3} step {:>2} bfs_step {:>2}",
            r.index, r.label, r.predicted, r.score, r.step, r.bfs_step
        );
    }
    Ok(())
}
