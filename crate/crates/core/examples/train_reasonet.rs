//! Generates a small-graph dataset, trains a ReasoNet on it and reports test metrics.
//!
//! ```text
//! cargo run --release --example train_reasonet -- [train_count] [test_count] [epochs]
//! ```

use reasonet::graphgen::{Dataset, DatasetSpec, Variant};
use reasonet::training::{TrainConfig, Trainer};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> reasonet::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("counts are integers")).collect();
    let train = args.first().copied().unwrap_or(2000);
    let test = args.get(1).copied().unwrap_or(500);
    let epochs = args.get(2).copied().unwrap_or(3);
    let data = Dataset::generate(&DatasetSpec::new(Variant::Small, train, test, 7))?;
    let mut trainer = Trainer::new(TrainConfig::default(), data.spec.num_nodes)?;
    for _ in 0..epochs {
        let m = trainer.train_epoch(&data.train)?;
        let preds = trainer.model.predict(&data.test, 64)?;
        let correct = preds.iter().zip(&data.test).filter(|(p, i)| p.answer == i.label).count();
        println!(
            "epoch {:>2}  mean_J {:.4}  loss {:+.4}  train_acc {:.4}  test_acc {:.4}  {:.1}s",
            m.epoch,
            m.mean_j,
            m.loss,
            m.train_acc,
            correct as f64 / data.test.len() as f64,
            m.wall_seconds
        );
    }
    Ok(())
}
