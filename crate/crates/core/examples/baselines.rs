//! Trains every model kind on the same small-graph data with identical
//! optimizer settings: ReasoNet, ReasoNet-Last, the two-step variants and
//! the deep LSTM reader.
//!
//! ```text
//! cargo run --release --example baselines -- [train_count] [epochs]
//! ```

use reasonet::baselines::make_tmax2_variant;
use reasonet::graphgen::{Dataset, DatasetSpec, Variant};
use reasonet::model::AnyModel;
use reasonet::reasonet::ModelKind;
use reasonet::training::{TrainConfig, Trainer};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> reasonet::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("counts are integers")).collect();
    let train = args.first().copied().unwrap_or(1000);
    let epochs = args.get(1).copied().unwrap_or(2);
    let data = Dataset::generate(&DatasetSpec::new(Variant::Small, train, 300, 13))?;
    let nodes = data.spec.num_nodes;

    let base = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let with_kind = |model| TrainConfig { model, ..base.clone() };
    let gated = base.model_config(nodes);
    let runs: Vec<(&str, TrainConfig, AnyModel)> = vec![
        ("reasonet", base.clone(), AnyModel::new(gated.clone())?),
        ("reasonet-last", with_kind(ModelKind::ReasonetLast), AnyModel::new(with_kind(ModelKind::ReasonetLast).model_config(nodes))?),
        ("reasonet t_max=2", base.clone(), AnyModel::new(make_tmax2_variant(&gated, false))?),
        ("reasonet-last t_max=2", with_kind(ModelKind::ReasonetLast), AnyModel::new(make_tmax2_variant(&gated, true))?),
        ("deep-lstm", with_kind(ModelKind::DeepLstm), AnyModel::new(with_kind(ModelKind::DeepLstm).model_config(nodes))?),
    ];

    println!("{:<24} {:>10} {:>10} {:>10}", "model", "train_acc", "test_acc", "seconds");
    for (name, config, model) in runs {
        let mut trainer = Trainer::with_model(config, model)?;
        let mut last = None;
        for _ in 0..epochs {
            last = Some(trainer.train_epoch(&data.train)?);
        }
        let last = last.expect("at least one epoch");
        let preds = trainer.model.predict(&data.test, 64)?;
        let correct = preds.iter().zip(&data.test).filter(|(p, i)| p.answer == i.label).count();
        println!(
            "{name:<24} {:>10.4} {:>10.4} {:>10.1}",
            last.train_acc,
            correct as f64 / data.test.len() as f64,
            last.wall_seconds
        );
    }
    Ok(())
}
