//! Saves a model, reloads it and shows that the content hash and every
//! prediction survive the round trip.
//!
//! ```text
//! cargo run --release --example checkpoints
//! ```

use reasonet::graphgen::{Dataset, DatasetSpec, Variant};
use reasonet::model::AnyModel;
use reasonet::training::{TrainConfig, Trainer};

fn main() -> reasonet::Result<()> {
    let data = Dataset::generate(&DatasetSpec::new(Variant::Small, 64, 64, 5))?;
    let config = TrainConfig {
        t_max: 4,
        embedding_dim: 8,
        encoder_hidden: 8,
        controller_hidden: 16,
        attention_dim: 8,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, data.spec.num_nodes)?;
    trainer.train_epoch(&data.train)?;

    let dir = std::env::temp_dir().join("reasonet-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| reasonet::Error::io(&dir, e))?;
    let path = dir.join("model.ckpt");
    let saved = trainer.model.save(&path)?;
    let loaded = AnyModel::load(&path)?;
    let reloaded = reasonet::checkpoint::content_hash(&loaded.to_bytes());
    println!("saved    {saved}\nreloaded {reloaded}");

    let before = trainer.model.predict(&data.test, 32)?;
    let after = loaded.predict(&data.test, 32)?;
    let same = before.iter().zip(&after).filter(|(a, b)| a == b).count();
    println!("{same}/{} predictions identical after reload", before.len());
    assert_eq!(saved, reloaded);
    assert_eq!(same, before.len());
    Ok(())
}
