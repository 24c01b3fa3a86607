//! Termination analysis of a model on test data: the termination-step
//! histogram and the matrix of termination step against BFS step, with the
//! mean termination step of each BFS step.
//!
//! Pass a checkpoint and dataset directory to analyse a trained model;
//! without arguments a freshly initialized model is used.
//!
//! ```text
//! cargo run --release --example analysis -- [model.ckpt data_dir]
//! ```

use std::path::Path;

use reasonet::cli::evaluate;
use reasonet::graphgen::{Dataset, DatasetSpec, Variant};
use reasonet::metrics::{bfs_correlation, bfs_matrix_csv, histogram_csv, inversions, termination_histogram};
use reasonet::model::AnyModel;
use reasonet::reasonet::ModelConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> reasonet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, data) = match args.as_slice() {
        [ckpt, dir, ..] => (AnyModel::load(Path::new(ckpt))?, Dataset::read(Path::new(dir))?),
        _ => {
            let data = Dataset::generate(&DatasetSpec::new(Variant::Small, 1, 1000, 3))?;
            (AnyModel::new(ModelConfig::small(data.spec.num_nodes))?, data)
        }
    };
    let t_max = model.config().t_max;
    let records = evaluate(&model, &data.test, 64)?;

    let histogram = termination_histogram(&records, t_max)?;
    println!("termination histogram\n{}", histogram_csv(&histogram));
    let matrix = bfs_correlation(&records, t_max)?;
    println!("termination step by BFS step\n{}", bfs_matrix_csv(&matrix));

    let means: Vec<f64> = (0..=3).filter_map(|b| matrix.mean_step(b)).collect();
    for (b, m) in matrix.bfs_steps.iter().filter_map(|&b| matrix.mean_step(b).map(|m| (b, m))) {
        println!("bfs_step {b:>2}: mean termination step {m:.3}");
    }
    println!("inversions across bfs steps 0-3: {}", inversions(&means));
    Ok(())
}
