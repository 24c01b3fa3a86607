//! Generates a graph-reachability dataset, writes it to disk and prints the
//! reachability statistics under both step binnings.
//!
//! ```text
//! cargo run --release --example generate_dataset -- [small|large] [train] [test] [seed] [out_dir]
//! ```

use std::path::PathBuf;

use reasonet::graphgen::{serialize, BinShare, Dataset, DatasetSpec, Variant};

fn format_bins(bins: &[BinShare]) -> String {
    bins.iter().map(|b| format!("{} {:.2}%", b.bin, b.percent)).collect::<Vec<_>>().join(", ")
}

fn main() -> reasonet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = args.first().map_or(Ok(Variant::Small), |s| s.parse()).map_err(reasonet::Error::Config)?;
    let count = |i: usize, default: u64| args.get(i).map_or(default, |s| s.parse().expect("integer argument"));
    let spec = DatasetSpec::new(variant, count(1, 10_000) as usize, count(2, 1_000) as usize, count(3, 7));
    let out = args.get(4).map_or_else(|| std::env::temp_dir().join("reasonet-data"), PathBuf::from);

    let data = Dataset::generate(&spec)?;
    let stats = data.write(&out)?;
    println!("wrote {} train / {} test instances to {}", data.train.len(), data.test.len(), out.display());

    let first = &data.train[0];
    let tokens = serialize(first);
    println!("\nfirst training instance");
    println!("  graph: {}", tokens.graph.join(" "));
    println!("  query: {}", tokens.query.join(" "));
    println!("  label: {}  bfs_step: {}", first.label, first.bfs_step);

    for (name, split) in [("train", &stats.train), ("test", &stats.test)] {
        println!("\n{name}: {} instances, {:.2}% unreachable", split.count, split.no_reach_percent);
        println!("  by edges on path:      {}", format_bins(&split.edge_count_bins));
        println!("  by intermediate nodes: {}", format_bins(&split.intermediate_node_bins));
    }
    Ok(())
}
