//! Compares sampled inference against the deterministic decision on a few
//! instances: the empirical termination-step distribution from many sampled
//! episodes next to the model's exact episode probabilities.
//!
//! ```text
//! cargo run --release --example stochastic_inference -- [samples]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reasonet::graphgen::{generate_split, DatasetSpec, GraphInstance, Split, Variant};
use reasonet::reasonet::{episode_probs, ModelConfig, ModelKind, ReasoNetModel};

fn main() -> reasonet::Result<()> {
    let samples: usize = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("sample count"));
    let spec = DatasetSpec::new(Variant::Small, 3, 1, 4);
    let instances = generate_split(&spec, Split::Train)?;
    let config = ModelConfig {
        kind: ModelKind::Reasonet,
        t_max: 5,
        init_seed: 9,
        ..ModelConfig::small(spec.variant.num_nodes())
    };
    let mut model = ReasoNetModel::new(config).map_err(reasonet::Error::Config)?;
    // A gate bias near zero spreads termination over several steps.
    let bias = model.params.find("termination.bias").expect("gate bias");
    model.params.get_mut(bias).value.data_mut()[0] = -0.5;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for inst in &instances {
        show(&model, inst, samples, &mut rng)?;
    }
    Ok(())
}

fn show(model: &ReasoNetModel, inst: &GraphInstance, samples: usize, rng: &mut ChaCha8Rng) -> reasonet::Result<()> {
    let (decision, values) = model.predict(&[inst])?.remove(0);
    let exact = episode_probs(&values.term_probs);
    let mut counts = vec![0usize; model.t_max()];
    let mut yes = 0usize;
    for _ in 0..samples {
        let (step, answer) = model.infer_stochastic(inst, rng)?;
        counts[step - 1] += 1;
        yes += usize::from(answer.is_yes());
    }
    println!(
        "query {}->{} (label {}): deterministic answer {} at step {}",
        inst.query.0, inst.query.1, inst.label, decision.answer, decision.step
    );
    println!("  step  sampled  exact");
    for (k, (&c, p)) in counts.iter().zip(&exact).enumerate() {
        println!("  {:>4}  {:>7.4}  {:.4}", k + 1, c as f64 / samples as f64, p);
    }
    println!("  sampled Yes fraction {:.4}\n", yes as f64 / samples as f64);
    Ok(())
}
