//! Sparsifies a toy network, compiles it into group convolutions and index
//! layers, and checks that the plan computes the same logits.
//!
//! cargo run --release --example compile_and_verify

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfrnet::compile::{compile_network, verify_equivalence, InferencePlan};
use sfrnet::network::{network_cost, Network, NetworkConfig};
use sfrnet::{Shape4, Tensor4};

fn main() -> sfrnet::Result<()> {
    let cfg = NetworkConfig::toy();
    let mut net = Network::new(&cfg, 7)?;
    for _ in 1..cfg.sparse_factor {
        net.prune_sfr_stage()?;
    }
    for _ in 1..cfg.condense_factor {
        net.prune_lgc_stage()?;
    }
    println!("fully sparsified: {}", net.is_fully_sparsified());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let side = cfg.input_resolution;
    let x = Tensor4::randn(Shape4::new(16, cfg.input_channels, side, side), 1.0, &mut rng);

    let plan = compile_network(&net, false)?;
    println!("max |logit diff| unfolded: {:.3e}", verify_equivalence(&mut net, &plan, &x)?);
    let folded = compile_network(&net, true)?;
    println!("max |logit diff| BN folded: {:.3e}", verify_equivalence(&mut net, &folded, &x)?);

    let path = std::env::temp_dir().join("sfrnet-example-plan.cnv2");
    folded.save(&path)?;
    let reloaded = InferencePlan::load(&path)?;
    println!(
        "reloaded plan from {} ({} bytes), identical: {}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        reloaded == folded
    );
    std::fs::remove_file(&path)?;

    println!("\ntraining form, masked weights counted as live:\n{}", network_cost(&net));
    println!("\ncompiled plan:\n{}", folded.cost());
    Ok(())
}
