//! Walks one reactivation module through its pruning schedule: which output
//! rows each group keeps after every stage, and how the surviving weights
//! pack into a group convolution followed by a scatter-sum.
//!
//! cargo run --release --example reactivation_module

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfrnet::compile::convert_sfr;
use sfrnet::ops::conv2d;
use sfrnet::schedule::build_schedule;
use sfrnet::sfr::SfrModule;
use sfrnet::{Shape4, Tensor4};

fn main() -> sfrnet::Result<()> {
    let (inputs, outputs, groups, factor) = (8, 12, 2, 4);
    let schedule = build_schedule(40, factor)?;
    println!(
        "40 epochs, S={factor}: stages {:?}, optimisation {} epochs, prune after epochs {:?}",
        schedule.sparsification_stage_epochs, schedule.optimization_epochs, schedule.prune_events
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut module = SfrModule::new(inputs, outputs, groups, factor, &mut rng)?;
    for stage in 1..factor {
        module.prune_stage()?;
        for g in 0..groups {
            let kept: Vec<usize> = (0..outputs).filter(|&r| module.row_is_live(g, r)).collect();
            println!("after stage {stage}: group {g} keeps rows {kept:?}");
        }
    }

    let plan = convert_sfr(&module)?;
    println!(
        "packed conv: {} filters x {} inputs in {} groups; scatter-sum into {} channels",
        plan.conv.out_channels,
        plan.conv.in_per_group,
        plan.conv.groups,
        plan.index.output_width
    );
    let x = Tensor4::randn(Shape4::new(4, inputs, 3, 3), 1.0, &mut rng);
    let packed = plan.index.apply(&conv2d(&x, &plan.conv, 1, 0)?)?;
    println!("max |masked - packed| = {:.3e}", module.conv_only(&x)?.max_abs_diff(&packed));
    Ok(())
}
