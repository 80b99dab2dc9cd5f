//! Finite-difference verification of every parameter gradient, for the
//! contrastive and the binary cross-encoder objectives, plus a deliberately
//! broken backward that the check must catch.

use ceinfuse::training::{model_grad_check, small_config, Fault, Objective};

fn main() -> ceinfuse::Result<()> {
    let config = small_config();
    for objective in [Objective::Mnrl, Objective::CeBinary] {
        let r = model_grad_check(&config, objective, 0, None)?;
        println!("{objective:?}: max relative error {:.2e} (worst {})", r.max_rel_error, r.worst_tensor);
    }
    let broken = model_grad_check(&config, Objective::Mnrl, 0, Some(Fault::NegateFfnGrad))?;
    println!(
        "with negated FFN gradient: {:.2e} at {}",
        broken.max_rel_error, broken.worst_tensor
    );
    Ok(())
}
