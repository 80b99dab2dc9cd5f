//! Paired two-tailed t-test over per-dataset scores of two systems.

use ceinfuse::eval::{on_par, paired_t_test};

fn main() -> ceinfuse::Result<()> {
    let infused = [0.412, 0.388, 0.501, 0.463, 0.437];
    let random = [0.395, 0.371, 0.470, 0.468, 0.402];
    let t = paired_t_test(&infused, &random)?;
    println!("t = {:.4}, p = {:.4}, n = {}", t.t, t.p, t.n);

    for (a, b) in infused.iter().zip(&random) {
        let (abs, rel) = on_par(*a, *b);
        println!("{a:.3} vs {b:.3}: within 0.01 {abs}, within 1% {rel}");
    }
    Ok(())
}
