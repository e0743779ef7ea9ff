//! Replicate-then-perturb initialisation: each copy gets a share of its
//! weights redrawn, which pulls the experts apart.
//!
//! ```text
//! cargo run --example drop_upcycle
//! ```

use finermoe::analysis::expert_similarity;
use finermoe::{drop_upcycle, Rng, SwiGluWeights};

fn main() -> finermoe::Result<()> {
    let dense = SwiGluWeights::<f32>::random(32, 128, 32, 0.05, &mut Rng::new(4));
    for ratio in [0.0, 0.1, 0.5, 0.9, 1.0] {
        let model = drop_upcycle(&dense, 8, ratio, 2, 4)?;
        println!("drop ratio {ratio:.1}: mean expert cosine {:.4}", expert_similarity(&model)?.mean);
    }
    Ok(())
}
