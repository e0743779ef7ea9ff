//! Upcycle one dense FFN with every preset and show what comes out.
//!
//! ```text
//! cargo run --example upcycle_presets
//! ```

use finermoe::analysis::expert_similarity;
use finermoe::{upcycle, Preset, Rng, SwiGluWeights};

fn main() -> finermoe::Result<()> {
    let (h, hh) = (64, 256);
    let dense = SwiGluWeights::<f32>::random(h, hh, h, 0.05, &mut Rng::new(1));

    println!("{:<14} {:>7} {:>7} {:>9} {:>9} {:>10}", "preset", "experts", "active", "inter", "out", "cosine");
    for preset in Preset::ALL {
        let cfg = preset.config(h, hh);
        let model = upcycle(&dense, &cfg, 7)?;
        let d = model.dims();
        let sim = expert_similarity(&model)?;
        println!(
            "{:<14} {:>7} {:>7} {:>9} {:>9} {:>10.4}",
            preset.name(),
            d.n_experts,
            d.n_active,
            d.expert_intermediate,
            d.expert_output,
            sim.mean
        );
    }
    Ok(())
}
