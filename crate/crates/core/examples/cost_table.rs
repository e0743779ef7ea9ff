//! Parameter counts for the 1.5B ablation grid, whole model.
//!
//! ```text
//! cargo run --example cost_table
//! ```

use finermoe::analysis::{cost_report, REFERENCE_BACKBONE};
use finermoe::config::{REFERENCE_HIDDEN, REFERENCE_INTERMEDIATE};
use finermoe::FineRConfig;

fn main() -> finermoe::Result<()> {
    println!("G_I G_O experts active  params/B  active/B  GFLOP/token/layer");
    for g_i in [2, 4, 8, 16, 32, 64] {
        for g_o in [2, 4, 8] {
            let cfg = FineRConfig::new(REFERENCE_HIDDEN, REFERENCE_INTERMEDIATE, g_i, 1, g_o, 2, 1);
            let layer = cost_report(&cfg, 1, false)?;
            let (total, active) = REFERENCE_BACKBONE.model_params(&layer);
            let d = cfg.derive();
            println!(
                "{g_i:>3} {g_o:>3} {:>7} {:>6} {:>9.2} {:>9.2} {:>18.4}",
                d.n_experts,
                d.n_active,
                total as f64 / 1e9,
                active as f64 / 1e9,
                layer.flops_per_token() as f64 / 1e9
            );
        }
    }
    Ok(())
}
