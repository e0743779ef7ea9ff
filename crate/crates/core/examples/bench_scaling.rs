//! Time the sparse expert path as the number of active experts grows, and
//! print per-layer FLOPs for comparison.
//!
//! ```text
//! cargo run --release --example bench_scaling
//! ```

use finermoe::analysis::{bench_sparse_scaling, cost_report};
use finermoe::FineRConfig;

fn main() -> finermoe::Result<()> {
    let points = bench_sparse_scaling(512, 2048, 8, &[1, 2, 4, 8], 4096, 5, 0)?;
    for p in &points {
        let cfg = FineRConfig::new(512, 2048, 8, 1, 1, 1, p.t_i).with_share_expert(false);
        let flops = cost_report(&cfg, 1, false)?.sparse_flops;
        println!(
            "T_I={}  {:.2} ms  {:.3} ms/active  {:.1} MFLOP/token",
            p.t_i,
            p.secs * 1e3,
            p.secs_per_active() * 1e3,
            flops as f64 / 1e6
        );
    }
    Ok(())
}
