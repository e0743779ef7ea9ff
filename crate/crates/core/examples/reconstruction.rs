//! Right after upcycling, summing every group's first candidate rebuilds the
//! dense FFN output.
//!
//! ```text
//! cargo run --example reconstruction
//! ```

use finermoe::moe_layer::forward_forced_sparse;
use finermoe::oracle::dense_ffn_forward;
use finermoe::{upcycle, FineRConfig, Matrix, Rng, SwiGluWeights};

fn main() -> finermoe::Result<()> {
    let mut rng = Rng::new(3);
    let dense = SwiGluWeights::<f32>::random(64, 128, 64, 0.1, &mut rng);
    let x: Matrix = rng.normal_matrix(16, 64, 1.0);
    let want = dense_ffn_forward(&x, &dense)?;

    for (g_i, g_o, r_o) in [(1, 1, 1), (4, 2, 2), (16, 4, 1), (32, 8, 2)] {
        let cfg = FineRConfig::new(64, 128, g_i, 1, g_o, r_o, 1);
        let model = upcycle(&dense, &cfg, 0)?;
        let err = forward_forced_sparse(&x, &model)?.max_rel_diff(&want)?;
        println!("G_I={g_i:<2} G_O={g_o} R_O={r_o}  max rel error {err:.2e}");
    }
    Ok(())
}
