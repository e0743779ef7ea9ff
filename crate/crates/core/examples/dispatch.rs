//! Token dispatch: group routed (token, slot) pairs by expert, run each
//! expert once on its batch, and scatter the results back.
//!
//! ```text
//! cargo run --example dispatch
//! ```

use finermoe::moe_layer::{dispatch_experts, sparse_experts_forward, sparse_experts_forward_naive};
use finermoe::{build_dispatch_plan, FineRConfig, Matrix, MoEModel, Rng};

fn main() -> finermoe::Result<()> {
    let cfg = FineRConfig::new(16, 32, 4, 1, 2, 1, 2);
    let mut rng = Rng::new(5);
    let model = MoEModel::<f32>::random(cfg, 0.2, &mut rng)?;
    let x: Matrix = rng.normal_matrix(6, 16, 1.0);

    let decision = model.route_tokens(&x)?;
    let plan = build_dispatch_plan(&decision);
    for k in 0..plan.n_experts() {
        println!("expert {k}: tokens {:?}", plan.expert_tokens(k));
    }
    let per_pair = dispatch_experts(&x, &model, &plan)?;
    println!("routed pairs: {} rows of width {}", per_pair.rows(), per_pair.cols());

    let fast = sparse_experts_forward(&x, &model, &decision)?;
    let slow = sparse_experts_forward_naive(&x, &model, &decision)?;
    println!("batched == per-token loop: {}", fast == slow);
    Ok(())
}
