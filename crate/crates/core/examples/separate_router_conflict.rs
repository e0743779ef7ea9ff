//! With two routers, the concatenation-level choice can land on a group the
//! sum-level router scored lower.
//!
//! ```text
//! cargo run --example separate_router_conflict
//! ```

use finermoe::router::{route, route_separate};
use finermoe::{FineRConfig, Matrix, RouterMode};

fn main() -> finermoe::Result<()> {
    let cfg = FineRConfig::new(2, 4, 2, 1, 1, 2, 2).with_router_mode(RouterMode::Separate);
    let score_sum = Matrix::new(1, 4, vec![0.4f64, 0.3, 0.2, 0.1])?;
    let score_cc = Matrix::new(1, 2, vec![0.2f64, 0.8])?;

    let single = route(&score_sum, &cfg)?;
    let separate = route_separate(&score_sum, &score_cc, &cfg)?;
    let mass = |d: &finermoe::RoutingDecision<f64>| d.probs.data().iter().sum::<f64>();

    println!("single router    experts {:?} total weight {:.2}", single.indices, mass(&single));
    println!("separate routers experts {:?} total weight {:.2}", separate.indices, mass(&separate));
    Ok(())
}
