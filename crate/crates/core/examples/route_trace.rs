//! Walk one token through the router: group top-k, candidate choice, and
//! the intersection that decides which experts run.
//!
//! ```text
//! cargo run --example route_trace
//! ```

use finermoe::router::{route, softmax_rows};
use finermoe::{FineRConfig, Matrix};

fn main() -> finermoe::Result<()> {
    // 2 output components x 2 candidates, 2 experts per group, top-1 per group
    let cfg = FineRConfig::new(4, 4, 2, 1, 2, 2, 1);
    let mut score = Matrix::new(1, 8, vec![0.3f64, 1.2, 0.1, 0.4, 2.0, -1.0, 0.2, 0.6])?;
    softmax_rows(&mut score)?;
    let d = route(&score, &cfg)?;

    println!("scores      {:.3?}", score.row(0));
    println!("sum mask    {:?}", d.sum_mask);
    println!("group sums  {:.3?}", d.cc_score.row(0));
    println!("candidates  {:?}", d.token_cc_act(0));
    println!("final mask  {:?}", d.final_mask);
    println!("experts     {:?}", d.token_indices(0));
    println!("weights     {:.3?}", d.token_probs(0));

    // a tie inside a group goes to the lower index
    let c = FineRConfig::new(2, 4, 2, 1, 1, 2, 1);
    let d = route(&Matrix::new(1, 4, vec![0.1f64, 0.2, 0.35, 0.35])?, &c)?;
    println!("tie case    experts {:?} weights {:?}", d.indices, d.probs.data());
    Ok(())
}
