//! Load-balancing loss on a balanced stream and on a collapsed one.
//!
//! ```text
//! cargo run --example balance_loss
//! ```

use finermoe::loss_grad::{balance_loss, BALANCE_ALPHA};
use finermoe::router::route;
use finermoe::{FineRConfig, Matrix, MoEModel, Rng};

fn main() -> finermoe::Result<()> {
    let cfg = FineRConfig::new(32, 64, 4, 1, 2, 2, 1);
    let mut rng = Rng::new(2);
    let model = MoEModel::<f32>::random(cfg, 0.1, &mut rng)?;
    let x: Matrix = rng.normal_matrix(512, 32, 1.0);
    let spread = balance_loss(&model.route_tokens(&x)?, BALANCE_ALPHA)?;
    println!("random router   loss {:.6}  max f {:.3}", spread.loss, spread.f.iter().cloned().fold(0.0, f64::max));

    let n = cfg.derive().n_experts;
    let collapsed = Matrix::from_fn(512, n, |_, k| if k < 4 { 0.25f32 } else { 0.0 });
    let r = balance_loss(&route(&collapsed, &cfg)?, BALANCE_ALPHA)?;
    println!("collapsed       loss {:.6}  max f {:.3}", r.loss, r.f.iter().cloned().fold(0.0, f64::max));
    Ok(())
}
