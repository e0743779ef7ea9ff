//! Compare the hand-written backward pass with central differences.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use finermoe::loss_grad::{fd_check, FdOptions, MeanSquare, RegressionWithBalance};
use finermoe::{FineRConfig, MoEModel, Rng, RouterMode};

fn main() -> finermoe::Result<()> {
    let variants = [
        ("base", FineRConfig::new(8, 16, 4, 1, 2, 2, 1)),
        ("concat proj", FineRConfig::new(8, 16, 4, 1, 2, 2, 1).with_concat_proj(true)),
        ("no shared", FineRConfig::new(8, 16, 4, 1, 2, 2, 1).with_share_expert(false)),
        ("two routers", FineRConfig::new(8, 16, 4, 1, 2, 2, 1).with_router_mode(RouterMode::Separate)),
    ];
    for (i, (name, cfg)) in variants.into_iter().enumerate() {
        let mut rng = Rng::new(i as u64);
        let mut model = MoEModel::<f64>::random(cfg, 0.35, &mut rng)?;
        model.router.weight = rng.normal_matrix(8, model.router.n_out(), 1.0);
        let x = rng.normal_matrix(4, 8, 1.0);
        let mse = fd_check(&x, &model, &MeanSquare, FdOptions::default())?;
        let reg = RegressionWithBalance {
            target: rng.normal_matrix(4, 8, 1.0),
            alpha: 0.001,
        };
        let bal = fd_check(&x, &model, &reg, FdOptions::default())?;
        println!(
            "{name:<12} mean-square {:.2e} ({} coords)  regression+balance {:.2e} ({} coords, {} skipped)",
            mse.max_rel_error, mse.checked, bal.max_rel_error, bal.checked, bal.skipped
        );
    }
    Ok(())
}
