//! A short training run on a synthetic regression target, printing the
//! regression and balance losses as CSV.
//!
//! ```text
//! cargo run --release --example train_demo > curve.csv
//! ```

use finermoe::cli::train_demo;
use finermoe::{FineRConfig, Preset};

fn main() -> finermoe::Result<()> {
    // Routed outputs are weighted by raw softmax scores (about 1/N each), so
    // without the shared expert the layer output starts near zero and moves slowly.
    let variants = [
        ("base", Preset::FineRMoEBase.config(64, 128)),
        ("no_shared", FineRConfig { share_expert: false, ..Preset::FineRMoEBase.config(64, 128) }),
        ("S16A4", Preset::S16A4.config(64, 128)),
    ];
    println!("variant,step,lm_loss,balance_loss");
    for (name, cfg) in variants {
        for (step, lm, bal) in train_demo(&cfg, 300, 32, 2.0, 0)? {
            if step % 20 == 0 || step == 299 {
                println!("{name},{step},{lm:.6},{bal:.6}");
            }
        }
    }
    Ok(())
}
