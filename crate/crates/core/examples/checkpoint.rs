//! Save a layer to an FRM1 file, read it back and inspect the manifest.
//!
//! ```text
//! cargo run --example checkpoint
//! ```

use finermoe::checkpoint::decode_manifest;
use finermoe::{read_moe, upcycle, write_model, Matrix, Preset, Rng, SwiGluWeights};

fn main() -> finermoe::Result<()> {
    let mut rng = Rng::new(9);
    let dense = SwiGluWeights::<f32>::random(32, 64, 32, 0.05, &mut rng);
    let model = upcycle(&dense, &Preset::FineRMoEBase.config(32, 64), 9)?;

    let dir = std::env::temp_dir().join("finermoe-example");
    std::fs::create_dir_all(&dir).map_err(|e| finermoe::Error::InvalidArgument(e.to_string()))?;
    let path = dir.join("base.frm");
    write_model(model.clone(), &path)?;

    let bytes = std::fs::read(&path).map_err(|e| finermoe::Error::InvalidArgument(e.to_string()))?;
    let (manifest, payload) = decode_manifest(&bytes)?;
    println!("{}: {} bytes, {} tensors, {} payload bytes", path.display(), bytes.len(), manifest.tensors.len(), payload.len());
    for t in manifest.tensors.iter().take(4) {
        println!("  {:<16} {:?} at {}", t.name, t.shape, t.offset);
    }

    let back = read_moe(&path)?;
    let x: Matrix = rng.normal_matrix(4, 32, 1.0);
    println!("identical after reload: {}", back == model && back.forward(&x)?.y == model.forward(&x)?.y);
    Ok(())
}
