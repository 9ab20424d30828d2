//! Save a model, load it back, and restore only the encoder into a model
//! with a different initialisation.

use foveate::cli::parse_config;
use foveate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use foveate::pipeline::init_model;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = parse_config(None, &["model.layers=2".into(), "model.dim=32".into()])?;
    let model = init_model(&config)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.fve");
    save_checkpoint(&model.store, &path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!("{} parameters, {bytes} bytes", model.store.len());

    let loaded = load_checkpoint(&path)?;
    let mut other = parse_config(None, &["model.layers=2".into(), "model.dim=32".into()])?;
    other.seed += 1;
    let mut fresh = init_model(&other)?;
    let restored = loaded.restore(&mut fresh.store, &["encoder."])?;
    let same = |a: &Checkpoint, b: &Checkpoint, prefix: &str| {
        a.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .all(|(n, t)| b.get(n) == Some(t))
    };
    let now = Checkpoint::from_store(&fresh.store);
    println!("restored {restored} encoder tensors");
    println!("encoder equal: {}", same(&loaded, &now, "encoder."));
    println!("policy equal:  {}", same(&loaded, &now, "policy."));
    Ok(())
}
