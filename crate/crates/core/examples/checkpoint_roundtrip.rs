//! Saves a model's parameters in the checkpoint format and restores them
//! into a freshly initialized model.

use smr_lab::nss::{ModelConfig, NssModel};
use smr_lab::ssm::checkpoint::Checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        channels: 3,
        layers: 2,
        ..Default::default()
    };
    let trained = NssModel::new(cfg.clone(), 1)?;
    let path = std::env::temp_dir().join("smrlab_example.ckpt");
    trained.checkpoint().save(&path)?;
    let mut fresh = NssModel::new(cfg, 2)?;
    let ck = Checkpoint::load(&path)?;
    ck.apply_to(&mut fresh.params)?;
    println!("{} tensors restored, identical = {}", ck.tensors.len(), fresh.params == trained.params);
    Ok(())
}
