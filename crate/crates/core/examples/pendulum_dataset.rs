//! Generates a small pendulum dataset, writes it to disk, reads it back and
//! exports the first sequence as PGM frames.
//! Usage: pendulum_dataset [out_dir]

use std::path::PathBuf;

use smr_lab::pendulum::{frame_pgm, generate_dataset, load_dataset, save_dataset, PendulumConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir).join("pendulum_example");
    std::fs::create_dir_all(&dir)?;
    let cfg = PendulumConfig {
        train_size: 20,
        test_size: 5,
        ..Default::default()
    };
    let data = generate_dataset(&cfg)?;
    let path = dir.join("dataset.bin");
    save_dataset(&data, &path)?;
    assert_eq!(load_dataset(&path)?, data);
    let s = &data.train[0];
    let side = cfg.image_side;
    for (k, frame) in s.frames.chunks(side * side).enumerate() {
        std::fs::write(dir.join(format!("frame{k:02}.pgm")), frame_pgm(frame, side))?;
    }
    let corrupted = s.mask.iter().filter(|m| **m).count();
    println!(
        "wrote {} ({} bytes); sample 0 spans t = {:.2}..{:.2} with {corrupted} corrupted frames",
        path.display(),
        std::fs::metadata(&path)?.len(),
        s.timestamps[0],
        s.timestamps[cfg.seq_len - 1]
    );
    Ok(())
}
