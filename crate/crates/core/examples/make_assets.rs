//! Regenerates the bundled test signals under `assets/`.
//!
//! Run from the workspace root: `cargo run -p insp --example make_assets`.

use std::fs;
use std::path::Path;

use insp::signal::synth::{scene, tone};
use insp::signal::{save_pgm, save_wav};

fn main() -> insp::Result<()> {
    let root = Path::new("assets");
    let images = root.join("images");
    let audio = root.join("audio");
    for dir in [&images, &audio] {
        fs::create_dir_all(dir).map_err(|e| insp::Error::io(dir, e))?;
    }
    for seed in 1..=3 {
        let path = images.join(format!("scene{seed}.pgm"));
        fs::write(&path, save_pgm(&scene(seed, 64)?)?).map_err(|e| insp::Error::io(&path, e))?;
    }
    let path = audio.join("tone.wav");
    fs::write(&path, save_wav(&tone(440.0, 0.3, 8000, 1.0)?, 8000)?).map_err(|e| insp::Error::io(&path, e))?;
    Ok(())
}
