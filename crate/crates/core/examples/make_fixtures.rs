//! Regenerates the bundled test images under `tests/data/`.
//!
//! cargo run -p gramtex --example make_fixtures

use std::path::Path;

use gramtex::fixtures::{natural_texture, PeriodicTexture};
use gramtex::save_ppm;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    std::fs::create_dir_all(dir.join("calibration"))?;
    save_ppm(&natural_texture(64, 64, 0), dir.join("texture64.ppm"))?;
    save_ppm(&PeriodicTexture::new(16, 0).render(64, 64, 0, 0), dir.join("tile64.ppm"))?;
    for i in 0..10 {
        save_ppm(&natural_texture(32, 32, 100 + i), dir.join(format!("calibration/cal{i:02}.ppm")))?;
    }
    println!("wrote fixtures to {}", dir.display());
    Ok(())
}
