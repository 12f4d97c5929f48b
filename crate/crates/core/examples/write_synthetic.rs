//! Regenerates the bundled synthetic suite.
//!
//! ```text
//! cargo run --example write_synthetic -- data/synthetic 7
//! ```

use std::path::PathBuf;

fn main() -> mtkd::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/synthetic".into()));
    let seed = match args.next() {
        Some(s) => s
            .parse()
            .map_err(|_| mtkd::Error::Config(format!("invalid seed {s:?}")))?,
        None => 7,
    };
    mtkd::data::synthetic::write_suite(&dir, seed)?;
    println!("wrote the synthetic suite (seed {seed}) to {}", dir.display());
    Ok(())
}
