//! Regenerates the committed synthetic fixtures under `fixtures/`.

use std::path::PathBuf;

use vemfuse_core::fixtures::{generate_split_signal, random_dataset, write_dataset, SyntheticSpec};

fn main() -> vemfuse_core::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let (g, s) = random_dataset(1000, 0)?;
    write_dataset(&root.join("synthetic1000"), &g, &s)?;
    let sig = generate_split_signal(&SyntheticSpec::default())?;
    write_dataset(&root.join("split_signal"), &sig.graph, &sig.split)?;
    Ok(())
}
