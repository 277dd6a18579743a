//! Experiment runner: configuration, presets, subcommands, artifact files.

use crate::error::Result;

pub fn main_entry() -> Result<()> {
    Ok(())
}
