use std::fs;
use std::path::Path;

use clap::Args;
use log::info;
use scnn_core::io::{format_track, write_snippet, RunConfig};
use scnn_core::synth::generate_corpus;

use crate::error::CliError;

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Number of snippets; defaults to the configured training count.
    #[arg(long)]
    pub count: Option<usize>,
    /// File name prefix, `<prefix>_0000.snip` and so on.
    #[arg(long, default_value = "snip")]
    pub prefix: String,
}

pub fn run(cfg: &RunConfig, out: &Path, args: &GenArgs) -> Result<(), CliError> {
    let count = args.count.unwrap_or(cfg.count);
    let corpus = generate_corpus(&cfg.scene(), count, cfg.seed)?;
    for (i, (snip, track)) in corpus.iter().enumerate() {
        let base = out.join(format!("{}_{i:04}", args.prefix));
        write_snippet(&base.with_extension("snip"), snip)?;
        fs::write(base.with_extension("track.csv"), format_track(track))?;
    }
    info!("wrote {count} snippets to {}", out.display());
    Ok(())
}
