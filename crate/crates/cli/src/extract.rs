use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use rayon::prelude::*;
use scnn_core::ica::extract;
use scnn_core::io::{write_model, RunConfig};

use crate::common::{ica_config, load_snippet, snippet_paths, stem, csv_writer};
use crate::error::CliError;

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Snippet files or directories of them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Basis sizes to fit, comma separated; defaults to the configured m.
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<usize>,
}

pub fn run(cfg: &RunConfig, out: &Path, args: &ExtractArgs) -> Result<(), CliError> {
    let paths = snippet_paths(&args.inputs)?;
    let ms = if args.m.is_empty() { vec![cfg.m] } else { args.m.clone() };
    let ica = ica_config(cfg);
    let jobs: Vec<(usize, usize)> = (0..paths.len()).flat_map(|i| ms.iter().map(move |&m| (i, m))).collect();
    let results = jobs
        .par_iter()
        .map(|&(i, m)| -> Result<_, CliError> {
            let (snip, _) = load_snippet(&paths[i])?;
            let model = extract(&snip, m, &ica)?;
            write_model(&out.join(format!("{}_m{m}.cant", stem(&paths[i]))), &model)?;
            Ok((i, m, snip.n(), model.recon_error))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut w = csv_writer(out, "extract.csv")?;
    w.write_record(["file", "m", "n", "m_over_n", "frame", "error_pct"])?;
    for (i, m, n, errs) in &results {
        for (t, e) in errs.iter().enumerate() {
            w.write_record([
                paths[*i].display().to_string(),
                m.to_string(),
                n.to_string(),
                format!("{:.4}", *m as f64 / *n as f64),
                t.to_string(),
                format!("{e:.6}"),
            ])?;
        }
    }
    w.flush()?;
    for &m in &ms {
        let mut means: Vec<f64> = results
            .iter()
            .filter(|r| r.1 == m)
            .map(|r| r.3.iter().sum::<f64>() / r.3.len() as f64)
            .collect();
        means.sort_by(f64::total_cmp);
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let p95 = means[((0.95 * means.len() as f64).ceil() as usize).max(1) - 1];
        info!("m={m}: mean error {mean:.3}%, p95 {p95:.3}% over {} snippets", means.len());
    }
    Ok(())
}
