use std::fs;
use std::path::{Path, PathBuf};

use scnn_core::ica::{IcaConfig, Snippet};
use scnn_core::io::{parse_network, parse_track, read_snippet, RunConfig, TrackRow};
use scnn_core::layers::Network;
use scnn_core::train::build_network;

use crate::error::{at, CliError};

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => at(p, RunConfig::load(p))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn ica_config(cfg: &RunConfig) -> IcaConfig {
    IcaConfig {
        max_iter: cfg.ica_max_iter,
        tol: cfg.ica_tol,
        seed: cfg.seed,
    }
}

/// Snippet files named directly or found (sorted) inside named directories.
pub fn snippet_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "snip"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no snippet files given".into()));
    }
    Ok(out)
}

/// `clip.snip` pairs with `clip.track.csv`.
pub fn track_path(snippet: &Path) -> PathBuf {
    snippet.with_extension("track.csv")
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "snippet".into(), |s| s.to_string_lossy().into_owned())
}

/// Snippet plus its track, if a track file sits next to it.
pub fn load_snippet(path: &Path) -> Result<(Snippet, Option<Vec<TrackRow>>), CliError> {
    let snip = at(path, read_snippet(path))?;
    let tp = track_path(path);
    let track = if tp.exists() {
        let text = at(&tp, fs::read_to_string(&tp))?;
        Some(at(&tp, parse_track(&text))?)
    } else {
        None
    };
    Ok((snip, track))
}

pub fn network_for(cfg: &RunConfig) -> Result<Network, CliError> {
    let described = if cfg.network.is_empty() {
        None
    } else {
        let p = Path::new(&cfg.network);
        Some(at(p, fs::read_to_string(p).map_err(CliError::from).and_then(|t| Ok(parse_network(&t)?)))?)
    };
    Ok(build_network(cfg, described)?)
}

pub fn csv_writer(out_dir: &Path, name: &str) -> Result<csv::Writer<fs::File>, CliError> {
    Ok(csv::Writer::from_path(out_dir.join(name))?)
}
