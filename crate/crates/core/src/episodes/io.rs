//! JSON-lines episode files.
//!
//! Line 1 is a header `{format_version, input_dim, n_way, k_shot,
//! q_per_class}`. Every following line is one episode
//! `{class_map, support: [[[x…], label], …], query: […]}`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::episode::{Episode, Sample};
use crate::error::{Error, Result};
use crate::numfmt::F17Slice;

pub const EPISODE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeHeader {
    pub format_version: u32,
    pub input_dim: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
}

#[derive(Serialize)]
struct EpisodeOut<'a> {
    class_map: &'a [u32],
    support: Vec<(F17Slice<'a>, usize)>,
    query: Vec<(F17Slice<'a>, usize)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeIn {
    class_map: Vec<u32>,
    support: Vec<(Vec<f64>, usize)>,
    query: Vec<(Vec<f64>, usize)>,
}

fn pairs(set: &[Sample]) -> Vec<(F17Slice<'_>, usize)> {
    set.iter().map(|s| (F17Slice(&s.x), s.label)).collect()
}

fn header_of(e: &Episode) -> EpisodeHeader {
    EpisodeHeader {
        format_version: EPISODE_FORMAT_VERSION,
        input_dim: e.input_dim(),
        n_way: e.n_way,
        k_shot: e.k_shot,
        q_per_class: e.q_per_class,
    }
}

pub fn episodes_to_string(episodes: &[Episode]) -> Result<String> {
    let first = episodes.first().ok_or_else(|| Error::arg("no episodes to write"))?;
    let header = header_of(first);
    let mut out = serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?;
    out.push('\n');
    for (i, e) in episodes.iter().enumerate() {
        e.validate()?;
        if header_of(e) != header {
            return Err(Error::arg(format!("episode {i} does not match the shape of episode 0")));
        }
        let rec = EpisodeOut {
            class_map: &e.class_map,
            support: pairs(&e.support),
            query: pairs(&e.query),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        let _ = writeln!(out, "{line}");
    }
    Ok(out)
}

pub fn episodes_from_str(text: &str) -> Result<Vec<Episode>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, htext)) = lines.next() else {
        return Err(Error::Parse("no episodes: file is empty".into()));
    };
    let header: EpisodeHeader =
        serde_json::from_str(htext).map_err(|e| Error::Parse(format!("line {}: bad header: {e}", hline + 1)))?;
    if header.format_version != EPISODE_FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "line {}: format_version {} is not supported",
            hline + 1,
            header.format_version
        )));
    }
    let mut episodes = Vec::new();
    for (ln, l) in lines {
        let lineno = ln + 1;
        let rec: EpisodeIn = serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
        let to_samples = |v: Vec<(Vec<f64>, usize)>| -> Vec<Sample> {
            v.into_iter().map(|(x, label)| Sample { x, label }).collect()
        };
        let ep = Episode {
            n_way: header.n_way,
            k_shot: header.k_shot,
            q_per_class: header.q_per_class,
            support: to_samples(rec.support),
            query: to_samples(rec.query),
            class_map: rec.class_map,
        };
        ep.validate().map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
        if ep.input_dim() != header.input_dim {
            return Err(Error::Parse(format!(
                "line {lineno}: vectors have {} values but header says {}",
                ep.input_dim(),
                header.input_dim
            )));
        }
        episodes.push(ep);
    }
    if episodes.is_empty() {
        return Err(Error::Parse("no episodes: file has only a header".into()));
    }
    Ok(episodes)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let text = episodes_to_string(episodes)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    episodes_from_str(&text)
}
