//! Stream files.
//!
//! Line-delimited JSON. Line 1 is the header
//! `{"format":"cmr-stream","version":1,"clusters_sha256":..,"split":..,"config":{..}}`.
//! Then one record per episode,
//! `{"kind":"episode","t":..,"major_cluster":..,"b_u":..,"b_o":..,"b_o_major":..,"ids":[..]}`,
//! and a final `{"kind":"heldout","ids":[..]}` record listing the matched
//! held-out set. Examples are referenced by id; resolving them needs the
//! cluster file whose content hash the header names.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{episode_budget, Budget, Episode, QueryStream, Split, StreamConfig};
use crate::cluster_store::{ClusterSet, Pool};
use crate::error::{Error, Result};
use crate::jsonl::{lines, Line};

pub const FORMAT: &str = "cmr-stream";
pub const VERSION: u64 = 1;

#[derive(Serialize)]
struct Header<'a> {
    format: &'static str,
    version: u64,
    clusters_sha256: &'a str,
    split: Option<Split>,
    config: &'a StreamConfig,
}

#[derive(Serialize)]
struct EpisodeRecord {
    kind: &'static str,
    t: usize,
    major_cluster: usize,
    b_u: usize,
    b_o: usize,
    b_o_major: usize,
    ids: Vec<u64>,
}

#[derive(Serialize)]
struct HeldoutRecord {
    kind: &'static str,
    ids: Vec<u64>,
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io("<stream writer>", e))
}

pub fn write_stream<W: Write>(stream: &QueryStream, mut out: W) -> Result<()> {
    write_line(
        &mut out,
        &Header {
            format: FORMAT,
            version: VERSION,
            clusters_sha256: &stream.clusters_hash,
            split: stream.split,
            config: &stream.config,
        },
    )?;
    for ep in &stream.episodes {
        write_line(
            &mut out,
            &EpisodeRecord {
                kind: "episode",
                t: ep.t,
                major_cluster: ep.major_cluster,
                b_u: ep.budget.upstream,
                b_o: ep.budget.ood,
                b_o_major: ep.budget.major,
                ids: ep.ids(),
            },
        )?;
    }
    write_line(
        &mut out,
        &HeldoutRecord {
            kind: "heldout",
            ids: stream.heldout.iter().map(|e| e.id).collect(),
        },
    )
}

pub fn save_stream(stream: &QueryStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_stream(stream, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// A parsed but unresolved stream file: example ids only.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFile {
    pub clusters_hash: String,
    pub split: Option<Split>,
    pub config: StreamConfig,
    pub episodes: Vec<EpisodeIds>,
    pub heldout: Vec<u64>,
    source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeIds {
    pub t: usize,
    pub major_cluster: usize,
    pub budget: Budget,
    pub ids: Vec<u64>,
    line: usize,
}

/// Parses a stream file and checks everything that does not need the
/// cluster set: record order, episode numbering, and the budget arithmetic.
pub fn parse_stream_file(text: &str, source: &str) -> Result<StreamFile> {
    let mut it = lines(text);
    let Some((number, first)) = it.next() else {
        return Err(Line { source, number: 1 }.err("<header>", "empty file"));
    };
    let line = Line { source, number };
    let header = line.object(first)?;
    line.expect_format(&header, FORMAT, VERSION)?;
    let clusters_hash = line.str(&header, "clusters_sha256")?.to_string();
    let split: Option<Split> = line.typed(&header, "split")?;
    let config: StreamConfig = line.typed(&header, "config")?;
    config.validate().map_err(|e| line.err("config", e.to_string()))?;

    let mut episodes = Vec::new();
    let mut heldout = None;
    for (number, text) in it {
        let line = Line { source, number };
        let rec = line.object(text)?;
        if heldout.is_some() {
            return Err(line.err("kind", "record after the heldout record"));
        }
        match line.str(&rec, "kind")? {
            "episode" => {
                let t = line.usize(&rec, "t")?;
                if t != episodes.len() + 1 {
                    return Err(line.err("t", format!("expected episode {}", episodes.len() + 1)));
                }
                if t > config.episodes {
                    return Err(line.err("t", "more episodes than the config declares"));
                }
                let budget = Budget {
                    upstream: line.usize(&rec, "b_u")?,
                    ood: line.usize(&rec, "b_o")?,
                    major: line.usize(&rec, "b_o_major")?,
                };
                if budget != episode_budget(t, &config) {
                    return Err(line.err("b_u", "budgets disagree with the stream config"));
                }
                let ids = line.u64_array(&rec, "ids")?;
                if ids.len() != config.episode_size {
                    return Err(line.err(
                        "ids",
                        format!("{} ids, episode size is {}", ids.len(), config.episode_size),
                    ));
                }
                let mut seen = HashSet::new();
                if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
                    return Err(line.err("ids", format!("id {dup} repeats within the episode")));
                }
                episodes.push(EpisodeIds {
                    t,
                    major_cluster: line.usize(&rec, "major_cluster")?,
                    budget,
                    ids,
                    line: number,
                });
            }
            "heldout" => heldout = Some(line.u64_array(&rec, "ids")?),
            other => return Err(line.err("kind", format!("unknown record kind `{other}`"))),
        }
    }
    if episodes.len() != config.episodes {
        return Err(Line { source, number: 1 }.err(
            "config",
            format!("declares {} episodes, file has {}", config.episodes, episodes.len()),
        ));
    }
    let heldout = heldout.ok_or_else(|| Line { source, number: 1 }.err("heldout", "missing heldout record"))?;
    Ok(StreamFile {
        clusters_hash,
        split,
        config,
        episodes,
        heldout,
        source: source.to_string(),
    })
}

impl StreamFile {
    /// Resolves ids against `clusters`, checking the content hash and the
    /// per-episode cluster counts.
    pub fn resolve(&self, clusters: &ClusterSet) -> Result<QueryStream> {
        let found = clusters.content_hash();
        if found != self.clusters_hash {
            return Err(Error::HashMismatch {
                expected: self.clusters_hash.clone(),
                found,
            });
        }
        let n = clusters.n();
        let mut episodes = Vec::with_capacity(self.episodes.len());
        for ep in &self.episodes {
            let line = Line {
                source: &self.source,
                number: ep.line,
            };
            if (n >= 1 && !(1..=n).contains(&ep.major_cluster)) || (n == 0 && ep.major_cluster != 0) {
                return Err(line.err("major_cluster", "outside the cluster set"));
            }
            let mut examples = Vec::with_capacity(ep.ids.len());
            let (mut up, mut major, mut other) = (0, 0, 0);
            for &id in &ep.ids {
                let ex = match (clusters.get(id), clusters.pool_of(id)) {
                    (Some(ex), Some(Pool::Train)) => ex,
                    _ => return Err(line.err("ids", format!("id {id} is not a training example"))),
                };
                match ex.cluster_id {
                    0 => up += 1,
                    c if c == ep.major_cluster => major += 1,
                    _ => other += 1,
                }
                examples.push(ex.clone());
            }
            let b = ep.budget;
            if (up, major, other) != (b.upstream, b.major, b.ood - b.major) {
                return Err(line.err("ids", "cluster counts disagree with the episode budget"));
            }
            episodes.push(Episode {
                t: ep.t,
                major_cluster: ep.major_cluster,
                budget: b,
                examples,
            });
        }
        let heldout = self
            .heldout
            .iter()
            .map(|&id| match (clusters.get(id), clusters.pool_of(id)) {
                (Some(ex), Some(Pool::Heldout)) => Ok(ex.clone()),
                _ => Err(Error::Parse {
                    path: self.source.clone(),
                    line: 0,
                    field: "heldout".into(),
                    message: format!("id {id} is not a held-out example"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QueryStream {
            config: self.config.clone(),
            clusters_hash: self.clusters_hash.clone(),
            split: self.split,
            episodes,
            heldout,
        })
    }
}

pub fn load_stream(path: impl AsRef<Path>, clusters: &ClusterSet) -> Result<QueryStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_stream_file(&text, &path.display().to_string())?.resolve(clusters)
}
