//! Cluster files.
//!
//! Line-delimited JSON. Line 1 is the header record
//! `{"format":"cmr-clusters","version":1,"d":..,"k":..,"n":..,"gen_spec":{..}}`;
//! every following line is one example with fields in this fixed order:
//! `{"pool":"train"|"heldout","id":..,"cluster_id":..,"label":..,"features":[..]}`.
//! Examples are written pool by pool in id order, so two files generated from
//! the same spec are byte-identical and diff cleanly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{check_example, ClusterSet, Example, GeneratorSpec, Pool};
use crate::error::{Error, Result};
use crate::jsonl::{lines, Line};

pub const FORMAT: &str = "cmr-clusters";
pub const VERSION: u64 = 1;

#[derive(Serialize)]
struct Header<'a> {
    format: &'static str,
    version: u64,
    d: usize,
    k: usize,
    n: usize,
    gen_spec: &'a GeneratorSpec,
}

#[derive(Serialize)]
struct Record<'a> {
    pool: &'static str,
    id: u64,
    cluster_id: usize,
    label: usize,
    features: &'a [f64],
}

pub fn write_clusters<W: Write>(set: &ClusterSet, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT,
        version: VERSION,
        d: set.d(),
        k: set.k(),
        n: set.n(),
        gen_spec: set.gen_spec(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(|e| Error::io("<cluster writer>", e))?;
    for i in 0..=set.n() {
        for (pool, examples) in [(Pool::Train, set.cluster(i)), (Pool::Heldout, set.heldout(i))] {
            for ex in examples {
                let rec = Record {
                    pool: pool.as_str(),
                    id: ex.id,
                    cluster_id: ex.cluster_id,
                    label: ex.label,
                    features: &ex.features,
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n").map_err(|e| Error::io("<cluster writer>", e))?;
            }
        }
    }
    Ok(())
}

pub fn save_clusters(set: &ClusterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_clusters(set, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_clusters(path: impl AsRef<Path>) -> Result<ClusterSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_clusters(&text, &path.display().to_string())
}

/// Parses the text of a cluster file. `source` names the file in errors.
pub fn parse_clusters(text: &str, source: &str) -> Result<ClusterSet> {
    let mut it = lines(text);
    let Some((number, first)) = it.next() else {
        return Err(Line { source, number: 1 }.err("<header>", "empty file"));
    };
    let line = Line { source, number };
    let header = line.object(first)?;
    line.expect_format(&header, FORMAT, VERSION)?;
    let d = line.usize(&header, "d")?;
    let k = line.usize(&header, "k")?;
    let n = line.usize(&header, "n")?;
    let gen_spec: GeneratorSpec = line.typed(&header, "gen_spec")?;
    if gen_spec.d != d || gen_spec.k != k || gen_spec.n() != n {
        return Err(line.err("gen_spec", "disagrees with header d/k/n"));
    }
    if n >= 1 << 20 {
        return Err(line.err("n", "too many clusters"));
    }

    let mut clusters = vec![Vec::new(); n + 1];
    let mut heldout = vec![Vec::new(); n + 1];
    for (number, text) in it {
        let line = Line { source, number };
        let rec = line.object(text)?;
        let pool = match line.str(&rec, "pool")? {
            "train" => Pool::Train,
            "heldout" => Pool::Heldout,
            other => return Err(line.err("pool", format!("unknown pool `{other}`"))),
        };
        let id = line.u64(&rec, "id")?;
        let cluster_id = line.usize(&rec, "cluster_id")?;
        let label = line.usize(&rec, "label")?;
        let features = line.f64_array(&rec, "features")?;
        if features.len() != d {
            return Err(line.err(
                "features",
                format!("example {id}: {} features, expected d = {d}", features.len()),
            ));
        }
        let ex = Example {
            id,
            features,
            label,
            cluster_id,
        };
        check_example(&ex, d, k, n)?;
        match pool {
            Pool::Train => clusters[cluster_id].push(ex),
            Pool::Heldout => heldout[cluster_id].push(ex),
        }
    }
    ClusterSet::new(d, k, gen_spec, clusters, heldout)
}
