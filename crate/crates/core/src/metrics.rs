//! Error-fixing and retention metrics.
//!
//! Per episode `t`, after refinement:
//! - EFR: accuracy of `f_t` on `E_t` (absent when `E_t` is empty)
//! - UKR: accuracy on a fixed sample of upstream data
//! - OKR: accuracy on a sample of all earlier queries `Q_{<t}` (absent at t = 1)
//! - CSR: `1 - |E_{<t}| / |Q_{<t}|` (absent at t = 1)
//! - KG: accuracy on the stream's held-out set
//!
//! OEC is the mean of UKR, OKR, CSR and KG. All values are fractions.

use std::io::{Read, Write};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cluster_store::Example;
use crate::error::{Error, Result};
use crate::learner::LearnerState;
use crate::rng;

fn default_interval() -> usize {
    1
}
fn default_ukr() -> usize {
    512
}
fn default_okr() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSettings {
    /// UKR/OKR/KG are evaluated every `eval_interval` episodes and at the last one.
    #[serde(default = "default_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_ukr")]
    pub ukr_sample: usize,
    #[serde(default = "default_okr")]
    pub okr_sample: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            eval_interval: default_interval(),
            ukr_sample: default_ukr(),
            okr_sample: default_okr(),
        }
    }
}

/// One row of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub t: usize,
    /// `|Q_t|`
    pub queries: usize,
    /// `|E_t|`
    pub errors: usize,
    pub efr: Option<f64>,
    pub ukr: Option<f64>,
    pub okr: Option<f64>,
    pub csr: Option<f64>,
    pub kg: Option<f64>,
    /// False when UKR/OKR/KG were carried forward from the last evaluation.
    pub evaluated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub settings: MetricSettings,
    pub sample_seed: u64,
    pub records: Vec<MetricRecord>,
}

/// Accuracy of `f_t` on the errors it was refined on.
pub fn efr(f_t: &LearnerState, errors: &[Example]) -> Result<Option<f64>> {
    f_t.accuracy(errors)
}

pub fn ukr(f_t: &LearnerState, upstream_sample: &[Example]) -> Result<Option<f64>> {
    f_t.accuracy(upstream_sample)
}

pub fn okr(f_t: &LearnerState, past_query_sample: &[Example]) -> Result<Option<f64>> {
    f_t.accuracy(past_query_sample)
}

pub fn kg(f_t: &LearnerState, heldout: &[Example]) -> Result<Option<f64>> {
    f_t.accuracy(heldout)
}

/// `1 - past_errors / past_queries`; absent before any query was seen.
pub fn csr(past_errors: usize, past_queries: usize) -> Option<f64> {
    (past_queries > 0).then(|| 1.0 - past_errors as f64 / past_queries as f64)
}

/// Mean of UKR, OKR, CSR and KG; absent unless all four are present.
pub fn oec(ukr: Option<f64>, okr: Option<f64>, csr: Option<f64>, kg: Option<f64>) -> Option<f64> {
    Some((ukr? + okr? + csr? + kg?) / 4.0)
}

/// Builds a trace episode by episode.
#[derive(Debug, Clone)]
pub struct MetricRecorder {
    settings: MetricSettings,
    sample_seed: u64,
    total_episodes: usize,
    upstream_sample: Vec<Example>,
    heldout: Vec<Example>,
    past_queries: Vec<Example>,
    past_errors: usize,
    records: Vec<MetricRecord>,
}

impl MetricRecorder {
    pub fn new(
        settings: MetricSettings,
        sample_seed: u64,
        total_episodes: usize,
        upstream_pool: &[Example],
        heldout: &[Example],
    ) -> Result<Self> {
        if settings.eval_interval == 0 {
            return Err(Error::config("eval_interval must be at least 1"));
        }
        let mut rng = rng::substream(sample_seed, "ukr-sample", 0);
        let n = settings.ukr_sample.min(upstream_pool.len());
        let mut idx = index::sample(&mut rng, upstream_pool.len(), n).into_vec();
        idx.sort_unstable();
        let upstream_sample = idx.into_iter().map(|i| upstream_pool[i].clone()).collect();
        Ok(Self {
            settings,
            sample_seed,
            total_episodes,
            upstream_sample,
            heldout: heldout.to_vec(),
            past_queries: Vec::new(),
            past_errors: 0,
            records: Vec::new(),
        })
    }

    pub fn upstream_sample(&self) -> &[Example] {
        &self.upstream_sample
    }

    /// The OKR sample at episode `t`: `min(okr_sample, |Q_{<t}|)` occurrences
    /// of earlier queries drawn without replacement.
    pub fn past_query_sample(&self, t: usize) -> Vec<Example> {
        let n = self.settings.okr_sample.min(self.past_queries.len());
        let mut rng = rng::substream(self.sample_seed, "okr-sample", t as u64);
        let mut idx = index::sample(&mut rng, self.past_queries.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.past_queries[i].clone()).collect()
    }

    fn evaluates_at(&self, t: usize) -> bool {
        t.is_multiple_of(self.settings.eval_interval) || t == self.total_episodes || t == 1
    }

    /// Records episode `t` given the refined model, the episode's queries and
    /// the errors the previous model made on them.
    pub fn record(
        &mut self,
        t: usize,
        f_t: &LearnerState,
        queries: &[Example],
        errors: &[Example],
    ) -> Result<&MetricRecord> {
        let efr = efr(f_t, errors)?;
        let csr = csr(self.past_errors, self.past_queries.len());
        let (ukr, okr, kg, evaluated) = if self.evaluates_at(t) {
            let past = self.past_query_sample(t);
            (
                ukr(f_t, &self.upstream_sample)?,
                okr(f_t, &past)?,
                kg(f_t, &self.heldout)?,
                true,
            )
        } else {
            let last = self.records.last().expect("episode 1 is always evaluated");
            (last.ukr, last.okr, last.kg, false)
        };
        self.records.push(MetricRecord {
            t,
            queries: queries.len(),
            errors: errors.len(),
            efr,
            ukr,
            okr,
            csr,
            kg,
            evaluated,
        });
        self.past_queries.extend_from_slice(queries);
        self.past_errors += errors.len();
        Ok(self.records.last().expect("just pushed"))
    }

    /// Single final record for a model trained offline on the whole stream:
    /// `past_queries` is `Q_{<t}`, CSR is the success rate of `f_t` on it and
    /// EFR its accuracy on all collected errors.
    pub fn record_offline(
        &mut self,
        t: usize,
        f_t: &LearnerState,
        past_queries: &[Example],
        all_errors: &[Example],
    ) -> Result<&MetricRecord> {
        self.past_queries = past_queries.to_vec();
        let mut wrong = 0;
        for ex in past_queries {
            wrong += usize::from(!f_t.is_correct(ex)?);
        }
        let past = self.past_query_sample(t);
        self.records.push(MetricRecord {
            t,
            queries: past_queries.len(),
            errors: wrong,
            efr: efr(f_t, all_errors)?,
            ukr: ukr(f_t, &self.upstream_sample)?,
            okr: okr(f_t, &past)?,
            csr: csr(wrong, past_queries.len()),
            kg: kg(f_t, &self.heldout)?,
            evaluated: true,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn finish(self) -> MetricTrace {
        MetricTrace {
            settings: self.settings,
            sample_seed: self.sample_seed,
            records: self.records,
        }
    }
}

/// One value per metric; any may be absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub efr: Option<f64>,
    pub ukr: Option<f64>,
    pub okr: Option<f64>,
    pub csr: Option<f64>,
    pub kg: Option<f64>,
    pub oec: Option<f64>,
}

impl MetricSummary {
    pub fn with_oec(mut self) -> Self {
        self.oec = oec(self.ukr, self.okr, self.csr, self.kg);
        self
    }
}

/// Averages over the run (`avg`) and final values (`last`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub avg: MetricSummary,
    pub last: MetricSummary,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn last_of(values: impl DoubleEndedIterator<Item = Option<f64>>) -> Option<f64> {
    values.rev().flatten().next()
}

/// AVG(X) is the mean over episodes where X is present; X@T is its last
/// present value. OEC is computed from the four aggregated components.
pub fn aggregate(trace: &MetricTrace) -> AggregateReport {
    let r = &trace.records;
    macro_rules! summary {
        ($f:ident) => {
            MetricSummary {
                efr: $f(r.iter().map(|x| x.efr)),
                ukr: $f(r.iter().map(|x| x.ukr)),
                okr: $f(r.iter().map(|x| x.okr)),
                csr: $f(r.iter().map(|x| x.csr)),
                kg: $f(r.iter().map(|x| x.kg)),
                oec: None,
            }
            .with_oec()
        };
    }
    AggregateReport {
        avg: summary!(mean_of),
        last: summary!(last_of),
    }
}

/// CSR column recomputed from the stored per-episode counts.
pub fn recompute_csr(trace: &MetricTrace) -> Vec<Option<f64>> {
    let (mut errors, mut queries) = (0, 0);
    trace
        .records
        .iter()
        .map(|r| {
            let v = csr(errors, queries);
            errors += r.errors;
            queries += r.queries;
            v
        })
        .collect()
}

/// Renders a fraction as a percentage with two decimals, `-` when absent.
pub fn percent(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", x * 100.0),
        None => "-".to_string(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    t: usize,
    queries: usize,
    errors: usize,
    efr: Option<f64>,
    ukr: Option<f64>,
    okr: Option<f64>,
    csr: Option<f64>,
    kg: Option<f64>,
    evaluated: bool,
}

/// Writes the trace rows as CSV, one row per episode; absent values are empty.
pub fn write_trace_csv<W: Write>(trace: &MetricTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &trace.records {
        w.serialize(CsvRow {
            t: r.t,
            queries: r.queries,
            errors: r.errors,
            efr: r.efr,
            ukr: r.ukr,
            okr: r.okr,
            csr: r.csr,
            kg: r.kg,
            evaluated: r.evaluated,
        })?;
    }
    w.flush().map_err(|e| Error::io("<trace writer>", e))?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.deserialize::<CsvRow>() {
        let r = row?;
        for v in [r.efr, r.ukr, r.okr, r.csr, r.kg].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("trace value {v} at t = {} outside [0, 1]", r.t)));
            }
        }
        out.push(MetricRecord {
            t: r.t,
            queries: r.queries,
            errors: r.errors,
            efr: r.efr,
            ukr: r.ukr,
            okr: r.okr,
            csr: r.csr,
            kg: r.kg,
            evaluated: r.evaluated,
        });
    }
    Ok(out)
}
