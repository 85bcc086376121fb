//! Lifelong evaluation: filtered ranking over accumulated test sets after
//! every snapshot, importance heatmaps and compression sweeps.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::decoupler::{apply_semantic_decoupling, assign_static_pointers, compression_ratio, recompress, DecouplingStats};
use crate::error::{Error, Result};
use crate::inference::{InferenceOptions, Predictor, Query, RankResult, SkipReason};
use crate::kg::{accumulated_filter_set, GrowingKg, TrainingSource, Triple};
use crate::store::EmbeddingStore;
use crate::trainer::{train_snapshot, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_queries: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    /// Metrics of a list of ranks, reduced in list order.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return Self {
                n_queries: 0,
                mrr: 0.0,
                hits1: 0.0,
                hits3: 0.0,
                hits10: 0.0,
            };
        }
        let mut rr = 0.0f64;
        let mut h = [0usize; 3];
        for &r in ranks {
            rr += 1.0 / r as f64;
            for (slot, m) in h.iter_mut().zip([1, 3, 10]) {
                if r <= m {
                    *slot += 1;
                }
            }
        }
        let nf = n as f64;
        Self {
            n_queries: n,
            mrr: rr / nf,
            hits1: h[0] as f64 / nf,
            hits3: h[1] as f64 / nf,
            hits10: h[2] as f64 / nf,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub unknown_relation: usize,
    pub unrepresentable_anchor: usize,
    pub unrepresentable_gold: usize,
}

impl SkipCounts {
    fn add(&mut self, reason: &SkipReason) {
        match reason {
            SkipReason::UnknownRelation => self.unknown_relation += 1,
            SkipReason::UnrepresentableAnchor => self.unrepresentable_anchor += 1,
            SkipReason::UnrepresentableGold => self.unrepresentable_gold += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.unknown_relation + self.unrepresentable_anchor + self.unrepresentable_gold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model_snapshot: usize,
    /// `None` for the aggregate over all test sets so far.
    pub test_snapshot: Option<usize>,
    pub metrics: Metrics,
    pub skipped: SkipCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model_snapshot: usize,
    /// One cell per test set `Q_0..=Q_i`.
    pub cells: Vec<Cell>,
    pub aggregate: Cell,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_CSV_HEADER: &str = "model_snapshot,test_snapshot,n_queries,mrr,hits1,hits3,hits10";

impl MetricsMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_CSV_HEADER}\n");
        for row in &self.rows {
            for cell in row.cells.iter().chain([&row.aggregate]) {
                let m = &cell.metrics;
                let test = cell
                    .test_snapshot
                    .map_or_else(|| "all".to_string(), |j| j.to_string());
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    cell.model_snapshot, test, m.n_queries, m.mrr, m.hits1, m.hits3, m.hits10
                );
            }
        }
        out
    }

    pub fn last_aggregate(&self) -> Option<&Metrics> {
        self.rows.last().map(|r| &r.aggregate.metrics)
    }

    /// MRR on `Q_j` after each model snapshot `i >= j`.
    pub fn retention(&self, j: usize) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|row| row.cells.get(j).map(|c| (row.model_snapshot, c.metrics.mrr)))
            .collect()
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Both query directions for one test fact.
pub fn fact_queries(t: &Triple, i: usize) -> [(Query, u32); 2] {
    [
        (Query::tail(t.head, t.relation, i), t.tail),
        (Query::head(t.relation, t.tail, i), t.head),
    ]
}

/// Ranks every query of `Q_0..=Q_i` with the model after snapshot `i`.
pub fn evaluate_snapshot(
    store: &EmbeddingStore,
    kg: &GrowingKg,
    i: usize,
    config: &TrainConfig,
) -> Result<MetricsRow> {
    let options = InferenceOptions::from_config(config)?;
    let predictor = Predictor::new(kg, store, options)?;
    let filter = accumulated_filter_set(kg, i)?;
    let entities = &kg.snapshot(i)?.entities;
    let relations = &kg.snapshot(i)?.relations;

    let mut cells = Vec::with_capacity(i + 1);
    let mut all_ranks = Vec::new();
    let mut all_skipped = SkipCounts::default();
    for j in 0..=i {
        let mut queries = Vec::new();
        let mut malformed = 0usize;
        for t in &kg.snapshot(j)?.test {
            if !entities.contains(&t.head) || !entities.contains(&t.tail) || !relations.contains(&t.relation) {
                malformed += 1;
                continue;
            }
            queries.extend(fact_queries(t, i));
        }
        if malformed > 0 {
            log::warn!("Q_{j}: {malformed} test facts outside the snapshot-{i} vocabulary skipped");
        }
        let results: Vec<Result<RankResult>> = with_workers(config.workers, || {
            queries
                .par_iter()
                .map(|(q, gold)| predictor.rank(q, *gold, &filter, 0))
                .collect()
        })?;
        let mut ranks = Vec::with_capacity(results.len());
        let mut skipped = SkipCounts::default();
        for r in results {
            match r? {
                RankResult::Ranked(o) => ranks.push(o.rank),
                RankResult::Skipped(reason) => skipped.add(&reason),
            }
        }
        if skipped.total() > 0 {
            log::info!("model {i}, Q_{j}: skipped {} queries ({skipped:?})", skipped.total());
        }
        all_ranks.extend_from_slice(&ranks);
        all_skipped.unknown_relation += skipped.unknown_relation;
        all_skipped.unrepresentable_anchor += skipped.unrepresentable_anchor;
        all_skipped.unrepresentable_gold += skipped.unrepresentable_gold;
        cells.push(Cell {
            model_snapshot: i,
            test_snapshot: Some(j),
            metrics: Metrics::from_ranks(&ranks),
            skipped,
        });
    }
    Ok(MetricsRow {
        model_snapshot: i,
        cells,
        aggregate: Cell {
            model_snapshot: i,
            test_snapshot: None,
            metrics: Metrics::from_ranks(&all_ranks),
            skipped: all_skipped,
        },
    })
}

#[derive(Clone, Debug)]
pub struct LifelongRun {
    pub store: EmbeddingStore,
    pub matrix: MetricsMatrix,
    pub train_reports: Vec<TrainReport>,
    pub decoupling: Vec<DecouplingStats>,
}

/// What happened at one snapshot of a lifelong run.
pub struct SnapshotEvent<'a> {
    pub snapshot: usize,
    pub store: &'a EmbeddingStore,
    pub report: &'a TrainReport,
    pub decoupling: &'a DecouplingStats,
    pub row: Option<&'a MetricsRow>,
}

/// Train, decouple, assign static pointers and evaluate, snapshot by
/// snapshot, from a fresh store.
pub fn lifelong_run(kg: &GrowingKg, config: &TrainConfig) -> Result<LifelongRun> {
    lifelong_run_with(kg, kg, config, true, |_| Ok(()))
}

/// [`lifelong_run`] with a separate training source, optional per-snapshot
/// evaluation and an observer called after each snapshot. An observer error
/// aborts the run.
pub fn lifelong_run_with<S, F>(
    kg: &GrowingKg,
    source: &S,
    config: &TrainConfig,
    evaluate: bool,
    mut observer: F,
) -> Result<LifelongRun>
where
    S: TrainingSource + ?Sized,
    F: FnMut(&SnapshotEvent<'_>) -> Result<()>,
{
    config.validate()?;
    let mut store = EmbeddingStore::new(config.dim, kg.num_entities(), kg.num_relations());
    let mut matrix = MetricsMatrix::default();
    let mut train_reports = Vec::new();
    let mut decoupling = Vec::new();
    for i in 0..kg.num_snapshots() {
        let report = train_snapshot(&mut store, source, i, config)?;
        log::info!(
            "snapshot {i}: {} triples, {} epochs, best epoch {:?}",
            report.n_train_triples,
            report.epochs_run,
            report.best_epoch
        );
        let mut stats = if config.no_decoupling {
            let space = store.space(i)?;
            DecouplingStats {
                snapshot: i,
                examined: 0,
                dropped: 0,
                retained: space.explicit_count(),
                static_pointers: 0,
                compression_ratio: compression_ratio(&store, i),
            }
        } else {
            apply_semantic_decoupling(&mut store, i, config.theta, config.keep_dropped)?
        };
        stats.static_pointers = assign_static_pointers(&mut store, &kg.snapshot(i)?.entities, i)?;
        let row = if evaluate {
            Some(evaluate_snapshot(&store, kg, i, config)?)
        } else {
            None
        };
        observer(&SnapshotEvent {
            snapshot: i,
            store: &store,
            report: &report,
            decoupling: &stats,
            row: row.as_ref(),
        })?;
        if let Some(row) = row {
            matrix.rows.push(row);
        }
        train_reports.push(report);
        decoupling.push(stats);
    }
    Ok(LifelongRun {
        store,
        matrix,
        train_reports,
        decoupling,
    })
}

/// Mean weight given to each space (rows) by the queries of each test set
/// (columns), with the final model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// `cells[i][j]`: mean `beta_i` over queries of `Q_j`.
    pub cells: Vec<Vec<f64>>,
    pub n_queries: Vec<usize>,
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let n = self.cells.len();
        let mut out = String::from("space");
        for j in 0..self.n_queries.len() {
            let _ = write!(out, ",Q{j}");
        }
        out.push('\n');
        for i in 0..n {
            let _ = write!(out, "E{i}");
            for v in &self.cells[i] {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Whether cell `(j, j)` is the largest of column `j`.
    pub fn diagonal_is_column_max(&self, j: usize) -> bool {
        let d = self.cells[j][j];
        self.cells.iter().all(|row| row[j] <= d)
    }
}

pub fn export_importance_heatmap(kg: &GrowingKg, store: &EmbeddingStore, config: &TrainConfig) -> Result<Heatmap> {
    let n = store.num_spaces();
    if n == 0 {
        return Err(Error::Protocol("no trained snapshots".into()));
    }
    let last = n - 1;
    let predictor = Predictor::new(kg, store, InferenceOptions::from_config(config)?)?;
    let mut cells = vec![vec![0.0; n]; n];
    let mut counts = Vec::with_capacity(n);
    for j in 0..n {
        let queries: Vec<Query> = kg
            .snapshot(j)?
            .test
            .iter()
            .flat_map(|t| fact_queries(t, last).map(|(q, _)| q))
            .filter(|q| {
                store.relations().get(q.relation).is_some()
                    && store.resolve(q.anchor, last).is_ok_and(|r| r.vector().is_some())
            })
            .collect();
        let profiles: Vec<Result<Vec<f64>>> = with_workers(config.workers, || {
            queries
                .par_iter()
                .map(|q| predictor.importance(q).map(|p| p.beta))
                .collect()
        })?;
        let mut sums = vec![0.0f64; n];
        for p in profiles {
            for (s, b) in sums.iter_mut().zip(p?) {
                *s += b;
            }
        }
        for i in 0..n {
            cells[i][j] = if queries.is_empty() {
                0.0
            } else {
                sums[i] / queries.len() as f64
            };
        }
        counts.push(queries.len());
    }
    Ok(Heatmap {
        cells,
        n_queries: counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionPoint {
    pub theta: f32,
    pub compression_ratio: f64,
    pub dropped: usize,
    pub mrr: f64,
}

pub const COMPRESSION_CSV_HEADER: &str = "theta,compression_ratio,dropped,mrr";

pub fn compression_csv(points: &[CompressionPoint]) -> String {
    let mut out = format!("{COMPRESSION_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{:.6},{},{:.6}",
            p.theta, p.compression_ratio, p.dropped, p.mrr
        );
    }
    out
}

/// Recompresses a copy of `store` at each threshold and evaluates the final
/// model. `theta_original` is the threshold the store was built with.
pub fn compression_report(
    kg: &GrowingKg,
    store: &EmbeddingStore,
    config: &TrainConfig,
    theta_original: f32,
    thetas: &[f32],
) -> Result<Vec<CompressionPoint>> {
    let last = store
        .num_spaces()
        .checked_sub(1)
        .ok_or_else(|| Error::Protocol("no trained snapshots".into()))?;
    let mut out = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let mut copy = store.clone();
        let stats = recompress(&mut copy, theta, theta_original, true)?;
        let row = evaluate_snapshot(&copy, kg, last, config)?;
        out.push(CompressionPoint {
            theta,
            compression_ratio: compression_ratio(&copy, last),
            dropped: stats.iter().map(|s| s.dropped).sum(),
            mrr: row.aggregate.metrics.mrr,
        });
    }
    Ok(out)
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub dataset: String,
    pub dataset_hash: String,
    /// Checkpoint directory read or written by the run.
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub checkpoint_hash: Option<String>,
    #[serde(default)]
    pub skipped_queries: usize,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Filter set for ad-hoc queries at snapshot `i`.
pub fn filter_for(kg: &GrowingKg, i: usize) -> Result<HashSet<Triple>> {
    accumulated_filter_set(kg, i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_examples() {
        let m = Metrics::from_ranks(&[1, 1, 1]);
        assert_eq!((m.mrr, m.hits1, m.hits10), (1.0, 1.0, 1.0));
        let m = Metrics::from_ranks(&[1, 4]);
        assert!((m.mrr - 0.625).abs() < 1e-12);
        assert_eq!(m.hits1, 0.5);
        assert_eq!(m.hits3, 0.5);
        assert_eq!(m.hits10, 1.0);
        assert_eq!(Metrics::from_ranks(&[]).n_queries, 0);
    }

    #[test]
    fn csv_layout() {
        let cell = |j| Cell {
            model_snapshot: 1,
            test_snapshot: j,
            metrics: Metrics::from_ranks(&[1, 2]),
            skipped: SkipCounts::default(),
        };
        let matrix = MetricsMatrix {
            rows: vec![MetricsRow {
                model_snapshot: 1,
                cells: vec![cell(Some(0)), cell(Some(1))],
                aggregate: cell(None),
            }],
        };
        let csv = matrix.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines[1], "1,0,2,0.750000,0.500000,1.000000,1.000000");
        assert_eq!(lines[3], "1,all,2,0.750000,0.500000,1.000000,1.000000");
        assert_eq!(matrix.retention(1), vec![(1, 0.75)]);
    }
}
