//! Synthetic tabular benchmark: a deterministic oracle mapping each cell to
//! validation/test accuracy and per-device latency, plus a keyed lookup
//! table with a query counter for budget accounting.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{canonical_key, CanonicalKey, CellGraph, EDGE_ABSENT};
use crate::error::CoreError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub key: String,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Milliseconds per device name.
    pub latency: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Additive accuracy contribution per operation-vocabulary index.
    pub op_weights: Vec<f64>,
    /// Accuracy bonus per edge on the longest input-to-output path.
    pub depth_bonus: f64,
    /// Per-device latency of each operation-vocabulary index.
    pub latency: BTreeMap<String, Vec<f64>>,
}

/// Longest path from node 0 to node n-1 counted in edges; node order is
/// topological by construction. Returns 0 when output is unreachable.
pub fn longest_path_edges(cell: &CellGraph) -> usize {
    let n = cell.n_nodes();
    let mut dist = vec![None::<usize>; n];
    dist[0] = Some(0);
    for j in 1..n {
        for i in 0..j {
            if cell.e[i][j] != EDGE_ABSENT {
                if let Some(d) = dist[i] {
                    let cand = d + 1;
                    if dist[j].map_or(true, |cur| cand > cur) {
                        dist[j] = Some(cand);
                    }
                }
            }
        }
    }
    dist[n - 1].unwrap_or(0)
}

/// Deterministic noise in [-1, 1] from the benchmark seed, the cell key,
/// and a tag separating the validation and test draws.
fn keyed_noise(seed: u64, key: &str, tag: &[u8]) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    hasher.update(tag);
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let unit = u64::from_le_bytes(bytes) as f64 / u64::MAX as f64;
    2.0 * unit - 1.0
}

/// Score one cell under the synthetic oracle.
pub fn synth_record(cell: &CellGraph, cfg: &SynthConfig) -> Result<BenchmarkRecord, CoreError> {
    for &op in &cell.x {
        if op >= cfg.op_weights.len() {
            return Err(CoreError::OutOfVocab {
                kind: "op",
                index: op,
                size: cfg.op_weights.len(),
            });
        }
    }
    let key = canonical_key(cell).0;
    let op_sum: f64 = cell.x.iter().map(|&op| cfg.op_weights[op]).sum();
    let depth = longest_path_edges(cell) as f64;
    let eta = keyed_noise(cfg.seed, &key, b"val");
    let val_acc = (50.0 + op_sum + cfg.depth_bonus * depth + eta).clamp(0.0, 100.0);
    let eta_test = 0.5 * keyed_noise(cfg.seed, &key, b"test");
    let test_acc = (val_acc + eta_test).clamp(0.0, 100.0);
    let mut latency = BTreeMap::new();
    for (device, per_op) in &cfg.latency {
        if let Some(&op) = cell.x.iter().find(|&&op| op >= per_op.len()) {
            return Err(CoreError::OutOfVocab {
                kind: "op",
                index: op,
                size: per_op.len(),
            });
        }
        let total: f64 = cell.x.iter().map(|&op| per_op[op]).sum();
        latency.insert(device.clone(), total);
    }
    Ok(BenchmarkRecord {
        key,
        val_acc,
        test_acc,
        latency,
    })
}

/// Score a whole cell population into a lookup table.
pub fn synth_benchmark(cells: &[CellGraph], cfg: &SynthConfig) -> Result<BenchmarkTable, CoreError> {
    let mut table = BenchmarkTable::new();
    for cell in cells {
        table.insert(synth_record(cell, cfg)?);
    }
    Ok(table)
}

/// Keyed benchmark with an atomic query counter; misses count as queries.
#[derive(Debug, Default)]
pub struct BenchmarkTable {
    records: BTreeMap<CanonicalKey, BenchmarkRecord>,
    queries: AtomicU64,
}

impl BenchmarkTable {
    pub fn new() -> Self {
        BenchmarkTable::default()
    }

    pub fn insert(&mut self, record: BenchmarkRecord) {
        self.records
            .insert(CanonicalKey(record.key.clone()), record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Counted lookup: every call increments the query counter, hit or miss.
    pub fn query(&self, key: &CanonicalKey) -> Option<&BenchmarkRecord> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.records.get(key)
    }

    /// Uncounted lookup for calibration and analysis, not search.
    pub fn peek(&self, key: &CanonicalKey) -> Option<&BenchmarkRecord> {
        self.records.get(key)
    }

    /// Uncounted iteration for calibration and analysis, not search.
    pub fn records(&self) -> impl Iterator<Item = &BenchmarkRecord> {
        self.records.values()
    }

    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn reset_queries(&self) {
        self.queries.store(0, Ordering::Relaxed);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in self.records.values() {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, CoreError> {
        let mut table = BenchmarkTable::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: BenchmarkRecord =
                serde_json::from_str(&line).map_err(|e| CoreError::MalformedRow {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            if !record.val_acc.is_finite() || !record.test_acc.is_finite() {
                return Err(CoreError::MalformedRow {
                    line: line_no,
                    reason: "non-finite accuracy".into(),
                });
            }
            let key = CanonicalKey(record.key.clone());
            if table.records.contains_key(&key) {
                return Err(CoreError::DuplicateKey { line: line_no });
            }
            table.records.insert(key, record);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let file = std::fs::File::open(path)?;
        Self::from_jsonl(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::enumerate_space;
    use crate::spaces::desk_space;

    fn cfg() -> SynthConfig {
        let mut latency = BTreeMap::new();
        latency.insert("edge-device".to_string(), vec![0.0, 0.0, 2.0, 1.0]);
        SynthConfig {
            seed: 7,
            op_weights: vec![0.0, 0.0, 3.0, 1.0],
            depth_bonus: 2.0,
            latency,
        }
    }

    fn chain_cell() -> CellGraph {
        // 0 -> 1 -> 2 -> 3 plus skip 0 -> 2; longest path 3 edges
        CellGraph::new(
            vec![0, 2, 3, 1],
            vec![
                vec![0, 1, 1, 0],
                vec![0, 0, 1, 0],
                vec![0, 0, 0, 1],
                vec![0, 0, 0, 0],
            ],
        )
    }

    #[test]
    fn longest_path_desk_checks() {
        assert_eq!(longest_path_edges(&chain_cell()), 3);
        // direct edge only
        let direct = CellGraph::new(
            vec![0, 2, 1],
            vec![vec![0, 0, 1], vec![0, 0, 0], vec![0, 0, 0]],
        );
        assert_eq!(longest_path_edges(&direct), 1);
        // unreachable output
        let stranded = CellGraph::new(
            vec![0, 2, 1],
            vec![vec![0, 1, 0], vec![0, 0, 0], vec![0, 0, 0]],
        );
        assert_eq!(longest_path_edges(&stranded), 0);
    }

    #[test]
    fn val_acc_matches_hand_computation() {
        let cfg = cfg();
        let cell = chain_cell();
        let rec = synth_record(&cell, &cfg).unwrap();
        // ops: input + op2(3.0) + op3(1.0) + output = 4.0; depth 3 * 2.0 = 6.0
        let key = canonical_key(&cell).0;
        let eta = keyed_noise(7, &key, b"val");
        assert!((-1.0..=1.0).contains(&eta));
        assert!((rec.val_acc - (50.0 + 4.0 + 6.0 + eta)).abs() < 1e-12);
        assert!((rec.test_acc - rec.val_acc).abs() <= 0.5);
        // latency: 0 + 2 + 1 + 0 = 3
        assert_eq!(rec.latency["edge-device"], 3.0);
    }

    #[test]
    fn accuracies_clamped_to_range() {
        let mut c = cfg();
        c.op_weights = vec![0.0, 0.0, 100.0, 100.0];
        let rec = synth_record(&chain_cell(), &c).unwrap();
        assert_eq!(rec.val_acc, 100.0);
        // test_acc adds its own noise after val_acc clamps
        assert!((99.5..=100.0).contains(&rec.test_acc));
        c.op_weights = vec![0.0, 0.0, -100.0, -100.0];
        let rec = synth_record(&chain_cell(), &c).unwrap();
        assert_eq!(rec.val_acc, 0.0);
    }

    #[test]
    fn oracle_deterministic_and_seed_sensitive() {
        let cells = enumerate_space(&desk_space(2, 2)).unwrap();
        let a = synth_benchmark(&cells, &cfg()).unwrap();
        let b = synth_benchmark(&cells, &cfg()).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let mut other = cfg();
        other.seed = 8;
        let c = synth_benchmark(&cells, &other).unwrap();
        assert_ne!(a.to_jsonl(), c.to_jsonl());
        // noise varies across keys
        let accs: std::collections::BTreeSet<String> =
            a.records().map(|r| format!("{:.9}", r.val_acc)).collect();
        assert!(accs.len() > 1);
    }

    #[test]
    fn query_counter_counts_hits_and_misses() {
        let cells = enumerate_space(&desk_space(2, 2)).unwrap();
        let table = synth_benchmark(&cells, &cfg()).unwrap();
        assert_eq!(table.query_count(), 0);
        let hit_key = canonical_key(&cells[0]);
        let miss_key = CanonicalKey("nope".into());
        assert!(table.query(&hit_key).is_some());
        assert!(table.query(&miss_key).is_none());
        assert!(table.query(&hit_key).is_some());
        assert_eq!(table.query_count(), 3);
        table.reset_queries();
        assert_eq!(table.query_count(), 0);
        // uncounted iteration leaves the counter alone
        let _ = table.records().count();
        assert_eq!(table.query_count(), 0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let cells = enumerate_space(&desk_space(2, 2)).unwrap();
        let table = synth_benchmark(&cells, &cfg()).unwrap();
        let text = table.to_jsonl();
        let back = BenchmarkTable::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back.len(), table.len());
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn jsonl_rejects_duplicates_and_malformed_rows() {
        let cells = enumerate_space(&desk_space(2, 2)).unwrap();
        let table = synth_benchmark(&cells, &cfg()).unwrap();
        let mut lines: Vec<String> = table.to_jsonl().lines().map(String::from).collect();
        lines.push(lines[0].clone());
        let dup_line = lines.len();
        let text = lines.join("\n");
        match BenchmarkTable::from_jsonl(text.as_bytes()) {
            Err(CoreError::DuplicateKey { line }) => assert_eq!(line, dup_line),
            other => panic!("expected duplicate-key error, got {other:?}"),
        }
        match BenchmarkTable::from_jsonl("{not json\n".as_bytes()) {
            Err(CoreError::MalformedRow { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed-row error, got {other:?}"),
        }
    }
}
