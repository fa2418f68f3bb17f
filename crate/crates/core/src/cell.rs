//! Cell DAGs: the data model for architecture cells, search-space
//! descriptions, validity checking, canonical keys and one-hot encoding.
//!
//! A cell is an ordered sequence of operation labels plus a categorical
//! edge matrix. The node order is fixed and semantic: edges may only point
//! from lower to higher index, so every well-formed cell is acyclic by
//! construction.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::CoreError;

/// Edge category 0 always means "no edge".
pub const EDGE_ABSENT: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralRules {
    /// Node 0 must carry the INPUT label.
    pub input_first: bool,
    /// Node n-1 must carry the OUTPUT label.
    pub output_last: bool,
    /// Intermediate nodes with no incident edges are tolerated (variable
    /// effective cell size).
    pub allow_unused_nodes: bool,
}

impl Default for StructuralRules {
    fn default() -> Self {
        StructuralRules {
            input_first: true,
            output_last: true,
            allow_unused_nodes: false,
        }
    }
}

/// A finite enumeration template: a fixed edge skeleton with a free
/// operation choice per slot node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumTemplate {
    /// Fixed operation index per node; slot nodes hold a placeholder that
    /// enumeration overwrites.
    pub base_ops: Vec<usize>,
    /// Fixed edge-category matrix shared by every enumerated cell.
    pub edges: Vec<Vec<usize>>,
    /// Indices of the nodes whose operation varies.
    pub slots: Vec<usize>,
    /// Allowed operation indices per slot.
    pub choices: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub name: String,
    pub n_nodes: usize,
    pub op_vocab: Vec<String>,
    pub edge_vocab: Vec<String>,
    /// None means unbounded.
    pub max_edges: Option<usize>,
    pub structural_rules: StructuralRules,
    pub input_op: usize,
    pub output_op: usize,
    pub template: Option<EnumTemplate>,
}

impl SearchSpaceSpec {
    pub fn check(&self) -> Result<(), CoreError> {
        if self.n_nodes < 3 {
            return Err(CoreError::InvalidSpace("n_nodes must be >= 3".into()));
        }
        if self.input_op >= self.op_vocab.len() || self.output_op >= self.op_vocab.len() {
            return Err(CoreError::InvalidSpace(
                "input/output op index out of vocab".into(),
            ));
        }
        if self.input_op == self.output_op {
            return Err(CoreError::InvalidSpace(
                "op_vocab must hold distinct INPUT and OUTPUT labels".into(),
            ));
        }
        if self.edge_vocab.len() < 2 {
            return Err(CoreError::InvalidSpace(
                "edge_vocab needs at least absent + present".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Training,
    Generated,
    Enumerated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGraph {
    /// Operation index per node.
    pub x: Vec<usize>,
    /// Edge-category matrix, n x n, strictly upper-triangular support.
    pub e: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub provenance: Option<Provenance>,
}

impl CellGraph {
    pub fn new(x: Vec<usize>, e: Vec<Vec<usize>>) -> Self {
        CellGraph {
            x,
            e,
            provenance: None,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.x.len()
    }

    pub fn edge_count(&self) -> usize {
        self.e
            .iter()
            .flatten()
            .filter(|&&c| c != EDGE_ABSENT)
            .count()
    }

    /// JSON with sorted keys and no whitespace; the canonical byte form.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::json!({ "x": self.x, "e": self.e });
        // serde_json's default map is ordered by key, so "e" precedes "x".
        serde_json::to_string(&v).expect("cell serialization cannot fail")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CanonicalKey(pub String);

pub fn canonical_key(cell: &CellGraph) -> CanonicalKey {
    CanonicalKey(cell.canonical_json())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    Cycle,
    Disconnected,
    BadInputPos,
    BadOutputPos,
    DanglingNode,
    EdgeCountExceeded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub is_valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        ValidityReport {
            is_valid: violations.is_empty(),
            violations,
        }
    }
}

/// Structural validity of a cell within a space. Dimension or vocabulary
/// mismatches are caller bugs and come back as `Err`, not as an invalid
/// report.
pub fn validate_cell(cell: &CellGraph, space: &SearchSpaceSpec) -> Result<ValidityReport, CoreError> {
    let n = space.n_nodes;
    if cell.x.len() != n || cell.e.len() != n || cell.e.iter().any(|r| r.len() != n) {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: cell.x.len().max(cell.e.len()),
        });
    }
    if let Some(&op) = cell.x.iter().find(|&&op| op >= space.op_vocab.len()) {
        return Err(CoreError::OutOfVocab {
            kind: "op",
            index: op,
            size: space.op_vocab.len(),
        });
    }
    if let Some(&cat) = cell
        .e
        .iter()
        .flatten()
        .find(|&&c| c >= space.edge_vocab.len())
    {
        return Err(CoreError::OutOfVocab {
            kind: "edge",
            index: cat,
            size: space.edge_vocab.len(),
        });
    }

    let mut violations = Vec::new();

    // Any mass on the diagonal or lower triangle breaks the topological
    // node order.
    let cyclic = (0..n).any(|i| (0..=i).any(|j| cell.e[i][j] != EDGE_ABSENT));
    if cyclic {
        violations.push(Violation::Cycle);
    }

    if space.structural_rules.input_first && cell.x[0] != space.input_op {
        violations.push(Violation::BadInputPos);
    }
    if space.structural_rules.output_last && cell.x[n - 1] != space.output_op {
        violations.push(Violation::BadOutputPos);
    }

    if !cyclic {
        let reach_from_input = reachable(cell, 0, false);
        let reach_to_output = reachable(cell, n - 1, true);
        if !(reach_from_input[n - 1]) {
            violations.push(Violation::Disconnected);
        }
        let mut dangling = false;
        for i in 1..n - 1 {
            let has_edge = (0..n).any(|j| cell.e[i][j] != EDGE_ABSENT || cell.e[j][i] != EDGE_ABSENT);
            let on_path = reach_from_input[i] && reach_to_output[i];
            if has_edge && !on_path {
                dangling = true;
            }
            if !has_edge && !space.structural_rules.allow_unused_nodes {
                dangling = true;
            }
        }
        if dangling {
            violations.push(Violation::DanglingNode);
        }
    }

    if let Some(max) = space.max_edges {
        if cell.edge_count() > max {
            violations.push(Violation::EdgeCountExceeded);
        }
    }

    Ok(ValidityReport::from_violations(violations))
}

fn reachable(cell: &CellGraph, start: usize, reverse: bool) -> Vec<bool> {
    let n = cell.x.len();
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            let connected = if reverse {
                cell.e[v][u] != EDGE_ABSENT
            } else {
                cell.e[u][v] != EDGE_ABSENT
            };
            if connected && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// One-hot node matrix (n x |op_vocab|) and flattened edge matrix
/// (n*n x |edge_vocab|), row-major over (i, j).
pub struct OneHot {
    pub nodes: crate::tensor::Matrix,
    pub edges: crate::tensor::Matrix,
}

pub fn encode_onehot(cell: &CellGraph, space: &SearchSpaceSpec) -> Result<OneHot, CoreError> {
    let n = space.n_nodes;
    if cell.x.len() != n || cell.e.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: cell.x.len(),
        });
    }
    let k_ops = space.op_vocab.len();
    let k_edges = space.edge_vocab.len();
    let mut nodes = crate::tensor::Matrix::zeros(n, k_ops);
    for (i, &op) in cell.x.iter().enumerate() {
        if op >= k_ops {
            return Err(CoreError::OutOfVocab {
                kind: "op",
                index: op,
                size: k_ops,
            });
        }
        nodes.set(i, op, 1.0);
    }
    let mut edges = crate::tensor::Matrix::zeros(n * n, k_edges);
    for i in 0..n {
        for j in 0..n {
            let cat = cell.e[i][j];
            if cat >= k_edges {
                return Err(CoreError::OutOfVocab {
                    kind: "edge",
                    index: cat,
                    size: k_edges,
                });
            }
            edges.set(i * n + j, cat, 1.0);
        }
    }
    Ok(OneHot { nodes, edges })
}

/// Argmax decode; exact inverse of [`encode_onehot`] on one-hot input.
pub fn decode_onehot(onehot: &OneHot, space: &SearchSpaceSpec) -> CellGraph {
    let n = space.n_nodes;
    let x = (0..n).map(|i| argmax(onehot.nodes.row(i))).collect();
    let e = (0..n)
        .map(|i| (0..n).map(|j| argmax(onehot.edges.row(i * n + j))).collect())
        .collect();
    CellGraph::new(x, e)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Exhaustive enumeration of a templated space: the cartesian product of
/// per-slot operation choices over a fixed skeleton.
pub fn enumerate_space(space: &SearchSpaceSpec) -> Result<Vec<CellGraph>, CoreError> {
    let template = space
        .template
        .as_ref()
        .ok_or_else(|| CoreError::NotEnumerable(space.name.clone()))?;
    assert_eq!(template.slots.len(), template.choices.len());
    let mut out = Vec::new();
    let mut pick = vec![0usize; template.slots.len()];
    loop {
        let mut x = template.base_ops.clone();
        for (s, &slot) in template.slots.iter().enumerate() {
            x[slot] = template.choices[s][pick[s]];
        }
        let mut cell = CellGraph::new(x, template.edges.clone());
        cell.provenance = Some(Provenance::Enumerated);
        out.push(cell);

        // odometer increment
        let mut s = pick.len();
        loop {
            if s == 0 {
                return Ok(out);
            }
            s -= 1;
            pick[s] += 1;
            if pick[s] < template.choices[s].len() {
                break;
            }
            pick[s] = 0;
        }
    }
}

/// Distinct canonical keys in an iterator of cells.
pub fn distinct_keys<'a>(cells: impl IntoIterator<Item = &'a CellGraph>) -> usize {
    cells
        .into_iter()
        .map(canonical_key)
        .collect::<BTreeSet<_>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces;

    fn chain3_space() -> SearchSpaceSpec {
        SearchSpaceSpec {
            name: "chain3".into(),
            n_nodes: 3,
            op_vocab: vec!["input".into(), "output".into(), "conv".into()],
            edge_vocab: vec!["none".into(), "edge".into()],
            max_edges: None,
            structural_rules: StructuralRules::default(),
            input_op: 0,
            output_op: 1,
            template: None,
        }
    }

    fn chain3_cell() -> CellGraph {
        CellGraph::new(
            vec![0, 2, 1],
            vec![vec![0, 1, 0], vec![0, 0, 1], vec![0, 0, 0]],
        )
    }

    #[test]
    fn minimal_chain_is_valid() {
        let report = validate_cell(&chain3_cell(), &chain3_space()).unwrap();
        assert!(report.is_valid, "{:?}", report.violations);
    }

    #[test]
    fn edgeless_cell_is_disconnected() {
        let cell = CellGraph::new(vec![0, 2, 1], vec![vec![0; 3]; 3]);
        let report = validate_cell(&cell, &chain3_space()).unwrap();
        assert!(!report.is_valid);
        assert!(report.violations.contains(&Violation::Disconnected));
    }

    #[test]
    fn edge_budget_enforced() {
        // 7 nodes, 10 edges against a 9-edge budget.
        let mut space = chain3_space();
        space.n_nodes = 7;
        space.max_edges = Some(9);
        let mut e = vec![vec![0usize; 7]; 7];
        // chain 0..6 (6 edges) plus skips 0->2, 0->3, 1->3, 2->4 (10 total)
        for i in 0..6 {
            e[i][i + 1] = 1;
        }
        e[0][2] = 1;
        e[0][3] = 1;
        e[1][3] = 1;
        e[2][4] = 1;
        let cell = CellGraph::new(vec![0, 2, 2, 2, 2, 2, 1], e);
        assert_eq!(cell.edge_count(), 10);
        let report = validate_cell(&cell, &space).unwrap();
        assert!(report.violations.contains(&Violation::EdgeCountExceeded));
    }

    #[test]
    fn dangling_side_branch_rejected() {
        let mut space = chain3_space();
        space.n_nodes = 4;
        space.structural_rules.allow_unused_nodes = true;
        // 0->1->3 valid chain, plus 2 receiving an edge but never reaching output.
        let e = vec![
            vec![0, 1, 1, 0],
            vec![0, 0, 0, 1],
            vec![0, 0, 0, 0],
            vec![0, 0, 0, 0],
        ];
        let cell = CellGraph::new(vec![0, 2, 2, 1], e);
        let report = validate_cell(&cell, &space).unwrap();
        assert!(report.violations.contains(&Violation::DanglingNode));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cell = CellGraph::new(vec![0, 1], vec![vec![0, 0], vec![0, 0]]);
        assert!(matches!(
            validate_cell(&cell, &chain3_space()),
            Err(CoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lower_triangle_mass_reports_cycle() {
        let mut cell = chain3_cell();
        cell.e[2][0] = 1;
        let report = validate_cell(&cell, &chain3_space()).unwrap();
        assert!(report.violations.contains(&Violation::Cycle));
    }

    #[test]
    fn canonical_key_deterministic_and_injective() {
        let a = chain3_cell();
        assert_eq!(canonical_key(&a), canonical_key(&a.clone()));
        let mut b = a.clone();
        b.x[1] = 0;
        assert_ne!(canonical_key(&a), canonical_key(&b));
        let mut c = a.clone();
        c.e[0][2] = 1;
        assert_ne!(canonical_key(&a), canonical_key(&c));
    }

    #[test]
    fn canonical_json_sorted_no_whitespace() {
        let json = chain3_cell().canonical_json();
        assert_eq!(json, r#"{"e":[[0,1,0],[0,0,1],[0,0,0]],"x":[0,2,1]}"#);
    }

    #[test]
    fn onehot_roundtrip_and_sums() {
        let space = chain3_space();
        let cell = chain3_cell();
        let oh = encode_onehot(&cell, &space).unwrap();
        // row 1 has its single 1 at the conv column
        assert_eq!(oh.nodes.row(1), &[0.0, 0.0, 1.0]);
        let total: f64 = oh.nodes.data.iter().sum();
        assert_eq!(total, 3.0);
        for r in 0..oh.edges.rows {
            let s: f64 = oh.edges.row(r).iter().sum();
            assert_eq!(s, 1.0);
        }
        let back = decode_onehot(&oh, &space);
        assert_eq!(back.x, cell.x);
        assert_eq!(back.e, cell.e);
    }

    #[test]
    fn onehot_rejects_out_of_vocab() {
        let space = chain3_space();
        let cell = CellGraph::new(vec![0, 9, 1], vec![vec![0; 3]; 3]);
        assert!(encode_onehot(&cell, &space).is_err());
    }

    #[test]
    fn enumerate_desk_counts() {
        let space = spaces::desk_space(4, 3);
        let cells = enumerate_space(&space).unwrap();
        assert_eq!(cells.len(), 81); // 3^4
        assert_eq!(distinct_keys(&cells), 81);
        for cell in &cells {
            let report = validate_cell(cell, &space).unwrap();
            assert!(report.is_valid, "{:?}", report.violations);
            let oh = encode_onehot(cell, &space).unwrap();
            let back = decode_onehot(&oh, &space);
            assert_eq!((&back.x, &back.e), (&cell.x, &cell.e));
        }
    }

    #[test]
    fn enumerate_nb201_style_counts() {
        let space = spaces::nb201_style_space();
        let cells = enumerate_space(&space).unwrap();
        assert_eq!(cells.len(), 15_625); // 5^6
        assert_eq!(distinct_keys(&cells), 15_625);
    }

    #[test]
    fn enumerate_degenerate_single_cell() {
        let mut space = spaces::desk_space(4, 3);
        let t = space.template.as_mut().unwrap();
        t.slots.truncate(1);
        t.choices = vec![vec![2]];
        // remaining slots keep their base placeholder; pin them to a real op
        for &slot in &spaces::desk_space(4, 3).template.unwrap().slots[1..] {
            t.base_ops[slot] = 2;
        }
        let cells = enumerate_space(&space).unwrap();
        assert_eq!(cells.len(), 1);
    }

    #[test]
    fn enumerate_requires_template() {
        let space = chain3_space();
        assert!(matches!(
            enumerate_space(&space),
            Err(CoreError::NotEnumerable(_))
        ));
    }
}
