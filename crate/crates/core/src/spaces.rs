//! Built-in search-space presets.

use crate::cell::{EnumTemplate, SearchSpaceSpec, StructuralRules};

/// Small enumerable space for desk-scale experiments: a chain skeleton of
/// `n_slots` operation nodes between INPUT and OUTPUT (plus one skip
/// connection), with `n_ops` operation choices per slot. Enumerates to
/// n_ops^n_slots cells.
pub fn desk_space(n_slots: usize, n_ops: usize) -> SearchSpaceSpec {
    assert!(n_slots >= 1 && n_ops >= 1);
    let n = n_slots + 2;
    let mut op_vocab = vec!["input".to_string(), "output".to_string()];
    for i in 0..n_ops {
        op_vocab.push(format!("op{i}"));
    }
    let mut edges = vec![vec![0usize; n]; n];
    for i in 0..n - 1 {
        edges[i][i + 1] = 1;
    }
    if n >= 4 {
        edges[0][2] = 1; // skip connection off the input
    }
    let mut base_ops = vec![2usize; n];
    base_ops[0] = 0;
    base_ops[n - 1] = 1;
    let slots: Vec<usize> = (1..=n_slots).collect();
    let choices = vec![(2..2 + n_ops).collect::<Vec<_>>(); n_slots];
    SearchSpaceSpec {
        name: format!("desk-{n_slots}x{n_ops}"),
        n_nodes: n,
        op_vocab,
        edge_vocab: vec!["none".into(), "edge".into()],
        max_edges: None,
        structural_rules: StructuralRules::default(),
        input_op: 0,
        output_op: 1,
        template: Some(EnumTemplate {
            base_ops,
            edges,
            slots,
            choices,
        }),
    }
}

/// Node-based rendering of a 201-style cell: 6 operation slots over a fixed
/// adjacency (one node per original edge position), 5 operation choices per
/// slot, 5^6 = 15,625 cells.
pub fn nb201_style_space() -> SearchSpaceSpec {
    let op_vocab: Vec<String> = [
        "input", "output", "conv1x1", "conv3x3", "avgpool3x3", "skip", "zero",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    // Nodes: 0 input, 1..=6 the six edge-slots of the 4-node cell
    // (0->1, 0->2, 0->3, 1->2, 1->3, 2->3), 7 output.
    let n = 8;
    let mut edges = vec![vec![0usize; n]; n];
    for &(a, b) in &[
        (0, 1),
        (0, 2),
        (0, 3),
        (1, 4),
        (1, 5),
        (2, 6),
        (4, 6),
        (3, 7),
        (5, 7),
        (6, 7),
    ] {
        edges[a][b] = 1;
    }
    let mut base_ops = vec![2usize; n];
    base_ops[0] = 0;
    base_ops[7] = 1;
    SearchSpaceSpec {
        name: "nb201-style".into(),
        n_nodes: n,
        op_vocab,
        edge_vocab: vec!["none".into(), "edge".into()],
        max_edges: None,
        structural_rules: StructuralRules::default(),
        input_op: 0,
        output_op: 1,
        template: Some(EnumTemplate {
            base_ops,
            edges,
            slots: (1..=6).collect(),
            choices: vec![(2..7).collect::<Vec<_>>(); 6],
        }),
    }
}
