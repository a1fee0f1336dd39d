use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDelta {
    pub i: usize,
    pub j: usize,
    pub delta: f64,
}

/// The `k` undirected edges whose weight changed most between two `n x n`
/// adjacencies. Each edge `i < j` takes the mean of both directed deltas.
/// Ranked by absolute change, ties by `(i, j)`.
pub fn top_k_edge_deltas(before: &[f64], after: &[f64], n: usize, k: usize) -> Result<Vec<EdgeDelta>> {
    if before.len() != n * n || after.len() != n * n {
        return shape_err(format!(
            "adjacencies of {} and {} entries for {n} nodes",
            before.len(),
            after.len()
        ));
    }
    let pairs = n * n.saturating_sub(1) / 2;
    if k > pairs {
        return invalid(format!("asked for {k} edges but {n} nodes have only {pairs}"));
    }
    let d = |i: usize, j: usize| after[i * n + j] - before[i * n + j];
    let mut edges: Vec<EdgeDelta> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| EdgeDelta {
            i,
            j,
            delta: 0.5 * (d(i, j) + d(j, i)),
        })
        .collect();
    edges.sort_by(|a, b| {
        b.delta
            .abs()
            .total_cmp(&a.delta.abs())
            .then((a.i, a.j).cmp(&(b.i, b.j)))
    });
    edges.truncate(k);
    Ok(edges)
}
