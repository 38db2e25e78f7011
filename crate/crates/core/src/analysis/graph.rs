use crate::corpus::RelationalGraph;
use crate::error::{Error, Result};

const MAX_ITERS: usize = 100_000;

/// Personalized PageRank by power iteration on the row-normalized weighted
/// adjacency. Restart mass is uniform over `personalization`; dangling
/// nodes send their mass to the restart distribution.
pub fn ppr(graph: &RelationalGraph, personalization: &[usize], damping: f64, tol: f64) -> Result<Vec<f64>> {
    let n = graph.num_nodes();
    if n == 0 {
        return Err(Error::InvalidArgument("empty graph".into()));
    }
    if !(damping > 0.0 && damping < 1.0) || !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("damping {damping} / tol {tol} out of range")));
    }
    if personalization.is_empty() || personalization.iter().any(|p| *p >= n) {
        return Err(Error::InvalidArgument("personalization must be a nonempty set of graph nodes".into()));
    }
    let mut restart = vec![0.0; n];
    let mut uniq = personalization.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    for p in &uniq {
        restart[*p] = 1.0 / uniq.len() as f64;
    }
    let adj = graph.adjacency();
    let out_w: Vec<f64> = adj.iter().map(|a| a.iter().map(|(_, w)| w).sum()).collect();

    let mut x = restart.clone();
    for _ in 0..MAX_ITERS {
        let mut next = vec![0.0; n];
        let mut dangling = 0.0;
        for (i, row) in adj.iter().enumerate() {
            if row.is_empty() {
                dangling += x[i];
                continue;
            }
            for (j, w) in row {
                next[*j] += damping * x[i] * w / out_w[i];
            }
        }
        for (v, r) in next.iter_mut().zip(&restart) {
            *v += ((1.0 - damping) + damping * dangling) * r;
        }
        let delta: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if delta < tol {
            return Ok(x);
        }
    }
    Err(Error::Undefined(format!("ppr did not converge in {MAX_ITERS} iterations")))
}

/// PPR personalized on `known_nodes`, read at each sample's node. `None`
/// entries in `sample_nodes` are unmapped samples.
pub fn as_graph(graph: &RelationalGraph, known_nodes: &[usize], sample_nodes: &[Option<usize>]) -> Result<Vec<f64>> {
    let scores = ppr(graph, known_nodes, 0.85, 1e-12)?;
    sample_nodes
        .iter()
        .enumerate()
        .map(|(i, n)| match n {
            Some(n) if *n < scores.len() => Ok(scores[*n]),
            _ => Err(Error::InvalidArgument(format!("sample {i} has no graph node"))),
        })
        .collect()
}
