//! Maximum spanning arborescence decoding for dependency parsing.
//!
//! Scores live in a dense `(n+1) x n` matrix: row 0 is the artificial root
//! as head, row `i >= 1` is word `i`, and column `j` scores heads for word
//! `j+1`. Decoding runs Chu-Liu/Edmonds (cycle contraction on the dense
//! graph, following Kübler et al.'s maximum-score formulation) and then
//! enforces the single-root constraint exactly: if the unconstrained
//! optimum attaches several words to the root, each word is tried as the
//! sole root child and the best constrained tree wins. Ties prefer the
//! lower head index, so decoding is deterministic.

use thiserror::Error;

/// Dense head-selection scores for one sentence.
#[derive(Debug, Clone)]
pub struct ArcScoreMatrix {
    n: usize,
    /// Row-major `(n+1) x n`: `scores[head * n + (dep - 1)]`.
    scores: Vec<f64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArcMatrixError {
    #[error("sentence must have at least one word")]
    Empty,
    #[error("expected {expected} rows (n+1), found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("row {row} has {found} columns, expected {expected}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("score for head {head}, dependent {dep} is not finite")]
    NotFinite { head: usize, dep: usize },
}

impl ArcScoreMatrix {
    /// Build from rows: `rows[i][j]` is the score of head `i` (0 = root)
    /// for dependent word `j+1`. All entries must be finite.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ArcMatrixError> {
        if rows.len() < 2 {
            return Err(ArcMatrixError::Empty);
        }
        let n = rows.len() - 1;
        let mut scores = Vec::with_capacity((n + 1) * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ArcMatrixError::RowLength {
                    row: i,
                    expected: n,
                    found: row.len(),
                });
            }
            for (j, &s) in row.iter().enumerate() {
                if !s.is_finite() {
                    return Err(ArcMatrixError::NotFinite { head: i, dep: j + 1 });
                }
                scores.push(s);
            }
        }
        Ok(ArcScoreMatrix { n, scores })
    }

    /// Number of words.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Score of `head -> dependent`, head in `0..=n`, dependent in `1..=n`.
    pub fn score(&self, head: usize, dependent: usize) -> f64 {
        self.scores[head * self.n + (dependent - 1)]
    }

    /// Total score of a head assignment.
    pub fn total(&self, heads: &[usize]) -> f64 {
        heads
            .iter()
            .enumerate()
            .map(|(j, &h)| self.score(h, j + 1))
            .sum()
    }
}

/// True iff `heads` (head of word `j+1` at index `j`, 0 = root) forms a
/// single-rooted arborescence: exactly one root child, no cycles, every
/// word reaching the root.
pub fn is_single_rooted_tree(heads: &[usize]) -> bool {
    let n = heads.len();
    if heads.iter().filter(|&&h| h == 0).count() != 1 {
        return false;
    }
    for start in 1..=n {
        let mut node = start;
        let mut steps = 0;
        while node != 0 {
            let head = heads[node - 1];
            if head > n || head == node {
                return false;
            }
            node = head;
            steps += 1;
            if steps > n {
                return false; // cycle
            }
        }
    }
    true
}

/// Decode the maximum-score single-rooted spanning arborescence.
pub fn max_arborescence(matrix: &ArcScoreMatrix) -> Vec<usize> {
    let n = matrix.len();
    if n == 1 {
        return vec![0];
    }

    let unconstrained = decode_unconstrained(matrix, None);
    if unconstrained.iter().filter(|&&h| h == 0).count() == 1 {
        return unconstrained;
    }

    // Multiple root children: re-decode once per candidate root child with
    // every other root arc disabled, keep the best total.
    let mut best: Option<(f64, Vec<usize>)> = None;
    for candidate in 1..=n {
        let heads = decode_unconstrained(matrix, Some(candidate));
        let total = matrix.total(&heads);
        let better = match &best {
            None => true,
            Some((best_total, best_heads)) => {
                total > *best_total || (total == *best_total && heads < *best_heads)
            }
        };
        if better {
            best = Some((total, heads));
        }
    }
    best.expect("at least one candidate root").1
}

/// Chu-Liu/Edmonds over the dense graph. `only_root_child` disables every
/// root arc except the one to the given word.
fn decode_unconstrained(matrix: &ArcScoreMatrix, only_root_child: Option<usize>) -> Vec<usize> {
    let n = matrix.len();
    let size = n + 1;
    // Square working matrix indexed [head][dep]; impossible arcs at -inf.
    let mut scores = vec![f64::NEG_INFINITY; size * size];
    for head in 0..=n {
        for dep in 1..=n {
            if head == dep {
                continue;
            }
            if head == 0 {
                if let Some(only) = only_root_child {
                    if dep != only {
                        continue;
                    }
                }
            }
            scores[head * size + dep] = matrix.score(head, dep);
        }
    }
    let mut active = vec![true; size];
    let parents = contract(&mut scores, size, &mut active);
    (1..=n)
        .map(|dep| parents[dep].expect("every word has a parent"))
        .collect()
}

fn contract(scores: &mut [f64], size: usize, active: &mut [bool]) -> Vec<Option<usize>> {
    let max_parents = find_max_parents(scores, size, active);

    let cycle = match find_cycle(&max_parents, active) {
        Some(cycle) => cycle,
        None => return max_parents,
    };

    // Contract the cycle into its smallest vertex.
    let rep = cycle[0];
    let cycle_sum: f64 = cycle
        .iter()
        .map(|&v| scores[max_parents[v].unwrap() * size + v])
        .sum();
    for &v in &cycle[1..] {
        active[v] = false;
    }

    let in_cycle = {
        let mut mask = vec![false; size];
        for &v in &cycle {
            mask[v] = true;
        }
        mask
    };

    // For every external vertex, replace its edges to/from the cycle by the
    // best representative edge, remembering which original endpoint won.
    let mut incoming_origin = vec![0usize; size]; // (u -> rep) stands for (u -> incoming_origin[u])
    let mut outgoing_origin = vec![0usize; size]; // (rep -> u) stands for (outgoing_origin[u] -> u)
    for u in 0..size {
        if !active[u] || in_cycle[u] {
            continue;
        }
        let mut best_in = f64::NEG_INFINITY;
        let mut best_in_v = cycle[0];
        let mut best_out = f64::NEG_INFINITY;
        let mut best_out_v = cycle[0];
        for &v in &cycle {
            let out = scores[v * size + u];
            if out > best_out {
                best_out = out;
                best_out_v = v;
            }
            let broken = scores[max_parents[v].unwrap() * size + v];
            let incoming = cycle_sum + scores[u * size + v] - broken;
            if incoming > best_in {
                best_in = incoming;
                best_in_v = v;
            }
        }
        scores[u * size + rep] = best_in;
        scores[rep * size + u] = best_out;
        incoming_origin[u] = best_in_v;
        outgoing_origin[u] = best_out_v;
    }

    let contracted = contract(scores, size, active);

    // Expand: the chosen edge into the contraction breaks the cycle at the
    // original endpoint; all other cycle vertices keep their cycle parent.
    let mut result = contracted;
    let entering_from = result[rep].expect("contracted vertex has a parent");
    let broken_vertex = incoming_origin[entering_from];
    for &v in &cycle {
        result[v] = if v == broken_vertex {
            Some(entering_from)
        } else {
            max_parents[v]
        };
        active[v] = true;
    }
    // Edges leaving the contraction map back to their original tail.
    for u in 0..size {
        if u != rep && result[u] == Some(rep) && !in_cycle[u] {
            result[u] = Some(outgoing_origin[u]);
        }
    }
    result
}

/// Highest-scoring parent for every active non-root vertex; ties prefer
/// the lower parent index.
fn find_max_parents(scores: &[f64], size: usize, active: &[bool]) -> Vec<Option<usize>> {
    let mut parents = vec![None; size];
    for dep in 1..size {
        if !active[dep] {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_parent = None;
        for head in 0..size {
            if head == dep || !active[head] {
                continue;
            }
            let s = scores[head * size + dep];
            if s > best {
                best = s;
                best_parent = Some(head);
            }
        }
        parents[dep] = best_parent;
    }
    parents
}

/// Find a cycle in the parent assignment, smallest member first.
fn find_cycle(parents: &[Option<usize>], active: &[bool]) -> Option<Vec<usize>> {
    let size = parents.len();
    let mut color = vec![0u8; size]; // 0 unvisited, 1 on stack, 2 done
    for start in 0..size {
        if !active[start] || color[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut v = start;
        loop {
            if color[v] == 1 {
                let pos = path.iter().position(|&p| p == v).unwrap();
                let mut cycle: Vec<usize> = path[pos..].to_vec();
                cycle.sort_unstable();
                return Some(cycle);
            }
            if color[v] == 2 {
                break;
            }
            color[v] = 1;
            path.push(v);
            match parents[v] {
                Some(p) => v = p,
                None => break,
            }
        }
        for &p in &path {
            color[p] = 2;
        }
    }
    None
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("brute force enumeration refuses n = {n} (limit 7)")]
pub struct BruteForceError {
    pub n: usize,
}

/// Exhaustive oracle: enumerate every head assignment, keep valid
/// single-rooted trees, return the best total with the same tie-break
/// (lower head indices preferred).
pub fn brute_force_arborescence(matrix: &ArcScoreMatrix) -> Result<Vec<usize>, BruteForceError> {
    let n = matrix.len();
    if n > 7 {
        return Err(BruteForceError { n });
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut heads = vec![0usize; n];
    // Counting in base n+1 enumerates assignments in lexicographic order,
    // so the first optimum found is the tie-broken answer.
    loop {
        if is_single_rooted_tree(&heads) {
            let total = matrix.total(&heads);
            if best.as_ref().map_or(true, |(b, _)| total > *b) {
                best = Some((total, heads.clone()));
            }
        }
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(best.expect("n >= 1 always has the root-chain tree").1);
            }
            pos -= 1;
            if heads[pos] < n {
                heads[pos] += 1;
                break;
            }
            heads[pos] = 0;
        }
    }
}
