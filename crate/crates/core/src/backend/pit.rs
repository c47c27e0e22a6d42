//! Permutation search for permutation invariant training.

use crate::error::{Error, Result};

/// Largest speaker count handled by exhaustive search.
pub const MAX_PIT_SPEAKERS: usize = 4;

/// Advances `p` to the next permutation in lexicographic order; false
/// once `p` was the last one.
pub fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Every permutation of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut all = vec![p.clone()];
    while next_permutation(&mut p) {
        all.push(p.clone());
    }
    all
}

/// `π̂ = argmin_π Σ_j loss[j][π(j)]`, searched exhaustively. `+∞` entries
/// are valid; ties resolve to the lexicographically smallest permutation.
pub fn pit_assign(loss: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = loss.len();
    if n > MAX_PIT_SPEAKERS {
        return Err(Error::Unsupported(format!("PIT over {n} speakers (at most {MAX_PIT_SPEAKERS})")));
    }
    if loss.iter().any(|row| row.len() != n) {
        return Err(Error::Shape("PIT loss matrix is not square".into()));
    }
    if loss.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in PIT loss matrix".into()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(n) {
        let cost: f64 = p.iter().enumerate().map(|(j, &k)| loss[j][k]).sum();
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, p));
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or_default())
}
