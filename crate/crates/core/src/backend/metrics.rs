//! Token error rate.

use crate::error::{Error, Result};

use super::pit::{permutations, MAX_PIT_SPEAKERS};

/// Levenshtein distance between two token strings.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("token error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Error count of the best hypothesis-to-reference assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutedErrors {
    pub permutation: Vec<usize>,
    /// Edit distance of stream `j` against reference `permutation[j]`.
    pub errors: Vec<usize>,
    pub reference_tokens: usize,
}

impl PermutedErrors {
    pub fn total(&self) -> usize {
        self.errors.iter().sum()
    }

    pub fn rate(&self) -> f64 {
        self.total() as f64 / self.reference_tokens as f64
    }
}

/// Scores every assignment of hypotheses to references and keeps the one
/// with the fewest edits (first in lexicographic order on ties).
pub fn best_permutation_errors(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<PermutedErrors> {
    let n = refs.len();
    if hyps.len() != n {
        return Err(Error::Shape(format!("{} hypotheses for {n} references", hyps.len())));
    }
    if n > MAX_PIT_SPEAKERS {
        return Err(Error::Unsupported(format!("{n} speakers")));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::Contract("token error rate needs non-empty references".into()));
    }
    let table: Vec<Vec<usize>> = hyps.iter().map(|h| refs.iter().map(|r| edit_distance(h, r)).collect()).collect();
    let mut best: Option<(usize, Vec<usize>)> = None;
    for p in permutations(n) {
        let cost: usize = p.iter().enumerate().map(|(j, &k)| table[j][k]).sum();
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, p));
        }
    }
    let (_, permutation) = best.unwrap_or_default();
    Ok(PermutedErrors {
        errors: permutation.iter().enumerate().map(|(j, &k)| table[j][k]).collect(),
        permutation,
        reference_tokens: refs.iter().map(Vec::len).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(token_error_rate(&[4, 5], &[1, 2]).unwrap(), 1.0);
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 3]).unwrap(), 0.5);
        assert!(token_error_rate(&[1], &[]).is_err());
    }

    #[test]
    fn distance_matrix_cases() {
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2], &[]), 2);
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[2, 3, 5]), 2);
    }

    #[test]
    fn permutation_choice() {
        let refs = vec![vec![1, 2], vec![3, 4, 5]];
        let e = best_permutation_errors(&[vec![3, 4, 5], vec![1, 2]], &refs).unwrap();
        assert_eq!(e.permutation, vec![1, 0]);
        assert_eq!(e.total(), 0);
        let e = best_permutation_errors(&[vec![3, 4], vec![9]], &refs).unwrap();
        assert_eq!(e.permutation, vec![1, 0]);
        assert_eq!(e.errors, vec![1, 2]);
        assert!((e.rate() - 0.6).abs() < 1e-15);
    }
}
