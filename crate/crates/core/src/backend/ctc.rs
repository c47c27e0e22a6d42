//! Connectionist temporal classification loss via the log-space
//! forward-backward recursion.

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Var};
use crate::scalar::Real;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Target with blanks interleaved: `[-, r1, -, r2, …, -]`.
fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut e = Vec::with_capacity(2 * target.len() + 1);
    e.push(blank);
    for &t in target {
        e.push(t);
        e.push(blank);
    }
    e
}

/// Whether the transition `s-2 → s` (skipping a blank) is allowed.
fn can_skip(e: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && e[s] != blank && e[s] != e[s - 2]
}

struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    ext: Vec<usize>,
    log_p: f64,
}

fn lattice(logp: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize, with_beta: bool) -> Lattice {
    let ext = extended(target, blank);
    let s_n = ext.len();
    let z = |t: usize, s: usize| logp[t * vocab + ext[s]];
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_n];
    alpha[0] = z(0, 0);
    if s_n > 1 {
        alpha[1] = z(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_n {
            let prev = &alpha[(t - 1) * s_n..t * s_n];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(&ext, s, blank) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_n + s] = if a == ninf { ninf } else { a + z(t, s) };
        }
    }
    let last = &alpha[(frames - 1) * s_n..];
    let mut log_p = last[s_n - 1];
    if s_n > 1 {
        log_p = log_add(log_p, last[s_n - 2]);
    }
    let mut beta = Vec::new();
    if with_beta {
        beta = vec![ninf; frames * s_n];
        let t = frames - 1;
        beta[t * s_n + s_n - 1] = z(t, s_n - 1);
        if s_n > 1 {
            beta[t * s_n + s_n - 2] = z(t, s_n - 2);
        }
        for t in (0..frames - 1).rev() {
            for s in 0..s_n {
                let next = &beta[(t + 1) * s_n..(t + 2) * s_n];
                let mut b = next[s];
                if s + 1 < s_n {
                    b = log_add(b, next[s + 1]);
                }
                if s + 2 < s_n && can_skip(&ext, s + 2, blank) {
                    b = log_add(b, next[s + 2]);
                }
                beta[t * s_n + s] = if b == ninf { ninf } else { b + z(t, s) };
            }
        }
    }
    Lattice { alpha, beta, ext, log_p }
}

fn check(logp_len: usize, frames: usize, vocab: usize, target: &[usize], blank: usize) -> Result<()> {
    if frames == 0 || logp_len != frames * vocab {
        return Err(Error::Shape(format!("CTC input of {logp_len} values for {frames}×{vocab}")));
    }
    if blank >= vocab {
        return Err(Error::Index { index: blank, len: vocab });
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= vocab || t == blank) {
        return Err(Error::Contract(format!("CTC target token {bad} is blank or outside the vocabulary")));
    }
    Ok(())
}

/// Negative log-likelihood of `target` under frame log-posteriors
/// `logp: frames×vocab`; `+∞` when no alignment fits.
pub fn ctc_nll(logp: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> Result<f64> {
    check(logp.len(), frames, vocab, target, blank)?;
    Ok(-lattice(logp, frames, vocab, target, blank, false).log_p)
}

/// Loss and its gradient with respect to every log-posterior. The gradient
/// is zero when the loss is infinite.
pub fn ctc_nll_grad(logp: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> Result<(f64, Vec<f64>)> {
    check(logp.len(), frames, vocab, target, blank)?;
    let lat = lattice(logp, frames, vocab, target, blank, true);
    let mut grad = vec![0.0; frames * vocab];
    if lat.log_p == f64::NEG_INFINITY {
        return Ok((f64::INFINITY, grad));
    }
    let s_n = lat.ext.len();
    for t in 0..frames {
        for s in 0..s_n {
            let k = lat.ext[s];
            let a = lat.alpha[t * s_n + s];
            let b = lat.beta[t * s_n + s];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            let occupancy = (a + b - logp[t * vocab + k] - lat.log_p).exp();
            grad[t * vocab + k] -= occupancy;
        }
    }
    Ok((-lat.log_p, grad))
}

struct CtcOp<R> {
    grad: Vec<R>,
}

impl<R: Real> CustomOp<R> for CtcOp<R> {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(&self, _inputs: &[&[R]], _output: &[R], grad_out: &[R]) -> Vec<Vec<R>> {
        vec![self.grad.iter().map(|&g| g * grad_out[0]).collect()]
    }
}

/// CTC loss node on a `frames×vocab` log-posterior node.
pub fn ctc_loss<R: Real>(g: &mut Graph<R>, logp: Var, target: &[usize], blank: usize) -> Result<Var> {
    let shape = g.shape(logp).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("CTC expects frames×vocab, got {shape:?}")));
    }
    let values: Vec<f64> = g.value(logp).iter().map(|v| v.to_f64_lossy()).collect();
    let (loss, grad) = ctc_nll_grad(&values, shape[0], shape[1], target, blank)?;
    let op = CtcOp { grad: grad.into_iter().map(R::lit).collect() };
    g.custom(&[logp], vec![], vec![R::lit(loss)], Box::new(op))
}
