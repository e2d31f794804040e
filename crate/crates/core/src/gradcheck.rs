//! Reverse-mode gradients of the non-causal log-attention, and a
//! central-difference oracle to check them against.
//!
//! The differentiated output is `log A`. Given an upstream cotangent
//! `G = dL/d(log A)` the backward pass chains through the two lse levels;
//! each lse contributes the softmax of its own arguments:
//!
//! ```text
//! P[i,a,b] = exp(Q[i,a] + H_S[a,b] - log S[i,b])      R[i,a] = exp(Q[i,a] + H_Z[a] - log Z[i])
//! W[t,a,b] = exp(K[t,a] + log V[t,b] - H_S[a,b])      U[t,a] = exp(K[t,a] - H_Z[a])
//!
//! dQ[i,a]     = sum_b G[i,b] P[i,a,b] - (sum_b G[i,b]) R[i,a]
//! dH_S[a,b]   = sum_i G[i,b] P[i,a,b]
//! dH_Z[a]     = -sum_i (sum_b G[i,b]) R[i,a]
//! dK[t,a]     = sum_b dH_S[a,b] W[t,a,b] + dH_Z[a] U[t,a]
//! dlogV[t,b]  = sum_a dH_S[a,b] W[t,a,b]
//! ```

use crate::error::{Error, Result};
use crate::kernels::{attention_logspace_noncausal, context_summary, AttentionInputs};
use crate::logspace::{Matrix, NEG_INF};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGradients {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_log_v: Matrix,
}

impl AttentionGradients {
    /// Largest per-entry relative error `|x - y| / max(|x|, |y|, 1e-8)` across all three gradients.
    pub fn max_relative_error(&self, other: &AttentionGradients) -> f64 {
        [
            (&self.d_q, &other.d_q),
            (&self.d_k, &other.d_k),
            (&self.d_log_v, &other.d_log_v),
        ]
        .into_iter()
        .flat_map(|(a, b)| {
            assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
            a.as_slice().iter().zip(b.as_slice())
        })
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
    }

    /// Largest `|x - y| / max(|x|, |y|, scale)` where `scale` is the largest
    /// gradient magnitude in either set (at least `1e-8`).
    pub fn max_scaled_error(&self, other: &AttentionGradients) -> f64 {
        let pairs = || {
            [
                (&self.d_q, &other.d_q),
                (&self.d_k, &other.d_k),
                (&self.d_log_v, &other.d_log_v),
            ]
            .into_iter()
            .flat_map(|(a, b)| a.as_slice().iter().zip(b.as_slice()))
        };
        let scale = pairs().fold(1e-8_f64, |m, (x, y)| m.max(x.abs()).max(y.abs()));
        pairs()
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(scale))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        [&self.d_q, &self.d_k, &self.d_log_v]
            .iter()
            .all(|m| m.as_slice().iter().all(|x| x.is_finite()))
    }
}

pub fn relative_error(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(1e-8)
}

/// `exp(x - norm)`, treating an empty (`NEG_INF`) argument as weight zero.
#[inline]
fn weight(x: f64, norm: f64) -> f64 {
    if x == NEG_INF || norm == NEG_INF {
        0.0
    } else {
        (x - norm).exp()
    }
}

fn check_cotangent(inputs: &AttentionInputs, cotangent: &Matrix) -> Result<()> {
    let expected = (inputs.n_q(), inputs.d_v());
    if cotangent.shape() != expected {
        return Err(Error::shape(
            "cotangent (n_Q x d_V)",
            format!("{expected:?}"),
            format!("{:?}", cotangent.shape()),
        ));
    }
    crate::kernels::check_finite("cotangent", cotangent.as_slice())
}

/// Gradients of `L = sum(cotangent * log A)` with respect to `Q`, `K` and `log V`.
pub fn backward_logspace_noncausal(
    inputs: &AttentionInputs,
    cotangent: &Matrix,
) -> Result<AttentionGradients> {
    check_cotangent(inputs, cotangent)?;
    if inputs.n_k() == 0 {
        return Err(Error::EmptyContext);
    }
    let (n_q, d_k, d_v) = (inputs.n_q(), inputs.d_k(), inputs.d_v());
    let (q, k, log_v) = (inputs.q(), inputs.k(), inputs.log_v());
    let (h_s, h_z) = context_summary(k, log_v);
    let fwd = attention_logspace_noncausal(inputs)?;

    let mut d_q = vec![0.0; n_q * d_k];
    let mut d_h_s = vec![0.0; d_k * d_v];
    let mut d_h_z = vec![0.0; d_k];
    for i in 0..n_q {
        let g = cotangent.row(i);
        let g_total: f64 = g.iter().sum();
        let (log_s, log_z) = (fwd.log_s.row(i), fwd.log_z[i]);
        for a in 0..d_k {
            let qa = q.get(i, a);
            let r = weight(qa + h_z[a], log_z);
            let mut acc = -g_total * r;
            d_h_z[a] -= g_total * r;
            for b in 0..d_v {
                let p = weight(qa + h_s.get(a, b), log_s[b]);
                acc += g[b] * p;
                d_h_s[a * d_v + b] += g[b] * p;
            }
            d_q[i * d_k + a] = acc;
        }
    }

    let n_k = inputs.n_k();
    let mut d_k_grad = vec![0.0; n_k * d_k];
    let mut d_log_v = vec![0.0; n_k * d_v];
    for t in 0..n_k {
        let (kt, vt) = (k.row(t), log_v.row(t));
        for a in 0..d_k {
            let mut acc = d_h_z[a] * weight(kt[a], h_z[a]);
            for b in 0..d_v {
                let contrib = d_h_s[a * d_v + b] * weight(kt[a] + vt[b], h_s.get(a, b));
                acc += contrib;
                d_log_v[t * d_v + b] += contrib;
            }
            d_k_grad[t * d_k + a] = acc;
        }
    }

    Ok(AttentionGradients {
        d_q: Matrix::new(n_q, d_k, d_q)?,
        d_k: Matrix::new(n_k, d_k, d_k_grad)?,
        d_log_v: Matrix::new(n_k, d_v, d_log_v)?,
    })
}

/// Central-difference gradients of `L = sum(cotangent * log A)`, perturbing
/// each input entry by `+-step` and re-running the non-causal forward pass.
pub fn finite_difference_oracle(
    inputs: &AttentionInputs,
    cotangent: &Matrix,
    step: f64,
) -> Result<AttentionGradients> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidStep(step));
    }
    check_cotangent(inputs, cotangent)?;
    let forward = |parts: &[Matrix; 3]| -> Result<Matrix> {
        let inp = AttentionInputs::new(parts[0].clone(), parts[1].clone(), parts[2].clone())?;
        Ok(attention_logspace_noncausal(&inp)?.log_a)
    };
    // L(x+h) - L(x-h) is accumulated entry by entry so the large common part
    // of L cancels before summation.
    let loss_delta = |plus: &Matrix, minus: &Matrix| -> f64 {
        plus.as_slice()
            .iter()
            .zip(minus.as_slice())
            .zip(cotangent.as_slice())
            .map(|((&p, &m), &g)| if p == m { 0.0 } else { g * (p - m) })
            .sum()
    };

    let (q, k, log_v) = inputs.clone().into_parts();
    let mut parts = [q, k, log_v];
    let mut grads = Vec::with_capacity(3);
    for which in 0..3 {
        let (rows, cols) = parts[which].shape();
        let mut grad = Vec::with_capacity(rows * cols);
        for idx in 0..rows * cols {
            let original = parts[which].as_slice()[idx];
            if original == NEG_INF {
                grad.push(0.0);
                continue;
            }
            let (hi, lo) = (original + step, original - step);
            parts[which].as_mut_slice()[idx] = hi;
            let plus = forward(&parts)?;
            parts[which].as_mut_slice()[idx] = lo;
            let minus = forward(&parts)?;
            parts[which].as_mut_slice()[idx] = original;
            // hi - lo is the step actually taken after rounding
            grad.push(loss_delta(&plus, &minus) / (hi - lo));
        }
        grads.push(Matrix::new(rows, cols, grad)?);
    }
    let d_log_v = grads.pop().unwrap();
    let d_k = grads.pop().unwrap();
    let d_q = grads.pop().unwrap();
    Ok(AttentionGradients { d_q, d_k, d_log_v })
}
