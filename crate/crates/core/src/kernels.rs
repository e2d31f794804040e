//! Batch attention kernels.
//!
//! Three forms of the same map `(Q, K, log V) -> log A`:
//!
//! * [`attention_quadratic_reference`] materializes the `n_Q x n_K` similarity
//!   matrix `log(exp(Q) exp(K)^T) - c`, applies a row softmax and mixes `V`.
//!   It costs `O(n_Q * n_K)` and exists to check the other two.
//! * [`attention_logspace_noncausal`] reduces over the context first:
//!   `H_S = lse_t(K^T + log V)` (`d_K x d_V`) and `H_Z = lse_t(K^T)` (`d_K`),
//!   then projects every query with `lse_a(Q + H)`. No `n_Q x n_K` array exists.
//! * [`attention_logspace_causal`] replaces the context reduction with a
//!   log-cumulative-sum so query `t` only sees tokens `..=t`.

use crate::error::{Error, Result};
use crate::logspace::{is_log_value, lcse_over_axis, lse_nonempty, Axis, Matrix, NEG_INF};

/// Validated attention inputs.
///
/// `q` is `n_Q x d_K`, `k` is `n_K x d_K`, `log_v` is `n_K x d_V`. Queries and
/// keys must be finite; `log_v` may hold `NEG_INF` for zero-valued entries of `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    q: Matrix,
    k: Matrix,
    log_v: Matrix,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, log_v: Matrix) -> Result<Self> {
        if q.cols() == 0 {
            return Err(Error::ZeroDimension { what: "d_K" });
        }
        if log_v.cols() == 0 {
            return Err(Error::ZeroDimension { what: "d_V" });
        }
        if k.cols() != q.cols() {
            return Err(Error::shape("K columns (d_K)", q.cols(), k.cols()));
        }
        if log_v.rows() != k.rows() {
            return Err(Error::shape("log V rows (n_K)", k.rows(), log_v.rows()));
        }
        check_finite("Q", q.as_slice())?;
        check_finite("K", k.as_slice())?;
        Ok(AttentionInputs { q, k, log_v })
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn log_v(&self) -> &Matrix {
        &self.log_v
    }

    pub fn n_q(&self) -> usize {
        self.q.rows()
    }

    pub fn n_k(&self) -> usize {
        self.k.rows()
    }

    pub fn d_k(&self) -> usize {
        self.q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.log_v.cols()
    }

    pub fn into_parts(self) -> (Matrix, Matrix, Matrix) {
        (self.q, self.k, self.log_v)
    }

    /// The first `len` queries, keys and values.
    pub fn prefix(&self, len: usize) -> AttentionInputs {
        AttentionInputs {
            q: self.q.slice_rows(0, len.min(self.n_q())),
            k: self.k.slice_rows(0, len),
            log_v: self.log_v.slice_rows(0, len),
        }
    }
}

pub(crate) fn check_finite(what: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::InvalidEntry {
            what,
            index,
            value: xs[index],
        }),
        None => Ok(()),
    }
}

pub(crate) fn check_log_values(what: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|&x| !is_log_value(x)) {
        Some(index) => Err(Error::InvalidEntry {
            what,
            index,
            value: xs[index],
        }),
        None => Ok(()),
    }
}

/// `log S`, `log Z` and `log A = log S - log Z` for every query.
#[derive(Debug, Clone, PartialEq)]
pub struct LogAttentionOutput {
    pub log_s: Matrix,
    pub log_z: Vec<f64>,
    pub log_a: Matrix,
}

impl LogAttentionOutput {
    /// Assembles an output from `log S` and `log Z`, deriving `log A`.
    pub fn from_parts(log_s: Matrix, log_z: Vec<f64>) -> Self {
        assert_eq!(log_s.rows(), log_z.len(), "log Z length must match log S rows");
        let (n_q, d_v) = log_s.shape();
        let mut log_a = Vec::with_capacity(n_q * d_v);
        for (row, &z) in log_s.iter_rows().zip(&log_z) {
            log_a.extend(row.iter().map(|&s| s - z));
        }
        let log_a = Matrix::from_vec_unchecked(n_q, d_v, log_a);
        LogAttentionOutput { log_s, log_z, log_a }
    }

    /// `exp(log A)`, the attention output in the linear domain (row-major).
    pub fn attention(&self) -> Vec<f64> {
        self.log_a.exp()
    }

    pub fn n_q(&self) -> usize {
        self.log_a.rows()
    }

    pub fn d_v(&self) -> usize {
        self.log_a.cols()
    }
}

/// Similarity logits `lse_a(Q[i,a] + K[t,a]) - c`, i.e. `log(exp(Q) exp(K)^T) - c`.
pub fn similarity_logits(inputs: &AttentionInputs, c: f64) -> Matrix {
    let (q, k) = (inputs.q(), inputs.k());
    let mut data = Vec::with_capacity(inputs.n_q() * inputs.n_k());
    for qi in q.iter_rows() {
        for kt in k.iter_rows() {
            data.push(lse_nonempty(qi.iter().zip(kt).map(|(a, b)| a + b)) - c);
        }
    }
    Matrix::from_vec_unchecked(inputs.n_q(), inputs.n_k(), data)
}

/// Row softmax of the similarity logits: the `n_Q x n_K` mixing weights.
pub fn softmax_weights(inputs: &AttentionInputs, c: f64) -> Result<Matrix> {
    if inputs.n_k() == 0 {
        return Err(Error::EmptyContext);
    }
    let logits = similarity_logits(inputs, c);
    let mut data = Vec::with_capacity(logits.as_slice().len());
    for row in logits.iter_rows() {
        let max = row.iter().copied().fold(NEG_INF, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|x| (x - max).exp()));
        let total: f64 = data[start..].iter().sum();
        data[start..].iter_mut().for_each(|w| *w /= total);
    }
    Ok(Matrix::from_vec_unchecked(logits.rows(), logits.cols(), data))
}

/// Direct evaluation of `softmax(log(exp(Q) exp(K)^T / exp(c))) V` with `V = exp(log V)`.
///
/// `log A` is the log of the mixed values. `log Z` is reported for the unscaled
/// similarities (`lse_t lse_a(Q + K)`), so it and `log S = log A + log Z` agree
/// with the log-space kernels and do not depend on `c`.
pub fn attention_quadratic_reference(inputs: &AttentionInputs, c: f64) -> Result<LogAttentionOutput> {
    let weights = softmax_weights(inputs, c)?;
    let logits = similarity_logits(inputs, 0.0);
    let v = inputs.log_v().exp();
    let (n_q, n_k, d_v) = (inputs.n_q(), inputs.n_k(), inputs.d_v());

    let mut log_a = Vec::with_capacity(n_q * d_v);
    let mut mixed = vec![0.0; d_v];
    for w in weights.iter_rows() {
        mixed.iter_mut().for_each(|m| *m = 0.0);
        for (t, &wt) in w.iter().enumerate() {
            for (m, &vt) in mixed.iter_mut().zip(&v[t * d_v..(t + 1) * d_v]) {
                *m += wt * vt;
            }
        }
        log_a.extend(mixed.iter().map(|m| m.ln()));
    }
    let log_z: Vec<f64> = logits
        .iter_rows()
        .map(|row| lse_nonempty(row.iter().copied()))
        .collect();
    debug_assert_eq!(logits.cols(), n_k);

    let mut log_s = log_a.clone();
    for (row, &z) in log_s.chunks_exact_mut(d_v).zip(&log_z) {
        row.iter_mut().for_each(|s| *s += z);
    }
    Ok(LogAttentionOutput {
        log_s: Matrix::from_vec_unchecked(n_q, d_v, log_s),
        log_z,
        log_a: Matrix::from_vec_unchecked(n_q, d_v, log_a),
    })
}

/// Context summary `H_S = lse_t(K^T + log V)` and `H_Z = lse_t(K^T)`.
///
/// Streams over tokens twice (max pass, then sum pass) so the only extra
/// storage is the `d_K x d_V` accumulators.
pub(crate) fn context_summary(k: &Matrix, log_v: &Matrix) -> (Matrix, Vec<f64>) {
    let (d_k, d_v) = (k.cols(), log_v.cols());
    let mut max_s = vec![NEG_INF; d_k * d_v];
    let mut max_z = vec![NEG_INF; d_k];
    for (kt, vt) in k.iter_rows().zip(log_v.iter_rows()) {
        for (a, &ka) in kt.iter().enumerate() {
            max_z[a] = max_z[a].max(ka);
            for (m, &vb) in max_s[a * d_v..(a + 1) * d_v].iter_mut().zip(vt) {
                *m = m.max(ka + vb);
            }
        }
    }

    let mut sum_s = vec![0.0; d_k * d_v];
    let mut sum_z = vec![0.0; d_k];
    for (kt, vt) in k.iter_rows().zip(log_v.iter_rows()) {
        for (a, &ka) in kt.iter().enumerate() {
            sum_z[a] += (ka - max_z[a]).exp();
            let range = a * d_v..(a + 1) * d_v;
            for ((s, &m), &vb) in sum_s[range.clone()].iter_mut().zip(&max_s[range]).zip(vt) {
                // an all-NEG_INF column keeps m = NEG_INF; skip to avoid inf - inf
                if m != NEG_INF {
                    *s += (ka + vb - m).exp();
                }
            }
        }
    }

    let finish = |m: f64, s: f64| if m == NEG_INF { NEG_INF } else { m + s.ln() };
    let h_s = max_s.iter().zip(&sum_s).map(|(&m, &s)| finish(m, s)).collect();
    let h_z = max_z.iter().zip(&sum_z).map(|(&m, &s)| finish(m, s)).collect();
    (Matrix::from_vec_unchecked(d_k, d_v, h_s), h_z)
}

/// Projects one query through a context summary:
/// `log S[b] = lse_a(q[a] + H_S[a,b])`, `log Z = lse_a(q[a] + H_Z[a])`.
pub(crate) fn project_query(q: &[f64], h_s: &Matrix, h_z: &[f64], log_s: &mut Vec<f64>) -> f64 {
    let d_v = h_s.cols();
    for b in 0..d_v {
        log_s.push(lse_nonempty(q.iter().zip(h_s.column(b)).map(|(qa, h)| qa + h)));
    }
    lse_nonempty(q.iter().zip(h_z).map(|(qa, h)| qa + h))
}

pub(crate) fn project_queries(q: &Matrix, h_s: &Matrix, h_z: &[f64]) -> LogAttentionOutput {
    let mut log_s = Vec::with_capacity(q.rows() * h_s.cols());
    let log_z = q
        .iter_rows()
        .map(|qi| project_query(qi, h_s, h_z, &mut log_s))
        .collect();
    LogAttentionOutput::from_parts(Matrix::from_vec_unchecked(q.rows(), h_s.cols(), log_s), log_z)
}

/// Non-causal log-space attention in `O((n_Q + n_K) * d_K * d_V)`.
pub fn attention_logspace_noncausal(inputs: &AttentionInputs) -> Result<LogAttentionOutput> {
    if inputs.n_k() == 0 {
        return Err(Error::EmptyContext);
    }
    let (h_s, h_z) = context_summary(inputs.k(), inputs.log_v());
    Ok(project_queries(inputs.q(), &h_s, &h_z))
}

/// Causal log-space attention: query `t` attends to tokens `0..=t`.
///
/// Holds all `d_K x n x d_V` prefix states at once.
pub fn attention_logspace_causal(inputs: &AttentionInputs) -> Result<LogAttentionOutput> {
    let (n_q, n_k) = (inputs.n_q(), inputs.n_k());
    if n_q != n_k {
        return Err(Error::NonSquareCausal { n_q, n_k });
    }
    if n_k == 0 {
        return Err(Error::EmptyContext);
    }
    let (k, log_v) = (inputs.k(), inputs.log_v());
    let (d_k, d_v) = (inputs.d_k(), inputs.d_v());

    // prefix_s[a] is n x d_V: lcse over tokens of K[:, a] + log V
    let prefix_s: Vec<Matrix> = (0..d_k)
        .map(|a| {
            let shifted = Matrix::from_vec_unchecked(
                n_k,
                d_v,
                k.iter_rows()
                    .zip(log_v.iter_rows())
                    .flat_map(|(kt, vt)| vt.iter().map(move |vb| kt[a] + vb))
                    .collect(),
            );
            lcse_over_axis(&shifted, Axis::Rows).expect("nonempty context")
        })
        .collect();
    let prefix_z = lcse_over_axis(k, Axis::Rows)?;

    let mut log_s = Vec::with_capacity(n_q * d_v);
    let mut log_z = Vec::with_capacity(n_q);
    for (t, qt) in inputs.q().iter_rows().enumerate() {
        for b in 0..d_v {
            log_s.push(lse_nonempty(
                qt.iter().zip(&prefix_s).map(|(qa, ps)| qa + ps.get(t, b)),
            ));
        }
        log_z.push(lse_nonempty(qt.iter().zip(prefix_z.row(t)).map(|(qa, h)| qa + h)));
    }
    Ok(LogAttentionOutput::from_parts(
        Matrix::from_vec_unchecked(n_q, d_v, log_s),
        log_z,
    ))
}
