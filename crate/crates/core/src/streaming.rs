//! Constant-memory streaming attention.
//!
//! A [`StreamState`] summarizes every absorbed token in two log-space
//! accumulators, `h_s = lse_t(K_t^T + log V_t)` (`d_K x d_V`) and
//! `h_z = lse_t(K_t)` (`d_K`). Absorbing a token and answering a query both
//! cost `O(d_K * d_V)` no matter how many tokens came before.
//!
//! The empty state has every accumulator at `NEG_INF` (the log of an empty
//! sum). States of adjacent chunks merge with [`StreamState::combine`], which
//! is associative with the empty state as identity, so long sequences can be
//! summarized chunk-parallel and folded.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{
    check_finite, check_log_values, project_queries, project_query, AttentionInputs, LogAttentionOutput,
};
use crate::logspace::{is_log_value, logadd, Matrix, NEG_INF};

/// Bytes in the snapshot header: `d_K`, `d_V`, `t` as little-endian `u64`.
pub const SNAPSHOT_HEADER_BYTES: usize = 24;

/// Default chunk length for chunked scans.
pub const DEFAULT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    h_s: Matrix,
    h_z: Vec<f64>,
    t: u64,
}

/// Output of a single autoregressive query.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub log_s: Vec<f64>,
    pub log_z: f64,
}

impl StepOutput {
    pub fn log_a(&self) -> Vec<f64> {
        self.log_s.iter().map(|s| s - self.log_z).collect()
    }
}

impl StreamState {
    /// The empty state: `t = 0` and every accumulator `NEG_INF`.
    pub fn new(d_k: usize, d_v: usize) -> Result<Self> {
        if d_k == 0 {
            return Err(Error::ZeroDimension { what: "d_K" });
        }
        if d_v == 0 {
            return Err(Error::ZeroDimension { what: "d_V" });
        }
        Ok(StreamState {
            h_s: Matrix::filled(d_k, d_v, NEG_INF),
            h_z: vec![NEG_INF; d_k],
            t: 0,
        })
    }

    /// Builds the state of a whole token sequence by sequential absorption.
    pub fn from_tokens(k: &Matrix, log_v: &Matrix) -> Result<Self> {
        let mut state = StreamState::new(k.cols(), log_v.cols())?;
        if k.rows() != log_v.rows() {
            return Err(Error::shape("log V rows", k.rows(), log_v.rows()));
        }
        for (kt, vt) in k.iter_rows().zip(log_v.iter_rows()) {
            state.update(kt, vt)?;
        }
        Ok(state)
    }

    pub fn d_k(&self) -> usize {
        self.h_s.rows()
    }

    pub fn d_v(&self) -> usize {
        self.h_s.cols()
    }

    /// Number of absorbed tokens.
    pub fn len(&self) -> u64 {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn h_s(&self) -> &Matrix {
        &self.h_s
    }

    pub fn h_z(&self) -> &[f64] {
        &self.h_z
    }

    /// Count of stored accumulator values, `d_K * (d_V + 1)`.
    pub fn num_values(&self) -> usize {
        self.h_s.as_slice().len() + self.h_z.len()
    }

    pub fn snapshot_len(&self) -> usize {
        SNAPSHOT_HEADER_BYTES + 8 * self.num_values()
    }

    /// Absorbs one token: `h_s[a,b] <- logadd(h_s[a,b], k[a] + log_v[b])`,
    /// `h_z[a] <- logadd(h_z[a], k[a])`.
    pub fn update(&mut self, k: &[f64], log_v: &[f64]) -> Result<()> {
        if k.len() != self.d_k() {
            return Err(Error::shape("key length (d_K)", self.d_k(), k.len()));
        }
        if log_v.len() != self.d_v() {
            return Err(Error::shape("log V length (d_V)", self.d_v(), log_v.len()));
        }
        check_finite("K", k)?;
        check_log_values("log V", log_v)?;

        let d_v = self.d_v();
        let h_s = self.h_s.as_mut_slice();
        for (a, &ka) in k.iter().enumerate() {
            for (h, &vb) in h_s[a * d_v..(a + 1) * d_v].iter_mut().zip(log_v) {
                *h = logadd(*h, ka + vb);
            }
        }
        for (h, &ka) in self.h_z.iter_mut().zip(k) {
            *h = logadd(*h, ka);
        }
        self.t += 1;
        Ok(())
    }

    /// Autoregressive query against everything absorbed so far.
    pub fn query(&self, q: &[f64]) -> Result<StepOutput> {
        if self.t == 0 {
            return Err(Error::EmptyContext);
        }
        if q.len() != self.d_k() {
            return Err(Error::shape("query length (d_K)", self.d_k(), q.len()));
        }
        check_finite("Q", q)?;
        let mut log_s = Vec::with_capacity(self.d_v());
        let log_z = project_query(q, &self.h_s, &self.h_z, &mut log_s);
        Ok(StepOutput { log_s, log_z })
    }

    /// Non-autoregressive query: every row of `q` attends to all absorbed tokens.
    pub fn query_all(&self, q: &Matrix) -> Result<LogAttentionOutput> {
        if self.t == 0 {
            return Err(Error::EmptyContext);
        }
        if q.cols() != self.d_k() {
            return Err(Error::shape("query columns (d_K)", self.d_k(), q.cols()));
        }
        check_finite("Q", q.as_slice())?;
        Ok(project_queries(q, &self.h_s, &self.h_z))
    }

    /// The state of the concatenation of the two chunks `self` then `other`.
    pub fn combine(&self, other: &StreamState) -> Result<StreamState> {
        if self.h_s.shape() != other.h_s.shape() {
            return Err(Error::shape(
                "state dimensions (d_K x d_V)",
                format!("{:?}", self.h_s.shape()),
                format!("{:?}", other.h_s.shape()),
            ));
        }
        let h_s = self
            .h_s
            .as_slice()
            .iter()
            .zip(other.h_s.as_slice())
            .map(|(&x, &y)| logadd(x, y))
            .collect();
        let h_z = self
            .h_z
            .iter()
            .zip(&other.h_z)
            .map(|(&x, &y)| logadd(x, y))
            .collect();
        Ok(StreamState {
            h_s: Matrix::from_vec_unchecked(self.d_k(), self.d_v(), h_s),
            h_z,
            t: self.t + other.t,
        })
    }

    /// Little-endian snapshot: `d_K`, `d_V`, `t` as `u64`, then `h_s` row-major,
    /// then `h_z`, each as `f64`. `NEG_INF` is written as IEEE `-inf`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.snapshot_len());
        for dim in [self.d_k() as u64, self.d_v() as u64, self.t] {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for x in self.h_s.as_slice().iter().chain(&self.h_z) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::CorruptSnapshot(msg);
        if bytes.len() < SNAPSHOT_HEADER_BYTES {
            return Err(corrupt(format!(
                "{} bytes is shorter than the {SNAPSHOT_HEADER_BYTES}-byte header",
                bytes.len()
            )));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        let (d_k, d_v, t) = (word(0), word(1), word(2));
        if d_k == 0 || d_v == 0 {
            return Err(corrupt(format!(
                "zero dimension in header (d_K = {d_k}, d_V = {d_v})"
            )));
        }
        let values = d_v
            .checked_add(1)
            .and_then(|dv1| d_k.checked_mul(dv1))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| corrupt(format!("header dimensions too large (d_K = {d_k}, d_V = {d_v})")))?;
        let expected = values
            .checked_mul(8)
            .and_then(|n| n.checked_add(SNAPSHOT_HEADER_BYTES))
            .ok_or_else(|| corrupt("header dimensions too large".into()))?;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "expected {expected} bytes for d_K = {d_k}, d_V = {d_v}, found {}",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes[SNAPSHOT_HEADER_BYTES..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|&x| !is_log_value(x)) {
            return Err(corrupt(format!(
                "value {} at position {i} is not a log value",
                data[i]
            )));
        }
        let all_empty = data.iter().all(|&x| x == NEG_INF);
        if (t == 0) != all_empty {
            return Err(corrupt(format!(
                "t = {t} is inconsistent with the accumulators ({})",
                if all_empty { "all empty" } else { "nonempty" }
            )));
        }
        let (d_k, d_v) = (d_k as usize, d_v as usize);
        let split = d_k * d_v;
        let h_z = data[split..].to_vec();
        let mut h_s = data;
        h_s.truncate(split);
        Ok(StreamState {
            h_s: Matrix::from_vec_unchecked(d_k, d_v, h_s),
            h_z,
            t,
        })
    }
}

/// Runs update-then-query for every token, returning the causal outputs row by row.
pub fn stream_causal(inputs: &AttentionInputs) -> Result<LogAttentionOutput> {
    let (n_q, n_k) = (inputs.n_q(), inputs.n_k());
    if n_q != n_k {
        return Err(Error::NonSquareCausal { n_q, n_k });
    }
    if n_k == 0 {
        return Err(Error::EmptyContext);
    }
    let mut state = StreamState::new(inputs.d_k(), inputs.d_v())?;
    let mut log_s = Vec::with_capacity(n_q * inputs.d_v());
    let mut log_z = Vec::with_capacity(n_q);
    for ((qt, kt), vt) in inputs
        .q()
        .iter_rows()
        .zip(inputs.k().iter_rows())
        .zip(inputs.log_v().iter_rows())
    {
        state.update(kt, vt)?;
        let step = state.query(qt)?;
        log_s.extend(step.log_s);
        log_z.push(step.log_z);
    }
    Ok(LogAttentionOutput::from_parts(
        Matrix::from_vec_unchecked(n_q, inputs.d_v(), log_s),
        log_z,
    ))
}

fn chunk_states(k: &Matrix, log_v: &Matrix, chunk: usize) -> Result<Vec<StreamState>> {
    if chunk == 0 {
        return Err(Error::ZeroDimension { what: "chunk" });
    }
    if k.rows() != log_v.rows() {
        return Err(Error::shape("log V rows", k.rows(), log_v.rows()));
    }
    let starts: Vec<usize> = (0..k.rows()).step_by(chunk).collect();
    starts
        .into_par_iter()
        .map(|start| {
            let end = (start + chunk).min(k.rows());
            StreamState::from_tokens(&k.slice_rows(start, end), &log_v.slice_rows(start, end))
        })
        .collect()
}

/// Summarizes a token sequence by building each `chunk`-token state in
/// parallel, then folding them left to right with [`StreamState::combine`].
pub fn chunked_state(k: &Matrix, log_v: &Matrix, chunk: usize) -> Result<StreamState> {
    let states = chunk_states(k, log_v, chunk)?;
    let mut acc = StreamState::new(k.cols(), log_v.cols())?;
    for s in &states {
        acc = acc.combine(s)?;
    }
    Ok(acc)
}

/// Causal attention as a two-level scan: chunk summaries are built in parallel,
/// an exclusive prefix of them seeds each chunk, and each chunk then runs
/// update-then-query sequentially (also in parallel across chunks).
pub fn chunked_causal(inputs: &AttentionInputs, chunk: usize) -> Result<LogAttentionOutput> {
    let (n_q, n_k) = (inputs.n_q(), inputs.n_k());
    if n_q != n_k {
        return Err(Error::NonSquareCausal { n_q, n_k });
    }
    if n_k == 0 {
        return Err(Error::EmptyContext);
    }
    let states = chunk_states(inputs.k(), inputs.log_v(), chunk)?;
    let mut carries = Vec::with_capacity(states.len());
    let mut acc = StreamState::new(inputs.d_k(), inputs.d_v())?;
    for s in &states {
        carries.push(acc.clone());
        acc = acc.combine(s)?;
    }

    let pieces: Vec<(Vec<f64>, Vec<f64>)> = carries
        .into_par_iter()
        .enumerate()
        .map(|(c, mut state)| {
            let start = c * chunk;
            let end = (start + chunk).min(n_k);
            let mut log_s = Vec::with_capacity((end - start) * inputs.d_v());
            let mut log_z = Vec::with_capacity(end - start);
            for t in start..end {
                state.update(inputs.k().row(t), inputs.log_v().row(t))?;
                let step = state.query(inputs.q().row(t))?;
                log_s.extend(step.log_s);
                log_z.push(step.log_z);
            }
            Ok((log_s, log_z))
        })
        .collect::<Result<_>>()?;

    let (log_s, log_z): (Vec<Vec<f64>>, Vec<Vec<f64>>) = pieces.into_iter().unzip();
    Ok(LogAttentionOutput::from_parts(
        Matrix::from_vec_unchecked(n_q, inputs.d_v(), log_s.concat()),
        log_z.concat(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{attention_logspace_causal, attention_logspace_noncausal};
    use crate::logspace::{lse, max_abs_diff};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-5.0..=5.0)).unwrap()
    }

    fn random_inputs(seed: u64, n_q: usize, n_k: usize, d_k: usize, d_v: usize) -> AttentionInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_matrix(&mut rng, n_q, d_k);
        let k = random_matrix(&mut rng, n_k, d_k);
        let v = random_matrix(&mut rng, n_k, d_v);
        AttentionInputs::new(q, k, v).unwrap()
    }

    fn max_state_diff(a: &StreamState, b: &StreamState) -> f64 {
        assert_eq!(a.t, b.t);
        a.h_s.max_abs_diff(&b.h_s).max(max_abs_diff(&a.h_z, &b.h_z))
    }

    #[test]
    fn init_is_all_neg_inf() {
        let s = StreamState::new(2, 3).unwrap();
        assert_eq!(s.h_s().shape(), (2, 3));
        assert!(s.h_s().as_slice().iter().all(|&x| x == NEG_INF));
        assert_eq!(s.h_z(), &[NEG_INF, NEG_INF]);
        assert_eq!(s.len(), 0);
        assert!(s.is_empty());
        assert_eq!(s.num_values(), 8);
        assert!(matches!(StreamState::new(0, 3), Err(Error::ZeroDimension { .. })));
        assert!(matches!(StreamState::new(3, 0), Err(Error::ZeroDimension { .. })));
    }

    #[test]
    fn first_update_is_exact() {
        let mut s = StreamState::new(2, 3).unwrap();
        let k = [0.25, -1.5];
        let v = [1.0, -2.0, 0.125];
        s.update(&k, &v).unwrap();
        for (a, ka) in k.iter().enumerate() {
            for (b, vb) in v.iter().enumerate() {
                assert_eq!(s.h_s().get(a, b), ka + vb);
            }
        }
        assert_eq!(s.h_z(), &k);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn two_zero_tokens_give_log_two() {
        let mut s = StreamState::new(3, 2).unwrap();
        s.update(&[0.0; 3], &[0.0; 2]).unwrap();
        s.update(&[0.0; 3], &[0.0; 2]).unwrap();
        assert!(s.h_s().as_slice().iter().all(|&x| x == LN2));
        assert!(s.h_z().iter().all(|&x| x == LN2));
    }

    #[test]
    fn query_before_any_token_is_error() {
        let s = StreamState::new(2, 2).unwrap();
        assert_eq!(s.query(&[0.0, 0.0]), Err(Error::EmptyContext));
        assert_eq!(s.query_all(&Matrix::zeros(3, 2)), Err(Error::EmptyContext));
    }

    #[test]
    fn dimension_mismatches() {
        let mut s = StreamState::new(2, 3).unwrap();
        assert!(matches!(
            s.update(&[0.0; 3], &[0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            s.update(&[0.0; 2], &[0.0; 2]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            s.update(&[f64::NAN, 0.0], &[0.0; 3]),
            Err(Error::InvalidEntry { .. })
        ));
        s.update(&[0.0; 2], &[0.0; 3]).unwrap();
        assert!(matches!(s.query(&[0.0; 3]), Err(Error::ShapeMismatch { .. })));
        let other = StreamState::new(3, 3).unwrap();
        assert!(matches!(s.combine(&other), Err(Error::ShapeMismatch { .. })));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn state_matches_batch_lse() {
        let inputs = random_inputs(11, 1, 20, 4, 3);
        let mut s = StreamState::new(4, 3).unwrap();
        for t in 0..20 {
            s.update(inputs.k().row(t), inputs.log_v().row(t)).unwrap();
            for a in 0..4 {
                for b in 0..3 {
                    let terms: Vec<f64> = (0..=t)
                        .map(|u| inputs.k().get(u, a) + inputs.log_v().get(u, b))
                        .collect();
                    assert!((s.h_s().get(a, b) - lse(&terms).unwrap()).abs() <= 1e-12);
                }
                let keys: Vec<f64> = (0..=t).map(|u| inputs.k().get(u, a)).collect();
                assert!((s.h_z()[a] - lse(&keys).unwrap()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_query_returns_value() {
        let inputs = random_inputs(12, 5, 1, 3, 4);
        let s = StreamState::from_tokens(inputs.k(), inputs.log_v()).unwrap();
        let step = s.query(inputs.q().row(0)).unwrap();
        let got: Vec<f64> = step.log_a().iter().map(|x| x.exp()).collect();
        assert!(max_abs_diff(&got, &inputs.log_v().exp()) <= 1e-12);
        let all = s.query_all(inputs.q()).unwrap().attention();
        for i in 0..5 {
            assert!(max_abs_diff(&all[i * 4..(i + 1) * 4], &inputs.log_v().exp()) <= 1e-12);
        }
    }

    #[test]
    fn streaming_reproduces_causal_batch() {
        let inputs = random_inputs(13, 16, 16, 4, 3);
        let batch = attention_logspace_causal(&inputs).unwrap();
        let streamed = stream_causal(&inputs).unwrap();
        assert!(batch.log_a.max_abs_diff(&streamed.log_a) <= 1e-9);
        assert!(batch
            .attention()
            .iter()
            .zip(streamed.attention())
            .all(|(a, b)| (a - b).abs() <= 1e-9));
    }

    #[test]
    fn query_all_matches_noncausal() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let k = random_matrix(&mut rng, 8, 5);
        let v = random_matrix(&mut rng, 8, 3);
        let q = random_matrix(&mut rng, 4, 5);
        let s = StreamState::from_tokens(&k, &v).unwrap();
        let out = s.query_all(&q).unwrap();
        let batch = attention_logspace_noncausal(&AttentionInputs::new(q, k, v).unwrap()).unwrap();
        assert!(max_abs_diff(&out.attention(), &batch.attention()) <= 1e-9);
    }

    #[test]
    fn absorption_order_does_not_matter() {
        let inputs = random_inputs(15, 3, 12, 4, 3);
        let order: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
        let a = StreamState::from_tokens(inputs.k(), inputs.log_v()).unwrap();
        let b = StreamState::from_tokens(
            &inputs.k().permute_rows(&order),
            &inputs.log_v().permute_rows(&order),
        )
        .unwrap();
        assert!(max_state_diff(&a, &b) <= 1e-12);
        let qa = a.query_all(inputs.q()).unwrap();
        let qb = b.query_all(inputs.q()).unwrap();
        assert!(qa.log_a.max_abs_diff(&qb.log_a) <= 1e-12);
    }

    #[test]
    fn combine_identity_is_exact() {
        let inputs = random_inputs(16, 1, 5, 3, 2);
        let s = StreamState::from_tokens(inputs.k(), inputs.log_v()).unwrap();
        let e = StreamState::new(3, 2).unwrap();
        assert_eq!(e.combine(&s).unwrap(), s);
        assert_eq!(s.combine(&e).unwrap(), s);
    }

    #[test]
    fn combine_of_halves_equals_whole() {
        let inputs = random_inputs(17, 1, 8, 4, 3);
        let (k, v) = (inputs.k(), inputs.log_v());
        let whole = StreamState::from_tokens(k, v).unwrap();
        let first = StreamState::from_tokens(&k.slice_rows(0, 4), &v.slice_rows(0, 4)).unwrap();
        let second = StreamState::from_tokens(&k.slice_rows(4, 8), &v.slice_rows(4, 8)).unwrap();
        assert!(max_state_diff(&whole, &first.combine(&second).unwrap()) <= 1e-12);
    }

    #[test]
    fn chunked_forms_match_sequential() {
        let inputs = random_inputs(18, 50, 50, 4, 3);
        let seq = StreamState::from_tokens(inputs.k(), inputs.log_v()).unwrap();
        let causal = attention_logspace_causal(&inputs).unwrap();
        for chunk in [1, 2, 7, 64] {
            let st = chunked_state(inputs.k(), inputs.log_v(), chunk).unwrap();
            assert!(max_state_diff(&seq, &st) <= 1e-11, "chunk {chunk}");
            let out = chunked_causal(&inputs, chunk).unwrap();
            assert!(causal.log_a.max_abs_diff(&out.log_a) <= 1e-9, "chunk {chunk}");
        }
        assert!(chunked_state(inputs.k(), inputs.log_v(), 0).is_err());
    }

    #[test]
    fn state_size_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut s = StreamState::new(4, 3).unwrap();
        for t in 1..=10_000 {
            let k: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            s.update(&k, &v).unwrap();
            if [1, 100, 10_000].contains(&t) {
                assert_eq!(s.num_values(), 4 * (3 + 1));
                assert_eq!(s.to_bytes().len(), SNAPSHOT_HEADER_BYTES + 8 * 16);
            }
        }
        assert!(s.h_s().as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let empty = StreamState::new(2, 2).unwrap();
        assert_eq!(StreamState::from_bytes(&empty.to_bytes()).unwrap(), empty);
        let mut s = StreamState::new(3, 2).unwrap();
        s.update(&[1.0, -2.0, 0.5], &[NEG_INF, 0.3]).unwrap();
        s.update(&[0.1, 0.2, 0.3], &[NEG_INF, -4.0]).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], &3u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &f64::NEG_INFINITY.to_le_bytes());
        let back = StreamState::from_bytes(&bytes).unwrap();
        for (a, b) in back.h_s().as_slice().iter().zip(s.h_s().as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, s);
    }

    #[test]
    fn corrupt_snapshots_are_rejected() {
        let mut s = StreamState::new(2, 2).unwrap();
        s.update(&[0.0, 1.0], &[1.0, 2.0]).unwrap();
        let good = s.to_bytes();
        let bad = |bytes: &[u8]| matches!(StreamState::from_bytes(bytes), Err(Error::CorruptSnapshot(_)));

        assert!(bad(&good[..10]));
        assert!(bad(&good[..good.len() - 1]));
        let mut wrong_dim = good.clone();
        wrong_dim[0] = 3;
        assert!(bad(&wrong_dim));
        let mut zero_dim = good.clone();
        zero_dim[..8].copy_from_slice(&0u64.to_le_bytes());
        assert!(bad(&zero_dim));
        let mut huge = good.clone();
        huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(bad(&huge));
        let mut nan = good.clone();
        nan[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(bad(&nan));
        let mut zero_t = good.clone();
        zero_t[16..24].copy_from_slice(&0u64.to_le_bytes());
        assert!(bad(&zero_t));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn combine_is_associative(seed in any::<u64>(), sizes in (1usize..6, 1usize..6, 1usize..6), d_k in 1usize..5, d_v in 1usize..5) {
            let inputs = random_inputs(seed, 1, sizes.0 + sizes.1 + sizes.2, d_k, d_v);
            let (k, v) = (inputs.k(), inputs.log_v());
            let cuts = [0, sizes.0, sizes.0 + sizes.1, k.rows()];
            let parts: Vec<StreamState> = cuts
                .windows(2)
                .map(|w| StreamState::from_tokens(&k.slice_rows(w[0], w[1]), &v.slice_rows(w[0], w[1])).unwrap())
                .collect();
            let left = parts[0].combine(&parts[1]).unwrap().combine(&parts[2]).unwrap();
            let right = parts[0].combine(&parts[1].combine(&parts[2]).unwrap()).unwrap();
            let whole = StreamState::from_tokens(k, v).unwrap();
            prop_assert!(max_state_diff(&left, &right) <= 1e-12);
            prop_assert!(max_state_diff(&left, &whole) <= 1e-12);
        }

        #[test]
        fn streaming_matches_causal(seed in any::<u64>(), n in 1usize..40, d_k in 1usize..8, d_v in 1usize..8) {
            let inputs = random_inputs(seed, n, n, d_k, d_v);
            let batch = attention_logspace_causal(&inputs).unwrap();
            let streamed = stream_causal(&inputs).unwrap();
            prop_assert!(max_abs_diff(&batch.attention(), &streamed.attention()) <= 1e-9);
        }

        #[test]
        fn query_shift_cancels(seed in any::<u64>(), alpha in -5.0..5.0f64) {
            let inputs = random_inputs(seed, 1, 6, 4, 3);
            let s = StreamState::from_tokens(inputs.k(), inputs.log_v()).unwrap();
            let q = inputs.q().row(0);
            let shifted: Vec<f64> = q.iter().map(|x| x + alpha).collect();
            let a = s.query(q).unwrap().log_a();
            let b = s.query(&shifted).unwrap().log_a();
            prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
        }
    }
}
