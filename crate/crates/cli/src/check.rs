//! `check`: runs every cross-form equivalence and invariant at the configured
//! sizes and reports the worst observed error for each.
//!
//! The main inputs come from [`RunConfig::inputs`]. Auxiliary draws (shifts,
//! monoid operands, gradient instances, large-magnitude inputs) come from a
//! second ChaCha8 stream seeded with `seed ^ AUX_SEED_MIX`, so the report is a
//! pure function of the configuration.

use logattn_core::logspace::{is_log_value, lcse_over_axis, lse_over_axis, max_abs_diff};
use logattn_core::{
    attention_logspace_causal, attention_logspace_noncausal, attention_quadratic_reference,
    backward_logspace_noncausal, chunked_causal, chunked_state, finite_difference_oracle, logadd,
    softmax_weights, stream_causal, AttentionInputs, Axis, Matrix, StreamState, NEG_INF,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{generate_inputs, uniform_matrix, RunConfig, IDENTITY_TOL};
use crate::error::HarnessError;

pub const AUX_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;
const SCAN_TOL: f64 = 1e-11;
const GRAD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const GRAD_MAX_DIM: usize = 8;
const GRAD_RANGE: f64 = 2.0;
const ROBUST_RANGE: f64 = 30.0;

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl PropertyResult {
    fn within(name: &'static str, max_error: f64, tolerance: f64) -> Self {
        PropertyResult {
            name,
            max_error,
            tolerance,
            // NaN errors fail
            passed: max_error <= tolerance,
            note: None,
        }
    }

    fn with_note(mut self, note: String) -> Self {
        self.note = Some(note);
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub command: &'static str,
    pub config: RunConfig,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

fn state_diff(a: &StreamState, b: &StreamState) -> f64 {
    let t = if a.len() == b.len() { 0.0 } else { f64::INFINITY };
    a.h_s()
        .max_abs_diff(b.h_s())
        .max(max_abs_diff(a.h_z(), b.h_z()))
        .max(t)
}

fn with_parts(
    inputs: &AttentionInputs,
    f: impl FnOnce(Matrix, Matrix, Matrix) -> (Matrix, Matrix, Matrix),
) -> Result<AttentionInputs, HarnessError> {
    let (q, k, v) = inputs.clone().into_parts();
    let (q, k, v) = f(q, k, v);
    Ok(AttentionInputs::new(q, k, v)?)
}

pub fn run_check(config: &RunConfig) -> Result<CheckReport, HarnessError> {
    config.validate()?;
    let tol = config.tol;
    let inputs = config.inputs();
    let mut aux = ChaCha8Rng::seed_from_u64(config.seed ^ AUX_SEED_MIX);
    let mut props = Vec::new();

    log_space_properties(&mut aux, &inputs, &mut props)?;
    kernel_properties(&mut aux, &inputs, tol, &mut props)?;
    streaming_properties(&mut aux, config, &inputs, tol, &mut props)?;
    gradient_properties(&mut aux, config, &mut props)?;
    robustness_property(&mut aux, config, &mut props)?;

    Ok(CheckReport {
        command: "check",
        config: config.clone(),
        passed: props.iter().all(|p| p.passed),
        properties: props,
    })
}

fn log_space_properties(
    aux: &mut ChaCha8Rng,
    inputs: &AttentionInputs,
    props: &mut Vec<PropertyResult>,
) -> Result<(), HarnessError> {
    let (mut comm, mut assoc, mut ident) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..256 {
        let [a, b, c]: [f64; 3] = std::array::from_fn(|_| aux.gen_range(-50.0..=50.0));
        comm = comm.max((logadd(a, b) - logadd(b, a)).abs());
        assoc = assoc.max((logadd(logadd(a, b), c) - logadd(a, logadd(b, c))).abs());
        ident = ident
            .max((logadd(NEG_INF, a) - a).abs())
            .max((logadd(a, NEG_INF) - a).abs());
    }
    props.push(PropertyResult::within("logadd_commutative", comm, IDENTITY_TOL));
    props.push(PropertyResult::within("logadd_associative", assoc, IDENTITY_TOL));
    props.push(PropertyResult::within("logadd_identity_exact", ident, 0.0));

    // lse over the key rows, three ways
    let k = inputs.k();
    let by_row = lse_over_axis(k, Axis::Cols)?;
    let folded: Vec<f64> = k
        .iter_rows()
        .map(|r| r.iter().copied().fold(NEG_INF, logadd))
        .collect();
    props.push(PropertyResult::within(
        "lse_equals_logadd_fold",
        max_abs_diff(&by_row, &folded),
        IDENTITY_TOL,
    ));

    let alpha = aux.gen_range(-10.0..=10.0);
    let shifted = lse_over_axis(&k.map(|x| x + alpha)?, Axis::Cols)?;
    let expect: Vec<f64> = by_row.iter().map(|x| x + alpha).collect();
    props.push(PropertyResult::within(
        "lse_shift_covariance",
        max_abs_diff(&shifted, &expect),
        IDENTITY_TOL,
    ));

    let scanned = lcse_over_axis(k, Axis::Rows)?;
    let totals = lse_over_axis(k, Axis::Rows)?;
    let last = scanned.row(scanned.rows() - 1);
    let first_exact = scanned.row(0) == k.row(0);
    props.push(
        PropertyResult::within(
            "lcse_last_equals_lse",
            if first_exact {
                max_abs_diff(last, &totals)
            } else {
                f64::INFINITY
            },
            IDENTITY_TOL,
        )
        .with_note("first scanned row must equal the input's first row exactly".into()),
    );
    Ok(())
}

fn kernel_properties(
    aux: &mut ChaCha8Rng,
    inputs: &AttentionInputs,
    tol: f64,
    props: &mut Vec<PropertyResult>,
) -> Result<(), HarnessError> {
    let reference = attention_quadratic_reference(inputs, 0.0)?;
    let noncausal = attention_logspace_noncausal(inputs)?;
    let causal = attention_logspace_causal(inputs)?;
    let n = inputs.n_k();
    let d_v = inputs.d_v();

    props.push(PropertyResult::within(
        "quadratic_vs_logspace_noncausal",
        max_abs_diff(&reference.attention(), &noncausal.attention()),
        tol,
    ));

    if n == 1 {
        let v = inputs.log_v().exp();
        let worst = (0..inputs.n_q())
            .map(|i| max_abs_diff(&noncausal.attention()[i * d_v..(i + 1) * d_v], &v))
            .fold(0.0, f64::max);
        props.push(PropertyResult::within(
            "single_token_returns_value",
            worst,
            IDENTITY_TOL,
        ));
    }

    let weights = softmax_weights(inputs, 0.0)?;
    let row_sum_err = weights
        .iter_rows()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    props.push(PropertyResult::within(
        "softmax_rows_sum_to_one",
        row_sum_err,
        IDENTITY_TOL,
    ));

    let mut cancel = 0.0_f64;
    for c in [-3.0, 7.3] {
        let out = attention_quadratic_reference(inputs, c)?;
        cancel = cancel
            .max(reference.log_a.max_abs_diff(&out.log_a))
            .max(weights.max_abs_diff(&softmax_weights(inputs, c)?));
    }
    props.push(PropertyResult::within(
        "scaling_constant_cancellation",
        cancel,
        IDENTITY_TOL,
    ));

    let row = aux.gen_range(0..inputs.n_q());
    let alpha = aux.gen_range(-5.0..=5.0);
    let q_shift = with_parts(inputs, |q, k, v| {
        let q = Matrix::from_fn(q.rows(), q.cols(), |i, a| {
            q.get(i, a) + if i == row { alpha } else { 0.0 }
        })
        .expect("finite");
        (q, k, v)
    })?;
    let out = attention_logspace_noncausal(&q_shift)?;
    props.push(PropertyResult::within(
        "query_shift_invariance",
        noncausal.log_a.max_abs_diff(&out.log_a),
        IDENTITY_TOL,
    ));

    let delta = aux.gen_range(-5.0..=5.0);
    let k_shift = with_parts(inputs, |q, k, v| (q, k.map(|x| x + delta).expect("finite"), v))?;
    let out = attention_logspace_noncausal(&k_shift)?;
    props.push(PropertyResult::within(
        "key_shift_invariance",
        noncausal.log_a.max_abs_diff(&out.log_a),
        IDENTITY_TOL,
    ));

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, aux.gen_range(0..=i));
    }
    let permuted = with_parts(inputs, |q, k, v| {
        (q, k.permute_rows(&order), v.permute_rows(&order))
    })?;
    let out = attention_logspace_noncausal(&permuted)?;
    props.push(PropertyResult::within(
        "permutation_equivariance",
        noncausal.log_a.max_abs_diff(&out.log_a),
        IDENTITY_TOL,
    ));

    // relative overshoot past the column range of V
    let attn = noncausal.attention();
    let mut overshoot = 0.0_f64;
    let mut nonpositive = 0usize;
    for j in 0..d_v {
        let lo = inputs
            .log_v()
            .column(j)
            .map(f64::exp)
            .fold(f64::INFINITY, f64::min);
        let hi = inputs.log_v().column(j).map(f64::exp).fold(0.0, f64::max);
        for i in 0..inputs.n_q() {
            let x = attn[i * d_v + j];
            overshoot = overshoot.max((lo - x) / lo).max((x - hi) / hi);
            nonpositive += usize::from(x.is_nan() || x <= 0.0);
        }
    }
    props.push(PropertyResult::within("convexity_bound", overshoot, IDENTITY_TOL));
    let bad_z = noncausal.log_z.iter().filter(|z| !z.is_finite()).count();
    props.push(PropertyResult::within(
        "log_z_finite_and_attention_positive",
        (bad_z + nonpositive) as f64,
        0.0,
    ));

    let mut prefix_err = 0.0_f64;
    for t in 1..=n {
        let prefix = attention_logspace_noncausal(&inputs.prefix(t))?;
        let a: Vec<f64> = causal.log_a.row(t - 1).iter().map(|x| x.exp()).collect();
        let b: Vec<f64> = prefix.log_a.row(t - 1).iter().map(|x| x.exp()).collect();
        prefix_err = prefix_err.max(max_abs_diff(&a, &b));
    }
    props.push(PropertyResult::within(
        "causal_matches_prefix_noncausal",
        prefix_err,
        tol,
    ));
    Ok(())
}

fn streaming_properties(
    aux: &mut ChaCha8Rng,
    config: &RunConfig,
    inputs: &AttentionInputs,
    tol: f64,
    props: &mut Vec<PropertyResult>,
) -> Result<(), HarnessError> {
    let (k, v) = (inputs.k(), inputs.log_v());
    let causal = attention_logspace_causal(inputs)?;
    let streamed = stream_causal(inputs)?;
    props.push(PropertyResult::within(
        "streaming_matches_causal",
        max_abs_diff(&causal.attention(), &streamed.attention()),
        tol,
    ));

    let state = StreamState::from_tokens(k, v)?;
    let noncausal = attention_logspace_noncausal(inputs)?;
    props.push(PropertyResult::within(
        "query_all_matches_noncausal",
        max_abs_diff(&state.query_all(inputs.q())?.attention(), &noncausal.attention()),
        tol,
    ));

    let batch_s = Matrix::from_fn(config.d_k, config.d_v, |a, b| {
        let terms = Matrix::new(
            1,
            k.rows(),
            (0..k.rows()).map(|t| k.get(t, a) + v.get(t, b)).collect(),
        )
        .expect("log values");
        lse_over_axis(&terms, Axis::Cols).expect("nonempty")[0]
    })?;
    let batch_z = lse_over_axis(k, Axis::Rows)?;
    props.push(PropertyResult::within(
        "state_matches_batch_lse",
        state
            .h_s()
            .max_abs_diff(&batch_s)
            .max(max_abs_diff(state.h_z(), &batch_z)),
        IDENTITY_TOL,
    ));

    let empty = StreamState::new(config.d_k, config.d_v)?;
    let identity_exact = empty.combine(&state)? == state && state.combine(&empty)? == state;
    props.push(PropertyResult::within(
        "state_combine_identity_exact",
        if identity_exact { 0.0 } else { 1.0 },
        0.0,
    ));

    // three independent chunks, so this holds even for n = 1
    let chunk = |rng: &mut ChaCha8Rng| -> Result<StreamState, HarnessError> {
        let len = rng.gen_range(1..=8);
        let x = generate_inputs(rng, 1, len, config.d_k, config.d_v, config.value_range);
        Ok(StreamState::from_tokens(x.k(), x.log_v())?)
    };
    let (a, b, c) = (chunk(aux)?, chunk(aux)?, chunk(aux)?);
    let left = a.combine(&b)?.combine(&c)?;
    let right = a.combine(&b.combine(&c)?)?;
    props.push(PropertyResult::within(
        "state_combine_associative",
        state_diff(&left, &right),
        IDENTITY_TOL,
    ));

    let mut sizes = vec![1, 2, 7, config.chunk];
    sizes.dedup();
    let mut scan_err = 0.0_f64;
    let mut chunked_err = 0.0_f64;
    for &size in &sizes {
        scan_err = scan_err.max(state_diff(&chunked_state(k, v, size)?, &state));
        chunked_err = chunked_err.max(max_abs_diff(
            &chunked_causal(inputs, size)?.attention(),
            &causal.attention(),
        ));
    }
    let chunk_note = format!("chunk sizes {sizes:?}");
    props.push(
        PropertyResult::within("chunked_scan_matches_sequential", scan_err, SCAN_TOL)
            .with_note(chunk_note.clone()),
    );
    props.push(
        PropertyResult::within("chunked_causal_matches_causal", chunked_err, tol).with_note(chunk_note),
    );

    let mut order: Vec<usize> = (0..k.rows()).collect();
    order.reverse();
    let reordered = StreamState::from_tokens(&k.permute_rows(&order), &v.permute_rows(&order))?;
    props.push(PropertyResult::within(
        "state_insensitive_to_token_order",
        state_diff(&reordered, &state),
        IDENTITY_TOL,
    ));

    let expected = config.d_k * (config.d_v + 1);
    let mut growing = StreamState::new(config.d_k, config.d_v)?;
    let mut size_err = 0usize;
    for t in 1..=10_000 {
        let kt: Vec<f64> = (0..config.d_k)
            .map(|_| aux.gen_range(-config.value_range..=config.value_range))
            .collect();
        let vt: Vec<f64> = (0..config.d_v)
            .map(|_| aux.gen_range(-config.value_range..=config.value_range))
            .collect();
        growing.update(&kt, &vt)?;
        if [1, 100, 10_000].contains(&t) {
            size_err = size_err.max(growing.num_values().abs_diff(expected));
            size_err = size_err.max(growing.to_bytes().len().abs_diff(growing.snapshot_len()));
        }
    }
    props.push(
        PropertyResult::within("constant_state_size", size_err as f64, 0.0)
            .with_note(format!("{expected} values after t in {{1, 100, 10000}}")),
    );

    let restored = StreamState::from_bytes(&state.to_bytes())?;
    let bit_exact = restored
        .h_s()
        .as_slice()
        .iter()
        .chain(restored.h_z())
        .zip(state.h_s().as_slice().iter().chain(state.h_z()))
        .all(|(x, y)| x.to_bits() == y.to_bits())
        && restored.len() == state.len();
    props.push(PropertyResult::within(
        "snapshot_round_trip_bit_exact",
        if bit_exact { 0.0 } else { 1.0 },
        0.0,
    ));
    Ok(())
}

fn gradient_properties(
    aux: &mut ChaCha8Rng,
    config: &RunConfig,
    props: &mut Vec<PropertyResult>,
) -> Result<(), HarnessError> {
    let n = config.n.min(GRAD_MAX_DIM);
    let (d_k, d_v) = (config.d_k.min(GRAD_MAX_DIM), config.d_v.min(GRAD_MAX_DIM));
    let x = generate_inputs(aux, n, n, d_k, d_v, GRAD_RANGE);
    let g = uniform_matrix(aux, n, d_v, GRAD_RANGE);
    let analytic = backward_logspace_noncausal(&x, &g)?;
    let numeric = finite_difference_oracle(&x, &g, FD_STEP)?;
    let per_entry = analytic.max_relative_error(&numeric);
    props.push(
        PropertyResult::within("gradient_matches_finite_differences", analytic.max_scaled_error(&numeric), GRAD_TOL)
            .with_note(format!(
                "scale-normalized; per-entry relative error with 1e-8 floor = {per_entry:.3e}; dims {n}x{n}x{d_k}x{d_v}, step {FD_STEP:e}"
            )),
    );

    let row_sum = analytic
        .d_q
        .iter_rows()
        .map(|r| r.iter().sum::<f64>().abs())
        .fold(0.0, f64::max);
    props.push(PropertyResult::within(
        "query_gradient_rows_sum_to_zero",
        row_sum,
        1e-10,
    ));
    Ok(())
}

fn robustness_property(
    aux: &mut ChaCha8Rng,
    config: &RunConfig,
    props: &mut Vec<PropertyResult>,
) -> Result<(), HarnessError> {
    let n = config.n;
    let q = uniform_matrix(aux, n, config.d_k, ROBUST_RANGE);
    let k = uniform_matrix(aux, n, config.d_k, ROBUST_RANGE);
    let v = Matrix::from_fn(n, config.d_v, |_, j| {
        if j == 0 || aux.gen_bool(0.25) {
            NEG_INF
        } else {
            aux.gen_range(-ROBUST_RANGE..=ROBUST_RANGE)
        }
    })?;
    let g = uniform_matrix(aux, n, config.d_v, ROBUST_RANGE);
    let x = AttentionInputs::new(q, k, v)?;

    let outputs = [
        attention_quadratic_reference(&x, 0.0)?,
        attention_logspace_noncausal(&x)?,
        attention_logspace_causal(&x)?,
        stream_causal(&x)?,
        StreamState::from_tokens(x.k(), x.log_v())?.query_all(x.q())?,
    ];
    let mut bad = 0usize;
    for out in &outputs {
        bad += out
            .log_s
            .as_slice()
            .iter()
            .chain(out.log_a.as_slice())
            .filter(|&&y| !is_log_value(y))
            .count();
        bad += out.log_z.iter().filter(|z| !z.is_finite()).count();
    }
    if !backward_logspace_noncausal(&x, &g)?.is_finite() {
        bad += 1;
    }
    props.push(
        PropertyResult::within("no_nan_or_pos_inf_at_magnitude_30", bad as f64, 0.0)
            .with_note("inputs in [-30, 30], log V with NEG_INF entries".into()),
    );
    Ok(())
}
