//! `bench`: per-token cost and state footprint as the sequence grows.
//!
//! `state_bytes` is what each form keeps alive to produce its outputs:
//! the n x n weight matrix for `quadratic`, the d_K cumulative n x d_V
//! matrices plus the n x d_K normaliser for `logspace` (causal), and the
//! snapshot size for `streaming`.

use std::io::Write;
use std::time::Instant;

use logattn_core::{attention_logspace_causal, attention_quadratic_reference, AttentionInputs, StreamState};
use serde::Serialize;

use crate::config::{generate_inputs, Form, RunConfig};
use crate::error::HarnessError;

pub const MIN_LOG2_N: u32 = 7;
pub const MAX_LOG2_N: u32 = 14;
pub const QUADRATIC_MAX_N: usize = 1024;
pub const WARMUP_RUNS: usize = 2;
pub const TIMED_RUNS: usize = 9;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub form: Form,
    pub per_token_ns: f64,
    pub state_bytes: usize,
}

/// Powers of two from 2^7 up to `min(2^14, max_n)`. Smaller `max_n` gives just `max_n`.
pub fn sweep_lengths(max_n: usize) -> Vec<usize> {
    let cap = max_n.min(1 << MAX_LOG2_N);
    let lengths: Vec<usize> = (MIN_LOG2_N..=MAX_LOG2_N)
        .map(|p| 1usize << p)
        .filter(|&n| n <= cap)
        .collect();
    if lengths.is_empty() {
        vec![cap]
    } else {
        lengths
    }
}

fn forms(selected: Option<Form>) -> Vec<Form> {
    match selected {
        Some(f) => vec![f],
        None => vec![Form::Quadratic, Form::Logspace, Form::Streaming],
    }
}

fn median_ns(mut run: impl FnMut() -> Result<(), HarnessError>) -> Result<f64, HarnessError> {
    for _ in 0..WARMUP_RUNS {
        run()?;
    }
    let mut samples = Vec::with_capacity(TIMED_RUNS);
    for _ in 0..TIMED_RUNS {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_nanos() as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[TIMED_RUNS / 2])
}

fn stream_all(inputs: &AttentionInputs) -> Result<(), HarnessError> {
    let mut state = StreamState::new(inputs.d_k(), inputs.d_v())?;
    for t in 0..inputs.n_k() {
        state.update(inputs.k().row(t), inputs.log_v().row(t))?;
        std::hint::black_box(state.query(inputs.q().row(t))?);
    }
    Ok(())
}

fn state_bytes(form: Form, n: usize, d_k: usize, d_v: usize) -> usize {
    let f = std::mem::size_of::<f64>();
    match form {
        Form::Quadratic => n * n * f,
        Form::Logspace => (d_k * n * d_v + n * d_k) * f,
        Form::Streaming => logattn_core::streaming::SNAPSHOT_HEADER_BYTES + d_k * (d_v + 1) * f,
    }
}

pub fn run_bench(config: &RunConfig) -> Result<Vec<BenchRow>, HarnessError> {
    config.validate()?;
    let mut rng = config.rng();
    let mut rows = Vec::new();
    for n in sweep_lengths(config.n) {
        let inputs = generate_inputs(&mut rng, n, n, config.d_k, config.d_v, config.value_range);
        for form in forms(config.form) {
            let total = match form {
                Form::Quadratic if n > QUADRATIC_MAX_N => continue,
                Form::Quadratic => median_ns(|| {
                    std::hint::black_box(attention_quadratic_reference(&inputs, 0.0)?);
                    Ok(())
                })?,
                Form::Logspace => median_ns(|| {
                    std::hint::black_box(attention_logspace_causal(&inputs)?);
                    Ok(())
                })?,
                Form::Streaming => median_ns(|| stream_all(&inputs))?,
            };
            rows.push(BenchRow {
                n,
                form,
                per_token_ns: total / n as f64,
                state_bytes: state_bytes(form, n, config.d_k, config.d_v),
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}
