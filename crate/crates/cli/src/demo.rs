//! `stream-demo`: absorb n tokens, snapshot, reload, absorb n more, and
//! compare against an uninterrupted run and the causal batch kernel.

use std::fs;
use std::path::{Path, PathBuf};

use logattn_core::logspace::max_abs_diff;
use logattn_core::{attention_logspace_causal, AttentionInputs, StreamState};
use serde::Serialize;

use crate::config::{generate_inputs, RunConfig};
use crate::error::HarnessError;

const RESUME_TOL: f64 = 1e-11;
pub const DEFAULT_SNAPSHOT_NAME: &str = "logattn-stream-demo.snap";

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub command: &'static str,
    pub config: RunConfig,
    pub snapshot_path: PathBuf,
    pub snapshot_bytes: usize,
    pub resumed_from_file: bool,
    pub tokens_before_snapshot: u64,
    pub tokens_total: u64,
    pub snapshot_round_trip_exact: bool,
    pub max_diff_vs_uninterrupted: f64,
    pub max_diff_vs_causal_batch: f64,
    pub resume_tolerance: f64,
    pub batch_tolerance: f64,
    pub passed: bool,
}

fn same_bits(a: &StreamState, b: &StreamState) -> bool {
    let bits = |s: &StreamState| -> Vec<u64> {
        s.h_s()
            .as_slice()
            .iter()
            .chain(s.h_z())
            .map(|x| x.to_bits())
            .collect()
    };
    a.len() == b.len() && a.d_k() == b.d_k() && a.d_v() == b.d_v() && bits(a) == bits(b)
}

/// Feeds rows `range` of the inputs through `state`, querying after each update.
fn absorb(
    state: &mut StreamState,
    inputs: &AttentionInputs,
    range: std::ops::Range<usize>,
    out: &mut Vec<f64>,
) -> Result<(), HarnessError> {
    for t in range {
        state.update(inputs.k().row(t), inputs.log_v().row(t))?;
        let step = state.query(inputs.q().row(t))?;
        out.extend(step.log_a().iter().map(|x| x.exp()));
    }
    Ok(())
}

fn load_snapshot(path: &Path, expected: &StreamState) -> Result<StreamState, HarnessError> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let loaded = StreamState::from_bytes(&bytes)?;
    if loaded.d_k() != expected.d_k() || loaded.d_v() != expected.d_v() || loaded.len() != expected.len() {
        return Err(HarnessError::Corrupt(format!(
            "snapshot {} holds d_K = {}, d_V = {}, t = {}; this run expects d_K = {}, d_V = {}, t = {}",
            path.display(),
            loaded.d_k(),
            loaded.d_v(),
            loaded.len(),
            expected.d_k(),
            expected.d_v(),
            expected.len()
        )));
    }
    Ok(loaded)
}

pub fn run_demo(
    config: &RunConfig,
    snapshot: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<DemoReport, HarnessError> {
    config.validate()?;
    let n = config.n;
    let inputs = generate_inputs(
        &mut config.rng(),
        2 * n,
        2 * n,
        config.d_k,
        config.d_v,
        config.value_range,
    );

    let mut full = StreamState::new(config.d_k, config.d_v)?;
    let mut uninterrupted = Vec::new();
    absorb(&mut full, &inputs, 0..2 * n, &mut uninterrupted)?;

    let mut first = StreamState::new(config.d_k, config.d_v)?;
    let mut resumed = Vec::new();
    absorb(&mut first, &inputs, 0..n, &mut resumed)?;

    let (path, restored) = match resume_from {
        Some(path) => (path.to_path_buf(), load_snapshot(path, &first)?),
        None => {
            let path = snapshot
                .map(Path::to_path_buf)
                .unwrap_or_else(|| std::env::temp_dir().join(DEFAULT_SNAPSHOT_NAME));
            fs::write(&path, first.to_bytes()).map_err(|e| HarnessError::io(&path, e))?;
            let restored = load_snapshot(&path, &first)?;
            (path, restored)
        }
    };
    let exact = same_bits(&first, &restored);

    let mut state = restored;
    absorb(&mut state, &inputs, n..2 * n, &mut resumed)?;

    let vs_full = max_abs_diff(&resumed, &uninterrupted)
        .max(full.h_s().max_abs_diff(state.h_s()))
        .max(max_abs_diff(full.h_z(), state.h_z()));
    let vs_batch = max_abs_diff(&resumed, &attention_logspace_causal(&inputs)?.attention());

    Ok(DemoReport {
        command: "stream-demo",
        config: config.clone(),
        snapshot_bytes: first.snapshot_len(),
        snapshot_path: path,
        resumed_from_file: resume_from.is_some(),
        tokens_before_snapshot: n as u64,
        tokens_total: state.len(),
        snapshot_round_trip_exact: exact,
        max_diff_vs_uninterrupted: vs_full,
        max_diff_vs_causal_batch: vs_batch,
        resume_tolerance: RESUME_TOL,
        batch_tolerance: config.tol,
        passed: exact && vs_full <= RESUME_TOL && vs_batch <= config.tol,
    })
}
