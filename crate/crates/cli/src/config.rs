use std::fmt;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use logattn_core::{AttentionInputs, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::HarnessError;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Quadratic,
    Logspace,
    Streaming,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Form::Quadratic => "quadratic",
            Form::Logspace => "logspace",
            Form::Streaming => "streaming",
        })
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args, Serialize)]
pub struct RunConfig {
    /// Sequence length (for bench: the largest length swept)
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Key/query feature count
    #[arg(long = "dk", default_value_t = 8)]
    pub d_k: usize,
    /// Value feature count
    #[arg(long = "dv", default_value_t = 8)]
    pub d_v: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inputs are drawn uniformly from [-range, range]
    #[arg(long = "range", default_value_t = 5.0)]
    pub value_range: f64,
    /// Cross-form tolerance on exp(log A)
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Chunk length for chunked scans
    #[arg(long, default_value_t = logattn_core::streaming::DEFAULT_CHUNK)]
    pub chunk: usize,
    /// Restrict bench to one form
    #[arg(long, value_enum)]
    pub form: Option<Form>,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 32,
            d_k: 8,
            d_v: 8,
            seed: 0,
            value_range: 5.0,
            tol: DEFAULT_TOL,
            chunk: logattn_core::streaming::DEFAULT_CHUNK,
            form: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let usage = |msg: &str| Err(HarnessError::Usage(msg.to_string()));
        if self.n == 0 {
            return usage("empty context: --n must be at least 1");
        }
        if self.d_k == 0 || self.d_v == 0 {
            return usage("--dk and --dv must be at least 1");
        }
        if !(self.value_range.is_finite() && self.value_range > 0.0) {
            return usage("--range must be positive and finite");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return usage("--tol must be positive and finite");
        }
        if self.chunk == 0 {
            return usage("--chunk must be at least 1");
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// The run's inputs: `n` queries, keys and log-values.
    pub fn inputs(&self) -> AttentionInputs {
        generate_inputs(
            &mut self.rng(),
            self.n,
            self.n,
            self.d_k,
            self.d_v,
            self.value_range,
        )
    }
}

/// Uniform matrix on `[-range, range]`, filled row-major.
pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, range: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-range..=range)).expect("finite draws")
}

/// Draws Q (`n_q x d_k`), then K (`n_k x d_k`), then log V (`n_k x d_v`) from one stream.
pub fn generate_inputs(
    rng: &mut ChaCha8Rng,
    n_q: usize,
    n_k: usize,
    d_k: usize,
    d_v: usize,
    range: f64,
) -> AttentionInputs {
    let q = uniform_matrix(rng, n_q, d_k, range);
    let k = uniform_matrix(rng, n_k, d_k, range);
    let v = uniform_matrix(rng, n_k, d_v, range);
    AttentionInputs::new(q, k, v).expect("generated shapes are consistent")
}
