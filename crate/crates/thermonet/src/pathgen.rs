//! Quasi-random loading-path generation and labeled-dataset production.
//!
//! Deformation-gradient targets are drawn from a nine-dimensional Halton
//! point set (one prime base per component), connected by piecewise-linear
//! paths starting at the identity. Paths whose peak effective strain rate
//! falls outside the configured window are rejected and redrawn from the
//! same Halton stream; accepted paths are integrated through the classical
//! oracle to obtain damaged and undamaged stress labels.

use crate::dataset::{sequence_from_records, DatasetMeta, LoadedSequence};
use crate::oracle::{integrate_path, AmbientState, MaterialParams, OracleError};
use crate::tensor::{green_strain, FiberFrame, Tensor3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prime bases for the nine deformation-gradient components, row-major.
pub const HALTON_BASES: [u64; 9] = [2, 3, 5, 7, 11, 13, 17, 19, 23];

/// Target-set redraws allowed per sequence before giving up.
const MAX_ATTEMPTS: u64 = 1024;

#[derive(Error, Debug)]
pub enum PathgenError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Data(#[from] crate::dataset::DataError),
    #[error("invalid path config: {0}")]
    InvalidConfig(String),
    #[error(
        "dataset generation failed: {skipped} of {attempted} sequences skipped \
         (more than half); first failure: {first_failure}"
    )]
    GenerationFailure {
        skipped: usize,
        attempted: usize,
        first_failure: String,
    },
    #[error("no admissible path found for sequence {sequence} after {attempts} target redraws")]
    RateWindowExhausted { sequence: u64, attempts: u64 },
}

/// Discrete ambient-condition grid; sequences cycle through the cross
/// product in row-major order (w_w outermost, temperature innermost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbientGrid {
    pub w_w: Vec<f64>,
    pub v_np: Vec<f64>,
    pub v_f: Vec<f64>,
    pub temperature: Vec<f64>,
}

impl AmbientGrid {
    pub fn combos(&self) -> Vec<AmbientState> {
        let mut out = Vec::new();
        for &w_w in &self.w_w {
            for &v_np in &self.v_np {
                for &v_f in &self.v_f {
                    for &temperature in &self.temperature {
                        out.push(AmbientState {
                            w_w,
                            v_np,
                            v_f,
                            temperature,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Generation settings for one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    /// Bounds for the diagonal components F_ii.
    pub bounds_diag: [f64; 2],
    /// Bounds for the off-diagonal components F_ij, i != j.
    pub bounds_offdiag: [f64; 2],
    /// Number of target points each path visits.
    pub points_p: usize,
    /// Interpolation frames per segment.
    pub steps_per_segment: usize,
    /// Timestep in seconds.
    pub dt: f64,
    /// Effective strain-rate window (exclusive bounds).
    pub rate_min: f64,
    pub rate_max: f64,
    /// Sequences to emit.
    pub sequence_count: usize,
    /// Offset into the Halton streams; fixed seed for reproducibility.
    pub halton_seed_offset: u64,
    pub ambient_grid: AmbientGrid,
}

impl PathConfig {
    /// Training bounds: diagonal [0.98, 1.02], off-diagonal [-0.02, 0.02].
    pub fn default_training() -> Self {
        PathConfig {
            bounds_diag: [0.98, 1.02],
            bounds_offdiag: [-0.02, 0.02],
            points_p: 2,
            steps_per_segment: 100,
            dt: 1.0,
            rate_min: 1e-5,
            rate_max: 1e-3,
            sequence_count: 1000,
            halton_seed_offset: 0,
            ambient_grid: AmbientGrid {
                w_w: vec![0.0, 0.05],
                v_np: vec![0.05, 0.2],
                v_f: vec![0.125],
                temperature: vec![296.15],
            },
        }
    }

    /// Switches to the wider extrapolation bounds
    /// (diagonal [0.97, 1.03], off-diagonal [-0.03, 0.03]).
    pub fn with_extrapolation_bounds(mut self) -> Self {
        self.bounds_diag = [0.97, 1.03];
        self.bounds_offdiag = [-0.03, 0.03];
        self
    }

    pub fn validate(&self) -> Result<(), PathgenError> {
        if self.points_p == 0 || self.steps_per_segment == 0 {
            return Err(PathgenError::InvalidConfig(
                "points_p and steps_per_segment must be positive".into(),
            ));
        }
        if self.dt <= 0.0 {
            return Err(PathgenError::InvalidConfig("dt must be positive".into()));
        }
        if self.rate_min >= self.rate_max {
            return Err(PathgenError::InvalidConfig(
                "rate_min must be below rate_max".into(),
            ));
        }
        if self.bounds_diag[0] >= self.bounds_diag[1]
            || self.bounds_offdiag[0] >= self.bounds_offdiag[1]
        {
            return Err(PathgenError::InvalidConfig("empty bounds interval".into()));
        }
        if self.ambient_grid.combos().is_empty() {
            return Err(PathgenError::InvalidConfig("empty ambient grid".into()));
        }
        Ok(())
    }
}

/// Radical inverse of `index` in the given base: the Halton sequence value.
pub fn halton(index: u64, base: u64) -> f64 {
    debug_assert!(index >= 1 && base >= 2);
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    let b = base as f64;
    while i > 0 {
        f /= b;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// `points_p` quasi-random targets in the 9-dimensional deformation box for
/// the given sequence and redraw attempt. Component k draws from the Halton
/// stream with base `HALTON_BASES[k]`; the stream position is a pure
/// function of (halton_seed_offset, sequence_index, attempt).
pub fn sample_targets(config: &PathConfig, sequence_index: u64, attempt: u64) -> Vec<[f64; 9]> {
    let start =
        config.halton_seed_offset + (sequence_index * MAX_ATTEMPTS + attempt) * config.points_p as u64;
    (0..config.points_p as u64)
        .map(|j| {
            let idx = start + j + 1; // Halton indices start at 1
            let mut tgt = [0.0; 9];
            for (k, t) in tgt.iter_mut().enumerate() {
                let u = halton(idx, HALTON_BASES[k]);
                let diag = k % 4 == 0;
                let [lo, hi] = if diag {
                    config.bounds_diag
                } else {
                    config.bounds_offdiag
                };
                *t = lo + u * (hi - lo);
            }
            tgt
        })
        .collect()
}

/// Piecewise-linear path through the targets, starting exactly at the
/// identity, with `steps_per_segment` frames per segment.
pub fn build_path(targets: &[[f64; 9]], config: &PathConfig) -> Vec<Tensor3> {
    let mut frames = Vec::with_capacity(1 + targets.len() * config.steps_per_segment);
    let mut prev = Tensor3::identity().0;
    frames.push(Tensor3(prev));
    for tgt in targets {
        for s in 1..=config.steps_per_segment {
            let t = s as f64 / config.steps_per_segment as f64;
            let mut frame = [0.0; 9];
            for k in 0..9 {
                frame[k] = prev[k] + t * (tgt[k] - prev[k]);
            }
            frames.push(Tensor3(frame));
        }
        prev = *tgt;
    }
    frames
}

/// Representative strain rate of a path: the largest per-step change of
/// the Green-strain Frobenius norm divided by dt.
pub fn effective_rate(frames: &[Tensor3], dt: f64) -> f64 {
    let mut prev = green_strain(&frames[0]).frobenius_norm();
    let mut max_rate = 0.0f64;
    for f in &frames[1..] {
        let cur = green_strain(f).frobenius_norm();
        max_rate = max_rate.max((cur - prev).abs() / dt);
        prev = cur;
    }
    max_rate
}

/// Outcome of generating one sequence.
enum SequenceOutcome {
    Emitted {
        sequence: Box<LoadedSequence>,
        rejected: u64,
    },
    Skipped {
        reason: String,
    },
}

fn generate_sequence(
    config: &PathConfig,
    params: &MaterialParams,
    ambient: &AmbientState,
    sequence_index: u64,
) -> Result<SequenceOutcome, PathgenError> {
    for attempt in 0..MAX_ATTEMPTS {
        let targets = sample_targets(config, sequence_index, attempt);
        let frames = build_path(&targets, config);
        if frames.iter().any(|f| f.det() <= 0.0) {
            continue;
        }
        let rate = effective_rate(&frames, config.dt);
        if rate <= config.rate_min || rate >= config.rate_max {
            continue;
        }
        return match integrate_path(&frames, config.dt, ambient, params) {
            Ok(records) => Ok(SequenceOutcome::Emitted {
                sequence: Box::new(sequence_from_records(
                    sequence_index,
                    config,
                    ambient,
                    &records,
                    config.dt,
                )),
                rejected: attempt,
            }),
            Err(e) => Ok(SequenceOutcome::Skipped {
                reason: format!("oracle integration failed: {e}"),
            }),
        };
    }
    Err(PathgenError::RateWindowExhausted {
        sequence: sequence_index,
        attempts: MAX_ATTEMPTS,
    })
}

/// A generated dataset split with its scaling sidecar.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub sequences: Vec<LoadedSequence>,
    pub meta: DatasetMeta,
}

/// Generates `config.sequence_count` labeled sequences.
///
/// Ambient conditions cycle round-robin (by sequence index) through the
/// grid. Sequences whose oracle integration fails are skipped with a logged
/// diagnostic; generation aborts if more than half of the attempted
/// sequences skip. Output ordering is by sequence index regardless of the
/// parallel completion order, so the dataset is a pure function of
/// (config, params).
pub fn generate_dataset(
    config: &PathConfig,
    params: &MaterialParams,
) -> Result<GeneratedDataset, PathgenError> {
    config.validate()?;
    params
        .validate()
        .map_err(PathgenError::Oracle)?;
    let combos = config.ambient_grid.combos();
    for amb in &combos {
        amb.validate().map_err(PathgenError::Oracle)?;
    }

    let mut sequences: Vec<LoadedSequence> = Vec::with_capacity(config.sequence_count);
    let mut rejected_paths = 0u64;
    let mut skipped = 0usize;
    let mut attempted = 0usize;
    let mut first_failure = String::new();
    let mut next_index = 0u64;
    while sequences.len() < config.sequence_count {
        let missing = config.sequence_count - sequences.len();
        let block: Vec<u64> = (next_index..next_index + missing as u64).collect();
        next_index += missing as u64;
        attempted += block.len();
        let outcomes: Vec<(u64, Result<SequenceOutcome, PathgenError>)> = block
            .par_iter()
            .map(|&idx| {
                let ambient = combos[(idx as usize) % combos.len()];
                (idx, generate_sequence(config, params, &ambient, idx))
            })
            .collect();
        for (idx, outcome) in outcomes {
            match outcome? {
                SequenceOutcome::Emitted { sequence, rejected } => {
                    rejected_paths += rejected;
                    sequences.push(*sequence);
                }
                SequenceOutcome::Skipped { reason } => {
                    skipped += 1;
                    if first_failure.is_empty() {
                        first_failure = reason.clone();
                    }
                    log::warn!("sequence {idx} skipped: {reason}");
                }
            }
        }
        if skipped * 2 > attempted {
            return Err(PathgenError::GenerationFailure {
                skipped,
                attempted,
                first_failure,
            });
        }
    }
    sequences.sort_by_key(|s| s.index);

    let frame = FiberFrame::two_families(params.a0, params.g0)
        .map_err(OracleError::from)?;
    let meta = DatasetMeta::fit(
        &sequences,
        &frame,
        config,
        rejected_paths as usize,
        skipped,
    )?;
    Ok(GeneratedDataset { sequences, meta })
}
