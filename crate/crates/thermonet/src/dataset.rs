//! Labeled sequence datasets: record layout, line-delimited JSON storage,
//! input-feature extraction, and the scaling sidecar.
//!
//! A dataset file holds one sequence per line. Every record echoes the
//! generation config and carries its ambient features plus per-step arrays:
//! the deformation gradient (9 values, row-major), the timestep, the damaged
//! and undamaged Cauchy stress (6 values each, order 11 22 33 12 13 23) and
//! the damage scalar. A JSON sidecar stores per-feature minima/maxima for
//! input scaling and the stress ranges used to normalize error metrics.

use crate::oracle::AmbientState;
use crate::pathgen::PathConfig;
use crate::tensor::{from_voigt, invariants, to_voigt, FiberFrame, Tensor3, TensorError};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One timestep of a loaded sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceStep {
    /// Deformation gradient, row-major.
    pub f: [f64; 9],
    /// Timestep length in seconds.
    pub dt: f64,
    /// Damaged total Cauchy stress (MPa), Voigt order.
    pub sigma: [f64; 6],
    /// Undamaged total Cauchy stress (MPa), Voigt order.
    pub sigma_undamaged: [f64; 6],
    /// Damage scalar.
    pub d: f64,
}

impl SequenceStep {
    pub fn f_tensor(&self) -> Tensor3 {
        Tensor3(self.f)
    }

    pub fn sigma_tensor(&self) -> Tensor3 {
        from_voigt(&self.sigma)
    }

    pub fn sigma_undamaged_tensor(&self) -> Tensor3 {
        from_voigt(&self.sigma_undamaged)
    }
}

/// A loading sequence with oracle labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedSequence {
    pub index: u64,
    pub config: PathConfig,
    pub ambient: AmbientState,
    pub steps: Vec<SequenceStep>,
}

/// Names of the model input features, in storage order. The first eight are
/// the invariants of C for the two-family frame; isotropic models consume
/// only the first three plus the scalar tail.
pub const FEATURE_NAMES: [&str; 13] = [
    "i1", "i2", "i3", "i4", "i5", "i6", "i7", "i8", "dt", "w_w", "v_np", "v_f", "temperature",
];

/// Full 13-entry feature vector for one step.
pub fn step_features(
    f: &Tensor3,
    dt: f64,
    ambient: &AmbientState,
    frame: &FiberFrame,
) -> Result<Vec<f64>, TensorError> {
    let c = crate::tensor::right_cauchy_green(f)?;
    let inv = invariants(&c, frame)?;
    if inv.len() != 8 {
        return Err(TensorError::NonUnitFiber { norm: 0.0 });
    }
    let mut out = inv;
    out.push(dt);
    out.push(ambient.w_w);
    out.push(ambient.v_np);
    out.push(ambient.v_f);
    out.push(ambient.temperature);
    Ok(out)
}

/// Sidecar metadata: feature extrema fitted on the training split, stress
/// ranges for normalized metrics, and generation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub feature_names: Vec<String>,
    pub f_min: Vec<f64>,
    pub f_max: Vec<f64>,
    /// Per-component extrema of the undamaged stress (Voigt order).
    pub stress_min: [f64; 6],
    pub stress_max: [f64; 6],
    /// max over components of (max - min)/2; normalizes stress errors.
    pub stress_scale: f64,
    pub sequence_count: usize,
    pub total_steps: usize,
    pub rejected_paths: usize,
    pub skipped_sequences: usize,
    pub config: PathConfig,
}

impl DatasetMeta {
    /// Fits extrema over the given (training) sequences.
    pub fn fit(
        sequences: &[LoadedSequence],
        frame: &FiberFrame,
        config: &PathConfig,
        rejected_paths: usize,
        skipped_sequences: usize,
    ) -> Result<Self, DataError> {
        if sequences.is_empty() {
            return Err(DataError::Invalid(
                "cannot fit metadata on an empty dataset".into(),
            ));
        }
        let n = FEATURE_NAMES.len();
        let mut f_min = vec![f64::INFINITY; n];
        let mut f_max = vec![f64::NEG_INFINITY; n];
        let mut stress_min = [f64::INFINITY; 6];
        let mut stress_max = [f64::NEG_INFINITY; 6];
        let mut total_steps = 0;
        for seq in sequences {
            for st in &seq.steps {
                total_steps += 1;
                let feats = step_features(&st.f_tensor(), st.dt, &seq.ambient, frame)?;
                for (k, v) in feats.iter().enumerate() {
                    f_min[k] = f_min[k].min(*v);
                    f_max[k] = f_max[k].max(*v);
                }
                for (k, v) in st.sigma_undamaged.iter().enumerate() {
                    stress_min[k] = stress_min[k].min(*v);
                    stress_max[k] = stress_max[k].max(*v);
                }
            }
        }
        let stress_scale = stress_min
            .iter()
            .zip(stress_max.iter())
            .map(|(lo, hi)| (hi - lo) / 2.0)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        Ok(DatasetMeta {
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            f_min,
            f_max,
            stress_min,
            stress_max,
            stress_scale,
            sequence_count: sequences.len(),
            total_steps,
            rejected_paths,
            skipped_sequences,
            config: config.clone(),
        })
    }
}

/// Writes sequences as line-delimited JSON.
pub fn write_jsonl(path: &Path, sequences: &[LoadedSequence]) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for seq in sequences {
        serde_json::to_writer(&mut w, seq)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LoadedSequence>, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: LoadedSequence = serde_json::from_str(&line)
            .map_err(|source| DataError::Json { line: k + 1, source })?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, meta)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta, DataError> {
    let file = std::fs::File::open(path)?;
    let meta = serde_json::from_reader(BufReader::new(file))
        .map_err(|source| DataError::Json { line: 0, source })?;
    Ok(meta)
}

/// Validates the structural invariants of a loaded sequence: identity first
/// frame, positive determinants, positive timesteps.
pub fn validate_sequence(seq: &LoadedSequence) -> Result<(), DataError> {
    let first = seq
        .steps
        .first()
        .ok_or_else(|| DataError::Invalid(format!("sequence {} is empty", seq.index)))?;
    if first.f_tensor().sub(&Tensor3::identity()).frobenius_norm() > 1e-12 {
        return Err(DataError::Invalid(format!(
            "sequence {} does not start at the identity",
            seq.index
        )));
    }
    for (t, st) in seq.steps.iter().enumerate() {
        if st.f_tensor().det() <= 0.0 {
            return Err(DataError::Invalid(format!(
                "sequence {} step {t} has non-positive det F",
                seq.index
            )));
        }
        if st.dt <= 0.0 {
            return Err(DataError::Invalid(format!(
                "sequence {} step {t} has dt <= 0",
                seq.index
            )));
        }
    }
    Ok(())
}

/// Convenience constructor from oracle path records.
pub fn sequence_from_records(
    index: u64,
    config: &PathConfig,
    ambient: &AmbientState,
    records: &[crate::oracle::PathRecord],
    dt: f64,
) -> LoadedSequence {
    let steps = records
        .iter()
        .map(|r| SequenceStep {
            f: r.f.0,
            dt,
            sigma: to_voigt(&r.sigma_total),
            sigma_undamaged: to_voigt(&r.sigma_undamaged),
            d: r.d,
        })
        .collect();
    LoadedSequence {
        index,
        config: config.clone(),
        ambient: *ambient,
        steps,
    }
}
