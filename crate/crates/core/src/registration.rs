//! Rigid ICP alignment of measured shapes into the reference frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{kabsch, rigid_apply, GeometryError, Point3, RigidTransform};
use crate::recording::{FramePair, InsertionRecording};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("ICP needs at least 3 points in each cloud (moving {moving}, reference {reference})")]
    TooFewPoints { moving: usize, reference: usize },
    #[error("invalid ICP configuration: {0}")]
    Config(String),
    #[error("recording is empty")]
    EmptyRecording,
    #[error("marker count {found} differs from reference count {expected}")]
    MarkerCount { expected: usize, found: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when the relative mean-squared-error decrease falls below this.
    pub convergence_tol: f64,
    #[serde(skip)]
    pub initial_transform: RigidTransform,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iterations: 100, convergence_tol: 1e-6, initial_transform: RigidTransform::identity() }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.max_iterations == 0 {
            return Err(RegistrationError::Config("max_iterations must be ≥ 1".into()));
        }
        if !(self.convergence_tol > 0.0 && self.convergence_tol.is_finite()) {
            return Err(RegistrationError::Config("convergence_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps the moving cloud into the reference frame.
    pub transform: RigidTransform,
    /// RMS nearest-neighbor distance after alignment (mm).
    pub residual_rms: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// RMS residual after each iteration.
    pub residual_history: Vec<f64>,
}

/// Index of the nearest reference point; ties go to the lowest index.
fn nearest(p: Point3, reference: &[Point3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &q) in reference.iter().enumerate() {
        let d = p.distance_squared(q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn correspond(moving: &[Point3], tf: &RigidTransform, reference: &[Point3]) -> (Vec<Point3>, f64) {
    let mut matched = Vec::with_capacity(moving.len());
    let mut sse = 0.0;
    for &p in moving {
        let (j, d2) = nearest(tf.apply_point(p), reference);
        matched.push(reference[j]);
        sse += d2;
    }
    (matched, sse / moving.len() as f64)
}

pub fn icp_register(
    moving: &[Point3],
    reference: &[Point3],
    config: &IcpConfig,
) -> Result<IcpResult, RegistrationError> {
    config.validate()?;
    if moving.len() < 3 || reference.len() < 3 {
        return Err(RegistrationError::TooFewPoints { moving: moving.len(), reference: reference.len() });
    }
    let mut tf = config.initial_transform;
    let (mut matched, mut prev_mse) = correspond(moving, &tf, reference);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iterations {
        let candidate = kabsch(moving, &matched)?;
        let (next_matched, mse) = correspond(moving, &candidate, reference);
        // Kabsch is optimal for fixed correspondences, so only rounding can
        // make this worse; keep the previous transform in that case.
        let (mse, stalled) = if mse > prev_mse {
            (prev_mse, true)
        } else {
            tf = candidate;
            matched = next_matched;
            (mse, false)
        };
        history.push(mse.sqrt());
        if stalled || prev_mse - mse <= config.convergence_tol * prev_mse {
            converged = true;
            prev_mse = mse;
            break;
        }
        prev_mse = mse;
    }
    Ok(IcpResult {
        transform: tf,
        residual_rms: prev_mse.sqrt(),
        iterations_used: history.len(),
        converged,
        residual_history: history,
    })
}

/// Registers a whole recording with one transform estimated from the first
/// frame's markers: ordered-correspondence Kabsch, then ICP refinement.
pub fn register_recording(
    recording: &InsertionRecording,
    reference_markers: &[Point3],
    config: &IcpConfig,
) -> Result<(InsertionRecording, IcpResult), RegistrationError> {
    let first = recording.frames.first().ok_or(RegistrationError::EmptyRecording)?;
    let markers = &first.colon.markers;
    if markers.len() != reference_markers.len() {
        return Err(RegistrationError::MarkerCount { expected: reference_markers.len(), found: markers.len() });
    }
    let init = kabsch(markers, reference_markers)?;
    let cfg = IcpConfig { initial_transform: init, ..*config };
    let result = icp_register(markers, reference_markers, &cfg)?;
    let tf = result.transform;
    let frames = recording
        .frames
        .iter()
        .map(|p| FramePair { scope: rigid_apply(&tf, &p.scope), colon: rigid_apply(&tf, &p.colon) })
        .collect();
    Ok((InsertionRecording { frames, config: recording.config.clone(), seed: recording.seed }, result))
}
