//! Mean marker distance, per-frame error curves and leave-one-insertion-out
//! cross validation of the three estimators.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{train_forest_model, ForestConfig, ForestError};
use crate::dataio::{forest_checksum, model_checksum};
use crate::derive_seed;
use crate::geometry::ColonFrame;
use crate::model::{train, ModelError, SenArchitecture, TrainConfig};
use crate::recording::InsertionRecording;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions cover frames {found}, expected {expected}")]
    FrameRange { expected: String, found: String },
    #[error("frame {frame}: {found} predicted markers, ground truth has {expected}")]
    MarkerCount { frame: usize, expected: usize, found: usize },
    #[error("cross validation needs at least 2 recordings, got {0}")]
    TooFewRecordings(usize),
    #[error("recording {index} has {frames} frames; τ = {tau} leaves nothing to evaluate")]
    ShortRecording { index: usize, frames: usize, tau: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Windowed network with relation maps.
    Sen,
    /// Windowed network on structure features only.
    SenNorel,
    /// Single-frame regression forest.
    Forest,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sen, Method::SenNorel, Method::Forest];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sen => "sen",
            Method::SenNorel => "sen-norel",
            Method::Forest => "forest",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameError {
    pub frame_index: usize,
    /// Mean marker distance in this frame (mm).
    pub distance: f64,
}

fn check_range(truth: &InsertionRecording, predictions: &[ColonFrame], tau: usize) -> Result<(), EvalError> {
    let t = truth.len();
    let expected = format!("{}..={t}", tau + 1);
    let found = match (predictions.first(), predictions.last()) {
        (Some(a), Some(b)) => format!("{}..={}", a.frame_index, b.frame_index),
        _ => "none".into(),
    };
    let ok = tau < t
        && predictions.len() == t - tau
        && predictions.iter().enumerate().all(|(k, p)| p.frame_index == tau + 1 + k);
    if !ok {
        return Err(EvalError::FrameRange { expected, found });
    }
    for p in predictions {
        let m = truth.frames[p.frame_index - 1].colon.markers.len();
        if p.markers.len() != m || m == 0 {
            return Err(EvalError::MarkerCount { frame: p.frame_index, expected: m, found: p.markers.len() });
        }
    }
    Ok(())
}

pub fn per_frame_errors(
    truth: &InsertionRecording,
    predictions: &[ColonFrame],
    tau: usize,
) -> Result<Vec<FrameError>, EvalError> {
    check_range(truth, predictions, tau)?;
    Ok(predictions
        .iter()
        .map(|p| {
            let gt = &truth.frames[p.frame_index - 1].colon.markers;
            let sum: f64 = p.markers.iter().zip(gt).map(|(a, b)| a.distance(*b)).sum();
            FrameError { frame_index: p.frame_index, distance: sum / gt.len() as f64 }
        })
        .collect())
}

/// Average Euclidean marker error over frames τ+1..T and all markers.
pub fn mean_distance(truth: &InsertionRecording, predictions: &[ColonFrame], tau: usize) -> Result<f64, EvalError> {
    check_range(truth, predictions, tau)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in predictions {
        let gt = &truth.frames[p.frame_index - 1].colon.markers;
        for (a, b) in p.markers.iter().zip(gt) {
            sum += a.distance(*b);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValConfig {
    pub architecture: SenArchitecture,
    pub training: TrainConfig,
    pub forest: ForestConfig,
    pub methods: Vec<Method>,
    /// Master seed; fold seeds are derived from it.
    pub seed: u64,
    /// Folds evaluated concurrently; results do not depend on it.
    pub threads: usize,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        Self {
            architecture: SenArchitecture::default(),
            training: TrainConfig::default(),
            forest: ForestConfig::default(),
            methods: Method::ALL.to_vec(),
            seed: 0,
            threads: 1,
        }
    }
}

impl CrossValConfig {
    /// Training configuration of one method in one fold.
    pub fn fold_training(&self, fold: usize) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, fold as u64), ..self.training.clone() }
    }

    pub fn fold_forest(&self, fold: usize) -> ForestConfig {
        ForestConfig { seed: derive_seed(self.seed, fold as u64), ..self.forest.clone() }
    }

    pub fn method_architecture(&self, method: Method) -> SenArchitecture {
        SenArchitecture { use_relative_features: method == Method::Sen, ..self.architecture.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub md: f64,
    pub frame_errors: Vec<FrameError>,
    /// SHA-256 of the trained artifact's file form.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    /// 0-based index of the held-out recording.
    pub held_out: usize,
    pub results: Vec<MethodResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValReport {
    pub methods: Vec<Method>,
    pub folds: Vec<FoldReport>,
}

impl CrossValReport {
    pub fn result(&self, fold: usize, method: Method) -> Option<&MethodResult> {
        self.folds.get(fold)?.results.iter().find(|r| r.method == method)
    }

    pub fn fold_mds(&self, method: Method) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.results.iter().find(|r| r.method == method)).map(|r| r.md).collect()
    }

    /// Unweighted mean of per-fold MDs.
    pub fn mean_md(&self, method: Method) -> f64 {
        let v = self.fold_mds(method);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// MD over all evaluated frames of all folds.
    pub fn pooled_md(&self, method: Method) -> f64 {
        let errs: Vec<f64> = self
            .folds
            .iter()
            .filter_map(|f| f.results.iter().find(|r| r.method == method))
            .flat_map(|r| r.frame_errors.iter().map(|e| e.distance))
            .collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    }

    /// Folds where `a` has strictly lower MD than `b`.
    pub fn wins(&self, a: Method, b: Method) -> usize {
        self.fold_mds(a).iter().zip(self.fold_mds(b)).filter(|(x, y)| **x < *y).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub fold: usize,
    pub method: Method,
    pub md: f64,
}

fn run_fold<P: Fn(Progress) + Sync>(
    recordings: &[InsertionRecording],
    k: usize,
    cfg: &CrossValConfig,
    progress: &P,
) -> Result<FoldReport, EvalError> {
    let training: Vec<InsertionRecording> =
        recordings.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, r)| r.clone()).collect();
    let test = &recordings[k];
    let tau = cfg.architecture.window;
    let mut results = Vec::new();
    for &method in &cfg.methods {
        let (preds, checksum) = match method {
            Method::Sen | Method::SenNorel => {
                let (model, _) = train(&training, &cfg.method_architecture(method), &cfg.fold_training(k))?;
                (model.estimate_recording(test)?, model_checksum(&model))
            }
            Method::Forest => {
                let fm = train_forest_model(&training, &cfg.fold_forest(k), 1)?;
                (fm.estimate_recording(test, tau + 1)?, forest_checksum(&fm))
            }
        };
        let frame_errors = per_frame_errors(test, &preds, tau)?;
        let md = mean_distance(test, &preds, tau)?;
        progress(Progress { fold: k, method, md });
        results.push(MethodResult { method, md, frame_errors, checksum });
    }
    Ok(FoldReport { held_out: k, results })
}

pub fn crossval(recordings: &[InsertionRecording], cfg: &CrossValConfig) -> Result<CrossValReport, EvalError> {
    crossval_with_progress(recordings, cfg, |_| {})
}

/// Each recording is held out once; the other recordings train every
/// method, including the normalizers.
pub fn crossval_with_progress<P: Fn(Progress) + Sync>(
    recordings: &[InsertionRecording],
    cfg: &CrossValConfig,
    progress: P,
) -> Result<CrossValReport, EvalError> {
    let n = recordings.len();
    if n < 2 {
        return Err(EvalError::TooFewRecordings(n));
    }
    let tau = cfg.architecture.window;
    if let Some((index, r)) = recordings.iter().enumerate().find(|(_, r)| r.len() <= tau) {
        return Err(EvalError::ShortRecording { index, frames: r.len(), tau });
    }
    let threads = cfg.threads.clamp(1, n);
    let folds = if threads == 1 {
        (0..n).map(|k| run_fold(recordings, k, cfg, &progress)).collect::<Result<Vec<_>, _>>()?
    } else {
        let mut slots: Vec<Option<Result<FoldReport, EvalError>>> = (0..n).map(|_| None).collect();
        let per = n.div_ceil(threads);
        std::thread::scope(|s| {
            for (w, chunk) in slots.chunks_mut(per).enumerate() {
                let progress = &progress;
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_fold(recordings, w * per + j, cfg, progress));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every fold slot is filled")).collect::<Result<Vec<_>, _>>()?
    };
    Ok(CrossValReport { methods: cfg.methods.clone(), folds })
}
