//! Paired colonoscope/colon recordings.

use thiserror::Error;

use crate::geometry::{ColonFrame, ScopeFrame};
use crate::simulator::SimConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordingError {
    #[error("recording is empty")]
    Empty,
    #[error("frame {position}: expected frame_index {expected}, found {found}")]
    NonConsecutive { position: usize, expected: usize, found: usize },
    #[error("frame {0}: scope and colon frame indices differ")]
    IndexMismatch(usize),
    #[error("frame {frame}: {what} count {found} differs from first frame's {expected}")]
    ShapeChange { frame: usize, what: &'static str, expected: usize, found: usize },
}

/// Scope and colon shapes observed at the same instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub scope: ScopeFrame,
    pub colon: ColonFrame,
}

/// One insertion: frames numbered consecutively from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertionRecording {
    pub frames: Vec<FramePair>,
    /// Simulator configuration used to generate the frames, when known.
    pub config: Option<SimConfig>,
    pub seed: Option<u64>,
}

impl InsertionRecording {
    /// Builds a recording, checking index continuity and constant sizes.
    pub fn new(frames: Vec<FramePair>) -> Result<Self, RecordingError> {
        let rec = Self { frames, config: None, seed: None };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), RecordingError> {
        let first = self.frames.first().ok_or(RecordingError::Empty)?;
        let n = first.scope.len();
        let m = first.colon.markers.len();
        for (i, pair) in self.frames.iter().enumerate() {
            let expected = i + 1;
            if pair.scope.frame_index != expected {
                return Err(RecordingError::NonConsecutive {
                    position: i,
                    expected,
                    found: pair.scope.frame_index,
                });
            }
            if pair.colon.frame_index != pair.scope.frame_index {
                return Err(RecordingError::IndexMismatch(expected));
            }
            if pair.scope.len() != n {
                return Err(RecordingError::ShapeChange {
                    frame: expected,
                    what: "scope point",
                    expected: n,
                    found: pair.scope.len(),
                });
            }
            if pair.colon.markers.len() != m {
                return Err(RecordingError::ShapeChange {
                    frame: expected,
                    what: "marker",
                    expected: m,
                    found: pair.colon.markers.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn scope_frames(&self) -> impl Iterator<Item = &ScopeFrame> {
        self.frames.iter().map(|p| &p.scope)
    }

    pub fn colon_frames(&self) -> impl Iterator<Item = &ColonFrame> {
        self.frames.iter().map(|p| &p.colon)
    }

    /// Frame with 1-based index `t`.
    pub fn frame(&self, t: usize) -> Option<&FramePair> {
        t.checked_sub(1).and_then(|i| self.frames.get(i))
    }

    pub fn sensor_count(&self) -> usize {
        self.frames.first().map_or(0, |p| p.scope.len())
    }

    pub fn marker_count(&self) -> usize {
        self.frames.first().map_or(0, |p| p.colon.markers.len())
    }
}
