//! Network input features computed from colonoscope shapes: the structure
//! vector (points, directions, insertion length), the pairwise positional and
//! directional relation matrices, input normalization, and τ-frame windows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{insertion_length, Point3, ScopeFrame};
use crate::recording::InsertionRecording;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("no frames to fit a normalizer on")]
    Empty,
    #[error("degenerate normalization data: {0}")]
    Degenerate(String),
    #[error("window expects {expected} frames, got {found}")]
    WindowLength { expected: usize, found: usize },
    #[error("window frames are not consecutive: index {found} follows {previous}")]
    Sequencing { previous: usize, found: usize },
    #[error("window length τ must be positive")]
    ZeroWindow,
}

/// Scope points, directions and insertion length of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureFeature {
    /// x, y, z of each point, tip first.
    pub positions: Vec<f64>,
    /// Direction components in the same order as `positions`.
    pub directions: Vec<f64>,
    pub insertion_length: f64,
    pub frame_index: usize,
}

impl StructureFeature {
    pub fn len(&self) -> usize {
        self.positions.len() + self.directions.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattened as positions, then directions, then insertion length.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        self.write_into(&mut v);
        v
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.positions);
        out.extend_from_slice(&self.directions);
        out.push(self.insertion_length);
    }
}

/// Structure feature length for `n` sensors.
pub fn structure_len(n: usize) -> usize {
    6 * n + 1
}

/// Positional (distance) and directional (inner product) N×N matrices,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMaps {
    pub n: usize,
    pub positional: Vec<f64>,
    pub directional: Vec<f64>,
}

impl RelationMaps {
    pub fn positional_at(&self, i: usize, j: usize) -> f64 {
        self.positional[i * self.n + j]
    }

    pub fn directional_at(&self, i: usize, j: usize) -> f64 {
        self.directional[i * self.n + j]
    }

    /// Two-channel image, positional channel first.
    pub fn write_image(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.positional);
        out.extend_from_slice(&self.directional);
    }
}

pub fn structure_feature(frame: &ScopeFrame) -> StructureFeature {
    let mut positions = Vec::with_capacity(3 * frame.len());
    let mut directions = Vec::with_capacity(3 * frame.len());
    for (p, d) in frame.points().iter().zip(frame.directions()) {
        positions.extend_from_slice(&p.to_array());
        directions.extend_from_slice(&d.to_array());
    }
    StructureFeature {
        positions,
        directions,
        insertion_length: insertion_length(frame),
        frame_index: frame.frame_index,
    }
}

pub fn positional_relation(frame: &ScopeFrame) -> Vec<f64> {
    let pts = frame.points();
    let n = pts.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = pts[i].distance(pts[j]);
            m[i * n + j] = d;
            m[j * n + i] = d;
        }
    }
    m
}

pub fn directional_relation(frame: &ScopeFrame) -> Vec<f64> {
    let dirs = frame.directions();
    let n = dirs.len();
    let mut m = vec![1.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = dirs[i].dot(dirs[j]).clamp(-1.0, 1.0);
            m[i * n + j] = c;
            m[j * n + i] = c;
        }
    }
    m
}

pub fn relation_maps(frame: &ScopeFrame) -> RelationMaps {
    RelationMaps {
        n: frame.len(),
        positional: positional_relation(frame),
        directional: directional_relation(frame),
    }
}

/// Affine conditioning of positions and lengths into roughly unit range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub center: Point3,
    /// 1/mm
    pub scale: f64,
    /// 1/mm
    pub length_scale: f64,
}

impl Normalizer {
    pub fn new(center: Point3, scale: f64, length_scale: f64) -> Result<Self, FeatureError> {
        if !(center.is_finite() && scale.is_finite() && length_scale.is_finite()) {
            return Err(FeatureError::Degenerate("non-finite normalizer field".into()));
        }
        if scale <= 0.0 || length_scale <= 0.0 {
            return Err(FeatureError::Degenerate(format!(
                "scale {scale} and length_scale {length_scale} must be positive"
            )));
        }
        Ok(Self { center, scale, length_scale })
    }

    pub fn normalize_point(&self, p: Point3) -> Point3 {
        (p - self.center) * self.scale
    }

    pub fn denormalize_point(&self, q: Point3) -> Point3 {
        q * (1.0 / self.scale) + self.center
    }

    /// Normalized, flattened marker coordinates (the network target).
    pub fn normalize_markers(&self, markers: &[Point3]) -> Vec<f64> {
        markers.iter().flat_map(|&p| self.normalize_point(p).to_array()).collect()
    }

    pub fn denormalize_markers(&self, values: &[f64]) -> Vec<Point3> {
        values
            .chunks_exact(3)
            .map(|c| self.denormalize_point(Point3::new(c[0], c[1], c[2])))
            .collect()
    }
}

/// Fits a normalizer on every frame of the given recordings.
pub fn fit_normalizer<'a, I>(recordings: I) -> Result<Normalizer, FeatureError>
where
    I: IntoIterator<Item = &'a InsertionRecording>,
    I::IntoIter: Clone,
{
    let recs = recordings.into_iter();
    let mut sum = Point3::ORIGIN;
    let mut count = 0usize;
    for pair in recs.clone().flat_map(|r| r.frames.iter()) {
        for &m in &pair.colon.markers {
            sum += m;
            count += 1;
        }
    }
    if count == 0 {
        return Err(FeatureError::Empty);
    }
    let center = sum * (1.0 / count as f64);
    let mut radius: f64 = 0.0;
    let mut max_length: f64 = 0.0;
    for pair in recs.flat_map(|r| r.frames.iter()) {
        for &p in pair.scope.points().iter().chain(&pair.colon.markers) {
            radius = radius.max(p.distance(center));
        }
        max_length = max_length.max(insertion_length(&pair.scope));
    }
    if radius <= 0.0 {
        return Err(FeatureError::Degenerate("all points coincide with the marker centroid".into()));
    }
    if max_length <= 0.0 {
        return Err(FeatureError::Degenerate("every insertion length is zero".into()));
    }
    Normalizer::new(center, 1.0 / radius, 1.0 / max_length)
}

/// Normalized features of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub relation: RelationMaps,
    pub structure: StructureFeature,
}

impl FrameFeatures {
    pub fn frame_index(&self) -> usize {
        self.structure.frame_index
    }

    /// Inverse of [`frame_features`]' scaling.
    pub fn denormalized(&self, norm: &Normalizer) -> FrameFeatures {
        let positions = self
            .structure
            .positions
            .chunks_exact(3)
            .flat_map(|c| norm.denormalize_point(Point3::new(c[0], c[1], c[2])).to_array())
            .collect();
        FrameFeatures {
            relation: RelationMaps {
                n: self.relation.n,
                positional: self.relation.positional.iter().map(|v| v / norm.scale).collect(),
                directional: self.relation.directional.clone(),
            },
            structure: StructureFeature {
                positions,
                directions: self.structure.directions.clone(),
                insertion_length: self.structure.insertion_length / norm.length_scale,
                frame_index: self.structure.frame_index,
            },
        }
    }
}

pub fn frame_features(frame: &ScopeFrame, norm: &Normalizer) -> FrameFeatures {
    let raw = structure_feature(frame);
    let mut rel = relation_maps(frame);
    for v in &mut rel.positional {
        *v *= norm.scale;
    }
    let positions = frame
        .points()
        .iter()
        .flat_map(|&p| norm.normalize_point(p).to_array())
        .collect();
    FrameFeatures {
        relation: rel,
        structure: StructureFeature {
            positions,
            directions: raw.directions,
            insertion_length: raw.insertion_length * norm.length_scale,
            frame_index: raw.frame_index,
        },
    }
}

/// Features of the τ frames preceding `target_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub frames: Vec<FrameFeatures>,
    pub target_index: usize,
}

impl FeatureWindow {
    pub fn tau(&self) -> usize {
        self.frames.len()
    }
}

fn check_consecutive<I: Iterator<Item = usize>>(mut indices: I) -> Result<(), FeatureError> {
    if let Some(mut prev) = indices.next() {
        for idx in indices {
            if idx != prev + 1 {
                return Err(FeatureError::Sequencing { previous: prev, found: idx });
            }
            prev = idx;
        }
    }
    Ok(())
}

pub fn build_window(
    frames: &[ScopeFrame],
    tau: usize,
    norm: &Normalizer,
) -> Result<FeatureWindow, FeatureError> {
    if tau == 0 {
        return Err(FeatureError::ZeroWindow);
    }
    if frames.len() != tau {
        return Err(FeatureError::WindowLength { expected: tau, found: frames.len() });
    }
    check_consecutive(frames.iter().map(|f| f.frame_index))?;
    Ok(FeatureWindow {
        frames: frames.iter().map(|f| frame_features(f, norm)).collect(),
        target_index: frames[tau - 1].frame_index + 1,
    })
}

/// Same as [`build_window`] over already-computed frame features.
pub fn window_from_features(
    features: &[FrameFeatures],
    tau: usize,
) -> Result<FeatureWindow, FeatureError> {
    if tau == 0 {
        return Err(FeatureError::ZeroWindow);
    }
    if features.len() != tau {
        return Err(FeatureError::WindowLength { expected: tau, found: features.len() });
    }
    check_consecutive(features.iter().map(|f| f.frame_index()))?;
    Ok(FeatureWindow {
        frames: features.to_vec(),
        target_index: features[tau - 1].frame_index() + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rigid_apply, ColonFrame, Direction3, RigidTransform};
    use crate::recording::FramePair;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_frame(idx: usize) -> ScopeFrame {
        let pts = (0..6).map(|i| Point3::new(i as f64 * 10.0, 0.0, 0.0)).collect();
        ScopeFrame::new(pts, vec![Direction3::X; 6], idx).unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, idx: usize) -> ScopeFrame {
        let pts = (0..6)
            .map(|_| Point3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)))
            .collect();
        let dirs = (0..6)
            .map(|_| {
                Direction3::from_vector(Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .unwrap()
            })
            .collect();
        ScopeFrame::new(pts, dirs, idx).unwrap()
    }

    #[test]
    fn straight_structure_feature() {
        let s = structure_feature(&line_frame(1));
        assert_eq!(s.to_vec().len(), 37);
        assert_abs_diff_eq!(s.insertion_length, 50.0, epsilon = 1e-6);
    }

    #[test]
    fn structure_feature_concatenation_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_frame(&mut rng, 3);
        let v = structure_feature(&f).to_vec();
        let mut oracle = Vec::new();
        for p in f.points() {
            oracle.extend([p.x, p.y, p.z]);
        }
        for d in f.directions() {
            oracle.extend([d.dx(), d.dy(), d.dz()]);
        }
        oracle.push(insertion_length(&f));
        assert_eq!(v, oracle);
    }

    #[test]
    fn rigid_motion_keeps_insertion_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_frame(&mut rng, 1);
        let tf = RigidTransform::from_axis_angle(Point3::new(0.3, -1.0, 0.2), 1.1, Point3::new(4.0, 5.0, 6.0)).unwrap();
        let a = structure_feature(&f);
        let b = structure_feature(&rigid_apply(&tf, &f));
        assert_abs_diff_eq!(a.insertion_length, b.insertion_length, epsilon = 1e-9);
        assert_ne!(a.positions, b.positions);
    }

    #[test]
    fn small_relation_cases() {
        let coincident = ScopeFrame::new(vec![Point3::new(1.0, 2.0, 3.0); 4], vec![Direction3::Z; 4], 1).unwrap();
        assert!(positional_relation(&coincident).iter().all(|&v| v == 0.0));
        assert!(directional_relation(&coincident).iter().all(|&v| v == 1.0));

        let two = ScopeFrame::new(
            vec![Point3::ORIGIN, Point3::new(3.0, 4.0, 0.0)],
            vec![Direction3::X, Direction3::Y],
            1,
        )
        .unwrap();
        assert_eq!(positional_relation(&two), vec![0.0, 5.0, 5.0, 0.0]);
        assert_eq!(directional_relation(&two), vec![1.0, 0.0, 0.0, 1.0]);

        let anti = Direction3::new(-1.0, 0.0, 0.0).unwrap();
        let opposed = ScopeFrame::new(vec![Point3::ORIGIN, Point3::ORIGIN], vec![Direction3::X, anti], 1).unwrap();
        assert_eq!(directional_relation(&opposed), vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn positional_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_frame(&mut rng, 1);
        let p = positional_relation(&f);
        for i in 0..6 {
            for j in 0..6 {
                let a = f.points()[i];
                let b = f.points()[j];
                let oracle = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
                assert!((p[i * 6 + j] - oracle).abs() <= 1e-12);
            }
        }
    }

    fn recording_of(frames: Vec<ScopeFrame>, markers: Vec<Point3>) -> InsertionRecording {
        InsertionRecording::new(
            frames
                .into_iter()
                .map(|s| {
                    let idx = s.frame_index;
                    FramePair { scope: s, colon: ColonFrame::new(markers.clone(), idx) }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalizer_single_frame() {
        let markers = vec![Point3::new(100.0, 0.0, 0.0), Point3::new(-100.0, 0.0, 0.0)];
        let rec = recording_of(vec![line_frame(1)], markers.clone());
        let n = fit_normalizer([&rec]).unwrap();
        assert_abs_diff_eq!(n.center.norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.scale, 1.0 / 100.0, epsilon = 1e-15);
        assert_abs_diff_eq!(n.length_scale, 1.0 / 50.0, epsilon = 1e-9);

        let shift = RigidTransform::translation_only(Point3::new(50.0, 0.0, 0.0));
        let moved = recording_of(
            vec![rigid_apply(&shift, &line_frame(1))],
            markers.iter().map(|&m| m + Point3::new(50.0, 0.0, 0.0)).collect(),
        );
        let m = fit_normalizer([&moved]).unwrap();
        assert_abs_diff_eq!(m.center.x, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.scale, n.scale, epsilon = 1e-15);
    }

    #[test]
    fn normalizer_empty_is_error() {
        let none: Vec<InsertionRecording> = Vec::new();
        assert_eq!(fit_normalizer(&none), Err(FeatureError::Empty));
    }

    #[test]
    fn normalized_positions_inside_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frames: Vec<ScopeFrame> = (1..=20).map(|i| random_frame(&mut rng, i)).collect();
        let markers: Vec<Point3> = (0..12).map(|i| Point3::new(i as f64 * 7.0, 3.0, -2.0)).collect();
        let rec = recording_of(frames.clone(), markers);
        let n = fit_normalizer([&rec]).unwrap();
        for f in &frames {
            let ff = frame_features(f, &n);
            for c in ff.structure.positions.chunks_exact(3) {
                assert!(Point3::new(c[0], c[1], c[2]).norm() <= 1.0 + 1e-9);
            }
            assert!(ff.relation.positional.iter().all(|&v| (0.0..=2.0 + 1e-12).contains(&v)));
            assert!((0.0..=1.0 + 1e-12).contains(&ff.structure.insertion_length));
        }
    }

    #[test]
    fn window_cases() {
        let n = Normalizer::new(Point3::new(1.0, 2.0, 3.0), 0.01, 0.02).unwrap();
        let w = build_window(&[line_frame(5)], 1, &n).unwrap();
        assert_eq!(w.target_index, 6);
        assert_eq!(w.frames[0], frame_features(&line_frame(5), &n));

        let same: Vec<ScopeFrame> = (1..=20).map(line_frame).collect();
        let w = build_window(&same, 20, &n).unwrap();
        assert!(w.frames.windows(2).all(|p| p[0].relation == p[1].relation
            && p[0].structure.positions == p[1].structure.positions));

        let gap = [line_frame(1), line_frame(3)];
        assert_eq!(build_window(&gap, 2, &n), Err(FeatureError::Sequencing { previous: 1, found: 3 }));
        assert!(matches!(build_window(&gap, 3, &n), Err(FeatureError::WindowLength { .. })));
    }

    #[test]
    fn window_denormalizes_to_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let frames: Vec<ScopeFrame> = (7..=10).map(|i| random_frame(&mut rng, i)).collect();
        let n = Normalizer::new(Point3::new(-3.0, 8.0, 1.5), 1.0 / 173.0, 1.0 / 611.0).unwrap();
        let w = build_window(&frames, 4, &n).unwrap();
        for (ff, f) in w.frames.iter().zip(&frames) {
            let back = ff.denormalized(&n);
            let raw_s = structure_feature(f);
            let raw_r = relation_maps(f);
            for (a, b) in back.structure.to_vec().iter().zip(raw_s.to_vec()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
            for (a, b) in back.relation.positional.iter().zip(&raw_r.positional) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
            }
            assert_eq!(back.relation.directional, raw_r.directional);
        }
    }
}
