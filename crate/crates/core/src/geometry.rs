//! Elementary 3-D geometry: points, unit directions, rigid transforms,
//! cubic Hermite interpolation and arc length, and least-squares rigid
//! alignment (Kabsch).

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of samples per Hermite segment used for insertion length.
pub const DEFAULT_SAMPLES_PER_SEGMENT: usize = 32;

/// Inputs whose norm deviates from one by more than this are not directions.
const DIRECTION_INPUT_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("malformed direction: norm {norm} is not within {tol} of 1")]
    MalformedDirection { norm: f64, tol: f64 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("rank-deficient point configuration (singular values {0:?})")]
    RankDeficient([f64; 3]),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// A point in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Checked constructor rejecting NaN and infinities.
    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if x.is_finite() && y.is_finite() && z.is_finite() {
            Ok(Self { x, y, z })
        } else {
            Err(GeometryError::NonFinite)
        }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Point3) -> Point3 {
        Point3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn distance_squared(self, other: Point3) -> f64 {
        let d = self - other;
        d.dot(d)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(self, other: Point3, t: f64) -> Point3 {
        self + (other - self) * t
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl From<Point3> for Vector3<f64> {
    fn from(p: Point3) -> Self {
        Vector3::new(p.x, p.y, p.z)
    }
}

impl From<Vector3<f64>> for Point3 {
    fn from(v: Vector3<f64>) -> Self {
        Point3::new(v.x, v.y, v.z)
    }
}

/// A unit-norm direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Direction3 {
    dx: f64,
    dy: f64,
    dz: f64,
}

impl Direction3 {
    pub const X: Direction3 = Direction3 { dx: 1.0, dy: 0.0, dz: 0.0 };
    pub const Y: Direction3 = Direction3 { dx: 0.0, dy: 1.0, dz: 0.0 };
    pub const Z: Direction3 = Direction3 { dx: 0.0, dy: 0.0, dz: 1.0 };

    /// Accepts a nearly-unit vector (within 1e-3) and renormalizes it.
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self, GeometryError> {
        Self::with_tolerance(dx, dy, dz, DIRECTION_INPUT_TOL)
    }

    /// Accepts a vector whose norm is within `tol` of one. Components are
    /// kept bit-for-bit when the norm is already within 1e-12 of one.
    pub fn with_tolerance(dx: f64, dy: f64, dz: f64, tol: f64) -> Result<Self, GeometryError> {
        let v = Point3::try_new(dx, dy, dz)?;
        let norm = v.norm();
        if (norm - 1.0).abs() > tol {
            return Err(GeometryError::MalformedDirection { norm, tol });
        }
        if (norm - 1.0).abs() <= 1e-12 {
            return Ok(Self { dx, dy, dz });
        }
        let u = v * (1.0 / norm);
        Ok(Self { dx: u.x, dy: u.y, dz: u.z })
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn from_vector(v: Point3) -> Result<Self, GeometryError> {
        if !v.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let norm = v.norm();
        if norm <= f64::MIN_POSITIVE.sqrt() {
            return Err(GeometryError::Degenerate("zero-length direction".into()));
        }
        let u = v * (1.0 / norm);
        Ok(Self { dx: u.x, dy: u.y, dz: u.z })
    }

    pub fn dx(self) -> f64 {
        self.dx
    }
    pub fn dy(self) -> f64 {
        self.dy
    }
    pub fn dz(self) -> f64 {
        self.dz
    }

    pub fn as_vector(self) -> Point3 {
        Point3::new(self.dx, self.dy, self.dz)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn dot(self, other: Direction3) -> f64 {
        self.dx * other.dx + self.dy * other.dy + self.dz * other.dz
    }
}

impl TryFrom<[f64; 3]> for Direction3 {
    type Error = GeometryError;
    fn try_from(a: [f64; 3]) -> Result<Self, Self::Error> {
        Direction3::new(a[0], a[1], a[2])
    }
}

impl From<Direction3> for [f64; 3] {
    fn from(d: Direction3) -> Self {
        d.to_array()
    }
}

/// x ↦ R·x + t with R a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validates orthonormality and det = +1 within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(GeometryError::InvalidRotation(format!(
                "RᵀR deviates from identity by {ortho:e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Self { rotation, translation })
    }

    /// Rotation of `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: Point3, angle: f64, translation: Point3) -> Result<Self, GeometryError> {
        let axis = Direction3::from_vector(axis)?;
        let unit = nalgebra::Unit::new_unchecked(Vector3::from(axis.as_vector()));
        let rotation = nalgebra::Rotation3::from_axis_angle(&unit, angle).into_inner();
        Ok(Self { rotation, translation: translation.into() })
    }

    pub fn translation_only(t: Point3) -> Self {
        Self { rotation: Matrix3::identity(), translation: t.into() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Point3 {
        self.translation.into()
    }

    pub fn apply_point(&self, p: Point3) -> Point3 {
        (self.rotation * Vector3::from(p) + self.translation).into()
    }

    /// Rotates a direction; translation does not apply.
    pub fn apply_direction(&self, d: Direction3) -> Direction3 {
        let v: Point3 = (self.rotation * Vector3::from(d.as_vector())).into();
        let n = v.norm();
        Direction3 { dx: v.x / n, dy: v.y / n, dz: v.z / n }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Row-major rotation followed by translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            self.translation.x, self.translation.y, self.translation.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Vector3::new(v[9], v[10], v[11]))
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// One sampled colonoscope shape: tip first.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeFrame {
    points: Vec<Point3>,
    directions: Vec<Direction3>,
    pub frame_index: usize,
}

impl ScopeFrame {
    pub fn new(
        points: Vec<Point3>,
        directions: Vec<Direction3>,
        frame_index: usize,
    ) -> Result<Self, GeometryError> {
        if points.len() != directions.len() {
            return Err(GeometryError::LengthMismatch(points.len(), directions.len()));
        }
        if points.len() < 2 {
            return Err(GeometryError::Degenerate(format!(
                "scope frame needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { points, directions, frame_index })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn directions(&self) -> &[Direction3] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Colon marker positions, ordered cecum to anus.
#[derive(Debug, Clone, PartialEq)]
pub struct ColonFrame {
    pub markers: Vec<Point3>,
    pub frame_index: usize,
}

impl ColonFrame {
    pub fn new(markers: Vec<Point3>, frame_index: usize) -> Self {
        Self { markers, frame_index }
    }
}

pub trait RigidApply {
    fn rigid_apply(&self, tf: &RigidTransform) -> Self;
}

impl RigidApply for ScopeFrame {
    fn rigid_apply(&self, tf: &RigidTransform) -> Self {
        ScopeFrame {
            points: self.points.iter().map(|&p| tf.apply_point(p)).collect(),
            directions: self.directions.iter().map(|&d| tf.apply_direction(d)).collect(),
            frame_index: self.frame_index,
        }
    }
}

impl RigidApply for ColonFrame {
    fn rigid_apply(&self, tf: &RigidTransform) -> Self {
        ColonFrame {
            markers: self.markers.iter().map(|&p| tf.apply_point(p)).collect(),
            frame_index: self.frame_index,
        }
    }
}

/// Applies a rigid transform to any frame type.
pub fn rigid_apply<F: RigidApply>(tf: &RigidTransform, frame: &F) -> F {
    frame.rigid_apply(tf)
}

/// Piecewise cubic Hermite curve through knots. Each segment scales the unit
/// tangents at its ends by the segment's chord length.
#[derive(Debug, Clone)]
pub struct HermiteCurve {
    knots: Vec<Point3>,
    tangents: Vec<Point3>,
}

impl HermiteCurve {
    pub fn new(points: &[Point3], tangents: &[Direction3]) -> Result<Self, GeometryError> {
        if points.len() != tangents.len() {
            return Err(GeometryError::LengthMismatch(points.len(), tangents.len()));
        }
        if points.len() < 2 {
            return Err(GeometryError::Degenerate(format!(
                "Hermite interpolation needs at least 2 points, got {}",
                points.len()
            )));
        }
        Ok(Self {
            knots: points.to_vec(),
            tangents: tangents.iter().map(|d| d.as_vector()).collect(),
        })
    }

    pub fn segment_count(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[Point3] {
        &self.knots
    }

    /// Position on segment `seg` at local parameter `u ∈ [0, 1]`.
    pub fn eval(&self, seg: usize, u: f64) -> Point3 {
        let (p0, p1) = (self.knots[seg], self.knots[seg + 1]);
        // Exact knots at the ends.
        if u == 0.0 {
            return p0;
        }
        if u == 1.0 {
            return p1;
        }
        let chord = p0.distance(p1);
        let m0 = self.tangents[seg] * chord;
        let m1 = self.tangents[seg + 1] * chord;
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        p0 * h00 + m0 * h10 + p1 * h01 + m1 * h11
    }

    /// Derivative with respect to the local parameter.
    pub fn derivative(&self, seg: usize, u: f64) -> Point3 {
        let (p0, p1) = (self.knots[seg], self.knots[seg + 1]);
        let chord = p0.distance(p1);
        let m0 = self.tangents[seg] * chord;
        let m1 = self.tangents[seg + 1] * chord;
        let u2 = u * u;
        let d00 = 6.0 * u2 - 6.0 * u;
        let d10 = 3.0 * u2 - 4.0 * u + 1.0;
        let d01 = -6.0 * u2 + 6.0 * u;
        let d11 = 3.0 * u2 - 2.0 * u;
        p0 * d00 + m0 * d10 + p1 * d01 + m1 * d11
    }

    /// Uniform-parameter samples: `samples_per_segment + 1` points per
    /// segment with shared endpoints.
    pub fn sample(&self, samples_per_segment: usize) -> Vec<Point3> {
        let s = samples_per_segment.max(1);
        let mut out = Vec::with_capacity(self.segment_count() * s + 1);
        out.push(self.knots[0]);
        for seg in 0..self.segment_count() {
            for k in 1..=s {
                out.push(self.eval(seg, k as f64 / s as f64));
            }
        }
        out
    }

    pub fn length(&self, samples_per_segment: usize) -> f64 {
        polyline_length(&self.sample(samples_per_segment))
    }
}

/// Samples the chord-scaled cubic Hermite curve through `points`.
pub fn hermite_interpolate(
    points: &[Point3],
    tangents: &[Direction3],
    samples_per_segment: usize,
) -> Result<Vec<Point3>, GeometryError> {
    if samples_per_segment == 0 {
        return Err(GeometryError::Degenerate("samples_per_segment must be ≥ 1".into()));
    }
    Ok(HermiteCurve::new(points, tangents)?.sample(samples_per_segment))
}

pub fn polyline_length(polyline: &[Point3]) -> f64 {
    polyline.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Arc length of the Hermite curve through the scope points (mm).
pub fn insertion_length(frame: &ScopeFrame) -> f64 {
    insertion_length_with(frame, DEFAULT_SAMPLES_PER_SEGMENT)
}

pub fn insertion_length_with(frame: &ScopeFrame, samples_per_segment: usize) -> f64 {
    // ScopeFrame guarantees ≥ 2 points with matching directions.
    HermiteCurve::new(frame.points(), frame.directions())
        .map(|c| c.length(samples_per_segment))
        .unwrap_or(0.0)
}

fn centroid(points: &[Point3]) -> Point3 {
    let mut c = Point3::ORIGIN;
    for &p in points {
        c += p;
    }
    c * (1.0 / points.len() as f64)
}

/// Least-squares rigid transform mapping `source[i]` onto `target[i]`.
pub fn kabsch(source: &[Point3], target: &[Point3]) -> Result<RigidTransform, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch(source.len(), target.len()));
    }
    if source.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "Kabsch needs at least 3 correspondences, got {}",
            source.len()
        )));
    }
    if source.iter().chain(target).any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let mut h = Matrix3::<f64>::zeros();
    for (&s, &t) in source.iter().zip(target) {
        h += Vector3::from(s - cs) * Vector3::from(t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    sv.sort_by(|a, b| b.total_cmp(a));
    // Rank < 2 means the rotation about some axis is undetermined.
    let scale = sv[0].max(f64::MIN_POSITIVE);
    if sv[0] <= 1e-300 || sv[1] <= 1e-10 * scale {
        return Err(GeometryError::RankDeficient(sv));
    }
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::RankDeficient(sv)),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = Vector3::from(ct) - rotation * Vector3::from(cs);
    Ok(RigidTransform { rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line_frame(n: usize, spacing: f64) -> ScopeFrame {
        let pts = (0..n).map(|i| Point3::new(i as f64 * spacing, 0.0, 0.0)).collect();
        ScopeFrame::new(pts, vec![Direction3::X; n], 1).unwrap()
    }

    /// Length of the circle arc via a polyline that is much denser than
    /// anything the implementation uses.
    fn dense_oracle(points: &[Point3], tangents: &[Direction3]) -> f64 {
        let c = HermiteCurve::new(points, tangents).unwrap();
        let mut total = 0.0;
        for seg in 0..c.segment_count() {
            let mut prev = c.eval(seg, 0.0);
            for k in 1..=10_000 {
                let p = c.eval(seg, k as f64 / 10_000.0);
                total += prev.distance(p);
                prev = p;
            }
        }
        total
    }

    fn circle(n: usize, radius: f64, span: f64) -> (Vec<Point3>, Vec<Direction3>) {
        let pts = (0..n)
            .map(|i| {
                let a = span * i as f64 / (n - 1) as f64;
                Point3::new(radius * a.cos(), radius * a.sin(), 0.0)
            })
            .collect();
        let dirs = (0..n)
            .map(|i| {
                let a = span * i as f64 / (n - 1) as f64;
                Direction3::from_vector(Point3::new(-a.sin(), a.cos(), 0.0)).unwrap()
            })
            .collect();
        (pts, dirs)
    }

    #[test]
    fn two_point_endpoints() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(10.0, 0.0, 0.0)];
        let poly = hermite_interpolate(&pts, &[Direction3::X; 2], 1).unwrap();
        assert_eq!(poly, pts.to_vec());
    }

    #[test]
    fn collinear_samples_stay_on_axis() {
        let f = line_frame(6, 10.0);
        let poly = hermite_interpolate(f.points(), f.directions(), 17).unwrap();
        for p in poly {
            assert!(p.y.abs() < 1e-9 && p.z.abs() < 1e-9);
        }
    }

    #[test]
    fn four_point_arc_matches_dense_oracle() {
        let (pts, dirs) = circle(4, 100.0, std::f64::consts::PI * 1.5);
        let l = polyline_length(&hermite_interpolate(&pts, &dirs, 64).unwrap());
        let oracle = dense_oracle(&pts, &dirs);
        assert!((l - oracle).abs() / oracle < 5e-3, "{l} vs {oracle}");
    }

    #[test]
    fn fewer_than_two_points_is_degenerate() {
        let err = hermite_interpolate(&[Point3::ORIGIN], &[Direction3::X], 4).unwrap_err();
        assert!(matches!(err, GeometryError::Degenerate(_)));
    }

    #[test]
    fn straight_insertion_length() {
        assert_abs_diff_eq!(insertion_length(&line_frame(6, 10.0)), 50.0, epsilon = 1e-6);
    }

    #[test]
    fn half_circle_insertion_length() {
        let (pts, dirs) = circle(6, 100.0, std::f64::consts::PI);
        let f = ScopeFrame::new(pts.clone(), dirs.clone(), 1).unwrap();
        let l = insertion_length(&f);
        let oracle = dense_oracle(&pts, &dirs);
        assert!((l - oracle).abs() / oracle < 1e-3);
        assert!((l - 100.0 * std::f64::consts::PI).abs() / (100.0 * std::f64::consts::PI) < 0.01);
    }

    #[test]
    fn length_is_rigid_invariant() {
        let (pts, dirs) = circle(6, 80.0, 2.0);
        let f = ScopeFrame::new(pts, dirs, 1).unwrap();
        let tf = RigidTransform::from_axis_angle(Point3::new(1.0, 2.0, 3.0), 0.7, Point3::new(5.0, -3.0, 9.0))
            .unwrap();
        let g = rigid_apply(&tf, &f);
        assert_abs_diff_eq!(insertion_length(&f), insertion_length(&g), epsilon = 1e-9);
    }

    #[test]
    fn direction_rejects_far_from_unit() {
        assert!(Direction3::new(1.01, 0.0, 0.0).is_err());
        let d = Direction3::new(1.0005, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(d.as_vector().norm(), 1.0, epsilon = 1e-15);
        assert!(Direction3::from_vector(Point3::ORIGIN).is_err());
    }

    #[test]
    fn translation_moves_points_not_directions() {
        let f = line_frame(3, 1.0);
        let g = rigid_apply(&RigidTransform::translation_only(Point3::new(5.0, 0.0, 0.0)), &f);
        for (a, b) in f.points().iter().zip(g.points()) {
            assert_eq!(*b, *a + Point3::new(5.0, 0.0, 0.0));
        }
        assert_eq!(f.directions(), g.directions());
        assert_eq!(rigid_apply(&RigidTransform::identity(), &f), f);
    }

    #[test]
    fn rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn kabsch_identity_and_known_transform() {
        let src: Vec<Point3> = (0..8)
            .map(|i| {
                let f = i as f64;
                Point3::new(f * 3.0 - 1.0, (f * 1.7).sin() * 20.0, f * f * 0.5)
            })
            .collect();
        let id = kabsch(&src, &src).unwrap();
        for (a, b) in id.to_row_major().iter().zip(RigidTransform::identity().to_row_major()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        let tf = RigidTransform::from_axis_angle(Point3::new(0.0, 0.0, 1.0), 30f64.to_radians(), Point3::new(1.0, 2.0, 3.0))
            .unwrap();
        let dst: Vec<Point3> = src.iter().map(|&p| tf.apply_point(p)).collect();
        let est = kabsch(&src, &dst).unwrap();
        for (a, b) in est.to_row_major().iter().zip(tf.to_row_major()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn kabsch_rejects_collinear() {
        let src: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(kabsch(&src, &src), Err(GeometryError::RankDeficient(_))));
        assert!(kabsch(&src[..2], &src[..2]).is_err());
    }
}
