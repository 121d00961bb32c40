//! Synthetic withdrawal recordings: a 12-marker colon phantom whose mobile
//! markers bulge while the scope tip passes them, and a scope that occupies
//! the last `l(t)` millimetres of the deformed centerline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geometry::{
    rigid_apply, ColonFrame, Direction3, GeometryError, HermiteCurve, Point3, RigidTransform,
    ScopeFrame,
};
use crate::recording::{FramePair, InsertionRecording};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("invalid phantom: {0}")]
    Phantom(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Dense samples per centerline segment for arc-length lookup.
const ARC_TABLE_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomModel {
    /// Cecum first, anus last.
    pub rest_markers: Vec<Point3>,
    /// `true` for anchored markers that never move.
    pub fixed: Vec<bool>,
}

/// Catmull-Rom style unit tangents; one-sided at the ends.
fn centerline_tangents(points: &[Point3]) -> Result<Vec<Direction3>, GeometryError> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let a = points[i.saturating_sub(1)];
            let b = points[(i + 1).min(n - 1)];
            Direction3::from_vector(b - a)
        })
        .collect()
}

pub fn centerline(points: &[Point3]) -> Result<HermiteCurve, GeometryError> {
    HermiteCurve::new(points, &centerline_tangents(points)?)
}

impl PhantomModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.rest_markers.len() < 2 || self.fixed.len() != self.rest_markers.len() {
            return Err(SimError::Phantom("need ≥ 2 markers and one label per marker".into()));
        }
        for (i, w) in self.rest_markers.windows(2).enumerate() {
            let d = w[0].distance(w[1]);
            if !(30.0..=200.0).contains(&d) {
                return Err(SimError::Phantom(format!("markers {} and {} are {d:.1} mm apart", i + 1, i + 2)));
            }
        }
        Ok(())
    }

    pub fn centerline(&self) -> Result<HermiteCurve, SimError> {
        Ok(centerline(&self.rest_markers)?)
    }

    /// Rest centerline arc length from the cecum to each marker.
    pub fn marker_arc_positions(&self) -> Result<Vec<f64>, SimError> {
        Ok(ArcTable::new(&self.centerline()?).knot_positions())
    }

    pub fn centerline_length(&self) -> Result<f64, SimError> {
        Ok(self.centerline()?.length(ARC_TABLE_SAMPLES))
    }
}

/// A U-shaped path (ascending, transverse, descending) ending in a gentle
/// sigmoid bend, about 1.6 m of centerline.
/// Markers 1-2 (cecum, ascending) and 11-12 (rectum, anus) are anchored.
pub fn default_phantom() -> PhantomModel {
    let rest_markers = [
        [0.0, 0.0, 0.0],
        [-10.0, 140.0, 0.0],
        [20.0, 280.0, 10.0],
        [130.0, 380.0, 30.0],
        [270.0, 420.0, 50.0],
        [420.0, 410.0, 40.0],
        [550.0, 350.0, 20.0],
        [620.0, 230.0, 0.0],
        [640.0, 90.0, 20.0],
        [610.0, -50.0, 40.0],
        [640.0, -190.0, 20.0],
        [700.0, -320.0, 0.0],
    ]
    .map(Point3::from_array)
    .to_vec();
    let fixed = (0..12).map(|i| i < 2 || i >= 10).collect();
    PhantomModel { rest_markers, fixed }
}

/// Cumulative chord length over a dense sampling of a Hermite curve.
struct ArcTable<'a> {
    curve: &'a HermiteCurve,
    cumulative: Vec<f64>,
}

impl<'a> ArcTable<'a> {
    fn new(curve: &'a HermiteCurve) -> Self {
        let mut cumulative = vec![0.0];
        let mut prev = curve.knots()[0];
        for seg in 0..curve.segment_count() {
            for j in 1..=ARC_TABLE_SAMPLES {
                let p = curve.eval(seg, j as f64 / ARC_TABLE_SAMPLES as f64);
                cumulative.push(cumulative.last().unwrap() + prev.distance(p));
                prev = p;
            }
        }
        Self { curve, cumulative }
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn knot_positions(&self) -> Vec<f64> {
        (0..=self.curve.segment_count()).map(|s| self.cumulative[s * ARC_TABLE_SAMPLES]).collect()
    }

    /// Point and unit tangent at arc length `s`.
    fn at(&self, s: f64) -> Result<(Point3, Direction3), GeometryError> {
        let s = s.clamp(0.0, self.total());
        let k = self.cumulative.partition_point(|&c| c <= s).clamp(1, self.cumulative.len() - 1);
        let (c0, c1) = (self.cumulative[k - 1], self.cumulative[k]);
        let frac = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        let seg = (k - 1) / ARC_TABLE_SAMPLES;
        let u = (((k - 1) % ARC_TABLE_SAMPLES) as f64 + frac) / ARC_TABLE_SAMPLES as f64;
        let (seg, u) = if seg == self.curve.segment_count() { (seg - 1, 1.0) } else { (seg, u) };
        Ok((self.curve.eval(seg, u), Direction3::from_vector(self.curve.derivative(seg, u))?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Frames per second.
    pub frame_rate: f64,
    /// Withdrawal duration (s).
    pub duration: f64,
    /// Insertion length at the start (mm); `None` means the whole centerline.
    pub max_insertion_length: Option<f64>,
    /// Peak displacement g_m per marker (mm).
    pub gains: Vec<f64>,
    /// Insertion length c_m at which marker m is pushed hardest (mm).
    pub centers: Vec<f64>,
    /// Bump width σ_m in insertion length (mm).
    pub widths: Vec<f64>,
    /// Displacement direction u_m per marker.
    pub directions: Vec<[f64; 3]>,
    /// First-order low-pass time constant (s).
    pub smoothing_time: f64,
    /// Relative standard deviation of the withdrawal speed.
    pub speed_jitter: f64,
    /// Correlation time of the speed fluctuation (s).
    pub speed_correlation_time: f64,
    pub sensors: usize,
    /// σ of scope point noise (mm).
    pub sensor_noise: f64,
    /// σ of scope direction noise (rad, small-angle).
    pub direction_noise: f64,
    /// σ of marker noise (mm).
    pub marker_noise: f64,
    /// Apply a random rigid transform to scope frames.
    pub mounting: bool,
    pub mounting_max_angle_deg: f64,
    pub mounting_max_offset: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::for_phantom(&default_phantom()).expect("default phantom is valid")
    }
}

impl SimConfig {
    /// Defaults for a phantom: 40 mm bumps on mobile markers, centred where
    /// the tip reaches each marker, pushing sideways within the path plane.
    pub fn for_phantom(phantom: &PhantomModel) -> Result<Self, SimError> {
        phantom.validate()?;
        let arc = phantom.marker_arc_positions()?;
        let total = *arc.last().unwrap();
        let tangents = centerline_tangents(&phantom.rest_markers)?;
        let m = phantom.rest_markers.len();
        let directions = tangents
            .iter()
            .map(|t| {
                let v = Point3::new(-t.dy(), t.dx(), 0.25);
                Direction3::from_vector(v).map(|d| d.to_array()).unwrap_or([0.0, 0.0, 1.0])
            })
            .collect();
        Ok(Self {
            frame_rate: 6.0,
            duration: 30.0,
            max_insertion_length: None,
            gains: phantom.fixed.iter().map(|&f| if f { 0.0 } else { 40.0 }).collect(),
            centers: arc.iter().map(|s| total - s).collect(),
            widths: vec![120.0; m],
            directions,
            smoothing_time: 0.5,
            speed_jitter: 0.5,
            speed_correlation_time: 2.0,
            sensors: 6,
            sensor_noise: 0.5,
            direction_noise: 0.01,
            marker_noise: 0.5,
            mounting: false,
            mounting_max_angle_deg: 20.0,
            mounting_max_offset: 20.0,
        })
    }

    pub fn frame_count(&self) -> usize {
        ((self.duration * self.frame_rate).round() as usize).max(2)
    }

    pub fn validate(&self, phantom: &PhantomModel) -> Result<(), SimError> {
        phantom.validate()?;
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!("frame_rate {} must be positive", self.frame_rate));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if !(self.smoothing_time >= 0.0 && self.speed_correlation_time > 0.0) {
            return bad("time constants must be non-negative".into());
        }
        for (name, v) in [
            ("sensor_noise", self.sensor_noise),
            ("direction_noise", self.direction_noise),
            ("marker_noise", self.marker_noise),
            ("speed_jitter", self.speed_jitter),
            ("mounting_max_angle_deg", self.mounting_max_angle_deg),
            ("mounting_max_offset", self.mounting_max_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be ≥ 0"));
            }
        }
        if self.sensors < 2 {
            return bad("sensors must be ≥ 2".into());
        }
        let m = phantom.rest_markers.len();
        for (name, len) in [
            ("gains", self.gains.len()),
            ("centers", self.centers.len()),
            ("widths", self.widths.len()),
            ("directions", self.directions.len()),
        ] {
            if len != m {
                return bad(format!("{name} has {len} entries, phantom has {m} markers"));
            }
        }
        if self.gains.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return bad("gains must be ≥ 0".into());
        }
        if self.widths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("widths must be positive".into());
        }
        if self.centers.iter().any(|c| !c.is_finite()) {
            return bad("centers must be finite".into());
        }
        for d in &self.directions {
            Direction3::new(d[0], d[1], d[2]).map_err(|e| SimError::Config(format!("direction {d:?}: {e}")))?;
        }
        let length = phantom.centerline_length()?;
        if let Some(l) = self.max_insertion_length {
            if !(l > 0.0 && l <= length) {
                return bad(format!("max_insertion_length {l} outside (0, {length:.3}]"));
            }
        }
        Ok(())
    }
}

/// Per-frame internals of a simulation, for tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    /// Withdrawal ramp before smoothing (mm).
    pub commanded: Vec<f64>,
    /// Smoothed insertion length that shapes the scope (mm).
    pub insertion: Vec<f64>,
    /// Noise-free marker positions.
    pub clean_markers: Vec<Vec<Point3>>,
    /// Noise-free scope points.
    pub clean_scope: Vec<Vec<Point3>>,
    pub mounting: RigidTransform,
}

fn withdrawal_ramp(cfg: &SimConfig, l_max: f64, frames: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dt = 1.0 / cfg.frame_rate;
    let rho = (-dt / cfg.speed_correlation_time).exp();
    let innov = (1.0 - rho * rho).sqrt();
    let mut r: f64 = rng.sample(StandardNormal);
    let mut cum = vec![0.0];
    for _ in 1..frames {
        r = rho * r + innov * rng.sample::<f64, _>(StandardNormal);
        let w = (1.0 + cfg.speed_jitter * r).max(0.0);
        cum.push(cum.last().unwrap() + w);
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return (0..frames).map(|k| l_max * (1.0 - k as f64 / (frames - 1) as f64)).collect();
    }
    cum.iter().map(|c| (l_max * (1.0 - c / total)).max(0.0)).collect()
}

fn low_pass(alpha: f64, prev: f64, target: f64) -> f64 {
    prev + alpha * (target - prev)
}

fn random_mounting(cfg: &SimConfig, rng: &mut impl Rng) -> Result<RigidTransform, SimError> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..=cfg.mounting_max_angle_deg).to_radians();
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let offset = Point3::from_array(dir) * rng.random_range(0.0..=cfg.mounting_max_offset);
    Ok(RigidTransform::from_axis_angle(Point3::from_array(axis), angle, offset)?)
}

pub fn simulate_insertion(phantom: &PhantomModel, cfg: &SimConfig, seed: u64) -> Result<InsertionRecording, SimError> {
    Ok(simulate_insertion_traced(phantom, cfg, seed)?.0)
}

pub fn simulate_insertion_traced(
    phantom: &PhantomModel,
    cfg: &SimConfig,
    seed: u64,
) -> Result<(InsertionRecording, SimTrace), SimError> {
    cfg.validate(phantom)?;
    let l_max = match cfg.max_insertion_length {
        Some(l) => l,
        None => phantom.centerline_length()?,
    };
    let frames = cfg.frame_count();
    let dt = 1.0 / cfg.frame_rate;
    let alpha = if cfg.smoothing_time > 0.0 { 1.0 - (-dt / cfg.smoothing_time).exp() } else { 1.0 };

    // Independent streams so noise settings do not change the trajectory.
    let mut ramp_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let mut mount_rng = ChaCha8Rng::seed_from_u64(seed);
    mount_rng.set_stream(2);

    let commanded = withdrawal_ramp(cfg, l_max, frames, &mut ramp_rng);
    let mounting = if cfg.mounting { random_mounting(cfg, &mut mount_rng)? } else { RigidTransform::identity() };
    let dirs: Vec<Point3> = cfg.directions.iter().map(|&d| Point3::from_array(d)).collect();
    let m = phantom.rest_markers.len();
    let sensor = Normal::new(0.0, cfg.sensor_noise).map_err(|e| SimError::Config(e.to_string()))?;
    let marker = Normal::new(0.0, cfg.marker_noise).map_err(|e| SimError::Config(e.to_string()))?;
    let angular = Normal::new(0.0, cfg.direction_noise).map_err(|e| SimError::Config(e.to_string()))?;

    let mut l = commanded[0];
    let mut amp = vec![0.0; m];
    let mut out = Vec::with_capacity(frames);
    let mut trace = SimTrace {
        commanded: commanded.clone(),
        insertion: Vec::with_capacity(frames),
        clean_markers: Vec::with_capacity(frames),
        clean_scope: Vec::with_capacity(frames),
        mounting,
    };
    for (k, &cmd) in commanded.iter().enumerate() {
        if k > 0 {
            l = low_pass(alpha, l, cmd);
        }
        let mut markers = phantom.rest_markers.clone();
        for j in 0..m {
            if phantom.fixed[j] {
                continue;
            }
            let z = (l - cfg.centers[j]) / cfg.widths[j];
            let target = cfg.gains[j] * (-0.5 * z * z).exp();
            amp[j] = if k == 0 { target } else { low_pass(alpha, amp[j], target) };
            markers[j] += dirs[j] * amp[j];
        }
        let curve = centerline(&markers)?;
        let table = ArcTable::new(&curve);
        let total = table.total();
        let len = l.min(total);
        let n = cfg.sensors;
        let mut points = Vec::with_capacity(n);
        let mut directions = Vec::with_capacity(n);
        for i in 0..n {
            let (p, d) = table.at(total - len + len * i as f64 / (n - 1) as f64)?;
            points.push(p);
            directions.push(d);
        }
        trace.insertion.push(l);
        trace.clean_markers.push(markers.clone());
        trace.clean_scope.push(points.clone());

        for p in &mut points {
            *p += noisy(&sensor, &mut noise_rng);
        }
        for d in &mut directions {
            let v = noisy(&angular, &mut noise_rng);
            let ortho = v - d.as_vector() * v.dot(d.as_vector());
            *d = Direction3::from_vector(d.as_vector() + ortho)?;
        }
        for p in &mut markers {
            *p += noisy(&marker, &mut noise_rng);
        }
        let scope = rigid_apply(&mounting, &ScopeFrame::new(points, directions, k + 1)?);
        out.push(FramePair { scope, colon: ColonFrame::new(markers, k + 1) });
    }
    let mut rec = InsertionRecording::new(out).map_err(|e| SimError::Config(e.to_string()))?;
    rec.config = Some(cfg.clone());
    rec.seed = Some(seed);
    Ok((rec, trace))
}

fn noisy(dist: &Normal<f64>, rng: &mut impl Rng) -> Point3 {
    Point3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng))
}

/// Relative half-range of per-recording gain and timing variation.
pub const RECORDING_JITTER: f64 = 0.1;

/// Config of one recording: every gain and the duration are scaled by
/// independent factors in `1 ± RECORDING_JITTER`.
pub fn jittered_config(cfg: &SimConfig, seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut f = || 1.0 + rng.random_range(-RECORDING_JITTER..=RECORDING_JITTER);
    let mut out = cfg.clone();
    out.gains.iter_mut().for_each(|g| *g *= f());
    out.duration *= f();
    out
}

pub fn make_dataset(
    phantom: &PhantomModel,
    cfg: &SimConfig,
    n_insertions: usize,
    master_seed: u64,
) -> Result<Vec<InsertionRecording>, SimError> {
    if n_insertions == 0 {
        return Err(SimError::Config("n_insertions must be ≥ 1".into()));
    }
    (0..n_insertions)
        .map(|i| {
            let seed = derive_seed(master_seed, i as u64);
            simulate_insertion(phantom, &jittered_config(cfg, seed), seed)
        })
        .collect()
}
