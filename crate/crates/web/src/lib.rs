//! Browser bindings for the demo page in `www/`. Each export takes plain
//! numbers and returns a JSON string, so the page needs no bundler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use sen_core::features::relation_maps;
use sen_core::geometry::{insertion_length_with, Direction3, Point3, RigidTransform, ScopeFrame};
use sen_core::registration::{icp_register, IcpConfig};
use sen_core::simulator::{default_phantom, simulate_insertion, SimConfig};

fn xy(points: &[Point3]) -> Value {
    Value::Array(points.iter().map(|p| json!([p.x, p.y])).collect())
}

fn error(message: impl std::fmt::Display) -> String {
    json!({ "error": message.to_string() }).to_string()
}

/// Simulates one withdrawal and returns every frame's scope points, markers
/// and relation matrices (P in mm, D as cosines).
#[wasm_bindgen]
pub fn simulate(seed: u32, gain_mm: f64, noise_mm: f64) -> String {
    let phantom = default_phantom();
    let mut cfg = SimConfig::default();
    for (g, &fixed) in cfg.gains.iter_mut().zip(&phantom.fixed) {
        *g = if fixed { 0.0 } else { gain_mm.max(0.0) };
    }
    cfg.sensor_noise = noise_mm.max(0.0);
    cfg.marker_noise = noise_mm.max(0.0);
    let rec = match simulate_insertion(&phantom, &cfg, u64::from(seed)) {
        Ok(r) => r,
        Err(e) => return error(e),
    };
    let frames: Vec<Value> = rec
        .frames
        .iter()
        .map(|f| {
            let maps = relation_maps(&f.scope);
            json!({
                "index": f.scope.frame_index,
                "scope": xy(f.scope.points()),
                "markers": xy(&f.colon.markers),
                "length": insertion_length_with(&f.scope, 32),
                "p": maps.positional,
                "d": maps.directional,
            })
        })
        .collect();
    json!({ "rest": xy(&phantom.rest_markers), "n": cfg.sensors, "frames": frames }).to_string()
}

/// Registers noisy, rigidly moved phantom markers back onto the rest layout.
#[wasm_bindgen]
pub fn icp(seed: u32, angle_deg: f64, offset_mm: f64, noise_mm: f64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let reference = default_phantom().rest_markers;
    let axis: [f64; 3] = UnitSphere.sample(&mut rng);
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let tf = match RigidTransform::from_axis_angle(
        Point3::from_array(axis),
        angle_deg.to_radians(),
        Point3::from_array(dir) * offset_mm,
    ) {
        Ok(t) => t,
        Err(e) => return error(e),
    };
    let noise = match Normal::new(0.0, noise_mm.max(0.0)) {
        Ok(n) => n,
        Err(e) => return error(e),
    };
    let moving: Vec<Point3> = reference
        .iter()
        .map(|&p| {
            let q = tf.inverse().apply_point(p);
            q + Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
        })
        .collect();
    // Shuffle so correspondences are not given by index.
    let mut shuffled = moving.clone();
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.random_range(0..=i));
    }
    match icp_register(&shuffled, &reference, &IcpConfig::default()) {
        Ok(r) => {
            let aligned: Vec<Point3> = shuffled.iter().map(|&p| r.transform.apply_point(p)).collect();
            json!({
                "reference": xy(&reference),
                "moving": xy(&shuffled),
                "aligned": xy(&aligned),
                "residuals": r.residual_history,
                "converged": r.converged,
                "angle_error_deg": r.transform.compose(&tf.inverse()).rotation_angle().to_degrees(),
            })
            .to_string()
        }
        Err(e) => error(e),
    }
}

/// Hermite length of six exact samples of a half circle against the true
/// arc length, for a range of sampling densities.
#[wasm_bindgen]
pub fn hermite_length(radius_mm: f64, max_samples: u32) -> String {
    if !(radius_mm > 0.0 && radius_mm.is_finite()) {
        return error("radius must be positive");
    }
    let n = 6;
    let mut points = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n);
    for i in 0..n {
        let a = std::f64::consts::PI * i as f64 / (n - 1) as f64;
        points.push(Point3::new(radius_mm * a.cos(), radius_mm * a.sin(), 0.0));
        match Direction3::new(-a.sin(), a.cos(), 0.0) {
            Ok(d) => dirs.push(d),
            Err(e) => return error(e),
        }
    }
    let frame = match ScopeFrame::new(points, dirs, 1) {
        Ok(f) => f,
        Err(e) => return error(e),
    };
    let exact = std::f64::consts::PI * radius_mm;
    let rows: Vec<Value> = (1..=max_samples.clamp(1, 256))
        .map(|k| {
            let l = insertion_length_with(&frame, k as usize);
            json!({ "samples": k, "length": l, "relative_error": (l - exact) / exact })
        })
        .collect();
    json!({ "exact": exact, "rows": rows }).to_string()
}
