//! Mutation fuzzing of every text parser: valid files are damaged at random
//! and each parser must return `Ok` or `Err`, never panic.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sen_core::baseline::{train_forest_model, ForestConfig};
use sen_core::dataio::*;
use sen_core::eval::Method;
use sen_core::features::Normalizer;
use sen_core::model::{SenArchitecture, SenModel};
use sen_core::simulator::{default_phantom, simulate_insertion, SimConfig};
use sen_core::{Point3, RigidTransform};

use common::mutate;

const CASES: usize = 10_000;

fn fuzz<T>(name: &str, seed: u64, valid: &str, parse: impl Fn(&str) -> Result<T, DataError>) {
    assert!(parse(valid).is_ok(), "{name}: the seed text must parse");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    for _ in 0..CASES {
        let text = mutate(&mut rng, valid);
        if parse(&text).is_err() {
            rejected += 1;
        }
    }
    // Most mutations must be caught; a parser that accepts everything is broken.
    assert!(rejected > CASES / 2, "{name}: only {rejected}/{CASES} mutations rejected");
}

fn sim() -> SimConfig {
    SimConfig { duration: 1.0, ..SimConfig::default() }
}

#[test]
fn recording_parser_survives_mutations() {
    let rec = simulate_insertion(&default_phantom(), &sim(), 1).unwrap();
    fuzz("recording", 1, &format_recording(&rec), parse_recording);
}

#[test]
fn predictions_parser_survives_mutations() {
    let rec = simulate_insertion(&default_phantom(), &sim(), 2).unwrap();
    let frames: Vec<_> = rec.frames.iter().map(|f| f.colon.clone()).collect();
    fuzz("predictions", 2, &format_predictions(&frames), parse_predictions);
}

#[test]
fn model_parser_survives_mutations() {
    let arch = SenArchitecture { conv_channels: vec![2], embed_size: 3, hidden_size: 4, head_sizes: vec![5], ..SenArchitecture::default() };
    let norm = Normalizer::new(Point3::new(1.0, 2.0, 3.0), 0.01, 0.002).unwrap();
    let model = SenModel::new(arch, norm, 3).unwrap();
    fuzz("model", 3, &format_model(&model), parse_model);
}

#[test]
fn forest_parser_survives_mutations() {
    let rec = simulate_insertion(&default_phantom(), &sim(), 4).unwrap();
    let cfg = ForestConfig { trees: 2, max_depth: 3, ..ForestConfig::default() };
    let model = train_forest_model(&[rec], &cfg, 1).unwrap();
    fuzz("forest", 4, &format_forest(&model), parse_forest);
}

#[test]
fn config_parser_survives_mutations() {
    fuzz("config", 5, &format_config(&Config::default()), parse_config);
}

#[test]
fn geometry_parsers_survive_mutations() {
    let tf = RigidTransform::from_axis_angle(Point3::new(0.0, 0.0, 1.0), 0.3, Point3::new(1.0, -2.0, 3.0)).unwrap();
    fuzz("transform", 6, &format_transform(&tf), parse_transform);
    let cloud: Vec<Point3> = (0..12).map(|i| Point3::new(i as f64, (i * i) as f64 * 0.5, -1.0)).collect();
    fuzz("cloud", 7, &format_cloud(&cloud), parse_cloud);
}

#[test]
fn manifest_parsers_survive_mutations() {
    let m = Manifest {
        config_sha256: sha256_hex(b"config"),
        master_seed: 9,
        entries: (1..=3).map(|k| ManifestEntry { file: format!("insertion_{k}.csv"), seed: k * 11, frames: 600 }).collect(),
    };
    fuzz("manifest", 8, &format_manifest(&m), parse_manifest);
    let r = ReportManifest {
        config_sha256: sha256_hex(b"config"),
        master_seed: 1,
        recordings: 7,
        epochs: 300,
        default_epochs: 480,
        artifacts: vec![(0, Method::Sen, sha256_hex(b"a")), (0, Method::Forest, sha256_hex(b"b"))],
    };
    fuzz("report manifest", 9, &format_report_manifest(&r), parse_report_manifest);
}
