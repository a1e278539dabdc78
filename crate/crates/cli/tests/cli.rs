use std::path::Path;
use std::process::Command;

use blowup_cli::{LadderSpec, RunConfig, Status};
use blowup_core::geometry::generate_sample;
use blowup_core::io::write_curvature;
use blowup_core::{CurvaturePoint, Dim, Error};

fn blowup(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_blowup"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env("BLOWUP_THREADS", "2")
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn config_round_trips_bit_exactly() {
    let cfg = RunConfig {
        sample_scale: 0.1 + 0.2,
        tol_quad: 1.0 / 3.0 * 1e-10,
        residual_ladder: LadderSpec {
            start: 2.9e-4 + f64::EPSILON * 1e-4,
            end: 1e-2 / 7.0,
            points: 7,
        },
        phi_bound_constant: std::f64::consts::PI,
        curvature: Some("points.json".into()),
        ..RunConfig::default()
    };
    let back = RunConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.tol_quad.to_bits(), cfg.tol_quad.to_bits());
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    assert!(matches!(
        RunConfig::from_json(r#"{"tol_quad": 1e-10, "bogus": 1}"#),
        Err(Error::Parse(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        RunConfig {
            tol_solver: 0.0,
            ..RunConfig::default()
        },
        RunConfig {
            n: 9,
            ..RunConfig::default()
        },
        RunConfig {
            delta_ladder: LadderSpec {
                start: 0.1,
                end: 0.2,
                points: 6,
            },
            ..RunConfig::default()
        },
        RunConfig {
            eps_ladder: LadderSpec {
                start: 1e-3,
                end: 2.0,
                points: 5,
            },
            ..RunConfig::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(RunConfig {
        n: 9,
        allow_low_dim: true,
        ..RunConfig::default()
    }
    .validate()
    .is_ok());
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(
        Status::of(&Error::Budget {
            msg: String::new(),
            best: 0.0,
            error: 1.0
        })
        .code(),
        3
    );
    assert_eq!(Status::of(&Error::Io(std::io::Error::other("x"))).code(), 4);
    assert_eq!(
        Status::of(&Error::ConstructionImpossible(String::new())).code(),
        2
    );
    assert_eq!(Status::of(&Error::Validation(String::new())).code(), 2);
}

#[test]
fn moments_command_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = blowup(&["moments", "--n", "12"], dir.path());
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(dir.path().join("moments.csv")).unwrap();
    assert!(text.lines().count() >= 5);
}

#[test]
fn missing_curvature_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = blowup(
        &["phi", "--curvature", "/nonexistent/points.json"],
        dir.path(),
    );
    assert_eq!(code, 4);
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\"n\": 11,\n \"samples\": \"five\"}").unwrap();
    let (code, err) = blowup(&["moments", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn flat_point_alone_admits_no_construction() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dim::new(11).unwrap();
    let file = dir.path().join("flat.json");
    write_curvature(
        std::fs::File::create(&file).unwrap(),
        d,
        &[CurvaturePoint::flat(d, 1.0, "flat")],
    )
    .unwrap();
    let (code, err) = blowup(
        &["family", "--curvature", file.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code, 2, "{err}");
    let family = std::fs::read_to_string(dir.path().join("family.csv")).unwrap();
    assert_eq!(family.lines().count(), 1, "only the header: {family}");
}

#[test]
fn reduce_picks_a_point_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dim::new(11).unwrap();
    let file = dir.path().join("pts.json");
    let mut pts: Vec<_> = (3..6)
        .map(|s| generate_sample(d, s, 1.0).unwrap())
        .collect();
    pts.push(CurvaturePoint::flat(d, 1.0, "flat"));
    write_curvature(std::fs::File::create(&file).unwrap(), d, &pts).unwrap();
    let (code, err) = blowup(
        &["reduce", "--curvature", file.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reduction.json")).unwrap())
            .unwrap();
    let excluded = report["family"]["excluded"].as_array().unwrap();
    assert_eq!(excluded.len(), 1);
    assert_eq!(excluded[0]["label"], "flat");
    assert!(report["family"]["lambda0"].as_f64().unwrap() > 0.0);
}
