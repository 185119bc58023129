//! End-to-end behaviour of the public API on synthetic shapes.

mod common;

use std::f64::consts::PI;
use std::fs;

use kss_core::bench::{apply_perturbations, evaluate, run_suite, Perturbation, SuiteOptions, CSV_HEADER};
use kss_core::transform::{rotation_angle_between, EulerZyx};
use kss_core::{
    load_cloud, register, register_partial, save_cloud, CloudFormat, EnergyParams, EnergyVariant, Point3,
    RegisterConfig, Similarity,
};

fn small() -> RegisterConfig {
    RegisterConfig {
        k: 400,
        ..RegisterConfig::default()
    }
}

#[test]
fn register_recovers_a_perturbed_shape() {
    let cloud = common::shape(3, 8000);
    let p = apply_perturbations(&cloud, &[Perturbation::similarity()], 11).unwrap();
    let r = register(&p.source, &cloud, &small()).unwrap();
    let truth = p.transform.inverse();
    let err = rotation_angle_between(&r.similarity.rotation, &truth.rotation).to_degrees();
    assert!(err < 3.0, "rotation error {err}");
    assert!((r.similarity.scale / truth.scale - 1.0).abs() < 0.02, "scale {} vs {}", r.similarity.scale, truth.scale);
    let report = evaluate(&p.source.transformed(&r.similarity), &p.ground_truth).unwrap();
    assert!(report.mse < 1e-3 * cloud.bounding_box().diagonal().powi(2));
}

#[test]
fn every_energy_variant_registers_a_clean_copy() {
    let cloud = common::shape(5, 6000);
    let turned = cloud.transformed(&Similarity {
        rotation: EulerZyx { x: 0.9, y: -2.1, z: 2.6 }.matrix(),
        translation: Point3::new(4.0, 1.0, -3.0),
        scale: 0.6,
    });
    for variant in [EnergyVariant::DirectedMean, EnergyVariant::DirectedMax, EnergyVariant::SymmetricMax] {
        let config = RegisterConfig {
            energy: EnergyParams {
                variant,
                ..EnergyParams::default()
            },
            ..small()
        };
        let r = register(&turned, &cloud, &config).unwrap();
        let back = turned.transformed(&r.similarity);
        let worst = back
            .points()
            .iter()
            .zip(cloud.points())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst < 0.05 * cloud.bounding_box().diagonal(), "{variant:?}: {worst}");
    }
}

#[test]
fn metrics_ignore_the_scale_draw() {
    let cloud = common::shape(7, 8000);
    let rotation = EulerZyx { x: 1.1, y: 2.4, z: -0.8 }.matrix();
    let mse_at = |scale: f64| {
        let t = Similarity {
            rotation,
            translation: Point3::new(0.5, -0.2, 1.0),
            scale,
        };
        let source = cloud.transformed(&t);
        let r = register(&source, &cloud, &small()).unwrap();
        let truth = source.transformed(&t.inverse());
        evaluate(&source.transformed(&r.similarity), &truth).unwrap().mse
    };
    let (a, b) = (mse_at(0.8), mse_at(1.2));
    assert!((a - b).abs() <= 0.05 * a.max(b), "{a} vs {b}");
}

#[test]
fn partial_search_is_never_worse_than_the_centroid() {
    let mean = RegisterConfig {
        k: 250,
        theta: PI / 3.0,
        ..RegisterConfig::default()
    };
    for id in 0..3 {
        let cloud = common::shape(20 + id, 5000);
        let cut = common::slab_deleted(&cloud, id as usize, 0.3);
        let p = apply_perturbations(&cut, &[Perturbation::similarity()], id).unwrap();
        let partial = register_partial(&p.source, &cloud, &mean).unwrap();
        let global = register(&p.source, &cloud, &mean).unwrap();
        assert!(partial.energy_init <= global.energy_init, "{} > {}", partial.energy_init, global.energy_init);
        assert!(partial.candidate_center.is_some() && global.candidate_center.is_none());
    }
}

#[test]
fn heavy_deletion_terminates_with_an_energy() {
    let cloud = common::shape(1, 5000);
    let cut = common::slab_deleted(&cloud, 0, 0.6);
    let config = RegisterConfig {
        k: 200,
        theta: PI / 3.0,
        ..RegisterConfig::default()
    };
    let r = register_partial(&cut, &cloud, &config).unwrap();
    assert!(r.energy.is_finite() && r.energy >= 0.0);
}

#[test]
fn files_round_trip_in_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = common::shape(2, 500);
    for ext in ["ply", "obj", "xyz"] {
        let path = dir.path().join(format!("c.{ext}"));
        save_cloud(&cloud, &path, CloudFormat::Auto).unwrap();
        let back = load_cloud(&path, CloudFormat::Auto).unwrap();
        assert_eq!(back.len(), cloud.len());
        for (a, b) in back.points().iter().zip(cloud.points()) {
            assert!((a - b).norm() < 1e-9, "{ext}");
        }
    }
}

#[test]
fn suite_batch_semantics() {
    let dir = tempfile::tempdir().unwrap();
    save_cloud(&common::shape(4, 3000), dir.path().join("s.ply"), CloudFormat::Ply).unwrap();
    let config = RegisterConfig {
        k: 200,
        theta: PI / 3.0,
        ..RegisterConfig::default()
    };

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let summary = run_suite(&empty, &dir.path().join("none"), &config, SuiteOptions::default()).unwrap();
    assert_eq!(fs::read_to_string(summary.csv).unwrap(), format!("{CSV_HEADER}\n"));

    let manifest = dir.path().join("three.jsonl");
    let line = |seed: u32| format!(r#"{{"source": "s.ply", "target": "s.ply", "seed": {seed}, "perturbations": [{{"kind": "similarity"}}]}}"#);
    fs::write(&manifest, [line(1), line(2), line(3)].join("\n")).unwrap();
    let out = dir.path().join("out");
    let summary = run_suite(&manifest, &out, &config, SuiteOptions::default()).unwrap();
    assert_eq!((summary.pairs, summary.computed, summary.skipped), (3, 3, 0));
    let csv = fs::read_to_string(&summary.csv).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let transforms: Vec<_> = (0..3).map(|i| out.join(format!("pair_{i:04}")).join("transform.json")).collect();
    let stamps: Vec<_> = transforms
        .iter()
        .map(|t| fs::metadata(t).unwrap().modified().unwrap())
        .collect();

    let again = run_suite(&manifest, &out, &config, SuiteOptions::default()).unwrap();
    assert_eq!((again.computed, again.skipped), (0, 3));
    assert_eq!(fs::read_to_string(&again.csv).unwrap(), csv);
    for (t, s) in transforms.iter().zip(&stamps) {
        assert_eq!(fs::metadata(t).unwrap().modified().unwrap(), *s);
    }
}
