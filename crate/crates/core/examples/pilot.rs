//! Quality and timing pilots for the standard reconstruction scenarios.
//! These runs produced the margin numbers recorded in docs/pilots.md.
//!
//! Usage: pilot <mode> [iterations]
//!   time   per-iteration wall time of the joint fit (default 30 iters)
//!   c4     fixed true-field fit on the 64x64 three-view R=2 scenario
//!   c5     joint fit on the same scenario
//!   c6     view-count comparison at 24x24 (two-view R=4 vs three-view R=6,
//!          12 acquired lines each) around a 150 Hz Gaussian field peak

use std::time::Instant;

use ndarray::Array2;
use pinr_core::geometry::{make_grid, rotate_coords};
use pinr_core::io::pipeline::{run_phantom, run_simulate};
use pinr_core::io::runconfig::RunConfig;
use pinr_core::metrics::{b0_mae, magnitude, psnr, psnr_masked};
use pinr_core::phantom::{make_b0, support_mask};
use pinr_core::train::{FieldSource, Trainer};

fn standard_config(iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.phantom.size = 64;
    cfg.phantom.coils = 8;
    cfg.phantom.b0_peak_hz = 150.0;
    cfg.phantom.seed = 7;
    cfg.views.angles_deg = vec![0.0, 120.0, 240.0];
    cfg.views.accel = 2;
    cfg.train.iterations = iterations;
    cfg
}

fn reduced_nets() -> pinr_core::NetsConfig {
    pinr_core::NetsConfig {
        hash: pinr_core::HashGridConfig {
            levels: 8,
            log2_table: 14,
            ..Default::default()
        },
        hidden_width: 64,
        ..Default::default()
    }
}

/// Scene whose field is dominated by a single 150 Hz Gaussian lobe.
fn bump_scene(coils: usize, seed: u64) -> pinr_core::Scene {
    pinr_core::Scene {
        phantom: pinr_core::AnalyticPhantom::head(),
        field: pinr_core::AnalyticField {
            poly_hz: [10.0, 25.0, -20.0, 0.0, 0.0, 0.0],
            bumps: vec![pinr_core::GaussianBump {
                center: [0.15, -0.1],
                sigma: 0.15,
                amplitude_hz: 150.0,
            }],
            max_abs_hz: 500.0,
        },
        coils: pinr_core::AnalyticCoils::ring(coils, seed).expect("coils"),
    }
}

struct Truth {
    image_mag: Array2<f64>,
    b0: Array2<f64>,
    mask: Array2<bool>,
}

fn setup(cfg: &RunConfig) -> (pinr_core::Dataset, Truth) {
    let mut ds = run_phantom(cfg).expect("phantom");
    ds.views = run_simulate(&ds, cfg).expect("simulate").views;
    let truth = Truth {
        image_mag: magnitude(&ds.truth_image),
        b0: ds.truth_b0.clone(),
        mask: support_mask(&ds.truth_image, cfg.eval.mask_threshold).expect("mask"),
    };
    (ds, truth)
}

fn joint_trainer(ds: &pinr_core::Dataset, cfg: &RunConfig) -> Trainer<f32> {
    Trainer::new(
        &ds.kspace().expect("views"),
        &ds.scene.coils,
        cfg.nets_config(),
        cfg.train_config(),
        FieldSource::Network,
    )
    .expect("trainer")
}

fn run_time(iterations: usize) {
    let cfg = standard_config(iterations.max(10));
    let (ds, _) = setup(&cfg);
    let mut trainer = joint_trainer(&ds, &cfg);
    let start = Instant::now();
    trainer.fit().expect("fit");
    let dt = start.elapsed().as_secs_f64();
    println!(
        "{} iterations in {:.2} s -> {:.1} ms/iter ({:.1} min for 6000)",
        cfg.train.iterations,
        dt,
        1e3 * dt / cfg.train.iterations as f64,
        6000.0 * dt / cfg.train.iterations as f64 / 60.0
    );
}

fn run_c4(iterations: usize) {
    let cfg = standard_config(iterations);
    let (ds, truth) = setup(&cfg);
    let grid = make_grid(64, 64).expect("grid");
    let fixed: Vec<Array2<f64>> = ds
        .views
        .iter()
        .map(|v| make_b0(&ds.scene.field, &rotate_coords(&grid, v.spec.angle)).expect("field"))
        .collect();
    let mut trainer: Trainer<f32> = Trainer::new(
        &ds.kspace().expect("views"),
        &ds.scene.coils,
        cfg.nets_config(),
        cfg.train_config(),
        FieldSource::Fixed(fixed),
    )
    .expect("trainer");
    let start = Instant::now();
    trainer
        .fit_with_callback(|t, it, loss| {
            if it % 100 == 0 {
                let (img, _) = t.infer();
                let p = psnr(&magnitude(&img), &truth.image_mag).unwrap();
                println!(
                    "iter {it:5}  loss {loss:.3e}  psnr {p:6.2} dB  [{:.0} s]",
                    start.elapsed().as_secs_f64()
                );
            }
            true
        })
        .expect("fit");
    let (img, _) = trainer.infer();
    let p = psnr(&magnitude(&img), &truth.image_mag).unwrap();
    println!("final: psnr {p:.2} dB after {} iters", trainer.iteration());
}

fn run_c5(iterations: usize) {
    let cfg = standard_config(iterations);
    let (ds, truth) = setup(&cfg);
    let mut trainer = joint_trainer(&ds, &cfg);
    let start = Instant::now();
    trainer
        .fit_with_callback(|t, it, loss| {
            if it % 200 == 0 {
                let (img, field) = t.infer();
                let p = psnr_masked(&magnitude(&img), &truth.image_mag, &truth.mask).unwrap();
                let mae = b0_mae(&field.unwrap(), &truth.b0, &truth.mask).unwrap();
                println!(
                    "iter {it:5}  loss {loss:.3e}  masked psnr {p:6.2} dB  b0 mae {mae:6.2} Hz  [{:.0} s]",
                    start.elapsed().as_secs_f64()
                );
            }
            true
        })
        .expect("fit");
    let (img, field) = trainer.infer();
    let p = psnr_masked(&magnitude(&img), &truth.image_mag, &truth.mask).unwrap();
    let mae = b0_mae(&field.unwrap(), &truth.b0, &truth.mask).unwrap();
    println!(
        "final: masked psnr {p:.2} dB, b0 mae {mae:.2} Hz after {} iters in {:.0} s",
        trainer.iteration(),
        start.elapsed().as_secs_f64()
    );
}

fn bump_roi(size: usize) -> Array2<bool> {
    // disc of radius 2 sigma around the first truth-field lobe
    let (cx, cy, r) = (0.15, -0.1, 0.30);
    Array2::from_shape_fn((size, size), |(i, j)| {
        let x = i as f64 / size as f64 - 0.5;
        let y = j as f64 / size as f64 - 0.5;
        (x - cx).powi(2) + (y - cy).powi(2) <= r * r
    })
}

fn run_c6(iterations: usize) {
    const SIZE: usize = 24;
    let roi = bump_roi(SIZE);
    let specs = |angles: &[f64], accel: usize| -> Vec<pinr_core::ViewSpec> {
        angles
            .iter()
            .map(|&a| pinr_core::ViewSpec {
                angle: pinr_core::RotationAngle::from_degrees(a),
                accel,
                line_offset: 0,
                // 1 ms x R: both protocols span the same 24 ms readout
                esp_s: 1e-3 * accel as f64,
                te_first_s: 0.0,
            })
            .collect()
    };
    let mut two = Vec::new();
    let mut three = Vec::new();
    for seed in 0..5u64 {
        let scene = bump_scene(4, seed);
        let grid = make_grid(SIZE, SIZE).expect("grid");
        let truth_b0 = make_b0(&scene.field, &grid).expect("b0");
        let cases = [
            ("two-view", specs(&[0.0, 180.0], 4), &mut two),
            ("three-view", specs(&[0.0, 120.0, 240.0], 6), &mut three),
        ];
        for (label, sp, out) in cases {
            let lines: usize = sp
                .iter()
                .map(|s| (SIZE - s.line_offset).div_ceil(s.accel))
                .sum();
            let data =
                pinr_core::simulate_views(&scene, SIZE, SIZE, &sp, None, seed).expect("views");
            let mut cfg = pinr_core::TrainConfig::default();
            cfg.iterations = iterations;
            cfg.seed = seed;
            let mut trainer: Trainer<f32> = Trainer::new(
                &data,
                &scene.coils,
                reduced_nets(),
                cfg,
                FieldSource::Network,
            )
            .expect("trainer");
            trainer.fit().expect("fit");
            let (_, field) = trainer.infer();
            let mae = b0_mae(&field.unwrap(), &truth_b0, &roi).unwrap();
            println!("seed {seed} {label:10} ({lines} lines) roi b0 mae {mae:6.2} Hz");
            out.push(mae);
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    println!(
        "median roi b0 mae: two-view {:.2} Hz, three-view {:.2} Hz",
        median(&mut two),
        median(&mut three)
    );
}

fn main() {
    let mut args = std::env::args().skip(1);
    let mode = args.next().unwrap_or_else(|| "time".into());
    let iterations: usize = args
        .next()
        .map(|s| s.parse().expect("iteration count"))
        .unwrap_or(match mode.as_str() {
            "time" => 30,
            "c6" => 2000,
            _ => 6000,
        });
    match mode.as_str() {
        "time" => run_time(iterations),
        "c4" => run_c4(iterations),
        "c5" => run_c5(iterations),
        "c6" => run_c6(iterations),
        other => eprintln!("unknown mode {other}; use time | c4 | c5 | c6"),
    }
}
