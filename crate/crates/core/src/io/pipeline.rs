//! Pipeline stages behind the command-line front end: truth-scene
//! construction, view simulation, network fitting, and evaluation, all
//! driven by one `RunConfig`.

use ndarray::NdFloat;
use rustfft::FftNum;

use crate::encode::{simulate_views, KSpaceSet};
use crate::error::{Error, Result};
use crate::geometry::make_grid;
use crate::inr::convert_network;
use crate::io::container::{Dataset, ReconResults};
use crate::io::runconfig::{PhantomSection, Precision, RunConfig};
use crate::metrics::{evaluate, MetricReport};
use crate::phantom::{
    support_mask, AnalyticCoils, AnalyticField, AnalyticPhantom, GaussianBump, Scene,
};
use crate::train::{FieldSource, NetsConfig, TrainConfig, Trainer};

/// Recognized for compatibility with scripted runs. Execution is
/// single-threaded with a fixed reduction order, so results are
/// deterministic whether or not the variable is set.
pub const DETERMINISTIC_ENV: &str = "PINR_DETERMINISTIC";

/// Truth field: a smooth polynomial ramp plus two off-center Gaussian lobes,
/// scaled so the peak |B0| over a fine reference grid equals `peak_hz`.
fn field_with_peak(peak_hz: f64) -> Result<AnalyticField> {
    let shape = AnalyticField {
        poly_hz: [0.1, 0.4, -0.3, 0.6, 0.3, -0.5],
        bumps: vec![
            GaussianBump {
                center: [0.15, -0.1],
                sigma: 0.15,
                amplitude_hz: 0.8,
            },
            GaussianBump {
                center: [-0.18, 0.12],
                sigma: 0.12,
                amplitude_hz: -0.6,
            },
        ],
        max_abs_hz: f64::MAX,
    };
    let grid = make_grid(128, 128)?;
    let mut peak = 0.0f64;
    for &[x, y] in grid.coords() {
        peak = peak.max(shape.eval_at(x, y).abs());
    }
    let s = peak_hz / peak;
    Ok(AnalyticField {
        poly_hz: shape.poly_hz.map(|c| c * s),
        bumps: shape
            .bumps
            .iter()
            .map(|b| GaussianBump {
                amplitude_hz: b.amplitude_hz * s,
                ..*b
            })
            .collect(),
        max_abs_hz: 500.0,
    })
}

/// Head phantom, scaled truth field, and a ring of synthetic coils.
pub fn build_scene(cfg: &PhantomSection) -> Result<Scene> {
    if !(0.0..=500.0).contains(&cfg.b0_peak_hz) {
        return Err(Error::Config(format!(
            "b0_peak_hz must lie in [0, 500], got {}",
            cfg.b0_peak_hz
        )));
    }
    Ok(Scene {
        phantom: AnalyticPhantom::head(),
        field: field_with_peak(cfg.b0_peak_hz)?,
        coils: AnalyticCoils::ring(cfg.coils, cfg.seed)?,
    })
}

/// Samples the truth scene on the configured grid.
pub fn run_phantom(cfg: &RunConfig) -> Result<Dataset> {
    let size = cfg.phantom.size;
    let grid = make_grid(size, size)?;
    let scene = build_scene(&cfg.phantom)?;
    let (truth_image, truth_b0, coils) = scene.sample(&grid)?;
    Ok(Dataset {
        scene,
        truth_image,
        truth_b0,
        coils: coils.maps,
        seed: cfg.phantom.seed,
        noise_snr_db: None,
        views: Vec::new(),
    })
}

/// Acquires the configured views by re-sampling the scene per rotation.
pub fn run_simulate(ds: &Dataset, cfg: &RunConfig) -> Result<KSpaceSet> {
    let specs = cfg.view_specs()?;
    let (h, w) = ds.shape();
    simulate_views(&ds.scene, h, w, &specs, cfg.encode.noise_snr_db, ds.seed)
}

fn fit_with<T: NdFloat + FftNum>(
    set: &KSpaceSet,
    coils: &AnalyticCoils,
    nets: NetsConfig,
    train: TrainConfig,
    config_toml: String,
) -> Result<ReconResults> {
    let mut trainer = Trainer::<T>::new(set, coils, nets, train, FieldSource::Network)?;
    let report = trainer.fit()?;
    let (image, b0) = trainer.infer();
    Ok(ReconResults {
        image,
        b0,
        loss_history: report.loss_history,
        image_net: convert_network::<T, f64>(trainer.image_net()),
        field_net: trainer.field_net().map(convert_network::<T, f64>),
        config_toml,
    })
}

/// Fits both networks against the dataset's views and renders the outputs.
pub fn run_reconstruct(ds: &Dataset, cfg: &RunConfig) -> Result<ReconResults> {
    let set = ds.kspace()?;
    let nets = cfg.nets_config();
    let train = cfg.train_config();
    let config_toml = cfg.to_toml();
    match cfg.train.precision {
        Precision::F32 => fit_with::<f32>(&set, &ds.scene.coils, nets, train, config_toml),
        Precision::F64 => fit_with::<f64>(&set, &ds.scene.coils, nets, train, config_toml),
    }
}

/// Scores a reconstruction against the dataset's truth.
pub fn run_evaluate(ds: &Dataset, res: &ReconResults, cfg: &RunConfig) -> Result<MetricReport> {
    if res.image.dim() != ds.truth_image.dim() {
        return Err(Error::ShapeMismatch(format!(
            "recon grid {:?} vs truth grid {:?}",
            res.image.dim(),
            ds.truth_image.dim()
        )));
    }
    let mask = support_mask(&ds.truth_image, cfg.eval.mask_threshold)?;
    let accel = ds.views.first().map(|v| v.spec.accel).unwrap_or(0);
    evaluate(
        &res.image,
        &ds.truth_image,
        res.b0.as_ref(),
        &ds.truth_b0,
        &mask,
        ds.views.len(),
        accel,
        ds.seed,
    )
}
