//! HDF5 persistence. A dataset file holds the analytic truth scene, its
//! sampled arrays, and the acquired k-space views; a results file holds the
//! reconstruction outputs, the fitted network parameters, and the resolved
//! config that produced them.
//!
//! Complex arrays are stored as float64 with a trailing (real, imag) axis.
//! K-space views are zero-embedded onto the full H-row grid; the acquired
//! rows follow from the stored `R` and `line_offset` attributes.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use hdf5::types::VarLenUnicode;
use hdf5::{File, Group, Location};
use ndarray::{Array2, Array3, Array4, ArrayView1, Ix3, Ix4};
use num_complex::Complex64;

use crate::encode::{KSpaceSet, ViewData, ViewSpec};
use crate::error::{Error, Result};
use crate::geometry::RotationAngle;
use crate::inr::{HashGridConfig, MlpConfig, NetworkParams, ParamSet};
use crate::phantom::{ComplexImage, FieldMap, Scene};

pub const FORMAT_VERSION: u64 = 1;

/// In-memory image of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Analytic scene description; views are simulated by re-sampling it on
    /// rotated grids, so the file must carry it, not just the arrays.
    pub scene: Scene,
    pub truth_image: ComplexImage,
    pub truth_b0: FieldMap,
    pub coils: Array3<Complex64>,
    pub seed: u64,
    pub noise_snr_db: Option<f64>,
    pub views: Vec<ViewData>,
}

impl Dataset {
    pub fn shape(&self) -> (usize, usize) {
        self.truth_b0.dim()
    }

    /// The acquired views as a fit-ready set.
    pub fn kspace(&self) -> Result<KSpaceSet> {
        if self.views.is_empty() {
            return Err(Error::Config(
                "dataset has no k-space views; run simulate first".into(),
            ));
        }
        Ok(KSpaceSet {
            views: self.views.clone(),
            shape: self.shape(),
            coil_count: self.coils.dim().0,
            seed: self.seed,
            noise_snr_db: self.noise_snr_db,
        })
    }
}

/// Everything a reconstruction writes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconResults {
    pub image: ComplexImage,
    pub b0: Option<FieldMap>,
    pub loss_history: Vec<[f64; 2]>,
    pub image_net: NetworkParams<f64>,
    pub field_net: Option<NetworkParams<f64>>,
    /// Resolved config, embedded for provenance.
    pub config_toml: String,
}

fn complex2_to_planes(a: &ComplexImage) -> Array3<f64> {
    let (h, w) = a.dim();
    Array3::from_shape_fn((h, w, 2), |(i, j, p)| {
        let v = a[[i, j]];
        if p == 0 {
            v.re
        } else {
            v.im
        }
    })
}

fn planes_to_complex2(a: Array3<f64>) -> Result<ComplexImage> {
    let (h, w, p) = a.dim();
    if p != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected trailing (re, im) axis, got {p}"
        )));
    }
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        Complex64::new(a[[i, j, 0]], a[[i, j, 1]])
    }))
}

fn complex3_to_planes(a: &Array3<Complex64>) -> Array4<f64> {
    let (c, h, w) = a.dim();
    Array4::from_shape_fn((c, h, w, 2), |(ci, i, j, p)| {
        let v = a[[ci, i, j]];
        if p == 0 {
            v.re
        } else {
            v.im
        }
    })
}

fn planes_to_complex3(a: Array4<f64>) -> Result<Array3<Complex64>> {
    let (c, h, w, p) = a.dim();
    if p != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected trailing (re, im) axis, got {p}"
        )));
    }
    Ok(Array3::from_shape_fn((c, h, w), |(ci, i, j)| {
        Complex64::new(a[[ci, i, j, 0]], a[[ci, i, j, 1]])
    }))
}

fn write_f64_attr(loc: &Location, name: &str, value: f64) -> Result<()> {
    loc.new_attr::<f64>().create(name)?.write_scalar(&value)?;
    Ok(())
}

fn write_u64_attr(loc: &Location, name: &str, value: u64) -> Result<()> {
    loc.new_attr::<u64>().create(name)?.write_scalar(&value)?;
    Ok(())
}

fn write_str_attr(loc: &Location, name: &str, value: &str) -> Result<()> {
    let text: VarLenUnicode = value
        .parse()
        .map_err(|e| Error::Config(format!("attribute {name}: {e}")))?;
    loc.new_attr::<VarLenUnicode>()
        .create(name)?
        .write_scalar(&text)?;
    Ok(())
}

fn read_f64_attr(loc: &Location, name: &str) -> Result<f64> {
    Ok(loc.attr(name)?.read_scalar::<f64>()?)
}

fn read_u64_attr(loc: &Location, name: &str) -> Result<u64> {
    Ok(loc.attr(name)?.read_scalar::<u64>()?)
}

fn read_str_attr(loc: &Location, name: &str) -> Result<String> {
    Ok(loc.attr(name)?.read_scalar::<VarLenUnicode>()?.to_string())
}

fn now_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn check_version(loc: &Location) -> Result<()> {
    let v = read_u64_attr(loc, "format_version")?;
    if v != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported container format_version {v} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

/// Creates a dataset file with the truth groups (and views when present).
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path)?;
    write_u64_attr(&file, "format_version", FORMAT_VERSION)?;
    write_u64_attr(&file, "seed", ds.seed)?;
    // infinite SNR encodes "no noise added"
    write_f64_attr(
        &file,
        "noise_snr_db",
        ds.noise_snr_db.unwrap_or(f64::INFINITY),
    )?;
    write_f64_attr(&file, "timestamp", now_seconds())?;
    let scene_json =
        serde_json::to_string(&ds.scene).map_err(|e| Error::Config(e.to_string()))?;
    write_str_attr(&file, "scene_json", &scene_json)?;

    let truth = file.create_group("truth")?;
    truth
        .new_dataset_builder()
        .with_data(&complex2_to_planes(&ds.truth_image))
        .create("image")?;
    truth
        .new_dataset_builder()
        .with_data(&ds.truth_b0)
        .create("b0")?;
    file.new_dataset_builder()
        .with_data(&complex3_to_planes(&ds.coils))
        .create("coils")?;
    if !ds.views.is_empty() {
        write_view_group(&file, &ds.views, ds.shape())?;
    }
    Ok(())
}

fn write_view_group(file: &File, views: &[ViewData], shape: (usize, usize)) -> Result<()> {
    let (h, w) = shape;
    let group = file.create_group("kspace")?;
    for (n, view) in views.iter().enumerate() {
        let lines = view.spec.acquired_lines(h);
        let (c, s, wd) = view.data.dim();
        if s != lines.len() || wd != w {
            return Err(Error::ShapeMismatch(format!(
                "view {n}: data ({c}, {s}, {wd}) vs {} acquired lines on a {h}x{w} grid",
                lines.len()
            )));
        }
        let mut full = Array4::<f64>::zeros((c, h, w, 2));
        for ci in 0..c {
            for (si, &ell) in lines.iter().enumerate() {
                for j in 0..w {
                    let v = view.data[[ci, si, j]];
                    full[[ci, ell, j, 0]] = v.re;
                    full[[ci, ell, j, 1]] = v.im;
                }
            }
        }
        let name = format!("view_{n}");
        let dset = group
            .new_dataset_builder()
            .with_data(&full)
            .create(name.as_str())?;
        write_f64_attr(&dset, "theta_deg", view.spec.angle.degrees())?;
        write_u64_attr(&dset, "R", view.spec.accel as u64)?;
        write_u64_attr(&dset, "line_offset", view.spec.line_offset as u64)?;
        write_f64_attr(&dset, "esp_s", view.spec.esp_s)?;
        write_f64_attr(&dset, "te_first_s", view.spec.te_first_s)?;
    }
    Ok(())
}

/// Appends simulated views to an existing truth file.
pub fn append_views(path: &Path, set: &KSpaceSet) -> Result<()> {
    let file = File::open_rw(path)?;
    check_version(&file)?;
    if file.link_exists("kspace") {
        return Err(Error::Config(
            "dataset already holds k-space views; simulate against a fresh truth file".into(),
        ));
    }
    let stored = file.dataset("truth/b0")?.shape();
    if stored != [set.shape.0, set.shape.1] {
        return Err(Error::ShapeMismatch(format!(
            "k-space for {:?} vs truth grid {:?}",
            set.shape, stored
        )));
    }
    file.attr("noise_snr_db")?
        .write_scalar(&set.noise_snr_db.unwrap_or(f64::INFINITY))?;
    write_view_group(&file, &set.views, set.shape)
}

/// Loads a dataset file, including any views present.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    check_version(&file)?;
    let seed = read_u64_attr(&file, "seed")?;
    let snr = read_f64_attr(&file, "noise_snr_db")?;
    let noise_snr_db = snr.is_finite().then_some(snr);
    let scene: Scene = serde_json::from_str(&read_str_attr(&file, "scene_json")?)
        .map_err(|e| Error::Config(format!("scene_json: {e}")))?;

    let truth_image = planes_to_complex2(
        file.dataset("truth/image")?
            .read_dyn::<f64>()?
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
    )?;
    let truth_b0: FieldMap = file.dataset("truth/b0")?.read_2d::<f64>()?;
    let coils = planes_to_complex3(
        file.dataset("coils")?
            .read_dyn::<f64>()?
            .into_dimensionality::<Ix4>()
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
    )?;

    let (h, w) = truth_b0.dim();
    let mut views = Vec::new();
    if file.link_exists("kspace") {
        let group = file.group("kspace")?;
        let mut n = 0;
        loop {
            let name = format!("view_{n}");
            if !group.link_exists(&name) {
                break;
            }
            let dset = group.dataset(&name)?;
            let spec = ViewSpec {
                angle: RotationAngle::from_degrees(read_f64_attr(&dset, "theta_deg")?),
                accel: read_u64_attr(&dset, "R")? as usize,
                line_offset: read_u64_attr(&dset, "line_offset")? as usize,
                esp_s: read_f64_attr(&dset, "esp_s")?,
                te_first_s: read_f64_attr(&dset, "te_first_s")?,
            };
            spec.validate(h)?;
            let full = planes_to_complex3(
                dset.read_dyn::<f64>()?
                    .into_dimensionality::<Ix4>()
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
            )?;
            let (c, fh, fw) = full.dim();
            if (fh, fw) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "view {n}: stored grid ({fh}, {fw}) vs truth ({h}, {w})"
                )));
            }
            let lines = spec.acquired_lines(h);
            let mut data = Array3::zeros((c, lines.len(), w));
            for ci in 0..c {
                for (si, &ell) in lines.iter().enumerate() {
                    for j in 0..w {
                        data[[ci, si, j]] = full[[ci, ell, j]];
                    }
                }
            }
            views.push(ViewData { spec, data });
            n += 1;
        }
    }

    Ok(Dataset {
        scene,
        truth_image,
        truth_b0,
        coils,
        seed,
        noise_snr_db,
        views,
    })
}

fn write_network(parent: &Group, name: &str, net: &NetworkParams<f64>) -> Result<()> {
    let g = parent.create_group(name)?;
    g.new_dataset_builder()
        .with_data(ArrayView1::from(&net.params.table[..]))
        .create("table")?;
    for (k, wt) in net.params.weights.iter().enumerate() {
        let dn = format!("weight_{k}");
        g.new_dataset_builder().with_data(wt).create(dn.as_str())?;
    }
    for (k, b) in net.params.biases.iter().enumerate() {
        let dn = format!("bias_{k}");
        g.new_dataset_builder().with_data(b).create(dn.as_str())?;
    }
    let hash_json = serde_json::to_string(&net.hash).map_err(|e| Error::Config(e.to_string()))?;
    let mlp_json = serde_json::to_string(&net.mlp).map_err(|e| Error::Config(e.to_string()))?;
    write_str_attr(&g, "hash_json", &hash_json)?;
    write_str_attr(&g, "mlp_json", &mlp_json)?;
    write_f64_attr(&g, "out_scale", net.out_scale)?;
    write_f64_attr(&g, "rho", net.rho)?;
    write_u64_attr(&g, "layer_count", net.params.weights.len() as u64)?;
    Ok(())
}

fn read_network(parent: &Group, name: &str) -> Result<NetworkParams<f64>> {
    let g = parent.group(name)?;
    let hash: HashGridConfig = serde_json::from_str(&read_str_attr(&g, "hash_json")?)
        .map_err(|e| Error::Config(format!("hash_json: {e}")))?;
    let mlp: MlpConfig = serde_json::from_str(&read_str_attr(&g, "mlp_json")?)
        .map_err(|e| Error::Config(format!("mlp_json: {e}")))?;
    let out_scale = read_f64_attr(&g, "out_scale")?;
    let rho = read_f64_attr(&g, "rho")?;
    let layer_count = read_u64_attr(&g, "layer_count")? as usize;
    let table = g.dataset("table")?.read_1d::<f64>()?.to_vec();
    let mut weights = Vec::with_capacity(layer_count);
    let mut biases = Vec::with_capacity(layer_count);
    for k in 0..layer_count {
        weights.push(g.dataset(&format!("weight_{k}"))?.read_2d::<f64>()?);
        biases.push(g.dataset(&format!("bias_{k}"))?.read_1d::<f64>()?);
    }
    Ok(NetworkParams {
        hash,
        mlp,
        params: ParamSet {
            table,
            weights,
            biases,
        },
        out_scale,
        rho,
    })
}

/// Creates a results file with the recon groups, network parameters, and
/// the resolved config.
pub fn write_results(path: &Path, res: &ReconResults) -> Result<()> {
    let file = File::create(path)?;
    write_u64_attr(&file, "format_version", FORMAT_VERSION)?;
    write_f64_attr(&file, "timestamp", now_seconds())?;
    write_str_attr(&file, "config_toml", &res.config_toml)?;

    let recon = file.create_group("recon")?;
    recon
        .new_dataset_builder()
        .with_data(&complex2_to_planes(&res.image))
        .create("image")?;
    if let Some(b0) = &res.b0 {
        recon.new_dataset_builder().with_data(b0).create("b0")?;
    }
    // one row per iteration: data-fidelity term, TV term
    let history = Array2::from_shape_fn((res.loss_history.len(), 2), |(i, j)| {
        res.loss_history[i][j]
    });
    recon
        .new_dataset_builder()
        .with_data(&history)
        .create("loss_history")?;

    let params = file.create_group("params")?;
    write_network(&params, "image", &res.image_net)?;
    if let Some(net) = &res.field_net {
        write_network(&params, "field", net)?;
    }
    Ok(())
}

/// Loads a results file.
pub fn read_results(path: &Path) -> Result<ReconResults> {
    let file = File::open(path)?;
    check_version(&file)?;
    let config_toml = read_str_attr(&file, "config_toml")?;
    let recon = file.group("recon")?;
    let image = planes_to_complex2(
        recon
            .dataset("image")?
            .read_dyn::<f64>()?
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
    )?;
    let b0 = if recon.link_exists("b0") {
        Some(recon.dataset("b0")?.read_2d::<f64>()?)
    } else {
        None
    };
    let history = recon.dataset("loss_history")?.read_2d::<f64>()?;
    if history.ncols() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "loss_history has {} columns, expected 2",
            history.ncols()
        )));
    }
    let loss_history = history.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let params = file.group("params")?;
    let image_net = read_network(&params, "image")?;
    let field_net = if params.link_exists("field") {
        Some(read_network(&params, "field")?)
    } else {
        None
    };
    Ok(ReconResults {
        image,
        b0,
        loss_history,
        image_net,
        field_net,
        config_toml,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::simulate_views;
    use crate::geometry::make_grid;
    use crate::inr::{init_network, MlpConfig};
    use crate::phantom::{AnalyticCoils, AnalyticField, AnalyticPhantom, GaussianBump};
    use tempfile::tempdir;

    fn small_scene() -> Scene {
        Scene {
            phantom: AnalyticPhantom::head(),
            field: AnalyticField {
                poly_hz: [12.0, 30.0, -20.0, 40.0, 10.0, -25.0],
                bumps: vec![GaussianBump {
                    center: [0.15, -0.1],
                    sigma: 0.15,
                    amplitude_hz: 60.0,
                }],
                max_abs_hz: 500.0,
            },
            coils: AnalyticCoils::ring(3, 5).unwrap(),
        }
    }

    fn small_dataset(with_views: bool) -> Dataset {
        let scene = small_scene();
        let grid = make_grid(12, 10).unwrap();
        let (img, b0, coils) = scene.sample(&grid).unwrap();
        let views = if with_views {
            let specs = [
                ViewSpec {
                    angle: RotationAngle::from_degrees(0.0),
                    accel: 2,
                    line_offset: 0,
                    esp_s: 5e-4,
                    te_first_s: 0.02,
                },
                ViewSpec {
                    angle: RotationAngle::from_degrees(120.0),
                    accel: 2,
                    line_offset: 1,
                    esp_s: 5e-4,
                    te_first_s: 0.02,
                },
            ];
            simulate_views(&scene, 12, 10, &specs, Some(35.0), 9)
                .unwrap()
                .views
        } else {
            Vec::new()
        };
        Dataset {
            scene,
            truth_image: img,
            truth_b0: b0,
            coils: coils.maps,
            seed: 9,
            noise_snr_db: with_views.then_some(35.0),
            views,
        }
    }

    #[test]
    fn dataset_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.h5");
        let ds = small_dataset(true);
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truth_only_then_append_views() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.h5");
        let truth_only = small_dataset(false);
        write_dataset(&path, &truth_only).unwrap();
        let with_views = small_dataset(true);
        let set = with_views.kspace().unwrap();
        append_views(&path, &set).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.views, with_views.views);
        assert_eq!(back.noise_snr_db, Some(35.0));
        // a second simulate against the same file is refused
        assert!(matches!(append_views(&path, &set), Err(Error::Config(_))));
    }

    #[test]
    fn kspace_requires_views() {
        let ds = small_dataset(false);
        assert!(matches!(ds.kspace(), Err(Error::Config(_))));
        let ds = small_dataset(true);
        let set = ds.kspace().unwrap();
        assert_eq!(set.views.len(), 2);
        assert_eq!(set.shape, (12, 10));
        assert_eq!(set.coil_count, 3);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_dataset(Path::new("/nonexistent/nowhere.h5")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn results_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("res.h5");
        let hash = HashGridConfig {
            levels: 2,
            features: 2,
            log2_table: 6,
            base_resolution: 4,
            growth: 2.0,
            ..HashGridConfig::default()
        };
        let mlp = MlpConfig {
            input: hash.output_dim(),
            hidden_width: 8,
            hidden_layers: 2,
            output: 2,
        };
        let mut image_net = init_network::<f64>(hash, mlp, 1.0, 3).unwrap();
        image_net.rho = 2.5;
        let field_net = init_network::<f64>(
            hash,
            MlpConfig { output: 1, ..mlp },
            100.0,
            4,
        )
        .unwrap();
        let res = ReconResults {
            image: Array2::from_shape_fn((6, 6), |(i, j)| {
                Complex64::new(i as f64, -(j as f64))
            }),
            b0: Some(Array2::from_elem((6, 6), 7.5)),
            loss_history: vec![[1.0, 0.1], [0.5, 0.05], [0.25, 0.0]],
            image_net,
            field_net: Some(field_net),
            config_toml: "[train]\niterations = 3\n".into(),
        };
        write_results(&path, &res).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back, res);
    }

    #[test]
    fn results_without_field_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("res.h5");
        let hash = HashGridConfig {
            levels: 2,
            features: 2,
            log2_table: 6,
            base_resolution: 4,
            growth: 2.0,
            ..HashGridConfig::default()
        };
        let mlp = MlpConfig {
            input: hash.output_dim(),
            hidden_width: 8,
            hidden_layers: 1,
            output: 2,
        };
        let res = ReconResults {
            image: Array2::from_elem((4, 4), Complex64::new(1.0, 0.0)),
            b0: None,
            loss_history: vec![[0.1, 0.0]],
            image_net: init_network::<f64>(hash, mlp, 1.0, 0).unwrap(),
            field_net: None,
            config_toml: String::new(),
        };
        write_results(&path, &res).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back.b0, None);
        assert_eq!(back.field_net, None);
        assert_eq!(back, res);
    }

    #[test]
    fn version_mismatch_is_config_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.h5");
        write_dataset(&path, &small_dataset(false)).unwrap();
        {
            let file = File::open_rw(&path).unwrap();
            file.attr("format_version")
                .unwrap()
                .write_scalar(&99u64)
                .unwrap();
        }
        assert!(matches!(read_dataset(&path), Err(Error::Config(_))));
    }
}
