//! Command-line pipeline over the core library: generate a truth scene,
//! acquire rotated EPI views, fit the joint reconstruction, score it, and
//! render figures. Every subcommand resolves its configuration the same
//! way: built-in defaults, then an optional config file, then flags.

pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pinr_core::io::container::{
    append_views, read_dataset, read_results, write_dataset, write_results,
};
use pinr_core::io::runconfig::Precision;
use pinr_core::metrics::magnitude;
use pinr_core::{
    run_evaluate, run_phantom, run_reconstruct, run_simulate, Error, Result, RunConfig,
};

use plot::{render_figures, PanelData, Roi};

#[derive(Parser)]
#[command(
    name = "pinr",
    version,
    about = "Rotated-view EPI simulation and joint B0/image reconstruction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a dataset file holding the analytic truth scene and coils.
    Phantom(PhantomArgs),
    /// Acquire rotated EPI k-space views into an existing dataset file.
    Simulate(SimulateArgs),
    /// Fit the image and field networks against a dataset's views.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against its dataset's truth.
    Evaluate(EvaluateArgs),
    /// Render comparison figures from a reconstruction.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Dataset file to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file supplying any values not given as flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid size (the image is size x size).
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of receive coils.
    #[arg(long)]
    pub coils: Option<usize>,
    /// Peak |B0| of the truth field in Hz.
    #[arg(long = "b0-peak-hz")]
    pub b0_peak_hz: Option<f64>,
    /// Scene seed; also seeds any later noise streams.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Existing dataset file to append views to.
    #[arg(long)]
    pub data: PathBuf,
    /// Config file supplying any values not given as flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named view set: "two-view" (0/180, R=4) or "three-view" (0/120/240, R=6).
    #[arg(long, conflicts_with_all = ["views", "accel"])]
    pub preset: Option<String>,
    /// Comma-separated view angles in degrees, e.g. --views 0,90.
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<f64>>,
    /// Acceleration factor: every R-th phase-encode line is acquired.
    #[arg(long = "R")]
    pub accel: Option<usize>,
    /// Index of the first acquired line.
    #[arg(long)]
    pub line_offset: Option<usize>,
    /// Echo spacing in seconds.
    #[arg(long)]
    pub esp_s: Option<f64>,
    /// Echo time of the first acquired line in seconds.
    #[arg(long)]
    pub te_first_s: Option<f64>,
    /// Complex Gaussian noise level; omit for noiseless data.
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Args)]
pub struct ReconstructArgs {
    /// Dataset file with acquired views.
    #[arg(long)]
    pub data: PathBuf,
    /// Results file to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file supplying any values not given as flags.
    #[arg(long, conflicts_with = "config_from_results")]
    pub config: Option<PathBuf>,
    /// Reuse the resolved config embedded in an earlier results file.
    #[arg(long)]
    pub config_from_results: Option<PathBuf>,
    /// Optimization steps to run.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Network initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic width of the fit: f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Dataset file holding the truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Results file to score.
    #[arg(long)]
    pub results: PathBuf,
    /// Where to write the JSON report; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config override; defaults to the config embedded in the results.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct PlotArgs {
    /// Dataset file holding the truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Results file to render.
    #[arg(long)]
    pub results: PathBuf,
    /// Directory receiving the PNG files.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Pixel rectangle x0,y0,x1,y1 to outline and zoom into.
    #[arg(long)]
    pub roi: Option<String>,
    /// Error-map color maximum as a fraction of the truth maximum.
    #[arg(long, default_value_t = 0.1)]
    pub error_scale: f64,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn parse_precision(text: &str) -> Result<Precision> {
    match text {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Config(format!(
            "precision must be f32 or f64 (got {other:?})"
        ))),
    }
}

pub fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.size {
        cfg.phantom.size = v;
    }
    if let Some(v) = args.coils {
        cfg.phantom.coils = v;
    }
    if let Some(v) = args.b0_peak_hz {
        cfg.phantom.b0_peak_hz = v;
    }
    if let Some(v) = args.seed {
        cfg.phantom.seed = v;
    }
    let ds = run_phantom(&cfg)?;
    write_dataset(&args.out, &ds)?;
    let (lo, hi) = ds
        .truth_b0
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    println!(
        "wrote {}: {}x{} grid, B0 range [{lo:.1}, {hi:.1}] Hz, {} coils",
        args.out.display(),
        cfg.phantom.size,
        cfg.phantom.size,
        cfg.phantom.coils
    );
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(name) = &args.preset {
        cfg.apply_preset(name)?;
    }
    if let Some(v) = &args.views {
        cfg.views.angles_deg = v.clone();
    }
    if let Some(v) = args.accel {
        cfg.views.accel = v;
    }
    if let Some(v) = args.line_offset {
        cfg.views.line_offset = v;
    }
    if let Some(v) = args.esp_s {
        cfg.encode.esp_s = Some(v);
    }
    if let Some(v) = args.te_first_s {
        cfg.encode.te_first_s = v;
    }
    if let Some(v) = args.snr_db {
        cfg.encode.noise_snr_db = Some(v);
    }
    let ds = read_dataset(&args.data)?;
    let set = run_simulate(&ds, &cfg)?;
    append_views(&args.data, &set)?;
    let mut angles = String::new();
    for v in &set.views {
        if !angles.is_empty() {
            angles.push_str(", ");
        }
        let _ = write!(angles, "{:.0}", v.spec.angle.degrees());
    }
    println!(
        "appended {} views ({angles} deg, R={}) to {}",
        set.views.len(),
        cfg.views.accel,
        args.data.display()
    );
    Ok(())
}

/// The two-column numeric text stream written next to a results file.
pub fn loss_stream_path(results: &Path) -> PathBuf {
    results.with_extension("loss.txt")
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let mut cfg = match &args.config_from_results {
        Some(p) => RunConfig::from_toml(&read_results(p)?.config_toml)?,
        None => load_config(args.config.as_deref())?,
    };
    if let Some(v) = args.iterations {
        cfg.train.iterations = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(p) = &args.precision {
        cfg.train.precision = parse_precision(p)?;
    }
    let ds = read_dataset(&args.data)?;
    let started = Instant::now();
    let res = run_reconstruct(&ds, &cfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    write_results(&args.out, &res)?;
    let mut stream = String::new();
    for [d, t] in &res.loss_history {
        let _ = writeln!(stream, "{d:.12e} {t:.12e}");
    }
    fs::write(loss_stream_path(&args.out), stream)?;
    let [d, t] = res.loss_history.last().copied().unwrap_or([f64::NAN; 2]);
    println!(
        "wrote {}: {} iterations in {elapsed:.1} s, final loss {:.3e} (data {d:.3e}, tv {t:.3e})",
        args.out.display(),
        res.loss_history.len(),
        d + t
    );
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ds = read_dataset(&args.data)?;
    let res = read_results(&args.results)?;
    let cfg = match &args.config {
        Some(p) => load_config(Some(p))?,
        None => RunConfig::from_toml(&res.config_toml)?,
    };
    let report = run_evaluate(&ds, &res, &cfg)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Numeric(format!("report serialization: {e}")))?;
    let mae = match report.b0_mae_hz {
        Some(v) => format!("{v:.2} Hz"),
        None => "n/a".into(),
    };
    let summary = format!(
        "nrmse {:.4}  psnr {:.1} dB  ssim {:.3}  b0_mae {mae}  ({} mask px)",
        report.nrmse, report.psnr_db, report.ssim, report.mask_pixels
    );
    match &args.out {
        Some(p) => {
            fs::write(p, json + "\n")?;
            println!("{summary}");
        }
        None => {
            println!("{json}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

pub fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let ds = read_dataset(&args.data)?;
    let res = read_results(&args.results)?;
    if res.image.dim() != ds.truth_image.dim() {
        return Err(Error::ShapeMismatch(format!(
            "recon grid {:?} vs truth grid {:?}",
            res.image.dim(),
            ds.truth_image.dim()
        )));
    }
    if !(args.error_scale > 0.0) {
        return Err(Error::Config("error-scale must be positive".into()));
    }
    let roi = args.roi.as_deref().map(Roi::parse).transpose()?;
    let data = PanelData {
        truth_mag: magnitude(&ds.truth_image),
        recon_mag: magnitude(&res.image),
        truth_b0: ds.truth_b0.clone(),
        est_b0: res.b0.clone(),
        error_scale: args.error_scale,
    };
    let figs = render_figures(&data, roi)?;
    fs::create_dir_all(&args.out_dir)?;
    let save = |name: &str, img: &image::RgbImage| -> Result<PathBuf> {
        let path = args.out_dir.join(name);
        img.save(&path)
            .map_err(|e| Error::Numeric(format!("png encode: {e}")))?;
        Ok(path)
    };
    let mut written = vec![save("image_panel.png", &figs.image_panel)?];
    if let Some(p) = &figs.b0_panel {
        written.push(save("b0_panel.png", p)?);
    } else {
        eprintln!("results carry no field estimate; skipping the B0 panel");
    }
    if let Some(p) = &figs.roi_panel {
        written.push(save("roi_panel.png", p)?);
    }
    let names: Vec<String> = written
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    println!("wrote {}", names.join(", "));
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Plot(a) => cmd_plot(a),
    }
}
