//! Run configuration: a sectioned TOML file mapping onto the typed configs
//! of the other modules. Every key has a default, unknown keys are rejected,
//! and parse -> emit -> parse is the identity.

use serde::{Deserialize, Serialize};

use crate::encode::ViewSpec;
use crate::error::{Error, Result};
use crate::geometry::RotationAngle;
use crate::inr::HashGridConfig;
use crate::train::{NetsConfig, TrainConfig};

/// Truth-scene generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    /// Image grid is size x size.
    pub size: usize,
    pub coils: usize,
    /// Peak |B0| of the truth field, Hz.
    pub b0_peak_hz: f64,
    pub seed: u64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            size: 64,
            coils: 8,
            b0_peak_hz: 150.0,
            seed: 0,
        }
    }
}

/// Which rotated views to acquire and how they are undersampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewsSection {
    pub angles_deg: Vec<f64>,
    /// Acceleration factor R: every R-th phase-encode line is acquired.
    pub accel: usize,
    /// Index of the first acquired line.
    pub line_offset: usize,
}

impl Default for ViewsSection {
    fn default() -> Self {
        ViewsSection {
            angles_deg: vec![0.0, 120.0, 240.0],
            accel: 2,
            line_offset: 0,
        }
    }
}

/// EPI timing and measurement noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeSection {
    /// Echo spacing between consecutive acquired lines, seconds. When unset
    /// it follows the acceleration factor as 0.25 ms x R, so every view
    /// spends the same total readout time regardless of undersampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub esp_s: Option<f64>,
    /// Echo time of the first acquired line, seconds. The default of zero
    /// keeps the recovered image directly comparable to the truth: a common
    /// echo-time offset would only add a field-dependent phase that the
    /// image network absorbs.
    pub te_first_s: f64,
    /// Complex Gaussian noise level; omit for noiseless data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_snr_db: Option<f64>,
}

impl Default for EncodeSection {
    fn default() -> Self {
        EncodeSection {
            esp_s: None,
            te_first_s: 0.0,
            noise_snr_db: None,
        }
    }
}

impl EncodeSection {
    /// Echo spacing actually used for a given acceleration factor.
    pub fn resolved_esp_s(&self, accel: usize) -> f64 {
        self.esp_s.unwrap_or(0.25e-3 * accel as f64)
    }
}

/// Shapes of the two coordinate networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworksSection {
    pub levels: usize,
    pub features: usize,
    pub log2_table: u32,
    pub base_resolution: usize,
    pub growth: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Hz represented by one unit of raw field-network output.
    pub b0_scale_hz: f64,
}

impl Default for NetworksSection {
    fn default() -> Self {
        let hash = HashGridConfig::default();
        let nets = NetsConfig::default();
        NetworksSection {
            levels: hash.levels,
            features: hash.features,
            log2_table: hash.log2_table,
            base_resolution: hash.base_resolution,
            growth: hash.growth,
            hidden_width: nets.hidden_width,
            hidden_layers: nets.hidden_layers,
            b0_scale_hz: nets.b0_scale,
        }
    }
}

/// Arithmetic width of the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Optimizer schedule. The TV knobs left unset follow the iteration count:
/// the weight decays every iterations/6 steps and switches off for the last
/// sixth of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub tv_base: f64,
    pub tv_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_interval: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_off_after: Option<usize>,
    pub delta: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            iterations: t.iterations,
            lr: t.lr,
            beta1: t.betas.0,
            beta2: t.betas.1,
            eps: t.eps,
            weight_decay: t.weight_decay,
            tv_base: t.tv_base,
            tv_decay: t.tv_decay,
            tv_interval: None,
            tv_off_after: None,
            delta: t.delta,
            seed: t.seed,
            precision: Precision::F32,
        }
    }
}

/// Evaluation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Support mask keeps pixels above this fraction of the peak magnitude.
    pub mask_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mask_threshold: 0.1,
        }
    }
}

/// Full run configuration; each section maps onto one stage of the pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    pub views: ViewsSection,
    pub encode: EncodeSection,
    pub networks: NetworksSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Named acquisition presets for the two standard datasets.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "two-view" => {
                self.views.angles_deg = vec![0.0, 180.0];
                self.views.accel = 4;
            }
            "three-view" => {
                self.views.angles_deg = vec![0.0, 120.0, 240.0];
                self.views.accel = 6;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (expected two-view or three-view)"
                )))
            }
        }
        Ok(())
    }

    /// One spec per configured angle; duplicate angles are rejected.
    pub fn view_specs(&self) -> Result<Vec<ViewSpec>> {
        if self.views.angles_deg.is_empty() {
            return Err(Error::Config("at least one view angle is required".into()));
        }
        let mut normalized: Vec<f64> = Vec::with_capacity(self.views.angles_deg.len());
        for &deg in &self.views.angles_deg {
            let norm = RotationAngle::from_degrees(deg).degrees();
            if normalized.iter().any(|&seen| (seen - norm).abs() < 1e-9) {
                return Err(Error::Config(format!("duplicate view angle {deg} deg")));
            }
            normalized.push(norm);
        }
        Ok(self
            .views
            .angles_deg
            .iter()
            .map(|&deg| ViewSpec {
                angle: RotationAngle::from_degrees(deg),
                accel: self.views.accel,
                line_offset: self.views.line_offset,
                esp_s: self.encode.resolved_esp_s(self.views.accel),
                te_first_s: self.encode.te_first_s,
            })
            .collect())
    }

    pub fn nets_config(&self) -> NetsConfig {
        NetsConfig {
            hash: HashGridConfig {
                levels: self.networks.levels,
                features: self.networks.features,
                log2_table: self.networks.log2_table,
                base_resolution: self.networks.base_resolution,
                growth: self.networks.growth,
            },
            hidden_width: self.networks.hidden_width,
            hidden_layers: self.networks.hidden_layers,
            b0_scale: self.networks.b0_scale_hz,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let iters = self.train.iterations;
        let sixth = (iters / 6).max(1);
        TrainConfig {
            iterations: iters,
            lr: self.train.lr,
            betas: (self.train.beta1, self.train.beta2),
            eps: self.train.eps,
            weight_decay: self.train.weight_decay,
            tv_base: self.train.tv_base,
            tv_decay: self.train.tv_decay,
            tv_interval: self.train.tv_interval.unwrap_or(sixth),
            tv_off_after: self.train.tv_off_after.unwrap_or(iters - iters / 6),
            delta: self.train.delta,
            seed: self.train.seed,
        }
    }
}
