//! Declarative experiment configuration: per-experiment defaults, a TOML
//! overlay, and validation with field-level diagnostics.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{ActivationSpec, ACTIVATION_NAMES, DEFAULT_ETA};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Consistency,
    Zeroloss,
    Dissipation,
    AdjointLimit,
    GradCheck,
    W2Check,
    Assumptions,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::Consistency,
        Self::Zeroloss,
        Self::Dissipation,
        Self::AdjointLimit,
        Self::GradCheck,
        Self::W2Check,
        Self::Assumptions,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Consistency => "consistency",
            Self::Zeroloss => "zeroloss",
            Self::Dissipation => "dissipation",
            Self::AdjointLimit => "adjoint-limit",
            Self::GradCheck => "grad-check",
            Self::W2Check => "w2-check",
            Self::Assumptions => "assumptions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelModel {
    /// `y = g(Z_teacher(1; x))` for a fixed random teacher ensemble.
    TeacherNet,
    SmoothFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Gaussian,
    Sphere,
    Slab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Depth,
    Width,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub activation: String,
    pub d: usize,
    /// Checked against the activation when given; only `zero` takes it as input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub eta: f64,
    /// Activations probed by the `assumptions` experiment.
    pub probe_activations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub r_mu: f64,
    pub labels: LabelModel,
    pub teacher_width: usize,
    pub teacher_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub kind: InitKind,
    pub scale: f64,
    pub depth_variation: f64,
    pub r0: f64,
    pub theta2_box: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub sweep: Sweep,
    /// Discrete depths `L`; the first entry is used when depth is not swept.
    pub depths: Vec<usize>,
    /// Widths `M`; the first entry is used when width is not swept.
    pub widths: Vec<usize>,
    /// Depth nodes `Nt` of the continuous paths.
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub s_total: f64,
    pub h_s: f64,
    pub record_every: usize,
    pub moment_ceiling: f64,
    pub radius_ceiling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    pub slope_min: f64,
    pub slope_max: f64,
    pub r2_min: f64,
    pub loss_threshold: f64,
    pub monotone_slack: f64,
    pub residual_rel: f64,
    pub shrink_min: f64,
    pub grad_rel: f64,
    pub w2_abs: f64,
    pub homogeneity_rel: f64,
    pub jacobian_rel: f64,
    pub instances: usize,
    pub probes: usize,
    pub max_n: usize,
    pub max_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// Independent seeds per grid point.
    pub replicates: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub init: InitConfig,
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub tolerance: ToleranceConfig,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut c = Self {
            schema_version: SCHEMA_VERSION,
            experiment: kind,
            seed: 0,
            replicates: 5,
            model: ModelConfig {
                activation: "generic_tanh".into(),
                d: 2,
                k: None,
                eta: DEFAULT_ETA,
                probe_activations: ACTIVATION_NAMES.iter().map(|s| s.to_string()).collect(),
            },
            data: DataConfig { n: 16, r_mu: 1.0, labels: LabelModel::TeacherNet, teacher_width: 8, teacher_scale: 0.5 },
            init: InitConfig { kind: InitKind::Gaussian, scale: 1.0, depth_variation: 0.5, r0: 1.0, theta2_box: 1.0 },
            grid: GridConfig { sweep: Sweep::Depth, depths: vec![8, 16, 32, 64], widths: vec![32], nodes: 129 },
            train: TrainConfig { s_total: 1.0, h_s: 0.05, record_every: 1, moment_ceiling: 1e6, radius_ceiling: 1e3 },
            tolerance: ToleranceConfig {
                slope_min: -1.5,
                slope_max: -0.5,
                r2_min: 0.8,
                loss_threshold: 1e-3,
                monotone_slack: 1e-8,
                residual_rel: 0.05,
                shrink_min: 1.5,
                grad_rel: 1e-6,
                w2_abs: 1e-12,
                homogeneity_rel: 1e-12,
                jacobian_rel: 1e-6,
                instances: 20,
                probes: 1000,
                max_n: 6,
                max_k: 4,
            },
        };
        match kind {
            ExperimentKind::Consistency => {}
            ExperimentKind::Zeroloss => {
                c.model.activation = "two_homog".into();
                c.data.n = 8;
                c.init.kind = InitKind::Sphere;
                c.grid.widths = vec![64];
                c.grid.nodes = 32;
                c.train.s_total = 50.0;
                c.train.h_s = 0.05;
                c.train.record_every = 20;
                c.replicates = 1;
            }
            ExperimentKind::Dissipation => {
                c.model.activation = "linear".into();
                c.data.n = 8;
                c.grid.widths = vec![16];
                c.grid.nodes = 17;
                c.init.depth_variation = 0.0;
                c.init.scale = 0.5;
                c.train.s_total = 1e-4;
                c.train.h_s = 1e-5;
                c.replicates = 1;
            }
            ExperimentKind::AdjointLimit => {
                c.model.activation = "linear".into();
                c.data.n = 8;
                c.grid.widths = vec![8];
                c.grid.nodes = 513;
                c.replicates = 1;
            }
            ExperimentKind::GradCheck => {
                c.data.n = 5;
                c.data.labels = LabelModel::SmoothFunction;
                c.grid.depths = vec![4];
                c.grid.widths = vec![3];
                c.replicates = 1;
            }
            ExperimentKind::W2Check => {
                c.tolerance.instances = 100;
                c.replicates = 1;
            }
            ExperimentKind::Assumptions => {
                c.replicates = 1;
            }
        }
        c
    }

    /// Overlays the TOML document `text` on the defaults for `kind`.
    pub fn from_toml_str(kind: ExperimentKind, text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::defaults(kind)).map_err(|e| Error::Config(e.to_string()))?;
        overlay(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().trim().to_string();
            Error::Config(with_line(text, &msg))
        })?;
        if cfg.experiment != kind {
            return Err(Error::Config(with_line(
                text,
                &format!("field `experiment`: config is for `{}`, requested `{}`", cfg.experiment.name(), kind.name()),
            )));
        }
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(with_line(text, &msg)),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the normalized TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn activation(&self) -> Result<ActivationSpec> {
        activation_for(&self.model.activation, &self.model)
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, msg: impl std::fmt::Display) -> Result<()> {
            Err(Error::Config(format!("field `{field}`: {msg}")))
        }
        fn positive(field: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                bad(field, format!("must be positive and finite, got {v}"))
            }
        }
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            );
        }
        if self.replicates == 0 {
            return bad("replicates", "must be at least 1");
        }
        let spec = match self.activation() {
            Ok(s) => s,
            Err(e) => return bad("model.activation", e),
        };
        for name in &self.model.probe_activations {
            if let Err(e) = activation_for(name, &self.model) {
                return bad("model.probe_activations", e);
            }
        }
        if let Some(k) = self.model.k {
            if k != spec.k() {
                return bad(
                    "model.k",
                    format!("activation `{}` with d = {} has k = {}, got {k}", spec.name(), self.model.d, spec.k()),
                );
            }
        }
        if self.data.n == 0 {
            return bad("data.n", "must be at least 1");
        }
        positive("data.r_mu", self.data.r_mu)?;
        if self.data.teacher_width == 0 {
            return bad("data.teacher_width", "must be at least 1");
        }
        positive("data.teacher_scale", self.data.teacher_scale)?;
        positive("init.scale", self.init.scale)?;
        positive("init.r0", self.init.r0)?;
        positive("init.theta2_box", self.init.theta2_box)?;
        if !(self.init.depth_variation >= 0.0) || !self.init.depth_variation.is_finite() {
            return bad("init.depth_variation", "must be nonnegative and finite");
        }
        if self.grid.depths.is_empty() || self.grid.depths.contains(&0) {
            return bad("grid.depths", "must be a nonempty list of positive integers");
        }
        if self.grid.widths.is_empty() || self.grid.widths.contains(&0) {
            return bad("grid.widths", "must be a nonempty list of positive integers");
        }
        if self.grid.nodes < 2 {
            return bad("grid.nodes", "need at least 2 depth nodes");
        }
        if self.experiment == ExperimentKind::AdjointLimit {
            if let Some(l) = self.grid.depths.iter().find(|&&l| !(self.grid.nodes - 1).is_multiple_of(l)) {
                return bad("grid.nodes", format!("Nt − 1 = {} is not a multiple of L = {l}", self.grid.nodes - 1));
            }
        }
        if !(self.train.s_total >= 0.0) || !self.train.s_total.is_finite() {
            return bad("train.s_total", "must be nonnegative and finite");
        }
        positive("train.h_s", self.train.h_s)?;
        if !(self.train.s_total / self.train.h_s).is_finite() {
            return bad("train.h_s", "S / h_s must be finite");
        }
        if self.train.record_every == 0 {
            return bad("train.record_every", "must be at least 1");
        }
        positive("train.moment_ceiling", self.train.moment_ceiling)?;
        positive("train.radius_ceiling", self.train.radius_ceiling)?;
        let t = &self.tolerance;
        if !(t.slope_min <= t.slope_max) {
            return bad("tolerance.slope_min", "must not exceed tolerance.slope_max");
        }
        for (field, v) in [
            ("tolerance.loss_threshold", t.loss_threshold),
            ("tolerance.residual_rel", t.residual_rel),
            ("tolerance.shrink_min", t.shrink_min),
            ("tolerance.grad_rel", t.grad_rel),
            ("tolerance.w2_abs", t.w2_abs),
            ("tolerance.homogeneity_rel", t.homogeneity_rel),
            ("tolerance.jacobian_rel", t.jacobian_rel),
        ] {
            positive(field, v)?;
        }
        if !(t.monotone_slack >= 0.0) {
            return bad("tolerance.monotone_slack", "must be nonnegative");
        }
        if t.instances == 0 || t.probes == 0 {
            return bad("tolerance.instances", "instance and probe counts must be positive");
        }
        if t.max_n == 0 || t.max_n > crate::measures::BRUTEFORCE_MAX {
            return bad("tolerance.max_n", format!("must be in 1..={}", crate::measures::BRUTEFORCE_MAX));
        }
        if t.max_k == 0 {
            return bad("tolerance.max_k", "must be at least 1");
        }
        Ok(())
    }
}

fn activation_for(name: &str, model: &ModelConfig) -> Result<ActivationSpec> {
    if name == "zero" {
        return Ok(crate::activation::make_zero(model.d, model.k.unwrap_or(1)));
    }
    ActivationSpec::from_name(name, model.d, model.eta)
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

// Prefixes `msg` with the user-file line of the first backticked key it names.
fn with_line(text: &str, msg: &str) -> String {
    let key = msg.split('`').nth(1).and_then(|k| k.rsplit('.').next()).unwrap_or("");
    if key.is_empty() {
        return msg.to_string();
    }
    let line = text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    });
    match line {
        Some(i) => format!("line {}: {msg}", i + 1),
        None => msg.to_string(),
    }
}
