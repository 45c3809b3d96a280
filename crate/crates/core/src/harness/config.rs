use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Track,
    Limit,
    Semigroup,
    ExitTime,
    Clt,
    Diffusion,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] =
        [Self::Simulate, Self::Track, Self::Limit, Self::Semigroup, Self::ExitTime, Self::Clt, Self::Diffusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Track => "track",
            Self::Limit => "limit",
            Self::Semigroup => "semigroup",
            Self::ExitTime => "exit-time",
            Self::Clt => "clt",
            Self::Diffusion => "diffusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub length: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub c0: f64,
    /// Noise levels, strictly decreasing.
    pub eps: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    pub dt: f64,
    pub t_end: f64,
    /// integrator steps between snapshots
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub paths: usize,
    pub seed: u64,
}

/// Weighted frame and Ornstein–Uhlenbeck settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    /// weight as a fraction of `√(c₀/3)`
    pub a_fraction: f64,
    pub points: usize,
    pub decay_samples: usize,
    pub decay_t_end: f64,
    pub trace_t_end: f64,
    pub trace_step: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self { a_fraction: 0.5, points: 256, decay_samples: 10, decay_t_end: 40.0, trace_t_end: 100.0, trace_step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub t_points: usize,
    /// quadrature orders in `√c` and in the soliton coordinate
    pub speed_nodes: usize,
    pub position_nodes: usize,
    pub mc_samples: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { t_min: 100.0, t_max: 1e4, t_points: 9, speed_nodes: 128, position_nodes: 128, mc_samples: 20000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub grid: GridConfig,
    pub physics: PhysicsConfig,
    pub kernel: KernelSpec,
    pub integration: IntegrationConfig,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub frame: FrameConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(ExperimentKind::ExitTime)
    }
}

impl ExperimentConfig {
    /// Desk-scale settings for each experiment.
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut cfg = Self::base(kind);
        match kind {
            ExperimentKind::Simulate => {
                cfg.physics.eps = vec![0.1];
                cfg.ensemble.paths = 1;
            }
            ExperimentKind::Track => {
                cfg.kernel = KernelSpec::gaussian(0.1, 2.0);
                cfg.physics.eps = vec![0.2, 0.1, 0.05];
                cfg.ensemble.paths = 1;
            }
            ExperimentKind::Limit => {
                cfg.physics.eps = vec![0.1];
                cfg.ensemble.paths = 100;
            }
            ExperimentKind::Semigroup => {
                cfg.physics.eps = vec![0.1];
                cfg.integration = IntegrationConfig { dt: 0.05, t_end: 40.0, stride: 20 };
                cfg.ensemble.paths = 20;
            }
            ExperimentKind::ExitTime => {
                // small enough that the ε range spans two decades of exit probability
                cfg.kernel = KernelSpec::gaussian(0.07, 2.0);
            }
            ExperimentKind::Clt => {
                cfg.kernel = KernelSpec::gaussian(0.1, 2.0);
                cfg.physics.eps = vec![0.1, 0.05, 0.025];
                cfg.ensemble.paths = 200;
            }
            ExperimentKind::Diffusion => {
                // large amplitude puts t ∈ [10², 10⁴] in the asymptotic regime
                cfg.kernel = KernelSpec::gaussian(30.0, 2.0);
                cfg.grid.points = 512;
                cfg.physics.eps = vec![0.02, 0.01, 0.005];
            }
        }
        cfg
    }

    fn base(kind: ExperimentKind) -> Self {
        Self {
            experiment: kind,
            grid: GridConfig { length: 100.0, points: 256 },
            physics: PhysicsConfig { c0: 1.0, eps: vec![0.4, 0.35, 0.3, 0.25], alpha: 0.3 },
            kernel: KernelSpec::default(),
            integration: IntegrationConfig { dt: 2e-3, t_end: 5.0, stride: 10 },
            ensemble: EnsembleConfig { paths: 1000, seed: 1 },
            frame: FrameConfig::default(),
            diffusion: DiffusionConfig::default(),
            output: PathBuf::from("out"),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        positive("grid.length", self.grid.length)?;
        if self.grid.points < 16 || !self.grid.points.is_multiple_of(2) {
            return Err(Error::Config(format!("grid.points must be even and at least 16, got {}", self.grid.points)));
        }
        positive("physics.c0", self.physics.c0)?;
        positive("physics.alpha", self.physics.alpha)?;
        if self.physics.eps.is_empty() {
            return Err(Error::Config("physics.eps must not be empty".into()));
        }
        for &e in &self.physics.eps {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("noise level {e} must be non-negative")));
            }
        }
        if self.physics.eps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config("physics.eps must be sorted in strictly decreasing order".into()));
        }
        self.kernel.validate().map_err(|e| Error::Config(e.to_string()))?;
        positive("integration.dt", self.integration.dt)?;
        positive("integration.t_end", self.integration.t_end)?;
        if self.integration.stride == 0 {
            return Err(Error::Config("integration.stride must be at least 1".into()));
        }
        if self.ensemble.paths == 0 {
            return Err(Error::Config("ensemble.paths must be at least 1".into()));
        }
        let f = &self.frame;
        if !(f.a_fraction > 0.0 && f.a_fraction < 1.0) {
            return Err(Error::Config(format!("frame.a_fraction must lie in (0, 1), got {}", f.a_fraction)));
        }
        positive("frame.decay_t_end", f.decay_t_end)?;
        positive("frame.trace_t_end", f.trace_t_end)?;
        positive("frame.trace_step", f.trace_step)?;
        let d = &self.diffusion;
        positive("diffusion.t_min", d.t_min)?;
        if !(d.t_max > d.t_min) || d.t_points < 2 {
            return Err(Error::Config("diffusion needs t_max > t_min and at least two times".into()));
        }
        if d.speed_nodes < 2 || d.position_nodes < 2 {
            return Err(Error::Config("quadrature orders must be at least 2".into()));
        }
        Ok(())
    }

    /// Log-spaced times for the diffusion fit.
    pub fn diffusion_times(&self) -> Vec<f64> {
        let d = &self.diffusion;
        let (a, b) = (d.t_min.ln(), d.t_max.ln());
        (0..d.t_points).map(|i| (a + (b - a) * i as f64 / (d.t_points - 1) as f64).exp()).collect()
    }
}
