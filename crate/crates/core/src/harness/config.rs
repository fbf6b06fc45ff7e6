//! Experiment configuration: one TOML document with a section per
//! parameter block, plus named presets for the built-in scenarios.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibrator::{BanditParams, ConsolidationRules, ContextBins, RewardParams};
use crate::envelope::{EnvelopeParams, SettingGrids};
use crate::error::ConfigError;
use crate::percept::{ConfusablePair, LocalOracleParams, RemoteOracleParams};
use crate::router::RoutingThresholds;
use crate::sensecam::{CameraModelParams, EnvTrajectory, MotionProfile, Scenario, ScenePattern};

/// How the sensor setting is chosen each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensingMode {
    /// Brightness-feedback auto exposure, blind to motion.
    Ae,
    /// Reflexive baseline only.
    L1,
    /// Baseline plus an exploring bandit that learns once per lap.
    L1L2Learning,
    /// Baseline plus the consolidated policy, no learning.
    L1L2Inference,
}

impl SensingMode {
    pub const ALL: [SensingMode; 4] = [SensingMode::Ae, SensingMode::L1, SensingMode::L1L2Learning, SensingMode::L1L2Inference];

    pub fn as_str(self) -> &'static str {
        match self {
            SensingMode::Ae => "ae",
            SensingMode::L1 => "l1",
            SensingMode::L1L2Learning => "l1_l2_learning",
            SensingMode::L1L2Inference => "l1_l2_inference",
        }
    }
}

/// Which inference tiers answer a lap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    L3Only,
    L4Only,
    L3L4Split,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [InferenceMode::L3Only, InferenceMode::L4Only, InferenceMode::L3L4Split];

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::L3Only => "l3_only",
            InferenceMode::L4Only => "l4_only",
            InferenceMode::L3L4Split => "l3_l4_split",
        }
    }

    pub fn uses_remote(self) -> bool {
        self != InferenceMode::L3Only
    }
}

macro_rules! str_enum {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                <$t>::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
                    let names: Vec<_> = <$t>::ALL.iter().map(|m| m.as_str()).collect();
                    format!("unknown mode `{s}` (expected one of {})", names.join(", "))
                })
            }
        }
    };
}

str_enum!(SensingMode);
str_enum!(InferenceMode);

/// One object class: a checkerboard texture of its own scale and contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub label: u32,
    pub name: String,
    pub block: usize,
    /// Peak-to-peak texture amplitude around mid grey.
    pub contrast: f64,
    pub difficulty: f64,
}

impl ObjectSpec {
    pub fn new(label: u32, name: &str, block: usize, contrast: f64, difficulty: f64) -> Self {
        Self { label, name: name.to_string(), block, contrast, difficulty }
    }

    pub fn scene(&self, size: usize) -> ScenePattern {
        let half = self.contrast / 2.0;
        ScenePattern::checkerboard(size, self.block, 0.5 - half, 0.5 + half).with_object(self.label, self.difficulty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Frame side length in pixels.
    pub size: usize,
    /// Objects are presented one after another, `run.laps` laps each.
    pub objects: Vec<ObjectSpec>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { size: 64, objects: batch_objects() }
    }
}

/// The eight-class batch (ImageNet-1K ids).
pub fn batch_objects() -> Vec<ObjectSpec> {
    vec![
        ObjectSpec::new(850, "teddy bear", 6, 0.10, 0.30),
        ObjectSpec::new(752, "racket", 5, 0.12, 0.05),
        ObjectSpec::new(852, "tennis ball", 6, 0.09, 0.15),
        ObjectSpec::new(722, "ping-pong ball", 5, 0.12, 0.02),
        ObjectSpec::new(950, "orange", 7, 0.14, 0.20),
        ObjectSpec::new(478, "carton", 6, 0.10, 0.45),
        ObjectSpec::new(898, "water bottle", 5, 0.11, 0.35),
        ObjectSpec::new(620, "laptop", 7, 0.13, 0.50),
    ]
}

/// Ping-pong ball → golf ball, racket → tennis ball.
pub fn batch_confusables() -> Vec<ConfusablePair> {
    vec![ConfusablePair { truth: 722, misaligned: 574 }, ConfusablePair { truth: 752, misaligned: 852 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeParams {
    pub target: f64,
    pub deadband: f64,
    /// Setting for the first frame of the run.
    pub initial_exp_idx: usize,
    pub initial_iso_idx: usize,
}

impl Default for AeParams {
    fn default() -> Self {
        Self { target: 0.5, deadband: 0.1, initial_exp_idx: 3, initial_iso_idx: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub rtt_ms: u64,
    pub energy_headroom: f64,
    /// A lap's remote answer must land within this long after the lap ends.
    pub response_window_ms: u64,
    /// Probability that a remote answer is held back by `late_extra_ms`.
    pub late_prob: f64,
    pub late_extra_ms: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { rtt_ms: 80, energy_headroom: 1.0, response_window_ms: 3000, late_prob: 0.0, late_extra_ms: 2000 }
    }
}

/// Frame-level routing task: every frame must be answered before the end
/// of its lap plus `deadline_after_lap_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub deadline_after_lap_ms: u64,
    pub error_cost: f64,
    pub comm_cost_per_call: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { deadline_after_lap_ms: 0, error_cost: 1.0, comm_cost_per_call: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Laps per object.
    pub laps: u64,
    pub sensing: SensingMode,
    pub inference: InferenceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub trajectory: EnvTrajectory,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub grids: SettingGrids,
    #[serde(default)]
    pub envelope: EnvelopeParams,
    #[serde(default)]
    pub bins: ContextBins,
    #[serde(default)]
    pub bandit: BanditParams,
    #[serde(default)]
    pub consolidation: ConsolidationRules,
    #[serde(default)]
    pub reward: RewardParams,
    #[serde(default)]
    pub camera: CameraModelParams,
    #[serde(default)]
    pub local: LocalOracleParams,
    #[serde(default)]
    pub remote: RemoteOracleParams,
    #[serde(default)]
    pub routing: RoutingThresholds,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub ae: AeParams,
}

pub const PRESETS: [&str; 3] = ["dark_track", "dark_motion", "alternating"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_else(|| "config".into());
            ConfigError::invalid(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Built-in scenario by name; see [`PRESETS`].
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "dark_track" => Some(dark_track()),
            "dark_motion" => Some(dark_motion()),
            "alternating" => Some(alternating()),
            _ => None,
        }
    }

    /// Set one scalar field by dotted path, e.g. `routing.tau_conf` = `0.7`.
    /// The value is read as a TOML literal, falling back to a bare string.
    pub fn set_field(&mut self, path: &str, value: &str) -> Result<(), ConfigError> {
        let mut doc = toml::Table::try_from(&*self).expect("config is always representable as TOML");
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));

        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) =
            keys.split_last().filter(|(k, _)| !k.is_empty()).ok_or_else(|| ConfigError::invalid(path, "empty field path"))?;
        let mut table = &mut doc;
        for k in parents {
            table = table
                .get_mut(*k)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| ConfigError::invalid(path, format!("no section `{k}`")))?;
        }
        match table.get(*last) {
            Some(old) if old.is_table() || old.is_array() => {
                return Err(ConfigError::invalid(path, "only scalar fields can be overridden"))
            }
            Some(_) => {}
            None => return Err(ConfigError::invalid(path, "unknown field")),
        }
        table.insert(last.to_string(), parsed);

        let updated: ExperimentConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::invalid(path, e.message().to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn total_laps(&self) -> u64 {
        self.run.laps * self.scene.objects.len() as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.laps == 0 {
            return Err(ConfigError::invalid("run.laps", "must be at least 1"));
        }
        self.trajectory.validate()?;
        if self.scene.size < 32 {
            return Err(ConfigError::invalid("scene.size", "must be at least 32 pixels"));
        }
        if self.scene.objects.is_empty() {
            return Err(ConfigError::invalid("scene.objects", "at least one object is required"));
        }
        for (i, o) in self.scene.objects.iter().enumerate() {
            if o.block == 0 {
                return Err(ConfigError::invalid(format!("scene.objects[{i}].block"), "must be positive"));
            }
            if !(0.0..=1.0).contains(&o.contrast) {
                return Err(ConfigError::invalid(format!("scene.objects[{i}].contrast"), "must lie in [0, 1]"));
            }
            if !(0.0..=1.0).contains(&o.difficulty) {
                return Err(ConfigError::invalid(format!("scene.objects[{i}].difficulty"), "must lie in [0, 1]"));
            }
            if o.label >= self.local.num_classes {
                return Err(ConfigError::invalid(format!("scene.objects[{i}].label"), "outside the label space"));
            }
        }
        self.grids.validate()?;
        self.envelope.validate()?;
        self.bins.validate()?;
        self.bandit.validate()?;
        self.reward.validate()?;
        self.camera.validate()?;
        self.local.validate()?;
        self.remote.validate()?;
        self.routing.validate()?;
        if self.local.infer_latency_ms >= self.trajectory.frame_ms {
            return Err(ConfigError::invalid("local.infer_latency_ms", "must be shorter than trajectory.frame_ms"));
        }
        if (self.camera.k_cam - self.envelope.k_cam).abs() > 1e-12 {
            return Err(ConfigError::invalid("camera.k_cam", "must equal envelope.k_cam"));
        }
        if !(0.0..=1.0).contains(&self.network.late_prob) {
            return Err(ConfigError::invalid("network.late_prob", "must lie in [0, 1]"));
        }
        if self.network.response_window_ms == 0 {
            return Err(ConfigError::invalid("network.response_window_ms", "must be positive"));
        }
        if !(self.ae.target > 0.0 && self.ae.target < 1.0) {
            return Err(ConfigError::invalid("ae.target", "must lie in (0, 1)"));
        }
        if self.ae.deadband.is_nan() || self.ae.deadband < 0.0 {
            return Err(ConfigError::invalid("ae.deadband", "must be non-negative"));
        }
        if self.ae.initial_exp_idx >= self.grids.exp_len() || self.ae.initial_iso_idx >= self.grids.iso_len() {
            return Err(ConfigError::invalid("ae.initial_exp_idx", "initial setting outside the grids"));
        }
        if !(self.task.error_cost >= 0.0 && self.task.comm_cost_per_call >= 0.0) {
            return Err(ConfigError::invalid("task.error_cost", "costs must be non-negative"));
        }
        Ok(())
    }
}

fn base(run: RunConfig, trajectory: EnvTrajectory, objects: Vec<ObjectSpec>) -> ExperimentConfig {
    ExperimentConfig {
        run,
        trajectory,
        scene: SceneConfig { size: 64, objects },
        grids: SettingGrids::default(),
        envelope: EnvelopeParams::default(),
        bins: ContextBins::default(),
        bandit: BanditParams::default(),
        consolidation: ConsolidationRules::default(),
        reward: RewardParams::default(),
        camera: CameraModelParams::default(),
        local: LocalOracleParams::default(),
        remote: RemoteOracleParams::default(),
        routing: RoutingThresholds::default(),
        network: NetworkConfig::default(),
        task: TaskConfig::default(),
        ae: AeParams::default(),
    }
}

/// Dim track (10 lux) at moderate speed, single object. The reflexive
/// baseline keeps the long exposure; a shorter one with more gain is better.
pub fn dark_track() -> ExperimentConfig {
    base(
        RunConfig { seed: 10, laps: 270, sensing: SensingMode::L1L2Learning, inference: InferenceMode::L3Only },
        EnvTrajectory {
            lap_ms: 3000,
            frame_ms: 100,
            scenario: Scenario::LapTrack {
                lux: 10.0,
                motion: MotionProfile::steady(0.6, 0.3),
                visible_start_ms: 600,
                visible_end_ms: 2400,
            },
        },
        vec![ObjectSpec::new(852, "tennis ball", 3, 0.12, 0.10)],
    )
}

/// Dim track at high speed over the eight-class batch.
pub fn dark_motion() -> ExperimentConfig {
    let mut cfg = base(
        RunConfig { seed: 2024, laps: 50, sensing: SensingMode::L1, inference: InferenceMode::L3L4Split },
        EnvTrajectory {
            lap_ms: 3000,
            frame_ms: 100,
            scenario: Scenario::LapTrack {
                lux: 10.0,
                motion: MotionProfile { vibration: 0.1, ..MotionProfile::steady(1.0, 0.5) },
                visible_start_ms: 300,
                visible_end_ms: 2700,
            },
        },
        batch_objects(),
    );
    cfg.remote.confusable_pairs = batch_confusables();
    cfg.remote.misalign_prob = 0.6;
    cfg
}

/// Lighting flips between 10 and 300 lux at every lap start; the object is
/// in view early in the lap.
pub fn alternating() -> ExperimentConfig {
    let mut cfg = base(
        RunConfig { seed: 11, laps: 25, sensing: SensingMode::L1L2Inference, inference: InferenceMode::L3L4Split },
        EnvTrajectory {
            lap_ms: 3000,
            frame_ms: 100,
            scenario: Scenario::AlternatingLight {
                dark_lux: 10.0,
                bright_lux: 300.0,
                motion: MotionProfile::steady(0.8, 0.4),
                visible_start_ms: 0,
                visible_end_ms: 900,
            },
        },
        batch_objects(),
    );
    cfg.remote.confusable_pairs = batch_confusables();
    cfg
}
