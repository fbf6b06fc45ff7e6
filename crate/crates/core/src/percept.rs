//! Local and remote inference oracles and the escalation protocol.
//!
//! Both oracles score a frame with the same capture-quality model,
//! `q = tent(mean) · lapvar/(lapvar + sharp_half) · (1 − difficulty)`,
//! gated by object visibility. The local oracle reports `q` plus jitter; the
//! remote one adds a fixed capability boost, runs on a much longer latency
//! and sometimes answers with a plausible but task-misaligned label.
//!
//! Nothing here can touch sensor state: the oracles only see frames.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::sensecam::{laplacian_variance, Frame, SHARPNESS_SIZE};

/// Label reported for frames with no recognisable object.
pub const BACKGROUND_LABEL: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u32,
    pub confidence: f64,
    pub source: Source,
    pub frame_timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOracleParams {
    /// Mean pixel value at which the brightness response peaks.
    pub brightness_peak: f64,
    /// Half-width of the brightness tent.
    pub brightness_width: f64,
    /// Laplacian variance at which the sharpness factor reaches 1/2.
    pub sharp_half: f64,
    pub conf_noise_sd: f64,
    pub infer_latency_ms: u64,
    /// Size of the label space wrong answers are drawn from.
    pub num_classes: u32,
}

impl Default for LocalOracleParams {
    fn default() -> Self {
        Self {
            brightness_peak: 0.5,
            brightness_width: 0.5,
            sharp_half: 300.0,
            conf_noise_sd: 0.05,
            infer_latency_ms: 32,
            num_classes: 1000,
        }
    }
}

impl LocalOracleParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("local.brightness_peak", self.brightness_peak),
            ("local.brightness_width", self.brightness_width),
            ("local.sharp_half", self.sharp_half),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(name, "must be positive and finite"));
            }
        }
        if !(self.conf_noise_sd >= 0.0 && self.conf_noise_sd.is_finite()) {
            return Err(ConfigError::invalid("local.conf_noise_sd", "must be non-negative"));
        }
        if self.infer_latency_ms == 0 {
            return Err(ConfigError::invalid("local.infer_latency_ms", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(ConfigError::invalid("local.num_classes", "needs at least two classes"));
        }
        Ok(())
    }
}

/// A true class and the label a general-purpose model tends to give it instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusablePair {
    pub truth: u32,
    pub misaligned: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteOracleParams {
    pub capability_boost: f64,
    pub misalign_prob: f64,
    /// Share of a class's intrinsic difficulty the remote model overcomes. Its
    /// label is correct with probability `min(1, q_r + capability_boost)`,
    /// where `q_r` is the capture quality with difficulty scaled by
    /// `1 − difficulty_robustness`.
    pub difficulty_robustness: f64,
    pub infer_latency_ms: u64,
    pub confusable_pairs: Vec<ConfusablePair>,
}

impl Default for RemoteOracleParams {
    fn default() -> Self {
        Self {
            capability_boost: 0.25,
            misalign_prob: 0.1,
            difficulty_robustness: 1.0,
            infer_latency_ms: 2220,
            confusable_pairs: Vec::new(),
        }
    }
}

impl RemoteOracleParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("remote.capability_boost", self.capability_boost),
            ("remote.misalign_prob", self.misalign_prob),
            ("remote.difficulty_robustness", self.difficulty_robustness),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::invalid(name, "must lie in [0, 1]"));
            }
        }
        if self.infer_latency_ms == 0 {
            return Err(ConfigError::invalid("remote.infer_latency_ms", "must be positive"));
        }
        Ok(())
    }

    fn misaligned_label(&self, truth: u32) -> Option<u32> {
        self.confusable_pairs.iter().find(|p| p.truth == truth).map(|p| p.misaligned)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscalationRequest {
    pub payload: Frame,
    pub budget_ms: u64,
    pub origin_timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscalationResponse {
    pub prediction: Prediction,
    pub origin_timestamp: u64,
    pub arrival_time: u64,
}

impl EscalationResponse {
    /// The same response delivered `extra_ms` later (network transit, injected delay).
    pub fn delayed_by(mut self, extra_ms: u64) -> Self {
        self.arrival_time += extra_ms;
        self
    }
}

/// Symmetric tent with peak 1 at `peak`, reaching 0 at `peak ± width`.
pub fn tent(x: f64, peak: f64, width: f64) -> f64 {
    (1.0 - (x - peak).abs() / width).max(0.0)
}

/// Exposure and sharpness factors of the quality score, without the
/// object's intrinsic difficulty. Zero when the object is out of view.
pub fn capture_quality(f: &Frame, lapvar: f64, p: &LocalOracleParams) -> f64 {
    if !f.truth.visible {
        return 0.0;
    }
    let brightness = tent(f.mean(), p.brightness_peak, p.brightness_width);
    let sharpness = if lapvar > 0.0 { lapvar / (lapvar + p.sharp_half) } else { 0.0 };
    (brightness * sharpness).clamp(0.0, 1.0)
}

/// Noise-free quality of `f` in [0, 1], given its Laplacian variance.
pub fn quality_score(f: &Frame, lapvar: f64, p: &LocalOracleParams) -> f64 {
    (capture_quality(f, lapvar, p) * (1.0 - f.truth.difficulty)).clamp(0.0, 1.0)
}

fn wrong_label<R: Rng + ?Sized>(truth: u32, num_classes: u32, rng: &mut R) -> u32 {
    let pick = rng.random_range(0..num_classes - 1);
    if pick >= truth {
        pick + 1
    } else {
        pick
    }
}

fn jitter<R: Rng + ?Sized>(sd: f64, rng: &mut R) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    } else {
        0.0
    }
}

/// Local inference on one frame.
pub fn l3_infer<R: Rng + ?Sized>(f: &Frame, p: &LocalOracleParams, rng: &mut R) -> Prediction {
    l3_infer_scored(f, laplacian_variance(f, SHARPNESS_SIZE), p, rng)
}

/// [`l3_infer`] with the frame's Laplacian variance already computed.
pub fn l3_infer_scored<R: Rng + ?Sized>(f: &Frame, lapvar: f64, p: &LocalOracleParams, rng: &mut R) -> Prediction {
    let q = quality_score(f, lapvar, p);
    let noise = jitter(p.conf_noise_sd, rng);
    let draw: f64 = rng.random();
    let label = if !f.truth.visible {
        BACKGROUND_LABEL
    } else if draw < q {
        f.truth.object_id
    } else {
        wrong_label(f.truth.object_id, p.num_classes, rng)
    };
    let confidence = if f.truth.visible { (q + noise).clamp(0.0, 1.0) } else { noise.abs().min(1.0) * 0.5 };
    Prediction { label, confidence, source: Source::Local, frame_timestamp: f.timestamp_ms }
}

/// Remote inference. The response is due at `now + infer_latency_ms`.
pub fn l4_infer<R: Rng + ?Sized>(
    req: &EscalationRequest,
    p: &RemoteOracleParams,
    quality: &LocalOracleParams,
    now: u64,
    rng: &mut R,
) -> EscalationResponse {
    let f = &req.payload;
    let lapvar = laplacian_variance(f, SHARPNESS_SIZE);
    let capture = capture_quality(f, lapvar, quality);
    let q = (capture * (1.0 - f.truth.difficulty)).clamp(0.0, 1.0);
    let misalign_draw: f64 = rng.random();
    let correct_draw: f64 = rng.random();

    let (label, confidence) = if !f.truth.visible || q <= 0.0 {
        // background content is filtered to zero confidence
        (BACKGROUND_LABEL, 0.0)
    } else {
        let confidence = (q + p.capability_boost).min(1.0);
        let truth = f.truth.object_id;
        let label = match p.misaligned_label(truth) {
            Some(alt) if misalign_draw < p.misalign_prob => alt,
            _ => {
                let residual = f.truth.difficulty * (1.0 - p.difficulty_robustness);
                let p_correct = (capture * (1.0 - residual) + p.capability_boost).min(1.0);
                if correct_draw < p_correct {
                    truth
                } else {
                    wrong_label(truth, quality.num_classes, rng)
                }
            }
        };
        (label, confidence)
    };

    EscalationResponse {
        prediction: Prediction { label, confidence, source: Source::Remote, frame_timestamp: f.timestamp_ms },
        origin_timestamp: req.origin_timestamp,
        arrival_time: now + p.infer_latency_ms,
    }
}

/// A response is stale when it lands after the scene epoch it belongs to.
/// Arrival exactly at the boundary still counts.
pub fn is_stale(resp: &EscalationResponse, scene_epoch_end: u64) -> bool {
    resp.arrival_time > scene_epoch_end
}
