//! Synthetic camera and environment.
//!
//! Frame formation: `pixels = clip(b · blur_k(P) + n)`, with relative
//! brightness `b = lux · exposure · (ISO/100) · k_cam`, a horizontal box blur
//! of length `k = round(c_blur · motion · exposure)` and additive Gaussian
//! noise `n ~ N(0, (sigma0 · sqrt(ISO/100))²)`.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envelope::{LightSample, MotionSample, SensorSetting, SettingGrids};
use crate::error::ConfigError;

/// Downsample target used for sharpness scoring.
pub const SHARPNESS_SIZE: (usize, usize) = (32, 32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePattern {
    pub width: usize,
    pub height: usize,
    /// Row-major grayscale in [0, 1].
    pub pixels: Vec<f64>,
    pub object_id: u32,
    /// Inherent recognition hardness in [0, 1].
    pub difficulty: f64,
    /// Whether the object is in view for the next capture.
    pub visible: bool,
}

impl ScenePattern {
    /// Checkerboard of `block`-pixel squares alternating between `lo` and `hi`.
    pub fn checkerboard(size: usize, block: usize, lo: f64, hi: f64) -> Self {
        let block = block.max(1);
        let pixels = (0..size * size)
            .map(|i| {
                let (x, y) = (i % size, i / size);
                if (x / block + y / block).is_multiple_of(2) {
                    lo
                } else {
                    hi
                }
            })
            .collect();
        Self { width: size, height: size, pixels, object_id: 0, difficulty: 0.0, visible: true }
    }

    pub fn with_object(mut self, object_id: u32, difficulty: f64) -> Self {
        self.object_id = object_id;
        self.difficulty = difficulty;
        self
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.width < 16 || self.height < 16 {
            return Err(ConfigError::invalid("scene", "pattern must be at least 16x16"));
        }
        if self.pixels.len() != self.width * self.height {
            return Err(ConfigError::invalid("scene.pixels", "length does not match dimensions"));
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ConfigError::invalid("scene.pixels", "values must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(ConfigError::invalid("scene.difficulty", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for ScenePattern {
    fn default() -> Self {
        Self::checkerboard(64, 8, 0.45, 0.55)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModelParams {
    pub k_cam: f64,
    /// Blur pixels per (motion unit · second).
    pub c_blur: f64,
    /// Noise standard deviation at ISO 100, on the 0–1 pixel scale.
    pub sigma0: f64,
    /// Pixels at or above this value count as saturated.
    pub sat_level: f64,
    /// Mean pixel value of a well-exposed scene; used to invert brightness to lux.
    pub reference_mean: f64,
}

impl Default for CameraModelParams {
    fn default() -> Self {
        Self { k_cam: 0.4, c_blur: 120.0, sigma0: 0.002, sat_level: 0.98, reference_mean: 0.5 }
    }
}

impl CameraModelParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("camera.k_cam", self.k_cam),
            ("camera.c_blur", self.c_blur),
            ("camera.sigma0", self.sigma0),
            ("camera.reference_mean", self.reference_mean),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(name, "must be positive and finite"));
            }
        }
        if !(self.sat_level > 0.0 && self.sat_level <= 1.0) {
            return Err(ConfigError::invalid("camera.sat_level", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn brightness(&self, lux: f64, exposure_s: f64, iso: f64) -> f64 {
        lux * exposure_s * (iso / 100.0) * self.k_cam
    }

    pub fn blur_length(&self, motion: MotionSample, exposure_s: f64) -> usize {
        (self.c_blur * motion.peak() * exposure_s).round() as usize
    }

    pub fn noise_sigma(&self, iso: f64) -> f64 {
        self.sigma0 * (iso / 100.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub object_id: u32,
    pub visible: bool,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub timestamp_ms: u64,
    pub setting: SensorSetting,
    pub exposure_s: f64,
    pub iso: f64,
    pub truth: GroundTruth,
}

impl Frame {
    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Write the frame as a binary portable graymap (P5, 8-bit).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        out.write_all(&bytes)
    }
}

/// Per-frame signal health passed from sensing to inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVector {
    /// Laplacian variance on the 0–255 scale.
    pub blur_score: f64,
    pub saturation_ratio: f64,
    pub est_lux: f64,
}

/// Horizontal box blur of length `k` with edge replication. `k <= 1` is the identity.
pub fn box_blur_horizontal(pixels: &[f64], width: usize, height: usize, k: usize) -> Vec<f64> {
    if k <= 1 {
        return pixels.to_vec();
    }
    let start = -(((k - 1) / 2) as isize);
    let inv = 1.0 / k as f64;
    let mut out = vec![0.0; pixels.len()];
    for y in 0..height {
        let row = &pixels[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for o in 0..k as isize {
                let sx = (x as isize + start + o).clamp(0, width as isize - 1) as usize;
                acc += row[sx];
            }
            out[y * width + x] = acc * inv;
        }
    }
    out
}

/// Render a frame of `scene` under `setting` and the current conditions.
#[allow(clippy::too_many_arguments)]
pub fn capture_frame<R: Rng + ?Sized>(
    scene: &ScenePattern,
    setting: SensorSetting,
    m: MotionSample,
    l: LightSample,
    p: &CameraModelParams,
    g: &SettingGrids,
    timestamp_ms: u64,
    rng: &mut R,
) -> Frame {
    let exposure_s = g.exposure(setting.exp_idx);
    let iso = g.iso(setting.iso_idx);
    let b = p.brightness(l.lux, exposure_s, iso);

    let base = if scene.visible {
        box_blur_horizontal(&scene.pixels, scene.width, scene.height, p.blur_length(m, exposure_s))
    } else {
        vec![scene.mean(); scene.pixels.len()]
    };

    let sigma = p.noise_sigma(iso);
    let pixels = if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        base.iter().map(|v| (b * v + noise.sample(rng)).clamp(0.0, 1.0)).collect()
    } else {
        base.iter().map(|v| (b * v).clamp(0.0, 1.0)).collect()
    };

    Frame {
        width: scene.width,
        height: scene.height,
        pixels,
        timestamp_ms,
        setting,
        exposure_s,
        iso,
        truth: GroundTruth { object_id: scene.object_id, visible: scene.visible, difficulty: scene.difficulty },
    }
}

/// Source-pixel overlap weights for area resampling along one axis.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let w = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (w > 0.0).then_some((s, w / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-average `pixels` (w×h) down to `target`.
pub fn downsample_area(pixels: &[f64], width: usize, height: usize, target: (usize, usize)) -> Vec<f64> {
    let (tw, th) = target;
    if (tw, th) == (width, height) {
        return pixels.to_vec();
    }
    let wx = area_weights(width, tw);
    let wy = area_weights(height, th);
    let mut out = Vec::with_capacity(tw * th);
    for ys in &wy {
        for xs in &wx {
            let mut acc = 0.0;
            for &(sy, fy) in ys {
                let row = &pixels[sy * width..(sy + 1) * width];
                for &(sx, fx) in xs {
                    acc += fy * fx * row[sx];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Variance of the 4-neighbour Laplacian over the valid interior of the
/// downsampled image, on the 0–255 scale.
pub fn laplacian_variance_raw(pixels: &[f64], width: usize, height: usize, target: (usize, usize)) -> f64 {
    let small = downsample_area(pixels, width, height, target);
    let (w, h) = target;
    if w < 3 || h < 3 {
        return 0.0;
    }
    let px = |x: usize, y: usize| small[y * w + x] * 255.0;
    let n = ((w - 2) * (h - 2)) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let r = px(x, y - 1) + px(x - 1, y) + px(x + 1, y) + px(x, y + 1) - 4.0 * px(x, y);
            responses.push(r);
            sum += r;
        }
    }
    let mean = sum / n;
    for r in &responses {
        sum_sq += (r - mean) * (r - mean);
    }
    sum_sq / n
}

pub fn laplacian_variance(f: &Frame, target: (usize, usize)) -> f64 {
    laplacian_variance_raw(&f.pixels, f.width, f.height, target)
}

pub fn quality_vector(f: &Frame, p: &CameraModelParams) -> QualityVector {
    quality_vector_with_blur(f, p, laplacian_variance(f, SHARPNESS_SIZE))
}

/// Same as [`quality_vector`] with a precomputed blur score.
pub fn quality_vector_with_blur(f: &Frame, p: &CameraModelParams, blur_score: f64) -> QualityVector {
    let n = f.pixels.len() as f64;
    let saturated = f.pixels.iter().filter(|v| **v >= p.sat_level).count() as f64;
    let gain = p.reference_mean * f.exposure_s * (f.iso / 100.0) * p.k_cam;
    QualityVector { blur_score, saturation_ratio: saturated / n, est_lux: f.mean() / gain }
}

/// Motion magnitudes with a periodic vibration on top of a base level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub acc_mag: f64,
    pub gyro_mag: f64,
    /// Relative vibration amplitude in [0, 1).
    #[serde(default)]
    pub vibration: f64,
    #[serde(default = "default_vibration_period")]
    pub vibration_period_ms: u64,
}

fn default_vibration_period() -> u64 {
    700
}

impl MotionProfile {
    pub fn steady(acc_mag: f64, gyro_mag: f64) -> Self {
        Self { acc_mag, gyro_mag, vibration: 0.0, vibration_period_ms: default_vibration_period() }
    }

    pub fn at(&self, t_ms: u64) -> MotionSample {
        let phase = 2.0 * PI * (t_ms % self.vibration_period_ms.max(1)) as f64 / self.vibration_period_ms.max(1) as f64;
        let f = 1.0 + self.vibration * phase.sin();
        MotionSample::new(self.acc_mag * f, self.gyro_mag * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Constant {
        lux: f64,
        motion: MotionProfile,
        visible: bool,
    },
    /// Constant lighting; the object is in view during `[visible_start_ms, visible_end_ms)` of each lap.
    LapTrack {
        lux: f64,
        motion: MotionProfile,
        visible_start_ms: u64,
        visible_end_ms: u64,
    },
    /// Lighting flips between `dark_lux` (even laps) and `bright_lux` (odd laps).
    AlternatingLight {
        dark_lux: f64,
        bright_lux: f64,
        motion: MotionProfile,
        visible_start_ms: u64,
        visible_end_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvTrajectory {
    pub lap_ms: u64,
    pub frame_ms: u64,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSample {
    pub light: LightSample,
    pub motion: MotionSample,
    pub visible: bool,
    pub lap: u64,
}

impl EnvTrajectory {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.frame_ms == 0 {
            return Err(ConfigError::invalid("scenario.frame_ms", "must be positive"));
        }
        if self.lap_ms == 0 || !self.lap_ms.is_multiple_of(self.frame_ms) {
            return Err(ConfigError::invalid("scenario.lap_ms", "must be a positive multiple of frame_ms"));
        }
        let (luxes, motion): (Vec<f64>, &MotionProfile) = match &self.scenario {
            Scenario::Constant { lux, motion, .. } => (vec![*lux], motion),
            Scenario::LapTrack { lux, motion, visible_start_ms, visible_end_ms } => {
                if visible_start_ms > visible_end_ms || *visible_end_ms > self.lap_ms {
                    return Err(ConfigError::invalid("scenario.visible_end_ms", "window must lie inside the lap"));
                }
                (vec![*lux], motion)
            }
            Scenario::AlternatingLight { dark_lux, bright_lux, motion, visible_start_ms, visible_end_ms } => {
                if visible_start_ms > visible_end_ms || *visible_end_ms > self.lap_ms {
                    return Err(ConfigError::invalid("scenario.visible_end_ms", "window must lie inside the lap"));
                }
                (vec![*dark_lux, *bright_lux], motion)
            }
        };
        if luxes.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(ConfigError::invalid("scenario.lux", "must be finite and non-negative"));
        }
        if !(motion.acc_mag >= 0.0 && motion.gyro_mag >= 0.0 && motion.acc_mag.is_finite() && motion.gyro_mag.is_finite()) {
            return Err(ConfigError::invalid("scenario.motion", "magnitudes must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&motion.vibration) {
            return Err(ConfigError::invalid("scenario.motion.vibration", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn frames_per_lap(&self) -> u64 {
        self.lap_ms / self.frame_ms
    }
}

/// Environment state at simulation time `t_ms`.
pub fn next_env(traj: &EnvTrajectory, t_ms: u64) -> EnvSample {
    let lap = t_ms / traj.lap_ms;
    let in_lap = t_ms % traj.lap_ms;
    let (lux, motion, visible) = match &traj.scenario {
        Scenario::Constant { lux, motion, visible } => (*lux, motion.at(t_ms), *visible),
        Scenario::LapTrack { lux, motion, visible_start_ms, visible_end_ms } => {
            (*lux, motion.at(t_ms), (*visible_start_ms..*visible_end_ms).contains(&in_lap))
        }
        Scenario::AlternatingLight { dark_lux, bright_lux, motion, visible_start_ms, visible_end_ms } => {
            let lux = if lap.is_multiple_of(2) { *dark_lux } else { *bright_lux };
            (lux, motion.at(t_ms), (*visible_start_ms..*visible_end_ms).contains(&in_lap))
        }
    };
    EnvSample { light: LightSample::new(lux), motion, visible, lap }
}

/// Result of a sensor-control primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlAck {
    Applied,
    OutOfRange,
    Unsupported,
}

/// Actuation primitives exposed by a sensor. Only shutter and gain have
/// behavior in the simulator.
pub trait SensorControl {
    fn set_shutter(&mut self, exp_idx: usize) -> ControlAck;
    fn set_gain(&mut self, iso_idx: usize) -> ControlAck;

    fn slew_gimbal(&mut self, _pan_rad: f64, _tilt_rad: f64) -> ControlAck {
        ControlAck::Unsupported
    }

    fn set_hdr(&mut self, _enabled: bool) -> ControlAck {
        ControlAck::Unsupported
    }

    fn set_roi(&mut self, _x: usize, _y: usize, _w: usize, _h: usize) -> ControlAck {
        ControlAck::Unsupported
    }
}

/// A simulated camera holding the currently applied setting.
#[derive(Debug, Clone)]
pub struct SimCamera {
    pub params: CameraModelParams,
    pub grids: SettingGrids,
    setting: SensorSetting,
}

impl SimCamera {
    pub fn new(params: CameraModelParams, grids: SettingGrids, initial: SensorSetting) -> Self {
        Self { params, grids, setting: initial }
    }

    pub fn setting(&self) -> SensorSetting {
        self.setting
    }

    pub fn apply(&mut self, s: SensorSetting) {
        self.set_shutter(s.exp_idx);
        self.set_gain(s.iso_idx);
    }

    pub fn capture<R: Rng + ?Sized>(&self, scene: &ScenePattern, env: &EnvSample, t_ms: u64, rng: &mut R) -> Frame {
        capture_frame(scene, self.setting, env.motion, env.light, &self.params, &self.grids, t_ms, rng)
    }
}

impl SensorControl for SimCamera {
    fn set_shutter(&mut self, exp_idx: usize) -> ControlAck {
        if exp_idx >= self.grids.exp_len() {
            return ControlAck::OutOfRange;
        }
        self.setting.exp_idx = exp_idx;
        ControlAck::Applied
    }

    fn set_gain(&mut self, iso_idx: usize) -> ControlAck {
        if iso_idx >= self.grids.iso_len() {
            return ControlAck::OutOfRange;
        }
        self.setting.iso_idx = iso_idx;
        ControlAck::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn noiseless() -> CameraModelParams {
        CameraModelParams { sigma0: 0.0, ..CameraModelParams::default() }
    }

    fn grids() -> SettingGrids {
        SettingGrids::default()
    }

    // (1/60 s, ISO 100) on the default grids
    const REF: SensorSetting = SensorSetting { exp_idx: 4, iso_idx: 1 };

    #[test]
    fn well_exposed_identity() {
        let scene = ScenePattern::default();
        let mut rng = stream_rng(1, Stream::Camera, 0);
        let f = capture_frame(&scene, REF, MotionSample::ZERO, LightSample::new(150.0), &noiseless(), &grids(), 0, &mut rng);
        for (a, b) in f.pixels.iter().zip(&scene.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn overexposure_saturates() {
        let scene = ScenePattern::default();
        let mut rng = stream_rng(1, Stream::Camera, 0);
        let s = SensorSetting::new(6, 2); // 1/15 s, ISO 200
        let p = noiseless();
        let f = capture_frame(&scene, s, MotionSample::ZERO, LightSample::new(150.0), &p, &grids(), 0, &mut rng);
        assert!((p.brightness(150.0, 1.0 / 15.0, 200.0) - 8.0).abs() < 1e-12);
        let sat = f.pixels.iter().filter(|v| **v >= p.sat_level).count() as f64 / f.pixels.len() as f64;
        assert!(sat > 0.5, "saturation ratio {sat}");
    }

    #[test]
    fn doubled_motion_lowers_sharpness() {
        let scene = ScenePattern::default();
        let p = noiseless();
        let mut rng = stream_rng(1, Stream::Camera, 0);
        // 1/30 s: blur = 120 · m / 30 = 4m pixels
        let s = SensorSetting::new(5, 0);
        let light = LightSample::new(150.0);
        let a = capture_frame(&scene, s, MotionSample::new(0.5, 0.0), light, &p, &grids(), 0, &mut rng);
        let b = capture_frame(&scene, s, MotionSample::new(1.0, 0.0), light, &p, &grids(), 0, &mut rng);
        assert_eq!(p.blur_length(MotionSample::new(0.5, 0.0), 1.0 / 30.0), 2);
        assert_eq!(p.blur_length(MotionSample::new(1.0, 0.0), 1.0 / 30.0), 4);
        assert!(laplacian_variance(&b, SHARPNESS_SIZE) < laplacian_variance(&a, SHARPNESS_SIZE));
    }

    #[test]
    fn constant_image_has_zero_laplacian_variance() {
        let px = vec![0.37; 64 * 64];
        assert_eq!(laplacian_variance_raw(&px, 64, 64, SHARPNESS_SIZE), 0.0);
    }

    #[test]
    fn blur_never_sharpens_default_pattern() {
        let scene = ScenePattern::default();
        let mut prev = f64::INFINITY;
        for k in 0..=8 {
            let px = box_blur_horizontal(&scene.pixels, 64, 64, k);
            let v = laplacian_variance_raw(&px, 64, 64, SHARPNESS_SIZE);
            assert!(v <= prev + 1e-9, "k={k}: {v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn downsample_preserves_mean() {
        let scene = ScenePattern::checkerboard(64, 3, 0.1, 0.9);
        for target in [(32, 32), (20, 24), (64, 64)] {
            let d = downsample_area(&scene.pixels, 64, 64, target);
            let m = d.iter().sum::<f64>() / d.len() as f64;
            assert!((m - scene.mean()).abs() < 1e-12);
        }
    }

    #[test]
    fn quality_vector_edges() {
        let p = CameraModelParams::default();
        let mut f = Frame {
            width: 16,
            height: 16,
            pixels: vec![1.0; 256],
            timestamp_ms: 0,
            setting: REF,
            exposure_s: 1.0 / 60.0,
            iso: 100.0,
            truth: GroundTruth { object_id: 0, visible: true, difficulty: 0.0 },
        };
        assert_eq!(quality_vector(&f, &p).saturation_ratio, 1.0);
        f.pixels = vec![0.0; 256];
        assert_eq!(quality_vector(&f, &p).est_lux, 0.0);
    }

    #[test]
    fn est_lux_round_trip() {
        let scene = ScenePattern::default();
        let p = noiseless();
        let mut rng = stream_rng(1, Stream::Camera, 0);
        for lux in [40.0, 90.0, 150.0, 180.0] {
            let f = capture_frame(&scene, REF, MotionSample::ZERO, LightSample::new(lux), &p, &grids(), 0, &mut rng);
            let est = quality_vector(&f, &p).est_lux;
            assert!((est - lux).abs() / lux < 0.05, "lux {lux} est {est}");
        }
    }

    #[test]
    fn invisible_object_renders_flat_background() {
        let scene = ScenePattern { visible: false, ..ScenePattern::default() };
        let mut rng = stream_rng(1, Stream::Camera, 0);
        let f = capture_frame(&scene, REF, MotionSample::ZERO, LightSample::new(150.0), &noiseless(), &grids(), 0, &mut rng);
        assert_eq!(laplacian_variance(&f, SHARPNESS_SIZE), 0.0);
        assert!(!f.truth.visible);
    }

    #[test]
    fn alternating_light_schedule() {
        let traj = EnvTrajectory {
            lap_ms: 3000,
            frame_ms: 100,
            scenario: Scenario::AlternatingLight {
                dark_lux: 10.0,
                bright_lux: 200.0,
                motion: MotionProfile::steady(0.5, 0.2),
                visible_start_ms: 0,
                visible_end_ms: 3000,
            },
        };
        assert_eq!(next_env(&traj, 1000).light.lux, 10.0);
        assert_eq!(next_env(&traj, 4000).light.lux, 200.0);
        assert_eq!(next_env(&traj, 6000).light.lux, 10.0);
    }

    #[test]
    fn constant_scenario_is_constant() {
        let traj = EnvTrajectory {
            lap_ms: 3000,
            frame_ms: 100,
            scenario: Scenario::Constant { lux: 80.0, motion: MotionProfile::steady(0.3, 0.1), visible: true },
        };
        let a = next_env(&traj, 0);
        for t in (0..20_000).step_by(300) {
            let b = next_env(&traj, t);
            assert_eq!((a.light, a.motion, a.visible), (b.light, b.motion, b.visible));
        }
    }

    #[test]
    fn lap_track_visibility_window() {
        let traj = EnvTrajectory {
            lap_ms: 3000,
            frame_ms: 100,
            scenario: Scenario::LapTrack {
                lux: 10.0,
                motion: MotionProfile::steady(0.5, 0.2),
                visible_start_ms: 800,
                visible_end_ms: 2000,
            },
        };
        for lap in 0..3u64 {
            for f in 0..30u64 {
                let t = lap * 3000 + f * 100;
                let v = next_env(&traj, t).visible;
                assert_eq!(v, (800..2000).contains(&(f * 100)), "t={t}");
            }
        }
        assert!(traj.validate().is_ok());
    }

    #[test]
    fn trajectory_validation() {
        let traj = EnvTrajectory {
            lap_ms: 3050,
            frame_ms: 100,
            scenario: Scenario::Constant { lux: 10.0, motion: MotionProfile::steady(0.0, 0.0), visible: true },
        };
        assert!(traj.validate().is_err());
    }

    #[test]
    fn control_stubs_have_no_effect() {
        let mut cam = SimCamera::new(CameraModelParams::default(), grids(), REF);
        assert_eq!(cam.slew_gimbal(0.1, 0.2), ControlAck::Unsupported);
        assert_eq!(cam.set_hdr(true), ControlAck::Unsupported);
        assert_eq!(cam.set_roi(0, 0, 8, 8), ControlAck::Unsupported);
        assert_eq!(cam.set_shutter(99), ControlAck::OutOfRange);
        assert_eq!(cam.setting(), REF);
        assert_eq!(cam.set_gain(3), ControlAck::Applied);
        assert_eq!(cam.setting().iso_idx, 3);
    }

    #[test]
    fn pgm_header() {
        let scene = ScenePattern::default();
        let mut rng = stream_rng(1, Stream::Camera, 0);
        let f = capture_frame(&scene, REF, MotionSample::ZERO, LightSample::new(150.0), &noiseless(), &grids(), 0, &mut rng);
        let mut buf = Vec::new();
        f.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(buf.len(), 13 + 64 * 64);
    }
}
