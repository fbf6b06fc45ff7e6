//! Reflexive exposure/ISO control and the safety envelope.
//!
//! The baseline setting is derived from motion (blur budget) and illuminance
//! (minimum exposure floor, noise-aware ISO cap). Every setting that reaches
//! the sensor, whoever proposed it, passes through [`clamp_to_envelope`].

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Relative tolerance for comparing configured exposure/ISO values against
/// grid entries that may have been written with limited precision.
const GRID_REL_EPS: f64 = 1e-9;

fn ge_tol(a: f64, b: f64) -> bool {
    a >= b - GRID_REL_EPS * b.abs()
}

fn le_tol(a: f64, b: f64) -> bool {
    a <= b + GRID_REL_EPS * b.abs()
}

/// Discrete hardware exposure and ISO grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingGrids {
    /// Exposure durations in seconds, strictly ascending.
    pub exposure_steps: Vec<f64>,
    /// ISO gains, strictly ascending.
    pub iso_steps: Vec<f64>,
}

impl Default for SettingGrids {
    fn default() -> Self {
        Self {
            exposure_steps: vec![1.0 / 1000.0, 1.0 / 500.0, 1.0 / 250.0, 1.0 / 125.0, 1.0 / 60.0, 1.0 / 30.0, 1.0 / 15.0],
            iso_steps: vec![50.0, 100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0],
        }
    }
}

fn check_ascending(field: &str, steps: &[f64]) -> Result<(), ConfigError> {
    if steps.len() < 2 {
        return Err(ConfigError::invalid(field, "needs at least two entries"));
    }
    if steps.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(ConfigError::invalid(field, "entries must be positive and finite"));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConfigError::invalid(field, "entries must be strictly ascending"));
    }
    Ok(())
}

impl SettingGrids {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_ascending("grids.exposure_steps", &self.exposure_steps)?;
        check_ascending("grids.iso_steps", &self.iso_steps)
    }

    pub fn exp_len(&self) -> usize {
        self.exposure_steps.len()
    }

    pub fn iso_len(&self) -> usize {
        self.iso_steps.len()
    }

    pub fn exposure(&self, idx: usize) -> f64 {
        self.exposure_steps[idx]
    }

    pub fn iso(&self, idx: usize) -> f64 {
        self.iso_steps[idx]
    }

    pub fn iso_min(&self) -> f64 {
        self.iso_steps[0]
    }

    pub fn iso_max(&self) -> f64 {
        *self.iso_steps.last().expect("validated grid")
    }

    /// Nearest exposure index; ties go to the shorter exposure.
    pub fn nearest_exp_idx(&self, seconds: f64) -> usize {
        nearest_index(&self.exposure_steps, seconds)
    }

    /// Nearest ISO index; ties go to the lower gain.
    pub fn nearest_iso_idx(&self, iso: f64) -> usize {
        nearest_index(&self.iso_steps, iso)
    }

    pub fn contains(&self, s: SensorSetting) -> bool {
        s.exp_idx < self.exp_len() && s.iso_idx < self.iso_len()
    }
}

fn nearest_index(steps: &[f64], value: f64) -> usize {
    if value.is_nan() || value <= steps[0] {
        return 0;
    }
    let last = steps.len() - 1;
    if value >= steps[last] {
        return last;
    }
    // First index with step >= value; value lies in (steps[hi-1], steps[hi]].
    let hi = steps.partition_point(|s| *s < value);
    let lo = hi - 1;
    if steps[hi] - value < value - steps[lo] {
        hi
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSample {
    /// Accelerometer magnitude (m/s²).
    pub acc_mag: f64,
    /// Gyroscope magnitude (rad/s).
    pub gyro_mag: f64,
}

impl MotionSample {
    pub const ZERO: MotionSample = MotionSample { acc_mag: 0.0, gyro_mag: 0.0 };

    pub fn new(acc_mag: f64, gyro_mag: f64) -> Self {
        Self { acc_mag, gyro_mag }
    }

    pub fn is_valid(&self) -> bool {
        self.acc_mag.is_finite() && self.gyro_mag.is_finite() && self.acc_mag >= 0.0 && self.gyro_mag >= 0.0
    }

    pub fn peak(&self) -> f64 {
        self.acc_mag.max(self.gyro_mag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightSample {
    pub lux: f64,
}

impl LightSample {
    pub fn new(lux: f64) -> Self {
        Self { lux }
    }

    pub fn is_valid(&self) -> bool {
        self.lux.is_finite() && self.lux >= 0.0
    }
}

/// An (exposure index, ISO index) pair on [`SettingGrids`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SensorSetting {
    pub exp_idx: usize,
    pub iso_idx: usize,
}

impl SensorSetting {
    pub fn new(exp_idx: usize, iso_idx: usize) -> Self {
        Self { exp_idx, iso_idx }
    }
}

/// One `lux < below → value` band of a piecewise-constant lux lookup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LuxBand {
    pub below: f64,
    pub value: f64,
}

/// Piecewise-constant function of lux. Bands are checked in ascending order
/// with an exclusive upper edge; lux above every band maps to `otherwise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuxTable {
    pub bands: Vec<LuxBand>,
    pub otherwise: f64,
}

impl LuxTable {
    pub fn lookup(&self, lux: f64) -> f64 {
        self.bands.iter().find(|b| lux < b.below).map(|b| b.value).unwrap_or(self.otherwise)
    }

    fn validate(&self, field: &str) -> Result<(), ConfigError> {
        if self.bands.windows(2).any(|w| w[0].below >= w[1].below) {
            return Err(ConfigError::invalid(field, "band thresholds must be strictly ascending"));
        }
        if self.bands.iter().any(|b| !(b.value > 0.0 && b.value.is_finite())) || !(self.otherwise > 0.0 && self.otherwise.is_finite()) {
            return Err(ConfigError::invalid(field, "band values must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    /// Largest tolerated blur length in pixels.
    pub k_max_blur: f64,
    /// Pixels of blur per (m/s² · s).
    pub c_blur_acc: f64,
    /// Pixels of blur per (rad/s · s).
    pub c_blur_gyro: f64,
    /// Minimum exposure (s) per lux band.
    pub lux_floor_table: LuxTable,
    /// Maximum ISO per lux band.
    pub iso_cap_table: LuxTable,
    /// Reference exposure, 1/60 s.
    pub exp_def: f64,
    /// Brightness ceiling relative to a well-exposed frame (1.0).
    pub b_sat: f64,
    /// Brightness constant: relative brightness = lux · exposure · (ISO/100) · k_cam.
    pub k_cam: f64,
}

impl Default for EnvelopeParams {
    fn default() -> Self {
        Self {
            k_max_blur: 4.0,
            c_blur_acc: 120.0,
            c_blur_gyro: 120.0,
            lux_floor_table: LuxTable {
                bands: vec![LuxBand { below: 25.0, value: 1.0 / 30.0 }, LuxBand { below: 60.0, value: 1.0 / 60.0 }],
                otherwise: 1.0 / 1000.0,
            },
            iso_cap_table: LuxTable {
                bands: vec![
                    LuxBand { below: 15.0, value: 3200.0 },
                    LuxBand { below: 25.0, value: 1600.0 },
                    LuxBand { below: 60.0, value: 800.0 },
                    LuxBand { below: 150.0, value: 400.0 },
                ],
                otherwise: 200.0,
            },
            exp_def: 1.0 / 60.0,
            b_sat: 1.5,
            k_cam: 0.4,
        }
    }
}

impl EnvelopeParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("envelope.k_max_blur", self.k_max_blur),
            ("envelope.c_blur_acc", self.c_blur_acc),
            ("envelope.c_blur_gyro", self.c_blur_gyro),
            ("envelope.b_sat", self.b_sat),
            ("envelope.k_cam", self.k_cam),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(name, "must be positive and finite"));
            }
        }
        if (self.exp_def - 1.0 / 60.0).abs() > 1e-12 {
            return Err(ConfigError::invalid("envelope.exp_def", "reference exposure must be 1/60 s"));
        }
        self.lux_floor_table.validate("envelope.lux_floor_table")?;
        self.iso_cap_table.validate("envelope.iso_cap_table")?;
        match self.lux_floor_table.bands.first() {
            Some(b) if b.below >= 25.0 => Ok(()),
            _ => Err(ConfigError::invalid("envelope.lux_floor_table", "lowest band must cover lux < 25")),
        }
    }
}

/// Allowed index ranges for the current motion/light conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyEnvelope {
    pub min_exp_idx: usize,
    pub max_exp_idx: usize,
    pub max_iso_idx: usize,
}

impl SafetyEnvelope {
    pub fn contains(&self, s: SensorSetting) -> bool {
        s.exp_idx >= self.min_exp_idx && s.exp_idx <= self.max_exp_idx && s.iso_idx <= self.max_iso_idx
    }
}

/// Longest exposure that keeps motion blur within `k_max_blur`. A zero motion
/// component imposes no constraint.
pub fn t_safe_motion(m: MotionSample, p: &EnvelopeParams) -> f64 {
    let bound = |coef: f64, mag: f64| {
        if mag > 0.0 {
            p.k_max_blur / (coef * mag)
        } else {
            f64::INFINITY
        }
    };
    bound(p.c_blur_acc, m.acc_mag).min(bound(p.c_blur_gyro, m.gyro_mag))
}

/// Illuminance-dependent minimum exposure.
pub fn t_safe_lux(l: LightSample, p: &EnvelopeParams) -> f64 {
    p.lux_floor_table.lookup(l.lux)
}

/// Noise-aware ISO ceiling for the current illuminance.
pub fn iso_cap(l: LightSample, p: &EnvelopeParams) -> f64 {
    p.iso_cap_table.lookup(l.lux)
}

/// ISO giving relative brightness 1.0 at the reference exposure, clamped to
/// the grid's ISO range (not snapped).
pub fn iso_default(l: LightSample, p: &EnvelopeParams, g: &SettingGrids) -> f64 {
    if l.lux <= 0.0 {
        return g.iso_max();
    }
    let iso = 100.0 / (l.lux * p.exp_def * p.k_cam);
    iso.clamp(g.iso_min(), g.iso_max())
}

/// Pre-cap ISO for a given exposure: `ISO_def(ℓ) · Exp_def / Exp`.
pub fn iso_for_exposure(l: LightSample, exposure_s: f64, p: &EnvelopeParams, g: &SettingGrids) -> f64 {
    iso_default(l, p, g) * p.exp_def / exposure_s
}

/// Longest exposure that keeps brightness at or below `b_sat` even at the
/// lowest ISO. Infinite in darkness.
pub fn saturation_exposure_cap(l: LightSample, p: &EnvelopeParams, g: &SettingGrids) -> f64 {
    if l.lux <= 0.0 {
        return f64::INFINITY;
    }
    p.b_sat / (l.lux * (g.iso_min() / 100.0) * p.k_cam)
}

/// Continuous (pre-snap) baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousBaseline {
    pub exposure_s: f64,
    pub iso_precap: f64,
    pub iso: f64,
}

pub fn continuous_baseline(m: MotionSample, l: LightSample, p: &EnvelopeParams, g: &SettingGrids) -> ContinuousBaseline {
    let motion_target = t_safe_motion(m, p).min(saturation_exposure_cap(l, p, g));
    // Floor last: validity beats blur and saturation.
    let exposure_s = motion_target.max(t_safe_lux(l, p));
    let exposure_hw = exposure_s.clamp(g.exposure(0), g.exposure(g.exp_len() - 1));
    let iso_precap = iso_for_exposure(l, exposure_hw, p, g);
    let iso = iso_precap.min(iso_cap(l, p));
    ContinuousBaseline { exposure_s, iso_precap, iso }
}

/// Reflexive baseline setting, snapped to the grids and clamped into the
/// envelope for the same inputs.
pub fn baseline_setting(m: MotionSample, l: LightSample, p: &EnvelopeParams, g: &SettingGrids) -> SensorSetting {
    let c = continuous_baseline(m, l, p, g);
    let snapped = SensorSetting::new(g.nearest_exp_idx(c.exposure_s), g.nearest_iso_idx(c.iso));
    clamp_to_envelope(snapped, safety_envelope(m, l, p, g))
}

pub fn safety_envelope(m: MotionSample, l: LightSample, p: &EnvelopeParams, g: &SettingGrids) -> SafetyEnvelope {
    let _ = m; // the envelope depends on illuminance only; motion shapes the baseline
    let floor = t_safe_lux(l, p);
    let cap = iso_cap(l, p);
    let sat = saturation_exposure_cap(l, p, g);
    let last_exp = g.exp_len() - 1;

    let min_exp_idx = g.exposure_steps.iter().position(|e| ge_tol(*e, floor)).unwrap_or(last_exp);
    let max_iso_idx = g.iso_steps.iter().rposition(|i| le_tol(*i, cap)).unwrap_or(0);
    let max_exp_idx = g.exposure_steps.iter().rposition(|e| le_tol(*e, sat)).unwrap_or(0).max(min_exp_idx);

    SafetyEnvelope { min_exp_idx, max_exp_idx, max_iso_idx }
}

/// Clamp each index into the envelope independently.
pub fn clamp_to_envelope(s: SensorSetting, env: SafetyEnvelope) -> SensorSetting {
    SensorSetting { exp_idx: s.exp_idx.clamp(env.min_exp_idx, env.max_exp_idx), iso_idx: s.iso_idx.min(env.max_iso_idx) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn t_safe_motion_examples() {
        let p = EnvelopeParams::default();
        assert_eq!(t_safe_motion(MotionSample::ZERO, &p), f64::INFINITY);
        assert!(close(t_safe_motion(MotionSample::new(2.0, 1.0), &p), 1.0 / 60.0));
        assert!(close(t_safe_motion(MotionSample::new(1.0, 4.0), &p), 1.0 / 120.0));
        // one zero component leaves the other in charge
        assert!(close(t_safe_motion(MotionSample::new(0.0, 1.0), &p), 4.0 / 120.0));
    }

    #[test]
    fn t_safe_lux_bands() {
        let p = EnvelopeParams::default();
        assert!(close(t_safe_lux(LightSample::new(10.0), &p), 1.0 / 30.0));
        assert!(close(t_safe_lux(LightSample::new(150.0), &p), 1.0 / 1000.0));
        let below = t_safe_lux(LightSample::new(24.9), &p);
        let at = t_safe_lux(LightSample::new(25.0), &p);
        assert!(close(below, 1.0 / 30.0));
        assert!(close(at, 1.0 / 60.0));
    }

    #[test]
    fn iso_default_examples() {
        let p = EnvelopeParams::default();
        let g = SettingGrids::default();
        assert!(close(iso_default(LightSample::new(150.0), &p, &g), 100.0));
        let dim = iso_default(LightSample::new(15.0), &p, &g);
        assert!(close(dim, 1000.0));
        assert_eq!(g.iso(g.nearest_iso_idx(dim)), 800.0);
        assert_eq!(iso_default(LightSample::new(1e9), &p, &g), 50.0);
        assert_eq!(iso_default(LightSample::new(0.0), &p, &g), 3200.0);
    }

    #[test]
    fn nearest_index_ties_go_low() {
        let g = SettingGrids::default();
        // 300 is equidistant from 200 and 400
        assert_eq!(g.nearest_iso_idx(300.0), 2);
        assert_eq!(g.nearest_iso_idx(301.0), 3);
        assert_eq!(g.nearest_exp_idx(0.045), 5);
        assert_eq!(g.nearest_exp_idx(f64::INFINITY), 6);
        assert_eq!(g.nearest_exp_idx(0.0), 0);
    }

    #[test]
    fn baseline_bright_with_motion() {
        let p = EnvelopeParams::default();
        let g = SettingGrids::default();
        // t_safe_motion = 4/(120·m) = 1/250  =>  m = 250/30
        let m = MotionSample::new(250.0 / 30.0, 0.0);
        let l = LightSample::new(150.0);
        assert!(close(t_safe_motion(m, &p), 1.0 / 250.0));
        let c = continuous_baseline(m, l, &p, &g);
        assert!(close(c.exposure_s, 1.0 / 250.0));
        assert!((c.iso_precap - 100.0 * 250.0 / 60.0).abs() < 1e-9);
        assert_eq!(c.iso, 200.0);
        let s = baseline_setting(m, l, &p, &g);
        assert_eq!(g.exposure(s.exp_idx), 1.0 / 250.0);
        assert_eq!(g.iso(s.iso_idx), 200.0);
    }

    #[test]
    fn baseline_dark_floor_dominates() {
        let p = EnvelopeParams::default();
        let g = SettingGrids::default();
        let m = MotionSample::new(500.0 / 30.0, 0.0);
        let l = LightSample::new(10.0);
        assert!(close(t_safe_motion(m, &p), 1.0 / 500.0));
        let c = continuous_baseline(m, l, &p, &g);
        assert!(close(c.exposure_s, 1.0 / 30.0));
        assert_eq!(baseline_setting(m, l, &p, &g).exp_idx, 5);
    }

    #[test]
    fn baseline_static_bright_respects_saturation_cap() {
        let p = EnvelopeParams::default();
        let g = SettingGrids::default();
        let l = LightSample::new(150.0);
        let s = baseline_setting(MotionSample::ZERO, l, &p, &g);
        assert!(s.exp_idx < g.exp_len() - 1, "capped below the grid maximum");
        let b = l.lux * g.exposure(s.exp_idx) * g.iso(s.iso_idx) / 100.0 * p.k_cam;
        assert!(b <= p.b_sat);
    }

    #[test]
    fn envelope_examples() {
        let p = EnvelopeParams::default();
        let g = SettingGrids::default();
        let dark = safety_envelope(MotionSample::ZERO, LightSample::new(10.0), &p, &g);
        assert_eq!(g.exposure(dark.min_exp_idx), 1.0 / 30.0);
        assert_eq!(g.iso(dark.max_iso_idx), 3200.0);
        assert_eq!(dark.max_exp_idx, 6);
        let bright = safety_envelope(MotionSample::ZERO, LightSample::new(150.0), &p, &g);
        assert_eq!(g.exposure(bright.min_exp_idx), 1.0 / 1000.0);
        assert_eq!(g.iso(bright.max_iso_idx), 200.0);
    }

    #[test]
    fn degenerate_envelope_collapses_to_floor() {
        let p = EnvelopeParams { b_sat: 0.01, ..EnvelopeParams::default() };
        let g = SettingGrids::default();
        let env = safety_envelope(MotionSample::ZERO, LightSample::new(20.0), &p, &g);
        assert_eq!(env.min_exp_idx, 5);
        assert_eq!(env.max_exp_idx, env.min_exp_idx);
    }

    #[test]
    fn clamp_cases() {
        let env = SafetyEnvelope { min_exp_idx: 2, max_exp_idx: 4, max_iso_idx: 3 };
        assert_eq!(clamp_to_envelope(SensorSetting::new(3, 1), env), SensorSetting::new(3, 1));
        assert_eq!(clamp_to_envelope(SensorSetting::new(0, 1), env), SensorSetting::new(2, 1));
        assert_eq!(clamp_to_envelope(SensorSetting::new(3, 6), env), SensorSetting::new(3, 3));
        assert_eq!(clamp_to_envelope(SensorSetting::new(6, 6), env), SensorSetting::new(4, 3));
    }

    #[test]
    fn default_params_validate() {
        EnvelopeParams::default().validate().unwrap();
        SettingGrids::default().validate().unwrap();
        let p = EnvelopeParams { exp_def: 1.0 / 50.0, ..EnvelopeParams::default() };
        assert!(p.validate().is_err());
        let g = SettingGrids { exposure_steps: vec![0.1, 0.05], iso_steps: vec![100.0, 200.0] };
        assert!(g.validate().is_err());
    }
}
