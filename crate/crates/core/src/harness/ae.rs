//! Brightness-feedback auto exposure, the passive baseline.

use crate::envelope::{SensorSetting, SettingGrids};

use super::config::AeParams;

/// One controller step from the previous frame's mean brightness.
///
/// Outside the deadband the exposure index moves one step toward the
/// target; once exposure sits at a grid bound the ISO index moves instead.
/// A step is only taken when the predicted brightness (linear in
/// exposure × gain) lands closer to the target, so the controller cannot
/// oscillate between two neighbouring settings. Motion is ignored.
pub fn auto_exposure_step(prev: SensorSetting, mean: f64, g: &SettingGrids, p: &AeParams) -> SensorSetting {
    let err = mean - p.target;
    if err.abs() <= p.deadband {
        return prev;
    }
    let up = err < 0.0;
    let shift = |idx: usize, len: usize| -> Option<usize> {
        if up {
            (idx + 1 < len).then_some(idx + 1)
        } else {
            idx.checked_sub(1)
        }
    };
    let next = match shift(prev.exp_idx, g.exp_len()) {
        Some(e) => SensorSetting { exp_idx: e, ..prev },
        None => match shift(prev.iso_idx, g.iso_len()) {
            Some(i) => SensorSetting { iso_idx: i, ..prev },
            None => return prev,
        },
    };
    if mean <= 0.0 {
        // nothing to extrapolate from a black frame
        return next;
    }
    let gain = |s: SensorSetting| g.exposure(s.exp_idx) * g.iso(s.iso_idx);
    let predicted = mean * gain(next) / gain(prev);
    if (predicted - p.target).abs() < err.abs() {
        next
    } else {
        prev
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(s: SensorSetting, mean: f64) -> SensorSetting {
        auto_exposure_step(s, mean, &SettingGrids::default(), &AeParams::default())
    }

    #[test]
    fn deadband_holds() {
        let s = SensorSetting::new(3, 1);
        assert_eq!(step(s, 0.5), s);
        assert_eq!(step(s, 0.59), s);
        assert_eq!(step(s, 0.41), s);
    }

    #[test]
    fn dark_frame_lengthens_exposure_first() {
        assert_eq!(step(SensorSetting::new(3, 1), 0.1), SensorSetting::new(4, 1));
    }

    #[test]
    fn gain_moves_once_exposure_is_exhausted() {
        assert_eq!(step(SensorSetting::new(6, 2), 0.1), SensorSetting::new(6, 3));
        assert_eq!(step(SensorSetting::new(0, 3), 0.95), SensorSetting::new(0, 2));
        assert_eq!(step(SensorSetting::new(6, 6), 0.1), SensorSetting::new(6, 6));
        assert_eq!(step(SensorSetting::new(0, 0), 1.0), SensorSetting::new(0, 0));
    }

    #[test]
    fn bright_frame_shortens_exposure() {
        assert_eq!(step(SensorSetting::new(6, 3), 1.0), SensorSetting::new(5, 3));
    }

    #[test]
    fn black_frame_always_steps() {
        assert_eq!(step(SensorSetting::new(2, 0), 0.0), SensorSetting::new(3, 0));
    }

    #[test]
    fn overshooting_step_is_skipped() {
        // 0.38 → 0.76 would land further from 0.5 than it started
        assert_eq!(step(SensorSetting::new(5, 2), 0.38 / 1.0), SensorSetting::new(5, 2));
        assert_eq!(step(SensorSetting::new(5, 2), 0.30), SensorSetting::new(6, 2));
    }
}
