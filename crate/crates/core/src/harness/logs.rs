//! Per-frame and per-lap records, their CSV forms, and run metrics.
//!
//! Every float is written with six decimals. Values that feed routing are
//! rounded to the same grid before use, so a lap log carries exactly the
//! numbers the live run decided on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::calibrator::{CalibAction, SensingContext};
use crate::envelope::SensorSetting;
use crate::error::{AtiError, Result};
use crate::router::{route_recorded, RecordedLap, RecordedRemote, RoutedLap, RoutingDecision, RoutingThresholds};

use super::config::InferenceMode;

/// Round to the six-decimal grid used in the logs.
pub fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt6(x: Option<f64>) -> String {
    x.map(f6).unwrap_or_default()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub timestamp_ms: u64,
    pub lap: u64,
    pub lux: f64,
    pub acc_mag: f64,
    pub gyro_mag: f64,
    pub setting: SensorSetting,
    pub exp_s: f64,
    pub iso: f64,
    pub mean_brightness: f64,
    pub lapvar: f64,
    pub saturation_ratio: f64,
    pub l3_conf: f64,
    pub l3_label: u32,
    pub truth_label: u32,
    pub visible: bool,
}

pub const FRAME_HEADER: [&str; 16] = [
    "timestamp_ms",
    "lap",
    "lux",
    "acc_mag",
    "gyro_mag",
    "exp_idx",
    "exp_s",
    "iso",
    "mean_brightness",
    "lapvar",
    "saturation_ratio",
    "l3_conf",
    "l3_label",
    "truth_label",
    "visible",
    "mode",
];

pub fn frame_csv(frames: &[FrameRecord], mode: &str) -> String {
    let mut out = FRAME_HEADER.join(",");
    out.push('\n');
    for f in frames {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f.timestamp_ms,
            f.lap,
            f6(f.lux),
            f6(f.acc_mag),
            f6(f.gyro_mag),
            f.setting.exp_idx,
            f6(f.exp_s),
            f6(f.iso),
            f6(f.mean_brightness),
            f6(f.lapvar),
            f6(f.saturation_ratio),
            f6(f.l3_conf),
            f.l3_label,
            f.truth_label,
            flag(f.visible),
            mode,
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LapRecord {
    pub recorded: RecordedLap,
    pub context: SensingContext,
    /// `None` for modes without calibration.
    pub action: Option<CalibAction>,
    /// Setting of the peak-confidence frame.
    pub setting: SensorSetting,
    /// Present only while learning.
    pub reward: Option<f64>,
    pub epsilon: Option<f64>,
    pub q_after: Option<f64>,
    pub routed: RoutedLap,
}

impl LapRecord {
    pub fn correct(&self) -> bool {
        self.routed.correct(self.recorded.truth_label)
    }
}

pub const LAP_HEADER: [&str; 27] = [
    "lap",
    "motion_bin",
    "light_bin",
    "d_iso",
    "d_exp",
    "reward",
    "epsilon",
    "q_after",
    "peak_conf",
    "peak_sharpness",
    "decision",
    "reason",
    "l4_called",
    "l4_conf",
    "correct",
    "truth_label",
    "l3_label",
    "l4_label",
    "l4_arrival_ms",
    "lap_start_ms",
    "lap_end_ms",
    "horizon_ms",
    "decided_at_ms",
    "final_label",
    "final_conf",
    "exp_idx",
    "iso_idx",
];

pub fn lap_csv(laps: &[LapRecord]) -> String {
    let mut out = LAP_HEADER.join(",");
    out.push('\n');
    for l in laps {
        let r = &l.recorded;
        let (d_iso, d_exp) = l.action.map_or((String::new(), String::new()), |a| (a.d_iso.to_string(), a.d_exp.to_string()));
        let remote = r.remote;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.lap,
            l.context.motion_bin,
            l.context.light_bin,
            d_iso,
            d_exp,
            opt6(l.reward),
            opt6(l.epsilon),
            opt6(l.q_after),
            f6(r.peak_conf),
            f6(r.peak_sharpness),
            l.routed.decision.verdict().as_str(),
            l.routed.decision.reason().as_str(),
            flag(l.routed.escalated),
            opt6(remote.map(|x| x.confidence)),
            flag(l.correct()),
            r.truth_label,
            r.local_label,
            remote.map(|x| x.label.to_string()).unwrap_or_default(),
            remote.map(|x| x.arrival_ms.to_string()).unwrap_or_default(),
            r.lap_start_ms,
            r.lap_end_ms,
            r.horizon_ms,
            l.routed.decided_at_ms,
            l.routed.label,
            f6(l.routed.confidence),
            l.setting.exp_idx,
            l.setting.iso_idx,
        );
    }
    out
}

/// Route a recorded lap under the given inference path.
pub fn route_for_mode(lap: &RecordedLap, th: &RoutingThresholds, mode: InferenceMode) -> RoutedLap {
    let local = RoutedLap {
        decision: RoutingDecision::LOCAL_ONLY,
        escalated: false,
        label: lap.local_label,
        confidence: lap.peak_conf,
        decided_at_ms: lap.lap_end_ms,
    };
    match mode {
        InferenceMode::L3Only => local,
        InferenceMode::L3L4Split => route_recorded(lap, th),
        InferenceMode::L4Only => match lap.remote {
            Some(r) if r.arrival_ms <= lap.horizon_ms => RoutedLap {
                decision: RoutingDecision::REMOTE_ONLY,
                escalated: true,
                label: r.label,
                confidence: r.confidence,
                decided_at_ms: r.arrival_ms,
            },
            _ => RoutedLap { decision: RoutingDecision::STALE, escalated: true, decided_at_ms: lap.horizon_ms, ..local },
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub laps: u64,
    pub correct: u64,
    pub local_correct: u64,
    pub escalated: u64,
}

impl ClassStats {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.laps)
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub laps: u64,
    /// Accuracy of the final answer.
    pub total_accuracy: f64,
    /// Accuracy of the local peak answer alone.
    pub l3_accuracy: f64,
    pub l4_call_rate: f64,
    pub mean_confidence: f64,
    /// Mean time from lap start to the accepted answer.
    pub ttfd_ms: f64,
    pub per_class: BTreeMap<u32, ClassStats>,
}

impl RunMetrics {
    pub fn from_routed<'a>(laps: impl IntoIterator<Item = (&'a RecordedLap, &'a RoutedLap)>) -> Self {
        let mut m = RunMetrics::default();
        let (mut correct, mut local_correct, mut escalated) = (0u64, 0u64, 0u64);
        let (mut conf_sum, mut ttfd_sum) = (0.0, 0.0);
        for (rec, routed) in laps {
            let ok = routed.correct(rec.truth_label);
            let local_ok = rec.local_label == rec.truth_label;
            m.laps += 1;
            correct += ok as u64;
            local_correct += local_ok as u64;
            escalated += routed.escalated as u64;
            conf_sum += routed.confidence;
            ttfd_sum += routed.decided_at_ms.saturating_sub(rec.lap_start_ms) as f64;
            let c = m.per_class.entry(rec.truth_label).or_default();
            c.laps += 1;
            c.correct += ok as u64;
            c.local_correct += local_ok as u64;
            c.escalated += routed.escalated as u64;
        }
        let n = m.laps.max(1) as f64;
        m.total_accuracy = ratio(correct, m.laps);
        m.l3_accuracy = ratio(local_correct, m.laps);
        m.l4_call_rate = ratio(escalated, m.laps);
        m.mean_confidence = if m.laps == 0 { 0.0 } else { conf_sum / n };
        m.ttfd_ms = if m.laps == 0 { 0.0 } else { ttfd_sum / n };
        m
    }

    pub fn from_laps(laps: &[LapRecord]) -> Self {
        Self::from_routed(laps.iter().map(|l| (&l.recorded, &l.routed)))
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "laps={} accuracy={:.4} l3_accuracy={:.4} l4_call_rate={:.4} mean_conf={:.4} ttfd_ms={:.1}",
            self.laps, self.total_accuracy, self.l3_accuracy, self.l4_call_rate, self.mean_confidence, self.ttfd_ms
        )
    }

    /// `class,laps,accuracy,l3_accuracy,l4_call_rate` rows.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,laps,accuracy,l3_accuracy,l4_call_rate\n");
        for (label, c) in &self.per_class {
            let _ = writeln!(
                out,
                "{label},{},{},{},{}",
                c.laps,
                f6(c.accuracy()),
                f6(ratio(c.local_correct, c.laps)),
                f6(ratio(c.escalated, c.laps))
            );
        }
        out
    }
}

/// Read the routing inputs back out of a lap log. Columns are located by
/// header name; errors carry the 1-based line number.
pub fn read_lap_log<R: Read>(input: R) -> Result<Vec<RecordedLap>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers().map_err(|e| AtiError::parse(1, e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| AtiError::parse(1, format!("missing column `{name}`")))
    };
    let idx = LogColumns {
        lap: col("lap")?,
        truth: col("truth_label")?,
        local: col("l3_label")?,
        peak_conf: col("peak_conf")?,
        peak_sharp: col("peak_sharpness")?,
        start: col("lap_start_ms")?,
        end: col("lap_end_ms")?,
        horizon: col("horizon_ms")?,
        l4_conf: col("l4_conf")?,
        l4_label: col("l4_label")?,
        l4_arrival: col("l4_arrival_ms")?,
    };
    let mut laps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| AtiError::parse(line, e.to_string()))?;
        laps.push(idx.parse(&rec, line)?);
    }
    Ok(laps)
}

struct LogColumns {
    lap: usize,
    truth: usize,
    local: usize,
    peak_conf: usize,
    peak_sharp: usize,
    start: usize,
    end: usize,
    horizon: usize,
    l4_conf: usize,
    l4_label: usize,
    l4_arrival: usize,
}

impl LogColumns {
    fn field(rec: &csv::StringRecord, i: usize, line: u64) -> Result<&str> {
        rec.get(i).map(str::trim).ok_or_else(|| AtiError::parse(line, format!("row has no column {}", i + 1)))
    }

    fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64, name: &str) -> Result<T> {
        let raw = Self::field(rec, i, line)?;
        raw.parse().map_err(|_| AtiError::parse(line, format!("`{name}` has invalid value `{raw}`")))
    }

    fn parse(&self, rec: &csv::StringRecord, line: u64) -> Result<RecordedLap> {
        let peak_conf: f64 = Self::num(rec, self.peak_conf, line, "peak_conf")?;
        let peak_sharpness: f64 = Self::num(rec, self.peak_sharp, line, "peak_sharpness")?;
        if !(0.0..=1.0).contains(&peak_conf) {
            return Err(AtiError::parse(line, "`peak_conf` outside [0, 1]"));
        }
        if !(peak_sharpness >= 0.0 && peak_sharpness.is_finite()) {
            return Err(AtiError::parse(line, "`peak_sharpness` must be finite and non-negative"));
        }
        let remote_fields = [self.l4_conf, self.l4_label, self.l4_arrival].map(|i| Self::field(rec, i, line).map(str::is_empty));
        let empties = remote_fields.into_iter().collect::<Result<Vec<_>>>()?;
        let remote = if empties.iter().all(|e| *e) {
            None
        } else if empties.iter().any(|e| *e) {
            return Err(AtiError::parse(line, "remote columns must be all present or all empty"));
        } else {
            Some(RecordedRemote {
                confidence: Self::num(rec, self.l4_conf, line, "l4_conf")?,
                label: Self::num(rec, self.l4_label, line, "l4_label")?,
                arrival_ms: Self::num(rec, self.l4_arrival, line, "l4_arrival_ms")?,
            })
        };
        Ok(RecordedLap {
            lap: Self::num(rec, self.lap, line, "lap")?,
            truth_label: Self::num(rec, self.truth, line, "truth_label")?,
            local_label: Self::num(rec, self.local, line, "l3_label")?,
            peak_conf,
            peak_sharpness,
            lap_start_ms: Self::num(rec, self.start, line, "lap_start_ms")?,
            lap_end_ms: Self::num(rec, self.end, line, "lap_end_ms")?,
            horizon_ms: Self::num(rec, self.horizon, line, "horizon_ms")?,
            remote,
        })
    }
}

/// Re-route recorded laps under new thresholds.
pub fn replay(laps: &[RecordedLap], th: &RoutingThresholds, mode: InferenceMode) -> RunMetrics {
    if laps.is_empty() {
        log::warn!("replaying an empty lap log; all metrics are zero");
    }
    let routed: Vec<RoutedLap> = laps.iter().map(|l| route_for_mode(l, th, mode)).collect();
    RunMetrics::from_routed(laps.iter().zip(routed.iter()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recorded(lap: u64, conf: f64, remote: Option<(f64, u32, u64)>) -> RecordedLap {
        RecordedLap {
            lap,
            truth_label: 5,
            local_label: 5,
            peak_conf: conf,
            peak_sharpness: 120.5,
            lap_start_ms: lap * 3000,
            lap_end_ms: lap * 3000 + 3000,
            horizon_ms: lap * 3000 + 6000,
            remote: remote.map(|(confidence, label, arrival_ms)| RecordedRemote { confidence, label, arrival_ms }),
        }
    }

    #[test]
    fn quantize_round_trips_through_text() {
        for x in [0.1234567, 1.0 / 3.0, 2.0, 0.0, 1234.5678915] {
            let q = quantize(x);
            assert_eq!(f6(q).parse::<f64>().unwrap(), q);
        }
    }

    #[test]
    fn lap_log_round_trip() {
        let laps: Vec<LapRecord> = [recorded(0, 0.8, None), recorded(1, 0.3, Some((0.55, 9, 5300)))]
            .into_iter()
            .map(|r| LapRecord {
                routed: route_recorded(&r, &RoutingThresholds::default()),
                recorded: r,
                context: SensingContext::new(1, 0).unwrap(),
                action: None,
                setting: SensorSetting::new(5, 4),
                reward: None,
                epsilon: None,
                q_after: None,
            })
            .collect();
        let text = lap_csv(&laps);
        let back = read_lap_log(text.as_bytes()).unwrap();
        let original: Vec<_> = laps.iter().map(|l| l.recorded.clone()).collect();
        assert_eq!(back, original);
        let m = replay(&back, &RoutingThresholds::default(), InferenceMode::L3L4Split);
        assert_eq!(m, RunMetrics::from_laps(&laps));
        assert_eq!(m.l4_call_rate, 0.5);
        assert_eq!(m.total_accuracy, 0.5);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let laps = vec![LapRecord {
            routed: route_recorded(&recorded(0, 0.8, None), &RoutingThresholds::default()),
            recorded: recorded(0, 0.8, None),
            context: SensingContext::new(0, 0).unwrap(),
            action: Some(CalibAction::HOLD),
            setting: SensorSetting::new(0, 0),
            reward: Some(0.5),
            epsilon: Some(0.3),
            q_after: Some(0.5),
        }];
        let good = lap_csv(&laps);
        let mut lines: Vec<String> = good.lines().map(String::from).collect();
        lines.push(lines[1].replacen("0.800000", "abc", 1));
        let bad = lines.join("\n");
        match read_lap_log(bad.as_bytes()) {
            Err(AtiError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("peak_conf"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        match read_lap_log("lap,truth_label\n1,2\n".as_bytes()) {
            Err(AtiError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_log_gives_zero_metrics() {
        let m = replay(&[], &RoutingThresholds::default(), InferenceMode::L3L4Split);
        assert_eq!(m.laps, 0);
        assert_eq!(m.total_accuracy, 0.0);
        assert!(m.per_class.is_empty());
    }

    #[test]
    fn inference_paths() {
        let th = RoutingThresholds::default();
        let lap = recorded(2, 0.9, Some((1.0, 7, 8300)));
        let l3 = route_for_mode(&lap, &th, InferenceMode::L3Only);
        assert_eq!((l3.escalated, l3.label, l3.decision), (false, 5, RoutingDecision::LOCAL_ONLY));
        let l4 = route_for_mode(&lap, &th, InferenceMode::L4Only);
        assert_eq!((l4.escalated, l4.label, l4.decided_at_ms), (true, 7, 8300));
        let late = recorded(2, 0.9, Some((1.0, 7, 12_001)));
        let l4 = route_for_mode(&late, &th, InferenceMode::L4Only);
        assert_eq!((l4.label, l4.decision), (5, RoutingDecision::STALE));
    }

    #[test]
    fn per_class_weights_sum_to_total() {
        let th = RoutingThresholds::default();
        let mut laps = vec![recorded(0, 0.9, None), recorded(1, 0.9, None), recorded(2, 0.2, None)];
        laps[1].truth_label = 6;
        laps[2].local_label = 1;
        let m = replay(&laps, &th, InferenceMode::L3Only);
        let weighted: f64 = m.per_class.values().map(|c| c.accuracy() * c.laps as f64).sum::<f64>() / m.laps as f64;
        assert!((weighted - m.total_accuracy).abs() < 1e-12);
        assert_eq!(m.per_class.len(), 2);
    }
}
