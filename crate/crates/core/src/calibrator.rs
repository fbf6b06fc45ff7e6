//! Contextual bandit calibration around the reflexive baseline.
//!
//! The context is a 5×5 (motion, light) bin pair; an action nudges the
//! exposure and ISO indices by at most one step each. Value estimates are
//! incremental means updated once per lap with
//! `r = α · peak_conf + (1 − α) · min(1, lapvar / v_ref)`.
//! Contexts whose greedy action has settled are frozen into a lookup table
//! that is consulted before any exploration.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envelope::{clamp_to_envelope, LightSample, MotionSample, SafetyEnvelope, SensorSetting, SettingGrids};
use crate::error::{AtiError, ConfigError, Result};
use crate::router::LapSummary;

pub use crate::sensecam::QualityVector;

pub const MOTION_BINS: usize = 5;
pub const LIGHT_BINS: usize = 5;
pub const NUM_CONTEXTS: usize = MOTION_BINS * LIGHT_BINS;
pub const NUM_ACTIONS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SensingContext {
    pub motion_bin: u8,
    pub light_bin: u8,
}

impl SensingContext {
    pub fn new(motion_bin: u8, light_bin: u8) -> Option<Self> {
        ((motion_bin as usize) < MOTION_BINS && (light_bin as usize) < LIGHT_BINS).then_some(Self { motion_bin, light_bin })
    }

    pub fn index(&self) -> usize {
        self.motion_bin as usize * LIGHT_BINS + self.light_bin as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self { motion_bin: (i / LIGHT_BINS) as u8, light_bin: (i % LIGHT_BINS) as u8 }
    }

    pub fn all() -> impl Iterator<Item = SensingContext> {
        (0..NUM_CONTEXTS).map(Self::from_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CalibAction {
    pub d_iso: i8,
    pub d_exp: i8,
}

impl CalibAction {
    pub const HOLD: CalibAction = CalibAction { d_iso: 0, d_exp: 0 };

    pub fn new(d_iso: i8, d_exp: i8) -> Option<Self> {
        ((-1..=1).contains(&d_iso) && (-1..=1).contains(&d_exp)).then_some(Self { d_iso, d_exp })
    }

    /// Enumeration order: `d_iso` major, `d_exp` minor, both ascending.
    pub fn index(&self) -> usize {
        (self.d_iso + 1) as usize * 3 + (self.d_exp + 1) as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self { d_iso: (i / 3) as i8 - 1, d_exp: (i % 3) as i8 - 1 }
    }

    pub fn all() -> impl Iterator<Item = CalibAction> {
        (0..NUM_ACTIONS).map(Self::from_index)
    }

    fn magnitude(&self) -> u8 {
        self.d_iso.unsigned_abs() + self.d_exp.unsigned_abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBins {
    pub motion_edges: [f64; 4],
    pub light_edges: [f64; 4],
    /// Motion normalisation: magnitude = max(acc/acc_ref, gyro/gyro_ref).
    pub acc_ref: f64,
    pub gyro_ref: f64,
}

impl Default for ContextBins {
    fn default() -> Self {
        Self { motion_edges: [0.2, 0.4, 0.6, 0.8], light_edges: [15.0, 25.0, 60.0, 150.0], acc_ref: 2.0, gyro_ref: 2.0 }
    }
}

impl ContextBins {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let ascending = |e: &[f64; 4]| e.windows(2).all(|w| w[0] < w[1]);
        if !ascending(&self.motion_edges) {
            return Err(ConfigError::invalid("bins.motion_edges", "must be strictly ascending"));
        }
        if !ascending(&self.light_edges) {
            return Err(ConfigError::invalid("bins.light_edges", "must be strictly ascending"));
        }
        if !(self.acc_ref > 0.0 && self.gyro_ref > 0.0) {
            return Err(ConfigError::invalid("bins.acc_ref", "motion references must be positive"));
        }
        Ok(())
    }

    pub fn normalized_motion(&self, m: MotionSample) -> f64 {
        (m.acc_mag / self.acc_ref).max(m.gyro_mag / self.gyro_ref)
    }
}

fn bin_of(edges: &[f64; 4], value: f64) -> u8 {
    edges.iter().filter(|e| **e <= value).count() as u8
}

/// Bin motion and light; a value equal to an edge falls in the upper bin.
pub fn discretize_context(m: MotionSample, l: LightSample, bins: &ContextBins) -> SensingContext {
    SensingContext { motion_bin: bin_of(&bins.motion_edges, bins.normalized_motion(m)), light_bin: bin_of(&bins.light_edges, l.lux) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub alpha: f64,
    /// Laplacian variance (0–255 scale) that maps to full sharpness.
    pub v_ref: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { alpha: 0.9, v_ref: 100.0 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::invalid("reward.alpha", "must lie in [0, 1]"));
        }
        if !(self.v_ref > 0.0 && self.v_ref.is_finite()) {
            return Err(ConfigError::invalid("reward.v_ref", "must be positive"));
        }
        Ok(())
    }

    pub fn reward(&self, peak_conf: f64, peak_sharpness: f64) -> f64 {
        let sharp = (peak_sharpness / self.v_ref).clamp(0.0, 1.0);
        (self.alpha * peak_conf.clamp(0.0, 1.0) + (1.0 - self.alpha) * sharp).clamp(0.0, 1.0)
    }
}

/// Lap reward from the peak-confidence frame and its sharpness.
pub fn compute_reward(lap: &LapSummary, rp: &RewardParams) -> Result<f64> {
    match &lap.peak {
        Some(p) if lap.frames > 0 => Ok(rp.reward(p.prediction.confidence, p.sharpness)),
        _ => Err(AtiError::EmptyLap { lap: lap.lap_index }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditParams {
    pub eps0: f64,
    pub eps_tau: f64,
    /// Length of the per-context greedy-action history.
    pub history_len: usize,
}

impl Default for BanditParams {
    fn default() -> Self {
        Self { eps0: 0.3, eps_tau: 100.0, history_len: 16 }
    }
}

impl BanditParams {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.eps0) {
            return Err(ConfigError::invalid("bandit.eps0", "must lie in [0, 1]"));
        }
        if self.eps_tau.is_nan() || self.eps_tau <= 0.0 {
            return Err(ConfigError::invalid("bandit.eps_tau", "must be positive"));
        }
        if self.history_len == 0 {
            return Err(ConfigError::invalid("bandit.history_len", "must be positive"));
        }
        Ok(())
    }
}

/// Tabular 25×9 value estimates with visit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditTable {
    q: Vec<[f64; NUM_ACTIONS]>,
    counts: Vec<[u64; NUM_ACTIONS]>,
    history: Vec<VecDeque<CalibAction>>,
    params: BanditParams,
}

impl BanditTable {
    pub fn new(params: BanditParams) -> Self {
        Self {
            q: vec![[0.0; NUM_ACTIONS]; NUM_CONTEXTS],
            counts: vec![[0; NUM_ACTIONS]; NUM_CONTEXTS],
            history: vec![VecDeque::new(); NUM_CONTEXTS],
            params,
        }
    }

    pub fn params(&self) -> &BanditParams {
        &self.params
    }

    pub fn q(&self, c: SensingContext, a: CalibAction) -> f64 {
        self.q[c.index()][a.index()]
    }

    pub fn count(&self, c: SensingContext, a: CalibAction) -> u64 {
        self.counts[c.index()][a.index()]
    }

    pub fn total_visits(&self, c: SensingContext) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    pub fn history(&self, c: SensingContext) -> impl Iterator<Item = &CalibAction> {
        self.history[c.index()].iter()
    }

    /// Overwrite one cell; used when restoring checkpoints and in tests.
    pub fn set(&mut self, c: SensingContext, a: CalibAction, q: f64, count: u64) {
        self.q[c.index()][a.index()] = q;
        self.counts[c.index()][a.index()] = count;
    }

    pub fn epsilon(&self, c: SensingContext) -> f64 {
        self.params.eps0 / (1.0 + self.total_visits(c) as f64 / self.params.eps_tau)
    }

    /// Highest-valued action; ties go to the smaller move, then enumeration order.
    pub fn greedy(&self, c: SensingContext) -> CalibAction {
        let row = &self.q[c.index()];
        CalibAction::all()
            .reduce(|best, a| {
                let (qa, qb) = (row[a.index()], row[best.index()]);
                if qa > qb || (qa == qb && a.magnitude() < best.magnitude()) {
                    a
                } else {
                    best
                }
            })
            .expect("nine actions")
    }

    /// ε-greedy selection with `ε = eps0 / (1 + visits / eps_tau)`.
    pub fn select_action<R: Rng + ?Sized>(&self, c: SensingContext, rng: &mut R) -> CalibAction {
        self.select_with_epsilon(c, self.epsilon(c), rng)
    }

    pub fn select_with_epsilon<R: Rng + ?Sized>(&self, c: SensingContext, eps: f64, rng: &mut R) -> CalibAction {
        let explore: f64 = rng.random();
        let pick = rng.random_range(0..NUM_ACTIONS);
        if explore < eps {
            CalibAction::from_index(pick)
        } else {
            self.greedy(c)
        }
    }

    /// Incremental-mean update with reward `r` in [0, 1].
    pub fn update(&mut self, c: SensingContext, a: CalibAction, r: f64) {
        let (ci, ai) = (c.index(), a.index());
        self.counts[ci][ai] += 1;
        let n = self.counts[ci][ai] as f64;
        self.q[ci][ai] += (r - self.q[ci][ai]) / n;
        let g = self.greedy(c);
        let h = &mut self.history[ci];
        h.push_back(g);
        while h.len() > self.params.history_len {
            h.pop_front();
        }
    }

    /// Write `motion_bin,light_bin,d_iso,d_exp,q,count,history` rows for
    /// every cell. `history` lists, oldest first as 0, the positions in the
    /// context's greedy history that hold this action, separated by `;`.
    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["motion_bin", "light_bin", "d_iso", "d_exp", "q", "count", "history"]).map_err(csv_io)?;
        for c in SensingContext::all() {
            for a in CalibAction::all() {
                let slots: Vec<String> = self.history(c).enumerate().filter(|(_, h)| **h == a).map(|(i, _)| i.to_string()).collect();
                w.write_record([
                    c.motion_bin.to_string(),
                    c.light_bin.to_string(),
                    a.d_iso.to_string(),
                    a.d_exp.to_string(),
                    // Display is exact and never scientific
                    format!("{}", self.q(c, a)),
                    self.count(c, a).to_string(),
                    slots.join(";"),
                ])
                .map_err(csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`write_checkpoint`](Self::write_checkpoint). The
    /// `history` column may be omitted, leaving histories empty.
    pub fn read_checkpoint<R: Read>(input: R, params: BanditParams) -> Result<Self> {
        let mut table = BanditTable::new(params);
        let mut slots: Vec<Vec<(usize, CalibAction, u64)>> = vec![Vec::new(); NUM_CONTEXTS];
        let mut rdr = csv::Reader::from_reader(input);
        for (i, rec) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| AtiError::parse(line, e.to_string()))?;
            if rec.len() != 6 && rec.len() != 7 {
                return Err(AtiError::parse(line, format!("expected 6 or 7 fields, found {}", rec.len())));
            }
            let (c, a) = parse_context_action(&rec, line)?;
            let q: f64 = parse_field(&rec, 4, line)?;
            let count: u64 = parse_field(&rec, 5, line)?;
            table.set(c, a, q, count);
            for raw in rec.get(6).unwrap_or("").split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let pos = raw.parse().map_err(|_| AtiError::parse(line, format!("invalid history slot `{raw}`")))?;
                slots[c.index()].push((pos, a, line));
            }
        }
        for (ci, mut s) in slots.into_iter().enumerate() {
            s.sort_by_key(|(pos, _, _)| *pos);
            if let Some((pos, _, line)) = s.iter().enumerate().find(|(i, (pos, _, _))| pos != i).map(|(_, x)| *x) {
                return Err(AtiError::parse(line, format!("history slot {pos} is duplicated or leaves a gap")));
            }
            let keep = s.len().saturating_sub(table.params.history_len);
            table.history[ci] = s.into_iter().skip(keep).map(|(_, a, _)| a).collect();
        }
        Ok(table)
    }
}

fn csv_io(e: csv::Error) -> AtiError {
    AtiError::Io(std::io::Error::other(e))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| AtiError::parse(line, format!("field {} has invalid value `{raw}`", idx + 1)))
}

fn parse_context_action(rec: &csv::StringRecord, line: u64) -> Result<(SensingContext, CalibAction)> {
    let c = SensingContext::new(parse_field(rec, 0, line)?, parse_field(rec, 1, line)?)
        .ok_or_else(|| AtiError::parse(line, "context bin out of range"))?;
    let a = CalibAction::new(parse_field(rec, 2, line)?, parse_field(rec, 3, line)?)
        .ok_or_else(|| AtiError::parse(line, "action offset out of range"))?;
    Ok((c, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationRules {
    pub min_visits: u64,
    pub stability_window: usize,
}

impl Default for ConsolidationRules {
    fn default() -> Self {
        Self { min_visits: 10, stability_window: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub action: CalibAction,
    pub visits: u64,
    pub q: f64,
}

/// Frozen context → action lookup table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsolidatedPolicy {
    pub entries: BTreeMap<SensingContext, PolicyEntry>,
}

impl ConsolidatedPolicy {
    pub fn lookup(&self, c: SensingContext) -> Option<CalibAction> {
        self.entries.get(&c).map(|e| e.action)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Write `motion_bin,light_bin,d_iso,d_exp,visits,q` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["motion_bin", "light_bin", "d_iso", "d_exp", "visits", "q"]).map_err(csv_io)?;
        for (c, e) in &self.entries {
            w.write_record([
                c.motion_bin.to_string(),
                c.light_bin.to_string(),
                e.action.d_iso.to_string(),
                e.action.d_exp.to_string(),
                e.visits.to_string(),
                format!("{:.6}", e.q),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut rdr = csv::Reader::from_reader(input);
        for (i, rec) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| AtiError::parse(line, e.to_string()))?;
            if rec.len() != 6 {
                return Err(AtiError::parse(line, format!("expected 6 fields, found {}", rec.len())));
            }
            let (c, action) = parse_context_action(&rec, line)?;
            let visits = parse_field(&rec, 4, line)?;
            let q = parse_field(&rec, 5, line)?;
            if entries.insert(c, PolicyEntry { action, visits, q }).is_some() {
                return Err(AtiError::parse(line, "duplicate context"));
            }
        }
        Ok(Self { entries })
    }
}

/// Freeze every context that is visited often enough and whose greedy action
/// did not change over the last `stability_window` updates.
pub fn consolidate(t: &BanditTable, rules: &ConsolidationRules) -> ConsolidatedPolicy {
    let entries = SensingContext::all()
        .filter_map(|c| {
            let visits = t.total_visits(c);
            if visits < rules.min_visits || rules.stability_window == 0 {
                return None;
            }
            let hist: Vec<_> = t.history(c).copied().collect();
            if hist.len() < rules.stability_window {
                return None;
            }
            let window = &hist[hist.len() - rules.stability_window..];
            let action = t.greedy(c);
            window.iter().all(|a| *a == action).then(|| (c, PolicyEntry { action, visits, q: t.q(c, action) }))
        })
        .collect();
    ConsolidatedPolicy { entries }
}

/// Offset the baseline by the action, clip to the grids, then clamp into
/// the safety envelope.
pub fn apply_action(baseline: SensorSetting, a: CalibAction, env: SafetyEnvelope, g: &SettingGrids) -> SensorSetting {
    let shift = |idx: usize, d: i8, len: usize| (idx as i64 + d as i64).clamp(0, len as i64 - 1) as usize;
    let offset =
        SensorSetting { exp_idx: shift(baseline.exp_idx, a.d_exp, g.exp_len()), iso_idx: shift(baseline.iso_idx, a.d_iso, g.iso_len()) };
    clamp_to_envelope(offset, env)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMode {
    Learning,
    Inference,
}

/// How the calibrator arrived at its action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibChoice {
    /// ε-greedy draw from the bandit table.
    Bandit(CalibAction),
    /// Consolidated lookup-table hit.
    Lookup(CalibAction),
}

impl CalibChoice {
    pub fn action(&self) -> CalibAction {
        match self {
            CalibChoice::Bandit(a) | CalibChoice::Lookup(a) => *a,
        }
    }
}

/// Pick an action for `context` and apply it to `baseline`. Inference mode
/// consults the consolidated policy first and never explores.
#[allow(clippy::too_many_arguments)]
pub fn calibrate<R: Rng + ?Sized>(
    mode: CalibMode,
    baseline: SensorSetting,
    context: SensingContext,
    table: &BanditTable,
    policy: Option<&ConsolidatedPolicy>,
    env: SafetyEnvelope,
    grids: &SettingGrids,
    rng: &mut R,
) -> (SensorSetting, CalibChoice) {
    let choice = match mode {
        CalibMode::Inference => match policy.and_then(|p| p.lookup(context)) {
            Some(a) => CalibChoice::Lookup(a),
            None => CalibChoice::Bandit(table.greedy(context)),
        },
        CalibMode::Learning => CalibChoice::Bandit(table.select_action(context, rng)),
    };
    (apply_action(baseline, choice.action(), env, grids), choice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{safety_envelope, EnvelopeParams};
    use crate::percept::{Prediction, Source};
    use crate::rng::{stream_rng, Stream};
    use crate::router::LapPeak;
    use crate::sensecam::{Frame, GroundTruth};

    fn ctx(m: u8, l: u8) -> SensingContext {
        SensingContext::new(m, l).unwrap()
    }

    fn zero_eps() -> BanditParams {
        BanditParams { eps0: 0.0, ..BanditParams::default() }
    }

    #[test]
    fn context_and_action_spaces() {
        assert_eq!(SensingContext::all().count(), 25);
        assert_eq!(CalibAction::all().count(), 9);
        for (i, c) in SensingContext::all().enumerate() {
            assert_eq!(c.index(), i);
        }
        for (i, a) in CalibAction::all().enumerate() {
            assert_eq!(a.index(), i);
        }
        assert!(SensingContext::new(5, 0).is_none());
        assert!(CalibAction::new(2, 0).is_none());
    }

    #[test]
    fn light_and_motion_bins() {
        let bins = ContextBins::default();
        let c = discretize_context(MotionSample::ZERO, LightSample::new(10.0), &bins);
        assert_eq!((c.motion_bin, c.light_bin), (0, 0));
        assert_eq!(discretize_context(MotionSample::ZERO, LightSample::new(200.0), &bins).light_bin, 4);
        assert_eq!(discretize_context(MotionSample::ZERO, LightSample::new(25.0), &bins).light_bin, 2);
        // normalised motion 0.4 sits on an edge and goes up
        assert_eq!(discretize_context(MotionSample::new(0.8, 0.1), LightSample::new(50.0), &bins).motion_bin, 2);
        assert_eq!(discretize_context(MotionSample::new(0.1, 5.0), LightSample::new(50.0), &bins).motion_bin, 4);
    }

    #[test]
    fn fresh_table_holds() {
        let t = BanditTable::new(zero_eps());
        let mut rng = stream_rng(1, Stream::Bandit, 0);
        assert_eq!(t.select_action(ctx(2, 2), &mut rng), CalibAction::HOLD);
    }

    #[test]
    fn dominant_action_wins() {
        let mut t = BanditTable::new(zero_eps());
        let a = CalibAction::new(1, -1).unwrap();
        t.set(ctx(1, 1), a, 0.9, 3);
        let mut rng = stream_rng(1, Stream::Bandit, 0);
        assert_eq!(t.select_action(ctx(1, 1), &mut rng), a);
    }

    #[test]
    fn greedy_tie_break_prefers_small_moves_then_order() {
        let mut t = BanditTable::new(zero_eps());
        let c = ctx(0, 0);
        t.set(c, CalibAction::new(1, 1).unwrap(), 0.5, 1);
        t.set(c, CalibAction::new(0, 1).unwrap(), 0.5, 1);
        t.set(c, CalibAction::new(-1, 0).unwrap(), 0.5, 1);
        // (-1,0) and (0,1) both move one step; (-1,0) comes first
        assert_eq!(t.greedy(c), CalibAction::new(-1, 0).unwrap());
    }

    #[test]
    fn epsilon_schedule() {
        let mut t = BanditTable::new(BanditParams { eps0: 1.0, eps_tau: 20.0, history_len: 16 });
        let c = ctx(3, 3);
        assert_eq!(t.epsilon(c), 1.0);
        t.set(c, CalibAction::HOLD, 0.0, 20);
        assert_eq!(t.epsilon(c), 0.5);
    }

    #[test]
    fn running_mean_updates() {
        let mut t = BanditTable::new(BanditParams::default());
        let c = ctx(0, 0);
        let a = CalibAction::new(0, -1).unwrap();
        t.update(c, a, 0.6);
        assert_eq!((t.q(c, a), t.count(c, a)), (0.6, 1));
        let mut t = BanditTable::new(BanditParams::default());
        t.set(c, a, 0.5, 1);
        t.update(c, a, 1.0);
        assert_eq!(t.q(c, a), 0.75);
        assert_eq!(t.total_visits(c), 2);
    }

    #[test]
    fn history_is_capped() {
        let mut t = BanditTable::new(BanditParams { history_len: 4, ..BanditParams::default() });
        for _ in 0..10 {
            t.update(ctx(0, 0), CalibAction::HOLD, 0.5);
        }
        assert_eq!(t.history(ctx(0, 0)).count(), 4);
    }

    fn lap(conf: f64, sharp: f64) -> LapSummary {
        let frame = Frame {
            width: 16,
            height: 16,
            pixels: vec![0.5; 256],
            timestamp_ms: 0,
            setting: SensorSetting::new(0, 0),
            exposure_s: 0.01,
            iso: 100.0,
            truth: GroundTruth { object_id: 1, visible: true, difficulty: 0.0 },
        };
        LapSummary {
            lap_index: 0,
            lap_end_time: 3000,
            frames: 1,
            peak: Some(LapPeak {
                prediction: Prediction { label: 1, confidence: conf, source: Source::Local, frame_timestamp: 0 },
                sharpness: sharp,
                frame,
            }),
        }
    }

    #[test]
    fn reward_examples() {
        let rp = RewardParams::default();
        assert!((compute_reward(&lap(0.8, 50.0), &rp).unwrap() - 0.77).abs() < 1e-12);
        assert_eq!(compute_reward(&lap(1.0, 400.0), &rp).unwrap(), 1.0);
        assert_eq!(compute_reward(&lap(0.0, 0.0), &rp).unwrap(), 0.0);
        assert!(matches!(compute_reward(&LapSummary::new(4, 0), &rp), Err(AtiError::EmptyLap { lap: 4 })));
    }

    #[test]
    fn consolidation_rules() {
        let mut t = BanditTable::new(BanditParams::default());
        let stable = ctx(1, 0);
        let best = CalibAction::new(1, -1).unwrap();
        t.set(stable, best, 0.9, 40);
        t.set(stable, CalibAction::HOLD, 0.5, 9);
        for _ in 0..5 {
            t.update(stable, CalibAction::HOLD, 0.5);
        }
        let flipping = ctx(2, 0);
        t.set(flipping, CalibAction::HOLD, 0.5, 20);
        t.set(flipping, best, 0.45, 5);
        for r in [0.5, 0.5, 0.5, 0.5] {
            t.update(flipping, best, r);
        }
        // best's mean now exceeds HOLD: greedy flipped inside the window
        t.update(flipping, best, 1.0);

        let p = consolidate(&t, &ConsolidationRules::default());
        assert_eq!(p.lookup(stable), Some(best));
        assert_eq!(p.entries[&stable].visits, 54);
        assert!(p.lookup(flipping).is_none());
        assert!(p.lookup(ctx(0, 0)).is_none());
        for (c, e) in &p.entries {
            assert_eq!(e.action, t.greedy(*c));
        }
    }

    #[test]
    fn apply_action_clips_and_clamps() {
        let g = SettingGrids::default();
        let wide = SafetyEnvelope { min_exp_idx: 0, max_exp_idx: 6, max_iso_idx: 6 };
        let base = SensorSetting::new(6, 0);
        assert_eq!(apply_action(base, CalibAction::HOLD, wide, &g), base);
        assert_eq!(apply_action(base, CalibAction::new(-1, 1).unwrap(), wide, &g), SensorSetting::new(6, 0));
        let env = safety_envelope(MotionSample::ZERO, LightSample::new(10.0), &EnvelopeParams::default(), &g);
        let out = apply_action(SensorSetting::new(5, 3), CalibAction::new(0, -1).unwrap(), env, &g);
        assert_eq!(out.exp_idx, env.min_exp_idx);
    }

    #[test]
    fn inference_lookup_is_deterministic_and_read_only() {
        let g = SettingGrids::default();
        let env = SafetyEnvelope { min_exp_idx: 0, max_exp_idx: 6, max_iso_idx: 6 };
        let t = BanditTable::new(BanditParams { eps0: 1.0, ..BanditParams::default() });
        let before = t.clone();
        let c = ctx(2, 0);
        let mut policy = ConsolidatedPolicy::default();
        let a = CalibAction::new(1, -1).unwrap();
        policy.entries.insert(c, PolicyEntry { action: a, visits: 30, q: 0.9 });
        for seed in 0..10 {
            let mut rng = stream_rng(seed, Stream::Bandit, 0);
            let (s, choice) = calibrate(CalibMode::Inference, SensorSetting::new(3, 3), c, &t, Some(&policy), env, &g, &mut rng);
            assert_eq!(choice, CalibChoice::Lookup(a));
            assert_eq!(s, SensorSetting::new(2, 4));
        }
        assert_eq!(t, before);
        // a miss falls back to the greedy action, never to exploration
        let mut rng = stream_rng(0, Stream::Bandit, 0);
        let (_, choice) = calibrate(CalibMode::Inference, SensorSetting::new(3, 3), ctx(0, 4), &t, Some(&policy), env, &g, &mut rng);
        assert_eq!(choice, CalibChoice::Bandit(CalibAction::HOLD));
    }

    #[test]
    fn policy_csv_round_trip() {
        let mut p = ConsolidatedPolicy::default();
        p.entries.insert(ctx(0, 0), PolicyEntry { action: CalibAction::new(1, -1).unwrap(), visits: 120, q: 0.812345 });
        p.entries.insert(ctx(4, 3), PolicyEntry { action: CalibAction::HOLD, visits: 11, q: 0.5 });
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("motion_bin,light_bin,d_iso,d_exp,visits,q\n0,0,1,-1,120,0.812345\n"));
        assert_eq!(ConsolidatedPolicy::read_csv(&buf[..]).unwrap(), p);
    }

    #[test]
    fn policy_csv_errors_carry_line_numbers() {
        let bad = "motion_bin,light_bin,d_iso,d_exp,visits,q\n0,0,0,0,3,0.5\n0,9,0,0,3,0.5\n";
        match ConsolidatedPolicy::read_csv(bad.as_bytes()) {
            Err(AtiError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut t = BanditTable::new(BanditParams::default());
        let mut rng = stream_rng(5, Stream::Bandit, 0);
        for _ in 0..300 {
            let c = SensingContext::from_index(rng.random_range(0..NUM_CONTEXTS));
            let a = CalibAction::from_index(rng.random_range(0..NUM_ACTIONS));
            t.update(c, a, rng.random());
        }
        let mut buf = Vec::new();
        t.write_checkpoint(&mut buf).unwrap();
        let back = BanditTable::read_checkpoint(&buf[..], BanditParams::default()).unwrap();
        assert_eq!(back, t);
        let rules = ConsolidationRules { min_visits: 5, stability_window: 3 };
        assert_eq!(consolidate(&back, &rules), consolidate(&t, &rules));

        let gap = "motion_bin,light_bin,d_iso,d_exp,q,count,history\n0,0,0,0,0.5,3,0;2\n";
        assert!(matches!(BanditTable::read_checkpoint(gap.as_bytes(), BanditParams::default()), Err(AtiError::Parse { line: 2, .. })));
        let legacy = "motion_bin,light_bin,d_iso,d_exp,q,count\n0,0,1,0,0.5,3\n";
        let t = BanditTable::read_checkpoint(legacy.as_bytes(), BanditParams::default()).unwrap();
        assert_eq!(t.count(SensingContext::from_index(0), CalibAction::new(1, 0).unwrap()), 3);
    }
}
