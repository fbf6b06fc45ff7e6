//! Coordination between local and remote inference.
//!
//! Two policies live here. The lap policy tracks the most confident local
//! frame of a lap and, at lap completion, either accepts it, filters it as
//! too blurred, or escalates it and keeps whichever answer is more
//! confident. The frame policy gates a single frame on uncertainty, signal
//! quality, deadline feasibility and expected benefit.
//!
//! All comparisons are strict; ties keep the local answer.

use serde::{Deserialize, Serialize};

use crate::error::{AtiError, ConfigError, Result};
use crate::percept::{is_stale, EscalationRequest, EscalationResponse, Prediction, Source};
use crate::sensecam::{Frame, QualityVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingThresholds {
    pub tau_conf: f64,
    /// Minimum raw Laplacian variance for a frame to be worth escalating.
    pub tau_valid: f64,
    pub tau_task: f64,
    pub qv_min_sharp: f64,
    pub qv_max_sat: f64,
}

impl Default for RoutingThresholds {
    fn default() -> Self {
        Self { tau_conf: 0.5, tau_valid: 20.0, tau_task: 0.5, qv_min_sharp: 5.0, qv_max_sat: 0.5 }
    }
}

impl RoutingThresholds {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        // tau_conf is swept over [0, 1] by the ablation driver
        if !(0.0..=1.0).contains(&self.tau_conf) {
            return Err(ConfigError::invalid("routing.tau_conf", "must lie in [0, 1]"));
        }
        if self.tau_valid.is_nan() || self.tau_valid < 0.0 {
            return Err(ConfigError::invalid("routing.tau_valid", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.tau_task) {
            return Err(ConfigError::invalid("routing.tau_task", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.qv_max_sat) {
            return Err(ConfigError::invalid("routing.qv_max_sat", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AcceptLocal,
    AcceptRemote,
    Resample,
    NoEscalation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    ConfidentLocal,
    BlurFiltered,
    RemoteBetter,
    RemoteWorseKeptLocal,
    DeadlineInfeasible,
    QvBlinded,
    NegativeBenefit,
    StaleDiscarded,
    /// Inference path without a remote tier.
    LocalOnly,
    /// Inference path that always defers to the remote tier.
    RemoteOnly,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::AcceptLocal => "accept_local",
            Verdict::AcceptRemote => "accept_remote",
            Verdict::Resample => "resample",
            Verdict::NoEscalation => "no_escalation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Verdict::AcceptLocal, Verdict::AcceptRemote, Verdict::Resample, Verdict::NoEscalation].into_iter().find(|v| v.as_str() == s)
    }
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::ConfidentLocal => "confident_local",
            Reason::BlurFiltered => "blur_filtered",
            Reason::RemoteBetter => "remote_better",
            Reason::RemoteWorseKeptLocal => "remote_worse_kept_local",
            Reason::DeadlineInfeasible => "deadline_infeasible",
            Reason::QvBlinded => "qv_blinded",
            Reason::NegativeBenefit => "negative_benefit",
            Reason::StaleDiscarded => "stale_discarded",
            Reason::LocalOnly => "local_only",
            Reason::RemoteOnly => "remote_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Reason::ConfidentLocal,
            Reason::BlurFiltered,
            Reason::RemoteBetter,
            Reason::RemoteWorseKeptLocal,
            Reason::DeadlineInfeasible,
            Reason::QvBlinded,
            Reason::NegativeBenefit,
            Reason::StaleDiscarded,
            Reason::LocalOnly,
            Reason::RemoteOnly,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

/// A verdict with its reason. Only the legal combinations can be built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutingDecision {
    verdict: Verdict,
    reason: Reason,
}

impl RoutingDecision {
    pub const CONFIDENT_LOCAL: Self = Self { verdict: Verdict::AcceptLocal, reason: Reason::ConfidentLocal };
    pub const BLUR_FILTERED: Self = Self { verdict: Verdict::AcceptLocal, reason: Reason::BlurFiltered };
    pub const REMOTE_BETTER: Self = Self { verdict: Verdict::AcceptRemote, reason: Reason::RemoteBetter };
    pub const REMOTE_WORSE: Self = Self { verdict: Verdict::AcceptLocal, reason: Reason::RemoteWorseKeptLocal };
    pub const STALE: Self = Self { verdict: Verdict::AcceptLocal, reason: Reason::StaleDiscarded };
    pub const LOCAL_SUFFICES: Self = Self { verdict: Verdict::NoEscalation, reason: Reason::ConfidentLocal };
    pub const QV_BLINDED: Self = Self { verdict: Verdict::Resample, reason: Reason::QvBlinded };
    pub const DEADLINE_INFEASIBLE: Self = Self { verdict: Verdict::NoEscalation, reason: Reason::DeadlineInfeasible };
    pub const NEGATIVE_BENEFIT: Self = Self { verdict: Verdict::NoEscalation, reason: Reason::NegativeBenefit };
    pub const LOCAL_ONLY: Self = Self { verdict: Verdict::AcceptLocal, reason: Reason::LocalOnly };
    pub const REMOTE_ONLY: Self = Self { verdict: Verdict::AcceptRemote, reason: Reason::RemoteOnly };
    /// Frame policy: all gates passed, escalate and await the remote answer.
    pub const ESCALATE: Self = Self { verdict: Verdict::AcceptRemote, reason: Reason::RemoteBetter };

    const LEGAL: [Self; 11] = [
        Self::CONFIDENT_LOCAL,
        Self::BLUR_FILTERED,
        Self::REMOTE_BETTER,
        Self::REMOTE_WORSE,
        Self::STALE,
        Self::LOCAL_SUFFICES,
        Self::QV_BLINDED,
        Self::DEADLINE_INFEASIBLE,
        Self::NEGATIVE_BENEFIT,
        Self::LOCAL_ONLY,
        Self::REMOTE_ONLY,
    ];

    pub fn new(verdict: Verdict, reason: Reason) -> Option<Self> {
        let d = Self { verdict, reason };
        Self::LEGAL.contains(&d).then_some(d)
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn reason(&self) -> Reason {
        self.reason
    }

    pub fn is_remote(&self) -> bool {
        self.verdict == Verdict::AcceptRemote
    }
}

/// Peak-confidence frame of a lap.
#[derive(Debug, Clone, PartialEq)]
pub struct LapPeak {
    pub prediction: Prediction,
    /// Raw Laplacian variance of the peak frame.
    pub sharpness: f64,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LapSummary {
    pub lap_index: u64,
    pub lap_end_time: u64,
    pub frames: u64,
    pub peak: Option<LapPeak>,
}

impl LapSummary {
    pub fn new(lap_index: u64, lap_end_time: u64) -> Self {
        Self { lap_index, lap_end_time, frames: 0, peak: None }
    }

    pub fn peak_conf(&self) -> f64 {
        self.peak.as_ref().map_or(0.0, |p| p.prediction.confidence)
    }

    pub fn peak_sharpness(&self) -> f64 {
        self.peak.as_ref().map_or(0.0, |p| p.sharpness)
    }
}

/// Fold one local prediction into the lap summary. The stored peak is
/// replaced only by a strictly more confident frame.
pub fn lap_update(mut s: LapSummary, pred: Prediction, sharpness: f64, frame: &Frame) -> LapSummary {
    debug_assert_eq!(pred.source, Source::Local);
    s.frames += 1;
    let replace = match &s.peak {
        None => true,
        Some(p) => pred.confidence > p.prediction.confidence,
    };
    if replace {
        s.peak = Some(LapPeak { prediction: pred, sharpness, frame: frame.clone() });
    }
    s
}

/// First stage of the lap policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LapTriage {
    Decided(RoutingDecision),
    Escalate,
}

/// Local acceptance rules, applied to the lap's peak confidence and sharpness.
pub fn lap_triage(peak_conf: f64, peak_sharpness: f64, th: &RoutingThresholds) -> LapTriage {
    if peak_conf > th.tau_conf {
        LapTriage::Decided(RoutingDecision::CONFIDENT_LOCAL)
    } else if peak_sharpness < th.tau_valid {
        LapTriage::Decided(RoutingDecision::BLUR_FILTERED)
    } else {
        LapTriage::Escalate
    }
}

/// Conditional acceptance of a remote answer for an escalated lap. A missing
/// or late response keeps the local answer.
pub fn resolve_escalation(local_conf: f64, response: Option<&EscalationResponse>, horizon_ms: u64) -> RoutingDecision {
    match response {
        Some(r) if !is_stale(r, horizon_ms) => {
            if r.prediction.confidence > local_conf {
                RoutingDecision::REMOTE_BETTER
            } else {
                RoutingDecision::REMOTE_WORSE
            }
        }
        _ => RoutingDecision::STALE,
    }
}

/// Anything that can answer an escalation.
pub trait Escalator {
    fn escalate(&mut self, req: EscalationRequest, now: u64) -> EscalationResponse;
}

impl<F> Escalator for F
where
    F: FnMut(EscalationRequest, u64) -> EscalationResponse,
{
    fn escalate(&mut self, req: EscalationRequest, now: u64) -> EscalationResponse {
        self(req, now)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatedLap {
    pub prediction: Prediction,
    pub decision: RoutingDecision,
    /// The remote answer, when the lap was escalated.
    pub escalation: Option<EscalationResponse>,
}

/// Apply the lap policy to a completed lap. Escalation happens at
/// `lap_end_time`; responses landing after `horizon_ms` are discarded.
pub fn lap_coordinate(s: &LapSummary, th: &RoutingThresholds, l4: &mut dyn Escalator, horizon_ms: u64) -> Result<CoordinatedLap> {
    let peak = s.peak.as_ref().ok_or(AtiError::EmptyLap { lap: s.lap_index })?;
    let local = peak.prediction;
    match lap_triage(local.confidence, peak.sharpness, th) {
        LapTriage::Decided(decision) => Ok(CoordinatedLap { prediction: local, decision, escalation: None }),
        LapTriage::Escalate => {
            let req = EscalationRequest {
                payload: peak.frame.clone(),
                budget_ms: horizon_ms.saturating_sub(s.lap_end_time).max(1),
                origin_timestamp: peak.frame.timestamp_ms,
            };
            let resp = l4.escalate(req, s.lap_end_time);
            let decision = resolve_escalation(local.confidence, Some(&resp), horizon_ms);
            let prediction = if decision.is_remote() { resp.prediction } else { local };
            Ok(CoordinatedLap { prediction, decision, escalation: Some(resp) })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub rtt_ms: u64,
    /// Carried and logged; no default gate uses it.
    pub energy_headroom: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    /// Absolute deadline (ms of simulation time).
    pub deadline_ms: u64,
    pub error_cost: f64,
    pub comm_cost_per_call: f64,
}

/// Expected value of escalating, to be compared against the call cost.
pub trait BenefitModel {
    fn benefit(&self, uncertainty: f64, task: &TaskMeta, th: &RoutingThresholds) -> f64;
}

/// `(u − τ_task) · error_cost`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearBenefit;

impl BenefitModel for LinearBenefit {
    fn benefit(&self, uncertainty: f64, task: &TaskMeta, th: &RoutingThresholds) -> f64 {
        (uncertainty - th.tau_task) * task.error_cost
    }
}

/// Frame-level routing gates, evaluated in order.
#[allow(clippy::too_many_arguments)]
pub fn frame_route(
    uncertainty: f64,
    qv: &QualityVector,
    net: &NetworkState,
    task: &TaskMeta,
    now: u64,
    l4_latency_ms: u64,
    benefit: &dyn BenefitModel,
    th: &RoutingThresholds,
) -> RoutingDecision {
    if uncertainty <= th.tau_task {
        return RoutingDecision::LOCAL_SUFFICES;
    }
    if qv.blur_score < th.qv_min_sharp || qv.saturation_ratio > th.qv_max_sat {
        return RoutingDecision::QV_BLINDED;
    }
    if now + net.rtt_ms + l4_latency_ms > task.deadline_ms {
        return RoutingDecision::DEADLINE_INFEASIBLE;
    }
    if benefit.benefit(uncertainty, task, th) <= task.comm_cost_per_call {
        return RoutingDecision::NEGATIVE_BENEFIT;
    }
    RoutingDecision::ESCALATE
}

/// A remote answer as recorded in a lap log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordedRemote {
    pub confidence: f64,
    pub label: u32,
    pub arrival_ms: u64,
}

/// Everything the lap policy and the metrics need about one lap, with the
/// remote answer evaluated offline so the lap can be re-routed under any
/// thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedLap {
    pub lap: u64,
    pub truth_label: u32,
    pub local_label: u32,
    pub peak_conf: f64,
    pub peak_sharpness: f64,
    pub lap_start_ms: u64,
    pub lap_end_ms: u64,
    pub horizon_ms: u64,
    pub remote: Option<RecordedRemote>,
}

/// Routing outcome for a recorded lap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutedLap {
    pub decision: RoutingDecision,
    pub escalated: bool,
    pub label: u32,
    pub confidence: f64,
    /// Simulation time at which the final answer was known.
    pub decided_at_ms: u64,
}

impl RoutedLap {
    pub fn correct(&self, truth: u32) -> bool {
        self.label == truth
    }
}

/// Lap policy over a recorded lap. A lap without a recorded remote answer
/// that would escalate is treated as a lost response.
pub fn route_recorded(lap: &RecordedLap, th: &RoutingThresholds) -> RoutedLap {
    let local = RoutedLap {
        decision: RoutingDecision::CONFIDENT_LOCAL,
        escalated: false,
        label: lap.local_label,
        confidence: lap.peak_conf,
        decided_at_ms: lap.lap_end_ms,
    };
    match lap_triage(lap.peak_conf, lap.peak_sharpness, th) {
        LapTriage::Decided(decision) => RoutedLap { decision, ..local },
        LapTriage::Escalate => {
            let resp = lap.remote.map(|r| EscalationResponse {
                prediction: Prediction {
                    label: r.label,
                    confidence: r.confidence,
                    source: Source::Remote,
                    frame_timestamp: lap.lap_end_ms,
                },
                origin_timestamp: lap.lap_end_ms,
                arrival_time: r.arrival_ms,
            });
            let decision = resolve_escalation(lap.peak_conf, resp.as_ref(), lap.horizon_ms);
            let decided_at_ms = match &resp {
                Some(r) if !is_stale(r, lap.horizon_ms) => r.arrival_time,
                _ => lap.horizon_ms,
            };
            match (decision.is_remote(), resp) {
                (true, Some(r)) => {
                    RoutedLap { decision, escalated: true, label: r.prediction.label, confidence: r.prediction.confidence, decided_at_ms }
                }
                _ => RoutedLap { decision, escalated: true, decided_at_ms, ..local },
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tau_conf: f64,
    pub accuracy: f64,
    pub escalation_rate: f64,
}

impl AblationRow {
    pub fn tradeoff(&self, lambda: f64) -> f64 {
        self.accuracy - lambda * self.escalation_rate
    }
}

/// Re-route a fixed lap log under each `tau_conf`, keeping the other thresholds.
pub fn ablate_tau(laps: &[RecordedLap], base: &RoutingThresholds, taus: &[f64]) -> Vec<AblationRow> {
    taus.iter()
        .map(|&tau| {
            let th = RoutingThresholds { tau_conf: tau, ..base.clone() };
            let n = laps.len().max(1) as f64;
            let (correct, escalated) = laps.iter().fold((0usize, 0usize), |(c, e), lap| {
                let r = route_recorded(lap, &th);
                (c + r.correct(lap.truth_label) as usize, e + r.escalated as usize)
            });
            AblationRow {
                tau_conf: tau,
                accuracy: if laps.is_empty() { 0.0 } else { correct as f64 / n },
                escalation_rate: if laps.is_empty() { 0.0 } else { escalated as f64 / n },
            }
        })
        .collect()
}

/// Index of the row maximising `accuracy − lambda · escalation_rate`; the
/// first one wins ties.
pub fn best_tradeoff(rows: &[AblationRow], lambda: f64) -> Option<usize> {
    rows.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, r)| {
            let score = r.tradeoff(lambda);
            match best {
                Some((_, s)) if s >= score => best,
                _ => Some((i, score)),
            }
        })
        .map(|(i, _)| i)
}
