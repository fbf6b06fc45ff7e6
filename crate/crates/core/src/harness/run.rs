//! One closed-loop run under virtual time.
//!
//! Each lap schedules a capture every `frame_ms`, a local-inference
//! completion `infer_latency_ms` after each capture, and a lap-end event.
//! At lap end the bandit is updated (learning mode), the remote tier is
//! consulted for the lap's peak frame and the lap is routed.

use std::collections::BTreeSet;

use crate::calibrator::{
    apply_action, calibrate, compute_reward, discretize_context, BanditTable, CalibAction, CalibChoice, CalibMode, ConsolidatedPolicy,
    SensingContext,
};
use crate::envelope::{baseline_setting, safety_envelope, SensorSetting};
use crate::error::{AtiError, Result};
use crate::percept::{l3_infer_scored, l4_infer, EscalationRequest, EscalationResponse, Prediction, Source};
use crate::rng::{stream_rng, Stream};
use crate::router::{
    frame_route, lap_coordinate, lap_update, LapSummary, LinearBenefit, NetworkState, RecordedLap, RecordedRemote, RoutedLap,
    RoutingDecision, TaskMeta, Verdict,
};
use crate::sensecam::{
    capture_frame, laplacian_variance, next_env, quality_vector_with_blur, EnvSample, Frame, ScenePattern, SHARPNESS_SIZE,
};

use super::ae::auto_exposure_step;
use super::clock::EventQueue;
use super::config::{ExperimentConfig, InferenceMode, SensingMode};
use super::logs::{frame_csv, lap_csv, quantize, route_for_mode, FrameRecord, LapRecord, RunMetrics};

/// A consolidated policy and, optionally, the table it came from. Contexts
/// the policy does not cover fall back to the table's greedy action.
#[derive(Debug, Clone, Default)]
pub struct PolicyBundle {
    pub policy: ConsolidatedPolicy,
    pub table: Option<BanditTable>,
}

/// Remote stream indices for frame-level escalations live above this offset
/// so they never collide with per-lap indices.
const FRAME_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRouteEvent {
    /// When the routing decision was taken (local result available).
    pub at_ms: u64,
    pub deadline_ms: u64,
    pub decision: RoutingDecision,
    /// Arrival of the remote answer, for escalated frames.
    pub arrival_ms: Option<u64>,
    pub late_injected: bool,
    /// The remote answer arrived after the deadline and was dropped.
    pub discarded: bool,
}

/// Frame-level routing counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameRouteReport {
    pub frames: u64,
    pub local_suffices: u64,
    pub resampled: u64,
    pub deadline_infeasible: u64,
    pub negative_benefit: u64,
    pub escalated: u64,
    pub late_injected: u64,
    pub stale_discarded: u64,
    pub remote_accepted: u64,
    pub events: Vec<FrameRouteEvent>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub sensing: SensingMode,
    pub inference: InferenceMode,
    pub metrics: RunMetrics,
    pub frames: Vec<FrameRecord>,
    pub laps: Vec<LapRecord>,
    /// The learned table, in learning mode.
    pub table: Option<BanditTable>,
    /// Frames whose context had no consolidated entry (inference mode).
    pub policy_misses: u64,
    /// Present for frame-level routing runs.
    pub frame_routing: Option<FrameRouteReport>,
}

impl RunOutput {
    pub fn frame_csv(&self) -> String {
        frame_csv(&self.frames, self.sensing.as_str())
    }

    pub fn lap_csv(&self) -> String {
        lap_csv(&self.laps)
    }

    pub fn recorded_laps(&self) -> Vec<RecordedLap> {
        self.laps.iter().map(|l| l.recorded.clone()).collect()
    }

    /// Rewards in lap order (learning mode only).
    pub fn rewards(&self) -> Vec<f64> {
        self.laps.iter().filter_map(|l| l.reward).collect()
    }
}

enum Event {
    Capture { k: u64 },
    LocalDone(Box<Pending>),
    LapEnd,
}

struct Pending {
    frame: Frame,
    lapvar: f64,
    env: EnvSample,
    frame_index: u64,
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    policy: Option<&'a PolicyBundle>,
    fallback: BanditTable,
    table: Option<BanditTable>,
    frame_routing: Option<FrameRouteReport>,
    frames: Vec<FrameRecord>,
    laps: Vec<LapRecord>,
    ae_setting: SensorSetting,
    ae_last_mean: Option<f64>,
    policy_misses: u64,
    missed_contexts: BTreeSet<SensingContext>,
}

/// Per-lap sensing state fixed at lap start.
struct LapPlan {
    index: u64,
    start_ms: u64,
    end_ms: u64,
    context: SensingContext,
    action: Option<CalibAction>,
    epsilon: Option<f64>,
}

/// Run `cfg` to completion. Inference mode needs `policy`.
pub fn run_experiment(cfg: &ExperimentConfig, policy: Option<&PolicyBundle>) -> Result<RunOutput> {
    run(cfg, policy, false)
}

/// Run with the frame-level routing gates applied to every local result
/// instead of the lap policy.
pub fn run_frame_routing(cfg: &ExperimentConfig, policy: Option<&PolicyBundle>) -> Result<RunOutput> {
    run(cfg, policy, true)
}

fn run(cfg: &ExperimentConfig, policy: Option<&PolicyBundle>, frame_level: bool) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.run.sensing == SensingMode::L1L2Inference && policy.is_none() {
        return Err(AtiError::MissingPolicy("inference-mode sensing needs a consolidated policy".into()));
    }
    let fallback = policy.and_then(|p| p.table.clone()).unwrap_or_else(|| BanditTable::new(cfg.bandit.clone()));
    let mut sim = Sim {
        cfg,
        policy,
        fallback,
        table: (cfg.run.sensing == SensingMode::L1L2Learning).then(|| BanditTable::new(cfg.bandit.clone())),
        frame_routing: frame_level.then(FrameRouteReport::default),
        frames: Vec::new(),
        laps: Vec::new(),
        ae_setting: SensorSetting::new(cfg.ae.initial_exp_idx, cfg.ae.initial_iso_idx),
        ae_last_mean: None,
        policy_misses: 0,
        missed_contexts: BTreeSet::new(),
    };

    let mut queue = EventQueue::new();
    let mut lap_index = 0u64;
    for object in &cfg.scene.objects {
        let mut scene = object.scene(cfg.scene.size);
        for _ in 0..cfg.run.laps {
            sim.run_lap(lap_index, &mut scene, &mut queue, frame_level)?;
            lap_index += 1;
        }
    }

    let metrics = RunMetrics::from_laps(&sim.laps);
    Ok(RunOutput {
        sensing: cfg.run.sensing,
        inference: if frame_level { InferenceMode::L3Only } else { cfg.run.inference },
        metrics,
        frames: sim.frames,
        laps: sim.laps,
        table: sim.table,
        policy_misses: sim.policy_misses,
        frame_routing: sim.frame_routing,
    })
}

impl Sim<'_> {
    fn run_lap(&mut self, index: u64, scene: &mut ScenePattern, queue: &mut EventQueue<Event>, frame_level: bool) -> Result<()> {
        let cfg = self.cfg;
        let traj = &cfg.trajectory;
        let start_ms = index * traj.lap_ms;
        let end_ms = start_ms + traj.lap_ms;
        let first = next_env(traj, start_ms);
        let context = discretize_context(first.motion, first.light, &cfg.bins);
        let (action, epsilon) = match (&self.table, cfg.run.sensing) {
            (Some(table), SensingMode::L1L2Learning) => {
                let eps = table.epsilon(context);
                let mut rng = stream_rng(cfg.run.seed, Stream::Bandit, index);
                (Some(table.select_with_epsilon(context, eps, &mut rng)), Some(eps))
            }
            _ => (None, None),
        };
        let mut plan = LapPlan { index, start_ms, end_ms, context, action, epsilon };

        for k in 0..traj.frames_per_lap() {
            queue.schedule(start_ms + k * traj.frame_ms, Event::Capture { k });
        }
        queue.schedule(end_ms, Event::LapEnd);

        let mut summary = LapSummary::new(index, end_ms);
        while let Some((now, event)) = queue.pop() {
            match event {
                Event::Capture { k } => {
                    let pending = self.capture(&mut plan, k, now, scene);
                    queue.schedule(now + cfg.local.infer_latency_ms, Event::LocalDone(Box::new(pending)));
                }
                Event::LocalDone(p) => {
                    let pred = self.local_result(&p, now, &plan, frame_level);
                    summary = lap_update(summary, pred, p.lapvar, &p.frame);
                }
                Event::LapEnd => {
                    self.finish_lap(&plan, &summary, frame_level)?;
                    break;
                }
            }
        }
        Ok(())
    }

    fn setting_for(&mut self, plan: &mut LapPlan, k: u64, env: &EnvSample) -> SensorSetting {
        let cfg = self.cfg;
        let (g, ep) = (&cfg.grids, &cfg.envelope);
        match cfg.run.sensing {
            SensingMode::Ae => {
                if let Some(mean) = self.ae_last_mean {
                    self.ae_setting = auto_exposure_step(self.ae_setting, mean, g, &cfg.ae);
                }
                self.ae_setting
            }
            SensingMode::L1 => baseline_setting(env.motion, env.light, ep, g),
            SensingMode::L1L2Learning => {
                let base = baseline_setting(env.motion, env.light, ep, g);
                let envl = safety_envelope(env.motion, env.light, ep, g);
                apply_action(base, plan.action.unwrap_or(CalibAction::HOLD), envl, g)
            }
            SensingMode::L1L2Inference => {
                let base = baseline_setting(env.motion, env.light, ep, g);
                let envl = safety_envelope(env.motion, env.light, ep, g);
                let ctx = discretize_context(env.motion, env.light, &cfg.bins);
                let bundle = self.policy.expect("checked before the run");
                // inference never explores, so the rng is never drawn from
                let mut rng = stream_rng(cfg.run.seed, Stream::Bandit, plan.index);
                let (setting, choice) = calibrate(CalibMode::Inference, base, ctx, &self.fallback, Some(&bundle.policy), envl, g, &mut rng);
                if let CalibChoice::Bandit(_) = choice {
                    self.policy_misses += 1;
                    if self.missed_contexts.insert(ctx) {
                        log::warn!(
                            "no consolidated entry for context (motion {}, light {}); using greedy fallback",
                            ctx.motion_bin,
                            ctx.light_bin
                        );
                    }
                }
                if k == 0 {
                    plan.context = ctx;
                    plan.action = Some(choice.action());
                }
                setting
            }
        }
    }

    fn capture(&mut self, plan: &mut LapPlan, k: u64, now: u64, scene: &mut ScenePattern) -> Pending {
        let cfg = self.cfg;
        let env = next_env(&cfg.trajectory, now);
        let setting = self.setting_for(plan, k, &env);
        let frame_index = plan.index * cfg.trajectory.frames_per_lap() + k;
        scene.visible = env.visible;
        let mut rng = stream_rng(cfg.run.seed, Stream::Camera, frame_index);
        let frame = capture_frame(scene, setting, env.motion, env.light, &cfg.camera, &cfg.grids, now, &mut rng);
        self.ae_last_mean = Some(frame.mean());
        let lapvar = quantize(laplacian_variance(&frame, SHARPNESS_SIZE));
        Pending { frame, lapvar, env, frame_index }
    }

    fn local_result(&mut self, p: &Pending, now: u64, plan: &LapPlan, frame_level: bool) -> Prediction {
        let cfg = self.cfg;
        let mut rng = stream_rng(cfg.run.seed, Stream::Local, p.frame_index);
        let mut pred = l3_infer_scored(&p.frame, p.lapvar, &cfg.local, &mut rng);
        pred.confidence = quantize(pred.confidence);
        let qv = quality_vector_with_blur(&p.frame, &cfg.camera, p.lapvar);
        self.frames.push(FrameRecord {
            timestamp_ms: p.frame.timestamp_ms,
            lap: plan.index,
            lux: p.env.light.lux,
            acc_mag: p.env.motion.acc_mag,
            gyro_mag: p.env.motion.gyro_mag,
            setting: p.frame.setting,
            exp_s: p.frame.exposure_s,
            iso: p.frame.iso,
            mean_brightness: p.frame.mean(),
            lapvar: p.lapvar,
            saturation_ratio: qv.saturation_ratio,
            l3_conf: pred.confidence,
            l3_label: pred.label,
            truth_label: p.frame.truth.object_id,
            visible: p.frame.truth.visible,
        });
        if frame_level {
            self.route_frame(p, &pred, now, plan);
        }
        pred
    }

    fn route_frame(&mut self, p: &Pending, pred: &Prediction, now: u64, plan: &LapPlan) {
        let cfg = self.cfg;
        let net = NetworkState { rtt_ms: cfg.network.rtt_ms, energy_headroom: cfg.network.energy_headroom };
        let deadline_ms = plan.end_ms + cfg.task.deadline_after_lap_ms;
        let task = TaskMeta { deadline_ms, error_cost: cfg.task.error_cost, comm_cost_per_call: cfg.task.comm_cost_per_call };
        let qv = quality_vector_with_blur(&p.frame, &cfg.camera, p.lapvar);
        let decision = frame_route(1.0 - pred.confidence, &qv, &net, &task, now, cfg.remote.infer_latency_ms, &LinearBenefit, &cfg.routing);
        let report = self.frame_routing.as_mut().expect("frame routing enabled");
        report.frames += 1;
        let mut event = FrameRouteEvent { at_ms: now, deadline_ms, decision, arrival_ms: None, late_injected: false, discarded: false };
        match decision {
            RoutingDecision::LOCAL_SUFFICES => report.local_suffices += 1,
            RoutingDecision::QV_BLINDED => report.resampled += 1,
            RoutingDecision::DEADLINE_INFEASIBLE => report.deadline_infeasible += 1,
            RoutingDecision::NEGATIVE_BENEFIT => report.negative_benefit += 1,
            d => {
                debug_assert_eq!(d.verdict(), Verdict::AcceptRemote);
                report.escalated += 1;
                let req = EscalationRequest {
                    payload: p.frame.clone(),
                    budget_ms: deadline_ms.saturating_sub(now).max(1),
                    origin_timestamp: p.frame.timestamp_ms,
                };
                let index = FRAME_STREAM_OFFSET + p.frame_index;
                let mut rng = stream_rng(cfg.run.seed, Stream::Remote, index);
                let resp = l4_infer(&req, &cfg.remote, &cfg.local, now, &mut rng);
                let (resp, late) = network_delay(cfg, resp, index);
                event.arrival_ms = Some(resp.arrival_time);
                event.late_injected = late;
                report.late_injected += late as u64;
                if crate::percept::is_stale(&resp, deadline_ms) {
                    event.discarded = true;
                    report.stale_discarded += 1;
                } else if resp.prediction.confidence > pred.confidence {
                    report.remote_accepted += 1;
                }
            }
        }
        report.events.push(event);
    }

    fn finish_lap(&mut self, plan: &LapPlan, summary: &LapSummary, frame_level: bool) -> Result<()> {
        let cfg = self.cfg;
        let peak = summary.peak.as_ref().ok_or(AtiError::EmptyLap { lap: plan.index })?;

        let (mut reward, mut q_after) = (None, None);
        if let (Some(table), Some(action)) = (self.table.as_mut(), plan.action) {
            let r = compute_reward(summary, &cfg.reward)?;
            table.update(plan.context, action, r);
            reward = Some(r);
            q_after = Some(table.q(plan.context, action));
        }

        let inference = if frame_level { InferenceMode::L3Only } else { cfg.run.inference };
        let horizon_ms = plan.end_ms + cfg.network.response_window_ms;
        let response = inference.uses_remote().then(|| {
            let req = EscalationRequest {
                payload: peak.frame.clone(),
                budget_ms: horizon_ms - plan.end_ms,
                origin_timestamp: peak.frame.timestamp_ms,
            };
            let mut rng = stream_rng(cfg.run.seed, Stream::Remote, plan.index);
            let mut resp = l4_infer(&req, &cfg.remote, &cfg.local, plan.end_ms, &mut rng);
            resp.prediction.confidence = quantize(resp.prediction.confidence);
            network_delay(cfg, resp, plan.index).0
        });

        let recorded = RecordedLap {
            lap: plan.index,
            truth_label: peak.frame.truth.object_id,
            local_label: peak.prediction.label,
            peak_conf: peak.prediction.confidence,
            peak_sharpness: peak.sharpness,
            lap_start_ms: plan.start_ms,
            lap_end_ms: plan.end_ms,
            horizon_ms,
            remote: response.map(|r| RecordedRemote {
                confidence: r.prediction.confidence,
                label: r.prediction.label,
                arrival_ms: r.arrival_time,
            }),
        };

        let routed = match (inference, response) {
            (InferenceMode::L3L4Split, Some(resp)) => {
                let mut escalator = |_req: EscalationRequest, _now: u64| resp;
                let lap = lap_coordinate(summary, &cfg.routing, &mut escalator, horizon_ms)?;
                let decided_at_ms = match &lap.escalation {
                    Some(r) if !crate::percept::is_stale(r, horizon_ms) => r.arrival_time,
                    Some(_) => horizon_ms,
                    None => plan.end_ms,
                };
                RoutedLap {
                    decision: lap.decision,
                    escalated: lap.escalation.is_some(),
                    label: lap.prediction.label,
                    confidence: lap.prediction.confidence,
                    decided_at_ms,
                }
            }
            _ => route_for_mode(&recorded, &cfg.routing, inference),
        };
        debug_assert_eq!(routed, route_for_mode(&recorded, &cfg.routing, inference));
        debug_assert!(routed.escalated || routed.decision.verdict() != Verdict::AcceptRemote);
        debug_assert!(peak.prediction.source == Source::Local);

        self.laps.push(LapRecord {
            recorded,
            context: plan.context,
            action: plan.action,
            setting: peak.frame.setting,
            reward,
            epsilon: plan.epsilon,
            q_after,
            routed,
        });
        Ok(())
    }
}

/// Add the round trip and, with probability `late_prob`, the injected delay.
fn network_delay(cfg: &ExperimentConfig, resp: EscalationResponse, index: u64) -> (EscalationResponse, bool) {
    use rand::Rng;
    let mut rng = stream_rng(cfg.run.seed, Stream::Network, index);
    let late = cfg.network.late_prob > 0.0 && rng.random::<f64>() < cfg.network.late_prob;
    let extra = cfg.network.rtt_ms + if late { cfg.network.late_extra_ms } else { 0 };
    (resp.delayed_by(extra), late)
}
