//! Drivers built on [`run_experiment`]: training, the sensing × inference
//! grid, the τ_conf sweep and the alternating-light comparison.

use std::fmt::Write as _;
use std::thread;

use crate::calibrator::{consolidate, BanditTable, ConsolidatedPolicy};
use crate::error::{AtiError, Result};
use crate::router::{ablate_tau, AblationRow};

use super::config::{ExperimentConfig, InferenceMode, SensingMode};
use super::logs::{FrameRecord, RunMetrics};
use super::run::{run_experiment, PolicyBundle, RunOutput};

pub struct TrainOutput {
    pub run: RunOutput,
    pub table: BanditTable,
    pub policy: ConsolidatedPolicy,
}

impl TrainOutput {
    pub fn bundle(&self) -> PolicyBundle {
        PolicyBundle { policy: self.policy.clone(), table: Some(self.table.clone()) }
    }
}

/// Learn on `cfg`'s scenario and consolidate the resulting table.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    let mut cfg = cfg.clone();
    cfg.run.sensing = SensingMode::L1L2Learning;
    let run = run_experiment(&cfg, None)?;
    let table = run.table.clone().expect("learning runs return their table");
    let policy = consolidate(&table, &cfg.consolidation);
    Ok(TrainOutput { run, table, policy })
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub sensing: SensingMode,
    pub inference: InferenceMode,
    pub metrics: RunMetrics,
}

/// Every sensing mode crossed with every inference path.
pub fn full_grid() -> Vec<(SensingMode, InferenceMode)> {
    [SensingMode::Ae, SensingMode::L1, SensingMode::L1L2Inference]
        .into_iter()
        .flat_map(|s| InferenceMode::ALL.into_iter().map(move |i| (s, i)))
        .collect()
}

/// Run each (sensing, inference) pair on the same scenario and seed.
/// Independent rows run on separate threads.
pub fn run_grid(base: &ExperimentConfig, modes: &[(SensingMode, InferenceMode)], policy: Option<&PolicyBundle>) -> Result<Vec<GridRow>> {
    if policy.is_none() && modes.iter().any(|(s, _)| *s == SensingMode::L1L2Inference) {
        return Err(AtiError::MissingPolicy("grid rows with l1_l2_inference need a policy file".into()));
    }
    thread::scope(|scope| {
        let handles: Vec<_> = modes
            .iter()
            .map(|&(sensing, inference)| {
                let mut cfg = base.clone();
                cfg.run.sensing = sensing;
                cfg.run.inference = inference;
                scope.spawn(move || run_experiment(&cfg, policy).map(|out| GridRow { sensing, inference, metrics: out.metrics }))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("grid worker panicked")).collect()
    })
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("sensing,inference,laps,accuracy,l3_accuracy,l4_call_rate,mean_confidence,ttfd_ms\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.sensing, r.inference, m.laps, m.total_accuracy, m.l3_accuracy, m.l4_call_rate, m.mean_confidence, m.ttfd_ms
        );
    }
    out
}

/// τ_conf values 0.3, 0.4, …, 0.9.
pub fn default_taus() -> Vec<f64> {
    (3..=9).map(|i| i as f64 / 10.0).collect()
}

/// Simulate once with the split path, then re-route the recorded laps under
/// each τ_conf.
pub fn run_threshold_ablation(
    base: &ExperimentConfig,
    taus: &[f64],
    policy: Option<&PolicyBundle>,
) -> Result<(Vec<AblationRow>, RunOutput)> {
    let mut cfg = base.clone();
    cfg.run.inference = InferenceMode::L3L4Split;
    let out = run_experiment(&cfg, policy)?;
    let rows = ablate_tau(&out.recorded_laps(), &cfg.routing, taus);
    Ok((rows, out))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("tau_conf,accuracy,escalation_rate\n");
    for r in rows {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", r.tau_conf, r.accuracy, r.escalation_rate);
    }
    out
}

/// How the sensor setting responded to one change in illumination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightTransition {
    /// Index into the frame log of the first frame under the new lighting.
    pub frame: usize,
    pub timestamp_ms: u64,
    pub from_lux: f64,
    pub to_lux: f64,
    /// Frames after the transition until the first setting change (0 means
    /// the first frame under the new lighting already used a new setting).
    pub first_change: Option<usize>,
    /// Frames until the last setting change before the next transition,
    /// plus one; 0 when the setting never changed.
    pub settle_frames: usize,
}

pub fn light_transitions(frames: &[FrameRecord]) -> Vec<LightTransition> {
    let starts: Vec<usize> = (1..frames.len()).filter(|&i| frames[i].lux != frames[i - 1].lux).collect();
    starts
        .iter()
        .enumerate()
        .map(|(n, &i)| {
            let end = starts.get(n + 1).copied().unwrap_or(frames.len());
            let changes: Vec<usize> = (i..end).filter(|&j| frames[j].setting != frames[j - 1].setting).map(|j| j - i).collect();
            LightTransition {
                frame: i,
                timestamp_ms: frames[i].timestamp_ms,
                from_lux: frames[i - 1].lux,
                to_lux: frames[i].lux,
                first_change: changes.first().copied(),
                settle_frames: changes.last().map_or(0, |c| c + 1),
            }
        })
        .collect()
}

pub struct DynamicReport {
    pub ae: RunOutput,
    pub ati: RunOutput,
    pub ae_transitions: Vec<LightTransition>,
    pub ati_transitions: Vec<LightTransition>,
}

impl DynamicReport {
    pub fn mean_settle(t: &[LightTransition]) -> f64 {
        if t.is_empty() {
            0.0
        } else {
            t.iter().map(|x| x.settle_frames as f64).sum::<f64>() / t.len() as f64
        }
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("mode,accuracy,l3_accuracy,l4_call_rate,mean_settle_frames,max_settle_frames\n");
        for (name, run, tr) in [("ae", &self.ae, &self.ae_transitions), ("ati", &self.ati, &self.ati_transitions)] {
            let max = tr.iter().map(|t| t.settle_frames).max().unwrap_or(0);
            let m = &run.metrics;
            let _ = writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{:.6},{max}",
                m.total_accuracy,
                m.l3_accuracy,
                m.l4_call_rate,
                Self::mean_settle(tr)
            );
        }
        out
    }
}

/// Auto exposure and the consolidated policy on the same alternating-light
/// trajectory and seed.
pub fn run_dynamic_lighting(cfg: &ExperimentConfig, policy: &PolicyBundle) -> Result<DynamicReport> {
    let mut ae_cfg = cfg.clone();
    ae_cfg.run.sensing = SensingMode::Ae;
    let mut ati_cfg = cfg.clone();
    ati_cfg.run.sensing = SensingMode::L1L2Inference;
    let (ae, ati) = thread::scope(|s| {
        let ae = s.spawn(|| run_experiment(&ae_cfg, None));
        let ati = s.spawn(|| run_experiment(&ati_cfg, Some(policy)));
        (ae.join().expect("ae worker panicked"), ati.join().expect("ati worker panicked"))
    });
    let (ae, ati) = (ae?, ati?);
    Ok(DynamicReport { ae_transitions: light_transitions(&ae.frames), ati_transitions: light_transitions(&ati.frames), ae, ati })
}
