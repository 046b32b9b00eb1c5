//! Offline training, mission iterations per variant and multi-seed comparisons.

use dgp_core::data::Dataset;
use dgp_core::gp_dual::{mission_batch_update, DualGp, ExperienceBuffer};
use dgp_core::gp_online::OnlineSparseGp;
use dgp_core::gp_sparse::{train_sparse, SparseGp, TrainReport};
use dgp_core::kernels::{Hyperparameters, KernelParams, NoiseParams};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{HarnessError, Result};
use crate::log::MissionLog;
use crate::metrics::{average, compute_metrics, Metrics};
use crate::mission::{fly, Estimator, FlightSpec, X_DIM};
use crate::reference::{Excitation, Helix};

const TRAINING_STREAM: u64 = 1;
const MISSION_STREAM: u64 = 100;

#[derive(Clone, Debug)]
pub struct OfflineModel {
    pub data: Dataset<f64>,
    pub gp: SparseGp<f64>,
    pub report: Option<TrainReport<f64>>,
}

/// Flies the excitation reference under linear MPC and returns the
/// `duration × rate` identified `(x̃, Δ)` pairs.
pub fn collect_training_data(cfg: &ExperimentConfig) -> Result<Dataset<f64>> {
    let t = &cfg.training;
    let ts = cfg.mission.ts;
    let per_sample = (t.rate * ts).round() as usize;
    if !(per_sample == 1 || per_sample == 2) {
        return Err(HarnessError::Config("training.rate must be 1/ts or 2/ts".into()));
    }
    let target = (t.duration * t.rate).round() as usize;
    let excitation = Excitation::new(t, cfg.seed);
    let wind = if t.constant_wind {
        cfg.wind.model().constant_only()
    } else {
        cfg.wind.model()
    };
    let spec = FlightSpec {
        reference: &excitation,
        wind,
        steps: (t.duration / ts).round() as usize + 1,
        dither: t.dither,
        stream: TRAINING_STREAM,
        half_samples: per_sample == 2,
        variant: "excitation".into(),
        iteration: 0,
    };
    let flight = fly(cfg, &mut Estimator::nominal(), &spec)?;
    let all = flight.dense.unwrap_or(flight.data);
    let rows: Vec<usize> = (0..target.min(all.len())).collect();
    Ok(all.select(&rows))
}

pub fn train_long_term(cfg: &ExperimentConfig, data: &Dataset<f64>) -> Result<(SparseGp<f64>, TrainReport<f64>)> {
    Ok(train_sparse(data, cfg.gp.pseudo_inputs, None, &cfg.gp.train(cfg.seed))?)
}

pub fn run_offline_training(cfg: &ExperimentConfig) -> Result<OfflineModel> {
    let data = collect_training_data(cfg)?;
    let (gp, report) = train_long_term(cfg, &data)?;
    Ok(OfflineModel {
        data,
        gp,
        report: Some(report),
    })
}

#[derive(Clone, Debug)]
pub struct MissionResult {
    pub log: MissionLog,
    pub metrics: Metrics,
    /// Identified pairs of the mission.
    pub data: Dataset<f64>,
    /// Set when the vehicle left the safe region; the log then ends there.
    pub diverged_at: Option<f64>,
}

/// One helix mission with the given estimator, which is updated in place.
pub fn run_tracking_mission(
    cfg: &ExperimentConfig,
    estimator: &mut Estimator,
    variant: Variant,
    iteration: usize,
) -> Result<MissionResult> {
    let helix = Helix::new(cfg.mission.duration);
    let spec = FlightSpec {
        reference: &helix,
        wind: cfg.wind.model(),
        steps: cfg.mission.steps(),
        dither: 0.0,
        stream: MISSION_STREAM + iteration as u64,
        half_samples: false,
        variant: variant.name().into(),
        iteration,
    };
    let flight = fly(cfg, estimator, &spec)?;
    let metrics = compute_metrics(&flight.log)?;
    Ok(MissionResult {
        log: flight.log,
        metrics,
        data: flight.data,
        diverged_at: None,
    })
}

/// Hyperparameters used by the recursive updates: signal variance scaled by
/// `signal_scale`, noise raised to the configured online level.
pub fn online_hypers(
    cfg: &ExperimentConfig,
    trained: &[Hyperparameters<f64>],
    signal_scale: f64,
    command_scale: f64,
) -> Result<Vec<Hyperparameters<f64>>> {
    trained
        .iter()
        .map(|h| {
            let mut ls = h.kernel.length_scales().to_vec();
            for l in &mut ls[X_DIM..] {
                *l *= command_scale;
            }
            let kernel = KernelParams::new(h.kernel.signal_variance() * signal_scale, ls)?;
            let noise = NoiseParams::new(h.noise.variance().max(cfg.gp.online_noise_variance))?;
            Ok(Hyperparameters::new(kernel, noise))
        })
        .collect()
}

pub fn initial_estimator(cfg: &ExperimentConfig, variant: Variant, offline: &OfflineModel) -> Result<Estimator> {
    let gp = &offline.gp;
    Ok(match variant {
        Variant::Nominal => Estimator::nominal(),
        Variant::BaselineGp => Estimator::Baseline(gp.clone()),
        Variant::OnlineGp => {
            let hypers = online_hypers(cfg, gp.hypers(), 1.0, 1.0)?;
            let model = SparseGp::from_parts(hypers, gp.pseudo_inputs().clone(), gp.posterior().clone())?;
            Estimator::Online(OnlineSparseGp::new(model, cfg.gp.lambda)?)
        }
        Variant::Dgp => {
            let hypers = online_hypers(cfg, gp.hypers(), cfg.gp.short_signal_scale, cfg.gp.short_command_scale)?;
            Estimator::Dual(DualGp::new(gp.clone(), hypers, gp.pseudo_inputs().clone(), cfg.gp.lambda)?)
        }
    })
}

/// `cfg.iterations` missions. The dgp variant consolidates each mission
/// into its long-term GP before the next; online-gp carries its recursive
/// state across missions; baseline-gp and nominal never change.
///
/// A diverged mission is kept with its partial log and ends the sequence.
pub fn run_variant(cfg: &ExperimentConfig, variant: Variant, offline: &OfflineModel) -> Result<Vec<MissionResult>> {
    let mut estimator = initial_estimator(cfg, variant, offline)?;
    let mut history = ExperienceBuffer::with_capacity(cfg.gp.batch_size, 5 * cfg.gp.batch_size);
    history.extend(&offline.data)?;
    let mut out = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let result = match run_tracking_mission(cfg, &mut estimator, variant, it) {
            Ok(r) => r,
            Err(HarnessError::Diverged { time, partial, .. }) if !partial.rows.is_empty() => {
                let metrics = compute_metrics(&partial)?;
                out.push(MissionResult {
                    log: *partial,
                    metrics,
                    data: Dataset::empty(offline.data.input_dim(), offline.data.output_dim()),
                    diverged_at: Some(time),
                });
                break;
            }
            Err(e) => return Err(e),
        };
        if it < cfg.iterations {
            if let Estimator::Dual(dual) = &estimator {
                let (next, _) = mission_batch_update(dual, &mut history, &result.data, &cfg.gp.batch(cfg.seed + it as u64))?;
                estimator = Estimator::Dual(next);
            }
        }
        out.push(result);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub variant: Variant,
    pub iteration: usize,
    pub metrics: Metrics,
    pub diverged_at: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub iteration: usize,
    pub seeds: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    /// Seed-averaged metrics per variant and iteration.
    pub summary: Vec<SummaryRow>,
}

impl Report {
    pub fn from_runs(seeds: Vec<u64>, runs: Vec<RunRecord>) -> Self {
        let mut keys: Vec<(Variant, usize)> = runs.iter().map(|r| (r.variant, r.iteration)).collect();
        keys.sort();
        keys.dedup();
        let summary = keys
            .into_iter()
            .filter_map(|(v, it)| {
                let items: Vec<Metrics> = runs
                    .iter()
                    .filter(|r| r.variant == v && r.iteration == it)
                    .map(|r| r.metrics.clone())
                    .collect();
                average(&items).map(|metrics| SummaryRow {
                    variant: v,
                    iteration: it,
                    seeds: items.len(),
                    metrics,
                })
            })
            .collect();
        Self { seeds, runs, summary }
    }

    pub fn summary_for(&self, variant: Variant, iteration: usize) -> Option<&Metrics> {
        self.summary
            .iter()
            .find(|s| s.variant == variant && s.iteration == iteration)
            .map(|s| &s.metrics)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned text table of the summary.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>4} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            "variant", "iter", "mse_x", "mse_y", "mse_z", "avg_cost", "delta_err"
        );
        for s in &self.summary {
            let m = &s.metrics;
            let de = m.delta_error.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{:<12} {:>4} {:>12.6} {:>12.6} {:>12.6} {:>12.4} {:>12}\n",
                s.variant.name(),
                s.iteration,
                m.mse[0],
                m.mse[1],
                m.mse[2],
                m.avg_cost,
                de
            ));
        }
        out
    }
}

/// Everything produced for one seed.
pub struct SeedRun {
    pub seed: u64,
    pub offline: OfflineModel,
    pub missions: Vec<(Variant, Vec<MissionResult>)>,
}

pub fn run_seed(cfg: &ExperimentConfig, variants: &[Variant], offline: Option<OfflineModel>) -> Result<SeedRun> {
    let offline = match offline {
        Some(o) => o,
        None => run_offline_training(cfg)?,
    };
    let missions = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| {
                let offline = &offline;
                s.spawn(move || run_variant(cfg, v, offline).map(|r| (v, r)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("variant worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SeedRun {
        seed: cfg.seed,
        offline,
        missions,
    })
}

/// Runs `variants` for every seed in parallel; results come back in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64], variants: &[Variant]) -> Result<Vec<SeedRun>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                s.spawn(move || run_seed(&c, variants, None))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed worker panicked"))
            .collect()
    })
}

pub fn report_of(runs: &[SeedRun]) -> Report {
    let mut records = Vec::new();
    for r in runs {
        for (v, missions) in &r.missions {
            for m in missions {
                records.push(RunRecord {
                    seed: r.seed,
                    variant: *v,
                    iteration: m.log.iteration,
                    metrics: m.metrics.clone(),
                    diverged_at: m.diverged_at,
                });
            }
        }
    }
    Report::from_runs(runs.iter().map(|r| r.seed).collect(), records)
}
