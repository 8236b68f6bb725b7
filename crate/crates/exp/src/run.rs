//! Running an experiment spec: training, held-out evaluation and baselines.

use std::time::Instant;

use mdgnn::baselines::{wmmse_power, wmmse_precoding, WmmseConfig};
use mdgnn::channel::ChannelRealization;
use mdgnn::gib::Solution;
use mdgnn::model::{Family, HeadKind, Model, ModelConfig, ParamSet};
use mdgnn::train::{derive_seed, evaluate, evaluate_solver, init_params, test_set, train, Sampler, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ExpError, Result};
use crate::spec::{ExperimentSpec, Point};

pub const SCHEMA_VERSION: u32 = 1;
pub const WMMSE: &str = "wmmse";
pub const UPPER_BOUND: &str = "upper-bound";
const VERTEX_STRUCTURE: &str = "vertex";
const BASELINE_STRUCTURE: &str = "-";
/// Steps averaged for the logged bound terms.
const TAIL: usize = 100;

const STREAM_TRAIN: u64 = 11;
const STREAM_TEST: u64 = 12;
const STREAM_SAMPLING: u64 = 13;

/// One CSV line: a family at one grid point, aggregated over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub task: String,
    pub family: String,
    pub structure: String,
    pub axis: String,
    pub value: f64,
    /// Axis value used for training in transfer runs.
    pub train_value: Option<f64>,
    pub mean_se: f64,
    /// Sample standard deviation of the per-trial means.
    pub std_se: f64,
    pub a_term: f64,
    pub e_term: f64,
    pub param_count: usize,
    /// Wall time per training run; the only column not fixed by (spec, seed).
    pub train_ms: f64,
    pub trials: usize,
    /// Per-trial mean SE, `;`-separated.
    pub trial_se: String,
}

impl ResultRow {
    pub fn trial_values(&self) -> Vec<f64> {
        self.trial_se
            .split(';')
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n.max(1.0);
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[derive(Debug, Clone)]
struct Job {
    family: Family,
    structure: String,
    train_value: f64,
    test_values: Vec<f64>,
    trial: usize,
}

#[derive(Debug, Clone)]
struct JobResult {
    /// `(test value, mean SE)` pairs.
    se: Vec<(f64, f64)>,
    a_term: f64,
    e_term: f64,
    param_count: usize,
    train_ms: f64,
}

/// Held-out draws for `trial` at a grid point; shared by every family.
pub fn trial_test_set(spec: &ExperimentSpec, point: &Point, trial: usize) -> Result<Vec<ChannelRealization>> {
    Ok(test_set(
        &point.system,
        point.sigma_i_sq,
        spec.budget.test_draws,
        derive_seed(spec.seed, STREAM_TEST, trial as u64),
    )?)
}

pub fn train_config(spec: &ExperimentSpec, trial: usize) -> TrainConfig {
    TrainConfig {
        lr: spec.budget.lr,
        steps: spec.budget.steps,
        batch_size: spec.budget.batch_size,
        seed: derive_seed(spec.seed, STREAM_TRAIN, trial as u64),
        ..TrainConfig::default()
    }
}

pub fn model_config(spec: &ExperimentSpec, family: Family, structure: &str, point: &Point) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(
        family,
        spec.task.head(),
        structure,
        spec.budget.hidden,
        spec.budget.layers,
        &point.system,
    )?;
    cfg.nested = spec.nested;
    cfg.channels[0] = cfg.input_width(&point.system)?;
    if family.has_representation_noise() {
        cfg.gib.beta = point.beta;
    }
    Ok(cfg)
}

/// Trains one family for one trial at `point`.
pub fn train_trial(
    spec: &ExperimentSpec,
    family: Family,
    structure: &str,
    point: &Point,
    trial: usize,
) -> Result<(Model, ParamSet, mdgnn::train::TrainOutcome)> {
    let model = Model::new(model_config(spec, family, structure, point)?, point.system.clone())?;
    let tcfg = train_config(spec, trial);
    let out = train(
        &model,
        init_params(&model, &tcfg),
        &Sampler::Fresh {
            sigma_i_sq: point.sigma_i_sq,
        },
        &tcfg,
    )?;
    Ok((model, out.params.clone(), out))
}

fn run_job(spec: &ExperimentSpec, job: &Job) -> Result<JobResult> {
    let train_point = spec.point(job.train_value)?;
    let start = Instant::now();
    let (model, params, out) = train_trial(spec, job.family, &job.structure, &train_point, job.trial)?;
    let train_ms = start.elapsed().as_secs_f64() * 1e3;
    let tail = out.tail_mean(TAIL);
    let mut se = Vec::new();
    for &v in &job.test_values {
        let p = spec.point(v)?;
        let m = if p.system == train_point.system {
            model.clone()
        } else {
            Model::new(model.config.clone(), p.system.clone()).map_err(|e| {
                ExpError::InvalidSpec(format!("model trained at {} cannot run at {v}: {e}", job.train_value))
            })?
        };
        let set = trial_test_set(spec, &p, job.trial)?;
        let stats = evaluate(&m, &params, &set, derive_seed(spec.seed, STREAM_SAMPLING, job.trial as u64))?;
        se.push((v, stats.mean_se));
    }
    Ok(JobResult {
        se,
        a_term: tail.a_term,
        e_term: tail.e_term,
        param_count: params.scalar_count(),
        train_ms,
    })
}

/// WMMSE on the observed channel, and WMMSE on the true channel.
pub fn baseline_solvers(
    head: HeadKind,
    r: &ChannelRealization,
    sys: &mdgnn::channel::SystemConfig,
    perfect: bool,
) -> mdgnn::Result<Solution> {
    let h = if perfect { &r.h_true } else { &r.h_observed };
    let w = WmmseConfig::default();
    Ok(match head {
        HeadKind::Precoding => Solution::Precoding(wmmse_precoding(h, sys, &w)?.solution),
        HeadKind::Power { basis } => {
            let b = basis.build(h, sys)?;
            Solution::Power(wmmse_power(h, &b, sys, &w)?.solution)
        }
    })
}

fn baseline_rows(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    let head = spec.task.head();
    let mut rows = Vec::new();
    for &v in &spec.grid {
        let p = spec.point(v)?;
        for (name, perfect) in [(WMMSE, false), (UPPER_BOUND, true)] {
            let trial_se: Vec<f64> = (0..spec.trials)
                .map(|t| {
                    let set = trial_test_set(spec, &p, t)?;
                    Ok(evaluate_solver(&set, &p.system, |r| baseline_solvers(head, r, &p.system, perfect))?.mean_se)
                })
                .collect::<Result<_>>()?;
            rows.push(row(spec, name, BASELINE_STRUCTURE, v, None, &trial_se, 0.0, 0.0, 0, 0.0));
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn row(
    spec: &ExperimentSpec,
    family: &str,
    structure: &str,
    value: f64,
    train_value: Option<f64>,
    trial_se: &[f64],
    a_term: f64,
    e_term: f64,
    param_count: usize,
    train_ms: f64,
) -> ResultRow {
    let (mean_se, std_se) = mean_std(trial_se);
    ResultRow {
        schema_version: SCHEMA_VERSION,
        task: spec.task.name().into(),
        family: family.into(),
        structure: structure.into(),
        axis: spec.axis.name().into(),
        value,
        train_value,
        mean_se,
        std_se,
        a_term,
        e_term,
        param_count,
        train_ms,
        trials: trial_se.len(),
        trial_se: trial_se.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";"),
    }
}

fn jobs(spec: &ExperimentSpec) -> Vec<Job> {
    let mut out = Vec::new();
    let mut targets: Vec<(f64, Vec<f64>)> = match spec.transfer_from {
        Some(t) => vec![(t, spec.grid.clone())],
        None => spec.grid.iter().map(|&v| (v, vec![v])).collect(),
    };
    targets.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    for (train_value, test_values) in targets {
        for &family in &spec.families {
            let structures = if family.is_vertex() {
                vec![VERTEX_STRUCTURE.to_string()]
            } else {
                spec.structures.clone()
            };
            for structure in structures {
                for trial in 0..spec.trials {
                    out.push(Job {
                        family,
                        structure: structure.clone(),
                        train_value,
                        test_values: test_values.clone(),
                        trial,
                    });
                }
            }
        }
    }
    out
}

/// Runs every (family, structure, grid point, trial) combination. Jobs run on
/// the current rayon pool; rows come back in grid, baseline, family order and
/// are a pure function of the `ExperimentSpec`.
pub fn run(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let jobs = jobs(spec);
    let results: Vec<JobResult> = jobs.par_iter().map(|j| run_job(spec, j)).collect::<Result<_>>()?;
    let baselines = if spec.baselines { baseline_rows(spec)? } else { Vec::new() };

    let mut rows = Vec::new();
    for &v in &spec.grid {
        rows.extend(baselines.iter().filter(|r| r.value == v).cloned());
        let mut i = 0;
        while i < jobs.len() {
            let j = &jobs[i];
            let group: Vec<usize> = (i..jobs.len())
                .take_while(|&k| {
                    jobs[k].family == j.family && jobs[k].structure == j.structure && jobs[k].train_value == j.train_value
                })
                .collect();
            i += group.len();
            if !j.test_values.contains(&v) {
                continue;
            }
            let se: Vec<f64> = group
                .iter()
                .map(|&k| results[k].se.iter().find(|(x, _)| *x == v).map(|p| p.1).unwrap_or(f64::NAN))
                .collect();
            let n = group.len() as f64;
            let avg = |f: fn(&JobResult) -> f64| group.iter().map(|&k| f(&results[k])).sum::<f64>() / n;
            rows.push(row(
                spec,
                j.family.name(),
                &j.structure,
                v,
                spec.transfer_from,
                &se,
                avg(|r| r.a_term),
                avg(|r| r.e_term),
                results[group[0]].param_count,
                avg(|r| r.train_ms),
            ));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{Axis, Budget, Task};

    fn tiny() -> ExperimentSpec {
        ExperimentSpec {
            families: vec![Family::EdgeMdgnn, Family::VertexGnn],
            grid: vec![0.1, 1.0],
            trials: 2,
            system: mdgnn::channel::SystemConfig::new(3, 2, 2),
            budget: Budget {
                hidden: 3,
                layers: 1,
                steps: 3,
                batch_size: 2,
                test_draws: 4,
                ..Budget::default()
            },
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn default_precoding_run_has_wmmse_at_each_point() {
        let spec = tiny();
        let rows = run(&spec).unwrap();
        for &v in &spec.grid {
            assert!(rows.iter().any(|r| r.family == WMMSE && r.value == v));
            assert!(rows.iter().any(|r| r.family == UPPER_BOUND && r.value == v));
        }
        assert_eq!(rows.len(), 2 * (2 + 2));
        assert!(rows.iter().all(|r| r.std_se >= 0.0 && r.trials == 2));
    }

    #[test]
    fn rows_are_reproducible() {
        // Wall time is the one column that is not a function of the experiment settings.
        let spec = tiny();
        let strip = |mut rows: Vec<ResultRow>| {
            rows.iter_mut().for_each(|r| r.train_ms = 0.0);
            rows
        };
        assert_eq!(strip(run(&spec).unwrap()), strip(run(&spec).unwrap()));
    }

    #[test]
    fn transfer_evaluates_trained_model_at_each_size() {
        let spec = ExperimentSpec {
            task: Task::PowerZf,
            families: vec![Family::EdgeMdgnn],
            axis: Axis::Ues,
            grid: vec![2.0, 3.0],
            transfer_from: Some(2.0),
            baselines: false,
            ..tiny()
        };
        let rows = run(&spec).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.train_value == Some(2.0)));
        assert_eq!(rows[0].param_count, rows[1].param_count);
    }

    #[test]
    fn mean_std_of_constant_is_zero() {
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
