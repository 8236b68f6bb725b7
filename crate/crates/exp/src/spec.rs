//! Experiment descriptions.

use mdgnn::baselines::BasisKind;
use mdgnn::channel::SystemConfig;
use mdgnn::model::{Family, HeadKind};
use serde::{Deserialize, Serialize};

use crate::error::{ExpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Precoding,
    PowerZf,
    PowerLmmse,
}

impl Task {
    pub fn head(self) -> HeadKind {
        match self {
            Task::Precoding => HeadKind::Precoding,
            Task::PowerZf => HeadKind::Power { basis: BasisKind::Zf },
            Task::PowerLmmse => HeadKind::Power { basis: BasisKind::Lmmse },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Precoding => "precoding",
            Task::PowerZf => "power-zf",
            Task::PowerLmmse => "power-lmmse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Task::Precoding, Task::PowerZf, Task::PowerLmmse]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| ExpError::InvalidSpec(format!("unknown task `{s}`")))
    }
}

/// The swept quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    #[default]
    SigmaISq,
    Beta,
    #[serde(rename = "M")]
    Aps,
    #[serde(rename = "K")]
    Ues,
    #[serde(rename = "N")]
    Antennas,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::SigmaISq => "sigma_i_sq",
            Axis::Beta => "beta",
            Axis::Aps => "M",
            Axis::Ues => "K",
            Axis::Antennas => "N",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Axis::SigmaISq, Axis::Beta, Axis::Aps, Axis::Ues, Axis::Antennas]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ExpError::InvalidSpec(format!("unknown axis `{s}`")))
    }

    pub fn is_size(self) -> bool {
        matches!(self, Axis::Aps | Axis::Ues | Axis::Antennas)
    }

    /// Log-scaled in plots.
    pub fn is_logarithmic(self) -> bool {
        matches!(self, Axis::SigmaISq | Axis::Beta)
    }
}

/// Model size and training budget shared by every family in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out draws per evaluation.
    pub test_draws: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            hidden: 16,
            layers: 2,
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            test_draws: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub task: Task,
    pub families: Vec<Family>,
    /// Structure rows for the edge families, e.g. `2D-GNN-L-K`.
    pub structures: Vec<String>,
    pub nested: bool,
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Values used for quantities that are not swept.
    pub system: SystemConfig,
    pub sigma_i_sq: f64,
    /// Read `sigma_i_sq` values (fixed or swept) as standard deviations and
    /// square them before use.
    pub sigma_is_std: bool,
    pub beta: f64,
    /// Train once at this axis value and test at every grid value.
    pub transfer_from: Option<f64>,
    pub budget: Budget,
    /// Emit WMMSE and upper-bound rows.
    pub baselines: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            task: Task::Precoding,
            families: vec![Family::EgibBern, Family::EibMdgnn, Family::EdgeMdgnn, Family::VertexGnn],
            structures: vec!["2D-GNN-L-K".into()],
            nested: false,
            axis: Axis::SigmaISq,
            grid: sigma_grid(),
            trials: 3,
            seed: 0,
            system: SystemConfig::new(10, 4, 4),
            sigma_i_sq: 0.1,
            sigma_is_std: false,
            beta: 1e-4,
            transfer_from: None,
            budget: Budget::default(),
            baselines: true,
        }
    }
}

/// `{1e-2, 1e-1, 1, 10^0.5, 10}`.
pub fn sigma_grid() -> Vec<f64> {
    vec![1e-2, 1e-1, 1.0, 10f64.powf(0.5), 10.0]
}

/// `{1e-1, ..., 1e-5}`.
pub fn beta_grid() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
}

/// Train with three UEs, test with four to eight.
pub fn transfer_default() -> ExperimentSpec {
    ExperimentSpec {
        axis: Axis::Ues,
        grid: vec![4.0, 5.0, 6.0, 7.0, 8.0],
        transfer_from: Some(3.0),
        ..ExperimentSpec::default()
    }
}

fn as_size(v: f64, axis: Axis) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e6 {
        Ok(v as usize)
    } else {
        Err(ExpError::InvalidSpec(format!("{} must be a positive integer, got {v}", axis.name())))
    }
}

/// Setting of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub system: SystemConfig,
    pub sigma_i_sq: f64,
    pub beta: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExpError::InvalidSpec(m.into()));
        if self.grid.is_empty() {
            return bad("grid is empty");
        }
        if self.trials == 0 {
            return bad("trials must be >= 1");
        }
        if self.families.is_empty() && !self.baselines {
            return bad("nothing to run: no families and baselines disabled");
        }
        if self.families.iter().any(|f| !f.is_vertex()) && self.structures.is_empty() {
            return bad("edge families need at least one structure row");
        }
        if self.budget.steps == 0 || self.budget.batch_size == 0 || self.budget.layers == 0 || self.budget.hidden == 0 {
            return bad("budget sizes must be >= 1");
        }
        if self.budget.test_draws == 0 {
            return bad("test_draws must be >= 1");
        }
        if self.transfer_from.is_some() && !self.axis.is_size() {
            return bad("transfer runs sweep M, K or N");
        }
        for &v in self.grid.iter().chain(self.transfer_from.iter()) {
            self.point(v)?;
        }
        Ok(())
    }

    /// System, noise level and tradeoff at axis value `v`.
    pub fn point(&self, v: f64) -> Result<Point> {
        if !v.is_finite() {
            return Err(ExpError::InvalidSpec(format!("grid value {v} is not finite")));
        }
        let s = &self.system;
        let mut p = Point {
            system: s.clone(),
            sigma_i_sq: self.sigma_i_sq,
            beta: self.beta,
        };
        match self.axis {
            Axis::SigmaISq => p.sigma_i_sq = v,
            Axis::Beta => p.beta = v,
            Axis::Aps => p.system = s.resized(as_size(v, self.axis)?, s.ues, s.antennas),
            Axis::Ues => p.system = s.resized(s.aps, as_size(v, self.axis)?, s.antennas),
            Axis::Antennas => p.system = s.resized(s.aps, s.ues, as_size(v, self.axis)?),
        }
        if p.sigma_i_sq < 0.0 || p.beta < 0.0 {
            return Err(ExpError::InvalidSpec(format!("negative {} value {v}", self.axis.name())));
        }
        if self.sigma_is_std {
            p.sigma_i_sq *= p.sigma_i_sq;
        }
        p.system.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_interpretation_squares_sigma() {
        let spec = ExperimentSpec {
            sigma_is_std: true,
            ..ExperimentSpec::default()
        };
        assert_eq!(spec.point(0.1).unwrap().sigma_i_sq, 0.1 * 0.1);
        assert_eq!(ExperimentSpec::default().point(0.1).unwrap().sigma_i_sq, 0.1);
    }

    #[test]
    fn default_sigma_grid_spans_two_decades_up() {
        let g = sigma_grid();
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 1e-2);
        assert_eq!(g[4], 10.0);
        assert!((g[3] - 3.1622776601683795).abs() < 1e-15);
    }

    #[test]
    fn transfer_trains_on_three_ues() {
        let t = transfer_default();
        assert_eq!(t.transfer_from, Some(3.0));
        assert_eq!(t.grid, vec![4.0, 5.0, 6.0, 7.0, 8.0]);
        t.validate().unwrap();
    }

    #[test]
    fn rejects_bad_specs() {
        let empty = ExperimentSpec {
            grid: vec![],
            ..ExperimentSpec::default()
        };
        assert!(empty.validate().is_err());
        let no_trials = ExperimentSpec {
            trials: 0,
            ..ExperimentSpec::default()
        };
        assert!(no_trials.validate().is_err());
        let frac = ExperimentSpec {
            axis: Axis::Ues,
            grid: vec![2.5],
            ..ExperimentSpec::default()
        };
        assert!(frac.validate().is_err());
    }

    #[test]
    fn points_follow_axis() {
        let s = ExperimentSpec {
            axis: Axis::Antennas,
            grid: vec![2.0],
            ..ExperimentSpec::default()
        };
        let p = s.point(2.0).unwrap();
        assert_eq!((p.system.aps, p.system.ues, p.system.antennas), (10, 4, 2));
        assert_eq!(p.sigma_i_sq, 0.1);
    }

    #[test]
    fn spec_json_round_trip() {
        let s = ExperimentSpec::default();
        let text = serde_json::to_string(&s).unwrap();
        let back: ExperimentSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let partial: ExperimentSpec = serde_json::from_str(r#"{"axis":"K","grid":[3,4]}"#).unwrap();
        assert_eq!(partial.axis, Axis::Ues);
        assert_eq!(partial.trials, 3);
    }
}
