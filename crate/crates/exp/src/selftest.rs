//! Quick sanity checks run by the `selftest` subcommand.

use mdgnn::channel::{generate_channel, SystemConfig};
use mdgnn::gib::Solution;
use mdgnn::model::{Family, HeadKind, Mode, Model, ModelConfig};
use mdgnn::perm::{build_graph, TaskKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::report::format_percent;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn percent_cells() -> Check {
    let a = format_percent(30.04, 24.75);
    let b = format_percent(16.13, 24.75);
    check("percent-cells", a == "+21.37%" && b == "-34.83%", format!("{a}, {b}"))
}

fn block_counts() -> Check {
    let sys = SystemConfig::new(10, 4, 4);
    let want = [2, 2, 2, 3, 3, 3, 4];
    let got: Vec<usize> = mdgnn::perm::STRUCTURE_ROWS
        .iter()
        .map(|row| {
            let task = if row.contains('U') { TaskKind::Precoding } else { TaskKind::Power };
            build_graph(task, row, false, true, &sys).map_or(0, |g| g.block_count())
        })
        .collect();
    check("block-counts", got == want, format!("{got:?}"))
}

/// Swapping two UEs in the input swaps them in the output.
fn ue_equivariance() -> Check {
    let run = || -> mdgnn::Result<f64> {
        let sys = SystemConfig::new(3, 2, 2);
        let cfg = ModelConfig::new(Family::EgibBern, HeadKind::Precoding, "3D-GNN-L-K-U", 4, 2, &sys)?;
        let model = Model::new(cfg, sys)?;
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let real = generate_channel(&model.sys, 0.1, 6)?;
        let (ap, ue, ant) = ([0, 1, 2], [1, 0], [1, 0]);
        let permuted = real.h_observed.permuted(&ap, &ue, &ant);
        let out = |h| -> mdgnn::Result<mdgnn::channel::ChannelTensor> {
            let f = model.forward(&params, h, Mode::Expected, &mut ChaCha8Rng::seed_from_u64(0))?;
            match f.solution()? {
                Solution::Precoding(w) => Ok(w.w),
                Solution::Power(p) => Ok(p.effective_precoder().w),
            }
        };
        let a = out(&real.h_observed)?.permuted(&ap, &ue, &ant);
        let b = out(&permuted)?;
        Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max))
    };
    match run() {
        Ok(d) => check("ue-equivariance", d <= 1e-10, format!("max deviation {d:.2e}")),
        Err(e) => check("ue-equivariance", false, e.to_string()),
    }
}

pub fn run_all() -> Vec<Check> {
    vec![percent_cells(), block_counts(), ue_equivariance()]
}
