//! `train-toy`: the toy regression task with both expert backends, the
//! naive-router grouped reference and a run with the balancer disabled.

use latentmoe::layer::{ExecConfig, RouterMode};
use latentmoe::train::{train_toy, TrainLog};
use latentmoe::ExpertBackend;

use crate::bundle::Bundle;
use crate::config::RunConfig;
use crate::svg::{line_chart, Series};
use crate::{Check, CliError};

/// Loss agreement required between runs that differ only in kernels.
pub const BACKEND_TOLERANCE: f64 = 1e-4;
/// Steps averaged when comparing late balance ratios.
pub const BALANCE_TAIL: usize = 20;

/// Runs every variant in FP64. Returns logs in the order block-sparse,
/// grouped, reference, no-balance.
pub fn train_runs(cfg: &RunConfig) -> Result<Vec<TrainLog>, CliError> {
    let dims = cfg.train.model.dims();
    let tc = cfg.train.train_config();
    let base = cfg.exec();
    let bs = ExecConfig { backend: ExpertBackend::BlockSparse, router: RouterMode::IoAware, ..base };
    let grouped = ExecConfig { backend: ExpertBackend::Grouped, router: RouterMode::IoAware, ..base };
    let reference = ExecConfig { backend: ExpertBackend::Grouped, router: RouterMode::Naive, ..base };
    let no_balance = latentmoe::train::TrainConfig { balance_rate: 0.0, ..tc.clone() };
    let mut logs = Vec::with_capacity(4);
    for (name, exec, t) in [
        ("block-sparse", bs, &tc),
        ("grouped", grouped, &tc),
        ("reference", reference, &tc),
        ("no-balance", bs, &no_balance),
    ] {
        let (log, _) = train_toy::<f64>(name, &dims, t, &exec, cfg.seed)?;
        logs.push(log);
    }
    Ok(logs)
}

pub fn train_checks(cfg: &RunConfig, logs: &[TrainLog]) -> Vec<Check> {
    let seed = cfg.seed;
    let (bs, grouped, reference, free) = (&logs[0], &logs[1], &logs[2], &logs[3]);
    let max_diff = |a: &TrainLog, b: &TrainLog| {
        a.losses().iter().zip(b.losses()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let mut checks = vec![
        Check::within("train", "backends_per_step_loss", seed, max_diff(bs, grouped), BACKEND_TOLERANCE),
        Check::within("train", "reference_per_step_loss", seed, max_diff(bs, reference), BACKEND_TOLERANCE),
    ];
    let l = bs.losses();
    let (first, last) = (l[0], l[l.len() - 1]);
    if cfg.train.lr == 0.0 {
        checks.push(Check::holds("train", "loss_constant_at_zero_lr", seed, l.iter().all(|&v| v == first)));
        return checks;
    }
    checks.push(Check::holds("train", "loss_decreases", seed, last < first));
    if cfg.train.balance_rate > 0.0 {
        let r = &bs.records;
        checks.push(Check::holds(
            "train",
            "balance_ratio_final_below_initial",
            seed,
            r[r.len() - 1].balance_ratio < r[0].balance_ratio,
        ));
        checks.push(Check::holds(
            "train",
            "balancer_beats_no_balance",
            seed,
            bs.tail_balance(BALANCE_TAIL) < free.tail_balance(BALANCE_TAIL),
        ));
    }
    checks
}

pub fn train_toy_cmd(cfg: &RunConfig, bundle: &mut Bundle) -> Result<Vec<Check>, CliError> {
    let logs = train_runs(cfg)?;
    let rows: Vec<Vec<String>> = logs
        .iter()
        .flat_map(|log| {
            log.records.iter().map(move |r| {
                vec![log.run.clone(), r.step.to_string(), r.loss.to_string(), r.balance_ratio.to_string()]
            })
        })
        .collect();
    bundle.write_csv("loss.csv", &["run", "step", "loss", "balance_ratio"], &rows)?;
    let loss: Vec<Series> = logs
        .iter()
        .map(|log| Series::new(log.run.clone(), log.records.iter().map(|r| (r.step as f64, r.loss)).collect()))
        .collect();
    bundle.write_text("loss.svg", &line_chart("Toy training loss", "step", "MSE", &loss))?;
    let balance: Vec<Series> = [&logs[0], &logs[3]]
        .iter()
        .map(|log| Series::new(log.run.clone(), log.records.iter().map(|r| (r.step as f64, r.balance_ratio)).collect()))
        .collect();
    bundle.write_text("balance.svg", &line_chart("Expert load max/mean", "step", "balance ratio", &balance))?;
    Ok(train_checks(cfg, &logs))
}
