use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::eval::{evaluate, EvalReport, Policy};
use super::train::{train, Setup};
use super::SCHEMA_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Halting threshold, evaluated on a fixed controller.
    Tau,
    /// FLOPs penalty weight, one training run per value.
    Lambda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub schema_version: u32,
    pub axis: Axis,
    pub knob: f64,
    pub accuracy: f64,
    pub avg_flops: f64,
    pub log10_flops: f64,
    pub avg_steps: f64,
}

impl FrontierRow {
    fn from_report(axis: Axis, knob: f64, r: &EvalReport) -> FrontierRow {
        FrontierRow {
            schema_version: SCHEMA_VERSION,
            axis,
            knob,
            accuracy: r.accuracy,
            avg_flops: r.avg_flops,
            log10_flops: r.log10_flops,
            avg_steps: r.avg_steps,
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sweep grid"));
    }
    Ok(())
}

/// Sorts by FLOPs, then by knob.
fn sorted(mut rows: Vec<FrontierRow>) -> Vec<FrontierRow> {
    rows.sort_by(|a, b| a.avg_flops.total_cmp(&b.avg_flops).then(a.knob.total_cmp(&b.knob)));
    rows
}

/// Evaluates one controller at each halting threshold in `grid`.
pub fn tau_sweep(config: &TrainConfig, setup: &Setup, controller: &Controller, grid: &[f64]) -> Result<Vec<FrontierRow>> {
    check_grid(grid)?;
    let state = super::train::TrainState::fresh(config, setup.backbone.dim())?;
    grid.iter()
        .map(|&tau| {
            let mut ponder = config.ponder.clone();
            ponder.threshold = tau;
            let r = evaluate(
                &setup.backbone,
                &setup.steering,
                &ponder,
                &setup.suite,
                Policy::Controller(controller),
                &state.weights,
                &state.flops_stats,
            )?;
            Ok(FrontierRow::from_report(Axis::Tau, tau, &r))
        })
        .collect::<Result<_>>()
        .map(sorted)
}

/// Trains and evaluates one controller per FLOPs weight in `grid`.
pub fn lambda_sweep(config: &TrainConfig, grid: &[f64]) -> Result<Vec<FrontierRow>> {
    check_grid(grid)?;
    grid.iter()
        .map(|&lambda| {
            let mut c = config.clone();
            c.reward.lambda_flops = lambda;
            let outcome = train(&c, None)?;
            Ok(FrontierRow::from_report(Axis::Lambda, lambda, &outcome.report))
        })
        .collect::<Result<_>>()
        .map(sorted)
}

pub fn write_frontier<W: Write>(rows: &[FrontierRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
