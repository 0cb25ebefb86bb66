use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::train::{Event, LogRow};
use super::SCHEMA_VERSION;

/// Columns of the training log that become series in the tidy plot table.
pub const SERIES: [&str; 14] = [
    "teacher_prob",
    "temperature",
    "mean_steps",
    "mean_flops",
    "diversity",
    "batch_accuracy",
    "r_acc",
    "r_flops",
    "r_comp",
    "r_qual",
    "r_rep",
    "r_total",
    "grad_norm",
    "reward_ema",
];

pub fn write_log<W: Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>()?;
    Ok(rows)
}

pub fn write_events<W: Write>(events: &[Event], mut out: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events<R: BufRead>(input: R) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One point of a long-format plotting table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub schema_version: u32,
    pub step: usize,
    pub series: String,
    pub value: f64,
}

/// Reshapes a training log into `(step, series, value)` rows, optionally
/// smoothed with a trailing moving average over `window` steps.
pub fn tidy(rows: &[LogRow], window: usize) -> Result<Vec<TidyRow>> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(rows.len() * SERIES.len());
    let values: Vec<serde_json::Map<String, serde_json::Value>> = rows
        .iter()
        .map(|r| match serde_json::to_value(r) {
            Ok(serde_json::Value::Object(m)) => Ok(m),
            Ok(_) => unreachable!("log rows serialize to objects"),
            Err(e) => Err(e.into()),
        })
        .collect::<Result<_>>()?;
    for series in SERIES {
        let xs: Vec<f64> = values.iter().map(|m| m[series].as_f64().unwrap_or(f64::NAN)).collect();
        for (i, r) in rows.iter().enumerate() {
            let lo = (i + 1).saturating_sub(window);
            let slice = &xs[lo..=i];
            out.push(TidyRow {
                schema_version: SCHEMA_VERSION,
                step: r.step,
                series: series.to_string(),
                value: slice.iter().sum::<f64>() / slice.len() as f64,
            });
        }
    }
    Ok(out)
}

pub fn write_tidy<W: Write>(rows: &[TidyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
