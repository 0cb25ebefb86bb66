//! Synthetic chained-arithmetic tasks in five difficulty levels.
//!
//! A level-`n` problem is a single digit followed by `n` (operator, digit)
//! pairs, evaluated left to right without precedence. Level 1 is always a
//! single addition; higher levels mix `+`, `-` and `*`. Every intermediate
//! value stays within `0..=MAX_VALUE`, so answers are small integers and
//! exact float comparison is safe.

use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::backbone::{Mode, Token};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const LEVELS: RangeInclusive<u8> = 1..=5;
pub const MAX_VALUE: i64 = 19;
/// Instances per level in the pinned evaluation suite.
pub const SUITE_PER_LEVEL: usize = 200;
pub const TASKS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub level: u8,
    /// Problem tokens without the mode marker.
    pub problem: Vec<Token>,
    pub answer: f64,
}

impl TaskInstance {
    /// Prompt with the mode marker in front.
    pub fn prompt(&self, mode: Mode) -> Vec<Token> {
        let mut p = Vec::with_capacity(self.problem.len() + 1);
        p.push(mode.token());
        p.extend_from_slice(&self.problem);
        p
    }

    /// The ideal decoded output: every stage marker around the answer digits.
    pub fn reference_output(&self) -> Vec<Token> {
        let mut out = vec![Token::SETUP, Token::COMPUTE];
        out.extend(Token::digits_of(self.answer as u64));
        out.extend([Token::VERIFY, Token::CONCLUDE]);
        out
    }

    fn from_stream(id: u64, level: u8, rng: &mut RngStream) -> TaskInstance {
        let mut acc = rng.below(10) as i64;
        let mut problem = vec![Token::digit(acc as u8)];
        for _ in 0..level {
            let ops: &[Token] = if level == 1 {
                &[Token::PLUS]
            } else {
                &[Token::PLUS, Token::MINUS, Token::TIMES]
            };
            loop {
                let op = ops[rng.below(ops.len() as u64) as usize];
                let valid: Vec<i64> = (0..10)
                    .filter(|&b| (0..=MAX_VALUE).contains(&apply(op, acc, b)))
                    .collect();
                if valid.is_empty() {
                    continue;
                }
                let b = valid[rng.below(valid.len() as u64) as usize];
                acc = apply(op, acc, b);
                problem.push(op);
                problem.push(Token::digit(b as u8));
                break;
            }
        }
        TaskInstance {
            id,
            level,
            problem,
            answer: acc as f64,
        }
    }
}

fn apply(op: Token, a: i64, b: i64) -> i64 {
    match op {
        Token::PLUS => a + b,
        Token::MINUS => a - b,
        Token::TIMES => a * b,
        _ => unreachable!("not an operator"),
    }
}

fn check_level(level: u8) -> Result<()> {
    if !LEVELS.contains(&level) {
        return Err(Error::invalid(format!("task level {level} outside 1..=5")));
    }
    Ok(())
}

/// Instance `index` of `level`: a pure function of `(seed, level, index)`.
pub fn instance(seed: u64, level: u8, index: u32) -> Result<TaskInstance> {
    check_level(level)?;
    let id = ((level as u64) << 32) | index as u64;
    let mut rng = RngStream::new(seed, "tasks").fork(id);
    Ok(TaskInstance::from_stream(id, level, &mut rng))
}

pub fn generate(level: u8, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    check_level(level)?;
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    (0..count as u32).map(|i| instance(seed, level, i)).collect()
}

/// Concatenates `count` instances of each requested level.
pub fn generate_mixed(counts: &[(u8, usize)], seed: u64) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for &(level, count) in counts {
        out.extend(generate(level, count, seed)?);
    }
    Ok(out)
}

/// `per_level` instances of every level.
pub fn suite(seed: u64, per_level: usize) -> Result<Vec<TaskInstance>> {
    let counts: Vec<(u8, usize)> = LEVELS.map(|l| (l, per_level)).collect();
    generate_mixed(&counts, seed)
}

/// The pinned 1,000-task evaluation suite.
pub fn pinned_suite(seed: u64) -> Vec<TaskInstance> {
    suite(seed, SUITE_PER_LEVEL).expect("valid levels")
}

/// A training batch for step `step`: levels uniform, instances fresh per step.
pub fn training_batch(seed: u64, step: u64, size: usize) -> Vec<TaskInstance> {
    let stream = RngStream::new(seed, "tasks/train").fork(step);
    (0..size)
        .map(|i| {
            let mut rng = stream.fork(i as u64);
            let level = 1 + rng.below(LEVELS.len() as u64) as u8;
            TaskInstance::from_stream(step * size as u64 + i as u64, level, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grade {
    pub exact: bool,
    pub rel_error: f64,
}

pub fn grade(pred: f64, truth: f64) -> Grade {
    let err = (pred - truth).abs();
    Grade {
        exact: err <= 1e-9,
        rel_error: err / (truth.abs() + 1e-8),
    }
}

#[derive(Serialize, Deserialize)]
struct TaskLine<T> {
    schema_version: u32,
    #[serde(flatten)]
    task: T,
}

pub fn write_jsonl<W: Write>(tasks: &[TaskInstance], mut out: W) -> Result<()> {
    for task in tasks {
        let line = TaskLine {
            schema_version: TASKS_SCHEMA_VERSION,
            task,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let TaskLine { schema_version, task } = serde_json::from_str::<TaskLine<TaskInstance>>(&line)?;
        if schema_version != TASKS_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: TASKS_SCHEMA_VERSION,
                found: schema_version,
            });
        }
        check_level(task.level)?;
        out.push(task);
    }
    Ok(out)
}
