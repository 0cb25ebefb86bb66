//! Contrastive steering-vector extraction and its diagnostics.
//!
//! Each problem is encoded twice, once behind the deliberative marker and
//! once behind the direct marker. The normalized sum of the activation
//! differences at one layer is the steering vector.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Mode, Token};
use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, RngStream, Vector};
use crate::tasks::{self, TaskInstance, LEVELS};

pub const STEERING_SCHEMA_VERSION: u32 = 1;
/// Problems used for extraction unless configured otherwise.
pub const DEFAULT_EXTRACTION_SIZE: usize = 256;

/// A unit steering direction extracted at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub direction: Vector,
    pub layer: usize,
    /// Number of contrastive pairs used.
    pub n: usize,
    /// Norm of the aggregate difference before normalization.
    pub raw_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct SteeringFile {
    schema_version: u32,
    layer: usize,
    n: usize,
    raw_norm: f64,
    direction: Vector,
    backbone_checksum: String,
}

impl SteeringVector {
    pub fn dim(&self) -> usize {
        self.direction.dim()
    }

    pub fn save_json(&self, backbone: &Backbone) -> Result<String> {
        let file = SteeringFile {
            schema_version: STEERING_SCHEMA_VERSION,
            layer: self.layer,
            n: self.n,
            raw_norm: self.raw_norm,
            direction: self.direction.clone(),
            backbone_checksum: backbone.checksum().to_string(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Loads a steering vector, refusing files extracted from another backbone.
    pub fn load_json(text: &str, backbone: &Backbone) -> Result<SteeringVector> {
        let file: SteeringFile = serde_json::from_str(text)?;
        if file.schema_version != STEERING_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: STEERING_SCHEMA_VERSION,
                found: file.schema_version,
            });
        }
        if file.backbone_checksum != backbone.checksum() {
            return Err(Error::ChecksumMismatch {
                expected: backbone.checksum().to_string(),
                found: file.backbone_checksum,
            });
        }
        if file.direction.dim() != backbone.dim() {
            return Err(Error::DimensionMismatch {
                expected: backbone.dim(),
                got: file.direction.dim(),
            });
        }
        if (file.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("steering direction is not unit norm"));
        }
        Ok(SteeringVector {
            direction: file.direction,
            layer: file.layer,
            n: file.n,
            raw_norm: file.raw_norm,
        })
    }
}

/// Paired prompts that differ only in their leading marker.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSet {
    positive: Vec<Vec<Token>>,
    negative: Vec<Vec<Token>>,
}

impl ContrastiveSet {
    /// Deliberative and direct variants of each problem.
    pub fn from_problems(problems: &[Vec<Token>]) -> Result<ContrastiveSet> {
        let with = |mode: Mode| -> Vec<Vec<Token>> {
            problems
                .iter()
                .map(|p| std::iter::once(mode.token()).chain(p.iter().copied()).collect())
                .collect()
        };
        ContrastiveSet::from_pairs(with(Mode::Deliberative), with(Mode::Direct))
    }

    pub fn from_tasks(tasks: &[TaskInstance]) -> Result<ContrastiveSet> {
        let problems: Vec<Vec<Token>> = tasks.iter().map(|t| t.problem.clone()).collect();
        ContrastiveSet::from_problems(&problems)
    }

    /// `n` problems with levels drawn uniformly from 1 to 5.
    pub fn sample(seed: u64, n: usize) -> Result<ContrastiveSet> {
        let mut rng = RngStream::new(seed, "steering");
        let tasks = (0..n)
            .map(|_| {
                let level = 1 + rng.below(LEVELS.len() as u64) as u8;
                tasks::instance(seed, level, (1 << 31) | rng.below(1 << 31) as u32)
            })
            .collect::<Result<Vec<_>>>()?;
        ContrastiveSet::from_tasks(&tasks)
    }

    /// Explicit pairs; each pair must agree on everything after the first token.
    pub fn from_pairs(positive: Vec<Vec<Token>>, negative: Vec<Vec<Token>>) -> Result<ContrastiveSet> {
        if positive.is_empty() {
            return Err(Error::invalid("contrastive set must contain at least one pair"));
        }
        if positive.len() != negative.len() {
            return Err(Error::invalid("positive and negative sets differ in size"));
        }
        for (p, n) in positive.iter().zip(&negative) {
            if p.is_empty() || n.is_empty() || p[1..] != n[1..] {
                return Err(Error::invalid("paired prompts must differ only in the marker token"));
            }
        }
        Ok(ContrastiveSet { positive, negative })
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    /// Activation difference of every pair at `layer`.
    pub fn differences(&self, backbone: &Backbone, layer: usize) -> Result<Vec<Vector>> {
        check_layer(backbone, layer)?;
        self.positive
            .iter()
            .zip(&self.negative)
            .map(|(p, n)| {
                let hp = backbone.encode(p)?;
                let hn = backbone.encode(n)?;
                hp.per_layer[layer].sub(&hn.per_layer[layer])
            })
            .collect()
    }
}

fn check_layer(backbone: &Backbone, layer: usize) -> Result<()> {
    if layer >= backbone.num_layers() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for a {}-layer backbone",
            backbone.num_layers()
        )));
    }
    Ok(())
}

/// Second-to-last layer.
pub fn default_layer(backbone: &Backbone) -> usize {
    backbone.num_layers() - 2
}

fn sum_vectors(vs: &[&Vector]) -> Vec<f64> {
    let mut total = vec![0.0; vs[0].dim()];
    for v in vs {
        total.iter_mut().zip(v.as_slice()).for_each(|(t, x)| *t += x);
    }
    total
}

fn normalize(sum: Vec<f64>, layer: usize, n: usize) -> Result<SteeringVector> {
    let raw_norm = crate::numerics::norm(&sum);
    if !(raw_norm >= 1e-12) {
        return Err(Error::DegenerateContrast(raw_norm));
    }
    let direction = Vector::new(sum.into_iter().map(|x| x / raw_norm).collect())?;
    Ok(SteeringVector {
        direction,
        layer,
        n,
        raw_norm,
    })
}

/// Unnormalized aggregate difference at `layer`.
pub fn aggregate(backbone: &Backbone, set: &ContrastiveSet, layer: usize) -> Result<Vector> {
    let diffs = set.differences(backbone, layer)?;
    Vector::new(sum_vectors(&diffs.iter().collect::<Vec<_>>()))
}

pub fn extract(backbone: &Backbone, set: &ContrastiveSet, layer: usize) -> Result<SteeringVector> {
    let total = aggregate(backbone, set, layer)?;
    normalize(total.into_inner(), layer, set.len())
}

/// Mean angular error of an `n`-pair estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub n: usize,
    /// Mean angle in radians to the full-pool estimate.
    pub mean_angle: f64,
}

/// Angular error of steering estimates built from random subsets of `pool`.
///
/// The estimate from the whole pool stands in for the true direction, so the
/// pool should be much larger than the largest requested size.
pub fn convergence_probe(
    backbone: &Backbone,
    pool: &ContrastiveSet,
    layer: usize,
    sizes: &[usize],
    trials: usize,
    rng: &mut RngStream,
) -> Result<Vec<ConvergencePoint>> {
    if trials < 10 {
        return Err(Error::invalid("convergence probe needs at least 10 trials"));
    }
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::invalid("sizes must be positive and strictly increasing"));
    }
    if *sizes.last().expect("nonempty") > pool.len() {
        return Err(Error::invalid("largest size exceeds the pool"));
    }
    let diffs = pool.differences(backbone, layer)?;
    let truth = normalize(sum_vectors(&diffs.iter().collect::<Vec<_>>()), layer, diffs.len())?;
    sizes
        .iter()
        .map(|&n| {
            let mut total = 0.0;
            for _ in 0..trials {
                let picks = rng.permutation(diffs.len());
                let subset: Vec<&Vector> = picks[..n].iter().map(|&i| &diffs[i]).collect();
                let est = normalize(sum_vectors(&subset), layer, n)?;
                let cos = est.direction.dot(&truth.direction)?.clamp(-1.0, 1.0);
                total += cos.acos();
            }
            Ok(ConvergencePoint {
                n,
                mean_angle: total / trials as f64,
            })
        })
        .collect()
}

/// `KL(decode(z0 + alpha h) || decode(z0))`.
pub fn reasoning_divergence(
    backbone: &Backbone,
    z0: &Vector,
    steering: &SteeringVector,
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid("steering strength must be non-negative"));
    }
    let base = backbone.decode(z0)?;
    let steered = backbone.decode(&z0.add_scaled(alpha, &steering.direction)?)?;
    kl_divergence(&steered.probs, &base.probs)
}
