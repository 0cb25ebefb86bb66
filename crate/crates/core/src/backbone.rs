//! A frozen toy encoder/decoder that stands in for a language model.
//!
//! The backbone pools a token prompt into a residual stream, runs it through
//! `L` residual `tanh` blocks and exposes the final-token state of every layer.
//! Its final layer also carries an exact "arithmetic pathway" for prompts that
//! parse as chained arithmetic: a code for the true answer, a code for a
//! shortcut (wrong) answer whose strength grows with the number of
//! operations, and a difficulty feature.
//!
//! The decoder reads both answer codes, but the true-answer code is gated by
//! the projection of the state onto a hidden planted unit direction `u`.
//! Moving the state along `u` therefore raises accuracy monotonically, and
//! harder problems need a larger displacement before the true answer wins.
//! The deliberative mode marker shifts the prompt's embedding along `u`, which
//! is what makes contrastive steering extraction recover it.
//!
//! Weights are generated once from the seed and never change afterwards.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::HIDDEN;
use crate::error::{Error, Result};
use crate::numerics::{check_dims, checksum_f64, dot, softmax, softplus, RngStream, Vector};

pub const BACKBONE_SCHEMA_VERSION: u32 = 1;

/// Period of the positional embedding table.
const POSITIONS: usize = 32;
/// Minimum projection on the planted direction for the decoder to emit a
/// computation marker.
const COMPUTE_MARKER_PROJECTION: f64 = 0.25;
const VERIFY_CONFIDENCE: f64 = 0.9;
const CONCLUDE_CONFIDENCE: f64 = 0.5;

/// A vocabulary entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub const PLUS: Token = Token(10);
    pub const MINUS: Token = Token(11);
    pub const TIMES: Token = Token(12);
    /// Deliberative prompt marker ("think step by step").
    pub const THINK: Token = Token(13);
    /// Direct prompt marker ("the answer is").
    pub const DIRECT: Token = Token(14);
    pub const SETUP: Token = Token(15);
    pub const COMPUTE: Token = Token(16);
    pub const VERIFY: Token = Token(17);
    pub const CONCLUDE: Token = Token(18);

    /// Number of tokens in the standard vocabulary.
    pub const VOCAB_SIZE: usize = 19;

    pub fn digit(d: u8) -> Token {
        assert!(d < 10, "digit out of range");
        Token(d as u16)
    }

    pub fn as_digit(self) -> Option<u8> {
        (self.0 < 10).then_some(self.0 as u8)
    }

    pub fn is_marker(self) -> bool {
        self == Token::THINK || self == Token::DIRECT
    }

    pub fn is_stage_marker(self) -> bool {
        (Token::SETUP.0..=Token::CONCLUDE.0).contains(&self.0)
    }

    /// Digit tokens for a non-negative integer.
    pub fn digits_of(value: u64) -> Vec<Token> {
        value
            .to_string()
            .bytes()
            .map(|b| Token::digit(b - b'0'))
            .collect()
    }
}

/// Prompt mode marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deliberative,
    Direct,
}

impl Mode {
    pub fn token(self) -> Token {
        match self {
            Mode::Deliberative => Token::THINK,
            Mode::Direct => Token::DIRECT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub seed: u64,
    /// Displacement along the planted direction produced by the deliberative marker.
    pub planted_direction_scale: f64,
    /// Size of the answer alphabet: answers are the integers `0..answer_values`.
    pub answer_values: usize,
    /// Decoder logit scale.
    pub logit_scale: f64,
    /// Gain on each residual block's output.
    pub residual_gain: f64,
    /// Gain of the block input weights.
    pub block_input_gain: f64,
    /// How strongly the residual blocks read the planted coordinate.
    pub marker_coupling: f64,
    /// Shortcut-code strength per arithmetic operation.
    pub shortcut_per_op: f64,
    pub shortcut_offset: f64,
    /// Half-width of the per-problem jitter on the shortcut strength.
    pub shortcut_jitter: f64,
    /// Difficulty-feature coefficient per arithmetic operation.
    pub difficulty_per_op: f64,
    pub true_code_strength: f64,
    pub gate_sharpness: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: 64,
            num_layers: 4,
            seed: 0x5eed,
            planted_direction_scale: 1.0,
            answer_values: 20,
            logit_scale: 8.0,
            residual_gain: 0.3,
            block_input_gain: 3.0,
            marker_coupling: 0.25,
            shortcut_per_op: 0.35,
            shortcut_offset: -0.15,
            shortcut_jitter: 0.05,
            difficulty_per_op: 0.25,
            true_code_strength: 1.0,
            gate_sharpness: 10.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config("backbone dim must be at least 8".into()));
        }
        if self.num_layers < 2 {
            return Err(Error::Config("backbone needs at least 2 layers".into()));
        }
        if self.answer_values < 2 {
            return Err(Error::Config("answer alphabet needs at least 2 values".into()));
        }
        let positive = [
            ("planted_direction_scale", self.planted_direction_scale),
            ("logit_scale", self.logit_scale),
            ("true_code_strength", self.true_code_strength),
            ("gate_sharpness", self.gate_sharpness),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    /// `content_dim x dim`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Per-layer final-token activations of one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub per_layer: Vec<Vector>,
}

impl ActivationTrace {
    /// The final-layer state the pondering loop starts from.
    pub fn z0(&self) -> &Vector {
        self.per_layer.last().expect("trace has at least two layers")
    }

    pub fn layer(&self, layer: usize) -> Option<&Vector> {
        self.per_layer.get(layer)
    }
}

/// Decoder output for one latent state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    /// Probability of each answer value `0..answer_values`.
    pub probs: Vec<f64>,
    /// The most probable answer.
    pub value: f64,
    /// Rendered output: stage markers around the answer digits.
    pub tokens: Vec<Token>,
}

impl AnswerDistribution {
    pub fn confidence(&self) -> f64 {
        self.probs[self.value as usize]
    }

    /// `exp(-mean log p)` over the decoded answer symbol.
    pub fn perplexity_proxy(&self) -> f64 {
        (-self.confidence().max(1e-300).ln()).exp()
    }
}

/// A cost-model event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopEvent {
    Encode { prompt_len: usize },
    PonderStep,
    ControllerEval,
    Decode,
}

/// Parsed chained-arithmetic problem: left-to-right evaluation, no precedence.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParsedProblem {
    pub ops: usize,
    pub answer: i64,
    pub before_last: i64,
}

/// Parses `digit (op digit)*`; any other shape yields `None`.
pub(crate) fn parse_chain(tokens: &[Token]) -> Option<ParsedProblem> {
    if tokens.is_empty() || tokens.len() % 2 == 0 {
        return None;
    }
    let mut acc = tokens[0].as_digit()? as i64;
    let mut before_last = acc;
    for pair in tokens[1..].chunks(2) {
        let operand = pair[1].as_digit()? as i64;
        before_last = acc;
        acc = match pair[0] {
            Token::PLUS => acc + operand,
            Token::MINUS => acc - operand,
            Token::TIMES => acc * operand,
            _ => return None,
        };
    }
    Some(ParsedProblem {
        ops: tokens.len() / 2,
        answer: acc,
        before_last,
    })
}

/// The frozen backbone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    config: BackboneConfig,
    planted: Vec<f64>,
    difficulty_axis: Vec<f64>,
    answer_codes: Vec<Vec<f64>>,
    shortcut_codes: Vec<Vec<f64>>,
    content_basis: Vec<Vec<f64>>,
    token_embed: Vec<Vec<f64>>,
    position_embed: Vec<Vec<f64>>,
    direct_embed: Vec<f64>,
    blocks: Vec<Block>,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct BackboneFile {
    schema_version: u32,
    #[serde(flatten)]
    backbone: Backbone,
}

fn gram_schmidt(rng: &mut RngStream, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bi)| *x -= proj * bi);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn combine(basis: &[Vec<f64>], coords: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (b, c) in basis.iter().zip(coords) {
        out.iter_mut().zip(b).for_each(|(o, bi)| *o += c * bi);
    }
    out
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl Backbone {
    pub fn build(config: BackboneConfig) -> Result<Backbone> {
        config.validate()?;
        let d = config.dim;
        let values = config.answer_values;
        let mut rng = RngStream::new(config.seed, "backbone");
        let basis = gram_schmidt(&mut rng, d);

        // Layout: planted, difficulty, answer codes, shortcut codes, content.
        let min_content = (d / 8).max(2);
        let code_dims = values.min((d - 2 - min_content) / 2).max(1);
        let planted = basis[0].clone();
        let difficulty_axis = basis[1].clone();
        let answer_space = &basis[2..2 + code_dims];
        let shortcut_space = &basis[2 + code_dims..2 + 2 * code_dims];
        let content_basis: Vec<Vec<f64>> = basis[2 + 2 * code_dims..].to_vec();
        let content_dim = content_basis.len();

        let codes = |space: &[Vec<f64>], rng: &mut RngStream| -> Vec<Vec<f64>> {
            (0..values)
                .map(|j| {
                    if code_dims == values {
                        space[j].clone()
                    } else {
                        let coords: Vec<f64> = (0..code_dims).map(|_| rng.normal()).collect();
                        unit(combine(space, &coords, d))
                    }
                })
                .collect()
        };
        let answer_codes = codes(answer_space, &mut rng);
        let shortcut_codes = codes(shortcut_space, &mut rng);

        let embed_scale = 1.0 / (content_dim as f64).sqrt();
        let table = |rows: usize, rng: &mut RngStream, scale: f64| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..content_dim).map(|_| scale * rng.normal()).collect())
                .collect()
        };
        let token_embed = table(Token::VOCAB_SIZE, &mut rng, embed_scale);
        let position_embed = table(POSITIONS, &mut rng, 1.0);
        let direct_embed: Vec<f64> = (0..content_dim)
            .map(|_| 0.5 * embed_scale * rng.normal())
            .collect();

        // Blocks read content coordinates plus a weak copy of the planted one.
        let read_scale = config.block_input_gain / (content_dim as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| {
                let mut weight = vec![0.0; content_dim * d];
                for r in 0..content_dim {
                    let row_coords: Vec<f64> =
                        (0..content_dim).map(|_| read_scale * rng.normal()).collect();
                    let mut row = combine(&content_basis, &row_coords, d);
                    let planted_read = config.marker_coupling * rng.normal();
                    row.iter_mut()
                        .zip(&planted)
                        .for_each(|(w, u)| *w += planted_read * u);
                    weight[r * d..(r + 1) * d].copy_from_slice(&row);
                }
                let bias = (0..content_dim).map(|_| 0.1 * rng.normal()).collect();
                Block { weight, bias }
            })
            .collect();

        let mut backbone = Backbone {
            config,
            planted,
            difficulty_axis,
            answer_codes,
            shortcut_codes,
            content_basis,
            token_embed,
            position_embed,
            direct_embed,
            blocks,
            checksum: String::new(),
        };
        backbone.checksum = backbone.compute_checksum();
        Ok(backbone)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn answer_values(&self) -> usize {
        self.config.answer_values
    }

    /// SHA-256 over every weight, fixed at build time.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the weight checksum from the current weights.
    pub fn compute_checksum(&self) -> String {
        let mut chunks: Vec<&[f64]> = vec![&self.planted, &self.difficulty_axis, &self.direct_embed];
        for set in [
            &self.answer_codes,
            &self.shortcut_codes,
            &self.content_basis,
            &self.token_embed,
            &self.position_embed,
        ] {
            chunks.extend(set.iter().map(|v| v.as_slice()));
        }
        for b in &self.blocks {
            chunks.push(&b.weight);
            chunks.push(&b.bias);
        }
        checksum_f64(chunks)
    }

    /// The planted unit direction. Exposed for diagnostics and test oracles;
    /// nothing in the training path reads it.
    pub fn planted_direction(&self) -> Vector {
        Vector::new(self.planted.clone()).expect("planted direction is finite")
    }

    fn content(&self, coords: &[f64]) -> Vec<f64> {
        combine(&self.content_basis, coords, self.dim())
    }

    fn check_tokens(&self, prompt: &[Token]) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::invalid("prompt must not be empty"));
        }
        if let Some(bad) = prompt.iter().find(|t| t.0 as usize >= Token::VOCAB_SIZE) {
            return Err(Error::UnknownToken(bad.0));
        }
        Ok(())
    }

    /// Runs a prompt through the backbone.
    pub fn encode(&self, prompt: &[Token]) -> Result<ActivationTrace> {
        self.check_tokens(prompt)?;
        let d = self.dim();
        let content_dim = self.content_basis.len();

        let (marker, problem) = match prompt[0] {
            t if t.is_marker() => (Some(t), &prompt[1..]),
            _ => (None, prompt),
        };

        let mut coords = self.direct_embed.clone();
        if !problem.is_empty() {
            let scale = 1.0 / (problem.len() as f64).sqrt();
            for (pos, tok) in problem.iter().enumerate() {
                let e = &self.token_embed[tok.0 as usize];
                let p = &self.position_embed[pos % POSITIONS];
                for i in 0..content_dim {
                    coords[i] += scale * e[i] * p[i];
                }
            }
        }
        let mut x = self.content(&coords);
        if marker == Some(Token::THINK) {
            let shift = self.config.planted_direction_scale;
            x.iter_mut().zip(&self.planted).for_each(|(xi, u)| *xi += shift * u);
        }

        let mut per_layer = Vec::with_capacity(self.num_layers());
        for block in &self.blocks {
            let mut hidden = vec![0.0; content_dim];
            for (r, h) in hidden.iter_mut().enumerate() {
                let pre = dot(&block.weight[r * d..(r + 1) * d], &x) + block.bias[r];
                *h = self.config.residual_gain * pre.tanh();
            }
            let delta = self.content(&hidden);
            x.iter_mut().zip(&delta).for_each(|(xi, di)| *xi += di);
            per_layer.push(x.clone());
        }

        if let Some(parsed) = parse_chain(problem) {
            let last = per_layer.last_mut().expect("at least two layers");
            self.add_answer_pathway(last, problem, &parsed);
        }

        let per_layer = per_layer
            .into_iter()
            .map(Vector::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(ActivationTrace { per_layer })
    }

    fn add_answer_pathway(&self, state: &mut [f64], problem: &[Token], parsed: &ParsedProblem) {
        let values = self.answer_values() as i64;
        if parsed.answer < 0 || parsed.answer >= values {
            return;
        }
        let cfg = &self.config;
        let truth = parsed.answer as usize;
        let mut shortcut = parsed.before_last;
        if shortcut == parsed.answer || !(0..values).contains(&shortcut) {
            shortcut = (parsed.answer + 1) % values;
        }
        let ops = parsed.ops as f64;
        let strength = (cfg.shortcut_per_op * ops
            + cfg.shortcut_offset
            + cfg.shortcut_jitter * (2.0 * problem_hash_unit(problem) - 1.0))
            .max(0.0);
        let difficulty = cfg.difficulty_per_op * ops;
        let terms = [
            (cfg.true_code_strength, &self.answer_codes[truth]),
            (strength, &self.shortcut_codes[shortcut as usize]),
            (difficulty, &self.difficulty_axis),
        ];
        for (coef, dir) in terms {
            state.iter_mut().zip(dir).for_each(|(s, v)| *s += coef * v);
        }
    }

    /// Decodes a latent state into an answer distribution.
    pub fn decode(&self, z: &Vector) -> Result<AnswerDistribution> {
        check_dims(self.dim(), z.dim())?;
        let z = z.as_slice();
        let cfg = &self.config;
        let projection = dot(z, &self.planted);
        let gate = softplus(cfg.gate_sharpness * projection) / cfg.gate_sharpness;
        let logits: Vec<f64> = self
            .answer_codes
            .iter()
            .zip(&self.shortcut_codes)
            .map(|(a, s)| cfg.logit_scale * (gate * dot(a, z) + dot(s, z)))
            .collect();
        let probs = softmax(&logits);
        let (best, conf) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });

        let mut tokens = vec![Token::SETUP];
        if projection >= COMPUTE_MARKER_PROJECTION {
            tokens.push(Token::COMPUTE);
        }
        tokens.extend(Token::digits_of(best as u64));
        if conf >= VERIFY_CONFIDENCE {
            tokens.push(Token::VERIFY);
        }
        if conf >= CONCLUDE_CONFIDENCE {
            tokens.push(Token::CONCLUDE);
        }
        Ok(AnswerDistribution {
            probs,
            value: best as f64,
            tokens,
        })
    }

    /// Exact cost of an event under the multiply-add-times-two model.
    pub fn flops_of(&self, event: FlopEvent) -> u64 {
        let d = self.dim() as u64;
        let layers = self.num_layers() as u64;
        match event {
            FlopEvent::Encode { prompt_len } => 2 * prompt_len as u64 * layers * d * d,
            FlopEvent::PonderStep => d,
            FlopEvent::ControllerEval => controller_eval_flops(self.dim()),
            FlopEvent::Decode => 2 * d * self.answer_values() as u64,
        }
    }

    /// Cost of a full trajectory with `steps` ponder steps.
    pub fn trajectory_flops(&self, prompt_len: usize, steps: usize) -> u64 {
        self.flops_of(FlopEvent::Encode { prompt_len })
            + steps as u64
                * (self.flops_of(FlopEvent::PonderStep) + self.flops_of(FlopEvent::ControllerEval))
            + self.flops_of(FlopEvent::Decode)
    }

    pub fn save_json(&self) -> Result<String> {
        let file = BackboneFile {
            schema_version: BACKBONE_SCHEMA_VERSION,
            backbone: self.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn load_json(text: &str) -> Result<Backbone> {
        let file: BackboneFile = serde_json::from_str(text)?;
        if file.schema_version != BACKBONE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: BACKBONE_SCHEMA_VERSION,
                found: file.schema_version,
            });
        }
        let backbone = file.backbone;
        let found = backbone.compute_checksum();
        if found != backbone.checksum {
            return Err(Error::ChecksumMismatch {
                expected: backbone.checksum.clone(),
                found,
            });
        }
        Ok(backbone)
    }
}

/// Cost of one controller forward pass on a `dim`-dimensional state.
pub fn controller_eval_flops(dim: usize) -> u64 {
    let d = dim as u64;
    let h = HIDDEN as u64;
    2 * (d * h + h * h + h)
}

/// Deterministic value in `[0, 1)` derived from the problem tokens.
fn problem_hash_unit(problem: &[Token]) -> f64 {
    let mut hasher = Sha256::new();
    for t in problem {
        hasher.update(t.0.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}
