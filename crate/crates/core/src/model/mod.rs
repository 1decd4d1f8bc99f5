//! The forecasting transformer.
//!
//! One backbone serves two variants: the causal-masked model that emits a
//! multi-label sigmoid row at every input position, and a bidirectional
//! reference variant that reads a special first-position token and emits a
//! single row. Blocks are pre-layer-norm residual; code, age, position and
//! years-to-forecast embeddings are summed per position.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_config, save_checkpoint, CheckpointError};

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::tensor::{AttentionMask, Graph, TensorError, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which variant the backbone runs as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Causal mask, one prediction row per position.
    Evolve,
    /// Full attention, single prediction row from the first-position token.
    Cls,
}

/// Architecture and input-domain sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_n_ages")]
    pub n_ages: usize,
    #[serde(default = "default_n_t2f")]
    pub n_t2f: usize,
    pub n_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_d_model() -> usize {
    384
}
fn default_n_heads() -> usize {
    8
}
fn default_n_layers() -> usize {
    8
}
fn default_max_seq_len() -> usize {
    400
}
fn default_n_ages() -> usize {
    111
}
fn default_n_t2f() -> usize {
    111
}
fn default_dropout() -> f64 {
    0.1
}
fn default_mode() -> Mode {
    Mode::Evolve
}

impl ModelConfig {
    /// Config with paper-scale architecture defaults for a given input/label
    /// domain.
    pub fn new(vocab_size: usize, n_classes: usize) -> Self {
        ModelConfig {
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            n_layers: default_n_layers(),
            max_seq_len: default_max_seq_len(),
            vocab_size,
            n_ages: default_n_ages(),
            n_t2f: default_n_t2f(),
            n_classes,
            dropout: default_dropout(),
            mode: default_mode(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::Config("max_seq_len must be >= 2".into()));
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
            ("n_ages", self.n_ages),
            ("n_t2f", self.n_t2f),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Code id reserved for the first-position token in [`Mode::Cls`]. The
    /// code embedding table always has `vocab_size + 1` rows so both modes
    /// share one layout.
    pub fn cls_code_id(&self) -> usize {
        self.vocab_size
    }

    pub fn code_table_rows(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total learnable scalars:
    /// `(V+1 + n_ages + max_seq_len + n_t2f) * d  +  L * (12 d^2 + 13 d)  +  2 d  +  d*C + C`.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embed = (self.code_table_rows() + self.n_ages + self.max_seq_len + self.n_t2f) * d;
        let per_layer = 12 * d * d + 13 * d;
        embed + self.n_layers * per_layer + 2 * d + d * self.n_classes + self.n_classes
    }
}

/// One person's model input: aligned code / age / years-to-forecast streams.
/// Positions are implicit `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    codes: Vec<usize>,
    ages: Vec<usize>,
    t2f: Vec<usize>,
}

impl InputSequence {
    pub fn new(codes: Vec<usize>, ages: Vec<usize>, t2f: Vec<usize>) -> Result<Self, ModelError> {
        if codes.is_empty() {
            return Err(ModelError::Sequence("empty sequence".into()));
        }
        if codes.len() != ages.len() || codes.len() != t2f.len() {
            return Err(ModelError::Sequence(format!(
                "stream lengths differ: codes {}, ages {}, t2f {}",
                codes.len(),
                ages.len(),
                t2f.len()
            )));
        }
        if ages.windows(2).any(|w| w[0] > w[1]) {
            return Err(ModelError::Sequence("ages must be non-decreasing".into()));
        }
        if t2f.windows(2).any(|w| w[0] < w[1]) {
            return Err(ModelError::Sequence("t2f must be non-increasing".into()));
        }
        Ok(InputSequence { codes, ages, t2f })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty streams
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn ages(&self) -> &[usize] {
        &self.ages
    }

    pub fn t2f(&self) -> &[usize] {
        &self.t2f
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    /// First `t` positions, for prefix-conditioning checks.
    pub fn prefix(&self, t: usize) -> InputSequence {
        assert!(t >= 1 && t <= self.len());
        InputSequence {
            codes: self.codes[..t].to_vec(),
            ages: self.ages[..t].to_vec(),
            t2f: self.t2f[..t].to_vec(),
        }
    }

    /// Prepend the reserved first-position token. It consumes one position
    /// of the budget (the oldest event is dropped when full) and borrows the
    /// age / t2f of the first real code so the tables need no sentinel row.
    pub fn with_cls(&self, cls_id: usize, max_seq_len: usize) -> InputSequence {
        let keep_from = if self.len() + 1 > max_seq_len {
            self.len() + 1 - max_seq_len
        } else {
            0
        };
        let mut codes = Vec::with_capacity(self.len() - keep_from + 1);
        let mut ages = Vec::with_capacity(codes.capacity());
        let mut t2f = Vec::with_capacity(codes.capacity());
        codes.push(cls_id);
        ages.push(self.ages[keep_from]);
        t2f.push(self.t2f[keep_from]);
        codes.extend_from_slice(&self.codes[keep_from..]);
        ages.extend_from_slice(&self.ages[keep_from..]);
        t2f.extend_from_slice(&self.t2f[keep_from..]);
        InputSequence { codes, ages, t2f }
    }
}

/// Per-position multi-label predictions: `n_rows` is the sequence length in
/// [`Mode::Evolve`] and 1 in [`Mode::Cls`]. Logits are kept alongside the
/// sigmoids so losses can be evaluated in log space.
#[derive(Clone, Debug)]
pub struct PredictionSeries<S: Scalar> {
    n_rows: usize,
    n_classes: usize,
    logits: Vec<S>,
    sigmoids: Vec<S>,
}

impl<S: Scalar> PredictionSeries<S> {
    pub fn from_logits(logits: Vec<S>, n_rows: usize, n_classes: usize) -> Self {
        assert_eq!(logits.len(), n_rows * n_classes);
        let sigmoids = logits.iter().map(|&x| crate::tensor::sigmoid_scalar(x)).collect();
        PredictionSeries {
            n_rows,
            n_classes,
            logits,
            sigmoids,
        }
    }

    /// Build from probabilities in the open interval (0, 1).
    pub fn from_probs(probs: Vec<S>, n_rows: usize, n_classes: usize) -> Result<Self, ModelError> {
        assert_eq!(probs.len(), n_rows * n_classes);
        if probs
            .iter()
            .any(|&p| !(p > S::zero() && p < S::one()))
        {
            return Err(ModelError::Sequence(
                "probabilities must lie strictly in (0, 1)".into(),
            ));
        }
        let logits: Vec<S> = probs.iter().map(|&p| (p / (S::one() - p)).ln()).collect();
        Ok(PredictionSeries {
            n_rows,
            n_classes,
            logits,
            sigmoids: probs,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, t: usize) -> &[S] {
        &self.sigmoids[t * self.n_classes..(t + 1) * self.n_classes]
    }

    pub fn logit_row(&self, t: usize) -> &[S] {
        &self.logits[t * self.n_classes..(t + 1) * self.n_classes]
    }

    pub fn last_row(&self) -> &[S] {
        self.row(self.n_rows - 1)
    }
}

/// Final-layer hidden states, one row per input position.
#[derive(Clone, Debug)]
pub struct HiddenStates<S: Scalar> {
    pub n_rows: usize,
    pub d_model: usize,
    data: Vec<S>,
}

impl<S: Scalar> HiddenStates<S> {
    pub fn new(n_rows: usize, d_model: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), n_rows * d_model);
        HiddenStates {
            n_rows,
            d_model,
            data,
        }
    }

    pub fn row(&self, t: usize) -> &[S] {
        &self.data[t * self.d_model..(t + 1) * self.d_model]
    }
}

/// Named parameter tensor. `decay` marks matrices for decoupled weight
/// decay; vectors (norms, biases) are left undecayed.
#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<S>>,
    pub decay: bool,
}

impl<S: Scalar> Param<S> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data_mut(&mut self) -> &mut Vec<S> {
        Arc::make_mut(&mut self.data)
    }
}

/// Output of one differentiable forward pass.
pub struct ForwardPass<S: Scalar> {
    pub graph: Graph<S>,
    /// Leaf ids aligned with [`Model::params`].
    pub param_ids: Vec<TensorId>,
    pub hidden: TensorId,
    pub logits: TensorId,
}

/// Weights plus config. Immutable during inference; training takes `&mut`.
pub struct Model<S: Scalar> {
    config: ModelConfig,
    params: Vec<Param<S>>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with N(0, 0.02^2) embeddings and projections, unit norm
    /// gains, zero biases and a zero decision head (so an untrained model
    /// emits exactly 0.5 everywhere).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::PARAM_INIT, 0);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut draw = |shape: &[usize]| -> Vec<S> {
            let n: usize = shape.iter().product();
            (0..n).map(|_| S::from_f64(normal.sample(&mut rng))).collect()
        };
        let d = config.d_model;
        let c = config.n_classes;
        let hidden = 4 * d;
        let mut params = Vec::new();
        let mut add = |name: &str, shape: Vec<usize>, data: Vec<S>| {
            let decay = shape.len() >= 2;
            params.push(Param {
                name: name.to_string(),
                shape,
                data: Arc::new(data),
                decay,
            });
        };

        for (name, rows) in [
            ("embed.code", config.code_table_rows()),
            ("embed.age", config.n_ages),
            ("embed.pos", config.max_seq_len),
            ("embed.t2f", config.n_t2f),
        ] {
            let data = draw(&[rows, d]);
            add(name, vec![rows, d], data);
        }
        for l in 0..config.n_layers {
            add(&format!("layer{l}.ln1.gain"), vec![d], vec![S::one(); d]);
            add(&format!("layer{l}.ln1.bias"), vec![d], vec![S::zero(); d]);
            for w in ["wq", "wk", "wv", "wo"] {
                let data = draw(&[d, d]);
                add(&format!("layer{l}.attn.{w}"), vec![d, d], data);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                add(&format!("layer{l}.attn.{b}"), vec![d], vec![S::zero(); d]);
            }
            add(&format!("layer{l}.ln2.gain"), vec![d], vec![S::one(); d]);
            add(&format!("layer{l}.ln2.bias"), vec![d], vec![S::zero(); d]);
            let w1 = draw(&[d, hidden]);
            add(&format!("layer{l}.ffn.w1"), vec![d, hidden], w1);
            add(&format!("layer{l}.ffn.b1"), vec![hidden], vec![S::zero(); hidden]);
            let w2 = draw(&[hidden, d]);
            add(&format!("layer{l}.ffn.w2"), vec![hidden, d], w2);
            add(&format!("layer{l}.ffn.b2"), vec![d], vec![S::zero(); d]);
        }
        add("final_ln.gain", vec![d], vec![S::one(); d]);
        add("final_ln.bias", vec![d], vec![S::zero(); d]);
        add("head.w", vec![d, c], vec![S::zero(); d * c]);
        add("head.b", vec![c], vec![S::zero(); c]);

        Ok(Model { config, params })
    }

    /// Rebuild from a parameter list (checkpoint load). Shapes must match
    /// the layout `new` produces for this config.
    pub fn from_params(config: ModelConfig, params: Vec<Param<S>>) -> Result<Self, ModelError> {
        let reference = Model::<S>::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (r, p) in reference.params.iter().zip(params.iter()) {
            if r.name != p.name || r.shape != p.shape {
                return Err(ModelError::Config(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    r.name, r.shape, p.name, p.shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Copy weights from another model with an identical layout.
    pub fn copy_weights_from(&mut self, other: &Model<S>) {
        debug_assert_eq!(self.params.len(), other.params.len());
        for (dst, src) in self.params.iter_mut().zip(other.params.iter()) {
            dst.data = Arc::clone(&src.data);
        }
    }

    fn validate_sequence(&self, seq: &InputSequence) -> Result<(), ModelError> {
        let cfg = &self.config;
        if seq.len() > cfg.max_seq_len {
            return Err(ModelError::Sequence(format!(
                "sequence length {} exceeds max_seq_len {}",
                seq.len(),
                cfg.max_seq_len
            )));
        }
        match cfg.mode {
            Mode::Evolve => {
                if seq.codes.iter().any(|&c| c >= cfg.vocab_size) {
                    return Err(ModelError::Sequence("code id outside vocab".into()));
                }
            }
            Mode::Cls => {
                if seq.codes[0] != cfg.cls_code_id() {
                    return Err(ModelError::Sequence(
                        "first position must hold the reserved cls code id".into(),
                    ));
                }
                if seq.codes[1..].iter().any(|&c| c >= cfg.vocab_size) {
                    return Err(ModelError::Sequence("code id outside vocab".into()));
                }
            }
        }
        if seq.ages.iter().any(|&a| a >= cfg.n_ages) {
            return Err(ModelError::Sequence("age id outside table".into()));
        }
        if seq.t2f.iter().any(|&v| v >= cfg.n_t2f) {
            return Err(ModelError::Sequence("t2f id outside table".into()));
        }
        Ok(())
    }

    /// Record a differentiable forward pass. `requires_grad` controls
    /// whether parameter leaves join the tape as differentiable;
    /// `dropout_rng` enables dropout (training mode).
    pub fn build_forward(
        &self,
        seq: &InputSequence,
        requires_grad: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass<S>, ModelError> {
        self.validate_sequence(seq)?;
        let cfg = &self.config;
        let t = seq.len();
        let eps = S::from_f64(LAYER_NORM_EPS);
        let mut g: Graph<S> = Graph::new();

        let param_ids: Vec<TensorId> = self
            .params
            .iter()
            .map(|p| g.leaf_shared(Arc::clone(&p.data), &p.shape, requires_grad))
            .collect::<Result<_, _>>()?;
        let pid = |name: &str| -> TensorId {
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .expect("parameter exists by construction");
            param_ids[idx]
        };

        let positions: Vec<usize> = seq.positions().collect();
        let e_code = g.embedding_lookup(pid("embed.code"), &seq.codes)?;
        let e_age = g.embedding_lookup(pid("embed.age"), &seq.ages)?;
        let e_pos = g.embedding_lookup(pid("embed.pos"), &positions)?;
        let e_t2f = g.embedding_lookup(pid("embed.t2f"), &seq.t2f)?;
        let mut x = g.add(e_code, e_age)?;
        x = g.add(x, e_pos)?;
        x = g.add(x, e_t2f)?;

        let mut apply_dropout = |g: &mut Graph<S>, x: TensorId| -> Result<TensorId, ModelError> {
            let rng = match dropout_rng.as_deref_mut() {
                Some(r) if cfg.dropout > 0.0 => r,
                _ => return Ok(x),
            };
            let keep = 1.0 - cfg.dropout;
            let scale = S::from_f64(1.0 / keep);
            let numel: usize = g.shape(x).iter().product();
            let mask: Vec<S> = (0..numel)
                .map(|_| {
                    if rand::Rng::gen::<f64>(rng) < keep {
                        scale
                    } else {
                        S::zero()
                    }
                })
                .collect();
            let shape = g.shape(x).to_vec();
            let m = g.constant(mask, &shape)?;
            Ok(g.mul(x, m)?)
        };

        x = apply_dropout(&mut g, x)?;

        let mask = match cfg.mode {
            Mode::Evolve => AttentionMask::causal(t),
            Mode::Cls => AttentionMask::full(t),
        };

        for l in 0..cfg.n_layers {
            let p = |n: &str| pid(&format!("layer{l}.{n}"));
            let h = g.layer_norm(x, p("ln1.gain"), p("ln1.bias"), eps)?;
            let q0 = g.matmul(h, p("attn.wq"))?;
            let q = g.bias_add(q0, p("attn.bq"))?;
            let k0 = g.matmul(h, p("attn.wk"))?;
            let k = g.bias_add(k0, p("attn.bk"))?;
            let v0 = g.matmul(h, p("attn.wv"))?;
            let v = g.bias_add(v0, p("attn.bv"))?;
            let scores = g.attn_scores(q, k, cfg.n_heads)?;
            let mut probs = g.masked_softmax_rows(scores, &mask)?;
            probs = apply_dropout(&mut g, probs)?;
            let ctx = g.attn_context(probs, v, cfg.n_heads)?;
            let proj0 = g.matmul(ctx, p("attn.wo"))?;
            let mut proj = g.bias_add(proj0, p("attn.bo"))?;
            proj = apply_dropout(&mut g, proj)?;
            x = g.add(x, proj)?;

            let h2 = g.layer_norm(x, p("ln2.gain"), p("ln2.bias"), eps)?;
            let f0 = g.matmul(h2, p("ffn.w1"))?;
            let f1 = g.bias_add(f0, p("ffn.b1"))?;
            let f2 = g.gelu(f1);
            let f3 = g.matmul(f2, p("ffn.w2"))?;
            let mut f4 = g.bias_add(f3, p("ffn.b2"))?;
            f4 = apply_dropout(&mut g, f4)?;
            x = g.add(x, f4)?;
        }

        let hidden = g.layer_norm(x, pid("final_ln.gain"), pid("final_ln.bias"), eps)?;
        let head_in = match cfg.mode {
            Mode::Evolve => hidden,
            Mode::Cls => g.slice_rows(hidden, 0, 1)?,
        };
        let logits0 = g.matmul(head_in, pid("head.w"))?;
        let logits = g.bias_add(logits0, pid("head.b"))?;

        Ok(ForwardPass {
            graph: g,
            param_ids,
            hidden,
            logits,
        })
    }

    /// Inference: dropout off, no gradients recorded.
    pub fn forward(&self, seq: &InputSequence) -> Result<PredictionSeries<S>, ModelError> {
        let pass = self.build_forward(seq, false, None)?;
        let logits = pass.graph.data(pass.logits).to_vec();
        let rows = pass.graph.shape(pass.logits)[0];
        Ok(PredictionSeries::from_logits(
            logits,
            rows,
            self.config.n_classes,
        ))
    }

    /// Final-layer hidden states per position (inference mode). Shares the
    /// conditioning property of [`Model::forward`].
    pub fn hidden_states(&self, seq: &InputSequence) -> Result<HiddenStates<S>, ModelError> {
        let pass = self.build_forward(seq, false, None)?;
        Ok(HiddenStates {
            n_rows: seq.len(),
            d_model: self.config.d_model,
            data: pass.graph.data(pass.hidden).to_vec(),
        })
    }
}
