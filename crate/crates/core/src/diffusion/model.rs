//! Conditional noise-prediction network.
//!
//! ```text
//! h   = act(x W_in + b_in + temb(t) W_t + b_t)
//! q   = h W_q
//! k_j = W_k e_j,  v_j = W_v e_j          (one per condition token)
//! a   = softmax_j(q . k_j / sqrt(k)) v_j
//! h'  = h + a W_o
//! eps = act(h' W_mid + b_mid) W_head + b_head
//! ```
//!
//! All parameters live in one flat vector; [`ParamLayout`] names the
//! segments. `W_k` and `W_v` are stored `k x k` acting on column embeddings
//! (`W e`), which is the convention the closed-form editors use.

use autodiff::{Array, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const W_IN: &str = "trunk.w_in";
pub const B_IN: &str = "trunk.b_in";
pub const W_TIME: &str = "time.w";
pub const B_TIME: &str = "time.b";
pub const W_Q: &str = "attn.w_q";
pub const W_K: &str = "attn.w_k";
pub const W_V: &str = "attn.w_v";
pub const W_O: &str = "attn.w_o";
pub const W_MID: &str = "trunk.w_mid";
pub const B_MID: &str = "trunk.b_mid";
pub const W_HEAD: &str = "head.w";
pub const B_HEAD: &str = "head.b";

/// Toy-scale parameter budget.
pub const MAX_PARAMS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// 1 = concept token only, 2 = concept + shared style token.
    pub tokens: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            data_dim: 2,
            hidden: 32,
            time_dim: 16,
            cond_dim: 8,
            tokens: 1,
            activation: Activation::Silu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.data_dim", self.data_dim),
            ("model.hidden", self.hidden),
            ("model.time_dim", self.time_dim),
            ("model.cond_dim", self.cond_dim),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("model.time_dim", "must be even (sin/cos pairs)"));
        }
        if !(1..=2).contains(&self.tokens) {
            return Err(Error::config("model.tokens", "must be 1 or 2"));
        }
        let n = ParamLayout::new(self).total();
        if n > MAX_PARAMS {
            return Err(Error::config("model", format!("{n} parameters exceeds {MAX_PARAMS}")));
        }
        Ok(())
    }
}

/// Coarse grouping used by parameter masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentGroup {
    Trunk,
    TimeEmbed,
    CrossAttention,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub group: SegmentGroup,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn is_bias(&self) -> bool {
        self.name.contains(".b")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use SegmentGroup::*;
        let (d, h, te, k) = (cfg.data_dim, cfg.hidden, cfg.time_dim, cfg.cond_dim);
        let shapes: [(&'static str, usize, usize, SegmentGroup); 12] = [
            (W_IN, d, h, Trunk),
            (B_IN, 1, h, Trunk),
            (W_TIME, te, h, TimeEmbed),
            (B_TIME, 1, h, TimeEmbed),
            (W_Q, h, k, CrossAttention),
            (W_K, k, k, CrossAttention),
            (W_V, k, k, CrossAttention),
            (W_O, k, h, CrossAttention),
            (W_MID, h, h, Trunk),
            (B_MID, 1, h, Trunk),
            (W_HEAD, h, d, Head),
            (B_HEAD, 1, d, Head),
        ];
        let mut offset = 0;
        let segments = shapes
            .into_iter()
            .map(|(name, rows, cols, group)| {
                let s = Segment { name, rows, cols, offset, group };
                offset += rows * cols;
                s
            })
            .collect();
        ParamLayout { segments, total: offset }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Panics on an unknown segment name.
    pub fn segment(&self, name: &str) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter segment `{name}`"))
    }
}

/// Flat parameter vector plus its segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    config: ModelConfig,
    layout: ParamLayout,
    flat: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let layout = ParamLayout::new(config);
        let flat = vec![0.0; layout.total()];
        DenoiserParams { config: config.clone(), layout, flat }
    }

    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = DenoiserParams::zeros(config);
        for seg in p.layout.segments.clone() {
            if seg.is_bias() {
                continue;
            }
            let std = 1.0 / (seg.rows as f64).sqrt();
            for v in &mut p.flat[seg.range()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    pub fn from_flat(config: &ModelConfig, flat: Vec<f64>) -> Result<Self> {
        let layout = ParamLayout::new(config);
        if flat.len() != layout.total() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total(),
                flat.len()
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("parameter {i} is not finite")));
        }
        Ok(DenoiserParams { config: config.clone(), layout, flat })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn segment_slice(&self, name: &str) -> &[f64] {
        &self.flat[self.layout.segment(name).range()]
    }

    pub fn segment_slice_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.segment(name).range();
        &mut self.flat[r]
    }

    pub fn segment(&self, name: &str) -> Array {
        let s = self.layout.segment(name);
        Array::new(s.rows, s.cols, self.flat[s.range()].to_vec())
    }

    pub fn set_segment(&mut self, name: &str, value: &Array) {
        let s = self.layout.segment(name);
        assert_eq!(value.shape(), (s.rows, s.cols), "segment `{name}` shape");
        let r = s.range();
        self.flat[r].copy_from_slice(value.data());
    }

    pub fn as_row(&self) -> Array {
        Array::row(self.flat.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    /// Eager noise prediction on a throwaway tape.
    pub fn predict(&self, x_t: &Array, t: &[usize], cond: &Conditioning) -> Result<Array> {
        let tape = Tape::new();
        let theta = tape.constant(self.as_row());
        let x = tape.constant(x_t.clone());
        let out = Denoiser::new(&self.config).predict_noise(theta, x, t, cond)?;
        let v = out.value();
        Ok((*v).clone())
    }
}

/// Condition tokens for a batch: each entry is `[batch, cond_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub tokens: Vec<Array>,
}

impl Conditioning {
    pub fn batch_size(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.rows())
    }
}

/// Sinusoidal timestep features, `[batch, time_dim]`.
pub fn time_embedding(t: &[usize], time_dim: usize) -> Array {
    let half = time_dim / 2;
    let mut out = Array::zeros(t.len(), time_dim);
    for (r, &step) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            out.set(r, i, arg.sin());
            out.set(r, half + i, arg.cos());
        }
    }
    out
}

/// Network forward pass over tape values.
pub struct Denoiser<'c> {
    cfg: &'c ModelConfig,
    layout: ParamLayout,
}

impl<'c> Denoiser<'c> {
    pub fn new(cfg: &'c ModelConfig) -> Self {
        Denoiser { cfg, layout: ParamLayout::new(cfg) }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn seg<'t>(&self, theta: Var<'t>, name: &str) -> Var<'t> {
        let s = self.layout.segment(name);
        theta.slice_cols(s.offset, s.offset + s.len()).reshape(s.rows, s.cols)
    }

    fn act<'t>(&self, v: Var<'t>) -> Var<'t> {
        match self.cfg.activation {
            Activation::Silu => v.silu(),
            Activation::Relu => v.relu(),
        }
    }

    /// `theta` is the flat `[1, P]` parameter row, `x_t` is `[batch, d]`.
    pub fn predict_noise<'t>(
        &self,
        theta: Var<'t>,
        x_t: Var<'t>,
        t: &[usize],
        cond: &Conditioning,
    ) -> Result<Var<'t>> {
        let tape = theta.tape();
        let cfg = self.cfg;
        let (batch, d) = x_t.shape();
        if theta.shape() != (1, self.layout.total()) {
            return Err(Error::Shape(format!(
                "parameter row {:?}, expected (1, {})",
                theta.shape(),
                self.layout.total()
            )));
        }
        if d != cfg.data_dim || t.len() != batch {
            return Err(Error::Shape(format!(
                "x_t {:?} with {} timesteps, data_dim {}",
                x_t.shape(),
                t.len(),
                cfg.data_dim
            )));
        }
        if cond.tokens.len() != cfg.tokens
            || cond.tokens.iter().any(|e| e.shape() != (batch, cfg.cond_dim))
        {
            return Err(Error::Shape(format!(
                "conditioning needs {} tokens of shape ({batch}, {})",
                cfg.tokens, cfg.cond_dim
            )));
        }

        let temb = tape.constant(time_embedding(t, cfg.time_dim));
        let pre = x_t.matmul(self.seg(theta, W_IN)).add_row(self.seg(theta, B_IN))
            + temb.matmul(self.seg(theta, W_TIME)).add_row(self.seg(theta, B_TIME));
        let h = self.act(pre);

        let k = cfg.cond_dim;
        let q = h.matmul(self.seg(theta, W_Q));
        let (wk, wv) = (self.seg(theta, W_K), self.seg(theta, W_V));
        let inv_sqrt_k = 1.0 / (k as f64).sqrt();
        let mut scores = Vec::with_capacity(cond.tokens.len());
        let mut values = Vec::with_capacity(cond.tokens.len());
        for e in &cond.tokens {
            let e = tape.constant(e.clone());
            scores.push((q * e.matmul(wk.t())).sum_cols().scale(inv_sqrt_k));
            values.push(e.matmul(wv.t()));
        }
        let weights = tape.concat_cols(&scores).softmax();
        let mut attended = weights.slice_cols(0, 1).broadcast_cols(k) * values[0];
        for (j, v) in values.iter().enumerate().skip(1) {
            attended = attended + weights.slice_cols(j, j + 1).broadcast_cols(k) * *v;
        }

        let h2 = h + attended.matmul(self.seg(theta, W_O));
        let h3 = self.act(h2.matmul(self.seg(theta, W_MID)).add_row(self.seg(theta, B_MID)));
        Ok(h3.matmul(self.seg(theta, W_HEAD)).add_row(self.seg(theta, B_HEAD)))
    }

    /// Attention weights for a batch (diagnostics and tests).
    pub fn attention_weights(&self, params: &DenoiserParams, x_t: &Array, t: &[usize], cond: &Conditioning) -> Array {
        let tape = Tape::new();
        let theta = tape.constant(params.as_row());
        let x = tape.constant(x_t.clone());
        let temb = tape.constant(time_embedding(t, self.cfg.time_dim));
        let h = self.act(
            x.matmul(self.seg(theta, W_IN)).add_row(self.seg(theta, B_IN))
                + temb.matmul(self.seg(theta, W_TIME)).add_row(self.seg(theta, B_TIME)),
        );
        let q = h.matmul(self.seg(theta, W_Q));
        let wk = self.seg(theta, W_K);
        let scale = 1.0 / (self.cfg.cond_dim as f64).sqrt();
        let scores: Vec<Var<'_>> = cond
            .tokens
            .iter()
            .map(|e| (q * tape.constant(e.clone()).matmul(wk.t())).sum_cols().scale(scale))
            .collect();
        let w = tape.concat_cols(&scores).softmax();
        let v = w.value();
        (*v).clone()
    }
}
