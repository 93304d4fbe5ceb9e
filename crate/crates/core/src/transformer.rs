//! Variate-tokenized encoder: every variate's lookback vector becomes one
//! token, tokens pass through `L` post-norm encoder blocks, and a shared
//! linear head maps each token to the forecast horizon.
//!
//! Forward and backward passes are written out by hand; [`model_backward`]
//! consumes the [`ModelTrace`] recorded by [`model_forward_traced`].

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self_attention, self_attention_backward, AttentionTrace};
use crate::error::{Error, Result};
use crate::fis::{fis_backward, fis_forward, FisParams, FisTrace, DEFAULT_EPSILON};
use crate::membership::MfKind;
use crate::params::Parameters;

/// Layer-norm variance offset.
pub const LN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Interaction {
    Fis,
    SelfAttention,
}

impl Interaction {
    pub fn name(self) -> &'static str {
        match self {
            Interaction::Fis => "fis",
            Interaction::SelfAttention => "self_attention",
        }
    }
}

impl fmt::Display for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Interaction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fis" => Ok(Interaction::Fis),
            "self_attention" | "attention" => Ok(Interaction::SelfAttention),
            other => Err(Error::Config(format!("unknown interaction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_rules: usize,
    pub interaction: Interaction,
    pub mf_kind: MfKind,
    pub ffn_hidden: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub n_variates: usize,
    pub share_mf_across_tokens: bool,
    pub epsilon: f64,
    /// Inverted-dropout rate on both sublayer outputs, training only.
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: `D = 64`, `L = 2`, `R = 3`, FFN width `4·D`.
    pub fn new(n_variates: usize, lookback: usize, horizon: usize) -> Self {
        Self {
            d_model: 64,
            n_blocks: 2,
            n_rules: 3,
            interaction: Interaction::Fis,
            mf_kind: MfKind::Gaussian,
            ffn_hidden: 256,
            lookback,
            horizon,
            n_variates,
            share_mf_across_tokens: false,
            epsilon: DEFAULT_EPSILON,
            dropout: 0.0,
        }
    }

    pub fn with_width(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.ffn_hidden = 4 * d_model;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_rules", self.n_rules),
            ("ffn_hidden", self.ffn_hidden),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("n_variates", self.n_variates),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn mf_tokens(&self) -> usize {
        if self.share_mf_across_tokens {
            1
        } else {
            self.n_variates
        }
    }
}

/// Affine map `y = x W + b` applied to each row of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        d_y: ArrayView2<'_, f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.weight += &x.t().dot(&d_y);
        grad.bias += &d_y.sum_axis(Axis(0));
        d_y.dot(&self.weight.t())
    }

    fn push<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((
            format!("{prefix}.weight"),
            self.weight.view_mut().into_dyn(),
        ));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Array1::ones(width),
            bias: Array1::zeros(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    /// Rows standardized to zero mean and unit variance, before gain and bias.
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer normalization.
pub fn layer_norm(x: ArrayView2<'_, f64>, norm: &LayerNorm) -> (Array2<f64>, NormCache) {
    let width = x.ncols() as f64;
    let mut normalized = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / width;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let scale = *s;
        row.mapv_inplace(|v| v * scale);
    }
    let y = &normalized * &norm.gain + &norm.bias;
    (
        y,
        NormCache {
            normalized,
            inv_std,
        },
    )
}

fn layer_norm_backward(
    d_y: ArrayView2<'_, f64>,
    cache: &NormCache,
    norm: &LayerNorm,
    grad: &mut LayerNorm,
) -> Array2<f64> {
    grad.gain += &(&d_y * &cache.normalized).sum_axis(Axis(0));
    grad.bias += &d_y.sum_axis(Axis(0));
    let width = d_y.ncols() as f64;
    let d_hat = &d_y * &norm.gain;
    let mut d_x = Array2::zeros(d_y.raw_dim());
    for (((mut out, dh), xh), &s) in d_x
        .rows_mut()
        .into_iter()
        .zip(d_hat.rows())
        .zip(cache.normalized.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_dh = dh.sum() / width;
        let mean_dh_xh = dh.dot(&xh) / width;
        for ((o, &g), &x) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
            *o = s * (g - mean_dh - x * mean_dh_xh);
        }
    }
    d_x
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Present only for FIS interaction.
    pub fis: Option<FisParams>,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Linear,
    pub blocks: Vec<BlockParams>,
    pub projection: Linear,
}

fn fis_seed(seed: u64, block: usize) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_add(block as u64 * 17)
}

impl ModelParams {
    /// Seeded initialization. Everything except the fuzzy parameters comes from
    /// one stream, so both interaction modes share identical dense weights for
    /// the same seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let embedding = Linear::init(cfg.lookback, d, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let query = Linear::init(d, d, &mut rng);
            let key = Linear::init(d, d, &mut rng);
            let value = Linear::init(d, d, &mut rng);
            let ffn_in = Linear::init(d, cfg.ffn_hidden, &mut rng);
            let ffn_out = Linear::init(cfg.ffn_hidden, d, &mut rng);
            let fis = match cfg.interaction {
                Interaction::Fis => Some(FisParams::init(
                    cfg.mf_kind,
                    cfg.mf_tokens(),
                    d,
                    cfg.n_rules,
                    cfg.epsilon,
                    fis_seed(seed, b),
                )?),
                Interaction::SelfAttention => None,
            };
            blocks.push(BlockParams {
                query,
                key,
                value,
                fis,
                norm1: LayerNorm::new(d),
                ffn_in,
                ffn_out,
                norm2: LayerNorm::new(d),
            });
        }
        let projection = Linear::init(d, cfg.horizon, &mut rng);
        Ok(Self {
            embedding,
            blocks,
            projection,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Rejects parameters whose shapes disagree with `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(cfg, 0)?;
        let want = reference.tensors();
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(Error::shape(
                "parameter count",
                &[want.len()],
                &[have.len()],
            ));
        }
        for ((wn, wt), (hn, ht)) in want.iter().zip(have.iter()) {
            if wn != hn || wt.shape() != ht.shape() {
                return Err(Error::Config(format!(
                    "parameter {hn} has shape {:?}, config expects {wn} with shape {:?}",
                    ht.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.embedding.push("embedding", &mut out);
        for (b, block) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{b}");
            block.query.push(&format!("{p}.query"), &mut out);
            block.key.push(&format!("{p}.key"), &mut out);
            block.value.push(&format!("{p}.value"), &mut out);
            if let Some(fis) = &block.fis {
                for (bank, tag) in [(&fis.q_bank, "q_mf"), (&fis.k_bank, "k_mf")] {
                    for (slot, name) in bank.slots.iter().zip(bank.kind.slot_names()) {
                        out.push((format!("{p}.fis.{tag}.{name}"), slot.view().into_dyn()));
                    }
                }
                out.push((
                    format!("{p}.fis.consequents"),
                    fis.consequents.view().into_dyn(),
                ));
            }
            out.push((
                format!("{p}.norm1.gain"),
                block.norm1.gain.view().into_dyn(),
            ));
            out.push((
                format!("{p}.norm1.bias"),
                block.norm1.bias.view().into_dyn(),
            ));
            block.ffn_in.push(&format!("{p}.ffn_in"), &mut out);
            block.ffn_out.push(&format!("{p}.ffn_out"), &mut out);
            out.push((
                format!("{p}.norm2.gain"),
                block.norm2.gain.view().into_dyn(),
            ));
            out.push((
                format!("{p}.norm2.bias"),
                block.norm2.bias.view().into_dyn(),
            ));
        }
        self.projection.push("projection", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        self.embedding.push_mut("embedding", &mut out);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{b}");
            block.query.push_mut(&format!("{p}.query"), &mut out);
            block.key.push_mut(&format!("{p}.key"), &mut out);
            block.value.push_mut(&format!("{p}.value"), &mut out);
            if let Some(fis) = &mut block.fis {
                for (bank, tag) in [(&mut fis.q_bank, "q_mf"), (&mut fis.k_bank, "k_mf")] {
                    let names = bank.kind.slot_names();
                    for (slot, name) in bank.slots.iter_mut().zip(names) {
                        out.push((format!("{p}.fis.{tag}.{name}"), slot.view_mut().into_dyn()));
                    }
                }
                out.push((
                    format!("{p}.fis.consequents"),
                    fis.consequents.view_mut().into_dyn(),
                ));
            }
            out.push((
                format!("{p}.norm1.gain"),
                block.norm1.gain.view_mut().into_dyn(),
            ));
            out.push((
                format!("{p}.norm1.bias"),
                block.norm1.bias.view_mut().into_dyn(),
            ));
            block.ffn_in.push_mut(&format!("{p}.ffn_in"), &mut out);
            block.ffn_out.push_mut(&format!("{p}.ffn_out"), &mut out);
            out.push((
                format!("{p}.norm2.gain"),
                block.norm2.gain.view_mut().into_dyn(),
            ));
            out.push((
                format!("{p}.norm2.bias"),
                block.norm2.bias.view_mut().into_dyn(),
            ));
        }
        self.projection.push_mut("projection", &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum InteractionTrace {
    Fis(FisTrace),
    Attention(AttentionTrace),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub input: Array2<f64>,
    pub interaction: InteractionTrace,
    pub mask1: Option<Array2<f64>>,
    pub norm1: NormCache,
    pub h1: Array2<f64>,
    pub ffn_pre: Array2<f64>,
    pub ffn_act: Array2<f64>,
    pub mask2: Option<Array2<f64>>,
    pub norm2: NormCache,
    pub output: Array2<f64>,
}

impl BlockTrace {
    pub fn fis(&self) -> Option<&FisTrace> {
        match &self.interaction {
            InteractionTrace::Fis(t) => Some(t),
            InteractionTrace::Attention(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrace {
    /// Input transposed to `N × lookback`.
    pub tokens_in: Array2<f64>,
    pub blocks: Vec<BlockTrace>,
    pub last_hidden: Array2<f64>,
}

fn check_input(x: ArrayView2<'_, f64>, cfg: &ModelConfig) -> Result<()> {
    if x.dim() != (cfg.lookback, cfg.n_variates) {
        return Err(Error::shape(
            "model input",
            &[cfg.lookback, cfg.n_variates],
            x.shape(),
        ));
    }
    Ok(())
}

/// `lookback × N` input to `N × D` tokens.
pub fn embed_variates(x: ArrayView2<'_, f64>, embedding: &Linear) -> Result<Array2<f64>> {
    if x.nrows() != embedding.weight.nrows() {
        return Err(Error::shape(
            "embedding input",
            &[embedding.weight.nrows()],
            &[x.nrows()],
        ));
    }
    Ok(embedding.forward(x.t()))
}

/// `N × D` tokens to a `horizon × N` forecast.
pub fn project(h: ArrayView2<'_, f64>, projection: &Linear) -> Result<Array2<f64>> {
    if h.ncols() != projection.weight.nrows() {
        return Err(Error::shape(
            "projection input",
            &[projection.weight.nrows()],
            &[h.ncols()],
        ));
    }
    Ok(projection.forward(h).reversed_axes())
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

/// One encoder block. `dropout_rng` enables dropout when the config rate is
/// positive.
pub fn encoder_block(
    h: ArrayView2<'_, f64>,
    block: &BlockParams,
    cfg: &ModelConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, BlockTrace)> {
    if h.ncols() != cfg.d_model {
        return Err(Error::shape("encoder block", &[cfg.d_model], &[h.ncols()]));
    }
    let q = block.query.forward(h);
    let k = block.key.forward(h);
    let v = block.value.forward(h);
    let (mut inter, interaction) = match (&block.fis, cfg.interaction) {
        (Some(fis), Interaction::Fis) => {
            let (o, t) = fis_forward(q.view(), k.view(), v.view(), fis, true)?;
            (o, InteractionTrace::Fis(t.expect("trace requested")))
        }
        (None, Interaction::SelfAttention) => {
            let (o, t) = self_attention(q.view(), k.view(), v.view(), true)?;
            (o, InteractionTrace::Attention(t.expect("trace requested")))
        }
        _ => {
            return Err(Error::Config(
                "block parameters do not match the configured interaction".into(),
            ))
        }
    };

    let (mut mask1, mut mask2) = (None, None);
    let mut rng = dropout_rng.filter(|_| cfg.dropout > 0.0);
    if let Some(rng) = rng.as_deref_mut() {
        let m = dropout_mask(inter.dim(), cfg.dropout, rng);
        inter *= &m;
        mask1 = Some(m);
    }
    let (h1, norm1) = layer_norm((&h + &inter).view(), &block.norm1);
    let ffn_pre = block.ffn_in.forward(h1.view());
    let ffn_act = ffn_pre.mapv(gelu);
    let mut ffn = block.ffn_out.forward(ffn_act.view());
    if let Some(rng) = rng {
        let m = dropout_mask(ffn.dim(), cfg.dropout, rng);
        ffn *= &m;
        mask2 = Some(m);
    }
    let (output, norm2) = layer_norm((&h1 + &ffn).view(), &block.norm2);
    let trace = BlockTrace {
        input: h.to_owned(),
        interaction,
        mask1,
        norm1,
        h1,
        ffn_pre,
        ffn_act,
        mask2,
        norm2,
        output: output.clone(),
    };
    Ok((output, trace))
}

fn encoder_block_backward(
    block: &BlockParams,
    trace: &BlockTrace,
    d_out: ArrayView2<'_, f64>,
    grad: &mut BlockParams,
) -> Result<Array2<f64>> {
    let d_r2 = layer_norm_backward(d_out, &trace.norm2, &block.norm2, &mut grad.norm2);
    let mut d_ffn = d_r2.clone();
    if let Some(m) = &trace.mask2 {
        d_ffn *= m;
    }
    let d_act = block
        .ffn_out
        .backward(trace.ffn_act.view(), d_ffn.view(), &mut grad.ffn_out);
    let d_pre = &d_act * &trace.ffn_pre.mapv(gelu_grad);
    let d_h1 = d_r2
        + block
            .ffn_in
            .backward(trace.h1.view(), d_pre.view(), &mut grad.ffn_in);

    let d_r1 = layer_norm_backward(d_h1.view(), &trace.norm1, &block.norm1, &mut grad.norm1);
    let mut d_inter = d_r1.clone();
    if let Some(m) = &trace.mask1 {
        d_inter *= m;
    }
    let (d_q, d_k, d_v) = match (&trace.interaction, &block.fis, &mut grad.fis) {
        (InteractionTrace::Fis(t), Some(fis), Some(g)) => {
            let fg = fis_backward(fis, t, d_inter.view())?;
            crate::params::accumulate(g, &fg.params);
            (fg.q, fg.k, fg.v)
        }
        (InteractionTrace::Attention(t), None, None) => {
            let ag = self_attention_backward(t, d_inter.view())?;
            (ag.q, ag.k, ag.v)
        }
        _ => {
            return Err(Error::Config(
                "trace does not match block parameters".into(),
            ))
        }
    };
    let h = trace.input.view();
    let mut d_h = d_r1;
    d_h += &block.query.backward(h, d_q.view(), &mut grad.query);
    d_h += &block.key.backward(h, d_k.view(), &mut grad.key);
    d_h += &block.value.backward(h, d_v.view(), &mut grad.value);
    Ok(d_h)
}

impl Parameters for FisParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (bank, tag) in [(&self.q_bank, "q_mf"), (&self.k_bank, "k_mf")] {
            for (slot, name) in bank.slots.iter().zip(bank.kind.slot_names()) {
                out.push((format!("{tag}.{name}"), slot.view().into_dyn()));
            }
        }
        out.push(("consequents".into(), self.consequents.view().into_dyn()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (bank, tag) in [(&mut self.q_bank, "q_mf"), (&mut self.k_bank, "k_mf")] {
            let names = bank.kind.slot_names();
            for (slot, name) in bank.slots.iter_mut().zip(names) {
                out.push((format!("{tag}.{name}"), slot.view_mut().into_dyn()));
            }
        }
        out.push(("consequents".into(), self.consequents.view_mut().into_dyn()));
        out
    }
}

/// Forecast for one `lookback × N` window, no dropout.
pub fn model_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    x: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    Ok(model_forward_traced(params, cfg, x, None)?.0)
}

pub fn model_forward_traced(
    params: &ModelParams,
    cfg: &ModelConfig,
    x: ArrayView2<'_, f64>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, ModelTrace)> {
    check_input(x, cfg)?;
    if params.blocks.len() != cfg.n_blocks {
        return Err(Error::shape(
            "block count",
            &[cfg.n_blocks],
            &[params.blocks.len()],
        ));
    }
    let mut h = embed_variates(x, &params.embedding)?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for block in &params.blocks {
        let (out, trace) = encoder_block(h.view(), block, cfg, dropout_rng.as_deref_mut())?;
        blocks.push(trace);
        h = out;
    }
    let forecast = project(h.view(), &params.projection)?;
    Ok((
        forecast,
        ModelTrace {
            tokens_in: x.t().to_owned(),
            blocks,
            last_hidden: h,
        },
    ))
}

/// Gradients of a loss w.r.t. every parameter given `dL/dforecast` (`horizon × N`).
pub fn model_backward(
    params: &ModelParams,
    trace: &ModelTrace,
    d_forecast: ArrayView2<'_, f64>,
) -> Result<ModelParams> {
    let mut grad = params.zeros_like();
    model_backward_into(params, trace, d_forecast, &mut grad)?;
    Ok(grad)
}

/// Like [`model_backward`] but accumulates into an existing gradient.
pub fn model_backward_into(
    params: &ModelParams,
    trace: &ModelTrace,
    d_forecast: ArrayView2<'_, f64>,
    grad: &mut ModelParams,
) -> Result<()> {
    let expected = (params.projection.weight.ncols(), trace.last_hidden.nrows());
    if d_forecast.dim() != expected {
        return Err(Error::shape(
            "forecast gradient",
            &[expected.0, expected.1],
            d_forecast.shape(),
        ));
    }
    let mut d_h = params.projection.backward(
        trace.last_hidden.view(),
        d_forecast.t(),
        &mut grad.projection,
    );
    for ((block, bt), g) in params
        .blocks
        .iter()
        .zip(&trace.blocks)
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        d_h = encoder_block_backward(block, bt, d_h.view(), g)?;
    }
    params
        .embedding
        .backward(trace.tokens_in.view(), d_h.view(), &mut grad.embedding);
    Ok(())
}

/// Mean and population variance of a row, used by tests and trace dumps.
pub fn row_moments(row: ArrayView1<'_, f64>) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}
