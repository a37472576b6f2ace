//! Toy conditional velocity-prediction network.
//!
//! ```text
//! [x_t ; time_features(t)] --blocks.0.linear--+--silu--> ... --silu--> out.linear --> v_hat
//! [e_content ; e_style]    --cond.proj--------+
//! ```
//!
//! The first hidden layer sees the concatenation of the flattened image,
//! the time features and both condition embeddings; its weight matrix is
//! stored as two named blocks (`blocks.0.linear` for the image/time
//! columns, `cond.proj` for the condition columns) so low-rank adapters can
//! target the condition path separately.
//!
//! Forward and backward passes are written out by hand and operate on a
//! batch at a time (one row per item).

use crate::lora::LoraAdapter;
use crate::params::{ParamSet, TensorView};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("{slot} id {id} out of range (vocabulary {vocab})")]
    InvalidId {
        slot: &'static str,
        id: usize,
        vocab: usize,
    },
    #[error("time feature dimension must be even, got {0}")]
    OddTimeDim(usize),
    #[error("input has {got} columns, expected {expected}")]
    InputShape { got: usize, expected: usize },
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("upstream gradient shape {got:?} does not match cached output {expected:?}")]
    GradShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// Layer names used for targeting and serialization.
pub const EMBED: &str = "embed.cond";
pub const COND_PROJ: &str = "cond.proj";
pub const OUT: &str = "out.linear";

pub fn block_name(i: usize) -> String {
    format!("blocks.{i}.linear")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_time_dim")]
    pub time_embed_dim: usize,
    pub n_content: usize,
    pub n_style: usize,
    #[serde(default = "default_cond_dim")]
    pub cond_embed_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}
fn default_time_dim() -> usize {
    32
}
fn default_cond_dim() -> usize {
    16
}

impl Architecture {
    /// 16x16 RGB canvas with the default widths.
    pub fn toy(n_content: usize, n_style: usize) -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 16,
            hidden_widths: default_hidden(),
            time_embed_dim: default_time_dim(),
            n_content,
            n_style,
            cond_embed_dim: default_cond_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Content tokens, then style tokens, then one shared null token.
    pub fn cond_vocab(&self) -> usize {
        self.n_content + self.n_style + 1
    }

    pub fn null_token(&self) -> usize {
        self.n_content + self.n_style
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidArchitecture(m.to_string()));
        if self.input_dim() == 0 {
            return bad("image dimensions must be >= 1");
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return bad("need at least one hidden layer, all widths >= 1");
        }
        if self.time_embed_dim == 0 || self.cond_embed_dim == 0 {
            return bad("embedding dimensions must be >= 1");
        }
        if self.time_embed_dim % 2 == 1 {
            return Err(NetError::OddTimeDim(self.time_embed_dim));
        }
        if self.n_content == 0 || self.n_style == 0 {
            return bad("vocabularies must be >= 1");
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of every weight matrix that an adapter may target.
    pub fn weight_layers(&self) -> Vec<(String, usize, usize)> {
        let mut v = Vec::new();
        let h0 = self.hidden_widths[0];
        v.push((COND_PROJ.to_string(), h0, 2 * self.cond_embed_dim));
        let mut fan_in = self.input_dim() + self.time_embed_dim;
        for (i, &w) in self.hidden_widths.iter().enumerate() {
            v.push((block_name(i), w, fan_in));
            fan_in = w;
        }
        v.push((OUT.to_string(), self.input_dim(), fan_in));
        v
    }
}

/// Conditioning pair; `None` selects the null token for that slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cond {
    pub content: Option<usize>,
    pub style: Option<usize>,
}

impl Cond {
    pub fn new(content: usize, style: usize) -> Self {
        Self {
            content: Some(content),
            style: Some(style),
        }
    }

    pub const NULL: Cond = Cond {
        content: None,
        style: None,
    };

    pub fn without_style(self) -> Self {
        Self {
            style: None,
            ..self
        }
    }

    fn tokens(&self, arch: &Architecture) -> Result<[usize; 2], NetError> {
        let c = match self.content {
            Some(id) if id >= arch.n_content => {
                return Err(NetError::InvalidId {
                    slot: "content",
                    id,
                    vocab: arch.n_content,
                })
            }
            Some(id) => id,
            None => arch.null_token(),
        };
        let s = match self.style {
            Some(id) if id >= arch.n_style => {
                return Err(NetError::InvalidId {
                    slot: "style",
                    id,
                    vocab: arch.n_style,
                })
            }
            Some(id) => arch.n_content + id,
            None => arch.null_token(),
        };
        Ok([c, s])
    }
}

/// Replaces both ids with the null token with probability `p_drop`.
///
/// Always consumes exactly one uniform draw.
pub fn drop_condition<R: Rng + ?Sized>(cond: Cond, rng: &mut R, p_drop: f64) -> Cond {
    let u: f64 = rng.gen();
    if u < p_drop {
        Cond::NULL
    } else {
        cond
    }
}

/// Replaces only the style id with the null token with probability `p_drop`.
pub fn drop_style<R: Rng + ?Sized>(cond: Cond, rng: &mut R, p_drop: f64) -> Cond {
    let u: f64 = rng.gen();
    if u < p_drop {
        cond.without_style()
    } else {
        cond
    }
}

/// Sinusoidal features of `t` at `dim / 2` geometric frequencies spanning
/// `1..=1e4`: `[sin(f_0 t), .., sin(f_{n-1} t), cos(f_0 t), .., cos(f_{n-1} t)]`.
pub fn time_features(t: f64, dim: usize) -> Result<Vec<f64>, NetError> {
    if dim % 2 == 1 {
        return Err(NetError::OddTimeDim(dim));
    }
    let n = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..n {
        let f = if n == 1 {
            1.0
        } else {
            10_000f64.powf(i as f64 / (n - 1) as f64)
        };
        let (sin, cos) = (f * t).sin_cos();
        out[i] = sin;
        out[n + i] = cos;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_out x fan_in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All trainable weights of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    /// `cond_vocab x cond_embed_dim`
    pub embed: Array2<f64>,
    /// `hidden_widths[0] x (2 * cond_embed_dim)`, no bias.
    pub cond_proj: Array2<f64>,
    pub blocks: Vec<Linear>,
    pub out: Linear,
}

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std > 0");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl DenoiserParams {
    /// He-normal weights (`N(0, 2 / fan_in)`), zero biases and `N(0, 0.02^2)`
    /// embeddings. The first layer's fan-in counts both of its blocks.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self, NetError> {
        arch.validate()?;
        let embed = gaussian_matrix(rng, arch.cond_vocab(), arch.cond_embed_dim, 0.02);
        let first_fan_in = arch.input_dim() + arch.time_embed_dim + 2 * arch.cond_embed_dim;
        let h0 = arch.hidden_widths[0];
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let cond_proj = gaussian_matrix(rng, h0, 2 * arch.cond_embed_dim, he(first_fan_in));
        let mut blocks = Vec::with_capacity(arch.hidden_widths.len());
        let mut fan_in = arch.input_dim() + arch.time_embed_dim;
        for (i, &w) in arch.hidden_widths.iter().enumerate() {
            let std = if i == 0 { he(first_fan_in) } else { he(fan_in) };
            blocks.push(Linear {
                weight: gaussian_matrix(rng, w, fan_in, std),
                bias: Array1::zeros(w),
            });
            fan_in = w;
        }
        let out = Linear {
            weight: gaussian_matrix(rng, arch.input_dim(), fan_in, he(fan_in)),
            bias: Array1::zeros(arch.input_dim()),
        };
        Ok(Self {
            arch: arch.clone(),
            embed,
            cond_proj,
            blocks,
            out,
        })
    }

    /// All-zero parameters with the shapes of `arch`.
    pub fn zeros(arch: &Architecture) -> Result<Self, NetError> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.hidden_widths.len());
        let mut fan_in = arch.input_dim() + arch.time_embed_dim;
        for &w in &arch.hidden_widths {
            blocks.push(Linear {
                weight: Array2::zeros((w, fan_in)),
                bias: Array1::zeros(w),
            });
            fan_in = w;
        }
        Ok(Self {
            arch: arch.clone(),
            embed: Array2::zeros((arch.cond_vocab(), arch.cond_embed_dim)),
            cond_proj: Array2::zeros((arch.hidden_widths[0], 2 * arch.cond_embed_dim)),
            blocks,
            out: Linear {
                weight: Array2::zeros((arch.input_dim(), fan_in)),
                bias: Array1::zeros(arch.input_dim()),
            },
        })
    }

    /// Weight matrix of a targetable layer, by name.
    pub fn weight(&self, layer: &str) -> Option<&Array2<f64>> {
        match layer {
            COND_PROJ => Some(&self.cond_proj),
            OUT => Some(&self.out.weight),
            _ => self.block_index(layer).map(|i| &self.blocks[i].weight),
        }
    }

    pub fn weight_mut(&mut self, layer: &str) -> Option<&mut Array2<f64>> {
        match layer {
            COND_PROJ => Some(&mut self.cond_proj),
            OUT => Some(&mut self.out.weight),
            _ => self
                .block_index(layer)
                .map(move |i| &mut self.blocks[i].weight),
        }
    }

    fn block_index(&self, layer: &str) -> Option<usize> {
        let idx: usize = layer
            .strip_prefix("blocks.")?
            .strip_suffix(".linear")?
            .parse()
            .ok()?;
        (idx < self.blocks.len() && block_name(idx) == layer).then_some(idx)
    }
}

fn view<'a>(name: String, a: &'a [f64], shape: &[usize]) -> TensorView<'a> {
    TensorView {
        name,
        shape: shape.to_vec(),
        data: a,
    }
}

impl ParamSet for DenoiserParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = vec![
            view(
                format!("{EMBED}.weight"),
                self.embed.as_slice().unwrap(),
                self.embed.shape(),
            ),
            view(
                format!("{COND_PROJ}.weight"),
                self.cond_proj.as_slice().unwrap(),
                self.cond_proj.shape(),
            ),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let n = block_name(i);
            v.push(view(format!("{n}.weight"), b.weight.as_slice().unwrap(), b.weight.shape()));
            v.push(view(format!("{n}.bias"), b.bias.as_slice().unwrap(), b.bias.shape()));
        }
        v.push(view(
            format!("{OUT}.weight"),
            self.out.weight.as_slice().unwrap(),
            self.out.weight.shape(),
        ));
        v.push(view(
            format!("{OUT}.bias"),
            self.out.bias.as_slice().unwrap(),
            self.out.bias.shape(),
        ));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.embed.as_slice_mut().unwrap(),
            self.cond_proj.as_slice_mut().unwrap(),
        ];
        for b in self.blocks.iter_mut() {
            v.push(b.weight.as_slice_mut().unwrap());
            v.push(b.bias.as_slice_mut().unwrap());
        }
        v.push(self.out.weight.as_slice_mut().unwrap());
        v.push(self.out.bias.as_slice_mut().unwrap());
        v
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::schedule::sigmoid(x)
}

/// Activations retained by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<[usize; 2]>,
    /// `[x_t ; time features]`, `B x (D + T)`
    input: Array2<f64>,
    /// `[e_content ; e_style]`, `B x 2E`
    cond_input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
    /// `input_of_layer . A^T` for every adapted layer, keyed like the adapter.
    lora_mid: Vec<Option<Array2<f64>>>,
    output_shape: (usize, usize),
}

/// Forward pass result.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Array2<f64>,
    pub cache: ForwardCache,
}

/// Gradients requested from [`Model::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub base: bool,
    pub adapter: bool,
}

impl GradRequest {
    pub const NONE: GradRequest = GradRequest {
        base: false,
        adapter: false,
    };
    pub const BASE: GradRequest = GradRequest {
        base: true,
        adapter: false,
    };
    pub const ADAPTER: GradRequest = GradRequest {
        base: false,
        adapter: true,
    };
    pub const ALL: GradRequest = GradRequest {
        base: true,
        adapter: true,
    };
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub base: Option<DenoiserParams>,
    pub adapter: Option<LoraAdapter>,
}

/// A denoiser with an optional low-rank adapter.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub params: &'a DenoiserParams,
    pub adapter: Option<&'a LoraAdapter>,
}

impl<'a> Model<'a> {
    pub fn base(params: &'a DenoiserParams) -> Self {
        Self {
            params,
            adapter: None,
        }
    }

    pub fn adapted(params: &'a DenoiserParams, adapter: &'a LoraAdapter) -> Self {
        Self {
            params,
            adapter: Some(adapter),
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.params.arch
    }

    /// Output only.
    pub fn predict(&self, x_t: ArrayView2<f64>, t: &[f64], cond: &[Cond]) -> Result<Array2<f64>, NetError> {
        Ok(self.forward(x_t, t, cond)?.output)
    }

    /// Evaluates `v_hat` for a batch: `x_t` is `B x input_dim`, with one
    /// time and one condition per row.
    pub fn forward(&self, x_t: ArrayView2<f64>, t: &[f64], cond: &[Cond]) -> Result<Forward, NetError> {
        let p = self.params;
        let arch = &p.arch;
        let (b, d) = x_t.dim();
        if d != arch.input_dim() {
            return Err(NetError::InputShape {
                got: d,
                expected: arch.input_dim(),
            });
        }
        if t.len() != b || cond.len() != b {
            return Err(NetError::BatchMismatch(format!(
                "{b} rows, {} times, {} conditions",
                t.len(),
                cond.len()
            )));
        }
        let tokens = cond
            .iter()
            .map(|c| c.tokens(arch))
            .collect::<Result<Vec<_>, _>>()?;

        let td = arch.time_embed_dim;
        let mut input = Array2::zeros((b, d + td));
        input.slice_mut(s![.., ..d]).assign(&x_t);
        for (i, &ti) in t.iter().enumerate() {
            let tf = time_features(ti, td)?;
            for (j, v) in tf.into_iter().enumerate() {
                input[[i, d + j]] = v;
            }
        }
        let e = arch.cond_embed_dim;
        let mut cond_input = Array2::zeros((b, 2 * e));
        for (i, tok) in tokens.iter().enumerate() {
            cond_input
                .slice_mut(s![i, ..e])
                .assign(&p.embed.row(tok[0]));
            cond_input
                .slice_mut(s![i, e..])
                .assign(&p.embed.row(tok[1]));
        }

        let n_layers = p.blocks.len() + 2;
        let mut lora_mid: Vec<Option<Array2<f64>>> = vec![None; n_layers];
        let mut pre = Vec::with_capacity(p.blocks.len());
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(p.blocks.len());

        // layer slots: 0 = cond.proj, 1..=n = blocks, n+1 = out
        let mut z = input.dot(&p.blocks[0].weight.t()) + &p.blocks[0].bias;
        self.add_lora(&block_name(0), &input, &mut z, &mut lora_mid[1]);
        z = z + cond_input.dot(&p.cond_proj.t());
        self.add_lora(COND_PROJ, &cond_input, &mut z, &mut lora_mid[0]);
        let mut h = z.mapv(|v| v * sigmoid(v));
        pre.push(z);
        for (i, blk) in p.blocks.iter().enumerate().skip(1) {
            let mut z = h.dot(&blk.weight.t()) + &blk.bias;
            self.add_lora(&block_name(i), &h, &mut z, &mut lora_mid[i + 1]);
            let next = z.mapv(|v| v * sigmoid(v));
            hidden.push(h);
            pre.push(z);
            h = next;
        }
        let mut output = h.dot(&p.out.weight.t()) + &p.out.bias;
        self.add_lora(OUT, &h, &mut output, &mut lora_mid[n_layers - 1]);
        hidden.push(h);

        let output_shape = output.dim();
        Ok(Forward {
            output,
            cache: ForwardCache {
                tokens,
                input,
                cond_input,
                pre,
                hidden,
                lora_mid,
                output_shape,
            },
        })
    }

    fn add_lora(&self, layer: &str, input: &Array2<f64>, z: &mut Array2<f64>, mid: &mut Option<Array2<f64>>) {
        if let Some(l) = self.adapter.and_then(|a| a.layer(layer)) {
            let u = input.dot(&l.a.t());
            let delta = u.dot(&l.b.t());
            z.scaled_add(self.adapter.unwrap().scale(), &delta);
            *mid = Some(u);
        }
    }

    /// Back-propagates `grad_output` (`dL/dv_hat`, same shape as the forward
    /// output) to the requested parameter groups.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: ArrayView2<f64>,
        want: GradRequest,
    ) -> Result<Gradients, NetError> {
        if grad_output.dim() != cache.output_shape {
            return Err(NetError::GradShape {
                got: grad_output.dim(),
                expected: cache.output_shape,
            });
        }
        let p = self.params;
        let n_layers = p.blocks.len() + 2;
        let mut gbase = want.base.then(|| p.zeros_like());
        let mut gad = match (want.adapter, self.adapter) {
            (true, Some(a)) => Some(a.zeros_like()),
            _ => None,
        };
        let last = cache.hidden.last().expect("at least one hidden layer");

        // output layer
        if let Some(g) = gbase.as_mut() {
            g.out.weight = grad_output.t().dot(last);
            g.out.bias = grad_output.sum_axis(Axis(0));
        }
        let mut gh = grad_output.dot(&p.out.weight);
        self.lora_backward(OUT, last, &grad_output, &cache.lora_mid[n_layers - 1], &mut gh, gad.as_mut());

        for i in (0..p.blocks.len()).rev() {
            let z = &cache.pre[i];
            let mut gz = gh;
            ndarray::Zip::from(&mut gz).and(z).for_each(|g, &zv| {
                let sg = sigmoid(zv);
                *g *= sg * (1.0 + zv * (1.0 - sg));
            });
            let input = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            if let Some(g) = gbase.as_mut() {
                g.blocks[i].weight = gz.t().dot(input);
                g.blocks[i].bias = gz.sum_axis(Axis(0));
            }
            if i == 0 {
                let mut scratch = Array2::zeros((0, 0));
                self.lora_backward(&block_name(0), input, &gz.view(), &cache.lora_mid[1], &mut scratch, gad.as_mut());
                // condition path
                let mut gc = gz.dot(&p.cond_proj);
                self.lora_backward(COND_PROJ, &cache.cond_input, &gz.view(), &cache.lora_mid[0], &mut gc, gad.as_mut());
                if let Some(g) = gbase.as_mut() {
                    g.cond_proj = gz.t().dot(&cache.cond_input);
                    let e = p.arch.cond_embed_dim;
                    for (row, tok) in cache.tokens.iter().enumerate() {
                        for slot in 0..2 {
                            let src = gc.slice(s![row, slot * e..(slot + 1) * e]);
                            let mut dst = g.embed.row_mut(tok[slot]);
                            dst += &src;
                        }
                    }
                }
                gh = Array2::zeros((0, 0));
            } else {
                let mut next = gz.dot(&p.blocks[i].weight);
                self.lora_backward(&block_name(i), input, &gz.view(), &cache.lora_mid[i + 1], &mut next, gad.as_mut());
                gh = next;
            }
        }
        let _ = gh;
        Ok(Gradients {
            base: gbase,
            adapter: gad,
        })
    }

    /// Adapter gradients for one layer, plus the adapter's contribution to
    /// the gradient flowing into the layer input (skipped when `g_in` is
    /// empty).
    fn lora_backward(
        &self,
        layer: &str,
        input: &Array2<f64>,
        g_out: &ArrayView2<f64>,
        mid: &Option<Array2<f64>>,
        g_in: &mut Array2<f64>,
        gad: Option<&mut LoraAdapter>,
    ) {
        let Some(adapter) = self.adapter else { return };
        let Some(l) = adapter.layer(layer) else { return };
        let u = mid.as_ref().expect("forward cached adapter activations");
        let scale = adapter.scale();
        // gu = s * g_out . B   (B x r)
        let gu = g_out.dot(&l.b) * scale;
        if let Some(ga) = gad {
            let gl = ga.layer_mut(layer).expect("same layout");
            gl.b = g_out.t().dot(u) * scale;
            gl.a = gu.t().dot(input);
        }
        if !g_in.is_empty() {
            *g_in += &gu.dot(&l.a);
        }
    }
}
