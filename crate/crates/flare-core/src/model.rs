//! Network assembly: ResMLP primitive, mixer blocks, projections,
//! initialization and parameter counting.
//!
//! The forward pass exists twice: plain functions over tensors (used for
//! evaluation and as composition oracles in tests) and a tape variant that
//! records every op for the backward pass. A consistency test keeps the two
//! in agreement.

use crate::autodiff::{col_block, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mixer::{flare_layer_forward, MixerParams};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Widths, depth and residual wiring of one ResMLP stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResMlpConfig {
    pub c_in: usize,
    pub c_hidden: usize,
    pub c_out: usize,
    /// Number of residual layers between the input and output linears.
    pub n_layers: usize,
    pub input_residual: bool,
    pub output_residual: bool,
}

impl ResMlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_hidden == 0 || self.c_out == 0 {
            return Err(Error::InvalidConfig("resmlp widths must be >= 1".into()));
        }
        if self.input_residual && self.c_in != self.c_hidden {
            return Err(Error::InvalidConfig(format!(
                "input residual needs c_in == c_hidden, got {} vs {}",
                self.c_in, self.c_hidden
            )));
        }
        if self.output_residual && self.c_hidden != self.c_out {
            return Err(Error::InvalidConfig(format!(
                "output residual needs c_hidden == c_out, got {} vs {}",
                self.c_hidden, self.c_out
            )));
        }
        Ok(())
    }
}

/// Whole-network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Mixer blocks B.
    pub blocks: usize,
    /// Feature width C.
    pub channels: usize,
    /// Attention heads H; C must be divisible by H.
    pub heads: usize,
    /// Latent tokens M.
    pub latents: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Key/value projection depth.
    #[serde(default = "default_kv_layers")]
    pub kv_layers: usize,
    /// Block feed-forward depth.
    #[serde(default = "default_ff_layers")]
    pub ff_layers: usize,
    /// Input/output projection depth.
    #[serde(default = "default_io_layers")]
    pub io_layers: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// When false the mixer sublayer is skipped entirely (its residual
    /// contribution is zero); parameters are still allocated, which keeps
    /// ablations initialization-compatible.
    #[serde(default = "default_true")]
    pub mixer_enabled: bool,
}

fn default_kv_layers() -> usize {
    3
}
fn default_ff_layers() -> usize {
    3
}
fn default_io_layers() -> usize {
    2
}
fn default_ln_eps() -> f64 {
    1e-5
}
fn default_true() -> bool {
    true
}

/// A small but structurally valid baseline; callers override the sizes.
impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 1,
            channels: 8,
            heads: 1,
            latents: 4,
            d_in: 3,
            d_out: 1,
            kv_layers: default_kv_layers(),
            ff_layers: default_ff_layers(),
            io_layers: default_io_layers(),
            layer_norm_eps: default_ln_eps(),
            seed: 0,
            mixer_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.latents == 0 || self.channels == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig(
                "blocks, channels, heads and latents must be >= 1".into(),
            ));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::InvalidConfig("d_in and d_out must be >= 1".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "layer_norm_eps must be positive, got {}",
                self.layer_norm_eps
            )));
        }
        self.input_proj_cfg().validate()?;
        self.output_proj_cfg().validate()?;
        self.kv_cfg().validate()?;
        self.ff_cfg().validate()
    }

    pub fn input_proj_cfg(&self) -> ResMlpConfig {
        ResMlpConfig {
            c_in: self.d_in,
            c_hidden: self.channels,
            c_out: self.channels,
            n_layers: self.io_layers,
            input_residual: false,
            output_residual: true,
        }
    }

    pub fn output_proj_cfg(&self) -> ResMlpConfig {
        ResMlpConfig {
            c_in: self.channels,
            c_hidden: self.channels,
            c_out: self.d_out,
            n_layers: self.io_layers,
            input_residual: true,
            output_residual: false,
        }
    }

    pub fn kv_cfg(&self) -> ResMlpConfig {
        self.square_cfg(self.kv_layers)
    }

    pub fn ff_cfg(&self) -> ResMlpConfig {
        self.square_cfg(self.ff_layers)
    }

    fn square_cfg(&self, n_layers: usize) -> ResMlpConfig {
        ResMlpConfig {
            c_in: self.channels,
            c_hidden: self.channels,
            c_out: self.channels,
            n_layers,
            input_residual: true,
            output_residual: true,
        }
    }
}

/// One affine map, applied as y = x·W + b with W stored input×output.
#[derive(Clone)]
pub struct LinearParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone)]
pub struct ResMlpParams<T: Scalar> {
    pub input: LinearParams<T>,
    pub hidden: Vec<LinearParams<T>>,
    pub output: LinearParams<T>,
}

#[derive(Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone)]
pub struct BlockParams<T: Scalar> {
    pub mixer_norm: LayerNormParams<T>,
    pub mixer: MixerParams<T>,
    pub mlp_norm: LayerNormParams<T>,
    pub mlp: ResMlpParams<T>,
}

#[derive(Clone)]
pub struct ModelParams<T: Scalar> {
    pub input_proj: ResMlpParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub output_norm: LayerNormParams<T>,
    pub output_proj: ResMlpParams<T>,
}

pub fn linear_forward<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    linalg::add_row_bias(&linalg::matmul(x, &p.weight)?, &p.bias)
}

/// h = Linear_in(x) (+ x); L times h += gelu(Linear(h)); y = Linear_out(h) (+ h).
pub fn resmlp_forward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ResMlpConfig,
    params: &ResMlpParams<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut h = linear_forward(x, &params.input)?;
    if cfg.input_residual {
        h = linalg::add(&h, x)?;
    }
    for layer in &params.hidden {
        let activated = linalg::gelu(&linear_forward(&h, layer)?);
        h = linalg::add(&h, &activated)?;
    }
    let mut y = linear_forward(&h, &params.output)?;
    if cfg.output_residual {
        y = linalg::add(&y, &h)?;
    }
    Ok(y)
}

pub fn input_projection<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ModelConfig,
    params: &ResMlpParams<T>,
) -> Result<Tensor<T>> {
    resmlp_forward(x, &cfg.input_proj_cfg(), params)
}

/// LayerNorm followed by the output ResMLP.
pub fn output_projection<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ModelConfig,
    norm: &LayerNormParams<T>,
    params: &ResMlpParams<T>,
) -> Result<Tensor<T>> {
    let normed = linalg::layer_norm(x, &norm.gamma, &norm.beta, cfg.layer_norm_eps)?;
    resmlp_forward(&normed, &cfg.output_proj_cfg(), params)
}

/// Pre-norm block: x + mixer(LN(x)), then x + ResMLP(LN(x)).
pub fn flare_block_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &BlockParams<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut out = x.clone();
    if cfg.mixer_enabled {
        let normed = linalg::layer_norm(
            &out,
            &block.mixer_norm.gamma,
            &block.mixer_norm.beta,
            cfg.layer_norm_eps,
        )?;
        let mixed = flare_layer_forward(&normed, &block.mixer)?;
        out = linalg::add(&out, &mixed)?;
    }
    let normed = linalg::layer_norm(
        &out,
        &block.mlp_norm.gamma,
        &block.mlp_norm.beta,
        cfg.layer_norm_eps,
    )?;
    let ff = resmlp_forward(&normed, &cfg.ff_cfg(), &block.mlp)?;
    linalg::add(&out, &ff)
}

/// Input projection, B mixer blocks, output projection.
pub fn model_forward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.cols() != cfg.d_in {
        return Err(Error::InvalidConfig(format!(
            "model_forward: input shape {:?} does not match d_in {}",
            x.shape(),
            cfg.d_in
        )));
    }
    let mut h = input_projection(x, cfg, &params.input_proj)?;
    for block in &params.blocks {
        h = flare_block_forward(&h, block, cfg)?;
    }
    output_projection(&h, cfg, &params.output_norm, &params.output_proj)
}

/// Per-head (latent queries, keys) entering the mixer of one block.
///
/// Runs the forward pass through the preceding blocks, applies the target
/// block's first LayerNorm and key projection, and splits both operands by
/// head into (M×D, N×D) pairs. This is the probe point for spectral
/// analysis of the token-communication operator.
pub fn mixer_qk_heads<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    block: usize,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    if block >= params.blocks.len() {
        return Err(Error::InvalidConfig(format!(
            "block {} out of range, model has {}",
            block,
            params.blocks.len()
        )));
    }
    if x.rank() != 2 || x.cols() != cfg.d_in {
        return Err(Error::InvalidConfig(format!(
            "mixer_qk_heads: input shape {:?} does not match d_in {}",
            x.shape(),
            cfg.d_in
        )));
    }
    let mut h = input_projection(x, cfg, &params.input_proj)?;
    for b in &params.blocks[..block] {
        h = flare_block_forward(&h, b, cfg)?;
    }
    let bp = &params.blocks[block];
    let normed = linalg::layer_norm(
        &h,
        &bp.mixer_norm.gamma,
        &bp.mixer_norm.beta,
        cfg.layer_norm_eps,
    )?;
    let keys = resmlp_forward(&normed, &bp.mixer.kv_cfg, &bp.mixer.key_proj)?;
    let d = cfg.channels / cfg.heads;
    let mut out = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        out.push((
            col_block(&bp.mixer.latent_queries, head * d, d)?,
            col_block(&keys, head * d, d)?,
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tape-recorded forward pass.
// ---------------------------------------------------------------------------

pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

pub struct ResMlpVars {
    pub input: LinearVars,
    pub hidden: Vec<LinearVars>,
    pub output: LinearVars,
}

pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

pub struct BlockVars {
    pub mixer_norm: LayerNormVars,
    pub latent_queries: Var,
    pub key_proj: ResMlpVars,
    pub value_proj: ResMlpVars,
    pub out_proj: LinearVars,
    pub mlp_norm: LayerNormVars,
    pub mlp: ResMlpVars,
}

pub struct ModelVars {
    pub input_proj: ResMlpVars,
    pub blocks: Vec<BlockVars>,
    pub output_norm: LayerNormVars,
    pub output_proj: ResMlpVars,
}

fn register_linear<T: Scalar>(tape: &mut Tape<T>, p: &LinearParams<T>, flat: &mut Vec<Var>) -> LinearVars {
    let weight = tape.leaf(p.weight.clone());
    let bias = tape.leaf(p.bias.clone());
    flat.push(weight);
    flat.push(bias);
    LinearVars { weight, bias }
}

fn register_resmlp<T: Scalar>(tape: &mut Tape<T>, p: &ResMlpParams<T>, flat: &mut Vec<Var>) -> ResMlpVars {
    let input = register_linear(tape, &p.input, flat);
    let hidden = p
        .hidden
        .iter()
        .map(|l| register_linear(tape, l, flat))
        .collect();
    let output = register_linear(tape, &p.output, flat);
    ResMlpVars {
        input,
        hidden,
        output,
    }
}

fn register_norm<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LayerNormParams<T>,
    flat: &mut Vec<Var>,
) -> LayerNormVars {
    let gamma = tape.leaf(p.gamma.clone());
    let beta = tape.leaf(p.beta.clone());
    flat.push(gamma);
    flat.push(beta);
    LayerNormVars { gamma, beta }
}

/// Registers every parameter tensor as a trainable leaf. The flat list is in
/// the same canonical order as [`ModelParams::for_each`], so gradients can be
/// zipped against parameters.
pub fn register_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
) -> (ModelVars, Vec<Var>) {
    let mut flat = Vec::new();
    let input_proj = register_resmlp(tape, &params.input_proj, &mut flat);
    let blocks = params
        .blocks
        .iter()
        .map(|b| {
            let mixer_norm = register_norm(tape, &b.mixer_norm, &mut flat);
            let latent_queries = tape.leaf(b.mixer.latent_queries.clone());
            flat.push(latent_queries);
            let key_proj = register_resmlp(tape, &b.mixer.key_proj, &mut flat);
            let value_proj = register_resmlp(tape, &b.mixer.value_proj, &mut flat);
            let out_proj = register_linear(tape, &b.mixer.out_proj, &mut flat);
            let mlp_norm = register_norm(tape, &b.mlp_norm, &mut flat);
            let mlp = register_resmlp(tape, &b.mlp, &mut flat);
            BlockVars {
                mixer_norm,
                latent_queries,
                key_proj,
                value_proj,
                out_proj,
                mlp_norm,
                mlp,
            }
        })
        .collect();
    let output_norm = register_norm(tape, &params.output_norm, &mut flat);
    let output_proj = register_resmlp(tape, &params.output_proj, &mut flat);
    (
        ModelVars {
            input_proj,
            blocks,
            output_norm,
            output_proj,
        },
        flat,
    )
}

fn linear_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, p.weight)?;
    tape.add_row_bias(y, p.bias)
}

pub fn resmlp_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ResMlpConfig,
    vars: &ResMlpVars,
) -> Result<Var> {
    cfg.validate()?;
    let mut h = linear_tape(tape, x, &vars.input)?;
    if cfg.input_residual {
        h = tape.add(h, x)?;
    }
    for layer in &vars.hidden {
        let lin = linear_tape(tape, h, layer)?;
        let act = tape.gelu(lin);
        h = tape.add(h, act)?;
    }
    let mut y = linear_tape(tape, h, &vars.output)?;
    if cfg.output_residual {
        y = tape.add(y, h)?;
    }
    Ok(y)
}

/// Tape version of [`model_forward`]; `x` is usually a constant leaf.
pub fn model_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ModelConfig,
    vars: &ModelVars,
) -> Result<Var> {
    let mut h = resmlp_tape(tape, x, &cfg.input_proj_cfg(), &vars.input_proj)?;
    let kv_cfg = cfg.kv_cfg();
    let ff_cfg = cfg.ff_cfg();
    for block in &vars.blocks {
        if cfg.mixer_enabled {
            let normed = tape.layer_norm(
                h,
                block.mixer_norm.gamma,
                block.mixer_norm.beta,
                cfg.layer_norm_eps,
            )?;
            let k = resmlp_tape(tape, normed, &kv_cfg, &block.key_proj)?;
            let v = resmlp_tape(tape, normed, &kv_cfg, &block.value_proj)?;
            let mixed = tape.latent_mix(block.latent_queries, k, v, cfg.heads)?;
            let projected = linear_tape(tape, mixed, &block.out_proj)?;
            h = tape.add(h, projected)?;
        }
        let normed = tape.layer_norm(
            h,
            block.mlp_norm.gamma,
            block.mlp_norm.beta,
            cfg.layer_norm_eps,
        )?;
        let ff = resmlp_tape(tape, normed, &ff_cfg, &block.mlp)?;
        h = tape.add(h, ff)?;
    }
    let normed = tape.layer_norm(
        h,
        vars.output_norm.gamma,
        vars.output_norm.beta,
        cfg.layer_norm_eps,
    )?;
    resmlp_tape(tape, normed, &cfg.output_proj_cfg(), &vars.output_proj)
}

// ---------------------------------------------------------------------------
// Canonical traversal, initialization, counting.
// ---------------------------------------------------------------------------

fn resmlp_for_each<'a, T: Scalar>(
    prefix: &str,
    p: &'a ResMlpParams<T>,
    f: &mut impl FnMut(String, &'a Tensor<T>),
) {
    f(format!("{prefix}.in.weight"), &p.input.weight);
    f(format!("{prefix}.in.bias"), &p.input.bias);
    for (i, layer) in p.hidden.iter().enumerate() {
        f(format!("{prefix}.res{i}.weight"), &layer.weight);
        f(format!("{prefix}.res{i}.bias"), &layer.bias);
    }
    f(format!("{prefix}.out.weight"), &p.output.weight);
    f(format!("{prefix}.out.bias"), &p.output.bias);
}

fn resmlp_for_each_mut<T: Scalar>(
    prefix: &str,
    p: &mut ResMlpParams<T>,
    f: &mut impl FnMut(String, &mut Tensor<T>),
) {
    f(format!("{prefix}.in.weight"), &mut p.input.weight);
    f(format!("{prefix}.in.bias"), &mut p.input.bias);
    for (i, layer) in p.hidden.iter_mut().enumerate() {
        f(format!("{prefix}.res{i}.weight"), &mut layer.weight);
        f(format!("{prefix}.res{i}.bias"), &mut layer.bias);
    }
    f(format!("{prefix}.out.weight"), &mut p.output.weight);
    f(format!("{prefix}.out.bias"), &mut p.output.bias);
}

impl<T: Scalar> ModelParams<T> {
    /// Visits every parameter tensor in canonical order with a stable name.
    /// The same order is used by [`register_params`], the optimizer state
    /// and the checkpoint format.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        resmlp_for_each("input_proj", &self.input_proj, f);
        for (b, block) in self.blocks.iter().enumerate() {
            f(format!("block{b}.norm1.gamma"), &block.mixer_norm.gamma);
            f(format!("block{b}.norm1.beta"), &block.mixer_norm.beta);
            f(format!("block{b}.mixer.latent_q"), &block.mixer.latent_queries);
            resmlp_for_each(&format!("block{b}.mixer.key"), &block.mixer.key_proj, f);
            resmlp_for_each(&format!("block{b}.mixer.value"), &block.mixer.value_proj, f);
            f(format!("block{b}.mixer.out.weight"), &block.mixer.out_proj.weight);
            f(format!("block{b}.mixer.out.bias"), &block.mixer.out_proj.bias);
            f(format!("block{b}.norm2.gamma"), &block.mlp_norm.gamma);
            f(format!("block{b}.norm2.beta"), &block.mlp_norm.beta);
            resmlp_for_each(&format!("block{b}.mlp"), &block.mlp, f);
        }
        f("output.norm.gamma".to_string(), &self.output_norm.gamma);
        f("output.norm.beta".to_string(), &self.output_norm.beta);
        resmlp_for_each("output_proj", &self.output_proj, f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        resmlp_for_each_mut("input_proj", &mut self.input_proj, f);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            f(format!("block{b}.norm1.gamma"), &mut block.mixer_norm.gamma);
            f(format!("block{b}.norm1.beta"), &mut block.mixer_norm.beta);
            f(
                format!("block{b}.mixer.latent_q"),
                &mut block.mixer.latent_queries,
            );
            resmlp_for_each_mut(&format!("block{b}.mixer.key"), &mut block.mixer.key_proj, f);
            resmlp_for_each_mut(
                &format!("block{b}.mixer.value"),
                &mut block.mixer.value_proj,
                f,
            );
            f(
                format!("block{b}.mixer.out.weight"),
                &mut block.mixer.out_proj.weight,
            );
            f(
                format!("block{b}.mixer.out.bias"),
                &mut block.mixer.out_proj.bias,
            );
            f(format!("block{b}.norm2.gamma"), &mut block.mlp_norm.gamma);
            f(format!("block{b}.norm2.beta"), &mut block.mlp_norm.beta);
            resmlp_for_each_mut(&format!("block{b}.mlp"), &mut block.mlp, f);
        }
        f("output.norm.gamma".to_string(), &mut self.output_norm.gamma);
        f("output.norm.beta".to_string(), &mut self.output_norm.beta);
        resmlp_for_each_mut("output_proj", &mut self.output_proj, f);
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_linear = |l: &LinearParams<T>| LinearParams {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let cast_resmlp = |p: &ResMlpParams<T>| ResMlpParams {
            input: cast_linear(&p.input),
            hidden: p.hidden.iter().map(cast_linear).collect(),
            output: cast_linear(&p.output),
        };
        let cast_norm = |p: &LayerNormParams<T>| LayerNormParams {
            gamma: p.gamma.cast(),
            beta: p.beta.cast(),
        };
        ModelParams {
            input_proj: cast_resmlp(&self.input_proj),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    mixer_norm: cast_norm(&b.mixer_norm),
                    mixer: MixerParams {
                        latent_queries: b.mixer.latent_queries.cast(),
                        key_proj: cast_resmlp(&b.mixer.key_proj),
                        value_proj: cast_resmlp(&b.mixer.value_proj),
                        out_proj: cast_linear(&b.mixer.out_proj),
                        kv_cfg: b.mixer.kv_cfg.clone(),
                        heads: b.mixer.heads,
                    },
                    mlp_norm: cast_norm(&b.mlp_norm),
                    mlp: cast_resmlp(&b.mlp),
                })
                .collect(),
            output_norm: cast_norm(&self.output_norm),
            output_proj: cast_resmlp(&self.output_proj),
        }
    }
}

struct TruncNormal<'r> {
    dist: Normal<f64>,
    cutoff: f64,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> TruncNormal<'r> {
    fn new(std: f64, rng: &'r mut ChaCha8Rng) -> Self {
        TruncNormal {
            dist: Normal::new(0.0, std).expect("std > 0"),
            cutoff: 2.0 * std,
            rng,
        }
    }

    fn draw(&mut self) -> f64 {
        loop {
            let v = self.dist.sample(self.rng);
            if v.abs() <= self.cutoff {
                return v;
            }
        }
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.draw())).collect();
        Tensor::new(shape, data).expect("shape/product consistent")
    }
}

fn init_linear<T: Scalar>(c_in: usize, c_out: usize, tn: &mut TruncNormal) -> LinearParams<T> {
    LinearParams {
        weight: tn.tensor(&[c_in, c_out]),
        bias: Tensor::zeros(&[c_out]),
    }
}

fn init_resmlp<T: Scalar>(cfg: &ResMlpConfig, tn: &mut TruncNormal) -> ResMlpParams<T> {
    ResMlpParams {
        input: init_linear(cfg.c_in, cfg.c_hidden, tn),
        hidden: (0..cfg.n_layers)
            .map(|_| init_linear(cfg.c_hidden, cfg.c_hidden, tn))
            .collect(),
        output: init_linear(cfg.c_hidden, cfg.c_out, tn),
    }
}

fn init_norm<T: Scalar>(c: usize) -> LayerNormParams<T> {
    LayerNormParams {
        gamma: Tensor::filled(&[c], T::ONE),
        beta: Tensor::zeros(&[c]),
    }
}

/// Deterministic initialization: every weight and the latent queries are
/// drawn from a truncated normal (std 0.02, cut at two standard deviations);
/// biases start at zero, layer norms at gamma=1, beta=0.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tn = TruncNormal::new(0.02, &mut rng);
    let c = cfg.channels;
    let input_proj = init_resmlp(&cfg.input_proj_cfg(), &mut tn);
    let blocks = (0..cfg.blocks)
        .map(|_| BlockParams {
            mixer_norm: init_norm(c),
            mixer: MixerParams {
                latent_queries: tn.tensor(&[cfg.latents, c]),
                key_proj: init_resmlp(&cfg.kv_cfg(), &mut tn),
                value_proj: init_resmlp(&cfg.kv_cfg(), &mut tn),
                out_proj: init_linear(c, c, &mut tn),
                kv_cfg: cfg.kv_cfg(),
                heads: cfg.heads,
            },
            mlp_norm: init_norm(c),
            mlp: init_resmlp(&cfg.ff_cfg(), &mut tn),
        })
        .collect();
    Ok(ModelParams {
        input_proj,
        blocks,
        output_norm: init_norm(c),
        output_proj: init_resmlp(&cfg.output_proj_cfg(), &mut tn),
    })
}

fn linear_count(c_in: usize, c_out: usize) -> usize {
    c_in * c_out + c_out
}

fn resmlp_count(cfg: &ResMlpConfig) -> usize {
    linear_count(cfg.c_in, cfg.c_hidden)
        + cfg.n_layers * linear_count(cfg.c_hidden, cfg.c_hidden)
        + linear_count(cfg.c_hidden, cfg.c_out)
}

/// Closed-form scalar parameter count; matches `init_params(cfg).scalar_count()`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_breakdown(cfg).into_iter().map(|(_, n)| n).sum()
}

/// Per-component parameter shares (disjoint; they sum to `param_count`).
pub fn param_breakdown(cfg: &ModelConfig) -> Vec<(&'static str, usize)> {
    let c = cfg.channels;
    let b = cfg.blocks;
    let norm = 2 * c;
    vec![
        ("input_projection", resmlp_count(&cfg.input_proj_cfg())),
        ("latent_queries", b * cfg.latents * c),
        ("kv_projections", b * 2 * resmlp_count(&cfg.kv_cfg())),
        ("mixer_out_projections", b * linear_count(c, c)),
        ("block_mlps", b * resmlp_count(&cfg.ff_cfg())),
        ("block_norms", b * 2 * norm),
        ("output_norm", norm),
        ("output_projection", resmlp_count(&cfg.output_proj_cfg())),
    ]
}

/// Gradients of every parameter in canonical order, zeros where the loss did
/// not touch a tensor.
pub fn gradients_in_order<T: Scalar>(
    grads: &Gradients<T>,
    flat_vars: &[Var],
    params: &ModelParams<T>,
) -> Vec<Tensor<T>> {
    let mut shapes: Vec<&Tensor<T>> = Vec::with_capacity(flat_vars.len());
    params.for_each(&mut |_, t| shapes.push(t));
    debug_assert_eq!(shapes.len(), flat_vars.len());
    flat_vars
        .iter()
        .zip(shapes)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect()
}
