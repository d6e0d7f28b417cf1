//! Graph-conditioned transformer denoiser.
//!
//! Two structurally similar transformer decoders: one encodes the
//! reference motion under its own skeleton graph, the other predicts the
//! clean retargeted motion from a noisy input under the target graph,
//! cross-attending to the encoded reference through the joint-map mask.
//!
//! Motion enters as joint-level tokens (one per frame-joint pair). Each
//! decoder layer runs, with pre-norm residuals:
//!
//! 1. spatial self-attention over the joints of each frame, with an
//!    additive attention bias looked up from the 4-code relation matrix
//!    (query and key relation embeddings),
//! 2. temporal self-attention over frames of each joint, hard-masked to
//!    a centered window,
//! 3. multi-conditional cross attention with the heads split across the
//!    conditions (joint axes, link vectors, and — for the denoising
//!    decoder — the encoded reference under the correspondence mask),
//! 4. a feed-forward block.
//!
//! Computation runs on trimmed token grids (only valid frames/joints),
//! which makes padding invariance exact: appending padded rows to a clip
//! cannot change any real token.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionClip, LANES};
use crate::rng::rng_from_seed;
use crate::skeleton::{extend_joint_map, JointMap, SkeletonGraph};
use crate::tensor::tape::{CodeMatrix, Tape, Var};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Token embedding width H.
    pub latent_dim: usize,
    /// Attention heads per attention block.
    pub heads: usize,
    /// Decoder layers in each of the two stacks.
    pub layers: usize,
    /// Feed-forward hidden width.
    pub ffn_dim: usize,
    /// Dropout probability during training.
    pub dropout: f64,
    /// Odd temporal attention window.
    pub temporal_window: usize,
    /// Padded clip extents the model accepts.
    pub t_max: usize,
    pub j_max: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 240,
            heads: 6,
            layers: 4,
            ffn_dim: 1024,
            dropout: 0.1,
            temporal_window: 31,
            t_max: 60,
            j_max: 40,
        }
    }
}

impl DenoiserConfig {
    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("all architecture dimensions must be positive".into()));
        }
        if !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "latent dim {} is not divisible by {} heads",
                self.latent_dim, self.heads
            )));
        }
        if !self.latent_dim.is_multiple_of(2) {
            return Err(Error::Config("latent dim must be even for sinusoidal encodings".into()));
        }
        if self.temporal_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal window {} must be odd",
                self.temporal_window
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Everything the denoiser is conditioned on.
pub struct ConditionSet<'a> {
    pub reference: &'a MotionClip,
    pub source_graph: &'a SkeletonGraph,
    pub target_graph: &'a SkeletonGraph,
    /// Correspondence with the reference skeleton as source and the
    /// target skeleton as destination.
    pub map: &'a JointMap,
}

/// Split `heads` across `conditions` as equally as possible, giving the
/// remainder to the last conditions (the reference condition sits last in
/// the denoising decoder and benefits most from extra heads).
pub fn allocate_heads(heads: usize, conditions: usize) -> Result<Vec<usize>> {
    if conditions == 0 {
        return Err(Error::Config("cross attention needs at least one condition".into()));
    }
    if heads < conditions {
        return Err(Error::Config(format!(
            "{heads} heads cannot cover {conditions} conditions"
        )));
    }
    let base = heads / conditions;
    let rem = heads % conditions;
    Ok((0..conditions)
        .map(|i| base + usize::from(i >= conditions - rem))
        .collect())
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    entries: BTreeMap<String, Tensor>,
}

impl Params {
    /// Initialize all parameters for both decoder stacks.
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut entries = BTreeMap::new();
        for stack in ["ref", "den"] {
            init_stack(&mut entries, cfg, stack, &mut rng);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

fn xavier(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

fn init_linear(
    entries: &mut BTreeMap<String, Tensor>,
    rng: &mut ChaCha12Rng,
    name: &str,
    rows: usize,
    cols: usize,
) {
    entries.insert(format!("{name}.w"), xavier(rng, rows, cols));
    entries.insert(format!("{name}.b"), Tensor::zeros(1, cols));
}

fn init_layer_norm(entries: &mut BTreeMap<String, Tensor>, name: &str, dim: usize) {
    entries.insert(format!("{name}.g"), Tensor::filled(1, dim, 1.0));
    entries.insert(format!("{name}.b"), Tensor::zeros(1, dim));
}

fn init_heads(
    entries: &mut BTreeMap<String, Tensor>,
    rng: &mut ChaCha12Rng,
    name: &str,
    heads: usize,
    latent: usize,
    head_dim: usize,
) {
    for h in 0..heads {
        entries.insert(format!("{name}.q{h}"), xavier(rng, latent, head_dim));
        entries.insert(format!("{name}.k{h}"), xavier(rng, latent, head_dim));
        entries.insert(format!("{name}.v{h}"), xavier(rng, latent, head_dim));
    }
}

fn init_stack(
    entries: &mut BTreeMap<String, Tensor>,
    cfg: &DenoiserConfig,
    stack: &str,
    rng: &mut ChaCha12Rng,
) {
    let h = cfg.latent_dim;
    let dh = cfg.head_dim();
    init_linear(entries, rng, &format!("{stack}.enc.base"), LANES, h);
    init_linear(entries, rng, &format!("{stack}.enc.joint"), LANES, h);
    init_linear(entries, rng, &format!("{stack}.cond.axis"), 3, h);
    init_linear(entries, rng, &format!("{stack}.cond.link"), 3, h);
    if stack == "den" {
        init_linear(entries, rng, &format!("{stack}.time.fc1"), h, h);
        init_linear(entries, rng, &format!("{stack}.time.fc2"), h, h);
    }
    for layer in 0..cfg.layers {
        let p = format!("{stack}.l{layer}");
        init_layer_norm(entries, &format!("{p}.ln_spatial"), h);
        init_heads(entries, rng, &format!("{p}.spatial"), cfg.heads, h, dh);
        for head in 0..cfg.heads {
            entries.insert(format!("{p}.spatial.eq{head}"), xavier(rng, 4, dh));
            entries.insert(format!("{p}.spatial.ek{head}"), xavier(rng, 4, dh));
        }
        init_linear(entries, rng, &format!("{p}.spatial.out"), h, h);
        init_layer_norm(entries, &format!("{p}.ln_temporal"), h);
        init_heads(entries, rng, &format!("{p}.temporal"), cfg.heads, h, dh);
        init_linear(entries, rng, &format!("{p}.temporal.out"), h, h);
        init_layer_norm(entries, &format!("{p}.ln_cross"), h);
        init_heads(entries, rng, &format!("{p}.cross"), cfg.heads, h, dh);
        init_linear(entries, rng, &format!("{p}.cross.out"), h, h);
        init_layer_norm(entries, &format!("{p}.ln_ffn"), h);
        init_linear(entries, rng, &format!("{p}.ffn.fc1"), h, cfg.ffn_dim);
        init_linear(entries, rng, &format!("{p}.ffn.fc2"), cfg.ffn_dim, h);
    }
    init_layer_norm(entries, &format!("{stack}.final_ln"), h);
    if stack == "den" {
        init_linear(entries, rng, &format!("{stack}.out"), h, LANES);
    }
}

/// Parameters bound onto a tape, as differentiable leaves or constants.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &Params, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let var = if trainable {
                tape.leaf(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            vars.insert(name.clone(), var);
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' was never initialized"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

// ---------------------------------------------------------------------------
// Masks and encodings
// ---------------------------------------------------------------------------

/// Sinusoidal position code for a scalar index.
fn sinusoid_row(position: f64, dim: usize) -> Vec<f64> {
    let mut row = vec![0.0; dim];
    for i in 0..dim / 2 {
        let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        row[2 * i] = (position * rate).sin();
        row[2 * i + 1] = (position * rate).cos();
    }
    row
}

/// Positional code over flattened token order `t * j_max + j`, preserving
/// the order of the whole input motion grid.
fn positional_encoding(t_used: usize, j_used: usize, j_max: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(t_used * j_used, dim);
    for t in 0..t_used {
        for j in 0..j_used {
            let row = sinusoid_row((t * j_max + j) as f64, dim);
            out.row_mut(t * j_used + j).copy_from_slice(&row);
        }
    }
    out
}

/// Temporal window mask: allowed iff `|t - t'| <= (window - 1) / 2`.
pub fn temporal_window_mask(frames: usize, window: usize) -> Tensor {
    let radius = (window - 1) / 2;
    Tensor::from_fn(frames, frames, |a, b| {
        if a.abs_diff(b) <= radius {
            1.0
        } else {
            0.0
        }
    })
}

/// Correspondence attention mask from the temporally extended joint map:
/// target token `(t, i)` may attend to reference token `(t', j)` iff
/// `t = t'` and the joints correspond.
pub fn correspondence_mask(map: &JointMap, frames: usize) -> Tensor {
    extend_joint_map(map, frames)
}

/// Relation codes replicated for tape gathers.
fn relation_codes(g: &SkeletonGraph) -> Rc<CodeMatrix> {
    let j = g.joint_count();
    let mut codes = Vec::with_capacity(j * j);
    for row in &g.relation_matrix {
        codes.extend(row.iter().copied());
    }
    Rc::new(CodeMatrix::new(j, j, codes))
}

// ---------------------------------------------------------------------------
// Attention blocks
// ---------------------------------------------------------------------------

/// Relation-biased attention logits for one head over one frame's joints:
/// `(q_i . k_j + q_i . Eq[psi_ij] + k_j . Ek[psi_ij]) / sqrt(head_dim)`.
pub fn grpe_logits(
    tape: &mut Tape,
    q: Var,
    k: Var,
    eq: Var,
    ek: Var,
    codes: Rc<CodeMatrix>,
) -> Var {
    let head_dim = tape.value(q).cols();
    let qk = tape.matmul_nt(q, k);
    let bq_table = tape.matmul_nt(q, eq);
    let bq = tape.gather_code_q(bq_table, codes.clone());
    let bk_table = tape.matmul_nt(k, ek);
    let bk = tape.gather_code_k(bk_table, codes);
    let sum = tape.add(qk, bq);
    let sum = tape.add(sum, bk);
    tape.scale(sum, 1.0 / (head_dim as f64).sqrt())
}

struct Ctx<'a> {
    cfg: &'a DenoiserConfig,
    params: &'a BoundParams,
    stack: &'a str,
    t_used: usize,
    j_used: usize,
}

impl Ctx<'_> {
    fn p(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.stack)
    }
}

fn linear(tape: &mut Tape, params: &BoundParams, name: &str, x: Var) -> Var {
    let w = params.var(&format!("{name}.w"));
    let b = params.var(&format!("{name}.b"));
    let xw = tape.matmul(x, w);
    tape.add_row_broadcast(xw, b)
}

fn layer_norm(tape: &mut Tape, params: &BoundParams, name: &str, x: Var) -> Var {
    let g = params.var(&format!("{name}.g"));
    let b = params.var(&format!("{name}.b"));
    tape.layer_norm(x, g, b, 1e-5)
}

/// Joint-wise self-attention within each frame, biased by relation codes.
fn spatial_attention(tape: &mut Tape, ctx: &Ctx, prefix: &str, x: Var, codes: Rc<CodeMatrix>) -> Var {
    let allowed = Rc::new(Tensor::filled(ctx.j_used, ctx.j_used, 1.0));
    let mut frame_outputs = Vec::with_capacity(ctx.t_used);
    for t in 0..ctx.t_used {
        let rows: Rc<Vec<usize>> = Rc::new((0..ctx.j_used).map(|j| t * ctx.j_used + j).collect());
        let xt = tape.gather_rows(x, rows);
        let mut heads = Vec::with_capacity(ctx.cfg.heads);
        for h in 0..ctx.cfg.heads {
            let q = tape.matmul(xt, ctx.params.var(&format!("{prefix}.q{h}")));
            let k = tape.matmul(xt, ctx.params.var(&format!("{prefix}.k{h}")));
            let v = tape.matmul(xt, ctx.params.var(&format!("{prefix}.v{h}")));
            let eq = ctx.params.var(&format!("{prefix}.eq{h}"));
            let ek = ctx.params.var(&format!("{prefix}.ek{h}"));
            let logits = grpe_logits(tape, q, k, eq, ek, codes.clone());
            let attn = tape.softmax_masked(logits, allowed.clone());
            heads.push(tape.matmul(attn, v));
        }
        let concat = tape.concat_cols(&heads);
        frame_outputs.push(concat);
    }
    let merged = tape.concat_rows(&frame_outputs);
    linear(tape, ctx.params, &format!("{prefix}.out"), merged)
}

/// Frame-wise self-attention per joint, masked to the temporal window.
fn temporal_attention(tape: &mut Tape, ctx: &Ctx, prefix: &str, x: Var) -> Var {
    let allowed = Rc::new(temporal_window_mask(ctx.t_used, ctx.cfg.temporal_window));
    let mut joint_outputs = Vec::with_capacity(ctx.j_used);
    for j in 0..ctx.j_used {
        let rows: Rc<Vec<usize>> = Rc::new((0..ctx.t_used).map(|t| t * ctx.j_used + j).collect());
        let xj = tape.gather_rows(x, rows);
        let mut heads = Vec::with_capacity(ctx.cfg.heads);
        for h in 0..ctx.cfg.heads {
            let q = tape.matmul(xj, ctx.params.var(&format!("{prefix}.q{h}")));
            let k = tape.matmul(xj, ctx.params.var(&format!("{prefix}.k{h}")));
            let v = tape.matmul(xj, ctx.params.var(&format!("{prefix}.v{h}")));
            let qk = tape.matmul_nt(q, k);
            let logits = tape.scale(qk, 1.0 / (ctx.cfg.head_dim() as f64).sqrt());
            let attn = tape.softmax_masked(logits, allowed.clone());
            heads.push(tape.matmul(attn, v));
        }
        joint_outputs.push(tape.concat_cols(&heads));
    }
    // Rows are grouped by joint; restore frame-major token order.
    let grouped = tape.concat_rows(&joint_outputs);
    let order: Rc<Vec<usize>> = Rc::new(
        (0..ctx.t_used * ctx.j_used)
            .map(|n| {
                let (t, j) = (n / ctx.j_used, n % ctx.j_used);
                j * ctx.t_used + t
            })
            .collect(),
    );
    let merged = tape.gather_rows(grouped, order);
    linear(tape, ctx.params, &format!("{prefix}.out"), merged)
}

/// One cross-attention condition: a key/value sequence and an optional
/// attention mask (1 = may attend).
pub struct Condition {
    pub seq: Var,
    pub allowed: Option<Rc<Tensor>>,
}

/// Cross attention with the heads partitioned across conditions; every
/// head keeps its own projections. Outputs of all heads are concatenated
/// in head order and projected.
fn multi_cond_cross_attention(
    tape: &mut Tape,
    ctx: &Ctx,
    prefix: &str,
    x: Var,
    conditions: &[Condition],
) -> Result<Var> {
    let counts = allocate_heads(ctx.cfg.heads, conditions.len())?;
    let mut heads = Vec::with_capacity(ctx.cfg.heads);
    let mut head = 0;
    for (cond, &count) in conditions.iter().zip(&counts) {
        for _ in 0..count {
            let q = tape.matmul(x, ctx.params.var(&format!("{prefix}.q{head}")));
            let k = tape.matmul(cond.seq, ctx.params.var(&format!("{prefix}.k{head}")));
            let v = tape.matmul(cond.seq, ctx.params.var(&format!("{prefix}.v{head}")));
            let qk = tape.matmul_nt(q, k);
            let logits = tape.scale(qk, 1.0 / (ctx.cfg.head_dim() as f64).sqrt());
            let allowed = cond.allowed.clone().unwrap_or_else(|| {
                Rc::new(Tensor::filled(
                    tape.value(logits).rows(),
                    tape.value(logits).cols(),
                    1.0,
                ))
            });
            let attn = tape.softmax_masked(logits, allowed);
            heads.push(tape.matmul(attn, v));
            head += 1;
        }
    }
    let concat = tape.concat_cols(&heads);
    Ok(linear(tape, ctx.params, &format!("{prefix}.out"), concat))
}

fn feed_forward(tape: &mut Tape, ctx: &Ctx, prefix: &str, x: Var, dropout: &mut DropoutState) -> Var {
    let hidden = linear(tape, ctx.params, &format!("{prefix}.fc1"), x);
    let act = tape.gelu(hidden);
    let act = dropout.apply(tape, act);
    linear(tape, ctx.params, &format!("{prefix}.fc2"), act)
}

/// Dropout behavior for one forward pass.
pub enum DropoutState<'a> {
    Disabled,
    Enabled { prob: f64, rng: &'a mut ChaCha12Rng },
}

impl DropoutState<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self {
            DropoutState::Disabled => x,
            DropoutState::Enabled { prob, rng } => {
                if *prob == 0.0 {
                    return x;
                }
                let keep = 1.0 - *prob;
                let value = tape.value(x);
                let mask = Tensor::from_fn(value.rows(), value.cols(), |_, _| {
                    if rng.random_range(0.0..1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                tape.dropout(x, Rc::new(mask))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

/// Token grid metadata alongside the tape node.
pub struct TokenGrid {
    pub tokens: Var,
    pub t_used: usize,
    pub j_used: usize,
}

/// Embed a trimmed `(T*J) x 9` motion grid into tokens: separate encoders
/// for the base row and the other joints, plus positional encoding and an
/// optional diffusion-step embedding shared by all tokens.
fn tokenize(
    tape: &mut Tape,
    ctx: &Ctx,
    grid: Var,
    step_index: Option<usize>,
) -> TokenGrid {
    let (t_used, j_used) = (ctx.t_used, ctx.j_used);
    let base_encoded = linear(tape, ctx.params, &ctx.p("enc.base"), grid);
    let joint_encoded = linear(tape, ctx.params, &ctx.p("enc.joint"), grid);
    let base_mask = Tensor::from_fn(t_used * j_used, 1, |row, _| {
        if row % j_used == 0 {
            1.0
        } else {
            0.0
        }
    });
    let joint_mask = base_mask.map(|v| 1.0 - v);
    let base_sel = tape.constant(base_mask);
    let joint_sel = tape.constant(joint_mask);
    let base_part = tape.mul_col_broadcast(base_encoded, base_sel);
    let joint_part = tape.mul_col_broadcast(joint_encoded, joint_sel);
    let encoded = tape.add(base_part, joint_part);

    let pe = positional_encoding(t_used, j_used, ctx.cfg.j_max, ctx.cfg.latent_dim);
    let pe_const = tape.constant(pe);
    let mut tokens = tape.add(encoded, pe_const);

    if let Some(step) = step_index {
        let sin = Tensor::row_from(&sinusoid_row(step as f64, ctx.cfg.latent_dim));
        let sin_const = tape.constant(sin);
        let h1 = linear(tape, ctx.params, &ctx.p("time.fc1"), sin_const);
        let act = tape.gelu(h1);
        let emb = linear(tape, ctx.params, &ctx.p("time.fc2"), act);
        tokens = tape.add_row_broadcast(tokens, emb);
    }
    TokenGrid { tokens, t_used, j_used }
}

/// Constant `(T*J) x 9` grid of a clip's valid region, in given units.
pub fn clip_grid(clip: &MotionClip) -> Tensor {
    let (t_used, j_used) = (clip.frames_used(), clip.joints_used());
    Tensor::from_fn(t_used * j_used, LANES, |row, lane| {
        clip.get(row / j_used, row % j_used, lane)
    })
}

/// Per-joint axis vectors as a condition input (base row is zero).
fn axis_rows(g: &SkeletonGraph) -> Tensor {
    Tensor::from_fn(g.joint_count(), 3, |j, c| g.axes[j][c])
}

/// Per-joint link vectors as a condition input (base row is zero).
fn link_rows(g: &SkeletonGraph) -> Tensor {
    Tensor::from_fn(g.joint_count(), 3, |j, c| g.link_vectors[j][c])
}

// ---------------------------------------------------------------------------
// Decoder stacks
// ---------------------------------------------------------------------------

fn decoder_layer(
    tape: &mut Tape,
    ctx: &Ctx,
    layer: usize,
    x: Var,
    codes: Rc<CodeMatrix>,
    conditions: &[Condition],
    dropout: &mut DropoutState,
) -> Result<Var> {
    let p = ctx.p(&format!("l{layer}"));

    let normed = layer_norm(tape, ctx.params, &format!("{p}.ln_spatial"), x);
    let spatial = spatial_attention(tape, ctx, &format!("{p}.spatial"), normed, codes);
    let spatial = dropout.apply(tape, spatial);
    let x = tape.add(x, spatial);

    let normed = layer_norm(tape, ctx.params, &format!("{p}.ln_temporal"), x);
    let temporal = temporal_attention(tape, ctx, &format!("{p}.temporal"), normed);
    let temporal = dropout.apply(tape, temporal);
    let x = tape.add(x, temporal);

    let normed = layer_norm(tape, ctx.params, &format!("{p}.ln_cross"), x);
    let cross = multi_cond_cross_attention(tape, ctx, &format!("{p}.cross"), normed, conditions)?;
    let cross = dropout.apply(tape, cross);
    let x = tape.add(x, cross);

    let normed = layer_norm(tape, ctx.params, &format!("{p}.ln_ffn"), x);
    let ffn = feed_forward(tape, ctx, &format!("{p}.ffn"), normed, dropout);
    let ffn = dropout.apply(tape, ffn);
    Ok(tape.add(x, ffn))
}

/// Encode the reference motion into a condition sequence of
/// `T*J_ref` latent tokens.
pub fn encode_reference(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    params: &BoundParams,
    reference_grid: Var,
    t_used: usize,
    g_source: &SkeletonGraph,
    dropout: &mut DropoutState,
) -> Result<Var> {
    let ctx = Ctx { cfg, params, stack: "ref", t_used, j_used: g_source.joint_count() };
    let codes = relation_codes(g_source);
    let grid = tokenize(tape, &ctx, reference_grid, None);
    let axis_seq = {
        let rows = tape.constant(axis_rows(g_source));
        linear(tape, params, "ref.cond.axis", rows)
    };
    let link_seq = {
        let rows = tape.constant(link_rows(g_source));
        linear(tape, params, "ref.cond.link", rows)
    };
    let mut x = grid.tokens;
    for layer in 0..cfg.layers {
        let conditions = [
            Condition { seq: axis_seq, allowed: None },
            Condition { seq: link_seq, allowed: None },
        ];
        x = decoder_layer(tape, &ctx, layer, x, codes.clone(), &conditions, dropout)?;
    }
    Ok(layer_norm(tape, params, "ref.final_ln", x))
}

/// Full denoising forward pass on the tape: predict the clean motion grid
/// from a noisy grid at diffusion step `step_index`.
///
/// `noisy_grid` and `reference_grid` are trimmed `(T*J) x 9` grids in
/// normalized units; the output is the predicted grid in the same space.
#[allow(clippy::too_many_arguments)]
pub fn denoise_tape(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    params: &BoundParams,
    noisy_grid: Var,
    reference_grid: Var,
    t_used: usize,
    cond: &ConditionSet,
    step_index: usize,
    dropout: &mut DropoutState,
) -> Result<Var> {
    cfg.validate()?;
    let g_target = cond.target_graph;
    let j_used = g_target.joint_count();
    if cond.map.target_joint_count() != j_used
        || cond.map.source_joint_count() != cond.source_graph.joint_count()
    {
        return Err(Error::Shape("joint map does not match the condition graphs".into()));
    }
    if t_used > cfg.t_max || j_used > cfg.j_max || cond.source_graph.joint_count() > cfg.j_max {
        return Err(Error::Shape(format!(
            "clip extent {t_used}x{j_used} exceeds model maxima {}x{}",
            cfg.t_max, cfg.j_max
        )));
    }
    {
        let nv = tape.value(noisy_grid);
        if nv.rows() != t_used * j_used || nv.cols() != LANES {
            return Err(Error::Shape(format!(
                "noisy grid is {}x{}, expected {}x{LANES}",
                nv.rows(),
                nv.cols(),
                t_used * j_used
            )));
        }
    }

    let encoded_ref = encode_reference(
        tape,
        cfg,
        params,
        reference_grid,
        t_used,
        cond.source_graph,
        dropout,
    )?;
    denoise_with_encoded_reference(
        tape, cfg, params, noisy_grid, encoded_ref, t_used, cond, step_index, dropout,
    )
}

/// Denoising pass against an already-encoded reference sequence. Split
/// out so the reference encoding can be reused across a batch and so
/// tests can perturb encoded tokens directly.
#[allow(clippy::too_many_arguments)]
pub fn denoise_with_encoded_reference(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    params: &BoundParams,
    noisy_grid: Var,
    encoded_reference: Var,
    t_used: usize,
    cond: &ConditionSet,
    step_index: usize,
    dropout: &mut DropoutState,
) -> Result<Var> {
    let g_target = cond.target_graph;
    let ctx = Ctx { cfg, params, stack: "den", t_used, j_used: g_target.joint_count() };
    let codes = relation_codes(g_target);
    let grid = tokenize(tape, &ctx, noisy_grid, Some(step_index));

    let axis_seq = {
        let rows = tape.constant(axis_rows(g_target));
        linear(tape, params, "den.cond.axis", rows)
    };
    let link_seq = {
        let rows = tape.constant(link_rows(g_target));
        linear(tape, params, "den.cond.link", rows)
    };
    let ref_mask = Rc::new(correspondence_mask(cond.map, t_used));

    let mut x = grid.tokens;
    for layer in 0..cfg.layers {
        let conditions = [
            Condition { seq: axis_seq, allowed: None },
            Condition { seq: link_seq, allowed: None },
            Condition { seq: encoded_reference, allowed: Some(ref_mask.clone()) },
        ];
        x = decoder_layer(tape, &ctx, layer, x, codes.clone(), &conditions, dropout)?;
    }
    let x = layer_norm(tape, params, "den.final_ln", x);
    Ok(linear(tape, params, "den.out", x))
}
