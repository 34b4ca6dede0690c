//! Pre-norm transformer encoder over patch tokens, plus the two masked
//! prediction heads: a self-attention predictor and a cross-attention
//! decoder.
//!
//! Every forward function works on a stack of independent token sequences
//! (one per scene, or per scene and target block). Sequence boundaries are
//! passed as segment lengths and attention never crosses them.

use crate::error::{Error, Result};
use crate::params::{normal, trunc_normal, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// flattened patch width `C·P·P`
    pub in_dim: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_width("encoder", self.d, self.heads)?;
        if self.in_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("encoder input and MLP widths must be positive"));
        }
        Ok(())
    }
}

/// Shared shape of the predictor and the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    /// encoder width the head reads from and predicts into
    pub enc_d: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        check_width("head", self.width, self.heads)?;
        if self.enc_d == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("head widths must be positive"));
        }
        Ok(())
    }
}

fn check_width(what: &str, d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "{what} width {d} is not divisible by {heads} heads"
        )));
    }
    if d % 4 != 0 {
        return Err(Error::invalid(format!(
            "{what} width {d} must be a multiple of 4 for 2-D sin-cos positions"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    SelfAttn,
    CrossAttn,
}

/// Fixed 2-D sin-cos table, `(grid_h·grid_w) × d`, row-major over cells.
/// The first half of each row encodes the row coordinate, the second half
/// the column coordinate.
pub fn sincos_2d(grid_h: usize, grid_w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::invalid(format!("sin-cos width {d} must be a positive multiple of 4")));
    }
    let q = d / 4;
    let omega: Vec<f64> = (0..q)
        .map(|i| 1.0 / 10_000f64.powf(i as f64 / q as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * d);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for coord in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| (coord * w).sin()));
                data.extend(omega.iter().map(|w| (coord * w).cos()));
            }
        }
    }
    Ok(Tensor::matrix(grid_h * grid_w, d, data))
}

/// Table rows for `positions`, rejecting anything outside the table.
pub fn positions_of(table: &Tensor, positions: &[usize]) -> Result<Tensor> {
    if let Some(&bad) = positions.iter().find(|&&p| p >= table.rows()) {
        return Err(Error::invalid(format!(
            "position {bad} outside table of {} cells",
            table.rows()
        )));
    }
    Ok(table.select_rows(positions))
}

fn push_block(s: &mut ParamStore, prefix: &str, w: usize, hidden: usize, cross: bool, rng: &mut Rng) -> Result<()> {
    let ones = || Tensor::matrix(1, w, vec![1.0; w]);
    let zeros = |n| Tensor::matrix(1, n, vec![0.0; n]);
    s.push(format!("{prefix}.ln1.g"), ones())?;
    s.push(format!("{prefix}.ln1.b"), zeros(w))?;
    if cross {
        s.push(format!("{prefix}.lnkv.g"), ones())?;
        s.push(format!("{prefix}.lnkv.b"), zeros(w))?;
    }
    for m in ["q", "k", "v", "o"] {
        s.push(format!("{prefix}.attn.w{m}"), trunc_normal(w, w, INIT_STD, rng))?;
        s.push(format!("{prefix}.attn.b{m}"), zeros(w))?;
    }
    s.push(format!("{prefix}.ln2.g"), ones())?;
    s.push(format!("{prefix}.ln2.b"), zeros(w))?;
    s.push(format!("{prefix}.mlp.w1"), trunc_normal(w, hidden, INIT_STD, rng))?;
    s.push(format!("{prefix}.mlp.b1"), zeros(hidden))?;
    s.push(format!("{prefix}.mlp.w2"), trunc_normal(hidden, w, INIT_STD, rng))?;
    s.push(format!("{prefix}.mlp.b2"), zeros(w))?;
    Ok(())
}

pub fn init_encoder(cfg: &EncoderConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    s.push("embed.w", trunc_normal(cfg.in_dim, cfg.d, INIT_STD, rng))?;
    s.push("embed.b", Tensor::matrix(1, cfg.d, vec![0.0; cfg.d]))?;
    for i in 0..cfg.depth {
        push_block(&mut s, &format!("blocks.{i}"), cfg.d, cfg.mlp_hidden, false, rng)?;
    }
    if cfg.depth > 0 {
        s.push("norm.g", Tensor::matrix(1, cfg.d, vec![1.0; cfg.d]))?;
        s.push("norm.b", Tensor::matrix(1, cfg.d, vec![0.0; cfg.d]))?;
    }
    Ok(s)
}

pub fn init_head(cfg: &HeadConfig, kind: HeadKind, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let w = cfg.width;
    let mut s = ParamStore::new();
    s.push("in.w", trunc_normal(cfg.enc_d, w, INIT_STD, rng))?;
    s.push("in.b", Tensor::matrix(1, w, vec![0.0; w]))?;
    s.push("mask_token", normal(1, w, INIT_STD, rng))?;
    for i in 0..cfg.depth {
        push_block(&mut s, &format!("blocks.{i}"), w, cfg.mlp_hidden, kind == HeadKind::CrossAttn, rng)?;
    }
    if cfg.depth > 0 {
        s.push("norm.g", Tensor::matrix(1, w, vec![1.0; w]))?;
        s.push("norm.b", Tensor::matrix(1, w, vec![0.0; w]))?;
    }
    s.push("out.w", trunc_normal(w, cfg.enc_d, INIT_STD, rng))?;
    s.push("out.b", Tensor::matrix(1, cfg.enc_d, vec![0.0; cfg.enc_d]))?;
    Ok(s)
}

fn linear(t: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = t.matmul(x, p.var(&format!("{name}.w"))?)?;
    t.add_row(y, p.var(&format!("{name}.b"))?)
}

fn norm(t: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let n = t.layer_norm(x);
    let y = t.mul_row(n, p.var(&format!("{name}.g"))?)?;
    t.add_row(y, p.var(&format!("{name}.b"))?)
}

fn proj(t: &mut Tape, p: &Bound, prefix: &str, m: &str, x: Var) -> Result<Var> {
    let y = t.matmul(x, p.var(&format!("{prefix}.attn.w{m}"))?)?;
    t.add_row(y, p.var(&format!("{prefix}.attn.b{m}"))?)
}

fn mlp(t: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = norm(t, p, &format!("{prefix}.ln2"), x)?;
    let h = t.matmul(h, p.var(&format!("{prefix}.mlp.w1"))?)?;
    let h = t.add_row(h, p.var(&format!("{prefix}.mlp.b1"))?)?;
    let h = t.gelu(h);
    let h = t.matmul(h, p.var(&format!("{prefix}.mlp.w2"))?)?;
    let h = t.add_row(h, p.var(&format!("{prefix}.mlp.b2"))?)?;
    t.add(x, h)
}

fn self_block(t: &mut Tape, p: &Bound, prefix: &str, x: Var, segs: &[usize], heads: usize) -> Result<Var> {
    let h = norm(t, p, &format!("{prefix}.ln1"), x)?;
    let q = proj(t, p, prefix, "q", h)?;
    let k = proj(t, p, prefix, "k", h)?;
    let v = proj(t, p, prefix, "v", h)?;
    let a = t.attention(q, k, v, segs, segs, heads)?;
    let a = proj(t, p, prefix, "o", a)?;
    let x = t.add(x, a)?;
    mlp(t, p, prefix, x)
}

fn cross_block(
    t: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    kv: Var,
    q_segs: &[usize],
    kv_segs: &[usize],
    heads: usize,
) -> Result<Var> {
    let h = norm(t, p, &format!("{prefix}.ln1"), x)?;
    let c = norm(t, p, &format!("{prefix}.lnkv"), kv)?;
    let q = proj(t, p, prefix, "q", h)?;
    let k = proj(t, p, prefix, "k", c)?;
    let v = proj(t, p, prefix, "v", c)?;
    let a = t.attention(q, k, v, q_segs, kv_segs, heads)?;
    let a = proj(t, p, prefix, "o", a)?;
    let x = t.add(x, a)?;
    mlp(t, p, prefix, x)
}

/// Encodes stacked patch rows. `pos` holds each row's positional embedding
/// and `segs` the per-sequence token counts.
pub fn encode(t: &mut Tape, p: &Bound, cfg: &EncoderConfig, rows: Var, pos: &Tensor, segs: &[usize]) -> Result<Var> {
    let width = t.value(rows).cols();
    if width != cfg.in_dim {
        return Err(Error::shape(
            "encode",
            format!("patch rows are {width} wide, embedding expects {}", cfg.in_dim),
        ));
    }
    let n = t.value(rows).rows();
    if pos.rows() != n || pos.cols() != cfg.d {
        return Err(Error::shape(
            "encode",
            format!("{n} rows but positional block is {:?}", pos.shape()),
        ));
    }
    if segs.iter().sum::<usize>() != n {
        return Err(Error::shape("encode", format!("segments cover {} of {n} rows", segs.iter().sum::<usize>())));
    }
    let x = linear(t, p, "embed", rows)?;
    let pe = t.constant(pos.clone());
    let mut x = t.add(x, pe)?;
    for i in 0..cfg.depth {
        x = self_block(t, p, &format!("blocks.{i}"), x, segs, cfg.heads)?;
    }
    if cfg.depth > 0 {
        x = norm(t, p, "norm", x)?;
    }
    Ok(x)
}

/// Gradient-free encoding of one scene's patch rows at grid `positions`.
pub fn encode_rows(
    store: &ParamStore,
    cfg: &EncoderConfig,
    rows: &Tensor,
    positions: &[usize],
    grid: (usize, usize),
) -> Result<Tensor> {
    if rows.rows() != positions.len() {
        return Err(Error::shape(
            "encode",
            format!("{} rows for {} positions", rows.rows(), positions.len()),
        ));
    }
    let table = sincos_2d(grid.0, grid.1, cfg.d)?;
    let pos = positions_of(&table, positions)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(rows.clone());
    let out = encode(&mut tape, &p, cfg, x, &pos, &[rows.rows()])?;
    Ok(tape.value(out).clone())
}

/// Layout of a batch of prediction problems. Group `g` reads context rows
/// `ctx_rows[..]` (indices into the context matrix, placed at `ctx_pos`)
/// and predicts the cells in `query_pos`; both lists are split into groups
/// by the `*_lens` vectors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenGroups {
    pub ctx_rows: Vec<usize>,
    pub ctx_pos: Vec<usize>,
    pub ctx_lens: Vec<usize>,
    pub query_pos: Vec<usize>,
    pub query_lens: Vec<usize>,
}

impl TokenGroups {
    /// A single problem with contiguous context rows.
    pub fn single(ctx_pos: &[usize], query_pos: &[usize]) -> Self {
        TokenGroups {
            ctx_rows: (0..ctx_pos.len()).collect(),
            ctx_pos: ctx_pos.to_vec(),
            ctx_lens: vec![ctx_pos.len()],
            query_pos: query_pos.to_vec(),
            query_lens: vec![query_pos.len()],
        }
    }

    pub fn push(&mut self, ctx_rows: &[usize], ctx_pos: &[usize], query_pos: &[usize]) {
        self.ctx_rows.extend_from_slice(ctx_rows);
        self.ctx_pos.extend_from_slice(ctx_pos);
        self.ctx_lens.push(ctx_pos.len());
        self.query_pos.extend_from_slice(query_pos);
        self.query_lens.push(query_pos.len());
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.ctx_rows.len() != self.ctx_pos.len()
            || self.ctx_lens.iter().sum::<usize>() != self.ctx_pos.len()
            || self.query_lens.iter().sum::<usize>() != self.query_pos.len()
            || self.ctx_lens.len() != self.query_lens.len()
        {
            return Err(Error::shape(op, "token group lengths are inconsistent"));
        }
        if self.query_pos.is_empty() {
            return Err(Error::invalid(format!("{op}: no masked positions to predict")));
        }
        if self.ctx_lens.iter().any(|&l| l == 0) {
            return Err(Error::invalid(format!("{op}: a group has an empty context")));
        }
        Ok(())
    }
}

fn head_inputs(
    t: &mut Tape,
    p: &Bound,
    cfg: &HeadConfig,
    ctx: Var,
    groups: &TokenGroups,
    grid: (usize, usize),
) -> Result<(Var, Var)> {
    let table = sincos_2d(grid.0, grid.1, cfg.width)?;
    let xc = linear(t, p, "in", ctx)?;
    let xc = t.gather_rows(xc, &groups.ctx_rows)?;
    let pc = t.constant(positions_of(&table, &groups.ctx_pos)?);
    let xc = t.add(xc, pc)?;
    let mt = t.gather_rows(p.var("mask_token")?, &vec![0; groups.query_pos.len()])?;
    let pq = t.constant(positions_of(&table, &groups.query_pos)?);
    let xq = t.add(mt, pq)?;
    Ok((xc, xq))
}

fn head_output(t: &mut Tape, p: &Bound, cfg: &HeadConfig, x: Var) -> Result<Var> {
    let x = if cfg.depth > 0 { norm(t, p, "norm", x)? } else { x };
    linear(t, p, "out", x)
}

/// Self-attention predictor: each group's context tokens and mask tokens
/// attend jointly; the processed mask tokens are returned in query order,
/// projected back to the encoder width.
pub fn predict_selfattn(
    t: &mut Tape,
    p: &Bound,
    cfg: &HeadConfig,
    ctx: Var,
    groups: &TokenGroups,
    grid: (usize, usize),
) -> Result<Var> {
    groups.validate("predict_selfattn")?;
    let (xc, xq) = head_inputs(t, p, cfg, ctx, groups, grid)?;
    let all = t.concat_rows(&[xc, xq])?;
    let n_ctx = groups.ctx_pos.len();
    let mut order = Vec::with_capacity(n_ctx + groups.query_pos.len());
    let mut segs = Vec::with_capacity(groups.ctx_lens.len());
    let mut query_slots = Vec::with_capacity(groups.query_pos.len());
    let (mut c0, mut q0) = (0, 0);
    for (&cl, &ql) in groups.ctx_lens.iter().zip(&groups.query_lens) {
        order.extend(c0..c0 + cl);
        query_slots.extend(order.len()..order.len() + ql);
        order.extend(n_ctx + q0..n_ctx + q0 + ql);
        segs.push(cl + ql);
        c0 += cl;
        q0 += ql;
    }
    let mut x = t.gather_rows(all, &order)?;
    for i in 0..cfg.depth {
        x = self_block(t, p, &format!("blocks.{i}"), x, &segs, cfg.heads)?;
    }
    let x = t.gather_rows(x, &query_slots)?;
    head_output(t, p, cfg, x)
}

/// Cross-attention decoder: mask tokens query the visible tokens, which
/// are never updated themselves.
pub fn decode_crossattn(
    t: &mut Tape,
    p: &Bound,
    cfg: &HeadConfig,
    visible: Var,
    groups: &TokenGroups,
    grid: (usize, usize),
) -> Result<Var> {
    groups.validate("decode_crossattn")?;
    let (kv, mut x) = head_inputs(t, p, cfg, visible, groups, grid)?;
    for i in 0..cfg.depth {
        x = cross_block(
            t,
            p,
            &format!("blocks.{i}"),
            x,
            kv,
            &groups.query_lens,
            &groups.ctx_lens,
            cfg.heads,
        )?;
    }
    head_output(t, p, cfg, x)
}
