//! The two host pretext tasks: block-masked prediction with a
//! self-attention predictor, and random-mask prediction with a
//! cross-attention decoder. Both regress EMA target-encoder outputs.

use std::fmt;
use std::str::FromStr;

use crate::affinity::{composite_loss, hr_teacher_update, sa_forward, SaBatch, SaConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::patch_grid::{sample_ijepa_blocks, sample_random, BlockMaskConfig, PatchGrid, SampleMask};
use crate::rng::Rng;
use crate::tensor::{adamw_step, AdamWState, Tape, Tensor, Var};
use crate::vit::{
    decode_crossattn, encode, init_encoder, init_head, positions_of, predict_selfattn, sincos_2d, EncoderConfig,
    HeadConfig, HeadKind, TokenGroups,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Host {
    Ijepa,
    LatentMim,
}

impl FromStr for Host {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ijepa" => Ok(Host::Ijepa),
            "latentmim" => Ok(Host::LatentMim),
            _ => Err(Error::Config(format!("unknown host {s:?}"))),
        }
    }
}

impl fmt::Display for Host {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Host::Ijepa => "ijepa",
            Host::LatentMim => "latentmim",
        })
    }
}

impl Host {
    pub fn head_kind(self) -> HeadKind {
        match self {
            Host::Ijepa => HeadKind::SelfAttn,
            Host::LatentMim => HeadKind::CrossAttn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HostConfig {
    pub host: Host,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub momentum: f64,
    /// LatentMIM visible fraction
    pub visible_ratio: f64,
    pub blocks: BlockMaskConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HostState {
    pub host: Host,
    pub student: ParamStore,
    pub target: ParamStore,
    pub head: ParamStore,
}

impl HostState {
    /// Fresh student and head; the target starts as a copy of the student.
    pub fn init(cfg: &HostConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.head.enc_d != cfg.encoder.d {
            return Err(Error::Config(format!(
                "head reads width {} but the encoder is {} wide",
                cfg.head.enc_d, cfg.encoder.d
            )));
        }
        let student = init_encoder(&cfg.encoder, rng)?;
        let head = init_head(&cfg.head, cfg.host.head_kind(), rng)?;
        Ok(HostState {
            host: cfg.host,
            target: student.clone(),
            student,
            head,
        })
    }
}

/// `target ← m·target + (1 − m)·student`, elementwise.
pub fn ema_update(target: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA momentum must be in [0, 1], got {m}")));
    }
    target.check_layout(student, "ema_update")?;
    for (t, s) in target.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// A host's mask for one scene: what the student sees and which cell
/// groups the head predicts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostSample {
    pub mask: SampleMask,
    pub targets: Vec<Vec<usize>>,
}

pub fn sample_host_mask(cfg: &HostConfig, grid: &PatchGrid, rng: &mut Rng) -> Result<HostSample> {
    match cfg.host {
        Host::Ijepa => {
            let b = sample_ijepa_blocks(grid, &cfg.blocks, rng)?;
            Ok(HostSample {
                mask: b.context,
                targets: b.targets,
            })
        }
        Host::LatentMim => {
            let mask = sample_random(grid, cfg.visible_ratio, rng)?;
            let targets = vec![mask.masked.clone()];
            Ok(HostSample { mask, targets })
        }
    }
}

/// Host loss plus the student's visible-cell representations, which the
/// spatial-affinity term may reuse.
pub struct HostForward {
    pub loss: Var,
    pub student_visible: Var,
}

/// Stacks the rows of each scene's patches at the given cells.
pub(crate) fn stack_cells(patches: &[&Tensor], cells: &[&[usize]], table: &Tensor) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let rows: Vec<Tensor> = patches.iter().zip(cells).map(|(p, c)| p.select_rows(c)).collect();
    let pos: Vec<Tensor> = cells.iter().map(|c| positions_of(table, c)).collect::<Result<_>>()?;
    let segs = cells.iter().map(|c| c.len()).collect();
    Ok((
        Tensor::vstack(&rows.iter().collect::<Vec<_>>())?,
        Tensor::vstack(&pos.iter().collect::<Vec<_>>())?,
        segs,
    ))
}

/// Batch host loss: mean over scenes of each scene's mean squared error
/// between predicted and target-encoder representations at its predicted
/// cells. LatentMIM compares L2-normalized rows.
#[allow(clippy::too_many_arguments)]
pub fn host_forward(
    t: &mut Tape,
    cfg: &HostConfig,
    student: &Bound,
    head: &Bound,
    target: &ParamStore,
    patches: &[&Tensor],
    samples: &[HostSample],
    grid: (usize, usize),
) -> Result<HostForward> {
    let b = patches.len();
    if b == 0 || samples.len() != b {
        return Err(Error::invalid("host loss needs a nonempty batch with one mask per scene"));
    }
    let n = grid.0 * grid.1;
    for (p, smp) in patches.iter().zip(samples) {
        if p.rows() != n {
            return Err(Error::shape("host_loss", format!("{} patches for a grid of {n}", p.rows())));
        }
        smp.mask.validate(n)?;
        if smp.targets.iter().all(Vec::is_empty) {
            return Err(Error::invalid("host_loss: empty masked set"));
        }
    }
    let d = cfg.encoder.d;
    let table = sincos_2d(grid.0, grid.1, d)?;

    let vis: Vec<&[usize]> = samples.iter().map(|s| s.mask.visible.as_slice()).collect();
    let (rows, pos, segs) = stack_cells(patches, &vis, &table)?;
    let x = t.constant(rows);
    let z_vis = encode(t, student, &cfg.encoder, x, &pos, &segs)?;

    let all: Vec<usize> = (0..n).collect();
    let full: Vec<&[usize]> = vec![all.as_slice(); b];
    let (rows, pos, segs) = stack_cells(patches, &full, &table)?;
    let tb = target.bind(t, false);
    let x = t.constant(rows);
    let z_tgt = encode(t, &tb, &cfg.encoder, x, &pos, &segs)?;
    let z_tgt = match cfg.host {
        Host::Ijepa => t.value(z_tgt).clone(),
        Host::LatentMim => {
            let zn = t.l2_normalize_rows(z_tgt);
            t.value(zn).clone()
        }
    };

    let mut groups = TokenGroups::default();
    let mut tgt_rows = Vec::new();
    let mut weights = Vec::new();
    let mut offset = 0;
    for (i, smp) in samples.iter().enumerate() {
        let k = smp.mask.visible.len();
        let ctx_rows: Vec<usize> = (offset..offset + k).collect();
        offset += k;
        let n_pred: usize = smp.targets.iter().map(Vec::len).sum();
        for tgt in smp.targets.iter().filter(|t| !t.is_empty()) {
            groups.push(&ctx_rows, &smp.mask.visible, tgt);
            tgt_rows.extend(tgt.iter().map(|&c| i * n + c));
        }
        let w = 1.0 / (b * n_pred * d) as f64;
        weights.extend(std::iter::repeat_n(w, n_pred));
    }
    let pred = match cfg.host {
        Host::Ijepa => predict_selfattn(t, head, &cfg.head, z_vis, &groups, grid)?,
        Host::LatentMim => {
            let p = decode_crossattn(t, head, &cfg.head, z_vis, &groups, grid)?;
            t.l2_normalize_rows(p)
        }
    };
    let tgt = t.constant(z_tgt.select_rows(&tgt_rows));
    let loss = t.weighted_sq_error(pred, tgt, &weights)?;
    Ok(HostForward {
        loss,
        student_visible: z_vis,
    })
}

/// Single-scene host loss value.
pub fn host_loss(cfg: &HostConfig, state: &HostState, patches: &Tensor, sample: &HostSample, grid: (usize, usize)) -> Result<f64> {
    let mut t = Tape::new();
    let s = state.student.bind(&mut t, false);
    let h = state.head.bind(&mut t, false);
    let f = host_forward(&mut t, cfg, &s, &h, &state.target, &[patches], std::slice::from_ref(sample), grid)?;
    Ok(t.value(f.loss).item())
}

/// HR teacher, its settings and the optional learned projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SaAttachment {
    pub cfg: SaConfig,
    pub teacher: ParamStore,
    pub proj: Option<Tensor>,
}

/// One batch's inputs for [`train_step`].
pub struct StepInputs<'a> {
    /// encoder-side patches per scene
    pub patches: Vec<&'a Tensor>,
    pub samples: Vec<HostSample>,
    /// HR patches per scene, when a spatial-affinity term is attached
    pub hr_patches: Vec<&'a Tensor>,
    /// cells for the SA student when they differ from the host's visible set
    pub sa_cells: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub host: f64,
    pub gram: f64,
    pub composite: f64,
}

/// Trainable parameters in optimizer order: student, head, projection.
pub fn trainable_tensors<'a>(state: &'a HostState, sa: Option<&'a SaAttachment>) -> Vec<&'a Tensor> {
    let mut v: Vec<&Tensor> = state.student.tensors().iter().chain(state.head.tensors()).collect();
    if let Some(p) = sa.and_then(|a| a.proj.as_ref()) {
        v.push(p);
    }
    v
}

/// Composite loss of one batch: host loss plus, when `sa` is attached,
/// λ times the gram loss. Returns (host, gram, composite).
#[allow(clippy::too_many_arguments)]
pub fn composite_forward(
    t: &mut Tape,
    cfg: &HostConfig,
    sb: &Bound,
    hb: &Bound,
    proj: Option<Var>,
    target: &ParamStore,
    sa: Option<&SaAttachment>,
    inputs: &StepInputs,
    grid: (usize, usize),
) -> Result<(Var, Option<Var>, Var)> {
    let hf = host_forward(t, cfg, sb, hb, target, &inputs.patches, &inputs.samples, grid)?;
    let gram = match sa {
        Some(att) => {
            let (z, cells) = match &inputs.sa_cells {
                None => (
                    hf.student_visible,
                    inputs.samples.iter().map(|s| s.mask.visible.clone()).collect::<Vec<_>>(),
                ),
                Some(cells) => {
                    let table = sincos_2d(grid.0, grid.1, cfg.encoder.d)?;
                    let refs: Vec<&[usize]> = cells.iter().map(Vec::as_slice).collect();
                    let (rows, pos, segs) = stack_cells(&inputs.patches, &refs, &table)?;
                    let x = t.constant(rows);
                    (encode(t, sb, &cfg.encoder, x, &pos, &segs)?, cells.clone())
                }
            };
            let batch = SaBatch {
                mr_cells: cells,
                hr_patches: inputs.hr_patches.clone(),
            };
            Some(sa_forward(t, z, &batch, &att.teacher, &cfg.encoder, proj, &att.cfg, grid)?)
        }
        None => None,
    };
    let lambda = sa.map_or(0.0, |a| a.cfg.lambda);
    let total = composite_loss(t, hf.loss, gram, lambda)?;
    Ok((hf.loss, gram, total))
}

/// Forward and backward of the composite loss, one AdamW step on all
/// trainable parameters, then EMA updates of the target encoder and, when
/// attached, the HR teacher.
pub fn train_step(
    cfg: &HostConfig,
    state: &mut HostState,
    mut sa: Option<&mut SaAttachment>,
    opt: &mut AdamWState,
    lr: f64,
    inputs: &StepInputs,
    grid: (usize, usize),
) -> Result<StepLosses> {
    let mut t = Tape::new();
    let (losses, grads) = {
        let sb = state.student.bind(&mut t, true);
        let hb = state.head.bind(&mut t, true);
        let proj = sa
            .as_deref()
            .and_then(|a| a.proj.as_ref())
            .map(|p| t.leaf(p.clone()));
        let (host, gram, total) = composite_forward(&mut t, cfg, &sb, &hb, proj, &state.target, sa.as_deref(), inputs, grid)?;
        let losses = StepLosses {
            host: t.value(host).item(),
            gram: gram.map_or(0.0, |g| t.value(g).item()),
            composite: t.value(total).item(),
        };
        if !losses.composite.is_finite() || !losses.host.is_finite() || !losses.gram.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss (host {}, gram {}, composite {})",
                losses.host, losses.gram, losses.composite
            )));
        }
        t.backward(total)?;
        let mut grads = sb.grads(&t);
        grads.extend(hb.grads(&t));
        if let Some(p) = proj {
            grads.push(t.grad_or_zeros(p));
        }
        (losses, grads)
    };

    {
        let mut params: Vec<&mut Tensor> = state
            .student
            .tensors_mut()
            .iter_mut()
            .chain(state.head.tensors_mut().iter_mut())
            .collect();
        if let Some(p) = sa.as_deref_mut().and_then(|a| a.proj.as_mut()) {
            params.push(p);
        }
        let grefs: Vec<&Tensor> = grads.iter().collect();
        adamw_step(&mut params, &grefs, opt, lr)?;
    }
    ema_update(&mut state.target, &state.student, cfg.momentum)?;
    if let Some(att) = sa {
        hr_teacher_update(&mut att.teacher, &state.student, att.cfg.m_hr)?;
    }
    Ok(losses)
}

/// One line of the per-step metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub host_loss: f64,
    pub gram_loss: f64,
    pub composite_loss: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,lr,host_loss,gram_loss,composite_loss,wall_ms";

impl MetricsRow {
    /// Floats use Rust's shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{}",
            self.step, self.lr, self.host_loss, self.gram_loss, self.composite_loss, self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::invalid(format!("malformed metrics row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(MetricsRow {
            step: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            host_loss: num(f[2])?,
            gram_loss: num(f[3])?,
            composite_loss: num(f[4])?,
            wall_ms: f[5].parse().map_err(|_| bad())?,
        })
    }
}
