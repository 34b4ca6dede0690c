//! Spatial-affinity distillation: an HR teacher encodes the HR patches
//! behind the sampled MR cells, its representations are reduced `s² → 1`,
//! and the student is pulled toward the teacher's patch-affinity (gram)
//! structure.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::resample::{weights_1d, Kernel};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{encode, positions_of, sincos_2d, EncoderConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RepGrid {
    pub z: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl RepGrid {
    pub fn new(z: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        if z.shape().len() != 2 || z.rows() != grid_h * grid_w {
            return Err(Error::shape(
                "RepGrid",
                format!("{:?} rows for a {grid_h}x{grid_w} grid", z.shape()),
            ));
        }
        if !z.is_finite() {
            return Err(Error::Numerical("representation grid has non-finite entries".into()));
        }
        Ok(RepGrid { z, grid_h, grid_w })
    }

    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn d(&self) -> usize {
        self.z.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Downsample {
    Bilinear,
    Bicubic,
    LinearProjection,
}

impl FromStr for Downsample {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Downsample::Bilinear),
            "bicubic" => Ok(Downsample::Bicubic),
            "linear_projection" => Ok(Downsample::LinearProjection),
            _ => Err(Error::Config(format!("unknown downsample method {s:?}"))),
        }
    }
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Downsample::Bilinear => "bilinear",
            Downsample::Bicubic => "bicubic",
            Downsample::LinearProjection => "linear_projection",
        })
    }
}

impl Downsample {
    fn kernel(self) -> Option<Kernel> {
        match self {
            Downsample::Bilinear => Some(Kernel::Bilinear),
            Downsample::Bicubic => Some(Kernel::Bicubic),
            Downsample::LinearProjection => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GramMode {
    /// mean over the N² entries
    Mean,
    /// squared Frobenius norm
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SaSampling {
    HostDefault,
    SaBlock,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaConfig {
    pub s: usize,
    pub downsample: Downsample,
    pub lambda: f64,
    pub m_hr: f64,
    pub sampling: SaSampling,
    pub block_scale: f64,
    pub gram_mode: GramMode,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            s: 2,
            downsample: Downsample::Bilinear,
            lambda: 1.0,
            m_hr: 0.996,
            sampling: SaSampling::HostDefault,
            block_scale: 0.25,
            gram_mode: GramMode::Mean,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::Config("sa.s must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("sa.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.m_hr) {
            return Err(Error::Config(format!("sa.m_hr must be in [0, 1], got {}", self.m_hr)));
        }
        if !(self.block_scale > 0.0 && self.block_scale <= 1.0) {
            return Err(Error::Config(format!(
                "sa.block_scale must be in (0, 1], got {}",
                self.block_scale
            )));
        }
        Ok(())
    }
}

/// `Ẑ·Ẑᵀ` with L2-normalized rows.
pub fn gram_matrix(t: &mut Tape, z: Var) -> Result<Var> {
    let zn = t.l2_normalize_rows(z);
    t.matmul_nt(zn, zn)
}

pub fn gram_of(z: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(z.clone());
    let g = gram_matrix(&mut t, v)?;
    Ok(t.value(g).clone())
}

fn gram_loss_attached(t: &mut Tape, zs: Var, zt: Var, mode: GramMode) -> Result<Var> {
    let (ns, nt) = (t.value(zs).rows(), t.value(zt).rows());
    if ns != nt {
        return Err(Error::shape(
            "gram_loss",
            format!("student has {ns} patches, teacher has {nt}"),
        ));
    }
    let gs = gram_matrix(t, zs)?;
    let gt = gram_matrix(t, zt)?;
    let l = t.mse(gs, gt)?;
    Ok(match mode {
        GramMode::Mean => l,
        GramMode::Sum => t.scale(l, (ns * ns) as f64),
    })
}

/// Squared difference of the two gram matrices, gradient to `zs` only.
pub fn gram_loss(t: &mut Tape, zs: Var, zt: Var, mode: GramMode) -> Result<Var> {
    let zt = t.detach(zt);
    gram_loss_attached(t, zs, zt, mode)
}

pub fn gram_loss_value(zs: &Tensor, zt: &Tensor, mode: GramMode) -> Result<f64> {
    let mut t = Tape::new();
    let a = t.constant(zs.clone());
    let b = t.constant(zt.clone());
    let l = gram_loss(&mut t, a, b, mode)?;
    Ok(t.value(l).item())
}

/// `(s²·d) × d` operator averaging the `s²` stacked inputs.
pub fn init_projection(s: usize, d: usize) -> Tensor {
    let k = s * s;
    let mut p = Tensor::zeros(&[k * d, d]);
    for b in 0..k {
        for c in 0..d {
            p.data_mut()[(b * d + c) * d + c] = 1.0 / k as f64;
        }
    }
    p
}

fn check_dims(mr_dims: (usize, usize), s: usize, cells: &[usize]) -> Result<()> {
    if s == 0 {
        return Err(Error::invalid("scale factor must be at least 1"));
    }
    let n = mr_dims.0 * mr_dims.1;
    if let Some(&bad) = cells.iter().find(|&&c| c >= n) {
        return Err(Error::invalid(format!("MR cell {bad} outside grid of {n}")));
    }
    Ok(())
}

/// HR cells whose representations feed the given MR cells, sorted.
pub fn support_cells(mr_cells: &[usize], mr_dims: (usize, usize), s: usize, method: Downsample) -> Result<Vec<usize>> {
    check_dims(mr_dims, s, mr_cells)?;
    let (mh, mw) = mr_dims;
    let hw = mw * s;
    let mut hit = vec![false; mh * s * hw];
    match method.kernel() {
        None => {
            for &c in mr_cells {
                let (u, v) = (c / mw, c % mw);
                for i in 0..s {
                    for j in 0..s {
                        hit[(s * u + i) * hw + s * v + j] = true;
                    }
                }
            }
        }
        Some(k) => {
            let wy = weights_1d(mh * s, mh, k)?;
            let wx = weights_1d(hw, mw, k)?;
            for &c in mr_cells {
                for &(y, _) in &wy[c / mw] {
                    for &(x, _) in &wx[c % mw] {
                        hit[y * hw + x] = true;
                    }
                }
            }
        }
    }
    Ok((0..hit.len()).filter(|&i| hit[i]).collect())
}

/// Reduces stacked HR representations to MR cells, scene by scene.
///
/// Scene `i` owns `hr_cells[i].len()` consecutive rows of `hr`, one per
/// listed HR cell, and produces `mr_cells[i].len()` output rows. Every HR
/// cell an output depends on must be present.
#[allow(clippy::too_many_arguments)]
pub fn downsample_rows(
    t: &mut Tape,
    hr: Var,
    hr_cells: &[Vec<usize>],
    mr_cells: &[Vec<usize>],
    mr_dims: (usize, usize),
    s: usize,
    method: Downsample,
    proj: Option<Var>,
) -> Result<Var> {
    if hr_cells.len() != mr_cells.len() {
        return Err(Error::shape("downsample_reps", "scene counts differ"));
    }
    let total_hr: usize = hr_cells.iter().map(Vec::len).sum();
    let total_mr: usize = mr_cells.iter().map(Vec::len).sum();
    if t.value(hr).rows() != total_hr {
        return Err(Error::shape(
            "downsample_reps",
            format!("{} HR rows for {total_hr} listed cells", t.value(hr).rows()),
        ));
    }
    let (mh, mw) = mr_dims;
    let hw = mw * s;
    let d = t.value(hr).cols();
    let missing = |cell: usize| {
        Error::invalid(format!(
            "HR cell ({}, {}) needed by the sampled MR cells was not provided",
            cell / hw,
            cell % hw
        ))
    };
    let mut offset = 0;
    let mut lookups = Vec::with_capacity(hr_cells.len());
    for (hc, mc) in hr_cells.iter().zip(mr_cells) {
        check_dims(mr_dims, s, mc)?;
        let map: HashMap<usize, usize> = hc.iter().enumerate().map(|(r, &c)| (c, offset + r)).collect();
        offset += hc.len();
        lookups.push(map);
    }
    match method.kernel() {
        Some(k) => {
            let wy = weights_1d(mh * s, mh, k)?;
            let wx = weights_1d(hw, mw, k)?;
            let mut m = vec![0.0; total_mr * total_hr];
            let mut row = 0;
            for (map, mc) in lookups.iter().zip(mr_cells) {
                for &c in mc {
                    for &(y, a) in &wy[c / mw] {
                        for &(x, b) in &wx[c % mw] {
                            let cell = y * hw + x;
                            let col = *map.get(&cell).ok_or_else(|| missing(cell))?;
                            m[row * total_hr + col] += a * b;
                        }
                    }
                    row += 1;
                }
            }
            let m = t.constant(Tensor::matrix(total_mr, total_hr, m));
            t.matmul(m, hr)
        }
        None => {
            let proj = proj.ok_or_else(|| Error::invalid("linear projection needs a projection matrix"))?;
            let ps = t.value(proj).shape().to_vec();
            if ps != [s * s * d, d] {
                return Err(Error::shape(
                    "downsample_reps",
                    format!("projection is {ps:?}, expected [{}, {d}]", s * s * d),
                ));
            }
            let mut pieces = Vec::with_capacity(s * s);
            for i in 0..s {
                for j in 0..s {
                    let mut idx = Vec::with_capacity(total_mr);
                    for (map, mc) in lookups.iter().zip(mr_cells) {
                        for &c in mc {
                            let cell = (s * (c / mw) + i) * hw + s * (c % mw) + j;
                            idx.push(*map.get(&cell).ok_or_else(|| missing(cell))?);
                        }
                    }
                    pieces.push(t.gather_rows(hr, &idx)?);
                }
            }
            let cat = if pieces.len() == 1 { pieces[0] } else { t.concat_last_dim(&pieces)? };
            t.matmul(cat, proj)
        }
    }
}

/// Whole-grid reduction of an HR representation grid by `s`.
pub fn downsample_reps(hr: &RepGrid, s: usize, method: Downsample, proj: Option<&Tensor>) -> Result<RepGrid> {
    if s == 0 || hr.grid_h % s != 0 || hr.grid_w % s != 0 {
        return Err(Error::invalid(format!(
            "HR grid {}x{} is not divisible by {s}",
            hr.grid_h, hr.grid_w
        )));
    }
    let mr_dims = (hr.grid_h / s, hr.grid_w / s);
    let mut t = Tape::new();
    let x = t.constant(hr.z.clone());
    let p = proj.map(|p| t.constant(p.clone()));
    let out = downsample_rows(
        &mut t,
        x,
        &[(0..hr.n()).collect()],
        &[(0..mr_dims.0 * mr_dims.1).collect()],
        mr_dims,
        s,
        method,
        p,
    )?;
    RepGrid::new(t.value(out).clone(), mr_dims.0, mr_dims.1)
}

/// Per-scene inputs of the spatial-affinity term.
pub struct SaBatch<'a> {
    /// sampled MR cells per scene, in the row order of the student reps
    pub mr_cells: Vec<Vec<usize>>,
    /// full patchified HR image per scene, HR grid order
    pub hr_patches: Vec<&'a Tensor>,
}

/// Mean over scenes of the gram loss between the student reps `student_z`
/// (stacked per scene) and the downsampled HR-teacher reps of the same MR
/// cells. The teacher is bound as constants, so it never receives gradient;
/// a projection matrix, when given, does.
#[allow(clippy::too_many_arguments)]
pub fn sa_forward(
    t: &mut Tape,
    student_z: Var,
    batch: &SaBatch,
    teacher: &ParamStore,
    enc_cfg: &EncoderConfig,
    proj: Option<Var>,
    cfg: &SaConfig,
    mr_dims: (usize, usize),
) -> Result<Var> {
    let s = cfg.s;
    let n_scenes = batch.mr_cells.len();
    if n_scenes == 0 || batch.hr_patches.len() != n_scenes {
        return Err(Error::shape("sa_forward", "empty batch or mismatched scene lists"));
    }
    let hr_dims = (mr_dims.0 * s, mr_dims.1 * s);
    let table = sincos_2d(hr_dims.0, hr_dims.1, enc_cfg.d)?;
    let mut supports = Vec::with_capacity(n_scenes);
    let mut rows = Vec::with_capacity(n_scenes);
    let mut pos = Vec::with_capacity(n_scenes);
    for (cells, hr) in batch.mr_cells.iter().zip(&batch.hr_patches) {
        if hr.rows() != hr_dims.0 * hr_dims.1 {
            return Err(Error::shape(
                "sa_forward",
                format!(
                    "HR image has {} patches, expected {}x{} for s={s}",
                    hr.rows(),
                    hr_dims.0,
                    hr_dims.1
                ),
            ));
        }
        let sup = support_cells(cells, mr_dims, s, cfg.downsample)?;
        rows.push(hr.select_rows(&sup));
        pos.push(positions_of(&table, &sup)?);
        supports.push(sup);
    }
    let rows = Tensor::vstack(&rows.iter().collect::<Vec<_>>())?;
    let pos = Tensor::vstack(&pos.iter().collect::<Vec<_>>())?;
    let segs: Vec<usize> = supports.iter().map(Vec::len).collect();

    let tb = teacher.bind(t, false);
    let x = t.constant(rows);
    let zt_hr = encode(t, &tb, enc_cfg, x, &pos, &segs)?;
    let zt = downsample_rows(t, zt_hr, &supports, &batch.mr_cells, mr_dims, s, cfg.downsample, proj)?;

    let total: usize = batch.mr_cells.iter().map(Vec::len).sum();
    if t.value(student_z).rows() != total {
        return Err(Error::shape(
            "sa_forward",
            format!("{} student rows for {total} sampled cells", t.value(student_z).rows()),
        ));
    }
    if n_scenes == 1 {
        return gram_loss_attached(t, student_z, zt, cfg.gram_mode);
    }
    let mut losses = Vec::with_capacity(n_scenes);
    let mut start = 0;
    for cells in &batch.mr_cells {
        let idx: Vec<usize> = (start..start + cells.len()).collect();
        start += cells.len();
        let a = t.gather_rows(student_z, &idx)?;
        let b = t.gather_rows(zt, &idx)?;
        losses.push(gram_loss_attached(t, a, b, cfg.gram_mode)?);
    }
    let cat = t.concat_rows(&losses)?;
    Ok(t.mean(cat))
}

/// `host + λ·gram`; with `λ = 0` or no gram term the host loss itself.
pub fn composite_loss(t: &mut Tape, host: Var, gram: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    match gram {
        Some(g) if lambda != 0.0 => {
            let w = t.scale(g, lambda);
            t.add(host, w)
        }
        _ => Ok(host),
    }
}

/// EMA of the student into the HR teacher; same contract as the host
/// target-encoder update.
pub fn hr_teacher_update(teacher: &mut ParamStore, student: &ParamStore, m_hr: f64) -> Result<()> {
    crate::hosts::ema_update(teacher, student, m_hr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_three_four() {
        let g = gram_of(&Tensor::matrix(2, 2, vec![3.0, 4.0, 4.0, 3.0])).unwrap();
        assert!((g.at(0, 1) - 0.96).abs() < 1e-15);
        assert!((g.at(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gram_loss_hand_value() {
        let zs = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let zt = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(gram_loss_value(&zs, &zt, GramMode::Mean).unwrap(), 0.5);
        assert_eq!(gram_loss_value(&zs, &zt, GramMode::Sum).unwrap(), 2.0);
    }

    #[test]
    fn gram_loss_rejects_count_mismatch() {
        let zs = Tensor::matrix(2, 2, vec![1.0; 4]);
        let zt = Tensor::matrix(3, 2, vec![1.0; 6]);
        assert!(gram_loss_value(&zs, &zt, GramMode::Mean).is_err());
    }

    #[test]
    fn projection_selector_takes_top_left() {
        let d = 2;
        let mut sel = Tensor::zeros(&[4 * d, d]);
        sel.data_mut()[0] = 1.0;
        sel.data_mut()[d + 1] = 1.0;
        let z = Tensor::matrix(16, d, (0..32).map(f64::from).collect());
        let hr = RepGrid::new(z.clone(), 4, 4).unwrap();
        let out = downsample_reps(&hr, 2, Downsample::LinearProjection, Some(&sel)).unwrap();
        for (k, cell) in [0usize, 2, 8, 10].into_iter().enumerate() {
            assert_eq!(out.z.row(k), z.row(cell));
        }
    }

    #[test]
    fn bilinear_support_is_correspondence_set() {
        let s = support_cells(&[0, 3], (2, 2), 2, Downsample::Bilinear).unwrap();
        assert_eq!(s, vec![0, 1, 4, 5, 10, 11, 14, 15]);
        let c = support_cells(&[0], (2, 2), 2, Downsample::Bicubic).unwrap();
        assert_eq!(c.len(), 9);
    }

    #[test]
    fn composite_arithmetic() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::scalar(0.3));
        let g = t.constant(Tensor::scalar(0.1));
        let c = composite_loss(&mut t, h, Some(g), 2.0).unwrap();
        assert!((t.value(c).item() - 0.5).abs() < 1e-15);
        let c0 = composite_loss(&mut t, h, Some(g), 0.0).unwrap();
        assert_eq!(c0, h);
    }
}
