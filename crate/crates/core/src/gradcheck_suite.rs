//! Finite-difference checks of every tape op and of both composite losses
//! on tiny instances.

use rand::Rng as _;

use crate::affinity::{gram_loss, Downsample, GramMode, SaConfig};
use crate::error::Result;
use crate::hosts::{composite_forward, sample_host_mask, Host, HostConfig, HostState, SaAttachment, StepInputs};
use crate::params::{Bound, ParamStore};
use crate::patch_grid::{BlockMaskConfig, PatchGrid};
use crate::rng::{seeded, Rng};
use crate::tensor::{finite_difference_check, finite_difference_check_sampled, OpKind, Tape, Tensor, Var};
use crate::vit::{EncoderConfig, HeadConfig};

pub const ELEMENTARY_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;
const H: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!(
                "{:<34} max_rel_err={:.3e} tol={:.0e} coords={:<4} {}\n",
                r.name,
                r.max_rel_error,
                r.tolerance,
                r.checked,
                if r.passed() { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

fn rand_t(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Sum of `out ⊙ r` for a fixed random `r`, so every output entry carries a
/// distinct weight.
fn reduce(t: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let c = t.constant(r.clone());
    let p = t.mul(out, c)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<Tensor>,
    f: OpFn,
    out_shape: Option<(usize, usize)>,
}

fn op_cases(rng: &mut Rng) -> Vec<Case> {
    let m = |r: &mut Rng, a, b| rand_t(r, a, b);
    macro_rules! case {
        ($name:expr, $params:expr, $out:expr, $f:expr) => {
            Case {
                name: $name,
                params: $params,
                f: Box::new($f),
                out_shape: $out,
            }
        };
    }
    vec![
        case!("matmul", vec![m(rng, 3, 4), m(rng, 4, 2)], Some((3, 2)), |t, p| t.matmul(p[0], p[1])),
        case!("matmul_nt", vec![m(rng, 3, 4), m(rng, 2, 4)], Some((3, 2)), |t, p| t.matmul_nt(p[0], p[1])),
        case!("add", vec![m(rng, 3, 4), m(rng, 3, 4)], Some((3, 4)), |t, p| t.add(p[0], p[1])),
        case!("sub", vec![m(rng, 3, 4), m(rng, 3, 4)], Some((3, 4)), |t, p| t.sub(p[0], p[1])),
        case!("mul", vec![m(rng, 3, 4), m(rng, 3, 4)], Some((3, 4)), |t, p| t.mul(p[0], p[1])),
        case!("add_row", vec![m(rng, 3, 4), m(rng, 1, 4)], Some((3, 4)), |t, p| t.add_row(p[0], p[1])),
        case!("mul_row", vec![m(rng, 3, 4), m(rng, 1, 4)], Some((3, 4)), |t, p| t.mul_row(p[0], p[1])),
        case!("scale", vec![m(rng, 3, 4)], Some((3, 4)), |t, p| Ok(t.scale(p[0], 0.7))),
        case!("softmax_rows", vec![m(rng, 3, 5)], Some((3, 5)), |t, p| Ok(t.softmax_rows(p[0]))),
        case!("layer_norm", vec![m(rng, 3, 6)], Some((3, 6)), |t, p| Ok(t.layer_norm(p[0]))),
        case!("gelu", vec![m(rng, 3, 4)], Some((3, 4)), |t, p| Ok(t.gelu(p[0]))),
        case!("l2_normalize_rows", vec![m(rng, 3, 4)], Some((3, 4)), |t, p| Ok(t.l2_normalize_rows(p[0]))),
        case!("transpose", vec![m(rng, 3, 4)], Some((4, 3)), |t, p| Ok(t.transpose(p[0]))),
        case!("concat_last_dim", vec![m(rng, 3, 2), m(rng, 3, 3)], Some((3, 5)), |t, p| t
            .concat_last_dim(&[p[0], p[1]])),
        case!("concat_rows", vec![m(rng, 2, 4), m(rng, 3, 4)], Some((5, 4)), |t, p| t
            .concat_rows(&[p[0], p[1]])),
        case!("gather_rows", vec![m(rng, 4, 3)], Some((3, 3)), |t, p| t.gather_rows(p[0], &[2, 0, 2])),
        case!("mse", vec![m(rng, 3, 4), m(rng, 3, 4)], None, |t, p| t.mse(p[0], p[1])),
        case!("weighted_sq_error", vec![m(rng, 3, 4), m(rng, 3, 4)], None, |t, p| t
            .weighted_sq_error(p[0], p[1], &[0.5, 1.0, 2.0])),
        case!("sum", vec![m(rng, 3, 4)], None, |t, p| Ok(t.sum(p[0]))),
        case!("mean", vec![m(rng, 3, 4)], None, |t, p| Ok(t.mean(p[0]))),
    ]
}

fn composite_cases(rng: &mut Rng) -> Vec<Case> {
    let m = |r: &mut Rng, a, b| rand_t(r, a, b);
    // teacher side is stop-gradient, so it enters as a constant
    let teacher = m(rng, 4, 3);
    vec![
        Case {
            name: "attention_self",
            params: vec![m(rng, 5, 8), m(rng, 5, 8), m(rng, 5, 8)],
            f: Box::new(|t, p| t.attention(p[0], p[1], p[2], &[2, 3], &[2, 3], 2)),
            out_shape: Some((5, 8)),
        },
        Case {
            name: "attention_cross",
            params: vec![m(rng, 3, 8), m(rng, 5, 8), m(rng, 5, 8)],
            f: Box::new(|t, p| t.attention(p[0], p[1], p[2], &[1, 2], &[2, 3], 2)),
            out_shape: Some((3, 8)),
        },
        Case {
            name: "cross_entropy",
            params: vec![m(rng, 5, 3)],
            f: Box::new(|t, p| t.cross_entropy(p[0], &[0, 2, 1, 1, 0])),
            out_shape: None,
        },
        Case {
            name: "gram_loss",
            params: vec![m(rng, 4, 3)],
            f: Box::new(move |t, p| {
                let zt = t.constant(teacher.clone());
                gram_loss(t, p[0], zt, GramMode::Mean)
            }),
            out_shape: None,
        },
    ]
}

fn run_case(case: Case, tol: f64, fault: Option<OpKind>, rng: &mut Rng) -> Result<CheckRow> {
    let r = case.out_shape.map(|(a, b)| rand_t(rng, a, b));
    let f = case.f;
    let report = finite_difference_check(
        |t: &mut Tape, p: &[Var]| {
            if let Some(k) = fault {
                t.inject_backward_fault(k);
            }
            let out = f(t, p)?;
            match &r {
                Some(r) => reduce(t, out, r),
                None => Ok(out),
            }
        },
        &case.params,
        H,
    )?;
    Ok(CheckRow {
        name: case.name.to_string(),
        max_rel_error: report.max_rel_error,
        tolerance: tol,
        checked: report.checked,
    })
}

fn jitter(store: &mut ParamStore, rng: &mut Rng, amp: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += amp * rng.random_range(-1.0..1.0);
        }
    }
}

/// Composite loss of a two-block toy model with the spatial-affinity term
/// attached, checked on sampled coordinates of every trainable tensor.
fn composite_model_case(host: Host, downsample: Downsample, fault: Option<OpKind>, rng: &mut Rng) -> Result<CheckRow> {
    let encoder = EncoderConfig {
        in_dim: 4,
        d: 8,
        depth: 2,
        heads: 2,
        mlp_hidden: 16,
    };
    let cfg = HostConfig {
        host,
        encoder,
        head: HeadConfig {
            enc_d: 8,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_hidden: 16,
        },
        momentum: 0.996,
        visible_ratio: 0.25,
        blocks: BlockMaskConfig::default(),
    };
    let mut state = HostState::init(&cfg, rng)?;
    jitter(&mut state.student, rng, 0.1);
    jitter(&mut state.head, rng, 0.1);
    let mut teacher = state.student.clone();
    jitter(&mut teacher, rng, 0.05);
    jitter(&mut state.target, rng, 0.05);
    let sa_cfg = SaConfig {
        downsample,
        ..SaConfig::default()
    };
    let proj = (downsample == Downsample::LinearProjection).then(|| rand_t(rng, 4 * 8, 8).map(|v| 0.25 * v));
    let att = SaAttachment {
        cfg: sa_cfg,
        teacher,
        proj: proj.clone(),
    };
    let grid = PatchGrid::new(4, 4, 1)?;
    let mr: Vec<Tensor> = (0..2).map(|_| rand_t(rng, 16, 4)).collect();
    let hr: Vec<Tensor> = (0..2).map(|_| rand_t(rng, 64, 4)).collect();
    let samples = (0..2).map(|_| sample_host_mask(&cfg, &grid, rng)).collect::<Result<Vec<_>>>()?;
    let inputs = StepInputs {
        patches: mr.iter().collect(),
        samples,
        hr_patches: hr.iter().collect(),
        sa_cells: None,
    };
    let ns = state.student.len();
    let nh = state.head.len();
    let mut params: Vec<Tensor> = state.student.tensors().to_vec();
    params.extend(state.head.tensors().iter().cloned());
    params.extend(proj);
    let seed = rng.random::<u64>();
    let report = finite_difference_check_sampled(
        |t: &mut Tape, p: &[Var]| {
            if let Some(k) = fault {
                t.inject_backward_fault(k);
            }
            let sb = Bound::from_vars(&state.student, p[..ns].to_vec())?;
            let hb = Bound::from_vars(&state.head, p[ns..ns + nh].to_vec())?;
            let proj = p.get(ns + nh).copied();
            let (_, _, total) = composite_forward(t, &cfg, &sb, &hb, proj, &state.target, Some(&att), &inputs, (4, 4))?;
            Ok(total)
        },
        &params,
        H,
        3,
        seed,
    )?;
    Ok(CheckRow {
        name: format!("composite_{host}_{downsample}"),
        max_rel_error: report.max_rel_error,
        tolerance: COMPOSITE_TOL,
        checked: report.checked,
    })
}

/// Runs every check. `fault` corrupts one backward rule, for proving that
/// the suite catches it.
pub fn gradcheck_suite(fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut rng = seeded(0x6772_6164);
    let mut rows = Vec::new();
    for c in op_cases(&mut rng) {
        rows.push(run_case(c, ELEMENTARY_TOL, fault, &mut rng)?);
    }
    for c in composite_cases(&mut rng) {
        let tol = if c.name == "gram_loss" { ELEMENTARY_TOL } else { COMPOSITE_TOL };
        rows.push(run_case(c, tol, fault, &mut rng)?);
    }
    for host in [Host::Ijepa, Host::LatentMim] {
        rows.push(composite_model_case(host, Downsample::Bilinear, fault, &mut rng)?);
    }
    rows.push(composite_model_case(Host::Ijepa, Downsample::Bicubic, fault, &mut rng)?);
    rows.push(composite_model_case(Host::Ijepa, Downsample::LinearProjection, fault, &mut rng)?);
    Ok(SuiteReport { rows })
}

/// Op kind by its snake_case name, for selecting a fault from the command line.
pub fn op_kind_by_name(name: &str) -> Option<OpKind> {
    use OpKind::*;
    Some(match name {
        "matmul" => Matmul,
        "matmul_nt" => MatmulNt,
        "add" => Add,
        "sub" => Sub,
        "mul" => Mul,
        "add_row" => AddRow,
        "mul_row" => MulRow,
        "scale" => Scale,
        "softmax_rows" => SoftmaxRows,
        "layer_norm" => LayerNorm,
        "gelu" => Gelu,
        "l2_normalize_rows" => L2NormalizeRows,
        "transpose" => Transpose,
        "concat_last_dim" => ConcatLastDim,
        "concat_rows" => ConcatRows,
        "gather_rows" => GatherRows,
        "mse" => Mse,
        "weighted_sq_error" => WeightedSqError,
        "sum" => Sum,
        "mean" => Mean,
        "attention" => Attention,
        "cross_entropy" => CrossEntropy,
        _ => return None,
    })
}
