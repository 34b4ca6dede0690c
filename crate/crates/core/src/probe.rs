//! Frozen-representation evaluation: linear probe with mIoU, and
//! agglomerative clustering exported as a graymap.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::trunc_normal;
use crate::rng::Rng;
use crate::tensor::{adamw_step, AdamWConfig, AdamWState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    /// `d × K`
    pub w: Tensor,
    /// `1 × K`
    pub b: Tensor,
}

impl ProbeHead {
    pub fn init(d: usize, k: usize, rng: &mut Rng) -> Self {
        ProbeHead {
            w: trunc_normal(d, k, 0.02, rng),
            b: Tensor::matrix(1, k, vec![0.0; k]),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, reps: &Tensor) -> Result<Tensor> {
        let mut z = reps.matmul(&self.w)?;
        let k = self.classes();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v += self.b.data()[i % k];
        }
        Ok(z)
    }

    /// Arg-max class per row; ties go to the lower class.
    pub fn predict(&self, reps: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(reps)?;
        Ok((0..z.rows())
            .map(|r| {
                let row = z.row(r);
                (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 1e-2,
            weight_decay: 0.0,
        }
    }
}

/// Full-batch softmax cross-entropy training of a linear head on fixed
/// representations.
pub fn train_probe(reps: &Tensor, labels: &[usize], k: usize, cfg: &ProbeConfig, rng: &mut Rng) -> Result<ProbeHead> {
    if reps.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "train_probe",
            format!("{} representations for {} labels", reps.rows(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} does not fit a {k}-class head")));
    }
    let mut head = ProbeHead::init(reps.cols(), k, rng);
    let mut opt = AdamWState::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        [&head.w, &head.b],
    );
    for _ in 0..cfg.epochs {
        let mut t = Tape::new();
        let x = t.constant(reps.clone());
        let w = t.leaf(head.w.clone());
        let b = t.leaf(head.b.clone());
        let z = t.matmul(x, w)?;
        let z = t.add_row(z, b)?;
        let loss = t.cross_entropy(z, labels)?;
        t.backward(loss)?;
        let (gw, gb) = (t.grad_or_zeros(w), t.grad_or_zeros(b));
        adamw_step(&mut [&mut head.w, &mut head.b], &[&gw, &gb], &mut opt, cfg.lr)?;
    }
    Ok(head)
}

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, pred: usize, label: usize) -> Result<()> {
        if pred >= self.k || label >= self.k {
            return Err(Error::invalid(format!(
                "class pair ({label}, {pred}) outside {} classes",
                self.k
            )));
        }
        self.counts[label * self.k + pred] += 1;
        Ok(())
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for a class absent from both truth and
    /// predictions.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.k).map(|l| self.get(l, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl MiouReport {
    /// Semicolon-joined per-class IoUs; absent classes are written `na`.
    pub fn per_class_field(&self) -> String {
        self.per_class
            .iter()
            .map(|v| v.map_or("na".to_string(), |x| format!("{x:.6}")))
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn compute_miou(preds: &[usize], labels: &[usize], k: usize) -> Result<MiouReport> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "mIoU needs equal nonempty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &l) in preds.iter().zip(labels) {
        cm.add(p, l)?;
    }
    let per_class = cm.ious();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, miou })
}

/// Distances closer than this are treated as ties.
const TIE_EPS: f64 = 1e-12;

/// Average-linkage agglomerative clustering on cosine distance down to `k`
/// clusters. On equal distances the pair with the lowest `(i, j)` slot
/// indices merges first, where a cluster's slot is its smallest member.
/// Labels are numbered by first appearance in row order.
pub fn hierarchical_cluster(reps: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = reps.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} patches")));
    }
    let d = reps.cols();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = reps.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dij = if unit[i] == unit[j] {
                0.0
            } else {
                (1.0 - (0..d).map(|c| unit[i][c] * unit[j][c]).sum::<f64>()).max(0.0)
            };
            dist[i * n + j] = dij;
            dist[j * n + i] = dij;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    for _ in 0..n - k {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                let dij = dist[i * n + j];
                if best.is_none_or(|(_, _, b)| dij < b - TIE_EPS) {
                    best = Some((i, j, dij));
                }
            }
        }
        let (i, j, _) = best.expect("at least two active clusters");
        for m in (0..n).filter(|&m| active[m] && m != i && m != j) {
            let v = (size[i] as f64 * dist[i * n + m] + size[j] as f64 * dist[j * n + m]) / (size[i] + size[j]) as f64;
            dist[i * n + m] = v;
            dist[m * n + i] = v;
        }
        size[i] += size[j];
        active[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
    }
    let mut seen: Vec<usize> = Vec::new();
    Ok(owner
        .iter()
        .map(|o| match seen.iter().position(|s| s == o) {
            Some(p) => p,
            None => {
                seen.push(*o);
                seen.len() - 1
            }
        })
        .collect())
}

pub fn gray_level(label: usize, k: usize) -> u8 {
    if k <= 1 {
        0
    } else {
        (255 * label / (k - 1)) as u8
    }
}

/// Binary PGM with header `P5 <w> <h> 255`, one pixel per patch.
pub fn encode_cluster_map(labels: &[usize], grid_h: usize, grid_w: usize, k: usize) -> Result<Vec<u8>> {
    if labels.len() != grid_h * grid_w {
        return Err(Error::shape(
            "export_cluster_map",
            format!("{} labels for a {grid_h}x{grid_w} grid", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k.max(1)) {
        return Err(Error::invalid(format!("cluster label {bad} outside {k} clusters")));
    }
    let mut out = format!("P5 {grid_w} {grid_h} 255\n").into_bytes();
    out.extend(labels.iter().map(|&l| gray_level(l, k)));
    Ok(out)
}

pub fn export_cluster_map(labels: &[usize], grid_h: usize, grid_w: usize, k: usize, path: &Path) -> Result<()> {
    let bytes = encode_cluster_map(labels, grid_h, grid_w, k)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a map written by [`export_cluster_map`] and inverts the gray
/// mapping. Returns `(grid_h, grid_w, labels)`.
pub fn read_cluster_map(path: &Path, k: usize) -> Result<(usize, usize, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format {
        offset: 0,
        msg: "missing graymap header".into(),
    })?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format {
        offset: 0,
        msg: "header is not text".into(),
    })?;
    let f: Vec<&str> = header.split_whitespace().collect();
    let bad = |msg: &str| Error::Format {
        offset: 0,
        msg: msg.to_string(),
    };
    if f.len() != 4 || f[0] != "P5" || f[3] != "255" {
        return Err(bad("expected header P5 <w> <h> 255"));
    }
    let w: usize = f[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = f[2].parse().map_err(|_| bad("bad height"))?;
    let px = &bytes[nl + 1..];
    if px.len() != w * h {
        return Err(Error::Truncated {
            what: format!("graymap {}", path.display()),
            expected: (nl + 1 + w * h) as u64,
            actual: bytes.len() as u64,
        });
    }
    let labels = px
        .iter()
        .map(|&g| {
            if k <= 1 {
                0
            } else {
                ((g as usize * (k - 1)) as f64 / 255.0).round() as usize
            }
        })
        .collect();
    Ok((h, w, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_hand_example() {
        let r = compute_miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
    }

    #[test]
    fn miou_perfect_and_disjoint() {
        assert_eq!(compute_miou(&[0, 1, 2], &[0, 1, 2], 3).unwrap().miou, 1.0);
        assert_eq!(compute_miou(&[1, 0], &[0, 1], 2).unwrap().miou, 0.0);
        assert!(compute_miou(&[], &[], 2).is_err());
    }

    #[test]
    fn absent_class_excluded() {
        let r = compute_miou(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class_field(), "1.000000;na;na");
    }

    #[test]
    fn cluster_k_equals_n() {
        let reps = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(hierarchical_cluster(&reps, 3).unwrap(), vec![0, 1, 2]);
        assert!(hierarchical_cluster(&reps, 4).is_err());
    }

    #[test]
    fn header_for_four_by_four() {
        let bytes = encode_cluster_map(&[0; 16], 4, 4, 3).unwrap();
        assert!(bytes.starts_with(b"P5 4 4 255\n"));
        assert!(bytes[11..].iter().all(|&b| b == 0));
    }
}
