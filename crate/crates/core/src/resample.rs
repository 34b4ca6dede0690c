//! Separable interpolation kernels with half-pixel alignment and
//! clamp-to-edge borders, no antialiasing.

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    Bilinear,
    Bicubic,
}

/// Cubic convolution coefficient.
pub const CUBIC_A: f64 = -0.75;

fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// For each output sample, the `(input index, weight)` taps of a 1-D resize
/// from `n_in` to `n_out` samples. Clamped taps landing on the same index
/// are merged; taps are sorted by index.
pub fn weights_1d(n_in: usize, n_out: usize, kernel: Kernel) -> Result<Vec<Vec<(usize, f64)>>> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::invalid("resize extents must be positive"));
    }
    let scale = n_in as f64 / n_out as f64;
    let last = (n_in - 1) as isize;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    let mut out = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let i0 = src.floor();
        let f = src - i0;
        let i0 = i0 as isize;
        let raw: Vec<(isize, f64)> = match kernel {
            Kernel::Bilinear => vec![(i0, 1.0 - f), (i0 + 1, f)],
            Kernel::Bicubic => (-1..=2).map(|k| (i0 + k, cubic(f - k as f64))).collect(),
        };
        let mut taps: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
        for (i, w) in raw {
            if w == 0.0 {
                continue;
            }
            let i = clamp(i);
            match taps.iter_mut().find(|(j, _)| *j == i) {
                Some(t) => t.1 += w,
                None => taps.push((i, w)),
            }
        }
        taps.sort_by_key(|t| t.0);
        out.push(taps);
    }
    Ok(out)
}

/// Resizes every band of `img` to `out_h × out_w`.
pub fn resize(img: &Raster, out_h: usize, out_w: usize, kernel: Kernel) -> Result<Raster> {
    let wy = weights_1d(img.height, out_h, kernel)?;
    let wx = weights_1d(img.width, out_w, kernel)?;
    let mut tmp = vec![0.0; img.height * out_w];
    let mut out = Raster::filled(img.bands, out_h, out_w, 0.0);
    for b in 0..img.bands {
        let band = img.band(b);
        for y in 0..img.height {
            let row = &band[y * img.width..(y + 1) * img.width];
            for (x, taps) in wx.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(i, w)| w * row[i]).sum();
            }
        }
        let dst = out.band_mut(b);
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..out_w {
                dst[y * out_w + x] = taps.iter().map(|&(i, w)| w * tmp[i * out_w + x]).sum();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_half_is_pair_mean() {
        let w = weights_1d(8, 4, Kernel::Bilinear).unwrap();
        assert_eq!(w[1], vec![(2, 0.5), (3, 0.5)]);
    }

    #[test]
    fn bicubic_half_taps() {
        let w = weights_1d(8, 4, Kernel::Bicubic).unwrap();
        assert_eq!(
            w[1],
            vec![(1, -0.09375), (2, 0.59375), (3, 0.59375), (4, -0.09375)]
        );
        // left border: tap -1 clamps onto 0
        assert_eq!(w[0], vec![(0, 0.5), (1, 0.59375), (2, -0.09375)]);
    }

    #[test]
    fn kernels_sum_to_one() {
        for k in [Kernel::Bilinear, Kernel::Bicubic] {
            for (n_in, n_out) in [(8, 4), (4, 8), (9, 3), (5, 7)] {
                for taps in weights_1d(n_in, n_out, k).unwrap() {
                    let s: f64 = taps.iter().map(|t| t.1).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
