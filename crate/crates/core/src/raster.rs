use crate::error::{Error, Result};

/// Multi-band image stored band-major: `data[(b·height + y)·width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "raster extents must be positive, got {bands}x{height}x{width}"
            )));
        }
        if data.len() != bands * height * width {
            return Err(Error::shape(
                "raster",
                format!(
                    "{bands}x{height}x{width} needs {} values, got {}",
                    bands * height * width,
                    data.len()
                ),
            ));
        }
        Ok(Raster {
            bands,
            height,
            width,
            data,
        })
    }

    pub fn filled(bands: usize, height: usize, width: usize, value: f64) -> Self {
        Raster {
            bands,
            height,
            width,
            data: vec![value; bands * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, b: usize, y: usize, x: usize) -> usize {
        (b * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(b, y, x);
        self.data[i] = v;
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn band_mean(&self, b: usize) -> f64 {
        let band = self.band(b);
        band.iter().sum::<f64>() / band.len() as f64
    }

    /// Window `[y0, y0+h) × [x0, x0+w)` of every band.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Raster> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.bands * h * w);
        for b in 0..self.bands {
            for y in y0..y0 + h {
                let start = self.idx(b, y, x0);
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Raster::new(self.bands, h, w, data)
    }

    /// Mean over non-overlapping `s × s` blocks.
    pub fn area_downsample(&self, s: usize) -> Result<Raster> {
        if s == 0 || self.height % s != 0 || self.width % s != 0 {
            return Err(Error::invalid(format!(
                "area downsample by {s} of {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / s, self.width / s);
        let norm = (s * s) as f64;
        let mut out = Raster::filled(self.bands, h, w, 0.0);
        for b in 0..self.bands {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..s {
                        for dx in 0..s {
                            acc += self.get(b, y * s + dy, x * s + dx);
                        }
                    }
                    out.set(b, y, x, acc / norm);
                }
            }
        }
        Ok(out)
    }

    /// Rounds every value through `f32`, matching what the dataset container
    /// stores on disk.
    pub fn quantized_f32(&self) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}
