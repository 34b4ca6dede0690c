//! Procedural paired HR/MR scenes, the sensor degradation, the
//! interpolated "false HR" control and the XSDS dataset container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::resample::{resize, Kernel};
use crate::rng::{seeded, splitmix64, Rng};

pub const BANDS: usize = 4;
pub const DATASET_MAGIC: &[u8; 4] = b"XSDS";
pub const DATASET_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 * 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorModel {
    /// Gaussian blur σ in HR pixels, applied before area averaging
    pub blur_sigma: f64,
    /// gains drawn from `1 ± gain_jitter`, per band
    pub gain_jitter: f64,
    /// offsets drawn from `± offset_jitter`, per band
    pub offset_jitter: f64,
    pub noise_sigma: f64,
    pub s: usize,
}

impl SensorModel {
    pub fn identity(s: usize) -> Self {
        SensorModel {
            blur_sigma: 0.0,
            gain_jitter: 0.0,
            offset_jitter: 0.0,
            noise_sigma: 0.0,
            s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0 && self.offset_jitter >= 0.0) {
            return Err(Error::invalid("sensor σ and jitter values must be non-negative"));
        }
        if !(self.gain_jitter >= 0.0 && self.gain_jitter < 1.0) {
            return Err(Error::invalid("gain jitter must be in [0, 1) so gains stay positive"));
        }
        if self.s == 0 {
            return Err(Error::invalid("sensor scale factor must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub mr_h: usize,
    pub mr_w: usize,
    pub patch: usize,
    pub texture_amp: f64,
    /// box-blur radius (HR pixels) of the class field
    pub field_radius: usize,
    /// half-width of the per-band spread of class signatures around 0.5
    pub signature_spread: f64,
    pub sensor: SensorModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 3,
            mr_h: 32,
            mr_w: 32,
            patch: 8,
            texture_amp: 0.15,
            field_radius: 6,
            signature_spread: 0.08,
            sensor: SensorModel {
                blur_sigma: 1.0,
                gain_jitter: 0.05,
                offset_jitter: 0.03,
                noise_sigma: 0.03,
                s: 2,
            },
        }
    }
}

impl SynthConfig {
    pub fn s(&self) -> usize {
        self.sensor.s
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        (self.mr_h * self.s(), self.mr_w * self.s())
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.mr_h / self.patch, self.mr_w / self.patch)
    }

    /// Applies one `synth.*` or `sensor.*` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "synth.classes" => self.classes = num(key, value)?,
            "synth.mr_h" => self.mr_h = num(key, value)?,
            "synth.mr_w" => self.mr_w = num(key, value)?,
            "synth.patch" => self.patch = num(key, value)?,
            "synth.texture_amp" => self.texture_amp = num(key, value)?,
            "synth.field_radius" => self.field_radius = num(key, value)?,
            "synth.signature_spread" => self.signature_spread = num(key, value)?,
            "sensor.blur_sigma" => self.sensor.blur_sigma = num(key, value)?,
            "sensor.gain_jitter" => self.sensor.gain_jitter = num(key, value)?,
            "sensor.offset_jitter" => self.sensor.offset_jitter = num(key, value)?,
            "sensor.noise_sigma" => self.sensor.noise_sigma = num(key, value)?,
            "sensor.s" => self.sensor.s = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown data key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::invalid(format!("class count {} outside [2, 255]", self.classes)));
        }
        if self.patch == 0 || self.mr_h == 0 || self.mr_w == 0 || self.mr_h % self.patch != 0 || self.mr_w % self.patch != 0 {
            return Err(Error::invalid(format!(
                "MR size {}x{} is not divisible by patch {}",
                self.mr_h, self.mr_w, self.patch
            )));
        }
        if !(self.texture_amp >= 0.0) {
            return Err(Error::invalid("texture amplitude must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedScene {
    pub seed: u64,
    pub s: usize,
    pub hr: Raster,
    pub mr: Raster,
    /// majority class per MR patch, row-major over the patch grid
    pub labels: Vec<u8>,
}

impl PairedScene {
    pub fn quantized(&self) -> PairedScene {
        PairedScene {
            hr: self.hr.quantized_f32(),
            mr: self.mr.quantized_f32(),
            ..self.clone()
        }
    }
}

/// Dataset-wide spectral signature of each class, `classes × BANDS`.
pub fn class_signatures(classes: usize, spread: f64) -> Vec<[f64; BANDS]> {
    let mut rng = seeded(0x5157_4e41_5455_5245);
    (0..classes)
        .map(|_| std::array::from_fn(|_| 0.5 + spread * (2.0 * rng.random::<f64>() - 1.0)))
        .collect()
}

/// Zero-mean pixel pattern of class `k`; every aligned 2×2 block sums to 0.
fn texture(k: usize, y: usize, x: usize) -> f64 {
    let (py, px) = ((y % 2) as i32, (x % 2) as i32);
    let v = match k % 3 {
        0 => 1 - 2 * py,
        1 => 1 - 2 * px,
        _ => 1 - 2 * ((py + px) % 2),
    };
    let sign = if (k / 3) % 2 == 0 { 1.0 } else { -1.0 };
    sign * v as f64
}

/// Per-band texture weights; bands differ so the pattern is not a pure
/// brightness change.
const TEXTURE_BANDS: [f64; BANDS] = [1.0, 0.6, 0.8, 1.4];

fn box_blur_1d(src: &[f64], dst: &mut [f64], n: usize, stride: usize, count: usize, step: usize, r: usize) {
    // blur `count` lines of length `n`; element i of line l is at l*step + i*stride
    let norm = (2 * r + 1) as f64;
    for l in 0..count {
        let base = l * step;
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..=2 * r {
                // reflect at borders
                let j = i as isize + k as isize - r as isize;
                let n_i = n as isize;
                let j = if j < 0 {
                    -j - 1
                } else if j >= n_i {
                    2 * n_i - 1 - j
                } else {
                    j
                };
                acc += src[base + j.clamp(0, n_i - 1) as usize * stride];
            }
            dst[base + i * stride] = acc / norm;
        }
    }
}

/// White noise smoothed by three separable box-blur passes.
fn smooth_field(h: usize, w: usize, r: usize, rng: &mut Rng) -> Vec<f64> {
    let mut a: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut b = vec![0.0; h * w];
    for _ in 0..3 {
        box_blur_1d(&a, &mut b, w, 1, h, w, r);
        box_blur_1d(&b, &mut a, h, w, w, 1, r);
    }
    a
}

/// Thresholds `field` at its `i/K` quantiles.
fn quantile_classes(field: &[f64], k: usize) -> Vec<u8> {
    let mut sorted = field.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..k).map(|i| sorted[i * sorted.len() / k]).collect();
    field
        .iter()
        .map(|v| cuts.iter().filter(|&&c| *v >= c).count() as u8)
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders; σ = 0 is the identity.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for b in 0..img.bands {
        let src = img.band(b);
        let t = tmp.band_mut(b);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x + i as isize - r).clamp(0, w - 1);
                    acc += kv * src[(y * w + xx) as usize];
                }
                t[(y * w + x) as usize] = acc;
            }
        }
        let t = tmp.band(b);
        let o = out.band_mut(b);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y + i as isize - r).clamp(0, h - 1);
                    acc += kv * t[(yy * w + x) as usize];
                }
                o[(y * w + x) as usize] = acc;
            }
        }
    }
    out
}

/// Blur, `s×` area average, per-band `gain·x + offset`, additive Gaussian
/// noise, clip to `[0, 1]`.
pub fn sensor_degrade(hr: &Raster, model: &SensorModel, rng: &mut Rng) -> Result<Raster> {
    model.validate()?;
    let mut mr = gaussian_blur(hr, model.blur_sigma).area_downsample(model.s)?;
    let mut gains = Vec::with_capacity(mr.bands);
    let mut offsets = Vec::with_capacity(mr.bands);
    for _ in 0..mr.bands {
        gains.push(1.0 + model.gain_jitter * (2.0 * rng.random::<f64>() - 1.0));
        offsets.push(model.offset_jitter * (2.0 * rng.random::<f64>() - 1.0));
    }
    band_response(&mut mr, &gains, &offsets, model.noise_sigma, rng)?;
    Ok(mr)
}

/// In place `clip(gain_b·x + offset_b + noise, 0, 1)` for every band `b`.
pub fn band_response(img: &mut Raster, gains: &[f64], offsets: &[f64], noise_sigma: f64, rng: &mut Rng) -> Result<()> {
    if gains.len() != img.bands || offsets.len() != img.bands {
        return Err(Error::invalid("one gain and one offset per band required"));
    }
    if gains.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::invalid("band gains must be positive"));
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("σ is non-negative");
    for b in 0..img.bands {
        for v in img.band_mut(b) {
            let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = (gains[b] * *v + offsets[b] + n).clamp(0.0, 1.0);
        }
    }
    Ok(())
}

/// Bilinear `s×` upsampling with half-pixel alignment.
pub fn make_false_hr(mr: &Raster, s: usize) -> Result<Raster> {
    if s == 0 {
        return Err(Error::invalid("scale factor must be at least 1"));
    }
    resize(mr, mr.height * s, mr.width * s, Kernel::Bilinear)
}

/// Majority class of each `cell × cell` block of a label image; ties go to
/// the lowest class.
fn majority_labels(pix: &[u8], h: usize, w: usize, cell: usize, k: usize) -> Vec<u8> {
    let (gh, gw) = (h / cell, w / cell);
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut counts = vec![0usize; k];
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    counts[pix[y * w + x] as usize] += 1;
                }
            }
            let best = (0..k).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            out.push(best as u8);
        }
    }
    out
}

/// HR class map and the clean HR raster for one seed.
fn hr_content(cfg: &SynthConfig, rng: &mut Rng) -> (Vec<u8>, Raster) {
    let (h, w) = cfg.hr_dims();
    let field = smooth_field(h, w, cfg.field_radius, rng);
    let classes = quantile_classes(&field, cfg.classes);
    let sigs = class_signatures(cfg.classes, cfg.signature_spread);
    let mut hr = Raster::filled(BANDS, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let k = classes[y * w + x] as usize;
            let tex = cfg.texture_amp * texture(k, y, x);
            for b in 0..BANDS {
                hr.set(b, y, x, (sigs[k][b] + TEXTURE_BANDS[b] * tex).clamp(0.0, 1.0));
            }
        }
    }
    (classes, hr)
}

pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<PairedScene> {
    cfg.validate()?;
    let mut rng = seeded(splitmix64(seed));
    let (classes, hr) = hr_content(cfg, &mut rng);
    let mr = sensor_degrade(&hr, &cfg.sensor, &mut rng)?;
    let (h, w) = cfg.hr_dims();
    let labels = majority_labels(&classes, h, w, cfg.patch * cfg.s(), cfg.classes);
    Ok(PairedScene {
        seed,
        s: cfg.s(),
        hr,
        mr,
        labels,
    })
}

/// Per-pixel HR class map of a generated scene.
pub fn pixel_classes(seed: u64, cfg: &SynthConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let mut rng = seeded(splitmix64(seed));
    Ok(hr_content(cfg, &mut rng).0)
}

/// Container-level dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub count: u32,
    pub mr_h: u32,
    pub mr_w: u32,
    pub bands: u32,
    pub s: u32,
    pub classes: u32,
    pub patch: u32,
}

impl DatasetMeta {
    pub fn from_config(cfg: &SynthConfig, count: usize) -> Self {
        DatasetMeta {
            count: count as u32,
            mr_h: cfg.mr_h as u32,
            mr_w: cfg.mr_w as u32,
            bands: BANDS as u32,
            s: cfg.s() as u32,
            classes: cfg.classes as u32,
            patch: cfg.patch as u32,
        }
    }

    fn mr_len(&self) -> u64 {
        self.bands as u64 * self.mr_h as u64 * self.mr_w as u64
    }

    fn hr_len(&self) -> u64 {
        self.mr_len() * (self.s as u64) * (self.s as u64)
    }

    fn label_len(&self) -> u64 {
        (self.mr_h / self.patch.max(1)) as u64 * (self.mr_w / self.patch.max(1)) as u64
    }

    fn record_len(&self) -> u64 {
        8 + 4 * (self.hr_len() + self.mr_len()) + self.label_len()
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + self.count as u64 * self.record_len()
    }
}

fn write_f32s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Writes scenes to an XSDS container. All scenes must share `meta`'s
/// dimensions.
pub fn write_dataset(path: &Path, meta: &DatasetMeta, scenes: &[PairedScene]) -> Result<()> {
    if meta.count as usize != scenes.len() {
        return Err(Error::invalid(format!(
            "header says {} scenes, got {}",
            meta.count,
            scenes.len()
        )));
    }
    if meta.patch == 0 || meta.s == 0 {
        return Err(Error::invalid("patch and scale must be positive"));
    }
    for sc in scenes {
        let ok = sc.mr.bands as u32 == meta.bands
            && sc.mr.height as u32 == meta.mr_h
            && sc.mr.width as u32 == meta.mr_w
            && sc.hr.len_check(meta)
            && sc.labels.len() as u64 == meta.label_len()
            && sc.s as u32 == meta.s;
        if !ok {
            return Err(Error::invalid(format!("scene {} does not match dataset dimensions", sc.seed)));
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(DATASET_MAGIC).map_err(io)?;
    for v in [
        DATASET_VERSION,
        meta.count,
        meta.mr_h,
        meta.mr_w,
        meta.bands,
        meta.s,
        meta.classes,
        meta.patch,
        DTYPE_F32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for sc in scenes {
        w.write_all(&sc.seed.to_le_bytes()).map_err(io)?;
        write_f32s(&mut w, &sc.hr.data).map_err(io)?;
        write_f32s(&mut w, &sc.mr.data).map_err(io)?;
        w.write_all(&sc.labels).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

trait LenCheck {
    fn len_check(&self, meta: &DatasetMeta) -> bool;
}

impl LenCheck for Raster {
    fn len_check(&self, meta: &DatasetMeta) -> bool {
        self.bands as u32 == meta.bands
            && self.height as u32 == meta.mr_h * meta.s
            && self.width as u32 == meta.mr_w * meta.s
    }
}

/// One scene as read back; `hr` is absent when HR payloads were skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub seed: u64,
    pub hr: Option<Raster>,
    pub mr: Raster,
    pub labels: Vec<u8>,
}

impl SceneRecord {
    pub fn into_scene(self, s: usize) -> Result<PairedScene> {
        let hr = self
            .hr
            .ok_or_else(|| Error::invalid(format!("scene {} was read without its HR payload", self.seed)))?;
        Ok(PairedScene {
            seed: self.seed,
            s,
            hr,
            mr: self.mr,
            labels: self.labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub scenes: Vec<SceneRecord>,
    /// number of HR payloads actually read from disk
    pub hr_payload_reads: u64,
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        offset,
        msg: format!("unexpected end of file reading {what}"),
    })
}

fn read_f32s(r: &mut impl Read, n: usize, offset: u64, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    read_exact_at(r, &mut buf, offset, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads just the header.
pub fn read_dataset_meta(path: &Path) -> Result<DatasetMeta> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(f))
}

fn read_header(r: &mut impl Read) -> Result<DatasetMeta> {
    let mut head = [0u8; HEADER_LEN as usize];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) => {
                return Err(Error::Format {
                    offset: got as u64,
                    msg: e.to_string(),
                })
            }
        }
    }
    if got < 4 || &head[..4] != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected XSDS".into(),
        });
    }
    if got < head.len() {
        return Err(Error::Truncated {
            what: "dataset header".into(),
            expected: HEADER_LEN,
            actual: got as u64,
        });
    }
    let u = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if u(0) != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {}", u(0)),
        });
    }
    if u(8) != DTYPE_F32 {
        return Err(Error::Format {
            offset: 36,
            msg: format!("unsupported dtype tag {}", u(8)),
        });
    }
    let meta = DatasetMeta {
        count: u(1),
        mr_h: u(2),
        mr_w: u(3),
        bands: u(4),
        s: u(5),
        classes: u(6),
        patch: u(7),
    };
    if meta.patch == 0 || meta.s == 0 || meta.mr_h % meta.patch != 0 || meta.mr_w % meta.patch != 0 || meta.bands == 0 {
        return Err(Error::Format {
            offset: 12,
            msg: "inconsistent dimensions in header".into(),
        });
    }
    Ok(meta)
}

/// Reads an XSDS container. With `load_hr = false` the HR payloads are
/// skipped by seeking and never touched.
pub fn read_dataset_with(path: &Path, load_hr: bool) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(f);
    let meta = read_header(&mut r)?;
    let expected = meta.file_len();
    if actual != expected {
        return Err(Error::Truncated {
            what: format!("dataset {}", path.display()),
            expected,
            actual,
        });
    }
    let (mh, mw, bands, s) = (meta.mr_h as usize, meta.mr_w as usize, meta.bands as usize, meta.s as usize);
    let mut scenes = Vec::with_capacity(meta.count as usize);
    let mut hr_reads = 0;
    let mut offset = HEADER_LEN;
    for _ in 0..meta.count {
        let mut sb = [0u8; 8];
        read_exact_at(&mut r, &mut sb, offset, "scene seed")?;
        offset += 8;
        let seed = u64::from_le_bytes(sb);
        let hr_bytes = meta.hr_len() * 4;
        let hr = if load_hr {
            hr_reads += 1;
            let data = read_f32s(&mut r, meta.hr_len() as usize, offset, "HR payload")?;
            Some(Raster::new(bands, mh * s, mw * s, data)?)
        } else {
            r.seek(SeekFrom::Current(hr_bytes as i64)).map_err(|e| Error::io(path, e))?;
            None
        };
        offset += hr_bytes;
        let mr = Raster::new(bands, mh, mw, read_f32s(&mut r, meta.mr_len() as usize, offset, "MR payload")?)?;
        offset += meta.mr_len() * 4;
        let mut labels = vec![0u8; meta.label_len() as usize];
        read_exact_at(&mut r, &mut labels, offset, "labels")?;
        if let Some(&bad) = labels.iter().find(|&&l| l as u32 >= meta.classes) {
            return Err(Error::Format {
                offset,
                msg: format!("label {bad} outside {} classes", meta.classes),
            });
        }
        offset += meta.label_len();
        scenes.push(SceneRecord { seed, hr, mr, labels });
    }
    Ok(Dataset {
        meta,
        scenes,
        hr_payload_reads: hr_reads,
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<PairedScene>> {
    let ds = read_dataset_with(path, true)?;
    let s = ds.meta.s as usize;
    ds.scenes.into_iter().map(|r| r.into_scene(s)).collect()
}
