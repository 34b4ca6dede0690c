//! Training loop, evaluation and the file-level commands behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::affinity::{init_projection, Downsample, SaConfig, SaSampling};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::{content_hash, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::hosts::{
    sample_host_mask, train_step, trainable_tensors, HostSample, HostState, MetricsRow, SaAttachment, StepInputs,
    METRICS_HEADER,
};
use crate::params::ParamStore;
use crate::patch_grid::{patchify, sample_sa_block, PatchGrid};
use crate::probe::{compute_miou, hierarchical_cluster, export_cluster_map, train_probe, MiouReport};
use crate::raster::Raster;
use crate::rng::{stream, streams};
use crate::synth::{
    generate_scene, make_false_hr, read_dataset_with, write_dataset, Dataset, DatasetMeta, PairedScene, SceneRecord,
    SynthConfig,
};
use crate::tensor::{cosine_lr, AdamWState, Tensor};
use crate::vit::{encode, sincos_2d, EncoderConfig};

pub const TRAIN_FILE: &str = "train.xsds";
pub const PROBE_TRAIN_FILE: &str = "probe_train.xsds";
pub const PROBE_TEST_FILE: &str = "probe_test.xsds";

/// Encoder-side and HR-side inputs of every training scene for one variant.
pub struct TrainData {
    /// grid the encoder trains on
    pub grid: (usize, usize),
    pub mr_grid: (usize, usize),
    pub patch: usize,
    /// fixed encoder patches per scene; empty when HR crops are drawn per step
    pub inputs: Vec<Tensor>,
    /// HR rasters for per-step cropping
    pub hr_rasters: Vec<Raster>,
    pub mr_pixels: (usize, usize),
    /// HR-side patches for the affinity term (real or interpolated)
    pub sa_hr: Vec<Tensor>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.inputs.len().max(self.hr_rasters.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_meta(cfg: &TrainConfig, meta: &DatasetMeta) -> Result<()> {
    if meta.patch as usize != cfg.patch || (meta.bands * meta.patch * meta.patch) as usize != cfg.encoder.in_dim {
        return Err(Error::Config(format!(
            "dataset has {} bands at patch {}, config expects patch {} and input width {}",
            meta.bands, meta.patch, cfg.patch, cfg.encoder.in_dim
        )));
    }
    if cfg.variant.uses_sa() && meta.s as usize != cfg.sa.s {
        return Err(Error::Config(format!(
            "dataset scale factor {} differs from sa.s={}",
            meta.s, cfg.sa.s
        )));
    }
    Ok(())
}

fn hr_of(r: &SceneRecord) -> Result<&Raster> {
    r.hr.as_ref()
        .ok_or_else(|| Error::invalid(format!("scene {} was loaded without HR payload", r.seed)))
}

pub fn prepare_train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainData> {
    check_meta(cfg, &ds.meta)?;
    let m = &ds.meta;
    let p = cfg.patch;
    let mr_grid = ((m.mr_h / m.patch) as usize, (m.mr_w / m.patch) as usize);
    let s = m.s as usize;
    let mut d = TrainData {
        grid: mr_grid,
        mr_grid,
        patch: p,
        inputs: Vec::new(),
        hr_rasters: Vec::new(),
        mr_pixels: (m.mr_h as usize, m.mr_w as usize),
        sa_hr: Vec::new(),
    };
    for r in &ds.scenes {
        match cfg.variant {
            Variant::MrOnly => d.inputs.push(patchify(&r.mr, p)?),
            Variant::HrOnly if cfg.hr_only_crop => d.hr_rasters.push(hr_of(r)?.clone()),
            Variant::HrOnly => {
                d.grid = (mr_grid.0 * s, mr_grid.1 * s);
                d.inputs.push(patchify(hr_of(r)?, p)?);
            }
            Variant::Sa => {
                d.inputs.push(patchify(&r.mr, p)?);
                d.sa_hr.push(patchify(hr_of(r)?, p)?);
            }
            Variant::SaFalseHr => {
                d.inputs.push(patchify(&r.mr, p)?);
                d.sa_hr.push(patchify(&make_false_hr(&r.mr, s)?, p)?);
            }
        }
    }
    if d.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    Ok(d)
}

/// Everything a run mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub host: HostState,
    pub sa: Option<SaAttachment>,
    pub opt: AdamWState,
}

impl RunState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, streams::INIT, 0);
        let host = HostState::init(&cfg.host_config(), &mut rng)?;
        let sa = cfg.variant.uses_sa().then(|| SaAttachment {
            cfg: cfg.sa,
            teacher: host.student.clone(),
            proj: (cfg.sa.downsample == Downsample::LinearProjection).then(|| init_projection(cfg.sa.s, cfg.encoder.d)),
        });
        let opt = AdamWState::new(cfg.optim.adamw(), trainable_tensors(&host, sa.as_ref()));
        Ok(RunState { host, sa, opt })
    }

    pub fn step(&self) -> u64 {
        self.opt.t
    }

    /// Flat named view used for checkpoints.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        let put = |s: &mut ParamStore, st: ParamStore| s.extend(st).expect("prefixes are distinct");
        put(&mut s, self.host.student.prefixed("student."));
        put(&mut s, self.host.target.prefixed("target."));
        put(&mut s, self.host.head.prefixed("head."));
        if let Some(a) = &self.sa {
            put(&mut s, a.teacher.prefixed("teacher."));
            if let Some(p) = &a.proj {
                s.push("proj", p.clone()).expect("unique");
            }
        }
        for (i, (m, v)) in self.opt.m.iter().zip(&self.opt.v).enumerate() {
            s.push(format!("opt.m.{i}"), m.clone()).expect("unique");
            s.push(format!("opt.v.{i}"), v.clone()).expect("unique");
        }
        s.push("opt.t", Tensor::scalar(self.opt.t as f64)).expect("unique");
        s
    }

    pub fn from_store(cfg: &TrainConfig, store: &ParamStore) -> Result<Self> {
        let mut st = RunState::init(cfg)?;
        let take = |prefix: &str, like: &ParamStore| -> Result<ParamStore> {
            let p = store.strip_prefix(prefix);
            like.check_layout(&p, &format!("checkpoint section {prefix}"))?;
            Ok(p)
        };
        st.host.student = take("student.", &st.host.student)?;
        st.host.target = take("target.", &st.host.target)?;
        st.host.head = take("head.", &st.host.head)?;
        if let Some(a) = st.sa.as_mut() {
            a.teacher = take("teacher.", &a.teacher)?;
            if let Some(p) = a.proj.as_mut() {
                let v = store.get("proj")?;
                if v.shape() != p.shape() {
                    return Err(Error::shape("checkpoint", "projection shape differs"));
                }
                *p = v.clone();
            }
        }
        for i in 0..st.opt.m.len() {
            let m = store.get(&format!("opt.m.{i}"))?;
            let v = store.get(&format!("opt.v.{i}"))?;
            if m.shape() != st.opt.m[i].shape() || v.shape() != st.opt.v[i].shape() {
                return Err(Error::shape("checkpoint", format!("optimizer slot {i} shape differs")));
            }
            st.opt.m[i] = m.clone();
            st.opt.v[i] = v.clone();
        }
        if store.get(&format!("opt.m.{}", st.opt.m.len())).is_ok() {
            return Err(Error::shape("checkpoint", "more optimizer slots than trainable parameters"));
        }
        st.opt.t = store.get("opt.t")?.item() as u64;
        Ok(st)
    }
}

pub struct PretrainResult {
    pub state: RunState,
    pub metrics: Vec<MetricsRow>,
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Random MR-sized HR crop of every scene in `batch`.
fn hr_crops(data: &TrainData, batch: &[usize], seed: u64, step: u64) -> Result<Vec<Tensor>> {
    let mut rng = stream(seed, streams::CROP, step);
    let (h, w) = data.mr_pixels;
    batch
        .iter()
        .map(|&i| {
            let r = &data.hr_rasters[i];
            let y0 = rng.random_range(0..=r.height - h);
            let x0 = rng.random_range(0..=r.width - w);
            patchify(&r.crop(y0, x0, h, w)?, data.patch)
        })
        .collect()
}

/// Runs the training loop from `state` (fresh or resumed) to the configured
/// number of epochs. `on_epoch` sees the state after every completed epoch.
/// On a non-finite loss the state is written to `dump_dir/nan_dump.xssl`
/// when a directory is given.
pub fn pretrain(
    cfg: &TrainConfig,
    data: &TrainData,
    mut state: RunState,
    dump_dir: Option<&Path>,
    mut on_epoch: impl FnMut(usize, &RunState) -> Result<()>,
) -> Result<PretrainResult> {
    let hcfg = cfg.host_config();
    let grid = PatchGrid::new(data.grid.0 * data.patch, data.grid.1 * data.patch, data.patch)?;
    let n = data.len();
    let spe = steps_per_epoch(n, cfg.optim.batch);
    let total = (spe * cfg.optim.epochs) as u64;
    let warmup = (cfg.optim.warmup_frac * total as f64).round() as u64;
    let mut metrics = Vec::new();
    let mut step = state.step();
    if step > total {
        return Err(Error::invalid(format!("checkpoint is at step {step}, run has only {total}")));
    }
    while step < total {
        let epoch = (step / spe as u64) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, streams::SHUFFLE, epoch as u64));
        let within = (step % spe as u64) as usize;
        for chunk in order.chunks(cfg.optim.batch).skip(within) {
            let t0 = cfg.log_wall_ms.then(Instant::now);
            let mut mrng = stream(cfg.seed, streams::HOST_MASK, step);
            let samples: Vec<HostSample> = chunk
                .iter()
                .map(|_| sample_host_mask(&hcfg, &grid, &mut mrng))
                .collect::<Result<_>>()?;
            let sa_cells = match (&state.sa, cfg.sa.sampling, cfg.sa_independent) {
                (Some(_), SaSampling::SaBlock, _) => {
                    let mut r = stream(cfg.seed, streams::SA_MASK, step);
                    Some(
                        chunk
                            .iter()
                            .map(|_| sample_sa_block(&grid, cfg.sa.block_scale, &mut r).map(|m| m.visible))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                (Some(_), SaSampling::HostDefault, true) => {
                    let mut r = stream(cfg.seed, streams::SA_MASK, step);
                    Some(
                        chunk
                            .iter()
                            .map(|_| sample_host_mask(&hcfg, &grid, &mut r).map(|m| m.mask.visible))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => None,
            };
            let crops;
            let patches: Vec<&Tensor> = if data.inputs.is_empty() {
                crops = hr_crops(data, chunk, cfg.seed, step)?;
                crops.iter().collect()
            } else {
                chunk.iter().map(|&i| &data.inputs[i]).collect()
            };
            let hr_patches: Vec<&Tensor> = if state.sa.is_some() {
                chunk.iter().map(|&i| &data.sa_hr[i]).collect()
            } else {
                Vec::new()
            };
            let inputs = StepInputs {
                patches,
                samples,
                hr_patches,
                sa_cells,
            };
            let lr = cosine_lr(step, total, cfg.optim.lr, warmup)?;
            let losses = match train_step(&hcfg, &mut state.host, state.sa.as_mut(), &mut state.opt, lr, &inputs, data.grid) {
                Ok(l) => l,
                Err(Error::Numerical(msg)) => {
                    let msg = match dump_dir {
                        Some(dir) => {
                            let p = dir.join("nan_dump.xssl");
                            write_checkpoint(&p, &cfg.digest(), &state.to_store())?;
                            format!("{msg} at step {step}; state dumped to {}", p.display())
                        }
                        None => format!("{msg} at step {step}"),
                    };
                    return Err(Error::Numerical(msg));
                }
                Err(e) => return Err(e),
            };
            metrics.push(MetricsRow {
                step,
                lr,
                host_loss: losses.host,
                gram_loss: losses.gram,
                composite_loss: losses.composite,
                wall_ms: t0.map_or(0, |t| t.elapsed().as_millis() as u64),
            });
            step += 1;
        }
        on_epoch(epoch + 1, &state)?;
    }
    Ok(PretrainResult { state, metrics })
}

/// Gradient-free encodings of full MR grids, stacked in scene order.
pub fn encode_scenes(student: &ParamStore, enc: &EncoderConfig, patches: &[Tensor], grid: (usize, usize)) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let n = grid.0 * grid.1;
    let table = sincos_2d(grid.0, grid.1, enc.d)?;
    let mut parts = Vec::new();
    for chunk in patches.chunks(CHUNK) {
        let rows = Tensor::vstack(&chunk.iter().collect::<Vec<_>>())?;
        let pos = Tensor::vstack(&vec![&table; chunk.len()])?;
        let mut t = crate::tensor::Tape::new();
        let b = student.bind(&mut t, false);
        let x = t.constant(rows);
        let z = encode(&mut t, &b, enc, x, &pos, &vec![n; chunk.len()])?;
        parts.push(t.value(z).clone());
    }
    Tensor::vstack(&parts.iter().collect::<Vec<_>>())
}

fn mr_patches(scenes: &[SceneRecord], patch: usize) -> Result<Vec<Tensor>> {
    scenes.iter().map(|s| patchify(&s.mr, patch)).collect()
}

fn labels_of(scenes: &[SceneRecord]) -> Vec<usize> {
    scenes.iter().flat_map(|s| s.labels.iter().map(|&l| l as usize)).collect()
}

/// Linear probe on frozen MR representations: fit on `train`, report mIoU
/// on `test`.
pub fn probe_eval(
    cfg: &TrainConfig,
    student: &ParamStore,
    train: &Dataset,
    test: &Dataset,
    probe_seed: u64,
) -> Result<MiouReport> {
    let k = train.meta.classes as usize;
    if test.meta.classes as usize != k {
        return Err(Error::invalid(format!(
            "probe splits disagree on class count ({k} vs {})",
            test.meta.classes
        )));
    }
    let grid = ((train.meta.mr_h / train.meta.patch) as usize, (train.meta.mr_w / train.meta.patch) as usize);
    let xtr = encode_scenes(student, &cfg.encoder, &mr_patches(&train.scenes, cfg.patch)?, grid)?;
    let xte = encode_scenes(student, &cfg.encoder, &mr_patches(&test.scenes, cfg.patch)?, grid)?;
    let mut rng = stream(probe_seed, streams::PROBE, 0);
    let head = train_probe(&xtr, &labels_of(&train.scenes), k, &cfg.probe, &mut rng)?;
    compute_miou(&head.predict(&xte)?, &labels_of(&test.scenes), k)
}

/// One pretraining run followed by its probe.
pub struct CellResult {
    pub metrics: Vec<MetricsRow>,
    pub miou: MiouReport,
    pub student_checksum: String,
}

pub fn run_cell(cfg: &TrainConfig, train: &Dataset, probe_train: &Dataset, probe_test: &Dataset) -> Result<CellResult> {
    let data = prepare_train(cfg, train)?;
    let res = pretrain(cfg, &data, RunState::init(cfg)?, None, |_, _| Ok(()))?;
    let miou = probe_eval(cfg, &res.state.host.student, probe_train, probe_test, cfg.seed)?;
    Ok(CellResult {
        metrics: res.metrics,
        miou,
        student_checksum: res.state.host.student.checksum(),
    })
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn prepare_out(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !force {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(Error::invalid(format!(
                "{} already exists; pass --force to overwrite",
                f.display()
            )));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Split sizes of a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub probe_train: usize,
    pub probe_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 512,
            probe_train: 128,
            probe_test: 128,
        }
    }
}

/// Scene seed `i` of split `split`; splits never share seeds.
pub fn scene_seed(seed: u64, split: u64, i: usize) -> u64 {
    (seed << 32) | (split << 24) | i as u64
}

pub fn generate_split(cfg: &SynthConfig, seed: u64, split: u64, count: usize) -> Result<Vec<PairedScene>> {
    if count >= 1 << 24 {
        return Err(Error::invalid("at most 2^24 scenes per split"));
    }
    (0..count).map(|i| generate_scene(scene_seed(seed, split, i), cfg)).collect()
}

/// In-memory copy of what `read_dataset_with` returns for generated scenes.
pub fn as_dataset(cfg: &SynthConfig, scenes: &[PairedScene]) -> Dataset {
    Dataset {
        meta: DatasetMeta::from_config(cfg, scenes.len()),
        scenes: scenes
            .iter()
            .map(|s| {
                let q = s.quantized();
                SceneRecord {
                    seed: q.seed,
                    hr: Some(q.hr),
                    mr: q.mr,
                    labels: q.labels,
                }
            })
            .collect(),
        hr_payload_reads: 0,
    }
}

pub fn synth_manifest(cfg: &SynthConfig, seed: u64, sizes: SplitSizes) -> String {
    let s = &cfg.sensor;
    format!(
        "seed={seed}\nclasses={}\nmr_h={}\nmr_w={}\npatch={}\ns={}\ntexture_amp={:?}\nfield_radius={}\n\
         signature_spread={:?}\nblur_sigma={:?}\ngain_jitter={:?}\noffset_jitter={:?}\nnoise_sigma={:?}\n\
         train={}\nprobe_train={}\nprobe_test={}\n",
        cfg.classes,
        cfg.mr_h,
        cfg.mr_w,
        cfg.patch,
        s.s,
        cfg.texture_amp,
        cfg.field_radius,
        cfg.signature_spread,
        s.blur_sigma,
        s.gain_jitter,
        s.offset_jitter,
        s.noise_sigma,
        sizes.train,
        sizes.probe_train,
        sizes.probe_test
    )
}

pub fn cmd_gen_data(out: &Path, cfg: &SynthConfig, seed: u64, sizes: SplitSizes, force: bool) -> Result<()> {
    cfg.validate()?;
    if sizes.train == 0 || sizes.probe_train == 0 || sizes.probe_test == 0 {
        return Err(Error::invalid("every split needs at least one scene"));
    }
    prepare_out(out, &[TRAIN_FILE, PROBE_TRAIN_FILE, PROBE_TEST_FILE, "data_manifest.txt"], force)?;
    let mut manifest = synth_manifest(cfg, seed, sizes);
    for (split, (file, count)) in [
        (TRAIN_FILE, sizes.train),
        (PROBE_TRAIN_FILE, sizes.probe_train),
        (PROBE_TEST_FILE, sizes.probe_test),
    ]
    .into_iter()
    .enumerate()
    {
        let scenes = generate_split(cfg, seed, split as u64, count)?;
        let path = out.join(file);
        write_dataset(&path, &DatasetMeta::from_config(cfg, count), &scenes)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("hash.{file}={}\n", content_hash(&bytes)));
    }
    write_text(&out.join("data_manifest.txt"), &manifest)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub struct PretrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub hr_payload_reads: u64,
}

/// Trains one configuration on `<data>/train.xsds`, writing `final.xssl`,
/// `metrics.csv`, `config.txt` and `manifest.txt` into `out`. With
/// `resume`, continues from that checkpoint and appends to the metrics of
/// the run it came from.
pub fn cmd_pretrain(cfg: &TrainConfig, data_dir: &Path, out: &Path, force: bool, resume: Option<&Path>) -> Result<PretrainOutputs> {
    cfg.validate()?;
    prepare_out(out, &["final.xssl", "metrics.csv", "manifest.txt"], force || resume.is_some())?;
    let start = now_secs();
    let train_path = data_dir.join(TRAIN_FILE);
    let ds = read_dataset_with(&train_path, cfg.variant.reads_hr())?;
    let data = prepare_train(cfg, &ds)?;
    let digest = cfg.digest();
    let (state, mut prior) = match resume {
        Some(p) => {
            let (d, store) = read_checkpoint(p)?;
            if d != digest {
                return Err(Error::Config(format!(
                    "checkpoint {} was written under a different config",
                    p.display()
                )));
            }
            let st = RunState::from_store(cfg, &store)?;
            let prior = match fs::read_to_string(out.join("metrics.csv")) {
                Ok(text) => text
                    .lines()
                    .skip(1)
                    .filter(|l| !l.trim().is_empty())
                    .map(MetricsRow::parse)
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .filter(|r| r.step < st.step())
                    .collect(),
                Err(_) => Vec::new(),
            };
            (st, prior)
        }
        None => (RunState::init(cfg)?, Vec::new()),
    };
    let every = cfg.checkpoint_every;
    let res = pretrain(cfg, &data, state, Some(out), |epoch, st| {
        if every > 0 && epoch % every == 0 {
            write_checkpoint(&out.join(format!("epoch_{epoch:04}.xssl")), &digest, &st.to_store())?;
        }
        Ok(())
    })?;
    prior.extend(res.metrics);
    let ckpt = out.join("final.xssl");
    write_checkpoint(&ckpt, &digest, &res.state.to_store())?;
    let metrics = out.join("metrics.csv");
    write_text(&metrics, &metrics_csv(&prior))?;
    write_text(&out.join("config.txt"), &cfg.canonical_text())?;
    let train_bytes = fs::read(&train_path).map_err(|e| Error::io(&train_path, e))?;
    let manifest = format!(
        "config_digest={}\ndataset_hash={}\nstart_unix={start}\nend_unix={}\ncheckpoint={}\nmetrics={}\nhr_payload_reads={}\n",
        cfg.digest_hex(),
        content_hash(&train_bytes),
        now_secs(),
        ckpt.display(),
        metrics.display(),
        ds.hr_payload_reads
    );
    write_text(&out.join("manifest.txt"), &manifest)?;
    Ok(PretrainOutputs {
        checkpoint: ckpt,
        metrics,
        hr_payload_reads: ds.hr_payload_reads,
    })
}

/// Checks that a manifest's recorded digest matches `cfg`.
pub fn verify_manifest(manifest: &str, cfg: &TrainConfig) -> Result<()> {
    let rec = manifest
        .lines()
        .find_map(|l| l.strip_prefix("config_digest="))
        .ok_or_else(|| Error::Config("manifest has no config_digest".into()))?;
    if rec != cfg.digest_hex() {
        return Err(Error::Config(format!(
            "config drift: manifest digest {rec}, current {}",
            cfg.digest_hex()
        )));
    }
    Ok(())
}

fn load_student(cfg: &TrainConfig, ckpt: &Path) -> Result<ParamStore> {
    let (_, store) = read_checkpoint(ckpt)?;
    let student = store.strip_prefix("student.");
    let fresh = RunState::init(cfg)?;
    fresh.host.student.check_layout(&student, "checkpoint student encoder")?;
    Ok(student)
}

pub const RESULTS_HEADER: &str = "run_seed,model_variant,dataset_split,miou,per_class_ious";

pub struct ProbeOutputs {
    pub csv: String,
    pub checksum_before: String,
    pub checksum_after: String,
    pub reports: Vec<MiouReport>,
}

/// Probes the checkpoint's student once per seed and appends a mean row.
pub fn cmd_probe(cfg: &TrainConfig, ckpt: &Path, data_dir: &Path, seeds: &[u64], out: &Path) -> Result<ProbeOutputs> {
    let student = load_student(cfg, ckpt)?;
    let before = student.checksum();
    let train = read_dataset_with(&data_dir.join(PROBE_TRAIN_FILE), false)?;
    let test = read_dataset_with(&data_dir.join(PROBE_TEST_FILE), false)?;
    let mut csv = format!("{RESULTS_HEADER}\n");
    let mut reports = Vec::new();
    for &seed in seeds {
        let r = probe_eval(cfg, &student, &train, &test, seed)?;
        csv.push_str(&format!("{seed},{},probe_test,{:.6},{}\n", cfg.variant, r.miou, r.per_class_field()));
        reports.push(r);
    }
    if !reports.is_empty() {
        let mean = reports.iter().map(|r| r.miou).sum::<f64>() / reports.len() as f64;
        csv.push_str(&format!("mean,{},probe_test,{mean:.6},\n", cfg.variant));
    }
    let after = student.checksum();
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_text(out, &csv)?;
    Ok(ProbeOutputs {
        csv,
        checksum_before: before,
        checksum_after: after,
        reports,
    })
}

/// Clusters the student representations of one probe-test scene into `k`
/// groups and writes the P5 map.
pub fn cmd_cluster(cfg: &TrainConfig, ckpt: &Path, data_dir: &Path, scene: usize, k: usize, out: &Path) -> Result<Vec<usize>> {
    let student = load_student(cfg, ckpt)?;
    let ds = read_dataset_with(&data_dir.join(PROBE_TEST_FILE), false)?;
    let rec = ds
        .scenes
        .get(scene)
        .ok_or_else(|| Error::invalid(format!("scene {scene} outside {} scenes", ds.scenes.len())))?;
    let grid = ((ds.meta.mr_h / ds.meta.patch) as usize, (ds.meta.mr_w / ds.meta.patch) as usize);
    let z = encode_scenes(&student, &cfg.encoder, &[patchify(&rec.mr, cfg.patch)?], grid)?;
    let labels = hierarchical_cluster(&z, k)?;
    export_cluster_map(&labels, grid.0, grid.1, k, out)?;
    Ok(labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Table {
    Table1,
    Table2,
    Table3,
    Table4,
}

impl std::str::FromStr for Table {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Table::Table1),
            "table2" => Ok(Table::Table2),
            "table3" => Ok(Table::Table3),
            "table4" => Ok(Table::Table4),
            _ => Err(Error::Config(format!("unknown experiment {s:?}"))),
        }
    }
}

/// One configuration of an experiment grid, before seeding.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCell {
    pub label: String,
    pub config: TrainConfig,
}

/// The variant grid of an experiment, built on top of `base`.
pub fn matrix_cells(table: Table, base: &TrainConfig) -> Result<Vec<MatrixCell>> {
    use crate::hosts::Host;
    let with = |host: Host, f: &dyn Fn(&mut TrainConfig) -> Result<()>| -> Result<TrainConfig> {
        let mut pairs: Vec<(String, String)> = base.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        pairs.retain(|(k, _)| k != "run.host" && k != "optim.lr" && k != "optim.weight_decay");
        pairs.insert(0, ("run.host".into(), host.to_string()));
        let mut c = TrainConfig::from_pairs(&pairs)?;
        f(&mut c)?;
        c.validate()?;
        Ok(c)
    };
    let mut cells = Vec::new();
    let mut push = |label: String, c: TrainConfig| cells.push(MatrixCell { label, config: c });
    match table {
        Table::Table1 => {
            for host in [Host::Ijepa, Host::LatentMim] {
                for v in [Variant::MrOnly, Variant::HrOnly, Variant::Sa] {
                    push(format!("{host}/{v}"), with(host, &|c| {
                        c.variant = v;
                        Ok(())
                    })?);
                }
            }
        }
        Table::Table2 => {
            for host in [Host::Ijepa, Host::LatentMim] {
                for v in [Variant::Sa, Variant::SaFalseHr] {
                    push(format!("{host}/{v}"), with(host, &|c| {
                        c.variant = v;
                        Ok(())
                    })?);
                }
            }
        }
        Table::Table3 => {
            for m in [Downsample::Bilinear, Downsample::Bicubic, Downsample::LinearProjection] {
                push(format!("ijepa/sa/{m}"), with(Host::Ijepa, &|c| {
                    c.variant = Variant::Sa;
                    c.sa = SaConfig { downsample: m, ..c.sa };
                    Ok(())
                })?);
            }
        }
        Table::Table4 => {
            for (name, sampling) in [("random", SaSampling::HostDefault), ("sa_block", SaSampling::SaBlock)] {
                push(format!("latentmim/sa/{name}"), with(Host::LatentMim, &|c| {
                    c.variant = Variant::Sa;
                    c.sa = SaConfig { sampling, ..c.sa };
                    Ok(())
                })?);
            }
        }
    }
    Ok(cells)
}

/// Worker count from `XSSL_THREADS`, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var("XSSL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on up to `workers` threads; results keep job order.
pub fn run_parallel<T: Send>(jobs: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, jobs.max(1));
    if workers == 1 {
        return (0..jobs).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub cell: String,
    pub seed: u64,
    pub miou: f64,
}

pub struct MatrixOutput {
    pub rows: Vec<MatrixRow>,
    pub csv: String,
}

/// Every cell of `table` for every seed, then one mean row per cell.
pub fn run_matrix(
    table: Table,
    base: &TrainConfig,
    seeds: &[u64],
    train: &Dataset,
    probe_train: &Dataset,
    probe_test: &Dataset,
    workers: usize,
) -> Result<MatrixOutput> {
    let cells = matrix_cells(table, base)?;
    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = run_parallel(jobs.len(), workers, |j| {
        let (ci, seed) = jobs[j];
        let mut c = cells[ci].config.clone();
        c.seed = seed;
        run_cell(&c, train, probe_train, probe_test).map(|r| r.miou.miou)
    });
    let mut rows = Vec::new();
    let mut csv = String::from("cell,seed,miou\n");
    for (&(ci, seed), r) in jobs.iter().zip(results) {
        let miou = r?;
        csv.push_str(&format!("{},{seed},{miou:.6}\n", cells[ci].label));
        rows.push(MatrixRow {
            cell: cells[ci].label.clone(),
            seed,
            miou,
        });
    }
    for cell in &cells {
        let v: Vec<f64> = rows.iter().filter(|r| r.cell == cell.label).map(|r| r.miou).collect();
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        csv.push_str(&format!("{},mean,{mean:.6}\n{},min,{lo:.6}\n{},max,{hi:.6}\n", cell.label, cell.label, cell.label));
    }
    Ok(MatrixOutput { rows, csv })
}
