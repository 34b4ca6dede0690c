use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xssl_core::config::{parse_pairs, split_pair, TrainConfig};
use xssl_core::gradcheck_suite::{gradcheck_suite, op_kind_by_name};
use xssl_core::pipeline::{
    cmd_cluster, cmd_gen_data, cmd_pretrain, cmd_probe, run_matrix, verify_manifest, worker_count, SplitSizes, Table,
    PROBE_TEST_FILE, PROBE_TRAIN_FILE, TRAIN_FILE,
};
use xssl_core::synth::{read_dataset_with, SynthConfig};
use xssl_core::Error;

#[derive(Parser)]
#[command(name = "xssl", version, about = "Cross-scale self-supervised pretraining on synthetic MR/HR scene pairs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides run.seed
    #[arg(long)]
    seed: Option<u64>,
    /// extra key=value overrides, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train, probe-train and probe-test datasets
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// pretraining scenes
        #[arg(long, default_value_t = 512)]
        scenes: usize,
        /// scenes in each probe split
        #[arg(long, default_value_t = 128)]
        probe_scenes: usize,
        /// synth.* / sensor.* overrides
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain one configuration
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Linear-probe a pretrained student encoder
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// results CSV
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// check the config against this run manifest before probing
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Cluster one probe-test scene's patch representations
    Cluster {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// output P5 graymap
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and both composite losses
    Gradcheck {
        /// corrupt one backward rule (suite self-test)
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Run an experiment grid over several seeds
    Matrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// table1 | table2 | table3 | table4
        #[arg(long)]
        table: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// aggregated CSV
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(a: &ConfigArgs) -> Result<TrainConfig, Error> {
    let mut pairs = match &a.config {
        Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?)?,
        None => Vec::new(),
    };
    for s in &a.set {
        pairs.push(split_pair(s)?);
    }
    if let Some(seed) = a.seed {
        pairs.push(("run.seed".into(), seed.to_string()));
    }
    TrainConfig::from_pairs(&pairs)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenData {
            out,
            seed,
            scenes,
            probe_scenes,
            set,
            force,
        } => {
            let mut cfg = SynthConfig::default();
            for s in &set {
                let (k, v) = split_pair(s)?;
                cfg.set(&k, &v)?;
            }
            let sizes = SplitSizes {
                train: scenes,
                probe_train: probe_scenes,
                probe_test: probe_scenes,
            };
            cmd_gen_data(&out, &cfg, seed, sizes, force)?;
            println!("wrote {} in {}", [TRAIN_FILE, PROBE_TRAIN_FILE, PROBE_TEST_FILE].join(", "), out.display());
        }
        Cmd::Pretrain {
            cfg,
            data,
            out,
            resume,
            force,
        } => {
            let cfg = load_config(&cfg)?;
            let o = cmd_pretrain(&cfg, &data, &out, force, resume.as_deref())?;
            println!("checkpoint {}", o.checkpoint.display());
            println!("metrics {}", o.metrics.display());
            println!("hr payload reads {}", o.hr_payload_reads);
        }
        Cmd::Probe {
            cfg,
            checkpoint,
            data,
            out,
            seeds,
            manifest,
        } => {
            let cfg = load_config(&cfg)?;
            if let Some(m) = manifest {
                let text = std::fs::read_to_string(&m).map_err(|e| Error::Io { path: m.clone(), source: e })?;
                verify_manifest(&text, &cfg)?;
            }
            let o = cmd_probe(&cfg, &checkpoint, &data, &seeds, &out)?;
            println!("encoder checksum before {}", o.checksum_before);
            println!("encoder checksum after  {}", o.checksum_after);
            print!("{}", o.csv);
        }
        Cmd::Cluster {
            cfg,
            checkpoint,
            data,
            scene,
            k,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            cmd_cluster(&cfg, &checkpoint, &data, scene, k, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Gradcheck { fault } => {
            let fault = match fault {
                Some(name) => Some(op_kind_by_name(&name).ok_or_else(|| Error::Config(format!("unknown op {name:?}")))?),
                None => None,
            };
            let report = gradcheck_suite(fault)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(Error::Invalid("gradient check failed".into()));
            }
            println!("all gradient checks passed");
        }
        Cmd::Matrix {
            cfg,
            table,
            data,
            seeds,
            out,
        } => {
            let base = load_config(&cfg)?;
            let table: Table = table.parse()?;
            let load = |f: &str, hr: bool| read_dataset_with(&data.join(f), hr);
            let train = load(TRAIN_FILE, true)?;
            let pt = load(PROBE_TRAIN_FILE, false)?;
            let pe = load(PROBE_TEST_FILE, false)?;
            let o = run_matrix(table, &base, &seeds, &train, &pt, &pe, worker_count())?;
            write_out(&out, &o.csv)?;
            print!("{}", o.csv);
        }
    }
    Ok(())
}

fn write_out(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Numerical(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
