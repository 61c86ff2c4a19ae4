use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ttc_core::detectors::{MissMode, MissPolicy};
use ttc_core::engine::EngineConfig;
use ttc_core::harness::{
    self, load_params, report_from_bundle, run_experiment, sweep, trace_buffer, write_bundle, write_json, write_series,
    BufferPhases, ExperimentSpec, TrainSpec, CHECKPOINT_FILE,
};
use ttc_core::scenesim::ScenarioConfig;
use ttc_service::{serve, Hub, ScenarioEntry, DEFAULT_CHECKPOINT};

#[derive(Parser)]
#[command(name = "ttc", version, about = "Test-time correction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the seed list (experiments) or the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Adapter checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Worker threads for episodes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the online adapter and write a checkpoint.
    Train {
        /// Training config (TOML); defaults are used when omitted.
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run an experiment spec.
    Run {
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run an experiment once per value of one parameter.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Buffer size per frame on the three-phase scenario (or a given one).
    TraceBuffer {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Tag the base detector never sees.
        #[arg(long, default_value = "truck")]
        unseen: String,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute tables from a run directory's episode logs.
    Report { dir: PathBuf },
    /// Start the live session server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Experiment specs whose scenario templates are offered to clients.
        #[arg(long, default_value = "experiments")]
        experiments: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn catalogue(dir: &Path) -> Result<Vec<ScenarioEntry>> {
    let mut out = vec![
        ScenarioEntry {
            name: "default".into(),
            config: ScenarioConfig::default(),
            policy: MissPolicy::new(
                MissMode::DistantMiss {
                    range_m: 30.0,
                    miss_rate: 0.8,
                },
                0,
            ),
        },
        ScenarioEntry {
            name: "three_phase".into(),
            config: ScenarioConfig::three_phase(0),
            policy: MissPolicy::new(
                MissMode::UnseenClass {
                    tags: ["truck".to_string()].into(),
                },
                0,
            ),
        },
    ];
    if dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        for p in paths {
            let spec = ExperimentSpec::load(&p).with_context(|| format!("loading {}", p.display()))?;
            let seed = spec.seeds[0];
            out.push(ScenarioEntry {
                name: spec.name.clone(),
                config: ScenarioConfig {
                    name: spec.name.clone(),
                    ..spec.scenario_config(seed, 0)
                },
                policy: spec.policy_for(seed, 0),
            });
        }
    }
    Ok(out)
}

fn load_spec(path: &Path, common: &Common) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = common.seed {
        spec.seeds = vec![s];
    }
    if let Some(c) = &common.checkpoint {
        spec.checkpoint = Some(c.clone());
    }
    Ok(spec)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, steps, common } => {
            let mut spec = match config {
                Some(p) => TrainSpec::from_toml_str(&fs::read_to_string(&p)?)?,
                None => TrainSpec::default(),
            };
            if let Some(s) = common.seed {
                spec.train.seed = s;
            }
            if let Some(s) = steps {
                spec.train.steps = s;
            }
            let every = (spec.train.steps / 20).max(1);
            let (_, out) = harness::train(&spec, &common.out_dir, |p| {
                if p.step % every == 0 {
                    eprintln!("step {:>5}  loss {:.4}  hit {:.3}", p.step, p.total, p.hit_rate);
                }
            })?;
            let h = out.heldout;
            println!(
                "checkpoint {} sha256 {}",
                common.out_dir.join(CHECKPOINT_FILE).display(),
                out.manifest.sha256
            );
            println!(
                "held-out hit {:.3}  any {:.3}  centre err {:.3}  confident {:.3}  background reject {:.3}",
                h.hit_rate, h.any_hit_rate, h.center_error, h.confident_rate, h.background_reject_rate
            );
        }
        Command::Run { spec, common } => {
            let spec = load_spec(&spec, &common)?;
            let run = run_experiment(&spec, None, common.jobs)?;
            let dir = common.out_dir.join(&spec.name);
            write_bundle(&dir, &spec, &run)?;
            print!("{}", run.report.summary_csv()?);
            println!("wrote {} (digest {})", dir.display(), run.report.digest());
        }
        Command::Sweep {
            spec,
            param,
            values,
            common,
        } => {
            let spec = load_spec(&spec, &common)?;
            let params = spec.checkpoint.as_deref().map(load_params).transpose()?;
            let rep = sweep(&spec, params, &param, &values, common.jobs)?;
            let dir = common.out_dir.join(format!("{}_sweep_{}", spec.name, param));
            fs::create_dir_all(&dir)?;
            let table = rep.comparison_csv()?;
            fs::write(dir.join("comparison.csv"), &table)?;
            write_json(&dir.join("sweep.json"), &rep)?;
            if let (Some(arm), Some(subset)) = (spec.arms.last(), spec.subsets.first()) {
                let xs: Vec<f64> = values.iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect();
                let map = rep.map_series(&arm.name, subset);
                write_series(&dir.join("map.dat"), xs.iter().copied().zip(map))?;
                let eds = rep.eds_series(&arm.name, subset);
                write_series(&dir.join("eds.dat"), xs.into_iter().zip(eds))?;
            }
            print!("{table}");
        }
        Command::TraceBuffer { scenario, unseen, common } => {
            let Some(ckpt) = &common.checkpoint else {
                bail!("trace-buffer needs --checkpoint");
            };
            let seed = common.seed.unwrap_or(0);
            let cfg = match scenario {
                Some(p) => ScenarioConfig::from_toml_str(&fs::read_to_string(&p)?)?,
                None => ScenarioConfig::three_phase(seed),
            };
            let policy = MissPolicy::new(
                MissMode::UnseenClass {
                    tags: [unseen].into(),
                },
                seed,
            );
            let engine = EngineConfig {
                seed,
                ..EngineConfig::default()
            };
            let trace = trace_buffer(&cfg, &policy, Some(load_params(ckpt)?), &engine)?;
            let path = common.out_dir.join(format!("{}_buffer.dat", cfg.name));
            write_series(&path, trace.iter().enumerate().map(|(i, &n)| (i as f64, n as f64)))?;
            println!("{trace:?}");
            match BufferPhases::detect(&trace, 5) {
                Some(p) => println!(
                    "rise to {} by frame {}, plateau until frame {}, then drain",
                    p.peak, p.plateau_start, p.plateau_end
                ),
                None => println!("trace does not show rise, plateau, and drain"),
            }
            println!("wrote {}", path.display());
        }
        Command::Serve {
            addr,
            experiments,
            common,
        } => {
            let mut checkpoints = BTreeMap::new();
            if let Some(c) = &common.checkpoint {
                checkpoints.insert(DEFAULT_CHECKPOINT.to_string(), load_params(c)?);
            }
            let hub = Arc::new(Hub::new(catalogue(&experiments)?, checkpoints));
            let names: Vec<&str> = hub.scenarios().iter().map(|s| s.name.as_str()).collect();
            println!("serving on http://{addr} (scenarios: {})", names.join(", "));
            tokio::runtime::Runtime::new()?.block_on(serve(hub, addr))?;
        }
        Command::Report { dir } => {
            let rep = report_from_bundle(&dir)?;
            print!("{}", rep.summary_csv()?);
            println!("digest {}", rep.digest());
        }
    }
    Ok(())
}
