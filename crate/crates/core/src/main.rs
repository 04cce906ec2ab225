use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use bavardage::featurestore::{self, Dtype, SplitTag};
use bavardage::harness::{self, HarnessError, Method, RunConfig, SweepAxis, SynthConfig};
use bavardage::sampler::Setting;

#[derive(Parser)]
#[command(name = "bavardage", version, about = "Transductive few-shot classification benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a method over many sampled tasks.
    Run(RunArgs),
    /// Evaluate once per value of one hyper-parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// CSV table destination (defaults to stdout).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Write a synthetic base/novel bundle pair.
    Synth(SynthArgs),
    /// Load and check a feature bundle.
    Validate {
        bundle: Vec<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    novel: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    setting: Option<Setting>,
    #[arg(long)]
    alpha_star: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bavardage")]
    method: Method,
    #[arg(long)]
    t_km: Option<f64>,
    #[arg(long)]
    t_vb: Option<f64>,
    #[arg(long)]
    s_max: Option<f64>,
    #[arg(long)]
    alpha_o: Option<f64>,
    #[arg(long)]
    beta_o: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_step: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Disable centering and L2 normalization of features.
    #[arg(long)]
    raw_features: bool,
    /// Store per-task accuracies in the result.
    #[arg(long)]
    per_task: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    cluster_std: f64,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.0)]
    within_cov_skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving base.json/base.bin and novel.json/novel.bin.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "f64")]
    dtype: String,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let preset = self.preset.as_deref().map(harness::preset).transpose()?;
        let setting = self
            .setting
            .or(preset.as_ref().map(|p| p.setting))
            .unwrap_or(Setting::Balanced);
        let mut cfg = RunConfig::new(&self.base, &self.novel, setting);
        if let Some(p) = &preset {
            if p.setting == setting {
                p.apply(&mut cfg);
            } else {
                log::warn!("--setting overrides the setting of preset {}", p.name);
            }
        }
        let t = &mut cfg.task;
        t.ways = self.ways.unwrap_or(t.ways);
        t.shots = self.shots.unwrap_or(t.shots);
        t.query_total = self.queries.unwrap_or(t.query_total);
        t.alpha_star = self.alpha_star.unwrap_or(t.alpha_star);
        t.seed = self.seed;
        let m = &mut cfg.model;
        m.t_km = self.t_km.unwrap_or(m.t_km);
        m.t_vb = self.t_vb.unwrap_or(m.t_vb);
        m.s_max = self.s_max.unwrap_or(m.s_max);
        m.alpha_o = self.alpha_o.unwrap_or(m.alpha_o);
        m.beta_o = self.beta_o.unwrap_or(m.beta_o);
        m.gamma = self.gamma.unwrap_or(m.gamma);
        m.n_step = self.n_step.unwrap_or(m.n_step);
        if self.raw_features {
            cfg.preproc = bavardage::preproc::PreprocConfig::identity();
        }
        cfg.method = self.method;
        cfg.tasks = self.tasks;
        cfg.workers = self.workers;
        cfg.output = self.output.clone();
        cfg.per_task = self.per_task;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(args) => {
            let result = harness::evaluate(&args.resolve()?)?;
            println!("{}", result.to_json());
        }
        Command::Sweep { run, axis, values, table } => {
            let cfg = run.resolve()?;
            let axis: SweepAxis = axis.parse()?;
            let results = harness::sweep(&cfg, axis.name(), &values)?;
            if let Some(out) = &cfg.output {
                let text = serde_json::to_string_pretty(&results).expect("results serialize");
                std::fs::write(out, text).map_err(|e| HarnessError::Output {
                    path: out.clone(),
                    message: e.to_string(),
                })?;
            }
            match table {
                Some(path) => harness::write_sweep_table(&path, axis, &values, &results)?,
                None => print!("{}", harness::sweep_table(axis, &values, &results)),
            }
        }
        Command::Synth(a) => {
            let dtype = match a.dtype.as_str() {
                "f32" => Dtype::F32,
                "f64" => Dtype::F64,
                other => return Err(HarnessError::InvalidConfig(format!("unknown dtype {other:?}"))),
            };
            let cfg = SynthConfig {
                classes: a.classes,
                dim: a.dim,
                samples_per_class: a.samples_per_class,
                cluster_std: a.cluster_std,
                separation: a.separation,
                within_cov_skew: a.within_cov_skew,
                seed: a.seed,
            };
            let (base, novel) = harness::synth_generate(&cfg)?;
            std::fs::create_dir_all(&a.out_dir).map_err(|e| HarnessError::Output {
                path: a.out_dir.clone(),
                message: e.to_string(),
            })?;
            let base_path = a.out_dir.join("base.json");
            let novel_path = a.out_dir.join("novel.json");
            featurestore::save_bundle(&base, &base_path, dtype)?;
            featurestore::save_bundle(&novel, &novel_path, dtype)?;
            println!(
                "{}",
                json!({ "base": base_path, "novel": novel_path, "config": cfg })
            );
        }
        Command::Validate { bundle } => {
            if bundle.is_empty() {
                return Err(HarnessError::InvalidConfig("no bundle given".into()));
            }
            for path in bundle {
                let b = featurestore::load_bundle(&path)?;
                let smallest = b.class_index().iter().map(Vec::len).min().unwrap_or(0);
                println!(
                    "{}",
                    json!({
                        "path": path,
                        "ok": true,
                        "n": b.n(),
                        "d": b.dim(),
                        "classes": b.num_classes(),
                        "smallest_class": smallest,
                        "split": b.split().to_string(),
                    })
                );
                if b.split() == SplitTag::Base && b.num_classes() < 2 {
                    log::warn!("{}: base bundle has fewer than two classes", path.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
