use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drsl_core::harness::config::ExperimentConfig;
use drsl_core::harness::plots::{emit_plots, PlotInput, ProjectionDump};
use drsl_core::harness::report::{compare_runs, MetricsReport};
use drsl_core::harness::run::{
    analyze_stage, attack_stage, run_experiment, DISTANCES_FILE, METRICS_FILE, PROJECTION_FILE,
};
use drsl_core::harness::write_atomic;
use drsl_core::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "drsl", version, about = "Train, attack and analyze softmax-regularized classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed, then run the attack sweep and analyses.
    Train(Common),
    /// Re-run the attack sweep on saved checkpoints.
    Attack(Common),
    /// Recompute distances, projection and correlation from saved checkpoints.
    Analyze(Common),
    /// Compare the robust accuracy of two finished runs.
    Compare(Common),
    /// Draw charts for one or more finished runs.
    Plot(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). `compare` takes exactly two, `plot` one or more.
    #[arg(long, required = true, num_args = 1)]
    config: Vec<PathBuf>,
    /// Overrides output.dir (for compare and plot: where results go).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Replaces the configured seed list, e.g. `--seed-override 0,1`.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Use the complete train and test splits instead of the configured subsets.
    #[arg(long)]
    full_data: bool,
}

impl Common {
    fn load(&self, path: &Path, apply_output: bool) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seeds) = &self.seed_override {
            cfg.seeds = seeds.clone();
        }
        if self.full_data {
            cfg.data.full = true;
        }
        if apply_output {
            if let Some(out) = &self.output {
                cfg.output.dir = out.clone();
            }
        }
        Ok(cfg)
    }

    fn single(&self) -> Result<ExperimentConfig> {
        match self.config.as_slice() {
            [path] => self.load(path, true),
            _ => Err(Error::Config("expected exactly one --config".into())),
        }
    }

    fn all(&self) -> Result<Vec<ExperimentConfig>> {
        self.config.iter().map(|p| self.load(p, false)).collect()
    }

    /// Destination of cross-run outputs: `--output`, else the first run's directory.
    fn destination(&self, first: &ExperimentConfig) -> PathBuf {
        self.output.clone().unwrap_or_else(|| first.output.dir.clone())
    }
}

fn read_distances(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut first_seed = None;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let mut fields = line.split(',');
        let (Some(seed), Some(_), Some(d)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Consistency(format!("{}: malformed row {line:?}", path.display())));
        };
        if *first_seed.get_or_insert_with(|| seed.to_string()) != seed {
            break;
        }
        out.push(
            d.parse()
                .map_err(|_| Error::Consistency(format!("{}: bad distance {d:?}", path.display())))?,
        );
    }
    Ok(out)
}

fn train(args: &Common) -> Result<()> {
    let cfg = args.single()?;
    let result = run_experiment(&cfg)?;
    for seed in &result.summary.seeds {
        let last = seed.epochs.last().expect("epoch 0 is always recorded");
        println!(
            "seed {}: test accuracy {:.4}, mean distance {:.4}",
            seed.seed, last.test_accuracy, last.stoch_mean
        );
    }
    for w in &result.summary.warnings {
        log::warn!("{w}");
    }
    println!("wrote {} files to {}", result.files.len(), cfg.output.dir.display());
    Ok(())
}

fn attack(args: &Common) -> Result<()> {
    let cfg = args.single()?;
    let report = attack_stage(&cfg)?;
    for agg in report.aggregates() {
        println!(
            "ε = {}: robust accuracy {:.4} ± {:.4}",
            agg.epoch_or_eps,
            agg.mean[1].unwrap_or(f64::NAN),
            agg.std[1].unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn analyze(args: &Common) -> Result<()> {
    let cfg = args.single()?;
    let summary = analyze_stage(&cfg)?;
    for (seed, s) in &summary.stochasticity {
        println!("seed {seed}: mean distance {:.4} (std {:.4})", s.mean, s.std);
    }
    match summary.accuracy_distance_r {
        Some(r) => println!("accuracy–distance r = {r:.4}"),
        None => println!("accuracy–distance r undefined"),
    }
    Ok(())
}

fn compare(args: &Common) -> Result<()> {
    let cfgs = args.all()?;
    let [a, b] = cfgs.as_slice() else {
        return Err(Error::Config("compare needs exactly two --config".into()));
    };
    let ra = MetricsReport::read(&a.output.dir.join(METRICS_FILE))?;
    let rb = MetricsReport::read(&b.output.dir.join(METRICS_FILE))?;
    let cmp = compare_runs(&ra, &rb)?;
    println!("{} vs {}", cmp.label_a, cmp.label_b);
    for r in &cmp.rows {
        println!(
            "ε = {}: {:.4} vs {:.4} (diff {:+.4}; seeds {}/{}/{})",
            r.epsilon, r.mean_a, r.mean_b, r.difference, r.a_better, r.b_better, r.ties
        );
    }
    if let Some(gap) = cmp.clean_accuracy_gap {
        println!("clean accuracy gap {gap:.4} ({})", if cmp.matched { "matched" } else { "NOT matched" });
    }
    write_atomic(&args.destination(a).join("comparison.csv"), cmp.to_csv()?.as_bytes())
}

fn plot(args: &Common) -> Result<()> {
    let cfgs = args.all()?;
    let first = &cfgs[0];
    let reports = cfgs
        .iter()
        .map(|c| MetricsReport::read(&c.output.dir.join(METRICS_FILE)))
        .collect::<Result<Vec<_>>>()?;
    let distances = read_distances(&first.output.dir.join(DISTANCES_FILE)).ok();
    let projection = std::fs::read_to_string(first.output.dir.join(PROJECTION_FILE))
        .ok()
        .map(|t| ProjectionDump::from_csv(&t))
        .transpose()?;
    let input = PlotInput {
        reports: &reports,
        distances: distances.as_deref(),
        max_distance: first.analysis.metric.max_distance_to_uniform(first.model_config().num_classes),
        projection: projection.as_ref(),
    };
    for path in emit_plots(&input, &args.destination(first))? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Analyze(a) => analyze(a),
        Command::Compare(a) => compare(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            eprintln!("configuration error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
