use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mkv_bench::config::{default_out_dir, load_config};
use mkv_bench::experiment::{out_dir, run_experiment, write_outputs};
use mkv_bench::oracle::oracle_table;
use mkv_bench::tables::{render, run_table, table_spec, Scale, Verdict, TABLE_IDS};
use mkv_bench::exit;

#[derive(Parser)]
#[command(name = "mkv-bench", version, about = "Solve and benchmark McKean-Vlasov FBSDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config and MKV_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reproduce a comparison table: price-impact, linear or quadratic.
    Table {
        id: String,
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run rows whose label contains this text.
        #[arg(long)]
        method: Option<String>,
        /// Only run this maturity.
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Print reference values: price-impact or lognormal.
    Oracle {
        model: String,
        #[arg(required = true)]
        times: Vec<f64>,
    },
}

fn fail(code: i32, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(exit::CONFIG, e),
            };
            let dir = out.unwrap_or_else(|| out_dir(&cfg));
            let report = match run_experiment(&cfg) {
                Ok(r) => r,
                Err(e) => return fail(exit::CONFIG, e),
            };
            match write_outputs(&report, &dir) {
                Ok(files) => {
                    for f in files {
                        println!("wrote {}", f.display());
                    }
                }
                Err(e) => return fail(exit::CONFIG, format!("{}: {e}", dir.display())),
            }
            for (i, run) in report.runs.iter().enumerate() {
                match (&run.failure, &run.terminal_mean) {
                    (Some(f), _) => println!("run {i}: diverged ({f})"),
                    (None, Some(m)) => println!(
                        "run {i}: {:?}, E[X_T] = {:.4} (sd {:.1e}), {:.1}s",
                        run.status, m.mean, m.sd, run.elapsed_seconds
                    ),
                    (None, None) => println!("run {i}: {:?}", run.status),
                }
            }
            if report.any_diverged() {
                return ExitCode::from(exit::DIVERGED as u8);
            }
            ExitCode::SUCCESS
        }
        Command::Table {
            id,
            scale,
            out,
            seed,
            method,
            horizon,
        } => {
            let Some(spec) = table_spec(&id) else {
                return fail(exit::CONFIG, format!("unknown table `{id}`; expected one of {}", TABLE_IDS.join(", ")));
            };
            let Some(scale) = Scale::by_name(&scale) else {
                return fail(exit::CONFIG, format!("unknown scale `{scale}`; expected desk or full"));
            };
            let dir = out.unwrap_or_else(|| default_out_dir().join(format!("table-{id}")));
            let keep = |m: &mkv_bench::tables::Method, t: f64| {
                method.as_ref().is_none_or(|s| m.label.contains(s.as_str()))
                    && horizon.is_none_or(|h| (h - t).abs() < 1e-9)
            };
            let cells = match run_table(&spec, &scale, seed, Some(&keep), Some(&dir)) {
                Ok(c) => c,
                Err(e) => return fail(exit::CONFIG, e),
            };
            let text = render(&spec, &scale, &cells);
            print!("{text}");
            if let Err(e) = std::fs::write(dir.join("table.csv"), &text) {
                return fail(exit::CONFIG, format!("{}: {e}", dir.display()));
            }
            if cells.iter().any(|c| c.verdict == Verdict::Fail) {
                return ExitCode::from(exit::TOLERANCE as u8);
            }
            ExitCode::SUCCESS
        }
        Command::Oracle { model, times } => match oracle_table(&model, &times) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(exit::CONFIG, e),
        },
    }
}
