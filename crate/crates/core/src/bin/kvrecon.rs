use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kvrecon::harness::oracle::{check_equivalence, check_renormalization, greedy_gap_report};
use kvrecon::harness::{
    generate_trace, read_trace, run_grid, write_report_csv, write_report_json, write_trace,
    Distribution, EvalSettings, Overrides, TraceDims,
};
use kvrecon::policies::make_budget_plan;

/// KV-cache eviction experiments on attention traces.
#[derive(Parser, Debug)]
#[command(name = "kvrecon", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic trace.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 256)]
        prompt_len: usize,
        #[arg(long, default_value_t = 32)]
        decode_len: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        d_k: usize,
        #[arg(long, default_value_t = 16)]
        d_v: usize,
        /// gaussian or clustered
        #[arg(long, default_value = "gaussian")]
        dist: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evict with each policy at each budget and report decode error.
    Evaluate {
        #[arg(long)]
        trace: PathBuf,
        /// Comma-separated: rest_kv,snap_attn,streaming,random
        #[arg(long)]
        policies: Option<String>,
        /// Comma-separated per-layer budgets
        #[arg(long)]
        budgets: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        sink: Option<usize>,
        #[arg(long)]
        kernel: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// uniform or pyramid
        #[arg(long)]
        plan: Option<String>,
        /// key=value settings file; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output path; `.json` writes JSON, anything else CSV
        #[arg(long)]
        report: PathBuf,
    },
    /// Check the closed-form indicator against brute-force removal.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        max_n: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a trace's dimensions.
    Inspect {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn load_trace(path: &Path) -> kvrecon::Result<kvrecon::harness::Trace> {
    read_trace(BufReader::new(File::open(path)?))
}

fn run(cli: Cli) -> kvrecon::Result<bool> {
    match cli.command {
        Command::Generate {
            seed,
            layers,
            heads,
            prompt_len,
            decode_len,
            d_model,
            d_k,
            d_v,
            dist,
            out,
        } => {
            let dims = TraceDims {
                layers,
                heads,
                prompt_len,
                decode_len,
                d_model,
                d_k,
                d_v,
            };
            let dist: Distribution = dist.parse()?;
            let synth = generate_trace(seed, dims, dist)?;
            write_trace(&synth.trace, BufWriter::new(File::create(&out)?))?;
            println!("wrote {} ({dist}, seed {seed})", out.display());
            if !synth.planted.is_empty() {
                println!("planted positions: {:?}", synth.planted);
            }
            Ok(true)
        }
        Command::Evaluate {
            trace,
            policies,
            budgets,
            alpha,
            beta,
            window,
            sink,
            kernel,
            seed,
            plan,
            config,
            report,
        } => {
            let file = config.as_deref().map(Overrides::load).transpose()?;
            let cli = Overrides {
                alpha,
                beta,
                window,
                sink,
                kernel,
                seed,
                policies: policies.as_deref().map(kvrecon::harness::config::parse_policies).transpose()?,
                budgets: budgets.as_deref().map(kvrecon::harness::config::parse_budgets).transpose()?,
                plan: plan.as_deref().map(str::parse).transpose()?,
            };
            let settings = EvalSettings::resolve(file.as_ref(), &cli)?;
            let trace = load_trace(&trace)?;
            let cfg = settings.smoothing()?;
            let plans = settings
                .budgets
                .iter()
                .map(|&n| make_budget_plan(settings.plan, trace.dims().layers, n, cfg.window))
                .collect::<kvrecon::Result<Vec<_>>>()?;
            let result = run_grid(&trace, &settings.policy_list(), &plans, &cfg)?;
            let out = BufWriter::new(File::create(&report)?);
            if report.extension().is_some_and(|e| e == "json") {
                write_report_json(&result, out)?;
            } else {
                write_report_csv(&result, out)?;
            }
            println!("{:<10} {:>7} {:>14} {:>14}", "policy", "budget", "mean_err", "max_err");
            for p in &settings.policies {
                for plan in &plans {
                    let rows: Vec<_> = result
                        .rows
                        .iter()
                        .filter(|r| r.policy == *p && plan.per_layer.get(r.layer) == Some(&r.budget))
                        .collect();
                    let mean = rows.iter().map(|r| r.mean_err).sum::<f64>() / rows.len().max(1) as f64;
                    let max = rows.iter().map(|r| r.max_err).fold(0.0, f64::max);
                    println!("{:<10} {:>7} {:>14.6e} {:>14.6e}", p.name(), plan.total() / plan.layers(), mean, max);
                }
            }
            println!("report written to {}", report.display());
            Ok(true)
        }
        Command::OracleCheck {
            trials,
            max_n,
            tol,
            seed,
        } => {
            let eq = check_equivalence(trials, max_n, tol, seed)?;
            println!(
                "equivalence: {} instances, {} comparisons, worst relative gap {:.3e}, {} over tolerance {:e}, {} skipped",
                eq.trials, eq.comparisons, eq.worst, eq.failures, tol, eq.skipped
            );
            let renorm = check_renormalization(trials, seed.wrapping_add(1))?;
            let renorm_ok = renorm <= 1e-12;
            println!("renormalization: worst deviation {renorm:.3e} ({})", if renorm_ok { "ok" } else { "FAIL" });
            let (mean_gap, worst_gap) = greedy_gap_report(50, seed.wrapping_add(2))?;
            println!("greedy/exhaustive error ratio on tiny caches: mean {mean_gap:.4}, worst {worst_gap:.4} (report only)");
            let ok = eq.passed() && renorm_ok;
            println!("{}", if ok { "PASS" } else { "FAIL" });
            Ok(ok)
        }
        Command::Inspect { trace } => {
            let t = load_trace(&trace)?;
            let d = t.dims();
            println!("layers      {}", d.layers);
            println!("heads       {}", d.heads);
            println!("prompt_len  {}", d.prompt_len);
            println!("decode_len  {}", d.decode_len);
            println!("d_model     {}", d.d_model);
            println!("d_k         {}", d.d_k);
            println!("d_v         {}", d.d_v);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
