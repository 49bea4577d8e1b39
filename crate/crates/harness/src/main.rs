use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dmac_core::metrics::RunReport;
use dmac_core::run::{run_scenario, Scenario};
use dmac_harness::{checks, config, experiments, plot};

#[derive(Parser)]
#[command(name = "dmacsim", about = "DMA controller experiments", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Scenario file (TOML); used as the template for sweeps.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV, reports and plots.
    #[arg(long, global = true, default_value = "dmac-out")]
    out: PathBuf,
    /// Workload seed, overriding the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Also print the CSV rows on stdout.
    #[arg(long, global = true)]
    csv: bool,
    /// Write SVG plots next to the CSV.
    #[arg(long, global = true)]
    plots: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// One scenario, from --config or a preset.
    Run {
        #[arg(long, default_value = "base")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        latency: u64,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Utilization over sizes, latencies and configurations.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = experiments::PRESETS.map(String::from))]
        configs: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',', default_values_t = experiments::LATENCIES)]
        latencies: Vec<u64>,
    },
    /// Utilization as the speculation hit rate falls.
    MissSweep {
        #[arg(long, default_value = "speculation")]
        preset: String,
        #[arg(long, default_value_t = 13)]
        latency: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [64u32, 128, 256, 512])]
        sizes: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.75, 0.5, 0.25, 0.0])]
        hit_rates: Vec<f64>,
    },
    /// Latency probes for the main controller and the baseline.
    Latency {
        #[arg(long, value_delimiter = ',', default_values_t = ["scaled".to_string(), "baseline".to_string()])]
        configs: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = experiments::LATENCIES)]
        latencies: Vec<u64>,
    },
    /// Area estimate over a grid of descriptors in flight and prefetch slots.
    Area {
        #[arg(long, value_delimiter = ',', default_values_t = [1u32, 2, 4, 8, 16, 24, 32])]
        d: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u32, 2, 4, 8, 16, 24, 32])]
        s: Vec<u32>,
    },
    /// Run the acceptance checks.
    Selftest {
        /// Run a single criterion.
        #[arg(long)]
        only: Option<u8>,
    },
}

fn template(g: &Global, fallback: impl FnOnce() -> Result<Scenario>) -> Result<Scenario> {
    let mut sc = match &g.config {
        Some(p) => config::load(p)?,
        None => fallback()?,
    };
    if let Some(seed) = g.seed {
        sc.seed = seed;
    }
    Ok(sc)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn emit_rows(g: &Global, stem: &str, rows: &[RunReport]) -> Result<()> {
    let csv = experiments::csv_string(rows)?;
    let path = write(&g.out, &format!("{stem}.csv"), &csv)?;
    if g.csv {
        print!("{csv}");
    } else {
        print!("{}", experiments::summary_table(rows));
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::Run {
            preset,
            latency,
            size,
        } => {
            let sc = template(g, || Ok(config::preset(&preset, latency, size)?))?;
            let out = run_scenario(&sc)?;
            write(&g.out, "run.txt", &out.report.to_kv())?;
            emit_rows(g, "run", std::slice::from_ref(&out.report))?;
        }
        Cmd::Sweep {
            configs,
            sizes,
            latencies,
        } => {
            let t = template(g, || Ok(config::preset("base", 1, 64)?))?;
            let spec = experiments::SweepSpec {
                configs,
                sizes: sizes.unwrap_or_else(experiments::default_sizes),
                latencies: latencies.clone(),
                hit_rates: vec![1.0],
            };
            let rows = experiments::sweep(&t, &spec, g.jobs)?;
            emit_rows(g, "sweep", &rows)?;
            if g.plots {
                for l in latencies {
                    let svg = plot::utilization_chart(&rows, l).to_svg();
                    eprintln!(
                        "wrote {}",
                        write(&g.out, &format!("sweep_L{l}.svg"), &svg)?.display()
                    );
                }
            }
        }
        Cmd::MissSweep {
            preset,
            latency,
            sizes,
            hit_rates,
        } => {
            let t = template(g, || Ok(config::preset(&preset, latency, 64)?))?;
            let name = if g.config.is_some() {
                t.name.clone()
            } else {
                preset
            };
            let rows = experiments::miss_sweep(&t, &name, latency, &sizes, &hit_rates, g.jobs)?;
            emit_rows(g, "miss_sweep", &rows)?;
            for (n, hi, lo) in experiments::monotonicity_violations(&rows) {
                eprintln!("warning: n={n} utilization rises from hit rate {hi} to {lo}");
            }
            if g.plots {
                let svg = plot::miss_chart(&rows).to_svg();
                eprintln!("wrote {}", write(&g.out, "miss_sweep.svg", &svg)?.display());
            }
        }
        Cmd::Latency { configs, latencies } => {
            let rows = configs
                .iter()
                .map(|c| experiments::latency_row(c, &latencies))
                .collect::<Result<Vec<_>, _>>()?;
            let table = experiments::latency_table(&rows);
            print!("{table}");
            write(&g.out, "latency.txt", &table)?;
        }
        Cmd::Area { d, s } => {
            let table = experiments::area_table(&experiments::area_grid(&d, &s));
            print!("{table}");
            write(&g.out, "area.txt", &table)?;
        }
        Cmd::Selftest { only } => {
            let results = match only {
                Some(id) => {
                    vec![checks::run_one(id).with_context(|| format!("no criterion {id}"))?]
                }
                None => checks::run_all(),
            };
            for c in &results {
                println!("{}", c.line());
            }
            if let Some(bad) = results.iter().find(|c| !c.passed) {
                eprintln!(
                    "failed: criterion {} ({}): {}",
                    bad.id, bad.name, bad.detail
                );
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn lists_parse() {
        let cli = Cli::try_parse_from([
            "dmacsim",
            "sweep",
            "--sizes",
            "8,64",
            "--latencies",
            "13",
            "--jobs",
            "2",
        ])
        .unwrap();
        match cli.cmd {
            Cmd::Sweep {
                sizes, latencies, ..
            } => {
                assert_eq!(sizes, Some(vec![8, 64]));
                assert_eq!(latencies, vec![13]);
            }
            _ => panic!("wrong subcommand"),
        }
        assert_eq!(cli.global.jobs, 2);
        assert!(Cli::try_parse_from(["dmacsim", "area", "--frobnicate"]).is_err());
    }
}
