//! `civrepair`: fuzz a compartment interface, classify and analyze the
//! findings, and drive the repair loop. Thin wrapper over the library
//! commands; see `civrepair <subcommand> --help`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use civrepair::backend::NaiveWeights;
use civrepair::commands;
use civrepair::config::{BackendChoice, RunConfig};
use civrepair::error::Error;
use civrepair::stack::SiteStrategy;

const EXIT_INPUT_ERROR: u8 = 4;

#[derive(Parser)]
#[command(name = "civrepair", version, about = "Compartment interface vulnerability repair")]
struct Cli {
    /// Config file (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// Scenario file path or bundled fixture name.
    #[arg(long)]
    scenario: Option<String>,
    /// Policy file (defaults to the bundled fixture's policy).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// External source index file.
    #[arg(long)]
    source_index: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fuzzer seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fuzzing budget (payload injections).
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct BackendOpts {
    /// Patch generator: aware-mock | naive-mock | remote.
    #[arg(long)]
    backend: Option<String>,
    /// naive-mock weights, e.g. correct=0.2,sandbox=0.5,null-check=0.3.
    #[arg(long)]
    weights: Option<String>,
    /// naive-mock schedule seed.
    #[arg(long)]
    backend_seed: Option<u64>,
    /// remote model name.
    #[arg(long)]
    model: Option<String>,
    /// remote endpoint URL (or CIVREPAIR_API_URL).
    #[arg(long)]
    url: Option<String>,
    /// Canned-response fixture for the remote backend (no network).
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct RepairOpts {
    /// Maximum generate/validate iterations.
    #[arg(long)]
    max_iter: Option<u32>,
    /// Probe executions allowed per validation.
    #[arg(long)]
    probe_budget: Option<u64>,
    /// Extra seeded random probes on top of the fixed family.
    #[arg(long)]
    extra_probes: Option<u64>,
    /// Patch-site tie-break strategy: late | early.
    #[arg(long)]
    site_strategy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fuzz the interface and write finding files.
    Fuzz {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Classify a finding by its mutated data type.
    Classify {
        #[arg(long)]
        finding: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Assign crash-stack roles and select the patch site.
    Analyze {
        #[arg(long)]
        finding: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        repair: RepairOpts,
    },
    /// Run the full generate/validate repair loop on a finding.
    Repair {
        #[arg(long)]
        finding: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        backend: BackendOpts,
        #[command(flatten)]
        repair: RepairOpts,
    },
    /// Validate one patch file against a finding.
    Validate {
        #[arg(long)]
        finding: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        repair: RepairOpts,
    },
    /// Patch-placement statistics over repeated generations.
    BenchPlacement {
        #[arg(long, default_value_t = 10)]
        iterations: u32,
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        backend: BackendOpts,
        #[command(flatten)]
        repair: RepairOpts,
    },
}

fn build_config(
    cli_config: &Option<PathBuf>,
    json: bool,
    common: &CommonOpts,
    backend: Option<&BackendOpts>,
    repair: Option<&RepairOpts>,
) -> Result<RunConfig, Error> {
    let mut cfg = match cli_config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.json = json;

    if let Some(s) = &common.scenario {
        cfg.scenario = Some(s.clone());
    }
    if let Some(p) = &common.policy {
        cfg.policy = Some(p.clone());
    }
    if let Some(p) = &common.source_index {
        cfg.source_index = Some(p.clone());
    }
    if let Some(p) = &common.out {
        cfg.out = p.clone();
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.budget {
        cfg.budget = v;
    }

    if let Some(opts) = backend {
        if let Some(kind) = &opts.backend {
            cfg.backend = match kind.as_str() {
                "aware-mock" => BackendChoice::AwareMock,
                "naive-mock" => BackendChoice::NaiveMock {
                    weights: match &opts.weights {
                        Some(text) => NaiveWeights::parse(text)?,
                        None => NaiveWeights::default(),
                    },
                    seed: opts.backend_seed.unwrap_or(0),
                },
                "remote" => BackendChoice::Remote {
                    url: opts.url.clone(),
                    model: opts
                        .model
                        .clone()
                        .ok_or_else(|| Error::Config("remote backend needs --model".into()))?,
                    replay: opts.replay.clone(),
                },
                other => {
                    return Err(Error::Config(format!(
                        "unknown backend `{other}` (aware-mock | naive-mock | remote)"
                    )))
                }
            };
        } else if opts.weights.is_some() || opts.backend_seed.is_some() {
            // Adjust naive parameters without restating the kind.
            if let BackendChoice::NaiveMock { weights, seed } = &mut cfg.backend {
                if let Some(text) = &opts.weights {
                    *weights = NaiveWeights::parse(text)?;
                }
                if let Some(s) = opts.backend_seed {
                    *seed = s;
                }
            } else {
                return Err(Error::Config(
                    "--weights/--backend-seed apply to the naive-mock backend".into(),
                ));
            }
        }
    }

    if let Some(opts) = repair {
        if let Some(v) = opts.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = opts.probe_budget {
            cfg.probe_budget = v;
        }
        if let Some(v) = opts.extra_probes {
            cfg.extra_probes = v;
        }
        if let Some(s) = &opts.site_strategy {
            cfg.site_strategy = match s.as_str() {
                "late" => SiteStrategy::Late,
                "early" => SiteStrategy::Early,
                other => {
                    return Err(Error::Config(format!(
                        "unknown site strategy `{other}` (late | early)"
                    )))
                }
            };
        }
    }

    cfg.check_paths()?;
    Ok(cfg)
}

fn emit<T: serde::Serialize>(json: bool, value: &T, human: String) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(value).expect("summary serializes")
        );
    } else {
        print!("{human}");
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Command::Fuzz { common } => {
            let cfg = build_config(&cli.config, cli.json, common, None, None)?;
            let summary = commands::cmd_fuzz(&cfg)?;
            emit(
                cli.json,
                &summary,
                format!(
                    "{} finding(s) on `{}` -> {}\n{}",
                    summary.findings,
                    summary.scenario,
                    summary.dir.display(),
                    summary
                        .files
                        .iter()
                        .map(|f| format!("  {f}\n"))
                        .collect::<String>()
                ),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Classify { finding, common } => {
            let cfg = build_config(&cli.config, cli.json, common, None, None)?;
            let summary = commands::cmd_classify(&cfg, finding)?;
            emit(
                cli.json,
                &summary,
                format!(
                    "category:       {}\nboundary focus: {}\nimpact:         {}\n\
                     patching unit:  {}\noracle:         {}\ndetectability:  {:?}\n\
                     assessment:     {}\n",
                    summary.class.category,
                    summary.class.boundary_focus.label(),
                    summary.class.impact,
                    summary.class.patching_unit.label(),
                    summary.class.oracle,
                    summary.class.detectability,
                    summary.impact_summary,
                ),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze {
            finding,
            common,
            repair,
        } => {
            let cfg = build_config(&cli.config, cli.json, common, None, Some(repair))?;
            let summary = commands::cmd_analyze(&cfg, finding)?;
            let site_text = match &summary.site {
                Some(site) => format!(
                    "patch site: {} (role {}, insert before op {}{})\n  {}\n",
                    site.function,
                    site.role,
                    site.insert_before_op,
                    site.unit_local_path
                        .as_ref()
                        .map(|p| format!(", unit `{p}`"))
                        .unwrap_or_default(),
                    site.justification
                ),
                None => "patch site: none (human review required)\n".to_string(),
            };
            emit(
                cli.json,
                &summary,
                format!("{}\n{site_text}", summary.roles.render_table()),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Repair {
            finding,
            common,
            backend,
            repair,
        } => {
            let cfg = build_config(&cli.config, cli.json, common, Some(backend), Some(repair))?;
            let summary = commands::cmd_repair(&cfg, finding)?;
            let human = {
                let mut text = format!(
                    "status: {} after {} iteration(s)\nartifacts: {}\n",
                    summary.outcome.status,
                    summary.outcome.iterations.len(),
                    summary.artifacts.display()
                );
                if let Some(patch) = &summary.outcome.accepted_patch {
                    text.push_str(&format!(
                        "accepted patch at `{}` (attempt {})\n",
                        patch.target_function, patch.attempt
                    ));
                }
                if summary.outcome.human_report.is_some() {
                    text.push_str("human report written\n");
                }
                text
            };
            let code = summary.outcome.status.exit_code();
            emit(cli.json, &summary, human);
            Ok(ExitCode::from(code as u8))
        }
        Command::Validate {
            finding,
            patch,
            common,
            repair,
        } => {
            let cfg = build_config(&cli.config, cli.json, common, None, Some(repair))?;
            let summary = commands::cmd_validate(&cfg, finding, patch)?;
            let mut human = format!(
                "target: {}\nplacement ok: {}\ntrust broken: {}\nverdict: {} ({} probe(s))\n",
                summary.patch_target,
                summary.placement.placement_ok,
                summary.placement.trust_broken,
                summary.verdict.status,
                summary.verdict.probes_run,
            );
            for ce in &summary.verdict.counterexamples {
                human.push_str(&format!(
                    "counterexample {}: {} -> {} at `{}`\n",
                    ce.label, ce.value, ce.kind, ce.stack[0]
                ));
            }
            let code = summary.verdict.status.exit_code();
            emit(cli.json, &summary, human);
            Ok(ExitCode::from(code as u8))
        }
        Command::BenchPlacement {
            iterations,
            common,
            backend,
            repair,
        } => {
            let cfg = build_config(&cli.config, cli.json, common, Some(backend), Some(repair))?;
            let summary = commands::cmd_bench_placement(&cfg, *iterations)?;
            let mut human = format!(
                "scenario: {} (finding: {})\n{:<14} {:>12} {:>14}\n",
                summary.scenario,
                summary.finding_strategy,
                "backend",
                "placement-ok",
                "trust-broken"
            );
            for row in &summary.rows {
                human.push_str(&format!(
                    "{:<14} {:>11.1}% {:>13.1}%\n",
                    row.backend, row.placement_ok_pct, row.trust_broken_pct
                ));
            }
            emit(cli.json, &summary, human);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT_ERROR)
        }
    }
}
