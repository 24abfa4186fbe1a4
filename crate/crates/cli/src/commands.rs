//! Subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use forchestra::analysis::rank_analysis;
use forchestra::checkpoint::{bp_checkpoint, forchestra_checkpoint, rm_checkpoint};
use forchestra::conductor::{count_parameters, MetaInput};
use forchestra::data::{generate_synthetic, write_m5_csv, SyntheticSpec};
use forchestra::ensemble::{
    dnc_train, ensemble_table, history_representations, run_ensembles, EnsembleSpec, PoolForecasts, Scope, Strategy,
};
use forchestra::eval::{backtest, transfer_evaluate, MetricReport};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{load_bp, load_forchestra, load_model, load_rm, par_map, Prepared};
use crate::run::{Manifest, RunDir, CONFIG_FILE};

#[derive(Parser, Debug, Clone)]
#[command(name = "forchestra", version, about = "Train and evaluate Forchestra forecasting experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON); built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed; falls back to the config, then FORCHESTRA_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; `<output_dir>/<command>` from the config when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Threads for independent units (pool members, K values).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate a regime-structured synthetic dataset as M5-format CSV.
    GenSynthetic {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 400)]
        days: usize,
        #[arg(long, default_value_t = 4)]
        regimes: usize,
        #[arg(long, default_value_t = 3.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.1)]
        non_sale_fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training of the representation module.
    PretrainNc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train one standalone base predictor.
    PretrainBp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a Forchestra model end to end.
    Train {
        #[command(flatten)]
        common: Common,
        /// Pre-trained representation module checkpoint.
        #[arg(long)]
        init_nc: Option<PathBuf>,
        /// Pre-trained base predictor checkpoint cloned into every predictor.
        #[arg(long)]
        init_bps: Option<PathBuf>,
        #[arg(long)]
        freeze_rep: bool,
        #[arg(long)]
        freeze_bps: bool,
        /// `last` or `pooled`.
        #[arg(long)]
        meta_input: Option<MetaInput>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a model (checkpoint path or `sma`) on the test range.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: String,
        /// Evaluate only the hold-out instances.
        #[arg(long)]
        transfer: bool,
    },
    /// Combine a pool of base predictor checkpoints.
    Ensemble {
        #[command(flatten)]
        common: Common,
        /// Directory of base predictor checkpoints (`*.json`).
        #[arg(long)]
        pool: PathBuf,
        /// Strategies to run; every strategy when absent.
        #[arg(long)]
        strategy: Vec<Strategy>,
        /// Top-K sizes.
        #[arg(long)]
        k: Vec<usize>,
        /// Weight scopes; both when absent.
        #[arg(long)]
        scope: Vec<Scope>,
        /// Also train divide-and-conquer experts over this many clusters.
        #[arg(long)]
        dnc: Option<usize>,
        /// Representation module used to cluster for `--dnc`.
        #[arg(long)]
        rm: Option<PathBuf>,
    },
    /// Rank analysis, representation export, and scaling over K.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Trained Forchestra checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        ranks: bool,
        #[arg(long)]
        export_reps: bool,
        /// Comma-separated K values, e.g. `1,2,5`.
        #[arg(long)]
        scaling: Option<String>,
        #[arg(long)]
        init_nc: Option<PathBuf>,
        #[arg(long)]
        init_bps: Option<PathBuf>,
    },
    /// Re-run a recorded command from its manifest and resolved config.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::PretrainNc { .. } => "pretrain-nc",
            Command::PretrainBp { .. } => "pretrain-bp",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Ensemble { .. } => "ensemble",
            Command::Analyze { .. } => "analyze",
            Command::Replay { .. } => "replay",
        }
    }

    fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Command::PretrainNc { common, .. }
            | Command::PretrainBp { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ensemble { common, .. }
            | Command::Analyze { common, .. } => Some(common),
            Command::GenSynthetic { .. } | Command::Replay { .. } => None,
        }
    }
}

/// Runs `cli`; `args` are the raw arguments after the program name.
pub fn run(cli: Cli, args: &[String]) -> Result<PathBuf, CliError> {
    let name = cli.command.name();
    match cli.command {
        Command::GenSynthetic {
            instances,
            days,
            regimes,
            noise,
            non_sale_fraction,
            seed,
            out,
        } => gen_synthetic(args, instances, days, regimes, noise, non_sale_fraction, seed, &out),
        Command::PretrainNc { common, epochs } => {
            let (prepared, mut run) = start(name, args, &common, |c| {
                if let Some(e) = epochs {
                    c.pretrain_nc.epochs = e;
                }
            })?;
            let (rm, history) = prepared.pretrain_nc()?;
            run.write("rm.json", &to_json(&rm_checkpoint(&rm)))?;
            run.write("loss_history.csv", &history.to_csv())?;
            run.manifest.trained_instances = Some(prepared.id_list(&prepared.split.train_instances));
            run.finish()
        }
        Command::PretrainBp { common, epochs } => {
            let (prepared, mut run) = start(name, args, &common, |c| {
                if let Some(e) = epochs {
                    c.pretrain_bp.epochs = e;
                }
            })?;
            let (bp, history) = prepared.pretrain_bp()?;
            run.write("bp.json", &to_json(&bp_checkpoint(&bp)))?;
            run.write("loss_history.csv", &history.to_csv())?;
            run.manifest.trained_instances = Some(prepared.id_list(&prepared.split.train_instances));
            run.finish()
        }
        Command::Train {
            common,
            init_nc,
            init_bps,
            freeze_rep,
            freeze_bps,
            meta_input,
            k,
            epochs,
        } => {
            let (prepared, mut run) = start(name, args, &common, |c| {
                if let Some(e) = epochs {
                    c.train.epochs = e;
                }
                if let Some(k) = k {
                    c.model.k = k;
                }
                if let Some(m) = meta_input {
                    c.model.meta_input = m;
                }
                c.train.freeze_representation |= freeze_rep;
                c.train.freeze_bps |= freeze_bps;
            })?;
            let bp = init_bps.as_deref().map(load_bp).transpose()?;
            let rm = init_nc.as_deref().map(load_rm).transpose()?;
            for p in init_bps.iter().chain(&init_nc) {
                run.input(p);
            }
            let c = &prepared.config;
            run.manifest.flags = json!({
                "init_nc": init_nc,
                "init_bps": init_bps,
                "freeze_rep": c.train.freeze_representation,
                "freeze_bps": c.train.freeze_bps,
                "meta_input": c.model.meta_input,
                "k": c.model.k,
            });
            let (model, history) = prepared.train(bp.as_ref(), rm.as_ref())?;
            run.write("model.json", &to_json(&forchestra_checkpoint(&model)))?;
            run.write("loss_history.csv", &history.to_csv())?;
            run.manifest.trained_instances = Some(prepared.id_list(&prepared.split.train_instances));
            println!("parameters {}", count_parameters(&model));
            run.finish()
        }
        Command::Evaluate { common, model, transfer } => {
            let (prepared, mut run) = start(name, args, &common, |_| {})?;
            let loaded = load_model(&model, &prepared)?;
            if model != "sma" {
                run.input(Path::new(&model));
            }
            let region = prepared.split.test;
            let report = if transfer {
                let holdout = &prepared.split.holdout;
                if holdout.is_empty() {
                    warn("hold-out set is empty; writing an empty report");
                }
                let trained = match Manifest::beside(Path::new(&model)).and_then(|m| m.trained_instances) {
                    Some(ids) => ids,
                    None => {
                        warn("no training manifest beside the model; assuming the split's training instances");
                        prepared.id_list(&prepared.split.train_instances)
                    }
                };
                transfer_evaluate(&loaded, &prepared.dataset, holdout, &trained, region, &prepared.config.filters)?
            } else {
                prepared.test_report(&loaded)?
            };
            run.manifest.flags = json!({ "model": model, "transfer": transfer });
            write_report(&mut run, "", &report)?;
            println!("mase {}", report.mean_mase());
            run.finish()
        }
        Command::Ensemble {
            common,
            pool,
            strategy,
            k,
            scope,
            dnc,
            rm,
        } => {
            let (prepared, mut run) = start(name, args, &common, |_| {})?;
            let members = pool_members(&pool)?;
            let bps = members.iter().map(|p| load_bp(p)).collect::<Result<Vec<_>, _>>()?;
            for m in &members {
                run.input(m);
            }
            let specs = ensemble_specs(&strategy, &k, &scope, bps.len(), &prepared.config.ensembles)?;
            let inst = &prepared.split.train_instances;
            let jobs = prepared.config.jobs;
            let sets = par_map(jobs, &bps, |bp| -> Result<_, CliError> {
                Ok((
                    backtest(bp, &prepared.dataset, inst, prepared.split.validation)?,
                    backtest(bp, &prepared.dataset, inst, prepared.split.test)?,
                ))
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
            let (validation, test): (Vec<_>, Vec<_>) = sets.into_iter().unzip();
            let mut members_csv = String::from("member,mase,mae,rmse\n");
            for (path, set) in members.iter().zip(&test) {
                let r = forchestra::eval::evaluate(set, &prepared.dataset, &prepared.config.filters)?;
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let agg = |a: Option<forchestra::eval::Aggregate>| a.map(|a| a.mean.to_string()).unwrap_or_default();
                let _ = writeln!(members_csv, "{name},{},{},{}", agg(r.mase), agg(r.mae), agg(r.rmse));
            }
            let results = run_ensembles(&PoolForecasts { validation, test }, &prepared.dataset, &specs, &prepared.config.filters)?;
            run.write("ensembles.csv", &ensemble_table(&results))?;
            run.write("members.csv", &members_csv)?;
            if let Some(clusters) = dnc {
                let rm_path = rm.as_deref().ok_or_else(|| CliError::Usage("--dnc needs --rm".into()))?;
                let rm = load_rm(rm_path)?;
                run.input(rm_path);
                let model = dnc_train(
                    &prepared.dataset,
                    inst,
                    &prepared.windows,
                    prepared.split.train.end - 1,
                    &rm,
                    &bps[0],
                    clusters,
                    &prepared.config.train,
                )?;
                let report = prepared.test_report(&model)?;
                write_report(&mut run, "dnc_", &report)?;
                let mut routes = String::from("id,cluster\n");
                for &i in inst {
                    let _ = writeln!(routes, "{},{}", prepared.dataset.instances[i].id, model.routes[i]);
                }
                run.write("dnc_routes.csv", &routes)?;
            }
            run.manifest.flags = json!({ "specs": specs, "dnc": dnc });
            run.finish()
        }
        Command::Analyze {
            common,
            model,
            ranks,
            export_reps,
            scaling,
            init_nc,
            init_bps,
        } => {
            if !(ranks || export_reps || scaling.is_some()) {
                return Err(CliError::Usage("analyze needs --ranks, --export-reps, or --scaling".into()));
            }
            let ks = scaling.as_deref().map(parse_k_list).transpose()?;
            let (prepared, mut run) = start(name, args, &common, |_| {})?;
            if ranks || export_reps {
                let path = model
                    .as_deref()
                    .ok_or_else(|| CliError::Usage("--ranks and --export-reps need --model".into()))?;
                let m = load_forchestra(path)?;
                run.input(path);
                if ranks {
                    let a = rank_analysis(&m, &prepared.dataset, &prepared.split, &prepared.config.filters)?;
                    run.write("ranks.csv", &a.to_csv())?;
                    run.write("ranks.json", &to_json(&a))?;
                }
                if export_reps {
                    let all: Vec<usize> = (0..prepared.dataset.len()).collect();
                    let anchor = prepared.split.train.end - 1;
                    let reps = history_representations(&m.representation, &prepared.dataset, &all, anchor)?;
                    let d = m.config.representation.output_dim;
                    let mut csv = String::from("id");
                    for j in 0..d {
                        let _ = write!(csv, ",r{j}");
                    }
                    csv.push('\n');
                    for (inst, row) in prepared.dataset.instances.iter().zip(&reps) {
                        csv.push_str(&inst.id);
                        for v in row {
                            let _ = write!(csv, ",{v}");
                        }
                        csv.push('\n');
                    }
                    run.write("representations.csv", &csv)?;
                }
            }
            if let Some(ks) = &ks {
                let bp = init_bps.as_deref().map(load_bp).transpose()?;
                let rm = init_nc.as_deref().map(load_rm).transpose()?;
                let rows = par_map(prepared.config.jobs, ks, |&k| -> Result<(usize, usize, f64), CliError> {
                    let mut p = prepared.config.clone();
                    p.model.k = k;
                    let variant = Prepared {
                        config: p,
                        dataset: prepared.dataset.clone(),
                        split: prepared.split.clone(),
                        windows: prepared.windows.clone(),
                    };
                    let (m, _) = variant.train(bp.as_ref(), rm.as_ref())?;
                    Ok((k, count_parameters(&m), variant.test_report(&m)?.mean_mase()))
                });
                let mut csv = String::from("k,parameters,test_mase\n");
                for r in rows {
                    let (k, params, mase) = r?;
                    let _ = writeln!(csv, "{k},{params},{mase}");
                }
                run.write("scaling.csv", &csv)?;
            }
            run.manifest.flags = json!({ "ranks": ranks, "export_reps": export_reps, "scaling": ks });
            run.finish()
        }
        Command::Replay { manifest, out } => replay(&manifest, &out),
    }
}

fn warn(message: &str) {
    log::warn!("{message}");
    eprintln!("warning: {message}");
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("outputs serialize") + "\n"
}

/// Applies `overrides`, loads the data, and opens the run directory.
fn start(
    name: &str,
    args: &[String],
    common: &Common,
    overrides: impl FnOnce(&mut ExperimentConfig),
) -> Result<(Prepared, RunDir), CliError> {
    let mut config = ExperimentConfig::load_or_default(common.config.as_deref())?;
    overrides(&mut config);
    if let Some(j) = common.jobs {
        config.jobs = j;
    }
    let out = common.out.clone().unwrap_or_else(|| config.output_dir.join(name));
    let prepared = Prepared::new(config, common.seed)?;
    let mut run = RunDir::create(&out, name, args)?;
    run.write_config(&prepared.config)?;
    Ok((prepared, run))
}

fn write_report(run: &mut RunDir, prefix: &str, report: &MetricReport) -> Result<(), CliError> {
    run.write(&format!("{prefix}metrics.csv"), &report.to_csv())?;
    let body = serde_json::to_string_pretty(&report.summary_json()).expect("reports serialize") + "\n";
    run.write(&format!("{prefix}summary.json"), &body)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gen_synthetic(
    args: &[String],
    instances: usize,
    days: usize,
    regimes: usize,
    noise: f64,
    non_sale_fraction: f64,
    seed: Option<u64>,
    out: &Path,
) -> Result<PathBuf, CliError> {
    if instances == 0 || days == 0 || regimes == 0 {
        return Err(CliError::Usage("--instances, --days, and --regimes must be positive".into()));
    }
    if !(noise >= 0.0) || !(0.0..=1.0).contains(&non_sale_fraction) {
        return Err(CliError::Usage("--noise must be ≥ 0 and --non-sale-fraction in [0, 1]".into()));
    }
    let seed = seed.or_else(|| std::env::var(crate::config::SEED_ENV).ok()?.parse().ok()).unwrap_or(0);
    let mut spec = SyntheticSpec::new(instances, days, regimes, noise, seed);
    spec.max_non_sale_fraction = non_sale_fraction;
    let dataset = generate_synthetic(&spec)?;
    let mut run = RunDir::create(out, "gen-synthetic", args)?;
    run.manifest.seed = Some(seed);
    let sales = out.join("sales.csv");
    let avail = out.join("availability.csv");
    write_m5_csv(&dataset, &sales, &avail)?;
    run.manifest.outputs.extend(["sales.csv".to_string(), "availability.csv".to_string()]);
    let echo = serde_json::to_string_pretty(&spec).expect("specs serialize") + "\n";
    run.write("spec.json", &echo)?;
    print!("{echo}");
    run.finish()
}

fn pool_members(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Usage(format!("cannot read pool {}: {e}", dir.display())))?;
    let mut members: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    members.sort();
    if members.is_empty() {
        return Err(CliError::Usage(format!("pool {} holds no checkpoints", dir.display())));
    }
    Ok(members)
}

/// One spec per requested (strategy, scope, k); every strategy over both
/// scopes with Top-1..n when nothing is requested.
pub fn ensemble_specs(
    strategies: &[Strategy],
    ks: &[usize],
    scopes: &[Scope],
    pool_size: usize,
    configured: &[EnsembleSpec],
) -> Result<Vec<EnsembleSpec>, CliError> {
    if strategies.is_empty() && ks.is_empty() && scopes.is_empty() && !configured.is_empty() {
        return Ok(configured.to_vec());
    }
    let strategies = if strategies.is_empty() { Strategy::ALL.to_vec() } else { strategies.to_vec() };
    let scopes = if scopes.is_empty() { vec![Scope::Global, Scope::InstanceWise] } else { scopes.to_vec() };
    let ks: Vec<usize> = if ks.is_empty() { (1..=pool_size).collect() } else { ks.to_vec() };
    let mut specs = Vec::new();
    for &s in &strategies {
        for &scope in &scopes {
            if s == Strategy::TopK {
                for &k in &ks {
                    if k == 0 || k > pool_size {
                        return Err(CliError::Usage(format!("top_k needs 1 ≤ k ≤ {pool_size}, got {k}")));
                    }
                    specs.push(EnsembleSpec::top_k(k, scope));
                }
            } else {
                specs.push(EnsembleSpec::new(s, scope));
            }
        }
    }
    Ok(specs)
}

/// Parses `1,2,5` into distinct ascending K values.
pub fn parse_k_list(s: &str) -> Result<Vec<usize>, CliError> {
    let mut ks = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&k| k > 0))
        .collect::<Option<Vec<_>>>()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| CliError::Usage(format!("invalid K list `{s}`; expected positive integers like 1,2,5")))?;
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

fn replay(manifest_path: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let manifest = Manifest::load(manifest_path)?;
    let argv = std::iter::once("forchestra".to_string()).chain(manifest.args.iter().cloned());
    let mut cli = Cli::try_parse_from(argv).map_err(|e| CliError::Config(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(CliError::Usage("cannot replay a replay".into()));
    }
    let run_dir = manifest_path.parent().unwrap_or(Path::new("."));
    match &mut cli.command {
        Command::GenSynthetic { out: o, .. } => *o = out.to_path_buf(),
        other => {
            let common = other.common_mut().expect("every other command has common flags");
            common.config = Some(run_dir.join(CONFIG_FILE));
            common.out = Some(out.to_path_buf());
        }
    }
    run(cli, &manifest.args)
}
