//! Command-line front end. Each subcommand reads a [`RunConfig`] (file plus
//! `--set key=value` overrides, with dedicated flags applied last) and writes
//! machine-readable artifacts stamped with the config hash, seed, precision
//! and code version.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub use config::RunConfig;

use crate::carry::CarryKind;
use crate::error::{Error, Result};
use crate::evaluator::entropy::{entropy_monotonicity_check, MarkovLanguageSpec, MonotonicityVerdict};
use crate::evaluator::{perplexity_by_length, render_svg, write_report_csv, write_report_json, LengthExtensionReport, ModelScorer};
use crate::kernellab::{extrapolation_error, fit_kernel, u_domain_error};
use crate::models::{load_checkpoint, LanguageModel, ModelConfig};
use crate::ndcore::Precision;
use crate::provenance::Provenance;
use crate::stability::{hidden_bound, max_safe_decay, Horizon, SafeDecay};
use crate::train::{train_run, MetricsLog, RunOutput};

/// Marker written when a training run completes.
pub const DONE_FILE: &str = "done.json";

#[derive(Debug, Parser)]
#[command(name = "ssmlab", version, about = "State-space language model lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; artifacts go to `<out>/<hash>-s<seed>`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Retrain even if the run directory is complete.
        #[arg(long)]
        force: bool,
    },
    /// Perplexity by evaluation length for a trained run.
    Eval {
        /// Run directory or checkpoint file.
        #[arg(long)]
        run: PathBuf,
        /// Overrides applied to the run's stored configuration.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, value_parser = ["contiguous", "shuffled"])]
        mode: Option<String>,
        /// Carry hidden state across consecutive windows.
        #[arg(long)]
        carry: bool,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        end: Option<usize>,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a grid of sequence lengths, carry policies and models.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Fit exponential sums to a memory kernel and report extrapolation error.
    Kernel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target: Option<String>,
        /// Number of exponentials; repeat or comma-separate for a sweep.
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
        /// Fitting window.
        #[arg(long = "T")]
        window: Option<f64>,
        /// Evaluation horizon (`inf` for infinity).
        #[arg(long = "t")]
        horizon: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check that conditioning on more context never raises entropy.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        states: Option<usize>,
        #[arg(long)]
        stay: Option<f64>,
        #[arg(long)]
        kmax: Option<usize>,
        #[arg(long)]
        random: Option<usize>,
    },
    /// Hidden-state bound and the largest safe decay.
    Stability {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "M")]
        max_value: Option<f64>,
        #[arg(long)]
        u1: Option<f64>,
        #[arg(long)]
        xsup: Option<f64>,
        #[arg(long)]
        h0: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Write the configured data source to a file.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_flags(mut set: Vec<String>, flags: &[(&str, Option<String>)]) -> Vec<String> {
    for (key, v) in flags {
        if let Some(v) = v {
            set.push(format!("{key}={v}"));
        }
    }
    set
}

fn load(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &with_flags(args.set.clone(), flags))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            cfg,
            out,
            seed,
            steps,
            force,
        } => {
            let cfg = load(&cfg, &[("train.seed", seed.map(|s| s.to_string())), ("train.steps", steps.map(|s| s.to_string()))])?;
            let dir = cmd_train(&cfg, &out, force)?;
            println!("{}", dir.display());
        }
        Command::Eval {
            run,
            set,
            mode,
            carry,
            start,
            end,
            out,
        } => {
            let mut set = with_flags(
                set,
                &[
                    ("eval.mode", mode.map(|m| format!("\"{m}\""))),
                    ("eval.start", start.map(|s| s.to_string())),
                    ("eval.end", end.map(|s| s.to_string())),
                ],
            );
            if carry {
                set.push("eval.carry=true".into());
            }
            let (report, files) = cmd_eval(&run, &set, out.as_deref())?;
            print_report(&report);
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep { cfg, out } => {
            let cfg = load(&cfg, &[])?;
            let path = cmd_sweep(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::Kernel {
            cfg,
            target,
            m,
            window,
            horizon,
            out,
        } => {
            let mut flags = vec![
                ("kernel.target", target.map(|t| format!("\"{t}\""))),
                ("kernel.window", window.map(|w| format!("{w:?}"))),
            ];
            if !m.is_empty() {
                flags.push(("kernel.m", Some(format!("{m:?}"))));
            }
            let mut cfg = load(&cfg, &flags)?;
            match horizon.as_deref() {
                None => {}
                Some("inf" | "infinity") => cfg.kernel.horizon = None,
                Some(h) => cfg.kernel.horizon = Some(h.parse().map_err(|_| Error::invalid(format!("bad horizon `{h}`")))?),
            }
            let path = cmd_kernel(&cfg, &out)?;
            print!("{}", fs::read_to_string(&path)?);
            println!("wrote {}", path.display());
        }
        Command::Oracle {
            cfg,
            states,
            stay,
            kmax,
            random,
        } => {
            let cfg = load(
                &cfg,
                &[
                    ("oracle.states", states.map(|s| s.to_string())),
                    ("oracle.stay", stay.map(|s| format!("{s:?}"))),
                    ("oracle.k_max", kmax.map(|s| s.to_string())),
                    ("oracle.random", random.map(|s| s.to_string())),
                ],
            )?;
            let verdicts = cmd_oracle(&cfg)?;
            let pass = verdicts.iter().all(|v| v.pass);
            for (i, v) in verdicts.iter().enumerate() {
                for r in &v.rows {
                    println!(
                        "chain {i} k={:>2} H(X_k+1 | suffixes) = {}",
                        r.k,
                        r.suffix_entropies.iter().map(|h| format!("{h:.6}")).collect::<Vec<_>>().join(" ")
                    );
                }
            }
            println!("monotonicity verdict: {}", if pass { "PASS" } else { "FAIL" });
            if !pass {
                return Err(Error::invalid("entropy monotonicity violated"));
            }
        }
        Command::Stability {
            cfg,
            max_value,
            u1,
            xsup,
            h0,
            lambda,
            steps,
        } => {
            let f = |x: Option<f64>| x.map(|v| format!("{v:?}"));
            let cfg = load(
                &cfg,
                &[
                    ("stability.max_value", f(max_value)),
                    ("stability.u_norm1", f(u1)),
                    ("stability.x_sup", f(xsup)),
                    ("stability.h0_inf", f(h0)),
                    ("stability.lambda", f(lambda)),
                    ("stability.steps", steps.map(|s| s.to_string())),
                ],
            )?;
            let out = cmd_stability(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::GenCorpus { cfg, out } => {
            let cfg = load(&cfg, &[])?;
            let tokens = cfg.data.tokens()?;
            fs::write(&out, &tokens)?;
            println!("wrote {} bytes to {}", tokens.len(), out.display());
        }
    }
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Trains `cfg` under `root`, or returns the existing directory when the run
/// is already complete.
pub fn cmd_train(cfg: &RunConfig, root: &Path, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run_dir(root);
    if dir.join(DONE_FILE).exists() && !force {
        info!("{} already complete; skipping", dir.display());
        return Ok(dir);
    }
    fs::create_dir_all(&dir)?;
    let hash = cfg.train_hash();
    let prov = Provenance::new(&hash, cfg.train.seed, cfg.train.precision);
    write_json(&dir.join("config.json"), &json!({"provenance": prov, "config": cfg}))?;
    let (train_tokens, held_out) = cfg.data.split()?;
    let model = LanguageModel::new(cfg.model.clone(), cfg.train.seed)?;
    info!(
        "training {} ({} params) on {} tokens into {}",
        cfg.model.mixer.name(),
        model.num_params(),
        train_tokens.len(),
        dir.display()
    );
    let out = RunOutput {
        dir: dir.clone(),
        provenance: prov.clone(),
        meta: json!({"run_config": cfg}),
    };
    let mut log = MetricsLog::to_file(&out.metrics_path())?;
    let valid = (!held_out.is_empty()).then_some(held_out.as_slice());
    let outcome = train_run(&cfg.train, model, train_tokens, valid, Some(&out), &mut log)?;
    write_json(
        &dir.join(DONE_FILE),
        &json!({"provenance": prov, "final_loss": outcome.final_loss, "steps": outcome.steps_run}),
    )?;
    Ok(dir)
}

/// Loads a run's model and stored configuration.
pub fn load_run(run: &Path) -> Result<(LanguageModel, RunConfig)> {
    let ckpt = if run.is_dir() { run.join("model.ckpt") } else { run.to_path_buf() };
    let ck = load_checkpoint(&ckpt)?;
    let stored = ck.meta.get("run_config").cloned().ok_or_else(|| Error::Checkpoint {
        path: ckpt.clone(),
        msg: "no run configuration in metadata".into(),
    })?;
    let cfg: RunConfig = serde_json::from_value(stored)?;
    Ok((ck.model, cfg))
}

/// Evaluates a run over the configured lengths on its held-out data.
pub fn eval_run(model: &LanguageModel, cfg: &RunConfig) -> Result<LengthExtensionReport> {
    let (_, held_out) = cfg.data.split()?;
    let scorer = ModelScorer {
        model,
        precision: cfg.eval.precision,
    };
    let mut report = perplexity_by_length(&scorer, &held_out, &cfg.eval.lengths(), &cfg.eval.options(cfg.train.seed))?;
    let t0 = cfg.eval.t0.unwrap_or(cfg.train.seq_len);
    let lengths = &report.lengths;
    if lengths.iter().filter(|&&l| l >= t0).count() >= 2 {
        report.classify(t0, cfg.eval.epsilon)?;
    } else {
        warn!("fewer than two lengths ≥ {t0}; report left unclassified");
    }
    Ok(report)
}

fn eval_stem(cfg: &RunConfig) -> String {
    format!(
        "eval-{}{}-{}",
        match cfg.eval.mode {
            crate::carry::BatchMode::Contiguous => "contiguous",
            crate::carry::BatchMode::Shuffled => "shuffled",
        },
        if cfg.eval.carry { "-carry" } else { "" },
        cfg.hash()
    )
}

pub fn cmd_eval(run: &Path, overrides: &[String], out: Option<&Path>) -> Result<(LengthExtensionReport, Vec<PathBuf>)> {
    let (model, stored) = load_run(run)?;
    let mut value = toml::Value::try_from(&stored).map_err(|e| Error::invalid(e.to_string()))?;
    for o in overrides {
        config::apply_override(&mut value, o)?;
    }
    let cfg = RunConfig::from_value(value)?;
    let report = eval_run(&model, &cfg)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None if run.is_dir() => run.to_path_buf(),
        None => run.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&dir)?;
    let prov = Provenance::new(cfg.train_hash(), cfg.train.seed, cfg.eval.precision);
    let stem = eval_stem(&cfg);
    let mut files = vec![dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json"))];
    write_report_csv(&files[0], &report, &prov)?;
    write_report_json(&files[1], &report, &prov)?;
    if cfg.eval.svg {
        let p = dir.join(format!("{stem}.svg"));
        let title = format!("{} {} T={}", cfg.model.mixer.name(), cfg.train.carry.kind.name(), cfg.train.seq_len);
        fs::write(&p, render_svg(&[(stem.clone(), &report)], &title))?;
        files.push(p);
    }
    Ok((report, files))
}

fn print_report(r: &LengthExtensionReport) {
    for (l, p) in r.lengths.iter().zip(&r.perplexity) {
        println!("{l:>7}  {p:.4}");
    }
    if let Some(c) = r.classification {
        println!("classification: {}", c.name());
    }
}

/// One trained and evaluated cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub model: String,
    pub seq_len: usize,
    pub carry: CarryKind,
    pub result: std::result::Result<(PathBuf, LengthExtensionReport), String>,
}

pub fn sweep_cells(cfg: &RunConfig, root: &Path) -> Result<Vec<SweepCell>> {
    let models: Vec<(String, ModelConfig)> = if cfg.sweep.models.is_empty() {
        vec![("config".into(), cfg.model.clone())]
    } else {
        cfg.sweep
            .models
            .iter()
            .map(|n| Ok((n.clone(), ModelConfig::preset(n)?)))
            .collect::<Result<_>>()?
    };
    let mut cells = Vec::new();
    for (name, model) in &models {
        for &seq_len in &cfg.sweep.seq_lens {
            for &carry in &cfg.sweep.carries {
                let mut c = cfg.clone();
                c.model = model.clone();
                c.train.seq_len = seq_len;
                c.train.carry.kind = carry;
                c.eval.t0 = Some(seq_len);
                let result = cmd_train(&c, root, false)
                    .and_then(|dir| {
                        let (model, _) = load_run(&dir)?;
                        Ok((dir.clone(), eval_run(&model, &c)?))
                    })
                    .map_err(|e| e.to_string());
                if let Err(e) = &result {
                    warn!("sweep cell {name} T={seq_len} {} failed: {e}", carry.name());
                }
                cells.push(SweepCell {
                    model: name.clone(),
                    seq_len,
                    carry,
                    result,
                });
            }
        }
    }
    Ok(cells)
}

/// Runs the sweep and writes one aggregate CSV: a row per cell, a column per
/// evaluation length, blank where the length is below the training length.
pub fn cmd_sweep(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let cells = sweep_cells(cfg, root)?;
    let lengths = cfg.eval.lengths();
    let path = root.join(format!("sweep-{}.csv", cfg.hash()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let mut header: Vec<String> = ["model", "seq_len", "carry", "run", "classification", "error"].map(String::from).to_vec();
    header.extend(lengths.iter().map(|l| format!("ppl_{l}")));
    header.extend(Provenance::CSV_COLUMNS.map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    let prov = Provenance::new(cfg.hash(), cfg.train.seed, cfg.train.precision);
    for c in &cells {
        let mut row = vec![c.model.clone(), c.seq_len.to_string(), c.carry.name().to_string()];
        match &c.result {
            Ok((dir, r)) => {
                row.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
                row.push(r.classification.map(|k| k.name().to_string()).unwrap_or_default());
                row.push(String::new());
                for &l in &lengths {
                    row.push(match r.ppl_at(l) {
                        Some(p) if l >= c.seq_len => format!("{p:.6}"),
                        _ => String::new(),
                    });
                }
            }
            Err(e) => {
                row.extend([String::new(), String::new(), e.clone()]);
                row.extend(lengths.iter().map(|_| String::new()));
            }
        }
        row.extend(prov.csv_fields());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(path)
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Fits each configured `m` and writes the error table.
pub fn cmd_kernel(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let k = &cfg.kernel;
    let target = k.target()?;
    if k.m.is_empty() {
        return Err(Error::Config {
            key: "kernel.m".into(),
            msg: "at least one value required".into(),
        });
    }
    fs::create_dir_all(out)?;
    let path = out.join(format!("kernel-{}.csv", cfg.hash()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let mut header: Vec<&str> = vec![
        "target", "m", "window", "horizon", "residual_rms", "in_window", "extrapolation", "u_domain", "ridge", "truncated_at",
    ];
    header.extend(Provenance::CSV_COLUMNS);
    w.write_record(&header).map_err(csv_err)?;
    let prov = Provenance::new(cfg.hash(), cfg.train.seed, Precision::F64);
    for &m in &k.m {
        let fit = fit_kernel(&target, m, k.window, k.grid_factor * m.max(10), k.method())?;
        let e = extrapolation_error(&fit, &target, k.window, k.upper(), k.quad_n)?;
        let u = u_domain_error(&fit, &target, k.window, k.upper(), 1e-12)?;
        let mut row = vec![
            k.target.clone(),
            m.to_string(),
            format!("{}", k.window),
            k.horizon.map_or("inf".to_string(), |h| format!("{h}")),
            format!("{:.12e}", fit.residual_rms),
            format!("{:.12e}", e.in_window),
            format!("{:.12e}", e.extrapolation),
            format!("{u:.12e}"),
            format!("{:.6e}", fit.ridge),
            e.truncated_at.map(|s| format!("{s}")).unwrap_or_default(),
        ];
        row.extend(prov.csv_fields());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(path)
}

/// Entropy monotonicity on the configured chain(s).
pub fn cmd_oracle(cfg: &RunConfig) -> Result<Vec<MonotonicityVerdict>> {
    let o = &cfg.oracle;
    let specs: Vec<MarkovLanguageSpec> = match o.stay {
        Some(p) => {
            if o.states != 2 {
                return Err(Error::Config {
                    key: "oracle.stay".into(),
                    msg: "only valid with states = 2".into(),
                });
            }
            vec![MarkovLanguageSpec::symmetric_two_state(p)?]
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
            (0..o.random.max(1))
                .map(|_| MarkovLanguageSpec::random(o.states, o.concentration, &mut rng))
                .collect::<Result<_>>()?
        }
    };
    specs.iter().map(|s| entropy_monotonicity_check(s, o.k_max, o.tolerance)).collect()
}

/// Safe decay and the bound at the configured (or safe) decay.
pub fn cmd_stability(cfg: &RunConfig) -> Result<Value> {
    let s = &cfg.stability;
    let SafeDecay { lambda_star, feasible } = max_safe_decay(&s.budget(0.0))?;
    let lambda = s.lambda.unwrap_or(lambda_star);
    let horizon = s.steps.map_or(Horizon::Infinite, Horizon::Steps);
    let bound = hidden_bound(&s.budget(lambda), horizon).ok();
    let prov = Provenance::new(cfg.hash(), cfg.train.seed, Precision::F64);
    Ok(json!({
        "lambda_star": lambda_star,
        "feasible": feasible,
        "lambda": lambda,
        "horizon": s.steps,
        "hidden_bound": bound,
        "max_value": s.max_value,
        "provenance": prov,
    }))
}
