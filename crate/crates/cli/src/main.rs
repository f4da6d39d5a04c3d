use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use quantlab::config::KvConfig;
use quantlab::harness::suite::{run_suite, SuiteName};
use quantlab::harness::train::{export_run, load_selected, RunSummary};
use quantlab::harness::{ensure_encoder, evaluate, pretrain_config, train, Dataset, Existing, MetricsBundle, TrainConfig};
use quantlab::model::Model;
use quantlab::pretrain::{pretrain_encoder, save_encoder};
use quantlab::rng::{derive_seed, seeded, stream};
use quantlab::scene::{build_dataset, build_unseen_dataset, summarize, DatasetKind, Split};
use quantlab::settings::{describe_keys, Settings, KEYS};
use quantlab::{Error, Result};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut cmd = Command::new("quantlab")
        .about("Synthetic-scene quantification laboratory: data generation, training and evaluation")
        .after_long_help(format!("Configuration keys (config file `key = value` or --key-name flag):\n{}", describe_keys()))
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("read `key = value` settings from FILE (flags override it)"),
        );
    for spec in KEYS {
        let help = if spec.default.is_empty() {
            spec.help.to_string()
        } else {
            format!("{} [default: {}]", spec.help, spec.default)
        };
        cmd = cmd.arg(
            Arg::new(spec.key)
                .long(flag(spec.key))
                .global(true)
                .value_name("VALUE")
                .help(help)
                .help_heading("Configuration"),
        );
    }
    let force = || Arg::new("force").long("force").action(ArgAction::SetTrue).help("overwrite existing output");
    let run = || Arg::new("run").long("run").value_name("DIR").help("run directory (default: <run_dir>/<variant>-s<seed>)");
    cmd.subcommand(
        Command::new("gen-data")
            .about("generate the standard (or unseen) dataset under <data_dir>")
            .arg(Arg::new("unseen").long("unseen").action(ArgAction::SetTrue).help("hold out one combination per ratio"))
            .arg(force()),
    )
    .subcommand(Command::new("pretrain-encoder").about("pretrain the frozen encoder on sprite classification").arg(force()))
    .subcommand(
        Command::new("train")
            .about("train one model into <run_dir>/<variant>-s<seed>")
            .arg(force())
            .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("continue an interrupted run")),
    )
    .subcommand(
        Command::new("eval")
            .about("evaluate a run's selected weights (or fresh weights with --init)")
            .arg(run())
            .arg(
                Arg::new("split")
                    .long("split")
                    .value_parser(["train", "val", "test"])
                    .default_value("test"),
            )
            .arg(Arg::new("init").long("init").action(ArgAction::SetTrue).help("evaluate freshly initialised weights")),
    )
    .subcommand(
        Command::new("suite")
            .about("train every run of a suite (resuming finished runs) and write its table")
            .arg(Arg::new("name").required(true).value_parser(["main", "number", "reversed", "unseen"]))
            .arg(force()),
    )
    .subcommand(Command::new("export").about("rewrite a run's metrics and analysis exports").arg(run()))
}

fn settings(m: &ArgMatches) -> Result<Settings> {
    let mut kv = match m.get_one::<String>("config") {
        Some(p) => {
            let p = Path::new(p);
            KvConfig::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
        }
        None => KvConfig::default(),
    };
    for spec in KEYS {
        if let Some(v) = m.get_one::<String>(spec.key) {
            kv.set(spec.key, v.clone());
        }
    }
    Settings::from_kv(&kv)
}

fn report(line: &str) {
    eprintln!("{line}");
}

fn print_metrics(m: &MetricsBundle) {
    println!("scenes: {}", m.count);
    println!("task\tscore\tloss\tchance\tmajority\trandom");
    for t in &m.tasks {
        let b = &t.baselines;
        println!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            t.task, t.score, t.loss, b.chance, b.majority, b.random
        );
    }
}

fn print_summary(s: &RunSummary) {
    println!("{} seed {} (config {}), selected epoch {}", s.variant, s.seed, s.config_hash, s.selected_epoch);
    for (t, v) in &s.scores {
        println!("{}\t{:.4}", t, v);
    }
    if let Some(a) = s.adjacency {
        println!("adjacent-error fraction\t{a:.4}");
    }
    if let Some(p) = &s.pca {
        println!("pca silhouette\t{:.4} (within {:.4}, between {:.4})", p.silhouette, p.within, p.between);
    }
}

fn cmd_gen_data(s: &Settings, m: &ArgMatches) -> Result<()> {
    let kind = if m.get_flag("unseen") { DatasetKind::Unseen } else { DatasetKind::Standard };
    let dir = s.dataset_path(kind);
    if dir.exists() {
        if !m.get_flag("force") {
            return Err(Error::Config(format!("{} exists (use --force to regenerate)", dir.display())));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let cfg = s.dataset_config()?;
    let manifest = match kind {
        DatasetKind::Standard => build_dataset(&cfg, s.data_seed(), &dir)?,
        DatasetKind::Unseen => build_unseen_dataset(&cfg, s.data_seed(), &dir)?,
    };
    print!("{}", summarize(&manifest, kind));
    Ok(())
}

fn cmd_pretrain(s: &Settings, m: &ArgMatches) -> Result<()> {
    let path = s.encoder_path();
    if path.exists() && !m.get_flag("force") {
        return Err(Error::Config(format!("{} exists (use --force to retrain)", path.display())));
    }
    let (params, rep) = pretrain_encoder(&pretrain_config(s)?, |e, loss, acc| {
        report(&format!("pretrain epoch {e}: loss {loss:.4} val accuracy {acc:.4}"))
    })?;
    save_encoder(&params, &rep, &path)?;
    println!("encoder: {} ({} epochs, val accuracy {:.4})", path.display(), rep.epochs, rep.final_accuracy());
    Ok(())
}

fn cmd_train(s: &Settings, m: &ArgMatches) -> Result<()> {
    let cfg = TrainConfig::from_settings(s)?;
    let data = Dataset::load(&s.dataset_path(cfg.dataset))?;
    let encoder = if cfg.needs_encoder() {
        Some(ensure_encoder(&pretrain_config(s)?, &s.encoder_path(), &report)?)
    } else {
        None
    };
    let existing = if m.get_flag("force") {
        Existing::Overwrite
    } else if m.get_flag("resume") {
        Existing::Resume
    } else {
        Existing::Refuse
    };
    let dir = s.run_dir().join(cfg.run_name());
    let rec = train(&cfg, &data, encoder.as_ref(), &dir, existing, &report)?;
    print_summary(&rec.summary);
    Ok(())
}

fn run_path(s: &Settings, m: &ArgMatches) -> Result<PathBuf> {
    match m.get_one::<String>("run") {
        Some(p) => Ok(PathBuf::from(p)),
        None => Ok(s.run_dir().join(TrainConfig::from_settings(s)?.run_name())),
    }
}

fn cmd_eval(s: &Settings, m: &ArgMatches) -> Result<()> {
    let split = match m.get_one::<String>("split").map(String::as_str) {
        Some("train") => Split::Train,
        Some("val") => Split::Val,
        _ => Split::Test,
    };
    let (cfg, params) = if m.get_flag("init") {
        let cfg = TrainConfig::from_settings(s)?;
        let model = Model::build(cfg.variant, cfg.model)?;
        let mut params = model.init_params(&mut seeded(derive_seed(cfg.seed, &[stream::INIT])));
        if cfg.needs_encoder() {
            let enc = ensure_encoder(&pretrain_config(s)?, &s.encoder_path(), &report)?;
            params.copy_prefix_from(&enc, quantlab::model::ENCODER_PREFIX)?;
        }
        (cfg, params)
    } else {
        let (cfg, params, selected) = load_selected(&run_path(s, m)?)?;
        report(&format!("{} seed {}: epoch {selected}", cfg.variant, cfg.seed));
        (cfg, params)
    };
    let data = Dataset::load(&s.dataset_path(cfg.dataset))?;
    let model = Model::build(cfg.variant, cfg.model)?;
    let ev = evaluate(&model, &params, data.split(split))?;
    print_metrics(&ev.metrics);
    Ok(())
}

fn cmd_suite(s: &Settings, m: &ArgMatches) -> Result<()> {
    let name: SuiteName = m.get_one::<String>("name").expect("required").parse()?;
    let existing = if m.get_flag("force") { Existing::Overwrite } else { Existing::Resume };
    let result = run_suite(name, s, existing, &report)?;
    print!("{}", result.table_csv());
    Ok(())
}

fn cmd_export(s: &Settings, m: &ArgMatches) -> Result<()> {
    let dir = run_path(s, m)?;
    let (cfg, _, _) = load_selected(&dir)?;
    let data = Dataset::load(&s.dataset_path(cfg.dataset))?;
    let summary = export_run(&dir, &data)?;
    print_summary(&summary);
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Divergence(_) => 4,
        Error::MissingData(_) | Error::Protocol(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = settings(sub).and_then(|s| match name {
        "gen-data" => cmd_gen_data(&s, sub),
        "pretrain-encoder" => cmd_pretrain(&s, sub),
        "train" => cmd_train(&s, sub),
        "eval" => cmd_eval(&s, sub),
        "suite" => cmd_suite(&s, sub),
        "export" => cmd_export(&s, sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
