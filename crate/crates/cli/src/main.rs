mod commands;
mod config;

use std::process::ExitCode;

use clap::Command;

use config::{with_keys, CliResult, Key, RunConfig};

type Handler = fn(&RunConfig) -> CliResult<()>;

fn subcommands() -> Vec<(&'static str, &'static str, Vec<Key>, Handler)> {
    vec![
        (
            "make-toy-data",
            "generate the synthetic grounded corpus, feature store and word vectors",
            config::TOY_KEYS.to_vec(),
            commands::make_toy_data,
        ),
        (
            "build-index",
            "build a retrieval index over caption or synset keys",
            config::INDEX_KEYS.to_vec(),
            commands::build_index,
        ),
        (
            "associate",
            "retrieve K images for every line of a text file (JSON lines)",
            config::associate_keys(),
            commands::associate,
        ),
        ("pretrain", "pretrain the cross-modal encoder", config::pretrain_keys(), commands::pretrain_cmd),
        ("eval-ppl", "masked-token perplexity of a checkpoint", config::eval_keys(), commands::eval_ppl),
        (
            "finetune",
            "fine-tune a classifier head over several seeded runs",
            config::finetune_keys(),
            commands::finetune_cmd,
        ),
    ]
}

fn init_threads(n: Option<usize>) -> CliResult<()> {
    let n = match n {
        Some(n) => Some(n),
        None => match std::env::var("GLM_THREADS") {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| config::usage(format!("GLM_THREADS must be a number, got `{v}`")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(config::usage("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config::usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let table = subcommands();
    let mut cli = Command::new("glm")
        .about("Visually grounded masked language modeling at desk scale")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, keys, _) in &table {
        cli = cli.subcommand(with_keys(Command::new(*name).about(*about), keys));
    }
    let matches = match cli.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let (_, _, keys, handler) = table.iter().find(|t| t.0 == name).expect("registered subcommand");
    let run = || -> CliResult<()> {
        let cfg = RunConfig::resolve(sub, keys)?;
        init_threads(cfg.threads)?;
        handler(&cfg)
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("glm {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
