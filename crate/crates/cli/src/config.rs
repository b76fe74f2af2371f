//! Run configuration: declared keys, `key = value` files and flag overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(glm_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<glm_core::Error> for CliError {
    fn from(e: glm_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    /// `None` marks a key without a default; commands decide if it is required.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const SEED: Key = key("seed", Some("0"), "run seed; every random choice derives from it");

pub const TOY_KEYS: &[Key] = &[
    key("out", None, "output directory"),
    key("vocab_size", Some("200"), "model vocabulary size including reserved tokens"),
    key("n_concepts", Some("64"), "number of concept words"),
    key("n_examples", Some("2000"), "caption-paired examples (split 80/10/10)"),
    key("n_text_only", Some("2000"), "text-only sentences"),
    key("d_w", Some("32"), "word vector dimension"),
    key("d_v", Some("16"), "region feature dimension"),
    key("n_regions", Some("1"), "regions per image"),
    key("images_per_synset", Some("4"), "images attached to each concept synset"),
    key("grounding_strength", Some("1.0"), "probability an image shows its caption's concept"),
    SEED,
];

pub const INDEX_KEYS: &[Key] = &[
    key("source", Some("caption"), "caption | synset"),
    key("input", None, "caption TSV (image_id<TAB>caption) or synset TSV"),
    key("vectors", None, "word vector text file"),
    key("stopwords", None, "stopword list (default: built-in English list)"),
    key("features", None, "region feature store (.vftr)"),
    key("out", None, "index file to write"),
];

const RESOURCE_KEYS: &[Key] = &[
    key("vectors", None, "word vector text file"),
    key("stopwords", None, "stopword list (default: built-in English list)"),
    key("features", None, "region feature store (.vftr)"),
    key("index", None, "caption index for scene association"),
    key("synset_index", None, "synset index for object association"),
    key("nouns", None, "noun lexicon, one noun per line"),
    key("captions", None, "caption TSV for the keyword baseline"),
    key("k", Some("16"), "images per text for associative grounding"),
    key("kappa", Some("8"), "mixture components for object association"),
];

pub fn associate_keys() -> Vec<Key> {
    let mut v = vec![
        key("strategy", Some("scene"), "scene | object | keyword"),
        key("input", None, "text file, one query per line"),
        key("out", None, "JSON lines output"),
        SEED,
    ];
    v.extend_from_slice(RESOURCE_KEYS);
    v
}

const MODEL_KEYS: &[Key] = &[
    key("vocab", None, "vocabulary file (default: built from the training texts)"),
    key("vocab_min_count", Some("2"), "minimum count when building a vocabulary"),
    key("vocab_max_size", Some("30000"), "maximum size when building a vocabulary"),
    key("d", Some("128"), "hidden size"),
    key("d_ff", Some("512"), "feed-forward size"),
    key("n_layers_text", Some("2"), "text encoder layers"),
    key("n_layers_cross", Some("2"), "cross-modal encoder layers"),
    key("n_heads", Some("4"), "attention heads"),
    key("max_len", Some("64"), "token sequence limit including [cls]"),
    key("mask_rate", Some("0.15"), "share of text tokens and regions masked"),
    key("p_norm", Some("2"), "exponent of the region regression loss"),
    key("l1_coeff", Some("1e-6"), "L1 weight on the region regression head"),
    key("freeze_text", Some("true"), "keep the text encoder fixed during pretraining"),
];

const TRAIN_KEYS: &[Key] = &[
    key("batch_size", Some("32"), "examples per optimizer step"),
    key("lr", Some("1e-4"), "Adam learning rate"),
    key("max_epochs", Some("4"), "epoch limit"),
    key("max_steps", Some("0"), "step limit (0 = none)"),
    key("mix_ratio", Some("0.5"), "share of caption-paired examples in the stream"),
    key("eval_every", Some("200"), "steps between validation passes"),
    key("patience", Some("3"), "validation passes without improvement before stopping"),
    key("eval_images", Some("placeholder"), "paired | placeholder: visual input of transferred models at evaluation"),
    key("assoc_cache", None, "association cache file, read if present and rewritten"),
];

pub fn pretrain_keys() -> Vec<Key> {
    let mut v = vec![
        key("strategy", Some("no-grounding"), "grounding strategy"),
        key("train", None, "caption TSV of paired training data"),
        key("text_only", None, "text-only corpus, one sentence per line"),
        key("valid", None, "caption TSV used for validation perplexity"),
        key("out", None, "output directory (model.glmc, vocab.txt, metrics.csv)"),
        SEED,
    ];
    v.extend_from_slice(MODEL_KEYS);
    v.extend_from_slice(TRAIN_KEYS);
    v.extend_from_slice(RESOURCE_KEYS);
    v
}

pub fn eval_keys() -> Vec<Key> {
    let mut v = vec![
        key("checkpoint", None, "model checkpoint"),
        key("vocab", None, "vocabulary file (default: vocab.txt next to the checkpoint)"),
        key("strategy", None, "grounding strategy (default: the one stored in the checkpoint)"),
        key("corpus", None, "caption TSV or plain text file to evaluate"),
        key("eval_images", Some("placeholder"), "paired | placeholder"),
        key("out", None, "JSON result file"),
        SEED,
    ];
    v.extend_from_slice(RESOURCE_KEYS);
    v
}

pub fn finetune_keys() -> Vec<Key> {
    let mut v = vec![
        key("checkpoint", None, "model checkpoint"),
        key("vocab", None, "vocabulary file (default: vocab.txt next to the checkpoint)"),
        key("strategy", None, "grounding strategy (default: the one stored in the checkpoint)"),
        key("train", None, "training task file"),
        key("test", None, "test task file"),
        key("runs", Some("8"), "independent runs; the report gives their median"),
        key("lr", Some("1e-4"), "Adam learning rate"),
        key("batch_size", Some("32"), "examples per optimizer step"),
        key("max_epochs", Some("4"), "epoch limit"),
        key("val_fraction", Some("0.1"), "training share held out for epoch selection"),
        key("out", None, "JSON report"),
        SEED,
    ];
    v.extend_from_slice(RESOURCE_KEYS);
    v
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Adds `--config`, `--threads` and one flag per key.
pub fn with_keys(mut cmd: Command, keys: &[Key]) -> Command {
    cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override it"),
        )
        .arg(
            Arg::new("threads")
                .long("threads")
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .help("worker threads (falls back to GLM_THREADS, then all cores)"),
        );
    for k in keys {
        let help = match k.default {
            Some(d) => format!("{} [default: {d}]", k.help),
            None => k.help.to_string(),
        };
        cmd = cmd.arg(Arg::new(k.name).long(flag_name(k.name)).value_name("VALUE").help(help));
    }
    cmd
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str, path: &Path, keys: &[Key]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        let k = k.trim().replace('-', "_");
        if !keys.iter().any(|d| d.name == k) {
            return Err(usage(format!("{}:{}: unknown key `{k}`", path.display(), i + 1)));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Defaults, then the config file, then flags.
    pub fn resolve(m: &ArgMatches, keys: &[Key]) -> CliResult<Self> {
        let mut values: BTreeMap<String, String> = keys
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string())))
            .collect();
        if let Some(path) = m.get_one::<String>("config") {
            let path = Path::new(path);
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            values.extend(parse_config_file(&text, path, keys)?);
        }
        for k in keys {
            if let Some(v) = m.get_one::<String>(k.name) {
                values.insert(k.name.to_string(), v.clone());
            }
        }
        Ok(RunConfig {
            values,
            threads: m.get_one::<usize>("threads").copied(),
        })
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn str(&self, key: &str) -> CliResult<&str> {
        self.opt_str(key)
            .ok_or_else(|| usage(format!("missing required key `{key}` (--{})", flag_name(key))))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|e| usage(format!("key `{key}`: cannot parse `{raw}`: {e}")))
    }

    /// An input path that must exist.
    pub fn input(&self, key: &str) -> CliResult<PathBuf> {
        let p = PathBuf::from(self.str(key)?);
        check_exists(key, &p)?;
        Ok(p)
    }

    pub fn opt_input(&self, key: &str) -> CliResult<Option<PathBuf>> {
        match self.opt_str(key) {
            Some(_) => self.input(key).map(Some),
            None => Ok(None),
        }
    }

    pub fn output(&self, key: &str) -> CliResult<PathBuf> {
        Ok(PathBuf::from(self.str(key)?))
    }
}

pub fn check_exists(key: &str, p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("`{key}`: no such file `{}`", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_rejects_unknown_keys() {
        let keys = pretrain_keys();
        let ok = parse_config_file("# c\nlr = 0.01\nbatch-size=4\n\n", Path::new("a.conf"), &keys).unwrap();
        assert_eq!(ok["lr"], "0.01");
        assert_eq!(ok["batch_size"], "4");
        let Err(CliError::Usage(m)) = parse_config_file("lr=1\nbogus = 2\n", Path::new("a.conf"), &keys) else {
            panic!("expected usage error");
        };
        assert!(m.contains("a.conf:2") && m.contains("bogus"), "{m}");
        assert!(parse_config_file("lr 1\n", Path::new("a.conf"), &keys).is_err());
    }

    #[test]
    fn every_key_list_is_unique() {
        for keys in [TOY_KEYS.to_vec(), INDEX_KEYS.to_vec(), associate_keys(), pretrain_keys(), eval_keys(), finetune_keys()] {
            let mut names: Vec<&str> = keys.iter().map(|k| k.name).collect();
            names.sort();
            let n = names.len();
            names.dedup();
            assert_eq!(names.len(), n, "{names:?}");
        }
    }
}
