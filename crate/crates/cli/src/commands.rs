use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use glm_core::assoc::{
    associate_keyword_baseline, associate_object, associate_scene, build_caption_index, build_synset_index,
    load_synsets, surviving_tokens, text_seed, AssocResources, Association, CaptionCorpus, NounLexicon,
};
use glm_core::downstream::{finetune, FinetuneConfig, Task};
use glm_core::embed::{default_stopwords, encode_cbow_tokens, load_stopwords, WordEmbeddingTable};
use glm_core::model::{CrossModalModel, ModelConfig, Vocab};
use glm_core::toydata::{generate_grounded_corpus, ToySpec};
use glm_core::train::{pretrain, AssocCache, EvalImages, Grounding, Strategy, TextExample, TrainConfig, TrainData};
use glm_core::vindex::{ImageFeatureStore, ImageKeyIndex};
use glm_core::Error;
use serde_json::json;

use crate::config::{usage, CliResult, RunConfig};

pub fn make_toy_data(c: &RunConfig) -> CliResult<()> {
    let spec = ToySpec {
        vocab_size: c.get("vocab_size")?,
        n_concepts: c.get("n_concepts")?,
        n_examples: c.get("n_examples")?,
        n_text_only: c.get("n_text_only")?,
        d_w: c.get("d_w")?,
        d_v: c.get("d_v")?,
        n_regions: c.get("n_regions")?,
        images_per_synset: c.get("images_per_synset")?,
        grounding_strength: c.get("grounding_strength")?,
        seed: c.get("seed")?,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let out = c.output("out")?;
    let data = generate_grounded_corpus(&spec)?;
    data.write(&out)?;
    println!(
        "wrote {} (train {}, valid {}, test {}, {} images)",
        out.display(),
        data.meta.n_train,
        data.meta.n_valid,
        data.meta.n_test,
        data.store.len()
    );
    Ok(())
}

fn load_table(c: &RunConfig) -> CliResult<Option<WordEmbeddingTable>> {
    let Some(path) = c.opt_input("vectors")? else {
        return Ok(None);
    };
    let mut table = WordEmbeddingTable::load(path)?;
    if let Some(sw) = c.opt_input("stopwords")? {
        table.set_stopwords(load_stopwords(sw)?);
    }
    Ok(Some(table))
}

fn stopword_set(c: &RunConfig) -> CliResult<HashSet<String>> {
    Ok(match c.opt_input("stopwords")? {
        Some(p) => load_stopwords(p)?,
        None => default_stopwords(),
    })
}

pub fn build_index(c: &RunConfig) -> CliResult<()> {
    let input = c.input("input")?;
    let table = load_table(c)?.ok_or_else(|| usage("missing required key `vectors` (--vectors)"))?;
    let store = ImageFeatureStore::load(c.input("features")?)?;
    let out = c.output("out")?;
    let report = match c.str("source")? {
        "caption" => {
            let corpus = CaptionCorpus::load(&input)?;
            if corpus.is_empty() {
                return Err(Error::Empty(format!("{}: no entries", input.display())).into());
            }
            build_caption_index(&corpus, &table, &store)?
        }
        "synset" => {
            let synsets = load_synsets(&input)?;
            if synsets.is_empty() {
                return Err(Error::Empty(format!("{}: no entries", input.display())).into());
            }
            build_synset_index(&synsets, &table, &store)?
        }
        other => return Err(usage(format!("key `source`: expected caption|synset, got `{other}`"))),
    };
    report.index.save(&out)?;
    println!("{}", json!({"count": report.index.len(), "skipped": report.skipped}));
    Ok(())
}

/// Everything optional an associative or transferred run may read.
struct Resources {
    table: Option<WordEmbeddingTable>,
    store: Option<ImageFeatureStore>,
    index: Option<ImageKeyIndex>,
    synset_index: Option<ImageKeyIndex>,
    lexicon: Option<NounLexicon>,
    captions: Option<CaptionCorpus>,
}

impl Resources {
    fn load(c: &RunConfig) -> CliResult<Self> {
        let opt_index = |key: &str| -> CliResult<Option<ImageKeyIndex>> {
            Ok(match c.opt_input(key)? {
                Some(p) => Some(ImageKeyIndex::load(p)?),
                None => None,
            })
        };
        Ok(Resources {
            table: load_table(c)?,
            store: match c.opt_input("features")? {
                Some(p) => Some(ImageFeatureStore::load(p)?),
                None => None,
            },
            index: opt_index("index")?,
            synset_index: opt_index("synset_index")?,
            lexicon: match c.opt_input("nouns")? {
                Some(p) => Some(NounLexicon::load(p)?),
                None => None,
            },
            captions: match c.opt_input("captions")? {
                Some(p) => Some(CaptionCorpus::load(p)?),
                None => None,
            },
        })
    }

    fn assoc(&self) -> Option<AssocResources<'_>> {
        Some(AssocResources {
            table: self.table.as_ref()?,
            store: self.store.as_ref()?,
            caption_index: self.index.as_ref(),
            synset_index: self.synset_index.as_ref(),
            lexicon: self.lexicon.as_ref(),
            captions: self.captions.as_ref(),
        })
    }

    fn grounding<'a>(&'a self, vocab: &'a Vocab, c: &RunConfig) -> CliResult<Grounding<'a>> {
        Ok(Grounding {
            vocab,
            store: self.store.as_ref(),
            assoc: self.assoc(),
            k: c.get("k")?,
            kappa: c.get("kappa")?,
            assoc_seed: c.get("seed")?,
        })
    }
}

fn need<'a, T>(v: &'a Option<T>, key: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| usage(format!("missing required key `{key}` (--{})", crate::config::flag_name(key))))
}

fn association_record(line: usize, strategy: &str, a: &Association, reason: Option<&str>) -> serde_json::Value {
    let items: Vec<_> = a
        .items
        .iter()
        .map(|it| json!({"id": it.id, "rank": it.rank, "similarity": it.similarity}))
        .collect();
    let mut rec = json!({"line": line, "strategy": strategy, "items": items});
    if let Some(r) = reason {
        rec["reason"] = json!(r);
    }
    rec
}

pub fn associate(c: &RunConfig) -> CliResult<()> {
    let strategy = c.str("strategy")?.to_string();
    let input = c.input("input")?;
    let k: usize = c.get("k")?;
    let kappa: usize = c.get("kappa")?;
    let seed: u64 = c.get("seed")?;
    if k == 0 {
        return Err(usage("key `k` must be at least 1"));
    }
    let res = Resources::load(c)?;
    let store = need(&res.store, "features")?;
    let stopwords = stopword_set(c)?;
    let text = fs::read_to_string(&input)?;
    let mut out = BufWriter::new(File::create(c.output("out")?)?);
    for (i, line) in text.lines().enumerate() {
        let tokens = surviving_tokens(line);
        let (a, reason) = match strategy.as_str() {
            "scene" => {
                let table = need(&res.table, "vectors")?;
                let a = associate_scene(&tokens, need(&res.index, "index")?, store, table, k)?;
                let degenerate = encode_cbow_tokens(&tokens, table).is_degenerate;
                (a, degenerate.then_some("no in-vocabulary token"))
            }
            "object" => {
                let a = associate_object(
                    &tokens,
                    need(&res.synset_index, "synset_index")?,
                    store,
                    need(&res.table, "vectors")?,
                    need(&res.lexicon, "nouns")?,
                    k,
                    kappa,
                    text_seed(seed, &tokens),
                )?;
                let empty = a.is_empty();
                (a, empty.then_some("no lexicon noun with a word vector"))
            }
            "keyword" => {
                let corpus = need(&res.captions, "captions")?;
                let a = associate_keyword_baseline(&tokens, corpus, &|t| stopwords.contains(t), store, k)?;
                let empty = a.is_empty();
                (a, empty.then_some("empty caption corpus"))
            }
            other => return Err(usage(format!("key `strategy`: expected scene|object|keyword, got `{other}`"))),
        };
        serde_json::to_writer(&mut out, &association_record(i + 1, &strategy, &a, reason))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn eval_images(c: &RunConfig) -> CliResult<EvalImages> {
    match c.str("eval_images")? {
        "paired" => Ok(EvalImages::Paired),
        "placeholder" => Ok(EvalImages::Placeholder),
        other => Err(usage(format!("key `eval_images`: expected paired|placeholder, got `{other}`"))),
    }
}

fn strategy(c: &RunConfig, model: Option<&CrossModalModel>) -> CliResult<Strategy> {
    let name = match (c.opt_str("strategy"), model.and_then(|m| m.meta.get("strategy"))) {
        (Some(s), _) => s.to_string(),
        (None, Some(s)) => s.clone(),
        (None, None) => Strategy::NoGrounding.name().to_string(),
    };
    Strategy::parse(&name).map_err(|e| usage(e.to_string()))
}

fn open_cache(c: &RunConfig) -> CliResult<AssocCache> {
    match c.opt_str("assoc_cache") {
        Some(p) if Path::new(p).exists() => Ok(AssocCache::open(p)?),
        _ => Ok(AssocCache::new()),
    }
}

pub fn pretrain_cmd(c: &RunConfig) -> CliResult<()> {
    let strategy = strategy(c, None)?;
    let seed: u64 = c.get("seed")?;
    let train = match c.opt_input("train")? {
        Some(p) => CaptionCorpus::load(p)?,
        None => CaptionCorpus::default(),
    };
    let text_only = match c.opt_input("text_only")? {
        Some(p) => read_lines(&p)?,
        None => Vec::new(),
    };
    let valid: Vec<TextExample> = CaptionCorpus::load(c.input("valid")?)?
        .captions
        .iter()
        .map(TextExample::from)
        .collect();
    let out = c.output("out")?;
    let vocab = match c.opt_input("vocab")? {
        Some(p) => Vocab::load(p)?,
        None => {
            let max: usize = c.get("vocab_max_size")?;
            let texts = train.captions.iter().map(|x| x.text.as_str()).chain(text_only.iter().map(String::as_str));
            Vocab::build(texts, c.get("vocab_min_count")?, Some(max))
        }
    };
    let res = Resources::load(c)?;
    let (d_v, n_regions) = res.store.as_ref().map_or((1, 1), |s| (s.feat_dim(), s.n_regions()));
    let k: usize = c.get("k")?;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d: c.get("d")?,
        d_ff: c.get("d_ff")?,
        d_v,
        n_layers_text: c.get("n_layers_text")?,
        n_layers_cross: c.get("n_layers_cross")?,
        n_heads: c.get("n_heads")?,
        max_len: c.get("max_len")?,
        k_max: k.max(1),
        n_regions,
        mask_rate: c.get("mask_rate")?,
        p_norm: c.get("p_norm")?,
        l1_coeff: c.get("l1_coeff")?,
        freeze_text: c.get("freeze_text")?,
        init_seed: seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let max_steps: usize = c.get("max_steps")?;
    let tc = TrainConfig {
        batch_size: c.get("batch_size")?,
        lr: c.get("lr")?,
        max_epochs: c.get("max_epochs")?,
        max_steps: (max_steps > 0).then_some(max_steps),
        seed,
        mix_ratio: c.get("mix_ratio")?,
        eval_every: c.get("eval_every")?,
        patience: c.get("patience")?,
        k,
        kappa: c.get("kappa")?,
        eval_images: eval_images(c)?,
    };
    let mut model = CrossModalModel::new(cfg)?;
    let data = TrainData {
        grounding: res.grounding(&vocab, c)?,
        paired: &train.captions,
        text_only: &text_only,
        valid: &valid,
    };
    let mut cache = open_cache(c)?;
    let report = pretrain(&mut model, strategy, &data, &tc, &mut cache)?;
    model.meta.insert("strategy".into(), strategy.name().into());
    fs::create_dir_all(&out)?;
    model.save(out.join("model.glmc"))?;
    vocab.save(out.join("vocab.txt"))?;
    report.write_csv(out.join("metrics.csv"))?;
    if let Some(p) = c.opt_str("assoc_cache") {
        cache.save(p)?;
    }
    println!(
        "{}: {} steps, best valid ppl {:.4} at step {}",
        strategy.name(),
        report.steps,
        report.best_valid_ppl,
        report.best_step
    );
    Ok(())
}

fn load_model(c: &RunConfig) -> CliResult<(CrossModalModel, Vocab)> {
    let ckpt = c.input("checkpoint")?;
    let vocab_path = match c.opt_str("vocab") {
        Some(_) => c.input("vocab")?,
        None => {
            let p = ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt");
            crate::config::check_exists("vocab", &p)?;
            p
        }
    };
    Ok((CrossModalModel::load(ckpt)?, Vocab::load(vocab_path)?))
}

/// Caption TSV when every line has a tab, plain sentences otherwise.
fn read_eval_corpus(path: &Path) -> CliResult<Vec<TextExample>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if !lines.is_empty() && lines.iter().all(|l| l.contains('\t')) {
        Ok(CaptionCorpus::parse(&text, path)?.captions.iter().map(TextExample::from).collect())
    } else {
        Ok(lines.into_iter().map(|l| TextExample::text_only(l.trim())).collect())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn eval_ppl(c: &RunConfig) -> CliResult<()> {
    let (model, vocab) = load_model(c)?;
    let strategy = strategy(c, Some(&model))?;
    let corpus_path = c.input("corpus")?;
    let examples = read_eval_corpus(&corpus_path)?;
    let images = eval_images(c)?;
    let res = Resources::load(c)?;
    let g = res.grounding(&vocab, c)?;
    let ppl = g.evaluate(&model, strategy, &examples, images, c.get("seed")?, &mut AssocCache::new())?;
    let corpus = file_name(&corpus_path);
    println!("{}\t{}\t{:.6}", strategy.name(), corpus, ppl);
    if let Some(out) = c.opt_str("out") {
        let rec = json!({
            "strategy": strategy.name(),
            "corpus": corpus,
            "eval_images": c.str("eval_images")?,
            "examples": examples.len(),
            "ppl": ppl,
        });
        fs::write(out, serde_json::to_string_pretty(&rec)? + "\n")?;
    }
    Ok(())
}

pub fn finetune_cmd(c: &RunConfig) -> CliResult<()> {
    let (model, vocab) = load_model(c)?;
    let strategy = strategy(c, Some(&model))?;
    let train = Task::load(c.input("train")?, None)?;
    let test = Task::load(c.input("test")?, Some(&train.labels))?;
    let cfg = FinetuneConfig {
        runs: c.get("runs")?,
        seed: c.get("seed")?,
        lr: c.get("lr")?,
        batch_size: c.get("batch_size")?,
        max_epochs: c.get("max_epochs")?,
        val_fraction: c.get("val_fraction")?,
    };
    let out: PathBuf = c.output("out")?;
    let res = Resources::load(c)?;
    let g = res.grounding(&vocab, c)?;
    let report = finetune(&model, &train, &test, strategy, &g, &cfg, &mut AssocCache::new())?;
    fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}: median {:.4} over {} runs", strategy.name(), report.median, report.runs.len());
    Ok(())
}
