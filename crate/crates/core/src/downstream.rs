//! Fine-tuning on text-only classification and ordinal tasks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::tokenize;
use crate::error::{Error, Result};
use crate::model::vocab::encode_pair;
use crate::model::{CrossModalModel, VisualInput};
use crate::tensorcore::{AdamState, Graph, Tensor, Var};
use crate::train::{AssocCache, Grounding, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Spearman,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Score(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    pub label: Label,
    pub text_a: String,
    pub text_b: Option<String>,
    /// 1-based line in the source file.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub metric: MetricKind,
    /// Declared class names; class id is the position. Empty for scores.
    pub labels: Vec<String>,
    pub examples: Vec<TaskExample>,
}

impl Task {
    /// Parses `label<TAB>text_a[<TAB>text_b]` lines after a header line
    /// `metric=accuracy|spearman[<TAB>labels=a,b,...]`. Without `labels=`
    /// (and without `known_labels`) the class set is taken from the file.
    pub fn parse(text: &str, origin: &Path, known_labels: Option<&[String]>) -> Result<Task> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or_else(|| Error::Empty(format!("{}: empty task file", origin.display())))?;
        let mut metric = None;
        let mut declared: Option<Vec<String>> = None;
        for field in header.split('\t') {
            match field.split_once('=') {
                Some(("metric", "accuracy")) => metric = Some(MetricKind::Accuracy),
                Some(("metric", "spearman")) => metric = Some(MetricKind::Spearman),
                Some(("labels", ls)) => declared = Some(ls.split(',').map(|s| s.trim().to_string()).collect()),
                _ => {
                    return Err(Error::parse(
                        origin,
                        hline + 1,
                        format!("bad header field `{field}` (expected metric=accuracy|spearman and optional labels=...)"),
                    ))
                }
            }
        }
        let metric = metric.ok_or_else(|| Error::parse(origin, hline + 1, "header lacks metric=accuracy|spearman"))?;
        let fixed: Option<Vec<String>> = known_labels.map(<[String]>::to_vec).or(declared);
        let mut labels = fixed.clone().unwrap_or_default();
        let mut examples = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 2 || f.len() > 3 {
                return Err(Error::parse(origin, lineno, format!("expected 2 or 3 tab-separated fields, found {}", f.len())));
            }
            let raw = f[0].trim();
            let label = match metric {
                MetricKind::Spearman => Label::Score(
                    raw.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse(origin, lineno, format!("label `{raw}` is not a number")))?,
                ),
                MetricKind::Accuracy => match labels.iter().position(|l| l == raw) {
                    Some(c) => Label::Class(c),
                    None if fixed.is_none() => {
                        labels.push(raw.to_string());
                        Label::Class(labels.len() - 1)
                    }
                    None => {
                        return Err(Error::parse(
                            origin,
                            lineno,
                            format!("label `{raw}` outside the declared set {{{}}}", labels.join(",")),
                        ))
                    }
                },
            };
            examples.push(TaskExample {
                label,
                text_a: f[1].to_string(),
                text_b: f.get(2).map(|s| s.to_string()).filter(|s| !s.is_empty()),
                line: lineno,
            });
        }
        if examples.is_empty() {
            return Err(Error::Empty(format!("{}: no examples", origin.display())));
        }
        if metric == MetricKind::Accuracy && labels.len() < 2 {
            return Err(Error::invalid(format!("{}: need at least two classes", origin.display())));
        }
        Ok(Task {
            metric,
            labels,
            examples,
        })
    }

    pub fn load(path: impl AsRef<Path>, known_labels: Option<&[String]>) -> Result<Task> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path, known_labels)
    }

    fn n_outputs(&self) -> usize {
        match self.metric {
            MetricKind::Accuracy => self.labels.len(),
            MetricKind::Spearman => 1,
        }
    }

    /// First `1 - fraction` of the examples and the rest.
    pub fn split(&self, fraction: f64) -> (Task, Task) {
        let n_b = ((self.examples.len() as f64) * fraction).round() as usize;
        let n_a = self.examples.len().saturating_sub(n_b);
        let part = |ex: &[TaskExample]| Task {
            metric: self.metric,
            labels: self.labels.clone(),
            examples: ex.to_vec(),
        };
        (part(&self.examples[..n_a]), part(&self.examples[n_a..]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub runs: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Share of the training file held out for epoch selection.
    pub val_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            runs: 8,
            seed: 0,
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 4,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub metric: MetricKind,
    pub strategy: String,
    pub seeds: Vec<u64>,
    /// One score per completed run.
    pub runs: Vec<f64>,
    pub failed: Vec<String>,
    pub median: f64,
    pub config_digest: String,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(Error::invalid(format!(
            "spearman needs two equal-length inputs of at least 2 values, got {} and {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman: non-finite input"));
    }
    let (rp, rg) = (ranks(pred), ranks(gold));
    let n = rp.len() as f64;
    let (mp, mg) = (rp.iter().sum::<f64>() / n, rg.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (a, b) in rp.iter().zip(&rg) {
        cov += (a - mp) * (b - mg);
        vp += (a - mp) * (a - mp);
        vg += (b - mg) * (b - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::invalid("spearman is undefined for a constant input"));
    }
    Ok((cov / (vp * vg).sqrt()).clamp(-1.0, 1.0))
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() || pred.is_empty() {
        return Err(Error::invalid("accuracy needs two equal-length non-empty inputs"));
    }
    Ok(pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Model-ready task example.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub visual: VisualInput,
    pub label: Label,
}

/// Tokenizes every example and resolves its visual input: the placeholder
/// unless `strategy` is associative, in which case images are retrieved
/// from the full (unmasked) text.
pub fn encode_task(
    task: &Task,
    model: &CrossModalModel,
    strategy: Strategy,
    grounding: &Grounding,
    cache: &mut AssocCache,
) -> Result<Vec<Encoded>> {
    grounding.check(strategy, model)?;
    let mut out = Vec::with_capacity(task.examples.len());
    for ex in &task.examples {
        let tokens = encode_pair(grounding.vocab, &ex.text_a, ex.text_b.as_deref(), model.config.max_len);
        let visual = match (strategy.association(), grounding.assoc) {
            (Some(a), Some(res)) => {
                let mut words = tokenize(&ex.text_a);
                if let Some(b) = &ex.text_b {
                    words.extend(tokenize(b));
                }
                let params = crate::assoc::AssocParams {
                    strategy: a,
                    k: grounding.k,
                    kappa: grounding.kappa,
                    seed: grounding.assoc_seed,
                };
                let images = cache.images(&res, &params, &words)?;
                VisualInput::from_images(&images, model.config.d_v)?
            }
            _ => VisualInput::Placeholder,
        };
        out.push(Encoded {
            tokens,
            visual,
            label: ex.label,
        });
    }
    Ok(out)
}

fn scores(model: &CrossModalModel, g: &mut Graph<f32>, vars: &[Var], ex: &Encoded) -> Result<Var> {
    let out = model.forward_example(g, vars, &ex.tokens, &ex.visual)?;
    model.cls_scores(g, vars, &out)
}

/// Class ids (accuracy) or scores (spearman) predicted for `data`.
pub fn predict(model: &CrossModalModel, data: &[Encoded]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        for ex in chunk {
            let s = scores(model, &mut g, &vars, ex)?;
            let v = g.value(s).data();
            out.push(if v.len() == 1 {
                v[0] as f64
            } else {
                let mut best = 0;
                for (i, x) in v.iter().enumerate() {
                    if *x > v[best] {
                        best = i;
                    }
                }
                best as f64
            });
        }
    }
    Ok(out)
}

pub fn score(metric: MetricKind, pred: &[f64], data: &[Encoded]) -> Result<f64> {
    match metric {
        MetricKind::Accuracy => {
            let gold: Vec<usize> = data
                .iter()
                .map(|e| match e.label {
                    Label::Class(c) => c,
                    Label::Score(s) => s as usize,
                })
                .collect();
            let p: Vec<usize> = pred.iter().map(|&x| x as usize).collect();
            accuracy(&p, &gold)
        }
        MetricKind::Spearman => {
            let gold: Vec<f64> = data
                .iter()
                .map(|e| match e.label {
                    Label::Score(s) => s,
                    Label::Class(c) => c as f64,
                })
                .collect();
            spearman(pred, &gold)
        }
    }
}

fn batch_loss(model: &CrossModalModel, batch: &[&Encoded]) -> Result<Option<crate::tensorcore::Gradients<f32>>> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let mut parts = Vec::with_capacity(batch.len());
    for ex in batch {
        let s = scores(model, &mut g, &vars, ex)?;
        parts.push(match ex.label {
            Label::Class(c) => g.cross_entropy_sum(s, &[c], &[true])?,
            Label::Score(y) => {
                let target = Tensor::matrix(1, 1, vec![y as f32])?;
                g.lp_distance_sum(s, &target, &[true], 2.0)?
            }
        });
    }
    let Some(&first) = parts.first() else {
        return Ok(None);
    };
    let mut total = first;
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    let loss = g.scale(total, 1.0 / parts.len() as f32)?;
    Ok(Some(g.backward(loss)?))
}

/// One fine-tuning run; returns the test score of the epoch with the best
/// validation score.
#[allow(clippy::too_many_arguments)]
pub fn finetune_once(
    pretrained: &CrossModalModel,
    strategy: Strategy,
    metric: MetricKind,
    n_out: usize,
    train: &[Encoded],
    val: &[Encoded],
    test: &[Encoded],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<f64> {
    let mut model = pretrained.clone();
    model.add_cls_head(n_out, seed)?;
    model.set_placeholder_trainable(strategy.is_transferred());
    let mut adam = AdamState::new(&model.params, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..cfg.max_epochs.max(1) {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &train[i]).collect();
            if let Some(grads) = batch_loss(&model, &batch)? {
                adam.step(&mut model.params, &grads)?;
            }
        }
        let test_score = score(metric, &predict(&model, test)?, test)?;
        let val_score = if val.is_empty() {
            test_score
        } else {
            score(metric, &predict(&model, val)?, val).unwrap_or(f64::NEG_INFINITY)
        };
        if best.is_none_or(|(v, _)| val_score > v) {
            best = Some((val_score, test_score));
        }
    }
    Ok(best.map(|(_, t)| t).expect("at least one epoch"))
}

/// The multi-run protocol: `cfg.runs` runs with seeds `cfg.seed + i`,
/// reported with their median.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    pretrained: &CrossModalModel,
    train_task: &Task,
    test_task: &Task,
    strategy: Strategy,
    grounding: &Grounding,
    cfg: &FinetuneConfig,
    cache: &mut AssocCache,
) -> Result<TaskReport> {
    if train_task.metric != test_task.metric {
        return Err(Error::invalid("train and test files declare different metrics"));
    }
    if cfg.runs == 0 {
        return Err(Error::invalid("runs must be positive"));
    }
    let (fit, val) = if cfg.val_fraction > 0.0 && train_task.examples.len() >= 10 {
        train_task.split(cfg.val_fraction)
    } else {
        (train_task.clone(), Task { examples: Vec::new(), ..train_task.clone() })
    };
    let fit = encode_task(&fit, pretrained, strategy, grounding, cache)?;
    let val = encode_task(&val, pretrained, strategy, grounding, cache)?;
    let test = encode_task(test_task, pretrained, strategy, grounding, cache)?;
    let n_out = train_task.n_outputs();
    let seeds: Vec<u64> = (0..cfg.runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let results: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&s| finetune_once(pretrained, strategy, train_task.metric, n_out, &fit, &val, &test, cfg, s))
        .collect();
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (s, r) in seeds.iter().zip(results) {
        match r {
            Ok(v) => runs.push(v),
            Err(e) => failed.push(format!("seed {s}: {e}")),
        }
    }
    let median = median(&runs).ok_or_else(|| Error::Empty(format!("every run failed: {}", failed.join("; "))))?;
    let digest_src = serde_json::to_string(&(cfg, strategy.name(), &pretrained.config))?;
    let config_digest = Sha256::digest(digest_src.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(TaskReport {
        metric: train_task.metric,
        strategy: strategy.name().into(),
        seeds,
        runs,
        failed,
        median,
        config_digest,
    })
}
