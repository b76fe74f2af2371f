//! Pretraining for every grounding strategy.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assoc::{AssocParams, AssocResources, AssocStrategy, Association, Caption};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::vocab::{encode_single, Vocab};
use crate::model::{mask_tokens, perplexity, CrossModalModel, LossMode, MaskedBatch, MaskedExample, VisualInput};
use crate::tensorcore::AdamState;
use crate::vindex::ImageFeatureStore;

const EVAL_SALT: u64 = 0x5eed_e7a1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    NoGrounding,
    TransferredI2T,
    TransferredT2I,
    TransferredBoth,
    AssociativeScene,
    AssociativeObject,
    AssociativeKeyword,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::NoGrounding,
        Strategy::TransferredI2T,
        Strategy::TransferredT2I,
        Strategy::TransferredBoth,
        Strategy::AssociativeScene,
        Strategy::AssociativeObject,
        Strategy::AssociativeKeyword,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoGrounding => "no-grounding",
            Strategy::TransferredI2T => "transferred-i2t",
            Strategy::TransferredT2I => "transferred-t2i",
            Strategy::TransferredBoth => "transferred-both",
            Strategy::AssociativeScene => "associative-scene",
            Strategy::AssociativeObject => "associative-object",
            Strategy::AssociativeKeyword => "associative-keyword",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|x| x.name()).collect();
            Error::invalid(format!("unknown strategy `{s}` (expected one of {})", names.join(", ")))
        })
    }

    pub fn is_transferred(self) -> bool {
        matches!(
            self,
            Strategy::TransferredI2T | Strategy::TransferredT2I | Strategy::TransferredBoth
        )
    }

    pub fn association(self) -> Option<AssocStrategy> {
        match self {
            Strategy::AssociativeScene => Some(AssocStrategy::Scene),
            Strategy::AssociativeObject => Some(AssocStrategy::Object),
            Strategy::AssociativeKeyword => Some(AssocStrategy::KeywordBaseline),
            _ => None,
        }
    }

    fn loss_mode(self) -> LossMode {
        match self {
            Strategy::TransferredT2I => LossMode { jmlm: false, jmrm: true },
            Strategy::TransferredBoth => LossMode { jmlm: true, jmrm: true },
            _ => LossMode { jmlm: true, jmrm: false },
        }
    }
}

/// Visual input used by transferred strategies at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalImages {
    /// The example's own image when it has one.
    Paired,
    Placeholder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Share of caption-paired examples in the training stream.
    pub mix_ratio: f64,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Images per example for associative strategies.
    pub k: usize,
    pub kappa: usize,
    pub eval_images: EvalImages,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            max_epochs: 4,
            max_steps: None,
            seed: 0,
            mix_ratio: 0.5,
            eval_every: 200,
            patience: 3,
            k: 16,
            kappa: 8,
            eval_images: EvalImages::Placeholder,
        }
    }
}

/// A text and, for caption-paired examples, its image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextExample {
    pub text: String,
    pub image_id: Option<String>,
}

impl From<&Caption> for TextExample {
    fn from(c: &Caption) -> Self {
        TextExample {
            text: c.text.clone(),
            image_id: Some(c.image_id.clone()),
        }
    }
}

impl TextExample {
    pub fn text_only(text: impl Into<String>) -> Self {
        TextExample {
            text: text.into(),
            image_id: None,
        }
    }
}

/// Deterministic infinite stream mixing the two corpora. Each draw is
/// caption-paired with probability `mix_ratio`; each corpus is walked in a
/// fresh shuffled order per pass.
#[derive(Clone, Debug)]
pub struct MixedStream {
    paired: Vec<TextExample>,
    text_only: Vec<TextExample>,
    ratio: f64,
    rng: ChaCha8Rng,
    orders: [Vec<usize>; 2],
    cursor: [usize; 2],
}

pub fn mix_corpora(paired: &[Caption], text_only: &[String], mix_ratio: f64, seed: u64) -> Result<MixedStream> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(Error::invalid(format!("mix_ratio {mix_ratio} outside [0, 1]")));
    }
    if mix_ratio > 0.0 && paired.is_empty() {
        return Err(Error::Empty("mixing: caption-paired corpus is empty".into()));
    }
    if mix_ratio < 1.0 && text_only.is_empty() {
        return Err(Error::Empty("mixing: text-only corpus is empty".into()));
    }
    Ok(MixedStream {
        paired: paired.iter().map(TextExample::from).collect(),
        text_only: text_only.iter().map(TextExample::text_only).collect(),
        ratio: mix_ratio,
        rng: ChaCha8Rng::seed_from_u64(seed),
        orders: [Vec::new(), Vec::new()],
        cursor: [0, 0],
    })
}

impl MixedStream {
    /// Draws per epoch: each text-only example once, with paired examples
    /// making up the `mix_ratio` share (or one pass over the paired corpus
    /// when there is no text-only share).
    pub fn epoch_len(&self) -> usize {
        if self.ratio >= 1.0 {
            self.paired.len()
        } else {
            (self.text_only.len() as f64 / (1.0 - self.ratio)).round() as usize
        }
    }

    fn next_from(&mut self, which: usize) -> TextExample {
        let len = if which == 0 { self.paired.len() } else { self.text_only.len() };
        if self.cursor[which] == self.orders[which].len() {
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(&mut self.rng);
            self.orders[which] = order;
            self.cursor[which] = 0;
        }
        let i = self.orders[which][self.cursor[which]];
        self.cursor[which] += 1;
        if which == 0 {
            self.paired[i].clone()
        } else {
            self.text_only[i].clone()
        }
    }
}

impl Iterator for MixedStream {
    type Item = TextExample;

    fn next(&mut self) -> Option<TextExample> {
        let paired = if self.ratio >= 1.0 {
            true
        } else if self.ratio <= 0.0 {
            false
        } else {
            self.rng.random_bool(self.ratio)
        };
        Some(self.next_from(if paired { 0 } else { 1 }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CachedHit {
    id: String,
    similarity: f64,
}

/// Associations keyed by a SHA-256 of the query parameters and the
/// surviving tokens.
#[derive(Clone, Debug, Default)]
pub struct AssocCache {
    map: HashMap<[u8; 32], Vec<CachedHit>>,
    pub hits: usize,
    pub misses: usize,
}

const CACHE_MAGIC: &[u8; 4] = b"GLMA";
const CACHE_VERSION: u32 = 1;

impl AssocCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn key(params: &AssocParams, tokens: &[String]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(params.strategy.name().as_bytes());
        h.update((params.k as u64).to_le_bytes());
        h.update((params.kappa as u64).to_le_bytes());
        h.update(params.seed.to_le_bytes());
        for t in tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().into()
    }

    /// Region features of the associated images, in rank order.
    pub fn images(&mut self, res: &AssocResources, params: &AssocParams, tokens: &[String]) -> Result<Vec<Vec<f32>>> {
        let key = Self::key(params, tokens);
        if let Some(hits) = self.map.get(&key) {
            self.hits += 1;
            return hits
                .iter()
                .map(|h| res.store.features_by_id(&h.id).map(<[f32]>::to_vec))
                .collect();
        }
        self.misses += 1;
        let a: Association = res.associate(tokens, params)?;
        let hits = a
            .items
            .iter()
            .map(|i| CachedHit {
                id: i.id.clone(),
                similarity: i.similarity,
            })
            .collect();
        self.map.insert(key, hits);
        Ok(a.items.into_iter().map(|i| i.features).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(CACHE_MAGIC)?;
        w.u32(CACHE_VERSION)?;
        let mut keys: Vec<&[u8; 32]> = self.map.keys().collect();
        keys.sort();
        w.u64(keys.len() as u64)?;
        for k in keys {
            w.bytes(k)?;
            let hits = &self.map[k];
            w.u32(hits.len() as u32)?;
            for h in hits {
                w.str(&h.id)?;
                w.u64(h.similarity.to_bits())?;
            }
        }
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r, "association cache");
        r.magic(CACHE_MAGIC)?;
        let v = r.u32()?;
        if v != CACHE_VERSION {
            return Err(r.err(format!("version {v} is not supported (expected version {CACHE_VERSION})")));
        }
        let n = r.u64()?;
        let mut map = HashMap::new();
        for _ in 0..n {
            let mut k = [0u8; 32];
            r.exact(&mut k)?;
            let m = r.u32()?;
            let mut hits = Vec::with_capacity(m as usize);
            for _ in 0..m {
                let id = r.str()?;
                let similarity = f64::from_bits(r.u64()?);
                hits.push(CachedHit { id, similarity });
            }
            map.insert(k, hits);
        }
        r.finish()?;
        Ok(AssocCache {
            map,
            hits: 0,
            misses: 0,
        })
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(Self::new());
        }
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Everything needed to turn a text into model input.
#[derive(Clone, Copy)]
pub struct Grounding<'a> {
    pub vocab: &'a Vocab,
    /// Paired images for transferred strategies.
    pub store: Option<&'a ImageFeatureStore>,
    pub assoc: Option<AssocResources<'a>>,
    pub k: usize,
    pub kappa: usize,
    /// Seeds the object-association mixtures.
    pub assoc_seed: u64,
}

impl<'a> Grounding<'a> {
    /// Errors when `strategy` lacks a resource it needs.
    pub fn check(&self, strategy: Strategy, model: &CrossModalModel) -> Result<()> {
        let cfg = &model.config;
        if self.vocab.len() != cfg.vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary has {} tokens, model expects {}",
                self.vocab.len(),
                cfg.vocab_size
            )));
        }
        let check_store = |s: &ImageFeatureStore| {
            if s.feat_dim() != cfg.d_v || s.n_regions() != cfg.n_regions {
                Err(Error::invalid(format!(
                    "feature store holds {} x {} regions, model expects {} x {}",
                    s.n_regions(),
                    s.feat_dim(),
                    cfg.n_regions,
                    cfg.d_v
                )))
            } else {
                Ok(())
            }
        };
        if strategy.is_transferred() {
            let store = self.store.ok_or(Error::StrategyMismatch {
                strategy: strategy.name(),
                missing: "a feature store of paired images",
            })?;
            check_store(store)?;
        }
        if let Some(a) = strategy.association() {
            let res = self.assoc.ok_or(Error::StrategyMismatch {
                strategy: strategy.name(),
                missing: "a built association index",
            })?;
            res.check(a)?;
            check_store(res.store)?;
            if self.k == 0 || self.k > cfg.k_max {
                return Err(Error::invalid(format!("K = {} outside 1..={}", self.k, cfg.k_max)));
            }
        }
        Ok(())
    }

    fn params(&self, a: AssocStrategy) -> AssocParams {
        AssocParams {
            strategy: a,
            k: self.k,
            kappa: self.kappa,
            seed: self.assoc_seed,
        }
    }

    /// Visual input for `ex` whose token flags are `flags` (position 0 is
    /// `[cls]`, position `i` holds `words[i - 1]`).
    fn visual(
        &self,
        strategy: Strategy,
        ex: &TextExample,
        words: &[String],
        flags: &[bool],
        eval_images: Option<EvalImages>,
        cache: &mut AssocCache,
    ) -> Result<VisualInput> {
        let d_v = |s: &ImageFeatureStore| s.feat_dim();
        if strategy.is_transferred() {
            if eval_images == Some(EvalImages::Placeholder) {
                return Ok(VisualInput::Placeholder);
            }
            return match (&ex.image_id, self.store) {
                (Some(id), Some(store)) => VisualInput::from_images(&[store.features_by_id(id)?], d_v(store)),
                _ => Ok(VisualInput::Placeholder),
            };
        }
        if let Some(a) = strategy.association() {
            let res = self.assoc.expect("checked before use");
            let surviving: Vec<String> = words
                .iter()
                .enumerate()
                .filter(|(i, _)| !flags[i + 1])
                .map(|(_, w)| w.clone())
                .collect();
            let images = cache.images(&res, &self.params(a), &surviving)?;
            return VisualInput::from_images(&images, d_v(res.store));
        }
        Ok(VisualInput::Placeholder)
    }

    /// Masked model input for one example, or `None` when the example
    /// carries no loss under `strategy` (no maskable token, or no image
    /// for a region-only objective).
    #[allow(clippy::too_many_arguments)]
    pub fn example<R: Rng>(
        &self,
        model: &CrossModalModel,
        strategy: Strategy,
        ex: &TextExample,
        rng: &mut R,
        eval_images: Option<EvalImages>,
        mask_regions: bool,
        cache: &mut AssocCache,
    ) -> Result<Option<MaskedExample>> {
        let cfg = &model.config;
        let (ids, words) = encode_single(self.vocab, &ex.text, cfg.max_len);
        if ids.len() < 2 {
            return Ok(None);
        }
        if strategy == Strategy::TransferredT2I && eval_images.is_none() {
            if ex.image_id.is_none() {
                return Ok(None);
            }
            let visual = self.visual(strategy, ex, &words, &vec![false; ids.len()], None, cache)?;
            let mut m = MaskedExample::unmasked(ids, visual);
            m.mask_visual(cfg.d_v, cfg.mask_rate, rng)?;
            return Ok(Some(m));
        }
        let tm = mask_tokens(&ids, cfg.mask_rate, cfg.vocab_size, rng)?;
        let visual = self.visual(strategy, ex, &words, &tm.flags, eval_images, cache)?;
        let mut m = MaskedExample::new(tm, visual);
        if mask_regions {
            m.mask_visual(cfg.d_v, cfg.mask_rate, rng)?;
        }
        Ok(Some(m))
    }

    /// Fixed-seed masked evaluation stream. Regions are never masked here.
    pub fn eval_stream(
        &self,
        model: &CrossModalModel,
        strategy: Strategy,
        examples: &[TextExample],
        images: EvalImages,
        seed: u64,
        cache: &mut AssocCache,
    ) -> Result<Vec<MaskedExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
        let mut out = Vec::with_capacity(examples.len());
        for ex in examples {
            if let Some(m) = self.example(model, strategy, ex, &mut rng, Some(images), false, cache)? {
                out.push(m);
            }
        }
        Ok(out)
    }

    pub fn evaluate(
        &self,
        model: &CrossModalModel,
        strategy: Strategy,
        examples: &[TextExample],
        images: EvalImages,
        seed: u64,
        cache: &mut AssocCache,
    ) -> Result<f64> {
        self.check(strategy, model)?;
        let stream = self.eval_stream(model, strategy, examples, images, seed, cache)?;
        perplexity(model, &stream)
    }
}

pub struct TrainData<'a> {
    pub grounding: Grounding<'a>,
    pub paired: &'a [Caption],
    pub text_only: &'a [String],
    pub valid: &'a [TextExample],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub steps: usize,
    pub best_step: usize,
    pub best_valid_ppl: f64,
    pub stopped_early: bool,
}

impl MetricRow {
    fn new(step: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRow {
            step,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }
}

impl TrainReport {
    pub fn metric(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,split,metric,value\n");
        for r in &self.metrics {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.metric, r.value));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Trains `model` in place and leaves it at the parameters with the best
/// validation perplexity.
pub fn pretrain(
    model: &mut CrossModalModel,
    strategy: Strategy,
    data: &TrainData,
    cfg: &TrainConfig,
    cache: &mut AssocCache,
) -> Result<TrainReport> {
    let g = &data.grounding;
    g.check(strategy, model)?;
    if strategy.is_transferred() && cfg.mix_ratio > 0.0 && data.paired.is_empty() {
        return Err(Error::StrategyMismatch {
            strategy: strategy.name(),
            missing: "a caption-paired corpus",
        });
    }
    if strategy == Strategy::TransferredT2I && cfg.mix_ratio == 0.0 {
        return Err(Error::StrategyMismatch {
            strategy: strategy.name(),
            missing: "a non-zero share of caption-paired examples",
        });
    }
    if data.valid.is_empty() {
        return Err(Error::Empty("pretraining: validation split is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::invalid("batch_size and eval_every must be positive"));
    }
    let mut stream = mix_corpora(data.paired, data.text_only, cfg.mix_ratio, cfg.seed)?;
    let steps_per_epoch = stream.epoch_len().div_ceil(cfg.batch_size).max(1);
    let mut total_steps = steps_per_epoch * cfg.max_epochs;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }

    model.set_placeholder_trainable(strategy.is_transferred());
    model.meta.insert("strategy".into(), strategy.name().into());
    let mode = strategy.loss_mode();
    let mut adam = AdamState::new(&model.params, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let eval_images = if strategy.is_transferred() { cfg.eval_images } else { EvalImages::Placeholder };

    // A fixed slice of training texts tracks training perplexity.
    let probe: Vec<TextExample> = mix_corpora(data.paired, data.text_only, cfg.mix_ratio, cfg.seed ^ 0x7472)?
        .take(256)
        .collect();
    let probe_images = if strategy.is_transferred() { EvalImages::Paired } else { EvalImages::Placeholder };
    let mut metrics = Vec::new();
    let evaluate = |model: &CrossModalModel, step: usize, cache: &mut AssocCache, metrics: &mut Vec<MetricRow>| -> Result<f64> {
        let valid = g.evaluate(model, strategy, data.valid, eval_images, cfg.seed, cache)?;
        let train = g.evaluate(model, strategy, &probe, probe_images, cfg.seed, cache)?;
        metrics.push(MetricRow::new(step, "valid", "ppl", valid));
        metrics.push(MetricRow::new(step, "train", "ppl", train));
        Ok(valid)
    };

    let mut best = evaluate(model, 0, cache, &mut metrics)?;
    let mut best_params = model.params.clone();
    let mut best_step = 0;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut step = 0;
    while step < total_steps {
        let mut examples = Vec::with_capacity(cfg.batch_size);
        for ex in stream.by_ref().take(cfg.batch_size) {
            if let Some(m) = g.example(model, strategy, &ex, &mut rng, None, mode.jmrm, cache)? {
                examples.push(m);
            }
        }
        step += 1;
        if !examples.is_empty() {
            if let Some((values, grads)) = model.loss_and_grads(&MaskedBatch { examples }, mode)? {
                adam.step(&mut model.params, &grads)?;
                loss_sum += values.total;
                loss_n += 1;
            }
        }
        if step % cfg.eval_every == 0 || step == total_steps {
            if loss_n > 0 {
                metrics.push(MetricRow::new(step, "train", "loss", loss_sum / loss_n as f64));
            }
            loss_sum = 0.0;
            loss_n = 0;
            let v = evaluate(model, step, cache, &mut metrics)?;
            if v < best {
                best = v;
                best_params = model.params.clone();
                best_step = step;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    model.params = best_params;
    Ok(TrainReport {
        metrics,
        steps: step,
        best_step,
        best_valid_ppl: best,
        stopped_early,
    })
}
