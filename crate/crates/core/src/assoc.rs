//! Visual association: maps a (masked) text to up to `K` archived images.
//!
//! Three strategies are provided. *Scene* retrieval matches the text's
//! bag-of-words vector against caption-derived keys. *Object* retrieval
//! clusters the text's nouns with a Gaussian mixture, picks one
//! representative noun per component, and retrieves noun-indexed images for
//! each representative. The *keyword* baseline ranks captioned images by the
//! number of content words shared with the text.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{encode_cbow_tokens, encode_synset_key, tokenize, QueryVector, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::tensorcore::fit_gmm;
use crate::vindex::{build_index, BuildReport, ImageFeatureStore, ImageKeyIndex, IndexEntry, SourceKind};

/// Literal mask markers removed from raw text before association.
pub const MASK_MARKERS: [&str; 2] = ["[masked]", "[mask]"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssocStrategy {
    Scene,
    Object,
    KeywordBaseline,
}

impl AssocStrategy {
    pub fn name(self) -> &'static str {
        match self {
            AssocStrategy::Scene => "scene",
            AssocStrategy::Object => "object",
            AssocStrategy::KeywordBaseline => "keyword",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(AssocStrategy::Scene),
            "object" => Ok(AssocStrategy::Object),
            "keyword" | "keyword_baseline" => Ok(AssocStrategy::KeywordBaseline),
            other => Err(Error::invalid(format!(
                "unknown association strategy `{other}` (expected scene|object|keyword)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociatedImage {
    pub id: String,
    pub rank: usize,
    pub similarity: f64,
    /// `N * d_v` region features, row-major.
    #[serde(skip)]
    pub features: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub strategy: AssocStrategy,
    pub items: Vec<AssociatedImage>,
}

impl Association {
    pub fn empty(strategy: AssocStrategy) -> Self {
        Association {
            strategy,
            items: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }
}

/// Identifies the nouns of a token sequence.
pub trait NounTagger {
    fn nouns(&self, tokens: &[String]) -> Vec<String>;
}

#[derive(Clone, Debug)]
pub struct NounLexicon {
    nouns: HashSet<String>,
}

impl NounLexicon {
    pub fn new(nouns: impl IntoIterator<Item = String>) -> Result<Self> {
        let nouns: HashSet<String> = nouns.into_iter().map(|n| n.to_lowercase()).collect();
        if nouns.is_empty() {
            return Err(Error::Empty("noun lexicon is empty".into()));
        }
        Ok(NounLexicon { nouns })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned),
        )
    }

    pub fn contains(&self, token: &str) -> bool {
        self.nouns.contains(token)
    }

    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }
}

impl NounTagger for NounLexicon {
    fn nouns(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().filter(|t| self.contains(t)).cloned().collect()
    }
}

/// In-order lexicon nouns of `text`, duplicates kept.
pub fn extract_nouns(text: &str, tagger: &dyn NounTagger) -> Vec<String> {
    tagger.nouns(&tokenize(text))
}

/// Tokens of raw text with literal mask markers removed.
pub fn surviving_tokens(text: &str) -> Vec<String> {
    let mut t = text.to_lowercase();
    for m in MASK_MARKERS {
        t = t.replace(m, " ");
    }
    tokenize(&t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub image_id: String,
    pub text: String,
}

/// Caption-paired corpus, `image_id<TAB>caption` per line.
#[derive(Clone, Debug, Default)]
pub struct CaptionCorpus {
    pub captions: Vec<Caption>,
    token_sets: Vec<HashSet<String>>,
}

impl CaptionCorpus {
    pub fn new(captions: Vec<Caption>) -> Self {
        let token_sets = captions.iter().map(|c| tokenize(&c.text).into_iter().collect()).collect();
        CaptionCorpus { captions, token_sets }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut captions = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, cap) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected `image_id<TAB>caption`"))?;
            if id.is_empty() {
                return Err(Error::parse(origin, i + 1, "empty image id"));
            }
            captions.push(Caption {
                image_id: id.to_string(),
                text: cap.to_string(),
            });
        }
        Ok(Self::new(captions))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynsetRecord {
    pub synset_id: String,
    pub lemmas: Vec<String>,
    pub definition: String,
    pub image_ids: Vec<String>,
}

/// `synset_id<TAB>lemma,lemma<TAB>definition<TAB>image_id,image_id` per line.
pub fn parse_synsets(text: &str, origin: &Path) -> Result<Vec<SynsetRecord>> {
    let split = |s: &str| -> Vec<String> {
        s.split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(str::to_owned)
            .collect()
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(origin, i + 1, format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let lemmas = split(f[1]);
        if lemmas.is_empty() {
            return Err(Error::parse(origin, i + 1, "synset has no lemmas"));
        }
        out.push(SynsetRecord {
            synset_id: f[0].to_string(),
            lemmas,
            definition: f[2].to_string(),
            image_ids: split(f[3]),
        });
    }
    Ok(out)
}

pub fn load_synsets(path: impl AsRef<Path>) -> Result<Vec<SynsetRecord>> {
    let path = path.as_ref();
    parse_synsets(&std::fs::read_to_string(path)?, path)
}

/// Scene archive: every captioned image keyed by its caption's CBOW vector.
pub fn build_caption_index(
    corpus: &CaptionCorpus,
    table: &WordEmbeddingTable,
    store: &ImageFeatureStore,
) -> Result<BuildReport> {
    let mut entries = Vec::with_capacity(corpus.len());
    for c in &corpus.captions {
        let payload_ref = store
            .ordinal(&c.image_id)
            .ok_or_else(|| Error::UnknownImage(c.image_id.clone()))?;
        entries.push(IndexEntry {
            id: c.image_id.clone(),
            key: encode_cbow_tokens(&tokenize(&c.text), table).values,
            payload_ref,
            source_kind: SourceKind::Caption,
        });
    }
    build_index(entries)
}

/// Object archive: every image of a synset keyed by the synset key.
pub fn build_synset_index(
    synsets: &[SynsetRecord],
    table: &WordEmbeddingTable,
    store: &ImageFeatureStore,
) -> Result<BuildReport> {
    let mut entries = Vec::new();
    for s in synsets {
        let key = encode_synset_key(&s.lemmas, &s.definition, table)?;
        for img in &s.image_ids {
            let payload_ref = store.ordinal(img).ok_or_else(|| Error::UnknownImage(img.clone()))?;
            entries.push(IndexEntry {
                id: img.clone(),
                key: key.values.clone(),
                payload_ref,
                source_kind: SourceKind::Synset,
            });
        }
    }
    build_index(entries)
}

fn resolve(
    strategy: AssocStrategy,
    hits: impl IntoIterator<Item = (String, f64, u64)>,
    store: &ImageFeatureStore,
) -> Result<Association> {
    let mut items = Vec::new();
    for (rank, (id, similarity, payload_ref)) in hits.into_iter().enumerate() {
        items.push(AssociatedImage {
            id,
            rank,
            similarity,
            features: store.features(payload_ref)?.to_vec(),
        });
    }
    Ok(Association { strategy, items })
}

/// Scene-based association from the surviving (unmasked) tokens. A text
/// with no usable token yields an empty association.
pub fn associate_scene(
    tokens: &[String],
    index: &ImageKeyIndex,
    store: &ImageFeatureStore,
    table: &WordEmbeddingTable,
    k: usize,
) -> Result<Association> {
    let q = encode_cbow_tokens(tokens, table);
    if q.is_degenerate || index.is_empty() {
        return Ok(Association::empty(AssocStrategy::Scene));
    }
    let hits = index.top_k(&q, k)?;
    resolve(
        AssocStrategy::Scene,
        hits.into_iter().map(|h| (h.id, h.similarity, h.payload_ref)),
        store,
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Representative nouns chosen by the mixture, most heavily weighted
/// component first.
pub fn representative_nouns(
    nouns: &[String],
    table: &WordEmbeddingTable,
    kappa: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let mut distinct: Vec<String> = Vec::new();
    for n in nouns {
        if table.get(n).is_some() && !distinct.contains(n) {
            distinct.push(n.clone());
        }
    }
    if distinct.is_empty() || kappa == 0 {
        return Ok(Vec::new());
    }
    let points: Vec<Vec<f64>> = distinct
        .iter()
        .map(|n| table.get(n).unwrap().iter().map(|&v| v as f64).collect())
        .collect();
    let gmm = fit_gmm(&points, kappa.min(distinct.len()), seed)?;
    let mut order: Vec<usize> = (0..gmm.kappa).collect();
    order.sort_by(|&a, &b| gmm.weights[b].total_cmp(&gmm.weights[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .map(|c| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, p) in points.iter().enumerate() {
                let s = cosine(p, &gmm.means[c]);
                if s > best_sim {
                    best_sim = s;
                    best = i;
                }
            }
            distinct[best].clone()
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn associate_object(
    tokens: &[String],
    synset_index: &ImageKeyIndex,
    store: &ImageFeatureStore,
    table: &WordEmbeddingTable,
    tagger: &dyn NounTagger,
    k: usize,
    kappa: usize,
    seed: u64,
) -> Result<Association> {
    if kappa > k {
        return Err(Error::invalid(format!("kappa ({kappa}) must not exceed K ({k})")));
    }
    let nouns = tagger.nouns(tokens);
    let reps = representative_nouns(&nouns, table, kappa, seed)?;
    if reps.is_empty() || synset_index.is_empty() {
        return Ok(Association::empty(AssocStrategy::Object));
    }
    let per = k.div_ceil(reps.len());
    let mut seen = HashSet::new();
    let mut hits = Vec::new();
    for noun in &reps {
        let q = QueryVector {
            values: table.get(noun).unwrap().to_vec(),
            is_degenerate: false,
        };
        let Ok(found) = synset_index.top_k(&q, per) else {
            continue; // zero-norm noun vector
        };
        for h in found {
            if seen.insert(h.id.clone()) {
                hits.push((h.id, h.similarity, h.payload_ref));
            }
        }
    }
    hits.truncate(k);
    resolve(AssocStrategy::Object, hits, store)
}

/// Images ranked by how many of the text's content words their caption
/// contains; ties go to the smaller id.
pub fn associate_keyword_baseline(
    tokens: &[String],
    corpus: &CaptionCorpus,
    stopwords: &dyn Fn(&str) -> bool,
    store: &ImageFeatureStore,
    k: usize,
) -> Result<Association> {
    let content: HashSet<&str> = tokens.iter().map(String::as_str).filter(|t| !stopwords(t)).collect();
    let mut scored: Vec<(usize, &str)> = corpus
        .captions
        .iter()
        .zip(&corpus.token_sets)
        .map(|(c, set)| (content.iter().filter(|t| set.contains(**t)).count(), c.image_id.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.truncate(k);
    let mut hits = Vec::with_capacity(scored.len());
    for (score, id) in scored {
        let payload_ref = store.ordinal(id).ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        hits.push((id.to_string(), score as f64, payload_ref));
    }
    resolve(AssocStrategy::KeywordBaseline, hits, store)
}

/// Everything an association strategy may need, borrowed.
#[derive(Clone, Copy)]
pub struct AssocResources<'a> {
    pub table: &'a WordEmbeddingTable,
    pub store: &'a ImageFeatureStore,
    pub caption_index: Option<&'a ImageKeyIndex>,
    pub synset_index: Option<&'a ImageKeyIndex>,
    pub lexicon: Option<&'a NounLexicon>,
    pub captions: Option<&'a CaptionCorpus>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssocParams {
    pub strategy: AssocStrategy,
    pub k: usize,
    pub kappa: usize,
    pub seed: u64,
}

/// FNV-1a over the text, mixed into the run seed so the mixture
/// initialization differs per text but is reproducible.
pub fn text_seed(run_seed: u64, tokens: &[String]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.bytes().chain(std::iter::once(b' ')) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    run_seed ^ h
}

impl<'a> AssocResources<'a> {
    pub fn check(&self, strategy: AssocStrategy) -> Result<()> {
        let missing = match strategy {
            AssocStrategy::Scene if self.caption_index.is_none() => Some("a caption index"),
            AssocStrategy::Object if self.synset_index.is_none() => Some("a synset index"),
            AssocStrategy::Object if self.lexicon.is_none() => Some("a noun lexicon"),
            AssocStrategy::KeywordBaseline if self.captions.is_none() => Some("a caption corpus"),
            _ => None,
        };
        match missing {
            Some(m) => Err(Error::StrategyMismatch {
                strategy: strategy.name(),
                missing: m,
            }),
            None => Ok(()),
        }
    }

    pub fn associate(&self, tokens: &[String], params: &AssocParams) -> Result<Association> {
        self.check(params.strategy)?;
        match params.strategy {
            AssocStrategy::Scene => associate_scene(tokens, self.caption_index.unwrap(), self.store, self.table, params.k),
            AssocStrategy::Object => associate_object(
                tokens,
                self.synset_index.unwrap(),
                self.store,
                self.table,
                self.lexicon.unwrap(),
                params.k,
                params.kappa,
                text_seed(params.seed, tokens),
            ),
            AssocStrategy::KeywordBaseline => associate_keyword_baseline(
                tokens,
                self.captions.unwrap(),
                &|t| self.table.is_stopword(t),
                self.store,
                params.k,
            ),
        }
    }
}
