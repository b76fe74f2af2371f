//! Synthetic grounded corpora with a known answer.
//!
//! Every caption reads `filler concept cue`. The concept word is drawn
//! uniformly from `n_concepts` and the paired image is `v_c` plus noise
//! (with probability `grounding_strength`) or pure noise. The filler is
//! independent of the concept, and the cue is a word seen once, so it falls
//! out of the model vocabulary; text alone therefore says nothing about the
//! concept. The word-vector table places each cue next to its concept, which
//! is what makes caption retrieval informative.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assoc::{Caption, CaptionCorpus, SynsetRecord};
use crate::embed::WordEmbeddingTable;
use crate::error::{Error, Result};
use crate::model::vocab::{Vocab, N_RESERVED, RESERVED};
use crate::vindex::ImageFeatureStore;

/// Standard deviation of the image noise, as a fraction of the unit norm of `v_c`.
pub const IMAGE_NOISE: f64 = 0.05;
const CUE_NOISE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    /// Model vocabulary size including the reserved tokens.
    pub vocab_size: usize,
    pub n_concepts: usize,
    /// Caption-paired examples, split 80/10/10 into train/valid/test.
    pub n_examples: usize,
    pub n_text_only: usize,
    pub d_w: usize,
    pub d_v: usize,
    pub n_regions: usize,
    pub images_per_synset: usize,
    pub grounding_strength: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            vocab_size: 200,
            n_concepts: 64,
            n_examples: 2000,
            n_text_only: 2000,
            d_w: 32,
            d_v: 16,
            n_regions: 1,
            images_per_synset: 4,
            grounding_strength: 1.0,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn n_fillers(&self) -> usize {
        self.vocab_size.saturating_sub(N_RESERVED + self.n_concepts)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.grounding_strength) {
            return Err(Error::invalid(format!(
                "grounding_strength {} outside [0, 1]",
                self.grounding_strength
            )));
        }
        if self.n_concepts < 2 || self.n_fillers() == 0 {
            return Err(Error::invalid(format!(
                "vocab_size {} cannot hold {} concepts, at least one filler and {N_RESERVED} reserved tokens",
                self.vocab_size, self.n_concepts
            )));
        }
        if self.n_examples < 10 || self.d_w == 0 || self.d_v == 0 || self.n_regions == 0 {
            return Err(Error::invalid("need n_examples >= 10 and positive dims"));
        }
        Ok(())
    }
}

/// Analytic properties of the generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMeta {
    pub spec: ToySpec,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub n_fillers: usize,
    /// `ln n_concepts`: entropy of a masked concept word given the text.
    pub concept_entropy: f64,
    /// `ln n_fillers`
    pub filler_entropy: f64,
    /// Perplexity floor when masked positions are spread evenly over
    /// filler, concept and cue, and the image is ignored.
    pub ungrounded_ppl_floor: f64,
    /// Same, when the image reveals the concept with probability
    /// `grounding_strength`.
    pub grounded_ppl_floor: f64,
}

#[derive(Clone, Debug)]
pub struct ToyData {
    pub meta: ToyMeta,
    pub train: CaptionCorpus,
    pub valid: CaptionCorpus,
    pub test: CaptionCorpus,
    pub text_only: Vec<String>,
    pub store: ImageFeatureStore,
    pub table: WordEmbeddingTable,
    pub stopwords: BTreeSet<String>,
    pub nouns: Vec<String>,
    pub synsets: Vec<SynsetRecord>,
    pub vocab: Vocab,
    pub concepts: Vec<String>,
    /// Concept index of every train/valid/test example, in order.
    pub labels: [Vec<usize>; 3],
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); std * z }).collect::<Vec<f64>>()
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = gaussian(rng, n, 1.0);
    unit(&mut v);
    v
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn generate_grounded_corpus(spec: &ToySpec) -> Result<ToyData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.n_concepts;
    let f = spec.n_fillers();
    let concepts: Vec<String> = (0..c).map(|i| format!("obj{i}")).collect();
    let fillers: Vec<String> = (0..f).map(|i| format!("fill{i}")).collect();

    let centers: Vec<Vec<f64>> = (0..c).map(|_| random_unit(&mut rng, spec.d_w)).collect();
    let visual: Vec<Vec<f64>> = (0..c).map(|_| random_unit(&mut rng, spec.d_v)).collect();

    let mut table = WordEmbeddingTable::new(spec.d_w);
    for (w, v) in concepts.iter().zip(&centers) {
        table.insert(w, to_f32(v))?;
    }
    for w in &fillers {
        let v = random_unit(&mut rng, spec.d_w);
        table.insert(w, to_f32(&v))?;
    }
    let stopwords: BTreeSet<String> = fillers.iter().cloned().collect();
    table.set_stopwords(stopwords.iter().cloned().collect());

    let noise_std = IMAGE_NOISE / (spec.d_v as f64).sqrt();
    let image = |rng: &mut ChaCha8Rng, concept: usize| -> Vec<f32> {
        let grounded = rng.random_bool(spec.grounding_strength);
        let mut out = Vec::with_capacity(spec.n_regions * spec.d_v);
        for _ in 0..spec.n_regions {
            let base = if grounded {
                visual[concept].clone()
            } else {
                random_unit(rng, spec.d_v)
            };
            let noise = gaussian(rng, spec.d_v, noise_std);
            out.extend(base.iter().zip(&noise).map(|(a, b)| (a + b) as f32));
        }
        out
    };

    let mut store = ImageFeatureStore::new(spec.n_regions, spec.d_v);
    let mut nouns: Vec<String> = concepts.clone();
    let n_train = spec.n_examples * 8 / 10;
    let n_valid = spec.n_examples / 10;
    let mut splits: [Vec<Caption>; 3] = Default::default();
    let mut labels: [Vec<usize>; 3] = Default::default();
    for i in 0..spec.n_examples {
        let concept = rng.random_range(0..c);
        let filler = &fillers[rng.random_range(0..f)];
        let cue = format!("cue{i}");
        let mut cv = centers[concept].clone();
        for (x, n) in cv.iter_mut().zip(gaussian(&mut rng, spec.d_w, CUE_NOISE / (spec.d_w as f64).sqrt())) {
            *x += n;
        }
        unit(&mut cv);
        table.insert(&cue, to_f32(&cv))?;
        nouns.push(cue.clone());
        let id = format!("img{i:05}");
        store.push(&id, &image(&mut rng, concept))?;
        let split = if i < n_train {
            0
        } else if i < n_train + n_valid {
            1
        } else {
            2
        };
        splits[split].push(Caption {
            image_id: id,
            text: format!("{filler} {} {cue}", concepts[concept]),
        });
        labels[split].push(concept);
    }

    let mut synsets = Vec::with_capacity(c);
    for (ci, w) in concepts.iter().enumerate() {
        let mut ids = Vec::with_capacity(spec.images_per_synset);
        for j in 0..spec.images_per_synset {
            let id = format!("syn{ci}_{j}");
            store.push(&id, &image(&mut rng, ci))?;
            ids.push(id);
        }
        let filler = &fillers[rng.random_range(0..f)];
        synsets.push(SynsetRecord {
            synset_id: format!("{w}.n.01"),
            lemmas: vec![w.clone()],
            definition: format!("{filler} {w}"),
            image_ids: ids,
        });
    }

    let text_only = (0..spec.n_text_only)
        .map(|i| {
            let concept = rng.random_range(0..c);
            let filler = &fillers[rng.random_range(0..f)];
            format!("{filler} {} text{i}", concepts[concept])
        })
        .collect();

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(concepts.iter().cloned());
    tokens.extend(fillers.iter().cloned());
    let vocab = Vocab::from_tokens(tokens)?;

    let (hc, hf) = ((c as f64).ln(), (f as f64).ln());
    let g = spec.grounding_strength;
    let meta = ToyMeta {
        spec: spec.clone(),
        n_train,
        n_valid,
        n_test: spec.n_examples - n_train - n_valid,
        n_fillers: f,
        concept_entropy: hc,
        filler_entropy: hf,
        ungrounded_ppl_floor: ((hc + hf) / 3.0).exp(),
        grounded_ppl_floor: (((1.0 - g) * hc + hf) / 3.0).exp(),
    };
    let [train, valid, test] = splits;
    Ok(ToyData {
        meta,
        train: CaptionCorpus::new(train),
        valid: CaptionCorpus::new(valid),
        test: CaptionCorpus::new(test),
        text_only,
        store,
        table,
        stopwords,
        nouns,
        synsets,
        vocab,
        concepts,
        labels,
    })
}

/// Pair task whose label is 1 exactly when `trigger` occurs in `text_b`.
pub fn generate_trigger_task(words: &[String], trigger: &str, n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<&String> = words.iter().filter(|w| *w != trigger).collect();
    let mut out = String::from("metric=accuracy\tlabels=0,1\n");
    for i in 0..n {
        let label = i % 2;
        let a: Vec<&str> = (0..3).map(|_| others[rng.random_range(0..others.len())].as_str()).collect();
        let mut b: Vec<&str> = (0..3).map(|_| others[rng.random_range(0..others.len())].as_str()).collect();
        if label == 1 {
            let pos = rng.random_range(0..=b.len());
            b.insert(pos, trigger);
        }
        let _ = writeln!(out, "{label}\t{}\t{}", a.join(" "), b.join(" "));
    }
    let mut lines: Vec<&str> = out.lines().collect();
    let header = lines.remove(0);
    lines.shuffle(&mut rng);
    let mut shuffled = String::from(header);
    shuffled.push('\n');
    for l in lines {
        shuffled.push_str(l);
        shuffled.push('\n');
    }
    shuffled
}

fn caption_tsv(c: &CaptionCorpus) -> String {
    let mut s = String::new();
    for cap in &c.captions {
        let _ = writeln!(s, "{}\t{}", cap.image_id, cap.text);
    }
    s
}

impl ToyData {
    /// Writes every artifact into `dir` (created if missing).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("captions_train.tsv"), caption_tsv(&self.train))?;
        fs::write(dir.join("captions_valid.tsv"), caption_tsv(&self.valid))?;
        fs::write(dir.join("captions_test.tsv"), caption_tsv(&self.test))?;
        fs::write(dir.join("text_only.txt"), self.text_only.join("\n") + "\n")?;
        self.store.save(dir.join("features.vftr"))?;

        let mut words: Vec<&str> = self.concepts.iter().map(String::as_str).collect();
        let mut rest: Vec<&str> = self
            .nouns
            .iter()
            .skip(self.concepts.len())
            .map(String::as_str)
            .collect();
        words.extend(self.stopwords.iter().map(String::as_str));
        words.append(&mut rest);
        let mut vec_txt = format!("{} {}\n", words.len(), self.table.dim());
        for w in words {
            let v = self.table.get(w).expect("every generated word has a vector");
            vec_txt.push_str(w);
            for x in v {
                let _ = write!(vec_txt, " {x}");
            }
            vec_txt.push('\n');
        }
        fs::write(dir.join("vectors.txt"), vec_txt)?;

        let sw: Vec<&str> = self.stopwords.iter().map(String::as_str).collect();
        fs::write(dir.join("stopwords.txt"), sw.join("\n") + "\n")?;
        fs::write(dir.join("nouns.txt"), self.nouns.join("\n") + "\n")?;
        let mut syn = String::new();
        for s in &self.synsets {
            let _ = writeln!(
                syn,
                "{}\t{}\t{}\t{}",
                s.synset_id,
                s.lemmas.join(","),
                s.definition,
                s.image_ids.join(",")
            );
        }
        fs::write(dir.join("synsets.tsv"), syn)?;
        self.vocab.save(dir.join("vocab.txt"))?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        let trigger = generate_trigger_task(&self.concepts, &self.concepts[0], 400, self.meta.spec.seed);
        fs::write(dir.join("task_trigger.tsv"), trigger)?;
        Ok(())
    }
}
