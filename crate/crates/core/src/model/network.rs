//! Text encoder, cross-modal encoder and the JMLM / JMRM / classification heads.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::masking::{mask_regions, TokenMask};
use crate::error::{Error, Result};
use crate::tensorcore::{cast, Gradients, Graph, ParamId, ParamStore, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Image input for one example: either the placeholder slot or the region
/// rows of the retrieved / paired images in rank order.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualInput {
    Placeholder,
    /// `rows` holds `S × d_v` values; `rank_ids[s]` is the 1-based rank of
    /// the image slot `s` belongs to.
    Regions { rows: Vec<f32>, rank_ids: Vec<usize> },
}

impl VisualInput {
    /// Concatenates the images' regions; image `i` gets rank id `i + 1`.
    /// No images gives the placeholder.
    pub fn from_images<S: AsRef<[f32]>>(images: &[S], d_v: usize) -> Result<Self> {
        if images.is_empty() {
            return Ok(VisualInput::Placeholder);
        }
        let mut rows = Vec::new();
        let mut rank_ids = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let img = img.as_ref();
            if img.is_empty() || img.len() % d_v != 0 {
                return Err(Error::shape(
                    "visual_input",
                    format!("image {i} has {} values, not a multiple of d_v = {d_v}", img.len()),
                ));
            }
            rows.extend_from_slice(img);
            rank_ids.extend(std::iter::repeat_n(i + 1, img.len() / d_v));
        }
        Ok(VisualInput::Regions { rows, rank_ids })
    }

    pub fn is_placeholder(&self) -> bool {
        matches!(self, VisualInput::Placeholder)
    }

    /// Number of visual slots fed to the cross encoder.
    pub fn n_slots(&self) -> usize {
        match self {
            VisualInput::Placeholder => 1,
            VisualInput::Regions { rank_ids, .. } => rank_ids.len(),
        }
    }
}

/// One example after masking. Region targets are empty unless regions were
/// masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub token_ids: Vec<usize>,
    pub original_tokens: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub visual: VisualInput,
    pub region_targets: Vec<f32>,
    pub region_mask: Vec<bool>,
}

impl MaskedExample {
    pub fn new(text: TokenMask, visual: VisualInput) -> Self {
        let slots = visual.n_slots();
        MaskedExample {
            token_ids: text.input,
            original_tokens: text.original,
            token_mask: text.flags,
            visual,
            region_targets: Vec::new(),
            region_mask: vec![false; slots],
        }
    }

    /// Text with nothing masked.
    pub fn unmasked(token_ids: Vec<usize>, visual: VisualInput) -> Self {
        let n = token_ids.len();
        Self::new(
            TokenMask {
                input: token_ids.clone(),
                original: token_ids,
                flags: vec![false; n],
                actions: vec![None; n],
            },
            visual,
        )
    }

    /// Masks region rows in place; a no-op for the placeholder.
    pub fn mask_visual<R: rand::Rng>(&mut self, d_v: usize, rate: f64, rng: &mut R) -> Result<()> {
        if let VisualInput::Regions { rows, .. } = &mut self.visual {
            let m = mask_regions(rows, d_v, rate, rng)?;
            *rows = m.input;
            self.region_targets = m.targets;
            self.region_mask = m.flags;
        }
        Ok(())
    }

    pub fn n_masked_tokens(&self) -> usize {
        self.token_mask.iter().filter(|&&f| f).count()
    }

    pub fn n_masked_regions(&self) -> usize {
        self.region_mask.iter().filter(|&&f| f).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskedBatch {
    pub examples: Vec<MaskedExample>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `true` at real token positions of the padded `B × L` layout.
    pub fn pad_mask(&self) -> Vec<Vec<bool>> {
        let l = self.examples.iter().map(|e| e.token_ids.len()).max().unwrap_or(0);
        self.examples
            .iter()
            .map(|e| (0..l).map(|i| i < e.token_ids.len()).collect())
            .collect()
    }
}

/// Padded outputs: `B × L × vocab`, `B × S × d_v`, `B × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub token_logits: Tensor<f64>,
    pub region_preds: Tensor<f64>,
    pub cls: Tensor<f64>,
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    text: Vec<LayerIds>,
    cross: Vec<LayerIds>,
    proj_w: ParamId,
    proj_b: ParamId,
    placeholder: ParamId,
    rank_emb: ParamId,
    jmlm_w: ParamId,
    jmlm_b: ParamId,
    jmrm_w: ParamId,
    jmrm_b: ParamId,
    cls: Option<(ParamId, ParamId)>,
}

/// Graph handles produced for one example.
#[derive(Clone, Copy, Debug)]
pub struct ExampleVars {
    /// `L × vocab`
    pub logits: Var,
    /// `S × d_v`
    pub region_preds: Var,
    /// `1 × d`, the cross-encoder output at the `[cls]` position.
    pub cls: Var,
    /// `S × d`, visual slots as fed to the cross encoder.
    pub visual_slots: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossMode {
    pub jmlm: bool,
    pub jmrm: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Option<Var>,
    pub jmlm: Option<Var>,
    pub jmrm: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub jmlm: Option<f64>,
    pub jmrm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CrossModalModel<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Free-form key/value pairs stored with checkpoints.
    pub meta: BTreeMap<String, String>,
    ids: ParamIds,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is positive");
        let data = (0..n).map(|_| cast::<T>(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    fn linear<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }
}

fn add_layer<T: Real>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, d: usize, d_ff: usize) -> Result<LayerIds> {
    let mut lin = |store: &mut ParamStore<T>, name: &str, i: usize, o: usize| -> Result<(ParamId, ParamId)> {
        let w = store.add(format!("{prefix}.{name}.w"), init.linear(i, o))?;
        let b = store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[o]))?;
        Ok((w, b))
    };
    let (wq, bq) = lin(store, "attn.q", d, d)?;
    let (wk, bk) = lin(store, "attn.k", d, d)?;
    let (wv, bv) = lin(store, "attn.v", d, d)?;
    let (wo, bo) = lin(store, "attn.o", d, d)?;
    let ln1_g = store.add(format!("{prefix}.ln1.g"), Tensor::full(&[d], T::one()))?;
    let ln1_b = store.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]))?;
    let (w1, b1) = lin(store, "ffn.in", d, d_ff)?;
    let (w2, b2) = lin(store, "ffn.out", d_ff, d)?;
    let ln2_g = store.add(format!("{prefix}.ln2.g"), Tensor::full(&[d], T::one()))?;
    let ln2_b = store.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]))?;
    Ok(LayerIds {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        ln1_g,
        ln1_b,
        w1,
        b1,
        w2,
        b2,
        ln2_g,
        ln2_b,
    })
}

impl<T: Real> CrossModalModel<T> {
    /// Randomly initialized model, deterministic in `config.init_seed`.
    /// Trainability starts as for a run without a transferred strategy.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let (d, v) = (config.d, config.vocab_size);
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut s = ParamStore::new();
        let tok_emb = s.add("embeddings.token", init.normal(&[v, d], emb_std))?;
        let pos_emb = s.add("embeddings.position", init.normal(&[config.max_len, d], emb_std))?;
        let text = (0..config.n_layers_text)
            .map(|i| add_layer(&mut s, &mut init, &format!("text.{i}"), d, config.d_ff))
            .collect::<Result<Vec<_>>>()?;
        let cross = (0..config.n_layers_cross)
            .map(|i| add_layer(&mut s, &mut init, &format!("cross.{i}"), d, config.d_ff))
            .collect::<Result<Vec<_>>>()?;
        let proj_w = s.add("visual.projection.w", init.linear(config.d_v, d))?;
        let proj_b = s.add("visual.projection.b", Tensor::zeros(&[d]))?;
        let placeholder = s.add("visual.placeholder", init.normal(&[1, d], emb_std))?;
        let rank_emb = s.add("visual.rank", init.normal(&[config.k_max, d], emb_std))?;
        let jmlm_w = s.add("head.jmlm.w", init.linear(d, v))?;
        let jmlm_b = s.add("head.jmlm.b", Tensor::zeros(&[v]))?;
        let jmrm_w = s.add("head.jmrm.w", init.linear(d, config.d_v))?;
        let jmrm_b = s.add("head.jmrm.b", Tensor::zeros(&[config.d_v]))?;
        let ids = ParamIds {
            tok_emb,
            pos_emb,
            text,
            cross,
            proj_w,
            proj_b,
            placeholder,
            rank_emb,
            jmlm_w,
            jmlm_b,
            jmrm_w,
            jmrm_b,
            cls: None,
        };
        let mut model = CrossModalModel {
            config,
            params: s,
            meta: BTreeMap::new(),
            ids,
        };
        model.set_placeholder_trainable(false);
        Ok(model)
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> CrossModalModel<U> {
        CrossModalModel {
            config: self.config.clone(),
            params: self.params.cast(),
            meta: self.meta.clone(),
            ids: self.ids.clone(),
        }
    }

    /// Token/position embeddings and every text-encoder layer parameter.
    pub fn text_param_ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.ids.tok_emb, self.ids.pos_emb];
        for l in &self.ids.text {
            out.extend(layer_param_ids(l));
        }
        out
    }

    pub fn jmlm_head_ids(&self) -> [ParamId; 2] {
        [self.ids.jmlm_w, self.ids.jmlm_b]
    }

    pub fn jmrm_head_ids(&self) -> [ParamId; 2] {
        [self.ids.jmrm_w, self.ids.jmrm_b]
    }

    pub fn placeholder_id(&self) -> ParamId {
        self.ids.placeholder
    }

    pub fn cls_head_ids(&self) -> Option<(ParamId, ParamId)> {
        self.ids.cls
    }

    /// Applies the freeze flag to the text side and sets whether the
    /// placeholder is learned.
    pub fn set_placeholder_trainable(&mut self, trainable: bool) {
        let text_trainable = !self.config.freeze_text;
        for id in self.text_param_ids() {
            self.params.set_trainable(id, text_trainable);
        }
        self.params.set_trainable(self.ids.placeholder, trainable);
    }

    pub fn placeholder_trainable(&self) -> bool {
        self.params.get(self.ids.placeholder).trainable
    }

    /// Adds (or re-initializes) a `d → n_out` classification head.
    pub fn add_cls_head(&mut self, n_out: usize, seed: u64) -> Result<()> {
        if n_out == 0 {
            return Err(Error::invalid("classification head needs at least one output"));
        }
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let w = init.linear(self.config.d, n_out);
        let b = Tensor::zeros(&[n_out]);
        match self.ids.cls {
            Some((wi, bi)) => {
                *self.params.value_mut(wi) = w;
                *self.params.value_mut(bi) = b;
            }
            None => {
                let wi = self.params.add("head.cls.w", w)?;
                let bi = self.params.add("head.cls.b", b)?;
                self.ids.cls = Some((wi, bi));
            }
        }
        Ok(())
    }

    pub(crate) fn attach_cls_ids(&mut self) {
        if let (Some(w), Some(b)) = (self.params.find("head.cls.w"), self.params.find("head.cls.b")) {
            self.ids.cls = Some((w, b));
        }
    }

    fn linear(&self, g: &mut Graph<T>, vars: &[Var], x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = g.matmul(x, vars[w])?;
        g.add_row(y, vars[b])
    }

    fn block(&self, g: &mut Graph<T>, vars: &[Var], x: Var, l: &LayerIds) -> Result<Var> {
        let d = self.config.d;
        let nh = self.config.n_heads;
        let dh = d / nh;
        let q = self.linear(g, vars, x, l.wq, l.bq)?;
        let k = self.linear(g, vars, x, l.wk, l.bk)?;
        let v = self.linear(g, vars, x, l.wv, l.bv)?;
        let inv = cast::<T>(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let (qh, kh, vh) = if nh == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, inv)?;
            let p = g.softmax(s)?;
            heads.push(g.matmul(p, vh)?);
        }
        let ctx = if nh == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let a = self.linear(g, vars, ctx, l.wo, l.bo)?;
        let h1 = g.add(x, a)?;
        let h1 = g.layer_norm(h1, vars[l.ln1_g], vars[l.ln1_b], cast(LN_EPS))?;
        let f = self.linear(g, vars, h1, l.w1, l.b1)?;
        let f = g.gelu(f)?;
        let f = self.linear(g, vars, f, l.w2, l.b2)?;
        let h2 = g.add(h1, f)?;
        g.layer_norm(h2, vars[l.ln2_g], vars[l.ln2_b], cast(LN_EPS))
    }

    fn visual_slots(&self, g: &mut Graph<T>, vars: &[Var], visual: &VisualInput) -> Result<Var> {
        let cfg = &self.config;
        match visual {
            VisualInput::Placeholder => Ok(vars[self.ids.placeholder]),
            VisualInput::Regions { rows, rank_ids } => {
                let s = rank_ids.len();
                if s == 0 || rows.len() != s * cfg.d_v {
                    return Err(Error::shape(
                        "forward",
                        format!("{} region values for {s} slots of width {}", rows.len(), cfg.d_v),
                    ));
                }
                if s > cfg.max_slots() {
                    return Err(Error::shape(
                        "forward",
                        format!("{s} visual slots exceed K_max * N = {}", cfg.max_slots()),
                    ));
                }
                if let Some(&r) = rank_ids.iter().find(|&&r| r == 0 || r > cfg.k_max) {
                    return Err(Error::shape("forward", format!("rank id {r} outside 1..={}", cfg.k_max)));
                }
                let r = Tensor::new(vec![s, cfg.d_v], rows.iter().map(|&x| cast::<T>(x as f64)).collect())?;
                let r = g.constant(r);
                let p = self.linear(g, vars, r, self.ids.proj_w, self.ids.proj_b)?;
                let rows0: Vec<usize> = rank_ids.iter().map(|&r| r - 1).collect();
                let re = g.embedding(vars[self.ids.rank_emb], &rows0)?;
                g.add(p, re)
            }
        }
    }

    /// Builds the forward pass of one example on `g`. `vars` comes from
    /// `self.params.bind(g)`.
    pub fn forward_example(&self, g: &mut Graph<T>, vars: &[Var], tokens: &[usize], visual: &VisualInput) -> Result<ExampleVars> {
        let cfg = &self.config;
        let l = tokens.len();
        if l == 0 || l > cfg.max_len {
            return Err(Error::shape("forward", format!("sequence length {l} outside 1..={}", cfg.max_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::shape("forward", format!("token id {t} >= vocab size {}", cfg.vocab_size)));
        }
        let te = g.embedding(vars[self.ids.tok_emb], tokens)?;
        let positions: Vec<usize> = (0..l).collect();
        let pe = g.embedding(vars[self.ids.pos_emb], &positions)?;
        let mut h = g.add(te, pe)?;
        for layer in &self.ids.text {
            h = self.block(g, vars, h, layer)?;
        }
        let slots = self.visual_slots(g, vars, visual)?;
        let s = g.value(slots).rows();
        let mut x = g.concat_rows(&[h, slots])?;
        for layer in &self.ids.cross {
            x = self.block(g, vars, x, layer)?;
        }
        let text_out = g.slice_rows(x, 0, l)?;
        let vis_out = g.slice_rows(x, l, s)?;
        let logits = self.linear(g, vars, text_out, self.ids.jmlm_w, self.ids.jmlm_b)?;
        let region_preds = self.linear(g, vars, vis_out, self.ids.jmrm_w, self.ids.jmrm_b)?;
        let cls = g.slice_rows(x, 0, 1)?;
        Ok(ExampleVars {
            logits,
            region_preds,
            cls,
            visual_slots: slots,
        })
    }

    /// `1 × n_out` classification scores from the `[cls]` vector.
    pub fn cls_scores(&self, g: &mut Graph<T>, vars: &[Var], ex: &ExampleVars) -> Result<Var> {
        let (w, b) = self
            .ids
            .cls
            .ok_or_else(|| Error::invalid("model has no classification head"))?;
        self.linear(g, vars, ex.cls, w, b)
    }

    /// Combined JMLM / JMRM objective of a batch on one graph.
    pub fn batch_loss(&self, g: &mut Graph<T>, vars: &[Var], batch: &MaskedBatch, mode: LossMode) -> Result<BatchLoss> {
        let mut lm_items = Vec::new();
        let mut rm_items = Vec::new();
        for ex in &batch.examples {
            let out = self.forward_example(g, vars, &ex.token_ids, &ex.visual)?;
            if mode.jmlm {
                lm_items.push((out.logits, ex.original_tokens.as_slice(), ex.token_mask.as_slice()));
            }
            if mode.jmrm && ex.n_masked_regions() > 0 {
                let s = ex.region_mask.len();
                let target = Tensor::new(
                    vec![s, self.config.d_v],
                    ex.region_targets.iter().map(|&x| cast::<T>(x as f64)).collect(),
                )?;
                rm_items.push((out.region_preds, target, ex.region_mask.as_slice()));
            }
        }
        let jmlm = if mode.jmlm { Some(jmlm_loss(g, &lm_items)?) } else { None };
        let jmrm = if mode.jmrm {
            jmrm_loss(
                g,
                &rm_items,
                vars[self.ids.jmrm_w],
                self.config.p_norm,
                self.config.l1_coeff,
            )?
        } else {
            None
        };
        let total = match (jmlm, jmrm) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            (a, b) => a.or(b),
        };
        Ok(BatchLoss { total, jmlm, jmrm })
    }

    /// Loss values and parameter gradients, or `None` if the batch carries
    /// no loss under `mode`.
    pub fn loss_and_grads(&self, batch: &MaskedBatch, mode: LossMode) -> Result<Option<(LossValues, Gradients<T>)>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let loss = self.batch_loss(&mut g, &vars, batch, mode)?;
        let Some(total) = loss.total else {
            return Ok(None);
        };
        let value = |v: Option<Var>| v.map(|v| g.value(v).item().to_f64().unwrap_or(f64::NAN));
        let values = LossValues {
            total: g.value(total).item().to_f64().unwrap_or(f64::NAN),
            jmlm: value(loss.jmlm),
            jmrm: value(loss.jmrm),
        };
        let grads = g.backward(total)?;
        Ok(Some((values, grads)))
    }

    /// Runs the batch and returns zero-padded outputs.
    pub fn forward(&self, batch: &MaskedBatch) -> Result<ForwardOutput> {
        let b = batch.len();
        let (v, dv, d) = (self.config.vocab_size, self.config.d_v, self.config.d);
        let l = batch.examples.iter().map(|e| e.token_ids.len()).max().unwrap_or(0);
        let s = batch.examples.iter().map(|e| e.visual.n_slots()).max().unwrap_or(0);
        let mut logits = vec![0.0; b * l * v];
        let mut preds = vec![0.0; b * s * dv];
        let mut cls = vec![0.0; b * d];
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        for (i, ex) in batch.examples.iter().enumerate() {
            let out = self.forward_example(&mut g, &vars, &ex.token_ids, &ex.visual)?;
            copy_into(&mut logits[i * l * v..], g.value(out.logits).data());
            copy_into(&mut preds[i * s * dv..], g.value(out.region_preds).data());
            copy_into(&mut cls[i * d..], g.value(out.cls).data());
        }
        Ok(ForwardOutput {
            token_logits: Tensor::new(vec![b, l, v], logits)?,
            region_preds: Tensor::new(vec![b, s, dv], preds)?,
            cls: Tensor::new(vec![b, d], cls)?,
        })
    }

    /// Sum of masked-token cross-entropies and the masked-token count.
    pub fn masked_cross_entropy(&self, examples: &[MaskedExample]) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in examples.chunks(32) {
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g);
            for ex in chunk {
                let out = self.forward_example(&mut g, &vars, &ex.token_ids, &ex.visual)?;
                let ce = g.cross_entropy_sum(out.logits, &ex.original_tokens, &ex.token_mask)?;
                total += g.value(ce).item().to_f64().unwrap_or(f64::NAN);
                count += ex.n_masked_tokens();
            }
        }
        Ok((total, count))
    }
}

fn copy_into(dst: &mut [f64], src: &[impl Real]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.to_f64().unwrap_or(f64::NAN);
    }
}

fn layer_param_ids(l: &LayerIds) -> [ParamId; 16] {
    [
        l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.w1, l.b1, l.w2, l.b2, l.ln2_g, l.ln2_b,
    ]
}

/// Mean cross-entropy over masked positions of every `(logits, targets,
/// flags)` item.
pub fn jmlm_loss<T: Real>(g: &mut Graph<T>, items: &[(Var, &[usize], &[bool])]) -> Result<Var> {
    let count: usize = items.iter().map(|(_, _, m)| m.iter().filter(|&&f| f).count()).sum();
    if count == 0 {
        return Err(Error::invalid("JMLM loss needs at least one masked token"));
    }
    let mut parts = Vec::with_capacity(items.len());
    for &(logits, targets, mask) in items {
        if mask.iter().any(|&f| f) {
            parts.push(g.cross_entropy_sum(logits, targets, mask)?);
        }
    }
    let sum = sum_scalars(g, &parts)?;
    g.scale(sum, cast(1.0 / count as f64))
}

/// Mean over masked regions of `‖r − r̂‖_p^p / d_v`, plus `l1 · ‖W‖₁` of the
/// regression head. `None` when no region is masked.
pub fn jmrm_loss<T: Real>(
    g: &mut Graph<T>,
    items: &[(Var, Tensor<T>, &[bool])],
    head_w: Var,
    p: f64,
    l1: f64,
) -> Result<Option<Var>> {
    let count: usize = items.iter().map(|(_, _, m)| m.iter().filter(|&&f| f).count()).sum();
    if count == 0 {
        return Ok(None);
    }
    let d_v = items[0].1.cols();
    let mut parts = Vec::with_capacity(items.len());
    for (pred, target, mask) in items {
        parts.push(g.lp_distance_sum(*pred, target, mask, cast(p))?);
    }
    let sum = sum_scalars(g, &parts)?;
    let mut loss = g.scale(sum, cast(1.0 / (count * d_v) as f64))?;
    if l1 > 0.0 {
        let reg = g.abs_sum(head_w)?;
        let reg = g.scale(reg, cast(l1))?;
        loss = g.add(loss, reg)?;
    }
    Ok(Some(loss))
}

fn sum_scalars<T: Real>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// `exp(Σ CE / Σ masked)` over the whole stream.
pub fn perplexity<T: Real>(model: &CrossModalModel<T>, examples: &[MaskedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("perplexity: empty evaluation stream".into()));
    }
    let (total, count) = model.masked_cross_entropy(examples)?;
    if count == 0 {
        return Err(Error::Empty("perplexity: no masked tokens in evaluation stream".into()));
    }
    Ok((total / count as f64).exp())
}
