use glm_core::assoc::{build_caption_index, AssocResources};
use glm_core::model::{CrossModalModel, ModelConfig};
use glm_core::toydata::{generate_grounded_corpus, ToyData, ToySpec};
use glm_core::train::{
    mix_corpora, pretrain, AssocCache, EvalImages, Grounding, Strategy, TextExample, TrainConfig, TrainData,
};
use glm_core::vindex::ImageKeyIndex;
use glm_core::Error;

fn toy() -> ToyData {
    generate_grounded_corpus(&ToySpec {
        vocab_size: 40,
        n_concepts: 8,
        n_examples: 200,
        n_text_only: 100,
        d_v: 8,
        ..ToySpec::default()
    })
    .unwrap()
}

fn model(t: &ToyData) -> CrossModalModel {
    CrossModalModel::new(ModelConfig {
        d: 16,
        d_ff: 32,
        n_layers_text: 1,
        n_layers_cross: 1,
        n_heads: 2,
        k_max: 4,
        ..ModelConfig::desk(t.vocab.len(), 8)
    })
    .unwrap()
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        lr: 3e-3,
        max_epochs: 1000,
        max_steps: Some(steps),
        mix_ratio: 1.0,
        eval_every: 25,
        patience: 1000,
        k: 4,
        eval_images: EvalImages::Paired,
        ..TrainConfig::default()
    }
}

fn valid(t: &ToyData) -> Vec<TextExample> {
    t.valid.captions.iter().map(TextExample::from).collect()
}

#[test]
fn mixing_ratios() {
    let t = toy();
    let paired = &t.train.captions;
    let only_paired = mix_corpora(paired, &t.text_only, 1.0, 1).unwrap();
    assert!(only_paired.take(500).all(|e| e.image_id.is_some()));
    let only_text = mix_corpora(paired, &t.text_only, 0.0, 1).unwrap();
    assert!(only_text.take(500).all(|e| e.image_id.is_none()));
    let half = mix_corpora(paired, &t.text_only, 0.5, 1).unwrap();
    let n = 10_000;
    let frac = half.take(n).filter(|e| e.image_id.is_some()).count() as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    let a: Vec<_> = mix_corpora(paired, &t.text_only, 0.3, 9).unwrap().take(300).collect();
    let b: Vec<_> = mix_corpora(paired, &t.text_only, 0.3, 9).unwrap().take(300).collect();
    assert_eq!(a, b);
    assert!(mix_corpora(&[], &t.text_only, 0.5, 0).is_err());
    assert!(mix_corpora(paired, &[], 0.5, 0).is_err());
    assert!(mix_corpora(paired, &t.text_only, 1.5, 0).is_err());
}

#[test]
fn no_grounding_learns_and_is_reproducible() {
    let t = toy();
    let v = valid(&t);
    let g = Grounding {
        vocab: &t.vocab,
        store: None,
        assoc: None,
        k: 4,
        kappa: 2,
        assoc_seed: 0,
    };
    let data = TrainData {
        grounding: g,
        paired: &t.train.captions,
        text_only: &t.text_only,
        valid: &v,
    };
    let run = || {
        let mut m = model(&t);
        let r = pretrain(&mut m, Strategy::NoGrounding, &data, &config(200), &mut AssocCache::new()).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    let train = r1.metric("train", "ppl");
    assert!(train.last().unwrap().1 < train[0].1, "{train:?}");
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert_eq!(m1.params, m2.params);
    assert!(r1.to_csv().starts_with("step,split,metric,value\n0,valid,ppl,"));
}

#[test]
fn t2i_never_updates_the_jmlm_head() {
    let t = toy();
    let v = valid(&t);
    let g = Grounding {
        vocab: &t.vocab,
        store: Some(&t.store),
        assoc: None,
        k: 4,
        kappa: 2,
        assoc_seed: 0,
    };
    let data = TrainData {
        grounding: g,
        paired: &t.train.captions,
        text_only: &t.text_only,
        valid: &v,
    };
    let mut m = model(&t);
    let head: Vec<_> = m.jmlm_head_ids().iter().map(|&id| m.params.value(id).clone()).collect();
    let jmrm_before = m.params.value(m.jmrm_head_ids()[0]).clone();
    let cfg = TrainConfig {
        mix_ratio: 0.5,
        ..config(60)
    };
    pretrain(&mut m, Strategy::TransferredT2I, &data, &cfg, &mut AssocCache::new()).unwrap();
    for (id, before) in m.jmlm_head_ids().iter().zip(&head) {
        assert_eq!(m.params.value(*id), before);
    }
    assert_ne!(m.params.value(m.jmrm_head_ids()[0]), &jmrm_before);
    assert!(m.placeholder_trainable());
}

#[test]
fn empty_index_falls_back_to_no_grounding() {
    let t = toy();
    let v = valid(&t);
    let empty = ImageKeyIndex::empty(t.table.dim());
    let res = AssocResources {
        table: &t.table,
        store: &t.store,
        caption_index: Some(&empty),
        synset_index: None,
        lexicon: None,
        captions: None,
    };
    let g = Grounding {
        vocab: &t.vocab,
        store: None,
        assoc: Some(res),
        k: 4,
        kappa: 2,
        assoc_seed: 0,
    };
    let data = TrainData {
        grounding: g,
        paired: &t.train.captions,
        text_only: &t.text_only,
        valid: &v,
    };
    let mut a = model(&t);
    let mut b = model(&t);
    let ra = pretrain(&mut a, Strategy::AssociativeScene, &data, &config(50), &mut AssocCache::new()).unwrap();
    let rb = pretrain(&mut b, Strategy::NoGrounding, &data, &config(50), &mut AssocCache::new()).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(a.params, b.params);
}

#[test]
fn scene_association_uses_the_cache() {
    let t = toy();
    let v = valid(&t);
    let idx = build_caption_index(&t.train, &t.table, &t.store).unwrap().index;
    let res = AssocResources {
        table: &t.table,
        store: &t.store,
        caption_index: Some(&idx),
        synset_index: None,
        lexicon: None,
        captions: None,
    };
    let g = Grounding {
        vocab: &t.vocab,
        store: None,
        assoc: Some(res),
        k: 4,
        kappa: 2,
        assoc_seed: 0,
    };
    let mut cache = AssocCache::new();
    let m = model(&t);
    let p1 = g.evaluate(&m, Strategy::AssociativeScene, &v, EvalImages::Placeholder, 3, &mut cache).unwrap();
    let misses = cache.misses;
    let p2 = g.evaluate(&m, Strategy::AssociativeScene, &v, EvalImages::Placeholder, 3, &mut cache).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(cache.misses, misses);
    assert!(cache.hits >= misses);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("assoc.cache");
    cache.save(&path).unwrap();
    let mut loaded = AssocCache::open(&path).unwrap();
    assert_eq!(loaded.len(), cache.len());
    let p3 = g.evaluate(&m, Strategy::AssociativeScene, &v, EvalImages::Placeholder, 3, &mut loaded).unwrap();
    assert_eq!(p1, p3);
    assert_eq!(loaded.misses, 0);
}

#[test]
fn strategy_corpus_mismatch_fails_before_training() {
    let t = toy();
    let v = valid(&t);
    let g = Grounding {
        vocab: &t.vocab,
        store: None,
        assoc: None,
        k: 4,
        kappa: 2,
        assoc_seed: 0,
    };
    let data = TrainData {
        grounding: g,
        paired: &t.train.captions,
        text_only: &t.text_only,
        valid: &v,
    };
    for s in [Strategy::TransferredI2T, Strategy::AssociativeScene, Strategy::AssociativeObject] {
        let mut m = model(&t);
        let before = m.params.clone();
        let err = pretrain(&mut m, s, &data, &config(10), &mut AssocCache::new()).unwrap_err();
        assert!(matches!(err, Error::StrategyMismatch { .. }), "{err}");
        assert_eq!(m.params, before);
    }
    let with_store = TrainData {
        grounding: Grounding {
            store: Some(&t.store),
            ..g
        },
        paired: &[],
        text_only: &t.text_only,
        valid: &v,
    };
    let err = pretrain(&mut model(&t), Strategy::TransferredBoth, &with_store, &config(10), &mut AssocCache::new())
        .unwrap_err();
    assert!(matches!(err, Error::StrategyMismatch { .. }), "{err}");
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(Strategy::parse(s.name()).unwrap(), s);
    }
    assert!(Strategy::parse("bogus").is_err());
}
