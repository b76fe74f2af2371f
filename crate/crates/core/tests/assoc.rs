use std::collections::HashSet;

use glm_core::assoc::{
    associate_keyword_baseline, associate_object, associate_scene, build_caption_index, build_synset_index,
    representative_nouns, surviving_tokens, Caption, CaptionCorpus, NounLexicon, SynsetRecord,
};
use glm_core::embed::{tokenize, WordEmbeddingTable};
use glm_core::vindex::ImageFeatureStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 24] = [
    "dog", "cat", "tree", "car", "boat", "sky", "river", "house", "road", "bird", "horse", "train", "bridge", "lake",
    "field", "snow", "beach", "city", "child", "ball", "the", "a", "on", "with",
];

fn table(seed: u64) -> WordEmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = WordEmbeddingTable::new(6);
    for w in WORDS {
        t.insert(w, (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    }
    t
}

fn corpus(n: usize, seed: u64) -> CaptionCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CaptionCorpus::new(
        (0..n)
            .map(|i| Caption {
                image_id: format!("img{i:03}"),
                text: (0..5).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" "),
            })
            .collect(),
    )
}

fn store(ids: impl IntoIterator<Item = String>) -> ImageFeatureStore {
    let mut s = ImageFeatureStore::new(2, 3);
    for (i, id) in ids.into_iter().enumerate() {
        s.push(&id, &[i as f32; 6]).unwrap();
    }
    s
}

fn oracle_cbow(text: &str, t: &WordEmbeddingTable) -> Option<Vec<f64>> {
    let known: Vec<String> = tokenize(text).into_iter().filter(|w| t.get(w).is_some()).collect();
    let content: Vec<&String> = known.iter().filter(|w| !t.is_stopword(w)).collect();
    let use_: Vec<&String> = if content.is_empty() { known.iter().collect() } else { content };
    if use_.is_empty() {
        return None;
    }
    let mut m = vec![0.0; t.dim()];
    for w in &use_ {
        for (a, &x) in m.iter_mut().zip(t.get(w).unwrap()) {
            *a += x as f64 / use_.len() as f64;
        }
    }
    Some(m)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn scene_ranking_matches_brute_force() {
    let t = table(1);
    let c = corpus(50, 2);
    let s = store(c.captions.iter().map(|c| c.image_id.clone()));
    let idx = build_caption_index(&c, &t, &s).unwrap().index;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let text: Vec<String> = (0..4).map(|_| WORDS[rng.random_range(0..20)].to_string()).collect();
        let q = oracle_cbow(&text.join(" "), &t).unwrap();
        let mut expect: Vec<(f64, &str)> = c
            .captions
            .iter()
            .map(|cap| (cos(&q, &oracle_cbow(&cap.text, &t).unwrap()), cap.image_id.as_str()))
            .collect();
        expect.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let got = associate_scene(&text, &idx, &s, &t, 16).unwrap();
        assert_eq!(got.len(), 16);
        for (r, item) in got.items.iter().enumerate() {
            assert_eq!(item.rank, r);
            assert!((item.similarity - expect[r].0).abs() < 1e-5, "{} vs {:?}", item.similarity, expect[r]);
        }
        let want: Vec<&str> = expect.iter().take(16).map(|e| e.1).collect();
        assert_eq!(got.ids(), want);
        assert_eq!(got.items[0].features, s.features_by_id(&got.items[0].id).unwrap());
    }
}

#[test]
fn own_caption_is_retrieved_first() {
    let t = table(4);
    let c = corpus(50, 5);
    let s = store(c.captions.iter().map(|c| c.image_id.clone()));
    let idx = build_caption_index(&c, &t, &s).unwrap().index;
    for cap in &c.captions {
        let got = associate_scene(&tokenize(&cap.text), &idx, &s, &t, 3).unwrap();
        assert!((got.items[0].similarity - 1.0).abs() < 1e-6);
        let key = oracle_cbow(&cap.text, &t).unwrap();
        let first = c.captions.iter().find(|o| o.image_id == got.items[0].id).unwrap();
        assert!(cos(&key, &oracle_cbow(&first.text, &t).unwrap()) > 1.0 - 1e-6);
    }
}

#[test]
fn keyword_ranking_matches_overlap_count() {
    let t = table(6);
    let c = corpus(20, 7);
    let s = store(c.captions.iter().map(|c| c.image_id.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let text: Vec<String> = (0..6).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
        let content: HashSet<&str> = text.iter().map(String::as_str).filter(|w| !t.is_stopword(w)).collect();
        let mut expect: Vec<(usize, &str)> = c
            .captions
            .iter()
            .map(|cap| {
                let words: HashSet<String> = tokenize(&cap.text).into_iter().collect();
                (content.iter().filter(|w| words.contains(**w)).count(), cap.image_id.as_str())
            })
            .collect();
        expect.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        let got = associate_keyword_baseline(&text, &c, &|w| t.is_stopword(w), &s, 8).unwrap();
        let want: Vec<&str> = expect.iter().take(8).map(|e| e.1).collect();
        assert_eq!(got.ids(), want);
        for (item, e) in got.items.iter().zip(&expect) {
            assert_eq!(item.similarity, e.0 as f64);
        }
    }
}

#[test]
fn keyword_zero_overlap_falls_back_to_id_order() {
    let t = table(6);
    let c = corpus(20, 7);
    let s = store(c.captions.iter().map(|c| c.image_id.clone()));
    let got = associate_keyword_baseline(&["zzz".to_string()], &c, &|w| t.is_stopword(w), &s, 3).unwrap();
    assert_eq!(got.ids(), vec!["img000", "img001", "img002"]);
}

fn orthogonal_table() -> WordEmbeddingTable {
    let mut t = WordEmbeddingTable::new(4);
    t.insert("dog", vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    t.insert("cat", vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    t.insert("barks", vec![0.9, 0.1, 0.0, 0.2]).unwrap();
    t.insert("meows", vec![0.1, 0.9, 0.2, 0.0]).unwrap();
    t
}

#[test]
fn orthogonal_nouns_become_the_two_representatives() {
    let t = orthogonal_table();
    for seed in 0..20 {
        let reps = representative_nouns(&["dog".into(), "cat".into(), "dog".into()], &t, 2, seed).unwrap();
        let mut sorted = reps.clone();
        sorted.sort();
        assert_eq!(sorted, vec!["cat", "dog"], "seed {seed}: {reps:?}");
    }
}

#[test]
fn object_association_groups_by_representative() {
    let t = orthogonal_table();
    let synsets = vec![
        SynsetRecord {
            synset_id: "n.dog".into(),
            lemmas: vec!["dog".into()],
            definition: "barks".into(),
            image_ids: vec!["d1".into(), "d2".into(), "d3".into()],
        },
        SynsetRecord {
            synset_id: "n.cat".into(),
            lemmas: vec!["cat".into()],
            definition: "meows".into(),
            image_ids: vec!["c1".into(), "c2".into(), "c3".into()],
        },
    ];
    let s = store(["d1", "d2", "d3", "c1", "c2", "c3"].map(String::from));
    let idx = build_synset_index(&synsets, &t, &s).unwrap().index;
    let lex = NounLexicon::new(["dog", "cat"].map(String::from)).unwrap();
    let tokens = tokenize("the dog and the cat");
    let a = associate_object(&tokens, &idx, &s, &t, &lex, 4, 2, 11).unwrap();
    assert_eq!(a.len(), 4);
    let ids = a.ids();
    let first: HashSet<char> = ids[..2].iter().map(|i| i.chars().next().unwrap()).collect();
    let second: HashSet<char> = ids[2..].iter().map(|i| i.chars().next().unwrap()).collect();
    assert_eq!(first.len(), 1);
    assert_eq!(second.len(), 1);
    assert_ne!(first, second);
    let one = associate_object(&tokenize("a dog"), &idx, &s, &t, &lex, 4, 2, 11).unwrap();
    assert_eq!(one.len(), 4);
    assert_eq!(one.ids()[..3], ["d1", "d2", "d3"]);
    assert!(associate_object(&tokenize("run quickly"), &idx, &s, &t, &lex, 4, 2, 11).unwrap().is_empty());
    assert!(associate_object(&tokens, &idx, &s, &t, &lex, 2, 3, 11).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scene_depends_only_on_surviving_tokens(
        picks in prop::collection::vec(0usize..WORDS.len(), 1..8),
        masked in prop::collection::vec(any::<bool>(), 8),
        k in 1usize..20,
    ) {
        let t = table(9);
        let c = corpus(30, 10);
        let s = store(c.captions.iter().map(|c| c.image_id.clone()));
        let idx = build_caption_index(&c, &t, &s).unwrap().index;
        let raw: Vec<&str> = picks.iter().zip(&masked).map(|(&p, &m)| if m { "[MASK]" } else { WORDS[p] }).collect();
        let kept: Vec<String> = picks.iter().zip(&masked).filter(|(_, &m)| !m).map(|(&p, _)| WORDS[p].to_string()).collect();
        let alt: Vec<String> = picks.iter().zip(&masked).map(|(&p, &m)| if m { "qqqq".into() } else { WORDS[p].to_string() }).collect();
        prop_assert_eq!(surviving_tokens(&raw.join(" ")), kept.clone());
        let a = associate_scene(&kept, &idx, &s, &t, k).unwrap();
        let b = associate_scene(&alt, &idx, &s, &t, k).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.len() <= k);
        prop_assert!(a.items.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn object_output_never_exceeds_k(
        picks in prop::collection::vec(0usize..2, 0..6),
        k in 1usize..8,
        kappa in 1usize..8,
        seed in any::<u64>(),
    ) {
        prop_assume!(kappa <= k);
        let t = orthogonal_table();
        let synsets = vec![SynsetRecord {
            synset_id: "n.dog".into(),
            lemmas: vec!["dog".into()],
            definition: "barks".into(),
            image_ids: (0..10).map(|i| format!("d{i}")).collect(),
        }];
        let s = store((0..10).map(|i| format!("d{i}")));
        let idx = build_synset_index(&synsets, &t, &s).unwrap().index;
        let lex = NounLexicon::new(["dog", "cat"].map(String::from)).unwrap();
        let tokens: Vec<String> = picks.iter().map(|&p| ["dog", "cat"][p].to_string()).collect();
        let a = associate_object(&tokens, &idx, &s, &t, &lex, k, kappa, seed).unwrap();
        prop_assert!(a.len() <= k);
        for (r, it) in a.items.iter().enumerate() {
            prop_assert_eq!(it.rank, r);
        }
    }
}
