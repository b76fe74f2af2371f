//! Word vectors and the continuous-bag-of-words query/key encoders.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Parses a stopword list: one token per line, `#` starts a comment.
pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

pub fn load_stopwords(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    Ok(parse_stopwords(&std::fs::read_to_string(path)?))
}

#[derive(Clone, Debug)]
pub struct WordEmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f32>>,
    stopwords: HashSet<String>,
}

impl WordEmbeddingTable {
    pub fn new(dim: usize) -> Self {
        WordEmbeddingTable {
            dim,
            entries: HashMap::new(),
            stopwords: default_stopwords(),
        }
    }

    /// Inserts a vector unless the (lowercased) token is already present.
    pub fn insert(&mut self, token: &str, vector: Vec<f32>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::shape(
                "word_vectors",
                format!("`{}` has {} values, table dim is {}", token, vector.len(), self.dim),
            ));
        }
        let key = token.to_lowercase();
        if self.entries.contains_key(&key) {
            return Ok(false);
        }
        self.entries.insert(key, vector);
        Ok(true)
    }

    pub fn with_stopwords(mut self, stopwords: HashSet<String>) -> Self {
        self.stopwords = stopwords;
        self
    }

    pub fn set_stopwords(&mut self, stopwords: HashSet<String>) {
        self.stopwords = stopwords;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        match self.entries.get(token) {
            Some(v) => Some(v),
            None => self.entries.get(&token.to_lowercase()).map(Vec::as_slice),
        }
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    /// Copy of the table with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        WordEmbeddingTable {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x * factor).collect()))
                .collect(),
            stopwords: self.stopwords.clone(),
        }
    }

    /// Reads the whitespace-separated text format: an optional `count dim`
    /// header, then `token v1 ... v_dim` per line.
    pub fn from_reader(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let mut table: Option<WordEmbeddingTable> = None;
        let mut declared: Option<usize> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if idx == 0 && fields.len() == 2 {
                if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    declared = Some(d);
                    continue;
                }
            }
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f32>())
                .collect::<std::result::Result<Vec<f32>, _>>()
                .map_err(|e| Error::parse(origin, lineno, format!("bad float: {e}")))?;
            let t = table.get_or_insert_with(|| WordEmbeddingTable::new(declared.unwrap_or(values.len())));
            if values.len() != t.dim {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("expected {} values, found {}", t.dim, values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(origin, lineno, "non-finite value"));
            }
            t.insert(fields[0], values)?;
        }
        table.ok_or_else(|| Error::Empty(format!("{}: no word vectors", origin.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path)?;
        Self::from_reader(BufReader::new(f), path)
    }
}

pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<WordEmbeddingTable> {
    WordEmbeddingTable::load(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryVector {
    pub values: Vec<f32>,
    /// Set when no in-vocabulary token contributed.
    pub is_degenerate: bool,
}

impl QueryVector {
    fn degenerate(dim: usize) -> Self {
        QueryVector {
            values: vec![0.0; dim],
            is_degenerate: true,
        }
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

fn mean_of<'a>(dim: usize, vectors: impl Iterator<Item = &'a [f32]>) -> Option<Vec<f64>> {
    let mut acc = vec![0.0f64; dim];
    let mut n = 0usize;
    for v in vectors {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x as f64;
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    Some(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Mean embedding of already-tokenized text: in-vocabulary non-stopwords,
/// falling back to every in-vocabulary token.
pub fn encode_cbow_tokens<S: AsRef<str>>(tokens: &[S], table: &WordEmbeddingTable) -> QueryVector {
    let in_vocab: Vec<(&str, &[f32])> = tokens
        .iter()
        .filter_map(|t| table.get(t.as_ref()).map(|v| (t.as_ref(), v)))
        .collect();
    let content = mean_of(
        table.dim(),
        in_vocab.iter().filter(|(t, _)| !table.is_stopword(t)).map(|(_, v)| *v),
    );
    match content.or_else(|| mean_of(table.dim(), in_vocab.iter().map(|(_, v)| *v))) {
        Some(m) => QueryVector {
            values: m.into_iter().map(|x| x as f32).collect(),
            is_degenerate: false,
        },
        None => QueryVector::degenerate(table.dim()),
    }
}

pub fn encode_cbow(text: &str, table: &WordEmbeddingTable) -> QueryVector {
    encode_cbow_tokens(&tokenize(text), table)
}

/// Key for a noun-indexed image: half the mean lemma embedding plus half the
/// bag-of-words encoding of the definition. A part with no known tokens is
/// dropped and the other part is used alone.
pub fn encode_synset_key(lemmas: &[String], definition: &str, table: &WordEmbeddingTable) -> Result<QueryVector> {
    if lemmas.is_empty() {
        return Err(Error::invalid("synset key needs at least one lemma"));
    }
    let lemma_tokens: Vec<String> = lemmas.iter().flat_map(|l| tokenize(l)).collect();
    let lemma_mean = mean_of(table.dim(), lemma_tokens.iter().filter_map(|t| table.get(t)));
    let def = encode_cbow(definition, table);
    let def = (!def.is_degenerate).then_some(def.values);
    let values: Vec<f32> = match (lemma_mean, def) {
        (Some(l), Some(d)) => l
            .iter()
            .zip(&d)
            .map(|(&a, &b)| (0.5 * a + 0.5 * b as f64) as f32)
            .collect(),
        (Some(l), None) => l.into_iter().map(|x| x as f32).collect(),
        (None, Some(d)) => d,
        (None, None) => return Ok(QueryVector::degenerate(table.dim())),
    };
    Ok(QueryVector {
        values,
        is_degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn table() -> WordEmbeddingTable {
        let mut t = WordEmbeddingTable::new(3);
        t.insert("dog", vec![1.0, 2.0, 3.0]).unwrap();
        t.insert("cat", vec![-1.0, 0.5, 0.0]).unwrap();
        t.insert("domestic", vec![0.0, 1.0, 1.0]).unwrap();
        t.insert("animal", vec![2.0, 0.0, -1.0]).unwrap();
        t.insert("the", vec![9.0, 9.0, 9.0]).unwrap();
        t.insert("a", vec![4.0, 4.0, 4.0]).unwrap();
        t
    }

    fn read(s: &str) -> Result<WordEmbeddingTable> {
        WordEmbeddingTable::from_reader(Cursor::new(s), Path::new("vecs.txt"))
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("The Dog's ball, [MASK]!"), vec!["the", "dog", "s", "ball", "mask"]);
    }

    #[test]
    fn loads_plain_format() {
        let t = read("dog 1 2 3\ncat 4 5 6\n").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn header_declares_dim() {
        let v: Vec<String> = (0..300).map(|i| format!("{}", i as f32 * 0.01)).collect();
        let body = format!("2 300\ndog {}\ncat {}\n", v.join(" "), v.join(" "));
        let t = read(&body).unwrap();
        assert_eq!(t.dim(), 300);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn short_line_reports_line_number() {
        let v: Vec<String> = (0..300).map(|_| "0.5".to_string()).collect();
        let body = format!("2 300\ndog {}\ncat {}\n", v.join(" "), v[..299].join(" "));
        let err = read(&body).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("299"), "{err}");
    }

    #[test]
    fn duplicate_keeps_first_and_keys_are_lowercase() {
        let t = read("Dog 1 1\ndog 2 2\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.get("DOG").unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn single_word_is_its_vector() {
        let q = encode_cbow("dog", &table());
        assert_eq!(q.values, vec![1.0, 2.0, 3.0]);
        assert!(!q.is_degenerate);
    }

    #[test]
    fn two_words_average() {
        let q = encode_cbow("Dog CAT", &table());
        assert_eq!(q.values, vec![0.0, 1.25, 1.5]);
    }

    #[test]
    fn stopwords_are_skipped_unless_nothing_else() {
        let q = encode_cbow("the dog", &table());
        assert_eq!(q.values, vec![1.0, 2.0, 3.0]);
        // only stopwords in vocabulary: fall back to them
        let q = encode_cbow("the a", &table());
        assert_eq!(q.values, vec![6.5, 6.5, 6.5]);
    }

    #[test]
    fn out_of_vocabulary_text_is_degenerate() {
        let q = encode_cbow("of it zebra", &table());
        assert!(q.is_degenerate);
        assert!(q.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synset_key_combines_lemma_and_definition() {
        let t = table();
        let k = encode_synset_key(&["dog".into()], "", &t).unwrap();
        assert_eq!(k.values, vec![1.0, 2.0, 3.0]);
        // definition cbow: mean(domestic, animal) = [1, 0.5, 0]
        let k = encode_synset_key(&["dog".into()], "a domestic animal", &t).unwrap();
        assert_eq!(k.values, vec![1.0, 1.25, 1.5]);
        let k = encode_synset_key(&["zebra".into()], "striped quagga", &t).unwrap();
        assert!(k.is_degenerate);
        assert!(encode_synset_key(&[], "x", &t).is_err());
    }

    #[test]
    fn duplicate_lemmas_count_toward_the_mean() {
        let t = table();
        let k = encode_synset_key(&["dog".into(), "dog".into(), "cat".into()], "", &t).unwrap();
        let expected = [(1.0 + 1.0 - 1.0) / 3.0, (2.0 + 2.0 + 0.5) / 3.0, 2.0];
        for (a, b) in k.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::sample::select(vec!["dog", "cat", "the", "domestic", "zebra", "animal"]),
            1..12,
        )
        .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn permutation_invariant(tokens in words(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let t = table();
            let mut shuffled = tokens.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = encode_cbow_tokens(&tokens, &t);
            let b = encode_cbow_tokens(&shuffled, &t);
            prop_assert_eq!(a.is_degenerate, b.is_degenerate);
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn scaling_the_table_scales_the_output(tokens in words(), factor in 0.1f32..10.0) {
            let t = table();
            let a = encode_cbow_tokens(&tokens, &t);
            let b = encode_cbow_tokens(&tokens, &t.scaled(factor));
            prop_assume!(!a.is_degenerate);
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x * factor - y).abs() < 1e-4 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn duplication_follows_multiplicity(tokens in words()) {
            // Repeating the first token k times weights it k-fold.
            let t = table();
            let mut doubled = tokens.clone();
            doubled.push(tokens[0].clone());
            let q = encode_cbow_tokens(&doubled, &t);
            let content: Vec<&[f32]> = doubled.iter()
                .filter(|w| !t.is_stopword(w))
                .filter_map(|w| t.get(w))
                .collect();
            let pool: Vec<&[f32]> = if content.is_empty() {
                doubled.iter().filter_map(|w| t.get(w)).collect()
            } else { content };
            prop_assume!(!pool.is_empty());
            for j in 0..3 {
                let m = pool.iter().map(|v| v[j] as f64).sum::<f64>() / pool.len() as f64;
                prop_assert!((q.values[j] as f64 - m).abs() < 1e-5);
            }
        }
    }
}
