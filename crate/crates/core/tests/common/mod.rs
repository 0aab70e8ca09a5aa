#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssnt::data::{self, ExamplePair, RawPair, Vocab};
use ssnt::decode::{decode_ids, Search};
use ssnt::seqnn::Model;
use ssnt::train::{train, TrainConfig, TrainOutcome};

pub const COPY_ALPHABET: [char; 8] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];

fn chars(s: &str) -> Vec<String> {
    s.chars().map(String::from).collect()
}

pub fn pair(src: &str, tgt: &str) -> RawPair {
    RawPair {
        source: chars(src),
        target: chars(tgt),
        line: 0,
    }
}

pub fn random_string(rng: &mut ChaCha8Rng, alphabet: &[char], min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

/// `n` strings over an 8-letter alphabet, lengths 1..=10, target = source.
pub fn copy_corpus(n: usize, seed: u64) -> Vec<RawPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = random_string(&mut rng, &COPY_ALPHABET, 1, 10);
            pair(&s, &s)
        })
        .collect()
}

/// Deterministic inflection rule: a final `a`, `o` or `u` takes an umlaut,
/// then `en` is appended.
pub fn inflect(stem: &str) -> String {
    let mut out: Vec<char> = stem.chars().collect();
    if let Some(last) = out.last_mut() {
        *last = match *last {
            'a' => 'ä',
            'o' => 'ö',
            'u' => 'ü',
            c => c,
        };
    }
    out.into_iter().collect::<String>() + "en"
}

pub fn suffix_corpus(n: usize, seed: u64) -> Vec<RawPair> {
    const LETTERS: [char; 10] = ['b', 'd', 'g', 'k', 'l', 'r', 't', 'a', 'o', 'u'];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = random_string(&mut rng, &LETTERS, 3, 7);
            let t = inflect(&s);
            pair(&s, &t)
        })
        .collect()
}

pub struct Trained {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub train: Vec<ExamplePair>,
    pub dev: Vec<ExamplePair>,
}

pub fn fit(config: &TrainConfig, train_raw: &[RawPair], dev_raw: &[RawPair]) -> Trained {
    let (src_vocab, tgt_vocab) = data::build_vocab(train_raw, config.min_count()).unwrap();
    let train_set = data::encode_pairs(train_raw, &src_vocab, &tgt_vocab);
    let dev_set = data::encode_pairs(dev_raw, &src_vocab, &tgt_vocab);
    let mc = config.model_config(src_vocab.len(), tgt_vocab.len(), &train_set).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::new(mc, config.init_scale, &mut rng).unwrap();
    let outcome = train(config, model, &train_set, &dev_set, |_| Ok(())).unwrap();
    Trained {
        model: outcome.best.clone(),
        outcome,
        src_vocab,
        tgt_vocab,
        train: train_set,
        dev: dev_set,
    }
}

/// Whole-string accuracy of decoding `pairs` with `search`.
pub fn accuracy(t: &Trained, config: &TrainConfig, pairs: &[RawPair], search: Search) -> f64 {
    use rayon::prelude::*;
    let hits: usize = pairs
        .par_iter()
        .map(|p| {
            let ids = t.src_vocab.encode_with_eos(&p.source);
            let d = decode_ids(&t.model, &ids, config.max_columns(p.source.len()), search).unwrap();
            let out = t.tgt_vocab.decode(&d.tokens).unwrap();
            usize::from(out == p.target)
        })
        .sum();
    hits as f64 / pairs.len() as f64
}

/// Every nondecreasing sequence of length `cols` over `0..rows`.
pub fn monotone_paths(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(cols);
    fn rec(rows: usize, cols: usize, from: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == cols {
            out.push(cur.clone());
            return;
        }
        for i in from..rows {
            cur.push(i);
            rec(rows, cols, i, cur, out);
            cur.pop();
        }
    }
    rec(rows, cols, 0, &mut cur, &mut out);
    out
}

/// `log p(a, y)` for one path, straight from the shift/emit definition.
/// `log_word`, `emit` are `I × J`; `emit` holds probabilities.
pub fn path_log_joint(path: &[usize], log_word: &ndarray::Array2<f64>, emit: &ndarray::Array2<f64>) -> f64 {
    let mut total = 0.0;
    let mut prev = 0;
    for (j, &i) in path.iter().enumerate() {
        let mut p = emit[[i, j]];
        for d in prev..i {
            p *= 1.0 - emit[[d, j]];
        }
        total += p.ln() + log_word[[i, j]];
        prev = i;
    }
    total
}

pub fn log_sum(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Brute-force `log p(y | x)` and posteriors `γ (I × J)` by enumeration.
pub fn enumerate_lattice(log_word: &ndarray::Array2<f64>, emit: &ndarray::Array2<f64>) -> (f64, ndarray::Array2<f64>) {
    let (rows, cols) = log_word.dim();
    let paths = monotone_paths(rows, cols);
    let joints: Vec<f64> = paths.iter().map(|p| path_log_joint(p, log_word, emit)).collect();
    let ll = log_sum(&joints);
    let mut gamma = ndarray::Array2::zeros((rows, cols));
    for (p, lj) in paths.iter().zip(&joints) {
        let w = (lj - ll).exp();
        for (j, &i) in p.iter().enumerate() {
            gamma[[i, j]] += w;
        }
    }
    (ll, gamma)
}

/// Lattice tables of a model for one pair, transposed to `I × J`:
/// `(log_word, emit probabilities)`.
pub fn model_tables(model: &Model, source: &[usize], target: &[usize]) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    use ssnt::diffcore::Graph;
    let mut g = Graph::new(model.config.precision);
    let enc = model.encode(&mut g, source, None).unwrap();
    let mut prefix = vec![ssnt::data::BOS];
    prefix.extend_from_slice(&target[..target.len() - 1]);
    let dec = model.decoder_states(&mut g, &prefix, ssnt::data::BOS, None).unwrap();
    let sc = model.lattice_scores(&mut g, enc, dec, target).unwrap();
    let (lw, le) = (g.value(sc.log_word), g.value(sc.log_emit));
    let (rows, cols) = (source.len(), target.len());
    (
        ndarray::Array2::from_shape_fn((rows, cols), |(i, j)| lw.get(j, i)),
        ndarray::Array2::from_shape_fn((rows, cols), |(i, j)| le.get(j, i).exp()),
    )
}

pub fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..len).map(|_| rng.random_range(4..vocab)).collect();
    v.push(ssnt::data::EOS);
    v
}

/// Two-row scorer with hand-set tables over ids `{PAD, 1, 2, EOS}`, PAD
/// impossible. The first column uses `first`; later columns use the table of
/// the previous token.
#[derive(Clone, Debug)]
pub struct HandScorer {
    pub first: HandColumn,
    pub after: [HandColumn; 4],
}

#[derive(Clone, Copy, Debug)]
pub struct HandColumn {
    /// Word probabilities per row.
    pub word: [[f64; 4]; 2],
    pub emit: [f64; 2],
}

impl HandColumn {
    fn random(rng: &mut ChaCha8Rng, eos: (f64, f64), share: (f64, f64)) -> Self {
        let mut word = [[0.0; 4]; 2];
        for row in &mut word {
            let e = rng.random_range(eos.0..eos.1);
            let a: f64 = rng.random_range(share.0..share.1);
            let b: f64 = rng.random_range(share.0..share.1);
            *row = [0.0, (1.0 - e) * a / (a + b), (1.0 - e) * b / (a + b), e];
        }
        HandColumn {
            word,
            emit: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
        }
    }

    pub fn log_word(&self, i: usize, y: usize) -> f64 {
        self.word[i][y].ln()
    }

    /// Jump `k → i` by the shift/emit definition; `k = 0` also gives the
    /// initial distribution.
    pub fn log_jump(&self, k: usize, i: usize) -> f64 {
        (k..i).map(|d| (1.0 - self.emit[d]).ln()).sum::<f64>() + self.emit[i].ln()
    }
}

impl HandScorer {
    /// Two near-equal outputs `1` and `2`: both tokens are about equally
    /// likely first, end-of-output is rare there and dominant afterwards.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = HandColumn::random(&mut rng, (0.001, 0.01), (0.9, 1.1));
        let after = [0; 4].map(|_| HandColumn::random(&mut rng, (0.8, 0.95), (0.05, 1.0)));
        HandScorer { first, after }
    }

    pub fn column_for(&self, prefix: &[usize]) -> &HandColumn {
        match prefix.last() {
            None => &self.first,
            Some(&y) => &self.after[y],
        }
    }
}

impl ssnt::decode::StepScorer for HandScorer {
    type State = Vec<usize>;

    fn source_len(&self) -> usize {
        2
    }

    fn start(&self) -> ssnt::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn advance(&self, state: &Vec<usize>, token: usize) -> ssnt::Result<Vec<usize>> {
        let mut s = state.clone();
        s.push(token);
        Ok(s)
    }

    fn column(&self, state: &Vec<usize>) -> ssnt::Result<ssnt::decode::Column> {
        let c = self.column_for(state);
        Ok(ssnt::decode::Column {
            log_word: ndarray::Array2::from_shape_fn((2, 4), |(i, y)| c.log_word(i, y)),
            transition: ssnt::transition::ColumnTransition::from_emit(&c.emit),
        })
    }
}

/// Every complete output of at most two columns with its best alignment
/// score, best first.
pub fn enumerate_hand_outputs(h: &HandScorer) -> Vec<(Vec<usize>, f64)> {
    let eos = ssnt::data::EOS;
    let mut out = Vec::new();
    let empty = (0..2).map(|i| h.first.log_jump(0, i) + h.first.log_word(i, eos)).fold(f64::NEG_INFINITY, f64::max);
    out.push((vec![], empty));
    for y in [1, 2] {
        let second = &h.after[y];
        let mut best = f64::NEG_INFINITY;
        for a1 in 0..2 {
            for a2 in a1..2 {
                let s = h.first.log_jump(0, a1) + h.first.log_word(a1, y) + second.log_jump(a1, a2) + second.log_word(a2, eos);
                best = best.max(s);
            }
        }
        out.push((vec![y], best));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}
