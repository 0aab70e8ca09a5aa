//! Joint search over output strings and monotone alignments.
//!
//! Both searches advance one output column at a time. A hypothesis at cell
//! `(i, j)` carries its token prefix and the decoder state after consuming it.
//! Hypotheses whose last token is EOS are complete and are never extended.
//! The search stops once the best complete score is at least every active
//! score, since extending a hypothesis can only lower its score.
//!
//! Ties are broken by lower token id, then lower predecessor row, then the
//! predecessor's rank within its cell.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Vocab, BOS, EOS};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::seqnn::{EncoderProjection, LstmState, Model, TransitionModel};
use crate::lattice::{viterbi, AlignmentLattice};
use crate::transition::{ColumnTransition, EmitLattice, GeometricTransition};

/// Scores for one output column given a decoder state.
#[derive(Clone, Debug)]
pub struct Column {
    /// `I × V` log word probabilities.
    pub log_word: Array2<f64>,
    pub transition: ColumnTransition,
}

/// What a search needs from a model for one source sequence.
pub trait StepScorer {
    type State: Clone;

    fn source_len(&self) -> usize;
    /// State giving the first decoder vector `s_1`.
    fn start(&self) -> Result<Self::State>;
    /// State after also consuming `token`.
    fn advance(&self, state: &Self::State, token: usize) -> Result<Self::State>;
    fn column(&self, state: &Self::State) -> Result<Column>;
}

/// A decoded output with its alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Output ids; excludes EOS.
    pub tokens: Vec<usize>,
    /// Input position per output column, including the EOS column when present.
    pub alignment: Vec<usize>,
    pub score: f64,
    /// No EOS was produced within the column limit.
    pub truncated: bool,
}

impl Decoded {
    /// Tokens as scored, with the EOS that ended them.
    pub fn scored_tokens(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if !self.truncated {
            t.push(EOS);
        }
        t
    }
}

fn complete_order(a: &Decoded, b: &Decoded) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then(a.alignment.last().cmp(&b.alignment.last()))
}

/// Best `k` word ids of a row, by descending log-probability then id.
/// Impossible (−∞) words are never returned.
fn top_words(row: ndarray::ArrayView1<'_, f64>, k: usize) -> Vec<(usize, f64)> {
    let mut ids: Vec<(usize, f64)> = row
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > f64::NEG_INFINITY)
        .map(|(i, v)| (i, *v))
        .collect();
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ids.truncate(k);
    ids
}

fn check_column(col: &Column, len: usize) -> Result<()> {
    if col.log_word.nrows() != len || col.transition.len() != len {
        return Err(Error::contract(format!(
            "scorer column has {} rows and {} transitions for an input of length {len}",
            col.log_word.nrows(),
            col.transition.len()
        )));
    }
    Ok(())
}

/// Greedy tables: one prefix per cell, columns `0..J_end`.
#[derive(Clone, Debug)]
pub struct DecodeTables {
    /// Best log score per cell (`I × J`), −∞ where unreachable or not extended.
    pub q: Array2<f64>,
    /// Predecessor row per cell; 0 in the first column.
    pub bp: Array2<usize>,
    /// Token chosen per cell.
    pub w: Array2<usize>,
    /// Cell the result was read from.
    pub end: (usize, usize),
}

impl DecodeTables {
    /// Tokens and alignment read back from cell `(i, j)`.
    pub fn trace(&self, i: usize, j: usize) -> (Vec<usize>, Vec<usize>) {
        let mut tokens = vec![0; j + 1];
        let mut path = vec![0; j + 1];
        let mut row = i;
        for col in (0..=j).rev() {
            tokens[col] = self.w[[row, col]];
            path[col] = row;
            row = self.bp[[row, col]];
        }
        (tokens, path)
    }
}

/// Greedy dynamic-programming search with one stored prefix per cell.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<(Decoded, DecodeTables)> {
    let len = scorer.source_len();
    if len == 0 || max_len == 0 {
        return Err(Error::contract("greedy decoding needs a non-empty input and a column limit ≥ 1"));
    }
    let mut q = Array2::from_elem((len, max_len), f64::NEG_INFINITY);
    let mut bp = Array2::zeros((len, max_len));
    let mut w = Array2::zeros((len, max_len));
    let mut states: Vec<Option<S::State>> = vec![None; len];
    let mut best_done: Option<(f64, usize, usize)> = None;

    let start = scorer.start()?;
    for j in 0..max_len {
        let mut next_states: Vec<Option<S::State>> = vec![None; len];
        // Parents: the start state for column 0, otherwise every active cell.
        let parents: Vec<(usize, f64, Column, &S::State)> = if j == 0 {
            let col = scorer.column(&start)?;
            check_column(&col, len)?;
            vec![(0, 0.0, col, &start)]
        } else {
            let mut v = Vec::new();
            for (k, st) in states.iter().enumerate() {
                if let Some(st) = st {
                    let col = scorer.column(st)?;
                    check_column(&col, len)?;
                    v.push((k, q[[k, j - 1]], col, st));
                }
            }
            v
        };
        let mut best_active = f64::NEG_INFINITY;
        for i in 0..len {
            let mut best: Option<(f64, usize, usize)> = None;
            for (pi, (k, prev, col, _)) in parents.iter().enumerate() {
                if *k > i {
                    continue;
                }
                let trans = col.transition.log_prob(*k, i);
                if let Some(&(y, word)) = top_words(col.log_word.row(i), 1).first() {
                    let score = (prev + trans) + word;
                    if score == f64::NEG_INFINITY {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((s, by, _)) => score > s || (score == s && y < by),
                    };
                    if better {
                        best = Some((score, y, pi));
                    }
                }
            }
            let Some((score, y, pi)) = best else { continue };
            let (k, _, _, parent_state) = &parents[pi];
            q[[i, j]] = score;
            bp[[i, j]] = *k;
            w[[i, j]] = y;
            if y == EOS {
                let better = match best_done {
                    None => true,
                    Some((s, _, _)) => score > s,
                };
                if better {
                    best_done = Some((score, i, j));
                }
            } else {
                best_active = best_active.max(score);
                next_states[i] = Some(scorer.advance(parent_state, y)?);
            }
        }
        states = next_states;
        let all_done = states.iter().all(Option::is_none);
        let stop = match best_done {
            Some((s, _, _)) => s >= best_active,
            None => false,
        };
        if stop || all_done || j + 1 == max_len {
            let tables_at = |end| DecodeTables {
                q: q.clone(),
                bp: bp.clone(),
                w: w.clone(),
                end,
            };
            if let Some((score, i, jj)) = best_done {
                let tables = tables_at((i, jj));
                let (mut tokens, path) = tables.trace(i, jj);
                tokens.pop();
                return Ok((
                    Decoded {
                        tokens,
                        alignment: path,
                        score,
                        truncated: false,
                    },
                    tables,
                ));
            }
            // Truncated: best cell of the final column, lowest row on ties.
            let mut end = None;
            for i in 0..len {
                let s = q[[i, j]];
                if s > f64::NEG_INFINITY && end.is_none_or(|(bs, _)| s > bs) {
                    end = Some((s, i));
                }
            }
            let (score, i) = end.ok_or_else(|| Error::Degenerate("every greedy cell is impossible".into()))?;
            let tables = tables_at((i, j));
            let (tokens, path) = tables.trace(i, j);
            return Ok((
                Decoded {
                    tokens,
                    alignment: path,
                    score,
                    truncated: true,
                },
                tables,
            ));
        }
    }
    unreachable!("the final column always returns")
}

#[derive(Clone)]
struct Hyp<St> {
    score: f64,
    tokens: Vec<usize>,
    path: Vec<usize>,
    state: St,
}

struct Candidate {
    score: f64,
    token: usize,
    pred_row: usize,
    pred_rank: usize,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.token.cmp(&b.token))
        .then(a.pred_row.cmp(&b.pred_row))
        .then(a.pred_rank.cmp(&b.pred_rank))
}

/// Beam search keeping up to `width` distinct prefixes per cell. Returns up to
/// `width` distinct outputs, best first.
pub fn beam_decode<S: StepScorer>(scorer: &S, max_len: usize, width: usize) -> Result<Vec<Decoded>> {
    let len = scorer.source_len();
    if len == 0 || max_len == 0 || width == 0 {
        return Err(Error::contract("beam decoding needs a non-empty input, a column limit ≥ 1 and width ≥ 1"));
    }
    let start = scorer.start()?;
    let root = Hyp {
        score: 0.0,
        tokens: Vec::new(),
        path: Vec::new(),
        state: start,
    };
    // cells[m] holds the active hypotheses at row m of the previous column.
    let mut cells: Vec<Vec<Hyp<S::State>>> = Vec::new();
    let mut done: Vec<Decoded> = Vec::new();
    let mut last_active: Vec<Hyp<S::State>> = Vec::new();

    for j in 0..max_len {
        // (row, rank, hypothesis, its column)
        let mut parents: Vec<(usize, usize, &Hyp<S::State>, Column)> = Vec::new();
        if j == 0 {
            let col = scorer.column(&root.state)?;
            check_column(&col, len)?;
            parents.push((0, 0, &root, col));
        } else {
            for (m, cell) in cells.iter().enumerate() {
                for (r, h) in cell.iter().enumerate() {
                    let col = scorer.column(&h.state)?;
                    check_column(&col, len)?;
                    parents.push((m, r, h, col));
                }
            }
        }

        let mut next: Vec<Vec<Hyp<S::State>>> = Vec::with_capacity(len);
        let mut best_active = f64::NEG_INFINITY;
        for i in 0..len {
            let mut cands: Vec<(Candidate, usize)> = Vec::new();
            for (pi, (m, r, h, col)) in parents.iter().enumerate() {
                if *m > i {
                    continue;
                }
                let trans = col.transition.log_prob(*m, i);
                for (y, word) in top_words(col.log_word.row(i), width) {
                    let score = (h.score + trans) + word;
                    if score > f64::NEG_INFINITY {
                        cands.push((
                            Candidate {
                                score,
                                token: y,
                                pred_row: *m,
                                pred_rank: *r,
                            },
                            pi,
                        ));
                    }
                }
            }
            cands.sort_by(|a, b| candidate_order(&a.0, &b.0));
            let mut kept: Vec<Hyp<S::State>> = Vec::new();
            let mut seen: Vec<Vec<usize>> = Vec::new();
            for (c, pi) in cands {
                if seen.len() == width {
                    break;
                }
                let parent = parents[pi].2;
                let mut tokens = parent.tokens.clone();
                tokens.push(c.token);
                if seen.contains(&tokens) {
                    continue;
                }
                seen.push(tokens.clone());
                let mut path = parent.path.clone();
                path.push(i);
                if c.token == EOS {
                    tokens.pop();
                    done.push(Decoded {
                        tokens,
                        alignment: path,
                        score: c.score,
                        truncated: false,
                    });
                } else {
                    best_active = best_active.max(c.score);
                    kept.push(Hyp {
                        score: c.score,
                        state: scorer.advance(&parent.state, c.token)?,
                        tokens,
                        path,
                    });
                }
            }
            next.push(kept);
        }
        drop(parents);
        cells = next;
        let best_done = done.iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
        let any_active = cells.iter().any(|c| !c.is_empty());
        if !done.is_empty() && best_done >= best_active {
            break;
        }
        if !any_active {
            break;
        }
        if j + 1 == max_len {
            last_active = cells.iter().flatten().cloned().collect();
        }
    }

    if done.is_empty() {
        if last_active.is_empty() {
            return Err(Error::Degenerate("every beam hypothesis is impossible".into()));
        }
        let mut out: Vec<Decoded> = last_active
            .into_iter()
            .map(|h| Decoded {
                tokens: h.tokens,
                alignment: h.path,
                score: h.score,
                truncated: true,
            })
            .collect();
        out.sort_by(complete_order);
        out.truncate(width);
        return Ok(out);
    }
    done.sort_by(complete_order);
    let mut unique: Vec<Decoded> = Vec::new();
    for d in done {
        if !unique.iter().any(|u| u.tokens == d.tokens) {
            unique.push(d);
        }
        if unique.len() == width {
            break;
        }
    }
    Ok(unique)
}

/// Sum of transition and word log-probabilities along a fixed
/// `(alignment, tokens)` pair, in the same order the searches add them.
pub fn score_path<S: StepScorer>(scorer: &S, tokens: &[usize], alignment: &[usize]) -> Result<f64> {
    if tokens.len() != alignment.len() || tokens.is_empty() {
        return Err(Error::contract("one alignment position per token required"));
    }
    let len = scorer.source_len();
    let mut state = scorer.start()?;
    let mut acc = 0.0;
    let mut prev = 0;
    for (j, (&y, &i)) in tokens.iter().zip(alignment).enumerate() {
        if i >= len || (j > 0 && i < prev) {
            return Err(Error::contract(format!("alignment {alignment:?} is not monotone within {len} positions")));
        }
        let col = scorer.column(&state)?;
        check_column(&col, len)?;
        let from = if j == 0 { 0 } else { prev };
        acc = (acc + col.transition.log_prob(from, i)) + col.log_word[[i, y]];
        if j + 1 < tokens.len() {
            state = scorer.advance(&state, y)?;
        }
        prev = i;
    }
    Ok(acc)
}

/// Decoder state of the neural model: per-layer `(h, c)` rows.
#[derive(Clone, Debug)]
pub struct NeuralState {
    layers: Vec<(Tensor, Tensor)>,
}

/// [`StepScorer`] over a trained [`Model`] for one encoded source.
pub struct ModelScorer<'m> {
    model: &'m Model,
    enc_word: Tensor,
    enc_emit: Option<Tensor>,
    len: usize,
}

impl<'m> ModelScorer<'m> {
    /// `source` must end with EOS, as in training.
    pub fn new(model: &'m Model, source: &[usize]) -> Result<Self> {
        let mut g = Graph::new(model.config.precision);
        let enc = model.encode(&mut g, source, None)?;
        let proj = model.project_encoder(&mut g, enc)?;
        Ok(ModelScorer {
            model,
            enc_word: g.value(proj.word).clone(),
            enc_emit: proj.emit.map(|v| g.value(v).clone()),
            len: source.len(),
        })
    }

    fn load<'g>(&'g self, g: &mut Graph<'g>, state: &'g NeuralState) -> Vec<LstmState> {
        state
            .layers
            .iter()
            .map(|(h, c)| LstmState {
                hidden: g.constant_ref(h),
                cell: g.constant_ref(c),
            })
            .collect()
    }

    fn store(g: &Graph<'_>, layers: &[LstmState]) -> NeuralState {
        NeuralState {
            layers: layers
                .iter()
                .map(|s| (g.value(s.hidden).clone(), g.value(s.cell).clone()))
                .collect(),
        }
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = NeuralState;

    fn source_len(&self) -> usize {
        self.len
    }

    fn start(&self) -> Result<NeuralState> {
        let mut g = Graph::new(self.model.config.precision);
        let init = self.model.decoder_initial(&mut g)?;
        let next = self.model.decoder_step(&mut g, &init, BOS)?;
        Ok(Self::store(&g, &next))
    }

    fn advance(&self, state: &NeuralState, token: usize) -> Result<NeuralState> {
        let mut g = Graph::new(self.model.config.precision);
        let prev = self.load(&mut g, state);
        let next = self.model.decoder_step(&mut g, &prev, token)?;
        Ok(Self::store(&g, &next))
    }

    fn column(&self, state: &NeuralState) -> Result<Column> {
        let mut g = Graph::new(self.model.config.precision);
        let top = state.layers.last().expect("at least one layer");
        let dec = g.constant_ref(&top.0);
        let proj = EncoderProjection {
            word: g.constant_ref(&self.enc_word),
            emit: self.enc_emit.as_ref().map(|t| g.constant_ref(t)),
            len: self.len,
        };
        let words = self.model.word_log_probs_cells(&mut g, &proj, dec)?;
        let log_word = Array2::from_shape_vec((self.len, self.model.config.tgt_vocab), g.value(words).data().to_vec())
            .map_err(|e| Error::contract(e.to_string()))?;
        let transition = match self.model.config.transition {
            TransitionModel::Neural => {
                let p = self.model.emit_probs_cells(&mut g, &proj, dec)?;
                ColumnTransition::from_emit(g.value(p).data())
            }
            TransitionModel::Geometric { emission } => ColumnTransition::from_emit(&vec![emission; self.len]),
        };
        Ok(Column { log_word, transition })
    }
}

/// Posterior grid and best path for a given (source, target) pair.
#[derive(Clone, Debug)]
pub struct ForcedAlignment {
    /// `I × J` alignment posteriors γ.
    pub gamma: Array2<f64>,
    /// Most probable monotone path, one input position per output column.
    pub path: Vec<usize>,
    pub path_score: f64,
    pub log_likelihood: f64,
}

/// Runs the exact lattice for `source` and `target` (both ending with EOS).
pub fn forced_alignment(model: &Model, source: &[usize], target: &[usize]) -> Result<ForcedAlignment> {
    if target.is_empty() {
        return Err(Error::contract("empty target"));
    }
    let mut g = Graph::new(model.config.precision);
    let enc = model.encode(&mut g, source, None)?;
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(&target[..target.len() - 1]);
    let dec = model.decoder_states(&mut g, &prefix, BOS, None)?;
    let scores = model.lattice_scores(&mut g, enc, dec, target)?;
    let (rows, cols) = (source.len(), target.len());
    let log_word = Array2::from_shape_fn((rows, cols), |(i, j)| g.value(scores.log_word).get(j, i));
    let lattice = match model.config.transition {
        TransitionModel::Geometric { emission } => {
            let t = GeometricTransition::new(emission)?;
            let lat = AlignmentLattice::compute(log_word, &t)?;
            let (path, path_score) = viterbi(&lat.log_word, &t)?;
            (lat, path, path_score)
        }
        TransitionModel::Neural => {
            let proj = model.project_encoder(&mut g, enc)?;
            let emit = model.emit_probs_cells(&mut g, &proj, dec)?;
            let p = g.value(emit);
            let probs = Array2::from_shape_fn((rows, cols), |(i, j)| p.get(j, i));
            let t = EmitLattice::new(probs)?;
            let lat = AlignmentLattice::compute(log_word, &t)?;
            let (path, path_score) = viterbi(&lat.log_word, &t)?;
            (lat, path, path_score)
        }
    };
    let (lat, path, path_score) = lattice;
    Ok(ForcedAlignment {
        gamma: lat.posteriors()?,
        path,
        path_score,
        log_likelihood: lat.log_likelihood,
    })
}

/// Search strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "width")]
pub enum Search {
    Greedy,
    Beam(usize),
}

/// Best output for `source` (ids ending with EOS).
pub fn decode_ids(model: &Model, source: &[usize], max_len: usize, search: Search) -> Result<Decoded> {
    let scorer = ModelScorer::new(model, source)?;
    match search {
        Search::Greedy => Ok(greedy_decode(&scorer, max_len)?.0),
        Search::Beam(k) => Ok(beam_decode(&scorer, max_len, k)?.remove(0)),
    }
}

/// One line of decoder output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub input: String,
    pub output: String,
    pub score: f64,
    /// 1-based `(i, j)` cells, including the EOS column.
    pub alignment: Vec<(usize, usize)>,
    pub truncated: bool,
}

impl DecodeRecord {
    pub fn new(input: String, decoded: &Decoded, vocab: &Vocab, join: impl Fn(&[String]) -> String) -> Result<Self> {
        let words = vocab.decode(&decoded.tokens)?;
        Ok(DecodeRecord {
            input,
            output: join(&words),
            score: decoded.score,
            alignment: decoded
                .alignment
                .iter()
                .enumerate()
                .map(|(j, &i)| (i + 1, j + 1))
                .collect(),
            truncated: decoded.truncated,
        })
    }
}
