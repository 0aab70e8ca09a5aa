//! Embeddings, LSTM encoder and decoder, the word-prediction layer and the
//! emit-probability network.
//!
//! The encoder and decoder run independent recurrences: decoder states are a
//! function of the output prefix only and never read encoder states. Output
//! distributions and emit probabilities combine the two per lattice cell.
//!
//! Per-cell quantities are computed in bulk. `[h_i; s_j] · W` is split into
//! `h_i · W_enc + s_j · W_dec`, the two projections are computed once per
//! sequence, and [`Graph::outer_sum`] forms every `(j, i)` combination. Rows
//! of the resulting tables are indexed `j · I + i`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Precision, Tensor, Var};
use crate::error::{Error, Result};
use crate::transition::{GeometricTransition, EMIT_MAX, EMIT_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Uni,
    Bi,
}

/// How alignment transitions are parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransitionModel {
    /// Fixed emission probability `e`, estimated in closed form.
    Geometric { emission: f64 },
    /// Per-cell emit probabilities from a feed-forward network over `[h_i; s_j]`.
    Neural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub encoder: EncoderMode,
    pub transition: TransitionModel,
    pub precision: Precision,
    /// Target ids that can never be predicted (padding, start symbol).
    pub masked_outputs: Vec<usize>,
}

impl ModelConfig {
    /// Width of an encoder row.
    pub fn enc_dim(&self) -> usize {
        match self.encoder {
            EncoderMode::Uni => self.hidden,
            EncoderMode::Bi => 2 * self.hidden,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.emb_dim == 0 || self.layers == 0 {
            return Err(Error::Config("hidden, emb_dim and layers must be ≥ 1".into()));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        if self.masked_outputs.iter().any(|&m| m >= self.tgt_vocab) {
            return Err(Error::Config("masked output id outside the target vocabulary".into()));
        }
        if self.masked_outputs.len() >= self.tgt_vocab {
            return Err(Error::Config("every output id is masked".into()));
        }
        if let TransitionModel::Geometric { emission } = self.transition {
            GeometricTransition::new(emission)?;
        }
        Ok(())
    }
}

/// Inverted dropout, applied only while training.
pub struct Dropout<'r> {
    pub rng: &'r mut ChaCha8Rng,
    /// Rate on LSTM inputs (embeddings).
    pub input: f64,
    /// Rate on LSTM outputs (encoder and decoder rows).
    pub output: f64,
}

impl Dropout<'_> {
    fn apply<'a>(&mut self, g: &mut Graph<'a>, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

/// Hidden and cell vectors (`1 × H` each) of one LSTM layer.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Graph handles of one LSTM layer's weights. Gates are laid out
/// `[input, forget, candidate, output]` along the `4H` axis.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmVars {
    pub fn register<'a>(g: &mut Graph<'a>, params: &'a ParamStore, prefix: &str) -> Result<Self> {
        let w_x = g.param(&format!("{prefix}.w_x"), params.get(&format!("{prefix}.w_x"))?);
        let w_h = g.param(&format!("{prefix}.w_h"), params.get(&format!("{prefix}.w_h"))?);
        let b = g.param(&format!("{prefix}.b"), params.get(&format!("{prefix}.b"))?);
        let hidden = g.value(w_h).rows();
        Ok(LstmVars { w_x, w_h, b, hidden })
    }

    pub fn zero_state(&self, g: &mut Graph<'_>) -> LstmState {
        let z = Tensor::zeros(&[1, self.hidden]);
        LstmState {
            hidden: g.constant(z.clone()),
            cell: g.constant(z),
        }
    }
}

/// One LSTM step on a raw input vector.
pub fn lstm_step(g: &mut Graph<'_>, w: &LstmVars, prev: LstmState, input: Var) -> Result<LstmState> {
    let projected = g.matmul(input, w.w_x)?;
    lstm_step_projected(g, w, prev, projected)
}

/// One LSTM step given the input already multiplied by `W_x`.
pub fn lstm_step_projected(g: &mut Graph<'_>, w: &LstmVars, prev: LstmState, x_proj: Var) -> Result<LstmState> {
    let h = w.hidden;
    let rec = g.matmul(prev.hidden, w.w_h)?;
    let z = g.add(x_proj, rec)?;
    let z = g.add(z, w.b)?;
    let zi = g.slice_cols(z, 0, h)?;
    let zf = g.slice_cols(z, h, h)?;
    let zg = g.slice_cols(z, 2 * h, h)?;
    let zo = g.slice_cols(z, 3 * h, h)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, prev.cell)?;
    let write = g.mul(i, cand)?;
    let cell = g.add(keep, write)?;
    let squashed = g.tanh(cell);
    let hidden = g.mul(o, squashed)?;
    Ok(LstmState { hidden, cell })
}

/// Runs a layer over `inputs` (`T × in`) in the given order and returns the
/// hidden rows in input order.
fn run_layer(g: &mut Graph<'_>, w: &LstmVars, inputs: Var, reverse: bool) -> Result<Var> {
    let steps = g.value(inputs).rows();
    let proj = g.matmul(inputs, w.w_x)?;
    let mut state = w.zero_state(g);
    let mut rows = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let x = g.row(proj, t)?;
        state = lstm_step_projected(g, w, state, x)?;
        rows[t] = Some(state.hidden);
    }
    let rows: Vec<Var> = rows.into_iter().map(|r| r.expect("every step visited")).collect();
    g.concat_rows(&rows)
}

/// Graph handles for the word-prediction layer.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub w_enc: Var,
    pub w_dec: Var,
    pub b: Var,
}

/// Graph handles for the emit network `σ(w_out · tanh(W_t [h; s] + b_t) + b_out)`.
#[derive(Clone, Copy, Debug)]
pub struct EmitVars {
    pub w_enc: Var,
    pub w_dec: Var,
    pub b: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Per-source projections reused by every decoder state.
#[derive(Clone, Copy, Debug)]
pub struct EncoderProjection {
    /// `I × V`: `H · W_w,enc`.
    pub word: Var,
    /// `I × H`: `H · W_t,enc` (neural transitions only).
    pub emit: Option<Var>,
    pub len: usize,
}

/// Per-cell lattice inputs, each `J × I`.
#[derive(Clone, Copy, Debug)]
pub struct LatticeScores {
    pub log_word: Var,
    pub log_emit: Var,
    pub log_shift: Var,
}

/// SSNT network: parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    mask: Vec<bool>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("positive shape")
}

impl Model {
    /// Fresh model with uniform(−`init_scale`, `init_scale`) weights and
    /// forget-gate biases of 1.
    pub fn new(config: ModelConfig, init_scale: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (e, h, v) = (config.emb_dim, config.hidden, config.tgt_vocab);
        params.insert("embed.src", uniform(rng, &[config.src_vocab, e], init_scale));
        params.insert("embed.tgt", uniform(rng, &[v, e], init_scale));

        let mut lstm = |params: &mut ParamStore, prefix: String, input: usize| {
            params.insert(format!("{prefix}.w_x"), uniform(rng, &[input, 4 * h], init_scale));
            params.insert(format!("{prefix}.w_h"), uniform(rng, &[h, 4 * h], init_scale));
            let mut b = uniform(rng, &[1, 4 * h], init_scale);
            for c in h..2 * h {
                b.set(0, c, 1.0);
            }
            params.insert(format!("{prefix}.b"), b);
        };
        for l in 0..config.layers {
            let input = if l == 0 { e } else { config.enc_dim() };
            lstm(&mut params, format!("enc.l{l}.fwd"), input);
            if config.encoder == EncoderMode::Bi {
                lstm(&mut params, format!("enc.l{l}.bwd"), input);
            }
        }
        for l in 0..config.layers {
            let input = if l == 0 { e } else { h };
            lstm(&mut params, format!("dec.l{l}"), input);
        }

        let d = config.enc_dim();
        params.insert("out.w_enc", uniform(rng, &[d, v], init_scale));
        params.insert("out.w_dec", uniform(rng, &[h, v], init_scale));
        params.insert("out.b", uniform(rng, &[1, v], init_scale));
        if config.transition == TransitionModel::Neural {
            params.insert("emit.w_enc", uniform(rng, &[d, h], init_scale));
            params.insert("emit.w_dec", uniform(rng, &[h, h], init_scale));
            params.insert("emit.b", uniform(rng, &[1, h], init_scale));
            params.insert("emit.w_out", uniform(rng, &[h, 1], init_scale));
            params.insert("emit.b_out", uniform(rng, &[1, 1], init_scale));
        }
        if config.precision == Precision::F32 {
            params.round_f32();
        }
        Self::from_parts(config, params)
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut mask = vec![false; config.tgt_vocab];
        for &m in &config.masked_outputs {
            mask[m] = true;
        }
        let model = Model { config, params, mask };
        let expected = model.expected_shapes();
        if expected.len() != model.params.len() {
            return Err(Error::Data(format!(
                "parameter set has {} tensors, configuration needs {}",
                model.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = model.params.get(&name).map_err(|_| Error::Data(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(model)
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let (e, h, v, d) = (c.emb_dim, c.hidden, c.tgt_vocab, c.enc_dim());
        let mut out = vec![
            ("embed.src".to_string(), vec![c.src_vocab, e]),
            ("embed.tgt".to_string(), vec![v, e]),
        ];
        let lstm = |out: &mut Vec<(String, Vec<usize>)>, p: String, input: usize| {
            out.push((format!("{p}.w_x"), vec![input, 4 * h]));
            out.push((format!("{p}.w_h"), vec![h, 4 * h]));
            out.push((format!("{p}.b"), vec![1, 4 * h]));
        };
        for l in 0..c.layers {
            let input = if l == 0 { e } else { d };
            lstm(&mut out, format!("enc.l{l}.fwd"), input);
            if c.encoder == EncoderMode::Bi {
                lstm(&mut out, format!("enc.l{l}.bwd"), input);
            }
            lstm(&mut out, format!("dec.l{l}"), if l == 0 { e } else { h });
        }
        out.push(("out.w_enc".into(), vec![d, v]));
        out.push(("out.w_dec".into(), vec![h, v]));
        out.push(("out.b".into(), vec![1, v]));
        if c.transition == TransitionModel::Neural {
            out.push(("emit.w_enc".into(), vec![d, h]));
            out.push(("emit.w_dec".into(), vec![h, h]));
            out.push(("emit.b".into(), vec![1, h]));
            out.push(("emit.w_out".into(), vec![h, 1]));
            out.push(("emit.b_out".into(), vec![1, 1]));
        }
        out
    }

    pub fn output_mask(&self) -> &[bool] {
        &self.mask
    }

    fn check_ids(ids: &[usize], vocab: usize, what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::contract(format!("{what} sequence is empty")));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!("{what} id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    /// Encoder rows `H` (`I × d_h`). In uni mode row `i` depends on `x_0..x_i` only.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a>, src: &[usize], mut dropout: Option<&mut Dropout<'_>>) -> Result<Var> {
        Self::check_ids(src, self.config.src_vocab, "source")?;
        let table = g.param("embed.src", self.params.get("embed.src")?);
        let mut x = g.gather_rows(table, src)?;
        if let Some(d) = dropout.as_deref_mut() {
            x = d.apply(g, x, d.input)?;
        }
        for l in 0..self.config.layers {
            let fwd = LstmVars::register(g, &self.params, &format!("enc.l{l}.fwd"))?;
            let f = run_layer(g, &fwd, x, false)?;
            x = match self.config.encoder {
                EncoderMode::Uni => f,
                EncoderMode::Bi => {
                    let bwd = LstmVars::register(g, &self.params, &format!("enc.l{l}.bwd"))?;
                    let b = run_layer(g, &bwd, x, true)?;
                    g.concat_cols(&[f, b])?
                }
            };
        }
        if let Some(d) = dropout {
            x = d.apply(g, x, d.output)?;
        }
        Ok(x)
    }

    fn decoder_layers<'a>(&'a self, g: &mut Graph<'a>) -> Result<Vec<LstmVars>> {
        (0..self.config.layers)
            .map(|l| LstmVars::register(g, &self.params, &format!("dec.l{l}")))
            .collect()
    }

    /// Decoder rows `S` (`J × H`) for `prefix = [<s>, y_1, …, y_{J−1}]`; row `j`
    /// depends on `prefix[..=j]` only.
    pub fn decoder_states<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prefix: &[usize],
        bos: usize,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        Self::check_ids(prefix, self.config.tgt_vocab, "target")?;
        if prefix[0] != bos {
            return Err(Error::contract("decoder prefix must start with the start symbol"));
        }
        let table = g.param("embed.tgt", self.params.get("embed.tgt")?);
        let mut x = g.gather_rows(table, prefix)?;
        if let Some(d) = dropout.as_deref_mut() {
            x = d.apply(g, x, d.input)?;
        }
        for w in self.decoder_layers(g)? {
            x = run_layer(g, &w, x, false)?;
        }
        if let Some(d) = dropout {
            x = d.apply(g, x, d.output)?;
        }
        Ok(x)
    }

    /// Zero state for every decoder layer.
    pub fn decoder_initial<'a>(&'a self, g: &mut Graph<'a>) -> Result<Vec<LstmState>> {
        Ok(self.decoder_layers(g)?.iter().map(|w| w.zero_state(g)).collect())
    }

    /// Feeds one token through every decoder layer. The new top hidden vector is
    /// `s_{j+1}` when `token = y_j`.
    pub fn decoder_step<'a>(&'a self, g: &mut Graph<'a>, state: &[LstmState], token: usize) -> Result<Vec<LstmState>> {
        Self::check_ids(&[token], self.config.tgt_vocab, "target")?;
        let table = g.param("embed.tgt", self.params.get("embed.tgt")?);
        let mut x = g.gather_rows(table, &[token])?;
        let mut next = Vec::with_capacity(state.len());
        for (w, prev) in self.decoder_layers(g)?.iter().zip(state) {
            let proj = g.matmul(x, w.w_x)?;
            let s = lstm_step_projected(g, w, *prev, proj)?;
            x = s.hidden;
            next.push(s);
        }
        Ok(next)
    }

    fn output_vars<'a>(&'a self, g: &mut Graph<'a>) -> Result<OutputVars> {
        Ok(OutputVars {
            w_enc: g.param("out.w_enc", self.params.get("out.w_enc")?),
            w_dec: g.param("out.w_dec", self.params.get("out.w_dec")?),
            b: g.param("out.b", self.params.get("out.b")?),
        })
    }

    fn emit_vars<'a>(&'a self, g: &mut Graph<'a>) -> Result<EmitVars> {
        Ok(EmitVars {
            w_enc: g.param("emit.w_enc", self.params.get("emit.w_enc")?),
            w_dec: g.param("emit.w_dec", self.params.get("emit.w_dec")?),
            b: g.param("emit.b", self.params.get("emit.b")?),
            w_out: g.param("emit.w_out", self.params.get("emit.w_out")?),
            b_out: g.param("emit.b_out", self.params.get("emit.b_out")?),
        })
    }

    pub fn project_encoder<'a>(&'a self, g: &mut Graph<'a>, enc: Var) -> Result<EncoderProjection> {
        let out = self.output_vars(g)?;
        let word = g.matmul(enc, out.w_enc)?;
        let emit = match self.config.transition {
            TransitionModel::Neural => {
                let ev = self.emit_vars(g)?;
                Some(g.matmul(enc, ev.w_enc)?)
            }
            TransitionModel::Geometric { .. } => None,
        };
        Ok(EncoderProjection {
            word,
            emit,
            len: g.value(enc).rows(),
        })
    }

    /// Log word distributions for every `(j, i)` cell: `(J·I) × V`, row `j·I + i`.
    pub fn word_log_probs_cells<'a>(&'a self, g: &mut Graph<'a>, proj: &EncoderProjection, dec: Var) -> Result<Var> {
        let out = self.output_vars(g)?;
        let d = g.matmul(dec, out.w_dec)?;
        let logits = g.outer_sum(d, proj.word)?;
        let logits = g.add_row(logits, out.b)?;
        g.log_softmax(logits, Some(&self.mask))
    }

    /// Emit probabilities for every `(j, i)` cell as a `J × I` table. Only
    /// defined for neural transitions.
    pub fn emit_probs_cells<'a>(&'a self, g: &mut Graph<'a>, proj: &EncoderProjection, dec: Var) -> Result<Var> {
        let enc_emit = proj
            .emit
            .ok_or_else(|| Error::contract("emit network requested for a geometric model"))?;
        let ev = self.emit_vars(g)?;
        let d = g.matmul(dec, ev.w_dec)?;
        let pre = g.outer_sum(d, enc_emit)?;
        let pre = g.add_row(pre, ev.b)?;
        let hidden = g.tanh(pre);
        let logit = g.matmul(hidden, ev.w_out)?;
        let logit = g.add_row(logit, ev.b_out)?;
        let p = g.sigmoid_clamped(logit, EMIT_MIN, EMIT_MAX);
        let rows = g.value(dec).rows();
        g.reshape(p, &[rows, proj.len])
    }

    /// Single-cell word distribution `log softmax(W_w [h; s] + b_w)` as `1 × V`.
    pub fn word_log_probs<'a>(&'a self, g: &mut Graph<'a>, h: Var, s: Var) -> Result<Var> {
        let proj = self.project_encoder(g, h)?;
        self.word_log_probs_cells(g, &proj, s)
    }

    /// Single-cell emit probability as `1 × 1`.
    pub fn emit_prob<'a>(&'a self, g: &mut Graph<'a>, h: Var, s: Var) -> Result<Var> {
        let proj = self.project_encoder(g, h)?;
        self.emit_probs_cells(g, &proj, s)
    }

    /// Word, emit and shift log-scores for a teacher-forced target.
    /// `targets` are `y_1..y_J`; `dec` holds the matching decoder rows.
    pub fn lattice_scores<'a>(&'a self, g: &mut Graph<'a>, enc: Var, dec: Var, targets: &[usize]) -> Result<LatticeScores> {
        let (rows_i, rows_j) = (g.value(enc).rows(), g.value(dec).rows());
        if targets.len() != rows_j {
            return Err(Error::contract("one target per decoder row required"));
        }
        let proj = self.project_encoder(g, enc)?;
        let words = self.word_log_probs_cells(g, &proj, dec)?;
        let picks: Vec<usize> = targets.iter().flat_map(|&y| std::iter::repeat_n(y, rows_i)).collect();
        let picked = g.pick(words, &picks)?;
        let log_word = g.reshape(picked, &[rows_j, rows_i])?;
        let (log_emit, log_shift) = match self.config.transition {
            TransitionModel::Neural => {
                let p = self.emit_probs_cells(g, &proj, dec)?;
                (g.ln(p), g.ln_1m(p))
            }
            TransitionModel::Geometric { emission } => (
                g.constant(Tensor::full(&[rows_j, rows_i], emission.ln())),
                g.constant(Tensor::full(&[rows_j, rows_i], (-emission).ln_1p())),
            ),
        };
        Ok(LatticeScores {
            log_word,
            log_emit,
            log_shift,
        })
    }
}
