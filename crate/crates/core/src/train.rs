//! Negative log-likelihood training with Adam, checkpoints and metric logs.
//!
//! Each example gets its own graph and exact lattice. Per-example gradients are
//! computed in parallel and summed in example order, so results do not depend
//! on the thread count.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ExamplePair, LengthFilter, Level, Vocab, BOS, PAD};
use crate::decode::Search;
use crate::diffcore::{Graph, ParamStore, Precision, Tensor};
use crate::error::{Error, Result};
use crate::lattice::graph_log_likelihood;
use crate::seqnn::{Dropout, EncoderMode, Model, ModelConfig, TransitionModel};
use crate::transition::estimate_emission;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    Geometric,
    Neural,
}

/// Everything that shapes a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub level: Level,
    /// Read leading `<...>` groups of char-level sources as single tokens.
    pub attributes: bool,
    /// Defaults to 1 for char level and 5 for word level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_count: Option<usize>,
    pub filter: LengthFilter,
    pub hidden: usize,
    /// Defaults to `hidden`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emb_dim: Option<usize>,
    pub layers: usize,
    pub encoder: EncoderMode,
    pub transition: TransitionKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_input: f64,
    pub dropout_output: f64,
    pub clip_norm: f64,
    pub init_scale: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Output token limit; defaults to `2·I + 5` at char level and 25 at word level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_output_len: Option<usize>,
    /// Beam width for decoding; greedy when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam: Option<usize>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            level: Level::Char,
            attributes: false,
            min_count: None,
            filter: LengthFilter::default(),
            hidden: 128,
            emb_dim: None,
            layers: 1,
            encoder: EncoderMode::Bi,
            transition: TransitionKind::Neural,
            learning_rate: 1e-3,
            batch_size: 32,
            dropout_input: 0.0,
            dropout_output: 0.0,
            clip_norm: 5.0,
            init_scale: 0.08,
            max_epochs: 50,
            patience: 5,
            seed: 1,
            max_output_len: None,
            beam: None,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// Named starting points: `summarization` and `inflection`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = TrainConfig::default();
        match name {
            "summarization" => Ok(TrainConfig {
                level: Level::Word,
                min_count: Some(5),
                hidden: 256,
                dropout_input: 0.2,
                max_output_len: Some(25),
                ..base
            }),
            "inflection" => Ok(TrainConfig {
                level: Level::Char,
                hidden: 128,
                dropout_input: 0.5,
                dropout_output: 0.5,
                beam: Some(30),
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected summarization or inflection)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value`, where `key` may be dotted (`filter.max_src`) and
    /// `value` is a TOML literal or a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (n, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a setting")))?;
            if n + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown setting `{key}`")))?;
        }
        let updated: TrainConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.layers == 0 || self.emb_dim == Some(0) {
            return bad("hidden, layers and emb_dim must be ≥ 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be ≥ 1");
        }
        for r in [self.dropout_input, self.dropout_output] {
            if !(0.0..1.0).contains(&r) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0 && self.init_scale > 0.0) {
            return bad("learning_rate, clip_norm and init_scale must be positive");
        }
        if self.beam == Some(0) || self.max_output_len == Some(0) {
            return bad("beam and max_output_len must be ≥ 1");
        }
        Ok(())
    }

    pub fn min_count(&self) -> usize {
        self.min_count.unwrap_or(self.level.default_min_count())
    }

    pub fn search(&self) -> Search {
        match self.beam {
            Some(k) => Search::Beam(k),
            None => Search::Greedy,
        }
    }

    /// Decoding column limit for a source of `src_tokens` tokens (before EOS),
    /// counting the EOS column.
    pub fn max_columns(&self, src_tokens: usize) -> usize {
        let tokens = self.max_output_len.unwrap_or(match self.level {
            Level::Char => 2 * src_tokens + 5,
            Level::Word => 25,
        });
        tokens + 1
    }

    /// Network shape for the given vocabularies. Geometric models take their
    /// emission probability from the training lengths.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize, train: &[ExamplePair]) -> Result<ModelConfig> {
        let transition = match self.transition {
            TransitionKind::Neural => TransitionModel::Neural,
            TransitionKind::Geometric => {
                let lengths: Vec<(usize, usize)> = train.iter().map(ExamplePair::lengths).collect();
                TransitionModel::Geometric {
                    emission: estimate_emission(&lengths)?,
                }
            }
        };
        Ok(ModelConfig {
            src_vocab,
            tgt_vocab,
            emb_dim: self.emb_dim.unwrap_or(self.hidden),
            hidden: self.hidden,
            layers: self.layers,
            encoder: self.encoder,
            transition,
            precision: self.precision,
            masked_outputs: vec![PAD, BOS],
        })
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    /// Updates refused because a gradient was not finite.
    pub skipped: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Returns false, leaving everything untouched, when any gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<bool> {
        if grads.values().any(|g| !g.is_finite()) {
            self.skipped += 1;
            warn!("skipping update with non-finite gradient ({} so far)", self.skipped);
            return Ok(false);
        }
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!("gradient shape mismatch for `{name}`")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

fn decoder_prefix(target: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(target.len());
    p.push(BOS);
    p.extend_from_slice(&target[..target.len() - 1]);
    p
}

/// `−log p(y | x)` and its gradient for every parameter.
pub fn example_gradient(
    model: &Model,
    ex: &ExamplePair,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new(model.config.precision);
    let loss = build_loss(model, &mut g, ex, dropout)?;
    let nll = g.scalar(loss);
    let grads = g.backward(loss)?;
    Ok((nll, grads.for_store(&model.params)))
}

/// `−log p(y | x)` without dropout or gradients.
pub fn example_nll(model: &Model, ex: &ExamplePair) -> Result<f64> {
    let mut g = Graph::new(model.config.precision);
    let loss = build_loss(model, &mut g, ex, None)?;
    Ok(g.scalar(loss))
}

fn build_loss<'a>(
    model: &'a Model,
    g: &mut Graph<'a>,
    ex: &ExamplePair,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<crate::diffcore::Var> {
    if ex.target.is_empty() {
        return Err(Error::contract("empty target"));
    }
    let enc = model.encode(g, &ex.source, dropout.as_deref_mut())?;
    let dec = model.decoder_states(g, &decoder_prefix(&ex.target), BOS, dropout)?;
    let scores = model.lattice_scores(g, enc, dec, &ex.target)?;
    let lat = graph_log_likelihood(g, scores.log_word, scores.log_emit, scores.log_shift)?;
    let ll = g.scalar(lat.log_likelihood);
    if ll == f64::NEG_INFINITY {
        return Err(Error::Degenerate("every alignment of the example is impossible".into()));
    }
    Ok(g.scale(lat.log_likelihood, -1.0))
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::Degenerate(_) | Error::NonFinite { .. })
}

/// Summed NLL and target-token count over a corpus, skipping impossible examples.
pub fn corpus_nll(model: &Model, data: &[ExamplePair]) -> Result<(f64, usize, usize)> {
    let results: Vec<Result<f64>> = data.par_iter().map(|ex| example_nll(model, ex)).collect();
    let (mut total, mut tokens, mut skipped) = (0.0, 0, 0);
    for (ex, r) in data.iter().zip(results) {
        match r {
            Ok(nll) => {
                total += nll;
                tokens += ex.target.len();
            }
            Err(e) if skippable(&e) => {
                skipped += 1;
                warn!("skipping example: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok((total, tokens, skipped))
}

/// `exp(Σ NLL / Σ J)`, with `J` counting EOS.
pub fn perplexity(model: &Model, data: &[ExamplePair]) -> Result<f64> {
    let (total, tokens, _) = corpus_nll(model, data)?;
    if tokens == 0 {
        return Err(Error::Data("perplexity needs at least one scorable example".into()));
    }
    Ok((total / tokens as f64).exp())
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_perplexity: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("metrics row: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("metrics: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

/// What an epoch callback learns about the run.
pub struct EpochEvent<'m> {
    pub metrics: EpochMetrics,
    pub model: &'m Model,
    pub is_best: bool,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_dev_perplexity: f64,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub skipped_examples: usize,
    pub skipped_updates: u64,
    pub steps: u64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains from `model`, keeping the parameters with the lowest dev perplexity.
pub fn train(
    config: &TrainConfig,
    mut model: Model,
    train: &[ExamplePair],
    dev: &[ExamplePair],
    mut on_epoch: impl FnMut(&EpochEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("training and dev sets must be non-empty".into()));
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut skipped_examples = 0;

    for epoch in 1..=config.max_epochs {
        let mut shuffle = rng_for(config.seed, u64::MAX - epoch as u64);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let snapshot = &model;
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(n, &idx)| {
                    let position = (b * config.batch_size + n) as u64;
                    let mut rng = rng_for(config.seed, ((epoch as u64) << 32) | position);
                    let mut drop = Dropout {
                        rng: &mut rng,
                        input: config.dropout_input,
                        output: config.dropout_output,
                    };
                    let active = config.dropout_input > 0.0 || config.dropout_output > 0.0;
                    example_gradient(snapshot, &train[idx], if active { Some(&mut drop) } else { None })
                })
                .collect();

            let mut total: Option<BTreeMap<String, Tensor>> = None;
            let mut used = 0usize;
            for r in results {
                match r {
                    Ok((nll, grads)) => {
                        loss_sum += nll;
                        loss_count += 1;
                        used += 1;
                        match total.as_mut() {
                            None => total = Some(grads),
                            Some(t) => {
                                for (name, g) in grads {
                                    t.get_mut(&name).expect("same parameter set").add_assign(&g);
                                }
                            }
                        }
                    }
                    Err(e) if skippable(&e) => {
                        skipped_examples += 1;
                        warn!("epoch {epoch}: skipping example: {e}");
                    }
                    Err(e) => return Err(e),
                }
            }
            let Some(mut grads) = total else { continue };
            let scale = 1.0 / used as f64;
            grads.values_mut().for_each(|g| g.scale_assign(scale));
            clip_gradients(&mut grads, config.clip_norm);
            if adam.step(&mut model.params, &grads)? && config.precision == Precision::F32 {
                model.params.round_f32();
            }
        }

        let dev_ppl = perplexity(&model, dev)?;
        let train_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN };
        let m = EpochMetrics {
            epoch,
            train_loss,
            dev_perplexity: dev_ppl,
        };
        info!("epoch {epoch}: train loss {train_loss:.4}, dev perplexity {dev_ppl:.4}");
        metrics.push(m);
        let is_best = best.as_ref().is_none_or(|(p, _, _)| dev_ppl < *p);
        if is_best {
            best = Some((dev_ppl, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        on_epoch(&EpochEvent {
            metrics: m,
            model: &model,
            is_best,
            step: adam.steps(),
        })?;
        if since_best >= config.patience {
            info!("no dev improvement for {since_best} epochs; stopping");
            break;
        }
    }
    let (best_dev_perplexity, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_dev_perplexity,
        best_epoch,
        metrics,
        skipped_examples,
        skipped_updates: adam.skipped,
        steps: adam.steps(),
    })
}

/// Parameter groups compared by the gradient check.
pub const GRAD_GROUPS: [(&str, &[&str]); 7] = [
    ("embeddings", &["embed."]),
    ("lstm", &["enc.", "dec."]),
    ("W_w", &["out.w_enc", "out.w_dec"]),
    ("b_w", &["out.b"]),
    ("W_t", &["emit.w_enc", "emit.w_dec"]),
    ("b_t", &["emit.b"]),
    ("mlp", &["emit.w_out", "emit.b_out"]),
];

fn group_of(name: &str) -> Option<&'static str> {
    // `emit.b` is a prefix of `emit.b_out`, so exact names are matched first.
    GRAD_GROUPS
        .iter()
        .find(|(_, pats)| pats.contains(&name))
        .or_else(|| GRAD_GROUPS.iter().find(|(_, pats)| pats.iter().any(|p| p.ends_with('.') && name.starts_with(p))))
        .map(|(g, _)| *g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: &'static str,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `−log p(y | x)` with central differences
/// on up to `per_group` random coordinates of every parameter group present.
pub fn grad_check(
    model: &Model,
    ex: &ExamplePair,
    step: f64,
    per_group: usize,
    floor: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    if model.config.precision != Precision::F64 {
        return Err(Error::contract("gradient checks need 64-bit precision"));
    }
    let (_, grads) = example_gradient(model, ex, None)?;
    let mut coords: BTreeMap<&'static str, Vec<(String, usize)>> = BTreeMap::new();
    for (name, t) in model.params.iter() {
        let group = group_of(name).ok_or_else(|| Error::contract(format!("`{name}` belongs to no group")))?;
        coords
            .entry(group)
            .or_default()
            .extend((0..t.len()).map(|k| (name.to_string(), k)));
    }
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for (group, _) in GRAD_GROUPS {
        let Some(all) = coords.get(group) else { continue };
        let picked: Vec<&(String, usize)> = all.choose_multiple(rng, per_group.min(all.len())).collect();
        let mut check = GroupCheck {
            group,
            coordinates: picked.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        for (name, k) in picked {
            let orig = probe.params.get(name)?.data()[*k];
            let eval = |v: f64, probe: &mut Model| -> Result<f64> {
                probe.params.get_mut(name).expect("known").data_mut()[*k] = v;
                example_nll(probe, ex)
            };
            let plus = eval(orig + step, &mut probe)?;
            let minus = eval(orig - step, &mut probe)?;
            eval(orig, &mut probe)?;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads[name].data()[*k];
            let rel = relative_error(analytic, numeric, floor);
            if rel > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst = Some((name.to_string(), *k, analytic, numeric));
            }
        }
        groups.push(check);
    }
    Ok(GradCheckReport { groups })
}

pub const CHECKPOINT_FORMAT: &str = "ssnt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: Precision,
    config: TrainConfig,
    model: ModelConfig,
    src_vocab: Vec<String>,
    tgt_vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    step: u64,
    metric: Option<f64>,
}

/// Trained model plus what is needed to use it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub step: u64,
    /// Dev perplexity at save time.
    pub metric: Option<f64>,
}

impl Checkpoint {
    /// One JSON header line followed by little-endian values (`f64`, or `f32`
    /// for 32-bit models) in directory order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = match self.model.config.precision {
            Precision::F64 => 8,
            Precision::F32 => 4,
        };
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.model.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for &v in t.data() {
                match width {
                    8 => payload.extend_from_slice(&v.to_le_bytes()),
                    _ => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: self.model.config.precision,
            config: self.config.clone(),
            model: self.model.config.clone(),
            src_vocab: self.src_vocab.tokens().to_vec(),
            tgt_vocab: self.tgt_vocab.tokens().to_vec(),
            tensors,
            step: self.step,
            metric: self.metric,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)
            .map_err(|e| Error::io("reading checkpoint header", e))?;
        let header: Header = serde_json::from_slice(&line)?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} version {}",
                header.format, header.version
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)
            .map_err(|e| Error::io("reading checkpoint payload", e))?;
        let width = match header.dtype {
            Precision::F64 => 8,
            Precision::F32 => 4,
        };
        let mut params = ParamStore::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + n * width;
            let bytes = payload
                .get(entry.offset..end)
                .ok_or_else(|| Error::Data(format!("payload too short for `{}`", entry.name)))?;
            let values = bytes
                .chunks_exact(width)
                .map(|c| match width {
                    8 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    _ => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                })
                .collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
        }
        let model = Model::from_parts(header.model, params)?;
        let src_vocab = Vocab::from_tokens(header.src_vocab)?;
        let tgt_vocab = Vocab::from_tokens(header.tgt_vocab)?;
        if src_vocab.len() != model.config.src_vocab || tgt_vocab.len() != model.config.tgt_vocab {
            return Err(Error::Data("checkpoint vocabularies do not match the model".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            model,
            src_vocab,
            tgt_vocab,
            step: header.step,
            metric: header.metric,
        })
    }

    /// Writes through a temporary file so readers never see a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::from_reader(f)
    }

    /// Header line only, as JSON.
    pub fn read_header(path: &Path) -> Result<serde_json::Value> {
        let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut line = Vec::new();
        BufReader::new(f)
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::io("reading checkpoint header", e))?;
        Ok(serde_json::from_slice(&line)?)
    }
}
