//! Exact marginalization over monotone alignments.
//!
//! Two routes compute the same quantities:
//!
//! * [`AlignmentLattice`] works on plain `I × J` tables (input position by
//!   output position) with any [`Transition`]; it provides α, β, the
//!   likelihood, alignment posteriors and the Viterbi path.
//! * [`graph_log_likelihood`] builds the forward recursion out of
//!   differentiable ops so that training gradients flow through the DP. It
//!   takes per-cell log emit/shift scores and uses prefix sums, which makes
//!   each column O(I) to build.
//!
//! Everything runs in log space. Paths are not required to end at the last
//! input position.

use std::io::Write;

use ndarray::Array2;

use crate::diffcore::{log_add_exp, log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::transition::Transition;

fn check_dims(log_word: &Array2<f64>) -> Result<(usize, usize)> {
    let (i, j) = log_word.dim();
    if i == 0 || j == 0 {
        return Err(Error::contract(format!("lattice needs I, J ≥ 1, got {i} × {j}")));
    }
    Ok((i, j))
}

/// `log α(i, j) = log p(a_j = i, y_1..y_j | x)`.
pub fn forward(log_word: &Array2<f64>, transition: &impl Transition) -> Result<Array2<f64>> {
    let (rows, cols) = check_dims(log_word)?;
    let mut alpha = Array2::from_elem((rows, cols), f64::NEG_INFINITY);
    for i in 0..rows {
        alpha[[i, 0]] = transition.log_initial(i) + log_word[[i, 0]];
    }
    let mut terms = Vec::with_capacity(rows);
    for j in 1..cols {
        for i in 0..rows {
            terms.clear();
            terms.extend((0..=i).map(|k| alpha[[k, j - 1]] + transition.log_transition(k, i, j)));
            alpha[[i, j]] = log_word[[i, j]] + log_sum_exp(&terms)?;
        }
    }
    Ok(alpha)
}

/// `log β(i, j) = log p(y_{j+1}..y_J | a_j = i, y_1..y_j, x)`.
pub fn backward(log_word: &Array2<f64>, transition: &impl Transition) -> Result<Array2<f64>> {
    let (rows, cols) = check_dims(log_word)?;
    let mut beta = Array2::from_elem((rows, cols), f64::NEG_INFINITY);
    for i in 0..rows {
        beta[[i, cols - 1]] = 0.0;
    }
    let mut terms = Vec::with_capacity(rows);
    for j in (0..cols - 1).rev() {
        for i in 0..rows {
            terms.clear();
            terms.extend(
                (i..rows).map(|k| {
                    transition.log_transition(i, k, j + 1) + beta[[k, j + 1]] + log_word[[k, j + 1]]
                }),
            );
            beta[[i, j]] = log_sum_exp(&terms)?;
        }
    }
    Ok(beta)
}

/// `log p(y | x) = log Σ_i α(i, J)`.
pub fn log_likelihood(log_alpha: &Array2<f64>) -> Result<f64> {
    let (_, cols) = check_dims(log_alpha)?;
    let last: Vec<f64> = log_alpha.column(cols - 1).to_vec();
    let ll = log_sum_exp(&last)?;
    if ll == f64::NEG_INFINITY {
        return Err(Error::Degenerate(
            "every alignment path has zero probability".into(),
        ));
    }
    Ok(ll)
}

/// Alignment posteriors `γ(i, j) = α(i, j) β(i, j) / p(y | x)`.
pub fn posteriors(log_alpha: &Array2<f64>, log_beta: &Array2<f64>, log_likelihood: f64) -> Result<Array2<f64>> {
    if log_alpha.dim() != log_beta.dim() {
        return Err(Error::contract("α and β tables differ in shape"));
    }
    if !log_likelihood.is_finite() {
        return Err(Error::Degenerate(format!(
            "posteriors undefined for log-likelihood {log_likelihood}"
        )));
    }
    Ok(Array2::from_shape_fn(log_alpha.dim(), |(i, j)| {
        let s = log_alpha[[i, j]] + log_beta[[i, j]];
        if s == f64::NEG_INFINITY {
            0.0
        } else {
            (s - log_likelihood).exp()
        }
    }))
}

/// Highest-scoring monotone alignment and its joint log-probability.
pub fn viterbi(log_word: &Array2<f64>, transition: &impl Transition) -> Result<(Vec<usize>, f64)> {
    let (rows, cols) = check_dims(log_word)?;
    let mut best = Array2::from_elem((rows, cols), f64::NEG_INFINITY);
    let mut back = Array2::<usize>::zeros((rows, cols));
    for i in 0..rows {
        best[[i, 0]] = transition.log_initial(i) + log_word[[i, 0]];
    }
    for j in 1..cols {
        for i in 0..rows {
            let (mut arg, mut top) = (0, f64::NEG_INFINITY);
            for k in 0..=i {
                let s = best[[k, j - 1]] + transition.log_transition(k, i, j);
                if s > top {
                    (arg, top) = (k, s);
                }
            }
            best[[i, j]] = top + log_word[[i, j]];
            back[[i, j]] = arg;
        }
    }
    let (mut end, mut score) = (0, f64::NEG_INFINITY);
    for i in 0..rows {
        if best[[i, cols - 1]] > score {
            (end, score) = (i, best[[i, cols - 1]]);
        }
    }
    if score == f64::NEG_INFINITY {
        return Err(Error::Degenerate("no alignment path has positive probability".into()));
    }
    let mut path = vec![0; cols];
    path[cols - 1] = end;
    for j in (1..cols).rev() {
        path[j - 1] = back[[path[j], j]];
    }
    Ok((path, score))
}

/// Forward and backward tables for one (source, target) pair.
#[derive(Clone, Debug)]
pub struct AlignmentLattice {
    pub log_word: Array2<f64>,
    pub log_alpha: Array2<f64>,
    pub log_beta: Array2<f64>,
    pub log_likelihood: f64,
}

impl AlignmentLattice {
    /// Runs both recursions. Fails with [`Error::Degenerate`] naming the first
    /// output column no path can reach when the pair has zero probability.
    pub fn compute(log_word: Array2<f64>, transition: &impl Transition) -> Result<Self> {
        let log_alpha = forward(&log_word, transition)?;
        if let Some(j) = first_impossible_column(&log_alpha) {
            return Err(Error::Degenerate(format!(
                "output position {} cannot be produced by any alignment",
                j + 1
            )));
        }
        let log_likelihood = log_likelihood(&log_alpha)?;
        let log_beta = backward(&log_word, transition)?;
        Ok(AlignmentLattice {
            log_word,
            log_alpha,
            log_beta,
            log_likelihood,
        })
    }

    pub fn input_len(&self) -> usize {
        self.log_word.nrows()
    }

    pub fn output_len(&self) -> usize {
        self.log_word.ncols()
    }

    pub fn posteriors(&self) -> Result<Array2<f64>> {
        posteriors(&self.log_alpha, &self.log_beta, self.log_likelihood)
    }

    /// `log Σ_k α(k, j) β(k, j)` for every column; each equals the
    /// log-likelihood.
    pub fn column_marginals(&self) -> Vec<f64> {
        (0..self.output_len())
            .map(|j| {
                (0..self.input_len()).fold(f64::NEG_INFINITY, |acc, i| {
                    log_add_exp(acc, self.log_alpha[[i, j]] + self.log_beta[[i, j]])
                })
            })
            .collect()
    }
}

/// First output column whose α entries are all `-inf`.
pub fn first_impossible_column(log_alpha: &Array2<f64>) -> Option<usize> {
    (0..log_alpha.ncols()).find(|&j| log_alpha.column(j).iter().all(|&a| a == f64::NEG_INFINITY))
}

/// Differentiable forward recursion.
pub struct GraphLattice {
    /// `1 × I` rows of log α, one per output position.
    pub alpha_rows: Vec<Var>,
    /// `1 × 1` log-likelihood.
    pub log_likelihood: Var,
}

/// Builds log α and `log p(y | x)` in `g`.
///
/// All three inputs are `J × I` (row `j` is output position `j`):
/// `log_word[j, i] = log p(y_j | h_i, s_j)`, and `log_emit`/`log_shift` hold
/// `log p(e_{i,j})` and `log(1 − p(e_{i,j}))`. With
/// `C[j, i] = Σ_{d<i} log_shift[j, d]`, the jump `k → i` costs
/// `C[j, i] − C[j, k] + log_emit[j, i]`, so
///
/// `α_j(i) = log_word + log_emit + C (at j, i) + logΣexp_{k≤i}(α_{j−1}(k) − C[j, k])`.
pub fn graph_log_likelihood(g: &mut Graph<'_>, log_word: Var, log_emit: Var, log_shift: Var) -> Result<GraphLattice> {
    let shape = g.value(log_word).shape().to_vec();
    if g.value(log_emit).shape() != shape.as_slice() || g.value(log_shift).shape() != shape.as_slice() {
        return Err(Error::contract("lattice score tables differ in shape"));
    }
    let cols = g.value(log_word).rows();
    let prefix = g.cumsum_exclusive(log_shift);
    let local = g.add(log_word, log_emit)?;
    let base = g.add(local, prefix)?;

    let mut alpha_rows = Vec::with_capacity(cols);
    alpha_rows.push(g.row(base, 0)?);
    for j in 1..cols {
        let prev = alpha_rows[j - 1];
        let c = g.row(prefix, j)?;
        let t = g.sub(prev, c)?;
        let reach = g.cum_log_sum_exp(t);
        let b = g.row(base, j)?;
        alpha_rows.push(g.add(b, reach)?);
    }
    let log_likelihood = g.log_sum_exp(*alpha_rows.last().expect("J ≥ 1"));
    Ok(GraphLattice {
        alpha_rows,
        log_likelihood,
    })
}

/// Writes an `I × J` posterior grid as TSV. The first line holds the output
/// labels, each further line an input label followed by its row of γ.
pub fn write_posteriors_tsv<W: Write>(
    out: &mut W,
    gamma: &Array2<f64>,
    input_labels: &[String],
    output_labels: &[String],
) -> Result<()> {
    let (rows, cols) = gamma.dim();
    if input_labels.len() != rows || output_labels.len() != cols {
        return Err(Error::contract("label counts do not match the grid"));
    }
    let io = |e| Error::io("writing posterior grid", e);
    writeln!(out, "\t{}", output_labels.join("\t")).map_err(io)?;
    for i in 0..rows {
        let cells: Vec<String> = (0..cols).map(|j| format!("{}", gamma[[i, j]])).collect();
        writeln!(out, "{}\t{}", input_labels[i], cells.join("\t")).map_err(io)?;
    }
    Ok(())
}
