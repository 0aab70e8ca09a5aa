//! Alignment transition probabilities under the shift/emit view.
//!
//! At each input position the model either emits the next output token or
//! shifts to the next input position. A jump from position `k` to `i ≥ k`
//! therefore costs one shift decision for every position in `k..i` and one emit
//! decision at `i`. Jumps backwards are impossible. Positions are 0-based.
//!
//! No renormalization is applied at the right edge of the lattice: mass for
//! paths that would shift past the last input position is simply lost.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp for emit probabilities.
pub const EMIT_MIN: f64 = 1e-7;
/// Upper clamp for emit probabilities.
pub const EMIT_MAX: f64 = 1.0 - 1e-7;

/// Initial and pairwise transition log-probabilities over an `I × J` lattice.
///
/// `log_transition(k, i, j)` is `log p(a_j = i | a_{j-1} = k)` for output
/// column `j ≥ 1`; `log_initial(i)` is `log p(a_0 = i)`.
pub trait Transition {
    fn log_initial(&self, i: usize) -> f64;
    fn log_transition(&self, k: usize, i: usize, j: usize) -> f64;
}

/// Maximum-likelihood emission probability for a corpus of
/// `(input length, output length)` pairs: `Σ J / (Σ I + Σ J)`.
pub fn estimate_emission(lengths: &[(usize, usize)]) -> Result<f64> {
    if lengths.is_empty() {
        return Err(Error::Data("cannot estimate emission on an empty corpus".into()));
    }
    if lengths.iter().any(|&(i, j)| i == 0 || j == 0) {
        return Err(Error::Data("sequence lengths must be at least 1".into()));
    }
    let total_in: usize = lengths.iter().map(|p| p.0).sum();
    let total_out: usize = lengths.iter().map(|p| p.1).sum();
    Ok(total_out as f64 / (total_in + total_out) as f64)
}

/// Input- and output-independent jumps: `p(i | k) = (1 − e)^(i − k) · e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricTransition {
    e: f64,
}

impl GeometricTransition {
    pub fn new(e: f64) -> Result<Self> {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::contract(format!("emission probability {e} not in (0, 1)")));
        }
        Ok(GeometricTransition { e })
    }

    pub fn emission(&self) -> f64 {
        self.e
    }
}

/// `log p(a_j = i | a_{j-1} = k)` under the geometric model.
pub fn log_transition_geometric(k: usize, i: usize, e: f64) -> f64 {
    if i < k {
        return f64::NEG_INFINITY;
    }
    (i - k) as f64 * (-e).ln_1p() + e.ln()
}

/// `log p(a_0 = i)` under the geometric model: `i` shifts from the first
/// position, then an emit.
pub fn log_initial_geometric(i: usize, e: f64) -> f64 {
    i as f64 * (-e).ln_1p() + e.ln()
}

impl Transition for GeometricTransition {
    fn log_initial(&self, i: usize) -> f64 {
        log_initial_geometric(i, self.e)
    }

    fn log_transition(&self, k: usize, i: usize, _j: usize) -> f64 {
        log_transition_geometric(k, i, self.e)
    }
}

/// Per-cell emit probabilities `p(e_{i,j})` from the neural transition model.
#[derive(Clone, Debug, PartialEq)]
pub struct EmitLattice {
    probs: Array2<f64>,
}

impl EmitLattice {
    /// `probs` is `I × J` (input positions by output positions).
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("emit lattice must be non-empty"));
        }
        if let Some(p) = probs.iter().find(|&&p| !(EMIT_MIN..=EMIT_MAX).contains(&p)) {
            return Err(Error::contract(format!(
                "emit probability {p} outside [{EMIT_MIN}, {EMIT_MAX}]"
            )));
        }
        Ok(EmitLattice { probs })
    }

    /// Every cell set to `p`; the geometric model seen as a neural one.
    pub fn constant(rows: usize, cols: usize, p: f64) -> Result<Self> {
        Self::new(Array2::from_elem((rows, cols), p))
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn input_len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn output_len(&self) -> usize {
        self.probs.ncols()
    }

    fn jump(&self, k: usize, i: usize, j: usize) -> f64 {
        if i < k {
            return f64::NEG_INFINITY;
        }
        let shifts: f64 = (k..i).map(|d| (-self.probs[[d, j]]).ln_1p()).sum();
        shifts + self.probs[[i, j]].ln()
    }
}

/// `log p(a_j = i | a_{j-1} = k)` under the neural model, by direct summation.
pub fn log_transition_neural(k: usize, i: usize, j: usize, emit: &EmitLattice) -> Result<f64> {
    let (rows, cols) = emit.probs.dim();
    if k >= rows || i >= rows || j >= cols {
        return Err(Error::contract(format!(
            "transition ({k} → {i}, column {j}) outside a {rows} × {cols} lattice"
        )));
    }
    Ok(emit.jump(k, i, j))
}

impl Transition for EmitLattice {
    fn log_initial(&self, i: usize) -> f64 {
        self.jump(0, i, 0)
    }

    fn log_transition(&self, k: usize, i: usize, j: usize) -> f64 {
        self.jump(k, i, j)
    }
}

/// Transition scores for one output column given that column's emit
/// probabilities, with prefix sums so each jump costs O(1).
///
/// Used by the decoders, where every hypothesis carries its own decoder state
/// and hence its own emit column.
#[derive(Clone, Debug)]
pub struct ColumnTransition {
    log_emit: Vec<f64>,
    shift_prefix: Vec<f64>,
}

impl ColumnTransition {
    pub fn from_emit(probs: &[f64]) -> Self {
        let log_emit = probs.iter().map(|p| p.ln()).collect();
        let mut shift_prefix = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in probs {
            shift_prefix.push(acc);
            acc += (-p).ln_1p();
        }
        ColumnTransition {
            log_emit,
            shift_prefix,
        }
    }

    pub fn len(&self) -> usize {
        self.log_emit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_emit.is_empty()
    }

    /// `log p(a_j = i | a_{j-1} = k)`; the initial distribution is `k = 0`.
    pub fn log_prob(&self, k: usize, i: usize) -> f64 {
        if i < k {
            return f64::NEG_INFINITY;
        }
        (self.shift_prefix[i] - self.shift_prefix[k]) + self.log_emit[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn emission_estimates() {
        assert_eq!(estimate_emission(&[(3, 2)]).unwrap(), 2.0 / 5.0);
        assert_eq!(estimate_emission(&[(4, 4), (7, 7), (1, 1)]).unwrap(), 0.5);
        assert_eq!(estimate_emission(&[(2, 1), (4, 3)]).unwrap(), 4.0 / 10.0);
        assert!(estimate_emission(&[]).is_err());
        assert!(estimate_emission(&[(0, 2)]).is_err());
    }

    #[test]
    fn geometric_values() {
        let half = 0.5f64;
        assert!((log_transition_geometric(2, 2, half) - half.ln()).abs() < 1e-15);
        assert!((log_transition_geometric(1, 3, half) - 0.125f64.ln()).abs() < 1e-15);
        assert_eq!(log_transition_geometric(3, 1, half), f64::NEG_INFINITY);
        assert!((log_initial_geometric(0, half) - half.ln()).abs() < 1e-15);
        assert!((log_initial_geometric(1, half) - 0.25f64.ln()).abs() < 1e-15);
        assert!(GeometricTransition::new(1.0).is_err());
        assert!(GeometricTransition::new(0.0).is_err());
    }

    #[test]
    fn truncated_initial_mass() {
        // Geometric series 1/2 + 1/4 + 1/8 + 1/16.
        let mass: f64 = (0..4).map(|i| log_initial_geometric(i, 0.5).exp()).sum();
        assert!((mass - 0.9375).abs() < 1e-15);
    }

    #[test]
    fn neural_with_constant_lattice() {
        let emit = EmitLattice::constant(4, 3, 0.5).unwrap();
        assert!((emit.log_initial(1) - 0.25f64.ln()).abs() < 1e-15);
        let probs = array![[0.3, 0.6], [0.2, 0.9], [0.7, 0.4]];
        let emit = EmitLattice::new(probs).unwrap();
        for k in 0..3 {
            assert_eq!(
                log_transition_neural(k, k, 1, &emit).unwrap(),
                emit.probs()[[k, 1]].ln()
            );
        }
        assert_eq!(log_transition_neural(2, 1, 1, &emit).unwrap(), f64::NEG_INFINITY);
        assert!(log_transition_neural(0, 3, 1, &emit).is_err());
        assert!(log_transition_neural(0, 1, 2, &emit).is_err());
    }

    #[test]
    fn rejects_unclamped_probabilities() {
        assert!(EmitLattice::new(array![[0.5, 1.0]]).is_err());
        assert!(EmitLattice::new(array![[0.0, 0.5]]).is_err());
    }

    #[test]
    fn neural_transition_mass_by_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = Array2::from_shape_fn((4, 3), |_| rng.random_range(0.05..0.95));
        let emit = EmitLattice::new(probs.clone()).unwrap();
        for j in 1..3 {
            for k in 0..4 {
                // Oracle: product form in probability space.
                let mut mass = 0.0;
                for i in k..4 {
                    let mut p = probs[[i, j]];
                    for d in k..i {
                        p *= 1.0 - probs[[d, j]];
                    }
                    let got = emit.log_transition(k, i, j).exp();
                    assert!((got - p).abs() < 1e-14);
                    mass += p;
                }
                // What is missing is exactly the all-shift tail.
                let tail: f64 = (k..4).map(|d| 1.0 - probs[[d, j]]).product();
                assert!(mass <= 1.0 + 1e-12);
                assert!((mass + tail - 1.0).abs() < 1e-12);
            }
        }
        // Position-dependent emit probabilities break translation invariance.
        let a = emit.log_transition(0, 1, 1);
        let b = emit.log_transition(1, 2, 1);
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn column_transition_matches_lattice() {
        let probs = array![[0.3], [0.2], [0.7], [0.45]];
        let emit = EmitLattice::new(probs.clone()).unwrap();
        let col = ColumnTransition::from_emit(probs.column(0).as_slice().unwrap());
        for k in 0..4 {
            for i in 0..4 {
                let (a, b) = (col.log_prob(k, i), emit.jump(k, i, 0));
                if b == f64::NEG_INFINITY {
                    assert_eq!(a, b);
                } else {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_positive_and_truncated(
            e in 0.01f64..0.99,
            probs in prop::collection::vec(EMIT_MIN..=EMIT_MAX, 6),
            k in 0usize..6,
            i in 0usize..6,
        ) {
            let emit = EmitLattice::new(Array2::from_shape_vec((6, 1), probs).unwrap()).unwrap();
            let geo = GeometricTransition::new(e).unwrap();
            if i < k {
                prop_assert_eq!(geo.log_transition(k, i, 1), f64::NEG_INFINITY);
                prop_assert_eq!(emit.log_transition(k, i, 0), f64::NEG_INFINITY);
            } else {
                prop_assert!(geo.log_transition(k, i, 1).exp() > 0.0);
                prop_assert!(emit.log_transition(k, i, 0).exp() > 0.0);
                // Geometric jumps depend only on the jump length.
                let shifted = geo.log_transition(0, i - k, 1);
                prop_assert!((geo.log_transition(k, i, 1) - shifted).abs() < 1e-12);
            }
            let total: f64 = (k..6).map(|t| emit.log_transition(k, t, 0).exp()).sum();
            prop_assert!(total <= 1.0 + 1e-12);
            let total: f64 = (k..6).map(|t| geo.log_transition(k, t, 1).exp()).sum();
            prop_assert!(total <= 1.0 + 1e-12);
        }
    }
}
