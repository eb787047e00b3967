//! Partition of `[-1, 1]` into equal-width bins, bin-level legality masks
//! and widths reduced by the unit-norm budget.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::so3::UnitQuaternion;

/// `N` equal bins `[a_i, b_i)` covering `[-1, 1]`; `x = 1` belongs to the last bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinPartition {
    n: usize,
}

impl BinPartition {
    /// Odd counts are accepted, but then zero is interior to the middle bin.
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("bin count must be at least 2, got {n}")));
        }
        if n % 2 == 1 {
            log::warn!("odd bin count {n}: zero is not a bin edge");
        }
        Ok(Self { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Nominal width `2 / N`.
    pub fn width(&self) -> f64 {
        2.0 / self.n as f64
    }

    /// Edge `i` for `i ∈ [0, N]`; edge `N` is exactly 1.
    pub fn edge(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n);
        -1.0 + 2.0 * i as f64 / self.n as f64
    }

    /// `(a_i, b_i)`.
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.edge(i), self.edge(i + 1))
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        let (a, b) = self.bounds(i);
        0.5 * (a + b)
    }

    pub fn bin_of(&self, x: f64) -> Result<usize> {
        if !(-1.0..=1.0).contains(&x) {
            return Err(invalid(format!("{x} is outside [-1, 1]")));
        }
        Ok(self.bin_of_unchecked(x))
    }

    pub(crate) fn bin_of_unchecked(&self, x: f64) -> usize {
        let raw = (self.n as f64 * (x + 1.0) / 2.0).floor();
        let mut k = (raw.max(0.0) as usize).min(self.n - 1);
        // agree with `edge` exactly at bin boundaries
        if x < self.edge(k) && k > 0 {
            k -= 1;
        } else if k + 1 < self.n && x >= self.edge(k + 1) {
            k += 1;
        }
        k
    }

    /// Smallest `|x|` over the bin: 0 when the bin touches zero.
    pub fn min_magnitude(&self, i: usize) -> f64 {
        let (a, b) = self.bounds(i);
        if a <= 0.0 && b >= 0.0 {
            0.0
        } else {
            a.abs().min(b.abs())
        }
    }

    /// Bins that cannot hold a point of the unit ball given the previous bins,
    /// judged by minimum magnitudes only.
    pub fn strictly_illegal_mask(&self, prev_bins: &[usize]) -> Result<LegalityMask> {
        if prev_bins.len() > 2 {
            return Err(invalid(format!(
                "at most two previous bins, got {}",
                prev_bins.len()
            )));
        }
        if let Some(&bad) = prev_bins.iter().find(|&&b| b >= self.n) {
            return Err(invalid(format!("bin {bad} out of range for N = {}", self.n)));
        }
        let used: f64 = prev_bins.iter().map(|&b| self.min_magnitude(b).powi(2)).sum();
        if used > 1.0 {
            return Err(invalid(format!(
                "prefix {prev_bins:?} is itself illegal (Σ min² = {used})"
            )));
        }
        let illegal = (0..self.n)
            .map(|i| self.min_magnitude(i).powi(2) + used > 1.0)
            .collect();
        Ok(LegalityMask { illegal })
    }

    /// Length of `[a_i, b_i) ∩ [-r, r]` with `r = sqrt(remaining_sq)`.
    pub fn constrained_width(&self, i: usize, remaining_sq: f64) -> f64 {
        let r = remaining_sq.max(0.0).sqrt();
        let (a, b) = self.bounds(i);
        (b.min(r) - a.max(-r)).max(0.0)
    }

    pub fn sentence_of(&self, q: &UnitQuaternion) -> QuaternionSentence {
        self.sentence_of_xyz(q.xyz())
    }

    /// Component-wise binning of a point of the closed unit ball.
    pub fn sentence_of_xyz(&self, [x, y, z]: [f64; 3]) -> QuaternionSentence {
        QuaternionSentence([
            self.bin_of_unchecked(x.clamp(-1.0, 1.0)),
            self.bin_of_unchecked(y.clamp(-1.0, 1.0)),
            self.bin_of_unchecked(z.clamp(-1.0, 1.0)),
        ])
    }
}

/// The bin labels `(l_x, l_y, l_z)` of a quaternion's imaginary part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuaternionSentence(pub [usize; 3]);

impl QuaternionSentence {
    pub fn labels(&self) -> [usize; 3] {
        self.0
    }

    /// Every label is legal under the mask of its prefix.
    pub fn is_legal(&self, partition: &BinPartition) -> bool {
        (0..3).all(|step| {
            partition
                .strictly_illegal_mask(&self.0[..step])
                .is_ok_and(|m| self.0[step] < m.len() && !m.is_illegal(self.0[step]))
        })
    }
}

/// `true` marks a strictly illegal bin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LegalityMask {
    illegal: Vec<bool>,
}

impl LegalityMask {
    pub fn all_legal(n: usize) -> Self {
        Self {
            illegal: vec![false; n],
        }
    }

    pub fn from_flags(illegal: Vec<bool>) -> Self {
        Self { illegal }
    }

    pub fn len(&self) -> usize {
        self.illegal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.illegal.is_empty()
    }

    pub fn is_illegal(&self, i: usize) -> bool {
        self.illegal[i]
    }

    pub fn legal_count(&self) -> usize {
        self.illegal.iter().filter(|f| !**f).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.illegal
    }
}
