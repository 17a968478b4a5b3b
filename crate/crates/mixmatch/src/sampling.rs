//! Stochastic index sampling and vector resampling.
//!
//! The perturbation primitive: draw `ceil(alpha * L)` positions of an
//! `L`-vector, keep the first input's values there, and fill the remaining
//! positions from the second input. Redrawing the positions every mini-batch
//! is what stops the network from learning which coordinates carry noise.
//! Indices are 0-based.

use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("sampling rate {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("vector length {got} incompatible with {expected} (full) or {compact} (compact)")]
    LengthMismatch { got: usize, expected: usize, compact: usize },
    #[error("{0}")]
    BadIndexSet(String),
    #[error("unknown fusion mode for this operation")]
    UnsupportedMode,
}

/// A sorted set of distinct positions within a vector of length `len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    len: usize,
    chosen: Vec<usize>,
}

impl IndexSet {
    pub fn new(len: usize, mut chosen: Vec<usize>) -> Result<Self, SamplingError> {
        chosen.sort_unstable();
        if chosen.windows(2).any(|w| w[0] == w[1]) {
            return Err(SamplingError::BadIndexSet("duplicate index".into()));
        }
        if chosen.last().is_some_and(|&i| i >= len) {
            return Err(SamplingError::BadIndexSet(format!(
                "index {} out of range for length {len}",
                chosen.last().unwrap()
            )));
        }
        Ok(IndexSet { len, chosen })
    }

    /// Every position: the degenerate alpha = 1 case.
    pub fn full(len: usize) -> Self {
        IndexSet { len, chosen: (0..len).collect() }
    }

    /// The deterministic prefix `{0, .., k-1}` used by fixed-index fusion.
    pub fn prefix(len: usize, k: usize) -> Self {
        assert!(k <= len);
        IndexSet { len, chosen: (0..k).collect() }
    }

    pub fn vector_len(&self) -> usize {
        self.len
    }

    /// Number of chosen indices.
    pub fn k(&self) -> usize {
        self.chosen.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.chosen
    }

    /// The unchosen positions, ascending.
    pub fn complement(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len - self.chosen.len());
        let mut it = self.chosen.iter().peekable();
        for i in 0..self.len {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn contains(&self, i: usize) -> bool {
        self.chosen.binary_search(&i).is_ok()
    }
}

/// Number of perturbed positions for rate `alpha`: `ceil(alpha * L)`.
pub fn perturbed_count(len: usize, alpha: f64) -> usize {
    (alpha * len as f64).ceil() as usize
}

/// Draw `ceil(alpha * L)` distinct positions uniformly without replacement.
pub fn sample_indices<R: Rng>(
    len: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<IndexSet, SamplingError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SamplingError::AlphaOutOfRange(alpha));
    }
    let k = perturbed_count(len, alpha);
    Ok(sample_k(len, k, 0, rng))
}

/// Uniform without-replacement draw of `k` values from `offset..offset+len`,
/// via a partial Fisher-Yates shuffle, returned sorted.
fn sample_k<R: Rng>(len: usize, k: usize, offset: usize, rng: &mut R) -> IndexSet {
    debug_assert!(k <= len);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..len);
        pool.swap(i, j);
    }
    let mut chosen: Vec<usize> = pool[..k].iter().map(|i| i + offset).collect();
    chosen.sort_unstable();
    IndexSet { len: offset + len, chosen }
}

/// How the sampled-index count decays toward a fully uniform draw.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumSchedule {
    pub alpha: f64,
    /// Hidden size L.
    pub len: usize,
    /// Epochs per curriculum increment.
    pub step: usize,
}

impl CurriculumSchedule {
    pub fn new(alpha: f64, len: usize, step: usize) -> Result<Self, SamplingError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SamplingError::AlphaOutOfRange(alpha));
        }
        assert!(step > 0, "curriculum step must be positive");
        Ok(CurriculumSchedule { alpha, len, step })
    }

    pub fn k(&self) -> usize {
        perturbed_count(self.len, self.alpha)
    }

    /// Increments after which the draw becomes fully uniform:
    /// `min(floor(k/2), floor((L-k)/2))`.
    pub fn threshold(&self) -> usize {
        let k = self.k();
        (k / 2).min((self.len - k) / 2)
    }

    /// Indices drawn from the "known part" `{0..k}` at this epoch under the
    /// curriculum formula; clamps at the threshold.
    pub fn known_part_count(&self, epoch: usize) -> usize {
        let s = (epoch / self.step).min(self.threshold());
        self.k() - s
    }
}

/// Curriculum index draw. Starts from the deterministic prefix block and
/// migrates `s = floor(epoch/step)` positions into the remainder until the
/// threshold, after which the draw is plain uniform sampling.
pub fn curriculum_indices<R: Rng>(
    schedule: &CurriculumSchedule,
    epoch: usize,
    rng: &mut R,
) -> IndexSet {
    let k = schedule.k();
    let len = schedule.len;
    let s = epoch / schedule.step;
    if s < schedule.threshold() {
        let known = sample_k(k, k - s, 0, rng);
        let rest = sample_k(len - k, s, k, rng);
        let mut chosen = known.chosen;
        chosen.extend(rest.chosen);
        // both halves are sorted and disjoint by construction
        IndexSet { len, chosen }
    } else {
        sample_k(len, k, 0, rng)
    }
}

/// Mix two vectors: output takes `a`'s values on `I` and `b`'s elsewhere.
/// `b` may be full length `L` (positionally matched) or compact length
/// `L - |I|` (consumed in ascending complement order).
pub fn resample(a: &[f64], b: &[f64], set: &IndexSet) -> Result<Vec<f64>, SamplingError> {
    let l = set.vector_len();
    let k = set.k();
    if a.len() != l {
        return Err(SamplingError::LengthMismatch { got: a.len(), expected: l, compact: l });
    }
    let compact = match b.len() {
        n if n == l => false,
        n if n == l - k => true,
        n => return Err(SamplingError::LengthMismatch { got: n, expected: l, compact: l - k }),
    };
    let mut out = vec![0.0; l];
    for &i in set.indices() {
        out[i] = a[i];
    }
    for (rank, i) in set.complement().into_iter().enumerate() {
        out[i] = if compact { b[rank] } else { b[i] };
    }
    Ok(out)
}

/// Differentiable resample over the columns of `(B, L)` nodes: output takes
/// `a`'s columns on `I` and `b`'s elsewhere, with `b` full (`L` columns) or
/// compact (`L - |I|` columns, ascending complement order).
pub fn resample_tape(
    tape: &mut crate::tape::Tape,
    a: crate::tape::NodeId,
    b: crate::tape::NodeId,
    set: &IndexSet,
) -> Result<crate::tape::NodeId, crate::tape::TapeError> {
    use crate::tape::TapeError;
    let l = set.vector_len();
    let k = set.k();
    if tape.value(a).cols() != l {
        return Err(TapeError::ShapeMismatch {
            op: "resample",
            lhs: tape.value(a).shape().to_vec(),
            rhs: vec![l],
        });
    }
    let complement = set.complement();
    let b_cols = tape.value(b).cols();
    let b_compact = if b_cols == l {
        tape.gather_cols(b, &complement)?
    } else if b_cols == l - k {
        b
    } else {
        return Err(TapeError::ShapeMismatch {
            op: "resample",
            lhs: tape.value(b).shape().to_vec(),
            rhs: vec![l],
        });
    };
    if k == l {
        return Ok(a);
    }
    let b_part = tape.scatter_cols(b_compact, &complement, l)?;
    if k == 0 {
        return Ok(b_part);
    }
    let a_kept = tape.gather_cols(a, set.indices())?;
    let a_part = tape.scatter_cols(a_kept, set.indices(), l)?;
    tape.add(a_part, b_part)
}

/// Fusion schemes for combining a hidden state with a noise vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Mix at freshly sampled indices every mini-batch.
    Mm,
    /// Concatenation-style mix at the fixed prefix indices.
    Lhp,
    /// Additive learned transform: `h + W z`.
    Rhp,
    /// Fresh noise concatenated to the pose input at every decoder step;
    /// handled inside the motion decoder, not by `fuse`.
    Lpp,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<FusionMode> {
        match s.to_ascii_lowercase().as_str() {
            "mm" => Some(FusionMode::Mm),
            "lhp" => Some(FusionMode::Lhp),
            "rhp" => Some(FusionMode::Rhp),
            "lpp" => Some(FusionMode::Lpp),
            _ => None,
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Mm => "mm",
            FusionMode::Lhp => "lhp",
            FusionMode::Rhp => "rhp",
            FusionMode::Lpp => "lpp",
        })
    }
}

/// Hidden-state fusion on plain vectors. For `Mm` the caller supplies the
/// per-batch index set; `Lhp` always uses the fixed prefix; `Rhp` needs its
/// learned `(z_dim, L)` matrix (stored transposed, applied as `z W`).
pub fn fuse(
    h: &[f64],
    z: &[f64],
    set: &IndexSet,
    mode: FusionMode,
    rhp_w: Option<&Tensor>,
) -> Result<Vec<f64>, SamplingError> {
    match mode {
        FusionMode::Mm => resample(h, z, set),
        FusionMode::Lhp => {
            let fixed = IndexSet::prefix(set.vector_len(), set.k());
            resample(h, z, &fixed)
        }
        FusionMode::Rhp => {
            let w = rhp_w.ok_or(SamplingError::UnsupportedMode)?;
            let (z_dim, l) = (w.shape()[0], w.shape()[1]);
            if z.len() != z_dim || h.len() != l {
                return Err(SamplingError::LengthMismatch {
                    got: z.len(),
                    expected: z_dim,
                    compact: z_dim,
                });
            }
            let wz = crate::tensor::matmul(z, w.data(), 1, z_dim, l);
            Ok(h.iter().zip(&wz).map(|(a, b)| a + b).collect())
        }
        FusionMode::Lpp => Err(SamplingError::UnsupportedMode),
    }
}
