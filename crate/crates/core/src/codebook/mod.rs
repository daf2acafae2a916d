//! Codebook structures: the nested single codebook whose length-`2^l`
//! prefixes serve every quantization level, and the progressive codebook
//! built from per-level difference pairs via Minkowski set sums.

mod io;
mod lbg;

pub use io::{load_codebook, save_codebook, CodebookFile};
pub use lbg::{lbg_fit, LbgConfig, LbgOutcome};

use thiserror::Error;

use crate::autodiff::Real;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("codeword count {got} does not equal 2^{max_level} * dim {dim}")]
    BadCodewordCount {
        got: usize,
        max_level: u8,
        dim: usize,
    },
    #[error("level {level} out of range 1..={max_level}")]
    LevelOutOfRange { level: u8, max_level: u8 },
    #[error("lbg: {0}")]
    Lbg(String),
    #[error("codebook file: {0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

/// One ordered list of `2^max_level` codewords of dimension `dim`; the
/// level-`l` codebook is its first `2^l` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedCodebook<F: Real> {
    dim: usize,
    max_level: u8,
    codewords: Vec<F>,
}

impl<F: Real> NestedCodebook<F> {
    pub fn new(dim: usize, max_level: u8, codewords: Vec<F>) -> Result<Self, CodebookError> {
        let expect = (1usize << max_level) * dim;
        if dim == 0 || max_level == 0 || codewords.len() != expect {
            return Err(CodebookError::BadCodewordCount {
                got: codewords.len(),
                max_level,
                dim,
            });
        }
        Ok(NestedCodebook {
            dim,
            max_level,
            codewords,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_level(&self) -> u8 {
        self.max_level
    }

    /// Total number of codewords, `2^max_level`.
    pub fn size(&self) -> usize {
        1 << self.max_level
    }

    pub fn codeword(&self, k: usize) -> &[F] {
        &self.codewords[k * self.dim..(k + 1) * self.dim]
    }

    /// Flat row-major storage of all codewords.
    pub fn codewords(&self) -> &[F] {
        &self.codewords
    }

    pub fn codewords_mut(&mut self) -> &mut [F] {
        &mut self.codewords
    }

    /// The first `2^level` codewords, by reference into the shared storage.
    pub fn sub_codebook(&self, level: u8) -> Result<&[F], CodebookError> {
        if level == 0 || level > self.max_level {
            return Err(CodebookError::LevelOutOfRange {
                level,
                max_level: self.max_level,
            });
        }
        Ok(&self.codewords[..(1usize << level) * self.dim])
    }

    pub fn cast<T: Real>(&self) -> NestedCodebook<T> {
        NestedCodebook {
            dim: self.dim,
            max_level: self.max_level,
            codewords: self
                .codewords
                .iter()
                .map(|v| T::from_f64(v.as_f64()))
                .collect(),
        }
    }
}

/// A refinement path: the bit string `b_1 ... b_l` addressing one codeword
/// of a [`ProgressiveCodebook`] at level `l`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitPath {
    bits: Vec<bool>,
}

impl BitPath {
    pub fn empty() -> Self {
        BitPath { bits: Vec::new() }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        BitPath {
            bits: bits.to_vec(),
        }
    }

    /// MSB-first index within the level-`len` codebook ordering.
    pub fn from_index(index: usize, level: u8) -> Self {
        let bits = (0..level)
            .map(|j| (index >> (level - 1 - j)) & 1 == 1)
            .collect();
        BitPath { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn index(&self) -> usize {
        self.bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    /// The length-`l-1` prefix addressing this codeword's parent.
    pub fn parent(&self) -> Option<BitPath> {
        if self.bits.is_empty() {
            return None;
        }
        Some(BitPath {
            bits: self.bits[..self.bits.len() - 1].to_vec(),
        })
    }
}

impl std::fmt::Display for BitPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            write!(f, "{}", b as u8)?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BitPath {
    type Err = CodebookError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(CodebookError::Invalid(format!("bad bit char {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BitPath { bits })
    }
}

/// Appends one refinement bit to a prefix path.
pub fn refine_index(prefix: &BitPath, next_bit: bool) -> BitPath {
    let mut bits = prefix.bits.clone();
    bits.push(next_bit);
    BitPath { bits }
}

/// Per-level difference pairs; the level-`l` codebook is the Minkowski sum
/// of all pairs up to `l`, starting from the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveCodebook<F: Real> {
    dim: usize,
    levels: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Real> ProgressiveCodebook<F> {
    pub fn new(dim: usize, levels: Vec<(Vec<F>, Vec<F>)>) -> Result<Self, CodebookError> {
        if dim == 0 || levels.is_empty() {
            return Err(CodebookError::Invalid(
                "progressive codebook requires dim > 0 and at least one level".into(),
            ));
        }
        for (l, (a, b)) in levels.iter().enumerate() {
            if a.len() != dim || b.len() != dim {
                return Err(CodebookError::Invalid(format!(
                    "difference pair at level {} has dimensions {}/{}, expected {}",
                    l + 1,
                    a.len(),
                    b.len(),
                    dim
                )));
            }
        }
        Ok(ProgressiveCodebook { dim, levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_level(&self) -> u8 {
        self.levels.len() as u8
    }

    /// The difference pair `(e1, e2)` at a 1-based level.
    pub fn pair(&self, level: u8) -> (&[F], &[F]) {
        let (a, b) = &self.levels[level as usize - 1];
        (a, b)
    }

    pub fn pairs(&self) -> &[(Vec<F>, Vec<F>)] {
        &self.levels
    }

    /// All `2^level` codewords in lexicographic bit-string order, built by
    /// the set-sum recursion from the zero vector.
    pub fn materialize(&self, level: u8) -> Result<Vec<F>, CodebookError> {
        if level == 0 || level > self.max_level() {
            return Err(CodebookError::LevelOutOfRange {
                level,
                max_level: self.max_level(),
            });
        }
        let mut table = vec![F::zero(); self.dim];
        for l in 1..=level {
            let (e1, e2) = self.pair(l);
            let mut next = Vec::with_capacity(table.len() * 2);
            for parent in table.chunks(self.dim) {
                for diff in [e1, e2] {
                    next.extend(parent.iter().zip(diff).map(|(&p, &d)| p + d));
                }
            }
            table = next;
        }
        Ok(table)
    }

    /// The single codeword addressed by a bit path, accumulated in path
    /// order from the zero vector. Matches `materialize` bit-exactly.
    pub fn codeword_at(&self, path: &BitPath) -> Result<Vec<F>, CodebookError> {
        let level = path.len() as u8;
        if level == 0 || level > self.max_level() {
            return Err(CodebookError::LevelOutOfRange {
                level,
                max_level: self.max_level(),
            });
        }
        let mut acc = vec![F::zero(); self.dim];
        for (j, &bit) in path.bits().iter().enumerate() {
            let (e1, e2) = self.pair(j as u8 + 1);
            let diff = if bit { e2 } else { e1 };
            for (a, &d) in acc.iter_mut().zip(diff) {
                *a = *a + d;
            }
        }
        Ok(acc)
    }

    pub fn cast<T: Real>(&self) -> ProgressiveCodebook<T> {
        ProgressiveCodebook {
            dim: self.dim,
            levels: self
                .levels
                .iter()
                .map(|(a, b)| {
                    (
                        a.iter().map(|v| T::from_f64(v.as_f64())).collect(),
                        b.iter().map(|v| T::from_f64(v.as_f64())).collect(),
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cb3() -> NestedCodebook<f32> {
        let words: Vec<f32> = (0..16).map(|i| i as f32).collect();
        NestedCodebook::new(2, 3, words).unwrap()
    }

    #[test]
    fn sub_codebook_is_prefix() {
        let cb = cb3();
        assert_eq!(cb.sub_codebook(1).unwrap(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(cb.sub_codebook(3).unwrap(), cb.codewords());
        for l in 2..=3 {
            let lower = cb.sub_codebook(l - 1).unwrap();
            let upper = cb.sub_codebook(l).unwrap();
            assert_eq!(lower, &upper[..lower.len()]);
        }
    }

    #[test]
    fn sub_codebook_rejects_bad_level() {
        let cb = cb3();
        assert!(cb.sub_codebook(0).is_err());
        assert!(cb.sub_codebook(4).is_err());
    }

    #[test]
    fn new_rejects_wrong_count() {
        assert!(NestedCodebook::new(2, 3, vec![0.0f32; 30]).is_err());
    }

    #[test]
    fn materialize_direct_set_sum() {
        let pcb = ProgressiveCodebook::new(
            2,
            vec![
                (vec![0.0f64, 0.0], vec![1.0, 0.0]),
                (vec![0.0, 0.0], vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        assert_eq!(
            pcb.materialize(2).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
        assert_eq!(pcb.materialize(1).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn materialize_cardinality_doubles() {
        let pcb = ProgressiveCodebook::new(
            1,
            vec![
                (vec![0.5f64], vec![-0.5]),
                (vec![0.25], vec![-0.25]),
                (vec![0.125], vec![-0.125]),
            ],
        )
        .unwrap();
        for l in 2..=3u8 {
            let lo = pcb.materialize(l - 1).unwrap().len();
            let hi = pcb.materialize(l).unwrap().len();
            assert_eq!(hi, 2 * lo);
        }
        assert!(pcb.materialize(0).is_err());
        assert!(pcb.materialize(4).is_err());
    }

    #[test]
    fn refine_appends_bit() {
        let p: BitPath = "0".parse().unwrap();
        let q = refine_index(&p, true);
        assert_eq!(q.to_string(), "01");
        assert_eq!(q.index(), 1);
        assert_eq!(q.parent().unwrap(), p);
    }

    #[test]
    fn codeword_difference_telescopes() {
        let pcb = ProgressiveCodebook::new(
            2,
            vec![
                (vec![0.5f64, 0.0], vec![-0.5, 0.0]),
                (vec![0.0, 0.25], vec![0.0, -0.25]),
            ],
        )
        .unwrap();
        // codeword("01") - codeword("0") = e2 of level 2
        let c01 = pcb.codeword_at(&"01".parse().unwrap()).unwrap();
        let c0 = pcb.codeword_at(&"0".parse().unwrap()).unwrap();
        let diff: Vec<f64> = c01.iter().zip(&c0).map(|(a, b)| a - b).collect();
        assert_eq!(diff, vec![0.0, -0.25]);
    }

    proptest! {
        /// Set-sum recursion and per-index bit-sum agree exactly, and the
        /// prefix of a path addresses the parent codeword.
        #[test]
        fn minkowski_identity(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let dim = rng.random_range(1..4usize);
            let levels = rng.random_range(1..6u8);
            let pairs = (0..levels)
                .map(|_| {
                    (
                        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
                        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
                    )
                })
                .collect();
            let pcb = ProgressiveCodebook::new(dim, pairs).unwrap();
            for l in 1..=levels {
                let table = pcb.materialize(l).unwrap();
                prop_assert_eq!(table.len(), (1usize << l) * dim);
                for idx in 0..(1usize << l) {
                    let path = BitPath::from_index(idx, l);
                    prop_assert_eq!(path.index(), idx);
                    let direct = pcb.codeword_at(&path).unwrap();
                    prop_assert_eq!(&table[idx * dim..(idx + 1) * dim], &direct[..]);
                }
            }
        }
    }

    #[test]
    fn all_prefixes_of_random_path_step_by_one_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let dim = 2;
        let pairs = (0..8)
            .map(|_| {
                (
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
                )
            })
            .collect();
        let pcb = ProgressiveCodebook::new(dim, pairs).unwrap();
        let bits: Vec<bool> = (0..8).map(|_| rng.random_bool(0.5)).collect();
        let mut prev = vec![0.0f64; dim];
        for l in 1..=8usize {
            let path = BitPath::from_bits(&bits[..l]);
            // oracle route: look the prefix up in the materialized table
            let table = pcb.materialize(l as u8).unwrap();
            let via_table = &table[path.index() * dim..(path.index() + 1) * dim];
            let (e1, e2) = pcb.pair(l as u8);
            let diff = if bits[l - 1] { e2 } else { e1 };
            let expect: Vec<f64> = prev.iter().zip(diff).map(|(p, d)| p + d).collect();
            assert_eq!(via_table, &expect[..]);
            prev = expect;
        }
    }
}
