//! Tensor-train (TT) factorized linear maps.
//!
//! A weight `W ∈ R^{d_in × d_out}` is represented by `D` order-3 cores, core `i`
//! shaped `r_{i-1} × (n_i·m_i) × r_i` with `r_0 = r_D = 1`. The middle axis of a
//! core is indexed `a = i_k·m_k + j_k` (input factor major).
//!
//! Index convention: the row index of `W` decomposes as `(i_1, …, i_D)` and the
//! column index as `(j_1, …, j_D)`, both mixed-radix row-major, i.e.
//! `row = ((i_1·n_2 + i_2)·n_3 + i_3)…` with `i_1` most significant. Then
//!
//! ```text
//! W[row, col] = G_1[0, (i_1, j_1), :] · G_2[:, (i_2, j_2), :] ⋯ G_D[:, (i_D, j_D), 0]
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Geometry of a TT factorization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtShape {
    pub in_factors: Vec<usize>,
    pub out_factors: Vec<usize>,
    /// `[1, r_1, …, r_{D-1}, 1]`
    pub ranks: Vec<usize>,
}

impl TtShape {
    /// Uniform internal rank `rank` with the given factorizations.
    pub fn new(in_factors: Vec<usize>, out_factors: Vec<usize>, rank: usize) -> Result<Self> {
        let d = in_factors.len();
        let mut ranks = vec![rank; d + 1];
        ranks[0] = 1;
        ranks[d] = 1;
        let s = Self {
            in_factors,
            out_factors,
            ranks,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.in_factors.len();
        if d == 0 {
            bail!(Config, "TT factorization needs at least one core");
        }
        if self.out_factors.len() != d {
            bail!(
                Config,
                "TT input factors {:?} and output factors {:?} differ in length",
                self.in_factors,
                self.out_factors
            );
        }
        if self.ranks.len() != d + 1 || self.ranks[0] != 1 || self.ranks[d] != 1 {
            bail!(Config, "TT ranks {:?} must have length D+1 with unit boundaries", self.ranks);
        }
        if self.in_factors.iter().chain(&self.out_factors).chain(&self.ranks).any(|&v| v == 0) {
            bail!(Config, "TT factors and ranks must be positive");
        }
        Ok(())
    }

    pub fn cores(&self) -> usize {
        self.in_factors.len()
    }

    pub fn d_in(&self) -> usize {
        self.in_factors.iter().product()
    }

    pub fn d_out(&self) -> usize {
        self.out_factors.iter().product()
    }

    pub fn core_shape(&self, i: usize) -> [usize; 3] {
        [
            self.ranks[i],
            self.in_factors[i] * self.out_factors[i],
            self.ranks[i + 1],
        ]
    }

    /// `Σ_i r_{i-1}·n_i·m_i·r_i`.
    pub fn param_count(&self) -> usize {
        (0..self.cores())
            .map(|i| self.core_shape(i).iter().product::<usize>())
            .sum()
    }

    /// Per-core standard deviation such that the materialized matrix has entry
    /// variance close to `1/d_in`: an entry is a sum of `Π r_internal` products of
    /// `D` core entries, so `σ^{2D} · Π r = 1/d_in`.
    pub fn init_std(&self) -> f64 {
        let paths: f64 = self.ranks[1..self.cores()].iter().map(|&r| r as f64).product();
        let target = 1.0 / (self.d_in() as f64 * paths);
        target.powf(1.0 / (2.0 * self.cores() as f64))
    }
}

/// Concrete TT cores (value level).
#[derive(Clone, Debug, PartialEq)]
pub struct TtCores<T> {
    pub shape: TtShape,
    pub cores: Vec<Tensor<T>>,
}

impl<T: Scalar> TtCores<T> {
    pub fn new(shape: TtShape, cores: Vec<Tensor<T>>) -> Result<Self> {
        shape.validate()?;
        if cores.len() != shape.cores() {
            bail!(Config, "expected {} TT cores, got {}", shape.cores(), cores.len());
        }
        for (i, c) in cores.iter().enumerate() {
            if c.shape() != shape.core_shape(i) {
                bail!(
                    Config,
                    "TT core {i} has shape {:?}, expected {:?}",
                    c.shape(),
                    shape.core_shape(i)
                );
            }
        }
        Ok(Self { shape, cores })
    }

    pub fn random<R: Rng + ?Sized>(shape: TtShape, rng: &mut R) -> Self {
        let std = shape.init_std();
        let cores = (0..shape.cores())
            .map(|i| Tensor::randn(shape.core_shape(i).to_vec(), std, rng))
            .collect();
        Self { shape, cores }
    }

    pub fn zeros(shape: TtShape) -> Self {
        let cores = (0..shape.cores())
            .map(|i| Tensor::zeros(shape.core_shape(i).to_vec()))
            .collect();
        Self { shape, cores }
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }
}

/// Contracts all cores into the dense `d_in × d_out` matrix.
pub fn tt_materialize<T: Scalar>(tt: &TtCores<T>) -> Tensor<T> {
    let s = &tt.shape;
    // partial[(row_prefix, col_prefix), r] after k cores
    let mut rows = 1usize;
    let mut cols = 1usize;
    let mut rank = 1usize;
    let mut partial = vec![T::one()];
    for (k, core) in tt.cores.iter().enumerate() {
        let (n, m, rn) = (s.in_factors[k], s.out_factors[k], s.ranks[k + 1]);
        let c = core.data();
        let (nrows, ncols) = (rows * n, cols * m);
        let mut next = vec![T::zero(); nrows * ncols * rn];
        for r0 in 0..rows {
            for c0 in 0..cols {
                let prev = &partial[(r0 * cols + c0) * rank..(r0 * cols + c0 + 1) * rank];
                for i in 0..n {
                    for j in 0..m {
                        let out = ((r0 * n + i) * ncols + c0 * m + j) * rn;
                        for (a, &pv) in prev.iter().enumerate() {
                            let base = (a * n * m + i * m + j) * rn;
                            for b in 0..rn {
                                next[out + b] += pv * c[base + b];
                            }
                        }
                    }
                }
            }
        }
        partial = next;
        rows = nrows;
        cols = ncols;
        rank = rn;
    }
    Tensor::new([rows, cols], partial).expect("materialized shape")
}

/// `x[L, d_in] · W_tt` by sequential core contractions; the dense matrix is never formed.
///
/// `cores` are tape values shaped as in [`TtShape::core_shape`].
pub fn tt_linear_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cores: &[Var],
    shape: &TtShape,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let [l, d_in] = xs[..] else {
        bail!(Dimension, "TT input must be a matrix, got {:?}", xs);
    };
    if d_in != shape.d_in() {
        bail!(
            Config,
            "TT input width {d_in} does not match factorization {:?} (product {})",
            shape.in_factors,
            shape.d_in()
        );
    }
    if cores.len() != shape.cores() {
        bail!(Config, "expected {} TT cores, got {}", shape.cores(), cores.len());
    }
    // state: [L, n_k, N_rest, M_done, r_{k-1}]
    let mut rest = d_in;
    let mut done = 1usize;
    let mut state = x;
    for (k, &core) in cores.iter().enumerate() {
        let (n, m) = (shape.in_factors[k], shape.out_factors[k]);
        let (r0, r1) = (shape.ranks[k], shape.ranks[k + 1]);
        if tape.shape(core) != shape.core_shape(k) {
            bail!(
                Config,
                "TT core {k} has shape {:?}, expected {:?}",
                tape.shape(core),
                shape.core_shape(k)
            );
        }
        rest /= n;
        let s5 = tape.reshape(state, &[l, n, rest, done, r0])?;
        let moved = tape.permute(s5, &[0, 2, 3, 1, 4])?;
        let lhs = tape.reshape(moved, &[l * rest * done, n * r0])?;
        // core [r0, n, m, r1] -> [n, r0, m, r1] -> [(n r0), (m r1)]
        let c4 = tape.reshape(core, &[r0, n, m, r1])?;
        let c4 = tape.permute(c4, &[1, 0, 2, 3])?;
        let rhs = tape.reshape(c4, &[n * r0, m * r1])?;
        // rows (L, rest, done), cols (m, r1): row-major this is [L, rest, done·m, r1]
        state = tape.matmul(lhs, rhs)?;
        done *= m;
    }
    tape.reshape(state, &[l, done])
}

/// Count of TT parameters, `Σ r_{i-1} n_i m_i r_i`.
pub fn tt_param_count(shape: &TtShape) -> usize {
    shape.param_count()
}

/// Most balanced factorization of `n` into `parts` integer factors: minimal largest
/// factor, ties broken by the largest smallest factor. Factors are sorted ascending
/// and then the largest is moved to the middle slot, e.g. `768 -> (8, 12, 8)`.
///
/// With `min_factor > 1` factorizations containing smaller factors are rejected.
pub fn balanced_factors(n: usize, parts: usize, min_factor: usize) -> Option<Vec<usize>> {
    if n == 0 || parts == 0 {
        return None;
    }
    let mut best: Option<Vec<usize>> = None;
    let mut cur = Vec::with_capacity(parts);
    search(n, parts, min_factor.max(1), &mut cur, &mut best);
    best.map(|mut f| {
        if f.len() > 1 {
            let largest = f.pop().expect("non-empty");
            f.insert(f.len() / 2 + f.len() % 2, largest);
        }
        f
    })
}

fn search(rem: usize, parts: usize, lo: usize, cur: &mut Vec<usize>, best: &mut Option<Vec<usize>>) {
    if parts == 1 {
        if rem >= lo {
            cur.push(rem);
            let better = match best {
                None => true,
                Some(b) => {
                    let (bmax, bmin) = (*b.last().unwrap(), b[0]);
                    let (cmax, cmin) = (*cur.last().unwrap(), cur[0]);
                    cmax < bmax || (cmax == bmax && cmin > bmin)
                }
            };
            if better {
                *best = Some(cur.clone());
            }
            cur.pop();
        }
        return;
    }
    let mut f = lo;
    while f.saturating_pow(parts as u32) <= rem {
        if rem.is_multiple_of(f) {
            cur.push(f);
            search(rem / f, parts - 1, f, cur, best);
            cur.pop();
        }
        f += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Explicit index-sum oracle: enumerates every rank path.
    fn index_sum_oracle(tt: &TtCores<f64>) -> Tensor<f64> {
        let s = &tt.shape;
        let (din, dout) = (s.d_in(), s.d_out());
        let dcores = s.cores();
        Tensor::from_fn([din, dout], |flat| {
            let (row, col) = (flat / dout, flat % dout);
            // digits, most significant first
            let mut is = vec![0; dcores];
            let mut js = vec![0; dcores];
            let (mut r, mut c) = (row, col);
            for k in (0..dcores).rev() {
                is[k] = r % s.in_factors[k];
                r /= s.in_factors[k];
                js[k] = c % s.out_factors[k];
                c /= s.out_factors[k];
            }
            let mut total = 0.0;
            let internal: Vec<usize> = s.ranks[1..dcores].to_vec();
            let paths: usize = internal.iter().product();
            for p in 0..paths {
                let mut alphas = vec![0usize; dcores + 1];
                let mut q = p;
                for k in (1..dcores).rev() {
                    alphas[k] = q % s.ranks[k];
                    q /= s.ranks[k];
                }
                let mut prod = 1.0;
                for k in 0..dcores {
                    let a = is[k] * s.out_factors[k] + js[k];
                    prod *= tt.cores[k].get(&[alphas[k], a, alphas[k + 1]]);
                }
                total += prod;
            }
            total
        })
    }

    #[test]
    fn single_core_materializes_verbatim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = TtShape::new(vec![3], vec![5], 2).unwrap();
        let tt = TtCores::<f64>::random(shape, &mut rng);
        let w = tt_materialize(&tt);
        assert_eq!(w.data(), tt.cores[0].data());
        assert_eq!(w.shape(), &[3, 5]);
    }

    #[test]
    fn zero_cores_give_zero_matrix() {
        let shape = TtShape::new(vec![2, 2, 2], vec![2, 2, 2], 2).unwrap();
        let w = tt_materialize(&TtCores::<f64>::zeros(shape));
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn materialize_matches_index_sum_oracle() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = TtShape::new(vec![2, 2, 2], vec![2, 2, 2], 2).unwrap();
            let tt = TtCores::<f64>::random(shape, &mut rng);
            let w = tt_materialize(&tt);
            assert!(w.rel_err(&index_sum_oracle(&tt)) < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = TtShape {
            in_factors: vec![2, 3, 2],
            out_factors: vec![3, 1, 2],
            ranks: vec![1, 2, 3, 1],
        };
        let tt = TtCores::<f64>::random(shape, &mut rng);
        assert!(tt_materialize(&tt).rel_err(&index_sum_oracle(&tt)) < 1e-12);
    }

    #[test]
    fn forward_matches_materialized_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = TtShape::new(vec![2, 2, 2], vec![2, 2, 2], 2).unwrap();
        let tt = TtCores::<f64>::random(shape.clone(), &mut rng);
        let x = Tensor::<f64>::randn([5, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cores: Vec<_> = tt.cores.iter().map(|c| tape.constant(c.clone())).collect();
        let y = tt_linear_forward(&mut tape, xv, &cores, &shape).unwrap();
        let oracle = x.matmul(&tt_materialize(&tt)).unwrap();
        assert!(tape.value(y).rel_err(&oracle) < 1e-12);
    }

    #[test]
    fn forward_rejects_mismatched_width() {
        let shape = TtShape::new(vec![2, 2], vec![2, 2], 1).unwrap();
        let tt = TtCores::<f64>::zeros(shape.clone());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 5]));
        let cores: Vec<_> = tt.cores.iter().map(|c| tape.constant(c.clone())).collect();
        let err = tt_linear_forward(&mut tape, x, &cores, &shape).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn param_count_arithmetic() {
        let s = TtShape::new(vec![2, 2, 2], vec![2, 2, 2], 2).unwrap();
        assert_eq!(tt_param_count(&s), 32);
        let s = TtShape::new(vec![8, 12, 8], vec![8, 12, 12], 3).unwrap();
        assert_eq!(tt_param_count(&s), 1776);
        let s = TtShape::new(vec![6], vec![10], 3).unwrap();
        assert_eq!(tt_param_count(&s), 60);
    }

    #[test]
    fn balanced_factorizations() {
        assert_eq!(balanced_factors(768, 3, 1).unwrap(), vec![8, 12, 8]);
        assert_eq!(balanced_factors(1152, 3, 1).unwrap(), vec![8, 12, 12]);
        assert_eq!(balanced_factors(8, 3, 1).unwrap(), vec![2, 2, 2]);
        assert_eq!(balanced_factors(7, 1, 1).unwrap(), vec![7]);
        assert_eq!(balanced_factors(7, 3, 1).unwrap(), vec![1, 7, 1]);
        assert!(balanced_factors(7, 3, 2).is_none());
        assert_eq!(balanced_factors(64, 2, 1).unwrap(), vec![8, 8]);
    }

    #[test]
    fn init_std_targets_unit_fan_in() {
        let s = TtShape::new(vec![4, 4, 4], vec![4, 4, 4], 3).unwrap();
        let sd = s.init_std();
        let var_entry = sd.powi(6) * 9.0;
        assert!((var_entry - 1.0 / 64.0).abs() < 1e-12);
    }
}
