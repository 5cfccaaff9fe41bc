//! Kronecker-factored (PHM) weights, their low-rank variant, and the
//! bottleneck adapter / PHM-expert forward passes.
//!
//! A PHM weight is `W = Σⱼ Sⱼ ⊗ Aⱼ` with `Sⱼ ∈ ℝⁿˣⁿ` and `Aⱼ ∈ ℝ^{(d/n)×(d_r/n)}`.
//! The low-rank variant further writes `Aⱼ = Tⱼ Uⱼᵀ` with inner width `d_k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhmConfig {
    /// Number of Kronecker summands.
    pub n: usize,
    /// Model width.
    pub d: usize,
    /// Bottleneck width.
    pub d_r: usize,
    /// Inner rank of each factor pair.
    pub d_k: usize,
}

impl PhmConfig {
    pub fn new(n: usize, d: usize, d_r: usize, d_k: usize) -> Result<Self> {
        let c = Self { n, d, d_r, d_k };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { n, d, d_r, d_k } = *self;
        if n == 0 || d == 0 || d_r == 0 || d_k == 0 {
            return Err(Error::Config(format!("PHM sizes must be positive: {self:?}")));
        }
        if d % n != 0 || d_r % n != 0 {
            return Err(Error::Config(format!("n={n} must divide d={d} and d_r={d_r}")));
        }
        if d_k > (d / n).min(d_r / n) {
            return Err(Error::Config(format!(
                "d_k={d_k} exceeds min(d/n, d_r/n)={}",
                (d / n).min(d_r / n)
            )));
        }
        Ok(())
    }

    /// Shape of each `Aⱼ` block for the given direction.
    pub fn block_shape(&self, direction: Direction) -> (usize, usize) {
        match direction {
            Direction::Down => (self.d / self.n, self.d_r / self.n),
            Direction::Up => (self.d_r / self.n, self.d / self.n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Down,
    Up,
}

/// `A = T Uᵀ` for one Kronecker summand.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactorPair {
    pub t: Matrix,
    pub u: Matrix,
    pub direction: Direction,
}

impl LowRankFactorPair {
    pub fn product(&self) -> Result<Matrix> {
        self.t.matmul(&self.u.transpose())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights {
    pub w_dn: Matrix,
    pub w_up: Matrix,
    pub activation: Activation,
}

/// Adapter output together with the pre-residual delta `h_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterOutput {
    pub output: Matrix,
    pub delta: Matrix,
}

/// Block matrix whose `(i, j)` block is `s[i,j] · a`.
pub fn kron(s: &Matrix, a: &Matrix) -> Matrix {
    let (m, k) = s.shape();
    let (p, q) = a.shape();
    let mut out = Matrix::zeros(m * p, k * q);
    let cols = k * q;
    let data = out.data_mut();
    for i in 0..m {
        for j in 0..k {
            let sij = s.get(i, j);
            for r in 0..p {
                let dst = (i * p + r) * cols + j * q;
                for (o, &v) in data[dst..dst + q].iter_mut().zip(a.row(r)) {
                    *o = sij * v;
                }
            }
        }
    }
    out
}

/// `Σⱼ Sⱼ ⊗ Aⱼ`.
pub fn phm_weight(s_list: &[Matrix], a_list: &[Matrix]) -> Result<Matrix> {
    let n = s_list.len();
    if n == 0 || a_list.len() != n {
        return Err(Error::Config(format!(
            "need n S matrices and n A blocks, got {} and {}",
            s_list.len(),
            a_list.len()
        )));
    }
    let block = a_list[0].shape();
    for (s, a) in s_list.iter().zip(a_list) {
        if s.shape() != (n, n) {
            return Err(Error::Config(format!("S block must be {n}x{n}, got {:?}", s.shape())));
        }
        if a.shape() != block {
            return Err(Error::Config(format!("A blocks disagree: {block:?} vs {:?}", a.shape())));
        }
    }
    let mut w = kron(&s_list[0], &a_list[0]);
    for (s, a) in s_list.iter().zip(a_list).skip(1) {
        w.add_assign(&kron(s, a));
    }
    Ok(w)
}

/// `Σⱼ Sⱼ ⊗ (Tⱼ Uⱼᵀ)`.
pub fn lowrank_phm_weight(s_list: &[Matrix], pairs: &[LowRankFactorPair]) -> Result<Matrix> {
    if let Some(p) = pairs.iter().find(|p| p.t.cols() != p.u.cols()) {
        return Err(Error::Config(format!(
            "rank mismatch: T is {:?}, U is {:?}",
            p.t.shape(),
            p.u.shape()
        )));
    }
    let blocks = pairs.iter().map(LowRankFactorPair::product).collect::<Result<Vec<_>>>()?;
    phm_weight(s_list, &blocks)
}

/// `f(h W_dn) W_up + h`, also returning the delta.
pub fn adapter_forward(h: &Matrix, weights: &AdapterWeights) -> Result<AdapterOutput> {
    if h.cols() != weights.w_dn.rows() || weights.w_up.cols() != h.cols() {
        return Err(Error::Dimension {
            op: "adapter",
            lhs: h.shape(),
            rhs: weights.w_dn.shape(),
        });
    }
    let hidden = h.matmul(&weights.w_dn)?.map(|x| weights.activation.apply(x));
    let delta = hidden.matmul(&weights.w_up)?;
    let output = delta.add(h)?;
    Ok(AdapterOutput { output, delta })
}

/// The factors of one PHM-expert as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFactors {
    pub s: Vec<Matrix>,
    pub down: Vec<LowRankFactorPair>,
    pub up: Vec<LowRankFactorPair>,
    pub activation: Activation,
}

impl ExpertFactors {
    pub fn realize(&self) -> Result<AdapterWeights> {
        Ok(AdapterWeights {
            w_dn: lowrank_phm_weight(&self.s, &self.down)?,
            w_up: lowrank_phm_weight(&self.s, &self.up)?,
            activation: self.activation,
        })
    }
}

/// PHM-expert forward on plain values; see [`expert_forward_tape`] for the differentiable form.
pub fn expert_forward(h: &Matrix, expert: &ExpertFactors) -> Result<AdapterOutput> {
    adapter_forward(h, &expert.realize()?)
}

/// Tape handles for one low-rank factor pair.
#[derive(Clone, Copy, Debug)]
pub struct FactorVars {
    pub t: Var,
    pub u: Var,
}

/// Differentiable `Σⱼ Sⱼ ⊗ (Tⱼ Uⱼᵀ)`, realized fresh so gradients reach the factors.
pub fn lowrank_phm_weight_tape(tape: &mut Tape, s: &[Var], pairs: &[FactorVars]) -> Result<Var> {
    if s.is_empty() || s.len() != pairs.len() {
        return Err(Error::Config(format!(
            "need n S matrices and n factor pairs, got {} and {}",
            s.len(),
            pairs.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&sj, pair) in s.iter().zip(pairs) {
        if tape.shape(pair.t).1 != tape.shape(pair.u).1 {
            return Err(Error::Config(format!(
                "rank mismatch: T is {:?}, U is {:?}",
                tape.shape(pair.t),
                tape.shape(pair.u)
            )));
        }
        let ut = tape.transpose(pair.u);
        let a = tape.matmul(pair.t, ut)?;
        let k = tape.kron(sj, a);
        total = Some(match total {
            Some(acc) => tape.add(acc, k)?,
            None => k,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Differentiable PHM-expert. Returns `(output, delta)`.
pub fn expert_forward_tape(
    tape: &mut Tape,
    h: Var,
    s: &[Var],
    down: &[FactorVars],
    up: &[FactorVars],
    activation: Activation,
) -> Result<(Var, Var)> {
    let w_dn = lowrank_phm_weight_tape(tape, s, down)?;
    let w_up = lowrank_phm_weight_tape(tape, s, up)?;
    let pre = tape.matmul(h, w_dn)?;
    let hidden = tape.activation(pre, activation);
    let delta = tape.matmul(hidden, w_up)?;
    let out = tape.add(delta, h)?;
    Ok((out, delta))
}

/// Ratio of PHM parameters (`n·n² + d·d_r/n`) to dense ones (`d·d_r`).
pub fn phm_param_reduction(config: &PhmConfig) -> Result<f64> {
    config.validate()?;
    let (n, d, d_r) = (config.n as f64, config.d as f64, config.d_r as f64);
    let ratio = (n * n * n + d * d_r / n) / (d * d_r);
    debug_assert!(ratio <= 1.0 / n + n.powi(3) / (d * d_r) + 1e-15);
    Ok(ratio)
}

/// `n` stacked `n×n` rule matrices drawn from N(0, 1/n), shape `(n·n) × n`.
pub fn init_rule_tensor<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    Matrix::random_normal(n * n, n, (1.0 / n as f64).sqrt(), rng)
}

/// Splits a stacked `(n·n) × n` rule tensor into its `n` blocks.
pub fn split_rule_tensor(s: &Matrix) -> Vec<Matrix> {
    let n = s.cols();
    (0..n).map(|j| s.rows_slice(j * n, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn kron_identity_is_block_diagonal() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let k = kron(&Matrix::identity(2), &a);
        assert_eq!(k.shape(), (4, 6));
        for i in 0..4 {
            for j in 0..6 {
                let same_block = i / 2 == j / 3;
                let expected = if same_block { a.get(i % 2, j % 3) } else { 0.0 };
                assert_eq!(k.get(i, j), expected);
            }
        }
    }

    #[test]
    fn kron_matches_elementwise_definition() {
        let s = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let k = kron(&s, &a);
        let expected = Matrix::from_rows(&[
            vec![0.0, 1.0, 0.0, 2.0],
            vec![1.0, 0.0, 2.0, 0.0],
            vec![0.0, 3.0, 0.0, 4.0],
            vec![3.0, 0.0, 4.0, 0.0],
        ])
        .unwrap();
        assert_eq!(k, expected);
    }

    #[test]
    fn kron_shape_is_mp_by_kq() {
        let k = kron(&Matrix::ones(3, 2), &Matrix::ones(4, 5));
        assert_eq!(k.shape(), (12, 10));
    }

    #[test]
    fn config_guards() {
        assert!(PhmConfig::new(2, 10, 8, 2).is_ok());
        assert!(PhmConfig::new(3, 10, 9, 1).is_err());
        assert!(PhmConfig::new(2, 10, 8, 5).is_err());
        assert!(PhmConfig::new(0, 10, 8, 1).is_err());
    }

    #[test]
    fn single_summand_is_scalar_times_block() {
        let a = Matrix::random_normal(3, 2, 1.0, &mut rng(1));
        let w = phm_weight(&[Matrix::scalar(2.5)], &[a.clone()]).unwrap();
        assert_eq!(w, a.scale(2.5));
    }

    #[test]
    fn figure_shapes() {
        let mut r = rng(2);
        let s: Vec<_> = (0..2).map(|_| Matrix::random_normal(2, 2, 1.0, &mut r)).collect();
        let pairs: Vec<_> = (0..2)
            .map(|_| LowRankFactorPair {
                t: Matrix::random_normal(5, 2, 1.0, &mut r),
                u: Matrix::random_normal(4, 2, 1.0, &mut r),
                direction: Direction::Down,
            })
            .collect();
        assert_eq!(pairs[0].product().unwrap().shape(), (5, 4));
        assert_eq!(lowrank_phm_weight(&s, &pairs).unwrap().shape(), (10, 8));
    }

    #[test]
    fn wrong_list_lengths_are_config_errors() {
        let s = vec![Matrix::identity(2); 2];
        assert!(matches!(phm_weight(&s, &[Matrix::ones(2, 2)]), Err(Error::Config(_))));
        let pair = LowRankFactorPair {
            t: Matrix::ones(2, 2),
            u: Matrix::ones(2, 1),
            direction: Direction::Up,
        };
        assert!(matches!(lowrank_phm_weight(&s, &[pair.clone(), pair]), Err(Error::Config(_))));
    }

    #[test]
    fn full_rank_factorization_reproduces_dense_blocks() {
        let mut r = rng(3);
        let cfg = PhmConfig::new(2, 10, 8, 4).unwrap();
        let s: Vec<_> = (0..2).map(|_| Matrix::random_normal(2, 2, 1.0, &mut r)).collect();
        let blocks: Vec<_> = (0..2).map(|_| Matrix::random_normal(5, 4, 1.0, &mut r)).collect();
        let pairs: Vec<_> = blocks
            .iter()
            .map(|a| LowRankFactorPair {
                t: a.clone(),
                u: Matrix::identity(cfg.d_k),
                direction: Direction::Down,
            })
            .collect();
        assert_eq!(lowrank_phm_weight(&s, &pairs).unwrap(), phm_weight(&s, &blocks).unwrap());
    }

    #[test]
    fn adapter_with_zero_up_projection_is_identity() {
        let mut r = rng(4);
        let h = Matrix::random_normal(3, 6, 1.0, &mut r);
        let w = AdapterWeights {
            w_dn: Matrix::random_normal(6, 2, 1.0, &mut r),
            w_up: Matrix::zeros(2, 6),
            activation: Activation::Gelu,
        };
        let out = adapter_forward(&h, &w).unwrap();
        assert_eq!(out.output, h);
        assert_eq!(out.delta, Matrix::zeros(3, 6));
    }

    #[test]
    fn adapter_maps_zero_to_zero() {
        let mut r = rng(5);
        for act in [Activation::Gelu, Activation::Relu] {
            let w = AdapterWeights {
                w_dn: Matrix::random_normal(6, 2, 1.0, &mut r),
                w_up: Matrix::random_normal(2, 6, 1.0, &mut r),
                activation: act,
            };
            let out = adapter_forward(&Matrix::zeros(2, 6), &w).unwrap();
            assert_eq!(out.output, Matrix::zeros(2, 6));
        }
    }

    #[test]
    fn adapter_matches_composed_oracle() {
        let mut r = rng(6);
        let h = Matrix::random_normal(4, 6, 1.0, &mut r);
        let w = AdapterWeights {
            w_dn: Matrix::random_normal(6, 3, 1.0, &mut r),
            w_up: Matrix::random_normal(3, 6, 1.0, &mut r),
            activation: Activation::Relu,
        };
        let hidden = h.matmul(&w.w_dn).unwrap().map(|x| if x > 0.0 { x } else { 0.0 });
        let oracle = hidden.matmul(&w.w_up).unwrap().add(&h).unwrap();
        assert!(adapter_forward(&h, &w).unwrap().output.max_abs_diff(&oracle) < 1e-14);
        let bad = Matrix::zeros(4, 5);
        assert!(matches!(adapter_forward(&bad, &w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn degenerate_expert_equals_dense_adapter() {
        let mut r = rng(7);
        let (d, d_r) = (6, 4);
        let s = Matrix::scalar(1.7);
        let a_dn = Matrix::random_normal(d, d_r, 1.0, &mut r);
        let a_up = Matrix::random_normal(d_r, d, 1.0, &mut r);
        let expert = ExpertFactors {
            s: vec![s],
            down: vec![LowRankFactorPair {
                t: a_dn.clone(),
                u: Matrix::identity(d_r),
                direction: Direction::Down,
            }],
            up: vec![LowRankFactorPair {
                t: Matrix::identity(d_r),
                u: a_up.transpose(),
                direction: Direction::Up,
            }],
            activation: Activation::Gelu,
        };
        let h = Matrix::random_normal(3, d, 1.0, &mut r);
        let dense = AdapterWeights {
            w_dn: a_dn.scale(1.7),
            w_up: a_up.scale(1.7),
            activation: Activation::Gelu,
        };
        let lhs = expert_forward(&h, &expert).unwrap().output;
        let rhs = adapter_forward(&h, &dense).unwrap().output;
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn reduction_ratio() {
        let cfg = PhmConfig::new(4, 768, 64, 8).unwrap();
        let ratio = phm_param_reduction(&cfg).unwrap();
        assert!((ratio - 12_352.0 / 49_152.0).abs() < 1e-15);
        let one = phm_param_reduction(&PhmConfig::new(1, 768, 64, 8).unwrap()).unwrap();
        assert!((one - 1.0).abs() < 1e-4);
        let big = phm_param_reduction(&PhmConfig::new(4, 1 << 16, 1 << 12, 8).unwrap()).unwrap();
        assert!((big - 0.25).abs() < 1e-6);
    }
}
