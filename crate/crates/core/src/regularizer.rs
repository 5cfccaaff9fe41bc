//! Redundancy regularization.
//!
//! For each inserted mixture, the loss combines
//!
//! * a decorrelation term on the cosine-similarity matrix between the expert
//!   deltas `Z_a` and the backbone stream `Z`, off-diagonal entries only, and
//! * a Jensen-Shannon mutual-information lower bound between each token delta
//!   and the token-mean `h̄` of the final encoder/decoder output of its sample,
//!   estimated with a trainable critic.
//!
//! `L_Ra = mean over layers (penalty − MI)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffDiagMode {
    /// Mean of squared off-diagonal cosines.
    #[default]
    Squared,
    /// Mean of raw off-diagonal cosines.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticKind {
    #[default]
    Bilinear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub alpha: f64,
    pub offdiag_mode: OffDiagMode,
    pub critic_kind: CriticKind,
    pub negatives_per_positive: usize,
    pub stop_gradient_targets: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            offdiag_mode: OffDiagMode::Squared,
            critic_kind: CriticKind::Bilinear,
            negatives_per_positive: 1,
            stop_gradient_targets: true,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and ≥ 0, got {}", self.alpha)));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Statistics network `T(x, y)` scoring (delta, pooled-representation) pairs.
#[derive(Clone, Debug)]
pub enum Critic {
    /// `T(x, y) = x M yᵀ`.
    Bilinear { m: ParamId },
    /// `T(x, y) = GELU(x W_x + y W_y + b₁) w₂ + b₂`.
    Mlp {
        w_x: ParamId,
        w_y: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, kind: CriticKind, d: usize, prefix: &str, rng: &mut R) -> Self {
        match kind {
            CriticKind::Bilinear => Critic::Bilinear {
                m: store.add(format!("{prefix}/M"), Matrix::random_normal(d, d, 0.02, rng), ParamGroup::Critic),
            },
            CriticKind::Mlp => {
                let std = (1.0 / (2 * d) as f64).sqrt();
                Critic::Mlp {
                    w_x: store.add(format!("{prefix}/Wx"), Matrix::random_normal(d, d, std, rng), ParamGroup::Critic),
                    w_y: store.add(format!("{prefix}/Wy"), Matrix::random_normal(d, d, std, rng), ParamGroup::Critic),
                    b1: store.add(format!("{prefix}/b1"), Matrix::zeros(1, d), ParamGroup::Critic),
                    w2: store.add(
                        format!("{prefix}/w2"),
                        Matrix::random_normal(d, 1, (1.0 / d as f64).sqrt(), rng),
                        ParamGroup::Critic,
                    ),
                    b2: store.add(format!("{prefix}/b2"), Matrix::zeros(1, 1), ParamGroup::Critic),
                }
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Critic::Bilinear { m } => vec![*m],
            Critic::Mlp { w_x, w_y, b1, w2, b2 } => vec![*w_x, *w_y, *b1, *w2, *b2],
        }
    }

    /// Row-wise scores of paired rows of `x` and `y` (both N×d), as N×1.
    pub fn score(&self, tape: &mut Tape, store: &ParamStore, x: Var, y: Var) -> Result<Var> {
        match self {
            Critic::Bilinear { m } => {
                let m = tape.param(store, *m);
                let xm = tape.matmul(x, m)?;
                let prod = tape.mul(xm, y)?;
                Ok(tape.row_sum(prod))
            }
            Critic::Mlp { w_x, w_y, b1, w2, b2 } => {
                let (w_x, w_y, b1, w2, b2) = (
                    tape.param(store, *w_x),
                    tape.param(store, *w_y),
                    tape.param(store, *b1),
                    tape.param(store, *w2),
                    tape.param(store, *b2),
                );
                let hx = tape.matmul(x, w_x)?;
                let hy = tape.matmul(y, w_y)?;
                let h = tape.add(hx, hy)?;
                let h = tape.add_row(h, b1)?;
                let h = tape.gelu(h);
                let s = tape.matmul(h, w2)?;
                tape.add_row(s, b2)
            }
        }
    }
}

/// One critic per inserted mixture.
#[derive(Clone, Debug)]
pub struct CriticSet {
    pub critics: Vec<Critic>,
}

impl CriticSet {
    pub fn new(store: &mut ParamStore, kind: CriticKind, d: usize, n_layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "critic/init"));
        let critics = (1..=n_layers)
            .map(|l| Critic::new(store, kind, d, &format!("critic/layer{l}"), &mut rng))
            .collect();
        Self { critics }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.critics.iter().flat_map(Critic::param_ids).collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).numel()).sum()
    }
}

/// Mean (squared or raw) off-diagonal cosine similarity between rows of `z_a` and `z`.
pub fn cosine_offdiag_penalty(tape: &mut Tape, z_a: Var, z: Var, mode: OffDiagMode) -> Result<Var> {
    let (sa, sz) = (tape.shape(z_a), tape.shape(z));
    if sa != sz {
        return Err(Error::Dimension {
            op: "cosine-offdiag-penalty",
            lhs: sa,
            rhs: sz,
        });
    }
    let n = sa.0;
    if n < 2 {
        return Err(Error::Protocol("off-diagonal penalty needs at least two rows".into()));
    }
    let a = tape.row_normalize(z_a);
    let b = tape.row_normalize(z);
    let bt = tape.transpose(b);
    let c = tape.matmul(a, bt)?;
    let off = tape.constant(Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }));
    let c = match mode {
        OffDiagMode::Squared => tape.mul(c, c)?,
        OffDiagMode::Raw => c,
    };
    let masked = tape.mul(c, off)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale(total, 1.0 / (n * (n - 1)) as f64))
}

/// A uniformly random permutation of `0..n` with no fixed points (`n ≥ 2`).
pub fn random_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Negative-pair sample indices: for each round, `out[r][i]` is the sample paired with sample `i`.
pub fn draw_negatives<R: Rng + ?Sized>(n_b: usize, rounds: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if n_b < 2 {
        return Err(Error::Protocol(format!(
            "need at least two samples per batch to draw negatives, got {n_b}"
        )));
    }
    Ok((0..rounds).map(|_| random_derangement(n_b, rng)).collect())
}

/// JSD mutual-information estimate between token deltas `h_a` (`n_b·n_t` rows)
/// and per-sample pooled representations `h_bar` (`n_b` rows).
///
/// `E_pos[−softplus(−T)] − E_neg[softplus(T)]`; negatives pair each token of
/// sample `i` with `h̄_{σ(i)}` for derangements `σ` in `negatives`.
pub fn jsd_mi_estimate(
    tape: &mut Tape,
    store: &ParamStore,
    critic: &Critic,
    h_a: Var,
    h_bar: Var,
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let (n_b, d) = tape.shape(h_bar);
    let (n, da) = tape.shape(h_a);
    if n_b < 2 {
        return Err(Error::Protocol(format!(
            "need at least two samples per batch to draw negatives, got {n_b}"
        )));
    }
    if d != da || n % n_b != 0 {
        return Err(Error::Dimension {
            op: "jsd-mi-estimate",
            lhs: (n, da),
            rhs: (n_b, d),
        });
    }
    if negatives.is_empty() || negatives.iter().any(|p| p.len() != n_b || p.iter().any(|&j| j >= n_b)) {
        return Err(Error::Protocol("malformed negative pairing".into()));
    }
    let n_t = n / n_b;
    let owner: Vec<usize> = (0..n).map(|r| r / n_t).collect();

    let y_pos = tape.gather_rows(h_bar, &owner)?;
    let s_pos = critic.score(tape, store, h_a, y_pos)?;
    let neg = tape.scale(s_pos, -1.0);
    let sp = tape.softplus(neg);
    let pos_terms = tape.scale(sp, -1.0);
    let pos_mean = tape.mean_rows(pos_terms);

    let mut neg_scores = Vec::with_capacity(negatives.len());
    for perm in negatives {
        let idx: Vec<usize> = owner.iter().map(|&i| perm[i]).collect();
        let y_neg = tape.gather_rows(h_bar, &idx)?;
        neg_scores.push(critic.score(tape, store, h_a, y_neg)?);
    }
    let s_neg = if neg_scores.len() == 1 {
        neg_scores[0]
    } else {
        tape.concat_rows(&neg_scores)?
    };
    let neg_terms = tape.softplus(s_neg);
    let neg_mean = tape.mean_rows(neg_terms);
    tape.sub(pos_mean, neg_mean)
}

/// Captured activations of one mixture for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchReps {
    /// Expert deltas, `n_b·n_t` rows.
    pub z_a: Var,
    /// Mixture inputs (backbone stream), same shape as `z_a`.
    pub z: Var,
    /// Token-mean of the final output of this layer's stack, `n_b` rows.
    pub h_bar: Var,
}

/// `L_Ra` together with its scalar parts for logging.
#[derive(Clone, Copy, Debug)]
pub struct RedundancyTerms {
    pub loss: Var,
    /// Mean decorrelation penalty over layers.
    pub penalty: f64,
    /// Mean MI estimate over layers.
    pub mutual_info: f64,
}

pub fn redundancy_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    reps: &[BatchReps],
    critics: &CriticSet,
    config: &RegConfig,
    rng: &mut R,
) -> Result<RedundancyTerms> {
    if reps.is_empty() {
        return Err(Error::Protocol("redundancy loss needs at least one layer".into()));
    }
    if critics.critics.len() != reps.len() {
        return Err(Error::Protocol(format!(
            "{} layers but {} critics",
            reps.len(),
            critics.critics.len()
        )));
    }
    let mut terms = Vec::with_capacity(reps.len());
    let (mut penalty_sum, mut mi_sum) = (0.0, 0.0);
    for (rep, critic) in reps.iter().zip(&critics.critics) {
        let (z, h_bar) = if config.stop_gradient_targets {
            (tape.detach(rep.z), tape.detach(rep.h_bar))
        } else {
            (rep.z, rep.h_bar)
        };
        let n_b = tape.shape(h_bar).0;
        let negatives = draw_negatives(n_b, config.negatives_per_positive, rng)?;
        let penalty = cosine_offdiag_penalty(tape, rep.z_a, z, config.offdiag_mode)?;
        let mi = jsd_mi_estimate(tape, store, critic, rep.z_a, h_bar, &negatives)?;
        penalty_sum += tape.scalar(penalty);
        mi_sum += tape.scalar(mi);
        terms.push(tape.sub(penalty, mi)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let k = reps.len() as f64;
    Ok(RedundancyTerms {
        loss: tape.scale(total, 1.0 / k),
        penalty: penalty_sum / k,
        mutual_info: mi_sum / k,
    })
}

/// `(Σ token NLL) / n_samples + α·L_Ra`.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[Option<usize>],
    n_samples: usize,
    l_ra: Option<Var>,
    alpha: f64,
) -> Result<Var> {
    if targets.iter().all(Option::is_none) {
        return Err(Error::Protocol("target sequence is empty".into()));
    }
    let nll = tape.cross_entropy_with_logits(logits, targets)?;
    let nll = tape.scale(nll, 1.0 / n_samples.max(1) as f64);
    match l_ra {
        Some(reg) if alpha != 0.0 => {
            let weighted = tape.scale(reg, alpha);
            tape.add(nll, weighted)
        }
        _ => Ok(nll),
    }
}
