//! Finite-difference checks of every differentiable component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AttentionLayout, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, DEFAULT_STEP};
use crate::matrix::Matrix;
use crate::model::{AdapterSpec, Adapters, Batch, BackboneConfig, Seq2Seq};
use crate::moe::{Mode, RoutingKind};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::phm::{expert_forward_tape, FactorVars};
use crate::regularizer::{
    cosine_offdiag_penalty, draw_negatives, jsd_mi_estimate, redundancy_loss, BatchReps, Critic, CriticKind,
    CriticSet, OffDiagMode, RegConfig,
};
use crate::rsa::Side;
use crate::tasks::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub component: String,
    pub max_rel_error: f64,
}

type Build = Box<dyn FnMut(&mut Tape, &ParamStore, &[ParamId]) -> Result<Var>>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks `f` over fresh parameters of the given shapes.
fn check_op(shapes: &[(usize, usize)], seed: u64, mut f: Build) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| store.add(format!("x{i}"), Matrix::random_normal(a, b, 1.0, &mut r), ParamGroup::Other))
        .collect();
    // a fixed random projection turns any output into a scalar with nontrivial upstream gradient
    let mut probe_cache: Option<Matrix> = None;
    grad_check(&mut store, DEFAULT_STEP, |tape, store| {
        let out = f(tape, store, &ids)?;
        let (rows, cols) = tape.shape(out);
        let probe = probe_cache
            .get_or_insert_with(|| Matrix::random_normal(rows, cols, 1.0, &mut rng(seed ^ 0xabc)))
            .clone();
        let w = tape.constant(probe);
        let p = tape.mul(out, w)?;
        Ok(tape.sum_all(p))
    })
}

fn vars(tape: &mut Tape, store: &ParamStore, ids: &[ParamId]) -> Vec<Var> {
    ids.iter().map(|&id| tape.param(store, id)).collect()
}

fn op_checks() -> Vec<(&'static str, Vec<(usize, usize)>, Build)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.matmul(v[0], v[1])
        })),
        ("transpose", vec![(3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.transpose(v[0]))
        })),
        ("add", vec![(3, 4), (3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.add(v[0], v[1])
        })),
        ("sub", vec![(3, 4), (3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.sub(v[0], v[1])
        })),
        ("add-row", vec![(3, 4), (1, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.add_row(v[0], v[1])
        })),
        ("scale", vec![(3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.scale(v[0], -1.7))
        })),
        ("mul", vec![(3, 4), (3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.mul(v[0], v[1])
        })),
        ("row-softmax", vec![(3, 5)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.row_softmax(v[0]))
        })),
        ("gelu", vec![(3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.gelu(v[0]))
        })),
        ("relu", vec![(3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.relu(v[0]))
        })),
        ("softplus", vec![(3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.softplus(v[0]))
        })),
        ("layer-norm", vec![(3, 5), (1, 5), (1, 5)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.layer_norm(v[0], v[1], v[2])
        })),
        ("mean-rows", vec![(4, 3)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.mean_rows(v[0]))
        })),
        ("sum-all", vec![(4, 3)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.sum_all(v[0]))
        })),
        ("row-sum", vec![(4, 3)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.row_sum(v[0]))
        })),
        ("concat-rows", vec![(2, 3), (3, 3)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.concat_rows(&v)
        })),
        ("reshape", vec![(4, 3)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.reshape(v[0], 2, 6)
        })),
        ("slice-rows", vec![(5, 3)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.slice_rows(v[0], 1, 3)
        })),
        ("gather-rows", vec![(4, 3)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.gather_rows(v[0], &[3, 0, 3, 1, 1])
        })),
        ("cross-entropy", vec![(4, 6)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            t.cross_entropy_with_logits(v[0], &[Some(2), None, Some(0), Some(5)])
        })),
        ("row-normalize", vec![(4, 3)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.row_normalize(v[0]))
        })),
        ("kron", vec![(2, 3), (3, 2)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            Ok(t.kron(v[0], v[1]))
        })),
        ("attention", vec![(2 * 3, 4), (2 * 4, 4), (2 * 4, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            let layout = AttentionLayout {
                batch: 2,
                q_len: 3,
                k_len: 4,
                heads: 2,
                causal: false,
                key_valid: vec![4, 2],
            };
            t.attention(v[0], v[1], v[2], layout)
        })),
        ("causal-attention", vec![(2 * 3, 4), (2 * 3, 4), (2 * 3, 4)], Box::new(|t, s, ids| {
            let v = vars(t, s, ids);
            let layout = AttentionLayout {
                batch: 2,
                q_len: 3,
                k_len: 3,
                heads: 2,
                causal: true,
                key_valid: vec![3, 3],
            };
            t.attention(v[0], v[1], v[2], layout)
        })),
    ]
}

fn expert_check() -> Result<f64> {
    // n = 2, d = 8, d_r = 4, d_k = 2; each factor is (block rows × d_k)
    let (n, d, d_r, d_k) = (2usize, 8usize, 4usize, 2usize);
    let mut shapes = vec![(5, d)];
    shapes.extend(std::iter::repeat_n((n, n), n));
    for _ in 0..n {
        shapes.push((d / n, d_k));
        shapes.push((d_r / n, d_k));
    }
    for _ in 0..n {
        shapes.push((d_r / n, d_k));
        shapes.push((d / n, d_k));
    }
    check_op(
        &shapes,
        11,
        Box::new(move |t, s, ids| {
            let v = vars(t, s, ids);
            let h = v[0];
            let rule = &v[1..1 + n];
            let pairs = |start: usize| -> Vec<FactorVars> {
                (0..n).map(|j| FactorVars { t: v[start + 2 * j], u: v[start + 2 * j + 1] }).collect()
            };
            let down = pairs(1 + n);
            let up = pairs(1 + 3 * n);
            Ok(expert_forward_tape(t, h, rule, &down, &up, Activation::Gelu)?.0)
        }),
    )
}

fn penalty_check(mode: OffDiagMode) -> Result<f64> {
    check_op(
        &[(5, 4), (5, 4)],
        12,
        Box::new(move |t, s, ids| {
            let v = vars(t, s, ids);
            cosine_offdiag_penalty(t, v[0], v[1], mode)
        }),
    )
}

fn mi_check(kind: CriticKind) -> Result<f64> {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let d = 4;
    let critic = Critic::new(&mut store, kind, d, "critic", &mut r);
    for id in critic.param_ids() {
        let (a, b) = store.value(id).shape();
        store.get_mut(id).value = Matrix::random_normal(a, b, 0.5, &mut r);
    }
    let h_a = store.add("h_a", Matrix::random_normal(3 * 2, d, 1.0, &mut r), ParamGroup::Other);
    let h_bar = store.add("h_bar", Matrix::random_normal(3, d, 1.0, &mut r), ParamGroup::Other);
    let negatives = draw_negatives(3, 2, &mut r)?;
    grad_check(&mut store, DEFAULT_STEP, |tape, store| {
        let a = tape.param(store, h_a);
        let b = tape.param(store, h_bar);
        jsd_mi_estimate(tape, store, &critic, a, b, &negatives)
    })
}

fn tiny_samples(seed: u64) -> Vec<Sample> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..3)
        .map(|_| Sample {
            input: (0..5).map(|_| r.random_range(3..16)).collect(),
            answer: (0..2).map(|_| r.random_range(3..16)).collect(),
        })
        .collect()
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        layers: 1,
        d: 8,
        heads: 2,
        d_ff: 16,
        vocab: 16,
        max_len: 8,
    }
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], seed: u64) {
    let mut r = rng(seed);
    for &id in ids {
        let (a, b) = store.value(id).shape();
        store.get_mut(id).value = Matrix::random_normal(a, b, 0.4, &mut r);
    }
}

fn transformer_check() -> Result<f64> {
    let mut store = ParamStore::new();
    let mut model = Seq2Seq::new(&mut store, tiny_backbone(), 3)?;
    let samples = tiny_samples(3);
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::new(&refs)?;
    grad_check(&mut store, DEFAULT_STEP, |tape, store| {
        let fwd = model.forward(tape, store, &batch, Mode::Training)?;
        crate::regularizer::total_loss(tape, fwd.logits, &batch.targets, batch.n_b, None, 0.0)
    })
}

/// NLL + α·L_Ra on an L=1, d=8, two-expert model, gradients w.r.t. adapters and critics.
fn total_loss_check(routing: RoutingKind) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut model = Seq2Seq::new(&mut store, tiny_backbone(), 4)?;
    let spec = AdapterSpec::Mixphm {
        n: 2,
        d_r: 4,
        d_k: 2,
        n_experts: 2,
        activation: Activation::Gelu,
        routing,
    };
    model.insert_adapters(&mut store, &spec, 4)?;
    let critics = CriticSet::new(&mut store, CriticKind::Bilinear, 8, 2, 4);
    let mut tuned = model.adapters.param_ids();
    tuned.extend(critics.param_ids());
    randomize(&mut store, &tuned, 5);
    let samples = tiny_samples(5);
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::new(&refs)?;
    // finite differences see through detached targets, so the check differentiates everything
    let reg = RegConfig {
        stop_gradient_targets: false,
        ..RegConfig::default()
    };
    grad_check(&mut store, DEFAULT_STEP, |tape, store| {
        if let Adapters::MixPhm(m) = &mut model.adapters {
            m.reseed(9);
        }
        let fwd = model.forward(tape, store, &batch, Mode::Training)?;
        let pool = |n_t: usize| Matrix::from_fn(batch.n_b, batch.n_b * n_t, |b, r| if r / n_t == b { 1.0 / n_t as f64 } else { 0.0 });
        let pe = tape.constant(pool(batch.src_len));
        let pd = tape.constant(pool(batch.tgt_len));
        let enc_bar = tape.matmul(pe, fwd.enc_out)?;
        let dec_bar = tape.matmul(pd, fwd.dec_out)?;
        let reps: Vec<BatchReps> = fwd
            .taps
            .iter()
            .map(|t| BatchReps {
                z_a: t.delta,
                z: t.h,
                h_bar: if t.side == Side::Encoder { enc_bar } else { dec_bar },
            })
            .collect();
        let terms = redundancy_loss(tape, store, &reps, &critics, &reg, &mut rng(17))?;
        crate::regularizer::total_loss(tape, fwd.logits, &batch.targets, batch.n_b, Some(terms.loss), reg.alpha)
    })
}

/// Runs every check and returns one report per component.
pub fn gradient_suite() -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in op_checks().into_iter().enumerate() {
        out.push(GradReport {
            component: format!("op/{name}"),
            max_rel_error: check_op(&shapes, 100 + i as u64, f)?,
        });
    }
    let mut push = |component: &str, err: f64| {
        out.push(GradReport {
            component: component.into(),
            max_rel_error: err,
        })
    };
    push("expert-forward", expert_check()?);
    push("cosine-offdiag-penalty/squared", penalty_check(OffDiagMode::Squared)?);
    push("cosine-offdiag-penalty/raw", penalty_check(OffDiagMode::Raw)?);
    push("jsd-mi-estimate/bilinear", mi_check(CriticKind::Bilinear)?);
    push("jsd-mi-estimate/mlp", mi_check(CriticKind::Mlp)?);
    push("transformer-nll", transformer_check()?);
    push("total-loss/batch-random", total_loss_check(RoutingKind::BatchRandom)?);
    push("total-loss/token-random", total_loss_check(RoutingKind::TokenRandom)?);
    push("total-loss/rep-average", total_loss_check(RoutingKind::RepAverage)?);
    Ok(out)
}
