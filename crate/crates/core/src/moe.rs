//! Mixtures of low-rank PHM-experts.
//!
//! One rule tensor `S` (n×n×n, stored as an `(n·n) × n` parameter) is shared by
//! every expert of every layer. Inside a layer all experts share the
//! down-projection factors; only the up-projection factors are per expert.
//! Experts are picked at random during training and merged by averaging their
//! up-projection factors for inference.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::phm::{
    init_rule_tensor, lowrank_phm_weight_tape, split_rule_tensor, Direction, ExpertFactors, FactorVars,
    LowRankFactorPair, PhmConfig,
};
use crate::seed::derive_seed;

/// Standard deviation of the low-rank factor initialization.
pub const FACTOR_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingKind {
    BatchRandom,
    TokenRandom,
    SentenceRandom,
    RepAverage,
    Merged,
}

impl RoutingKind {
    pub const TRAINING: [RoutingKind; 4] = [
        RoutingKind::BatchRandom,
        RoutingKind::TokenRandom,
        RoutingKind::SentenceRandom,
        RoutingKind::RepAverage,
    ];

    pub fn is_random(self) -> bool {
        matches!(self, Self::BatchRandom | Self::TokenRandom | Self::SentenceRandom)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BatchRandom => "batch-random",
            Self::TokenRandom => "token-random",
            Self::SentenceRandom => "sentence-random",
            Self::RepAverage => "rep-average",
            Self::Merged => "merged",
        }
    }
}

impl FromStr for RoutingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::BatchRandom,
            Self::TokenRandom,
            Self::SentenceRandom,
            Self::RepAverage,
            Self::Merged,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown routing kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Which expert handles which rows of an `(n_b·n_t) × d` input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Every row goes to one expert.
    Single(usize),
    /// One expert per sample; rows of sample `b` are `b·n_t .. (b+1)·n_t`.
    PerSample(Vec<usize>),
    /// One expert per row.
    PerToken(Vec<usize>),
    /// Mean of all experts' deltas.
    Average,
    /// The expert with averaged up-projection factors.
    Merged,
}

pub fn route<R: Rng + ?Sized>(
    n_b: usize,
    n_t: usize,
    n_experts: usize,
    kind: RoutingKind,
    mode: Mode,
    rng: &mut R,
) -> Result<Assignment> {
    if n_experts == 0 {
        return Err(Error::Config("a mixture needs at least one expert".into()));
    }
    match (kind, mode) {
        (k, Mode::Inference) if k.is_random() => {
            return Err(Error::Mode(format!("{} routing is training-only", k.as_str())))
        }
        (RoutingKind::Merged, Mode::Training) => {
            return Err(Error::Mode("merged routing is inference-only".into()))
        }
        _ => {}
    }
    let mut draw = || rng.random_range(0..n_experts);
    Ok(match kind {
        RoutingKind::BatchRandom => Assignment::Single(draw()),
        RoutingKind::SentenceRandom => Assignment::PerSample((0..n_b).map(|_| draw()).collect()),
        RoutingKind::TokenRandom => Assignment::PerToken((0..n_b * n_t).map(|_| draw()).collect()),
        RoutingKind::RepAverage => Assignment::Average,
        RoutingKind::Merged => Assignment::Merged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorPairIds {
    pub t: ParamId,
    pub u: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertWeights {
    pub up: Vec<FactorPairIds>,
}

#[derive(Clone, Debug)]
pub struct MixPhmLayer {
    /// 1-based position among all inserted layers.
    pub index: usize,
    pub down: Vec<FactorPairIds>,
    pub experts: Vec<ExpertWeights>,
    pub merged: bool,
    rng: ChaCha8Rng,
}

impl MixPhmLayer {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Reseeds this layer's routing stream from `(seed, layer index)`.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("routing/layer{}", self.index)));
    }

    pub fn route(&mut self, n_b: usize, n_t: usize, kind: RoutingKind, mode: Mode) -> Result<Assignment> {
        if self.merged {
            return match (kind, mode) {
                (RoutingKind::Merged | RoutingKind::RepAverage, Mode::Inference) => Ok(Assignment::Merged),
                _ => Err(Error::Mode("a merged layer only supports inference".into())),
            };
        }
        route(n_b, n_t, self.experts.len(), kind, mode, &mut self.rng)
    }
}

/// Sidecar metadata persisted next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixPhmMeta {
    pub phm: PhmConfig,
    pub n_experts: usize,
    pub routing: RoutingKind,
    pub merged: bool,
    pub activation: Activation,
    pub n_layers: usize,
}

#[derive(Clone, Debug)]
pub struct MixPhmModule {
    pub config: PhmConfig,
    pub n_experts: usize,
    pub activation: Activation,
    pub routing: RoutingKind,
    pub rule: ParamId,
    pub layers: Vec<MixPhmLayer>,
}

fn pair_name(prefix: &str, j: usize) -> (String, String) {
    (format!("{prefix}/T{j}"), format!("{prefix}/U{j}"))
}

impl MixPhmModule {
    /// Creates the rule tensor and `n_layers` mixtures in `store`.
    ///
    /// Down factors and up `T` factors start at N(0, 0.02²); up `U` factors
    /// start at zero so every expert is initially the identity map. Experts of
    /// one layer share their starting point, so averaging their factors at
    /// merge time stays close to averaging their weights.
    pub fn new(
        store: &mut ParamStore,
        config: PhmConfig,
        n_experts: usize,
        n_layers: usize,
        activation: Activation,
        routing: RoutingKind,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mixphm/init"));
        let rule = store.add("mixphm/S_global", init_rule_tensor(config.n, &mut rng), ParamGroup::Adapter);
        let n = config.n;
        let (dn_rows, dn_cols) = config.block_shape(Direction::Down);
        let (up_rows, up_cols) = config.block_shape(Direction::Up);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 1..=n_layers {
            let down = (0..n)
                .map(|j| {
                    let (tn, un) = pair_name(&format!("mixphm/layer{l}/down"), j);
                    FactorPairIds {
                        t: store.add(tn, Matrix::random_normal(dn_rows, config.d_k, FACTOR_INIT_STD, &mut rng), ParamGroup::Adapter),
                        u: store.add(un, Matrix::random_normal(dn_cols, config.d_k, FACTOR_INIT_STD, &mut rng), ParamGroup::Adapter),
                    }
                })
                .collect();
            let up_init: Vec<Matrix> = (0..n)
                .map(|_| Matrix::random_normal(up_rows, config.d_k, FACTOR_INIT_STD, &mut rng))
                .collect();
            let experts = (0..n_experts)
                .map(|i| ExpertWeights {
                    up: (0..n)
                        .map(|j| {
                            let (tn, un) = pair_name(&format!("mixphm/layer{l}/expert{i}/up"), j);
                            FactorPairIds {
                                t: store.add(tn, up_init[j].clone(), ParamGroup::Adapter),
                                u: store.add(un, Matrix::zeros(up_cols, config.d_k), ParamGroup::Adapter),
                            }
                        })
                        .collect(),
                })
                .collect();
            let mut layer = MixPhmLayer {
                index: l,
                down,
                experts,
                merged: false,
                rng: ChaCha8Rng::seed_from_u64(0),
            };
            layer.reseed(seed);
            layers.push(layer);
        }
        Ok(Self {
            config,
            n_experts,
            activation,
            routing,
            rule,
            layers,
        })
    }

    pub fn is_merged(&self) -> bool {
        self.layers.iter().all(|l| l.merged)
    }

    pub fn reseed(&mut self, seed: u64) {
        for layer in &mut self.layers {
            layer.reseed(seed);
        }
    }

    /// Every parameter id owned by the module.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.rule];
        for layer in &self.layers {
            ids.extend(layer.down.iter().flat_map(|p| [p.t, p.u]));
            for e in &layer.experts {
                ids.extend(e.up.iter().flat_map(|p| [p.t, p.u]));
            }
        }
        ids
    }

    /// Rule tensor blocks as tape leaves.
    pub fn rule_vars(&self, tape: &mut Tape, store: &ParamStore) -> Result<Vec<Var>> {
        let s = tape.param(store, self.rule);
        let n = self.config.n;
        (0..n).map(|j| tape.slice_rows(s, j * n, n)).collect()
    }

    /// Plain-value factors of expert `i` in layer `layer_pos` (0-based position).
    pub fn expert_factors(&self, store: &ParamStore, layer_pos: usize, i: usize) -> ExpertFactors {
        let layer = &self.layers[layer_pos];
        let pairs = |ids: &[FactorPairIds], direction| {
            ids.iter()
                .map(|p| LowRankFactorPair {
                    t: store.value(p.t).clone(),
                    u: store.value(p.u).clone(),
                    direction,
                })
                .collect()
        };
        ExpertFactors {
            s: split_rule_tensor(store.value(self.rule)),
            down: pairs(&layer.down, Direction::Down),
            up: pairs(&layer.experts[i].up, Direction::Up),
            activation: self.activation,
        }
    }

    /// Routes and applies layer `layer_pos` to `h` (`n_b·n_t` rows). Returns `(output, delta)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_layer(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        rule: &[Var],
        layer_pos: usize,
        h: Var,
        n_b: usize,
        n_t: usize,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let kind = match mode {
            Mode::Training => self.routing,
            Mode::Inference if self.routing == RoutingKind::RepAverage && !self.layers[layer_pos].merged => {
                RoutingKind::RepAverage
            }
            Mode::Inference => RoutingKind::Merged,
        };
        let assignment = self.layers[layer_pos].route(n_b, n_t, kind, mode)?;
        mixphm_forward(tape, store, rule, &self.layers[layer_pos], self.activation, h, n_t, &assignment)
    }

    /// Averages up-projection factors into a single expert per layer. Idempotent.
    pub fn merge_experts(&mut self, store: &mut ParamStore) {
        for layer in &mut self.layers {
            merge_layer(store, layer);
        }
    }

    pub fn meta(&self) -> MixPhmMeta {
        MixPhmMeta {
            phm: self.config,
            n_experts: self.n_experts,
            routing: self.routing,
            merged: self.is_merged(),
            activation: self.activation,
            n_layers: self.layers.len(),
        }
    }

    /// Rebuilds a module from checkpoint records and sidecar metadata; parameters are added to `store`.
    pub fn from_records(store: &mut ParamStore, meta: &MixPhmMeta, records: &[(String, Matrix)]) -> Result<Self> {
        let lookup = |name: &str| -> Result<Matrix> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let n = meta.phm.n;
        let rule = store.add("mixphm/S_global", lookup("mixphm/S_global")?, ParamGroup::Adapter);
        let stored_experts = if meta.merged { 1 } else { meta.n_experts };
        let mut layers = Vec::new();
        for l in 1..=meta.n_layers {
            let mut load_pairs = |prefix: String| -> Result<Vec<FactorPairIds>> {
                (0..n)
                    .map(|j| {
                        let (tn, un) = pair_name(&prefix, j);
                        let t = lookup(&tn)?;
                        let u = lookup(&un)?;
                        Ok(FactorPairIds {
                            t: store.add(tn, t, ParamGroup::Adapter),
                            u: store.add(un, u, ParamGroup::Adapter),
                        })
                    })
                    .collect()
            };
            let down = load_pairs(format!("mixphm/layer{l}/down"))?;
            let experts = (0..stored_experts)
                .map(|i| Ok(ExpertWeights { up: load_pairs(format!("mixphm/layer{l}/expert{i}/up"))? }))
                .collect::<Result<Vec<_>>>()?;
            let mut layer = MixPhmLayer {
                index: l,
                down,
                experts,
                merged: meta.merged,
                rng: ChaCha8Rng::seed_from_u64(0),
            };
            layer.reseed(0);
            layers.push(layer);
        }
        Ok(Self {
            config: meta.phm,
            n_experts: meta.n_experts,
            activation: meta.activation,
            routing: meta.routing,
            rule,
            layers,
        })
    }
}

fn merge_layer(store: &mut ParamStore, layer: &mut MixPhmLayer) {
    if layer.merged {
        return;
    }
    let n_pairs = layer.experts[0].up.len();
    for j in 0..n_pairs {
        let t_ids: Vec<_> = layer.experts.iter().map(|e| e.up[j].t).collect();
        let u_ids: Vec<_> = layer.experts.iter().map(|e| e.up[j].u).collect();
        let t_mean = running_mean(store, &t_ids);
        let u_mean = running_mean(store, &u_ids);
        store.get_mut(t_ids[0]).value = t_mean;
        store.get_mut(u_ids[0]).value = u_mean;
    }
    for e in layer.experts.drain(1..) {
        for p in e.up {
            store.retire(p.t);
            store.retire(p.u);
        }
    }
    layer.merged = true;
}

/// Incremental mean; exact when all inputs are equal.
fn running_mean(store: &ParamStore, ids: &[ParamId]) -> Matrix {
    let mut mean = store.value(ids[0]).clone();
    for (k, &id) in ids.iter().enumerate().skip(1) {
        let x = store.value(id);
        for (m, &v) in mean.data_mut().iter_mut().zip(x.data()) {
            *m += (v - *m) / (k + 1) as f64;
        }
    }
    mean
}

fn factor_vars(tape: &mut Tape, store: &ParamStore, ids: &[FactorPairIds]) -> Vec<FactorVars> {
    ids.iter()
        .map(|p| FactorVars {
            t: tape.param(store, p.t),
            u: tape.param(store, p.u),
        })
        .collect()
}

/// Applies one mixture to `h` under `assignment`; returns `(h + delta, delta)`.
#[allow(clippy::too_many_arguments)]
pub fn mixphm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    rule: &[Var],
    layer: &MixPhmLayer,
    activation: Activation,
    h: Var,
    n_t: usize,
    assignment: &Assignment,
) -> Result<(Var, Var)> {
    let n_e = layer.experts.len();
    let rows = tape.shape(h).0;
    let check = |i: usize| {
        if i >= n_e {
            Err(Error::Routing(format!("expert index {i} out of range for {n_e} experts")))
        } else {
            Ok(())
        }
    };
    match assignment {
        Assignment::Single(i) => check(*i)?,
        Assignment::PerSample(v) | Assignment::PerToken(v) => {
            v.iter().try_for_each(|&i| check(i))?;
            let expected = match assignment {
                Assignment::PerSample(_) => rows / n_t.max(1),
                _ => rows,
            };
            if v.len() != expected || rows % n_t.max(1) != 0 {
                return Err(Error::Routing(format!(
                    "assignment covers {} units, input has {rows} rows of {n_t} tokens",
                    v.len()
                )));
            }
        }
        Assignment::Average | Assignment::Merged => {}
    }

    let down = factor_vars(tape, store, &layer.down);
    let w_dn = lowrank_phm_weight_tape(tape, rule, &down)?;
    let pre = tape.matmul(h, w_dn)?;
    let hidden = tape.activation(pre, activation);

    let expert_delta = |tape: &mut Tape, up: Vec<FactorVars>| -> Result<Var> {
        let w_up = lowrank_phm_weight_tape(tape, rule, &up)?;
        tape.matmul(hidden, w_up)
    };

    let delta = match assignment {
        Assignment::Single(i) => {
            let up = factor_vars(tape, store, &layer.experts[*i].up);
            expert_delta(tape, up)?
        }
        Assignment::Merged => {
            let up = if n_e == 1 {
                factor_vars(tape, store, &layer.experts[0].up)
            } else {
                (0..layer.experts[0].up.len())
                    .map(|j| {
                        let t_ids: Vec<_> = layer.experts.iter().map(|e| e.up[j].t).collect();
                        let u_ids: Vec<_> = layer.experts.iter().map(|e| e.up[j].u).collect();
                        FactorVars {
                            t: tape.constant(running_mean(store, &t_ids)),
                            u: tape.constant(running_mean(store, &u_ids)),
                        }
                    })
                    .collect()
            };
            expert_delta(tape, up)?
        }
        Assignment::Average => {
            let mut sum: Option<Var> = None;
            for e in &layer.experts {
                let up = factor_vars(tape, store, &e.up);
                let d = expert_delta(tape, up)?;
                sum = Some(match sum {
                    Some(s) => tape.add(s, d)?,
                    None => d,
                });
            }
            let sum = sum.expect("at least one expert");
            tape.scale(sum, 1.0 / n_e as f64)
        }
        Assignment::PerSample(v) | Assignment::PerToken(v) => {
            let per_row: Vec<usize> = match assignment {
                Assignment::PerSample(_) => (0..rows).map(|r| v[r / n_t]).collect(),
                _ => v.clone(),
            };
            let mut used: Vec<usize> = per_row.clone();
            used.sort_unstable();
            used.dedup();
            let mut parts = Vec::with_capacity(used.len());
            for &i in &used {
                let up = factor_vars(tape, store, &layer.experts[i].up);
                parts.push(expert_delta(tape, up)?);
            }
            if parts.len() == 1 {
                parts[0]
            } else {
                let stacked = tape.concat_rows(&parts)?;
                let index: Vec<usize> = per_row
                    .iter()
                    .enumerate()
                    .map(|(r, e)| used.binary_search(e).expect("collected above") * rows + r)
                    .collect();
                tape.gather_rows(stacked, &index)?
            }
        }
    };
    let out = tape.add(delta, h)?;
    Ok((out, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phm::expert_forward;
    use proptest::prelude::*;

    fn small_module(n_experts: usize, routing: RoutingKind, seed: u64) -> (ParamStore, MixPhmModule) {
        let mut store = ParamStore::new();
        let config = PhmConfig::new(2, 8, 4, 2).unwrap();
        let module = MixPhmModule::new(&mut store, config, n_experts, 2, Activation::Gelu, routing, seed).unwrap();
        // give every up U a nonzero value so experts differ
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        for layer in &module.layers {
            for e in &layer.experts {
                for p in &e.up {
                    let shape = store.value(p.u).shape();
                    store.get_mut(p.u).value = Matrix::random_normal(shape.0, shape.1, 0.3, &mut rng);
                }
            }
        }
        (store, module)
    }

    fn run(
        store: &ParamStore,
        module: &MixPhmModule,
        h: &Matrix,
        n_t: usize,
        assignment: &Assignment,
    ) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let rule = module.rule_vars(&mut tape, store)?;
        let hv = tape.constant(h.clone());
        let (out, delta) = mixphm_forward(&mut tape, store, &rule, &module.layers[0], module.activation, hv, n_t, assignment)?;
        Ok((tape.value(out).clone(), tape.value(delta).clone()))
    }

    fn input(rows: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_expert_always_routes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [RoutingKind::BatchRandom, RoutingKind::SentenceRandom, RoutingKind::TokenRandom] {
            for _ in 0..50 {
                match route(3, 4, 1, kind, Mode::Training, &mut rng).unwrap() {
                    Assignment::Single(i) => assert_eq!(i, 0),
                    Assignment::PerSample(v) | Assignment::PerToken(v) => assert!(v.iter().all(|&i| i == 0)),
                    other => panic!("{other:?}"),
                }
            }
        }
    }

    #[test]
    fn batch_routing_is_uniform() {
        // chi-square goodness of fit, 3 degrees of freedom; 16.27 is the 0.999 quantile
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            if let Assignment::Single(i) = route(1, 1, 4, RoutingKind::BatchRandom, Mode::Training, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 16.27, "{counts:?} chi2={chi2}");
    }

    #[test]
    fn routing_is_reproducible_per_seed() {
        let draw = |seed| {
            let (_, mut m) = small_module(4, RoutingKind::TokenRandom, seed);
            (0..5).map(|_| m.layers[1].route(2, 3, RoutingKind::TokenRandom, Mode::Training).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(13), draw(13));
        assert_ne!(draw(13), draw(21));
    }

    #[test]
    fn layers_draw_from_independent_streams() {
        let (_, mut m) = small_module(4, RoutingKind::TokenRandom, 3);
        let a = m.layers[0].route(4, 4, RoutingKind::TokenRandom, Mode::Training).unwrap();
        let b = m.layers[1].route(4, 4, RoutingKind::TokenRandom, Mode::Training).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mode_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [RoutingKind::BatchRandom, RoutingKind::TokenRandom, RoutingKind::SentenceRandom] {
            assert!(matches!(route(1, 1, 2, kind, Mode::Inference, &mut rng), Err(Error::Mode(_))));
        }
        assert!(matches!(route(1, 1, 2, RoutingKind::Merged, Mode::Training, &mut rng), Err(Error::Mode(_))));
        assert!(route(1, 1, 2, RoutingKind::RepAverage, Mode::Inference, &mut rng).is_ok());
        assert!(matches!(route(1, 1, 0, RoutingKind::BatchRandom, Mode::Training, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_expert_is_a_routing_error() {
        let (store, m) = small_module(2, RoutingKind::BatchRandom, 0);
        let h = input(4, 1);
        assert!(matches!(run(&store, &m, &h, 2, &Assignment::Single(2)), Err(Error::Routing(_))));
        assert!(matches!(run(&store, &m, &h, 2, &Assignment::PerSample(vec![0])), Err(Error::Routing(_))));
    }

    #[test]
    fn fresh_module_is_identity() {
        let mut store = ParamStore::new();
        let config = PhmConfig::new(2, 8, 4, 2).unwrap();
        let m = MixPhmModule::new(&mut store, config, 3, 1, Activation::Gelu, RoutingKind::BatchRandom, 5).unwrap();
        let h = input(3, 2);
        let (out, delta) = run(&store, &m, &h, 3, &Assignment::Single(1)).unwrap();
        assert_eq!(out, h);
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn each_batch_routed_expert_matches_plain_forward() {
        let (store, m) = small_module(3, RoutingKind::BatchRandom, 9);
        let h = input(6, 3);
        for i in 0..3 {
            let (out, _) = run(&store, &m, &h, 3, &Assignment::Single(i)).unwrap();
            let oracle = expert_forward(&h, &m.expert_factors(&store, 0, i)).unwrap();
            assert!(out.max_abs_diff(&oracle.output) < 1e-12);
        }
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let (mut store, m) = small_module(3, RoutingKind::TokenRandom, 4);
        let layer = &m.layers[0];
        for e in &layer.experts[1..] {
            for (p, p0) in e.up.iter().zip(&layer.experts[0].up) {
                store.get_mut(p.t).value = store.value(p0.t).clone();
                store.get_mut(p.u).value = store.value(p0.u).clone();
            }
        }
        let h = input(6, 5);
        let reference = run(&store, &m, &h, 3, &Assignment::Single(0)).unwrap().0;
        for a in [
            Assignment::Single(2),
            Assignment::PerSample(vec![1, 2]),
            Assignment::PerToken(vec![0, 1, 2, 2, 1, 0]),
            Assignment::Average,
            Assignment::Merged,
        ] {
            let out = run(&store, &m, &h, 3, &a).unwrap().0;
            assert!(out.max_abs_diff(&reference) < 1e-12, "{a:?}");
        }
    }

    #[test]
    fn rep_average_is_mean_of_deltas() {
        let (store, m) = small_module(2, RoutingKind::RepAverage, 6);
        let h = input(4, 6);
        let d1 = expert_forward(&h, &m.expert_factors(&store, 0, 0)).unwrap().delta;
        let d2 = expert_forward(&h, &m.expert_factors(&store, 0, 1)).unwrap().delta;
        let oracle = d1.add(&d2).unwrap().scale(0.5).add(&h).unwrap();
        let out = run(&store, &m, &h, 2, &Assignment::Average).unwrap().0;
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn token_routing_applies_each_rows_expert() {
        let (store, m) = small_module(3, RoutingKind::TokenRandom, 8);
        let h = input(6, 8);
        let choice = vec![2, 0, 1, 1, 0, 2];
        let out = run(&store, &m, &h, 3, &Assignment::PerToken(choice.clone())).unwrap().0;
        for (r, &i) in choice.iter().enumerate() {
            let row = Matrix::row_vector(h.row(r)).unwrap();
            let oracle = expert_forward(&row, &m.expert_factors(&store, 0, i)).unwrap().output;
            let got = Matrix::row_vector(out.row(r)).unwrap();
            assert!(got.max_abs_diff(&oracle) < 1e-12);
        }
    }

    #[test]
    fn sentence_routing_uses_one_expert_per_sample() {
        let (store, m) = small_module(3, RoutingKind::SentenceRandom, 10);
        let h = input(6, 10);
        let per_sample = run(&store, &m, &h, 2, &Assignment::PerSample(vec![1, 0, 2])).unwrap().0;
        let per_token = run(&store, &m, &h, 2, &Assignment::PerToken(vec![1, 1, 0, 0, 2, 2])).unwrap().0;
        assert_eq!(per_sample, per_token);
    }

    #[test]
    fn merging_single_expert_changes_nothing() {
        let (mut store, mut m) = small_module(1, RoutingKind::BatchRandom, 11);
        let before: Vec<Matrix> = m.param_ids().iter().map(|&id| store.value(id).clone()).collect();
        m.merge_experts(&mut store);
        let after: Vec<Matrix> = m.param_ids().iter().map(|&id| store.value(id).clone()).collect();
        assert_eq!(before, after);
        assert!(m.is_merged());
    }

    #[test]
    fn merging_equal_experts_is_bit_exact() {
        let (mut store, mut m) = small_module(3, RoutingKind::BatchRandom, 12);
        for layer in &m.layers {
            for e in &layer.experts[1..] {
                for (p, p0) in e.up.iter().zip(&layer.experts[0].up) {
                    store.get_mut(p.t).value = store.value(p0.t).clone();
                    store.get_mut(p.u).value = store.value(p0.u).clone();
                }
            }
        }
        let h = input(4, 12);
        let before = run(&store, &m, &h, 2, &Assignment::Single(0)).unwrap().0;
        m.merge_experts(&mut store);
        let after = run(&store, &m, &h, 2, &Assignment::Merged).unwrap().0;
        assert_eq!(before, after);
    }

    #[test]
    fn merging_averages_up_factors_only() {
        let (mut store, mut m) = small_module(3, RoutingKind::BatchRandom, 13);
        let layer = m.layers[0].clone();
        let mean = |ids: Vec<ParamId>, store: &ParamStore| {
            let sum = ids.iter().fold(Matrix::zeros(store.value(ids[0]).rows(), store.value(ids[0]).cols()), |acc, &id| {
                acc.add(store.value(id)).unwrap()
            });
            sum.scale(1.0 / ids.len() as f64)
        };
        let t_oracle = mean(layer.experts.iter().map(|e| e.up[1].t).collect(), &store);
        let u_oracle = mean(layer.experts.iter().map(|e| e.up[1].u).collect(), &store);
        let down_before = store.value(layer.down[0].t).clone();
        let rule_before = store.value(m.rule).clone();
        let h = input(4, 13);
        let virtual_merge = run(&store, &m, &h, 2, &Assignment::Merged).unwrap().0;

        m.merge_experts(&mut store);
        let merged = &m.layers[0];
        assert_eq!(merged.n_experts(), 1);
        assert!(store.value(merged.experts[0].up[1].t).max_abs_diff(&t_oracle) < 1e-15);
        assert!(store.value(merged.experts[0].up[1].u).max_abs_diff(&u_oracle) < 1e-15);
        assert_eq!(store.value(merged.down[0].t), &down_before);
        assert_eq!(store.value(m.rule), &rule_before);
        assert!(store.get(layer.experts[2].up[0].t).is_retired());

        let real_merge = run(&store, &m, &h, 2, &Assignment::Merged).unwrap().0;
        assert!(real_merge.max_abs_diff(&virtual_merge) < 1e-15);

        let snapshot: Vec<Matrix> = m.param_ids().iter().map(|&id| store.value(id).clone()).collect();
        m.merge_experts(&mut store);
        let again: Vec<Matrix> = m.param_ids().iter().map(|&id| store.value(id).clone()).collect();
        assert_eq!(snapshot, again);
    }

    #[test]
    fn merged_layer_refuses_training() {
        let (mut store, mut m) = small_module(2, RoutingKind::BatchRandom, 14);
        m.merge_experts(&mut store);
        assert!(matches!(
            m.layers[0].route(1, 1, RoutingKind::BatchRandom, Mode::Training),
            Err(Error::Mode(_))
        ));
        assert_eq!(m.layers[0].route(1, 1, RoutingKind::Merged, Mode::Inference).unwrap(), Assignment::Merged);
    }

    #[test]
    fn census_matches_closed_form() {
        let (store, m) = small_module(3, RoutingKind::BatchRandom, 0);
        let total: usize = m.param_ids().iter().map(|&id| store.get(id).numel()).sum();
        let expected = crate::audit::mixphm_param_count(1, 3, 8, 4, 2, 2).unwrap();
        assert_eq!(total as u64, expected);
    }

    #[test]
    fn records_round_trip() {
        let (mut store, mut m) = small_module(2, RoutingKind::BatchRandom, 15);
        m.merge_experts(&mut store);
        let records: Vec<(String, Matrix)> = m
            .param_ids()
            .iter()
            .map(|&id| (store.get(id).name.clone(), store.value(id).clone()))
            .collect();
        let mut fresh = ParamStore::new();
        let loaded = MixPhmModule::from_records(&mut fresh, &m.meta(), &records).unwrap();
        let h = input(4, 15);
        let a = run(&store, &m, &h, 2, &Assignment::Merged).unwrap().0;
        let b = run(&fresh, &loaded, &h, 2, &Assignment::Merged).unwrap().0;
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn merge_is_permutation_invariant(seed in 0u64..1000, rot in 1usize..3) {
            let (mut store, mut m) = small_module(3, RoutingKind::BatchRandom, seed);
            let (mut store2, mut m2) = (store.clone(), m.clone());
            for layer in &mut m2.layers {
                layer.experts.rotate_left(rot);
            }
            m.merge_experts(&mut store);
            m2.merge_experts(&mut store2);
            let h = input(4, seed);
            let a = run(&store, &m, &h, 2, &Assignment::Merged).unwrap().0;
            let b = run(&store2, &m2, &h, 2, &Assignment::Merged).unwrap().0;
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn token_assignments_stay_in_range(n_b in 1usize..5, n_t in 1usize..6, n_e in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match route(n_b, n_t, n_e, RoutingKind::TokenRandom, Mode::Training, &mut rng).unwrap() {
                Assignment::PerToken(v) => {
                    prop_assert_eq!(v.len(), n_b * n_t);
                    prop_assert!(v.iter().all(|&i| i < n_e));
                }
                _ => prop_assert!(false),
            }
        }
    }
}
