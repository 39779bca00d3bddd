use std::collections::HashSet;
use ndarray::Array2;

use super::params::{EncoderIds, Group, LayerIds, Model, NormIds, QNet};
use crate::env::ConstructionState;
use crate::error::{Error, Result};
use crate::routing::ProblemInstance;
use crate::tape::{BatchStats, Matrix, Norm, Tape, Var};

/// Source of normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the rows currently being normalized (training).
    Batch,
    /// Stored running averages (evaluation).
    Running,
}

/// A tape bound to a model. Parameters of the groups passed to
/// [`Graph::training`] are differentiable; everything else enters as a
/// constant.
pub struct Graph<'m> {
    pub tape: Tape,
    model: &'m Model,
    bound: Vec<Option<Var>>,
    trainable: HashSet<Group>,
    mode: BnMode,
    collect: bool,
    stats: Vec<(usize, usize, BatchStats)>,
}

impl<'m> Graph<'m> {
    pub fn training(model: &'m Model, groups: &[Group]) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params().len()],
            trainable: groups.iter().copied().collect(),
            mode: BnMode::Batch,
            collect: false,
            stats: Vec::new(),
        }
    }

    pub fn inference(model: &'m Model, mode: BnMode) -> Self {
        Self {
            tape: Tape::inference(),
            model,
            bound: vec![None; model.params().len()],
            trainable: HashSet::new(),
            mode,
            collect: false,
            stats: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    /// While enabled, batch statistics are kept for a later running-average
    /// update.
    pub fn set_collect_stats(&mut self, on: bool) {
        self.collect = on;
    }

    /// `(running_mean id, running_var id, stats)` for every normalization
    /// evaluated while collection was enabled.
    pub fn take_stats(&mut self) -> Vec<(usize, usize, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let p = self.model.params().get(id);
        let v = if self.trainable.contains(&p.group) && p.trainable {
            self.tape.param(id, &p.value)
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound[id] = Some(v);
        v
    }

    /// Gradients of `loss` with respect to every differentiable parameter
    /// that influenced it.
    pub fn gradients(&self, loss: Var) -> Vec<(usize, Matrix)> {
        let mut grads = self.tape.backward(loss);
        self.tape
            .params()
            .iter()
            .filter_map(|&(id, v)| grads.take(v).map(|g| (id, g)))
            .collect()
    }

    fn linear(&mut self, x: Var, w: usize, b: Option<usize>) -> Var {
        let w = self.param(w);
        let y = self.tape.matmul(x, w);
        match b {
            Some(b) => {
                let b = self.param(b);
                self.tape.add_row(y, b)
            }
            None => y,
        }
    }

    fn norm(&mut self, ids: &NormIds, x: Var) -> Var {
        let gamma = self.param(ids.gamma);
        let beta = self.param(ids.beta);
        match self.mode {
            BnMode::Batch => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, Norm::Batch);
                if self.collect {
                    if let Some(s) = stats {
                        self.stats.push((ids.running_mean, ids.running_var, s));
                    }
                }
                y
            }
            BnMode::Running => {
                let params = self.model.params();
                let mean = params.get(ids.running_mean).value.as_slice().unwrap();
                let var = params.get(ids.running_var).value.as_slice().unwrap();
                self.tape.batch_norm(x, gamma, beta, Norm::Running { mean, var }).0
            }
        }
    }

    fn attention_layer(&mut self, ids: &LayerIds, h: Var, group: usize) -> Var {
        let heads = self.model.config().heads;
        let q = self.linear(h, ids.wq, None);
        let k = self.linear(h, ids.wk, None);
        let v = self.linear(h, ids.wv, None);
        let a = self.tape.self_attention(q, k, v, group, heads);
        let o = self.linear(a, ids.wo, None);
        let skip = self.tape.add(h, o);
        let h1 = self.norm(&ids.norm1, skip);
        let f = self.linear(h1, ids.ff_w1, Some(ids.ff_b1));
        let f = self.tape.relu(f);
        let f = self.linear(f, ids.ff_w2, Some(ids.ff_b2));
        let skip = self.tape.add(h1, f);
        self.norm(&ids.norm2, skip)
    }

    fn encoder(&mut self, ids: &EncoderIds, blocks: &[&ProblemInstance]) -> Result<Var> {
        let m = block_size(blocks)?;
        let k = blocks.len();
        let h0 = match ids.depot {
            None => {
                let feats = Array2::from_shape_fn((k * m, 2), |(r, c)| {
                    let p = blocks[r / m].coords()[r % m];
                    if c == 0 {
                        p.x
                    } else {
                        p.y
                    }
                });
                let x = self.tape.constant(feats);
                self.linear(x, ids.node_w, Some(ids.node_b))
            }
            Some((dw, db)) => {
                let n = m - 1;
                let depots = Array2::from_shape_fn((k, 2), |(b, c)| {
                    let p = blocks[b].coords()[0];
                    if c == 0 {
                        p.x
                    } else {
                        p.y
                    }
                });
                let customers = Array2::from_shape_fn((k * n, 3), |(r, c)| {
                    let (b, j) = (r / n, r % n + 1);
                    let p = blocks[b].coords()[j];
                    match c {
                        0 => p.x,
                        1 => p.y,
                        _ => blocks[b].demand(j),
                    }
                });
                let depots = self.tape.constant(depots);
                let depots = self.linear(depots, dw, Some(db));
                let customers = self.tape.constant(customers);
                let customers = self.linear(customers, ids.node_w, Some(ids.node_b));
                let stacked = self.tape.concat_rows(&[depots, customers]);
                let order = (0..k * m)
                    .map(|r| {
                        let (b, j) = (r / m, r % m);
                        if j == 0 {
                            b
                        } else {
                            k + b * n + j - 1
                        }
                    })
                    .collect();
                self.tape.gather_rows(stacked, order)
            }
        };
        let mut h = h0;
        for layer in &ids.layers {
            h = self.attention_layer(layer, h, m);
        }
        Ok(h)
    }

    /// Encodes each block with the policy encoder and precomputes the
    /// decoder projections shared across steps.
    pub fn policy_encode(&mut self, blocks: &[&ProblemInstance]) -> Result<DecoderCache> {
        let ids = &self.model.layout().policy;
        let nodes = self.encoder(&ids.encoder, blocks)?;
        let m = blocks[0].num_nodes();
        let graph = self.tape.group_mean(nodes, m);
        let table = match ids.placeholder {
            Some(p) => {
                let p = self.param(p);
                self.tape.concat_rows(&[nodes, p])
            }
            None => nodes,
        };
        let glimpse_k = self.linear(nodes, ids.glimpse_k, None);
        let glimpse_v = self.linear(nodes, ids.glimpse_v, None);
        let logit_k = self.linear(nodes, ids.logit_k, None);
        Ok(DecoderCache {
            nodes,
            graph,
            table,
            glimpse_k,
            glimpse_v,
            logit_k,
            group: m,
            blocks: blocks.len(),
        })
    }

    fn context(&mut self, nodes_table: Var, graph: Var, group: usize, blocks: usize, ctx: &StepContext) -> Var {
        let g = self.tape.gather_rows(graph, ctx.map.clone());
        let placeholder_base = blocks * group;
        let row = |b: usize, node: Option<usize>, slot: usize| match node {
            Some(j) => b * group + j,
            None => placeholder_base + slot,
        };
        if self.model.kind().is_vrp() {
            let last_idx = ctx.map.iter().zip(&ctx.last).map(|(&b, &l)| row(b, l.or(Some(0)), 0)).collect();
            let last = self.tape.gather_rows(nodes_table, last_idx);
            let cap = self
                .tape
                .constant(Array2::from_shape_vec((ctx.len(), 1), ctx.capacity.clone()).unwrap());
            self.tape.concat_cols(&[g, last, cap])
        } else {
            let first_idx = ctx.map.iter().zip(&ctx.first).map(|(&b, &f)| row(b, f, 0)).collect();
            let last_idx = ctx.map.iter().zip(&ctx.last).map(|(&b, &l)| row(b, l, 1)).collect();
            let first = self.tape.gather_rows(nodes_table, first_idx);
            let last = self.tape.gather_rows(nodes_table, last_idx);
            self.tape.concat_cols(&[g, first, last])
        }
    }

    /// Log-probabilities (`G × m`) of the next node for each context row.
    pub fn policy_step(&mut self, cache: &DecoderCache, ctx: &StepContext) -> Var {
        let ids = &self.model.layout().policy;
        let cfg = self.model.config();
        debug_assert_eq!(ctx.mask.len(), ctx.len() * cache.group);
        let c = self.context(cache.table, cache.graph, cache.group, cache.blocks, ctx);
        let q = self.linear(c, ids.context_w, None);
        let glimpse = self.tape.query_attention(
            q,
            cache.glimpse_k,
            cache.glimpse_v,
            ctx.map.clone(),
            cache.group,
            cfg.heads,
            &ctx.mask,
        );
        let q = self.linear(glimpse, ids.glimpse_out, None);
        let u = self.tape.pointer_logits(q, cache.logit_k, ctx.map.clone(), cache.group);
        let u = self.tape.tanh(u);
        let u = self.tape.scale(u, cfg.clip_c);
        self.tape.masked_log_softmax(u, ctx.mask.clone())
    }

    /// Value estimates (`K × 1`) from policy node embeddings. `weights`
    /// (`K·m`) define the pooling over each block.
    pub fn critic(&mut self, nodes: Var, group: usize, weights: Vec<f64>) -> Var {
        let ids = &self.model.layout().critic;
        let mut h = nodes;
        for layer in &ids.layers {
            h = self.attention_layer(layer, h, group);
        }
        let pooled = self.tape.group_weighted_sum(h, weights, group);
        let hidden = self.linear(pooled, ids.hidden_w, Some(ids.hidden_b));
        let hidden = self.tape.relu(hidden);
        self.linear(hidden, ids.out_w, Some(ids.out_b))
    }

    /// Action values (`G × m`) of one action-value network; row `g` belongs
    /// to block `ctx.map[g]`. Entries of infeasible actions are finite but
    /// meaningless.
    pub fn q_all(&mut self, which: QNet, blocks: &[&ProblemInstance], ctx: &StepContext) -> Result<Var> {
        let ids = self.model.layout().q(which);
        let nodes = self.encoder(&ids.encoder, blocks)?;
        let m = blocks[0].num_nodes();
        let graph = self.tape.group_mean(nodes, m);
        let table = match ids.placeholder {
            Some(p) => {
                let p = self.param(p);
                self.tape.concat_rows(&[nodes, p])
            }
            None => nodes,
        };
        let c = self.context(table, graph, m, blocks.len(), ctx);
        let c = self.linear(c, ids.context_w, Some(ids.context_b));
        let per_node = self.linear(nodes, ids.node_w, None);
        let rows = ctx.len();
        let c = self.tape.gather_rows(c, (0..rows * m).map(|r| r / m).collect());
        let node_idx = (0..rows * m).map(|r| ctx.map[r / m] * m + r % m).collect();
        let per_node = self.tape.gather_rows(per_node, node_idx);
        let z = self.tape.add(c, per_node);
        let z = self.tape.relu(z);
        let out = self.linear(z, ids.out_w, Some(ids.out_b));
        Ok(self.tape.reshape(out, rows, m))
    }
}

fn block_size(blocks: &[&ProblemInstance]) -> Result<usize> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Contract("no instances to encode".into()))?;
    let m = first.num_nodes();
    if blocks.iter().any(|b| b.num_nodes() != m || b.kind() != first.kind()) {
        return Err(Error::Contract("instances in a batch must share kind and size".into()));
    }
    Ok(m)
}

/// Policy encoder outputs reused across decoding steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderCache {
    /// Node embeddings, `K·m × d`.
    pub nodes: Var,
    /// Mean embedding per block, `K × d`.
    pub graph: Var,
    table: Var,
    glimpse_k: Var,
    glimpse_v: Var,
    logit_k: Var,
    pub group: usize,
    pub blocks: usize,
}

/// Per-row decoder inputs for one construction step.
#[derive(Clone, Debug, Default)]
pub struct StepContext {
    /// Block (encoded instance) of each row.
    pub map: Vec<usize>,
    pub first: Vec<Option<usize>>,
    pub last: Vec<Option<usize>>,
    /// Remaining capacity as a fraction of the vehicle capacity (VRP only).
    pub capacity: Vec<f64>,
    /// Row-major `G × m` feasibility.
    pub mask: Vec<bool>,
}

impl StepContext {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Appends a row for `state`, encoded as block `block`. A finished VRP
    /// state is padded with a depot-only mask so it can ride along in a
    /// lockstep batch; a finished TSP state is rejected.
    pub fn push(&mut self, state: &ConstructionState, block: usize, allow_finished: bool) -> Result<()> {
        let m = state.instance().num_nodes();
        if state.is_terminal() {
            if !(allow_finished && state.kind().is_vrp()) {
                return Err(Error::Contract("terminal state has no actions".into()));
            }
            self.mask.push(true);
            self.mask.extend(std::iter::repeat_n(false, m - 1));
        } else {
            let start = self.mask.len();
            self.mask.resize(start + m, false);
            state.fill_mask(&mut self.mask[start..]);
        }
        self.map.push(block);
        self.first.push(state.first());
        self.last.push(state.current());
        self.capacity.push(state.remaining_capacity());
        Ok(())
    }

    pub fn from_states(states: &[&ConstructionState], map: &[usize]) -> Result<Self> {
        let mut ctx = Self::default();
        for (s, &b) in states.iter().zip(map) {
            ctx.push(s, b, false)?;
        }
        Ok(ctx)
    }

    pub fn row_mask(&self, row: usize) -> &[bool] {
        let m = self.mask.len() / self.len();
        &self.mask[row * m..][..m]
    }
}

/// Pooling weights of the value critic: uniform over nodes still to be
/// served (plus the depot for VRP), or over all nodes once none remain.
pub(crate) fn critic_weights(state: &ConstructionState) -> Vec<f64> {
    let m = state.instance().num_nodes();
    let vrp = state.kind().is_vrp();
    let open: Vec<bool> = (0..m)
        .map(|j| {
            if vrp {
                j == 0 || state.remaining_demand_units()[j] > 0
            } else {
                !state.visited()[j]
            }
        })
        .collect();
    let count = open.iter().filter(|&&o| o).count();
    if count == 0 || (vrp && count == 1) {
        vec![1.0 / m as f64; m]
    } else {
        open.iter().map(|&o| if o { 1.0 / count as f64 } else { 0.0 }).collect()
    }
}

/// Node embeddings (`m × d`) and graph embedding of one instance under the
/// policy encoder, with running normalization statistics.
pub fn encode(model: &Model, instance: &ProblemInstance) -> Result<(Matrix, Vec<f64>)> {
    check_kind(model, instance)?;
    let mut g = Graph::inference(model, BnMode::Running);
    let cache = g.policy_encode(&[instance])?;
    Ok((g.tape.value(cache.nodes).clone(), g.tape.value(cache.graph).row(0).to_vec()))
}

/// Log-probabilities over all nodes of the next action from `state`;
/// infeasible entries are `-inf`.
pub fn decode_step(model: &Model, state: &ConstructionState) -> Result<Vec<f64>> {
    check_kind(model, state.instance())?;
    let mut g = Graph::inference(model, BnMode::Running);
    let cache = g.policy_encode(&[state.instance()])?;
    let ctx = StepContext::from_states(&[state], &[0])?;
    let lp = g.policy_step(&cache, &ctx);
    Ok(g.tape.value(lp).row(0).to_vec())
}

/// Value-critic estimate of the return from `state`.
pub fn critic_value(model: &Model, state: &ConstructionState) -> Result<f64> {
    check_kind(model, state.instance())?;
    let mut g = Graph::inference(model, BnMode::Running);
    let cache = g.policy_encode(&[state.instance()])?;
    let v = g.critic(cache.nodes, cache.group, critic_weights(state));
    Ok(g.tape.scalar(v))
}

/// Action values of the feasible actions of `state`, in increasing node
/// order.
pub fn q_values(model: &Model, state: &ConstructionState, which: QNet) -> Result<Vec<f64>> {
    check_kind(model, state.instance())?;
    let mut g = Graph::inference(model, BnMode::Running);
    let ctx = StepContext::from_states(&[state], &[0])?;
    let q = g.q_all(which, &[state.instance()], &ctx)?;
    let row = g.tape.value(q).row(0).to_vec();
    Ok(row
        .into_iter()
        .zip(ctx.row_mask(0))
        .filter_map(|(v, &ok)| ok.then_some(v))
        .collect())
}

fn check_kind(model: &Model, instance: &ProblemInstance) -> Result<()> {
    if model.kind() != instance.kind() {
        return Err(Error::Contract(format!(
            "model built for {} cannot process a {} instance",
            model.kind(),
            instance.kind()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::routing::{generate_instance, Point, ProblemKind};
    use std::sync::Arc;

    fn small() -> NetConfig {
        NetConfig {
            embed_dim: 16,
            encoder_layers: 2,
            heads: 4,
            ff_dim: 32,
            critic_layers: 1,
            critic_hidden: 16,
            ..NetConfig::default()
        }
    }

    fn perturb_running_stats(model: &mut Model, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..model.params().len())
            .filter(|&i| !model.params().get(i).trainable)
            .collect();
        for id in ids {
            let p = model.params_mut().get_mut(id);
            let is_var = p.name.ends_with("running_var");
            p.value.mapv_inplace(|_| {
                if is_var {
                    rng.random_range(0.5..2.0)
                } else {
                    rng.random_range(-0.5..0.5)
                }
            });
        }
    }

    #[test]
    fn default_shapes() {
        let model = Model::new(ProblemKind::Tsp, NetConfig::default(), 1, 0.03).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 20, 4).unwrap();
        let (h, g) = encode(&model, &inst).unwrap();
        assert_eq!(h.dim(), (20, 128));
        assert_eq!(g.len(), 128);
    }

    #[test]
    fn permutation_equivariance() {
        for kind in ProblemKind::ALL {
            let mut model = Model::new(kind, small(), 9, 0.03).unwrap();
            perturb_running_stats(&mut model, 2);
            let inst = generate_instance(kind, 8, 11).unwrap();
            // Reverse the order of the non-depot nodes.
            let m = inst.num_nodes();
            let offset = usize::from(kind.is_vrp());
            let perm: Vec<usize> = (0..offset).chain((offset..m).rev()).collect();
            let permuted = match kind {
                ProblemKind::Tsp => ProblemInstance::tsp(perm.iter().map(|&i| inst.coords()[i]).collect(), 0).unwrap(),
                _ => ProblemInstance::vrp(
                    kind,
                    inst.coords()[0],
                    perm[1..].iter().map(|&i| inst.coords()[i]).collect(),
                    perm[1..].iter().map(|&i| inst.demand_units()[i]).collect(),
                    inst.capacity_raw(),
                    0,
                )
                .unwrap(),
            };
            let (h, g) = encode(&model, &inst).unwrap();
            let (hp, gp) = encode(&model, &permuted).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..h.ncols() {
                    let (a, b) = (h[[old, c]], hp[[new, c]]);
                    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{kind}: node {old} col {c}");
                }
            }
            for (a, b) in g.iter().zip(&gp) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn identical_nodes_identical_embeddings() {
        let mut model = Model::new(ProblemKind::Cvrp, small(), 5, 0.03).unwrap();
        perturb_running_stats(&mut model, 3);
        let p = Point { x: 0.3, y: 0.7 };
        let inst = ProblemInstance::vrp(
            ProblemKind::Cvrp,
            Point { x: 0.5, y: 0.5 },
            vec![p, Point { x: 0.1, y: 0.9 }, p],
            vec![4, 2, 4],
            30,
            0,
        )
        .unwrap();
        let (h, _) = encode(&model, &inst).unwrap();
        for c in 0..h.ncols() {
            assert!((h[[1, c]] - h[[3, c]]).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_distribution_properties() {
        for kind in ProblemKind::ALL {
            let model = Model::new(kind, small(), 2, 0.03).unwrap();
            let inst = Arc::new(generate_instance(kind, 9, 1).unwrap());
            let mut state = ConstructionState::reset(inst);
            while !state.is_terminal() {
                let lp = decode_step(&model, &state).unwrap();
                let mask = state.feasible_mask().unwrap();
                let total: f64 = lp.iter().zip(&mask).filter(|(_, &m)| m).map(|(l, _)| l.exp()).sum();
                assert!((total - 1.0).abs() < 1e-6);
                for (l, &m) in lp.iter().zip(&mask) {
                    if m {
                        assert!(l.is_finite() && *l <= 0.0);
                    } else {
                        assert_eq!(*l, f64::NEG_INFINITY);
                    }
                }
                if state.num_feasible() == 1 {
                    let j = mask.iter().position(|&m| m).unwrap();
                    assert_eq!(lp[j], 0.0);
                }
                assert_eq!(lp, decode_step(&model, &state).unwrap());
                let best = (0..lp.len()).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap();
                state.apply(best).unwrap();
            }
        }
    }

    #[test]
    fn logits_bounded_by_clip() {
        let cfg = NetConfig { clip_c: 2.0, ..small() };
        let model = Model::new(ProblemKind::Tsp, cfg, 2, 0.03).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 12, 1).unwrap();
        let mut g = Graph::inference(&model, BnMode::Running);
        let cache = g.policy_encode(&[&inst]).unwrap();
        let state = ConstructionState::reset(Arc::new(inst.clone()));
        let ctx = StepContext::from_states(&[&state], &[0]).unwrap();
        let lp = g.policy_step(&cache, &ctx);
        // Log-softmax differences equal logit differences, so the spread of
        // log-probs is bounded by 2·clip.
        let row = g.tape.value(lp).row(0).to_vec();
        let (lo, hi) = row.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo <= 4.0 + 1e-12);
    }

    #[test]
    fn terminal_state_rejected() {
        let model = Model::new(ProblemKind::Tsp, small(), 2, 0.03).unwrap();
        let inst = Arc::new(generate_instance(ProblemKind::Tsp, 3, 1).unwrap());
        let state = ConstructionState::from_prefix(inst, &[0, 1, 2]).unwrap();
        assert!(matches!(decode_step(&model, &state), Err(Error::Contract(_))));
        assert!(matches!(q_values(&model, &state, QNet::Online1), Err(Error::Contract(_))));
    }

    #[test]
    fn critic_finite_and_parameter_dependent() {
        use rand::{Rng, SeedableRng};
        let mut model = Model::new(ProblemKind::Cvrp, small(), 2, 0.03).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for i in 0..1000u64 {
            let inst = Arc::new(generate_instance(ProblemKind::Cvrp, 5, i).unwrap());
            let mut state = ConstructionState::reset(inst);
            let steps = rng.random_range(0..4);
            for _ in 0..steps {
                if state.is_terminal() {
                    break;
                }
                let mask = state.feasible_mask().unwrap();
                let opts: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
                state.apply(opts[rng.random_range(0..opts.len())]).unwrap();
            }
            assert!(critic_value(&model, &state).unwrap().is_finite());
        }
        let state = ConstructionState::reset(Arc::new(generate_instance(ProblemKind::Cvrp, 5, 0).unwrap()));
        let before = critic_value(&model, &state).unwrap();
        for id in model.params().group_ids(Group::Critic) {
            if model.params().get(id).trainable {
                model.params_mut().get_mut(id).value *= 2.0;
            }
        }
        assert_ne!(before, critic_value(&model, &state).unwrap());
    }

    #[test]
    fn q_values_shape_and_copies() {
        for kind in ProblemKind::ALL {
            let model = Model::new(kind, small(), 4, 0.03).unwrap();
            let inst = Arc::new(generate_instance(kind, 7, 3).unwrap());
            let mut state = ConstructionState::reset(inst);
            while !state.is_terminal() {
                let q1 = q_values(&model, &state, QNet::Online1).unwrap();
                assert_eq!(q1.len(), state.num_feasible());
                assert_eq!(q1, q_values(&model, &state, QNet::Target1).unwrap());
                assert_eq!(
                    q_values(&model, &state, QNet::Online2).unwrap(),
                    q_values(&model, &state, QNet::Target2).unwrap()
                );
                assert_ne!(q1, q_values(&model, &state, QNet::Online2).unwrap());
                let j = state.feasible_mask().unwrap().iter().position(|&m| m).unwrap();
                state.apply(j).unwrap();
            }
        }
    }

    #[test]
    fn batched_decoding_matches_single() {
        let model = Model::new(ProblemKind::Sdvrp, small(), 4, 0.03).unwrap();
        let a = Arc::new(generate_instance(ProblemKind::Sdvrp, 6, 1).unwrap());
        let b = Arc::new(generate_instance(ProblemKind::Sdvrp, 6, 2).unwrap());
        let sa = ConstructionState::from_prefix(a.clone(), &[2, 0]).unwrap();
        let sb = ConstructionState::from_prefix(b.clone(), &[4]).unwrap();
        let mut g = Graph::inference(&model, BnMode::Running);
        let cache = g.policy_encode(&[a.as_ref(), b.as_ref()]).unwrap();
        let ctx = StepContext::from_states(&[&sa, &sb, &sa], &[0, 1, 0]).unwrap();
        let lp = g.policy_step(&cache, &ctx);
        let lp = g.tape.value(lp).clone();
        let rows = [decode_step(&model, &sa).unwrap(), decode_step(&model, &sb).unwrap()];
        for (r, want) in [&rows[0], &rows[1], &rows[0]].iter().enumerate() {
            for (x, y) in lp.row(r).iter().zip(want.iter()) {
                assert!(x == y || (x - y).abs() < 1e-12);
            }
        }
    }
}
