use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetConfig;
use crate::error::{Error, Result};
use crate::routing::ProblemKind;
use crate::tape::Matrix;

/// Ownership of a parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Policy,
    Critic,
    Q1,
    Q2,
    Q1Target,
    Q2Target,
    Temperature,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Policy => "policy",
            Group::Critic => "critic",
            Group::Q1 => "q1",
            Group::Q2 => "q2",
            Group::Q1Target => "q1_target",
            Group::Q2Target => "q2_target",
            Group::Temperature => "temperature",
        }
    }
}

/// Selects one of the four action-value networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QNet {
    Online1,
    Online2,
    Target1,
    Target2,
}

impl QNet {
    pub const ALL: [QNet; 4] = [QNet::Online1, QNet::Online2, QNet::Target1, QNet::Target2];

    pub fn group(self) -> Group {
        match self {
            QNet::Online1 => Group::Q1,
            QNet::Online2 => Group::Q2,
            QNet::Target1 => Group::Q1Target,
            QNet::Target2 => Group::Q2Target,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// Declared dimensions (rank 0 for scalars, rank 1 for vectors).
    pub dims: Vec<usize>,
    pub group: Group,
    /// Running normalization statistics are stored but never optimized.
    pub trainable: bool,
    pub value: Matrix,
}

/// Named parameter arrays for every network of the agent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl ParameterSet {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Ids of a group in declaration order.
    pub fn group_ids(&self, group: Group) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].group == group).collect()
    }

    pub fn trainable_ids(&self, group: Group) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].group == group && self.params[i].trainable)
            .collect()
    }

    pub fn num_scalars(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group && p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// `target ← η·online + (1−η)·target` entrywise, normalization statistics
    /// included.
    pub fn blend_group(&mut self, online: Group, target: Group, eta: f64) -> Result<()> {
        let src = self.group_ids(online);
        let dst = self.group_ids(target);
        if src.len() != dst.len() {
            return Err(Error::Contract(format!(
                "groups {online:?} and {target:?} hold {} and {} arrays",
                src.len(),
                dst.len()
            )));
        }
        for (&s, &d) in src.iter().zip(&dst) {
            if self.params[s].value.dim() != self.params[d].value.dim() {
                return Err(Error::Contract(format!(
                    "shape mismatch between {} and {}",
                    self.params[s].name, self.params[d].name
                )));
            }
        }
        for (&s, &d) in src.iter().zip(&dst) {
            let (lo, hi) = (s.min(d), s.max(d));
            let (a, b) = self.params.split_at_mut(hi);
            let (src_p, dst_p) = if s < d { (&a[lo], &mut b[0]) } else { (&b[0], &mut a[lo]) };
            if eta == 1.0 {
                dst_p.value.assign(&src_p.value);
            } else {
                dst_p.value.zip_mut_with(&src_p.value, |t, &o| *t = eta * o + (1.0 - eta) * *t);
            }
        }
        Ok(())
    }

    fn push(&mut self, name: String, dims: Vec<usize>, group: Group, trainable: bool, value: Matrix) -> usize {
        self.params.push(Param {
            name,
            dims,
            group,
            trainable,
            value,
        });
        self.params.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct NormIds {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm1: NormIds,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
    pub norm2: NormIds,
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub node_w: usize,
    pub node_b: usize,
    /// Separate depot projection for VRP kinds.
    pub depot: Option<(usize, usize)>,
    pub layers: Vec<LayerIds>,
}

#[derive(Clone, Debug)]
pub struct PolicyIds {
    pub encoder: EncoderIds,
    /// `2 × d` first/last placeholders (TSP only).
    pub placeholder: Option<usize>,
    pub context_w: usize,
    pub glimpse_k: usize,
    pub glimpse_v: usize,
    pub logit_k: usize,
    pub glimpse_out: usize,
}

#[derive(Clone, Debug)]
pub struct CriticIds {
    pub layers: Vec<LayerIds>,
    pub hidden_w: usize,
    pub hidden_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Debug)]
pub struct QIds {
    pub encoder: EncoderIds,
    pub placeholder: Option<usize>,
    pub context_w: usize,
    pub context_b: usize,
    pub node_w: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub policy: PolicyIds,
    pub critic: CriticIds,
    pub q: [QIds; 4],
    pub log_alpha: usize,
}

impl Layout {
    pub fn q(&self, which: QNet) -> &QIds {
        &self.q[which.index()]
    }
}

struct Builder<'a> {
    params: ParameterSet,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// Uniform in ±1/√fan_in.
    fn uniform(&mut self, name: String, dims: Vec<usize>, group: Group, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let (r, c) = shape2(&dims);
        let value = Array2::from_shape_fn((r, c), |_| self.rng.random_range(-bound..bound));
        self.params.push(name, dims, group, true, value)
    }

    fn fill(&mut self, name: String, dims: Vec<usize>, group: Group, trainable: bool, v: f64) -> usize {
        let (r, c) = shape2(&dims);
        self.params.push(name, dims, group, trainable, Array2::from_elem((r, c), v))
    }

    fn linear(&mut self, prefix: &str, group: Group, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.uniform(format!("{prefix}.weight"), vec![fan_in, fan_out], group, fan_in);
        let b = self.uniform(format!("{prefix}.bias"), vec![fan_out], group, fan_in);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, group: Group, d: usize) -> NormIds {
        NormIds {
            gamma: self.fill(format!("{prefix}.gamma"), vec![d], group, true, 1.0),
            beta: self.fill(format!("{prefix}.beta"), vec![d], group, true, 0.0),
            running_mean: self.fill(format!("{prefix}.running_mean"), vec![d], group, false, 0.0),
            running_var: self.fill(format!("{prefix}.running_var"), vec![d], group, false, 1.0),
        }
    }

    fn layer(&mut self, prefix: &str, group: Group, cfg: &NetConfig) -> LayerIds {
        let d = cfg.embed_dim;
        let wq = self.uniform(format!("{prefix}.attn.wq"), vec![d, d], group, d);
        let wk = self.uniform(format!("{prefix}.attn.wk"), vec![d, d], group, d);
        let wv = self.uniform(format!("{prefix}.attn.wv"), vec![d, d], group, d);
        let wo = self.uniform(format!("{prefix}.attn.wo"), vec![d, d], group, d);
        let norm1 = self.norm(&format!("{prefix}.norm1"), group, d);
        let (ff_w1, ff_b1) = self.linear(&format!("{prefix}.ff1"), group, d, cfg.ff_dim);
        let (ff_w2, ff_b2) = self.linear(&format!("{prefix}.ff2"), group, cfg.ff_dim, d);
        let norm2 = self.norm(&format!("{prefix}.norm2"), group, d);
        LayerIds {
            wq,
            wk,
            wv,
            wo,
            norm1,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
            norm2,
        }
    }

    fn encoder(&mut self, prefix: &str, group: Group, kind: ProblemKind, cfg: &NetConfig, layers: usize) -> EncoderIds {
        let d = cfg.embed_dim;
        let features = if kind.is_vrp() { 3 } else { 2 };
        let (node_w, node_b) = self.linear(&format!("{prefix}.init_embed"), group, features, d);
        let depot = kind
            .is_vrp()
            .then(|| self.linear(&format!("{prefix}.init_embed_depot"), group, 2, d));
        let layers = (0..layers)
            .map(|i| self.layer(&format!("{prefix}.layers.{i}"), group, cfg))
            .collect();
        EncoderIds {
            node_w,
            node_b,
            depot,
            layers,
        }
    }

    fn context_width(kind: ProblemKind, d: usize) -> usize {
        if kind.is_vrp() {
            2 * d + 1
        } else {
            3 * d
        }
    }

    fn q_net(&mut self, group: Group, kind: ProblemKind, cfg: &NetConfig) -> QIds {
        let p = group.prefix();
        let d = cfg.embed_dim;
        let encoder = self.encoder(&format!("{p}.encoder"), group, kind, cfg, cfg.critic_layers);
        let placeholder = (!kind.is_vrp()).then(|| self.uniform(format!("{p}.placeholder"), vec![2, d], group, d));
        let (context_w, context_b) = self.linear(&format!("{p}.context"), group, Self::context_width(kind, d), d);
        let node_w = self.uniform(format!("{p}.node.weight"), vec![d, d], group, d);
        let (out_w, out_b) = self.linear(&format!("{p}.out"), group, d, 1);
        QIds {
            encoder,
            placeholder,
            context_w,
            context_b,
            node_w,
            out_w,
            out_b,
        }
    }
}

fn shape2(dims: &[usize]) -> (usize, usize) {
    match dims {
        [] => (1, 1),
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => unreachable!("parameters are at most rank 2"),
    }
}

/// The policy, value critic, twin action-value networks with their targets,
/// and the log-temperature.
#[derive(Clone, Debug)]
pub struct Model {
    kind: ProblemKind,
    config: NetConfig,
    params: ParameterSet,
    layout: Layout,
}

impl Model {
    /// Fresh parameters. Target networks start as exact copies of the online
    /// action-value networks.
    pub fn new(kind: ProblemKind, config: NetConfig, seed: u64, alpha: f64) -> Result<Self> {
        config.validate()?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {alpha}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParameterSet::default(),
            rng: &mut rng,
        };
        let d = config.embed_dim;
        let pg = Group::Policy;
        let encoder = b.encoder("policy.encoder", pg, kind, &config, config.encoder_layers);
        let placeholder = (!kind.is_vrp()).then(|| b.uniform("policy.placeholder".into(), vec![2, d], pg, d));
        let context_w = b.uniform(
            "policy.context.weight".into(),
            vec![Builder::context_width(kind, d), d],
            pg,
            Builder::context_width(kind, d),
        );
        let glimpse_k = b.uniform("policy.glimpse_key.weight".into(), vec![d, d], pg, d);
        let glimpse_v = b.uniform("policy.glimpse_value.weight".into(), vec![d, d], pg, d);
        let logit_k = b.uniform("policy.logit_key.weight".into(), vec![d, d], pg, d);
        let glimpse_out = b.uniform("policy.glimpse_out.weight".into(), vec![d, d], pg, d);
        let policy = PolicyIds {
            encoder,
            placeholder,
            context_w,
            glimpse_k,
            glimpse_v,
            logit_k,
            glimpse_out,
        };

        let cg = Group::Critic;
        let layers = (0..config.critic_layers)
            .map(|i| b.layer(&format!("critic.layers.{i}"), cg, &config))
            .collect();
        let (hidden_w, hidden_b) = b.linear("critic.hidden", cg, d, config.critic_hidden);
        let (out_w, out_b) = b.linear("critic.out", cg, config.critic_hidden, 1);
        let critic = CriticIds {
            layers,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
        };

        let q = QNet::ALL.map(|w| b.q_net(w.group(), kind, &config));
        let log_alpha = b.fill("log_alpha".into(), vec![], Group::Temperature, true, alpha.ln());
        let mut model = Self {
            kind,
            config,
            params: b.params,
            layout: Layout {
                policy,
                critic,
                q,
                log_alpha,
            },
        };
        model.hard_copy_targets()?;
        Ok(model)
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn log_alpha(&self) -> f64 {
        self.params.get(self.layout.log_alpha).value[[0, 0]]
    }

    pub fn set_log_alpha(&mut self, v: f64) {
        self.params.get_mut(self.layout.log_alpha).value[[0, 0]] = v;
    }

    /// Temperature `α = exp(log_alpha)`, positive by construction.
    pub fn alpha(&self) -> f64 {
        self.log_alpha().exp()
    }

    pub fn hard_copy_targets(&mut self) -> Result<()> {
        self.params.blend_group(Group::Q1, Group::Q1Target, 1.0)?;
        self.params.blend_group(Group::Q2, Group::Q2Target, 1.0)
    }

    /// Folds batch statistics into running averages:
    /// `running ← (1−momentum)·running + momentum·batch` (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[(usize, usize, crate::tape::BatchStats)], momentum: f64) {
        for (mean_id, var_id, s) in stats {
            let n = s.count as f64;
            let correction = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
            let rm = &mut self.params.get_mut(*mean_id).value;
            for (r, &b) in rm.iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let rv = &mut self.params.get_mut(*var_id).value;
            for (r, &b) in rv.iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b * correction;
            }
        }
    }

    /// Replaces every parameter value with those of `params`, which must
    /// carry the same names and shapes.
    pub fn load_params(&mut self, params: ParameterSet) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in self.params.params.iter().zip(&params.params) {
            if mine.name != theirs.name || mine.dims != theirs.dims {
                return Err(Error::Checkpoint(format!(
                    "array `{}` {:?} does not match expected `{}` {:?}",
                    theirs.name, theirs.dims, mine.name, mine.dims
                )));
            }
        }
        self.params = params;
        Ok(())
    }
}

impl ParameterSet {
    /// Rebuilds a set from checkpoint arrays, keeping group and trainability
    /// of `like`.
    pub(crate) fn with_values(like: &ParameterSet, arrays: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        if arrays.len() != like.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                like.len(),
                arrays.len()
            )));
        }
        let mut params = Vec::with_capacity(arrays.len());
        for (proto, (name, dims, data)) in like.params.iter().zip(arrays) {
            if proto.name != name || proto.dims != dims {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` {dims:?} does not match expected `{}` {:?}",
                    proto.name, proto.dims
                )));
            }
            let value = Array2::from_shape_vec(shape2(&dims), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.push(Param {
                name,
                dims,
                group: proto.group,
                trainable: proto.trainable,
                value,
            });
        }
        Ok(Self { params })
    }
}
