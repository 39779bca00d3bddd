//! Lockstep construction of many solutions under the policy.

use std::sync::Arc;

use rand::Rng;

use crate::env::{max_episode_len, ConstructionState};
use crate::error::{Error, Result};
use crate::net::{DecoderCache, Graph, StepContext};
use crate::routing::ProblemInstance;
use crate::tape::Var;

/// How actions are chosen at each step.
pub enum ActionSource<'a, R: Rng> {
    /// Draw from the policy distribution.
    Sample(&'a mut R),
    /// Most probable feasible node; ties go to the lowest index.
    Greedy,
    /// Replay the given action sequences, one per row.
    Fixed(&'a [Vec<usize>]),
}

/// Output of [`rollout`]. Finished VRP rows ride along with depot-only masks;
/// those padding steps contribute nothing to any recorded quantity.
pub struct Rollout {
    pub states: Vec<ConstructionState>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    /// Feasible-action counts `|A_t|`, per row and step.
    pub feasible_counts: Vec<Vec<usize>>,
    /// Realized entropies of the step distributions, per row and step.
    pub step_entropy: Vec<Vec<f64>>,
    /// `G × 1` sum of log-probabilities of the chosen actions.
    pub log_prob: Var,
    /// `G × 1` sum of per-step entropies.
    pub entropy: Var,
    pub cache: DecoderCache,
}

impl Rollout {
    /// Undiscounted return of each row, `−length`.
    pub fn returns(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.returns().into_iter().map(|r| -r).collect()
    }
}

/// Rolls out one episode per row. `blocks` are encoded once; row `g`
/// decodes instance `blocks[map[g]]`.
pub fn rollout<R: Rng>(
    g: &mut Graph<'_>,
    blocks: &[Arc<ProblemInstance>],
    map: &[usize],
    mut source: ActionSource<'_, R>,
) -> Result<Rollout> {
    let refs: Vec<&ProblemInstance> = blocks.iter().map(|b| b.as_ref()).collect();
    let cache = g.policy_encode(&refs)?;
    let rows = map.len();
    if rows == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one row".into()));
    }
    if let ActionSource::Fixed(seqs) = &source {
        if seqs.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "{} action sequences for {rows} rows",
                seqs.len()
            )));
        }
    }
    let m = cache.group;
    let mut states: Vec<ConstructionState> = map.iter().map(|&b| ConstructionState::reset(blocks[b].clone())).collect();
    let mut actions = vec![Vec::new(); rows];
    let mut rewards = vec![Vec::new(); rows];
    let mut feasible_counts = vec![Vec::new(); rows];
    let mut step_entropy = vec![Vec::new(); rows];
    let mut log_prob: Option<Var> = None;
    let mut entropy: Option<Var> = None;
    let limit = blocks.iter().map(|b| max_episode_len(b)).max().unwrap_or(0);
    let mut step = 0;
    while states.iter().any(|s| !s.is_terminal()) {
        if step >= limit {
            return Err(Error::Contract(format!("episode exceeded {limit} steps")));
        }
        let mut ctx = StepContext::default();
        for (s, &b) in states.iter().zip(map) {
            ctx.push(s, b, true)?;
        }
        let lp = g.policy_step(&cache, &ctx);
        let ent = g.tape.row_entropy(lp, ctx.mask.clone());
        let chosen: Vec<usize> = {
            let lpv = g.tape.value(lp);
            (0..rows)
                .map(|r| {
                    if states[r].is_terminal() {
                        return Ok(0);
                    }
                    let row = lpv.row(r);
                    let mask = ctx.row_mask(r);
                    match &mut source {
                        ActionSource::Greedy => Ok(argmax(row.as_slice().unwrap(), mask)),
                        ActionSource::Sample(rng) => Ok(sample(row.as_slice().unwrap(), mask, rng)),
                        ActionSource::Fixed(seqs) => seqs[r].get(step).copied().ok_or_else(|| {
                            Error::InvalidArgument(format!("action sequence {r} ends before the episode"))
                        }),
                    }
                })
                .collect::<Result<_>>()?
        };
        let picked = g.tape.gather_cols(lp, chosen.clone());
        log_prob = Some(match log_prob {
            Some(acc) => g.tape.add(acc, picked),
            None => picked,
        });
        entropy = Some(match entropy {
            Some(acc) => g.tape.add(acc, ent),
            None => ent,
        });
        let ent_values = g.tape.value(ent).column(0).to_vec();
        for r in 0..rows {
            if states[r].is_terminal() {
                continue;
            }
            let a = chosen[r];
            feasible_counts[r].push(ctx.row_mask(r).iter().filter(|&&f| f).count());
            step_entropy[r].push(ent_values[r]);
            rewards[r].push(states[r].apply(a)?);
            actions[r].push(a);
        }
        step += 1;
        debug_assert_eq!(ctx.mask.len(), rows * m);
    }
    if let ActionSource::Fixed(seqs) = &source {
        if let Some(r) = (0..rows).find(|&r| seqs[r].len() != actions[r].len()) {
            return Err(Error::InvalidArgument(format!("action sequence {r} is longer than its episode")));
        }
    }
    Ok(Rollout {
        states,
        actions,
        rewards,
        feasible_counts,
        step_entropy,
        log_prob: log_prob.expect("at least one step"),
        entropy: entropy.expect("at least one step"),
        cache,
    })
}

/// Index of the largest feasible entry, lowest index on ties.
pub fn argmax(logp: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    for (j, (&v, &ok)) in logp.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.expect("at least one feasible action").0
}

/// Inverse-CDF draw from `exp(logp)` over the feasible entries.
pub fn sample<R: Rng + ?Sized>(logp: &[f64], mask: &[bool], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (j, (&v, &ok)) in logp.iter().zip(mask).enumerate() {
        if ok {
            acc += v.exp();
            last = Some(j);
            if u < acc {
                return j;
            }
        }
    }
    last.expect("at least one feasible action")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BnMode, Model, NetConfig};
    use crate::routing::{generate_instance, ProblemKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(kind: ProblemKind) -> Model {
        let cfg = NetConfig {
            embed_dim: 16,
            encoder_layers: 1,
            heads: 2,
            ff_dim: 16,
            critic_layers: 1,
            critic_hidden: 8,
            ..NetConfig::default()
        };
        Model::new(kind, cfg, 5, 0.03).unwrap()
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let lp = [-1.0, -0.5, -0.5, -3.0];
        assert_eq!(argmax(&lp, &[true; 4]), 1);
        assert_eq!(argmax(&lp, &[true, false, true, true]), 2);
    }

    #[test]
    fn sampling_frequencies_follow_distribution() {
        let p = [0.2f64, 0.0, 0.5, 0.3];
        let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        let mask = [true, false, true, true];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample(&lp, &mask, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        for j in [0, 2, 3] {
            let sd = (n as f64 * p[j] * (1.0 - p[j])).sqrt();
            assert!((counts[j] as f64 - n as f64 * p[j]).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn episodes_complete_and_rewards_match_lengths() {
        for kind in ProblemKind::ALL {
            let model = model(kind);
            let blocks: Vec<_> = (0..3).map(|i| Arc::new(generate_instance(kind, 7, i).unwrap())).collect();
            let map = [0, 1, 2, 0, 1, 2];
            let mut g = Graph::inference(&model, BnMode::Running);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let out = rollout(&mut g, &blocks, &map, ActionSource::Sample(&mut rng)).unwrap();
            for (r, s) in out.states.iter().enumerate() {
                assert!(s.is_terminal());
                let sol = s.solution().unwrap();
                crate::routing::validate_solution(&blocks[map[r]], &sol).unwrap();
                assert!((out.lengths()[r] - sol.length()).abs() < 1e-9);
                assert_eq!(out.actions[r].len(), out.step_entropy[r].len());
            }
            let lp = g.tape.value(out.log_prob);
            assert!(lp.iter().all(|v| v.is_finite() && *v <= 0.0));
        }
    }

    #[test]
    fn fixed_replay_reproduces_log_probs() {
        let kind = ProblemKind::Cvrp;
        let model = model(kind);
        let blocks: Vec<_> = (0..2).map(|i| Arc::new(generate_instance(kind, 6, i).unwrap())).collect();
        let map = [0, 1];
        let mut g = Graph::inference(&model, BnMode::Running);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let first = rollout(&mut g, &blocks, &map, ActionSource::Sample(&mut rng)).unwrap();
        let lp1 = g.tape.value(first.log_prob).clone();
        let mut g2 = Graph::inference(&model, BnMode::Running);
        let again = rollout::<ChaCha8Rng>(&mut g2, &blocks, &map, ActionSource::Fixed(&first.actions)).unwrap();
        assert_eq!(&lp1, g2.tape.value(again.log_prob));
        assert_eq!(first.rewards, again.rewards);

        let short = vec![first.actions[0][..2].to_vec(), first.actions[1].clone()];
        let mut g3 = Graph::inference(&model, BnMode::Running);
        assert!(rollout::<ChaCha8Rng>(&mut g3, &blocks, &map, ActionSource::Fixed(&short)).is_err());
    }

    #[test]
    fn greedy_is_deterministic() {
        let model = model(ProblemKind::Tsp);
        let blocks = vec![Arc::new(generate_instance(ProblemKind::Tsp, 9, 2).unwrap())];
        let run = || {
            let mut g = Graph::inference(&model, BnMode::Running);
            rollout::<ChaCha8Rng>(&mut g, &blocks, &[0], ActionSource::Greedy).unwrap().actions
        };
        assert_eq!(run(), run());
    }
}
