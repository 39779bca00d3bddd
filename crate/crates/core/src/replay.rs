//! Bounded FIFO store of transitions with uniform sampling.
//!
//! A transition refers to its episode by shared pointer and to its state by
//! prefix length, so the per-transition cost is independent of the number of
//! stored states.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::env::ConstructionState;
use crate::error::{Error, Result};
use crate::routing::ProblemInstance;

pub const DEFAULT_CAPACITY: usize = 1_000_000;

/// A completed episode: the instance and the actions taken.
#[derive(Debug, PartialEq)]
pub struct EpisodeRecord {
    pub instance: Arc<ProblemInstance>,
    pub actions: Vec<usize>,
}

impl EpisodeRecord {
    /// State before the `step`-th action.
    pub fn state_at(&self, step: usize) -> Result<ConstructionState> {
        let prefix = self
            .actions
            .get(..step)
            .ok_or_else(|| Error::InvalidArgument(format!("step {step} beyond episode end")))?;
        ConstructionState::from_prefix(self.instance.clone(), prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub episode: Arc<EpisodeRecord>,
    /// Number of actions taken before this transition.
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub terminal: bool,
    pub mask: Vec<bool>,
    /// Feasibility at the successor state; empty when terminal.
    pub next_mask: Vec<bool>,
}

impl Transition {
    pub fn state(&self) -> Result<ConstructionState> {
        self.episode.state_at(self.step)
    }

    pub fn next_state(&self) -> Result<ConstructionState> {
        self.episode.state_at(self.step + 1)
    }

    /// Splits a finished episode into its transitions.
    pub fn from_episode(episode: Arc<EpisodeRecord>, rewards: &[f64]) -> Result<Vec<Transition>> {
        if rewards.len() != episode.actions.len() {
            return Err(Error::InvalidArgument(format!(
                "{} rewards for {} actions",
                rewards.len(),
                episode.actions.len()
            )));
        }
        let mut state = ConstructionState::reset(episode.instance.clone());
        let mut mask = state.feasible_mask()?;
        let mut out = Vec::with_capacity(rewards.len());
        for (step, (&action, &reward)) in episode.actions.iter().zip(rewards).enumerate() {
            state.apply(action)?;
            let terminal = state.is_terminal();
            let next_mask = if terminal { Vec::new() } else { state.feasible_mask()? };
            out.push(Transition {
                episode: episode.clone(),
                step,
                action,
                reward,
                terminal,
                mask: std::mem::replace(&mut mask, next_mask.clone()),
                next_mask,
            });
        }
        if !state.is_terminal() {
            return Err(Error::InvalidArgument("episode is incomplete".into()));
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// `i`-th transition, oldest first.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.len() < batch || batch == 0 {
            return Err(Error::NotReady {
                len: self.items.len(),
                requested: batch,
            });
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{generate_instance, ProblemKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dummy(tag: usize) -> Transition {
        let instance = Arc::new(generate_instance(ProblemKind::Tsp, 3, 0).unwrap());
        Transition {
            episode: Arc::new(EpisodeRecord {
                instance,
                actions: vec![0, 1, 2],
            }),
            step: 0,
            action: tag,
            reward: -(tag as f64),
            terminal: false,
            mask: vec![true; 3],
            next_mask: vec![false, true, true],
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(5);
        for i in 0..6 {
            buf.push(dummy(i));
        }
        assert_eq!(buf.len(), 5);
        assert!((0..5).all(|i| buf.get(i).unwrap().action != 0));
        assert_eq!(buf.get(0).unwrap().action, 1);
        let mut small = ReplayBuffer::default();
        for i in 0..10 {
            small.push(dummy(i));
        }
        assert_eq!(small.len(), 10);
        assert_eq!(small.get(3), Some(&dummy(3)));
    }

    #[test]
    fn sampling_membership_and_determinism() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..70 {
            buf.push(dummy(i));
        }
        let a: Vec<usize> = buf
            .sample(64, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .iter()
            .map(|t| t.action)
            .collect();
        let b: Vec<usize> = buf
            .sample(64, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .iter()
            .map(|t| t.action)
            .collect();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x < 70));
        assert!(matches!(
            buf.sample(71, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::NotReady { len: 70, requested: 71 })
        ));
    }

    #[test]
    fn sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..10 {
            buf.push(dummy(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws / 10 {
            for t in buf.sample(10, &mut rng).unwrap() {
                counts[t.action] += 1;
            }
        }
        let p = 0.1;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn transitions_from_episode() {
        let instance = Arc::new(generate_instance(ProblemKind::Sdvrp, 4, 3).unwrap());
        let mut state = ConstructionState::reset(instance.clone());
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        while !state.is_terminal() {
            let mask = state.feasible_mask().unwrap();
            let a = (0..mask.len()).rev().find(|&j| mask[j]).unwrap();
            rewards.push(state.apply(a).unwrap());
            actions.push(a);
        }
        let ep = Arc::new(EpisodeRecord { instance, actions });
        let ts = Transition::from_episode(ep.clone(), &rewards).unwrap();
        assert_eq!(ts.len(), rewards.len());
        for t in &ts {
            let s = t.state().unwrap();
            assert_eq!(s.feasible_mask().unwrap(), t.mask);
            assert!(t.mask[t.action]);
            if t.terminal {
                assert!(t.next_mask.is_empty());
                assert!(t.next_state().unwrap().is_terminal());
            } else {
                assert_eq!(t.next_state().unwrap().feasible_mask().unwrap(), t.next_mask);
            }
        }
        assert!(ts.last().unwrap().terminal);
        assert!(Transition::from_episode(ep, &rewards[1..]).is_err());
    }
}
