//! Sequential construction of routing solutions as a deterministic MDP.
//!
//! Every step appends one node to the partial solution and pays the negative
//! travelled distance, so the undiscounted episode return equals the negative
//! length of the finished solution. The TSP closing edge is charged on the
//! step that visits the last node.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::routing::{ProblemInstance, ProblemKind, Solution};

#[derive(Clone, Debug, PartialEq)]
pub struct ConstructionState {
    instance: Arc<ProblemInstance>,
    visited: Vec<bool>,
    sequence: Vec<usize>,
    /// Units delivered at each step (zero for depot and non-split kinds).
    delivered: Vec<u32>,
    current: Option<usize>,
    remaining_capacity: u32,
    remaining_demand: Vec<u32>,
    terminal: bool,
}

impl ConstructionState {
    /// Initial state: empty sequence, VRP vehicles at the depot with full
    /// capacity.
    pub fn reset(instance: Arc<ProblemInstance>) -> Self {
        let m = instance.num_nodes();
        let vrp = instance.kind().is_vrp();
        Self {
            visited: vec![false; m],
            sequence: Vec::with_capacity(if vrp { 2 * m } else { m }),
            delivered: Vec::new(),
            current: vrp.then_some(0),
            remaining_capacity: instance.capacity_raw(),
            remaining_demand: instance.demand_units().to_vec(),
            terminal: false,
            instance,
        }
    }

    /// Rebuilds the state reached by playing `actions` from the start.
    pub fn from_prefix(instance: Arc<ProblemInstance>, actions: &[usize]) -> Result<Self> {
        let mut state = Self::reset(instance);
        for &a in actions {
            state.apply(a)?;
        }
        Ok(state)
    }

    pub fn instance(&self) -> &Arc<ProblemInstance> {
        &self.instance
    }

    pub fn kind(&self) -> ProblemKind {
        self.instance.kind()
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    /// Actions taken so far.
    pub fn sequence(&self) -> &[usize] {
        &self.sequence
    }

    /// Step counter `t`.
    pub fn step_count(&self) -> usize {
        self.sequence.len()
    }

    /// Current location; `None` before the first TSP step.
    pub fn current(&self) -> Option<usize> {
        self.current
    }

    /// First node of a TSP tour.
    pub fn first(&self) -> Option<usize> {
        self.sequence.first().copied()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn remaining_capacity_units(&self) -> u32 {
        self.remaining_capacity
    }

    /// Remaining vehicle capacity as a fraction of the full capacity.
    pub fn remaining_capacity(&self) -> f64 {
        if self.instance.kind().is_vrp() {
            self.remaining_capacity as f64 / self.instance.capacity_raw() as f64
        } else {
            0.0
        }
    }

    pub fn remaining_demand_units(&self) -> &[u32] {
        &self.remaining_demand
    }

    pub fn remaining_demand(&self, node: usize) -> f64 {
        if self.instance.kind().is_vrp() {
            self.remaining_demand[node] as f64 / self.instance.capacity_raw() as f64
        } else {
            0.0
        }
    }

    fn depot_allowed(&self) -> bool {
        !self.sequence.is_empty() && self.current != Some(0)
    }

    /// Why `node` may not be chosen, or `None` when it is feasible.
    fn infeasibility(&self, node: usize) -> Option<&'static str> {
        if self.terminal {
            return Some("state is terminal");
        }
        if node >= self.visited.len() {
            return Some("node index out of range");
        }
        match self.instance.kind() {
            ProblemKind::Tsp => self.visited[node].then_some("node already visited"),
            ProblemKind::Cvrp | ProblemKind::Sdvrp if node == 0 => {
                if self.sequence.is_empty() {
                    Some("depot is masked at the first step")
                } else if self.current == Some(0) {
                    Some("depot visited at two subsequent steps")
                } else {
                    None
                }
            }
            ProblemKind::Cvrp => {
                if self.visited[node] {
                    Some("customer already served")
                } else if self.instance.demand_units()[node] > self.remaining_capacity {
                    Some("demand exceeds remaining capacity")
                } else {
                    None
                }
            }
            ProblemKind::Sdvrp => {
                if self.remaining_demand[node] == 0 {
                    Some("customer has no remaining demand")
                } else if self.remaining_capacity == 0 {
                    Some("vehicle has no remaining capacity")
                } else {
                    None
                }
            }
        }
    }

    /// Feasible actions; at least one entry is true on every non-terminal
    /// state.
    pub fn feasible_mask(&self) -> Result<Vec<bool>> {
        if self.terminal {
            return Err(Error::Contract("feasible_mask on a terminal state".into()));
        }
        let mut mask = vec![false; self.visited.len()];
        self.fill_mask(&mut mask);
        Ok(mask)
    }

    /// Writes the feasibility mask into `mask` without allocating.
    pub fn fill_mask(&self, mask: &mut [bool]) {
        debug_assert_eq!(mask.len(), self.visited.len());
        let cap = self.remaining_capacity;
        match self.instance.kind() {
            ProblemKind::Tsp => {
                for (m, &v) in mask.iter_mut().zip(&self.visited) {
                    *m = !v;
                }
            }
            ProblemKind::Cvrp => {
                let demand = self.instance.demand_units();
                mask[0] = self.depot_allowed();
                for i in 1..mask.len() {
                    mask[i] = !self.visited[i] && demand[i] <= cap;
                }
            }
            ProblemKind::Sdvrp => {
                mask[0] = self.depot_allowed();
                for i in 1..mask.len() {
                    mask[i] = self.remaining_demand[i] > 0 && cap > 0;
                }
            }
        }
        if self.terminal {
            mask.iter_mut().for_each(|m| *m = false);
        }
    }

    /// Number of feasible actions.
    pub fn num_feasible(&self) -> usize {
        if self.terminal {
            return 0;
        }
        (0..self.visited.len())
            .filter(|&i| self.infeasibility(i).is_none())
            .count()
    }

    /// Applies `action` in place and returns the reward.
    pub fn apply(&mut self, action: usize) -> Result<f64> {
        if let Some(reason) = self.infeasibility(action) {
            return Err(Error::InfeasibleAction {
                action,
                reason: reason.into(),
            });
        }
        let inst = Arc::clone(&self.instance);
        let mut reward = match self.current {
            Some(c) => -inst.dist(c, action),
            None => 0.0,
        };
        let mut units = 0;
        match inst.kind() {
            ProblemKind::Tsp => {
                self.visited[action] = true;
            }
            ProblemKind::Cvrp | ProblemKind::Sdvrp if action == 0 => {
                self.remaining_capacity = inst.capacity_raw();
            }
            ProblemKind::Cvrp => {
                let d = inst.demand_units()[action];
                self.visited[action] = true;
                self.remaining_demand[action] = 0;
                self.remaining_capacity -= d;
            }
            ProblemKind::Sdvrp => {
                units = self.remaining_demand[action].min(self.remaining_capacity);
                self.remaining_demand[action] -= units;
                self.remaining_capacity -= units;
                self.visited[action] = self.remaining_demand[action] == 0;
            }
        }
        self.sequence.push(action);
        if inst.kind() == ProblemKind::Sdvrp {
            self.delivered.push(units);
        }
        self.current = Some(action);
        self.terminal = match inst.kind() {
            ProblemKind::Tsp => self.visited.iter().all(|&v| v),
            _ => action == 0 && self.remaining_demand.iter().all(|&d| d == 0),
        };
        if self.terminal && inst.kind() == ProblemKind::Tsp {
            reward -= inst.dist(action, self.sequence[0]);
        }
        Ok(reward)
    }

    /// Deterministic transition: returns the successor state and reward.
    pub fn step(&self, action: usize) -> Result<(Self, f64)> {
        let mut next = self.clone();
        let reward = next.apply(action)?;
        Ok((next, reward))
    }

    /// The solution built by a finished episode.
    pub fn solution(&self) -> Result<Solution> {
        if !self.terminal {
            return Err(Error::Contract("solution requested before the episode ended".into()));
        }
        Ok(match self.instance.kind() {
            ProblemKind::Tsp => Solution::new(&self.instance, self.sequence.clone(), None),
            kind => {
                let mut visits = Vec::with_capacity(self.sequence.len() + 1);
                visits.push(0);
                visits.extend_from_slice(&self.sequence);
                let deliveries = (kind == ProblemKind::Sdvrp).then(|| {
                    let mut d = Vec::with_capacity(visits.len());
                    d.push(0);
                    d.extend_from_slice(&self.delivered);
                    d
                });
                Solution::new(&self.instance, visits, deliveries)
            }
        })
    }
}

/// Upper bound on the episode length for an instance.
pub fn max_episode_len(instance: &ProblemInstance) -> usize {
    match instance.kind() {
        ProblemKind::Tsp => instance.num_nodes(),
        ProblemKind::Cvrp => 2 * instance.size(),
        // each customer step either finishes a customer or empties the vehicle
        ProblemKind::Sdvrp => {
            let total: u32 = instance.demand_units().iter().sum();
            let routes = total.div_ceil(instance.capacity_raw()) as usize;
            2 * (instance.size() + routes)
        }
    }
}
