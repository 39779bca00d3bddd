//! Decoding strategies, reference solvers and evaluation reports.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::ConstructionState;
use crate::error::{Error, Result};
use crate::net::{BnMode, Graph, Model};
use crate::rollout::{rollout, ActionSource};
use crate::routing::{instance_seed, ProblemInstance, ProblemKind, Solution};

/// Largest TSP size solved exactly.
pub const EXACT_TSP_LIMIT: usize = 16;

/// Rows decoded together on one tape.
const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    /// Best of `k` sampled solutions.
    Sample(usize),
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Sample(_) => "sample",
        }
    }

    pub fn samples(self) -> usize {
        match self {
            DecodeMode::Greedy => 1,
            DecodeMode::Sample(k) => k,
        }
    }
}

fn check_kind(model: &Model, instance: &ProblemInstance) -> Result<()> {
    if model.kind() != instance.kind() {
        return Err(Error::InvalidArgument(format!(
            "model trained for {} cannot decode {} instances",
            model.kind(),
            instance.kind()
        )));
    }
    Ok(())
}

/// Greedy decoding of many instances at once; deterministic and independent
/// of how instances are grouped.
pub fn greedy_decode_batch(model: &Model, instances: &[Arc<ProblemInstance>]) -> Result<Vec<Solution>> {
    for inst in instances {
        check_kind(model, inst)?;
    }
    let chunks: Vec<Result<Vec<Solution>>> = instances
        .par_chunks(CHUNK_ROWS)
        .map(|chunk| {
            let mut sizes: Vec<usize> = chunk.iter().map(|i| i.num_nodes()).collect();
            sizes.dedup();
            if sizes.len() == 1 {
                let mut g = Graph::inference(model, BnMode::Running);
                let map: Vec<usize> = (0..chunk.len()).collect();
                let out = rollout::<ChaCha8Rng>(&mut g, chunk, &map, ActionSource::Greedy)?;
                out.states.iter().map(|s| s.solution()).collect()
            } else {
                chunk
                    .iter()
                    .map(|inst| {
                        let mut g = Graph::inference(model, BnMode::Running);
                        let out = rollout::<ChaCha8Rng>(&mut g, std::slice::from_ref(inst), &[0], ActionSource::Greedy)?;
                        out.states[0].solution()
                    })
                    .collect()
            }
        })
        .collect();
    let mut all = Vec::with_capacity(instances.len());
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

pub fn greedy_decode(model: &Model, instance: &ProblemInstance) -> Result<Solution> {
    Ok(greedy_decode_batch(model, &[Arc::new(instance.clone())])?.remove(0))
}

/// All `k` sampled solutions, in draw order.
pub fn sample_solutions(model: &Model, instance: &ProblemInstance, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Solution>> {
    check_kind(model, instance)?;
    if k == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let blocks = [Arc::new(instance.clone())];
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let rows = (k - out.len()).min(CHUNK_ROWS);
        let mut g = Graph::inference(model, BnMode::Running);
        let r = rollout(&mut g, &blocks, &vec![0; rows], ActionSource::Sample(rng))?;
        for s in &r.states {
            out.push(s.solution()?);
        }
    }
    Ok(out)
}

/// Shortest of `k` sampled solutions; the earliest draw wins ties.
pub fn sample_decode(model: &Model, instance: &ProblemInstance, k: usize, rng: &mut ChaCha8Rng) -> Result<Solution> {
    let all = sample_solutions(model, instance, k, rng)?;
    Ok(all
        .into_iter()
        .reduce(|best, s| if s.length() < best.length() { s } else { best })
        .expect("k ≥ 1"))
}

/// Best-of-`k` decoding of many instances; instance `i` draws from its own
/// stream derived from `(seed, i)`, so results do not depend on threading.
pub fn sample_decode_batch(model: &Model, instances: &[Arc<ProblemInstance>], k: usize, seed: u64) -> Result<Vec<Solution>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, i as u64));
            sample_decode(model, inst, k, &mut rng)
        })
        .collect()
}

/// Optimal TSP tour by dynamic programming over subsets.
pub fn exact_tsp(instance: &ProblemInstance) -> Result<Solution> {
    if instance.kind() != ProblemKind::Tsp {
        return Err(Error::InvalidArgument("exact solver handles TSP only".into()));
    }
    let n = instance.num_nodes();
    if n > EXACT_TSP_LIMIT {
        return Err(Error::UnsupportedSize(format!(
            "exact TSP supports up to {EXACT_TSP_LIMIT} nodes, got {n}"
        )));
    }
    if n <= 3 {
        return Ok(Solution::new(instance, (0..n).collect(), None));
    }
    // Node 0 is the fixed start; subsets range over nodes 1..n.
    let k = n - 1;
    let full = 1usize << k;
    let mut cost = vec![f64::INFINITY; full * k];
    let mut parent = vec![u8::MAX; full * k];
    for j in 0..k {
        cost[(1 << j) * k + j] = instance.dist(0, j + 1);
    }
    for set in 1..full {
        for last in 0..k {
            if set & (1 << last) == 0 {
                continue;
            }
            let here = cost[set * k + last];
            if !here.is_finite() {
                continue;
            }
            for next in 0..k {
                if set & (1 << next) != 0 {
                    continue;
                }
                let nset = set | (1 << next);
                let c = here + instance.dist(last + 1, next + 1);
                if c < cost[nset * k + next] {
                    cost[nset * k + next] = c;
                    parent[nset * k + next] = last as u8;
                }
            }
        }
    }
    let all = full - 1;
    let (mut last, _) = (0..k)
        .map(|j| (j, cost[all * k + j] + instance.dist(j + 1, 0)))
        .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
    let mut set = all;
    let mut rev = Vec::with_capacity(n);
    loop {
        rev.push(last + 1);
        let p = parent[set * k + last];
        set &= !(1 << last);
        if p == u8::MAX {
            break;
        }
        last = p as usize;
    }
    rev.push(0);
    rev.reverse();
    Ok(Solution::new(instance, rev, None))
}

/// Closest-feasible-node construction. For VRP kinds a customer is always
/// preferred over returning to the depot.
pub fn nearest_neighbor(instance: &ProblemInstance) -> Result<Solution> {
    let mut state = ConstructionState::reset(Arc::new(instance.clone()));
    if instance.kind() == ProblemKind::Tsp {
        state.apply(0)?;
    }
    while !state.is_terminal() {
        let mask = state.feasible_mask()?;
        let here = state.current().unwrap_or(0);
        let start = usize::from(instance.kind().is_vrp());
        let pick = (start..mask.len())
            .filter(|&j| mask[j])
            .min_by(|&a, &b| instance.dist(here, a).total_cmp(&instance.dist(here, b)))
            .unwrap_or(0);
        state.apply(pick)?;
    }
    state.solution()
}

/// Nearest neighbor that never splits a delivery. Always feasible for
/// split-delivery instances, where it serves as an upper-bound reference.
fn nearest_neighbor_unsplit(instance: &ProblemInstance) -> Result<Solution> {
    let cap = instance.capacity_raw();
    let demand = instance.demand_units();
    let m = instance.num_nodes();
    let mut served = vec![false; m];
    let mut visits = vec![0];
    let mut load = 0;
    let mut here = 0;
    while served[1..].iter().any(|s| !s) {
        let next = (1..m)
            .filter(|&j| !served[j] && load + demand[j] <= cap)
            .min_by(|&a, &b| instance.dist(here, a).total_cmp(&instance.dist(here, b)));
        match next {
            Some(j) => {
                served[j] = true;
                load += demand[j];
                visits.push(j);
                here = j;
            }
            None => {
                visits.push(0);
                load = 0;
                here = 0;
            }
        }
    }
    visits.push(0);
    let deliveries = (instance.kind() == ProblemKind::Sdvrp).then(|| visits.iter().map(|&v| demand[v]).collect());
    Ok(Solution::new(instance, visits, deliveries))
}

/// Best-improvement 2-opt until no move shortens the walk. Each VRP route is
/// improved separately with its depot endpoints fixed.
pub fn two_opt(instance: &ProblemInstance, solution: &Solution) -> Solution {
    let mut visits = solution.visits().to_vec();
    let mut deliveries = solution.delivery_units().map(|d| d.to_vec());
    if instance.kind() == ProblemKind::Tsp {
        // Treat the closing edge as part of the walk.
        visits.push(visits[0]);
        let hi = visits.len() - 1;
        improve_segment(instance, &mut visits, None, 0, hi);
        visits.pop();
    } else {
        let depots: Vec<usize> = (0..visits.len()).filter(|&i| visits[i] == 0).collect();
        for w in depots.windows(2) {
            improve_segment(instance, &mut visits, deliveries.as_deref_mut(), w[0], w[1]);
        }
    }
    Solution::new(instance, visits, deliveries)
}

/// 2-opt over `walk[lo..=hi]` keeping both endpoints in place.
fn improve_segment(instance: &ProblemInstance, walk: &mut [usize], mut extra: Option<&mut [u32]>, lo: usize, hi: usize) {
    const TOL: f64 = 1e-12;
    loop {
        let mut best = (TOL, 0, 0);
        for i in lo..hi.saturating_sub(1) {
            for j in i + 2..hi {
                let (a, b, c, d) = (walk[i], walk[i + 1], walk[j], walk[j + 1]);
                let delta = instance.dist(a, b) + instance.dist(c, d) - instance.dist(a, c) - instance.dist(b, d);
                if delta > best.0 {
                    best = (delta, i, j);
                }
            }
        }
        if best.0 <= TOL {
            return;
        }
        let (_, i, j) = best;
        walk[i + 1..=j].reverse();
        if let Some(e) = extra.as_deref_mut() {
            e[i + 1..=j].reverse();
        }
    }
}

/// Which solver produced a reference length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    Exact,
    Heuristic,
}

/// Exact for TSP up to [`EXACT_TSP_LIMIT`] nodes, otherwise nearest neighbor
/// followed by 2-opt (without split deliveries for SDVRP).
pub fn reference_solution(instance: &ProblemInstance) -> Result<(Solution, Reference)> {
    match instance.kind() {
        ProblemKind::Tsp if instance.num_nodes() <= EXACT_TSP_LIMIT => Ok((exact_tsp(instance)?, Reference::Exact)),
        ProblemKind::Tsp | ProblemKind::Cvrp => {
            let start = nearest_neighbor(instance)?;
            Ok((two_opt(instance, &start), Reference::Heuristic))
        }
        ProblemKind::Sdvrp => {
            let start = nearest_neighbor_unsplit(instance)?;
            Ok((two_opt(instance, &start), Reference::Heuristic))
        }
    }
}

/// `100·(pred/reference − 1)`.
pub fn optimality_gap(pred_len: f64, ref_len: f64) -> Result<f64> {
    if !(ref_len > 0.0) {
        return Err(Error::InvalidArgument(format!("reference length must be positive, got {ref_len}")));
    }
    Ok(100.0 * (pred_len / ref_len - 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub instance_id: usize,
    pub kind: ProblemKind,
    pub n: usize,
    pub pred_len: f64,
    pub ref_len: f64,
    pub gap_pct: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mode: DecodeMode,
    pub reference: Reference,
    pub mean_len: f64,
    pub mean_gap: f64,
    /// Decoding time only.
    pub wall_seconds: f64,
}

pub const REPORT_HEADER: &str = "instance_id,kind,n,pred_len,ref_len,gap_pct,decode_mode,samples";

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>, mode: DecodeMode, reference: Reference, wall_seconds: f64) -> Self {
        let count = rows.len().max(1) as f64;
        let mean_len = rows.iter().map(|r| r.pred_len).sum::<f64>() / count;
        let mean_gap = rows.iter().map(|r| r.gap_pct).sum::<f64>() / count;
        Self {
            rows,
            mode,
            reference,
            mean_len,
            mean_gap,
            wall_seconds,
        }
    }

    pub fn write_csv_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.instance_id,
                r.kind,
                r.n,
                r.pred_len,
                r.ref_len,
                r.gap_pct,
                self.mode.name(),
                self.mode.samples()
            )?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let label = match self.reference {
            Reference::Exact => "vs exact",
            Reference::Heuristic => "vs heuristic",
        };
        format!(
            "{} instances, {} decoding: mean length {:.4}, mean gap {:.2}% ({label}), {:.2} s",
            self.rows.len(),
            match self.mode {
                DecodeMode::Greedy => "greedy".to_string(),
                DecodeMode::Sample(k) => format!("best-of-{k}"),
            },
            self.mean_len,
            self.mean_gap,
            self.wall_seconds
        )
    }
}

/// Decodes every instance and compares it with its reference solution.
pub fn evaluate(model: &Model, instances: &[ProblemInstance], mode: DecodeMode, seed: u64) -> Result<EvalReport> {
    let shared: Vec<Arc<ProblemInstance>> = instances.iter().cloned().map(Arc::new).collect();
    let start = Instant::now();
    let solutions = match mode {
        DecodeMode::Greedy => greedy_decode_batch(model, &shared)?,
        DecodeMode::Sample(k) => sample_decode_batch(model, &shared, k, seed)?,
    };
    let wall_seconds = start.elapsed().as_secs_f64();
    let refs: Vec<(Solution, Reference)> = instances.par_iter().map(reference_solution).collect::<Result<_>>()?;
    let reference = if refs.iter().all(|(_, r)| *r == Reference::Exact) {
        Reference::Exact
    } else {
        Reference::Heuristic
    };
    let rows = instances
        .iter()
        .zip(&solutions)
        .zip(&refs)
        .enumerate()
        .map(|(i, ((inst, sol), (rs, _)))| {
            Ok(EvalRow {
                instance_id: i,
                kind: inst.kind(),
                n: inst.size(),
                pred_len: sol.length(),
                ref_len: rs.length(),
                gap_pct: optimality_gap(sol.length(), rs.length())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_rows(rows, mode, reference, wall_seconds))
}
