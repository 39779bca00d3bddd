//! Problem instances, solutions and the routing objective.
//!
//! Node indexing: for TSP the `m` nodes are `0..m`. For CVRP and SDVRP node 0
//! is the depot and customers are `1..=n`. Demands are kept as integer units
//! of the raw vehicle capacity, so normalized demand `i` is
//! `demand_units[i] / capacity_raw` and the normalized capacity is 1.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Tsp,
    Cvrp,
    Sdvrp,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 3] = [ProblemKind::Tsp, ProblemKind::Cvrp, ProblemKind::Sdvrp];

    pub fn is_vrp(self) -> bool {
        !matches!(self, ProblemKind::Tsp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Tsp => "tsp",
            ProblemKind::Cvrp => "cvrp",
            ProblemKind::Sdvrp => "sdvrp",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "cvrp" => Ok(ProblemKind::Cvrp),
            "sdvrp" => Ok(ProblemKind::Sdvrp),
            other => Err(Error::InvalidArgument(format!("unknown problem kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A routing problem on the unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemInstance {
    kind: ProblemKind,
    coords: Vec<Point>,
    demand_units: Vec<u32>,
    capacity_raw: u32,
    seed: u64,
}

impl ProblemInstance {
    pub fn tsp(coords: Vec<Point>, seed: u64) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "TSP needs at least 2 nodes, got {}",
                coords.len()
            )));
        }
        check_coords(&coords)?;
        Ok(Self {
            kind: ProblemKind::Tsp,
            coords,
            demand_units: Vec::new(),
            capacity_raw: 0,
            seed,
        })
    }

    /// Builds a CVRP or SDVRP instance. `customer_demands[i]` is the integer
    /// demand of customer `i + 1` in units of `capacity_raw`.
    pub fn vrp(
        kind: ProblemKind,
        depot: Point,
        customers: Vec<Point>,
        customer_demands: Vec<u32>,
        capacity_raw: u32,
        seed: u64,
    ) -> Result<Self> {
        if !kind.is_vrp() {
            return Err(Error::InvalidArgument("vrp() requires CVRP or SDVRP".into()));
        }
        if customers.is_empty() {
            return Err(Error::InvalidArgument("VRP needs at least one customer".into()));
        }
        if customers.len() != customer_demands.len() {
            return Err(Error::InvalidArgument(format!(
                "{} customers but {} demands",
                customers.len(),
                customer_demands.len()
            )));
        }
        if capacity_raw == 0 {
            return Err(Error::InvalidArgument("capacity must be positive".into()));
        }
        if let Some((i, d)) = customer_demands
            .iter()
            .enumerate()
            .find(|(_, &d)| d == 0 || d > capacity_raw)
        {
            return Err(Error::InvalidArgument(format!(
                "demand of customer {} is {d}/{capacity_raw}, must lie in (0, 1]",
                i + 1
            )));
        }
        let mut coords = Vec::with_capacity(customers.len() + 1);
        coords.push(depot);
        coords.extend(customers);
        check_coords(&coords)?;
        let mut demand_units = Vec::with_capacity(coords.len());
        demand_units.push(0);
        demand_units.extend(customer_demands);
        Ok(Self {
            kind,
            coords,
            demand_units,
            capacity_raw,
            seed,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    /// Total number of nodes, depot included.
    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Problem size: node count for TSP, customer count for VRP kinds.
    pub fn size(&self) -> usize {
        if self.kind.is_vrp() {
            self.coords.len() - 1
        } else {
            self.coords.len()
        }
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn depot(&self) -> Option<usize> {
        self.kind.is_vrp().then_some(0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw vehicle capacity (0 for TSP).
    pub fn capacity_raw(&self) -> u32 {
        self.capacity_raw
    }

    /// Normalized capacity: always 1 for VRP kinds.
    pub fn capacity(&self) -> Option<f64> {
        self.kind.is_vrp().then_some(1.0)
    }

    /// Demand units per node (depot first). Empty for TSP.
    pub fn demand_units(&self) -> &[u32] {
        &self.demand_units
    }

    /// Normalized demand of `node`; 0 for the depot and for TSP nodes.
    pub fn demand(&self, node: usize) -> f64 {
        if self.kind.is_vrp() {
            self.demand_units[node] as f64 / self.capacity_raw as f64
        } else {
            0.0
        }
    }

    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        self.coords[a].dist(&self.coords[b])
    }
}

fn check_coords(coords: &[Point]) -> Result<()> {
    for (i, p) in coords.iter().enumerate() {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(p.x) || !ok(p.y) {
            return Err(Error::InvalidArgument(format!(
                "coordinate of node {i} ({}, {}) lies outside the unit square",
                p.x, p.y
            )));
        }
    }
    Ok(())
}

/// An ordered visit sequence. VRP walks start and end at the depot.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    visits: Vec<usize>,
    /// Per-visit delivered units (SDVRP only).
    deliveries: Option<Vec<u32>>,
    length: f64,
}

impl Solution {
    /// Wraps a visit sequence without validating it. The cached length is the
    /// walk length (closing edge included for TSP), or NaN when an index is
    /// out of range.
    pub fn new(instance: &ProblemInstance, visits: Vec<usize>, deliveries: Option<Vec<u32>>) -> Self {
        let length = walk_length(instance, &visits);
        Self {
            visits,
            deliveries,
            length,
        }
    }

    pub fn visits(&self) -> &[usize] {
        &self.visits
    }

    pub fn delivery_units(&self) -> Option<&[u32]> {
        self.deliveries.as_deref()
    }

    /// Per-visit deliveries as fractions of the vehicle capacity.
    pub fn deliveries(&self, instance: &ProblemInstance) -> Option<Vec<f64>> {
        let cap = instance.capacity_raw() as f64;
        self.deliveries
            .as_ref()
            .map(|d| d.iter().map(|&u| u as f64 / cap).collect())
    }

    pub fn length(&self) -> f64 {
        self.length
    }
}

fn walk_length(instance: &ProblemInstance, visits: &[usize]) -> f64 {
    let m = instance.num_nodes();
    if visits.iter().any(|&v| v >= m) {
        return f64::NAN;
    }
    let mut total = visits.windows(2).map(|w| instance.dist(w[0], w[1])).sum::<f64>();
    if instance.kind() == ProblemKind::Tsp && visits.len() > 1 {
        total += instance.dist(visits[visits.len() - 1], visits[0]);
    }
    total
}

/// First constraint a solution breaks.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("empty visit sequence")]
    Empty,
    #[error("node {node} at position {position} is out of range")]
    NodeOutOfRange { position: usize, node: usize },
    #[error("node {node} repeated at position {position}")]
    NodeRepeated { position: usize, node: usize },
    #[error("node {node} never visited")]
    NodeMissing { node: usize },
    #[error("walk must start at the depot")]
    MustStartAtDepot,
    #[error("walk must end at the depot")]
    MustEndAtDepot,
    #[error("consecutive depot visits at position {position}")]
    ConsecutiveDepot { position: usize },
    #[error("capacity exceeded in segment {segment} (load {load})")]
    CapacityExceeded { segment: usize, load: f64 },
    #[error("deliveries given for {got} visits, expected {expected}")]
    DeliveryCount { expected: usize, got: usize },
    #[error("deliveries are only defined for SDVRP")]
    UnexpectedDeliveries,
    #[error("delivery at position {position} must be positive")]
    NonPositiveDelivery { position: usize },
    #[error("depot visit at position {position} delivers goods")]
    DepotDelivery { position: usize },
    #[error("customer {node} received {delivered}, demand is {demand}")]
    DemandMismatch { node: usize, delivered: f64, demand: f64 },
}

impl Violation {
    /// Position in the visit sequence, when the violation has one.
    pub fn position(&self) -> Option<usize> {
        match *self {
            Violation::NodeOutOfRange { position, .. }
            | Violation::NodeRepeated { position, .. }
            | Violation::ConsecutiveDepot { position }
            | Violation::NonPositiveDelivery { position }
            | Violation::DepotDelivery { position } => Some(position),
            _ => None,
        }
    }
}

/// Checks every solution invariant for `instance` and reports the first one
/// that fails.
pub fn validate_solution(instance: &ProblemInstance, solution: &Solution) -> Result<(), Violation> {
    let visits = solution.visits();
    let m = instance.num_nodes();
    if visits.is_empty() {
        return Err(Violation::Empty);
    }
    if let Some((position, &node)) = visits.iter().enumerate().find(|(_, &v)| v >= m) {
        return Err(Violation::NodeOutOfRange { position, node });
    }
    match instance.kind() {
        ProblemKind::Tsp => {
            if solution.deliveries.is_some() {
                return Err(Violation::UnexpectedDeliveries);
            }
            let mut seen = vec![false; m];
            for (position, &node) in visits.iter().enumerate() {
                if std::mem::replace(&mut seen[node], true) {
                    return Err(Violation::NodeRepeated { position, node });
                }
            }
            if let Some(node) = seen.iter().position(|s| !s) {
                return Err(Violation::NodeMissing { node });
            }
            Ok(())
        }
        ProblemKind::Cvrp => {
            if solution.deliveries.is_some() {
                return Err(Violation::UnexpectedDeliveries);
            }
            check_walk_shape(visits)?;
            let mut seen = vec![false; m];
            for (position, &node) in visits.iter().enumerate() {
                if node != 0 && std::mem::replace(&mut seen[node], true) {
                    return Err(Violation::NodeRepeated { position, node });
                }
            }
            if let Some(node) = (1..m).find(|&i| !seen[i]) {
                return Err(Violation::NodeMissing { node });
            }
            let units: Vec<u32> = visits.iter().map(|&v| instance.demand_units()[v]).collect();
            check_segments(instance, visits, &units)
        }
        ProblemKind::Sdvrp => {
            let Some(deliveries) = solution.deliveries.as_deref() else {
                return Err(Violation::DeliveryCount {
                    expected: visits.len(),
                    got: 0,
                });
            };
            if deliveries.len() != visits.len() {
                return Err(Violation::DeliveryCount {
                    expected: visits.len(),
                    got: deliveries.len(),
                });
            }
            check_walk_shape(visits)?;
            let mut delivered = vec![0u64; m];
            for (position, (&node, &units)) in visits.iter().zip(deliveries).enumerate() {
                if node == 0 {
                    if units != 0 {
                        return Err(Violation::DepotDelivery { position });
                    }
                } else if units == 0 {
                    return Err(Violation::NonPositiveDelivery { position });
                }
                delivered[node] += units as u64;
            }
            let cap = instance.capacity_raw() as f64;
            for node in 1..m {
                let demand = instance.demand_units()[node] as u64;
                if delivered[node] != demand {
                    return Err(Violation::DemandMismatch {
                        node,
                        delivered: delivered[node] as f64 / cap,
                        demand: demand as f64 / cap,
                    });
                }
            }
            check_segments(instance, visits, deliveries)
        }
    }
}

fn check_walk_shape(visits: &[usize]) -> Result<(), Violation> {
    if visits[0] != 0 {
        return Err(Violation::MustStartAtDepot);
    }
    if visits.len() < 2 || *visits.last().unwrap() != 0 {
        return Err(Violation::MustEndAtDepot);
    }
    if let Some(i) = visits.windows(2).position(|w| w[0] == 0 && w[1] == 0) {
        return Err(Violation::ConsecutiveDepot { position: i + 1 });
    }
    Ok(())
}

fn check_segments(instance: &ProblemInstance, visits: &[usize], units: &[u32]) -> Result<(), Violation> {
    let cap = instance.capacity_raw() as u64;
    let mut segment = 0;
    let mut load = 0u64;
    for (&node, &u) in visits.iter().zip(units).skip(1) {
        if node == 0 {
            segment += 1;
            load = 0;
            continue;
        }
        load += u as u64;
        if load > cap {
            return Err(Violation::CapacityExceeded {
                segment,
                load: load as f64 / cap as f64,
            });
        }
    }
    Ok(())
}

/// Length of a valid solution: the closed tour for TSP, the depot-anchored
/// walk for VRP kinds.
pub fn tour_length(instance: &ProblemInstance, solution: &Solution) -> Result<f64> {
    validate_solution(instance, solution)?;
    Ok(solution.length())
}

/// Raw vehicle capacity for a problem with `n` customers.
pub fn capacity_for_size(n: usize) -> u32 {
    match n {
        0..=20 => 30,
        21..=50 => 40,
        _ => 50,
    }
}

/// Samples an instance with `n` nodes (TSP) or `n` customers (VRP kinds).
/// Identical arguments give bit-identical instances.
pub fn generate_instance(kind: ProblemKind, n: usize, seed: u64) -> Result<ProblemInstance> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("n must be at least 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| Point::new(rng.random::<f64>(), rng.random::<f64>());
    match kind {
        ProblemKind::Tsp => {
            let coords = (0..n).map(|_| point(&mut rng)).collect();
            ProblemInstance::tsp(coords, seed)
        }
        ProblemKind::Cvrp | ProblemKind::Sdvrp => {
            let depot = point(&mut rng);
            let customers = (0..n).map(|_| point(&mut rng)).collect();
            let demands = (0..n).map(|_| rng.random_range(1..=9u32)).collect();
            ProblemInstance::vrp(kind, depot, customers, demands, capacity_for_size(n), seed)
        }
    }
}

/// Derives the seed of the `index`-th instance of a data set seeded by `seed`.
pub fn instance_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` instances whose seeds derive from `seed`.
pub fn generate_dataset(kind: ProblemKind, n: usize, count: usize, seed: u64) -> Result<Vec<ProblemInstance>> {
    (0..count)
        .map(|i| generate_instance(kind, n, instance_seed(seed, i as u64)))
        .collect()
}

// ---------------------------------------------------------------------------
// Line-delimited instance files

fn fmt_num(out: &mut String, v: f64) {
    use std::fmt::Write as _;
    // 17 significant digits round-trip every f64
    write!(out, "{v:.16e}").unwrap();
}

fn fmt_list(out: &mut String, values: impl IntoIterator<Item = f64>) {
    out.push('[');
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_num(out, v);
    }
    out.push(']');
}

/// Serializes one instance as a single JSON line (no trailing newline).
pub fn instance_to_line(instance: &ProblemInstance) -> String {
    let mut s = String::with_capacity(64 + instance.num_nodes() * 60);
    let offset = usize::from(instance.kind().is_vrp());
    let customers = &instance.coords()[offset..];
    s.push_str(&format!(
        "{{\"kind\":\"{}\",\"n\":{},\"seed\":{},\"coords\":",
        instance.kind(),
        instance.size(),
        instance.seed()
    ));
    fmt_list(&mut s, customers.iter().flat_map(|p| [p.x, p.y]));
    if instance.kind().is_vrp() {
        let d = instance.coords()[0];
        s.push_str(",\"depot_coord\":");
        fmt_list(&mut s, [d.x, d.y]);
        s.push_str(",\"demands\":");
        fmt_list(&mut s, (1..instance.num_nodes()).map(|i| instance.demand(i)));
        s.push_str(&format!(",\"capacity_raw\":{}", instance.capacity_raw()));
    }
    s.push('}');
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    kind: String,
    n: usize,
    seed: u64,
    coords: Vec<f64>,
    depot_coord: Option<[f64; 2]>,
    demands: Option<Vec<f64>>,
    capacity_raw: Option<u32>,
}

impl InstanceRecord {
    fn into_instance(self) -> std::result::Result<ProblemInstance, String> {
        let kind: ProblemKind = self.kind.parse().map_err(|e: Error| e.to_string())?;
        if self.coords.len() != 2 * self.n {
            return Err(format!("expected {} coordinates, found {}", 2 * self.n, self.coords.len()));
        }
        let points: Vec<Point> = self.coords.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
        match kind {
            ProblemKind::Tsp => {
                if self.depot_coord.is_some() || self.demands.is_some() || self.capacity_raw.is_some() {
                    return Err("TSP instance carries VRP fields".into());
                }
                ProblemInstance::tsp(points, self.seed).map_err(|e| e.to_string())
            }
            _ => {
                let depot = self.depot_coord.ok_or("missing depot_coord")?;
                let demands = self.demands.ok_or("missing demands")?;
                let cap = self.capacity_raw.ok_or("missing capacity_raw")?;
                if demands.len() != self.n {
                    return Err(format!("expected {} demands, found {}", self.n, demands.len()));
                }
                let units = demands
                    .iter()
                    .map(|&d| {
                        let u = (d * cap as f64).round();
                        if (d * cap as f64 - u).abs() > 1e-6 || u < 1.0 || u > cap as f64 {
                            Err(format!("demand {d} is not a positive multiple of 1/{cap} within capacity"))
                        } else {
                            Ok(u as u32)
                        }
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                ProblemInstance::vrp(kind, Point::new(depot[0], depot[1]), points, units, cap, self.seed)
                    .map_err(|e| e.to_string())
            }
        }
    }
}

/// Parses one instance line.
pub fn instance_from_line(line: &str) -> std::result::Result<ProblemInstance, String> {
    let record: InstanceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    record.into_instance()
}

pub fn write_instances_to<W: Write>(mut out: W, instances: &[ProblemInstance]) -> std::io::Result<()> {
    for inst in instances {
        out.write_all(instance_to_line(inst).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_instances(path: impl AsRef<Path>, instances: &[ProblemInstance]) -> Result<()> {
    let file = File::create(path)?;
    write_instances_to(BufWriter::new(file), instances)?;
    Ok(())
}

/// Reads instances from line-delimited text; `origin` labels parse errors.
pub fn read_instances_from<R: Read>(input: R, origin: &Path) -> Result<Vec<ProblemInstance>> {
    let mut instances = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = instance_from_line(&line).map_err(|message| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        })?;
        instances.push(inst);
    }
    Ok(instances)
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<ProblemInstance>> {
    let path = path.as_ref();
    read_instances_from(File::open(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> ProblemInstance {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        ProblemInstance::tsp(pts.iter().map(|&(x, y)| Point::new(x, y)).collect(), 0).unwrap()
    }

    fn small_cvrp(demands: Vec<u32>, capacity: u32) -> ProblemInstance {
        let customers = (0..demands.len())
            .map(|i| Point::new(0.1 * (i + 1) as f64, 0.5))
            .collect();
        ProblemInstance::vrp(ProblemKind::Cvrp, Point::new(0.0, 0.0), customers, demands, capacity, 0).unwrap()
    }

    #[test]
    fn unit_square_perimeter() {
        let inst = square();
        let sol = Solution::new(&inst, vec![0, 1, 2, 3], None);
        assert_eq!(tour_length(&inst, &sol).unwrap(), 4.0);
    }

    #[test]
    fn two_node_round_trip() {
        let inst = ProblemInstance::tsp(vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0)], 0).unwrap();
        let sol = Solution::new(&inst, vec![0, 1], None);
        let len = tour_length(&inst, &sol).unwrap();
        assert!((len - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((len - 2.828427).abs() < 1e-6);
    }

    #[test]
    fn repeated_node_is_reported() {
        let inst = square();
        let sol = Solution::new(&inst, vec![0, 1, 1, 3], None);
        let err = validate_solution(&inst, &sol).unwrap_err();
        assert_eq!(err, Violation::NodeRepeated { position: 2, node: 1 });
        assert!(err.to_string().starts_with("node 1 repeated"));
        assert!(tour_length(&inst, &sol).is_err());
    }

    #[test]
    fn missing_and_out_of_range_nodes() {
        let inst = square();
        let sol = Solution::new(&inst, vec![0, 1, 2], None);
        assert_eq!(validate_solution(&inst, &sol), Err(Violation::NodeMissing { node: 3 }));
        let sol = Solution::new(&inst, vec![0, 1, 2, 7], None);
        assert!(matches!(
            validate_solution(&inst, &sol),
            Err(Violation::NodeOutOfRange { position: 3, node: 7 })
        ));
        assert!(sol.length().is_nan());
    }

    #[test]
    fn capacity_overload_names_segment() {
        // 11 + 22 = 33 units > 30: normalized load 1.1
        let inst = small_cvrp(vec![11, 22, 5], 30);
        let sol = Solution::new(&inst, vec![0, 1, 2, 0, 3, 0], None);
        let err = validate_solution(&inst, &sol).unwrap_err();
        match err {
            Violation::CapacityExceeded { segment, load } => {
                assert_eq!(segment, 0);
                assert!((load - 1.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.to_string().contains("capacity exceeded in segment 0"));

        let ok = Solution::new(&inst, vec![0, 1, 0, 2, 3, 0], None);
        assert_eq!(validate_solution(&inst, &ok), Ok(()));
    }

    #[test]
    fn vrp_walk_shape() {
        let inst = small_cvrp(vec![1, 1], 30);
        let cases = [
            (vec![1, 2, 0], Violation::MustStartAtDepot),
            (vec![0, 1, 2], Violation::MustEndAtDepot),
            (vec![0, 1, 0, 0, 2, 0], Violation::ConsecutiveDepot { position: 3 }),
            (vec![0, 1, 0], Violation::NodeMissing { node: 2 }),
        ];
        for (visits, expected) in cases {
            let sol = Solution::new(&inst, visits, None);
            assert_eq!(validate_solution(&inst, &sol), Err(expected));
        }
    }

    #[test]
    fn sdvrp_split_delivery() {
        let customers = vec![Point::new(0.5, 0.5), Point::new(0.2, 0.2)];
        let inst = ProblemInstance::vrp(ProblemKind::Sdvrp, Point::new(0.0, 0.0), customers, vec![18, 20], 30, 0)
            .unwrap();
        // customer 2 split over two routes
        let good = Solution::new(&inst, vec![0, 1, 2, 0, 2, 0], Some(vec![0, 18, 12, 0, 8, 0]));
        assert_eq!(validate_solution(&inst, &good), Ok(()));
        let short = Solution::new(&inst, vec![0, 1, 2, 0, 2, 0], Some(vec![0, 18, 12, 0, 7, 0]));
        assert!(matches!(
            validate_solution(&inst, &short),
            Err(Violation::DemandMismatch { node: 2, .. })
        ));
        let zero = Solution::new(&inst, vec![0, 1, 2, 0, 2, 0], Some(vec![0, 18, 0, 0, 20, 0]));
        assert_eq!(
            validate_solution(&inst, &zero),
            Err(Violation::NonPositiveDelivery { position: 2 })
        );
        let over = Solution::new(&inst, vec![0, 1, 2, 0, 2, 0], Some(vec![0, 18, 13, 0, 7, 0]));
        assert!(matches!(
            validate_solution(&inst, &over),
            Err(Violation::CapacityExceeded { segment: 0, .. })
        ));
        let missing = Solution::new(&inst, vec![0, 1, 2, 0], None);
        assert!(validate_solution(&inst, &missing).is_err());
        assert_eq!(good.deliveries(&inst).unwrap()[1], 18.0 / 30.0);
    }

    #[test]
    fn generated_tsp_in_range() {
        let inst = generate_instance(ProblemKind::Tsp, 20, 7).unwrap();
        assert_eq!(inst.num_nodes(), 20);
        assert!(inst.demand_units().is_empty());
        assert_eq!(inst.capacity(), None);
        assert!(inst
            .coords()
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
    }

    #[test]
    fn generated_cvrp_demands() {
        let inst = generate_instance(ProblemKind::Cvrp, 20, 7).unwrap();
        assert_eq!(inst.num_nodes(), 21);
        assert_eq!(inst.capacity(), Some(1.0));
        assert_eq!(inst.capacity_raw(), 30);
        assert_eq!(inst.demand(0), 0.0);
        for i in 1..21 {
            let d = inst.demand(i);
            assert!((1..=9).any(|k| d == k as f64 / 30.0), "demand {d}");
        }
        assert_eq!(inst, generate_instance(ProblemKind::Cvrp, 20, 7).unwrap());
    }

    #[test]
    fn capacity_mapping_is_total() {
        assert_eq!(capacity_for_size(2), 30);
        assert_eq!(capacity_for_size(20), 30);
        assert_eq!(capacity_for_size(21), 40);
        assert_eq!(capacity_for_size(50), 40);
        assert_eq!(capacity_for_size(100), 50);
        assert_eq!(capacity_for_size(500), 50);
    }

    #[test]
    fn tiny_n_rejected() {
        for kind in ProblemKind::ALL {
            assert!(matches!(generate_instance(kind, 1, 0), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let inst = generate_instance(ProblemKind::Cvrp, 5, 3).unwrap();
        let line = instance_to_line(&inst);
        let text = format!("{line}\n{}\n", &line[..line.len() / 2]);
        let err = read_instances_from(text.as_bytes(), Path::new("x.jsonl")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        assert!(read_instances_from(&b""[..], Path::new("empty")).unwrap().is_empty());
    }

    #[test]
    fn numbers_carry_17_significant_digits() {
        let inst = generate_instance(ProblemKind::Sdvrp, 3, 11).unwrap();
        let line = instance_to_line(&inst);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["capacity_raw"], 30);
        assert_eq!(v["n"], 3);
        assert!(line.contains("e-1") || line.contains("e0"));
        assert_eq!(instance_from_line(&line).unwrap(), inst);
    }
}
