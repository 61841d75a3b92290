//! Multi-host placement of one renderer plus per-vehicle SITL units.
//!
//! The renderer must sit on a GPU host; vehicle units may go anywhere on the
//! shared overlay network. Each host's load fraction is the dominant share
//! `max(cpu_used / cpu_capacity, mem_used / mem_capacity)`, and a plan is
//! judged by its maximum load fraction, then by how many vehicles end up on a
//! different host from the renderer (cross-host traffic is the slow path).
//!
//! For every GPU host the renderer could take, planning starts from
//! first-fit and best-fit decreasing packings (by cpu and by memory demand,
//! GPU hosts first) and from a least-loaded greedy, then improves each start
//! with single-unit moves, pairwise swaps and one-for-two exchanges. The
//! best of those seeds a depth-first branch and bound over capacity-respecting
//! assignments, which runs to completion on small instances and otherwise
//! stops after a fixed node budget with the best plan seen. The best
//! result wins, with ties broken by the host ids in unit order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::HostId;

const EPS: f64 = 1e-9;
/// Search nodes the branch and bound may visit before settling.
const NODE_BUDGET: usize = 100_000;

fn default_address() -> String {
    "127.0.0.1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostDescriptor {
    pub id: HostId,
    pub cpu_capacity: f64,
    pub mem_capacity: u64,
    #[serde(default)]
    pub has_gpu: bool,
    pub overlay: String,
    /// Address the gateway uses to reach ports published on this host.
    #[serde(default = "default_address")]
    pub address: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    Renderer,
    VehicleSitl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadUnit {
    pub kind: UnitKind,
    pub cpu_demand: f64,
    pub mem_demand: u64,
    #[serde(default)]
    pub vehicle_index: Option<u32>,
}

impl WorkloadUnit {
    pub fn renderer(cpu_demand: f64, mem_demand: u64) -> Self {
        WorkloadUnit { kind: UnitKind::Renderer, cpu_demand, mem_demand, vehicle_index: None }
    }

    pub fn vehicle(index: u32, cpu_demand: f64, mem_demand: u64) -> Self {
        WorkloadUnit { kind: UnitKind::VehicleSitl, cpu_demand, mem_demand, vehicle_index: Some(index) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAssignment {
    pub unit: WorkloadUnit,
    pub host: HostId,
}

/// Assignment of every unit to a host, in the order the units were given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub assignment: Vec<UnitAssignment>,
    pub est_cross_host_pairs: u32,
    pub feasible: bool,
    pub max_load_fraction: f64,
}

impl PlacementPlan {
    pub fn renderer_host(&self) -> Option<&HostId> {
        self.assignment.iter().find(|a| a.unit.kind == UnitKind::Renderer).map(|a| &a.host)
    }

    pub fn hosts_used(&self) -> BTreeSet<&HostId> {
        self.assignment.iter().map(|a| &a.host).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlacementError {
    #[error("no GPU host available for the renderer")]
    NoGpuHost,
    #[error("hosts are not on a single overlay network")]
    HeterogeneousOverlay,
    #[error("invalid workload: {0}")]
    InvalidUnits(String),
    #[error("invalid host {0}: capacities must be positive")]
    InvalidHost(HostId),
    #[error("no RTT entry for host pair {0} / {1}")]
    MissingRttEntry(HostId, HostId),
}

fn check_inputs(hosts: &[HostDescriptor], units: &[WorkloadUnit]) -> Result<(), PlacementError> {
    for h in hosts {
        if !(h.cpu_capacity.is_finite() && h.cpu_capacity > 0.0) || h.mem_capacity == 0 {
            return Err(PlacementError::InvalidHost(h.id.clone()));
        }
    }
    if let Some(first) = hosts.first() {
        if hosts.iter().any(|h| h.overlay != first.overlay) {
            return Err(PlacementError::HeterogeneousOverlay);
        }
    }
    let ids: BTreeSet<_> = hosts.iter().map(|h| &h.id).collect();
    if ids.len() != hosts.len() {
        return Err(PlacementError::InvalidUnits("duplicate host id".into()));
    }

    let renderers = units.iter().filter(|u| u.kind == UnitKind::Renderer).count();
    if renderers != 1 {
        return Err(PlacementError::InvalidUnits(format!("expected exactly one renderer, got {renderers}")));
    }
    let mut seen = BTreeSet::new();
    for u in units {
        if !(u.cpu_demand.is_finite() && u.cpu_demand >= 0.0) {
            return Err(PlacementError::InvalidUnits("cpu demand must be finite and non-negative".into()));
        }
        match (u.kind, u.vehicle_index) {
            (UnitKind::VehicleSitl, Some(i)) => {
                if !seen.insert(i) {
                    return Err(PlacementError::InvalidUnits(format!("vehicle index {i} repeated")));
                }
            }
            (UnitKind::VehicleSitl, None) => {
                return Err(PlacementError::InvalidUnits("vehicle unit without index".into()));
            }
            (UnitKind::Renderer, Some(_)) => {
                return Err(PlacementError::InvalidUnits("renderer must not carry a vehicle index".into()));
            }
            (UnitKind::Renderer, None) => {}
        }
    }
    if !hosts.iter().any(|h| h.has_gpu) {
        return Err(PlacementError::NoGpuHost);
    }
    Ok(())
}

/// Search state over a canonical host order (GPU hosts first, then by id).
struct Problem<'a> {
    hosts: Vec<&'a HostDescriptor>,
    units: &'a [WorkloadUnit],
    renderer: usize,
}

#[derive(Debug, Clone)]
struct Score {
    overflow: f64,
    max_load: f64,
    cross: u32,
    /// Host loads, highest first.
    profile: Vec<f64>,
}

impl Score {
    fn feasible(&self) -> bool {
        self.overflow <= EPS
    }

    fn cmp(&self, other: &Score) -> Ordering {
        let f = |a: f64, b: f64| {
            if (a - b).abs() <= EPS {
                Ordering::Equal
            } else {
                a.partial_cmp(&b).unwrap_or(Ordering::Equal)
            }
        };
        f(self.overflow, other.overflow).then(f(self.max_load, other.max_load)).then(self.cross.cmp(&other.cross))
    }

    /// Order used by local search: lowering any host's load counts as
    /// progress even when several hosts share the maximum.
    fn descent_cmp(&self, other: &Score) -> Ordering {
        let f = |a: f64, b: f64| {
            if (a - b).abs() <= EPS {
                Ordering::Equal
            } else {
                a.partial_cmp(&b).unwrap_or(Ordering::Equal)
            }
        };
        let profile = self.profile.iter().zip(&other.profile).map(|(&a, &b)| f(a, b)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal);
        f(self.overflow, other.overflow).then(profile).then(self.cross.cmp(&other.cross))
    }
}

impl<'a> Problem<'a> {
    fn new(hosts: &'a [HostDescriptor], units: &'a [WorkloadUnit]) -> Self {
        let mut sorted: Vec<&HostDescriptor> = hosts.iter().collect();
        sorted.sort_by(|a, b| b.has_gpu.cmp(&a.has_gpu).then_with(|| a.id.cmp(&b.id)));
        let renderer = units.iter().position(|u| u.kind == UnitKind::Renderer).expect("checked");
        Problem { hosts: sorted, units, renderer }
    }

    fn loads(&self, assign: &[usize]) -> Vec<(f64, u64)> {
        let mut used = vec![(0.0f64, 0u64); self.hosts.len()];
        for (u, &h) in self.units.iter().zip(assign) {
            used[h].0 += u.cpu_demand;
            used[h].1 += u.mem_demand;
        }
        used
    }

    fn host_terms(&self, h: usize, cpu: f64, mem: u64) -> (f64, f64) {
        let host = self.hosts[h];
        let cpu_frac = cpu / host.cpu_capacity;
        let mem_frac = mem as f64 / host.mem_capacity as f64;
        let overflow = (cpu_frac - 1.0).max(0.0) + (mem_frac - 1.0).max(0.0);
        (cpu_frac.max(mem_frac), overflow)
    }

    fn score(&self, assign: &[usize]) -> Score {
        let mut overflow = 0.0;
        let mut profile = Vec::with_capacity(self.hosts.len());
        for (h, (cpu, mem)) in self.loads(assign).into_iter().enumerate() {
            let (load, over) = self.host_terms(h, cpu, mem);
            profile.push(load);
            overflow += over;
        }
        profile.sort_by(|a, b| b.total_cmp(a));
        let max_load = profile.first().copied().unwrap_or(0.0);
        let rh = assign[self.renderer];
        let cross = assign.iter().enumerate().filter(|&(i, &h)| i != self.renderer && h != rh).count() as u32;
        Score { overflow, max_load, cross, profile }
    }

    fn gpu_hosts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.hosts.len()).filter(|&h| self.hosts[h].has_gpu)
    }

    fn can_host(&self, unit: usize, h: usize) -> bool {
        unit != self.renderer || self.hosts[h].has_gpu
    }

    /// Vehicles by cpu demand descending; memory then vehicle index break ties.
    fn vehicles_desc(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.units.len()).filter(|&i| i != self.renderer).collect();
        order.sort_by(|&a, &b| {
            let (ua, ub) = (&self.units[a], &self.units[b]);
            ub.cpu_demand
                .partial_cmp(&ua.cpu_demand)
                .unwrap_or(Ordering::Equal)
                .then(ub.mem_demand.cmp(&ua.mem_demand))
                .then(ua.vehicle_index.cmp(&ub.vehicle_index))
        });
        order
    }

    /// Vehicles by memory demand descending; cpu then vehicle index break ties.
    fn vehicles_desc_by_mem(&self) -> Vec<usize> {
        let mut order = self.vehicles_desc();
        order.sort_by(|&a, &b| self.units[b].mem_demand.cmp(&self.units[a].mem_demand));
        order
    }

    /// Packs vehicles in `order` after pinning the renderer to `rh`. Each
    /// vehicle takes the first host it fits on, or with `best_fit` the host
    /// it leaves the least slack on; a vehicle that fits nowhere goes to the
    /// cheapest host.
    fn pack(&self, rh: usize, order: &[usize], best_fit: bool) -> Vec<usize> {
        let mut assign = vec![usize::MAX; self.units.len()];
        let mut used = vec![(0.0f64, 0u64); self.hosts.len()];
        let place = |assign: &mut Vec<usize>, used: &mut Vec<(f64, u64)>, unit: usize, h: usize| {
            assign[unit] = h;
            used[h].0 += self.units[unit].cpu_demand;
            used[h].1 += self.units[unit].mem_demand;
        };
        place(&mut assign, &mut used, self.renderer, rh);
        for &v in order {
            let u = &self.units[v];
            let after = |h: usize| self.host_terms(h, used[h].0 + u.cpu_demand, used[h].1 + u.mem_demand);
            let mut fitting = (0..self.hosts.len()).filter(|&h| after(h).1 <= EPS);
            let chosen = if best_fit {
                fitting.max_by(|&a, &b| after(a).0.partial_cmp(&after(b).0).unwrap_or(Ordering::Equal).then(b.cmp(&a)))
            } else {
                fitting.next()
            };
            let h = chosen.unwrap_or_else(|| self.cheapest_host(&used, v, rh));
            place(&mut assign, &mut used, v, h);
        }
        assign
    }

    /// Host with the smallest resulting (overflow, load), preferring the
    /// renderer's host, then canonical order.
    fn cheapest_host(&self, used: &[(f64, u64)], unit: usize, renderer_host: usize) -> usize {
        let u = &self.units[unit];
        (0..self.hosts.len())
            .filter(|&h| self.can_host(unit, h))
            .min_by(|&a, &b| {
                let ta = self.host_terms(a, used[a].0 + u.cpu_demand, used[a].1 + u.mem_demand);
                let tb = self.host_terms(b, used[b].0 + u.cpu_demand, used[b].1 + u.mem_demand);
                let s = |t: (f64, f64), h: usize| Score { overflow: t.1, max_load: t.0, cross: (h != renderer_host) as u32, profile: Vec::new() };
                s(ta, a).cmp(&s(tb, b))
            })
            .expect("at least one host")
    }

    fn least_loaded_greedy(&self, renderer_host: usize) -> Vec<usize> {
        let mut assign = vec![usize::MAX; self.units.len()];
        let mut used = vec![(0.0f64, 0u64); self.hosts.len()];
        assign[self.renderer] = renderer_host;
        used[renderer_host].0 += self.units[self.renderer].cpu_demand;
        used[renderer_host].1 += self.units[self.renderer].mem_demand;
        for v in self.vehicles_desc() {
            let h = self.cheapest_host(&used, v, renderer_host);
            assign[v] = h;
            used[h].0 += self.units[v].cpu_demand;
            used[h].1 += self.units[v].mem_demand;
        }
        assign
    }

    /// Steepest-descent over single moves, pairwise swaps and one-for-two
    /// exchanges.
    fn improve(&self, mut assign: Vec<usize>) -> Vec<usize> {
        let n = self.units.len();
        let m = self.hosts.len();
        let mut current = self.score(&assign);
        loop {
            let mut best: Option<(Score, Vec<usize>)> = None;
            let consider = |candidate: Vec<usize>, best: &mut Option<(Score, Vec<usize>)>| {
                let s = self.score(&candidate);
                let beats_current = s.descent_cmp(&current) == Ordering::Less;
                let beats_best = best.as_ref().is_none_or(|(b, _)| s.descent_cmp(b) == Ordering::Less);
                if beats_current && beats_best {
                    *best = Some((s, candidate));
                }
            };
            for u in 0..n {
                for h in 0..m {
                    if h != assign[u] && self.can_host(u, h) {
                        let mut c = assign.clone();
                        c[u] = h;
                        consider(c, &mut best);
                    }
                }
            }
            for a in 0..n {
                for b in a + 1..n {
                    let (ha, hb) = (assign[a], assign[b]);
                    if ha != hb && self.can_host(a, hb) && self.can_host(b, ha) {
                        let mut c = assign.clone();
                        c.swap(a, b);
                        consider(c, &mut best);
                    }
                }
            }
            for a in 0..n {
                for b in 0..n {
                    for c in b + 1..n {
                        let (ha, hb) = (assign[a], assign[b]);
                        if hb == assign[c] && ha != hb && self.can_host(a, hb) && self.can_host(b, ha) && self.can_host(c, ha) {
                            let mut cand = assign.clone();
                            cand[a] = hb;
                            cand[b] = ha;
                            cand[c] = ha;
                            consider(cand, &mut best);
                        }
                    }
                }
            }
            match best {
                Some((s, c)) => {
                    current = s;
                    assign = c;
                }
                None => return assign,
            }
        }
    }

    fn host_ids(&self, assign: &[usize]) -> Vec<&HostId> {
        assign.iter().map(|&h| &self.hosts[h].id).collect()
    }

    fn better(&self, a: (&Score, &[usize]), b: (&Score, &[usize])) -> bool {
        a.0.cmp(b.0).then_with(|| self.host_ids(a.1).cmp(&self.host_ids(b.1))) == Ordering::Less
    }

    /// Keeps `incumbent` unless a better capacity-respecting assignment
    /// turns up within the node budget.
    fn branch_and_bound(&self, incumbent: Vec<usize>) -> Vec<usize> {
        let mut order = vec![self.renderer];
        order.extend(self.vehicles_desc());
        let mut search = Search {
            problem: self,
            best_score: self.score(&incumbent),
            best: incumbent,
            assign: vec![usize::MAX; self.units.len()],
            used: vec![(0.0, 0); self.hosts.len()],
            order,
            nodes: 0,
        };
        search.descend(0, 0.0);
        search.best
    }
}

struct Search<'p, 'a> {
    problem: &'p Problem<'a>,
    order: Vec<usize>,
    assign: Vec<usize>,
    used: Vec<(f64, u64)>,
    best: Vec<usize>,
    best_score: Score,
    nodes: usize,
}

impl Search<'_, '_> {
    fn descend(&mut self, depth: usize, load: f64) {
        let p = self.problem;
        if depth == self.order.len() {
            let score = p.score(&self.assign);
            if p.better((&score, &self.assign), (&self.best_score, &self.best)) {
                self.best.clone_from(&self.assign);
                self.best_score = score;
            }
            return;
        }
        let unit = self.order[depth];
        let u = &p.units[unit];
        for h in 0..p.hosts.len() {
            if self.nodes >= NODE_BUDGET {
                return;
            }
            if !p.can_host(unit, h) {
                continue;
            }
            let (cpu, mem) = (self.used[h].0 + u.cpu_demand, self.used[h].1 + u.mem_demand);
            let (host_load, over) = p.host_terms(h, cpu, mem);
            let load = load.max(host_load);
            if over > EPS || (self.best_score.feasible() && load > self.best_score.max_load + EPS) {
                continue;
            }
            self.nodes += 1;
            let saved = self.used[h];
            self.used[h] = (cpu, mem);
            self.assign[unit] = h;
            self.descend(depth + 1, load);
            self.used[h] = saved;
        }
        self.assign[unit] = usize::MAX;
    }
}

/// Plans the placement of `units` on `hosts`.
pub fn plan(hosts: &[HostDescriptor], units: &[WorkloadUnit]) -> Result<PlacementPlan, PlacementError> {
    check_inputs(hosts, units)?;
    let problem = Problem::new(hosts, units);

    let orders = [problem.vehicles_desc(), problem.vehicles_desc_by_mem()];
    let mut starts = Vec::new();
    for rh in problem.gpu_hosts() {
        for order in &orders {
            starts.push(problem.pack(rh, order, false));
            starts.push(problem.pack(rh, order, true));
        }
        starts.push(problem.least_loaded_greedy(rh));
    }

    let best = starts
        .into_iter()
        .map(|s| problem.improve(s))
        .map(|a| (problem.score(&a), a))
        .min_by(|(sa, a), (sb, b)| sa.cmp(sb).then_with(|| problem.host_ids(a).cmp(&problem.host_ids(b))))
        .expect("at least one start");

    let assign = problem.branch_and_bound(best.1);
    let score = problem.score(&assign);
    Ok(PlacementPlan {
        assignment: units
            .iter()
            .zip(&assign)
            .map(|(u, &h)| UnitAssignment { unit: u.clone(), host: problem.hosts[h].id.clone() })
            .collect(),
        est_cross_host_pairs: score.cross,
        feasible: score.feasible(),
        max_load_fraction: score.max_load,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanViolation {
    Capacity(HostId),
    GpuPinning,
    Completeness,
    UnknownHost(HostId),
}

/// Re-checks a plan against hosts and units, independent of how it was built.
pub fn validate_plan(plan: &PlacementPlan, hosts: &[HostDescriptor], units: &[WorkloadUnit]) -> Result<(), Vec<PlanViolation>> {
    let mut violations = BTreeSet::new();
    let by_id: BTreeMap<&HostId, &HostDescriptor> = hosts.iter().map(|h| (&h.id, h)).collect();

    // Every unit must appear exactly once.
    let mut remaining: Vec<&WorkloadUnit> = units.iter().collect();
    for a in &plan.assignment {
        match remaining.iter().position(|u| **u == a.unit) {
            Some(i) => {
                remaining.swap_remove(i);
            }
            None => {
                violations.insert(PlanViolation::Completeness);
            }
        }
    }
    if !remaining.is_empty() {
        violations.insert(PlanViolation::Completeness);
    }

    let mut cpu: BTreeMap<&HostId, f64> = BTreeMap::new();
    let mut mem: BTreeMap<&HostId, u64> = BTreeMap::new();
    for a in &plan.assignment {
        let Some(host) = by_id.get(&a.host) else {
            violations.insert(PlanViolation::UnknownHost(a.host.clone()));
            continue;
        };
        if a.unit.kind == UnitKind::Renderer && !host.has_gpu {
            violations.insert(PlanViolation::GpuPinning);
        }
        *cpu.entry(&a.host).or_default() += a.unit.cpu_demand;
        *mem.entry(&a.host).or_default() += a.unit.mem_demand;
    }
    for (id, host) in &by_id {
        let c = cpu.get(id).copied().unwrap_or(0.0);
        let m = mem.get(id).copied().unwrap_or(0);
        if c > host.cpu_capacity + EPS || m > host.mem_capacity {
            violations.insert(PlanViolation::Capacity((*id).clone()));
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyAdvisory {
    Ok,
    HighLatencyWarning,
}

pub const DEFAULT_RTT_THRESHOLD_MS: f64 = 10.0;

/// Warns when any vehicle talks to the renderer across a link slower than
/// `threshold_ms`. RTT entries are looked up in either orientation.
pub fn latency_note(
    plan: &PlacementPlan,
    rtt_ms: &BTreeMap<(HostId, HostId), f64>,
    threshold_ms: f64,
) -> Result<LatencyAdvisory, PlacementError> {
    let Some(renderer) = plan.renderer_host() else {
        return Ok(LatencyAdvisory::Ok);
    };
    let mut advisory = LatencyAdvisory::Ok;
    for a in plan.assignment.iter().filter(|a| a.unit.kind == UnitKind::VehicleSitl && &a.host != renderer) {
        let rtt = rtt_ms
            .get(&(a.host.clone(), renderer.clone()))
            .or_else(|| rtt_ms.get(&(renderer.clone(), a.host.clone())))
            .ok_or_else(|| PlacementError::MissingRttEntry(a.host.clone(), renderer.clone()))?;
        if *rtt > threshold_ms {
            advisory = LatencyAdvisory::HighLatencyWarning;
        }
    }
    Ok(advisory)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    fn host(id: &str, cpu: f64, mem_gib: u64, gpu: bool) -> HostDescriptor {
        HostDescriptor {
            id: id.into(),
            cpu_capacity: cpu,
            mem_capacity: mem_gib * GIB,
            has_gpu: gpu,
            overlay: "swarm-overlay".into(),
            address: default_address(),
        }
    }

    fn units(renderer: (f64, u64), vehicles: &[(f64, u64)]) -> Vec<WorkloadUnit> {
        let mut u = vec![WorkloadUnit::renderer(renderer.0, renderer.1 * GIB)];
        u.extend(vehicles.iter().enumerate().map(|(i, v)| WorkloadUnit::vehicle(i as u32, v.0, v.1 * GIB)));
        u
    }

    /// Exhaustive reference: every assignment with the renderer on a GPU
    /// host. Returns the minimum max-load among feasible assignments.
    fn oracle(hosts: &[HostDescriptor], units: &[WorkloadUnit]) -> Option<(f64, u32)> {
        let h = hosts.len();
        let n = units.len();
        let mut best: Option<(f64, u32)> = None;
        for code in 0..h.pow(n as u32) {
            let assign: Vec<usize> = (0..n).map(|i| code / h.pow(i as u32) % h).collect();
            let r = units.iter().position(|u| u.kind == UnitKind::Renderer).unwrap();
            if !hosts[assign[r]].has_gpu {
                continue;
            }
            let mut ok = true;
            let mut max_load = 0.0f64;
            for (j, host) in hosts.iter().enumerate() {
                let cpu: f64 = units.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(u, _)| u.cpu_demand).sum();
                let mem: u64 = units.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(u, _)| u.mem_demand).sum();
                if cpu > host.cpu_capacity + 1e-9 || mem > host.mem_capacity {
                    ok = false;
                    break;
                }
                max_load = max_load.max((cpu / host.cpu_capacity).max(mem as f64 / host.mem_capacity as f64));
            }
            if ok {
                let cross = (0..n).filter(|&i| i != r && assign[i] != assign[r]).count() as u32;
                let better = match best {
                    None => true,
                    Some((l, c)) => max_load < l - 1e-9 || ((max_load - l).abs() <= 1e-9 && cross < c),
                };
                if better {
                    best = Some((max_load, cross));
                }
            }
        }
        best
    }

    #[test]
    fn single_gpu_host_takes_everything() {
        let hosts = [host("host0", 64.0, 256, true)];
        let u = units((4.0, 8), &[(1.0, 1), (1.0, 1), (1.0, 1)]);
        let p = plan(&hosts, &u).unwrap();
        assert!(p.feasible);
        assert_eq!(p.est_cross_host_pairs, 0);
        assert!(p.assignment.iter().all(|a| a.host == "host0".into()));
    }

    #[test]
    fn two_hosts_split_two_and_two() {
        // host0 fits the renderer plus two vehicles; host1 fits two vehicles.
        let hosts = [host("host0", 8.0, 64, true), host("host1", 4.0, 64, false)];
        let u = units((4.0, 1), &[(2.0, 1), (2.0, 1), (2.0, 1), (2.0, 1)]);
        let p = plan(&hosts, &u).unwrap();
        assert!(p.feasible);
        assert_eq!(p.renderer_host(), Some(&"host0".into()));
        let on0 = p.assignment.iter().filter(|a| a.unit.kind == UnitKind::VehicleSitl && a.host == "host0".into()).count();
        assert_eq!(on0, 2);
        assert_eq!(p.est_cross_host_pairs, 2);
        // All 2^4 vehicle assignments: the optimum is max load 1.0 with 2
        // cross-host pairs.
        assert_eq!(oracle(&hosts, &u), Some((1.0, 2)));
        assert!((p.max_load_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_gpu_host() {
        let hosts = [host("a", 8.0, 8, false)];
        assert_eq!(plan(&hosts, &units((1.0, 1), &[])), Err(PlacementError::NoGpuHost));
        assert_eq!(plan(&[], &units((1.0, 1), &[])), Err(PlacementError::NoGpuHost));
    }

    #[test]
    fn mixed_overlays_rejected() {
        let mut b = host("b", 8.0, 8, false);
        b.overlay = "other".into();
        assert_eq!(plan(&[host("a", 8.0, 8, true), b], &units((1.0, 1), &[])), Err(PlacementError::HeterogeneousOverlay));
    }

    #[test]
    fn unit_shape_checked() {
        let hosts = [host("a", 8.0, 8, true)];
        let mut u = units((1.0, 1), &[(1.0, 1)]);
        u.push(WorkloadUnit::renderer(1.0, 1));
        assert!(matches!(plan(&hosts, &u), Err(PlacementError::InvalidUnits(_))));
        let u = vec![WorkloadUnit::renderer(1.0, 1), WorkloadUnit::vehicle(0, 1.0, 1), WorkloadUnit::vehicle(0, 1.0, 1)];
        assert!(matches!(plan(&hosts, &u), Err(PlacementError::InvalidUnits(_))));
    }

    #[test]
    fn infeasible_reports_false() {
        let hosts = [host("a", 2.0, 8, true)];
        let p = plan(&hosts, &units((4.0, 1), &[])).unwrap();
        assert!(!p.feasible);
        assert_eq!(validate_plan(&p, &hosts, &units((4.0, 1), &[])), Err(vec![PlanViolation::Capacity("a".into())]));
    }

    #[test]
    fn validate_accepts_plan_output() {
        let hosts = [host("host0", 8.0, 64, true), host("host1", 4.0, 64, false)];
        let u = units((4.0, 1), &[(2.0, 1), (2.0, 1), (2.0, 1)]);
        let p = plan(&hosts, &u).unwrap();
        assert_eq!(validate_plan(&p, &hosts, &u), Ok(()));
    }

    #[test]
    fn validate_flags_renderer_on_cpu_host() {
        let hosts = [host("host0", 8.0, 64, true), host("host1", 8.0, 64, false)];
        let u = units((1.0, 1), &[(1.0, 1)]);
        let mut p = plan(&hosts, &u).unwrap();
        p.assignment[0].host = "host1".into();
        assert_eq!(validate_plan(&p, &hosts, &u), Err(vec![PlanViolation::GpuPinning]));
    }

    #[test]
    fn validate_flags_missing_vehicle() {
        let hosts = [host("host0", 8.0, 64, true)];
        let u = units((1.0, 1), &[(1.0, 1), (1.0, 1)]);
        let mut p = plan(&hosts, &u).unwrap();
        p.assignment.pop();
        assert_eq!(validate_plan(&p, &hosts, &u), Err(vec![PlanViolation::Completeness]));
    }

    #[test]
    fn deterministic() {
        let hosts = [host("b", 6.0, 6, true), host("a", 6.0, 6, true), host("c", 3.0, 3, false)];
        let u = units((2.0, 1), &[(1.0, 2), (3.0, 2), (1.0, 1), (2.0, 1)]);
        let first = plan(&hosts, &u).unwrap();
        for _ in 0..5 {
            assert_eq!(plan(&hosts, &u).unwrap(), first);
        }
    }

    #[test]
    fn latency_notes() {
        let hosts = [host("host0", 8.0, 64, true), host("host1", 4.0, 64, false)];
        let u = units((4.0, 1), &[(2.0, 1), (2.0, 1), (2.0, 1), (2.0, 1)]);
        let split = plan(&hosts, &u).unwrap();
        let mut rtt = BTreeMap::new();
        rtt.insert(("host0".into(), "host1".into()), 50.0);
        assert_eq!(latency_note(&split, &rtt, 10.0), Ok(LatencyAdvisory::HighLatencyWarning));
        rtt.insert(("host0".into(), "host1".into()), 2.0);
        assert_eq!(latency_note(&split, &rtt, 10.0), Ok(LatencyAdvisory::Ok));
        assert!(matches!(latency_note(&split, &BTreeMap::new(), 10.0), Err(PlacementError::MissingRttEntry(..))));

        let single = plan(&[host("host0", 64.0, 256, true)], &units((1.0, 1), &[(1.0, 1)])).unwrap();
        assert_eq!(latency_note(&single, &BTreeMap::new(), 10.0), Ok(LatencyAdvisory::Ok));
    }

    #[test]
    fn small_grid_against_oracle() {
        let host_types = [(2.0, 2, true), (4.0, 4, true), (4.0, 2, false), (2.0, 4, false)];
        let demand = [(1.0, 1), (2.0, 1), (1.0, 2)];
        let mut checked = 0;
        for h0 in host_types.iter().filter(|t| t.2) {
            for h1 in &host_types {
                let hosts = [host("h0", h0.0, h0.1, h0.2), host("h1", h1.0, h1.1, h1.2)];
                for r in demand {
                    for a in demand {
                        for b in demand {
                            let u = units(r, &[a, b]);
                            let p = plan(&hosts, &u).unwrap();
                            match oracle(&hosts, &u) {
                                Some((best, _)) => {
                                    assert!(p.feasible, "{hosts:?} {u:?}");
                                    assert!(p.max_load_fraction <= 1.25 * best + 1e-9);
                                    assert_eq!(validate_plan(&p, &hosts, &u), Ok(()));
                                }
                                None => assert!(!p.feasible),
                            }
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(checked, 2 * 4 * 27);
    }
}
