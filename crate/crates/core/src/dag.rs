//! Small DAG engine: d-separation by reachability, and a selection-safe
//! backdoor identifiability check.
//!
//! The selection node lives in `always_conditioned`: every analysis of the
//! observed data implicitly conditions on it, so the checker carries it in
//! every conditioning set. Identifiability of an intervention on treatment
//! set `T` with outcome `Y` is decided by searching adjustment sets
//! `Z ⊆ measured` such that, for each treatment `X ∈ T`:
//!
//! 1. every backdoor path from `X` to `Y` is blocked given
//!    `Z ∪ always_conditioned ∪ (T \ {X})`, and
//! 2. every node used for adjustment (members of `Z` and the co-treatments
//!    held fixed) is d-separated from every latent node given the rest of
//!    the conditioning set — conditioning on the selection node must not
//!    have entangled an adjustment variable with an unmeasured cause.
//!
//! Condition 2 is what makes the check selection-aware: a conditioned
//! collider (the selection node) can open a path from an otherwise clean
//! covariate to a latent cause, and such a covariate cannot license
//! adjustment.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};

/// Directed acyclic graph with measurement and mandatory-conditioning
/// annotations. Immutable once built; all queries are pure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    measured: BTreeSet<usize>,
    always_conditioned: BTreeSet<usize>,
}

impl Dag {
    /// Build from node labels and directed edges. Fails on cycles,
    /// duplicate nodes, or edges naming unknown nodes. Node storage is
    /// label-sorted, so two graphs with the same labels and edges compare
    /// equal regardless of declaration order.
    pub fn new<S: AsRef<str>>(nodes: &[S], edges: &[(S, S)]) -> Result<Self> {
        let mut sorted: Vec<String> = nodes.iter().map(|n| n.as_ref().to_string()).collect();
        sorted.sort();
        let mut names = Vec::with_capacity(sorted.len());
        let mut index = BTreeMap::new();
        for name in sorted {
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(Error::schema(None, format!("duplicate node `{name}`")));
            }
            names.push(name);
        }
        let mut parents = vec![Vec::new(); names.len()];
        let mut children = vec![Vec::new(); names.len()];
        for (from, to) in edges {
            let f = *index
                .get(from.as_ref())
                .ok_or_else(|| Error::UnknownNode(from.as_ref().to_string()))?;
            let t = *index
                .get(to.as_ref())
                .ok_or_else(|| Error::UnknownNode(to.as_ref().to_string()))?;
            if !children[f].contains(&t) {
                children[f].push(t);
                parents[t].push(f);
            }
        }
        let dag = Dag {
            names,
            index,
            parents,
            children,
            measured: BTreeSet::new(),
            always_conditioned: BTreeSet::new(),
        };
        dag.check_acyclic()?;
        Ok(dag)
    }

    fn check_acyclic(&self) -> Result<()> {
        let n = self.names.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(|p| p.len()).collect();
        let mut queue: VecDeque<usize> =
            (0..n).filter(|&v| indegree[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop_front() {
            seen += 1;
            for &c in &self.children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if seen == n {
            Ok(())
        } else {
            Err(Error::CyclicGraph)
        }
    }

    pub fn with_measured<S: AsRef<str>>(mut self, nodes: &[S]) -> Result<Self> {
        for n in nodes {
            let i = self.resolve(n.as_ref())?;
            self.measured.insert(i);
        }
        Ok(self)
    }

    pub fn with_always_conditioned<S: AsRef<str>>(mut self, nodes: &[S]) -> Result<Self> {
        for n in nodes {
            let i = self.resolve(n.as_ref())?;
            self.always_conditioned.insert(i);
        }
        Ok(self)
    }

    fn resolve(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn node_names(&self) -> &[String] {
        &self.names
    }

    pub fn measured_names(&self) -> Vec<&str> {
        self.measured.iter().map(|&i| self.names[i].as_str()).collect()
    }

    pub fn always_conditioned_names(&self) -> Vec<&str> {
        self.always_conditioned
            .iter()
            .map(|&i| self.names[i].as_str())
            .collect()
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        match (self.index.get(from), self.index.get(to)) {
            (Some(&f), Some(&t)) => self.children[f].contains(&t),
            _ => false,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(|c| c.len()).sum()
    }

    pub fn parents_of(&self, name: &str) -> Result<Vec<&str>> {
        let i = self.resolve(name)?;
        Ok(self.parents[i].iter().map(|&p| self.names[p].as_str()).collect())
    }

    fn ancestors_mask(&self, seeds: &BTreeSet<usize>) -> Vec<bool> {
        let mut mask = vec![false; self.names.len()];
        let mut stack: Vec<usize> = seeds.iter().copied().collect();
        for &s in seeds {
            mask[s] = true;
        }
        while let Some(v) = stack.pop() {
            for &p in &self.parents[v] {
                if !mask[p] {
                    mask[p] = true;
                    stack.push(p);
                }
            }
        }
        mask
    }

    fn descendants_mask(&self, seeds: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.names.len()];
        let mut stack: Vec<usize> = seeds.to_vec();
        for &s in seeds {
            mask[s] = true;
        }
        while let Some(v) = stack.pop() {
            for &c in &self.children[v] {
                if !mask[c] {
                    mask[c] = true;
                    stack.push(c);
                }
            }
        }
        mask
    }

    /// Parse the plain-text edge-list format:
    ///
    /// ```text
    /// # comment
    /// measured: A0 A1
    /// conditioned: S
    /// A0 -> A1
    /// U -> Y
    /// ```
    ///
    /// Nodes are implied by the edges and headers.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut nodes: Vec<String> = Vec::new();
        let mut edges: Vec<(String, String)> = Vec::new();
        let mut measured: Vec<String> = Vec::new();
        let mut conditioned: Vec<String> = Vec::new();
        let note = |nodes: &mut Vec<String>, name: &str| {
            if !nodes.iter().any(|n| n == name) {
                nodes.push(name.to_string());
            }
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let loc = || Some(format!("line {}", lineno + 1));
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("measured:") {
                for name in rest.split_whitespace() {
                    measured.push(name.to_string());
                    note(&mut nodes, name);
                }
            } else if let Some(rest) = line.strip_prefix("conditioned:") {
                for name in rest.split_whitespace() {
                    conditioned.push(name.to_string());
                    note(&mut nodes, name);
                }
            } else if let Some((from, to)) = line.split_once("->") {
                let from = from.trim();
                let to = to.trim();
                if from.is_empty() || to.is_empty() || from.contains(char::is_whitespace)
                    || to.contains(char::is_whitespace)
                {
                    return Err(Error::schema(
                        loc(),
                        format!("malformed edge `{line}` (expected `FROM -> TO`)"),
                    ));
                }
                note(&mut nodes, from);
                note(&mut nodes, to);
                edges.push((from.to_string(), to.to_string()));
            } else {
                return Err(Error::schema(
                    loc(),
                    format!("unrecognized line `{line}`"),
                ));
            }
        }
        if nodes.is_empty() {
            return Err(Error::schema(None, "graph file declares no nodes"));
        }
        Dag::new(&nodes, &edges)?
            .with_measured(&measured)?
            .with_always_conditioned(&conditioned)
    }
}

/// Standard d-separation via reachability (the Bayes-ball walk). `z` is
/// used exactly as given; mandatory conditioning is the caller's concern.
pub fn d_separated(dag: &Dag, x: &[&str], y: &[&str], z: &[&str]) -> Result<bool> {
    let xs: BTreeSet<usize> = x.iter().map(|n| dag.resolve(n)).collect::<Result<_>>()?;
    let ys: BTreeSet<usize> = y.iter().map(|n| dag.resolve(n)).collect::<Result<_>>()?;
    let zs: BTreeSet<usize> = z.iter().map(|n| dag.resolve(n)).collect::<Result<_>>()?;
    for (a, b) in [(&xs, &ys), (&xs, &zs), (&ys, &zs)] {
        if let Some(&overlap) = a.intersection(b).next() {
            return Err(Error::OverlappingNodeSets(dag.names[overlap].clone()));
        }
    }
    Ok(d_separated_idx(dag, &xs, &ys, &zs))
}

fn d_separated_idx(
    dag: &Dag,
    xs: &BTreeSet<usize>,
    ys: &BTreeSet<usize>,
    zs: &BTreeSet<usize>,
) -> bool {
    // Reachable = nodes connected to X by an active trail given Z.
    let z_anc = dag.ancestors_mask(zs);
    let n = dag.names.len();
    // Directions: arrived moving up (towards parents) or down (to children).
    let mut visited_up = vec![false; n];
    let mut visited_down = vec![false; n];
    let mut queue: VecDeque<(usize, bool)> = VecDeque::new();
    for &x in xs {
        queue.push_back((x, true));
    }
    while let Some((v, up)) = queue.pop_front() {
        let seen = if up { &mut visited_up } else { &mut visited_down };
        if *seen.get(v).unwrap() {
            continue;
        }
        seen[v] = true;
        let in_z = zs.contains(&v);
        if !in_z && ys.contains(&v) {
            return false;
        }
        if up {
            // Trail arrived from a child (or started here).
            if !in_z {
                for &p in &dag.parents[v] {
                    queue.push_back((p, true));
                }
                for &c in &dag.children[v] {
                    queue.push_back((c, false));
                }
            }
        } else {
            // Trail arrived from a parent: v is a collider candidate.
            if !in_z {
                for &c in &dag.children[v] {
                    queue.push_back((c, false));
                }
            }
            if z_anc[v] {
                for &p in &dag.parents[v] {
                    queue.push_back((p, true));
                }
            }
        }
    }
    true
}

/// Causal contrast whose identifiability is being checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphEstimand {
    /// Intervention on early treatment A0.
    Early,
    /// Intervention on later treatment A1.
    Late,
    /// Joint intervention on A0 and A1.
    Joint,
}

impl GraphEstimand {
    pub fn treatments(self) -> &'static [&'static str] {
        match self {
            GraphEstimand::Early => &["A0"],
            GraphEstimand::Late => &["A1"],
            GraphEstimand::Joint => &["A0", "A1"],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GraphEstimand::Early => "EARLY",
            GraphEstimand::Late => "LATE",
            GraphEstimand::Joint => "JOINT",
        }
    }

    pub const ALL: [GraphEstimand; 3] =
        [GraphEstimand::Early, GraphEstimand::Late, GraphEstimand::Joint];
}

/// Outcome of an identifiability query: either a witness adjustment set
/// (possibly empty) drawn from measured nodes, or a concrete open path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityVerdict {
    pub estimand: GraphEstimand,
    pub identifiable: bool,
    pub witness: Option<Vec<String>>,
    pub open_path: Option<Vec<String>>,
}

/// Decide identifiability of `estimand` on `dag` under mandatory
/// conditioning on the graph's `always_conditioned` set. Outcome node is
/// `Y` by convention.
pub fn check_identifiable(dag: &Dag, estimand: GraphEstimand) -> Result<IdentifiabilityVerdict> {
    dag.check_acyclic()?;
    let outcome = dag.resolve("Y")?;
    let treatments: Vec<usize> = estimand
        .treatments()
        .iter()
        .map(|t| dag.resolve(t))
        .collect::<Result<_>>()?;

    let forbidden = dag.descendants_mask(&treatments);
    let latent: BTreeSet<usize> = (0..dag.names.len())
        .filter(|&v| {
            !dag.measured.contains(&v)
                && !dag.always_conditioned.contains(&v)
                && !treatments.contains(&v)
                && v != outcome
        })
        .collect();

    // Candidate pool for the optional adjustment set.
    let pool: Vec<usize> = dag
        .measured
        .iter()
        .copied()
        .filter(|&v| {
            v != outcome
                && !treatments.contains(&v)
                && !forbidden[v]
                && !dag.always_conditioned.contains(&v)
        })
        .collect();

    // Search subsets in increasing size so the witness is minimal.
    let subsets = 1usize << pool.len();
    let mut candidates: Vec<Vec<usize>> = (0..subsets)
        .map(|bits| {
            pool.iter()
                .enumerate()
                .filter(|(i, _)| bits >> i & 1 == 1)
                .map(|(_, &v)| v)
                .collect()
        })
        .collect();
    candidates.sort_by_key(|z| z.len());

    'outer: for z in &candidates {
        for &x in &treatments {
            if !stage_admissible(dag, x, outcome, z, &treatments, &latent) {
                continue 'outer;
            }
        }
        let witness = z.iter().map(|&v| dag.names[v].clone()).collect();
        return Ok(IdentifiabilityVerdict {
            estimand,
            identifiable: true,
            witness: Some(witness),
            open_path: None,
        });
    }

    let open_path = find_open_path(dag, &treatments, outcome, &latent);
    Ok(IdentifiabilityVerdict {
        estimand,
        identifiable: false,
        witness: None,
        open_path: Some(open_path),
    })
}

/// One treatment's stage check: backdoor blocking plus clean-adjustment.
fn stage_admissible(
    dag: &Dag,
    x: usize,
    outcome: usize,
    z: &[usize],
    treatments: &[usize],
    latent: &BTreeSet<usize>,
) -> bool {
    let co_treatments: Vec<usize> =
        treatments.iter().copied().filter(|&t| t != x).collect();
    let mut cond: BTreeSet<usize> = z.iter().copied().collect();
    cond.extend(dag.always_conditioned.iter().copied());
    cond.extend(co_treatments.iter().copied());

    // Backdoor blocking: d-separation in the graph with X's outgoing
    // edges removed leaves exactly the into-X paths.
    let bd_graph = remove_outgoing(dag, x);
    let xs: BTreeSet<usize> = [x].into_iter().collect();
    let ys: BTreeSet<usize> = [outcome].into_iter().collect();
    let cset: BTreeSet<usize> = cond.iter().copied().filter(|&v| v != x && v != outcome).collect();
    if !d_separated_idx(&bd_graph, &xs, &ys, &cset) {
        return false;
    }

    // Clean adjustment: nothing we condition on (beyond the mandatory
    // selection set) may be entangled with a latent cause given the rest.
    let adjusters: Vec<usize> = z
        .iter()
        .copied()
        .chain(co_treatments.iter().copied())
        .collect();
    for &w in &adjusters {
        let rest: BTreeSet<usize> = cond.iter().copied().filter(|&v| v != w).collect();
        for &v in latent {
            if v == w || rest.contains(&v) {
                continue;
            }
            let ws: BTreeSet<usize> = [w].into_iter().collect();
            let vs: BTreeSet<usize> = [v].into_iter().collect();
            if !d_separated_idx(dag, &ws, &vs, &rest) {
                return false;
            }
        }
    }
    true
}

fn remove_outgoing(dag: &Dag, x: usize) -> Dag {
    let mut g = dag.clone();
    for &c in &dag.children[x] {
        g.parents[c].retain(|&p| p != x);
    }
    g.children[x].clear();
    g
}

/// Concrete open path to report alongside a negative verdict. Preference
/// order: a path through both a conditioned selection node and a latent
/// node, then shorter, then lexicographic.
fn find_open_path(
    dag: &Dag,
    treatments: &[usize],
    outcome: usize,
    latent: &BTreeSet<usize>,
) -> Vec<String> {
    let mut best: Option<(i32, usize, Vec<usize>)> = None;
    let mut consider = |dag: &Dag, path: &[usize]| {
        let through_sel = path.iter().any(|v| dag.always_conditioned.contains(v)) as i32;
        let through_latent = path.iter().any(|v| latent.contains(v)) as i32;
        let key = (-(through_sel + through_latent), path.len(), path.to_vec());
        match &best {
            Some(current) if *current <= key => {}
            _ => best = Some(key),
        }
    };

    for &x in treatments {
        let cond: BTreeSet<usize> = dag
            .always_conditioned
            .iter()
            .copied()
            .chain(treatments.iter().copied().filter(|&t| t != x))
            .collect();
        // Enumerate simple backdoor paths from x to the outcome.
        let mut stack = vec![x];
        let mut visited = vec![false; dag.names.len()];
        visited[x] = true;
        enumerate_paths(
            dag,
            x,
            outcome,
            &mut stack,
            &mut visited,
            &mut |path| {
                if path.len() >= 2
                    && dag.children[path[1]].contains(&path[0])
                    && path_open(dag, path, &cond)
                {
                    consider(dag, path);
                }
            },
        );
        // Contamination witnesses: conditioned co-treatment entangled with
        // a latent cause, extended to the outcome along directed edges.
        for &w in &cond {
            if dag.always_conditioned.contains(&w) {
                continue;
            }
            for &v in latent {
                let rest: BTreeSet<usize> =
                    cond.iter().copied().filter(|&c| c != w).collect();
                if let Some(mut path) = open_path_between(dag, w, v, &rest) {
                    if let Some(tail) = directed_path(dag, v, outcome) {
                        path.extend(tail.into_iter().skip(1));
                        if path.iter().collect::<BTreeSet<_>>().len() == path.len() {
                            consider(dag, &path);
                        }
                    }
                }
            }
        }
    }

    match best {
        Some((_, _, path)) => path.into_iter().map(|v| dag.names[v].clone()).collect(),
        None => Vec::new(),
    }
}

fn enumerate_paths(
    dag: &Dag,
    current: usize,
    target: usize,
    stack: &mut Vec<usize>,
    visited: &mut Vec<bool>,
    emit: &mut impl FnMut(&[usize]),
) {
    if current == target {
        emit(stack);
        return;
    }
    let neighbors: Vec<usize> = dag.parents[current]
        .iter()
        .chain(dag.children[current].iter())
        .copied()
        .collect();
    for nb in neighbors {
        if !visited[nb] {
            visited[nb] = true;
            stack.push(nb);
            enumerate_paths(dag, nb, target, stack, visited, emit);
            stack.pop();
            visited[nb] = false;
        }
    }
}

/// Openness of an explicit path given a conditioning set, by the standard
/// chain/fork/collider rules (colliders opened by conditioned descendants).
fn path_open(dag: &Dag, path: &[usize], cond: &BTreeSet<usize>) -> bool {
    let cond_anc = dag.ancestors_mask(cond);
    for w in path.windows(3) {
        let (a, b, c) = (w[0], w[1], w[2]);
        let collider = dag.children[a].contains(&b) && dag.children[c].contains(&b);
        if collider {
            if !cond_anc[b] {
                return false;
            }
        } else if cond.contains(&b) {
            return false;
        }
    }
    true
}

fn open_path_between(
    dag: &Dag,
    from: usize,
    to: usize,
    cond: &BTreeSet<usize>,
) -> Option<Vec<usize>> {
    let mut found: Option<Vec<usize>> = None;
    let mut stack = vec![from];
    let mut visited = vec![false; dag.names.len()];
    visited[from] = true;
    enumerate_paths(dag, from, to, &mut stack, &mut visited, &mut |path| {
        if path_open(dag, path, cond) {
            match &found {
                Some(best) if best.len() <= path.len() => {}
                _ => found = Some(path.to_vec()),
            }
        }
    });
    found
}

fn directed_path(dag: &Dag, from: usize, to: usize) -> Option<Vec<usize>> {
    if from == to {
        return Some(vec![from]);
    }
    let mut prev: Vec<Option<usize>> = vec![None; dag.names.len()];
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for &c in &dag.children[v] {
            if prev[c].is_none() && c != from {
                prev[c] = Some(v);
                if c == to {
                    let mut path = vec![to];
                    let mut cur = to;
                    while let Some(p) = prev[cur] {
                        path.push(p);
                        cur = p;
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back(c);
            }
        }
    }
    None
}

/// The three catalog graphs, exactly as drawn: panel A has randomized
/// early treatment, panel B adds the early-treatment -> selection arrow,
/// panel C adds the latent cause into both treatments. `S` is always
/// conditioned in all three; `U` stays unmeasured unless explicitly added.
pub fn figure3_catalog() -> BTreeMap<&'static str, Dag> {
    let nodes = ["A0", "A1", "S", "U", "Y"];
    let base_edges = [("A0", "A1"), ("A0", "Y"), ("A1", "Y"), ("U", "S"), ("U", "Y")];
    let build = |extra: &[(&'static str, &'static str)]| {
        let mut edges: Vec<(&str, &str)> = base_edges.to_vec();
        edges.extend_from_slice(extra);
        Dag::new(&nodes, &edges)
            .and_then(|d| d.with_measured(&["A0", "A1", "Y"]))
            .and_then(|d| d.with_always_conditioned(&["S"]))
            .expect("catalog graphs are valid")
    };
    let mut catalog = BTreeMap::new();
    catalog.insert("fig3a", build(&[]));
    catalog.insert("fig3b", build(&[("A0", "S")]));
    catalog.insert("fig3c", build(&[("A0", "S"), ("U", "A0"), ("U", "A1")]));
    catalog
}

/// Catalog lookup by name, with an optional `+u` suffix marking the
/// variant where the latent cause is measured (e.g. `fig3c+u`).
pub fn catalog_graph(name: &str) -> Result<Dag> {
    let (base, with_u) = match name.strip_suffix("+u") {
        Some(base) => (base, true),
        None => (name, false),
    };
    let catalog = figure3_catalog();
    let dag = catalog
        .get(base)
        .cloned()
        .ok_or_else(|| Error::config(format!("unknown catalog graph `{name}`")))?;
    if with_u {
        dag.with_measured(&["U"])
    } else {
        Ok(dag)
    }
}
