//! Evolving-graph data model and link-prediction kernels.
//!
//! Snapshots are immutable values per round: mutation helpers clone-on-write
//! and rounds share snapshots behind `Arc`. Neighborhoods are closed: `Γ(v)`
//! contains `v` itself and its immediate neighbors, so the embeddedness of an
//! adjacent pair counts both endpoints.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel::{Kernel, XFn};

const WORD_BITS: usize = 64;

/// Undirected graph snapshot at one round: dense node ids `0..n`, per-node
/// feature vectors, bitset adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolvingGraph {
    time: u64,
    n: usize,
    words: usize,
    features: Arc<Vec<Vec<f64>>>,
    adj: Vec<u64>,
}

impl EvolvingGraph {
    pub fn new(time: u64) -> Self {
        EvolvingGraph { time, n: 0, words: 0, features: Arc::new(Vec::new()), adj: Vec::new() }
    }

    pub fn with_nodes(time: u64, features: Vec<Vec<f64>>) -> Self {
        let n = features.len();
        let words = n.div_ceil(WORD_BITS);
        EvolvingGraph { time, n, words, features: Arc::new(features), adj: vec![0; n * words] }
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn set_time(&mut self, t: u64) {
        self.time = t;
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn contains(&self, v: u32) -> bool {
        (v as usize) < self.n
    }

    pub fn features_of(&self, v: u32) -> Result<&[f64]> {
        self.features
            .get(v as usize)
            .map(|f| f.as_slice())
            .ok_or_else(|| Error::domain(format!("node {v} not in graph")))
    }

    pub fn add_node(&mut self, features: Vec<f64>) -> u32 {
        let id = self.n as u32;
        Arc::make_mut(&mut self.features).push(features);
        self.n += 1;
        let words = self.n.div_ceil(WORD_BITS);
        if words != self.words {
            let mut adj = vec![0u64; self.n * words];
            for v in 0..self.n - 1 {
                adj[v * words..v * words + self.words]
                    .copy_from_slice(&self.adj[v * self.words..(v + 1) * self.words]);
            }
            self.words = words;
            self.adj = adj;
        } else {
            self.adj.extend(std::iter::repeat_n(0, words));
        }
        id
    }

    fn check_pair(&self, i: u32, j: u32) -> Result<()> {
        if i == j {
            return Err(Error::domain("self-loops are not allowed"));
        }
        if !self.contains(i) || !self.contains(j) {
            return Err(Error::domain(format!("node pair ({i}, {j}) not in graph of {} nodes", self.n)));
        }
        Ok(())
    }

    /// Adds the undirected edge; both directions are set so the adjacency
    /// stays symmetric.
    pub fn add_edge(&mut self, i: u32, j: u32) -> Result<()> {
        self.check_pair(i, j)?;
        let (i, j) = (i as usize, j as usize);
        self.adj[i * self.words + j / WORD_BITS] |= 1 << (j % WORD_BITS);
        self.adj[j * self.words + i / WORD_BITS] |= 1 << (i % WORD_BITS);
        Ok(())
    }

    pub fn remove_edge(&mut self, i: u32, j: u32) -> Result<()> {
        self.check_pair(i, j)?;
        let (i, j) = (i as usize, j as usize);
        self.adj[i * self.words + j / WORD_BITS] &= !(1 << (j % WORD_BITS));
        self.adj[j * self.words + i / WORD_BITS] &= !(1 << (i % WORD_BITS));
        Ok(())
    }

    pub fn has_edge(&self, i: u32, j: u32) -> bool {
        if !self.contains(i) || !self.contains(j) {
            return false;
        }
        let (i, j) = (i as usize, j as usize);
        self.adj[i * self.words + j / WORD_BITS] & (1 << (j % WORD_BITS)) != 0
    }

    pub fn degree(&self, v: u32) -> usize {
        let v = v as usize;
        self.adj[v * self.words..(v + 1) * self.words].iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn neighbors(&self, v: u32) -> Vec<u32> {
        let mut out = Vec::new();
        let v = v as usize;
        for (wi, word) in self.adj[v * self.words..(v + 1) * self.words].iter().enumerate() {
            let mut w = *word;
            while w != 0 {
                let b = w.trailing_zeros() as usize;
                out.push((wi * WORD_BITS + b) as u32);
                w &= w - 1;
            }
        }
        out
    }

    /// Closed neighborhood bitset: `v` together with its neighbors.
    fn closed_row(&self, v: u32) -> Vec<u64> {
        let vu = v as usize;
        let mut row = self.adj[vu * self.words..(vu + 1) * self.words].to_vec();
        row[vu / WORD_BITS] |= 1 << (vu % WORD_BITS);
        row
    }

    /// Closed neighborhood as a sorted node list.
    pub fn closed_neighborhood(&self, v: u32) -> Vec<u32> {
        let row = self.closed_row(v);
        let mut out = Vec::new();
        for (wi, word) in row.iter().enumerate() {
            let mut w = *word;
            while w != 0 {
                let b = w.trailing_zeros() as usize;
                out.push((wi * WORD_BITS + b) as u32);
                w &= w - 1;
            }
        }
        out
    }

    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for i in 0..self.n as u32 {
            for j in self.neighbors(i) {
                if j > i {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Serializes to the versioned line-based edge-list format with a
    /// node-feature header block.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#koi-graph v1");
        let _ = writeln!(s, "t {}", self.time);
        for v in 0..self.n {
            let feats: Vec<String> = self.features[v].iter().map(|f| f.to_string()).collect();
            let _ = writeln!(s, "node {} {}", v, feats.join(" "));
        }
        for (i, j) in self.edges() {
            let _ = writeln!(s, "edge {i} {j}");
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty graph file".into() })?;
        if header.trim() != "#koi-graph v1" {
            return Err(Error::Parse { line: 1, msg: format!("unrecognized header {header:?}") });
        }
        let mut time = 0u64;
        let mut features: Vec<Vec<f64>> = Vec::new();
        let mut edges: Vec<(u32, u32)> = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("t") => {
                    time = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "bad time record".into() })?;
                }
                Some("node") => {
                    let id: usize = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "bad node id".into() })?;
                    if id != features.len() {
                        return Err(Error::Parse { line: lineno, msg: format!("node ids must be dense, got {id}") });
                    }
                    let feats: std::result::Result<Vec<f64>, _> = parts.map(|v| v.parse()).collect();
                    features.push(feats.map_err(|_| Error::Parse { line: lineno, msg: "bad node feature".into() })?);
                }
                Some("edge") => {
                    let i = parts.next().and_then(|v| v.parse().ok());
                    let j = parts.next().and_then(|v| v.parse().ok());
                    match (i, j) {
                        (Some(i), Some(j)) => edges.push((i, j)),
                        _ => return Err(Error::Parse { line: lineno, msg: "bad edge record".into() }),
                    }
                }
                other => {
                    return Err(Error::Parse { line: lineno, msg: format!("unknown record {other:?}") });
                }
            }
        }
        let mut g = EvolvingGraph::with_nodes(time, features);
        for (i, j) in edges {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }
}

/// An element of the link-prediction universe: an ordered node pair together
/// with the graph snapshot it lives in.
#[derive(Clone, Debug)]
pub struct UniverseElement {
    pub pair: (u32, u32),
    pub graph: Arc<EvolvingGraph>,
}

impl UniverseElement {
    pub fn new(i: u32, j: u32, graph: Arc<EvolvingGraph>) -> Result<Self> {
        if i == j {
            return Err(Error::domain("universe element requires two distinct nodes"));
        }
        if !graph.contains(i) || !graph.contains(j) {
            return Err(Error::domain(format!("pair ({i}, {j}) not present in graph")));
        }
        Ok(UniverseElement { pair: (i, j), graph })
    }
}

/// Number of common closed-neighborhood members of the pair. Since Γ is
/// closed, an adjacent pair contributes both of its own endpoints.
pub fn embeddedness(u: &UniverseElement) -> Result<usize> {
    let (i, j) = u.pair;
    if !u.graph.contains(i) || !u.graph.contains(j) {
        return Err(Error::domain(format!("pair ({i}, {j}) missing from graph")));
    }
    let a = u.graph.closed_row(i);
    let b = u.graph.closed_row(j);
    Ok(a.iter().zip(&b).map(|(x, y)| (x & y).count_ones() as usize).sum())
}

/// A finite list of named group indicators over node features, with the
/// declared bound on simultaneous memberships.
#[derive(Clone)]
pub struct GroupFamily {
    groups: Vec<(String, Arc<dyn Fn(&[f64]) -> bool + Send + Sync>)>,
    pub max_memberships: usize,
}

impl GroupFamily {
    pub fn new(groups: Vec<(String, Arc<dyn Fn(&[f64]) -> bool + Send + Sync>)>, max_memberships: usize) -> Self {
        GroupFamily { groups, max_memberships }
    }

    /// One group per feature coordinate: member iff `z[g] > 0.5`.
    pub fn one_hot(m: usize) -> Self {
        let groups = (0..m)
            .map(|g| {
                let f: Arc<dyn Fn(&[f64]) -> bool + Send + Sync> =
                    Arc::new(move |z: &[f64]| z.get(g).is_some_and(|v| *v > 0.5));
                (format!("g{g}"), f)
            })
            .collect();
        GroupFamily { groups, max_memberships: m }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.groups[idx].0
    }

    pub fn member(&self, idx: usize, z: &[f64]) -> bool {
        (self.groups[idx].1)(z)
    }

    /// Membership bitmask of a feature vector (groups must number <= 64).
    pub fn mask(&self, z: &[f64]) -> u64 {
        let mut m = 0u64;
        for (g, (_, f)) in self.groups.iter().enumerate() {
            if f(z) {
                m |= 1 << g;
            }
        }
        m
    }
}

fn pair_masks(u: &UniverseElement, groups: &GroupFamily) -> Result<(u64, u64)> {
    let (i, j) = u.pair;
    Ok((groups.mask(u.graph.features_of(i)?), groups.mask(u.graph.features_of(j)?)))
}

/// Count of ordered group pairs (g, g') containing both elements' pairs
/// simultaneously: |G(z_i) ∩ G(z_i')| * |G(z_j) ∩ G(z_j')|.
pub fn pair_groups_count(u: &UniverseElement, v: &UniverseElement, groups: &GroupFamily) -> Result<f64> {
    let (gi, gj) = pair_masks(u, groups)?;
    let (hi, hj) = pair_masks(v, groups)?;
    Ok(((gi & hi).count_ones() * (gj & hj).count_ones()) as f64)
}

/// Grid indicator times the ordered-group-pair count; diagonal at most m^2.
pub fn pair_groups_kernel(groups: &GroupFamily, bins: u32) -> Kernel<UniverseElement> {
    let m = groups.max_memberships as f64;
    let g = groups.clone();
    let xf: XFn<UniverseElement> = Arc::new(move |u, v| pair_groups_count(u, v, &g));
    let xk = Kernel::from_x_fn(&format!("(pairgroups {})", groups.len()), Some(m * m), xf);
    Kernel::product(vec![xk, Kernel::grid(bins)])
        .with_desc(&format!("(pairgroups {} {bins})", groups.len()))
        .with_diag_bound(m * m)
}

/// 1 iff embeddedness values are equal and the predictions share a grid bin.
pub fn embeddedness_kernel(bins: u32) -> Kernel<UniverseElement> {
    let xf: XFn<UniverseElement> =
        Arc::new(move |u, v| Ok(if embeddedness(u)? == embeddedness(v)? { 1.0 } else { 0.0 }));
    let xk = Kernel::from_x_fn("(em-match)", Some(1.0), xf);
    Kernel::product(vec![xk, Kernel::grid(bins)])
        .with_desc(&format!("(embeddedness {bins})"))
        .with_diag_bound(1.0)
}

/// Canonical form of the subgraph induced by Γ(i) ∪ Γ(j), with the pair
/// marked as two distinguished vertices. Two elements get the same canon iff
/// there is an isomorphism matching i to i' and j to j'.
pub fn local_canonical_form(u: &UniverseElement, max_nodes: usize) -> Result<u128> {
    let (i, j) = u.pair;
    let mut nodes = u.graph.closed_neighborhood(i);
    for v in u.graph.closed_neighborhood(j) {
        if !nodes.contains(&v) {
            nodes.push(v);
        }
    }
    nodes.sort_unstable();
    let n = nodes.len();
    // The encoding uses 16-bit rows and a 120-bit upper triangle.
    let cap = max_nodes.min(16);
    if n > cap {
        return Err(Error::SubgraphSize { nodes: n, max: cap });
    }

    // Local adjacency among `nodes`, in sorted-id order.
    let mut adj = vec![0u16; n];
    for (a, &va) in nodes.iter().enumerate() {
        for (b, &vb) in nodes.iter().enumerate() {
            if u.graph.has_edge(va, vb) {
                adj[a] |= 1 << b;
            }
        }
    }
    let pos_i = nodes.iter().position(|&v| v == i).expect("pair node in own neighborhood");
    let pos_j = nodes.iter().position(|&v| v == j).expect("pair node in own neighborhood");

    // Unmarked nodes grouped by degree; any mark-respecting isomorphism
    // preserves degrees, so it suffices to search degree-preserving
    // placements.
    let mut rest: Vec<usize> = (0..n).filter(|&v| v != pos_i && v != pos_j).collect();
    rest.sort_by_key(|&v| (adj[v].count_ones(), v));

    // perm[slot] = original node occupying canonical slot; slots 0 and 1 are
    // pinned to the marked pair.
    let mut perm: Vec<usize> = Vec::with_capacity(n);
    perm.push(pos_i);
    perm.push(pos_j);
    perm.extend(&rest);

    let encode = |perm: &[usize]| -> u128 {
        let mut code: u128 = 0;
        let mut bit = 0;
        for a in 0..n {
            for b in (a + 1)..n {
                if adj[perm[a]] & (1 << perm[b]) != 0 {
                    code |= 1 << bit;
                }
                bit += 1;
            }
        }
        code
    };

    let mut best = encode(&perm);
    // Enumerate permutations of the unmarked slots within equal-degree
    // classes only.
    let classes: Vec<(usize, usize)> = {
        let mut out = Vec::new();
        let mut start = 0;
        while start < rest.len() {
            let deg = adj[rest[start]].count_ones();
            let mut end = start + 1;
            while end < rest.len() && adj[rest[end]].count_ones() == deg {
                end += 1;
            }
            out.push((start + 2, end + 2)); // slot range in `perm`
            start = end;
        }
        out
    };

    fn search(perm: &mut Vec<usize>, classes: &[(usize, usize)], c: usize, from: usize, encode: &dyn Fn(&[usize]) -> u128, best: &mut u128) {
        if c == classes.len() {
            let code = encode(perm);
            if code < *best {
                *best = code;
            }
            return;
        }
        let (lo, hi) = classes[c];
        let i = from.max(lo);
        if i >= hi {
            search(perm, classes, c + 1, 0, encode, best);
            return;
        }
        for k in i..hi {
            perm.swap(i, k);
            search(perm, classes, c, i + 1, encode, best);
            perm.swap(i, k);
        }
    }
    search(&mut perm, &classes, 0, 0, &encode, &mut best);
    // Fold the size in so graphs of different orders never collide.
    Ok(best ^ ((n as u128) << 120))
}

/// 1 iff the marked local neighborhoods are isomorphic and the predictions
/// share a grid bin.
pub fn isomorphism_kernel(bins: u32, max_nodes: usize) -> Kernel<UniverseElement> {
    let xf: XFn<UniverseElement> = Arc::new(move |u, v| {
        Ok(if local_canonical_form(u, max_nodes)? == local_canonical_form(v, max_nodes)? { 1.0 } else { 0.0 })
    });
    let xk = Kernel::from_x_fn("(iso-match)", Some(1.0), xf);
    Kernel::product(vec![xk, Kernel::grid(bins)])
        .with_desc(&format!("(isomorphism {bins} {max_nodes})"))
        .with_diag_bound(1.0)
}

/// R-convolution: sum of the node-feature kernel over the two elements'
/// neighborhood products.
pub fn r_convolution_kernel(
    node_feature_kernel: Arc<dyn Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync>,
    diag_bound: Option<f64>,
) -> Kernel<UniverseElement> {
    let xf: XFn<UniverseElement> = Arc::new(move |u, v| {
        let mut nu = u.graph.closed_neighborhood(u.pair.0);
        for w in u.graph.closed_neighborhood(u.pair.1) {
            if !nu.contains(&w) {
                nu.push(w);
            }
        }
        let mut nv = v.graph.closed_neighborhood(v.pair.0);
        for w in v.graph.closed_neighborhood(v.pair.1) {
            if !nv.contains(&w) {
                nv.push(w);
            }
        }
        let mut acc = 0.0;
        for a in &nu {
            let za = u.graph.features_of(*a)?;
            for b in &nv {
                acc += node_feature_kernel(za, v.graph.features_of(*b)?)?;
            }
        }
        Ok(acc)
    });
    Kernel::from_x_fn("(rconv)", diag_bound, xf)
}
