//! Aggregation hierarchies and the summing matrix `S`.
//!
//! A hierarchy is a strict rooted tree. Its nodes are ordered breadth-first
//! from the root (children in edge insertion order) with every leaf moved to
//! the end in the caller-supplied bottom order, so the last `m` rows of `S`
//! form the identity and `y = S b` holds for every coherent vector `y`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coarse level used by the level-averaged accuracy measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LevelClass {
    Top,
    Middle,
    Bottom,
}

impl LevelClass {
    pub const ALL: [LevelClass; 3] = [LevelClass::Top, LevelClass::Middle, LevelClass::Bottom];

    pub fn index(self) -> usize {
        match self {
            LevelClass::Top => 0,
            LevelClass::Middle => 1,
            LevelClass::Bottom => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LevelClass::Top => "top",
            LevelClass::Middle => "middle",
            LevelClass::Bottom => "bottom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "top" => Some(LevelClass::Top),
            "middle" => Some(LevelClass::Middle),
            "bottom" => Some(LevelClass::Bottom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    level: Vec<usize>,
    m_bottom: usize,
}

impl Hierarchy {
    /// Builds a hierarchy from `(parent, child)` edges and the order of the
    /// leaf nodes. With no edges, `bottom_order` must name the single node.
    pub fn build<P, C, B>(edges: &[(P, C)], bottom_order: &[B]) -> Result<Self>
    where
        P: AsRef<str>,
        C: AsRef<str>,
        B: AsRef<str>,
    {
        let bottom_order: Vec<&str> = bottom_order.iter().map(AsRef::as_ref).collect();
        if edges.is_empty() {
            return match bottom_order.as_slice() {
                [only] => Ok(Self::single(only)),
                _ => Err(Error::Hierarchy(format!(
                    "no edges given but bottom order lists {} nodes",
                    bottom_order.len()
                ))),
            };
        }

        // Interning in first-appearance order.
        let mut ids: Vec<&str> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        let mut raw_edges = Vec::with_capacity(edges.len());
        for (p, c) in edges {
            let (p, c) = (p.as_ref(), c.as_ref());
            if p.is_empty() || c.is_empty() {
                return Err(Error::Hierarchy("empty node id in edge list".into()));
            }
            let mut ends = [0usize; 2];
            for (slot, id) in ends.iter_mut().zip([p, c]) {
                *slot = *pos.entry(id).or_insert_with(|| {
                    ids.push(id);
                    ids.len() - 1
                });
            }
            raw_edges.push((ends[0], ends[1]));
        }
        let n = ids.len();

        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut seen = HashSet::new();
        for &(p, c) in &raw_edges {
            if p == c {
                return Err(Error::Hierarchy(format!("cycle detected at node '{}'", ids[p])));
            }
            if !seen.insert((p, c)) {
                return Err(Error::Hierarchy(format!(
                    "duplicate edge '{}' -> '{}'",
                    ids[p], ids[c]
                )));
            }
            if let Some(existing) = parent[c] {
                return Err(Error::Hierarchy(format!(
                    "node '{}' has two parents ('{}' and '{}'); only trees are supported",
                    ids[c], ids[existing], ids[p]
                )));
            }
            parent[c] = Some(p);
            children[p].push(c);
        }

        let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        let root = match roots.as_slice() {
            [] => return Err(Error::Hierarchy("cycle detected: no root node".into())),
            [r] => *r,
            many => {
                let names: Vec<&str> = many.iter().map(|&i| ids[i]).collect();
                return Err(Error::Hierarchy(format!("multiple roots: {}", names.join(", "))));
            }
        };

        let mut bfs = Vec::with_capacity(n);
        let mut depth = vec![0usize; n];
        let mut queue = VecDeque::from([root]);
        let mut visited = vec![false; n];
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            bfs.push(v);
            for &c in &children[v] {
                if !visited[c] {
                    visited[c] = true;
                    depth[c] = depth[v] + 1;
                    queue.push_back(c);
                }
            }
        }
        if bfs.len() != n {
            let stuck: Vec<&str> = (0..n).filter(|&i| !visited[i]).map(|i| ids[i]).collect();
            return Err(Error::Hierarchy(format!(
                "cycle detected among nodes: {}",
                stuck.join(", ")
            )));
        }

        let leaves: HashSet<&str> = (0..n).filter(|&i| children[i].is_empty()).map(|i| ids[i]).collect();
        let mut listed = HashSet::new();
        for b in &bottom_order {
            if !listed.insert(*b) {
                return Err(Error::Hierarchy(format!("bottom order lists '{b}' twice")));
            }
            if !leaves.contains(b) {
                return Err(Error::Hierarchy(format!(
                    "bottom order mismatch: '{b}' is not a leaf of the tree"
                )));
            }
        }
        if listed.len() != leaves.len() {
            let mut missing: Vec<&str> = leaves.difference(&listed).copied().collect();
            missing.sort_unstable();
            return Err(Error::Hierarchy(format!(
                "bottom order mismatch: leaves missing from bottom order: {}",
                missing.join(", ")
            )));
        }

        let mut order: Vec<usize> = bfs.into_iter().filter(|&i| !children[i].is_empty()).collect();
        order.extend(bottom_order.iter().map(|b| pos[b]));

        let mut remap = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let nodes: Vec<String> = order.iter().map(|&i| ids[i].to_string()).collect();
        let index = nodes.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let parent = order.iter().map(|&i| parent[i].map(|p| remap[p])).collect();
        let children = order
            .iter()
            .map(|&i| children[i].iter().map(|&c| remap[c]).collect())
            .collect();
        let level = order.iter().map(|&i| depth[i]).collect();

        Ok(Self {
            nodes,
            index,
            parent,
            children,
            level,
            m_bottom: bottom_order.len(),
        })
    }

    fn single(id: &str) -> Self {
        Self {
            nodes: vec![id.to_string()],
            index: HashMap::from([(id.to_string(), 0)]),
            parent: vec![None],
            children: vec![Vec::new()],
            level: vec![0],
            m_bottom: 1,
        }
    }

    /// Reads a `parent_id,child_id` edge CSV and a one-id-per-line bottom
    /// order file.
    pub fn from_files(edges_path: &Path, bottom_order_path: &Path) -> Result<Self> {
        let edges = read_edges_csv(edges_path)?;
        let bottom = read_bottom_order(bottom_order_path)?;
        Self::build(&edges, &bottom)
    }

    /// Total node count (`N_h`).
    pub fn n_total(&self) -> usize {
        self.nodes.len()
    }

    /// Bottom node count (`N_b`, `m`).
    pub fn m_bottom(&self) -> usize {
        self.m_bottom
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn bottom_order(&self) -> &[String] {
        &self.nodes[self.n_total() - self.m_bottom..]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn parent_of(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children_of(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Depth below the root (root is 0).
    pub fn level_of(&self, node: usize) -> usize {
        self.level[node]
    }

    pub fn is_bottom(&self, node: usize) -> bool {
        node >= self.n_total() - self.m_bottom
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn level_class(&self, node: usize) -> LevelClass {
        if node == self.root() {
            LevelClass::Top
        } else if self.is_bottom(node) {
            LevelClass::Bottom
        } else {
            LevelClass::Middle
        }
    }

    /// Edges in node order, for persistence.
    pub fn edges(&self) -> Vec<(String, String)> {
        (0..self.n_total())
            .flat_map(|p| {
                self.children[p]
                    .iter()
                    .map(move |&c| (self.nodes[p].clone(), self.nodes[c].clone()))
            })
            .collect()
    }
}

pub fn read_edges_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))
    };
    let (pc, cc) = (col("parent_id")?, col("child_id")?);
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        edges.push((rec[pc].to_string(), rec[cc].to_string()));
    }
    Ok(edges)
}

pub fn read_bottom_order(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Dense `n_total x m_bottom` 0/1 matrix mapping bottom series to every node.
#[derive(Debug, Clone, PartialEq)]
pub struct SummingMatrix {
    entries: DMatrix<f64>,
    row_order: Vec<String>,
    col_order: Vec<String>,
}

impl SummingMatrix {
    pub fn new(h: &Hierarchy) -> Self {
        let (n, m) = (h.n_total(), h.m_bottom());
        let offset = n - m;
        let mut entries = DMatrix::zeros(n, m);
        for j in 0..m {
            let mut v = Some(offset + j);
            while let Some(node) = v {
                entries[(node, j)] = 1.0;
                v = h.parent_of(node);
            }
        }
        Self {
            entries,
            row_order: h.nodes().to_vec(),
            col_order: h.bottom_order().to_vec(),
        }
    }

    pub fn n_total(&self) -> usize {
        self.entries.nrows()
    }

    pub fn m_bottom(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn row_order(&self) -> &[String] {
        &self.row_order
    }

    pub fn col_order(&self) -> &[String] {
        &self.col_order
    }

    /// `S b`. Only unit entries contribute, so bottom rows reproduce `b`
    /// bit-for-bit.
    pub fn aggregate_bottom(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.m_bottom() {
            return Err(Error::Dimension {
                what: "bottom vector",
                expected: self.m_bottom(),
                got: b.len(),
            });
        }
        Ok((0..self.n_total())
            .map(|i| {
                let mut acc = 0.0;
                let mut first = true;
                for (j, &bj) in b.iter().enumerate() {
                    if self.entries[(i, j)] == 1.0 {
                        acc = if first { bj } else { acc + bj };
                        first = false;
                    }
                }
                acc
            })
            .collect())
    }

    /// Checks `|y - S y_bottom| <= tol (1 + |y|)` componentwise.
    pub fn coherence_check(&self, y: &[f64], tol: f64) -> Result<Coherence> {
        if y.len() != self.n_total() {
            return Err(Error::Dimension {
                what: "coherence vector",
                expected: self.n_total(),
                got: y.len(),
            });
        }
        let bottom = &y[self.n_total() - self.m_bottom()..];
        let implied = self.aggregate_bottom(bottom)?;
        let mut coherent = true;
        let mut max_violation: f64 = 0.0;
        for (yi, si) in y.iter().zip(&implied) {
            let v = (yi - si).abs();
            if !(v <= tol * (1.0 + yi.abs())) {
                coherent = false;
            }
            max_violation = if v.is_nan() { f64::NAN } else { max_violation.max(v) };
        }
        Ok(Coherence {
            coherent,
            max_violation,
        })
    }

    pub fn structural_weights(&self) -> StructuralWeights {
        let ones = vec![1.0; self.m_bottom()];
        StructuralWeights {
            lambda_diag: self.aggregate_bottom(&ones).expect("length matches by construction"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coherence {
    pub coherent: bool,
    pub max_violation: f64,
}

/// Diagonal of `Λ = diag(S 1)`: bottom-descendant counts per node.
///
/// The structural MinT error covariance is `W = k Λ` for some unknown
/// `k > 0`. The scalar cancels in the projection, so only `Λ` is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralWeights {
    pub lambda_diag: Vec<f64>,
}

/// Built-in store hierarchy used by M5-shaped data: one total, three states
/// and ten stores (4/3/3).
pub fn m5_store_tree() -> Hierarchy {
    let edges = [
        ("Total", "CA"),
        ("Total", "TX"),
        ("Total", "WI"),
        ("CA", "CA_1"),
        ("CA", "CA_2"),
        ("CA", "CA_3"),
        ("CA", "CA_4"),
        ("TX", "TX_1"),
        ("TX", "TX_2"),
        ("TX", "TX_3"),
        ("WI", "WI_1"),
        ("WI", "WI_2"),
        ("WI", "WI_3"),
    ];
    let bottoms = [
        "CA_1", "CA_2", "CA_3", "CA_4", "TX_1", "TX_2", "TX_3", "WI_1", "WI_2", "WI_3",
    ];
    Hierarchy::build(&edges, &bottoms).expect("static tree is valid")
}
