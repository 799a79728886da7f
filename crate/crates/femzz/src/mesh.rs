//! Hierarchical conforming triangulations stored as a binary bisection tree.
//!
//! Elements are bisected at the edge between local vertices 0 and 1 (the edge
//! opposite the newest vertex, which is always local vertex 2). Children are
//! ordered: child 0 gets vertices (v2, v0, m), child 1 gets (v1, v2, m), with
//! m the bisection midpoint. The tree only grows; coarsening moves the active
//! leaf front up without deleting nodes, so earlier leaf sections remain valid
//! views of the same tree.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

pub type VertexId = usize;
pub type ElemId = usize;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("element {0} is not a leaf of the current triangulation")]
    NotALeaf(ElemId),
    #[error("conforming closure did not terminate (incompatible macro mesh?)")]
    ClosureOverflow,
    #[error("degenerate element {0} (zero area)")]
    Degenerate(ElemId),
    #[error("mesh has no leaves")]
    Empty,
    #[error("snapshot parse error: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy)]
pub struct Vertex {
    pub coords: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Element {
    pub vertices: [VertexId; 3],
    pub parent: Option<ElemId>,
    pub children: Option<[ElemId; 2]>,
    pub generation: u32,
    /// Boundary marker for edge i (the edge opposite vertex i).
    pub boundary: [bool; 3],
}

impl Element {
    /// Endpoints of the refinement edge (local vertices 0 and 1).
    pub fn refinement_edge(&self) -> (VertexId, VertexId) {
        (self.vertices[0], self.vertices[1])
    }

    pub fn edge(&self, e: usize) -> (VertexId, VertexId) {
        (self.vertices[(e + 1) % 3], self.vertices[(e + 2) % 3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Domain {
    /// The square (-1,1) x (-1,1).
    SquareScaled,
    /// The L-shape (-1,1)^2 minus [0,1] x [-1,0].
    LShape,
    /// The unit square (0,1) x (0,1).
    UnitSquare,
}

impl Domain {
    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "square" | "square-scaled" => Some(Domain::SquareScaled),
            "l-shape" | "lshape" => Some(Domain::LShape),
            "unit-square" => Some(Domain::UnitSquare),
            _ => None,
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Domain::SquareScaled | Domain::LShape => 2.0 * std::f64::consts::SQRT_2,
            Domain::UnitSquare => std::f64::consts::SQRT_2,
        }
    }
}

/// A sibling pair eligible for joint un-bisection.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub parent: ElemId,
    pub children: [ElemId; 2],
}

/// All leaves around one bisection vertex whose removal keeps the mesh
/// conforming: one pair at a boundary vertex, two pairs at an interior one.
#[derive(Debug, Clone)]
pub struct CoarsenPatch {
    pub vertex: VertexId,
    pub pairs: Vec<PatchPair>,
}

impl CoarsenPatch {
    pub fn leaf_ids(&self) -> impl Iterator<Item = ElemId> + '_ {
        self.pairs.iter().flat_map(|p| p.children.iter().copied())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RefineReport {
    pub bisections: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CoarsenReport {
    pub applied: usize,
    pub skipped: Vec<VertexId>,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub domain: Option<Domain>,
    vertices: Vec<Vertex>,
    elements: Vec<Element>,
    roots: Vec<ElemId>,
    active: BTreeSet<ElemId>,
    edge_leaves: HashMap<(VertexId, VertexId), Vec<ElemId>>,
    edge_midpoint: HashMap<(VertexId, VertexId), VertexId>,
    domain_area: f64,
}

fn edge_key(a: VertexId, b: VertexId) -> (VertexId, VertexId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    /// Build a mesh from macro triangles. Boundary edges are detected as the
    /// edges shared by a single triangle. Local vertex order encodes the
    /// refinement edge (v0, v1); callers must supply a compatible assignment.
    pub fn from_macro(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Mesh {
        let mut edge_count: HashMap<(VertexId, VertexId), usize> = HashMap::new();
        for t in &triangles {
            for e in 0..3 {
                let key = edge_key(t[(e + 1) % 3], t[(e + 2) % 3]);
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        let vertices: Vec<Vertex> = vertices.into_iter().map(|coords| Vertex { coords }).collect();
        let mut mesh = Mesh {
            domain: None,
            vertices,
            elements: Vec::new(),
            roots: Vec::new(),
            active: BTreeSet::new(),
            edge_leaves: HashMap::new(),
            edge_midpoint: HashMap::new(),
            domain_area: 0.0,
        };
        for t in triangles {
            let mut boundary = [false; 3];
            for (e, flag) in boundary.iter_mut().enumerate() {
                let key = edge_key(t[(e + 1) % 3], t[(e + 2) % 3]);
                *flag = edge_count[&key] == 1;
            }
            let id = mesh.elements.len();
            mesh.elements.push(Element {
                vertices: t,
                parent: None,
                children: None,
                generation: 0,
                boundary,
            });
            mesh.roots.push(id);
            mesh.activate(id);
            mesh.domain_area += mesh.area(id);
        }
        mesh
    }

    pub fn macro_mesh(domain: Domain) -> Mesh {
        let mut mesh = match domain {
            Domain::SquareScaled => square_macro(-1.0, 1.0),
            Domain::UnitSquare => square_macro(0.0, 1.0),
            Domain::LShape => {
                let vertices = vec![
                    [-1.0, -1.0], // 0
                    [0.0, -1.0],  // 1
                    [0.0, 0.0],   // 2 re-entrant corner
                    [-1.0, 0.0],  // 3
                    [-1.0, 1.0],  // 4
                    [0.0, 1.0],   // 5
                    [1.0, 0.0],   // 6
                    [1.0, 1.0],   // 7
                ];
                // refinement edge (v0, v1) is the diagonal of each unit square
                let triangles = vec![
                    [2, 0, 1],
                    [0, 2, 3],
                    [2, 4, 3],
                    [4, 2, 5],
                    [7, 2, 6],
                    [2, 7, 5],
                ];
                Mesh::from_macro(vertices, triangles)
            }
        };
        mesh.domain = Some(domain);
        mesh
    }

    pub fn vertex(&self, v: VertexId) -> [f64; 2] {
        self.vertices[v].coords
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn element(&self, e: ElemId) -> &Element {
        &self.elements[e]
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn is_leaf(&self, e: ElemId) -> bool {
        self.active.contains(&e)
    }

    /// Current leaf section, sorted by element id.
    pub fn leaves(&self) -> Vec<ElemId> {
        self.active.iter().copied().collect()
    }

    pub fn num_leaves(&self) -> usize {
        self.active.len()
    }

    /// Replace the active section (e.g. to restore the triangulation of an
    /// earlier timestep). The caller must pass a leaf section of this tree.
    pub fn set_section(&mut self, leaves: &[ElemId]) {
        self.active.clear();
        self.edge_leaves.clear();
        for &e in leaves {
            self.activate(e);
        }
    }

    pub fn element_coords(&self, e: ElemId) -> [[f64; 2]; 3] {
        let el = &self.elements[e];
        [
            self.vertices[el.vertices[0]].coords,
            self.vertices[el.vertices[1]].coords,
            self.vertices[el.vertices[2]].coords,
        ]
    }

    pub fn area(&self, e: ElemId) -> f64 {
        triangle_area(&self.element_coords(e))
    }

    /// Longest edge of the element.
    pub fn diameter(&self, e: ElemId) -> f64 {
        let c = self.element_coords(e);
        let mut h: f64 = 0.0;
        for i in 0..3 {
            let j = (i + 1) % 3;
            h = h.max(dist(c[i], c[j]));
        }
        h
    }

    pub fn total_leaf_area(&self) -> f64 {
        self.active.iter().map(|&e| self.area(e)).sum()
    }

    pub fn domain_area(&self) -> f64 {
        self.domain_area
    }

    /// Per-leaf h_K (longest edge) and the global maximum.
    pub fn mesh_size(&self) -> (Vec<(ElemId, f64)>, f64) {
        let mut per_leaf = Vec::with_capacity(self.active.len());
        let mut max: f64 = 0.0;
        for &e in &self.active {
            let h = self.diameter(e);
            max = max.max(h);
            per_leaf.push((e, h));
        }
        (per_leaf, max)
    }

    /// mu = min over leaves of inradius / longest edge.
    pub fn shape_regularity(&self) -> Result<f64, MeshError> {
        if self.active.is_empty() {
            return Err(MeshError::Empty);
        }
        let mut mu = f64::INFINITY;
        for &e in &self.active {
            let c = self.element_coords(e);
            let area = triangle_area(&c);
            if area <= 0.0 {
                return Err(MeshError::Degenerate(e));
            }
            let perimeter = dist(c[0], c[1]) + dist(c[1], c[2]) + dist(c[2], c[0]);
            let inradius = 2.0 * area / perimeter;
            let h = self.diameter(e);
            mu = mu.min(inradius / h);
        }
        Ok(mu)
    }

    fn activate(&mut self, e: ElemId) {
        self.active.insert(e);
        let el = self.elements[e].clone();
        for i in 0..3 {
            let (a, b) = el.edge(i);
            self.edge_leaves.entry(edge_key(a, b)).or_default().push(e);
        }
    }

    fn deactivate(&mut self, e: ElemId) {
        self.active.remove(&e);
        let el = self.elements[e].clone();
        for i in 0..3 {
            let (a, b) = el.edge(i);
            if let Some(v) = self.edge_leaves.get_mut(&edge_key(a, b)) {
                v.retain(|&x| x != e);
            }
        }
    }

    /// Active leaf sharing the given edge, other than `e`.
    fn neighbor_across(&self, e: ElemId, a: VertexId, b: VertexId) -> Option<ElemId> {
        self.edge_leaves
            .get(&edge_key(a, b))?
            .iter()
            .copied()
            .find(|&x| x != e)
    }

    fn midpoint(&mut self, a: VertexId, b: VertexId) -> VertexId {
        let key = edge_key(a, b);
        if let Some(&m) = self.edge_midpoint.get(&key) {
            return m;
        }
        let pa = self.vertices[a].coords;
        let pb = self.vertices[b].coords;
        let m = self.vertices.len();
        self.vertices.push(Vertex {
            coords: [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])],
        });
        self.edge_midpoint.insert(key, m);
        m
    }

    /// Bisect a single leaf, reusing previously created children if the
    /// element was coarsened earlier.
    fn bisect(&mut self, e: ElemId) {
        debug_assert!(self.is_leaf(e));
        self.deactivate(e);
        if let Some([c0, c1]) = self.elements[e].children {
            self.activate(c0);
            self.activate(c1);
            return;
        }
        let el = self.elements[e].clone();
        let [v0, v1, v2] = el.vertices;
        let m = self.midpoint(v0, v1);
        let gen = el.generation + 1;
        let c0 = self.elements.len();
        self.elements.push(Element {
            vertices: [v2, v0, m],
            parent: Some(e),
            children: None,
            generation: gen,
            boundary: [el.boundary[2], false, el.boundary[1]],
        });
        let c1 = self.elements.len();
        self.elements.push(Element {
            vertices: [v1, v2, m],
            parent: Some(e),
            children: None,
            generation: gen,
            boundary: [false, el.boundary[2], el.boundary[0]],
        });
        self.elements[e].children = Some([c0, c1]);
        self.activate(c0);
        self.activate(c1);
    }

    /// Bisect `e` after recursively making its refinement-edge neighbourhood
    /// compatible; the compatible neighbour is bisected in the same step.
    fn bisect_compatible(
        &mut self,
        e: ElemId,
        report: &mut RefineReport,
        depth: usize,
    ) -> Result<(), MeshError> {
        if depth > 500 {
            return Err(MeshError::ClosureOverflow);
        }
        loop {
            if !self.is_leaf(e) {
                return Ok(());
            }
            let (a, b) = self.elements[e].refinement_edge();
            match self.neighbor_across(e, a, b) {
                None => {
                    self.bisect(e);
                    report.bisections += 1;
                    return Ok(());
                }
                Some(ne) => {
                    let ne_edge = self.elements[ne].refinement_edge();
                    if edge_key(ne_edge.0, ne_edge.1) == edge_key(a, b) {
                        self.bisect(ne);
                        self.bisect(e);
                        report.bisections += 2;
                        return Ok(());
                    }
                    self.bisect_compatible(ne, report, depth + 1)?;
                }
            }
        }
    }

    /// Bisect every marked leaf, applying conforming closure.
    pub fn refine(&mut self, marked: &[ElemId]) -> Result<RefineReport, MeshError> {
        for &e in marked {
            if !self.is_leaf(e) {
                return Err(MeshError::NotALeaf(e));
            }
        }
        let mut report = RefineReport::default();
        for &e in marked {
            if self.is_leaf(e) {
                self.bisect_compatible(e, &mut report, 0)?;
            }
        }
        Ok(report)
    }

    pub fn refine_all(&mut self) -> Result<RefineReport, MeshError> {
        let all = self.leaves();
        self.refine(&all)
    }

    /// Uniformly bisect until the maximal mesh size is at most `h_target`.
    pub fn refine_uniform_to(&mut self, h_target: f64) -> Result<(), MeshError> {
        let tol = 1.0 + 1e-9;
        while self.mesh_size().1 > h_target * tol {
            self.refine_all()?;
        }
        Ok(())
    }

    /// All patches whose joint un-bisection removes one vertex and keeps the
    /// mesh conforming, sorted by removed vertex id.
    pub fn coarsenable_patches(&self) -> Vec<CoarsenPatch> {
        let mut by_vertex: BTreeMap<VertexId, Vec<ElemId>> = BTreeMap::new();
        for &e in &self.active {
            for &v in &self.elements[e].vertices {
                by_vertex.entry(v).or_default().push(e);
            }
        }
        let mut patches = Vec::new();
        'vertex: for (&v, leaves) in &by_vertex {
            let mut parents: BTreeMap<ElemId, Vec<ElemId>> = BTreeMap::new();
            for &e in leaves {
                let el = &self.elements[e];
                // every leaf holding v must have v as its newest vertex
                if el.vertices[2] != v {
                    continue 'vertex;
                }
                let parent = match el.parent {
                    Some(p) => p,
                    None => continue 'vertex,
                };
                parents.entry(parent).or_default().push(e);
            }
            let mut pairs = Vec::new();
            for (parent, children) in parents {
                if children.len() != 2 {
                    continue 'vertex; // sibling is not a leaf
                }
                let [c0, c1] = self.elements[parent].children.expect("parent has children");
                if !(children.contains(&c0) && children.contains(&c1)) {
                    continue 'vertex;
                }
                pairs.push(PatchPair { parent, children: [c0, c1] });
            }
            if pairs.is_empty() {
                continue;
            }
            patches.push(CoarsenPatch { vertex: v, pairs });
        }
        patches
    }

    fn patch_still_valid(&self, patch: &CoarsenPatch) -> bool {
        for pair in &patch.pairs {
            let [c0, c1] = pair.children;
            if !self.is_leaf(c0) || !self.is_leaf(c1) {
                return false;
            }
            if self.elements[pair.parent].children != Some([c0, c1]) {
                return false;
            }
            if self.elements[c0].vertices[2] != patch.vertex
                || self.elements[c1].vertices[2] != patch.vertex
            {
                return false;
            }
        }
        // no other active leaf may hold the vertex
        let expected: HashSet<ElemId> = patch.leaf_ids().collect();
        for &e in &self.active {
            if self.elements[e].vertices.contains(&patch.vertex) && !expected.contains(&e) {
                return false;
            }
        }
        true
    }

    /// Replace each patch's sibling pairs by their parents. Patches that are
    /// no longer coarsenable are skipped and reported.
    pub fn coarsen(&mut self, patches: &[CoarsenPatch]) -> CoarsenReport {
        let mut report = CoarsenReport::default();
        for patch in patches {
            if !self.patch_still_valid(patch) {
                report.skipped.push(patch.vertex);
                continue;
            }
            for pair in &patch.pairs {
                self.deactivate(pair.children[0]);
                self.deactivate(pair.children[1]);
                self.activate(pair.parent);
            }
            report.applied += 1;
        }
        report
    }

    /// Walk up the parent chain (inclusive) until hitting a member of `set`.
    pub fn ancestor_in(&self, mut e: ElemId, set: &HashSet<ElemId>) -> Option<ElemId> {
        loop {
            if set.contains(&e) {
                return Some(e);
            }
            e = self.elements[e].parent?;
        }
    }

    /// Leaves of the common refinement of two leaf sections: along every tree
    /// branch, the deeper of the two fronts.
    pub fn common_refinement(&self, a: &[ElemId], b: &[ElemId]) -> Vec<ElemId> {
        let a_set: HashSet<ElemId> = a.iter().copied().collect();
        let b_set: HashSet<ElemId> = b.iter().copied().collect();
        let mut out = BTreeSet::new();
        for &e in a {
            if self.ancestor_in(e, &b_set).is_some() {
                out.insert(e);
            }
        }
        for &e in b {
            if self.ancestor_in(e, &a_set).is_some() {
                out.insert(e);
            }
        }
        out.into_iter().collect()
    }

    /// Path of child indices from ancestor `a` down to descendant `e`.
    pub fn path_down(&self, a: ElemId, e: ElemId) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = e;
        while cur != a {
            let p = self.elements[cur].parent.expect("e must descend from a");
            let [c0, _] = self.elements[p].children.expect("parent has children");
            path.push(if cur == c0 { 0 } else { 1 });
            cur = p;
        }
        path.reverse();
        path
    }

    /// Verify conformity of the active section by edge counting.
    pub fn check_conformity(&self) -> bool {
        let mut counts: HashMap<(VertexId, VertexId), (usize, bool)> = HashMap::new();
        for &e in &self.active {
            let el = &self.elements[e];
            for i in 0..3 {
                let (a, b) = el.edge(i);
                let entry = counts.entry(edge_key(a, b)).or_insert((0, false));
                entry.0 += 1;
                entry.1 |= el.boundary[i];
            }
        }
        counts.values().all(|&(n, boundary)| n == 2 || (n == 1 && boundary))
    }

    /// Text snapshot: `femzz-mesh v1 <nv> <nt>`, vertex lines, triangle lines.
    pub fn write_snapshot(&self) -> String {
        let leaves = self.leaves();
        let mut used: BTreeSet<VertexId> = BTreeSet::new();
        for &e in &leaves {
            used.extend(self.elements[e].vertices);
        }
        let ordered: Vec<VertexId> = used.into_iter().collect();
        let index: HashMap<VertexId, usize> =
            ordered.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut out = String::new();
        writeln!(out, "femzz-mesh v1 {} {}", ordered.len(), leaves.len()).unwrap();
        for &v in &ordered {
            let c = self.vertices[v].coords;
            writeln!(out, "{:.16e} {:.16e}", c[0], c[1]).unwrap();
        }
        for &e in &leaves {
            let t = self.elements[e].vertices;
            writeln!(out, "{} {} {}", index[&t[0]], index[&t[1]], index[&t[2]]).unwrap();
        }
        out
    }
}

/// Parsed form of the snapshot format, for consumers of the figure data.
#[derive(Debug, Clone)]
pub struct MeshSnapshot {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn parse_snapshot(text: &str) -> Result<MeshSnapshot, MeshError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| MeshError::Snapshot("empty".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("femzz-mesh") || parts.next() != Some("v1") {
        return Err(MeshError::Snapshot("bad header".into()));
    }
    let nv: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MeshError::Snapshot("bad vertex count".into()))?;
    let nt: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MeshError::Snapshot("bad triangle count".into()))?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = lines.next().ok_or_else(|| MeshError::Snapshot("missing vertex".into()))?;
        let mut it = line.split_whitespace().map(|s| s.parse::<f64>());
        match (it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y))) => vertices.push([x, y]),
            _ => return Err(MeshError::Snapshot("bad vertex line".into())),
        }
    }
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let line = lines.next().ok_or_else(|| MeshError::Snapshot("missing triangle".into()))?;
        let mut it = line.split_whitespace().map(|s| s.parse::<usize>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b)), Some(Ok(c))) => triangles.push([a, b, c]),
            _ => return Err(MeshError::Snapshot("bad triangle line".into())),
        }
    }
    Ok(MeshSnapshot { vertices, triangles })
}

fn square_macro(lo: f64, hi: f64) -> Mesh {
    let c = 0.5 * (lo + hi);
    let vertices = vec![[lo, lo], [hi, lo], [hi, hi], [lo, hi], [c, c]];
    // refinement edge (v0, v1) is the boundary edge of each macro triangle
    let triangles = vec![[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
    Mesh::from_macro(vertices, triangles)
}

pub fn triangle_area(c: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((c[1][0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1]))
        .abs()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// The 2-triangle unit square used by several tests.
pub fn two_triangle_unit_square() -> Mesh {
    let vertices = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    // both refinement edges are the shared diagonal
    Mesh::from_macro(vertices, vec![[0, 2, 1], [2, 0, 3]])
}
