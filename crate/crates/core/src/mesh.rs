//! Uniform rectangular meshes for the box, two-box and pincers domains.
//!
//! Every element of a mesh has the same size `hx1 x hx2`. Corners are stored
//! counter-clockwise starting at the lower-left node. Disconnected bodies carry
//! their own nodes, so two bodies never share a degree of freedom even where
//! their geometries touch.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Element sides in the order bottom, right, top, left. Each side is given by
/// its two local corner indices.
pub const SIDES: [[usize; 2]; 4] = [[0, 1], [1, 2], [2, 3], [3, 0]];

/// An axis-aligned box `origin + [0, size]` split into `nx x ny` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub origin: Point,
    pub size: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl BoxSpec {
    pub fn new(origin: Point, size: [f64; 2], nx: usize, ny: usize) -> Self {
        Self {
            origin,
            size,
            nx,
            ny,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidSpec(format!(
                "resolution must be at least 1 in each direction, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.size[0] > 0.0 && self.size[1] > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "box size must be positive, got {:?}",
                self.size
            )));
        }
        if !(self.origin[0].is_finite() && self.origin[1].is_finite()) {
            return Err(Error::InvalidSpec("box origin must be finite".into()));
        }
        Ok(())
    }

    fn cell_size(&self) -> [f64; 2] {
        [self.size[0] / self.nx as f64, self.size[1] / self.ny as f64]
    }
}

/// Pincers: the outer rectangle minus the open slot
/// `{ slot_start < x1 <= x_max, |x2| < w0 + slope * (x1 - slot_start) }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PincersSpec {
    pub outer_min: Point,
    pub outer_max: Point,
    pub slot_start: f64,
    pub w0: f64,
    pub slope: f64,
    pub nx: usize,
    pub ny: usize,
    /// Nodes on `{slot_start} x (-dirichlet_half, dirichlet_half)` are tagged.
    pub dirichlet_half: f64,
}

impl Default for PincersSpec {
    fn default() -> Self {
        Self {
            outer_min: [-3.0, -1.5],
            outer_max: [2.0, 1.5],
            slot_start: 0.0,
            w0: 0.05,
            slope: 0.2,
            nx: 45,
            ny: 27,
            dirichlet_half: 0.5,
        }
    }
}

impl PincersSpec {
    pub fn half_opening(&self, x1: f64) -> f64 {
        self.w0 + self.slope * (x1 - self.slot_start)
    }

    pub fn in_slot(&self, p: Point) -> bool {
        p[0] > self.slot_start
            && p[0] <= self.outer_max[0]
            && p[1].abs() < self.half_opening(p[0])
    }

    pub fn bounding_box(&self) -> BoxSpec {
        BoxSpec::new(
            self.outer_min,
            [
                self.outer_max[0] - self.outer_min[0],
                self.outer_max[1] - self.outer_min[1],
            ],
            self.nx,
            self.ny,
        )
    }
}

/// Geometric description of one of the supported domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    Box(BoxSpec),
    TwoBox { upper: BoxSpec, lower: BoxSpec },
    Pincers(PincersSpec),
}

impl DomainSpec {
    /// Default two-box domain: `(0,2)x(0.5,1.5)` above `(0,2)x(-1.5,0.5)`.
    pub fn model_one(nx: usize, ny_upper: usize, ny_lower: usize) -> Self {
        DomainSpec::TwoBox {
            upper: BoxSpec::new([0.0, 0.5], [2.0, 1.0], nx, ny_upper),
            lower: BoxSpec::new([0.0, -1.5], [2.0, 2.0], nx, ny_lower),
        }
    }

    pub fn build(&self) -> Result<MeshGrid> {
        match self {
            DomainSpec::Box(b) => build_box_mesh(b.origin, b.size, b.nx, b.ny),
            DomainSpec::TwoBox { .. } => build_two_box_domain(self),
            DomainSpec::Pincers(_) => build_pincers_domain(self),
        }
    }
}

/// Mesh of one or more bodies made of identical axis-aligned rectangles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshGrid {
    nodes: Vec<Point>,
    elements: Vec<[usize; 4]>,
    element_size: [f64; 2],
    body_ids: Vec<u32>,
    boundary_nodes: Vec<bool>,
    boundary_elements: Vec<bool>,
    /// Nodes tagged as Dirichlet nodes by the domain builder (for display).
    dirichlet_nodes: Vec<usize>,
    #[serde(skip)]
    neighbors: Vec<[Option<usize>; 4]>,
}

struct BodyPart {
    nodes: Vec<Point>,
    elements: Vec<[usize; 4]>,
    cells: Vec<(usize, usize)>,
}

fn mesh_body(spec: &BoxSpec, include: impl Fn(Point) -> bool) -> BodyPart {
    let h = spec.cell_size();
    let node_at = |i: usize, j: usize| -> Point {
        [
            spec.origin[0] + i as f64 * h[0],
            spec.origin[1] + j as f64 * h[1],
        ]
    };
    let mut cells = Vec::new();
    for j in 0..spec.ny {
        for i in 0..spec.nx {
            let mid = [
                spec.origin[0] + (i as f64 + 0.5) * h[0],
                spec.origin[1] + (j as f64 + 0.5) * h[1],
            ];
            if include(mid) {
                cells.push((i, j));
            }
        }
    }
    let stride = spec.nx + 1;
    let mut used = vec![false; (spec.nx + 1) * (spec.ny + 1)];
    for &(i, j) in &cells {
        for (di, dj) in [(0, 0), (1, 0), (1, 1), (0, 1)] {
            used[(j + dj) * stride + i + di] = true;
        }
    }
    // row-major renumbering of the used grid nodes
    let mut index = vec![usize::MAX; used.len()];
    let mut nodes = Vec::new();
    for j in 0..=spec.ny {
        for i in 0..=spec.nx {
            if used[j * stride + i] {
                index[j * stride + i] = nodes.len();
                nodes.push(node_at(i, j));
            }
        }
    }
    let elements = cells
        .iter()
        .map(|&(i, j)| {
            [
                index[j * stride + i],
                index[j * stride + i + 1],
                index[(j + 1) * stride + i + 1],
                index[(j + 1) * stride + i],
            ]
        })
        .collect();
    BodyPart {
        nodes,
        elements,
        cells,
    }
}

impl MeshGrid {
    fn assemble(parts: Vec<BodyPart>, element_size: [f64; 2]) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut elements = Vec::new();
        let mut body_ids = Vec::new();
        let mut neighbors = Vec::new();
        for (body, part) in parts.into_iter().enumerate() {
            if part.elements.is_empty() {
                return Err(Error::InvalidSpec(format!("body {body} has no elements")));
            }
            let node_offset = nodes.len();
            let elem_offset = elements.len();
            let lookup: HashMap<(usize, usize), usize> = part
                .cells
                .iter()
                .enumerate()
                .map(|(k, &c)| (c, k + elem_offset))
                .collect();
            for &(i, j) in &part.cells {
                let get = |di: isize, dj: isize| -> Option<usize> {
                    let ii = i.checked_add_signed(di)?;
                    let jj = j.checked_add_signed(dj)?;
                    lookup.get(&(ii, jj)).copied()
                };
                neighbors.push([get(0, -1), get(1, 0), get(0, 1), get(-1, 0)]);
            }
            nodes.extend(part.nodes);
            elements.extend(
                part.elements
                    .into_iter()
                    .map(|e| e.map(|n| n + node_offset)),
            );
            body_ids.extend(std::iter::repeat_n(body as u32, part.cells.len()));
        }
        let mut boundary_nodes = vec![false; nodes.len()];
        let boundary_elements: Vec<bool> = neighbors
            .iter()
            .map(|nb| nb.iter().any(Option::is_none))
            .collect();
        for (e, nb) in neighbors.iter().enumerate() {
            for (side, corners) in SIDES.iter().enumerate() {
                if nb[side].is_none() {
                    for &c in corners {
                        boundary_nodes[elements[e][c]] = true;
                    }
                }
            }
        }
        Ok(Self {
            nodes,
            elements,
            element_size,
            body_ids,
            boundary_nodes,
            boundary_elements,
            dirichlet_nodes: Vec::new(),
            neighbors,
        })
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element_size(&self) -> [f64; 2] {
        self.element_size
    }

    pub fn element_area(&self) -> f64 {
        self.element_size[0] * self.element_size[1]
    }

    pub fn element_diameter(&self) -> f64 {
        self.element_size[0].hypot(self.element_size[1])
    }

    pub fn body_ids(&self) -> &[u32] {
        &self.body_ids
    }

    pub fn num_bodies(&self) -> usize {
        self.body_ids.iter().max().map_or(0, |&b| b as usize + 1)
    }

    pub fn boundary_node_flags(&self) -> &[bool] {
        &self.boundary_nodes
    }

    pub fn boundary_element_flags(&self) -> &[bool] {
        &self.boundary_elements
    }

    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet_nodes
    }

    /// Edge neighbours of an element, `[bottom, right, top, left]`.
    pub fn neighbors(&self, element: usize) -> [Option<usize>; 4] {
        self.neighbors[element]
    }

    /// Lower-left corner of an element.
    pub fn element_origin(&self, element: usize) -> Point {
        self.nodes[self.elements[element][0]]
    }

    /// Body id of the element owning each node.
    pub fn node_body_ids(&self) -> Vec<u32> {
        let mut ids = vec![0; self.nodes.len()];
        for (e, el) in self.elements.iter().enumerate() {
            for &n in el {
                ids[n] = self.body_ids[e];
            }
        }
        ids
    }

    pub fn element_midpoints(&self) -> Vec<Point> {
        element_midpoints(self)
    }

    pub fn boundary_elements(&self) -> Vec<usize> {
        boundary_elements(self)
    }

    /// Physical coordinates of a local point `xi in [0,1]^2` of an element.
    pub fn local_to_global(&self, element: usize, xi: Point) -> Point {
        let o = self.element_origin(element);
        [
            o[0] + xi[0] * self.element_size[0],
            o[1] + xi[1] * self.element_size[1],
        ]
    }

    /// Connected components of the element adjacency graph.
    pub fn element_components(&self) -> usize {
        let mut seen = vec![false; self.num_elements()];
        let mut count = 0;
        for start in 0..self.num_elements() {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(e) = queue.pop_front() {
                for n in self.neighbors[e].into_iter().flatten() {
                    if !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        count
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Rebuild the adjacency after deserialisation.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut mesh: MeshGrid =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        mesh.rebuild_neighbors();
        Ok(mesh)
    }

    fn rebuild_neighbors(&mut self) {
        let mut by_edge: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
        for (e, el) in self.elements.iter().enumerate() {
            for (side, [a, b]) in SIDES.iter().enumerate() {
                let (p, q) = (el[*a].min(el[*b]), el[*a].max(el[*b]));
                by_edge.entry((p, q)).or_default().push((e, side));
            }
        }
        self.neighbors = vec![[None; 4]; self.elements.len()];
        for owners in by_edge.values() {
            if let [(e1, s1), (e2, s2)] = owners[..] {
                self.neighbors[e1][s1] = Some(e2);
                self.neighbors[e2][s2] = Some(e1);
            }
        }
    }
}

/// Uniform `nx x ny` mesh of the box `origin + [0, size]`.
pub fn build_box_mesh(origin: Point, size: [f64; 2], nx: usize, ny: usize) -> Result<MeshGrid> {
    let spec = BoxSpec::new(origin, size, nx, ny);
    spec.validate()?;
    let part = mesh_body(&spec, |_| true);
    MeshGrid::assemble(vec![part], spec.cell_size())
}

fn open_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    hi - lo > 1e-12 * (a1 - a0).abs().max(b1 - b0).max(1.0)
}

/// Two independently meshed boxes; coincident interface nodes are duplicated.
pub fn build_two_box_domain(spec: &DomainSpec) -> Result<MeshGrid> {
    let DomainSpec::TwoBox { upper, lower } = spec else {
        return Err(Error::InvalidSpec("expected a two_box domain".into()));
    };
    upper.validate()?;
    lower.validate()?;
    let (hu, hl) = (upper.cell_size(), lower.cell_size());
    let scale = hu[0].max(hu[1]);
    if (hu[0] - hl[0]).abs() > 1e-12 * scale || (hu[1] - hl[1]).abs() > 1e-12 * scale {
        return Err(Error::InvalidSpec(format!(
            "both boxes must use the same element size, got {hu:?} and {hl:?}"
        )));
    }
    let x_overlap = open_overlap(
        upper.origin[0],
        upper.origin[0] + upper.size[0],
        lower.origin[0],
        lower.origin[0] + lower.size[0],
    );
    let y_overlap = open_overlap(
        upper.origin[1],
        upper.origin[1] + upper.size[1],
        lower.origin[1],
        lower.origin[1] + lower.size[1],
    );
    if x_overlap && y_overlap {
        return Err(Error::InvalidSpec(
            "the interiors of the two boxes overlap".into(),
        ));
    }
    let parts = vec![mesh_body(upper, |_| true), mesh_body(lower, |_| true)];
    let mut mesh = MeshGrid::assemble(parts, hu)?;

    // default Dirichlet edges: top of the upper box, bottom of the lower box
    let node_body = mesh.node_body_ids();
    let top = upper.origin[1] + upper.size[1];
    let bottom = lower.origin[1];
    let tol = 1e-9 * scale;
    mesh.dirichlet_nodes = mesh
        .nodes
        .iter()
        .enumerate()
        .filter(|&(n, p)| {
            let inside = |b: &BoxSpec| p[0] > b.origin[0] + tol && p[0] < b.origin[0] + b.size[0] - tol;
            (node_body[n] == 0 && (p[1] - top).abs() < tol && inside(upper))
                || (node_body[n] == 1 && (p[1] - bottom).abs() < tol && inside(lower))
        })
        .map(|(n, _)| n)
        .collect();
    Ok(mesh)
}

/// Pincers domain: elements of the bounding grid whose midpoint lies outside
/// the slot.
pub fn build_pincers_domain(spec: &DomainSpec) -> Result<MeshGrid> {
    let DomainSpec::Pincers(p) = spec else {
        return Err(Error::InvalidSpec("expected a pincers domain".into()));
    };
    let bbox = p.bounding_box();
    bbox.validate()?;
    if !(p.slot_start > p.outer_min[0] && p.slot_start < p.outer_max[0]) {
        return Err(Error::InvalidSpec(format!(
            "slot start {} must lie strictly inside ({}, {})",
            p.slot_start, p.outer_min[0], p.outer_max[0]
        )));
    }
    let reach = p.half_opening(p.slot_start).max(p.half_opening(p.outer_max[0]));
    if !(p.w0 > 0.0 && reach < p.outer_max[1].min(-p.outer_min[1])) {
        return Err(Error::InvalidSpec(format!(
            "slot half-opening must stay in (0, {}) along the arms",
            p.outer_max[1].min(-p.outer_min[1])
        )));
    }
    let part = mesh_body(&bbox, |m| !p.in_slot(m));
    let mut mesh = MeshGrid::assemble(vec![part], bbox.cell_size())?;
    let components = mesh.element_components();
    if components != 1 {
        return Err(Error::InvalidSpec(format!(
            "slot profile splits the pincers into {components} pieces"
        )));
    }
    let tol = 1e-9 * bbox.cell_size()[0];
    mesh.dirichlet_nodes = mesh
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, x)| (x[0] - p.slot_start).abs() < tol && x[1].abs() < p.dirichlet_half - tol)
        .map(|(n, _)| n)
        .collect();
    Ok(mesh)
}

pub fn element_midpoints(mesh: &MeshGrid) -> Vec<Point> {
    (0..mesh.num_elements())
        .map(|e| mesh.local_to_global(e, [0.5, 0.5]))
        .collect()
}

/// Elements with at least one side on the boundary of their body.
pub fn boundary_elements(mesh: &MeshGrid) -> Vec<usize> {
    mesh.boundary_elements
        .iter()
        .enumerate()
        .filter_map(|(e, &b)| b.then_some(e))
        .collect()
}
