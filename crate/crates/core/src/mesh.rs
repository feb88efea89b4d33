//! Conforming triangulations of planar polygonal domains.
//!
//! A [`Mesh`] stores its vertices, counterclockwise triangles and the fully
//! enumerated skeleton. Local face `i` of an element is the edge opposite its
//! local vertex `i`. Each face knows its one or two adjacent elements; the
//! first one (`K1`) always has the smaller element index and the stored unit
//! normal points out of `K1`, which for boundary faces is the outer normal.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// A point in the plane.
pub type Point = [f64; 2];

/// An edge of the triangulation together with its neighbourhood.
#[derive(Debug, Clone)]
pub struct Face {
    /// End points, in counterclockwise order as seen from `K1`.
    pub vertices: [usize; 2],
    /// Adjacent elements `(K1, K2)` with `K1 < K2`; `K2` is `None` on the boundary.
    pub elements: (usize, Option<usize>),
    /// Unit normal pointing out of `K1`.
    pub normal: [f64; 2],
    pub length: f64,
    pub midpoint: Point,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.elements.1.is_none()
    }

    /// Unit tangent running from `vertices[0]` to `vertices[1]`.
    pub fn tangent(&self) -> [f64; 2] {
        [-self.normal[1], self.normal[0]]
    }
}

/// Affine geometry of one triangle.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub area: f64,
    /// Gradients of the three barycentric coordinates.
    pub grad_lambda: [[f64; 2]; 3],
    /// Diameter `h_K` (longest edge).
    pub diameter: f64,
    /// Diameter of the inscribed circle, `4 |K| / perimeter`.
    pub inscribed_diameter: f64,
}

impl ElementGeometry {
    pub fn shape_coefficient(&self) -> f64 {
        self.diameter / self.inscribed_diameter
    }
}

/// Problems detected by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    VertexIndexOutOfRange { element: usize, vertex: usize },
    RepeatedVertex { element: usize },
    Degenerate { element: usize },
    Clockwise { element: usize },
    EdgeSharedByMany { vertices: [usize; 2], elements: Vec<usize> },
    SameSideNeighbours { first: usize, second: usize },
    HangingNode { vertex: usize, element_with_edge: usize, element_with_vertex: usize },
}

impl Violation {
    /// Whether the violation makes the element list non-conforming (as opposed
    /// to merely misoriented).
    pub fn is_conformity(&self) -> bool {
        matches!(
            self,
            Violation::EdgeSharedByMany { .. }
                | Violation::SameSideNeighbours { .. }
                | Violation::HangingNode { .. }
        )
    }

    fn into_error(self) -> Error {
        match self {
            Violation::EdgeSharedByMany { vertices, elements } => Error::Conformity {
                first: elements[0],
                second: elements[elements.len() - 1],
                message: format!(
                    "edge ({}, {}) is shared by {} elements",
                    vertices[0],
                    vertices[1],
                    elements.len()
                ),
            },
            Violation::SameSideNeighbours { first, second } => Error::Conformity {
                first,
                second,
                message: "elements overlap across their shared edge".into(),
            },
            Violation::HangingNode { vertex, element_with_edge, element_with_vertex } => {
                Error::Conformity {
                    first: element_with_edge,
                    second: element_with_vertex,
                    message: format!("vertex {vertex} hangs on an edge of element {element_with_edge}"),
                }
            }
            other => Error::InvalidArgument(other.to_string()),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::VertexIndexOutOfRange { element, vertex } => {
                write!(f, "element {element} references missing vertex {vertex}")
            }
            Violation::RepeatedVertex { element } => write!(f, "element {element} repeats a vertex"),
            Violation::Degenerate { element } => write!(f, "element {element} has zero area"),
            Violation::Clockwise { element } => write!(f, "element {element} is clockwise"),
            Violation::EdgeSharedByMany { vertices, elements } => write!(
                f,
                "edge ({}, {}) shared by elements {:?}",
                vertices[0], vertices[1], elements
            ),
            Violation::SameSideNeighbours { first, second } => {
                write!(f, "elements {first} and {second} lie on the same side of their shared edge")
            }
            Violation::HangingNode { vertex, element_with_edge, element_with_vertex } => write!(
                f,
                "hanging vertex {vertex}: lies inside an edge of element {element_with_edge}, used by element {element_with_vertex}"
            ),
        }
    }
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Checks raw vertex/element data for every mesh invariant and returns the
/// violations found (empty when the data describe a valid mesh).
pub fn validate(vertices: &[Point], elements: &[[usize; 3]]) -> Vec<Violation> {
    let mut out = Vec::new();
    let scale = bounding_scale(vertices);
    for (k, el) in elements.iter().enumerate() {
        if let Some(&v) = el.iter().find(|&&v| v >= vertices.len()) {
            out.push(Violation::VertexIndexOutOfRange { element: k, vertex: v });
            continue;
        }
        if el[0] == el[1] || el[1] == el[2] || el[0] == el[2] {
            out.push(Violation::RepeatedVertex { element: k });
            continue;
        }
        let a = signed_area(vertices[el[0]], vertices[el[1]], vertices[el[2]]);
        if a.abs() <= 1e-14 * scale * scale {
            out.push(Violation::Degenerate { element: k });
        } else if a < 0.0 {
            out.push(Violation::Clockwise { element: k });
        }
    }
    if !out.is_empty() {
        return out;
    }

    let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (k, el) in elements.iter().enumerate() {
        for i in 0..3 {
            let (a, b) = (el[(i + 1) % 3], el[(i + 2) % 3]);
            edges.entry((a.min(b), a.max(b))).or_default().push(k);
        }
    }
    let mut keys: Vec<_> = edges.keys().copied().collect();
    keys.sort_unstable();
    for key in &keys {
        let adj = &edges[key];
        if adj.len() > 2 {
            out.push(Violation::EdgeSharedByMany { vertices: [key.0, key.1], elements: adj.clone() });
        } else if adj.len() == 2 {
            // The two opposite vertices must lie on different sides of the edge.
            let (p, q) = (vertices[key.0], vertices[key.1]);
            let opposite = |k: usize| {
                let v = elements[k].iter().copied().find(|&v| v != key.0 && v != key.1).unwrap();
                signed_area(p, q, vertices[v])
            };
            if opposite(adj[0]) * opposite(adj[1]) > 0.0 {
                out.push(Violation::SameSideNeighbours { first: adj[0], second: adj[1] });
            }
        }
    }

    // Hanging vertices: a vertex strictly inside some edge.
    let mut vertex_elements = vec![Vec::new(); vertices.len()];
    for (k, el) in elements.iter().enumerate() {
        for &v in el {
            vertex_elements[v].push(k);
        }
    }
    let tol = 1e-12 * scale;
    let grid = EdgeGrid::new(vertices, &keys);
    for (v, &x) in vertices.iter().enumerate() {
        if vertex_elements[v].is_empty() {
            continue;
        }
        for &e in grid.candidates(x) {
            let (a, b) = keys[e];
            if a == v || b == v {
                continue;
            }
            let (p, q) = (vertices[a], vertices[b]);
            let len = dist(p, q);
            let cross = 2.0 * signed_area(p, q, x) / len;
            let t = ((x[0] - p[0]) * (q[0] - p[0]) + (x[1] - p[1]) * (q[1] - p[1])) / (len * len);
            if cross.abs() <= tol && t > 1e-12 && t < 1.0 - 1e-12 {
                out.push(Violation::HangingNode {
                    vertex: v,
                    element_with_edge: edges[&keys[e]][0],
                    element_with_vertex: vertex_elements[v][0],
                });
            }
        }
    }
    out
}

fn bounding_scale(vertices: &[Point]) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for v in vertices {
        for d in 0..2 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    let s = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if s.is_finite() && s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Uniform bucket grid over edge bounding boxes.
struct EdgeGrid {
    origin: Point,
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl EdgeGrid {
    fn new(vertices: &[Point], edges: &[(usize, usize)]) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        let span = bounding_scale(vertices);
        let per_side = ((edges.len() as f64).sqrt().ceil() as usize).max(1);
        let cell = span / per_side as f64;
        let dims = [
            (((hi[0] - lo[0]) / cell).floor() as usize + 1).max(1),
            (((hi[1] - lo[1]) / cell).floor() as usize + 1).max(1),
        ];
        let mut grid = EdgeGrid { origin: lo, cell, dims, buckets: vec![Vec::new(); dims[0] * dims[1]] };
        for (e, &(a, b)) in edges.iter().enumerate() {
            let (p, q) = (vertices[a], vertices[b]);
            let c0 = grid.cell_of([p[0].min(q[0]), p[1].min(q[1])]);
            let c1 = grid.cell_of([p[0].max(q[0]), p[1].max(q[1])]);
            for i in c0[0]..=c1[0] {
                for j in c0[1]..=c1[1] {
                    grid.buckets[j * dims[0] + i].push(e);
                }
            }
        }
        grid
    }

    fn cell_of(&self, x: Point) -> [usize; 2] {
        let mut c = [0; 2];
        for d in 0..2 {
            let f = ((x[d] - self.origin[d]) / self.cell).floor();
            c[d] = (f.max(0.0) as usize).min(self.dims[d] - 1);
        }
        c
    }

    fn candidates(&self, x: Point) -> &[usize] {
        let c = self.cell_of(x);
        &self.buckets[c[1] * self.dims[0] + c[0]]
    }
}

/// A conforming triangulation with its skeleton.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    elements: Vec<[usize; 3]>,
    faces: Vec<Face>,
    element_faces: Vec<[usize; 3]>,
    geometry: Vec<ElementGeometry>,
    interior_faces: Vec<usize>,
    interior_face_index: Vec<Option<usize>>,
    boundary_vertex: Vec<bool>,
    vertex_elements: Vec<Vec<usize>>,
    gamma: f64,
    h_max: f64,
}

/// A mesh read from a file together with any repairs that were applied.
#[derive(Debug, Clone)]
pub struct LoadedMesh {
    pub mesh: Mesh,
    pub warnings: Vec<String>,
}

impl Mesh {
    /// Builds a mesh from counterclockwise triangles, rejecting any violation.
    pub fn new(vertices: Vec<Point>, elements: Vec<[usize; 3]>) -> Result<Self> {
        if elements.is_empty() {
            return invalid("mesh has no elements");
        }
        if let Some(v) = validate(&vertices, &elements).into_iter().next() {
            return Err(v.into_error());
        }
        Ok(Self::assemble(vertices, elements))
    }

    /// Like [`Mesh::new`], but clockwise triangles are reoriented instead of
    /// rejected; each repair is reported as a warning.
    pub fn new_reorienting(
        vertices: Vec<Point>,
        mut elements: Vec<[usize; 3]>,
    ) -> Result<(Self, Vec<String>)> {
        let mut warnings = Vec::new();
        for v in validate(&vertices, &elements) {
            if let Violation::Clockwise { element } = v {
                elements[element].swap(1, 2);
                let msg = format!("element {element} was clockwise; orientation fixed");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        Ok((Self::new(vertices, elements)?, warnings))
    }

    fn assemble(vertices: Vec<Point>, elements: Vec<[usize; 3]>) -> Self {
        let mut faces: Vec<Face> = Vec::new();
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
        let mut element_faces = Vec::with_capacity(elements.len());
        for (k, el) in elements.iter().enumerate() {
            let mut ef = [0; 3];
            for i in 0..3 {
                let (a, b) = (el[(i + 1) % 3], el[(i + 2) % 3]);
                let key = (a.min(b), a.max(b));
                let f = *lookup.entry(key).or_insert_with(|| {
                    let (p, q) = (vertices[a], vertices[b]);
                    let length = dist(p, q);
                    faces.push(Face {
                        vertices: [a, b],
                        elements: (k, None),
                        normal: [(q[1] - p[1]) / length, -(q[0] - p[0]) / length],
                        length,
                        midpoint: [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])],
                    });
                    faces.len() - 1
                });
                if faces[f].elements.0 != k {
                    faces[f].elements.1 = Some(k);
                }
                ef[i] = f;
            }
            element_faces.push(ef);
        }

        let geometry: Vec<ElementGeometry> = elements
            .iter()
            .map(|el| element_geometry([vertices[el[0]], vertices[el[1]], vertices[el[2]]]))
            .collect();
        let gamma = geometry.iter().map(|g| g.shape_coefficient()).fold(0.0, f64::max);
        let h_max = geometry.iter().map(|g| g.diameter).fold(0.0, f64::max);

        let mut interior_faces = Vec::new();
        let mut interior_face_index = vec![None; faces.len()];
        let mut boundary_vertex = vec![false; vertices.len()];
        for (f, face) in faces.iter().enumerate() {
            if face.is_boundary() {
                boundary_vertex[face.vertices[0]] = true;
                boundary_vertex[face.vertices[1]] = true;
            } else {
                interior_face_index[f] = Some(interior_faces.len());
                interior_faces.push(f);
            }
        }
        let mut vertex_elements = vec![Vec::new(); vertices.len()];
        for (k, el) in elements.iter().enumerate() {
            for &v in el {
                vertex_elements[v].push(k);
            }
        }

        Mesh {
            vertices,
            elements,
            faces,
            element_faces,
            geometry,
            interior_faces,
            interior_face_index,
            boundary_vertex,
            vertex_elements,
            gamma,
            h_max,
        }
    }

    /// `n x n` squares on the unit square, each cut along the diagonal from
    /// its lower-left to its upper-right corner.
    pub fn structured_unit_square(n: usize) -> Result<Self> {
        if n == 0 {
            return invalid("structured mesh needs n >= 1");
        }
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let h = 1.0 / n as f64;
        let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                vertices.push([i as f64 * h, j as f64 * h]);
            }
        }
        let mut elements = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                elements.push([v00, v10, v11]);
                elements.push([v00, v11, v01]);
            }
        }
        Self::new(vertices, elements)
    }

    /// Red refinement: every triangle is split into four by its edge midpoints.
    pub fn refine_uniform(&self) -> Mesh {
        let nv = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend(self.faces.iter().map(|f| f.midpoint));
        let mut elements = Vec::with_capacity(4 * self.elements.len());
        for (el, ef) in self.elements.iter().zip(&self.element_faces) {
            // midpoint of the edge opposite local vertex i
            let m = [nv + ef[0], nv + ef[1], nv + ef[2]];
            elements.push([el[0], m[2], m[1]]);
            elements.push([m[2], el[1], m[0]]);
            elements.push([m[1], m[0], el[2]]);
            elements.push([m[0], m[1], m[2]]);
        }
        Self::assemble(vertices, elements)
    }

    /// Reads the text format `nv ne`, then `nv` lines `x y`, then `ne` lines
    /// `i j k` with 0-based vertex indices. Clockwise triangles are repaired.
    pub fn read<R: BufRead>(reader: R) -> Result<LoadedMesh> {
        let mut lines = reader
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
        let mut next = |what: &str| -> Result<(usize, Vec<String>)> {
            match lines.next() {
                Some((no, Ok(l))) => Ok((no, l.split_whitespace().map(str::to_owned).collect())),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Parse { line: 0, message: format!("unexpected end of file, expected {what}") }),
            }
        };
        fn parse<T: std::str::FromStr>(line: usize, tok: &str) -> Result<T> {
            tok.parse().map_err(|_| Error::Parse { line, message: format!("cannot parse '{tok}'") })
        }
        let (no, header) = next("header")?;
        if header.len() != 2 {
            return Err(Error::Parse { line: no, message: "header must be 'nv ne'".into() });
        }
        let nv: usize = parse(no, &header[0])?;
        let ne: usize = parse(no, &header[1])?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (no, t) = next("vertex")?;
            if t.len() != 2 {
                return Err(Error::Parse { line: no, message: "vertex line must be 'x y'".into() });
            }
            vertices.push([parse(no, &t[0])?, parse(no, &t[1])?]);
        }
        let mut elements = Vec::with_capacity(ne);
        for _ in 0..ne {
            let (no, t) = next("element")?;
            if t.len() != 3 {
                return Err(Error::Parse { line: no, message: "element line must be 'i j k'".into() });
            }
            let el: [usize; 3] = [parse(no, &t[0])?, parse(no, &t[1])?, parse(no, &t[2])?];
            if let Some(&v) = el.iter().find(|&&v| v >= nv) {
                return Err(Error::Parse { line: no, message: format!("vertex index {v} out of range") });
            }
            elements.push(el);
        }
        let (mesh, warnings) = Self::new_reorienting(vertices, elements)?;
        Ok(LoadedMesh { mesh, warnings })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LoadedMesh> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.vertices.len(), self.elements.len())?;
        for v in &self.vertices {
            writeln!(w, "{:.17e} {:.17e}", v[0], v[1])?;
        }
        for el in &self.elements {
            writeln!(w, "{} {} {}", el[0], el[1], el[2])?;
        }
        Ok(())
    }

    /// Re-checks every stored invariant; returns human-readable violations.
    pub fn validate(&self) -> Vec<String> {
        let mut out: Vec<String> =
            validate(&self.vertices, &self.elements).iter().map(ToString::to_string).collect();
        for (f, face) in self.faces.iter().enumerate() {
            let n = face.normal;
            let [a, b] = face.vertices;
            let e = [self.vertices[b][0] - self.vertices[a][0], self.vertices[b][1] - self.vertices[a][1]];
            if ((n[0] * n[0] + n[1] * n[1]).sqrt() - 1.0).abs() > 1e-14 {
                out.push(format!("face {f}: normal is not unit"));
            }
            if (n[0] * e[0] + n[1] * e[1]).abs() > 1e-14 * face.length {
                out.push(format!("face {f}: normal not orthogonal to edge"));
            }
            if (dist(self.vertices[a], self.vertices[b]) - face.length).abs() > 1e-15 {
                out.push(format!("face {f}: stored length differs from edge length"));
            }
            let (k1, k2) = face.elements;
            if let Some(k2) = k2 {
                if k2 <= k1 {
                    out.push(format!("face {f}: adjacent elements not ordered"));
                }
            }
            // The normal must point away from K1's opposite vertex.
            let opp = self.elements[k1].iter().copied().find(|&v| v != a && v != b).unwrap();
            let w = [self.vertices[opp][0] - face.midpoint[0], self.vertices[opp][1] - face.midpoint[1]];
            if n[0] * w[0] + n[1] * w[1] >= 0.0 {
                out.push(format!("face {f}: normal does not point out of element {k1}"));
            }
        }
        let mut count = vec![0usize; self.faces.len()];
        for ef in &self.element_faces {
            for &f in ef {
                count[f] += 1;
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            let expected = if face.is_boundary() { 1 } else { 2 };
            if count[f] != expected {
                out.push(format!("face {f}: {} adjacent elements, expected {expected}", count[f]));
            }
        }
        let gamma = self.geometry.iter().map(|g| g.shape_coefficient()).fold(0.0, f64::max);
        if (gamma - self.gamma).abs() > 1e-12 * self.gamma {
            out.push("stored shape coefficient differs from recomputed value".into());
        }
        out
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn face(&self, f: usize) -> &Face {
        &self.faces[f]
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Face indices of element `k`; entry `i` is opposite local vertex `i`.
    pub fn element_faces(&self, k: usize) -> [usize; 3] {
        self.element_faces[k]
    }

    /// +1 if element `k` is the first neighbour (`K1`) of its `i`-th face, -1 otherwise.
    pub fn face_sign(&self, k: usize, i: usize) -> f64 {
        if self.faces[self.element_faces[k][i]].elements.0 == k {
            1.0
        } else {
            -1.0
        }
    }

    pub fn geometry(&self, k: usize) -> &ElementGeometry {
        &self.geometry[k]
    }

    pub fn interior_faces(&self) -> &[usize] {
        &self.interior_faces
    }

    pub fn interior_face_index(&self, f: usize) -> Option<usize> {
        self.interior_face_index[f]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertex[v]
    }

    /// Elements containing vertex `v`, in increasing index order.
    pub fn vertex_elements(&self, v: usize) -> &[usize] {
        &self.vertex_elements[v]
    }

    pub fn element_vertices(&self, k: usize) -> [Point; 3] {
        let el = self.elements[k];
        [self.vertices[el[0]], self.vertices[el[1]], self.vertices[el[2]]]
    }

    pub fn centroid(&self, k: usize) -> Point {
        let v = self.element_vertices(k);
        [(v[0][0] + v[1][0] + v[2][0]) / 3.0, (v[0][1] + v[1][1] + v[2][1]) / 3.0]
    }

    /// Shape coefficient `max_K h_K / rho_K`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn total_area(&self) -> f64 {
        self.geometry.iter().map(|g| g.area).sum()
    }

    /// Maps barycentric coordinates on element `k` to the plane.
    pub fn point(&self, k: usize, lambda: [f64; 3]) -> Point {
        let v = self.element_vertices(k);
        [
            lambda[0] * v[0][0] + lambda[1] * v[1][0] + lambda[2] * v[2][0],
            lambda[0] * v[0][1] + lambda[1] * v[1][1] + lambda[2] * v[2][1],
        ]
    }

    /// Barycentric coordinates of `x` with respect to element `k`.
    pub fn barycentric(&self, k: usize, x: Point) -> [f64; 3] {
        let v0 = self.vertices[self.elements[k][0]];
        let g = &self.geometry[k].grad_lambda;
        let d = [x[0] - v0[0], x[1] - v0[1]];
        let l1 = g[1][0] * d[0] + g[1][1] * d[1];
        let l2 = g[2][0] * d[0] + g[2][1] * d[1];
        [1.0 - l1 - l2, l1, l2]
    }

    /// Local index (0..3) of face `f` within element `k`.
    pub fn local_face_index(&self, k: usize, f: usize) -> Option<usize> {
        self.element_faces[k].iter().position(|&g| g == f)
    }

    /// Local index of vertex `v` within element `k`.
    pub fn local_vertex_index(&self, k: usize, v: usize) -> Option<usize> {
        self.elements[k].iter().position(|&w| w == v)
    }
}

fn element_geometry(v: [Point; 3]) -> ElementGeometry {
    let j = [[v[1][0] - v[0][0], v[2][0] - v[0][0]], [v[1][1] - v[0][1], v[2][1] - v[0][1]]];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    // rows of J^{-1} are the gradients of lambda_1, lambda_2
    let g1 = [j[1][1] / det, -j[0][1] / det];
    let g2 = [-j[1][0] / det, j[0][0] / det];
    let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
    let edges = [dist(v[1], v[2]), dist(v[2], v[0]), dist(v[0], v[1])];
    let area = 0.5 * det;
    let perimeter: f64 = edges.iter().sum();
    ElementGeometry {
        area,
        grad_lambda: [g0, g1, g2],
        diameter: edges.iter().cloned().fold(0.0, f64::max),
        inscribed_diameter: 4.0 * area / perimeter,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_square() {
        let m = Mesh::structured_unit_square(1).unwrap();
        assert_eq!(m.num_elements(), 2);
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_faces(), 5);
        assert_eq!(m.interior_faces().len(), 1);
        assert!(m.validate().is_empty());
    }

    #[test]
    fn two_by_two_counts_and_alignment() {
        let m = Mesh::structured_unit_square(2).unwrap();
        assert_eq!(m.num_elements(), 8);
        assert_eq!(m.num_vertices(), 9);
        assert_eq!(m.num_faces(), 16);
        assert_eq!(m.interior_faces().len(), 8);
        let on_half = m
            .faces()
            .iter()
            .filter(|f| f.vertices.iter().all(|&v| (m.vertices()[v][0] - 0.5).abs() < 1e-15))
            .count();
        assert_eq!(on_half, 2);
    }

    #[test]
    fn zero_n_is_rejected() {
        assert!(matches!(Mesh::structured_unit_square(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn refinement_halves_h_and_keeps_gamma() {
        let m = Mesh::structured_unit_square(1).unwrap();
        let r = m.refine_uniform();
        assert_eq!(r.num_elements(), 8);
        assert!((r.gamma() - m.gamma()).abs() < 1e-12);
        assert!((r.h_max() - m.h_max() / 2.0).abs() < 1e-15);
        assert!(r.validate().is_empty());
    }

    #[test]
    fn interior_faces_have_matching_traces() {
        let m = Mesh::structured_unit_square(3).unwrap().refine_uniform();
        for f in m.interior_faces() {
            let face = m.face(*f);
            let (k1, k2) = (face.elements.0, face.elements.1.unwrap());
            for v in face.vertices {
                assert!(m.local_vertex_index(k1, v).is_some());
                assert!(m.local_vertex_index(k2, v).is_some());
            }
        }
    }

    #[test]
    fn clockwise_triangle_is_reoriented() {
        let text = "4 2\n0 0\n1 0\n1 1\n0 1\n0 2 1\n0 2 3\n";
        let loaded = Mesh::read(text.as_bytes()).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert_eq!(loaded.mesh.interior_faces().len(), 1);
        assert!(loaded.mesh.validate().is_empty());
    }

    #[test]
    fn hanging_node_is_reported() {
        // Big triangle on the left, two small ones on the right sharing the
        // midpoint (1, 0.5) of the big triangle's right edge.
        let vertices = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 0.5], [2.0, 0.5]];
        let elements = vec![[0, 1, 2], [1, 4, 3], [3, 4, 2]];
        match Mesh::new(vertices, elements) {
            Err(Error::Conformity { first, second, .. }) => {
                assert_eq!(first, 0);
                assert_eq!(second, 1);
            }
            other => panic!("expected conformity error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = "3 1\n0 0\n1 x\n0 1\n0 1 2\n";
        match Mesh::read(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_read() {
        let m = Mesh::structured_unit_square(2).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = Mesh::read(buf.as_slice()).unwrap();
        assert!(back.warnings.is_empty());
        assert_eq!(back.mesh.elements(), m.elements());
        assert_eq!(back.mesh.vertices(), m.vertices());
    }

    #[test]
    fn barycentric_roundtrip() {
        let m = Mesh::structured_unit_square(2).unwrap();
        let l = [0.2, 0.3, 0.5];
        let x = m.point(5, l);
        let back = m.barycentric(5, x);
        for i in 0..3 {
            assert!((back[i] - l[i]).abs() < 1e-14);
        }
    }
}
