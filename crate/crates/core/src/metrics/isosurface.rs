use std::collections::HashSet;

use super::mc_tables::{EDGE_TABLE, TRI_TABLE};
use crate::volume::Volume3D;
use crate::Point3;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

const MIN_AREA: f64 = 1e-12;

/// Indexed triangle surface, vertices in mm.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, tri: &[u32; 3]) -> f64 {
        let [a, b, c] = tri.map(|i| self.vertices[i as usize]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Number of distinct undirected triangle edges.
    pub fn edge_count(&self) -> usize {
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// V − E + F over the vertices referenced by triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let used: HashSet<u32> = self.triangles.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }
}

/// Isosurface at `iso` by table-driven marching cubes.
///
/// Vertices sit on cell edges at the linear iso-crossing and are shared
/// between neighbouring cells. Uniform volumes (and volumes thinner than two
/// samples on an axis) give an empty mesh.
pub fn marching_cubes(vol: &Volume3D, iso: f64) -> TriMesh {
    let g = *vol.grid();
    let [nx, ny, nz] = g.dims;
    let mut mesh = TriMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }

    // vertex id per (grid point, axis) edge; u32::MAX when not yet created
    let mut edge_vertex = vec![u32::MAX; g.len() * 3];
    let values = vol.values();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut val = [0.0f64; 8];
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    val[c] = values[g.index(i + off[0], j + off[1], k + off[2])] as f64;
                    if val[c] < iso {
                        case |= 1 << c;
                    }
                }
                let crossed = EDGE_TABLE[case];
                if crossed == 0 {
                    continue;
                }

                let mut local = [u32::MAX; 12];
                for (e, &[c0, c1]) in EDGES.iter().enumerate() {
                    if crossed & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = (CORNERS[c0], CORNERS[c1]);
                    // edges run along one axis; key them by their lower end
                    let axis = (0..3).find(|&ax| a[ax] != b[ax]).expect("edge spans an axis");
                    let lo = if a[axis] < b[axis] { a } else { b };
                    let key = g.index(i + lo[0], j + lo[1], k + lo[2]) * 3 + axis;
                    if edge_vertex[key] == u32::MAX {
                        let (va, vb) = (val[c0], val[c1]);
                        let t = (iso - va) / (vb - va);
                        let pa = g.center(i + a[0], j + a[1], k + a[2]);
                        let pb = g.center(i + b[0], j + b[1], k + b[2]);
                        mesh.vertices.push([
                            pa[0] + t * (pb[0] - pa[0]),
                            pa[1] + t * (pb[1] - pa[1]),
                            pa[2] + t * (pb[2] - pa[2]),
                        ]);
                        edge_vertex[key] = (mesh.vertices.len() - 1) as u32;
                    }
                    local[e] = edge_vertex[key];
                }

                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [local[tri[0] as usize], local[tri[1] as usize], local[tri[2] as usize]];
                    if mesh.triangle_area(&t) > MIN_AREA {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    mesh
}
