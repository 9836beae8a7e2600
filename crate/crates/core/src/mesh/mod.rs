//! Marching-cubes surface extraction, area-weighted surface sampling, and
//! ASCII OBJ I/O.
//!
//! Extraction runs the standard 15-case tables with linear edge
//! interpolation at the zero level set. Vertices are welded on lattice
//! edges, so closed level sets come out watertight and the Euler
//! characteristic is meaningful.

mod mc_tables;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{Aabb, VoxelField};
use crate::geometry::Similarity;
use crate::rng;
use mc_tables::{CORNER_OFFSET, EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let a = self.vertices[t[0] as usize];
        let b = self.vertices[t[1] as usize];
        let c = self.vertices[t[2] as usize];
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    pub fn transformed(&self, sim: &Similarity) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| sim.apply(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| factor * v).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// V - E + F with edges counted once per unordered vertex pair.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::BTreeSet::new();
        for t in &self.triangles {
            for e in 0..3 {
                let a = t[e];
                let b = t[(e + 1) % 3];
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Area-weighted uniform point sampling: triangles chosen proportional
    /// to area, barycentric-uniform within. Deterministic for a fixed seed.
    pub fn sample_surface(&self, k: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
        if self.is_empty() {
            return Err(Error::input("sample_surface: empty mesh"));
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in &self.triangles {
            acc += self.triangle_area(t);
            cumulative.push(acc);
        }
        let total = acc;
        if total <= 0.0 {
            return Err(Error::input("sample_surface: zero total area"));
        }
        let mut r = rng::rng_from_seed(seed);
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let x: f64 = r.gen::<f64>() * total;
            let ti = cumulative.partition_point(|&c| c <= x).min(self.triangles.len() - 1);
            let t = &self.triangles[ti];
            let a = self.vertices[t[0] as usize];
            let b = self.vertices[t[1] as usize];
            let c = self.vertices[t[2] as usize];
            let su = r.gen::<f64>().sqrt();
            let v: f64 = r.gen();
            let (wa, wb, wc) = (1.0 - su, su * (1.0 - v), su * v);
            out.push(wa * a + wb * b + wc * c);
        }
        Ok(out)
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        for v in &self.vertices {
            buf.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            buf.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_obj(path: &Path) -> Result<Mesh> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut mesh = Mesh::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let mut coords = [0.0; 3];
                    for c in coords.iter_mut() {
                        *c = parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| {
                                Error::format(path, format!("bad vertex at line {}", lineno + 1))
                            })?;
                    }
                    mesh.vertices.push(Vector3::from(coords));
                }
                Some("f") => {
                    let mut idx = [0u32; 3];
                    for (n, i) in idx.iter_mut().enumerate() {
                        let tok = parts.next().ok_or_else(|| {
                            Error::format(path, format!("face needs 3 indices at line {}", lineno + 1))
                        })?;
                        let first = tok.split('/').next().unwrap_or("");
                        let one_based: i64 = first.parse().map_err(|_| {
                            Error::format(path, format!("bad face index at line {}", lineno + 1))
                        })?;
                        if one_based < 1 || one_based as usize > mesh.vertices.len() {
                            return Err(Error::format(
                                path,
                                format!("face index out of range at line {} (#{n})", lineno + 1),
                            ));
                        }
                        *i = (one_based - 1) as u32;
                    }
                    mesh.triangles.push(idx);
                }
                _ => {} // comments, normals, etc.
            }
        }
        Ok(mesh)
    }
}

/// Extract the zero level set of a voxel field's SDF sampled at
/// `resolution^3` over the field bounds. An empty level set yields an empty
/// (flagged) mesh.
pub fn marching_cubes(field: &VoxelField, resolution: usize, iso: f64) -> Result<Mesh> {
    marching_cubes_fn(|p| field.sdf_at(&p), field.bounds, resolution, iso)
}

/// Marching cubes over an arbitrary scalar function; values below `iso`
/// count as inside. The sweep streams two z-slices at a time, so large
/// resolutions stay memory-bounded.
pub fn marching_cubes_fn(
    f: impl Fn(Vector3<f64>) -> f64,
    bounds: Aabb,
    resolution: usize,
    iso: f64,
) -> Result<Mesh> {
    if resolution < 8 {
        return Err(Error::input("marching_cubes: resolution must be >= 8"));
    }
    let n = resolution;
    let step: Vec<f64> = (0..3)
        .map(|a| (bounds.hi[a] - bounds.lo[a]) / (n - 1) as f64)
        .collect();
    let vertex_pos = |i: usize, j: usize, k: usize| -> Vector3<f64> {
        Vector3::new(
            bounds.lo[0] + i as f64 * step[0],
            bounds.lo[1] + j as f64 * step[1],
            bounds.lo[2] + k as f64 * step[2],
        )
    };
    let fill_slice = |k: usize, slice: &mut Vec<f64>| {
        slice.clear();
        for j in 0..n {
            for i in 0..n {
                slice.push(f(vertex_pos(i, j, k)));
            }
        }
    };

    let mut mesh = Mesh::default();
    // Lattice-edge key -> welded vertex index. Key: (i, j, k, axis) of the
    // edge's lower lattice corner.
    let mut edge_vertices: HashMap<(u32, u32, u32, u8), u32> = HashMap::new();

    let mut slice_lo = Vec::with_capacity(n * n);
    let mut slice_hi = Vec::with_capacity(n * n);
    fill_slice(0, &mut slice_lo);
    for k in 0..n - 1 {
        fill_slice(k + 1, &mut slice_hi);
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let corner_value = |c: usize| -> f64 {
                    let [di, dj, dk] = CORNER_OFFSET[c];
                    let flat = (j + dj) * n + (i + di);
                    if dk == 0 {
                        slice_lo[flat]
                    } else {
                        slice_hi[flat]
                    }
                };
                let mut cube_index = 0usize;
                for c in 0..8 {
                    if corner_value(c) < iso {
                        cube_index |= 1 << c;
                    }
                }
                if EDGE_TABLE[cube_index] == 0 {
                    continue;
                }
                let mut cell_edge_vertex = [u32::MAX; 12];
                for e in 0..12 {
                    if EDGE_TABLE[cube_index] & (1 << e) == 0 {
                        continue;
                    }
                    let [c0, c1] = EDGE_CORNERS[e];
                    let o0 = CORNER_OFFSET[c0];
                    let o1 = CORNER_OFFSET[c1];
                    let axis = (0..3).find(|&a| o0[a] != o1[a]).unwrap();
                    let lower = [
                        i + o0[0].min(o1[0]),
                        j + o0[1].min(o1[1]),
                        k + o0[2].min(o1[2]),
                    ];
                    let key = (lower[0] as u32, lower[1] as u32, lower[2] as u32, axis as u8);
                    let idx = *edge_vertices.entry(key).or_insert_with(|| {
                        let v0 = corner_value(c0);
                        let v1 = corner_value(c1);
                        let t = if (v1 - v0).abs() < 1e-300 {
                            0.5
                        } else {
                            ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0)
                        };
                        let p0 = vertex_pos(i + o0[0], j + o0[1], k + o0[2]);
                        let p1 = vertex_pos(i + o1[0], j + o1[1], k + o1[2]);
                        let id = mesh.vertices.len() as u32;
                        mesh.vertices.push(p0 + t * (p1 - p0));
                        id
                    });
                    cell_edge_vertex[e] = idx;
                }
                let tris = &TRIANGLE_TABLE[cube_index];
                let mut ti = 0;
                while ti < 16 && tris[ti] >= 0 {
                    let tri = [
                        cell_edge_vertex[tris[ti] as usize],
                        cell_edge_vertex[tris[ti + 1] as usize],
                        cell_edge_vertex[tris[ti + 2] as usize],
                    ];
                    mesh.triangles.push(tri);
                    ti += 3;
                }
            }
        }
        std::mem::swap(&mut slice_lo, &mut slice_hi);
    }

    // Drop zero-area slivers from crossings that landed on lattice vertices.
    let kept: Vec<[u32; 3]> = mesh
        .triangles
        .iter()
        .copied()
        .filter(|t| mesh.triangle_area(t) > 1e-12)
        .collect();
    mesh.triangles = kept;
    if mesh.is_empty() {
        log::warn!("marching_cubes: empty level set");
        mesh.vertices.clear();
    }
    Ok(mesh)
}
