//! Cotangent-weight Laplacian assembled on the neutral mesh.

use std::collections::BTreeMap;

use crate::diff::Tensor;
use crate::geometry::MeshTopology;
use crate::math::Csr;
use crate::Real;

/// Sparse N×N Laplacian with cotangent edge weights: off-diagonal entries
/// are −w_ij where w_ij averages cot(opposite angle) over the triangles
/// adjacent to edge ij (interior edges have two, boundary edges use their
/// single angle alone); diagonals make rows sum to zero. Triangles with
/// near-zero area (< 1e-12 mm²) have their cot contributions clamped to
/// ±1e4; the second return value counts such triangles.
pub fn cotangent_laplacian(topo: &MeshTopology, neutral: &Tensor) -> (Csr, usize) {
    let n = topo.vertex_count();
    assert_eq!(neutral.shape, &[n, 3], "neutral positions shape");
    let p = |i: usize, k: usize| neutral.data[i * 3 + k] as f64;

    // edge (lo,hi) -> (sum of cots, adjacent-triangle count)
    let mut acc: BTreeMap<(u32, u32), (f64, u32)> = BTreeMap::new();
    let mut clamped_tris = 0usize;
    for tri in &topo.triangles {
        let [a, b, c] = *tri;
        let mut degenerate = false;
        let mut cots = [0.0f64; 3];
        for (slot, (i, j, k)) in [(a, b, c), (b, c, a), (c, a, b)].into_iter().enumerate() {
            let (i, j, k) = (i as usize, j as usize, k as usize);
            let e1 = [p(i, 0) - p(k, 0), p(i, 1) - p(k, 1), p(i, 2) - p(k, 2)];
            let e2 = [p(j, 0) - p(k, 0), p(j, 1) - p(k, 1), p(j, 2) - p(k, 2)];
            let dot = e1[0] * e2[0] + e1[1] * e2[1] + e1[2] * e2[2];
            let cx = e1[1] * e2[2] - e1[2] * e2[1];
            let cy = e1[2] * e2[0] - e1[0] * e2[2];
            let cz = e1[0] * e2[1] - e1[1] * e2[0];
            let cross_norm = (cx * cx + cy * cy + cz * cz).sqrt();
            if 0.5 * cross_norm < 1e-12 {
                degenerate = true;
                cots[slot] = if dot == 0.0 { 0.0 } else { (dot.signum()) * 1e4 };
            } else {
                cots[slot] = dot / cross_norm;
            }
        }
        if degenerate {
            clamped_tris += 1;
            for c in &mut cots {
                *c = c.clamp(-1e4, 1e4);
            }
        }
        for (slot, (i, j)) in [(a, b), (b, c), (c, a)].into_iter().enumerate() {
            let key = (i.min(j), i.max(j));
            let e = acc.entry(key).or_insert((0.0, 0));
            e.0 += cots[slot];
            e.1 += 1;
        }
    }

    let mut rows: Vec<Vec<(u32, Real)>> = vec![Vec::new(); n];
    let mut diag = vec![0.0f64; n];
    for (&(i, j), &(sum, cnt)) in &acc {
        let w = sum / cnt as f64;
        rows[i as usize].push((j, -w as Real));
        rows[j as usize].push((i, -w as Real));
        diag[i as usize] += w;
        diag[j as usize] += w;
    }
    for (i, row) in rows.iter_mut().enumerate() {
        row.push((i as u32, diag[i] as Real));
        row.sort_unstable_by_key(|&(c, _)| c);
    }
    (Csr::from_rows(rows, n), clamped_tris)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_grid_topology;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn planar_positions(topo: &MeshTopology) -> Tensor {
        Tensor::from_fn(&[topo.vertex_count(), 3], |i| {
            let [u, v] = topo.vertex_uvs[i / 3];
            [u, v, 0.0][i % 3]
        })
    }

    #[test]
    fn square_fixture_weights() {
        let topo = MeshTopology {
            vertex_uvs: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        let pos = planar_positions(&topo);
        let (l, clamped) = cotangent_laplacian(&topo, &pos);
        assert_eq!(clamped, 0);
        let d = l.to_dense();
        let at = |i: usize, j: usize| d[i * 4 + j];
        // Axis edges: single adjacent triangle, opposite angle 45 deg.
        for (i, j) in [(0, 1), (1, 2), (2, 3), (0, 3)] {
            assert!((at(i, j) + 1.0).abs() < 1e-6, "edge ({i},{j}) weight");
            assert!((at(j, i) + 1.0).abs() < 1e-6);
        }
        // Diagonal: two right angles, cot 90 deg = 0 on both sides.
        assert!(at(0, 2).abs() < 1e-6);
        assert!(at(2, 0).abs() < 1e-6);
    }

    #[test]
    fn constant_vector_is_in_null_space() {
        let topo = make_grid_topology(6, 7, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos = Tensor::from_fn(&[topo.vertex_count(), 3], |i| {
            let [u, v] = topo.vertex_uvs[i / 3];
            [u, v, 0.1 * (6.0 * u).sin() * (5.0 * v).cos()][i % 3]
                + rng.gen_range(-0.01..0.01)
        });
        let (l, _) = cotangent_laplacian(&topo, &pos);
        let n = topo.vertex_count();
        let ones = vec![1.0 as Real; n];
        let mut out = vec![0.0 as Real; n];
        l.matvec_dense(&ones, 1, &mut out);
        for v in out {
            assert!(v.abs() < 1e-4, "row sum {v}");
        }
    }

    #[test]
    fn symmetric_and_positive_semidefinite() {
        let topo = make_grid_topology(5, 5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pos = Tensor::from_fn(&[topo.vertex_count(), 3], |i| {
            let [u, v] = topo.vertex_uvs[i / 3];
            [u, v, 0.2 * u * v][i % 3] + rng.gen_range(-0.02..0.02)
        });
        let (l, _) = cotangent_laplacian(&topo, &pos);
        let n = topo.vertex_count();
        let d = l.to_dense();
        for i in 0..n {
            for j in 0..n {
                assert!((d[i * n + j] - d[j * n + i]).abs() < 1e-6);
            }
        }
        for trial in 0..100 {
            let x: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut lx = vec![0.0 as Real; n];
            l.matvec_dense(&x, 1, &mut lx);
            let q: Real = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
            let xx: Real = x.iter().map(|a| a * a).sum();
            assert!(q >= -1e-6 * xx, "trial {trial}: x'Lx = {q}");
        }
    }

    #[test]
    fn linear_functions_are_harmonic_at_interior_vertices() {
        let (rows, cols) = (8, 8);
        let topo = make_grid_topology(rows, cols, 0.0);
        let pos = planar_positions(&topo);
        let (l, _) = cotangent_laplacian(&topo, &pos);
        // Apply L to each coordinate of the planar embedding itself.
        for k in 0..2 {
            let x: Vec<Real> = (0..topo.vertex_count()).map(|i| pos.at2(i, k)).collect();
            let mut lx = vec![0.0 as Real; topo.vertex_count()];
            l.matvec_dense(&x, 1, &mut lx);
            for i in 1..rows - 1 {
                for j in 1..cols - 1 {
                    let v = i * cols + j;
                    assert!(lx[v].abs() < 1e-5, "vertex {v} coord {k}: {}", lx[v]);
                }
            }
        }
    }

    #[test]
    fn degenerate_triangles_are_clamped_and_counted() {
        let topo = MeshTopology {
            vertex_uvs: vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [0.5, 1.0]],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        // First triangle has collinear positions: zero area.
        let pos = Tensor::new(
            vec![
                0.0, 0.0, 0.0, //
                0.5, 0.0, 0.0, //
                1.0, 0.0, 0.0, //
                0.5, 0.8, 0.0,
            ],
            &[4, 3],
        );
        let (l, clamped) = cotangent_laplacian(&topo, &pos);
        assert_eq!(clamped, 1);
        let d = l.to_dense();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(d.iter().any(|&v| v.abs() >= 1e3), "clamped cot magnitude retained");
    }
}
