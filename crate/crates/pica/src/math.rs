//! Small fixed-size linear algebra and a CSR sparse matrix.

use crate::Real;

pub type Vec3 = [Real; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [[Real; 3]; 3];

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, k: Real) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot3(a: Vec3, b: Vec3) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> Real {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    if n > 0.0 {
        scale3(a, 1.0 / n)
    } else {
        [0.0, 0.0, 0.0]
    }
}

pub fn matvec3(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            t[j][i] = x;
        }
    }
    t
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn mat3_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Build an orthonormal camera rotation whose rows are the camera axes, from
/// a forward direction and an approximate up vector (look-at convention:
/// +z forward, y down on the image, x right).
pub fn look_rotation(forward: Vec3, up_hint: Vec3) -> Mat3 {
    let z = normalize3(forward);
    let mut x = cross3(up_hint, z);
    if norm3(x) < 1e-8 {
        x = cross3([0.0, 1.0, 0.0], z);
    }
    let x = normalize3(x);
    // y points "down" in image space so that world-up maps to decreasing rows.
    let y = cross3(z, x);
    [x, y, z]
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<u32>,
    pub indices: Vec<u32>,
    pub values: Vec<Real>,
}

impl Csr {
    /// Build from per-row (col, value) lists; entries within a row must be
    /// unique. Column order inside each row is preserved.
    pub fn from_rows(rows: Vec<Vec<(u32, Real)>>, cols: usize) -> Csr {
        let n = rows.len();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0u32);
        for row in rows {
            for (c, v) in row {
                debug_assert!((c as usize) < cols);
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len() as u32);
        }
        Csr { rows: n, cols, indptr, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// y = M x for a dense x with `c` columns, row-major `[cols, c]`.
    pub fn matvec_dense(&self, x: &[Real], c: usize, out: &mut [Real]) {
        assert_eq!(x.len(), self.cols * c);
        assert_eq!(out.len(), self.rows * c);
        out.fill(0.0);
        for r in 0..self.rows {
            let (lo, hi) = (self.indptr[r] as usize, self.indptr[r + 1] as usize);
            let orow = &mut out[r * c..(r + 1) * c];
            for e in lo..hi {
                let col = self.indices[e] as usize;
                let v = self.values[e];
                let xrow = &x[col * c..(col + 1) * c];
                for k in 0..c {
                    orow[k] += v * xrow[k];
                }
            }
        }
    }

    /// Transposed copy (rows and columns swapped), rows sorted by column.
    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0u32; self.cols];
        for &c in &self.indices {
            counts[c as usize] += 1;
        }
        let mut indptr = vec![0u32; self.cols + 1];
        for i in 0..self.cols {
            indptr[i + 1] = indptr[i] + counts[i];
        }
        let mut indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut cursor = indptr[..self.cols].to_vec();
        for r in 0..self.rows {
            for e in self.indptr[r] as usize..self.indptr[r + 1] as usize {
                let c = self.indices[e] as usize;
                let dst = cursor[c] as usize;
                indices[dst] = r as u32;
                values[dst] = self.values[e];
                cursor[c] += 1;
            }
        }
        Csr { rows: self.cols, cols: self.rows, indptr, indices, values }
    }

    /// Dense copy, row-major `[rows, cols]` (tests only; small matrices).
    pub fn to_dense(&self) -> Vec<Real> {
        let mut d = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for e in self.indptr[r] as usize..self.indptr[r + 1] as usize {
                d[r * self.cols + self.indices[e] as usize] += self.values[e];
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_follows_right_hand_rule() {
        assert_eq!(cross3([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn look_rotation_is_orthonormal() {
        let r = look_rotation([0.3, -0.4, 0.86], [0.0, 1.0, 0.0]);
        let rt = mat3_transpose(&r);
        let i = matmul3(&r, &rt);
        for (a, row) in i.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-5, "R R^T != I at {},{}", a, b);
            }
        }
    }

    #[test]
    fn csr_transpose_roundtrip() {
        let m = Csr::from_rows(
            vec![vec![(1, 2.0), (3, -1.0)], vec![], vec![(0, 4.0), (1, 0.5)]],
            4,
        );
        let t = m.transpose().transpose();
        assert_eq!(m.to_dense(), t.to_dense());
        let mut y = vec![0.0; 3];
        m.matvec_dense(&[1.0, 2.0, 3.0, 4.0], 1, &mut y);
        assert_eq!(y, vec![0.0, 0.0, 5.0]);
    }
}
