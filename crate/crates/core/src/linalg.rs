//! 3×3 helpers for the retardance solver.

use crate::scalar::Scalar;

pub(crate) type Vec3<T> = [T; 3];
pub(crate) type Mat3<T> = [[T; 3]; 3];

pub(crate) fn mat_vec<T: Scalar>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    let mut out = [T::zero(); 3];
    for (o, row) in out.iter_mut().zip(m) {
        *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
    }
    out
}

pub(crate) fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn norm<T: Scalar>(v: &Vec3<T>) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Gaussian elimination with partial pivoting. `None` if the system is singular.
pub(crate) fn solve<T: Scalar>(a: &Mat3<T>, b: &Vec3<T>) -> Option<Vec3<T>> {
    let mut m = [[T::zero(); 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&x, &y| {
            m[x][col]
                .abs()
                .partial_cmp(&m[y][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if !(m[pivot][col].abs() > T::min_positive_value()) {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] = m[row][k] - f * m[col][k];
            }
        }
    }
    let mut x = [T::zero(); 3];
    for i in (0..3).rev() {
        let mut acc = m[i][3];
        for k in i + 1..3 {
            acc = acc - m[i][k] * x[k];
        }
        x[i] = acc / m[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
