//! Small dense linear-algebra helpers for the market dimensions used here
//! (volatility matrices up to a few dozen rows). Not a general-purpose
//! LAPACK replacement; everything is plain Gaussian elimination on `f64`.

use ndarray::Array2;

/// Inverts a square matrix by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot column has no entry above `tiny`, i.e. the
/// matrix is singular to working precision.
pub fn invert(m: &Array2<f64>) -> Option<Array2<f64>> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "invert: matrix must be square, got {:?}", m.dim());
    let tiny = 1e-12;

    // Augmented system [A | I], reduced in place.
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);

    for col in 0..n {
        // Partial pivot: largest |entry| in this column at or below the diagonal.
        let mut pivot = col;
        for row in col + 1..n {
            if a[(row, col)].abs() > a[(pivot, col)].abs() {
                pivot = row;
            }
        }
        if a[(pivot, col)].abs() < tiny {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap((pivot, j), (col, j));
                inv.swap((pivot, j), (col, j));
            }
        }
        let d = a[(col, col)];
        for j in 0..n {
            a[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[(row, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(row, j)] -= f * a[(col, j)];
                inv[(row, j)] -= f * inv[(col, j)];
            }
        }
    }
    Some(inv)
}

/// Largest eigenvalue of the symmetric positive semi-definite matrix `s`,
/// by power iteration from a deterministic start vector.
pub fn largest_eigenvalue_spd(s: &Array2<f64>, iters: usize) -> f64 {
    let n = s.nrows();
    assert_eq!(n, s.ncols(), "largest_eigenvalue_spd: matrix must be square");
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += s[(i, j)] * v[j];
            }
            w[i] = acc;
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        for i in 0..n {
            v[i] = w[i] / norm;
        }
    }
    lambda
}
