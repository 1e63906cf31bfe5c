//! Small dense kernels used on the hot path of the neighbor factorization.
//!
//! Matrices are row-major `n × n` slices. Only the lower triangle is read.

/// In-place Cholesky factorization `A = L Lᵀ`, writing `L` into the lower
/// triangle and `Lᵀ` into the strict upper one. Only the lower triangle of
/// `A` is read.
///
/// Returns `false` if a non-positive pivot is met.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    debug_assert!(a.len() >= n * n);
    for j in 0..n {
        let diag = a[j * n + j];
        if !(diag > 0.0) || !diag.is_finite() {
            return false;
        }
        let ljj = diag.sqrt();
        let inv = 1.0 / ljj;
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let v = a[i * n + j] * inv;
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
        // right-looking update of the trailing lower triangle
        for i in (j + 1)..n {
            let (top, bottom) = a.split_at_mut(i * n);
            let lij = bottom[j];
            for (r, l) in bottom[j + 1..=i].iter_mut().zip(&top[j * n + j + 1..=j * n + i]) {
                *r -= lij * l;
            }
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky_in_place`].
pub fn cholesky_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `L y = b` in place (forward substitution only).
pub fn forward_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let s = b[i] - dot(&l[i * n..i * n + i], &b[..i]);
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place, sweeping the rows of `L` from the bottom.
pub fn backward_solve_transposed_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for r in (0..n).rev() {
        let x = b[r] / l[r * n + r];
        b[r] = x;
        for (bq, lq) in b[..r].iter_mut().zip(&l[r * n..r * n + r]) {
            *bq -= lq * x;
        }
    }
}

/// Solves `C x = c` in place for a positive definite `C` given by its
/// strict lower triangle `packed` (row by row) and constant diagonal
/// `diag`, returning `cᵀ C⁻¹ c`. `None` on a non-positive pivot.
pub fn packed_spd_solve(packed: &[f64], diag: f64, c: &mut [f64]) -> Option<f64> {
    macro_rules! fixed {
        ($($k:literal)*) => {
            match c.len() {
                $($k => packed_spd_solve_fixed::<$k>(packed, diag, c),)*
                k => packed_spd_solve_any(packed, diag, c, k),
            }
        };
    }
    fixed!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16)
}

fn packed_spd_solve_fixed<const K: usize>(packed: &[f64], diag: f64, c: &mut [f64]) -> Option<f64> {
    let mut l = [[0.0f64; K]; K];
    let mut it = packed.iter();
    for (a, row) in l.iter_mut().enumerate() {
        for v in row.iter_mut().take(a) {
            *v = *it.next()?;
        }
        row[a] = diag;
    }
    let mut inv = [0.0f64; K];
    for j in 0..K {
        let mut d = l[j][j];
        for q in 0..j {
            d -= l[j][q] * l[j][q];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[j][j] = ljj;
        inv[j] = 1.0 / ljj;
        for i in (j + 1)..K {
            let mut s = l[i][j];
            for q in 0..j {
                s -= l[i][q] * l[j][q];
            }
            l[i][j] = s * inv[j];
        }
    }
    let mut y = [0.0f64; K];
    y.copy_from_slice(c);
    for i in 0..K {
        let mut s = y[i];
        for q in 0..i {
            s -= l[i][q] * y[q];
        }
        y[i] = s * inv[i];
    }
    let explained = y.iter().map(|v| v * v).sum();
    for i in (0..K).rev() {
        let mut s = y[i];
        for q in (i + 1)..K {
            s -= l[q][i] * y[q];
        }
        y[i] = s * inv[i];
    }
    c.copy_from_slice(&y);
    Some(explained)
}

/// Systems solved side by side by [`packed_spd_solve_lanes`].
pub const LANES: usize = 4;

/// [`packed_spd_solve`] for `LANES` systems of one common size. Sizes up to
/// 16 are stepped together so the arithmetic vectorizes across systems;
/// each lane performs the same operations in the same order as the
/// single-system path. `None` if any system has a non-positive pivot.
pub fn packed_spd_solve_batch(packed: [&[f64]; LANES], diag: f64, rhs: [&mut [f64]; LANES]) -> Option<[f64; LANES]> {
    macro_rules! fixed {
        ($($k:literal)*) => {
            match rhs[0].len() {
                $($k => packed_spd_solve_lanes::<$k>(packed, diag, rhs),)*
                _ => {
                    let mut out = [0.0; LANES];
                    for ((o, p), r) in out.iter_mut().zip(packed).zip(rhs) {
                        *o = packed_spd_solve(p, diag, r)?;
                    }
                    Some(out)
                }
            }
        };
    }
    debug_assert!(rhs.iter().all(|r| r.len() == rhs[0].len()));
    fixed!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16)
}

fn packed_spd_solve_lanes<const K: usize>(
    packed: [&[f64]; LANES],
    diag: f64,
    rhs: [&mut [f64]; LANES],
) -> Option<[f64; LANES]> {
    let mut l = [[[0.0f64; LANES]; K]; K];
    let mut p = 0;
    for a in 0..K {
        for b in 0..a {
            for s in 0..LANES {
                l[a][b][s] = packed[s][p];
            }
            p += 1;
        }
        l[a][a] = [diag; LANES];
    }
    let mut inv = [[0.0f64; LANES]; K];
    for j in 0..K {
        let mut d = l[j][j];
        for q in 0..j {
            for s in 0..LANES {
                d[s] -= l[j][q][s] * l[j][q][s];
            }
        }
        if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return None;
        }
        for s in 0..LANES {
            l[j][j][s] = d[s].sqrt();
            inv[j][s] = 1.0 / l[j][j][s];
        }
        for i in (j + 1)..K {
            let mut acc = l[i][j];
            for q in 0..j {
                for s in 0..LANES {
                    acc[s] -= l[i][q][s] * l[j][q][s];
                }
            }
            for s in 0..LANES {
                l[i][j][s] = acc[s] * inv[j][s];
            }
        }
    }
    let mut y = [[0.0f64; LANES]; K];
    for (i, yi) in y.iter_mut().enumerate() {
        for s in 0..LANES {
            yi[s] = rhs[s][i];
        }
    }
    for i in 0..K {
        let mut acc = y[i];
        for q in 0..i {
            for s in 0..LANES {
                acc[s] -= l[i][q][s] * y[q][s];
            }
        }
        for s in 0..LANES {
            y[i][s] = acc[s] * inv[i][s];
        }
    }
    let mut explained = [0.0f64; LANES];
    for s in 0..LANES {
        explained[s] = y.iter().map(|v| v[s] * v[s]).sum();
    }
    for i in (0..K).rev() {
        let mut acc = y[i];
        for q in (i + 1)..K {
            for s in 0..LANES {
                acc[s] -= l[q][i][s] * y[q][s];
            }
        }
        for s in 0..LANES {
            y[i][s] = acc[s] * inv[i][s];
        }
    }
    for (s, r) in rhs.into_iter().enumerate() {
        for (i, v) in r.iter_mut().enumerate() {
            *v = y[i][s];
        }
    }
    Some(explained)
}

fn packed_spd_solve_any(packed: &[f64], diag: f64, c: &mut [f64], k: usize) -> Option<f64> {
    let mut a = vec![0.0; k * k];
    let mut it = packed.iter();
    for (r, row) in a.chunks_exact_mut(k).enumerate() {
        for v in row.iter_mut().take(r) {
            *v = *it.next()?;
        }
        row[r] = diag;
    }
    if !cholesky_in_place(&mut a, k) {
        return None;
    }
    forward_solve_in_place(&a, k, c);
    let explained = c.iter().map(|v| v * v).sum();
    backward_solve_transposed_in_place(&a, k, c);
    Some(explained)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_triangular_solves_invert_the_factor() {
        let mut a = vec![4.0, 2.0, 1.0, 2.0, 5.0, 3.0, 1.0, 3.0, 6.0];
        let full = a.clone();
        assert!(cholesky_in_place(&mut a, 3));
        let mut x = vec![1.0, -2.0, 0.5];
        forward_solve_in_place(&a, 3, &mut x);
        backward_solve_transposed_in_place(&a, 3, &mut x);
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| full[i * 3 + j] * x[j]).sum();
            assert!((ax - [1.0, -2.0, 0.5][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn packed_solver_agrees_across_sizes() {
        for k in [1usize, 3, 10, 16, 19] {
            let diag = 2.0;
            let packed: Vec<f64> = (0..k * k.saturating_sub(1) / 2).map(|q| 0.9 / (1.0 + q as f64)).collect();
            let rhs: Vec<f64> = (0..k).map(|i| 1.0 - 0.1 * i as f64).collect();
            let mut x = rhs.clone();
            let quad = packed_spd_solve(&packed, diag, &mut x).unwrap();
            let mut full = vec![0.0; k * k];
            let mut q = 0;
            for a in 0..k {
                for b in 0..a {
                    full[a * k + b] = packed[q];
                    full[b * k + a] = packed[q];
                    q += 1;
                }
                full[a * k + a] = diag;
            }
            for i in 0..k {
                let ax: f64 = (0..k).map(|j| full[i * k + j] * x[j]).sum();
                assert!((ax - rhs[i]).abs() < 1e-12, "k = {k}");
            }
            assert!((quad - dot(&x, &rhs)).abs() < 1e-12);
        }
    }

    #[test]
    fn lanes_reproduce_single_systems_bit_for_bit() {
        const K: usize = 6;
        let packs: Vec<Vec<f64>> = (0..LANES)
            .map(|s| (0..K * (K - 1) / 2).map(|q| 0.8 / (2.0 + q as f64 + s as f64)).collect())
            .collect();
        let mut rhs: Vec<Vec<f64>> = (0..LANES).map(|s| (0..K).map(|i| (i + s) as f64 * 0.3 - 1.0).collect()).collect();
        let mut single = rhs.clone();
        let quads: Vec<f64> = (0..LANES)
            .map(|s| packed_spd_solve(&packs[s], 1.7, &mut single[s]).unwrap())
            .collect();
        let [a, b, c, d] = &mut rhs[..] else { unreachable!() };
        let got = packed_spd_solve_batch(
            [&packs[0], &packs[1], &packs[2], &packs[3]],
            1.7,
            [a.as_mut_slice(), b.as_mut_slice(), c.as_mut_slice(), d.as_mut_slice()],
        )
        .unwrap();
        assert_eq!(got.to_vec(), quads);
        assert_eq!(rhs, single);
    }

    #[test]
    fn solves_small_spd_system() {
        // A = [[4, 2], [2, 3]], b = [2, 1] => x = [0.5, 0]
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        assert!(cholesky_in_place(&mut a, 2));
        let mut b = vec![2.0, 1.0];
        cholesky_solve_in_place(&a, 2, &mut b);
        assert!((b[0] - 0.5).abs() < 1e-14);
        assert!(b[1].abs() < 1e-14);
    }

    #[test]
    fn rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky_in_place(&mut a, 2));
    }
}
