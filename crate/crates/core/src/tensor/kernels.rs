//! Plain loop kernels. Every reduction runs in a fixed order so results are
//! bit-reproducible across runs and thread counts.

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// `da[m×k] += dc[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_grad_lhs(da: &mut [f64], dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            da[i * k + p] += dot(dc_row, b_row);
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · dc[m×n]`
pub(crate) fn matmul_grad_rhs(db: &mut [f64], a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (db_pj, &dc_ij) in db_row.iter_mut().zip(dc_row) {
                *db_pj += a_ip * dc_ij;
            }
        }
    }
}

/// Dot product with four interleaved partial sums (fixed order, so still
/// bit-reproducible).
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multiplies `weight[p×q]` by the block expansion of `grid[r×c]` without
/// materializing the expanded gate: entry `(i, j)` is scaled by
/// `grid[i / (p/r)][j / (q/c)]`.
pub(crate) fn scale_by_grid(weight: &[f64], grid: &[f64], p: usize, q: usize, r: usize, c: usize) -> Vec<f64> {
    let row_rep = p / r;
    let col_rep = q / c;
    let mut out = Vec::with_capacity(p * q);
    for i in 0..p {
        let g_row = &grid[(i / row_rep) * c..(i / row_rep + 1) * c];
        let w_row = &weight[i * q..(i + 1) * q];
        for (block, &g) in g_row.iter().enumerate() {
            out.extend(w_row[block * col_rep..(block + 1) * col_rep].iter().map(|w| w * g));
        }
    }
    out
}

/// Sums each `(p/r)×(q/c)` block of `m[p×q]` into an `r×c` grid.
pub(crate) fn block_sum(m: &[f64], p: usize, q: usize, r: usize, c: usize) -> Vec<f64> {
    let row_rep = p / r;
    let col_rep = q / c;
    let mut out = vec![0.0; r * c];
    for i in 0..p {
        let m_row = &m[i * q..(i + 1) * q];
        let out_row = &mut out[(i / row_rep) * c..(i / row_rep + 1) * c];
        for (block, o) in out_row.iter_mut().enumerate() {
            *o += m_row[block * col_rep..(block + 1) * col_rep].iter().sum::<f64>();
        }
    }
    out
}
