use super::{shape_err, Result, Tensor};

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl Tensor {
    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (&self.shape[..], &rhs.shape[..]) else {
            return Err(shape_err("matmul", &self.shape, &rhs.shape));
        };
        if k != k2 {
            return Err(shape_err("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.data, &rhs.data, &mut out, m, k, n);
        let (a, b) = (self.data_arc(), rhs.data_arc());
        let (ta, tb) = (self.is_tracked(), rhs.is_tracked());
        Tensor::record(vec![m, n], out, &[self, rhs], move |g| {
            let ga = ta.then(|| {
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(g, &b, &mut ga, m, n, k);
                ga
            });
            let gb = tb.then(|| {
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(&a, g, &mut gb, m, k, n);
                gb
            });
            vec![ga, gb]
        })
    }
}
