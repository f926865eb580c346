use super::{shape_err, Result, Tensor};

/// How the right operand lines up with the left one.
///
/// The right operand either matches the left shape exactly, or its shape is a
/// trailing suffix of it (bias vectors, per-feature scales, scalars), in which
/// case it repeats `reps` times.
fn broadcast_reps(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if a == b {
        return Ok(1);
    }
    let bn: usize = b.iter().product();
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        let an: usize = a.iter().product();
        return Ok(an / bn.max(1));
    }
    if bn == 1 {
        return Ok(a.iter().product());
    }
    Err(shape_err(op, a, b))
}

fn fold_rhs(grad: Vec<f64>, inner: usize) -> Vec<f64> {
    if grad.len() == inner {
        return grad;
    }
    let mut out = vec![0.0; inner];
    for chunk in grad.chunks(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, g)| *o += g);
    }
    out
}

impl Tensor {
    fn binary(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // (a, b, upstream) -> (d/da, d/db)
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        broadcast_reps(op, &self.shape, &rhs.shape)?;
        let inner = rhs.numel();
        let data: Vec<f64> = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, rhs.data[i % inner]))
            .collect();
        let (a, b) = (self.data_arc(), rhs.data_arc());
        let (ta, tb) = (self.is_tracked(), rhs.is_tracked());
        Tensor::record(self.shape.clone(), data, &[self, rhs], move |g| {
            let mut ga = if ta { vec![0.0; a.len()] } else { Vec::new() };
            let mut gb = if tb { vec![0.0; a.len()] } else { Vec::new() };
            for i in 0..a.len() {
                let (da, db) = df(a[i], b[i % inner], g[i]);
                if ta {
                    ga[i] = da;
                }
                if tb {
                    gb[i] = db;
                }
            }
            vec![ta.then_some(ga), tb.then(|| fold_rhs(gb, inner))]
        })
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        // (x, y, upstream) -> d/dx
        df: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        let x = self.data_arc();
        let y = std::sync::Arc::new(data.clone());
        Tensor::record(self.shape.clone(), data, &[self], move |g| {
            vec![Some(
                (0..x.len()).map(|i| df(x[i], y[i], g[i])).collect(),
            )]
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "div", |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    /// Elementwise maximum; ties send the gradient to the left operand.
    pub fn maximum(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(
            rhs,
            "maximum",
            f64::max,
            |a, b, g| if a >= b { (g, 0.0) } else { (0.0, g) },
        )
    }

    /// Elementwise minimum; ties send the gradient to the left operand.
    pub fn minimum(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(
            rhs,
            "minimum",
            f64::min,
            |a, b, g| if a <= b { (g, 0.0) } else { (0.0, g) },
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary(move |x| x * c, move |_, _, g| g * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary(move |x| x + c, |_, _, g| g)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(|x| x.max(0.0), |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y, g| g * y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(f64::exp, |_, y, g| g * y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary(f64::ln, |x, _, g| g / x)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Result<Tensor> {
        self.unary(f64::abs, |x, _, g| g * x.signum() * (x != 0.0) as u8 as f64)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _, g| if x > lo && x < hi { g } else { 0.0 },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use std::sync::Arc;

    #[test]
    fn bias_broadcast_over_rows() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::vector(&[10.0, 20.0, 30.0]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcast_gradient_folds_into_bias() {
        let tape = Tape::new();
        let x = tape.leaf(&[2, 2], Arc::new(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.leaf(&[2], Arc::new(vec![0.5, -0.5])).unwrap();
        let g = x.mul(&b).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&b).unwrap(), &[4.0, 6.0]);
        assert_eq!(g.get(&x).unwrap(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn scalar_broadcast() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let y = x.mul(&Tensor::scalar(3.0)).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0]);
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let y = Tensor::vector(&[-800.0, 0.0, 800.0]).sigmoid().unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }
}
