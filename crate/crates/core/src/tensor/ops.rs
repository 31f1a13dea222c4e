use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    if a.shape == b.shape {
        Ok((Bcast::Same, a.shape.clone()))
    } else if a.numel() == 1 {
        Ok((Bcast::LeftScalar, b.shape.clone()))
    } else if b.numel() == 1 {
        Ok((Bcast::RightScalar, a.shape.clone()))
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        })
    }
}

fn zip_with(mode: Bcast, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::LeftScalar => b.iter().map(|&y| f(a[0], y)).collect(),
        Bcast::RightScalar => a.iter().map(|&x| f(x, b[0])).collect(),
    }
}

/// Collapse a gradient onto an operand that was broadcast from a scalar.
fn reduce_if(g: Vec<f64>, scalar: bool) -> Vec<f64> {
    if scalar {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// C[m×n] = A·B with optional transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    // A is logically m×k; stored row-major as m×k, or k×m when transposed.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: slices cover m×k, k×n and m×n elements with the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        Tensor::from_op(&[self], self.shape.clone(), data.clone(), || {
            let x = self.data.clone();
            Box::new(move |g| {
                vec![g.iter().zip(&x).zip(&data).map(|((g, &x), &y)| g * df(x, y)).collect()]
            })
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (mode, shape) = bcast("add", self, other)?;
        let data = zip_with(mode, &self.data, &other.data, |x, y| x + y);
        Ok(Tensor::from_op(&[self, other], shape, data, || {
            Box::new(move |g| {
                vec![
                    reduce_if(g.to_vec(), matches!(mode, Bcast::LeftScalar)),
                    reduce_if(g.to_vec(), matches!(mode, Bcast::RightScalar)),
                ]
            })
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (mode, shape) = bcast("sub", self, other)?;
        let data = zip_with(mode, &self.data, &other.data, |x, y| x - y);
        Ok(Tensor::from_op(&[self, other], shape, data, || {
            Box::new(move |g| {
                vec![
                    reduce_if(g.to_vec(), matches!(mode, Bcast::LeftScalar)),
                    reduce_if(g.iter().map(|v| -v).collect(), matches!(mode, Bcast::RightScalar)),
                ]
            })
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (mode, shape) = bcast("mul", self, other)?;
        let data = zip_with(mode, &self.data, &other.data, |x, y| x * y);
        Ok(Tensor::from_op(&[self, other], shape, data, || {
            let (a, b) = (self.data.clone(), other.data.clone());
            Box::new(move |g| {
                let ga = match mode {
                    Bcast::Same => hadamard(g, &b),
                    Bcast::LeftScalar => vec![hadamard(g, &b).iter().sum()],
                    Bcast::RightScalar => g.iter().map(|g| g * b[0]).collect(),
                };
                let gb = match mode {
                    Bcast::Same => hadamard(g, &a),
                    Bcast::LeftScalar => g.iter().map(|g| g * a[0]).collect(),
                    Bcast::RightScalar => vec![hadamard(g, &a).iter().sum()],
                };
                vec![ga, gb]
            })
        }))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (mode, shape) = bcast("div", self, other)?;
        let data = zip_with(mode, &self.data, &other.data, |x, y| x / y);
        Ok(Tensor::from_op(&[self, other], shape, data, || {
            let (a, b) = (self.data.clone(), other.data.clone());
            Box::new(move |g| {
                let n = g.len();
                let at = |i: usize| if matches!(mode, Bcast::LeftScalar) { a[0] } else { a[i] };
                let bt = |i: usize| if matches!(mode, Bcast::RightScalar) { b[0] } else { b[i] };
                let ga: Vec<f64> = (0..n).map(|i| g[i] / bt(i)).collect();
                let gb: Vec<f64> = (0..n).map(|i| -g[i] * at(i) / (bt(i) * bt(i))).collect();
                vec![
                    reduce_if(ga, matches!(mode, Bcast::LeftScalar)),
                    reduce_if(gb, matches!(mode, Bcast::RightScalar)),
                ]
            })
        }))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|x| x * s).collect();
        Tensor::from_op(&[self], self.shape.clone(), data, || {
            Box::new(move |g| vec![g.iter().map(|g| g * s).collect()])
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|x| x + s).collect();
        Tensor::from_op(&[self], self.shape.clone(), data, || Box::new(|g| vec![g.to_vec()]))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// x·sigmoid(x).
    pub fn silu(&self) -> Tensor {
        fn sig(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }
        self.unary(|x| x * sig(x), |x, _| {
            let s = sig(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(&[self], Vec::new(), vec![self.data.iter().sum()], || {
            Box::new(move |g| vec![vec![g[0]; n]])
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().mul_scalar(1.0 / n as f64)
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self.mul(other)?.sum())
    }

    /// Reinterpret the shape; gradients pass through unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(&[self], shape.to_vec(), self.data.clone(), || {
            Box::new(|g| vec![g.to_vec()])
        }))
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn index(&self, i: usize) -> Result<Tensor> {
        let n = self.numel();
        if i >= n {
            return Err(Error::invalid(format!("index {i} out of range for {n} elements")));
        }
        Ok(Tensor::from_op(&[self], Vec::new(), vec![self.data[i]], || {
            Box::new(move |g| {
                let mut out = vec![0.0; n];
                out[i] = g[0];
                vec![out]
            })
        }))
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let out = self.gather_rows(&[i])?;
        let n = out.shape[1];
        out.reshape(&[n])
    }

    /// Rows of a 2-D table selected by `idx`, shape [idx.len(), cols].
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let [rows, cols] = self.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        Ok(Tensor::from_op(&[self], vec![idx.len(), cols], data, || {
            let idx = idx.to_vec();
            Box::new(move |g| {
                let mut out = vec![0.0; rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        out[i * cols + c] += g[r * cols + c];
                    }
                }
                vec![out]
            })
        }))
    }

    /// [m×n] + bias[n], bias broadcast over rows.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let [m, n] = self.dims2("add_bias")?;
        if bias.shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let data = self
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias.data).map(|(x, b)| x + b))
            .collect();
        Ok(Tensor::from_op(&[self, bias], vec![m, n], data, || {
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![g.to_vec(), gb]
            })
        }))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        let ([m, k], [k2, n]) = (
            self.dims2("matmul").map_err(|_| mismatch())?,
            other.dims2("matmul").map_err(|_| mismatch())?,
        );
        if k != k2 {
            return Err(mismatch());
        }
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut data);
        Ok(Tensor::from_op(&[self, other], vec![m, n], data, || {
            let (a, b) = (self.data.clone(), other.data.clone());
            Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, &b, true, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &a, true, g, false, &mut gb);
                vec![ga, gb]
            })
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let n = *self.shape.last().unwrap_or(&1);
        let mut data = self.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Tensor::from_op(&[self], self.shape.clone(), data.clone(), || {
            Box::new(move |g| {
                let mut out = vec![0.0; g.len()];
                for ((o, y), g) in out.chunks_mut(n).zip(data.chunks(n)).zip(g.chunks(n)) {
                    let gy: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        o[j] = y[j] * (g[j] - gy);
                    }
                }
                vec![out]
            })
        })
    }

    fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(Error::invalid(format!("{op} needs a 2-D tensor, got {:?}", self.shape))),
        }
    }
}
