use super::{Tensor, Var};
use crate::error::{Error, Result};

/// `c[i] (+)= a[i] · b[i]` for row-major `m×k` and `k×n` blocks, with optional
/// transposition of either operand.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds row-major views of the given slices.
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

impl Var {
    /// Batched matrix product `[N, M, K] x [N, K, P] -> [N, M, P]`.
    pub fn bmm(&self, other: &Var) -> Result<Var> {
        let (&[nb, m, k], &[nb2, k2, p]) = (self.shape(), other.shape()) else {
            return Err(Error::InvalidShape(format!(
                "bmm needs rank-3 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        };
        if nb != nb2 {
            return Err(Error::mismatch("batch", nb, nb2));
        }
        if k != k2 {
            return Err(Error::mismatch("inner dimension", k, k2));
        }
        let mut out = vec![0.0; nb * m * p];
        let (a, b) = (self.value().data(), other.value().data());
        for i in 0..nb {
            gemm(m, k, p, &a[i * m * k..(i + 1) * m * k], false, &b[i * k * p..(i + 1) * k * p], false, &mut out[i * m * p..(i + 1) * m * p]);
        }
        Ok(Var::from_op(
            "bmm",
            Tensor::from_parts(vec![nb, m, p], out),
            vec![self.clone(), other.clone()],
            Box::new(move |g, ins, _| {
                let (a, b, g) = (ins[0].data(), ins[1].data(), g.data());
                let mut ga = vec![0.0; nb * m * k];
                let mut gb = vec![0.0; nb * k * p];
                for i in 0..nb {
                    let gi = &g[i * m * p..(i + 1) * m * p];
                    gemm(m, p, k, gi, false, &b[i * k * p..(i + 1) * k * p], true, &mut ga[i * m * k..(i + 1) * m * k]);
                    gemm(k, m, p, &a[i * m * k..(i + 1) * m * k], true, gi, false, &mut gb[i * k * p..(i + 1) * k * p]);
                }
                vec![
                    Some(Tensor::from_parts(vec![nb, m, k], ga)),
                    Some(Tensor::from_parts(vec![nb, k, p], gb)),
                ]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidShape("softmax of a rank-0 tensor".into()))?;
        let mut out = self.value().data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(Var::from_op(
            "softmax",
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = Vec::with_capacity(g.numel());
                for (gr, yr) in g.data().chunks_exact(n).zip(y.data().chunks_exact(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
            }),
        ))
    }
}
