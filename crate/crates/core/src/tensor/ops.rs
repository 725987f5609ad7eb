//! Differentiable tensor primitives.
//!
//! Each op computes its output eagerly and registers a backward closure on
//! the tape. Loop orders are fixed so the same inputs give bitwise identical
//! results; backward closures accumulate deterministically in parent order.

use std::rc::Rc;

use super::{fmt_shape, Tensor};
use crate::error::{Result, TfkError};
use crate::scalar::Real;

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

impl<T: Real> Tensor<T> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(TfkError::dim(
                "add",
                fmt_shape(self.shape()),
                fmt_shape(other.shape()),
            ));
        }
        let out = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| *x + *y).collect::<Vec<T>>())
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|dy, parents| {
                parents[0].accum_grad(dy);
                parents[1].accum_grad(dy);
            }),
        ))
    }

    /// Adds `other` cyclically: `out[i] = self[i] + other[i % other.len()]`.
    /// Used to broadcast per-head bias and per-window masks over the batch.
    pub fn add_tiled(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.len();
        let k = other.len();
        if k == 0 || n % k != 0 {
            return Err(TfkError::dim(
                "add_tiled",
                format!("tile dividing {n} elements"),
                format!("{k} elements"),
            ));
        }
        let out = self.with_data(|a| {
            other.with_data(|b| {
                let mut v = Vec::with_capacity(n);
                for (i, x) in a.iter().enumerate() {
                    v.push(*x + b[i % k]);
                }
                v
            })
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |dy, parents| {
                parents[0].accum_grad(dy);
                parents[1].with_grad_mut(|g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % k] += *d;
                    }
                });
            }),
        ))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(TfkError::dim(
                "mul",
                fmt_shape(self.shape()),
                fmt_shape(other.shape()),
            ));
        }
        let out = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| *x * *y).collect::<Vec<T>>())
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|dy, parents| {
                parents[0].with_grad_mut(|g| {
                    parents[1].with_data(|b| {
                        for ((gi, di), bi) in g.iter_mut().zip(dy).zip(b) {
                            *gi += *di * *bi;
                        }
                    });
                });
                parents[1].with_grad_mut(|g| {
                    parents[0].with_data(|a| {
                        for ((gi, di), ai) in g.iter_mut().zip(dy).zip(a) {
                            *gi += *di * *ai;
                        }
                    });
                });
            }),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor<T> {
        let cv = T::from_f64(c);
        let out = self.with_data(|a| a.iter().map(|x| *x * cv).collect::<Vec<T>>());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                parents[0].with_grad_mut(|g| {
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += *di * cv;
                    }
                });
            }),
        )
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let cv = T::from_f64(c);
        let out = self.with_data(|a| a.iter().map(|x| *x + cv).collect::<Vec<T>>());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|dy, parents| parents[0].accum_grad(dy)),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.with_data(|a| a.iter().fold(T::zero(), |acc, x| acc + *x));
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(|dy, parents| {
                let d = dy[0];
                parents[0].with_grad_mut(|g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }),
        )
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    /// Shares the data; no copy.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TfkError::dim(
                "reshape",
                format!("{} elements", self.len()),
                format!("shape {} ({} elements)", fmt_shape(shape), n),
            ));
        }
        let out = self.to_vec();
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(|dy, parents| parents[0].accum_grad(dy)),
        ))
    }

    /// Affine map over the last axis: `x[..., d_in] @ w[d_in, d_out] + b`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if w.shape().len() != 2 {
            return Err(TfkError::dim("linear", "2-d weight", fmt_shape(w.shape())));
        }
        let d_in = w.shape()[0];
        let d_out = w.shape()[1];
        let x_last = *self.shape().last().ok_or_else(|| {
            TfkError::dim("linear", "at least 1-d input", fmt_shape(self.shape()))
        })?;
        if x_last != d_in {
            return Err(TfkError::dim(
                "linear",
                format!("input {} x weight {}", fmt_shape(&[d_in]), fmt_shape(w.shape())),
                format!("input {}", fmt_shape(self.shape())),
            ));
        }
        if let Some(bias) = b {
            if bias.shape() != [d_out] {
                return Err(TfkError::dim(
                    "linear",
                    fmt_shape(&[d_out]),
                    fmt_shape(bias.shape()),
                ));
            }
        }
        let rows = self.len() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        self.with_data(|xd| {
            w.with_data(|wd| {
                for r in 0..rows {
                    let xrow = &xd[r * d_in..(r + 1) * d_in];
                    let orow = &mut out[r * d_out..(r + 1) * d_out];
                    if let Some(bias) = b {
                        bias.with_data(|bd| orow.copy_from_slice(bd));
                    }
                    for (l, xv) in xrow.iter().enumerate() {
                        let wrow = &wd[l * d_out..(l + 1) * d_out];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += *xv * *wv;
                        }
                    }
                }
            })
        });
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(bias) = b {
            parents.push(bias.clone());
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            parents,
            Box::new(move |dy, parents| {
                let x = &parents[0];
                let w = &parents[1];
                // dx[r, l] = sum_j dy[r, j] * w[l, j]
                x.with_grad_mut(|gx| {
                    w.with_data(|wd| {
                        for r in 0..rows {
                            let dyrow = &dy[r * d_out..(r + 1) * d_out];
                            let gxrow = &mut gx[r * d_in..(r + 1) * d_in];
                            for (l, gxv) in gxrow.iter_mut().enumerate() {
                                let wrow = &wd[l * d_out..(l + 1) * d_out];
                                let mut acc = T::zero();
                                for (dv, wv) in dyrow.iter().zip(wrow) {
                                    acc += *dv * *wv;
                                }
                                *gxv += acc;
                            }
                        }
                    })
                });
                // dw[l, j] = sum_r x[r, l] * dy[r, j]
                w.with_grad_mut(|gw| {
                    x.with_data(|xd| {
                        for r in 0..rows {
                            let xrow = &xd[r * d_in..(r + 1) * d_in];
                            let dyrow = &dy[r * d_out..(r + 1) * d_out];
                            for (l, xv) in xrow.iter().enumerate() {
                                let gwrow = &mut gw[l * d_out..(l + 1) * d_out];
                                for (g, dv) in gwrow.iter_mut().zip(dyrow) {
                                    *g += *xv * *dv;
                                }
                            }
                        }
                    })
                });
                if parents.len() > 2 {
                    parents[2].with_grad_mut(|gb| {
                        for r in 0..rows {
                            let dyrow = &dy[r * d_out..(r + 1) * d_out];
                            for (g, dv) in gb.iter_mut().zip(dyrow) {
                                *g += *dv;
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// Batched matrix product `[g, m, k] @ [g, k, n] -> [g, m, n]`.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a_s, b_s) = (self.shape(), other.shape());
        if a_s.len() != 3 || b_s.len() != 3 || a_s[0] != b_s[0] || a_s[2] != b_s[1] {
            return Err(TfkError::dim(
                "bmm",
                "[g, m, k] x [g, k, n]".to_string(),
                format!("{} x {}", fmt_shape(a_s), fmt_shape(b_s)),
            ));
        }
        let (g, m, k, n) = (a_s[0], a_s[1], a_s[2], b_s[2]);
        let mut out = vec![T::zero(); g * m * n];
        self.with_data(|ad| {
            other.with_data(|bd| {
                for gi in 0..g {
                    let a_blk = &ad[gi * m * k..(gi + 1) * m * k];
                    let b_blk = &bd[gi * k * n..(gi + 1) * k * n];
                    let o_blk = &mut out[gi * m * n..(gi + 1) * m * n];
                    for i in 0..m {
                        let arow = &a_blk[i * k..(i + 1) * k];
                        let orow = &mut o_blk[i * n..(i + 1) * n];
                        for (l, av) in arow.iter().enumerate() {
                            let brow = &b_blk[l * n..(l + 1) * n];
                            for (o, bv) in orow.iter_mut().zip(brow) {
                                *o += *av * *bv;
                            }
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_op(
            vec![g, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |dy, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                // da = dy @ b^T ; db = a^T @ dy
                a.with_grad_mut(|ga| {
                    b.with_data(|bd| {
                        for gi in 0..g {
                            let dy_blk = &dy[gi * m * n..(gi + 1) * m * n];
                            let b_blk = &bd[gi * k * n..(gi + 1) * k * n];
                            let ga_blk = &mut ga[gi * m * k..(gi + 1) * m * k];
                            for i in 0..m {
                                let dyrow = &dy_blk[i * n..(i + 1) * n];
                                let garow = &mut ga_blk[i * k..(i + 1) * k];
                                for (l, gav) in garow.iter_mut().enumerate() {
                                    let brow = &b_blk[l * n..(l + 1) * n];
                                    let mut acc = T::zero();
                                    for (dv, bv) in dyrow.iter().zip(brow) {
                                        acc += *dv * *bv;
                                    }
                                    *gav += acc;
                                }
                            }
                        }
                    })
                });
                b.with_grad_mut(|gb| {
                    a.with_data(|ad| {
                        for gi in 0..g {
                            let dy_blk = &dy[gi * m * n..(gi + 1) * m * n];
                            let a_blk = &ad[gi * m * k..(gi + 1) * m * k];
                            let gb_blk = &mut gb[gi * k * n..(gi + 1) * k * n];
                            for i in 0..m {
                                let arow = &a_blk[i * k..(i + 1) * k];
                                let dyrow = &dy_blk[i * n..(i + 1) * n];
                                for (l, av) in arow.iter().enumerate() {
                                    let gbrow = &mut gb_blk[l * n..(l + 1) * n];
                                    for (g2, dv) in gbrow.iter_mut().zip(dyrow) {
                                        *g2 += *av * *dv;
                                    }
                                }
                            }
                        }
                    })
                });
            }),
        ))
    }

    /// Batched product with the second operand transposed:
    /// `[g, m, k] @ [g, n, k]^T -> [g, m, n]`.
    pub fn bmm_bt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a_s, b_s) = (self.shape(), other.shape());
        if a_s.len() != 3 || b_s.len() != 3 || a_s[0] != b_s[0] || a_s[2] != b_s[2] {
            return Err(TfkError::dim(
                "bmm_bt",
                "[g, m, k] x [g, n, k]".to_string(),
                format!("{} x {}", fmt_shape(a_s), fmt_shape(b_s)),
            ));
        }
        let (g, m, k, n) = (a_s[0], a_s[1], a_s[2], b_s[1]);
        let mut out = vec![T::zero(); g * m * n];
        self.with_data(|ad| {
            other.with_data(|bd| {
                for gi in 0..g {
                    let a_blk = &ad[gi * m * k..(gi + 1) * m * k];
                    let b_blk = &bd[gi * n * k..(gi + 1) * n * k];
                    let o_blk = &mut out[gi * m * n..(gi + 1) * m * n];
                    for i in 0..m {
                        let arow = &a_blk[i * k..(i + 1) * k];
                        let orow = &mut o_blk[i * n..(i + 1) * n];
                        for (j, ov) in orow.iter_mut().enumerate() {
                            let brow = &b_blk[j * k..(j + 1) * k];
                            let mut acc = T::zero();
                            for (av, bv) in arow.iter().zip(brow) {
                                acc += *av * *bv;
                            }
                            *ov += acc;
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_op(
            vec![g, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |dy, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                // da[i, l] = sum_j dy[i, j] * b[j, l]
                a.with_grad_mut(|ga| {
                    b.with_data(|bd| {
                        for gi in 0..g {
                            let dy_blk = &dy[gi * m * n..(gi + 1) * m * n];
                            let b_blk = &bd[gi * n * k..(gi + 1) * n * k];
                            let ga_blk = &mut ga[gi * m * k..(gi + 1) * m * k];
                            for i in 0..m {
                                let dyrow = &dy_blk[i * n..(i + 1) * n];
                                let garow = &mut ga_blk[i * k..(i + 1) * k];
                                for (j, dv) in dyrow.iter().enumerate() {
                                    let brow = &b_blk[j * k..(j + 1) * k];
                                    for (g2, bv) in garow.iter_mut().zip(brow) {
                                        *g2 += *dv * *bv;
                                    }
                                }
                            }
                        }
                    })
                });
                // db[j, l] = sum_i dy[i, j] * a[i, l]
                b.with_grad_mut(|gb| {
                    a.with_data(|ad| {
                        for gi in 0..g {
                            let dy_blk = &dy[gi * m * n..(gi + 1) * m * n];
                            let a_blk = &ad[gi * m * k..(gi + 1) * m * k];
                            let gb_blk = &mut gb[gi * n * k..(gi + 1) * n * k];
                            for i in 0..m {
                                let dyrow = &dy_blk[i * n..(i + 1) * n];
                                let arow = &a_blk[i * k..(i + 1) * k];
                                for (j, dv) in dyrow.iter().enumerate() {
                                    let gbrow = &mut gb_blk[j * k..(j + 1) * k];
                                    for (g2, av) in gbrow.iter_mut().zip(arow) {
                                        *g2 += *dv * *av;
                                    }
                                }
                            }
                        }
                    })
                });
            }),
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let k = *self.shape().last().unwrap_or(&0);
        if k == 0 {
            return Err(TfkError::dim("softmax", "last extent >= 1", fmt_shape(self.shape())));
        }
        let rows = self.len() / k;
        let mut out = vec![T::zero(); self.len()];
        let mut saw_nan = false;
        self.with_data(|xd| {
            for r in 0..rows {
                let xrow = &xd[r * k..(r + 1) * k];
                let orow = &mut out[r * k..(r + 1) * k];
                let mut mx = xrow[0];
                for v in xrow.iter() {
                    if v.is_nan() {
                        saw_nan = true;
                    }
                    if *v > mx {
                        mx = *v;
                    }
                }
                let mut sum = T::zero();
                for (o, v) in orow.iter_mut().zip(xrow) {
                    *o = (*v - mx).exp();
                    sum += *o;
                }
                for o in orow.iter_mut() {
                    *o = *o / sum;
                }
            }
        });
        if saw_nan {
            return Err(TfkError::Numeric("NaN input to softmax".to_string()));
        }
        let saved = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                parents[0].with_grad_mut(|gx| {
                    for r in 0..rows {
                        let yrow = &saved[r * k..(r + 1) * k];
                        let dyrow = &dy[r * k..(r + 1) * k];
                        let mut dot = T::zero();
                        for (yv, dv) in yrow.iter().zip(dyrow) {
                            dot += *yv * *dv;
                        }
                        let grow = &mut gx[r * k..(r + 1) * k];
                        for ((g, yv), dv) in grow.iter_mut().zip(yrow).zip(dyrow) {
                            *g += *yv * (*dv - dot);
                        }
                    }
                });
            }),
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Result<Tensor<T>> {
        let k = *self.shape().last().unwrap_or(&0);
        if k == 0 {
            return Err(TfkError::dim(
                "log_softmax",
                "last extent >= 1",
                fmt_shape(self.shape()),
            ));
        }
        let rows = self.len() / k;
        let mut out = vec![T::zero(); self.len()];
        self.with_data(|xd| {
            for r in 0..rows {
                let xrow = &xd[r * k..(r + 1) * k];
                let orow = &mut out[r * k..(r + 1) * k];
                let mut mx = xrow[0];
                for v in xrow.iter() {
                    if *v > mx {
                        mx = *v;
                    }
                }
                let mut sum = T::zero();
                for v in xrow.iter() {
                    sum += (*v - mx).exp();
                }
                let lse = mx + sum.ln();
                for (o, v) in orow.iter_mut().zip(xrow) {
                    *o = *v - lse;
                }
            }
        });
        let saved = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                parents[0].with_grad_mut(|gx| {
                    for r in 0..rows {
                        let yrow = &saved[r * k..(r + 1) * k];
                        let dyrow = &dy[r * k..(r + 1) * k];
                        let mut dsum = T::zero();
                        for dv in dyrow.iter() {
                            dsum += *dv;
                        }
                        let grow = &mut gx[r * k..(r + 1) * k];
                        for ((g, yv), dv) in grow.iter_mut().zip(yrow).zip(dyrow) {
                            *g += *dv - yv.exp() * dsum;
                        }
                    }
                });
            }),
        ))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(TfkError::dim(
                "layer_norm",
                "last extent >= 1",
                fmt_shape(self.shape()),
            ));
        }
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TfkError::dim(
                "layer_norm",
                format!("affine {}", fmt_shape(&[d])),
                format!("{} / {}", fmt_shape(gamma.shape()), fmt_shape(beta.shape())),
            ));
        }
        let rows = self.len() / d;
        let inv_d = T::from_f64(1.0 / d as f64);
        let epsv = T::from_f64(eps);
        let mut out = vec![T::zero(); self.len()];
        let mut xhat = vec![T::zero(); self.len()];
        let mut inv_std = vec![T::zero(); rows];
        self.with_data(|xd| {
            gamma.with_data(|gd| {
                beta.with_data(|bd| {
                    for r in 0..rows {
                        let xrow = &xd[r * d..(r + 1) * d];
                        let mut mean = T::zero();
                        for v in xrow.iter() {
                            mean += *v;
                        }
                        mean = mean * inv_d;
                        let mut var = T::zero();
                        for v in xrow.iter() {
                            let c = *v - mean;
                            var += c * c;
                        }
                        var = var * inv_d;
                        let inv = T::one() / (var + epsv).sqrt();
                        inv_std[r] = inv;
                        let hrow = &mut xhat[r * d..(r + 1) * d];
                        let orow = &mut out[r * d..(r + 1) * d];
                        for (((h, o), v), (g, b)) in hrow
                            .iter_mut()
                            .zip(orow.iter_mut())
                            .zip(xrow)
                            .zip(gd.iter().zip(bd))
                        {
                            *h = (*v - mean) * inv;
                            *o = *g * *h + *b;
                        }
                    }
                })
            })
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |dy, parents| {
                let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
                x.with_grad_mut(|gx| {
                    gamma.with_data(|gd| {
                        for r in 0..rows {
                            let dyrow = &dy[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            let mut dxhat = vec![T::zero(); d];
                            for ((dh, dv), gv) in dxhat.iter_mut().zip(dyrow).zip(gd) {
                                *dh = *dv * *gv;
                            }
                            for (dh, h) in dxhat.iter().zip(hrow) {
                                m1 += *dh;
                                m2 += *dh * *h;
                            }
                            m1 = m1 * inv_d;
                            m2 = m2 * inv_d;
                            let inv = inv_std[r];
                            let grow = &mut gx[r * d..(r + 1) * d];
                            for ((g, dh), h) in grow.iter_mut().zip(&dxhat).zip(hrow) {
                                *g += inv * (*dh - m1 - *h * m2);
                            }
                        }
                    })
                });
                gamma.with_grad_mut(|gg| {
                    for r in 0..rows {
                        let dyrow = &dy[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for ((g, dv), h) in gg.iter_mut().zip(dyrow).zip(hrow) {
                            *g += *dv * *h;
                        }
                    }
                });
                beta.with_grad_mut(|gb| {
                    for r in 0..rows {
                        let dyrow = &dy[r * d..(r + 1) * d];
                        for (g, dv) in gb.iter_mut().zip(dyrow) {
                            *g += *dv;
                        }
                    }
                });
            }),
        ))
    }

    /// GELU activation (tanh form), smooth everywhere.
    pub fn gelu(&self) -> Tensor<T> {
        let c0 = T::from_f64(GELU_C0);
        let c1 = T::from_f64(GELU_C1);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        let out = self.with_data(|xd| {
            xd.iter()
                .map(|x| {
                    let u = c0 * (*x + c1 * *x * *x * *x);
                    half * *x * (T::one() + u.tanh())
                })
                .collect::<Vec<T>>()
        });
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                parents[0].with_grad_mut(|gx| {
                    parents[0].with_data(|xd| {
                        for ((g, dv), x) in gx.iter_mut().zip(dy).zip(xd) {
                            let u = c0 * (*x + c1 * *x * *x * *x);
                            let t = u.tanh();
                            let du = c0 * (T::one() + three * c1 * *x * *x);
                            let deriv =
                                half * (T::one() + t) + half * *x * (T::one() - t * t) * du;
                            *g += *dv * deriv;
                        }
                    })
                });
            }),
        )
    }

    /// Mean over the token axis: `[b, n, c] -> [b, c]`.
    pub fn mean_tokens(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(TfkError::dim("mean_tokens", "[b, n, c]", fmt_shape(s)));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); b * c];
        self.with_data(|xd| {
            for bi in 0..b {
                let orow = &mut out[bi * c..(bi + 1) * c];
                for ni in 0..n {
                    let xrow = &xd[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                    for (o, v) in orow.iter_mut().zip(xrow) {
                        *o += *v;
                    }
                }
                for o in orow.iter_mut() {
                    *o = *o * inv_n;
                }
            }
        });
        Ok(Tensor::from_op(
            vec![b, c],
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                parents[0].with_grad_mut(|gx| {
                    for bi in 0..b {
                        let dyrow = &dy[bi * c..(bi + 1) * c];
                        for ni in 0..n {
                            let grow = &mut gx[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                            for (g, dv) in grow.iter_mut().zip(dyrow) {
                                *g += *dv * inv_n;
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Per-batch-slice element gather. The tensor is viewed as
    /// `[batch, slice_len]`; for each batch slice, `out[j] = x[idx[j]]`.
    /// Backward scatter-adds in index order. The workhorse behind window
    /// partition/reverse, cyclic shifts, head split/merge, patch-merge
    /// gathers and bias-table materialization.
    pub fn gather(
        &self,
        idx: &Rc<Vec<u32>>,
        batch: usize,
        out_shape: &[usize],
    ) -> Result<Tensor<T>> {
        let n = self.len();
        if batch == 0 || n % batch != 0 {
            return Err(TfkError::dim(
                "gather",
                format!("batch dividing {n} elements"),
                format!("batch {batch}"),
            ));
        }
        let slice_len = n / batch;
        let out_n: usize = out_shape.iter().product();
        if out_n != batch * idx.len() {
            return Err(TfkError::dim(
                "gather",
                format!("{} output elements", batch * idx.len()),
                format!("shape {} ({} elements)", fmt_shape(out_shape), out_n),
            ));
        }
        if let Some(bad) = idx.iter().find(|&&i| i as usize >= slice_len) {
            return Err(TfkError::contract(
                "gather",
                format!("index {bad} out of range for slice of {slice_len}"),
            ));
        }
        let mut out = Vec::with_capacity(out_n);
        self.with_data(|xd| {
            for b in 0..batch {
                let slice = &xd[b * slice_len..(b + 1) * slice_len];
                for &i in idx.iter() {
                    out.push(slice[i as usize]);
                }
            }
        });
        let idx_bw = Rc::clone(idx);
        Ok(Tensor::from_op(
            out_shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dy, parents| {
                parents[0].with_grad_mut(|gx| {
                    let k = idx_bw.len();
                    for b in 0..batch {
                        let gslice = &mut gx[b * slice_len..(b + 1) * slice_len];
                        let dyslice = &dy[b * k..(b + 1) * k];
                        for (&i, dv) in idx_bw.iter().zip(dyslice) {
                            gslice[i as usize] += *dv;
                        }
                    }
                });
            }),
        ))
    }

    /// Concatenates two tensors along `axis`; all other extents must match.
    pub fn concat(&self, other: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let (a_s, b_s) = (self.shape(), other.shape());
        let rank = a_s.len();
        let compatible = rank == b_s.len()
            && axis < rank
            && a_s
                .iter()
                .zip(b_s.iter())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(TfkError::dim(
                "concat",
                format!("same shapes except axis {axis}"),
                format!("{} vs {}", fmt_shape(a_s), fmt_shape(b_s)),
            ));
        }
        let outer: usize = a_s[..axis].iter().product();
        let inner: usize = a_s[axis + 1..].iter().product();
        let (na, nb) = (a_s[axis], b_s[axis]);
        let mut out_shape = a_s.to_vec();
        out_shape[axis] = na + nb;
        let mut out = Vec::with_capacity(outer * (na + nb) * inner);
        self.with_data(|ad| {
            other.with_data(|bd| {
                for o in 0..outer {
                    out.extend_from_slice(&ad[o * na * inner..(o + 1) * na * inner]);
                    out.extend_from_slice(&bd[o * nb * inner..(o + 1) * nb * inner]);
                }
            })
        });
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |dy, parents| {
                let stride = (na + nb) * inner;
                parents[0].with_grad_mut(|ga| {
                    for o in 0..outer {
                        let src = &dy[o * stride..o * stride + na * inner];
                        let dst = &mut ga[o * na * inner..(o + 1) * na * inner];
                        for (g, dv) in dst.iter_mut().zip(src) {
                            *g += *dv;
                        }
                    }
                });
                parents[1].with_grad_mut(|gb| {
                    for o in 0..outer {
                        let src = &dy[o * stride + na * inner..(o + 1) * stride];
                        let dst = &mut gb[o * nb * inner..(o + 1) * nb * inner];
                        for (g, dv) in dst.iter_mut().zip(src) {
                            *g += *dv;
                        }
                    }
                });
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_weight() {
        let x = t64(&[2], &[1.0, 2.0]);
        let w = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2], &[0.0, 0.0]);
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn linear_hand_arithmetic() {
        // x=[1,1], w=[[2],[3]], b=[1] -> [6]
        let x = t64(&[2], &[1.0, 1.0]);
        let w = t64(&[2, 1], &[2.0, 3.0]);
        let b = t64(&[1], &[1.0]);
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![6.0]);
    }

    #[test]
    fn linear_matches_double_loop_oracle() {
        let mut rng = crate::rng::SplitRng::for_path(11, "linear-oracle");
        let x: Vec<f64> = (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let y = t64(&[3, 4], &x)
            .linear(&t64(&[4, 2], &w), Some(&t64(&[2], &b)))
            .unwrap();
        // Explicit double-loop summation oracle.
        let mut expect = vec![0.0f64; 6];
        for r in 0..3 {
            for j in 0..2 {
                let mut acc = b[j];
                for l in 0..4 {
                    acc += x[r * 4 + l] * w[l * 2 + j];
                }
                expect[r * 2 + j] = acc;
            }
        }
        for (got, want) in y.to_vec().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let x = t64(&[3], &[1.0, 2.0, 3.0]);
        let w = t64(&[2, 2], &[1.0; 4]);
        let err = x.linear(&w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_ratio() {
        let y = t64(&[2], &[0.0, 0.0]).softmax_last().unwrap();
        assert!((y.to_vec()[0] - 0.5).abs() < 1e-12);
        let y = t64(&[2], &[0.0, 3.0f64.ln()]).softmax_last().unwrap();
        assert!((y.to_vec()[0] - 0.25).abs() < 1e-12);
        assert!((y.to_vec()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_under_large_inputs() {
        let y = t64(&[2], &[1000.0, 1000.0]).softmax_last().unwrap();
        assert!((y.to_vec()[0] - 0.5).abs() < 1e-12);
        assert!(y.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        let err = t64(&[2], &[f64::NAN, 0.0]).softmax_last().unwrap_err();
        assert!(matches!(err, TfkError::Numeric(_)));
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let x = t64(&[3], &[1.0, 1.0, 1.0]);
        let g = t64(&[3], &[1.0, 1.0, 1.0]);
        let b = t64(&[3], &[0.0, 0.0, 0.0]);
        let y = x.layer_norm(&g, &b, 1e-12).unwrap();
        for v in y.to_vec() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = t64(&[2], &[-1.0, 1.0]);
        let g = t64(&[2], &[1.0, 1.0]);
        let b = t64(&[2], &[0.0, 0.0]);
        let y = x.layer_norm(&g, &b, 1e-15).unwrap();
        assert!((y.to_vec()[0] + 1.0).abs() < 1e-6);
        assert!((y.to_vec()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = crate::rng::SplitRng::for_path(5, "ln-stats");
        let x: Vec<f64> = (0..16).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let g = t64(&[16], &[1.0; 16]);
        let b = t64(&[16], &[0.0; 16]);
        let y = t64(&[16], &x).layer_norm(&g, &b, 1e-12).unwrap();
        let yv = y.to_vec();
        let mean: f64 = yv.iter().sum::<f64>() / 16.0;
        let var: f64 = yv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gather_and_scatter_round_trip() {
        let x = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx = Rc::new(vec![2u32, 0, 1]);
        let y = x.gather(&idx, 2, &[2, 3]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 1.0, 2.0, 6.0, 4.0, 5.0]);
    }

    #[test]
    fn concat_axis1() {
        let a = t64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 1, 2], &[5.0, 6.0, 7.0, 8.0]);
        let y = a.concat(&b, 1).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn bmm_matches_naive() {
        let a = t64(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t64(&[1, 3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.bmm(&b).unwrap();
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
        // bmm_bt against the same product with b stored transposed.
        let bt = t64(&[1, 2, 3], &[7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        let c2 = a.bmm_bt(&bt).unwrap();
        assert_eq!(c2.to_vec(), c.to_vec());
    }

    /// Gradient check for every primitive on randomized small inputs.
    #[test]
    fn all_primitives_pass_grad_check() {
        let mut rng = crate::rng::SplitRng::for_path(23, "primitive-gradcheck");
        let trials = 100;
        for trial in 0..trials {
            let mk = |rng: &mut crate::rng::SplitRng, shape: &[usize]| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.5, 1.5)).collect();
                Tensor::from_vec(shape, data).unwrap().with_grad()
            };
            let x = mk(&mut rng, &[2, 3]);
            let y = mk(&mut rng, &[2, 3]);
            let which = trial % 10;
            let err = match which {
                0 => grad_check(|x| x.add(&y)?.mul(x)?.sum_all().scale(0.5).sum_all().reshape(&[1]), &x, 1e-5).unwrap(),
                1 => grad_check(|x| Ok(x.gelu().sum_all()), &x, 1e-5).unwrap(),
                2 => grad_check(|x| x.softmax_last()?.mul(&y)?.sum_all().reshape(&[1]), &x, 1e-5).unwrap(),
                3 => grad_check(|x| x.log_softmax_last()?.mul(&y)?.sum_all().reshape(&[1]), &x, 1e-5).unwrap(),
                4 => {
                    let g = mk(&mut rng, &[3]);
                    let b = mk(&mut rng, &[3]);
                    grad_check(|x| x.layer_norm(&g, &b, 1e-5)?.mul(&y)?.sum_all().reshape(&[1]), &x, 1e-6).unwrap()
                }
                5 => {
                    let w = mk(&mut rng, &[3, 2]);
                    let b = mk(&mut rng, &[2]);
                    grad_check(|x| x.linear(&w, Some(&b))?.sum_all().reshape(&[1]), &x, 1e-5).unwrap()
                }
                6 => {
                    let b3 = mk(&mut rng, &[1, 3, 2]);
                    grad_check(
                        |x| x.reshape(&[1, 2, 3])?.bmm(&b3)?.sum_all().reshape(&[1]),
                        &x,
                        1e-5,
                    )
                    .unwrap()
                }
                7 => {
                    let b3 = mk(&mut rng, &[1, 4, 3]);
                    grad_check(
                        |x| x.reshape(&[1, 2, 3])?.bmm_bt(&b3)?.sum_all().reshape(&[1]),
                        &x,
                        1e-5,
                    )
                    .unwrap()
                }
                8 => {
                    let idx = Rc::new(vec![2u32, 2, 0]);
                    grad_check(
                        |x| {
                            x.gather(&idx, 2, &[2, 3])?
                                .add_tiled(&y.reshape(&[6])?.gather(&Rc::new(vec![0u32, 1, 2]), 1, &[3])?)?
                                .sum_all()
                                .reshape(&[1])
                        },
                        &x,
                        1e-5,
                    )
                    .unwrap()
                }
                _ => grad_check(
                    |x| {
                        x.reshape(&[1, 2, 3])?
                            .concat(&y.reshape(&[1, 2, 3])?, 1)?
                            .mean_tokens()?
                            .sum_all()
                            .reshape(&[1])
                    },
                    &x,
                    1e-5,
                )
                .unwrap(),
            };
            assert!(err < 1e-6, "primitive {which} trial {trial}: rel err {err}");
        }
    }
}
