//! Forward operations and their backward rules.

use crate::error::{Error, Result};
use crate::grad::Tensor;

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Tensor {
    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("operand shapes {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.with_value(|a| {
            other.with_value(|b| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>())
        });
        Ok(self.binary_op(other, self.shape().to_vec(), data, |g| {
            vec![g.to_vec(), g.to_vec()]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.with_value(|a| {
            other.with_value(|b| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
        });
        Ok(self.binary_op(other, self.shape().to_vec(), data, |g| {
            vec![g.to_vec(), g.iter().map(|v| -v).collect()]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let a = self.value();
        let b = other.value();
        let data = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(self.binary_op(other, self.shape().to_vec(), data, move |g| {
            vec![
                g.iter().zip(&b).map(|(gi, bi)| gi * bi).collect(),
                g.iter().zip(&a).map(|(gi, ai)| gi * ai).collect(),
            ]
        }))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.with_value(|a| a.iter().map(|x| c * x).collect::<Vec<_>>());
        Ok(self.unary_op(self.shape().to_vec(), data, move |g| {
            g.iter().map(|v| c * v).collect()
        }))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.with_value(|a| a.iter().map(|x| x + c).collect::<Vec<_>>());
        Ok(self.unary_op(self.shape().to_vec(), data, |g| g.to_vec()))
    }

    pub fn relu(&self) -> Result<Tensor> {
        let a = self.value();
        let data = a.iter().map(|&x| x.max(0.0)).collect();
        Ok(self.unary_op(self.shape().to_vec(), data, move |g| {
            g.iter()
                .zip(&a)
                .map(|(gi, &ai)| if ai > 0.0 { *gi } else { 0.0 })
                .collect()
        }))
    }

    /// Natural log; the caller guarantees positivity (use `add_scalar` with a
    /// floor first when needed).
    pub fn ln(&self) -> Result<Tensor> {
        let a = self.value();
        let data = a.iter().map(|x| x.ln()).collect();
        Ok(self.unary_op(self.shape().to_vec(), data, move |g| {
            g.iter().zip(&a).map(|(gi, ai)| gi / ai).collect()
        }))
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.with_value(|a| a.iter().map(|x| x.exp()).collect());
        let out = data.clone();
        Ok(self.unary_op(self.shape().to_vec(), data, move |g| {
            g.iter().zip(&out).map(|(gi, oi)| gi * oi).collect()
        }))
    }

    pub fn square(&self) -> Result<Tensor> {
        let a = self.value();
        let data = a.iter().map(|x| x * x).collect();
        Ok(self.unary_op(self.shape().to_vec(), data, move |g| {
            g.iter().zip(&a).map(|(gi, ai)| 2.0 * gi * ai).collect()
        }))
    }

    /// Elementwise `x^p` for constant `p`; domain `x > 0`.
    pub fn powf_const(&self, p: f64) -> Result<Tensor> {
        let a = self.value();
        let data = a.iter().map(|x| x.powf(p)).collect();
        Ok(self.unary_op(self.shape().to_vec(), data, move |g| {
            g.iter()
                .zip(&a)
                .map(|(gi, ai)| gi * p * ai.powf(p - 1.0))
                .collect()
        }))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let data = vec![self.with_value(|a| a.iter().sum())];
        Ok(self.unary_op(vec![1], data, move |g| vec![g[0]; n]))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let data = vec![self.with_value(|a| a.iter().sum::<f64>()) / n as f64];
        Ok(self.unary_op(vec![1], data, move |g| vec![g[0] / n as f64; n]))
    }

    /// Row means of a matrix: `[r, c] -> [r]`. This is the temporal mean
    /// pool when rows are channels.
    pub fn mean_axis1(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(shape_err("mean_axis1", format!("expected matrix, got {:?}", self.shape())));
        };
        let data = self.with_value(|a| {
            (0..r)
                .map(|i| a[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                .collect::<Vec<_>>()
        });
        Ok(self.unary_op(vec![r], data, move |g| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let v = g[i] / c as f64;
                for j in 0..c {
                    gx[i * c + j] = v;
                }
            }
            gx
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(shape_err("transpose", format!("expected matrix, got {:?}", self.shape())));
        };
        let data = self.with_value(|a| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            out
        });
        Ok(self.unary_op(vec![c, r], data, move |g| {
            let mut gx = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            gx
        }))
    }

    /// Matrix product. `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let &[m, k] = self.shape() else {
            return Err(shape_err("matmul", format!("lhs must be a matrix, got {:?}", self.shape())));
        };
        let (k2, n, vec_rhs) = match other.shape() {
            [a, b] => (*a, *b, false),
            [a] => (*a, 1, true),
            s => return Err(shape_err("matmul", format!("rhs shape {s:?}"))),
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let a = self.value();
        let b = other.value();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let out_shape = if vec_rhs { vec![m] } else { vec![m, n] };
        Ok(self.binary_op(other, out_shape, out, move |g| {
            // ga = g . b^T  (m x k), gb = a^T . g  (k x n)
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g[i * n + j] * b[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            for p in 0..k {
                for i in 0..m {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no operands".into()));
        }
        let rows = match parts[0].shape() {
            [r, _] => *r,
            s => return Err(shape_err("concat", format!("expected matrices, got {s:?}"))),
        };
        let widths: Vec<usize> = parts
            .iter()
            .map(|t| match t.shape() {
                [r, c] if *r == rows => Ok(*c),
                s => Err(shape_err("concat", format!("bad operand shape {s:?}"))),
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (t, &w) in parts.iter().zip(&widths) {
            t.with_value(|v| {
                for i in 0..rows {
                    data[i * total + offset..i * total + offset + w]
                        .copy_from_slice(&v[i * w..(i + 1) * w]);
                }
            });
            offset += w;
        }
        let graph = parts[0].graph().clone();
        let ids: Vec<usize> = parts.iter().map(|t| t.id()).collect();
        let rg = parts.iter().any(|t| t.requires_grad());
        let widths_b = widths.clone();
        Ok(graph.push(
            vec![rows, total],
            data,
            ids,
            Some(Box::new(move |g| {
                let mut outs = Vec::with_capacity(widths_b.len());
                let mut offset = 0;
                for &w in &widths_b {
                    let mut part = vec![0.0; rows * w];
                    for i in 0..rows {
                        part[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    outs.push(part);
                    offset += w;
                }
                outs
            })),
            rg,
        ))
    }

    /// Select rows of a matrix by index (duplicates allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(shape_err("gather_rows", format!("expected matrix, got {:?}", self.shape())));
        };
        for &i in indices {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {i} out of {r}")));
            }
        }
        let k = indices.len();
        let data = self.with_value(|a| {
            let mut out = vec![0.0; k * c];
            for (dst, &src) in indices.iter().enumerate() {
                out[dst * c..(dst + 1) * c].copy_from_slice(&a[src * c..(src + 1) * c]);
            }
            out
        });
        let idx = indices.to_vec();
        Ok(self.unary_op(vec![k, c], data, move |g| {
            let mut gx = vec![0.0; r * c];
            for (dst, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    gx[src * c + j] += g[dst * c + j];
                }
            }
            gx
        }))
    }

    /// 1-D convolution over `[C_in, L]` with weights `[C_out, C_in, K]` and
    /// bias `[C_out]`; zero padding.
    pub fn conv1d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let &[c_in, len] = self.shape() else {
            return Err(shape_err("conv1d", format!("input must be [C,L], got {:?}", self.shape())));
        };
        let &[c_out, wc_in, k] = weight.shape() else {
            return Err(shape_err(
                "conv1d",
                format!("weight must be [Cout,Cin,K], got {:?}", weight.shape()),
            ));
        };
        if wc_in != c_in {
            return Err(shape_err("conv1d", format!("channel mismatch {c_in} vs {wc_in}")));
        }
        if bias.shape() != [c_out] {
            return Err(shape_err("conv1d", format!("bias must be [{c_out}]")));
        }
        if stride == 0 {
            return Err(Error::Param("conv1d: stride must be >= 1".into()));
        }
        if len + 2 * padding < k {
            return Err(shape_err("conv1d", format!("input length {len} shorter than kernel {k}")));
        }
        let l_out = (len + 2 * padding - k) / stride + 1;

        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let mut out = vec![0.0; c_out * l_out];
        for co in 0..c_out {
            for t in 0..l_out {
                let mut acc = b[co];
                for ci in 0..c_in {
                    let wrow = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                    let base = t * stride;
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let src = base + kk;
                        if src < padding || src - padding >= len {
                            continue;
                        }
                        acc += wv * x[ci * len + (src - padding)];
                    }
                }
                out[co * l_out + t] = acc;
            }
        }

        let rg_all = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let graph = self.graph().clone();
        let ids = vec![self.id(), weight.id(), bias.id()];
        Ok(graph.push(
            vec![c_out, l_out],
            out,
            ids,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c_in * len];
                let mut gw = vec![0.0; c_out * c_in * k];
                let mut gb = vec![0.0; c_out];
                for co in 0..c_out {
                    for t in 0..l_out {
                        let gv = g[co * l_out + t];
                        if gv == 0.0 {
                            continue;
                        }
                        gb[co] += gv;
                        let base = t * stride;
                        for ci in 0..c_in {
                            for kk in 0..k {
                                let src = base + kk;
                                if src < padding || src - padding >= len {
                                    continue;
                                }
                                let xi = ci * len + (src - padding);
                                gx[xi] += gv * w[(co * c_in + ci) * k + kk];
                                gw[(co * c_in + ci) * k + kk] += gv * x[xi];
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            })),
            rg_all,
        ))
    }

    /// Non-overlapping max pooling over the time axis of `[C, L]`.
    pub fn max_pool1d(&self, k: usize) -> Result<Tensor> {
        let &[c, len] = self.shape() else {
            return Err(shape_err("max_pool1d", format!("input must be [C,L], got {:?}", self.shape())));
        };
        if k == 0 || len < k {
            return Err(shape_err("max_pool1d", format!("window {k} on length {len}")));
        }
        let l_out = len / k;
        let a = self.value();
        let mut out = vec![0.0; c * l_out];
        let mut argmax = vec![0usize; c * l_out];
        for ci in 0..c {
            for t in 0..l_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for d in 0..k {
                    let idx = ci * len + t * k + d;
                    if a[idx] > best {
                        best = a[idx];
                        best_i = idx;
                    }
                }
                out[ci * l_out + t] = best;
                argmax[ci * l_out + t] = best_i;
            }
        }
        Ok(self.unary_op(vec![c, l_out], out, move |g| {
            let mut gx = vec![0.0; c * len];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
            gx
        }))
    }

    /// Cross-entropy of a logit vector against an integer label.
    pub fn softmax_cross_entropy(&self, label: usize) -> Result<Tensor> {
        let [n] = self.shape() else {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits must be a vector, got {:?}", self.shape()),
            ));
        };
        if label >= *n {
            return Err(Error::Contract(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let z = self.value();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let softmax: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        Ok(self.unary_op(vec![1], vec![loss], move |g| {
            softmax
                .iter()
                .enumerate()
                .map(|(i, &p)| g[0] * (p - f64::from(u8::from(i == label))))
                .collect()
        }))
    }

    /// Untargeted margin: `z[label] - max_{j != label} z[j]`. Non-positive
    /// iff misclassified or tied. Subgradient: +1 at the label, -1 at the
    /// runner-up (lowest index on ties).
    pub fn margin_loss(&self, label: usize) -> Result<Tensor> {
        let [n] = self.shape() else {
            return Err(shape_err("margin_loss", format!("logits must be a vector, got {:?}", self.shape())));
        };
        if label >= *n {
            return Err(Error::Contract(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        if *n < 2 {
            return Err(Error::Contract("margin_loss needs at least 2 classes".into()));
        }
        let z = self.value();
        let mut best_other = usize::MAX;
        for (j, &v) in z.iter().enumerate() {
            if j == label {
                continue;
            }
            if best_other == usize::MAX || v > z[best_other] {
                best_other = j;
            }
        }
        let loss = z[label] - z[best_other];
        Ok(self.unary_op(vec![1], vec![loss], move |g| {
            let mut gx = vec![0.0; z.len()];
            gx[label] = g[0];
            gx[best_other] = -g[0];
            gx
        }))
    }

    /// Sliding-window median over a vector with edge replication. The
    /// backward pass routes each output's gradient to the input element that
    /// supplied the median.
    pub fn median_smooth1d(&self, k: usize) -> Result<Tensor> {
        let [n] = self.shape() else {
            return Err(shape_err("median_smooth", format!("expected vector, got {:?}", self.shape())));
        };
        let n = *n;
        let (out, picks) = self.with_value(|a| crate::dsp::median_smooth_with_choices(a, k))?;
        Ok(self.unary_op(vec![n], out, move |g| {
            let mut gx = vec![0.0; n];
            for (i, &src) in picks.iter().enumerate() {
                gx[src] += g[i];
            }
            gx
        }))
    }
}


impl Tensor {
    /// Reinterpret a vector as a matrix (no data movement in the forward
    /// direction). Mostly a test convenience.
    pub fn gather_rows_as_matrix(&self, r: usize, c: usize) -> Result<Tensor> {
        if self.numel() != r * c {
            return Err(Error::Shape(format!(
                "reshape: {} elements into [{r},{c}]",
                self.numel()
            )));
        }
        let data = self.value();
        Ok(self.unary_op(vec![r, c], data, |g| g.to_vec()))
    }
}
