//! Forward and backward implementations for every differentiable primitive.
//!
//! Conventions: matrices are `[rows × cols]` row-major, images are
//! `[H × W × C]` channels-last, 2-D kernels are `[kh × kw × Cin × Cout]`
//! and 1-D kernels `[k × Cin × Cout]`. Inner loops run over the last,
//! contiguous axis.

use std::cell::RefCell;

use rand::Rng;

use super::{shape_of, Element, Mode, Tape, Tensor};
use crate::error::{Error, Result};

/// Saved context for the reverse pass, one variant per primitive.
pub(crate) enum Op<E: Element> {
    Add,
    AddBias,
    Mul,
    MulScalar(E),
    Matmul,
    Transpose,
    Relu,
    Gelu,
    Softmax,
    LayerNorm {
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    BatchNorm {
        mean: Vec<E>,
        rstd: Vec<E>,
        train: bool,
    },
    Dropout {
        mask: Vec<bool>,
        scale: E,
    },
    MaxPool2d {
        argmax: Vec<usize>,
    },
    MaxPool1d {
        argmax: Vec<usize>,
    },
    Upsample2x,
    ConcatLast {
        split: usize,
    },
    Reshape,
    GatherRows {
        rows: Vec<usize>,
    },
    MaskRows {
        masked: Vec<usize>,
    },
    Conv2d,
    Conv1d,
    CrossEntropy {
        probs: Vec<E>,
        targets: Vec<u32>,
        ignore: u32,
        counted: usize,
    },
    MseMasked {
        mask: Vec<bool>,
        count: usize,
    },
    SumAll,
    MeanRows,
}

/// Per-channel running statistics owned by a batch-norm layer.
#[derive(Debug, Clone)]
pub struct RunningStats<E: Element> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Element> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
        }
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<E: Element> Tape<E> {
    fn out(
        &self,
        op: Op<E>,
        inputs: Vec<Tensor<E>>,
        shape: Vec<usize>,
        data: Vec<E>,
    ) -> Tensor<E> {
        let requires = inputs.iter().any(Tensor::requires_grad);
        let output = Tensor::result(shape, data, requires);
        self.push(op, inputs, output.clone());
        output
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "add: {} vs {}",
                shape_of(a),
                shape_of(b)
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| *x + *y)
            .collect();
        Ok(self.out(Op::Add, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    /// Broadcast a `[C]` bias over the last axis of `x`.
    pub fn add_bias(&self, x: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let c = last_dim(x.shape());
        if bias.shape() != [c] {
            return Err(Error::Shape(format!(
                "add_bias: bias {} does not match last axis of {}",
                shape_of(bias),
                shape_of(x)
            )));
        }
        let b = bias.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[i % c])
            .collect();
        Ok(self.out(
            Op::AddBias,
            vec![x.clone(), bias.clone()],
            x.shape().to_vec(),
            data,
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "mul: {} vs {}",
                shape_of(a),
                shape_of(b)
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| *x * *y)
            .collect();
        Ok(self.out(Op::Mul, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    pub fn mul_scalar(&self, x: &Tensor<E>, s: E) -> Result<Tensor<E>> {
        let data = x.data().iter().map(|v| *v * s).collect();
        Ok(self.out(
            Op::MulScalar(s),
            vec![x.clone()],
            x.shape().to_vec(),
            data,
        ))
    }

    /// `[M×K] · [K×N] -> [M×N]`.
    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Shape(format!(
                "matmul: inner extents must match, got {} x {}",
                shape_of(a),
                shape_of(b)
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![E::zero(); m * n];
        {
            let ad = a.data();
            let bd = b.data();
            for i in 0..m {
                for p in 0..k {
                    let aip = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += aip * *bv;
                    }
                }
            }
        }
        Ok(self.out(Op::Matmul, vec![a.clone(), b.clone()], vec![m, n], out))
    }

    pub fn transpose(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 2 {
            return Err(Error::Shape(format!("transpose: need 2-D, got {}", shape_of(x))));
        }
        let (m, n) = (sh[0], sh[1]);
        let d = x.data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.out(Op::Transpose, vec![x.clone()], vec![n, m], out))
    }

    pub fn relu(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data = x
            .data()
            .iter()
            .map(|v| if *v > E::zero() { *v } else { E::zero() })
            .collect();
        Ok(self.out(Op::Relu, vec![x.clone()], x.shape().to_vec(), data))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data = x.data().iter().map(|v| gelu_forward(*v)).collect();
        Ok(self.out(Op::Gelu, vec![x.clone()], x.shape().to_vec(), data))
    }

    /// Row-stable softmax over the last axis.
    pub fn softmax(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let c = last_dim(x.shape());
        if c == 0 {
            return Err(Error::Shape("softmax: empty last axis".into()));
        }
        let d = x.data();
        let mut out = vec![E::zero(); d.len()];
        for (row_in, row_out) in d.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let max = row_in.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = (*v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        Ok(self.out(Op::Softmax, vec![x.clone()], x.shape().to_vec(), out))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let c = last_dim(x.shape());
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias {}/{} must be [{}]",
                shape_of(gamma),
                shape_of(beta),
                c
            )));
        }
        let eps = E::from_f64(1e-5);
        let rows = x.len() / c;
        let d = x.data();
        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![E::zero(); d.len()];
        let mut means = vec![E::zero(); rows];
        let mut rstds = vec![E::zero(); rows];
        let cn = E::from_f64(c as f64);
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mean = row.iter().cloned().sum::<E>() / cn;
            let var = row
                .iter()
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<E>()
                / cn;
            let rstd = (var + eps).sqrt().recip();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..c {
                out[r * c + j] = g[j] * (row[j] - mean) * rstd + b[j];
            }
        }
        Ok(self.out(
            Op::LayerNorm {
                mean: means,
                rstd: rstds,
            },
            vec![x.clone(), gamma.clone(), beta.clone()],
            x.shape().to_vec(),
            out,
        ))
    }

    /// Batch normalization over the last (channel) axis.
    ///
    /// Train mode normalizes with batch statistics and folds them into the
    /// running stats; eval mode applies the running stats, making the output
    /// an affine function of the input alone.
    pub fn batch_norm(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        running: &RefCell<RunningStats<E>>,
        mode: Mode,
        momentum: f64,
    ) -> Result<Tensor<E>> {
        let c = last_dim(x.shape());
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gain/bias must be [{}], got {}/{}",
                c,
                shape_of(gamma),
                shape_of(beta)
            )));
        }
        if running.borrow().mean.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: running stats sized {} for {} channels",
                running.borrow().mean.len(),
                c
            )));
        }
        let eps = E::from_f64(1e-5);
        let rows = x.len() / c;
        let d = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                let rn = E::from_f64(rows as f64);
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        mean[j] += d[r * c + j];
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m / rn;
                }
                for r in 0..rows {
                    for j in 0..c {
                        let dv = d[r * c + j] - mean[j];
                        var[j] += dv * dv;
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / rn;
                }
                let mom = E::from_f64(momentum);
                let keep = E::one() - mom;
                let mut stats = running.borrow_mut();
                for j in 0..c {
                    stats.mean[j] = keep * stats.mean[j] + mom * mean[j];
                    stats.var[j] = keep * stats.var[j] + mom * var[j];
                }
                (mean, var)
            }
            Mode::Eval => {
                let stats = running.borrow();
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let rstd: Vec<E> = var.iter().map(|v| (*v + eps).sqrt().recip()).collect();
        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![E::zero(); d.len()];
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = g[j] * (d[r * c + j] - mean[j]) * rstd[j] + b[j];
            }
        }
        Ok(self.out(
            Op::BatchNorm {
                mean,
                rstd,
                train: mode == Mode::Train,
            },
            vec![x.clone(), gamma.clone(), beta.clone()],
            x.shape().to_vec(),
            out,
        ))
    }

    /// Inverted dropout: eval mode is the identity, train mode keeps each
    /// value with probability `1-p` and rescales by `1/(1-p)`.
    pub fn dropout(
        &self,
        x: &Tensor<E>,
        p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor<E>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout: p must be in [0,1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let scale = E::from_f64(1.0 / keep);
        let mask: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() < keep).collect();
        let data = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| if *m { *v * scale } else { E::zero() })
            .collect();
        Ok(self.out(
            Op::Dropout { mask, scale },
            vec![x.clone()],
            x.shape().to_vec(),
            data,
        ))
    }

    /// 2×2 max pooling with stride 2 on `[H×W×C]`.
    pub fn maxpool2d(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 3 || sh[0] % 2 != 0 || sh[1] % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2d: need [H×W×C] with even H, W, got {}",
                shape_of(x)
            )));
        }
        let (h, w, c) = (sh[0], sh[1], sh[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = x.data();
        let mut out = vec![E::zero(); oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = E::neg_infinity();
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                            if d[idx] > best {
                                best = d[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        Ok(self.out(
            Op::MaxPool2d { argmax },
            vec![x.clone()],
            vec![oh, ow, c],
            out,
        ))
    }

    /// Length-2 max pooling with stride 2 on `[L×C]`; an odd tail element
    /// is dropped.
    pub fn maxpool1d(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 2 || sh[0] < 2 {
            return Err(Error::Shape(format!(
                "maxpool1d: need [L×C] with L >= 2, got {}",
                shape_of(x)
            )));
        }
        let (l, c) = (sh[0], sh[1]);
        let ol = l / 2;
        let d = x.data();
        let mut out = vec![E::zero(); ol * c];
        let mut argmax = vec![0usize; ol * c];
        for t in 0..ol {
            for ch in 0..c {
                let i0 = (t * 2) * c + ch;
                let i1 = (t * 2 + 1) * c + ch;
                let (best, idx) = if d[i0] >= d[i1] { (d[i0], i0) } else { (d[i1], i1) };
                out[t * c + ch] = best;
                argmax[t * c + ch] = idx;
            }
        }
        Ok(self.out(Op::MaxPool1d { argmax }, vec![x.clone()], vec![ol, c], out))
    }

    /// Nearest-neighbour 2× upsampling on `[H×W×C]`.
    pub fn upsample2x(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 3 {
            return Err(Error::Shape(format!(
                "upsample2x: need [H×W×C], got {}",
                shape_of(x)
            )));
        }
        let (h, w, c) = (sh[0], sh[1], sh[2]);
        let d = x.data();
        let mut out = vec![E::zero(); 4 * h * w * c];
        let ow = 2 * w;
        for y in 0..h {
            for xx in 0..w {
                let src = &d[(y * w + xx) * c..(y * w + xx + 1) * c];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let o = ((y * 2 + dy) * ow + xx * 2 + dx) * c;
                        out[o..o + c].copy_from_slice(src);
                    }
                }
            }
        }
        Ok(self.out(
            Op::Upsample2x,
            vec![x.clone()],
            vec![2 * h, 2 * w, c],
            out,
        ))
    }

    /// Concatenate along the last axis; leading extents must match.
    pub fn concat_last(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != bsh.len()
            || ash.is_empty()
            || ash[..ash.len() - 1] != bsh[..bsh.len() - 1]
        {
            return Err(Error::Shape(format!(
                "concat_last: {} vs {}",
                shape_of(a),
                shape_of(b)
            )));
        }
        let (ca, cb) = (last_dim(ash), last_dim(bsh));
        let rows = a.len() / ca;
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![E::zero(); rows * (ca + cb)];
        for r in 0..rows {
            out[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&ad[r * ca..(r + 1) * ca]);
            out[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.out(
            Op::ConcatLast { split: ca },
            vec![a.clone(), b.clone()],
            shape,
            out,
        ))
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&self, x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::Shape(format!(
                "reshape: {} elements into {:?}",
                x.len(),
                shape
            )));
        }
        let data = x.to_vec();
        Ok(self.out(Op::Reshape, vec![x.clone()], shape.to_vec(), data))
    }

    /// Select rows of a `[R×C]` matrix.
    pub fn gather_rows(&self, x: &Tensor<E>, rows: &[usize]) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows: need [R×C], got {}",
                shape_of(x)
            )));
        }
        let (r, c) = (sh[0], sh[1]);
        if let Some(bad) = rows.iter().find(|i| **i >= r) {
            return Err(Error::Data(format!("gather_rows: index {bad} out of {r} rows")));
        }
        let d = x.data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for i in rows {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        Ok(self.out(
            Op::GatherRows { rows: rows.to_vec() },
            vec![x.clone()],
            vec![rows.len(), c],
            out,
        ))
    }

    /// Replace the listed rows of a token matrix by `mask_token + pe[row]`.
    ///
    /// `pe` holds the full positional-encoding matrix (same shape as
    /// `tokens`), so wavelength identity survives masking.
    pub fn mask_rows(
        &self,
        tokens: &Tensor<E>,
        mask_token: &Tensor<E>,
        masked: &[usize],
        pe: &[E],
    ) -> Result<Tensor<E>> {
        let sh = tokens.shape();
        if sh.len() != 2 {
            return Err(Error::Shape(format!(
                "mask_rows: need [C×d], got {}",
                shape_of(tokens)
            )));
        }
        let (r, c) = (sh[0], sh[1]);
        if mask_token.shape() != [c] {
            return Err(Error::Shape(format!(
                "mask_rows: mask token {} must be [{}]",
                shape_of(mask_token),
                c
            )));
        }
        if pe.len() != r * c {
            return Err(Error::Shape("mask_rows: pe matrix size mismatch".into()));
        }
        if let Some(bad) = masked.iter().find(|i| **i >= r) {
            return Err(Error::Data(format!("mask_rows: index {bad} out of {r} rows")));
        }
        let mut out = tokens.to_vec();
        let mt = mask_token.data();
        for i in masked {
            for j in 0..c {
                out[i * c + j] = mt[j] + pe[i * c + j];
            }
        }
        Ok(self.out(
            Op::MaskRows {
                masked: masked.to_vec(),
            },
            vec![tokens.clone(), mask_token.clone()],
            sh.to_vec(),
            out,
        ))
    }

    /// Same-padded stride-1 cross-correlation: `[H×W×Cin] * [kh×kw×Cin×Cout]`.
    pub fn conv2d(&self, x: &Tensor<E>, k: &Tensor<E>) -> Result<Tensor<E>> {
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: need [H×W×Cin] and [kh×kw×Cin×Cout], got {} and {}",
                shape_of(x),
                shape_of(k)
            )));
        }
        if ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d: kernel extents must be odd, got {}x{}",
                ks[0], ks[1]
            )));
        }
        if xs[2] != ks[2] {
            return Err(Error::Shape(format!(
                "conv2d: input channels {} vs kernel channels {}",
                xs[2], ks[2]
            )));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![E::zero(); h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                let orow = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                for dy in 0..kh {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let xoff = ((sy as usize) * w + sx as usize) * cin;
                        let koff = (dy * kw + dx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xoff + ci];
                            let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                            for (o, kv) in orow.iter_mut().zip(krow) {
                                *o += xv * *kv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.out(
            Op::Conv2d,
            vec![x.clone(), k.clone()],
            vec![h, w, cout],
            out,
        ))
    }

    /// Same-padded stride-1 1-D cross-correlation: `[L×Cin] * [k×Cin×Cout]`.
    ///
    /// Even kernel lengths pad one extra zero on the right.
    pub fn conv1d(&self, x: &Tensor<E>, k: &Tensor<E>) -> Result<Tensor<E>> {
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 2 || ks.len() != 3 || xs[1] != ks[1] {
            return Err(Error::Shape(format!(
                "conv1d: need [L×Cin] and [k×Cin×Cout] with matching Cin, got {} and {}",
                shape_of(x),
                shape_of(k)
            )));
        }
        let (l, cin) = (xs[0], xs[1]);
        let (kl, cout) = (ks[0], ks[2]);
        if l < kl {
            return Err(Error::Shape(format!(
                "conv1d: input length {l} shorter than kernel {kl}"
            )));
        }
        let pl = (kl - 1) / 2;
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![E::zero(); l * cout];
        for t in 0..l {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for dt in 0..kl {
                let st = t as isize + dt as isize - pl as isize;
                if st < 0 || st >= l as isize {
                    continue;
                }
                let xoff = (st as usize) * cin;
                let koff = dt * cin * cout;
                for ci in 0..cin {
                    let xv = xd[xoff + ci];
                    let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                    for (o, kv) in orow.iter_mut().zip(krow) {
                        *o += xv * *kv;
                    }
                }
            }
        }
        Ok(self.out(Op::Conv1d, vec![x.clone(), k.clone()], vec![l, cout], out))
    }

    /// Mean negative log-softmax over rows whose target is not `ignore`.
    ///
    /// Returns a zero-valued, zero-gradient scalar when every row is ignored.
    pub fn cross_entropy(
        &self,
        logits: &Tensor<E>,
        targets: &[u32],
        ignore: u32,
    ) -> Result<Tensor<E>> {
        let sh = logits.shape();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {} vs {} targets",
                shape_of(logits),
                targets.len()
            )));
        }
        let (n, k) = (sh[0], sh[1]);
        for (i, t) in targets.iter().enumerate() {
            if *t != ignore && *t as usize >= k {
                return Err(Error::Data(format!(
                    "cross_entropy: target {t} at row {i} outside [0,{k})"
                )));
            }
        }
        let d = logits.data();
        let mut probs = vec![E::zero(); n * k];
        let mut loss = E::zero();
        let mut counted = 0usize;
        for i in 0..n {
            let row = &d[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                probs[i * k + j] = probs[i * k + j] / sum;
            }
            if targets[i] != ignore {
                counted += 1;
                let lse = sum.ln() + max;
                loss += lse - row[targets[i] as usize];
            }
        }
        if counted > 0 {
            loss = loss / E::from_f64(counted as f64);
        } else {
            loss = E::zero();
        }
        Ok(self.out(
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                ignore,
                counted,
            },
            vec![logits.clone()],
            vec![],
            vec![loss],
        ))
    }

    /// Mean squared error over the positions where `mask` is true.
    pub fn mse_masked(
        &self,
        pred: &Tensor<E>,
        target: &Tensor<E>,
        mask: &[bool],
    ) -> Result<Tensor<E>> {
        if pred.shape() != target.shape() || pred.len() != mask.len() {
            return Err(Error::Shape(format!(
                "mse: {} vs {} with {} mask entries",
                shape_of(pred),
                shape_of(target),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        let mut loss = E::zero();
        if count > 0 {
            let p = pred.data();
            let t = target.data();
            for i in 0..p.len() {
                if mask[i] {
                    let d = p[i] - t[i];
                    loss += d * d;
                }
            }
            loss = loss / E::from_f64(count as f64);
        }
        Ok(self.out(
            Op::MseMasked {
                mask: mask.to_vec(),
                count,
            },
            vec![pred.clone(), target.clone()],
            vec![],
            vec![loss],
        ))
    }

    /// Unmasked mean squared error.
    pub fn mse(&self, pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
        let mask = vec![true; pred.len()];
        self.mse_masked(pred, target, &mask)
    }

    /// Sum of all elements to a scalar.
    pub fn sum_all(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.data().iter().cloned().sum();
        Ok(self.out(Op::SumAll, vec![x.clone()], vec![], vec![s]))
    }

    /// Column means of a `[R×C]` matrix, `-> [C]`.
    pub fn mean_rows(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 2 || sh[0] == 0 {
            return Err(Error::Shape(format!(
                "mean_rows: need non-empty [R×C], got {}",
                shape_of(x)
            )));
        }
        let (r, c) = (sh[0], sh[1]);
        let d = x.data();
        let rn = E::from_f64(r as f64);
        let mut out = vec![E::zero(); c];
        for row in d.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        for o in out.iter_mut() {
            *o = *o / rn;
        }
        Ok(self.out(Op::MeanRows, vec![x.clone()], vec![c], out))
    }
}

fn gelu_forward<E: Element>(x: E) -> E {
    let a = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let b = E::from_f64(0.044_715);
    let half = E::from_f64(0.5);
    let u = a * (x + b * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let a = E::from_f64(0.797_884_560_802_865_4);
    let b = E::from_f64(0.044_715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * a * (E::one() + three * b * x * x)
}

/// Gradient contributions for one recorded operation, aligned with its
/// inputs. `None` marks inputs that take no gradient.
pub(crate) fn backward<E: Element>(
    op: &Op<E>,
    inputs: &[Tensor<E>],
    output: &Tensor<E>,
    d_out: &[E],
) -> Vec<Option<Vec<E>>> {
    let need = |i: usize| inputs[i].requires_grad();
    match op {
        Op::Add => {
            let g = |i: usize| need(i).then(|| d_out.to_vec());
            vec![g(0), g(1)]
        }
        Op::AddBias => {
            let dx = need(0).then(|| d_out.to_vec());
            let db = need(1).then(|| {
                let c = inputs[1].len();
                let mut db = vec![E::zero(); c];
                for (i, d) in d_out.iter().enumerate() {
                    db[i % c] += *d;
                }
                db
            });
            vec![dx, db]
        }
        Op::Mul => {
            let da = need(0).then(|| {
                inputs[1]
                    .data()
                    .iter()
                    .zip(d_out)
                    .map(|(b, d)| *b * *d)
                    .collect()
            });
            let db = need(1).then(|| {
                inputs[0]
                    .data()
                    .iter()
                    .zip(d_out)
                    .map(|(a, d)| *a * *d)
                    .collect()
            });
            vec![da, db]
        }
        Op::MulScalar(s) => vec![need(0).then(|| d_out.iter().map(|d| *d * *s).collect())],
        Op::Matmul => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            let da = need(0).then(|| {
                // dA = dC · B^T
                let bd = inputs[1].data();
                let mut da = vec![E::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = E::zero();
                        let drow = &d_out[i * n..(i + 1) * n];
                        let brow = &bd[p * n..(p + 1) * n];
                        for (d, b) in drow.iter().zip(brow) {
                            acc += *d * *b;
                        }
                        da[i * k + p] = acc;
                    }
                }
                da
            });
            let db = need(1).then(|| {
                // dB = A^T · dC
                let ad = inputs[0].data();
                let mut db = vec![E::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let a = ad[i * k + p];
                        let drow = &d_out[i * n..(i + 1) * n];
                        let brow = &mut db[p * n..(p + 1) * n];
                        for (o, d) in brow.iter_mut().zip(drow) {
                            *o += a * *d;
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        Op::Transpose => vec![need(0).then(|| {
            let (n, m) = (output.shape()[0], output.shape()[1]);
            let mut dx = vec![E::zero(); m * n];
            for i in 0..n {
                for j in 0..m {
                    dx[j * n + i] = d_out[i * m + j];
                }
            }
            dx
        })],
        Op::Relu => vec![need(0).then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(d_out)
                .map(|(x, d)| if *x > E::zero() { *d } else { E::zero() })
                .collect()
        })],
        Op::Gelu => vec![need(0).then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(d_out)
                .map(|(x, d)| gelu_grad(*x) * *d)
                .collect()
        })],
        Op::Softmax => vec![need(0).then(|| {
            let c = last_dim(output.shape());
            let y = output.data();
            let mut dx = vec![E::zero(); y.len()];
            for r in 0..y.len() / c {
                let yr = &y[r * c..(r + 1) * c];
                let dr = &d_out[r * c..(r + 1) * c];
                let dot: E = yr.iter().zip(dr).map(|(y, d)| *y * *d).sum();
                for j in 0..c {
                    dx[r * c + j] = yr[j] * (dr[j] - dot);
                }
            }
            dx
        })],
        Op::LayerNorm { mean, rstd } => {
            let c = last_dim(inputs[0].shape());
            let rows = inputs[0].len() / c;
            let xd = inputs[0].data();
            let g = inputs[1].data();
            let cn = E::from_f64(c as f64);
            let dx = need(0).then(|| {
                let mut dx = vec![E::zero(); xd.len()];
                for r in 0..rows {
                    let mut sum_dxh = E::zero();
                    let mut sum_dxh_xh = E::zero();
                    for j in 0..c {
                        let xh = (xd[r * c + j] - mean[r]) * rstd[r];
                        let dxh = d_out[r * c + j] * g[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let m1 = sum_dxh / cn;
                    let m2 = sum_dxh_xh / cn;
                    for j in 0..c {
                        let xh = (xd[r * c + j] - mean[r]) * rstd[r];
                        let dxh = d_out[r * c + j] * g[j];
                        dx[r * c + j] = rstd[r] * (dxh - m1 - xh * m2);
                    }
                }
                dx
            });
            let dg = need(1).then(|| {
                let mut dg = vec![E::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let xh = (xd[r * c + j] - mean[r]) * rstd[r];
                        dg[j] += d_out[r * c + j] * xh;
                    }
                }
                dg
            });
            let db = need(2).then(|| {
                let mut db = vec![E::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        db[j] += d_out[r * c + j];
                    }
                }
                db
            });
            vec![dx, dg, db]
        }
        Op::BatchNorm { mean, rstd, train } => {
            let c = last_dim(inputs[0].shape());
            let rows = inputs[0].len() / c;
            let xd = inputs[0].data();
            let g = inputs[1].data();
            let rn = E::from_f64(rows as f64);
            let dx = need(0).then(|| {
                let mut dx = vec![E::zero(); xd.len()];
                if *train {
                    for j in 0..c {
                        let mut sum_dxh = E::zero();
                        let mut sum_dxh_xh = E::zero();
                        for r in 0..rows {
                            let xh = (xd[r * c + j] - mean[j]) * rstd[j];
                            let dxh = d_out[r * c + j] * g[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let m1 = sum_dxh / rn;
                        let m2 = sum_dxh_xh / rn;
                        for r in 0..rows {
                            let xh = (xd[r * c + j] - mean[j]) * rstd[j];
                            let dxh = d_out[r * c + j] * g[j];
                            dx[r * c + j] = rstd[j] * (dxh - m1 - xh * m2);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for j in 0..c {
                            dx[r * c + j] = d_out[r * c + j] * g[j] * rstd[j];
                        }
                    }
                }
                dx
            });
            let dg = need(1).then(|| {
                let mut dg = vec![E::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let xh = (xd[r * c + j] - mean[j]) * rstd[j];
                        dg[j] += d_out[r * c + j] * xh;
                    }
                }
                dg
            });
            let db = need(2).then(|| {
                let mut db = vec![E::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        db[j] += d_out[r * c + j];
                    }
                }
                db
            });
            vec![dx, dg, db]
        }
        Op::Dropout { mask, scale } => vec![need(0).then(|| {
            d_out
                .iter()
                .zip(mask)
                .map(|(d, m)| if *m { *d * *scale } else { E::zero() })
                .collect()
        })],
        Op::MaxPool2d { argmax } | Op::MaxPool1d { argmax } => vec![need(0).then(|| {
            let mut dx = vec![E::zero(); inputs[0].len()];
            for (o, src) in argmax.iter().enumerate() {
                dx[*src] += d_out[o];
            }
            dx
        })],
        Op::Upsample2x => vec![need(0).then(|| {
            let sh = inputs[0].shape();
            let (h, w, c) = (sh[0], sh[1], sh[2]);
            let ow = 2 * w;
            let mut dx = vec![E::zero(); h * w * c];
            for y in 0..2 * h {
                for xx in 0..ow {
                    let src = (y / 2 * w + xx / 2) * c;
                    let o = (y * ow + xx) * c;
                    for ch in 0..c {
                        dx[src + ch] += d_out[o + ch];
                    }
                }
            }
            dx
        })],
        Op::ConcatLast { split } => {
            let ctot = last_dim(output.shape());
            let ca = *split;
            let cb = ctot - ca;
            let rows = output.len() / ctot;
            let da = need(0).then(|| {
                let mut da = vec![E::zero(); rows * ca];
                for r in 0..rows {
                    da[r * ca..(r + 1) * ca]
                        .copy_from_slice(&d_out[r * ctot..r * ctot + ca]);
                }
                da
            });
            let db = need(1).then(|| {
                let mut db = vec![E::zero(); rows * cb];
                for r in 0..rows {
                    db[r * cb..(r + 1) * cb]
                        .copy_from_slice(&d_out[r * ctot + ca..(r + 1) * ctot]);
                }
                db
            });
            vec![da, db]
        }
        Op::Reshape => vec![need(0).then(|| d_out.to_vec())],
        Op::GatherRows { rows } => vec![need(0).then(|| {
            let c = inputs[0].shape()[1];
            let mut dx = vec![E::zero(); inputs[0].len()];
            for (o, r) in rows.iter().enumerate() {
                for j in 0..c {
                    dx[r * c + j] += d_out[o * c + j];
                }
            }
            dx
        })],
        Op::MaskRows { masked } => {
            let c = inputs[0].shape()[1];
            let dt = need(0).then(|| {
                let mut dt = d_out.to_vec();
                for r in masked {
                    dt[r * c..(r + 1) * c].fill(E::zero());
                }
                dt
            });
            let dm = need(1).then(|| {
                let mut dm = vec![E::zero(); c];
                for r in masked {
                    for j in 0..c {
                        dm[j] += d_out[r * c + j];
                    }
                }
                dm
            });
            vec![dt, dm]
        }
        Op::Conv2d => {
            let xs = inputs[0].shape();
            let ks = inputs[1].shape();
            let (h, w, cin) = (xs[0], xs[1], xs[2]);
            let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
            let (ph, pw) = (kh / 2, kw / 2);
            let dx = need(0).then(|| {
                let kd = inputs[1].data();
                let mut dx = vec![E::zero(); h * w * cin];
                for y in 0..h {
                    for xx in 0..w {
                        let drow = &d_out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                        for dy in 0..kh {
                            let sy = y as isize + dy as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dxk in 0..kw {
                                let sx = xx as isize + dxk as isize - pw as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let xoff = ((sy as usize) * w + sx as usize) * cin;
                                let koff = (dy * kw + dxk) * cin * cout;
                                for ci in 0..cin {
                                    let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                                    let mut acc = E::zero();
                                    for (d, kv) in drow.iter().zip(krow) {
                                        acc += *d * *kv;
                                    }
                                    dx[xoff + ci] += acc;
                                }
                            }
                        }
                    }
                }
                dx
            });
            let dk = need(1).then(|| {
                let xd = inputs[0].data();
                let mut dk = vec![E::zero(); kh * kw * cin * cout];
                for y in 0..h {
                    for xx in 0..w {
                        let drow = &d_out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                        for dy in 0..kh {
                            let sy = y as isize + dy as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dxk in 0..kw {
                                let sx = xx as isize + dxk as isize - pw as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let xoff = ((sy as usize) * w + sx as usize) * cin;
                                let koff = (dy * kw + dxk) * cin * cout;
                                for ci in 0..cin {
                                    let xv = xd[xoff + ci];
                                    let krow =
                                        &mut dk[koff + ci * cout..koff + (ci + 1) * cout];
                                    for (o, d) in krow.iter_mut().zip(drow) {
                                        *o += xv * *d;
                                    }
                                }
                            }
                        }
                    }
                }
                dk
            });
            vec![dx, dk]
        }
        Op::Conv1d => {
            let xs = inputs[0].shape();
            let ks = inputs[1].shape();
            let (l, cin) = (xs[0], xs[1]);
            let (kl, cout) = (ks[0], ks[2]);
            let pl = (kl - 1) / 2;
            let dx = need(0).then(|| {
                let kd = inputs[1].data();
                let mut dx = vec![E::zero(); l * cin];
                for t in 0..l {
                    let drow = &d_out[t * cout..(t + 1) * cout];
                    for dt in 0..kl {
                        let st = t as isize + dt as isize - pl as isize;
                        if st < 0 || st >= l as isize {
                            continue;
                        }
                        let xoff = (st as usize) * cin;
                        let koff = dt * cin * cout;
                        for ci in 0..cin {
                            let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                            let mut acc = E::zero();
                            for (d, kv) in drow.iter().zip(krow) {
                                acc += *d * *kv;
                            }
                            dx[xoff + ci] += acc;
                        }
                    }
                }
                dx
            });
            let dk = need(1).then(|| {
                let xd = inputs[0].data();
                let mut dk = vec![E::zero(); kl * cin * cout];
                for t in 0..l {
                    let drow = &d_out[t * cout..(t + 1) * cout];
                    for dt in 0..kl {
                        let st = t as isize + dt as isize - pl as isize;
                        if st < 0 || st >= l as isize {
                            continue;
                        }
                        let xoff = (st as usize) * cin;
                        let koff = dt * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xoff + ci];
                            let krow = &mut dk[koff + ci * cout..koff + (ci + 1) * cout];
                            for (o, d) in krow.iter_mut().zip(drow) {
                                *o += xv * *d;
                            }
                        }
                    }
                }
                dk
            });
            vec![dx, dk]
        }
        Op::CrossEntropy {
            probs,
            targets,
            ignore,
            counted,
        } => vec![need(0).then(|| {
            let k = inputs[0].shape()[1];
            let mut dx = vec![E::zero(); inputs[0].len()];
            if *counted > 0 {
                let scale = d_out[0] / E::from_f64(*counted as f64);
                for (i, t) in targets.iter().enumerate() {
                    if *t == *ignore {
                        continue;
                    }
                    for j in 0..k {
                        let indicator = if j == *t as usize { E::one() } else { E::zero() };
                        dx[i * k + j] = (probs[i * k + j] - indicator) * scale;
                    }
                }
            }
            dx
        })],
        Op::MseMasked { mask, count } => {
            let grad = |sign: E| {
                let p = inputs[0].data();
                let t = inputs[1].data();
                let mut dx = vec![E::zero(); p.len()];
                if *count > 0 {
                    let scale = d_out[0] * E::from_f64(2.0 / *count as f64) * sign;
                    for i in 0..p.len() {
                        if mask[i] {
                            dx[i] = (p[i] - t[i]) * scale;
                        }
                    }
                }
                dx
            };
            vec![
                need(0).then(|| grad(E::one())),
                need(1).then(|| grad(-E::one())),
            ]
        }
        Op::SumAll => vec![need(0).then(|| vec![d_out[0]; inputs[0].len()])],
        Op::MeanRows => vec![need(0).then(|| {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let rn = E::from_f64(r as f64);
            let mut dx = vec![E::zero(); r * c];
            for row in 0..r {
                for j in 0..c {
                    dx[row * c + j] = d_out[j] / rn;
                }
            }
            dx
        })],
    }
}

/// Zero-padded dilated cross-correlation minus a bias, with output length
/// equal to the input length. This is the (non-differentiated) transform
/// the random-kernel spectral baseline is built on.
pub fn conv1d_dilated(x: &[f64], weights: &[f64; 9], dilation: usize, bias: f64) -> Result<Vec<f64>> {
    if dilation < 1 {
        return Err(Error::Config(format!(
            "conv1d_dilated: dilation must be >= 1, got {dilation}"
        )));
    }
    if x.is_empty() {
        return Err(Error::Data("conv1d_dilated: empty input".into()));
    }
    let l = x.len() as isize;
    let d = dilation as isize;
    let mut out = Vec::with_capacity(x.len());
    // Center tap index 4: receptive field spans [-4d, +4d] around t.
    for t in 0..l {
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            let s = t + (j as isize - 4) * d;
            if s >= 0 && s < l {
                acc += w * x[s as usize];
            }
        }
        out.push(acc - bias);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, Tape, Tensor};
    use super::*;
    use crate::rng::{Stream, StreamSeed};

    fn rng(i: u64) -> rand_chacha::ChaCha8Rng {
        StreamSeed(42).rng(Stream::Test, i)
    }

    fn rand_tensor(shape: &[usize], i: u64, param: bool) -> Tensor<f64> {
        let mut r = rng(i);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        if param {
            Tensor::param(shape, data)
        } else {
            Tensor::constant(shape, data)
        }
    }

    /// Random values bounded away from zero, for kink-free relu/pool checks.
    fn rand_tensor_offzero(shape: &[usize], i: u64) -> Tensor<f64> {
        let mut r = rng(i);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = r.gen_range(0.1..1.0);
                if r.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::param(shape, data)
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::<f64>::new();
        let eye = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = Tensor::constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(&eye, &m).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilating_product() {
        let tape = Tape::<f64>::new();
        let a = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let b = Tensor::constant(&[2, 2], vec![0.0, 0.0, 0.0, 1.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extents() {
        let tape = Tape::<f64>::new();
        let a = Tensor::constant(&[2, 3], vec![0.0; 6]);
        let b = Tensor::constant(&[2, 2], vec![0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = rand_tensor(&[3, 4], 1, true);
        let b = rand_tensor(&[4, 2], 2, false);
        let err = grad_check(
            |t, xs| {
                let y = t.matmul(&xs[0], &b)?;
                t.sum_all(&y)
            },
            &[a],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::<f64>::new();
        let x = rand_tensor(&[4, 4, 1], 3, false);
        let k = Tensor::constant(&[1, 1, 1, 1], vec![1.0]);
        let y = tape.conv2d(&x, &k).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_zero_kernel() {
        let tape = Tape::<f64>::new();
        let x = rand_tensor(&[4, 4, 2], 4, false);
        let k = Tensor::constant(&[3, 3, 2, 3], vec![0.0; 54]);
        let y = tape.conv2d(&x, &k).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv2d_rejects_even_kernel() {
        let tape = Tape::<f64>::new();
        let x = Tensor::constant(&[4, 4, 1], vec![0.0; 16]);
        let k = Tensor::constant(&[2, 2, 1, 1], vec![0.0; 4]);
        assert!(matches!(tape.conv2d(&x, &k), Err(Error::Config(_))));
    }

    /// Six-nested-loop reference for same-padded 2-D cross-correlation.
    fn conv2d_naive(
        x: &[f64],
        k: &[f64],
        (h, w, cin): (usize, usize, usize),
        (kh, kw, cout): (usize, usize, usize),
    ) -> Vec<f64> {
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            for ci in 0..cin {
                                let sy = y as isize + dy as isize - (kh / 2) as isize;
                                let sx = xx as isize + dx as isize - (kw / 2) as isize;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += x[((sy as usize) * w + sx as usize) * cin + ci]
                                        * k[((dy * kw + dx) * cin + ci) * cout + co];
                                }
                            }
                        }
                    }
                    out[(y * w + xx) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_loops_and_finite_differences() {
        let x = rand_tensor(&[5, 5, 2], 5, true);
        let k = rand_tensor(&[3, 3, 2, 2], 6, true);
        let tape = Tape::<f64>::new();
        let y = tape.conv2d(&x, &k).unwrap();
        let reference = conv2d_naive(&x.to_vec(), &k.to_vec(), (5, 5, 2), (3, 3, 2));
        for (a, b) in y.to_vec().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
        let err = grad_check(
            |t, xs| {
                let y = t.conv2d(&xs[0], &xs[1])?;
                t.sum_all(&y)
            },
            &[x, k],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn conv1d_dilated_one_hot_center_is_identity() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut w = [0.0; 9];
        w[4] = 1.0;
        let y = conv1d_dilated(&x, &w, 1, 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv1d_dilated_constant_input_interior() {
        let c = 0.7;
        let x = vec![c; 30];
        let w = [0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -0.5, 0.25, 0.75];
        let s: f64 = w.iter().sum();
        let y = conv1d_dilated(&x, &w, 2, 0.0).unwrap();
        // Interior positions see the full receptive field (span 4*dilation).
        for t in 8..22 {
            assert!((y[t] - c * s).abs() < 1e-12, "at {t}: {} vs {}", y[t], c * s);
        }
    }

    #[test]
    fn conv1d_dilated_matches_naive_loop() {
        let mut r = rng(7);
        let x: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut w = [0.0; 9];
        for v in w.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let bias = 0.3;
        let dilation = 3usize;
        let got = conv1d_dilated(&x, &w, dilation, bias).unwrap();
        for t in 0..x.len() {
            let mut acc = 0.0;
            for j in 0..9 {
                let s = t as isize + (j as isize - 4) * dilation as isize;
                if s >= 0 && (s as usize) < x.len() {
                    acc += w[j] * x[s as usize];
                }
            }
            assert!((got[t] - (acc - bias)).abs() < 1e-6);
        }
    }

    #[test]
    fn conv1d_dilated_rejects_zero_dilation() {
        assert!(matches!(
            conv1d_dilated(&[1.0], &[0.0; 9], 0, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape = Tape::<f64>::new();
        let x = Tensor::constant(&[3], vec![0.0, 0.0, 0.0]);
        let y = tape.softmax(&x).unwrap();
        for v in y.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = Tensor::constant(&[3], vec![1000.0, 0.0, 0.0]);
        let y = tape.softmax(&x).unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-6);
        assert!(y[1].abs() < 1e-6 && y[2].abs() < 1e-6);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let x = rand_tensor(&[4], 8, true);
        let h = 1e-5;
        for j in 0..4 {
            // Analytic row j of the Jacobian via a one-hot projection.
            let tape = Tape::<f64>::new();
            let onehot: Vec<f64> = (0..4).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            let sel = Tensor::constant(&[4], onehot);
            let y = tape.softmax(&x).unwrap();
            let proj = tape.mul(&y, &sel).unwrap();
            let s = tape.sum_all(&proj).unwrap();
            x.zero_grad();
            tape.backward(&s).unwrap();
            let analytic = x.grad().unwrap();
            for i in 0..4 {
                let base = x.to_vec();
                let eval = |v: f64| {
                    let mut d = base.clone();
                    d[i] = v;
                    let t = Tape::<f64>::new();
                    let xx = Tensor::constant(&[4], d);
                    t.softmax(&xx).unwrap().to_vec()[j]
                };
                let numeric = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
                assert!(
                    (analytic[i] - numeric).abs() < 1e-5,
                    "J[{j}][{i}]: {} vs {}",
                    analytic[i],
                    numeric
                );
            }
        }
    }

    #[test]
    fn cross_entropy_peaked_and_uniform() {
        let tape = Tape::<f64>::new();
        let peaked = Tensor::constant(&[1, 3], vec![50.0, 0.0, 0.0]);
        let loss = tape.cross_entropy(&peaked, &[0], u32::MAX).unwrap();
        assert!(loss.item() < 1e-10);
        let uniform = Tensor::constant(&[1, 4], vec![0.0; 4]);
        let loss = tape.cross_entropy(&uniform, &[2], u32::MAX).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let tape = Tape::<f64>::new();
        let logits = rand_tensor(&[3, 4], 9, true);
        let loss = tape.cross_entropy(&logits, &[7, 7, 7], 7).unwrap();
        assert_eq!(loss.item(), 0.0);
        tape.backward(&loss).unwrap();
        assert!(logits.grad().unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::constant(&[1, 3], vec![0.0; 3]);
        assert!(matches!(
            tape.cross_entropy(&logits, &[5], 65535),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = rand_tensor(&[8, 5], 10, true);
        let targets: Vec<u32> = {
            let mut r = rng(11);
            (0..8)
                .map(|_| if r.gen::<f64>() < 0.2 { 65535 } else { r.gen_range(0..5) })
                .collect()
        };
        let err = grad_check(
            |t, xs| t.cross_entropy(&xs[0], &targets, 65535),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn dropout_eval_is_bitwise_identity() {
        let tape = Tape::<f64>::new();
        let x = rand_tensor(&[64], 12, true);
        let y = tape.dropout(&x, 0.5, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(x.id(), y.id());
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn dropout_train_preserves_expectation() {
        // E[output] = input; check the mean over 10^4 trials within 3 sigma.
        let p = 0.3;
        let x_val = 1.0;
        let trials = 10_000;
        let tape = Tape::<f64>::new();
        let x = Tensor::constant(&[trials], vec![x_val; trials]);
        let mut r = rng(13);
        let y = tape.dropout(&x, p, Mode::Train, &mut r).unwrap();
        let mean = y.to_vec().iter().sum::<f64>() / trials as f64;
        // One Bernoulli(keep) sample scaled by 1/keep has variance p/(1-p).
        let sigma = (p / (1.0 - p) / trials as f64).sqrt();
        assert!(
            (mean - x_val).abs() < 3.0 * sigma,
            "mean {mean} vs {x_val} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn batch_norm_eval_is_affine_in_input() {
        let stats = RefCell::new(RunningStats::<f64> {
            mean: vec![0.3, -0.2],
            var: vec![0.5, 1.5],
        });
        let gamma = Tensor::constant(&[2], vec![1.1, 0.9]);
        let beta = Tensor::constant(&[2], vec![0.05, -0.1]);
        // Same row in two different batch compositions must map identically.
        let probe = [0.7, -0.4];
        let tape = Tape::<f64>::new();
        let a = Tensor::constant(&[2, 2], vec![probe[0], probe[1], 5.0, -5.0]);
        let b = Tensor::constant(&[2, 2], vec![probe[0], probe[1], -2.0, 9.0]);
        let ya = tape.batch_norm(&a, &gamma, &beta, &stats, Mode::Eval, 0.1).unwrap();
        let yb = tape.batch_norm(&b, &gamma, &beta, &stats, Mode::Eval, 0.1).unwrap();
        assert_eq!(ya.to_vec()[..2], yb.to_vec()[..2]);
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let stats = RefCell::new(RunningStats::<f64>::new(1));
        let gamma = Tensor::constant(&[1], vec![1.0]);
        let beta = Tensor::constant(&[1], vec![0.0]);
        let tape = Tape::<f64>::new();
        let x = Tensor::constant(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        tape.batch_norm(&x, &gamma, &beta, &stats, Mode::Train, 0.1).unwrap();
        let s = stats.borrow();
        assert!((s.mean[0] - 0.1 * 2.5).abs() < 1e-12);
        assert!((s.var[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        // One representative seed per primitive; the acceptance suite runs
        // the full 20-seed battery.
        let checks: Vec<(&str, f64)> = vec![
            (
                "relu",
                grad_check(
                    |t, xs| {
                        let y = t.relu(&xs[0])?;
                        t.sum_all(&y)
                    },
                    &[rand_tensor_offzero(&[12], 20)],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "gelu",
                grad_check(
                    |t, xs| {
                        let y = t.gelu(&xs[0])?;
                        t.sum_all(&y)
                    },
                    &[rand_tensor(&[12], 21, true)],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "layer_norm",
                grad_check(
                    |t, xs| {
                        let y = t.layer_norm(&xs[0], &xs[1], &xs[2])?;
                        let w = rand_tensor(&[3, 5], 99, false);
                        let p = t.mul(&y, &w)?;
                        t.sum_all(&p)
                    },
                    &[
                        rand_tensor(&[3, 5], 22, true),
                        rand_tensor(&[5], 23, true),
                        rand_tensor(&[5], 24, true),
                    ],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "maxpool2d",
                grad_check(
                    |t, xs| {
                        let y = t.maxpool2d(&xs[0])?;
                        t.sum_all(&y)
                    },
                    &[rand_tensor(&[4, 4, 2], 25, true)],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "upsample2x",
                grad_check(
                    |t, xs| {
                        let y = t.upsample2x(&xs[0])?;
                        let w = rand_tensor(&[6, 6, 2], 98, false);
                        let p = t.mul(&y, &w)?;
                        t.sum_all(&p)
                    },
                    &[rand_tensor(&[3, 3, 2], 26, true)],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "conv1d",
                grad_check(
                    |t, xs| {
                        let y = t.conv1d(&xs[0], &xs[1])?;
                        t.sum_all(&y)
                    },
                    &[rand_tensor(&[10, 2], 27, true), rand_tensor(&[6, 2, 3], 28, true)],
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "mse_masked",
                grad_check(
                    |t, xs| {
                        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
                        t.mse_masked(&xs[0], &xs[1], &mask)
                    },
                    &[rand_tensor(&[12], 29, true), rand_tensor(&[12], 30, true)],
                    1e-5,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn concat_and_gather_shapes() {
        let tape = Tape::<f64>::new();
        let a = rand_tensor(&[2, 3], 31, false);
        let b = rand_tensor(&[2, 2], 32, false);
        let y = tape.concat_last(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        let g = tape.gather_rows(&y, &[1, 0, 1]).unwrap();
        assert_eq!(g.shape(), &[3, 5]);
        assert_eq!(g.to_vec()[..5], y.to_vec()[5..10]);
    }
}
