use std::collections::BTreeMap;

use super::kernels::{conv2d_backward, conv2d_forward};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Floor applied inside the cross-entropy log.
pub const LOG_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const ZSCORE_MIN_STD: f64 = 1e-12;

pub type LinearFn = Box<dyn Fn(&[f64]) -> Vec<f64>>;

enum Op {
    Constant,
    Param,
    Add { a: Var, b: Var },
    Square { x: Var },
    Scale { x: Var, s: f64 },
    Sum { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var },
    Conv1d { x: Var, k: Var },
    ChannelBias { x: Var, b: Var },
    Relu { x: Var },
    Tanh { x: Var },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    RowPool { x: Var, factor: usize },
    Transpose12 { x: Var },
    Reshape { x: Var },
    MeanAxis { x: Var, pre: usize, n: usize, post: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention(Box<AttentionSaved>),
    Softmax { x: Var },
    CrossEntropy { probs: Var, label: usize },
    Window { x: Var, row: usize, t0: usize },
    BandPower(Box<BandPowerSaved>),
    Stack { parts: Vec<Var> },
    Contrastive { f: Var, fp: Var },
    SelfAdjoint { x: Var, apply: LinearFn },
    Sparse { x: Var, rows: Vec<Vec<(usize, f64)>> },
    ZscoreRows { x: Var, std: Vec<f64> },
}

struct AttentionSaved {
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
}

struct BandPowerSaved {
    x: Var,
    window: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    re: Vec<f64>,
    im: Vec<f64>,
    total: f64,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Values are immutable once pushed. A tape is single-owner; build a fresh one
/// per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, what: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(what));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// Registers a named parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(value, Op::Param, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and is
    /// then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err(format!("cannot add {sb:?} to {sa:?}")));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        let m = bv.len().max(1);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv[i % m];
        }
        self.push(out, Op::Add { a, b }, "add")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square { x }, "square")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s }, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `x·w + b` over the last axis of `x`; leading axes act as the batch.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] || sb != [sw[1]] {
            return Err(dim_err(format!(
                "dense: x {sx:?}, w {sw:?}, b {sb:?} do not conform"
            )));
        }
        let (i_dim, o_dim) = (sw[0], sw[1]);
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = o_dim;
        let rows = self.value(x).len() / i_dim;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; rows * o_dim];
        for r in 0..rows {
            let orow = &mut out[r * o_dim..(r + 1) * o_dim];
            orow.copy_from_slice(bv);
            for i in 0..i_dim {
                let a = xv[r * i_dim + i];
                if a == 0.0 {
                    continue;
                }
                for (o, &wij) in orow.iter_mut().zip(&wv[i * o_dim..(i + 1) * o_dim]) {
                    *o += a * wij;
                }
            }
        }
        self.push(Tensor::new(out_shape, out)?, Op::Dense { x, w, b }, "dense")
    }

    /// 2-D cross-correlation, `x: [B,C,H,W]`, `k: [O,C,Kh,Kw]`, 'same' zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(dim_err(format!("conv2d: x {sx:?}, k {sk:?}")));
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel extents must be odd, got {}x{}",
                sk[2], sk[3]
            )));
        }
        let out = conv2d_forward(self.value(x), self.value(k));
        self.push(out, Op::Conv2d { x, k }, "conv2d")
    }

    /// 1-D cross-correlation, `x: [B,C,L]`, `k: [O,C,K]`, 'same' zero padding.
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(dim_err(format!("conv1d: x {sx:?}, k {sk:?}")));
        }
        if sk[2] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel length must be odd, got {}",
                sk[2]
            )));
        }
        let (b, c, l, o, kk) = (sx[0], sx[1], sx[2], sk[0], sk[2]);
        let x4 = self.value(x).clone().reshape(&[b, c, 1, l])?;
        let k4 = self.value(k).clone().reshape(&[o, c, 1, kk])?;
        let out = conv2d_forward(&x4, &k4).reshape(&[b, o, l])?;
        self.push(out, Op::Conv1d { x, k }, "conv1d")
    }

    /// Adds `b[c]` to every element of channel `c` (axis 1).
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(dim_err(format!("channel bias {sb:?} for {sx:?}")));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let add = bv[chunk_idx % c];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        self.push(out, Op::ChannelBias { x, b }, "channel_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x }, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh { x }, "tanh")
    }

    /// Non-overlapping max pool of width 2 over the last axis of `[B,C,L]`;
    /// a trailing odd sample is dropped.
    pub fn max_pool1d(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[2] < 2 {
            return Err(dim_err(format!("max_pool1d on {sx:?}")));
        }
        let (rows, l) = (sx[0] * sx[1], sx[2]);
        let lo = l / 2;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * lo);
        let mut argmax = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            for t in 0..lo {
                let i = r * l + 2 * t;
                let j = if xv[i + 1] > xv[i] { i + 1 } else { i };
                out.push(xv[j]);
                argmax.push(j);
            }
        }
        let value = Tensor::new(vec![sx[0], sx[1], lo], out)?;
        self.push(value, Op::MaxPool1d { x, argmax }, "max_pool1d")
    }

    /// Averages groups of `factor` consecutive rows (axis 2) of `[B,C,H,W]`.
    pub fn row_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || factor == 0 || sx[2] % factor != 0 {
            return Err(dim_err(format!("row_pool by {factor} on {sx:?}")));
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let ho = h / factor;
        let xv = self.value(x).data();
        let mut out = vec![0.0; bc * ho * w];
        let inv = 1.0 / factor as f64;
        for p in 0..bc {
            for r in 0..h {
                let src = &xv[(p * h + r) * w..][..w];
                let dst = &mut out[(p * ho + r / factor) * w..][..w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * inv;
                }
            }
        }
        let value = Tensor::new(vec![sx[0], sx[1], ho, w], out)?;
        self.push(value, Op::RowPool { x, factor }, "row_pool")
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(dim_err(format!("transpose12 on {sx:?}")));
        }
        let out = transpose_last2(self.value(x).data(), sx[0], sx[1], sx[2]);
        self.push(
            Tensor::new(vec![sx[0], sx[2], sx[1]], out)?,
            Op::Transpose12 { x },
            "transpose",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape { x }, "reshape")
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(dim_err(format!("mean over axis {axis} of {sx:?}")));
        }
        let pre: usize = sx[..axis].iter().product();
        let n = sx[axis];
        let post: usize = sx[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            for i in 0..n {
                let src = &xv[(p * n + i) * post..][..post];
                for (d, s) in out[p * post..][..post].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = sx.clone();
        shape.remove(axis);
        self.push(
            Tensor::new(shape, out)?,
            Op::MeanAxis { x, pre, n, post },
            "mean_axis",
        )
    }

    /// Layer normalization over the last axis with learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| dim_err("layer_norm on scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("layer_norm gain/offset shape"));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let h = (row[i] - mu) * inv;
                xhat[r * d + i] = h;
                out[r * d + i] = g[i] * h + b[i];
            }
        }
        self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product self-attention over `x: [B,L,D]`.
    /// No output projection and no residual; callers add those.
    pub fn attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(dim_err(format!("attention input {sx:?}")));
        }
        let (b, l, d) = (sx[0], sx[1], sx[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        for w in [wq, wk, wv] {
            if self.shape(w) != [d, d] {
                return Err(dim_err("attention projection must be DxD"));
            }
        }
        let xv = self.value(x).data();
        let q = matmul(xv, self.value(wq).data(), b * l, d, d);
        let k = matmul(xv, self.value(wk).data(), b * l, d, d);
        let v = matmul(xv, self.value(wv).data(), b * l, d, d);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut p = vec![0.0; b * heads * l * l];
        let mut out = vec![0.0; b * l * d];
        for bi in 0..b {
            for h in 0..heads {
                let pbase = (bi * heads + h) * l * l;
                for i in 0..l {
                    let qi = &q[(bi * l + i) * d + h * dh..][..dh];
                    let prow = &mut p[pbase + i * l..][..l];
                    for j in 0..l {
                        let kj = &k[(bi * l + j) * d + h * dh..][..dh];
                        prow[j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(bi * l + i) * d + h * dh..][..dh];
                    for j in 0..l {
                        let vj = &v[(bi * l + j) * d + h * dh..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += prow[j] * vv;
                        }
                    }
                }
            }
        }
        let saved = AttentionSaved {
            x,
            wq,
            wk,
            wv,
            heads,
            q,
            k,
            v,
            p,
        };
        self.push(
            Tensor::new(sx, out)?,
            Op::Attention(Box::new(saved)),
            "attention",
        )
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let n = *out.shape().last().unwrap_or(&1);
        for row in out.data_mut().chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax { x }, "softmax")
    }

    /// Mean negative log probability of `label` across the rows of `probs: [K,N]`.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let sp = self.shape(probs).to_vec();
        if sp.len() != 2 || sp[0] == 0 {
            return Err(dim_err(format!("cross_entropy on {sp:?}")));
        }
        if label >= sp[1] {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                sp[1]
            )));
        }
        let (k, n) = (sp[0], sp[1]);
        let pv = self.value(probs).data();
        let loss = (0..k)
            .map(|r| -pv[r * n + label].max(LOG_FLOOR).ln())
            .sum::<f64>()
            / k as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { probs, label },
            "cross_entropy",
        )
    }

    /// `x[row, t0..t0+len]` of a 2-D tensor.
    pub fn window(&mut self, x: Var, row: usize, t0: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || row >= sx[0] || t0 + len > sx[1] {
            return Err(dim_err(format!(
                "window row {row} [{t0}, {}) of {sx:?}",
                t0 + len
            )));
        }
        let data = self.value(x).row(row)[t0..t0 + len].to_vec();
        self.push(Tensor::from_vec(data), Op::Window { x, row, t0 }, "window")
    }

    /// Band-limited power spectrum of a 1-D signal normalized to unit mass.
    ///
    /// The signal is de-meaned and Hann-windowed, then evaluated with an explicit
    /// DFT at bins `k·fs/nfft` that fall inside `[lo, hi]` (zero padding to
    /// `nfft`). An all-zero spectrum maps to the uniform distribution.
    pub fn band_power(&mut self, x: Var, fs: f64, band: (f64, f64), nfft: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 || sx[0] < 2 || nfft < sx[0] {
            return Err(dim_err(format!("band_power on {sx:?} with nfft {nfft}")));
        }
        let l = sx[0];
        let bins = band_bins(fs, band, nfft);
        if bins.is_empty() {
            return Err(Error::Dsp("no frequency bins inside the band".into()));
        }
        let window = hann(l);
        let xv = self.value(x).data();
        let mean = xv.iter().sum::<f64>() / l as f64;
        let y: Vec<f64> = xv
            .iter()
            .zip(&window)
            .map(|(v, w)| (v - mean) * w)
            .collect();
        let nb = bins.len();
        let mut cos = vec![0.0; nb * l];
        let mut sin = vec![0.0; nb * l];
        let mut re = vec![0.0; nb];
        let mut im = vec![0.0; nb];
        for (bi, &k) in bins.iter().enumerate() {
            let omega = 2.0 * std::f64::consts::PI * k as f64 / nfft as f64;
            for n in 0..l {
                let (s, c) = (omega * n as f64).sin_cos();
                cos[bi * l + n] = c;
                sin[bi * l + n] = s;
                re[bi] += y[n] * c;
                im[bi] -= y[n] * s;
            }
        }
        let power: Vec<f64> = re.iter().zip(&im).map(|(r, i)| r * r + i * i).collect();
        let total: f64 = power.iter().sum();
        let out = if total > f64::MIN_POSITIVE {
            power.iter().map(|p| p / total).collect()
        } else {
            vec![1.0 / nb as f64; nb]
        };
        let saved = BandPowerSaved {
            x,
            window,
            cos,
            sin,
            re,
            im,
            total,
        };
        self.push(
            Tensor::from_vec(out),
            Op::BandPower(Box::new(saved)),
            "band_power",
        )
    }

    /// Stacks equal-shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err("stack of nothing"))?;
        let shape = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).len());
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(dim_err("stack of mismatched shapes"));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend(shape);
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Stack {
                parts: parts.to_vec(),
            },
            "stack",
        )
    }

    /// Contrastive PSD loss between two `[n, bins]` sets: mean within-set
    /// pairwise squared distance (both sets) minus mean cross-set distance.
    pub fn contrastive(&mut self, f: Var, fp: Var) -> Result<Var> {
        let (sf, sfp) = (self.shape(f).to_vec(), self.shape(fp).to_vec());
        if sf.len() != 2 || sf != sfp {
            return Err(dim_err(format!("contrastive on {sf:?} vs {sfp:?}")));
        }
        let n = sf[0];
        if n < 2 {
            return Err(Error::Contract(format!(
                "contrastive loss needs at least 2 samples per video, got {n}"
            )));
        }
        let loss = contrastive_value(self.value(f), self.value(fp));
        self.push(Tensor::scalar(loss), Op::Contrastive { f, fp }, "contrastive")
    }

    /// Applies a linear operator that equals its own adjoint (for example a
    /// symmetric frequency mask); the same operator maps gradients back.
    pub fn self_adjoint(&mut self, x: Var, apply: LinearFn) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = apply(self.value(x).data());
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SelfAdjoint { x, apply }, "self_adjoint")
    }

    /// Sparse linear map: output element `i` is `Σ w·x[j]` over `rows[i]`.
    pub fn sparse_linear(
        &mut self,
        x: Var,
        rows: Vec<Vec<(usize, f64)>>,
        shape: &[usize],
    ) -> Result<Var> {
        let n = self.value(x).len();
        if rows.iter().flatten().any(|&(j, _)| j >= n) {
            return Err(dim_err("sparse_linear index out of range"));
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().map(|&(j, w)| w * xv[j]).sum())
            .collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push(value, Op::Sparse { x, rows }, "sparse_linear")
    }

    /// Z-scores each row of a 2-D tensor; constant rows become zeros.
    pub fn zscore_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(dim_err(format!("zscore_rows on {sx:?}")));
        }
        let l = sx[1];
        let mut out = self.value(x).clone();
        let mut stds = Vec::with_capacity(sx[0]);
        for row in out.data_mut().chunks_mut(l.max(1)) {
            stds.push(zscore_in_place(row));
        }
        self.push(out, Op::ZscoreRows { x, std: stds }, "zscore_rows")
    }

    /// Reverse pass from a single-element `loss`. Returns the gradient of every
    /// node, `None` where the loss does not depend on it.
    fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add { a, b } => {
                acc(*a, g.clone());
                let bshape = val(*b).shape().to_vec();
                let m = val(*b).len().max(1);
                let mut gb = vec![0.0; m];
                for (i, v) in gd.iter().enumerate() {
                    gb[i % m] += v;
                }
                acc(*b, Tensor::new(bshape, gb).unwrap());
            }
            Op::Square { x } => {
                let xv = val(*x).data();
                let out = gd.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect();
                acc(*x, Tensor::new(val(*x).shape().to_vec(), out).unwrap());
            }
            Op::Scale { x, s } => acc(*x, g.map(|v| v * s)),
            Op::Sum { x } => acc(*x, Tensor::full(val(*x).shape(), gd[0])),
            Op::Dense { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (i_dim, o_dim) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / i_dim;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; o_dim];
                for r in 0..rows {
                    let grow = &gd[r * o_dim..(r + 1) * o_dim];
                    for (a, v) in gb.iter_mut().zip(grow) {
                        *a += v;
                    }
                    for i in 0..i_dim {
                        let wrow = &wv.data()[i * o_dim..(i + 1) * o_dim];
                        gx[r * i_dim + i] = grow.iter().zip(wrow).map(|(a, c)| a * c).sum();
                        let a = xv.data()[r * i_dim + i];
                        if a != 0.0 {
                            for (gwv, &gv) in gw[i * o_dim..(i + 1) * o_dim].iter_mut().zip(grow) {
                                *gwv += a * gv;
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                acc(*w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                acc(*b, Tensor::from_vec(gb));
            }
            Op::Conv2d { x, k } => {
                let (gx, gk) = conv2d_backward(val(*x), val(*k), g);
                acc(*x, gx);
                acc(*k, gk);
            }
            Op::Conv1d { x, k } => {
                let (sx, sk) = (val(*x).shape(), val(*k).shape());
                let x4 = val(*x).clone().reshape(&[sx[0], sx[1], 1, sx[2]]).unwrap();
                let k4 = val(*k).clone().reshape(&[sk[0], sk[1], 1, sk[2]]).unwrap();
                let g4 = g.clone().reshape(&[sx[0], sk[0], 1, sx[2]]).unwrap();
                let (gx, gk) = conv2d_backward(&x4, &k4, &g4);
                acc(*x, gx.reshape(sx).unwrap());
                acc(*k, gk.reshape(sk).unwrap());
            }
            Op::ChannelBias { x, b } => {
                let sx = val(*x).shape();
                let c = sx[1];
                let inner: usize = sx[2..].iter().product();
                let mut gb = vec![0.0; c];
                for (ci, chunk) in gd.chunks(inner).enumerate() {
                    gb[ci % c] += chunk.iter().sum::<f64>();
                }
                acc(*x, g.clone());
                acc(*b, Tensor::from_vec(gb));
            }
            Op::Relu { x } => {
                let xv = val(*x).data();
                let out = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(val(*x).shape().to_vec(), out).unwrap());
            }
            Op::Tanh { x } => {
                let yv = node.value.data();
                let out = gd.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*x, Tensor::new(val(*x).shape().to_vec(), out).unwrap());
            }
            Op::MaxPool1d { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&j, &gv) in argmax.iter().zip(gd) {
                    gx.data_mut()[j] += gv;
                }
                acc(*x, gx);
            }
            Op::RowPool { x, factor } => {
                let sx = val(*x).shape();
                let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let ho = h / factor;
                let inv = 1.0 / *factor as f64;
                let mut gx = vec![0.0; val(*x).len()];
                for p in 0..bc {
                    for r in 0..h {
                        let src = &gd[(p * ho + r / factor) * w..][..w];
                        for (d, s) in gx[(p * h + r) * w..][..w].iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(sx.to_vec(), gx).unwrap());
            }
            Op::Transpose12 { x } => {
                let sx = val(*x).shape();
                let back = transpose_last2(gd, sx[0], sx[2], sx[1]);
                acc(*x, Tensor::new(sx.to_vec(), back).unwrap());
            }
            Op::Reshape { x } => acc(*x, g.clone().reshape(val(*x).shape()).unwrap()),
            Op::MeanAxis { x, pre, n, post } => {
                let mut gx = vec![0.0; pre * n * post];
                let inv = 1.0 / *n as f64;
                for p in 0..*pre {
                    let src = &gd[p * post..][..*post];
                    for i in 0..*n {
                        for (d, s) in gx[(p * n + i) * post..][..*post].iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), gx).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).len();
                let gam = val(*gamma).data();
                let rows = xhat.len() / d;
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let grow = &gd[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    for i in 0..d {
                        gg[i] += grow[i] * hrow[i];
                        gbeta[i] += grow[i];
                        gh[i] = grow[i] * gam[i];
                    }
                    let m1 = gh.iter().sum::<f64>() / d as f64;
                    let m2 = gh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        gx[r * d + i] = inv_std[r] * (gh[i] - m1 - hrow[i] * m2);
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), gx).unwrap());
                acc(*gamma, Tensor::from_vec(gg));
                acc(*beta, Tensor::from_vec(gbeta));
            }
            Op::Attention(s) => self.attention_backward(s, g, &mut acc),
            Op::Softmax { x } => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in gd
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(gx.chunks_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        out[i] = yr[i] * (gr[i] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::CrossEntropy { probs, label } => {
                let p = val(*probs);
                let (k, n) = (p.shape()[0], p.shape()[1]);
                let mut gp = Tensor::zeros(p.shape());
                for r in 0..k {
                    let pv = p.data()[r * n + label];
                    if pv > LOG_FLOOR {
                        gp.data_mut()[r * n + label] = -gd[0] / (k as f64 * pv);
                    }
                }
                acc(*probs, gp);
            }
            Op::Window { x, row, t0 } => {
                let sx = val(*x).shape();
                let mut gx = Tensor::zeros(sx);
                let start = row * sx[1] + t0;
                gx.data_mut()[start..start + gd.len()].copy_from_slice(gd);
                acc(*x, gx);
            }
            Op::BandPower(s) => {
                let p = node.value.data();
                let nb = p.len();
                let l = s.window.len();
                if s.total <= f64::MIN_POSITIVE {
                    acc(s.x, Tensor::zeros(&[l]));
                    return;
                }
                let dot: f64 = gd.iter().zip(p).map(|(a, b)| a * b).sum();
                let mut gy = vec![0.0; l];
                for bi in 0..nb {
                    let gpow = (gd[bi] - dot) / s.total;
                    let (re, im) = (2.0 * gpow * s.re[bi], 2.0 * gpow * s.im[bi]);
                    let cos = &s.cos[bi * l..(bi + 1) * l];
                    let sin = &s.sin[bi * l..(bi + 1) * l];
                    for n in 0..l {
                        gy[n] += re * cos[n] - im * sin[n];
                    }
                }
                let wg: Vec<f64> = gy.iter().zip(&s.window).map(|(a, b)| a * b).collect();
                let mean = wg.iter().sum::<f64>() / l as f64;
                acc(s.x, Tensor::from_vec(wg.iter().map(|v| v - mean).collect()));
            }
            Op::Stack { parts } => {
                let chunk = gd.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    let t = Tensor::new(val(p).shape().to_vec(), gd[i * chunk..(i + 1) * chunk].to_vec())
                        .unwrap();
                    acc(p, t);
                }
            }
            Op::Contrastive { f, fp } => {
                let (gf, gfp) = contrastive_grad(val(*f), val(*fp));
                acc(*f, gf.map(|v| v * gd[0]));
                acc(*fp, gfp.map(|v| v * gd[0]));
            }
            Op::SelfAdjoint { x, apply } => {
                let back = apply(gd);
                acc(*x, Tensor::new(val(*x).shape().to_vec(), back).unwrap());
            }
            Op::Sparse { x, rows } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (r, &gv) in rows.iter().zip(gd) {
                    for &(j, w) in r {
                        gx.data_mut()[j] += w * gv;
                    }
                }
                acc(*x, gx);
            }
            Op::ZscoreRows { x, std } => {
                let y = &node.value;
                let l = y.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for (r, &sd) in std.iter().enumerate() {
                    if sd < ZSCORE_MIN_STD {
                        continue;
                    }
                    let gr = &gd[r * l..(r + 1) * l];
                    let yr = &y.data()[r * l..(r + 1) * l];
                    let mg = gr.iter().sum::<f64>() / l as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / l as f64;
                    for i in 0..l {
                        gx[r * l + i] = (gr[i] - mg - yr[i] * mgy) / sd;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) {
        let xt = &self.nodes[s.x.0].value;
        let (b, l, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gd = g.data();
        let mut gq = vec![0.0; b * l * d];
        let mut gk = vec![0.0; b * l * d];
        let mut gv = vec![0.0; b * l * d];
        let mut dp = vec![0.0; l];
        for bi in 0..b {
            for h in 0..s.heads {
                let pbase = (bi * s.heads + h) * l * l;
                for i in 0..l {
                    let go = &gd[(bi * l + i) * d + h * dh..][..dh];
                    let prow = &s.p[pbase + i * l..][..l];
                    for j in 0..l {
                        let vj = &s.v[(bi * l + j) * d + h * dh..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                        let gvj = &mut gv[(bi * l + j) * d + h * dh..][..dh];
                        for (t, &o) in gvj.iter_mut().zip(go) {
                            *t += prow[j] * o;
                        }
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(a, c)| a * c).sum();
                    for j in 0..l {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &s.k[(bi * l + j) * d + h * dh..][..dh];
                        let qi = &s.q[(bi * l + i) * d + h * dh..][..dh];
                        let gqi = &mut gq[(bi * l + i) * d + h * dh..][..dh];
                        for (t, &kv) in gqi.iter_mut().zip(kj) {
                            *t += ds * kv;
                        }
                        let gkj = &mut gk[(bi * l + j) * d + h * dh..][..dh];
                        for (t, &qv) in gkj.iter_mut().zip(qi) {
                            *t += ds * qv;
                        }
                    }
                }
            }
        }
        let xv = xt.data();
        let rows = b * l;
        let mut gx = vec![0.0; rows * d];
        for (w, gproj) in [(s.wq, &gq), (s.wk, &gk), (s.wv, &gv)] {
            let wv = self.nodes[w.0].value.data();
            // gx += gproj · wᵀ ; gw = xᵀ · gproj
            let mut gw = vec![0.0; d * d];
            for r in 0..rows {
                let grow = &gproj[r * d..(r + 1) * d];
                let xrow = &xv[r * d..(r + 1) * d];
                for i in 0..d {
                    let wrow = &wv[i * d..(i + 1) * d];
                    gx[r * d + i] += grow.iter().zip(wrow).map(|(a, c)| a * c).sum::<f64>();
                    let a = xrow[i];
                    for (t, &gvv) in gw[i * d..(i + 1) * d].iter_mut().zip(grow) {
                        *t += a * gvv;
                    }
                }
            }
            acc(w, Tensor::new(vec![d, d], gw).unwrap());
        }
        acc(s.x, Tensor::new(xt.shape().to_vec(), gx).unwrap());
    }
}

/// Exact reverse-mode gradients of `loss` for every entry of `params`.
/// Entries the loss does not depend on get zeros.
pub fn grad(tape: &Tape, loss: Var, params: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, value) in params.iter() {
        let g = tape
            .params
            .get(name)
            .and_then(|v| grads[v.0].clone())
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        out.insert(name.to_string(), g);
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_last2(x: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                out[(bi * n + j) * m + i] = x[(bi * m + i) * n + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Z-scores in place and returns the population standard deviation.
pub(crate) fn zscore_in_place(row: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let sd = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if sd < ZSCORE_MIN_STD {
        row.iter_mut().for_each(|v| *v = 0.0);
    } else {
        row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    sd
}

/// Hann window of length `l` (symmetric form).
pub(crate) fn hann(l: usize) -> Vec<f64> {
    if l < 2 {
        return vec![1.0; l];
    }
    (0..l)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (l - 1) as f64).cos())
        .collect()
}

/// DFT bin indices `k ≤ nfft/2` whose frequency `k·fs/nfft` lies in the band.
pub(crate) fn band_bins(fs: f64, band: (f64, f64), nfft: usize) -> Vec<usize> {
    let tol = 1e-9;
    (0..=nfft / 2)
        .filter(|&k| {
            let f = k as f64 * fs / nfft as f64;
            f >= band.0 - tol && f <= band.1 + tol
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn contrastive_value(f: &Tensor, fp: &Tensor) -> f64 {
    let n = f.shape()[0];
    let nf = n as f64;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pos += sq_dist(f.row(i), f.row(j)) + sq_dist(fp.row(i), fp.row(j));
            }
            neg += sq_dist(f.row(i), fp.row(j));
        }
    }
    pos / (2.0 * nf * (nf - 1.0)) - neg / (nf * nf)
}

fn contrastive_grad(f: &Tensor, fp: &Tensor) -> (Tensor, Tensor) {
    let (n, m) = (f.shape()[0], f.shape()[1]);
    let nf = n as f64;
    let col_sum = |t: &Tensor| {
        let mut s = vec![0.0; m];
        for i in 0..n {
            for (a, b) in s.iter_mut().zip(t.row(i)) {
                *a += b;
            }
        }
        s
    };
    let (sf, sfp) = (col_sum(f), col_sum(fp));
    let pos_c = 2.0 / (nf * (nf - 1.0));
    let neg_c = 2.0 / (nf * nf);
    let side = |a: &Tensor, sa: &[f64], sb: &[f64]| {
        let mut g = vec![0.0; n * m];
        for i in 0..n {
            for d in 0..m {
                let v = a.row(i)[d];
                g[i * m + d] = pos_c * (nf * v - sa[d]) - neg_c * (nf * v - sb[d]);
            }
        }
        Tensor::new(vec![n, m], g).unwrap()
    };
    (side(f, &sf, &sfp), side(fp, &sfp, &sf))
}
