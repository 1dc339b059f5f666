//! Direct CPU kernels for the U-Net's layers, as candle custom ops with
//! backward passes: 3x3 same-padding convolution (optionally fused with
//! bias and ReLU), 2x2 stride-2 transposed convolution and 2x2 max pooling.
//! Tensors are NCHW; weights follow candle's layouts (`(out, in, 3, 3)` and
//! `(in, out, 2, 2)`).

use std::ops::{Add, AddAssign, Mul};

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};

pub trait Elem:
    Copy + Default + PartialOrd + Add<Output = Self> + Mul<Output = Self> + AddAssign + 'static
{
}
impl Elem for f32 {}
impl Elem for f64 {}

fn data<'a, T>(v: &'a [T], l: &Layout, op: &str) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("{op}: expected a contiguous tensor"),
    }
}

fn dims4(l: &Layout, op: &str) -> Result<[usize; 4]> {
    match *l.dims() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref d => bail!("{op}: expected a 4-d tensor, got {d:?}"),
    }
}

macro_rules! dispatch {
    ($op:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:ident) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (v, s) = $f::<f32>(data(a, $l1, $op)?, $l1, data(b, $l2, $op)?, $l2)?;
                Ok((CpuStorage::F32(v), s))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (v, s) = $f::<f64>(data(a, $l1, $op)?, $l1, data(b, $l2, $op)?, $l2)?;
                Ok((CpuStorage::F64(v), s))
            }
            _ => bail!("{}: operands must both be f32 or both f64", $op),
        }
    };
}

// Index range of `t` with `0 <= t + d < len`.
fn valid(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// `dst[y][x] += k * src[y + dy][x + dx]` wherever the source is in range.
fn shifted_axpy<T: Elem>(dst: &mut [T], src: &[T], h: usize, w: usize, dy: isize, dx: isize, k: T) {
    let (y0, y1) = valid(h, dy);
    let (x0, x1) = valid(w, dx);
    let n = x1 - x0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        let d = &mut dst[y * w + x0..][..n];
        let s = &src[sy * w + sx..][..n];
        for (a, &b) in d.iter_mut().zip(s) {
            *a += k * b;
        }
    }
}

fn dot<T: Elem>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::default(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::default();
    for v in acc {
        s += v;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `sum over y, x of a[y][x] * b[y + dy][x + dx]`.
fn shifted_dot<T: Elem>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let (y0, y1) = valid(h, dy);
    let (x0, x1) = valid(w, dx);
    let n = x1 - x0;
    let mut s = T::default();
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        s += dot(&a[y * w + x0..][..n], &b[sy * w + sx..][..n]);
    }
    s
}

fn widx(o: usize, i: usize, cin: usize, ky: usize, kx: usize) -> usize {
    ((o * cin + i) * 3 + ky) * 3 + kx
}

fn conv_fwd<T: Elem>(x: &[T], lx: &Layout, wt: &[T], lw: &Layout) -> Result<(Vec<T>, Shape)> {
    let [n, cin, h, w] = dims4(lx, "conv3x3")?;
    let [cout, wcin, kh, kw] = dims4(lw, "conv3x3")?;
    if (wcin, kh, kw) != (cin, 3, 3) {
        bail!("conv3x3: weight {:?} does not fit input {:?}", lw.dims(), lx.dims());
    }
    let plane = h * w;
    let mut out = vec![T::default(); n * cout * plane];
    for b in 0..n {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * plane..][..plane];
            for i in 0..cin {
                let src = &x[(b * cin + i) * plane..][..plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = wt[widx(o, i, cin, ky, kx)];
                        shifted_axpy(dst, src, h, w, ky as isize - 1, kx as isize - 1, k);
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((n, cout, h, w))))
}

// (grad_out, weight) -> grad_in
fn conv_grad_in<T: Elem>(g: &[T], lg: &Layout, wt: &[T], lw: &Layout) -> Result<(Vec<T>, Shape)> {
    let [n, cout, h, w] = dims4(lg, "conv3x3 grad")?;
    let [_, cin, _, _] = dims4(lw, "conv3x3 grad")?;
    let plane = h * w;
    let mut out = vec![T::default(); n * cin * plane];
    for b in 0..n {
        for i in 0..cin {
            let dst = &mut out[(b * cin + i) * plane..][..plane];
            for o in 0..cout {
                let src = &g[(b * cout + o) * plane..][..plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = wt[widx(o, i, cin, ky, kx)];
                        shifted_axpy(dst, src, h, w, 1 - ky as isize, 1 - kx as isize, k);
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((n, cin, h, w))))
}

// (input, grad_out) -> grad_weight
fn conv_grad_w<T: Elem>(x: &[T], lx: &Layout, g: &[T], lg: &Layout) -> Result<(Vec<T>, Shape)> {
    let [n, cin, h, w] = dims4(lx, "conv3x3 grad")?;
    let [_, cout, _, _] = dims4(lg, "conv3x3 grad")?;
    let plane = h * w;
    let mut out = vec![T::default(); cout * cin * 9];
    for b in 0..n {
        for o in 0..cout {
            let go = &g[(b * cout + o) * plane..][..plane];
            for i in 0..cin {
                let xi = &x[(b * cin + i) * plane..][..plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        out[widx(o, i, cin, ky, kx)] +=
                            shifted_dot(go, xi, h, w, ky as isize - 1, kx as isize - 1);
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((cout, cin, 3, 3))))
}

fn uidx(i: usize, o: usize, cout: usize, a: usize, c: usize) -> usize {
    ((i * cout + o) * 2 + a) * 2 + c
}

fn up_fwd<T: Elem>(x: &[T], lx: &Layout, wt: &[T], lw: &Layout) -> Result<(Vec<T>, Shape)> {
    let [n, cin, h, w] = dims4(lx, "upconv2x2")?;
    let [wcin, cout, kh, kw] = dims4(lw, "upconv2x2")?;
    if (wcin, kh, kw) != (cin, 2, 2) {
        bail!("upconv2x2: weight {:?} does not fit input {:?}", lw.dims(), lx.dims());
    }
    let (plane, w2) = (h * w, 2 * w);
    let mut out = vec![T::default(); n * cout * 4 * plane];
    for b in 0..n {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * 4 * plane..][..4 * plane];
            for i in 0..cin {
                let src = &x[(b * cin + i) * plane..][..plane];
                for a in 0..2 {
                    let (k0, k1) = (wt[uidx(i, o, cout, a, 0)], wt[uidx(i, o, cout, a, 1)]);
                    for y in 0..h {
                        let row = &mut dst[(2 * y + a) * w2..][..w2];
                        for (pair, &s) in row.chunks_exact_mut(2).zip(&src[y * w..][..w]) {
                            pair[0] += k0 * s;
                            pair[1] += k1 * s;
                        }
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((n, cout, 2 * h, 2 * w))))
}

// (grad_out, weight) -> grad_in
fn up_grad_in<T: Elem>(g: &[T], lg: &Layout, wt: &[T], lw: &Layout) -> Result<(Vec<T>, Shape)> {
    let [n, cout, h2, w2] = dims4(lg, "upconv2x2 grad")?;
    let [cin, _, _, _] = dims4(lw, "upconv2x2 grad")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let plane = h * w;
    let mut out = vec![T::default(); n * cin * plane];
    for b in 0..n {
        for i in 0..cin {
            let dst = &mut out[(b * cin + i) * plane..][..plane];
            for o in 0..cout {
                let src = &g[(b * cout + o) * 4 * plane..][..4 * plane];
                for a in 0..2 {
                    let (k0, k1) = (wt[uidx(i, o, cout, a, 0)], wt[uidx(i, o, cout, a, 1)]);
                    for y in 0..h {
                        let row = &src[(2 * y + a) * w2..][..w2];
                        for (d, pair) in dst[y * w..][..w].iter_mut().zip(row.chunks_exact(2)) {
                            *d += k0 * pair[0] + k1 * pair[1];
                        }
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((n, cin, h, w))))
}

// (input, grad_out) -> grad_weight
fn up_grad_w<T: Elem>(x: &[T], lx: &Layout, g: &[T], lg: &Layout) -> Result<(Vec<T>, Shape)> {
    let [n, cin, h, w] = dims4(lx, "upconv2x2 grad")?;
    let [_, cout, _, _] = dims4(lg, "upconv2x2 grad")?;
    let (plane, w2) = (h * w, 2 * w);
    let mut out = vec![T::default(); cin * cout * 4];
    let mut acc = vec![[T::default(); 2]; w];
    for b in 0..n {
        for i in 0..cin {
            let src = &x[(b * cin + i) * plane..][..plane];
            for o in 0..cout {
                let go = &g[(b * cout + o) * 4 * plane..][..4 * plane];
                for a in 0..2 {
                    acc.iter_mut().for_each(|v| *v = [T::default(); 2]);
                    for y in 0..h {
                        let row = &go[(2 * y + a) * w2..][..w2];
                        for ((v, pair), &s) in acc.iter_mut().zip(row.chunks_exact(2)).zip(&src[y * w..][..w]) {
                            v[0] += s * pair[0];
                            v[1] += s * pair[1];
                        }
                    }
                    for v in &acc {
                        out[uidx(i, o, cout, a, 0)] += v[0];
                        out[uidx(i, o, cout, a, 1)] += v[1];
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((cin, cout, 2, 2))))
}

macro_rules! op {
    ($name:ident, $label:literal, $f:ident) => {
        struct $name;

        impl CustomOp2 for $name {
            fn name(&self) -> &'static str {
                $label
            }

            fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
                dispatch!($label, s1, l1, s2, l2, $f)
            }
        }
    };
}

op!(ConvGradIn, "conv3x3-grad-in", conv_grad_in);
op!(ConvGradW, "conv3x3-grad-w", conv_grad_w);
op!(UpGradIn, "upconv2x2-grad-in", up_grad_in);
op!(UpGradW, "upconv2x2-grad-w", up_grad_w);

struct Conv3x3;

impl CustomOp2 for Conv3x3 {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        dispatch!("conv3x3", s1, l1, s2, l2, conv_fwd)
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _: &Tensor, g: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        Ok((
            Some(g.apply_op2_no_bwd(w, &ConvGradIn)?),
            Some(x.apply_op2_no_bwd(&g, &ConvGradW)?),
        ))
    }
}

struct UpConv2x2;

impl CustomOp2 for UpConv2x2 {
    fn name(&self) -> &'static str {
        "upconv2x2"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        dispatch!("upconv2x2", s1, l1, s2, l2, up_fwd)
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _: &Tensor, g: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        Ok((
            Some(g.apply_op2_no_bwd(w, &UpGradIn)?),
            Some(x.apply_op2_no_bwd(&g, &UpGradW)?),
        ))
    }
}

fn conv_bias_relu<T: Elem>(
    x: &[T],
    lx: &Layout,
    wt: &[T],
    lw: &Layout,
    bias: &[T],
) -> Result<(Vec<T>, Shape)> {
    let (mut out, shape) = conv_fwd(x, lx, wt, lw)?;
    let (_, cout, h, w) = shape.dims4()?;
    if bias.len() != cout {
        bail!("conv3x3: {} biases for {cout} channels", bias.len());
    }
    for (k, plane) in out.chunks_exact_mut(h * w).enumerate() {
        let b = bias[k % cout];
        for v in plane {
            let y = *v + b;
            *v = if y > T::default() { y } else { T::default() };
        }
    }
    Ok((out, shape))
}

// (relu output, grad) -> grad where the output is positive
fn relu_mask<T: Elem>(y: &[T], _: &Layout, g: &[T], lg: &Layout) -> Result<(Vec<T>, Shape)> {
    let out = y
        .iter()
        .zip(g)
        .map(|(&y, &g)| if y > T::default() { g } else { T::default() })
        .collect();
    Ok((out, lg.shape().clone()))
}

fn channel_sum<T: Elem>(g: &[T], lg: &Layout) -> Result<(Vec<T>, Shape)> {
    let [n, c, h, w] = dims4(lg, "channel sum")?;
    let mut out = vec![T::default(); c];
    for (k, plane) in g.chunks_exact(h * w).enumerate() {
        let mut acc = [T::default(); 8];
        let chunks = plane.chunks_exact(8);
        let rest = chunks.remainder();
        for ch in chunks {
            for l in 0..8 {
                acc[l] += ch[l];
            }
        }
        for v in acc.into_iter().chain(rest.iter().copied()) {
            out[k % c] += v;
        }
    }
    debug_assert_eq!(g.len(), n * c * h * w);
    Ok((out, Shape::from(c)))
}

fn pool_fwd<T: Elem>(x: &[T], lx: &Layout) -> Result<(Vec<T>, Shape)> {
    let [n, c, h, w] = dims4(lx, "max_pool2")?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.chunks_exact(h * w) {
        for y in 0..ho {
            let (r0, r1) = (&plane[2 * y * w..][..w], &plane[(2 * y + 1) * w..][..w]);
            for j in 0..wo {
                let mut m = r0[2 * j];
                for v in [r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]] {
                    if v > m {
                        m = v;
                    }
                }
                out.push(m);
            }
        }
    }
    Ok((out, Shape::from((n, c, ho, wo))))
}

// (input, grad_out) -> grad_in, routed to the first maximum of each window
fn pool_grad<T: Elem>(x: &[T], lx: &Layout, g: &[T], _: &Layout) -> Result<(Vec<T>, Shape)> {
    let [_, _, h, w] = dims4(lx, "max_pool2 grad")?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::default(); x.len()];
    for (k, plane) in x.chunks_exact(h * w).enumerate() {
        let gp = &g[k * ho * wo..][..ho * wo];
        let dst = &mut out[k * h * w..][..h * w];
        for y in 0..ho {
            for j in 0..wo {
                let cells = [2 * y * w + 2 * j, 2 * y * w + 2 * j + 1, (2 * y + 1) * w + 2 * j, (2 * y + 1) * w + 2 * j + 1];
                let mut best = cells[0];
                for &c in &cells[1..] {
                    if plane[c] > plane[best] {
                        best = c;
                    }
                }
                dst[best] += gp[y * wo + j];
            }
        }
    }
    Ok((out, lx.shape().clone()))
}

op!(ReluMask, "relu-mask", relu_mask);
op!(PoolGrad, "max_pool2-grad", pool_grad);

struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(v) => channel_sum(data(v, l, "channel-sum")?, l).map(|(v, s)| (CpuStorage::F32(v), s)),
            CpuStorage::F64(v) => channel_sum(data(v, l, "channel-sum")?, l).map(|(v, s)| (CpuStorage::F64(v), s)),
            _ => bail!("channel-sum: expected f32 or f64"),
        }
    }
}

struct MaxPool2;

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "max_pool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(v) => pool_fwd(data(v, l, "max_pool2")?, l).map(|(v, s)| (CpuStorage::F32(v), s)),
            CpuStorage::F64(v) => pool_fwd(data(v, l, "max_pool2")?, l).map(|(v, s)| (CpuStorage::F64(v), s)),
            _ => bail!("max_pool2: expected f32 or f64"),
        }
    }

    fn bwd(&self, x: &Tensor, _: &Tensor, g: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&g.contiguous()?, &PoolGrad)?))
    }
}

struct ConvBiasRelu;

impl CustomOp3 for ConvBiasRelu {
    fn name(&self) -> &'static str {
        "conv3x3-bias-relu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let op = "conv3x3-bias-relu";
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                let (v, s) = conv_bias_relu(data(x, l1, op)?, l1, data(w, l2, op)?, l2, data(b, l3, op)?)?;
                Ok((CpuStorage::F32(v), s))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                let (v, s) = conv_bias_relu(data(x, l1, op)?, l1, data(w, l2, op)?, l2, data(b, l3, op)?)?;
                Ok((CpuStorage::F64(v), s))
            }
            _ => bail!("{op}: operands must all be f32 or all f64"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _: &Tensor,
        y: &Tensor,
        g: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let gm = y.apply_op2_no_bwd(&g.contiguous()?, &ReluMask)?;
        Ok((
            Some(gm.apply_op2_no_bwd(w, &ConvGradIn)?),
            Some(x.apply_op2_no_bwd(&gm, &ConvGradW)?),
            Some(gm.apply_op1_no_bwd(&ChannelSum)?),
        ))
    }
}

/// `relu(conv3x3(x, w) + b)` with `b` of shape `(out,)`.
pub fn conv3x3_bias_relu(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op3(&w.contiguous()?, &b.contiguous()?, ConvBiasRelu)
}

/// 2x2 max pooling with stride 2. Same result as `x.max_pool2d(2)`.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2)
}

/// 3x3 convolution, stride 1, zero padding 1. Same result as
/// `x.conv2d(w, 1, 1, 1, 1)`.
pub fn conv3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv3x3)
}

/// 2x2 transposed convolution with stride 2. Same result as
/// `x.conv_transpose2d(w, 0, 0, 2, 1)`.
pub fn upconv2x2(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, UpConv2x2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize]) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.dims(), b.dims());
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    // Forward values and gradients against candle's own convolutions.
    fn check(fast: impl Fn(&Tensor, &Tensor) -> Result<Tensor>, slow: &dyn Fn(&Tensor, &Tensor) -> Tensor, xs: &[usize], ws: &[usize]) {
        let x = Var::from_tensor(&rand(xs)).unwrap();
        let w = Var::from_tensor(&rand(ws)).unwrap();
        let y1 = fast(x.as_tensor(), w.as_tensor()).unwrap();
        let y2 = slow(x.as_tensor(), w.as_tensor());
        assert!(max_diff(&y1, &y2) < 1e-10);
        // A non-uniform downstream weighting exercises every output position.
        let r = rand(y1.dims());
        let g1 = (&y1 * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (&y2 * &r).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            let (a, b) = (g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap());
            assert!(max_diff(a, b) < 1e-9, "gradient mismatch: {}", max_diff(a, b));
        }
    }

    #[test]
    fn conv3x3_matches_candle() {
        let slow = |x: &Tensor, w: &Tensor| x.conv2d(w, 1, 1, 1, 1).unwrap();
        check(conv3x3, &slow, &[2, 3, 7, 9], &[4, 3, 3, 3]);
        check(conv3x3, &slow, &[1, 1, 1, 1], &[2, 1, 3, 3]);
        check(conv3x3, &slow, &[3, 2, 16, 5], &[1, 2, 3, 3]);
    }

    #[test]
    fn upconv2x2_matches_candle() {
        let slow = |x: &Tensor, w: &Tensor| x.conv_transpose2d(w, 0, 0, 2, 1).unwrap();
        check(upconv2x2, &slow, &[2, 3, 5, 4], &[3, 2, 2, 2]);
        check(upconv2x2, &slow, &[1, 4, 1, 1], &[4, 5, 2, 2]);
    }

    #[test]
    fn fused_conv_matches_composition() {
        let slow = |x: &Tensor, w: &Tensor| {
            let b = Tensor::new(&[0.3f64, -0.2, 0.0, 1.5], &Device::Cpu).unwrap();
            x.conv2d(w, 1, 1, 1, 1).unwrap().broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap()).unwrap().relu().unwrap()
        };
        let fast = |x: &Tensor, w: &Tensor| {
            let b = Tensor::new(&[0.3f64, -0.2, 0.0, 1.5], &Device::Cpu).unwrap();
            conv3x3_bias_relu(x, w, &b)
        };
        check(fast, &slow, &[2, 3, 6, 5], &[4, 3, 3, 3]);
    }

    #[test]
    fn fused_conv_bias_gradient() {
        let x = rand(&[2, 2, 5, 4]);
        let w = rand(&[3, 2, 3, 3]);
        let b = Var::from_tensor(&rand(&[3])).unwrap();
        let r = rand(&[2, 3, 5, 4]);
        let fast = conv3x3_bias_relu(&x, &w, b.as_tensor()).unwrap();
        let slow = x
            .conv2d(&w, 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 3, 1, 1)).unwrap())
            .unwrap()
            .relu()
            .unwrap();
        let g1 = (&fast * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (&slow * &r).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(b.as_tensor()).unwrap(), g2.get(b.as_tensor()).unwrap()) < 1e-10);
    }

    #[test]
    fn max_pool_forward_and_gradient() {
        let x = Var::from_tensor(&rand(&[2, 3, 6, 8])).unwrap();
        let a = max_pool2(x.as_tensor()).unwrap();
        assert_eq!(max_diff(&a, &x.as_tensor().max_pool2d(2).unwrap()), 0.0);
        // Each output's upstream gradient lands on its window's maximum.
        let r = rand(a.dims());
        let g = (&a * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let got = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xs = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let rs = r.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut want = vec![0.0; xs.len()];
        for plane in 0..6 {
            for y in 0..3 {
                for j in 0..4 {
                    let cells = [(2 * y, 2 * j), (2 * y, 2 * j + 1), (2 * y + 1, 2 * j), (2 * y + 1, 2 * j + 1)]
                        .map(|(yy, xx)| plane * 48 + yy * 8 + xx);
                    let best = cells.into_iter().max_by(|&p, &q| xs[p].total_cmp(&xs[q])).unwrap();
                    want[best] += rs[plane * 12 + y * 4 + j];
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn f32_and_shape_errors() {
        let x = rand(&[1, 2, 4, 4]).to_dtype(DType::F32).unwrap();
        let w = rand(&[3, 2, 3, 3]).to_dtype(DType::F32).unwrap();
        assert_eq!(conv3x3(&x, &w).unwrap().dims(), &[1, 3, 4, 4]);
        assert!(conv3x3(&x, &rand(&[3, 2, 3, 3])).is_err());
        assert!(conv3x3(&x, &w.narrow(1, 0, 1).unwrap()).is_err());
        assert!(upconv2x2(&x, &w).is_err());
    }
}
