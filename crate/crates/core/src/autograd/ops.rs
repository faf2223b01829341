//! Forward kernels and their adjoints, free of any tape bookkeeping so each
//! can be checked against a plain loop nest.

use serde::{Deserialize, Serialize};

use super::{mismatch, AutogradError, Real, Tensor};

fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Gather map of one sample: row `(ci, ky, kx)`, column `(oy, ox)` holds the
/// flat input index `(ci, iy, ix)` read by that tap, or `None` in the padding.
#[allow(clippy::too_many_arguments)]
fn conv_taps(c: usize, h: usize, wd: usize, kh: usize, kw: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<Option<usize>> {
    let mut taps = Vec::with_capacity(c * kh * kw * oh * ow);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..oh {
                    let iy = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h);
                    for ox in 0..ow {
                        let ix = (ox * stride + kx).checked_sub(pad).filter(|&v| v < wd);
                        taps.push(iy.zip(ix).map(|(iy, ix)| (ci * h + iy) * wd + ix));
                    }
                }
            }
        }
    }
    taps
}

/// Cross-correlation. `w` is `[out_c, in_c, kh, kw]`, `b` is `[1, out_c, 1, 1]`.
/// Each output sums the bias, then taps in `(ci, ky, kx)` order.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor, AutogradError> {
    let [n, c, h, wd] = x.shape;
    let [oc, ic, kh, kw] = w.shape;
    if ic != c {
        return Err(mismatch("conv2d", format!("input has {c} channels, weight expects {ic}")));
    }
    if let Some(b) = b {
        if b.shape != [1, oc, 1, 1] {
            return Err(mismatch("conv2d", format!("bias shape {:?} for {oc} outputs", b.shape)));
        }
    }
    let (Some(oh), Some(ow)) = (out_len(h, kh, stride, pad), out_len(wd, kw, stride, pad)) else {
        return Err(mismatch("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}")));
    };
    let (k, p) = (c * kh * kw, oh * ow);
    let taps = conv_taps(c, h, wd, kh, kw, stride, pad, oh, ow);
    let mut col = vec![0.0; k * p];
    let mut y = vec![0.0; n * oc * p];
    for ni in 0..n {
        let xs = &x.data[ni * c * h * wd..][..c * h * wd];
        for (v, t) in col.iter_mut().zip(&taps) {
            *v = t.map_or(0.0, |i| xs[i]);
        }
        for o in 0..oc {
            let out = &mut y[(ni * oc + o) * p..][..p];
            if let Some(b) = b {
                out.fill(b.data[o]);
            }
            for (wv, crow) in w.data[o * k..][..k].iter().zip(col.chunks_exact(p)) {
                for (yv, xv) in out.iter_mut().zip(crow) {
                    *yv += wv * xv;
                }
            }
        }
    }
    Tensor::new([n, oc, oh, ow], y)
}

/// Adjoint of [`conv2d`]: `(dx, dw, db)`. `dx` is skipped when not needed.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, c, h, wd] = x.shape;
    let [oc, _, kh, kw] = w.shape;
    let [_, _, oh, ow] = dy.shape;
    let (k, p, chw) = (c * kh * kw, oh * ow, c * h * wd);
    let taps = conv_taps(c, h, wd, kh, kw, stride, pad, oh, ow);
    let mut col = vec![0.0; k * p];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; oc];
    for ni in 0..n {
        let xs = &x.data[ni * chw..][..chw];
        for (v, t) in col.iter_mut().zip(&taps) {
            *v = t.map_or(0.0, |i| xs[i]);
        }
        for o in 0..oc {
            let g = dy.plane(ni, o);
            db[o] += g.iter().sum::<Real>();
            for (j, crow) in col.chunks_exact(p).enumerate() {
                let acc: Real = g.iter().zip(crow).fold(0.0, |a, (gv, xv)| a + gv * xv);
                dw[o * k + j] += acc;
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[ni * chw..][..chw];
                for (wv, trow) in w.data[o * k..][..k].iter().zip(taps.chunks_exact(p)) {
                    for (gv, t) in g.iter().zip(trow) {
                        if let Some(i) = t {
                            dxs[*i] += gv * wv;
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor { shape: x.shape, data: d }),
        Tensor { shape: w.shape, data: dw },
        Tensor { shape: [1, oc, 1, 1], data: db },
    )
}

/// Transposed convolution without padding. `w` is `[in_c, out_c, k, k]`;
/// output size is `(H - 1) * stride + k`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor, AutogradError> {
    let [n, c, h, wd] = x.shape;
    let [ic, oc, kh, kw] = w.shape;
    if ic != c {
        return Err(mismatch("conv_transpose2d", format!("input has {c} channels, weight expects {ic}")));
    }
    if stride == 0 || h == 0 || wd == 0 {
        return Err(mismatch("conv_transpose2d", "empty input or zero stride"));
    }
    if let Some(b) = b {
        if b.shape != [1, oc, 1, 1] {
            return Err(mismatch("conv_transpose2d", format!("bias shape {:?} for {oc} outputs", b.shape)));
        }
    }
    let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let mut y = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            let out = &mut y[(ni * oc + o) * oh * ow..][..oh * ow];
            if let Some(b) = b {
                out.fill(b.data[o]);
            }
            for ci in 0..c {
                let xin = x.plane(ni, ci);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[((ci * oc + o) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let orow = &mut out[(iy * stride + ky) * ow + kx..];
                            let row = &xin[iy * wd..][..wd];
                            for (ix, xv) in row.iter().enumerate() {
                                orow[ix * stride] += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, oc, oh, ow], y)
}

/// Adjoint of [`conv_transpose2d`]: `(dx, dw, db)`.
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, c, h, wd] = x.shape;
    let [_, oc, kh, kw] = w.shape;
    let [_, _, _, ow] = dy.shape;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; oc];
    for ni in 0..n {
        for o in 0..oc {
            let g = dy.plane(ni, o);
            db[o] += g.iter().sum::<Real>();
            for ci in 0..c {
                let xin = x.plane(ni, ci);
                let base = (ni * c + ci) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wi = ((ci * oc + o) * kh + ky) * kw + kx;
                        let wv = w.data[wi];
                        let mut acc = 0.0;
                        for iy in 0..h {
                            let grow = &g[(iy * stride + ky) * ow + kx..];
                            for ix in 0..wd {
                                let gv = grow[ix * stride];
                                acc += gv * xin[iy * wd + ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx[base + iy * wd + ix] += gv * wv;
                                }
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor { shape: x.shape, data: d }),
        Tensor { shape: w.shape, data: dw },
        Tensor { shape: [1, oc, 1, 1], data: db },
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape, data: x.data.iter().map(|v| v.max(0.0)).collect() }
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x.data.iter().zip(&dy.data).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect();
    Tensor { shape: x.shape, data }
}

/// Argmax positions of a 2x2 / stride 2 max pool: for each output element the
/// flat index (`y * W + x`) of the winner inside its input plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub indices: Vec<usize>,
}

/// 2x2 max pool, stride 2. Odd trailing rows/columns are dropped. Among
/// equal candidates the lowest flat index wins.
pub fn max_pool2d(x: &Tensor) -> Result<(Tensor, PoolIndices), AutogradError> {
    let [n, c, h, w] = x.shape;
    if h < 2 || w < 2 {
        return Err(mismatch("max_pool2d", format!("{h}x{w} is smaller than the 2x2 window")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for ni in 0..n {
        for ci in 0..c {
            let p = x.plane(ni, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = 2 * oy * w + 2 * ox;
                    for cand in [2 * oy * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                        if p[cand] > p[best] {
                            best = cand;
                        }
                    }
                    y.push(p[best]);
                    idx.push(best);
                }
            }
        }
    }
    Ok((Tensor { shape: [n, c, oh, ow], data: y }, PoolIndices { input_shape: x.shape, indices: idx }))
}

pub fn max_pool2d_backward(idx: &PoolIndices, dy: &Tensor) -> Tensor {
    let [n, c, h, w] = idx.input_shape;
    let mut dx = vec![0.0; n * c * h * w];
    let per = dy.shape[2] * dy.shape[3];
    for (plane, chunk) in idx.indices.chunks(per.max(1)).enumerate() {
        for (k, &i) in chunk.iter().enumerate() {
            dx[plane * h * w + i] += dy.data[plane * per + k];
        }
    }
    Tensor { shape: idx.input_shape, data: dx }
}

/// Scatters every value of `x` to its saved argmax position in a zero tensor
/// of `out_shape`.
pub fn max_unpool2d(x: &Tensor, idx: &PoolIndices, out_shape: [usize; 4]) -> Result<Tensor, AutogradError> {
    if idx.indices.len() != x.len() {
        return Err(mismatch("max_unpool2d", format!("{} indices for {} values", idx.indices.len(), x.len())));
    }
    if out_shape[0] != x.shape[0] || out_shape[1] != x.shape[1] {
        return Err(mismatch("max_unpool2d", format!("output {out_shape:?} for input {:?}", x.shape)));
    }
    let plane = out_shape[2] * out_shape[3];
    if let Some(&bad) = idx.indices.iter().find(|&&i| i >= plane) {
        return Err(AutogradError::BadIndices { index: bad, plane });
    }
    let per = x.shape[2] * x.shape[3];
    let mut y = vec![0.0; out_shape.iter().product()];
    for (k, (&i, v)) in idx.indices.iter().zip(&x.data).enumerate() {
        y[(k / per) * plane + i] += v;
    }
    Ok(Tensor { shape: out_shape, data: y })
}

pub fn max_unpool2d_backward(x_shape: [usize; 4], idx: &PoolIndices, dy: &Tensor) -> Tensor {
    let per = x_shape[2] * x_shape[3];
    let plane = dy.shape[2] * dy.shape[3];
    let data = idx.indices.iter().enumerate().map(|(k, &i)| dy.data[(k / per) * plane + i]).collect();
    Tensor { shape: x_shape, data }
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor, AutogradError> {
    if x.shape != y.shape {
        return Err(mismatch("add", format!("{:?} + {:?}", x.shape, y.shape)));
    }
    Ok(Tensor { shape: x.shape, data: x.data.iter().zip(&y.data).map(|(a, b)| a + b).collect() })
}

pub fn concat_channels(x: &Tensor, y: &Tensor) -> Result<Tensor, AutogradError> {
    let [n, cx, h, w] = x.shape;
    let [ny, cy, hy, wy] = y.shape;
    if (n, h, w) != (ny, hy, wy) {
        return Err(mismatch("concat_channels", format!("{:?} with {:?}", x.shape, y.shape)));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(x.len() + y.len());
    for ni in 0..n {
        data.extend_from_slice(&x.data[ni * cx * hw..(ni + 1) * cx * hw]);
        data.extend_from_slice(&y.data[ni * cy * hw..(ni + 1) * cy * hw]);
    }
    Ok(Tensor { shape: [n, cx + cy, h, w], data })
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(dy: &Tensor, cx: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = dy.shape;
    let hw = h * w;
    let (mut a, mut b) = (Vec::with_capacity(n * cx * hw), Vec::with_capacity(n * (c - cx) * hw));
    for ni in 0..n {
        let s = &dy.data[ni * c * hw..(ni + 1) * c * hw];
        a.extend_from_slice(&s[..cx * hw]);
        b.extend_from_slice(&s[cx * hw..]);
    }
    (Tensor { shape: [n, cx, h, w], data: a }, Tensor { shape: [n, c - cx, h, w], data: b })
}

/// Forward difference along x; the last column is 0.
pub fn grad_x(x: &Tensor) -> Tensor {
    let w = x.shape[3];
    let mut out = vec![0.0; x.len()];
    for (o, row) in out.chunks_mut(w).zip(x.data.chunks(w)) {
        for c in 0..w - 1 {
            o[c] = row[c + 1] - row[c];
        }
    }
    Tensor { shape: x.shape, data: out }
}

pub fn grad_x_backward(dy: &Tensor) -> Tensor {
    let w = dy.shape[3];
    let mut out = vec![0.0; dy.len()];
    for (o, g) in out.chunks_mut(w).zip(dy.data.chunks(w)) {
        for c in 0..w - 1 {
            o[c + 1] += g[c];
            o[c] -= g[c];
        }
    }
    Tensor { shape: dy.shape, data: out }
}

/// Forward difference along y; the last row is 0.
pub fn grad_y(x: &Tensor) -> Tensor {
    let [_, _, h, w] = x.shape;
    let mut out = vec![0.0; x.len()];
    for (o, p) in out.chunks_mut(h * w).zip(x.data.chunks(h * w)) {
        for i in 0..(h - 1) * w {
            o[i] = p[i + w] - p[i];
        }
    }
    Tensor { shape: x.shape, data: out }
}

pub fn grad_y_backward(dy: &Tensor) -> Tensor {
    let [_, _, h, w] = dy.shape;
    let mut out = vec![0.0; dy.len()];
    for (o, g) in out.chunks_mut(h * w).zip(dy.data.chunks(h * w)) {
        for i in 0..(h - 1) * w {
            o[i + w] += g[i];
            o[i] -= g[i];
        }
    }
    Tensor { shape: dy.shape, data: out }
}

/// Mean over every element of `d_xx^2 + d_yy^2` (central second differences,
/// border pixels contribute 0 but are counted).
pub fn laplacian_energy_mean(x: &Tensor) -> Real {
    let [_, _, h, w] = x.shape;
    let mut sum = 0.0;
    if h >= 3 && w >= 3 {
        for p in x.data.chunks(h * w) {
            for r in 1..h - 1 {
                for c in 1..w - 1 {
                    let i = r * w + c;
                    let dxx = p[i + 1] - 2.0 * p[i] + p[i - 1];
                    let dyy = p[i + w] - 2.0 * p[i] + p[i - w];
                    sum += dxx * dxx + dyy * dyy;
                }
            }
        }
    }
    sum / x.len() as Real
}

pub fn laplacian_energy_mean_backward(x: &Tensor, g: Real) -> Tensor {
    let [_, _, h, w] = x.shape;
    let mut out = vec![0.0; x.len()];
    let s = 2.0 * g / x.len() as Real;
    if h >= 3 && w >= 3 {
        for (o, p) in out.chunks_mut(h * w).zip(x.data.chunks(h * w)) {
            for r in 1..h - 1 {
                for c in 1..w - 1 {
                    let i = r * w + c;
                    let dxx = s * (p[i + 1] - 2.0 * p[i] + p[i - 1]);
                    let dyy = s * (p[i + w] - 2.0 * p[i] + p[i - w]);
                    o[i + 1] += dxx;
                    o[i - 1] += dxx;
                    o[i] -= 2.0 * (dxx + dyy);
                    o[i + w] += dyy;
                    o[i - w] += dyy;
                }
            }
        }
    }
    Tensor { shape: x.shape, data: out }
}

/// Per-pixel penalty on `e = prediction - target`, averaged over valid pixels.
///
/// `AdaptiveHuber` uses `delta = median |e|` (lower median) and falls back to
/// `max |e|` when the median is 0. `RHuber` is berHu with `c = 0.2 max |e|`.
/// Both thresholds depend on the errors and are differentiated through: the
/// threshold's adjoint flows to the error that defines it. At kinks the
/// subgradient of `|e|` is `sign(e)` with `sign(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    L1,
    L2,
    Huber(Real),
    AdaptiveHuber,
    #[serde(rename = "rhuber")]
    RHuber,
}

/// Value, adjoint and a hash of the branch taken at every kink.
#[derive(Debug, Clone)]
pub struct DistanceEval {
    pub value: Real,
    pub grad: Vec<Real>,
    pub branches: u64,
}

fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn huber(e: Real, delta: Real) -> (Real, Real, bool) {
    if e.abs() <= delta {
        (0.5 * e * e, e, true)
    } else {
        (delta * (e.abs() - 0.5 * delta), delta * sign(e), false)
    }
}

fn berhu(e: Real, c: Real) -> (Real, Real, bool) {
    if e.abs() <= c {
        (e.abs(), sign(e), true)
    } else {
        ((e * e + c * c) / (2.0 * c), e / c, false)
    }
}

pub(crate) fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5)
}

/// Masked distance with its adjoint with respect to `pred`.
pub fn distance(kind: DistanceKind, pred: &[Real], target: &[Real], mask: &[bool]) -> Result<DistanceEval, AutogradError> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(mismatch("distance", format!("pred {}, target {}, mask {}", pred.len(), target.len(), mask.len())));
    }
    let valid: Vec<usize> = (0..pred.len()).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return Err(AutogradError::NoValidPixels);
    }
    let n = valid.len() as Real;
    let e: Vec<Real> = valid.iter().map(|&i| pred[i] - target[i]).collect();
    let mut grad = vec![0.0; pred.len()];
    let mut branches = 0xcbf2_9ce4_8422_2325u64;
    let mut total = 0.0;
    match kind {
        DistanceKind::L1 => {
            for (&i, &ei) in valid.iter().zip(&e) {
                total += ei.abs();
                grad[i] = sign(ei) / n;
                branches = mix(branches, (sign(ei) + 1.0) as u64);
            }
        }
        DistanceKind::L2 => {
            for (&i, &ei) in valid.iter().zip(&e) {
                total += ei * ei;
                grad[i] = 2.0 * ei / n;
            }
        }
        DistanceKind::Huber(delta) => {
            if delta.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(mismatch("distance", format!("huber delta {delta} must be positive")));
            }
            for (&i, &ei) in valid.iter().zip(&e) {
                let (v, d, quad) = huber(ei, delta);
                total += v;
                grad[i] = d / n;
                branches = mix(branches, quad as u64);
            }
        }
        DistanceKind::AdaptiveHuber => {
            let mut order: Vec<usize> = (0..e.len()).collect();
            order.sort_by(|&a, &b| e[a].abs().total_cmp(&e[b].abs()).then(a.cmp(&b)));
            let mut pivot = order[(order.len() - 1) / 2];
            if e[pivot] == 0.0 {
                pivot = *order.last().expect("non-empty");
            }
            let delta = e[pivot].abs();
            branches = mix(branches, pivot as u64);
            if delta == 0.0 {
                // every error is zero: value and adjoint vanish
                return Ok(DistanceEval { value: 0.0, grad, branches });
            }
            let mut d_delta = 0.0;
            for (&i, &ei) in valid.iter().zip(&e) {
                let (v, d, quad) = huber(ei, delta);
                total += v;
                grad[i] = d / n;
                if !quad {
                    d_delta += ei.abs() - delta;
                }
                branches = mix(branches, quad as u64);
            }
            grad[valid[pivot]] += d_delta / n * sign(e[pivot]);
        }
        DistanceKind::RHuber => {
            let mut arg = 0;
            for k in 1..e.len() {
                if e[k].abs() > e[arg].abs() {
                    arg = k;
                }
            }
            let c = 0.2 * e[arg].abs();
            branches = mix(branches, arg as u64);
            let mut d_c = 0.0;
            for (&i, &ei) in valid.iter().zip(&e) {
                let (v, d, lin) = berhu(ei, c);
                total += v;
                grad[i] = d / n;
                if !lin {
                    d_c += 0.5 - ei * ei / (2.0 * c * c);
                }
                branches = mix(branches, (lin as u64) << 1 | (ei > 0.0) as u64);
            }
            grad[valid[arg]] += d_c / n * 0.2 * sign(e[arg]);
        }
    }
    Ok(DistanceEval { value: total / n, grad, branches })
}
