use ndarray::{concatenate, s, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Ix3, IxDyn};

use super::{Float, KeyMask, Node, NormMode, Op};

fn rows_cols<T>(a: &ArrayD<T>) -> (usize, usize) {
    let cols = *a.shape().last().expect("rank >= 1");
    (a.len() / cols.max(1), cols)
}

fn view2<T: Float>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let (r, c) = rows_cols(a);
    a.view().into_shape_with_order((r, c)).expect("standard layout")
}

fn from2<T: Float>(a: Array2<T>, shape: &[usize]) -> ArrayD<T> {
    a.into_dyn()
        .into_shape_with_order(IxDyn(shape))
        .expect("element count")
}

pub(super) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(super) fn gelu<T: Float>(x: T) -> T {
    let xf = x.f64();
    T::c(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
}

fn gelu_grad<T: Float>(x: T) -> T {
    let xf = x.f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::c(cdf + xf * pdf)
}

pub(super) fn matmul<T: Float>(a: &ArrayD<T>, w: &ArrayD<T>) -> ArrayD<T> {
    assert_eq!(w.ndim(), 2, "matmul weight must be 2-D");
    assert_eq!(a.shape().last(), Some(&w.shape()[0]), "matmul inner dims");
    let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let out = view2(a).dot(&w2);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = w.shape()[1];
    from2(out, &shape)
}

pub(super) fn layer_norm<T: Float>(
    x: &ArrayD<T>,
    gain: &ArrayD<T>,
    bias: &ArrayD<T>,
    eps: T,
) -> (ArrayD<T>, ArrayD<T>, Vec<T>) {
    let (rows, cols) = rows_cols(x);
    assert_eq!(gain.len(), cols, "layer norm gain width");
    assert_eq!(bias.len(), cols, "layer norm bias width");
    let g = gain.as_slice().unwrap();
    let b = bias.as_slice().unwrap();
    let n = T::c(cols as f64);
    let mut xhat = x.as_standard_layout().into_owned();
    let mut out = xhat.clone();
    let mut inv_std = Vec::with_capacity(rows);
    for (xr, orow) in xhat
        .as_slice_mut()
        .unwrap()
        .chunks_exact_mut(cols)
        .zip(out.as_slice_mut().unwrap().chunks_exact_mut(cols))
    {
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..cols {
            let h = (xr[j] - mean) * inv;
            xr[j] = h;
            orow[j] = h * g[j] + b[j];
        }
    }
    (out, xhat, inv_std)
}

pub(super) fn attention<T: Float>(
    q: &ArrayD<T>,
    k: &ArrayD<T>,
    v: &ArrayD<T>,
    heads: usize,
    scale: T,
    mask: Option<&KeyMask>,
) -> (ArrayD<T>, ArrayD<T>) {
    let q3 = q.view().into_dimensionality::<Ix3>().unwrap();
    let k3 = k.view().into_dimensionality::<Ix3>().unwrap();
    let v3 = v.view().into_dimensionality::<Ix3>().unwrap();
    let (batch, nq, width) = q3.dim();
    let nk = k3.dim().1;
    assert_eq!(k3.dim(), (batch, nk, width), "key shape");
    assert_eq!(v3.dim(), (batch, nk, width), "value shape");
    if let Some(m) = mask {
        assert_eq!((m.batch, m.len), (batch, nk), "mask shape");
    }
    let hd = width / heads;
    let mut out = ndarray::Array3::<T>::zeros((batch, nq, width));
    let mut probs = ndarray::Array4::<T>::zeros((batch, heads, nq, nk));
    for b in 0..batch {
        let valid = mask.map(|m| m.row(b));
        for h in 0..heads {
            let cs = h * hd..(h + 1) * hd;
            let qh = q3.slice(s![b, .., cs.clone()]);
            let kh = k3.slice(s![b, .., cs.clone()]);
            let vh = v3.slice(s![b, .., cs.clone()]);
            let mut logits = qh.dot(&kh.t());
            for mut row in logits.rows_mut() {
                let mut max = T::neg_infinity();
                for (j, x) in row.iter_mut().enumerate() {
                    if valid.is_some_and(|m| !m[j]) {
                        continue;
                    }
                    *x = *x * scale;
                    if *x > max {
                        max = *x;
                    }
                }
                let mut total = T::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    if valid.is_some_and(|m| !m[j]) {
                        *x = T::zero();
                    } else {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                }
                row.mapv_inplace(|x| x / total);
            }
            out.slice_mut(s![b, .., cs]).assign(&logits.dot(&vh));
            probs.slice_mut(s![b, h, .., ..]).assign(&logits);
        }
    }
    (out.into_dyn(), probs.into_dyn())
}

pub(super) fn slice_tokens<T: Float>(x: &ArrayD<T>, start: usize, len: usize) -> ArrayD<T> {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    x3.slice(s![.., start..start + len, ..]).to_owned().into_dyn()
}

pub(super) fn concat_axis<T: Float>(values: &[std::rc::Rc<ArrayD<T>>], axis: usize) -> ArrayD<T> {
    let views: Vec<ArrayViewD<'_, T>> = values.iter().map(|v| v.view()).collect();
    concatenate(Axis(axis), &views)
        .expect("concatenation shapes")
        .as_standard_layout()
        .into_owned()
}

pub(super) fn embedding<T: Float>(table: &ArrayD<T>, ids: &[usize], shape: &[usize]) -> ArrayD<T> {
    let t = view2(table);
    let width = t.ncols();
    assert_eq!(ids.len(), shape.iter().product::<usize>());
    let mut out = Vec::with_capacity(ids.len() * width);
    for &id in ids {
        out.extend(t.row(id).iter().copied());
    }
    let mut full = shape.to_vec();
    full.push(width);
    ArrayD::from_shape_vec(IxDyn(&full), out).unwrap()
}

/// Source taps for half-pixel bilinear resampling of `n` samples to `2n`:
/// `(i0, i1, w0, w1)` per output coordinate.
pub fn bilinear_plan(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(super) fn upsample2x<T: Float>(x: &ArrayD<T>) -> ArrayD<T> {
    let [b, h, w, c] = x.shape() else {
        panic!("upsample expects NHWC");
    };
    let (b, h, w, c) = (*b, *h, *w, *c);
    let py = bilinear_plan(h);
    let px = bilinear_plan(w);
    let xs = x.as_slice().unwrap();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * oh * ow * c];
    for bi in 0..b {
        for (oy, &(y0, y1, wy0, wy1)) in py.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in px.iter().enumerate() {
                let o = ((bi * oh + oy) * ow + ox) * c;
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = T::c(wy * wx);
                        if wgt == T::zero() {
                            continue;
                        }
                        let i = ((bi * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += wgt * xs[i + ch];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, oh, ow, c]), out).unwrap()
}

fn upsample2x_backward<T: Float>(g: &ArrayD<T>, in_shape: &[usize]) -> ArrayD<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let py = bilinear_plan(h);
    let px = bilinear_plan(w);
    let gs = g.as_slice().unwrap();
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for (oy, &(y0, y1, wy0, wy1)) in py.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in px.iter().enumerate() {
                let o = ((bi * oh + oy) * ow + ox) * c;
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = T::c(wy * wx);
                        if wgt == T::zero() {
                            continue;
                        }
                        let i = ((bi * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            gx[i + ch] += wgt * gs[o + ch];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), gx).unwrap()
}

fn im2col<T: Float>(x: &ArrayD<T>) -> Array2<T> {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xs = x.as_slice().unwrap();
    let mut cols = Array2::<T>::zeros((b * h * w, 9 * c));
    let cs = cols.as_slice_mut().unwrap();
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &Array2<T>, shape: &[usize]) -> ArrayD<T> {
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let cs = cols.as_slice().unwrap();
    let mut gx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            gx[dst + ch] += cs[src + ch];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), gx).unwrap()
}

pub(super) fn conv3x3<T: Float>(x: &ArrayD<T>, w: &ArrayD<T>) -> ArrayD<T> {
    assert_eq!(x.ndim(), 4, "conv expects NHWC");
    let c = x.shape()[3];
    assert_eq!(w.shape()[0], 9 * c, "conv weight rows = 9 * Cin");
    let cols = im2col(x);
    let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let out = cols.dot(&w2);
    let mut shape = x.shape().to_vec();
    shape[3] = w.shape()[1];
    from2(out, &shape)
}

type BnForward<T> = (ArrayD<T>, ArrayD<T>, Vec<T>, Option<(Vec<T>, Vec<T>)>);

pub(super) fn batch_norm<T: Float>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    mode: NormMode,
    running: Option<(&[T], &[T])>,
    eps: T,
) -> BnForward<T> {
    let (rows, cols) = rows_cols(x);
    let xv = view2(x);
    let g = gamma.as_slice().unwrap();
    let bt = beta.as_slice().unwrap();
    let (mean, var, stats) = match mode {
        NormMode::Batch => {
            let n = T::c(rows as f64);
            let mean: Vec<T> = xv.mean_axis(Axis(0)).unwrap().to_vec();
            let mut var = vec![T::zero(); cols];
            for row in xv.rows() {
                for j in 0..cols {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / n);
            let unbiased_scale = if rows > 1 {
                T::c(rows as f64 / (rows - 1) as f64)
            } else {
                T::one()
            };
            let unbiased = var.iter().map(|&v| v * unbiased_scale).collect();
            (mean.clone(), var, Some((mean, unbiased)))
        }
        NormMode::Running => {
            let (m, v) = running.expect("running statistics");
            (m.to_vec(), v.to_vec(), None)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Array2::<T>::zeros((rows, cols));
    let mut out = Array2::<T>::zeros((rows, cols));
    for ((xr, mut hr), mut or) in xv.rows().into_iter().zip(xhat.rows_mut()).zip(out.rows_mut()) {
        for j in 0..cols {
            let h = (xr[j] - mean[j]) * inv_std[j];
            hr[j] = h;
            or[j] = h * g[j] + bt[j];
        }
    }
    (from2(out, x.shape()), from2(xhat, x.shape()), inv_std, stats)
}

pub(super) fn dot_map<T: Float>(f: &ArrayD<T>, t: &ArrayD<T>) -> ArrayD<T> {
    let (b, h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    assert_eq!(t.shape(), &[b, c], "dot_map vector shape");
    let fs = f.as_slice().unwrap();
    let ts = t.as_slice().unwrap();
    let mut out = vec![T::zero(); b * h * w];
    for bi in 0..b {
        let tv = &ts[bi * c..(bi + 1) * c];
        for p in 0..h * w {
            let i = (bi * h * w + p) * c;
            out[bi * h * w + p] = fs[i..i + c].iter().zip(tv).fold(T::zero(), |a, (&x, &y)| a + x * y);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, h, w]), out).unwrap()
}

fn per_sample<T: Float>(a: &ArrayD<T>) -> (usize, usize) {
    let b = a.shape()[0];
    (b, a.len() / b.max(1))
}

pub(super) fn bce<T: Float>(m: &ArrayD<T>, target: &ArrayD<T>, eps: T) -> T {
    assert_eq!(m.shape(), target.shape(), "bce shapes");
    let (b, p) = per_sample(m);
    let ms = m.as_slice().unwrap();
    let gs = target.as_slice().unwrap();
    let mut total = T::zero();
    for bi in 0..b {
        let mut s = T::zero();
        for i in bi * p..(bi + 1) * p {
            let mc = ms[i].max(eps).min(T::one() - eps);
            s -= gs[i] * mc.ln() + (T::one() - gs[i]) * (T::one() - mc).ln();
        }
        total += s / T::c(p as f64);
    }
    total / T::c(b as f64)
}

pub(super) fn dice<T: Float>(m: &ArrayD<T>, target: &ArrayD<T>, smooth: T) -> T {
    assert_eq!(m.shape(), target.shape(), "dice shapes");
    let (b, p) = per_sample(m);
    let ms = m.as_slice().unwrap();
    let gs = target.as_slice().unwrap();
    let mut total = T::zero();
    for bi in 0..b {
        let (mut inter, mut sm, mut sg) = (T::zero(), T::zero(), T::zero());
        for i in bi * p..(bi + 1) * p {
            inter += ms[i] * gs[i];
            sm += ms[i];
            sg += gs[i];
        }
        total += T::one() - (T::c(2.0) * inter + smooth) / (sm + sg + smooth);
    }
    total / T::c(b as f64)
}

pub(super) fn backward<T: Float>(nodes: &[Node<T>], id: usize, g: &ArrayD<T>) -> Vec<(usize, ArrayD<T>)> {
    let node = &nodes[id];
    let val = |i: usize| &*nodes[i].value;
    let needs = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul { a, w } => {
            let av = val(*a);
            let wv = val(*w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let g2 = view2(g);
            let mut out = Vec::new();
            if needs(*a) {
                out.push((*a, from2(g2.dot(&wv.t()), av.shape())));
            }
            if needs(*w) {
                out.push((*w, view2(av).t().dot(&g2).into_dyn()));
            }
            out
        }
        Op::AddBias { x, b } => {
            let mut out = vec![(*x, g.clone())];
            if needs(*b) {
                let gb = view2(g).sum_axis(Axis(0));
                out.push((*b, gb.into_dyn().into_shape_with_order(val(*b).raw_dim()).unwrap()));
            }
            out
        }
        Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul { a, b } => vec![(*a, g * val(*b)), (*b, g * val(*a))],
        Op::Scale { x, s } => vec![(*x, g.mapv(|v| v * *s))],
        Op::Sum { x } => {
            let gs = *g.iter().next().unwrap();
            vec![(*x, ArrayD::from_elem(val(*x).raw_dim(), gs))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (rows, cols) = rows_cols(g);
            let gn = val(*gain).as_slice().unwrap();
            let gsl = g.as_slice().unwrap();
            let hs = xhat.as_slice().unwrap();
            let n = T::c(cols as f64);
            let mut gx = vec![T::zero(); rows * cols];
            let mut ggain = vec![T::zero(); cols];
            let mut gbias = vec![T::zero(); cols];
            let mut dh = vec![T::zero(); cols];
            for r in 0..rows {
                let o = r * cols;
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for j in 0..cols {
                    let gy = gsl[o + j];
                    ggain[j] += gy * hs[o + j];
                    gbias[j] += gy;
                    dh[j] = gy * gn[j];
                    s1 += dh[j];
                    s2 += dh[j] * hs[o + j];
                }
                let (m1, m2) = (s1 / n, s2 / n);
                for j in 0..cols {
                    gx[o + j] = inv_std[r] * (dh[j] - m1 - hs[o + j] * m2);
                }
            }
            let bshape = val(*gain).raw_dim();
            vec![
                (*x, ArrayD::from_shape_vec(g.raw_dim(), gx).unwrap()),
                (*gain, ArrayD::from_shape_vec(bshape.clone(), ggain).unwrap()),
                (*bias, ArrayD::from_shape_vec(bshape, gbias).unwrap()),
            ]
        }
        Op::Gelu { x } => {
            let mut gx = val(*x).mapv(gelu_grad);
            gx *= g;
            vec![(*x, gx)]
        }
        Op::Relu { x } => {
            let mut gx = g.clone();
            gx.zip_mut_with(&*node.value, |gv, &y| {
                if y <= T::zero() {
                    *gv = T::zero();
                }
            });
            vec![(*x, gx)]
        }
        Op::Sigmoid { x } => {
            let mut gx = g.clone();
            gx.zip_mut_with(&*node.value, |gv, &y| *gv = *gv * y * (T::one() - y));
            vec![(*x, gx)]
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            probs,
        } => attention_backward(val(*q), val(*k), val(*v), g, probs, *heads, *scale)
            .into_iter()
            .zip([*q, *k, *v])
            .map(|(gr, i)| (i, gr))
            .collect(),
        Op::SliceTokens { x, start } => {
            let mut gx = ndarray::Array3::<T>::zeros(val(*x).view().into_dimensionality::<Ix3>().unwrap().dim());
            let len = g.shape()[1];
            gx.slice_mut(s![.., *start..*start + len, ..])
                .assign(&g.view().into_dimensionality::<Ix3>().unwrap());
            vec![(*x, gx.into_dyn())]
        }
        Op::ConcatTokens { parts } => split_axis(g, parts, 1),
        Op::ConcatChannels { parts } => split_axis(g, parts, g.ndim() - 1),
        Op::Reshape { x } => {
            let shape = val(*x).raw_dim();
            vec![(*x, g.clone().into_shape_with_order(shape).unwrap())]
        }
        Op::BroadcastBatch { x } => vec![(*x, g.sum_axis(Axis(0)))],
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let width = tv.shape()[1];
            let mut gt = ArrayD::<T>::zeros(tv.raw_dim());
            let gts = gt.as_slice_mut().unwrap();
            for (row, &id) in g.as_slice().unwrap().chunks_exact(width).zip(ids) {
                for (d, &s) in gts[id * width..(id + 1) * width].iter_mut().zip(row) {
                    *d += s;
                }
            }
            vec![(*table, gt)]
        }
        Op::Upsample2x { x } => vec![(*x, upsample2x_backward(g, val(*x).shape()))],
        Op::Conv3x3 { x, w } => {
            let xv = val(*x);
            let wv = val(*w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let g2 = view2(g);
            let mut out = Vec::new();
            if needs(*w) {
                let cols = im2col(xv);
                out.push((*w, cols.t().dot(&g2).into_dyn()));
            }
            if needs(*x) {
                let gcols = g2.dot(&wv.t());
                out.push((*x, col2im(&gcols, xv.shape())));
            }
            out
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => {
            let (rows, cols) = rows_cols(g);
            let gv = view2(g);
            let hv = view2(xhat);
            let gm = val(*gamma).as_slice().unwrap();
            let mut ggamma = vec![T::zero(); cols];
            let mut gbeta = vec![T::zero(); cols];
            for (gr, hr) in gv.rows().into_iter().zip(hv.rows()) {
                for j in 0..cols {
                    ggamma[j] += gr[j] * hr[j];
                    gbeta[j] += gr[j];
                }
            }
            let mut gx = Array2::<T>::zeros((rows, cols));
            let n = T::c(rows as f64);
            for ((gr, hr), mut xr) in gv.rows().into_iter().zip(hv.rows()).zip(gx.rows_mut()) {
                for j in 0..cols {
                    let dh = gr[j] * gm[j];
                    xr[j] = match mode {
                        NormMode::Batch => inv_std[j] * (dh - gbeta[j] * gm[j] / n - hr[j] * ggamma[j] * gm[j] / n),
                        NormMode::Running => inv_std[j] * dh,
                    };
                }
            }
            let pshape = val(*gamma).raw_dim();
            vec![
                (*x, from2(gx, g.shape())),
                (*gamma, ArrayD::from_shape_vec(pshape.clone(), ggamma).unwrap()),
                (*beta, ArrayD::from_shape_vec(pshape, gbeta).unwrap()),
            ]
        }
        Op::DotMap { f, t } => {
            let fv = val(*f);
            let tv = val(*t);
            let (b, h, w, c) = (fv.shape()[0], fv.shape()[1], fv.shape()[2], fv.shape()[3]);
            let fs = fv.as_slice().unwrap();
            let ts = tv.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut gf = vec![T::zero(); fs.len()];
            let mut gt = vec![T::zero(); ts.len()];
            for bi in 0..b {
                for p in 0..h * w {
                    let gp = gs[bi * h * w + p];
                    let i = (bi * h * w + p) * c;
                    for ch in 0..c {
                        gf[i + ch] = gp * ts[bi * c + ch];
                        gt[bi * c + ch] += gp * fs[i + ch];
                    }
                }
            }
            vec![
                (*f, ArrayD::from_shape_vec(fv.raw_dim(), gf).unwrap()),
                (*t, ArrayD::from_shape_vec(tv.raw_dim(), gt).unwrap()),
            ]
        }
        Op::ScaleSamples { x, factors } => {
            let mut gx = g.clone();
            for (mut sample, &f) in gx.outer_iter_mut().zip(factors) {
                sample.mapv_inplace(|v| v * f);
            }
            vec![(*x, gx)]
        }
        Op::Bce { m, target, eps } => {
            let mv = val(*m);
            let (b, p) = per_sample(mv);
            let coef = *g.iter().next().unwrap() / T::c((b * p) as f64);
            let mut gm = ArrayD::<T>::zeros(mv.raw_dim());
            for ((d, &mi), &gi) in gm.iter_mut().zip(mv.iter()).zip(target.iter()) {
                if mi > *eps && mi < T::one() - *eps {
                    *d = -coef * (gi / mi - (T::one() - gi) / (T::one() - mi));
                }
            }
            vec![(*m, gm)]
        }
        Op::Dice { m, target, smooth } => {
            let mv = val(*m);
            let (b, p) = per_sample(mv);
            let coef = *g.iter().next().unwrap() / T::c(b as f64);
            let ms = mv.as_slice().unwrap();
            let gs = target.as_slice().unwrap();
            let mut gm = vec![T::zero(); ms.len()];
            for bi in 0..b {
                let r = bi * p..(bi + 1) * p;
                let (mut inter, mut sm, mut sg) = (T::zero(), T::zero(), T::zero());
                for i in r.clone() {
                    inter += ms[i] * gs[i];
                    sm += ms[i];
                    sg += gs[i];
                }
                let num = T::c(2.0) * inter + *smooth;
                let den = sm + sg + *smooth;
                for i in r {
                    gm[i] = -coef * (T::c(2.0) * gs[i] * den - num) / (den * den);
                }
            }
            vec![(*m, ArrayD::from_shape_vec(mv.raw_dim(), gm).unwrap())]
        }
    }
}

fn split_axis<T: Float>(g: &ArrayD<T>, parts: &[(usize, usize)], axis: usize) -> Vec<(usize, ArrayD<T>)> {
    let mut offset = 0;
    parts
        .iter()
        .map(|&(id, len)| {
            let piece = g
                .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                .as_standard_layout()
                .into_owned();
            offset += len;
            (id, piece)
        })
        .collect()
}

fn attention_backward<T: Float>(
    q: &ArrayD<T>,
    k: &ArrayD<T>,
    v: &ArrayD<T>,
    g: &ArrayD<T>,
    probs: &ArrayD<T>,
    heads: usize,
    scale: T,
) -> [ArrayD<T>; 3] {
    let q3 = q.view().into_dimensionality::<Ix3>().unwrap();
    let k3 = k.view().into_dimensionality::<Ix3>().unwrap();
    let v3 = v.view().into_dimensionality::<Ix3>().unwrap();
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let p4 = probs.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (batch, _, width) = q3.dim();
    let hd = width / heads;
    let mut gq = ndarray::Array3::<T>::zeros(q3.raw_dim());
    let mut gk = ndarray::Array3::<T>::zeros(k3.raw_dim());
    let mut gv = ndarray::Array3::<T>::zeros(v3.raw_dim());
    for b in 0..batch {
        for h in 0..heads {
            let cs = h * hd..(h + 1) * hd;
            let p = p4.slice(s![b, h, .., ..]);
            let go = g3.slice(s![b, .., cs.clone()]);
            gv.slice_mut(s![b, .., cs.clone()]).assign(&p.t().dot(&go));
            let mut ds = go.dot(&v3.slice(s![b, .., cs.clone()]).t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.iter().zip(prow.iter()).fold(T::zero(), |a, (&d, &pp)| a + d * pp);
                for (d, &pp) in drow.iter_mut().zip(prow.iter()) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            gq.slice_mut(s![b, .., cs.clone()])
                .assign(&ds.dot(&k3.slice(s![b, .., cs.clone()])));
            gk.slice_mut(s![b, .., cs.clone()])
                .assign(&ds.t().dot(&q3.slice(s![b, .., cs])));
        }
    }
    [gq.into_dyn(), gk.into_dyn(), gv.into_dyn()]
}
