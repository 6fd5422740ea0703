//! Forward and backward kernels. Every kernel fixes its summation order per
//! output element, so results are independent of how callers split work.

use super::graph::{same_pad, Activation, Dims, Padding};
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: Dims, kernel: [usize; 3], stride: [usize; 3], padding: Padding) -> Self {
        let sp = input.spatial();
        let mut pad = [0; 3];
        if padding == Padding::Same {
            for a in 0..3 {
                pad[a] = same_pad(sp[a], kernel[a], stride[a]);
            }
        }
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Input coordinate hit by output `o` with tap `k`, if inside.
    #[inline]
    fn src(&self, a: usize, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride[a] + k) as isize - self.pad[a] as isize;
        if i < 0 || i as usize >= extent {
            None
        } else {
            Some(i as usize)
        }
    }
}

/// Direct cross-correlation. `w` is laid out `[kx, ky, kz, cin, cout]`.
pub fn conv_forward<T: Scalar>(
    x: &[T],
    xd: Dims,
    w: &[T],
    b: &[T],
    g: &ConvGeom,
    yd: Dims,
) -> Vec<T> {
    let (cin, cout) = (xd.c, yd.c);
    let [kx, ky, kz] = g.kernel;
    let mut y = vec![T::zero(); yd.len()];
    for n in 0..yd.n {
        for ox in 0..yd.x {
            for oy in 0..yd.y {
                for oz in 0..yd.z {
                    let o = yd.at(n, ox, oy, oz);
                    let yo = &mut y[o..o + cout];
                    yo.copy_from_slice(b);
                    for tx in 0..kx {
                        let Some(ix) = g.src(0, ox, tx, xd.x) else {
                            continue;
                        };
                        for ty in 0..ky {
                            let Some(iy) = g.src(1, oy, ty, xd.y) else {
                                continue;
                            };
                            for tz in 0..kz {
                                let Some(iz) = g.src(2, oz, tz, xd.z) else {
                                    continue;
                                };
                                let xi = &x[xd.at(n, ix, iy, iz)..][..cin];
                                let wk =
                                    &w[((tx * ky + ty) * kz + tz) * cin * cout..][..cin * cout];
                                for (&a, wr) in xi.iter().zip(wk.chunks_exact(cout)) {
                                    for (acc, &wv) in yo.iter_mut().zip(wr) {
                                        *acc = *acc + a * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns (dx, dw, db) given dy.
pub fn conv_backward<T: Scalar>(
    x: &[T],
    xd: Dims,
    w: &[T],
    g: &ConvGeom,
    dy: &[T],
    yd: Dims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (cin, cout) = (xd.c, yd.c);
    let [kx, ky, kz] = g.kernel;
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];
    for n in 0..yd.n {
        for ox in 0..yd.x {
            for oy in 0..yd.y {
                for oz in 0..yd.z {
                    let o = yd.at(n, ox, oy, oz);
                    let dyo = &dy[o..o + cout];
                    for (acc, &d) in db.iter_mut().zip(dyo) {
                        *acc = *acc + d;
                    }
                    for tx in 0..kx {
                        let Some(ix) = g.src(0, ox, tx, xd.x) else {
                            continue;
                        };
                        for ty in 0..ky {
                            let Some(iy) = g.src(1, oy, ty, xd.y) else {
                                continue;
                            };
                            for tz in 0..kz {
                                let Some(iz) = g.src(2, oz, tz, xd.z) else {
                                    continue;
                                };
                                let xo = xd.at(n, ix, iy, iz);
                                let wo = ((tx * ky + ty) * kz + tz) * cin * cout;
                                let xi = &x[xo..xo + cin];
                                let dxi = &mut dx[xo..xo + cin];
                                let wk = &w[wo..wo + cin * cout];
                                let dwk = &mut dw[wo..wo + cin * cout];
                                for ci in 0..cin {
                                    let a = xi[ci];
                                    let wr = &wk[ci * cout..(ci + 1) * cout];
                                    let dwr = &mut dwk[ci * cout..(ci + 1) * cout];
                                    let mut acc = T::zero();
                                    for co in 0..cout {
                                        acc = acc + wr[co] * dyo[co];
                                        dwr[co] = dwr[co] + a * dyo[co];
                                    }
                                    dxi[ci] = dxi[ci] + acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling; padded positions never win. Returns outputs and the flat
/// input index of each winner.
pub fn maxpool_forward<T: Scalar>(x: &[T], xd: Dims, g: &ConvGeom, yd: Dims) -> (Vec<T>, Vec<u32>) {
    let c = xd.c;
    let mut y = vec![T::neg_infinity(); yd.len()];
    let mut arg = vec![0u32; yd.len()];
    for n in 0..yd.n {
        for ox in 0..yd.x {
            for oy in 0..yd.y {
                for oz in 0..yd.z {
                    let o = yd.at(n, ox, oy, oz);
                    for tx in 0..g.kernel[0] {
                        let Some(ix) = g.src(0, ox, tx, xd.x) else {
                            continue;
                        };
                        for ty in 0..g.kernel[1] {
                            let Some(iy) = g.src(1, oy, ty, xd.y) else {
                                continue;
                            };
                            for tz in 0..g.kernel[2] {
                                let Some(iz) = g.src(2, oz, tz, xd.z) else {
                                    continue;
                                };
                                let i = xd.at(n, ix, iy, iz);
                                for ch in 0..c {
                                    if x[i + ch] > y[o + ch] {
                                        y[o + ch] = x[i + ch];
                                        arg[o + ch] = (i + ch) as u32;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[u32], xlen: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); xlen];
    for (&d, &a) in dy.iter().zip(arg) {
        dx[a as usize] = dx[a as usize] + d;
    }
    dx
}

pub fn upsample_forward<T: Scalar>(x: &[T], xd: Dims, f: [usize; 3], yd: Dims) -> Vec<T> {
    let c = xd.c;
    let mut y = vec![T::zero(); yd.len()];
    for n in 0..yd.n {
        for ox in 0..yd.x {
            for oy in 0..yd.y {
                for oz in 0..yd.z {
                    let i = xd.at(n, ox / f[0], oy / f[1], oz / f[2]);
                    let o = yd.at(n, ox, oy, oz);
                    y[o..o + c].copy_from_slice(&x[i..i + c]);
                }
            }
        }
    }
    y
}

pub fn upsample_backward<T: Scalar>(dy: &[T], xd: Dims, f: [usize; 3], yd: Dims) -> Vec<T> {
    let c = xd.c;
    let mut dx = vec![T::zero(); xd.len()];
    for n in 0..yd.n {
        for ox in 0..yd.x {
            for oy in 0..yd.y {
                for oz in 0..yd.z {
                    let i = xd.at(n, ox / f[0], oy / f[1], oz / f[2]);
                    let o = yd.at(n, ox, oy, oz);
                    for ch in 0..c {
                        dx[i + ch] = dx[i + ch] + dy[o + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Copies the crop window (forward) or scatters it back (backward).
pub fn crop<T: Scalar>(
    src: &[T],
    sd: Dims,
    offset: [usize; 3],
    dd: Dims,
    backward: bool,
) -> Vec<T> {
    let c = sd.c;
    let mut out = vec![T::zero(); if backward { sd.len() } else { dd.len() }];
    for n in 0..dd.n {
        for x in 0..dd.x {
            for y in 0..dd.y {
                for z in 0..dd.z {
                    let s = sd.at(n, x + offset[0], y + offset[1], z + offset[2]);
                    let d = dd.at(n, x, y, z);
                    if backward {
                        out[s..s + c].copy_from_slice(&src[d..d + c]);
                    } else {
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    out
}

pub fn concat_forward<T: Scalar>(xs: &[(&[T], usize)], voxels: usize) -> Vec<T> {
    let total: usize = xs.iter().map(|(_, c)| c).sum();
    let mut y = Vec::with_capacity(voxels * total);
    for v in 0..voxels {
        for (x, c) in xs {
            y.extend_from_slice(&x[v * c..(v + 1) * c]);
        }
    }
    y
}

pub fn concat_backward<T: Scalar>(dy: &[T], chans: &[usize], voxels: usize) -> Vec<Vec<T>> {
    let total: usize = chans.iter().sum();
    let mut out: Vec<Vec<T>> = chans
        .iter()
        .map(|c| Vec::with_capacity(voxels * c))
        .collect();
    for v in 0..voxels {
        let mut off = v * total;
        for (o, &c) in out.iter_mut().zip(chans) {
            o.extend_from_slice(&dy[off..off + c]);
            off += c;
        }
    }
    out
}

pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

/// Batch statistics per channel: (mean, biased variance).
pub fn channel_stats<T: Scalar>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let m = x.len() / c;
    let inv = T::one() / T::from_usize(m);
    let mut mean = vec![T::zero(); c];
    for px in x.chunks_exact(c) {
        for (s, &v) in mean.iter_mut().zip(px) {
            *s = *s + v;
        }
    }
    mean.iter_mut().for_each(|s| *s = *s * inv);
    let mut var = vec![T::zero(); c];
    for px in x.chunks_exact(c) {
        for ((s, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - mu;
            *s = *s + d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s * inv);
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub fn bn_forward<T: Scalar>(
    x: &[T],
    c: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    training: bool,
) -> (Vec<T>, BnCache<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            training,
        },
    )
}

/// Returns (dx, dgamma, dbeta).
pub fn bn_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    gamma: &[T],
    cache: &BnCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = dy.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (d, h) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] = dbeta[ch] + d[ch];
            dgamma[ch] = dgamma[ch] + d[ch] * h[ch];
        }
    }
    let mut dx = Vec::with_capacity(dy.len());
    if cache.training {
        let inv_m = T::one() / T::from_usize(m);
        for (d, h) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                let g = gamma[ch] * cache.inv_std[ch];
                dx.push(g * (d[ch] - dbeta[ch] * inv_m - h[ch] * dgamma[ch] * inv_m));
            }
        }
    } else {
        for d in dy.chunks_exact(c) {
            for ch in 0..c {
                dx.push(d[ch] * gamma[ch] * cache.inv_std[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation_forward<T: Scalar>(x: &[T], c: usize, f: Activation) -> Vec<T> {
    let leak = T::from_f64(LEAKY_SLOPE);
    match f {
        Activation::Relu => x
            .iter()
            .map(|&v| if v < T::zero() { T::zero() } else { v })
            .collect(),
        Activation::LeakyRelu => x
            .iter()
            .map(|&v| if v > T::zero() { v } else { leak * v })
            .collect(),
        Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Tanh => x.iter().map(|&v| v.tanh()).collect(),
        Activation::Linear => x.to_vec(),
        Activation::Softmax => {
            let mut y = Vec::with_capacity(x.len());
            for px in x.chunks_exact(c) {
                let m = px.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let start = y.len();
                let mut s = T::zero();
                for &v in px {
                    let e = (v - m).exp();
                    s = s + e;
                    y.push(e);
                }
                y[start..].iter_mut().for_each(|e| *e = *e / s);
            }
            y
        }
    }
}

/// Gradient through an activation given its input `x` and output `y`.
pub fn activation_backward<T: Scalar>(
    x: &[T],
    y: &[T],
    dy: &[T],
    c: usize,
    f: Activation,
) -> Vec<T> {
    let leak = T::from_f64(LEAKY_SLOPE);
    match f {
        Activation::Relu => x
            .iter()
            .zip(dy)
            .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
            .collect(),
        Activation::LeakyRelu => x
            .iter()
            .zip(dy)
            .map(|(&v, &d)| if v > T::zero() { d } else { leak * d })
            .collect(),
        Activation::Sigmoid => y
            .iter()
            .zip(dy)
            .map(|(&s, &d)| d * s * (T::one() - s))
            .collect(),
        Activation::Tanh => y
            .iter()
            .zip(dy)
            .map(|(&t, &d)| d * (T::one() - t * t))
            .collect(),
        Activation::Linear => dy.to_vec(),
        Activation::Softmax => {
            let mut dx = Vec::with_capacity(dy.len());
            for (yp, dp) in y.chunks_exact(c).zip(dy.chunks_exact(c)) {
                let dot: T = yp.iter().zip(dp).map(|(&a, &b)| a * b).sum();
                for (&s, &d) in yp.iter().zip(dp) {
                    dx.push(s * (d - dot));
                }
            }
            dx
        }
    }
}

/// Per-position affine map over channels; `w` is `[cin, cout]`.
pub fn dense_forward<T: Scalar>(x: &[T], cin: usize, w: &[T], b: &[T]) -> Vec<T> {
    let cout = b.len();
    let mut y = Vec::with_capacity(x.len() / cin * cout);
    for px in x.chunks_exact(cin) {
        let start = y.len();
        y.extend_from_slice(b);
        let yo = &mut y[start..];
        for (&a, wr) in px.iter().zip(w.chunks_exact(cout)) {
            for (acc, &wv) in yo.iter_mut().zip(wr) {
                *acc = *acc + a * wv;
            }
        }
    }
    y
}

pub fn dense_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    w: &[T],
    dy: &[T],
    cout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];
    for (px, d) in x.chunks_exact(cin).zip(dy.chunks_exact(cout)) {
        for (acc, &v) in db.iter_mut().zip(d) {
            *acc = *acc + v;
        }
        for ci in 0..cin {
            let wr = &w[ci * cout..(ci + 1) * cout];
            let dwr = &mut dw[ci * cout..(ci + 1) * cout];
            let mut acc = T::zero();
            for co in 0..cout {
                acc = acc + wr[co] * d[co];
                dwr[co] = dwr[co] + px[ci] * d[co];
            }
            dx.push(acc);
        }
    }
    (dx, dw, db)
}

pub fn global_pool_forward<T: Scalar>(x: &[T], xd: Dims) -> Vec<T> {
    let (v, c) = (xd.voxels(), xd.c);
    let inv = T::one() / T::from_usize(v);
    let mut y = vec![T::zero(); xd.n * c];
    for n in 0..xd.n {
        let yo = &mut y[n * c..(n + 1) * c];
        for px in x[n * v * c..(n + 1) * v * c].chunks_exact(c) {
            for (acc, &a) in yo.iter_mut().zip(px) {
                *acc = *acc + a;
            }
        }
        yo.iter_mut().for_each(|a| *a = *a * inv);
    }
    y
}

pub fn global_pool_backward<T: Scalar>(dy: &[T], xd: Dims) -> Vec<T> {
    let (v, c) = (xd.voxels(), xd.c);
    let inv = T::one() / T::from_usize(v);
    let mut dx = Vec::with_capacity(xd.len());
    for n in 0..xd.n {
        for _ in 0..v {
            dx.extend(dy[n * c..(n + 1) * c].iter().map(|&d| d * inv));
        }
    }
    dx
}

pub fn scale_forward<T: Scalar>(x: &[T], xd: Dims, gate: &[T]) -> Vec<T> {
    let (v, c) = (xd.voxels(), xd.c);
    let mut y = Vec::with_capacity(x.len());
    for n in 0..xd.n {
        let g = &gate[n * c..(n + 1) * c];
        for px in x[n * v * c..(n + 1) * v * c].chunks_exact(c) {
            y.extend(px.iter().zip(g).map(|(&a, &b)| a * b));
        }
    }
    y
}

/// Returns (dx, dgate).
pub fn scale_backward<T: Scalar>(x: &[T], xd: Dims, gate: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let (v, c) = (xd.voxels(), xd.c);
    let mut dx = Vec::with_capacity(x.len());
    let mut dg = vec![T::zero(); gate.len()];
    for n in 0..xd.n {
        let g = &gate[n * c..(n + 1) * c];
        let dgn = &mut dg[n * c..(n + 1) * c];
        let range = n * v * c..(n + 1) * v * c;
        for (px, d) in x[range.clone()]
            .chunks_exact(c)
            .zip(dy[range].chunks_exact(c))
        {
            for ch in 0..c {
                dx.push(d[ch] * g[ch]);
                dgn[ch] = dgn[ch] + d[ch] * px[ch];
            }
        }
    }
    (dx, dg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_conv() {
        let d = Dims::new(1, [3, 2, 1], 2);
        let x: Vec<f32> = (0..12).map(|v| v as f32 * 0.5 - 1.0).collect();
        let w = [1.0, 0.0, 0.0, 1.0];
        let g = ConvGeom::new(d, [1, 1, 1], [1, 1, 1], Padding::Same);
        assert_eq!(conv_forward(&x, d, &w, &[0.0, 0.0], &g, d), x);
    }

    #[test]
    fn box_sum_valid() {
        let d = Dims::new(1, [5, 5, 1], 1);
        let g = ConvGeom::new(d, [3, 3, 1], [1, 1, 1], Padding::Valid);
        let yd = Dims::new(1, [3, 3, 1], 1);
        let y = conv_forward(&[1.0f32; 25], d, &[1.0; 9], &[0.0], &g, yd);
        assert_eq!(y, vec![9.0; 9]);
    }

    #[test]
    fn same_padding_zero_border() {
        let d = Dims::new(1, [3, 3, 1], 1);
        let g = ConvGeom::new(d, [3, 3, 1], [1, 1, 1], Padding::Same);
        let y = conv_forward(&[1.0f64; 9], d, &[1.0; 9], &[0.0], &g, d);
        assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn strided_same_conv_shape() {
        let d = Dims::new(1, [5, 4, 1], 1);
        let g = ConvGeom::new(d, [3, 3, 1], [2, 2, 1], Padding::Same);
        let yd = Dims::new(1, [3, 2, 1], 1);
        let x: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let y = conv_forward(&x, d, &[0., 0., 0., 0., 1., 0., 0., 0., 0.], &[0.0], &g, yd);
        assert_eq!(y, vec![1.0, 3.0, 9.0, 11.0, 17.0, 19.0]);
    }

    #[test]
    fn pool_and_upsample() {
        let d = Dims::new(1, [2, 2, 1], 1);
        let g = ConvGeom::new(d, [2, 2, 1], [2, 2, 1], Padding::Valid);
        let (y, arg) = maxpool_forward(&[1.0f32, 5.0, 3.0, 2.0], d, &g, Dims::new(1, [1, 1, 1], 1));
        assert_eq!((y[0], arg[0]), (5.0, 1));
        assert_eq!(
            maxpool_backward(&[2.0f32], &arg, 4),
            vec![0.0, 2.0, 0.0, 0.0]
        );
        let up = upsample_forward(&[7.0f32], Dims::new(1, [1, 1, 1], 1), [2, 2, 1], d);
        assert_eq!(up, vec![7.0; 4]);
        assert_eq!(
            upsample_backward(&[1.0f32; 4], Dims::new(1, [1, 1, 1], 1), [2, 2, 1], d),
            vec![4.0]
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0f64, 2.0, 3.0, -50.0, 0.0, 50.0];
        let y = activation_forward(&x, 3, Activation::Softmax);
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sigmoid(-800.0f64).is_finite() && sigmoid(800.0f64) == 1.0);
    }
}
