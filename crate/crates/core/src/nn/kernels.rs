//! Dense CPU kernels with explicit backward passes. Convolutions lower to
//! im2col / col2im around a single-precision GEMM, processed in slabs of
//! output depth planes so the column buffer stays bounded.

use crate::volume::{voxel_count, Dims};

use super::spec::{LEAKY_SLOPE, NORM_EPS};

const COL_BUDGET: usize = 1 << 22;

/// Geometry of a strided, zero-padded correlation from `in_dims` to `out_dims`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_dims: Dims,
    pub out_dims: Dims,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    /// Output depth planes per slab for a column buffer with `rows` rows.
    fn slab(&self, rows: usize) -> usize {
        (COL_BUDGET / (rows * self.plane()).max(1)).clamp(1, self.out_dims[0])
    }

    /// Valid output index range along one axis for kernel offset `k`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let n_in = self.in_dims[axis] as isize;
        let n_out = self.out_dims[axis] as isize;
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = ((n_in + p - k + s - 1) / s).clamp(0, n_out);
        (lo.min(hi) as usize, hi as usize)
    }
}

/// Gathers the receptive fields of output planes `oz0..oz1` into `col`
/// (`channels * taps` rows by `(oz1-oz0) * plane` columns).
fn im2col(x: &[f32], channels: usize, g: &ConvGeom, oz0: usize, oz1: usize, col: &mut [f32]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let ncol = (oz1 - oz0) * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * ncol..(row + 1) * ncol];
                    let (xlo, xhi) = g.valid(2, kx);
                    let mut j = 0;
                    for oz in oz0..oz1 {
                        let iz = (oz * s + kz) as isize - p as isize;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let out = &mut dst[j..j + ow];
                            j += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            out[..xlo].fill(0.0);
                            out[xhi..].fill(0.0);
                            if xlo < xhi {
                                let ix0 = xlo * s + kx - p;
                                if s == 1 {
                                    out[xlo..xhi].copy_from_slice(&xc[base + ix0..base + ix0 + (xhi - xlo)]);
                                } else {
                                    for (t, o) in out[xlo..xhi].iter_mut().enumerate() {
                                        *o = xc[base + ix0 + t * s];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `x`.
fn col2im(col: &[f32], channels: usize, g: &ConvGeom, oz0: usize, oz1: usize, x: &mut [f32]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let (s, p) = (g.stride, g.padding);
    let ncol = (oz1 - oz0) * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * ncol..(row + 1) * ncol];
                    let (xlo, xhi) = g.valid(2, kx);
                    let mut j = 0;
                    for oz in oz0..oz1 {
                        let iz = (oz * s + kz) as isize - p as isize;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let seg = &src[j..j + ow];
                            j += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize || xlo >= xhi {
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let ix0 = xlo * s + kx - p;
                            for (t, v) in seg[xlo..xhi].iter().enumerate() {
                                xc[base + ix0 + t * s] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Correlation: `x` is `[cin, in_dims]`, `w` is `[cout, cin, k]`.
pub fn conv_forward(x: &[f32], cin: usize, w: &[f32], b: Option<&[f32]>, cout: usize, g: &ConvGeom) -> Vec<f32> {
    let rows = cin * g.taps();
    let n_out = voxel_count(g.out_dims);
    let mut y = vec![0.0f32; cout * n_out];
    let slab = g.slab(rows);
    let mut col = vec![0.0f32; rows * slab * g.plane()];
    let mut oz0 = 0;
    while oz0 < g.out_dims[0] {
        let oz1 = (oz0 + slab).min(g.out_dims[0]);
        let ncol = (oz1 - oz0) * g.plane();
        im2col(x, cin, g, oz0, oz1, &mut col[..rows * ncol]);
        gemm(cout, rows, ncol, w, (rows, 1), &col, (ncol, 1), 0.0, &mut y[oz0 * g.plane()..], (n_out, 1));
        oz0 = oz1;
    }
    if let Some(b) = b {
        for (yc, &bc) in y.chunks_exact_mut(n_out).zip(b) {
            yc.iter_mut().for_each(|v| *v += bc);
        }
    }
    y
}

/// Returns `(dx, dw, db)` for [`conv_forward`].
pub fn conv_backward(
    x: &[f32],
    cin: usize,
    w: &[f32],
    dy: &[f32],
    cout: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let rows = cin * g.taps();
    let n_out = voxel_count(g.out_dims);
    let mut dx = need_dx.then(|| vec![0.0f32; cin * voxel_count(g.in_dims)]);
    let mut dw = vec![0.0f32; w.len()];
    let slab = g.slab(rows);
    let mut col = vec![0.0f32; rows * slab * g.plane()];
    let mut dcol = if need_dx { vec![0.0f32; col.len()] } else { Vec::new() };
    let mut oz0 = 0;
    while oz0 < g.out_dims[0] {
        let oz1 = (oz0 + slab).min(g.out_dims[0]);
        let ncol = (oz1 - oz0) * g.plane();
        let dys = &dy[oz0 * g.plane()..];
        im2col(x, cin, g, oz0, oz1, &mut col[..rows * ncol]);
        gemm(cout, ncol, rows, dys, (n_out, 1), &col, (1, ncol), 1.0, &mut dw, (rows, 1));
        if let Some(dx) = dx.as_mut() {
            gemm(rows, cout, ncol, w, (1, rows), dys, (n_out, 1), 0.0, &mut dcol, (ncol, 1));
            col2im(&dcol[..rows * ncol], cin, g, oz0, oz1, dx);
        }
        oz0 = oz1;
    }
    let db = dy.chunks_exact(n_out).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
    (dx, dw, db)
}

/// Transposed convolution, the adjoint of a correlation from the output
/// grid to the input grid. `g` describes that correlation, so
/// `g.out_dims` is the input extent here and `g.in_dims` the output extent.
/// `w` is `[cin, cout, k]`.
pub fn tconv_forward(x: &[f32], cin: usize, w: &[f32], b: Option<&[f32]>, cout: usize, g: &ConvGeom) -> Vec<f32> {
    let rows = cout * g.taps();
    let n_in = voxel_count(g.out_dims);
    let n_out = voxel_count(g.in_dims);
    let mut y = vec![0.0f32; cout * n_out];
    let slab = g.slab(rows);
    let mut col = vec![0.0f32; rows * slab * g.plane()];
    let mut z0 = 0;
    while z0 < g.out_dims[0] {
        let z1 = (z0 + slab).min(g.out_dims[0]);
        let ncol = (z1 - z0) * g.plane();
        gemm(rows, cin, ncol, w, (1, rows), &x[z0 * g.plane()..], (n_in, 1), 0.0, &mut col, (ncol, 1));
        col2im(&col[..rows * ncol], cout, g, z0, z1, &mut y);
        z0 = z1;
    }
    if let Some(b) = b {
        for (yc, &bc) in y.chunks_exact_mut(n_out).zip(b) {
            yc.iter_mut().for_each(|v| *v += bc);
        }
    }
    y
}

pub fn tconv_backward(
    x: &[f32],
    cin: usize,
    w: &[f32],
    dy: &[f32],
    cout: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let rows = cout * g.taps();
    let n_in = voxel_count(g.out_dims);
    let n_out = voxel_count(g.in_dims);
    let mut dx = need_dx.then(|| vec![0.0f32; cin * n_in]);
    let mut dw = vec![0.0f32; w.len()];
    let slab = g.slab(rows);
    let mut col = vec![0.0f32; rows * slab * g.plane()];
    let mut z0 = 0;
    while z0 < g.out_dims[0] {
        let z1 = (z0 + slab).min(g.out_dims[0]);
        let ncol = (z1 - z0) * g.plane();
        im2col(dy, cout, g, z0, z1, &mut col[..rows * ncol]);
        if let Some(dx) = dx.as_mut() {
            gemm(cin, rows, ncol, w, (rows, 1), &col, (ncol, 1), 0.0, &mut dx[z0 * g.plane()..], (n_in, 1));
        }
        gemm(cin, ncol, rows, &x[z0 * g.plane()..], (n_in, 1), &col, (1, ncol), 1.0, &mut dw, (rows, 1));
        z0 = z1;
    }
    let db = dy.chunks_exact(n_out).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
    (dx, dw, db)
}

/// Per-channel standardisation; returns the output and `1/std` per channel.
pub fn instance_norm_forward(x: &[f32], channels: usize) -> (Vec<f32>, Vec<f32>) {
    let n = x.len() / channels;
    let mut y = vec![0.0f32; x.len()];
    let mut inv = Vec::with_capacity(channels);
    for (xc, yc) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let mean = xc.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xc.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        for (o, &v) in yc.iter_mut().zip(xc) {
            *o = ((v as f64 - mean) * istd) as f32;
        }
        inv.push(istd as f32);
    }
    (y, inv)
}

pub fn instance_norm_backward(y: &[f32], inv_std: &[f32], dy: &[f32]) -> Vec<f32> {
    let channels = inv_std.len();
    let n = y.len() / channels;
    let mut dx = vec![0.0f32; y.len()];
    for c in 0..channels {
        let (yc, dyc) = (&y[c * n..(c + 1) * n], &dy[c * n..(c + 1) * n]);
        let mean_dy = dyc.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let mean_dyy = dyc.iter().zip(yc).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / n as f64;
        let istd = inv_std[c] as f64;
        for i in 0..n {
            dx[c * n + i] = (istd * (dyc[i] as f64 - mean_dy - yc[i] as f64 * mean_dyy)) as f32;
        }
    }
    dx
}

pub fn leaky_relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
}

pub fn leaky_relu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter().zip(dy).map(|(&v, &d)| if v > 0.0 { d } else { LEAKY_SLOPE * d }).collect()
}

/// Softmax across channels at every voxel.
pub fn softmax_forward(x: &[f32], channels: usize) -> Vec<f32> {
    let n = x.len() / channels;
    let mut y = vec![0.0f32; x.len()];
    for i in 0..n {
        let max = (0..channels).map(|c| x[c * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for c in 0..channels {
            let e = (x[c * n + i] - max).exp();
            y[c * n + i] = e;
            sum += e;
        }
        for c in 0..channels {
            y[c * n + i] /= sum;
        }
    }
    y
}

pub fn softmax_backward(y: &[f32], dy: &[f32], channels: usize) -> Vec<f32> {
    let n = y.len() / channels;
    let mut dx = vec![0.0f32; y.len()];
    for i in 0..n {
        let dot: f32 = (0..channels).map(|c| y[c * n + i] * dy[c * n + i]).sum();
        for c in 0..channels {
            dx[c * n + i] = y[c * n + i] * (dy[c * n + i] - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // direct seven-loop correlation
    fn naive_conv(x: &[f32], cin: usize, w: &[f32], cout: usize, g: &ConvGeom) -> Vec<f32> {
        let [id, ih, iw] = g.in_dims;
        let [od, oh, ow] = g.out_dims;
        let [kd, kh, kw] = g.kernel;
        let mut y = vec![0.0f32; cout * od * oh * ow];
        for co in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..cin {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let iz = (oz * g.stride + a) as isize - g.padding as isize;
                                        let iy = (oy * g.stride + b) as isize - g.padding as isize;
                                        let ix = (ox * g.stride + c) as isize - g.padding as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= id as isize || iy >= ih as isize || ix >= iw as isize {
                                            continue;
                                        }
                                        let xv = x[((ci * id + iz as usize) * ih + iy as usize) * iw + ix as usize];
                                        let wv = w[(((co * cin + ci) * kd + a) * kh + b) * kw + c];
                                        acc += xv as f64 * wv as f64;
                                    }
                                }
                            }
                        }
                        y[((co * od + oz) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn geom(n: Dims, k: usize, s: usize, p: usize) -> ConvGeom {
        let out = n.map(|d| (d + 2 * p - k) / s + 1);
        ConvGeom { in_dims: n, out_dims: out, kernel: [k; 3], stride: s, padding: p }
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (n, k, s, p) in [([5, 6, 7], 3, 1, 1), ([8, 8, 8], 4, 2, 1), ([4, 5, 3], 1, 1, 0), ([9, 7, 8], 3, 2, 1), ([6, 6, 6], 4, 1, 1)] {
            let g = geom(n, k, s, p);
            let (cin, cout) = (3, 2);
            let x = rand_vec(&mut rng, cin * voxel_count(n));
            let w = rand_vec(&mut rng, cout * cin * k * k * k);
            let fast = conv_forward(&x, cin, &w, None, cout, &g);
            let slow = naive_conv(&x, cin, &w, cout, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x), r> = <x, conv^T(r)> and the weight gradient is <r, d conv / dw>
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for g in [geom([6, 5, 7], 3, 2, 1), geom([4, 6, 4], 3, 1, 1), geom([5, 4, 6], 1, 1, 0)] {
        let (cin, cout) = (2, 3);
        let x = rand_vec(&mut rng, cin * voxel_count(g.in_dims));
        let w = rand_vec(&mut rng, cout * cin * g.taps());
        let r = rand_vec(&mut rng, cout * voxel_count(g.out_dims));
        let y = conv_forward(&x, cin, &w, None, cout, &g);
        let (dx, dw, db) = conv_backward(&x, cin, &w, &r, cout, &g, true);
        let lhs = dot(&y, &r);
        assert!((lhs - dot(&x, &dx.unwrap())).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - dot(&w, &dw)).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {}", dot(&w, &dw));
        assert_eq!(db.len(), cout);
        }
    }

    #[test]
    fn tconv_is_adjoint_of_conv() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // tconv k2 s2 from 3x4x2 to 6x8x4 is the adjoint of conv k2 s2 from 6x8x4
        let g = geom([6, 8, 4], 2, 2, 0);
        let (cin, cout) = (3, 2);
        let w = rand_vec(&mut rng, cin * cout * 8);
        let x = rand_vec(&mut rng, cin * voxel_count(g.out_dims));
        let y = tconv_forward(&x, cin, &w, None, cout, &g);
        assert_eq!(y.len(), cout * voxel_count(g.in_dims));
        // weight [cin][cout][k] seen as conv weight [cin<-out][cout<-in]
        let z = rand_vec(&mut rng, cout * voxel_count(g.in_dims));
        let conv_z = conv_forward(&z, cout, &w, None, cin, &g);
        let lhs = dot(&y, &z);
        assert!((lhs - dot(&x, &conv_z)).abs() < 1e-3 * lhs.abs().max(1.0));

        let (dx, dw, _) = tconv_backward(&x, cin, &w, &z, cout, &g, true);
        assert!((lhs - dot(&x, &dx.unwrap())).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - dot(&w, &dw)).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn instance_norm_gradient_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = rand_vec(&mut rng, 2 * 10);
        let r = rand_vec(&mut rng, 20);
        let f = |x: &[f32]| dot(&instance_norm_forward(x, 2).0, &r);
        let (y, inv) = instance_norm_forward(&x, 2);
        let dx = instance_norm_backward(&y, &inv, &r);
        for i in 0..x.len() {
            let h = 1e-2;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h as f64);
            assert!((fd - dx[i] as f64).abs() < 2e-2, "{fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn softmax_rows_are_simplex_and_gradient_checks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = rand_vec(&mut rng, 4 * 6);
        let y = softmax_forward(&x, 4);
        for i in 0..6 {
            let s: f32 = (0..4).map(|c| y[c * 6 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let r = rand_vec(&mut rng, 24);
        let dx = softmax_backward(&y, &r, 4);
        for i in 0..24 {
            let h = 1e-2;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (dot(&softmax_forward(&xp, 4), &r) - dot(&softmax_forward(&xm, 4), &r)) / (2.0 * h as f64);
            assert!((fd - dx[i] as f64).abs() < 1e-3);
        }
    }
}
