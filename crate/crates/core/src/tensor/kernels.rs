//! Inner numeric kernels shared by the tape operations.
//!
//! All matrices are row-major `f64` slices. The three GEMM variants cover
//! the forward pass and both operand adjoints of a matrix product without
//! ever materializing a transpose. Loop orders are chosen so the innermost
//! loop runs over contiguous memory and auto-vectorizes; every kernel
//! accumulates in a fixed order, which keeps results bit-reproducible.

/// Dot product with eight independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 8;
    let mut acc = [0.0f64; 8];
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// out[m,n] += a[m,k] · b[k,n]
pub fn matmul_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Output spatial extent of a convolution axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let span = input + 2 * pad;
    assert!(
        span >= kernel && (span - kernel) % stride == 0,
        "convolution geometry (in={input}, k={kernel}, stride={stride}, pad={pad}) \
         does not produce an integral output size"
    );
    (span - kernel) / stride + 1
}

/// Unrolls one image [C,H,W] into patch columns [C·k·k, OH·OW].
///
/// Row ordering is channel-major, then kernel row, then kernel column, so a
/// weight tensor [OC, C, k, k] flattens row-compatibly to [OC, C·k·k].
/// Out-of-bounds taps read zero, matching the zero-padding convention.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let pixels = oh * ow;
    for ic in 0..c {
        let plane = &img[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ic * k + ky) * k + kx) * pixels..][..pixels];
                let mut p = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for _ in 0..ow {
                            row[p] = 0.0;
                            p += 1;
                        }
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[p] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[base + ix as usize]
                        };
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch-column gradients back onto the image grid; the adjoint
/// of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    img: &mut [f64],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let pixels = oh * ow;
    for ic in 0..c {
        let plane = &mut img[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ic * k + ky) * k + kx) * pixels..][..pixels];
                let mut p = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        p += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += row[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Bilinear read of `plane[py, px]` with zeros outside the grid.
///
/// Exact-integer coordinates take a direct-load fast path, so sampling on
/// the unshifted grid reproduces plain convolution input bit for bit.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, py: f64, px: f64) -> f64 {
    let y0f = py.floor();
    let x0f = px.floor();
    if py == y0f && px == x0f {
        let (yi, xi) = (y0f as isize, x0f as isize);
        if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
            return 0.0;
        }
        return plane[yi as usize * w + xi as usize];
    }
    let y0 = y0f as isize;
    let x0 = x0f as isize;
    let dy = py - y0f;
    let dx = px - x0f;
    let fetch = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1);
    let v10 = fetch(y0 + 1, x0);
    let v11 = fetch(y0 + 1, x0 + 1);
    (1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11)
}

/// Adjoint of [`bilinear_sample`]: scatters `dv` onto the four corner cells
/// (when `dplane` is given) and returns (∂value/∂py, ∂value/∂px) · dv.
///
/// At integer coordinates the position derivative is the right-sided slope,
/// matching the forward fast path's cell.
pub fn bilinear_backward(
    plane: &[f64],
    h: usize,
    w: usize,
    py: f64,
    px: f64,
    dv: f64,
    dplane: Option<&mut [f64]>,
) -> (f64, f64) {
    let y0f = py.floor();
    let x0f = px.floor();
    let y0 = y0f as isize;
    let x0 = x0f as isize;
    let dy = py - y0f;
    let dx = px - x0f;
    let fetch = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1);
    let v10 = fetch(y0 + 1, x0);
    let v11 = fetch(y0 + 1, x0 + 1);
    let dpy = dv * ((1.0 - dx) * (v10 - v00) + dx * (v11 - v01));
    let dpx = dv * ((1.0 - dy) * (v01 - v00) + dy * (v11 - v10));
    if let Some(dp) = dplane {
        let mut put = |y: isize, x: isize, weight: f64| {
            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                dp[y as usize * w + x as usize] += dv * weight;
            }
        };
        put(y0, x0, (1.0 - dy) * (1.0 - dx));
        put(y0, x0 + 1, (1.0 - dy) * dx);
        put(y0 + 1, x0, dy * (1.0 - dx));
        put(y0 + 1, x0 + 1, dy * dx);
    }
    (dpy, dpx)
}
