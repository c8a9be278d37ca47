//! Raw numeric kernels shared by the tape's forward and backward passes.
//! All matmuls accumulate in f64 regardless of the active precision mode.

/// C[m,n] = A[m,k] * B[k,n]
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A^T[m,k] * B[k,n] where A is stored [k,m]
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B^T[k,n] where B is stored [n,k]
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub const CONV_K: usize = 7;
pub const CONV_PAD: usize = 3;

/// im2col for the fixed 7x7 stride-1 pad-3 convolution.
/// Input x: [B,C,H,W]; output: [B*H*W, C*49] rows in (b,h,w) order.
pub fn im2col(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let patch = c * CONV_K * CONV_K;
    let mut cols = vec![0.0; b * h * w * patch];
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..w {
                let row = ((bi * h + oh) * w + ow) * patch;
                for ci in 0..c {
                    let xoff = (bi * c + ci) * h * w;
                    for kh in 0..CONV_K {
                        let ih = oh as isize + kh as isize - CONV_PAD as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..CONV_K {
                            let iw = ow as isize + kw as isize - CONV_PAD as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cols[row + (ci * CONV_K + kh) * CONV_K + kw] =
                                x[xoff + ih as usize * w + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the input layout.
pub fn col2im(dcols: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let patch = c * CONV_K * CONV_K;
    let mut dx = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..w {
                let row = ((bi * h + oh) * w + ow) * patch;
                for ci in 0..c {
                    let xoff = (bi * c + ci) * h * w;
                    for kh in 0..CONV_K {
                        let ih = oh as isize + kh as isize - CONV_PAD as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..CONV_K {
                            let iw = ow as isize + kw as isize - CONV_PAD as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            dx[xoff + ih as usize * w + iw as usize] +=
                                dcols[row + (ci * CONV_K + kh) * CONV_K + kw];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-(sample, channel) mean and population variance over the spatial plane.
pub fn instance_stats(x: &[f64], b: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; b * c];
    let mut var = vec![0.0; b * c];
    for i in 0..b * c {
        let xs = &x[i * plane..(i + 1) * plane];
        let m = xs.iter().sum::<f64>() / plane as f64;
        let v = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
        mean[i] = m;
        var[i] = v;
    }
    (mean, var)
}
