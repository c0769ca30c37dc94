//! Slow, loop-for-loop reference implementations.
//!
//! Everything here works on plain `f64` slices and is written directly from
//! the textbook definitions so it shares no code with the production crate.

/// Direct convolution (cross-correlation). Shapes are `[N, C, D, H, W]` for
/// `x` and `[Cout, Cin, k, k, k]` for `w`. With `same`, zero padding of
/// `(k - 1) / 2` is applied on every side.
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: usize,
    same: bool,
) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let pad = if same { (k - 1) / 2 } else { 0 };
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * od * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xo * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        let xv = x[(((ni * cin + ci) * d + iz) * h + iy) * wd + ix];
                                        let wv = w[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                        s += xv * wv;
                                    }
                                }
                            }
                        }
                        out[(((ni * cout + co) * od + z) * oh + y) * ow + xo] = s;
                    }
                }
            }
        }
    }
    (out, [n, cout, od, oh, ow])
}

/// Negative mean windowed squared correlation of two `[D, H, W]` grids.
/// Windows are clipped to the grid.
pub fn ncc_loss(a: &[f64], b: &[f64], dims: [usize; 3], win: usize, eps: f64) -> f64 {
    let [d, h, w] = dims;
    let r = (win / 2) as isize;
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0 && y >= 0 && x >= 0 && z < d as isize && y < h as isize && x < w as isize
    };
    let at = |v: &[f64], z: isize, y: isize, x: isize| v[(z as usize * h + y as usize) * w + x as usize];
    let mut total = 0.0;
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut wa = Vec::new();
                let mut wb = Vec::new();
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if inside(z + dz, y + dy, x + dx) {
                                wa.push(at(a, z + dz, y + dy, x + dx));
                                wb.push(at(b, z + dz, y + dy, x + dx));
                            }
                        }
                    }
                }
                let count = wa.len() as f64;
                let ma = wa.iter().sum::<f64>() / count;
                let mb = wb.iter().sum::<f64>() / count;
                let mut cross = 0.0;
                let mut va = 0.0;
                let mut vb = 0.0;
                for (p, q) in wa.iter().zip(&wb) {
                    cross += (p - ma) * (q - mb);
                    va += (p - ma) * (p - ma);
                    vb += (q - mb) * (q - mb);
                }
                total += cross * cross / (va * vb + eps);
            }
        }
    }
    -total / (d * h * w) as f64
}

/// Mean over voxels and components of the summed squared forward
/// differences; the difference past the last plane counts as zero.
pub fn diffusion(flow: &[Vec<f64>; 3], dims: [usize; 3]) -> f64 {
    let [d, h, w] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut s = 0.0;
    for c in flow {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = c[idx(z, y, x)];
                    if x + 1 < w {
                        s += (c[idx(z, y, x + 1)] - v).powi(2);
                    }
                    if y + 1 < h {
                        s += (c[idx(z, y + 1, x)] - v).powi(2);
                    }
                    if z + 1 < d {
                        s += (c[idx(z + 1, y, x)] - v).powi(2);
                    }
                }
            }
        }
    }
    s / (3 * d * h * w) as f64
}

/// Two-pass Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        sa += (a[i] - ma).powi(2);
        sb += (b[i] - mb).powi(2);
    }
    num / (sa * sb).sqrt()
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Histogram mutual information in nats.
pub fn mutual_information(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let mut joint = vec![vec![0.0; bins]; bins];
    for (p, q) in a.iter().zip(b) {
        joint[bin_of(*p, bins)][bin_of(*q, bins)] += 1.0;
    }
    let n = a.len() as f64;
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let pb: Vec<f64> = (0..bins)
        .map(|j| joint.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i][j] / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

/// Shannon entropy (nats) of the binned values.
pub fn entropy(a: &[f64], bins: usize) -> f64 {
    let mut h = vec![0.0; bins];
    for v in a {
        h[bin_of(*v, bins)] += 1.0;
    }
    let n = a.len() as f64;
    h.iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

/// Border-clamped trilinear interpolation on an x-fastest `[W, H, D]` grid
/// at continuous coordinates `(x, y, z)`.
pub fn trilinear(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = c.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        t[a] = c - f;
    }
    let get = |x: usize, y: usize, z: usize| data[(z * dims[1] + y) * dims[0] + x];
    let mut s = 0.0;
    for (cz, wz) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
        for (cy, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            for (cx, wx) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
                s += wx * wy * wz * get(cx, cy, cz);
            }
        }
    }
    s
}
