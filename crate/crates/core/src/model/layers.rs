//! Per-frame tensor kernels in channel-major (C, H, W) layout, with adjoints.

/// 3x3 convolution with zero "same" padding; `out` is overwritten.
pub(crate) fn conv3x3(
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let cout = bias.len();
    let hw = h * w;
    for co in 0..cout {
        let oc = &mut out[co * hw..(co + 1) * hw];
        oc.fill(bias[co]);
        for ci in 0..cin {
            let ic = &inp[ci * hw..(ci + 1) * hw];
            let k = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = span(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = span(w, dx);
                    let wv = k[ky * 3 + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let o = &mut oc[y * w + x0..y * w + x1];
                        let ix0 = (x0 as isize + dx) as usize;
                        let i = &ic[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        for (o, i) in o.iter_mut().zip(i) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv3x3`]: accumulates into `dw`, `db` and, when given, `din`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    let cout = db.len();
    let hw = h * w;
    for co in 0..cout {
        let gc = &dout[co * hw..(co + 1) * hw];
        db[co] += gc.iter().sum::<f64>();
        for ci in 0..cin {
            let ic = &inp[ci * hw..(ci + 1) * hw];
            let base = (co * cin + ci) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = span(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = span(w, dx);
                    let wv = weight[base + ky * 3 + kx];
                    let ix0 = (x0 as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let g = &gc[y * w + x0..y * w + x1];
                        let i = &ic[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        acc += g.iter().zip(i).map(|(g, i)| g * i).sum::<f64>();
                        if let Some(din) = din.as_deref_mut() {
                            let d = &mut din[ci * hw + iy * w + ix0..ci * hw + iy * w + ix0 + (x1 - x0)];
                            for (d, g) in d.iter_mut().zip(g) {
                                *d += wv * g;
                            }
                        }
                    }
                    dw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Output rows (or columns) whose tap at offset `d` stays inside `0..n`.
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}

pub(crate) fn tanh_inplace(x: &mut [f64]) {
    for v in x {
        *v = v.tanh();
    }
}

/// Turns an upstream gradient into the pre-activation gradient of `y = tanh(z)`.
pub(crate) fn tanh_backward(y: &[f64], g: &mut [f64]) {
    for (g, y) in g.iter_mut().zip(y) {
        *g *= 1.0 - y * y;
    }
}

/// 2x2 average pooling with stride 2; `h` and `w` must be even.
pub(crate) fn avgpool2(inp: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        let ic = &inp[ch * h * w..];
        for y in 0..ho {
            for x in 0..wo {
                let s = ic[2 * y * w + 2 * x]
                    + ic[2 * y * w + 2 * x + 1]
                    + ic[(2 * y + 1) * w + 2 * x]
                    + ic[(2 * y + 1) * w + 2 * x + 1];
                out[ch * ho * wo + y * wo + x] = 0.25 * s;
            }
        }
    }
}

/// Adjoint of [`avgpool2`]; `din` is overwritten.
pub(crate) fn avgpool2_backward(dout: &[f64], c: usize, h: usize, w: usize, din: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                din[ch * h * w + y * w + x] = 0.25 * dout[ch * ho * wo + (y / 2) * wo + x / 2];
            }
        }
    }
}

/// Channels moved in each direction by the temporal shift.
pub fn shifted_channels(c: usize, fraction: f64) -> usize {
    ((c as f64 * fraction) + 1e-9).floor() as usize
}

/// Temporal shift over `frames` consecutive frames of `c * hw` values: the
/// first `k` channels take the previous frame's values, the next `k` the
/// following frame's, vacated slots become zero.
pub fn temporal_shift(x: &[f64], frames: usize, c: usize, hw: usize, k: usize) -> Vec<f64> {
    let fl = c * hw;
    let mut out = x.to_vec();
    if k == 0 {
        return out;
    }
    for t in 0..frames {
        let dst = t * fl;
        for (block, src) in [(0..k * hw, t.checked_sub(1)), (k * hw..2 * k * hw, Some(t + 1).filter(|&s| s < frames))] {
            match src {
                Some(s) => {
                    let so = s * fl;
                    out[dst + block.start..dst + block.end].copy_from_slice(&x[so + block.start..so + block.end]);
                }
                None => out[dst + block.start..dst + block.end].fill(0.0),
            }
        }
    }
    out
}

/// Adjoint of [`temporal_shift`].
pub(crate) fn temporal_shift_backward(g: &[f64], frames: usize, c: usize, hw: usize, k: usize) -> Vec<f64> {
    let fl = c * hw;
    let mut out = g.to_vec();
    if k == 0 {
        return out;
    }
    for t in 0..frames {
        let o = t * fl;
        out[o..o + 2 * k * hw].fill(0.0);
    }
    for t in 0..frames {
        let o = t * fl;
        if t + 1 < frames {
            // frame t+1 read the forward block from frame t
            let n = (t + 1) * fl;
            for i in 0..k * hw {
                out[o + i] += g[n + i];
            }
        }
        if t > 0 {
            let p = (t - 1) * fl;
            for i in k * hw..2 * k * hw {
                out[o + i] += g[p + i];
            }
        }
    }
    out
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Soft spatial attention for one frame: `n * s / (2 * sum(s))` with
/// `s = sigmoid(w . x + b)` per pixel; returns `(mask, s)`.
pub(crate) fn attention(x: &[f64], c: usize, hw: usize, w: &[f64], b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut z = vec![b; hw];
    for ch in 0..c {
        let wc = w[ch];
        for (z, x) in z.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            *z += wc * x;
        }
    }
    let s: Vec<f64> = z.into_iter().map(sigmoid).collect();
    let total: f64 = s.iter().sum();
    let scale = hw as f64 / (2.0 * total);
    (s.iter().map(|v| v * scale).collect(), s)
}

/// Adjoint of [`attention`]; accumulates into `dw`, `db` and `dx`.
pub(crate) fn attention_backward(
    x: &[f64],
    c: usize,
    hw: usize,
    w: &[f64],
    s: &[f64],
    dmask: &[f64],
    dw: &mut [f64],
    db: &mut f64,
    dx: &mut [f64],
) {
    let total: f64 = s.iter().sum();
    let n = hw as f64;
    let dot: f64 = dmask.iter().zip(s).map(|(d, s)| d * s).sum();
    let dz: Vec<f64> = s
        .iter()
        .zip(dmask)
        .map(|(&s, &d)| {
            let ds = n / (2.0 * total) * d - n / (2.0 * total * total) * dot;
            ds * s * (1.0 - s)
        })
        .collect();
    *db += dz.iter().sum::<f64>();
    for ch in 0..c {
        let xc = &x[ch * hw..(ch + 1) * hw];
        dw[ch] += dz.iter().zip(xc).map(|(d, x)| d * x).sum::<f64>();
        let wc = w[ch];
        for (dx, d) in dx[ch * hw..(ch + 1) * hw].iter_mut().zip(&dz) {
            *dx += wc * d;
        }
    }
}

/// Public mask computation for a single frame of `c` feature maps.
pub fn attention_mask(features: &[f64], c: usize, hw: usize, w: &[f64], b: f64) -> Vec<f64> {
    attention(features, c, hw, w, b).0
}
