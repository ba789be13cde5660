//! Forward pass and manual reverse-mode gradient, one temporal-shift group at
//! a time (groups share no state).

use super::layers::*;
use super::{slot, Layout, ModelConfig, PreprocessedClip};
use crate::error::{Error, Result};

struct Dims {
    s: usize,
    s2: usize,
    s4: usize,
    c1: usize,
    c2: usize,
    dense: usize,
    g: usize,
    k_in: usize,
    k1: usize,
    k2: usize,
}

impl Dims {
    fn new(cfg: &ModelConfig) -> Self {
        let [c1, c2] = cfg.conv_filters;
        let f = cfg.shift_fraction;
        Self {
            s: cfg.input_size,
            s2: cfg.input_size / 2,
            s4: cfg.input_size / 4,
            c1,
            c2,
            dense: cfg.dense_width,
            g: cfg.frame_depth,
            k_in: shifted_channels(3, f),
            k1: shifted_channels(c1, f),
            k2: shifted_channels(c2, f),
        }
    }
}

/// Activations of one group, each `g` frames long.
struct Cache {
    xa: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    a2p: Vec<f64>,
    a3: Vec<f64>,
    a4: Vec<f64>,
    mask1: Vec<f64>,
    sig1: Vec<f64>,
    mask2: Vec<f64>,
    sig2: Vec<f64>,
    u0: Vec<f64>,
    m1: Vec<f64>,
    u1: Vec<f64>,
    m2: Vec<f64>,
    u2: Vec<f64>,
    m3: Vec<f64>,
    u3: Vec<f64>,
    m4: Vec<f64>,
    p2: Vec<f64>,
    h: Vec<f64>,
    y: Vec<f64>,
}

struct Params<'a> {
    theta: &'a [f64],
    layout: &'a Layout,
}

impl<'a> Params<'a> {
    fn t(&self, i: usize) -> &'a [f64] {
        &self.theta[self.layout.entries[i].range()]
    }
}

fn check(cfg: &ModelConfig, theta: &[f64], clip: &PreprocessedClip) -> Result<Layout> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    if theta.len() != layout.total {
        return Err(Error::Config(format!("expected {} parameters, got {}", layout.total, theta.len())));
    }
    if clip.size() != cfg.input_size || clip.len() % cfg.frame_depth != 0 {
        return Err(Error::Config(format!(
            "clip of {} frames at {}px does not fit input_size {} with frame_depth {}",
            clip.len(),
            clip.size(),
            cfg.input_size,
            cfg.frame_depth
        )));
    }
    Ok(layout)
}

/// Applies `f` per frame over a group: `inp` holds `g` frames of `in_len`,
/// `out` of `out_len`.
fn per_frame(g: usize, inp: &[f64], in_len: usize, out_len: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
    let mut out = vec![0.0; g * out_len];
    for t in 0..g {
        f(&inp[t * in_len..(t + 1) * in_len], &mut out[t * out_len..(t + 1) * out_len]);
    }
    out
}

fn conv_tanh(d: &Dims, p: &Params, slot: usize, inp: &[f64], cin: usize, cout: usize, side: usize) -> Vec<f64> {
    let hw = side * side;
    let mut out = per_frame(d.g, inp, cin * hw, cout * hw, |i, o| {
        conv3x3(i, cin, side, side, p.t(slot), p.t(slot + 1), o)
    });
    tanh_inplace(&mut out);
    out
}

fn forward_group(d: &Dims, p: &Params, xm: Vec<f64>, xa: Vec<f64>) -> Cache {
    let (s, s2, s4, c1, c2, g) = (d.s, d.s2, d.s4, d.c1, d.c2, d.g);
    let (hw, hw2, hw4) = (s * s, s2 * s2, s4 * s4);

    let a1 = conv_tanh(d, p, slot::APP_CONV[0], &xa, 3, c1, s);
    let a2 = conv_tanh(d, p, slot::APP_CONV[1], &a1, c1, c1, s);
    let (mut mask1, mut sig1) = (Vec::with_capacity(g * hw), Vec::with_capacity(g * hw));
    for t in 0..g {
        let (m, sg) = attention(&a2[t * c1 * hw..(t + 1) * c1 * hw], c1, hw, p.t(slot::APP_ATT[0]), p.t(slot::APP_ATT[0] + 1)[0]);
        mask1.extend(m);
        sig1.extend(sg);
    }
    let a2p = per_frame(g, &a2, c1 * hw, c1 * hw2, |i, o| avgpool2(i, c1, s, s, o));
    let a3 = conv_tanh(d, p, slot::APP_CONV[2], &a2p, c1, c2, s2);
    let a4 = conv_tanh(d, p, slot::APP_CONV[3], &a3, c2, c2, s2);
    let (mut mask2, mut sig2) = (Vec::with_capacity(g * hw2), Vec::with_capacity(g * hw2));
    for t in 0..g {
        let (m, sg) = attention(&a4[t * c2 * hw2..(t + 1) * c2 * hw2], c2, hw2, p.t(slot::APP_ATT[1]), p.t(slot::APP_ATT[1] + 1)[0]);
        mask2.extend(m);
        sig2.extend(sg);
    }

    let u0 = temporal_shift(&xm, g, 3, hw, d.k_in);
    let m1 = conv_tanh(d, p, slot::MOT_CONV[0], &u0, 3, c1, s);
    let u1 = temporal_shift(&m1, g, c1, hw, d.k1);
    let m2 = conv_tanh(d, p, slot::MOT_CONV[1], &u1, c1, c1, s);
    let mut g1 = m2.clone();
    gate(&mut g1, &mask1, g, c1, hw);
    let p1 = per_frame(g, &g1, c1 * hw, c1 * hw2, |i, o| avgpool2(i, c1, s, s, o));
    let u2 = temporal_shift(&p1, g, c1, hw2, d.k1);
    let m3 = conv_tanh(d, p, slot::MOT_CONV[2], &u2, c1, c2, s2);
    let u3 = temporal_shift(&m3, g, c2, hw2, d.k2);
    let m4 = conv_tanh(d, p, slot::MOT_CONV[3], &u3, c2, c2, s2);
    let mut g2 = m4.clone();
    gate(&mut g2, &mask2, g, c2, hw2);
    let flat = c2 * hw4;
    let p2 = per_frame(g, &g2, c2 * hw2, flat, |i, o| avgpool2(i, c2, s2, s2, o));

    let (w1, b1) = (p.t(slot::DENSE1), p.t(slot::DENSE1 + 1));
    let (w2, b2) = (p.t(slot::DENSE2), p.t(slot::DENSE2 + 1));
    let mut h = vec![0.0; g * d.dense];
    let mut y = vec![0.0; g];
    for t in 0..g {
        let x = &p2[t * flat..(t + 1) * flat];
        let ht = &mut h[t * d.dense..(t + 1) * d.dense];
        for (j, hj) in ht.iter_mut().enumerate() {
            let row = &w1[j * flat..(j + 1) * flat];
            *hj = (b1[j] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).tanh();
        }
        y[t] = b2[0] + w2.iter().zip(ht.iter()).map(|(w, h)| w * h).sum::<f64>();
    }
    Cache { xa, a1, a2, a2p, a3, a4, mask1, sig1, mask2, sig2, u0, m1, u1, m2, u2, m3, u3, m4, p2, h, y }
}

/// Multiplies every channel of each frame by that frame's mask.
fn gate(x: &mut [f64], mask: &[f64], g: usize, c: usize, hw: usize) {
    for t in 0..g {
        let m = &mask[t * hw..(t + 1) * hw];
        for ch in 0..c {
            let o = (t * c + ch) * hw;
            for (v, m) in x[o..o + hw].iter_mut().zip(m) {
                *v *= m;
            }
        }
    }
}

fn grad_slots<'g>(grad: &'g mut [f64], layout: &Layout, i: usize) -> (&'g mut [f64], &'g mut [f64]) {
    let (a, b) = (layout.entries[i].range(), layout.entries[i + 1].range());
    debug_assert_eq!(a.end, b.start);
    let (lo, hi) = grad[a.start..b.end].split_at_mut(a.end - a.start);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_back(
    d: &Dims,
    p: &Params,
    grad: &mut [f64],
    slot: usize,
    inp: &[f64],
    out: &[f64],
    mut dout: Vec<f64>,
    cin: usize,
    cout: usize,
    side: usize,
    want_din: bool,
) -> Vec<f64> {
    let hw = side * side;
    tanh_backward(out, &mut dout);
    let mut din = if want_din { vec![0.0; d.g * cin * hw] } else { Vec::new() };
    let (dw, db) = grad_slots(grad, p.layout, slot);
    for t in 0..d.g {
        let di = if want_din { Some(&mut din[t * cin * hw..(t + 1) * cin * hw]) } else { None };
        conv3x3_backward(
            &inp[t * cin * hw..(t + 1) * cin * hw],
            cin,
            side,
            side,
            p.t(slot),
            &dout[t * cout * hw..(t + 1) * cout * hw],
            dw,
            db,
            di,
        );
    }
    din
}

fn backward_group(d: &Dims, p: &Params, c: &Cache, dy: &[f64], grad: &mut [f64]) {
    let (s, s2, s4, c1, c2, g) = (d.s, d.s2, d.s4, d.c1, d.c2, d.g);
    let (hw, hw2, hw4) = (s * s, s2 * s2, s4 * s4);
    let flat = c2 * hw4;
    let layout = p.layout;

    // dense head
    let w1 = p.t(slot::DENSE1);
    let w2 = p.t(slot::DENSE2);
    let mut dp2 = vec![0.0; g * flat];
    for t in 0..g {
        let ht = &c.h[t * d.dense..(t + 1) * d.dense];
        {
            let (dw2, db2) = grad_slots(grad, layout, slot::DENSE2);
            for (dw, h) in dw2.iter_mut().zip(ht) {
                *dw += dy[t] * h;
            }
            db2[0] += dy[t];
        }
        let x = &c.p2[t * flat..(t + 1) * flat];
        let dx = &mut dp2[t * flat..(t + 1) * flat];
        let (dw1, db1) = grad_slots(grad, layout, slot::DENSE1);
        for j in 0..d.dense {
            let dz = dy[t] * w2[j] * (1.0 - ht[j] * ht[j]);
            if dz == 0.0 {
                continue;
            }
            db1[j] += dz;
            let row = &w1[j * flat..(j + 1) * flat];
            for ((dw, dx), (w, x)) in dw1[j * flat..(j + 1) * flat].iter_mut().zip(dx.iter_mut()).zip(row.iter().zip(x)) {
                *dw += dz * x;
                *dx += dz * w;
            }
        }
    }

    // motion stage 2
    let dg2 = per_frame(g, &dp2, flat, c2 * hw2, |i, o| avgpool2_backward(i, c2, s2, s2, o));
    let (dm4, dmask2) = ungate(&dg2, &c.m4, &c.mask2, g, c2, hw2);
    let du3 = conv_back(d, p, grad, slot::MOT_CONV[3], &c.u3, &c.m4, dm4, c2, c2, s2, true);
    let dm3 = temporal_shift_backward(&du3, g, c2, hw2, d.k2);
    let du2 = conv_back(d, p, grad, slot::MOT_CONV[2], &c.u2, &c.m3, dm3, c1, c2, s2, true);
    let dp1 = temporal_shift_backward(&du2, g, c1, hw2, d.k1);

    // motion stage 1
    let dg1 = per_frame(g, &dp1, c1 * hw2, c1 * hw, |i, o| avgpool2_backward(i, c1, s, s, o));
    let (dm2, dmask1) = ungate(&dg1, &c.m2, &c.mask1, g, c1, hw);
    let du1 = conv_back(d, p, grad, slot::MOT_CONV[1], &c.u1, &c.m2, dm2, c1, c1, s, true);
    let dm1 = temporal_shift_backward(&du1, g, c1, hw, d.k1);
    conv_back(d, p, grad, slot::MOT_CONV[0], &c.u0, &c.m1, dm1, 3, c1, s, false);

    // appearance stage 2
    let mut da4 = vec![0.0; g * c2 * hw2];
    {
        let (dw, db) = grad_slots(grad, layout, slot::APP_ATT[1]);
        for t in 0..g {
            attention_backward(
                &c.a4[t * c2 * hw2..(t + 1) * c2 * hw2],
                c2,
                hw2,
                p.t(slot::APP_ATT[1]),
                &c.sig2[t * hw2..(t + 1) * hw2],
                &dmask2[t * hw2..(t + 1) * hw2],
                dw,
                &mut db[0],
                &mut da4[t * c2 * hw2..(t + 1) * c2 * hw2],
            );
        }
    }
    let da3 = conv_back(d, p, grad, slot::APP_CONV[3], &c.a3, &c.a4, da4, c2, c2, s2, true);
    let da2p = conv_back(d, p, grad, slot::APP_CONV[2], &c.a2p, &c.a3, da3, c1, c2, s2, true);

    // appearance stage 1
    let mut da2 = per_frame(g, &da2p, c1 * hw2, c1 * hw, |i, o| avgpool2_backward(i, c1, s, s, o));
    {
        let (dw, db) = grad_slots(grad, layout, slot::APP_ATT[0]);
        for t in 0..g {
            attention_backward(
                &c.a2[t * c1 * hw..(t + 1) * c1 * hw],
                c1,
                hw,
                p.t(slot::APP_ATT[0]),
                &c.sig1[t * hw..(t + 1) * hw],
                &dmask1[t * hw..(t + 1) * hw],
                dw,
                &mut db[0],
                &mut da2[t * c1 * hw..(t + 1) * c1 * hw],
            );
        }
    }
    let da1 = conv_back(d, p, grad, slot::APP_CONV[1], &c.a1, &c.a2, da2, c1, c1, s, true);
    conv_back(d, p, grad, slot::APP_CONV[0], &c.xa, &c.a1, da1, 3, c1, s, false);
}

/// Gradients of `x * mask` with respect to `x` and the mask.
fn ungate(dout: &[f64], x: &[f64], mask: &[f64], g: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dx = dout.to_vec();
    gate(&mut dx, mask, g, c, hw);
    let mut dmask = vec![0.0; g * hw];
    for t in 0..g {
        for ch in 0..c {
            let o = (t * c + ch) * hw;
            for ((dm, d), x) in dmask[t * hw..(t + 1) * hw].iter_mut().zip(&dout[o..o + hw]).zip(&x[o..o + hw]) {
                *dm += d * x;
            }
        }
    }
    (dx, dmask)
}

fn group_inputs(clip: &PreprocessedClip, g: usize, gi: usize) -> (Vec<f64>, Vec<f64>) {
    let fl = clip.frame_len();
    let r = gi * g * fl..(gi + 1) * g * fl;
    let m = clip.motion()[r.clone()].iter().map(|&v| v as f64).collect();
    let a = clip.appearance()[r].iter().map(|&v| v as f64).collect();
    (m, a)
}

/// Network output for every frame of `clip` with flat parameters `theta`.
pub fn forward_flat(cfg: &ModelConfig, theta: &[f64], clip: &PreprocessedClip) -> Result<Vec<f64>> {
    let layout = check(cfg, theta, clip)?;
    let d = Dims::new(cfg);
    let p = Params { theta, layout: &layout };
    let mut y = Vec::with_capacity(clip.len());
    for gi in 0..clip.len() / d.g {
        let (xm, xa) = group_inputs(clip, d.g, gi);
        y.extend(forward_group(&d, &p, xm, xa).y);
    }
    Ok(y)
}

/// Mean squared error against `target` and its gradient in layout order.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    theta: &[f64],
    clip: &PreprocessedClip,
    target: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let layout = check(cfg, theta, clip)?;
    if target.len() != clip.len() {
        return Err(Error::Alignment(format!("prediction has {} frames, label {}", clip.len(), target.len())));
    }
    let d = Dims::new(cfg);
    let p = Params { theta, layout: &layout };
    let n = clip.len() as f64;
    let mut grad = vec![0.0; layout.total];
    let mut loss = 0.0;
    for gi in 0..clip.len() / d.g {
        let (xm, xa) = group_inputs(clip, d.g, gi);
        let cache = forward_group(&d, &p, xm, xa);
        let tg = &target[gi * d.g..(gi + 1) * d.g];
        let dy: Vec<f64> = cache.y.iter().zip(tg).map(|(y, t)| 2.0 * (y - t) / n).collect();
        loss += cache.y.iter().zip(tg).map(|(y, t)| (y - t).powi(2)).sum::<f64>();
        backward_group(&d, &p, &cache, &dy, &mut grad);
    }
    let loss = loss / n;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite loss or gradient".into()));
    }
    Ok((loss, grad))
}
