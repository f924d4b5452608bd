//! Straight-line reference formulas on plain `f64` slices, written without
//! any tensor code so they can check the tensor implementation independently.
//! Shared with the acceptance harness through a `#[path]` include.

#![allow(dead_code)]

pub const C1: f64 = 0.0001; // (0.01 * 1)^2
pub const C2: f64 = 0.0009; // (0.03 * 1)^2

/// Global SSIM of two equally sized pixel arrays, sample (n - 1) moments.
pub fn ssim(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
    }
    let mx = sx / n;
    let my = sy / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for i in 0..x.len() {
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
        cxy += (x[i] - mx) * (y[i] - my);
    }
    vx /= n - 1.0;
    vy /= n - 1.0;
    cxy /= n - 1.0;
    ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

fn clamp(v: f64, eps: f64) -> f64 {
    if v < eps {
        eps
    } else if v > 1.0 - eps {
        1.0 - eps
    } else {
        v
    }
}

/// Structural loss for one triple of images.
pub fn l_sg_single(xm: &[f64], xr: &[f64], xf: &[f64], eps: f64) -> f64 {
    let s_m = clamp(ssim(xm, xf), eps);
    let s_r = clamp(ssim(xr, xf), eps);
    -0.5 * (s_m.ln() + (1.0 - s_r).ln())
}

/// Batch mean of the structural loss; each slice holds `b` images back to back.
pub fn l_sg(xm: &[f64], xr: &[f64], xf: &[f64], b: usize, eps: f64) -> f64 {
    let n = xm.len() / b;
    let mut total = 0.0;
    for i in 0..b {
        let r = i * n..(i + 1) * n;
        total += l_sg_single(&xm[r.clone()], &xr[r.clone()], &xf[r], eps);
    }
    total / b as f64
}

/// Batch mean over rows of the squared Euclidean distance between score vectors.
pub fn l_cg(p_r: &[f64], p_f: &[f64], b: usize) -> f64 {
    let k = p_r.len() / b;
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..k {
            let d = p_r[i * k + j] - p_f[i * k + j];
            total += d * d;
        }
    }
    total / b as f64
}

/// Per-position linear map `out[o] = sum_i w[o][i] * f[i] + bias[o]`, applied
/// to a `(b, c, h, w)` feature map; `w` is `(c_out, c)` row major.
pub fn pointwise(f: &[f64], b: usize, c: usize, hw: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    let mut out = vec![0.0; b * c_out * hw];
    for n in 0..b {
        for o in 0..c_out {
            for p in 0..hw {
                let mut acc = bias[o];
                for i in 0..c {
                    acc += w[o * c + i] * f[(n * c + i) * hw + p];
                }
                out[(n * c_out + o) * hw + p] = acc;
            }
        }
    }
    out
}

/// Batch mean of `||F - concat[h_c(F), h_s(F)]||^2` with 1x1 extractors.
#[allow(clippy::too_many_arguments)]
pub fn l_rc(
    f: &[f64],
    b: usize,
    c: usize,
    hw: usize,
    wc: &[f64],
    bc: &[f64],
    ws: &[f64],
    bs: &[f64],
) -> f64 {
    let hc = pointwise(f, b, c, hw, wc, bc);
    let hs = pointwise(f, b, c, hw, ws, bs);
    let (cc, cs) = (bc.len(), bs.len());
    assert_eq!(cc + cs, c);
    let mut total = 0.0;
    for n in 0..b {
        for ch in 0..c {
            for p in 0..hw {
                let rec = if ch < cc {
                    hc[(n * cc + ch) * hw + p]
                } else {
                    hs[(n * cs + ch - cc) * hw + p]
                };
                let d = f[(n * c + ch) * hw + p] - rec;
                total += d * d;
            }
        }
    }
    total / b as f64
}

pub fn l_g(l_sg: f64, l_cg: f64, l_rc: f64, alpha: f64, beta: f64) -> f64 {
    alpha * l_sg + beta * l_cg + l_rc
}

/// Softmax cross-entropy of one score vector against a 1-based label.
pub fn ce_single(p: &[f64], label: u32) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in p {
        if v > max {
            max = v;
        }
    }
    let mut z = 0.0;
    for &v in p {
        z += (v - max).exp();
    }
    -(p[label as usize - 1] - max - z.ln())
}

pub fn ce(p: &[f64], labels: &[u32]) -> f64 {
    let k = p.len() / labels.len();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        total += ce_single(&p[i * k..(i + 1) * k], l);
    }
    total / labels.len() as f64
}

pub fn l_c(ce_main: f64, ce_fusion: f64, lambda: f64) -> f64 {
    ce_main + lambda * ce_fusion
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Twenty hand-built `(true, predicted)` records over K = 4. By hand:
/// category 1 has 4/6 correct and error sum 3, category 2 3/5 and 2,
/// category 3 3/5 and 3, category 4 2/4 and 3; overall 12/20 and 11.
pub const FIXTURE_20: [(u32, u32); 20] = [
    (1, 1), (1, 1), (1, 1), (1, 2), (1, 1), (1, 3),
    (2, 2), (2, 2), (2, 1), (2, 3), (2, 2),
    (3, 3), (3, 4), (3, 3), (3, 3), (3, 1),
    (4, 4), (4, 3), (4, 2), (4, 4),
];

/// Per-category `(count, correct, absolute error sum)` by direct recount.
pub fn tally(records: &[(u32, u32)], k: u32) -> Vec<(usize, usize, u64)> {
    let mut out = Vec::new();
    for c in 1..=k {
        let mut count = 0;
        let mut correct = 0;
        let mut err = 0u64;
        for &(t, p) in records {
            if t == c {
                count += 1;
                if p == t {
                    correct += 1;
                }
                err += if p > t { (p - t) as u64 } else { (t - p) as u64 };
            }
        }
        out.push((count, correct, err));
    }
    out
}
