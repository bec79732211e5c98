//! Loop-level reference for graph nodes, graphs and losses.
//!
//! Everything is accumulated in double-double precision and rounded once, so
//! the reference is exact to f64 and a mismatch measures only the library's
//! own roundoff.

use sgs::layout::{SemanticLayout, NUM_CLASSES};
use twofloat::TwoFloat;

type Dd = TwoFloat;

pub struct Reference {
    pub mu: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub e1: Vec<Vec<f64>>,
    pub e2: Vec<Vec<f64>>,
    c1x: Vec<Dd>,
    c2x: Vec<Dd>,
    e1x: Vec<Vec<Dd>>,
    e2x: Vec<Vec<Dd>>,
}

/// `features[ch][y][x]`.
pub type Features = Vec<Vec<Vec<f64>>>;

pub fn features_from(data: &[f64], channels: usize, h: usize, w: usize) -> Features {
    (0..channels)
        .map(|c| (0..h).map(|y| (0..w).map(|x| data[(c * h + y) * w + x]).collect()).collect())
        .collect()
}

fn dd(x: f64) -> Dd {
    Dd::from(x)
}

fn zero() -> Dd {
    dd(0.0)
}

fn round(x: Dd) -> f64 {
    x.hi() + x.lo()
}

fn round_rows(rows: &[Vec<Dd>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().copied().map(round).collect()).collect()
}

fn mask(layout: &SemanticLayout, y: usize, x: usize, class: usize) -> f64 {
    if layout.class_at(y, x) as usize == class {
        1.0
    } else {
        0.0
    }
}

fn cosine(a: &[Dd], b: &[Dd]) -> Dd {
    let (mut dot, mut na, mut nb) = (zero(), zero(), zero());
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    if round(denom) < 1e-12 {
        zero()
    } else {
        dot / denom
    }
}

fn distance(a: &[Dd], b: &[Dd]) -> Dd {
    let mut s = zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    if s == zero() {
        zero()
    } else {
        s.sqrt()
    }
}

/// `masked = false` evaluates the variance with the mask applied before the
/// mean is subtracted, over every pixel of the image.
pub fn reference(f: &Features, layout: &SemanticLayout, masked: bool) -> Reference {
    let (cf, h, w) = (f.len(), layout.height(), layout.width());
    let mut mu = vec![vec![zero(); cf]; NUM_CLASSES];
    let mut nu = vec![vec![zero(); cf]; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let mut size = 0.0;
        for y in 0..h {
            for x in 0..w {
                size += mask(layout, y, x, c);
            }
        }
        if size == 0.0 {
            continue;
        }
        for ch in 0..cf {
            let mut s = zero();
            for y in 0..h {
                for x in 0..w {
                    s += dd(mask(layout, y, x, c)) * dd(f[ch][y][x]);
                }
            }
            let mean = s / dd(size);
            let mut v = zero();
            for y in 0..h {
                for x in 0..w {
                    let m = mask(layout, y, x, c);
                    if masked {
                        if m == 1.0 {
                            let d = dd(f[ch][y][x]) - mean;
                            v += d * d;
                        }
                    } else {
                        let d = dd(m) * dd(f[ch][y][x]) - mean;
                        v += d * d;
                    }
                }
            }
            mu[c][ch] = mean;
            nu[c][ch] = v / dd(size);
        }
    }
    let pooled: Vec<Dd> = (0..cf)
        .map(|ch| {
            let mut s = zero();
            for &v in f[ch].iter().flatten() {
                s += dd(v);
            }
            s / dd((h * w) as f64)
        })
        .collect();
    let c1x: Vec<Dd> = mu.iter().map(|m| cosine(&pooled, m)).collect();
    let c2x: Vec<Dd> = nu.iter().map(|n| cosine(&pooled, n)).collect();
    let edges = |nodes: &Vec<Vec<Dd>>| -> Vec<Vec<Dd>> {
        (0..NUM_CLASSES)
            .map(|a| (0..NUM_CLASSES).map(|b| distance(&nodes[a], &nodes[b])).collect())
            .collect()
    };
    let (e1x, e2x) = (edges(&mu), edges(&nu));
    Reference {
        mu: round_rows(&mu),
        nu: round_rows(&nu),
        c1: c1x.iter().copied().map(round).collect(),
        c2: c2x.iter().copied().map(round).collect(),
        e1: round_rows(&e1x),
        e2: round_rows(&e2x),
        c1x,
        c2x,
        e1x,
        e2x,
    }
}

pub fn iag(a: &Reference, b: &Reference) -> f64 {
    let mut s = zero();
    for c in 0..NUM_CLASSES {
        let d1 = a.c1x[c] - b.c1x[c];
        let d2 = a.c2x[c] - b.c2x[c];
        s += d1 * d1 + d2 * d2;
    }
    round(s)
}

pub fn itg(a: &Reference, b: &Reference) -> f64 {
    let mut s = zero();
    for i in 0..NUM_CLASSES {
        for j in 0..NUM_CLASSES {
            let d1 = a.e1x[i][j] - b.e1x[i][j];
            let d2 = a.e2x[i][j] - b.e2x[i][j];
            s += d1 * d1 + d2 * d2;
        }
    }
    round(s)
}
