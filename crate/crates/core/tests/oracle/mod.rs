//! Naive reference implementations on dense bitmaps and plain loops.
#![allow(dead_code)]

use patchmerge_core::synth::GtInstance;
use patchmerge_core::BinaryMask;

#[derive(Clone)]
pub struct Dense {
    pub w: usize,
    pub h: usize,
    pub px: Vec<bool>,
}

impl Dense {
    pub fn of(m: &BinaryMask) -> Self {
        let (w, h) = (m.width() as usize, m.height() as usize);
        let mut px = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                px[y * w + x] = m.contains(x as u32, y as u32);
            }
        }
        Self { w, h, px }
    }

    pub fn area(&self) -> usize {
        self.px.iter().filter(|&&b| b).count()
    }

    /// `(x0, y0, x1, y1)` with exclusive upper corners.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.px[y * self.w + x] {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0, y0, x1, y1)
    }

    pub fn and_count(&self, o: &Dense) -> usize {
        self.px.iter().zip(&o.px).filter(|(a, b)| **a && **b).count()
    }

    pub fn or(&self, o: &Dense) -> Dense {
        Dense { w: self.w, h: self.h, px: self.px.iter().zip(&o.px).map(|(a, b)| *a || *b).collect() }
    }
}

type Rect = (usize, usize, usize, usize);

fn rect_area(r: Rect) -> usize {
    (r.2 - r.0) * (r.3 - r.1)
}

/// Pixel-counted overlap of two boxes.
pub fn rect_inter(a: Rect, b: Rect) -> usize {
    let mut n = 0;
    for y in a.1..a.3 {
        for x in a.0..a.2 {
            if x >= b.0 && x < b.2 && y >= b.1 && y < b.3 {
                n += 1;
            }
        }
    }
    n
}

fn rect_hull(a: Rect, b: Rect) -> Rect {
    (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3))
}

pub fn giou(a: Rect, b: Rect) -> f64 {
    let i = rect_inter(a, b);
    let u = rect_area(a) + rect_area(b) - i;
    let hull = rect_area(rect_hull(a, b));
    i as f64 / u as f64 - (hull - u) as f64 / hull as f64
}

/// Thing instances in order, then one union region per class present, ascending.
pub fn units(gt: &[GtInstance]) -> Vec<(Dense, u32, bool)> {
    let mut out: Vec<(Dense, u32, bool)> = gt.iter().filter(|g| g.is_thing).map(|g| (Dense::of(&g.mask), g.class_id, true)).collect();
    let mut classes: Vec<u32> = gt.iter().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    for c in classes {
        let mut region: Option<Dense> = None;
        for g in gt.iter().filter(|g| g.class_id == c) {
            let d = Dense::of(&g.mask);
            region = Some(match region {
                None => d,
                Some(r) => r.or(&d),
            });
        }
        out.push((region.unwrap(), c, false));
    }
    out
}

pub fn g_matrix(targets: &[Dense], patches: &[Dense], tau: f64, lowq: f64) -> Vec<Vec<bool>> {
    let mut g = Vec::new();
    for t in targets {
        let tb = t.bbox();
        let mut row = Vec::new();
        for p in patches {
            let pb = p.bbox();
            let iop_box = rect_inter(pb, tb) as f64 / rect_area(pb) as f64;
            let iop_mask = t.and_count(p) as f64 / p.area() as f64;
            row.push(iop_box > tau && iop_mask > tau);
        }
        if !row.iter().any(|&b| b) {
            for (n, p) in patches.iter().enumerate() {
                let i = t.and_count(p);
                row[n] = i as f64 / (t.area() + p.area() - i) as f64 >= lowq;
            }
        }
        g.push(row);
    }
    g
}

pub fn focal(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y == 1.0 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Matching cost of target `t` (dense mask, class, G row) against a query
/// with affinity row `a` and class logit `logit`.
#[allow(clippy::too_many_arguments)]
pub fn cost(
    t: &Dense,
    g_row: &[bool],
    logit: f64,
    a: &[f64],
    patches: &[Dense],
    weights: [f64; 5],
    alpha: f64,
    gamma: f64,
) -> f64 {
    let (w, h) = (t.w as f64, t.h as f64);
    let p = sigmoid(logit).clamp(1e-8, 1.0 - 1e-8);
    let cls = alpha * (1.0 - p).powf(gamma) * -(p.ln()) - (1.0 - alpha) * p.powf(gamma) * -((1.0 - p).ln());
    let b: Vec<f64> = g_row.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    let nnz = b.iter().filter(|&&v| v == 1.0).count().max(1) as f64;
    let mut mfl = 0.0;
    for n in 0..a.len() {
        mfl += focal(a[n], b[n], alpha, gamma);
    }
    mfl /= nnz;
    let inter: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let total: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    let dice = if total == 0.0 { 0.0 } else { 1.0 - 2.0 * inter / total };
    let mut qb: Option<Rect> = None;
    for (n, pd) in patches.iter().enumerate() {
        if a[n] >= 0.5 {
            let r = pd.bbox();
            qb = Some(qb.map_or(r, |q| rect_hull(q, r)));
        }
    }
    let qb = qb.unwrap_or_else(|| {
        let mut best = 0;
        for n in 1..a.len() {
            if a[n] > a[best] {
                best = n;
            }
        }
        patches[best].bbox()
    });
    let tb = t.bbox();
    let norm = |r: Rect| [(r.0 + r.2) as f64 / (2.0 * w), (r.1 + r.3) as f64 / (2.0 * h), (r.2 - r.0) as f64 / w, (r.3 - r.1) as f64 / h];
    let l1: f64 = norm(qb).iter().zip(norm(tb)).map(|(x, y)| (x - y).abs()).sum();
    weights[0] * cls + weights[1] * mfl + weights[2] * dice + weights[3] * l1 + weights[4] * (1.0 - giou(qb, tb))
}

/// Exhaustive minimum-cost assignment of `min(rows, cols)` pairs. Among
/// optimal assignments (within `1e-9·(1 + |best|)`) the one whose
/// per-row column list is lexicographically smallest wins, where an
/// unassigned row sorts after every column.
pub fn brute_assign(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let k = rows.min(cols);
    let mut all: Vec<(f64, Vec<Option<usize>>)> = Vec::new();
    let mut cur = vec![None; rows];
    fn rec(
        r: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        left: usize,
        cost: &[f64],
        cols: usize,
        out: &mut Vec<(f64, Vec<Option<usize>>)>,
    ) {
        let rows = cur.len();
        if r == rows {
            if left == 0 {
                let c = cur.iter().enumerate().filter_map(|(i, c)| c.map(|c| cost[i * cols + c])).sum();
                out.push((c, cur.clone()));
            }
            return;
        }
        if rows - r < left {
            return;
        }
        for c in 0..cols {
            if !used[c] && left > 0 {
                used[c] = true;
                cur[r] = Some(c);
                rec(r + 1, used, cur, left - 1, cost, cols, out);
                used[c] = false;
                cur[r] = None;
            }
        }
        rec(r + 1, used, cur, left, cost, cols, out);
    }
    rec(0, &mut vec![false; cols], &mut cur, k, cost, cols, &mut all);
    let best = all.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + best.abs());
    let key = |v: &Vec<Option<usize>>| v.iter().map(|c| c.unwrap_or(usize::MAX)).collect::<Vec<_>>();
    let chosen = all.iter().filter(|a| a.0 <= best + tol).min_by_key(|a| key(&a.1)).unwrap();
    chosen.1.iter().enumerate().filter_map(|(r, c)| c.map(|c| (r, c))).collect()
}

pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
}
