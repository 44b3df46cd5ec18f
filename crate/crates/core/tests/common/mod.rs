//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's own metric, statistics or scheduling code.
#![allow(dead_code)]

use crackseg::metrics::Mask;
use crackseg::nnops::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const FD_RTOL: f64 = 2e-2;
pub const FD_ATOL: f64 = 1e-6;
pub const MIN_COORDS: usize = 20;

/// Analytic and central-difference derivative agree within the gradient
/// check tolerance.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ATOL || diff <= FD_RTOL * analytic.abs().max(numeric.abs())
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[derive(Debug, Clone)]
pub struct CoordResult {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordResult {
    pub fn ok(&self) -> bool {
        grads_agree(self.analytic, self.numeric)
    }
}

/// Central-difference check of one recorded operation.
///
/// The output is projected onto a fixed random direction `r`, so one scalar
/// `sum(r * f(x))` exercises every output element. At least [`MIN_COORDS`]
/// input coordinates (all of them when there are fewer) are compared.
pub fn check_op(
    inputs: &[Tensor<f64>],
    differentiable: &[bool],
    seed: u64,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> Vec<CoordResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let r = uniform(&out_shape, -1.0, 1.0, &mut rng);
    let project = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars);
        tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().zip(differentiable).map(|(t, &d)| tape.leaf(t.clone(), d)).collect();
    let out = op(&mut tape, &vars);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).expect("projection shape");
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).expect("backward");

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if differentiable[i] {
            coords.extend((0..t.len()).map(|k| (i, k)));
        }
    }
    let want = coords.len().min(MIN_COORDS.max(24));
    // partial Fisher-Yates: a random subset without repeats
    for k in 0..want {
        let j = rng.gen_range(k..coords.len());
        coords.swap(k, j);
    }
    coords.truncate(want);

    coords
        .into_iter()
        .map(|(i, k)| {
            let analytic = grads.wrt(vars[i]).map(|g| g.data()[k]).unwrap_or(0.0);
            let mut xs = inputs.to_vec();
            let x0 = xs[i].data()[k];
            xs[i].data_mut()[k] = x0 + FD_EPS;
            let up = project(&xs);
            xs[i].data_mut()[k] = x0 - FD_EPS;
            let down = project(&xs);
            CoordResult { input: i, index: k, analytic, numeric: (up - down) / (2.0 * FD_EPS) }
        })
        .collect()
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

/// Counting reference for IoU-style scores.
pub struct BruteCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn brute_counts(p: &Mask, g: &Mask) -> BruteCounts {
    let (h, w) = p.dims();
    let mut c = BruteCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for y in 0..h {
        for x in 0..w {
            match (p.get(y, x), g.get(y, x)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn brute_miou(p: &Mask, g: &Mask) -> f64 {
    let c = brute_counts(p, g);
    let crack = ratio_or_one(c.tp, c.tp + c.fp + c.fn_);
    let background = ratio_or_one(c.tn, c.tn + c.fp + c.fn_);
    (crack + background) / 2.0
}

pub fn brute_dice(p: &Mask, g: &Mask) -> f64 {
    let c = brute_counts(p, g);
    ratio_or_one(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn brute_xor_fraction(p: &Mask, g: &Mask) -> f64 {
    let c = brute_counts(p, g);
    (c.fp + c.fn_) as f64 / (c.tp + c.fp + c.fn_ + c.tn) as f64
}

/// All-pairs symmetric Hausdorff distance in pixels; `None` when either
/// set is empty.
pub fn brute_hausdorff(p: &Mask, g: &Mask) -> Option<f64> {
    let (a, b) = (p.points(), g.points());
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let d2 = |u: (usize, usize), v: (usize, usize)| {
        let dy = u.0 as f64 - v.0 as f64;
        let dx = u.1 as f64 - v.1 as f64;
        dy * dy + dx * dx
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter().map(|&u| to.iter().map(|&v| d2(u, v)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    Some(directed(&a, &b).max(directed(&b, &a)).sqrt())
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Two-sided Student-t tail probability by composite Simpson integration of
/// the density over `[0, |t|]`.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let pdf = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
    }
    let central = s * h / 3.0;
    1.0 - 2.0 * central
}

/// Reduce-on-plateau and early stopping, written from the rule itself:
/// returns `(lr after each epoch, epoch index at which training stops)`.
pub fn plateau_reference(
    losses: &[f64],
    lr0: f64,
    factor: f64,
    patience: usize,
    stop_patience: usize,
    threshold: f64,
) -> (Vec<f64>, Option<usize>) {
    let mut lr = lr0;
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut since_cut = 0usize;
    let mut lrs = Vec::new();
    for (e, &l) in losses.iter().enumerate() {
        if l.is_finite() && (best == f64::INFINITY || l < best - threshold) {
            best = l;
            since_best = 0;
            since_cut = 0;
        } else {
            since_best += 1;
            since_cut += 1;
            if since_cut == patience {
                lr *= factor;
                since_cut = 0;
            }
        }
        lrs.push(lr);
        if since_best == stop_patience {
            return (lrs, Some(e));
        }
    }
    (lrs, None)
}
