//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::cma::MiningMethod;
use xmodal::numerics::Matrix;
use xmodal::synthdata::{generate, Dataset, DatasetSpec};

pub const FLOOR: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    let mut m = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    for r in 0..n {
        let row = m.row_mut(r);
        let len = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= len);
    }
    m
}

/// `exp(xᵀm/τ) / (N·Z̄)`
pub fn instance_prob(x: &[f64], m: &[f64], tau: f64, zbar: f64, n: usize) -> f64 {
    (dot(x, m) / tau).exp() / (n as f64 * zbar)
}

/// `P / (P + K/N)`
pub fn data_prob(p: f64, k: usize, n: usize) -> f64 {
    p / (p + k as f64 / n as f64)
}

/// Mean over `positives` of `−log P(D=1)` plus the floored noise terms.
pub fn nce(x: &[f64], positives: &[&[f64]], negatives: &[&[f64]], tau: f64, zbar: f64, n: usize) -> f64 {
    let k = negatives.len();
    let pos: f64 = positives
        .iter()
        .map(|m| -data_prob(instance_prob(x, m, tau, zbar, n), k, n).ln())
        .sum::<f64>()
        / positives.len() as f64;
    let neg: f64 = negatives
        .iter()
        .map(|m| -(1.0 - data_prob(instance_prob(x, m, tau, zbar, n), k, n)).max(FLOOR).ln())
        .sum();
    pos + neg
}

/// Batch mean of `nce` for features `x` against rows of `memory`.
pub fn batch_nce(
    x: &Matrix,
    memory: &Matrix,
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    tau: f64,
    zbar: f64,
) -> f64 {
    let n = memory.rows();
    let mut total = 0.0;
    for b in 0..x.rows() {
        let pos: Vec<&[f64]> = positives[b].iter().map(|&j| memory.row(j)).collect();
        let neg: Vec<&[f64]> = negatives[b].iter().map(|&j| memory.row(j)).collect();
        total += nce(x.row(b), &pos, &neg, tau, zbar, n);
    }
    total / x.rows() as f64
}

/// Full ranking of `scores` (self excluded): descending score, ascending id.
pub fn full_ranking(scores: &[f64], i: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|&j| j != i).collect();
    ids.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]).unwrap() {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    ids
}

/// Quadratic-time reference miner.
pub fn brute_force_mine(video: &Matrix, audio: &Matrix, k: usize, method: MiningMethod) -> Vec<Vec<usize>> {
    let n = video.rows();
    (0..n)
        .map(|i| {
            let sv: Vec<f64> = (0..n).map(|j| dot(video.row(i), video.row(j))).collect();
            let sa: Vec<f64> = (0..n).map(|j| dot(audio.row(i), audio.row(j))).collect();
            match method {
                MiningMethod::VideoOnly => full_ranking(&sv, i)[..k].to_vec(),
                MiningMethod::AudioOnly => full_ranking(&sa, i)[..k].to_vec(),
                MiningMethod::Cma => {
                    let s: Vec<f64> = sv.iter().zip(&sa).map(|(a, b)| a.min(*b)).collect();
                    full_ranking(&s, i)[..k].to_vec()
                }
                MiningMethod::Union => {
                    let rv = full_ranking(&sv, i);
                    let ra = full_ranking(&sa, i);
                    let mut chosen: Vec<usize> = rv[..k - k / 2].to_vec();
                    for &j in &ra[..k / 2] {
                        if !chosen.contains(&j) {
                            chosen.push(j);
                        }
                    }
                    let (mut pv, mut pa) = (k - k / 2, k / 2);
                    let mut video_turn = true;
                    while chosen.len() < k {
                        let (list, p) = if video_turn { (&rv, &mut pv) } else { (&ra, &mut pa) };
                        while *p < list.len() {
                            let j = list[*p];
                            *p += 1;
                            if !chosen.contains(&j) {
                                chosen.push(j);
                                break;
                            }
                        }
                        video_turn = !video_turn;
                    }
                    let best: Vec<f64> = sv.iter().zip(&sa).map(|(a, b)| a.max(*b)).collect();
                    chosen.sort_by(|&a, &b| match best[b].partial_cmp(&best[a]).unwrap() {
                        Ordering::Equal => a.cmp(&b),
                        o => o,
                    });
                    chosen
                }
            }
        })
        .collect()
}

/// Central finite difference of `f` with respect to every entry of `p`.
pub fn finite_difference(p: &mut Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let (r, c) = p.shape();
    let mut g = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let orig = p.get(i, j);
            p.set(i, j, orig + h);
            let up = f(p);
            p.set(i, j, orig - h);
            let down = f(p);
            p.set(i, j, orig);
            g.set(i, j, (up - down) / (2.0 * h));
        }
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all entries of both lists.
pub fn relative_error(a: &[Matrix], b: &[Matrix]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nb += v * v;
        }
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

pub fn small_dataset(seed: u64) -> Dataset {
    generate(&DatasetSpec {
        num_classes: 4,
        instances_per_class: 12,
        dim_a: 6,
        dim_b: 5,
        confound_pairs_a: vec![(0, 1)],
        confound_pairs_b: vec![(2, 3)],
        seed,
        ..DatasetSpec::default()
    })
    .expect("valid spec")
}
