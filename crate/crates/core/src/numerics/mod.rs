//! Dense matrices, a reverse-mode tape, and Adam.

mod adam;
mod matrix;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{dot, norm, Matrix};
pub use tape::{Gradients, Tape, Var};

/// Guard used by row normalization and the Adam denominator.
pub const NORM_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avid_loss::NceContext;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` around `x`, compared with `analytic`.
    fn check(x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64, tol: f64) {
        let h = 1e-5;
        for k in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = analytic.data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < tol || (fd - an).abs() < 1e-9, "coord {k}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::new();
        let p = t.input(Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap());
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let pv = Matrix::from_rows(&[[1.0, -2.0, 0.25]]).unwrap();
        let mut t = Tape::new();
        let p = t.input(pv.clone());
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &pv);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut t = Tape::new();
        let p = t.input(Matrix::zeros(2, 2));
        assert!(t.backward(p).is_err());
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = random(&mut rng, 3, 4);
            let w = random(&mut rng, 3, 4);
            let eval = |x: &Matrix| {
                let y = x.l2_normalize_rows(NORM_EPS);
                y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let wv = t.input(w.clone());
            let y = t.l2_normalize_rows(xv, NORM_EPS);
            let p = t.mul(y, wv).unwrap();
            let l = t.sum(p);
            let g = t.backward(l).unwrap();
            check(&x, g.get(xv).unwrap(), eval, 1e-6);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 4, 3);
        let w1 = random(&mut rng, 3, 5);
        let b1 = random(&mut rng, 1, 5);
        let w2 = random(&mut rng, 5, 2);
        let build = |t: &mut Tape, w1m: &Matrix| {
            let xv = t.input(x.clone());
            let w1v = t.input(w1m.clone());
            let b1v = t.input(b1.clone());
            let w2v = t.input(w2.clone());
            let h = t.matmul(xv, w1v).unwrap();
            let h = t.add_row(h, b1v).unwrap();
            let h = t.relu(h);
            let o = t.matmul(h, w2v).unwrap();
            let o = t.l2_normalize_rows(o, NORM_EPS);
            let sq = t.mul(o, o).unwrap();
            let sq = t.add(sq, o).unwrap();
            let l = t.mean(sq);
            (w1v, l)
        };
        let mut t = Tape::new();
        let (w1v, l) = build(&mut t, &w1);
        let g = t.backward(l).unwrap();
        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let (_, l) = build(&mut t, m);
            t.scalar(l)
        };
        check(&w1, g.get(w1v).unwrap(), eval, 1e-6);
    }

    #[test]
    fn gather_dot_and_nce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = random(&mut rng, 6, 4).l2_normalize_rows(NORM_EPS);
        let x = random(&mut rng, 2, 4).l2_normalize_rows(NORM_EPS);
        let ids = vec![0, 1, 3, 4, 2, 1, 5, 0];
        let ctx = NceContext::new(0.5, 1.7, 6, 3).unwrap();
        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let xv = t.input(m.clone());
            let s = t.gather_dot(xv, &table, ids.clone(), 4).unwrap();
            let l = t.nce(s, 1, ctx).unwrap();
            let l = t.mean(l);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let s = t.gather_dot(xv, &table, ids.clone(), 4).unwrap();
        let l = t.nce(s, 1, ctx).unwrap();
        let l = t.mean(l);
        let g = t.backward(l).unwrap();
        check(&x, g.get(xv).unwrap(), eval, 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&mut rng, 5, 3);
        let labels = [0, 2, 1, 1, 0];
        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.input(m.clone());
            let l = t.softmax_cross_entropy(v, &labels).unwrap();
            t.scalar(l)
        };
        let mut t = Tape::new();
        let v = t.input(logits.clone());
        let l = t.softmax_cross_entropy(v, &labels).unwrap();
        let g = t.backward(l).unwrap();
        check(&logits, g.get(v).unwrap(), eval, 1e-6);
    }

    #[test]
    fn tape_evaluation_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let a = random(&mut rng, 8, 8);
            let b = random(&mut rng, 8, 8);
            let mut t = Tape::new();
            let av = t.input(a);
            let bv = t.input(b);
            let c = t.matmul(av, bv).unwrap();
            let c = t.l2_normalize_rows(c, NORM_EPS);
            let l = t.sum(c);
            let g = t.backward(l).unwrap();
            (t.value(c).clone(), g.get(av).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
