//! Noise-contrastive instance discrimination against memory targets.
//!
//! A feature `x` is scored against a memory row `m` through the
//! unnormalized softmax `P(i|x) = exp(xᵀm/τ) / (N·Z̄)`, and the binary
//! data-vs-noise posterior `P(D=1) = P / (P + K/N)`. The per-instance loss
//! is `−log P(D=1 | target) − Σ_noise log(1 − P(D=1 | noise))`.
//!
//! The three variants differ only in which memory supplies the target:
//! the same modality (self), the other modality (cross), or both (joint).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::membank::{MemoryBank, Modality};
use crate::numerics::{dot, Tape, Var};

/// Floor applied to `1 − P(D=1)` before taking its log.
pub const NOISE_PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NceContext {
    pub tau: f64,
    pub zbar: f64,
    /// Dataset size.
    pub n: usize,
    /// Noise samples per instance.
    pub k: usize,
}

impl NceContext {
    pub fn new(tau: f64, zbar: f64, n: usize, k: usize) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {tau}")));
        }
        if !(zbar > 0.0 && zbar.is_finite()) {
            return Err(Error::config(format!("zbar must be > 0, got {zbar}")));
        }
        if k < 1 || n < 2 {
            return Err(Error::config(format!("need k >= 1 and n >= 2, got k={k}, n={n}")));
        }
        Ok(Self { tau, zbar, n, k })
    }

    /// `P(i | x)` for a similarity `xᵀm`.
    pub fn instance_prob(&self, sim: f64) -> f64 {
        (sim / self.tau).exp() / (self.n as f64 * self.zbar)
    }

    /// `P(D=1 | x, m)`.
    pub fn data_prob(&self, sim: f64) -> f64 {
        let p = self.instance_prob(sim);
        p / (p + self.k as f64 / self.n as f64)
    }

    /// `−log P(D=1)` and its derivative in the similarity.
    #[inline]
    pub(crate) fn positive_term(&self, sim: f64) -> (f64, f64) {
        // (K/N) / P = K·Z̄·exp(−s/τ), handled in log space so it cannot overflow
        let log_r = (self.k as f64 * self.zbar).ln() - sim / self.tau;
        let (loss, frac) = if log_r > 0.0 {
            let e = (-log_r).exp();
            (log_r + e.ln_1p(), 1.0 / (1.0 + e))
        } else {
            let r = log_r.exp();
            (r.ln_1p(), r / (1.0 + r))
        };
        (loss, -frac / self.tau)
    }

    /// `−log(1 − P(D=1))`, floored, and its derivative in the similarity.
    #[inline]
    pub(crate) fn negative_term(&self, sim: f64) -> (f64, f64) {
        // P / (K/N) = exp(s/τ) / (K·Z̄); 1 − P(D=1) = 1 / (1 + u)
        let u = (sim / self.tau).exp() / (self.k as f64 * self.zbar);
        if 1.0 / (1.0 + u) < NOISE_PROB_FLOOR {
            return (-NOISE_PROB_FLOOR.ln(), 0.0);
        }
        (u.ln_1p(), u / (self.tau * (1.0 + u)))
    }
}

/// `P(i | x)` for a feature and its memory target.
pub fn instance_prob(x: &[f64], target: &[f64], ctx: &NceContext) -> f64 {
    ctx.instance_prob(dot(x, target))
}

/// Untraced single-instance loss.
pub fn nce_loss(x: &[f64], target: &[f64], negatives: &[&[f64]], ctx: &NceContext) -> Result<f64> {
    if negatives.len() != ctx.k {
        return Err(Error::contract(format!(
            "context expects {} negatives, got {}",
            ctx.k,
            negatives.len()
        )));
    }
    let pos = ctx.positive_term(dot(x, target)).0;
    let neg: f64 = negatives.iter().map(|m| ctx.negative_term(dot(x, m)).0).sum();
    Ok(pos + neg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AvidVariant {
    #[serde(rename = "self")]
    SelfAvid,
    #[serde(rename = "cross")]
    CrossAvid,
    #[serde(rename = "joint")]
    JointAvid,
}

impl AvidVariant {
    pub const ALL: [AvidVariant; 3] = [AvidVariant::SelfAvid, AvidVariant::CrossAvid, AvidVariant::JointAvid];

    pub fn name(self) -> &'static str {
        match self {
            AvidVariant::SelfAvid => "self",
            AvidVariant::CrossAvid => "cross",
            AvidVariant::JointAvid => "joint",
        }
    }
}

impl fmt::Display for AvidVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AvidVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(AvidVariant::SelfAvid),
            "cross" => Ok(AvidVariant::CrossAvid),
            "joint" => Ok(AvidVariant::JointAvid),
            other => Err(Error::config(format!("unknown variant {other:?} (self|cross|joint)"))),
        }
    }
}

/// Batch-mean value of every loss term present in an objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_v_to_a: Option<f64>,
    pub cross_a_to_v: Option<f64>,
    pub self_v: Option<f64>,
    pub self_a: Option<f64>,
    pub wmpd_v: Option<f64>,
    pub wmpd_a: Option<f64>,
}

impl LossBreakdown {
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        [
            ("cross_v_to_a", self.cross_v_to_a),
            ("cross_a_to_v", self.cross_a_to_v),
            ("self_v", self.self_v),
            ("self_a", self.self_a),
            ("wmpd_v", self.wmpd_v),
            ("wmpd_a", self.wmpd_a),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// A scalar loss node plus the values of its parts.
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

pub(crate) fn context_for(bank: &MemoryBank, target: Modality, tau: f64, k: usize) -> Result<NceContext> {
    let zbar = bank
        .zbar(target)
        .ok_or_else(|| Error::contract("partition constant not estimated yet"))?;
    NceContext::new(tau, zbar, bank.len(), k)
}

pub(crate) fn uniform_width(lists: &[Vec<usize>], what: &str) -> Result<usize> {
    let k = lists.first().map_or(0, Vec::len);
    if lists.iter().any(|l| l.len() != k) {
        return Err(Error::contract(format!("{what} lists must all have the same length")));
    }
    Ok(k)
}

/// Batch-mean NCE of features `x` against `target` memory. Row `b` uses
/// `positives[b]` as data targets (averaged) and `negatives[b]` as noise.
pub(crate) fn nce_term<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    bank: &'a MemoryBank,
    target: Modality,
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<(Var, f64)> {
    let b = tape.value(x).rows();
    if positives.len() != b || negatives.len() != b {
        return Err(Error::contract(format!(
            "batch of {b} rows needs {b} positive and negative lists, got {} and {}",
            positives.len(),
            negatives.len()
        )));
    }
    let p = uniform_width(positives, "positive")?;
    let k = uniform_width(negatives, "negative")?;
    if p == 0 {
        return Err(Error::contract("at least one positive per row"));
    }
    let ctx = context_for(bank, target, tau, k)?;
    let mut ids = Vec::with_capacity(b * (p + k));
    for (pos, neg) in positives.iter().zip(negatives) {
        ids.extend_from_slice(pos);
        ids.extend_from_slice(neg);
    }
    let sims = tape.gather_dot(x, bank.memory(target), ids, p + k)?;
    let rows = tape.nce(sims, p, ctx)?;
    let mean = tape.mean(rows);
    let value = tape.scalar(mean);
    Ok((mean, value))
}

fn self_targets(ids: &[usize]) -> Vec<Vec<usize>> {
    ids.iter().map(|&i| vec![i]).collect()
}

fn check_batch(tape: &Tape<'_>, v: Var, a: Var, ids: &[usize], bank: &MemoryBank) -> Result<()> {
    let (vr, ar) = (tape.value(v).rows(), tape.value(a).rows());
    if vr != ids.len() || ar != ids.len() {
        return Err(Error::contract(format!(
            "{} ids for {vr} video and {ar} audio rows",
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= bank.len()) {
        return Err(Error::IdOutOfRange { id: bad, n: bank.len() });
    }
    Ok(())
}

/// Same-modality targets: `NCE(v; v̄_i) + NCE(a; ā_i)`.
pub fn self_avid<'a>(
    tape: &mut Tape<'a>,
    v: Var,
    a: Var,
    bank: &'a MemoryBank,
    ids: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<LossOutput> {
    check_batch(tape, v, a, ids, bank)?;
    let targets = self_targets(ids);
    let (lv, sv) = nce_term(tape, v, bank, Modality::Video, &targets, negatives, tau)?;
    let (la, sa) = nce_term(tape, a, bank, Modality::Audio, &targets, negatives, tau)?;
    let total = tape.add(lv, la)?;
    Ok(LossOutput {
        total,
        breakdown: LossBreakdown {
            total: tape.scalar(total),
            self_v: Some(sv),
            self_a: Some(sa),
            ..Default::default()
        },
    })
}

/// Other-modality targets: `NCE(v; ā_i) + NCE(a; v̄_i)`, with noise drawn
/// from the target's memory.
pub fn cross_avid<'a>(
    tape: &mut Tape<'a>,
    v: Var,
    a: Var,
    bank: &'a MemoryBank,
    ids: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<LossOutput> {
    check_batch(tape, v, a, ids, bank)?;
    let targets = self_targets(ids);
    let (lva, sva) = nce_term(tape, v, bank, Modality::Audio, &targets, negatives, tau)?;
    let (lav, sav) = nce_term(tape, a, bank, Modality::Video, &targets, negatives, tau)?;
    let total = tape.add(lva, lav)?;
    Ok(LossOutput {
        total,
        breakdown: LossBreakdown {
            total: tape.scalar(total),
            cross_v_to_a: Some(sva),
            cross_a_to_v: Some(sav),
            ..Default::default()
        },
    })
}

/// Self plus cross.
pub fn joint_avid<'a>(
    tape: &mut Tape<'a>,
    v: Var,
    a: Var,
    bank: &'a MemoryBank,
    ids: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<LossOutput> {
    let s = self_avid(tape, v, a, bank, ids, negatives, tau)?;
    let c = cross_avid(tape, v, a, bank, ids, negatives, tau)?;
    let total = tape.add(s.total, c.total)?;
    Ok(LossOutput {
        total,
        breakdown: LossBreakdown {
            total: tape.scalar(total),
            self_v: s.breakdown.self_v,
            self_a: s.breakdown.self_a,
            cross_v_to_a: c.breakdown.cross_v_to_a,
            cross_a_to_v: c.breakdown.cross_a_to_v,
            ..Default::default()
        },
    })
}

#[allow(clippy::too_many_arguments)]
pub fn avid_loss<'a>(
    variant: AvidVariant,
    tape: &mut Tape<'a>,
    v: Var,
    a: Var,
    bank: &'a MemoryBank,
    ids: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<LossOutput> {
    match variant {
        AvidVariant::SelfAvid => self_avid(tape, v, a, bank, ids, negatives, tau),
        AvidVariant::CrossAvid => cross_avid(tape, v, a, bank, ids, negatives, tau),
        AvidVariant::JointAvid => joint_avid(tape, v, a, bank, ids, negatives, tau),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, NORM_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn instance_prob_hand_values() {
        let ctx = NceContext::new(1.0, (E + 1.0) / 2.0, 2, 1).unwrap();
        let p = instance_prob(&[1.0, 0.0], &[1.0, 0.0], &ctx);
        assert!((p - E / (E + 1.0)).abs() < 1e-15);
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((ctx.data_prob(1.0) - 0.593_845_484_951_309_4).abs() < 1e-12);

        // N = 1 is below the loss contract, so evaluate the formula directly
        let unit = NceContext { tau: 1.0, zbar: 1.0, n: 1, k: 1 };
        assert_eq!(instance_prob(&[1.0, 0.0], &[0.0, 1.0], &unit), 1.0);
    }

    #[test]
    fn instance_prob_is_monotone() {
        let ctx = NceContext::new(0.07, 2.2, 100, 10).unwrap();
        let grid: Vec<f64> = (0..=40).map(|k| -1.0 + k as f64 * 0.05).collect();
        for w in grid.windows(2) {
            assert!(ctx.instance_prob(w[1]) > ctx.instance_prob(w[0]));
        }
    }

    #[test]
    fn context_validation() {
        assert!(NceContext::new(0.0, 1.0, 10, 1).is_err());
        assert!(NceContext::new(0.1, 0.0, 10, 1).is_err());
        assert!(NceContext::new(0.1, 1.0, 10, 0).is_err());
        assert!(NceContext::new(0.1, 1.0, 1, 1).is_err());
    }

    #[test]
    fn nce_loss_hand_value() {
        // K = 1, N = 2, negative orthogonal to x: P(D=1|neg) = 1/(1+e)
        let ctx = NceContext::new(1.0, (E + 1.0) / 2.0, 2, 1).unwrap();
        let x = [1.0, 0.0];
        let l = nce_loss(&x, &x, &[&[0.0, 1.0]], &ctx).unwrap();
        let p1 = E / (E + 1.0);
        let d1 = p1 / (p1 + 0.5);
        let p0 = 1.0 / (E + 1.0);
        let d0 = p0 / (p0 + 0.5);
        let want = -d1.ln() - (1.0 - d0).ln();
        assert!((l - want).abs() < 1e-14, "{l} vs {want}");
        assert!(nce_loss(&x, &x, &[], &ctx).is_err());
    }

    #[test]
    fn extreme_similarity_is_floored_not_infinite() {
        let ctx = NceContext::new(0.001, 1.0, 10, 1).unwrap();
        let (l, g) = ctx.negative_term(1.0);
        assert!((l - 27.631_021_115_928_547).abs() < 1e-9);
        assert_eq!(g, 0.0);
        let (l, _) = ctx.positive_term(-1.0);
        assert!(l.is_finite());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AvidVariant::ALL {
            assert_eq!(v.name().parse::<AvidVariant>().unwrap(), v);
        }
        assert!("both".parse::<AvidVariant>().is_err());
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)).l2_normalize_rows(NORM_EPS)
    }

    #[test]
    fn symmetric_inputs_make_self_equal_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mem = unit_rows(&mut rng, 10, 5);
        let mut bank = MemoryBank::from_embeddings(&mem, &mem, 0.5).unwrap();
        let probe = mem.select_rows(&[0, 1]);
        bank.estimate_zbar(&probe, &probe, 0.2).unwrap();
        let x = unit_rows(&mut rng, 3, 5);
        let ids = [1, 4, 7];
        let negs = vec![vec![0, 2, 3], vec![5, 6, 0], vec![9, 8, 1]];
        let run = |variant| {
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let a = tape.input(x.clone());
            avid_loss(variant, &mut tape, v, a, &bank, &ids, &negs, 0.2).unwrap().breakdown
        };
        let s = run(AvidVariant::SelfAvid);
        let c = run(AvidVariant::CrossAvid);
        let j = run(AvidVariant::JointAvid);
        assert_eq!(s.total, c.total);
        assert!((j.total - 2.0 * s.total).abs() < 1e-12);
        assert!((j.total - s.total - c.total).abs() < 1e-12);
        assert_eq!(j.terms().len(), 4);
    }

    #[test]
    fn unestimated_partition_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mem = unit_rows(&mut rng, 4, 3);
        let bank = MemoryBank::from_embeddings(&mem, &mem, 0.5).unwrap();
        let mut tape = Tape::new();
        let v = tape.input(mem.select_rows(&[0]));
        let a = tape.input(mem.select_rows(&[0]));
        let r = cross_avid(&mut tape, v, a, &bank, &[0], &[vec![1]], 0.1);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mem = unit_rows(&mut rng, 4, 3);
        let mut bank = MemoryBank::from_embeddings(&mem, &mem, 0.5).unwrap();
        bank.estimate_zbar(&mem, &mem, 0.1).unwrap();
        let mut tape = Tape::new();
        let v = tape.input(mem.select_rows(&[0]));
        let a = tape.input(mem.select_rows(&[0]));
        assert!(matches!(
            cross_avid(&mut tape, v, a, &bank, &[4], &[vec![1]], 0.1),
            Err(Error::IdOutOfRange { .. })
        ));
        assert!(matches!(
            cross_avid(&mut tape, v, a, &bank, &[0], &[vec![9]], 0.1),
            Err(Error::IdOutOfRange { .. })
        ));
    }
}
