//! Cross-modal agreement.
//!
//! Two instances agree when their memories are close in *both* modalities:
//! `ρ_ij = min(v̄_iᵀv̄_j, ā_iᵀā_j)`. Each instance's positive set is its
//! top-`K` agreements (self excluded); negatives are drawn from everything
//! else. Training combines cross-modal instance discrimination with
//! within-modal discrimination of the mined positives.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::avid_loss::{nce_term, LossBreakdown, LossOutput};
use crate::error::{Error, FormatError, Result};
use crate::format::{Reader, Writer};
use crate::membank::{sample_excluding, MemoryBank, Modality};
use crate::numerics::{dot, Tape, Var};

const MAGIC: &[u8; 4] = b"XMAG";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMethod {
    /// Agreement in both modalities.
    Cma,
    VideoOnly,
    AudioOnly,
    /// Half from each modality's neighbors.
    Union,
}

impl MiningMethod {
    pub const ALL: [MiningMethod; 4] = [
        MiningMethod::Cma,
        MiningMethod::VideoOnly,
        MiningMethod::AudioOnly,
        MiningMethod::Union,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MiningMethod::Cma => "cma",
            MiningMethod::VideoOnly => "video_only",
            MiningMethod::AudioOnly => "audio_only",
            MiningMethod::Union => "union",
        }
    }

    fn tag(self) -> u8 {
        match self {
            MiningMethod::Cma => 0,
            MiningMethod::VideoOnly => 1,
            MiningMethod::AudioOnly => 2,
            MiningMethod::Union => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == t)
    }
}

impl fmt::Display for MiningMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MiningMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mining method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmaConfig {
    /// Positives mined per instance.
    pub k_pool: usize,
    /// Positives sampled from the pool per loss evaluation.
    pub k_p: usize,
    /// Negatives per loss evaluation.
    pub k_n: usize,
    pub lambda: f64,
    /// Epochs between re-mining.
    pub refresh_period: usize,
    pub method: MiningMethod,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self {
            k_pool: 32,
            k_p: 32,
            k_n: 1024,
            lambda: 1.0,
            refresh_period: 50,
            method: MiningMethod::Cma,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_p == 0 || self.k_p > self.k_pool {
            return Err(Error::config(format!(
                "need 1 <= k_p <= k_pool, got k_p={} k_pool={}",
                self.k_p, self.k_pool
            )));
        }
        if self.k_n == 0 {
            return Err(Error::config("k_n must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be >= 0"));
        }
        if self.refresh_period == 0 {
            return Err(Error::config("refresh_period must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementSets {
    pub method: MiningMethod,
    pub mined_epoch: u64,
    pub k_pool: usize,
    /// Per instance, ids sorted by descending score (ties: smaller id first).
    pub positives: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
}

/// `min(v̄_iᵀv̄_j, ā_iᵀā_j)` on memory rows.
pub fn agreement_score(bank: &MemoryBank, i: usize, j: usize) -> Result<f64> {
    let n = bank.len();
    for id in [i, j] {
        if id >= n {
            return Err(Error::IdOutOfRange { id, n });
        }
    }
    let sv = dot(bank.video().row(i), bank.video().row(j));
    let sa = dot(bank.audio().row(i), bank.audio().row(j));
    Ok(sv.min(sa))
}

/// Descending score, then ascending id.
#[inline]
fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn top_k(mut cands: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if k < cands.len() {
        cands.select_nth_unstable_by(k, rank);
        cands.truncate(k);
    }
    cands.sort_unstable_by(rank);
    cands
}

fn mine_row(bank: &MemoryBank, i: usize, k: usize, method: MiningMethod) -> (Vec<usize>, Vec<f64>) {
    let (vm, am) = (bank.video(), bank.audio());
    let (vi, ai) = (vm.row(i), am.row(i));
    let n = bank.len();
    let sims = |table: &crate::numerics::Matrix, row: &[f64]| -> Vec<(f64, usize)> {
        (0..n).filter(|&j| j != i).map(|j| (dot(row, table.row(j)), j)).collect()
    };
    let picked = match method {
        MiningMethod::VideoOnly => top_k(sims(vm, vi), k),
        MiningMethod::AudioOnly => top_k(sims(am, ai), k),
        MiningMethod::Cma => {
            let c = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(vi, vm.row(j)).min(dot(ai, am.row(j))), j))
                .collect();
            top_k(c, k)
        }
        MiningMethod::Union => {
            let sv = sims(vm, vi);
            let sa = sims(am, ai);
            // sv and sa are indexed identically: position p holds candidate id
            let best: Vec<f64> = sv.iter().zip(&sa).map(|(a, b)| a.0.max(b.0)).collect();
            let rv = top_k(sv, k);
            let ra = top_k(sa, k);
            let chosen = union_select(&rv, &ra, k);
            let pos = |j: usize| if j < i { j } else { j - 1 };
            let scored = chosen.into_iter().map(|j| (best[pos(j)], j)).collect();
            top_k(scored, k)
        }
    };
    picked.into_iter().map(|(s, j)| (j, s)).unzip()
}

/// `⌈k/2⌉` from the video ranking and `⌊k/2⌋` from the audio ranking, then
/// refill duplicates by alternating next-best, video first.
fn union_select(rv: &[(f64, usize)], ra: &[(f64, usize)], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let take_v = k - k / 2;
    let take_a = k / 2;
    let (mut pv, mut pa) = (0, 0);
    for &(_, j) in &rv[..take_v.min(rv.len())] {
        chosen.push(j);
        pv += 1;
    }
    for &(_, j) in &ra[..take_a.min(ra.len())] {
        pa += 1;
        if !chosen.contains(&j) {
            chosen.push(j);
        }
    }
    let mut video_turn = true;
    while chosen.len() < k && (pv < rv.len() || pa < ra.len()) {
        let (list, p) = if video_turn { (rv, &mut pv) } else { (ra, &mut pa) };
        while *p < list.len() {
            let j = list[*p].1;
            *p += 1;
            if !chosen.contains(&j) {
                chosen.push(j);
                break;
            }
        }
        video_turn = !video_turn;
    }
    chosen
}

/// Top-`k_pool` positives for every instance. Rows are mined independently,
/// split over `threads` workers; the result does not depend on `threads`.
pub fn mine(
    bank: &MemoryBank,
    k_pool: usize,
    method: MiningMethod,
    mined_epoch: u64,
    threads: usize,
) -> Result<AgreementSets> {
    let n = bank.len();
    if k_pool == 0 || k_pool >= n {
        return Err(Error::config(format!("k_pool must satisfy 1 <= k_pool < N, got {k_pool} with N = {n}")));
    }
    let threads = threads.clamp(1, n);
    let rows: Vec<(Vec<usize>, Vec<f64>)> = if threads == 1 {
        (0..n).map(|i| mine_row(bank, i, k_pool, method)).collect()
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| {
                    s.spawn(move || {
                        (start..(start + chunk).min(n))
                            .map(|i| mine_row(bank, i, k_pool, method))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("mining worker panicked"))
                .collect()
        })
    };
    let (positives, scores) = rows.into_iter().unzip();
    Ok(AgreementSets {
        method,
        mined_epoch,
        k_pool,
        positives,
        scores,
    })
}

/// Precision@κ for κ = 1..=k: mean fraction of the first κ positives that
/// share the instance's label.
pub fn precision_at_k(sets: &AgreementSets, labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > sets.k_pool {
        return Err(Error::config(format!("k must lie in 1..={}, got {k}", sets.k_pool)));
    }
    if labels.len() != sets.positives.len() {
        return Err(Error::contract(format!(
            "{} labels for {} instances",
            labels.len(),
            sets.positives.len()
        )));
    }
    let n = labels.len() as f64;
    let mut hits = vec![0.0; k];
    for (i, pos) in sets.positives.iter().enumerate() {
        let mut running = 0usize;
        for (kk, &j) in pos.iter().take(k).enumerate() {
            if labels[j] == labels[i] {
                running += 1;
            }
            hits[kk] += running as f64 / (kk + 1) as f64;
        }
    }
    Ok(hits.into_iter().map(|h| h / n).collect())
}

/// Whether positives should be re-mined at this epoch of the refinement phase.
pub fn refresh_schedule(epoch: usize, period: usize) -> bool {
    period > 0 && epoch.is_multiple_of(period)
}

/// `k_p` distinct entries of `positives[i]`, uniformly at random.
pub fn sample_positives<R: Rng + ?Sized>(sets: &AgreementSets, i: usize, k_p: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pool = sets
        .positives
        .get(i)
        .ok_or(Error::IdOutOfRange { id: i, n: sets.positives.len() })?;
    if k_p > pool.len() {
        return Err(Error::config(format!("k_p {k_p} exceeds pool of {}", pool.len())));
    }
    Ok(rand::seq::index::sample(rng, pool.len(), k_p)
        .into_iter()
        .map(|p| pool[p])
        .collect())
}

/// `k_n` negatives for instance `i`, avoiding `i` and its whole positive pool.
pub fn sample_cma_negatives<R: Rng + ?Sized>(
    sets: &AgreementSets,
    i: usize,
    k_n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = sets.positives.len();
    let pool = sets.positives.get(i).ok_or(Error::IdOutOfRange { id: i, n })?;
    sample_excluding(n, i, k_n, rng, pool)
}

fn check_disjoint(
    sets: &AgreementSets,
    ids: &[usize],
    sampled_positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
) -> Result<()> {
    if sampled_positives.len() != ids.len() || negatives.len() != ids.len() {
        return Err(Error::contract("positive and negative lists must match the batch"));
    }
    for ((&i, pos), neg) in ids.iter().zip(sampled_positives).zip(negatives) {
        let pool = sets
            .positives
            .get(i)
            .ok_or(Error::IdOutOfRange { id: i, n: sets.positives.len() })?;
        if let Some(p) = pos.iter().find(|p| !pool.contains(p)) {
            return Err(Error::contract(format!("sampled positive {p} is not in the pool of {i}")));
        }
        if let Some(j) = neg.iter().find(|&&j| j == i || pool.contains(&j)) {
            return Err(Error::contract(format!("negative {j} overlaps the positives of {i}")));
        }
    }
    Ok(())
}

/// Within-modal positive discrimination: for each modality, the mean over
/// sampled positives `p` of `NCE(x_i; x̄_p)`, noise from the same modality.
#[allow(clippy::too_many_arguments)]
pub fn wmpd_loss<'a>(
    tape: &mut Tape<'a>,
    v: Var,
    a: Var,
    bank: &'a MemoryBank,
    sets: &AgreementSets,
    ids: &[usize],
    sampled_positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<LossOutput> {
    check_disjoint(sets, ids, sampled_positives, negatives)?;
    let (lv, sv) = nce_term(tape, v, bank, Modality::Video, sampled_positives, negatives, tau)?;
    let (la, sa) = nce_term(tape, a, bank, Modality::Audio, sampled_positives, negatives, tau)?;
    let total = tape.add(lv, la)?;
    Ok(LossOutput {
        total,
        breakdown: LossBreakdown {
            total: tape.scalar(total),
            wmpd_v: Some(sv),
            wmpd_a: Some(sa),
            ..Default::default()
        },
    })
}

/// `cross-AVID + λ·wMPD`, both terms on the same negatives.
#[allow(clippy::too_many_arguments)]
pub fn cma_loss<'a>(
    tape: &mut Tape<'a>,
    v: Var,
    a: Var,
    bank: &'a MemoryBank,
    sets: &AgreementSets,
    ids: &[usize],
    sampled_positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    lambda: f64,
    tau: f64,
) -> Result<LossOutput> {
    let cross = crate::avid_loss::cross_avid(tape, v, a, bank, ids, negatives, tau)?;
    let w = wmpd_loss(tape, v, a, bank, sets, ids, sampled_positives, negatives, tau)?;
    let weighted = tape.scale(w.total, lambda);
    let total = tape.add(cross.total, weighted)?;
    Ok(LossOutput {
        total,
        breakdown: LossBreakdown {
            total: tape.scalar(total),
            cross_v_to_a: cross.breakdown.cross_v_to_a,
            cross_a_to_v: cross.breakdown.cross_a_to_v,
            wmpd_v: w.breakdown.wmpd_v,
            wmpd_a: w.breakdown.wmpd_a,
            ..Default::default()
        },
    })
}

impl AgreementSets {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.positives.len() as u64);
        w.u32(self.k_pool as u32);
        w.u8(self.method.tag());
        w.u64(self.mined_epoch);
        for (ids, scores) in self.positives.iter().zip(&self.scores) {
            ids.iter().for_each(|&j| w.u64(j as u64));
            w.f64s(scores);
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.u64()?;
        let k_pool = r.u32()? as usize;
        let tag_at = r.offset();
        let method = MiningMethod::from_tag(r.u8()?)
            .ok_or_else(|| FormatError::new(tag_at, "unknown mining method tag"))?;
        let mined_epoch = r.u64()?;
        let row_bytes = 16 * k_pool as u64;
        if n.checked_mul(row_bytes).is_none_or(|b| b > (u64::MAX >> 1)) {
            return Err(r.err("agreement set size overflow").into());
        }
        let mut positives = Vec::new();
        let mut scores = Vec::new();
        for _ in 0..n {
            let mut ids = Vec::with_capacity(k_pool);
            for _ in 0..k_pool {
                let at = r.offset();
                let j = r.u64()?;
                if j >= n {
                    return Err(FormatError::new(at, format!("positive id {j} >= N = {n}")).into());
                }
                ids.push(j as usize);
            }
            positives.push(ids);
            scores.push(r.f64s(k_pool)?);
        }
        Ok(Self {
            method,
            mined_epoch,
            k_pool,
            positives,
            scores,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(MAGIC, VERSION);
        self.write(&mut w);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, MAGIC, VERSION)?;
        let sets = Self::read(&mut r)?;
        r.finish()?;
        Ok(sets)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
