//! Per-instance slow-moving targets for both modalities.
//!
//! Rows are kept on the unit sphere. Each modality also carries a partition
//! constant that is estimated once, on the first training batch, and never
//! changed afterwards.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, FormatError, Result};
use crate::format::{Reader, Writer};
use crate::numerics::{dot, Matrix, NORM_EPS};

const MAGIC: &[u8; 4] = b"XMMB";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Video => Modality::Audio,
            Modality::Audio => Modality::Video,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    video: Matrix,
    audio: Matrix,
    momentum: f64,
    zbar_video: Option<f64>,
    zbar_audio: Option<f64>,
}

impl MemoryBank {
    /// Uniformly random unit directions.
    pub fn random(n: usize, embed_dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        if n == 0 || embed_dim == 0 {
            return Err(Error::config("memory bank needs n >= 1 and embed_dim >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            Matrix::from_fn(n, embed_dim, |_, _| StandardNormal.sample(&mut rng)).l2_normalize_rows(NORM_EPS)
        };
        let video = draw();
        let audio = draw();
        Self::build(video, audio, momentum)
    }

    /// Bank initialized from existing embeddings, renormalized per row.
    pub fn from_embeddings(video: &Matrix, audio: &Matrix, momentum: f64) -> Result<Self> {
        if video.shape() != audio.shape() {
            return Err(Error::Dimension {
                op: "MemoryBank::from_embeddings",
                lhs: video.shape(),
                rhs: audio.shape(),
            });
        }
        if video.rows() == 0 {
            return Err(Error::config("memory bank needs n >= 1"));
        }
        Self::build(video.l2_normalize_rows(NORM_EPS), audio.l2_normalize_rows(NORM_EPS), momentum)
    }

    fn build(video: Matrix, audio: Matrix, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::config(format!("momentum must lie in (0, 1), got {momentum}")));
        }
        Ok(Self {
            video,
            audio,
            momentum,
            zbar_video: None,
            zbar_audio: None,
        })
    }

    pub fn len(&self) -> usize {
        self.video.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.video.rows() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.video.cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn memory(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
        }
    }

    pub fn video(&self) -> &Matrix {
        &self.video
    }

    pub fn audio(&self) -> &Matrix {
        &self.audio
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.len() {
            return Err(Error::IdOutOfRange { id, n: self.len() });
        }
        Ok(())
    }

    /// `row ← normalize(m·row + (1 − m)·new)` for each listed id.
    pub fn ema_update(&mut self, ids: &[usize], new_video: &Matrix, new_audio: &Matrix) -> Result<()> {
        for new in [new_video, new_audio] {
            if new.rows() != ids.len() || new.cols() != self.embed_dim() {
                return Err(Error::Dimension {
                    op: "ema_update",
                    lhs: (ids.len(), self.embed_dim()),
                    rhs: new.shape(),
                });
            }
        }
        for &id in ids {
            self.check_id(id)?;
        }
        let m = self.momentum;
        for (table, new) in [(&mut self.video, new_video), (&mut self.audio, new_audio)] {
            for (k, &id) in ids.iter().enumerate() {
                let row = table.row_mut(id);
                for (old, &x) in row.iter_mut().zip(new.row(k)) {
                    *old = m * *old + (1.0 - m) * x;
                }
                let n = dot(row, row).sqrt().max(NORM_EPS);
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(())
    }

    /// `k` ids drawn uniformly with replacement from all instances except
    /// `anchor` and `exclude`.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        anchor: usize,
        k: usize,
        rng: &mut R,
        exclude: &[usize],
    ) -> Result<Vec<usize>> {
        self.check_id(anchor)?;
        sample_excluding(self.len(), anchor, k, rng, exclude)
    }

    /// Estimates both partition constants. `video_probe` holds the
    /// embeddings that will be scored against video memories and
    /// `audio_probe` those scored against audio memories.
    pub fn estimate_zbar(&mut self, video_probe: &Matrix, audio_probe: &Matrix, tau: f64) -> Result<(f64, f64)> {
        if self.zbar_video.is_some() || self.zbar_audio.is_some() {
            return Err(Error::contract("partition constants are already frozen"));
        }
        if !(tau > 0.0) {
            return Err(Error::config("tau must be > 0"));
        }
        let zv = partition_estimate(&self.video, video_probe, tau)?;
        let za = partition_estimate(&self.audio, audio_probe, tau)?;
        self.zbar_video = Some(zv);
        self.zbar_audio = Some(za);
        Ok((zv, za))
    }

    pub fn zbar(&self, m: Modality) -> Option<f64> {
        match m {
            Modality::Video => self.zbar_video,
            Modality::Audio => self.zbar_audio,
        }
    }

    pub(crate) fn set_zbar(&mut self, video: Option<f64>, audio: Option<f64>) {
        self.zbar_video = video;
        self.zbar_audio = audio;
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.len() as u64);
        w.u32(self.embed_dim() as u32);
        w.f64(self.momentum);
        w.f64(self.zbar_video.unwrap_or(0.0));
        w.f64(self.zbar_audio.unwrap_or(0.0));
        w.f64s(self.video.data());
        w.f64s(self.audio.data());
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let n = r.u64()?;
        let dim = r.u32()? as usize;
        let momentum = r.f64()?;
        let zv = r.f64()?;
        let za = r.f64()?;
        let cells = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| FormatError::new(at, "bank size overflow"))?;
        let video = Matrix::new(n as usize, dim, r.f64s(cells)?)?;
        let audio = Matrix::new(n as usize, dim, r.f64s(cells)?)?;
        let mut bank = Self::build(video, audio, momentum).map_err(|e| FormatError::new(at, e.to_string()))?;
        let frozen = |z: f64| if z > 0.0 { Some(z) } else { None };
        bank.set_zbar(frozen(zv), frozen(za));
        Ok(bank)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(MAGIC, VERSION);
        self.write(&mut w);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, MAGIC, VERSION)?;
        let bank = Self::read(&mut r)?;
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Mean over probe rows of the mean over memory rows of `exp(xᵀm / τ)`.
pub fn partition_estimate(memory: &Matrix, probe: &Matrix, tau: f64) -> Result<f64> {
    if probe.rows() == 0 {
        return Err(Error::contract("partition estimate needs a non-empty probe"));
    }
    if probe.cols() != memory.cols() {
        return Err(Error::Dimension {
            op: "estimate_zbar",
            lhs: probe.shape(),
            rhs: memory.shape(),
        });
    }
    let sims = probe.matmul_nt(memory)?;
    let total: f64 = sims.data().iter().map(|s| (s / tau).exp()).sum();
    Ok(total / sims.data().len() as f64)
}

/// Uniform draws with replacement from `0..n` minus `anchor` and `exclude`.
pub fn sample_excluding<R: Rng + ?Sized>(
    n: usize,
    anchor: usize,
    k: usize,
    rng: &mut R,
    exclude: &[usize],
) -> Result<Vec<usize>> {
    let mut excluded: Vec<usize> = exclude.iter().copied().filter(|&e| e < n).collect();
    excluded.push(anchor);
    excluded.sort_unstable();
    excluded.dedup();
    let pool = n - excluded.len();
    if pool == 0 {
        return Err(Error::contract(format!(
            "no candidates left for negative sampling (n = {n}, excluded = {})",
            excluded.len()
        )));
    }
    Ok((0..k)
        .map(|_| {
            // map the u-th free slot to its id by skipping excluded ids below it
            let mut id = rng.random_range(0..pool);
            for &e in &excluded {
                if e <= id {
                    id += 1;
                } else {
                    break;
                }
            }
            id
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;

    fn mean_pairwise_dot(m: &Matrix) -> f64 {
        let n = m.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += dot(m.row(i), m.row(j));
            }
        }
        s / (n * (n - 1) / 2) as f64
    }

    #[test]
    fn random_bank_is_isotropic_and_reproducible() {
        let bank = MemoryBank::random(4096, 16, 0.5, 1).unwrap();
        assert!(mean_pairwise_dot(bank.video()).abs() < 0.02);
        assert!(mean_pairwise_dot(bank.audio()).abs() < 0.02);
        assert_eq!(bank, MemoryBank::random(4096, 16, 0.5, 1).unwrap());
        for n in bank.video().row_norms() {
            assert!((n - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn from_embeddings_renormalizes() {
        let v = Matrix::from_rows(&[[3.0, 4.0], [0.0, 2.0]]).unwrap();
        let bank = MemoryBank::from_embeddings(&v, &v, 0.5).unwrap();
        assert_eq!(bank.video().row(0), &[0.6, 0.8]);
        assert_eq!(bank.audio().row(1), &[0.0, 1.0]);
    }

    #[test]
    fn ema_half_momentum_bisects() {
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mut bank = MemoryBank::from_embeddings(&v, &v, 0.5).unwrap();
        let new = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        bank.ema_update(&[0], &new, &new).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bank.video().get(0, 0) - h).abs() < 1e-15);
        assert!((bank.video().get(0, 1) - h).abs() < 1e-15);
        assert_eq!(bank.video().row(1), &[0.0, 1.0]);
    }

    #[test]
    fn ema_fixed_point_and_convergence() {
        let mut bank = MemoryBank::random(5, 8, 0.5, 3).unwrap();
        let same = bank.video().select_rows(&[2]);
        let before = bank.clone();
        bank.ema_update(&[2], &same, &bank.audio().select_rows(&[2])).unwrap();
        for (x, y) in bank.video().data().iter().zip(before.video().data()) {
            assert!((x - y).abs() < 1e-15);
        }

        let target = Matrix::from_fn(1, 8, |_, c| if c == 0 { 1.0 } else { 0.0 });
        for _ in 0..30 {
            bank.ema_update(&[4], &target, &target).unwrap();
        }
        let diff: Vec<f64> = bank.video().row(4).iter().zip(target.row(0)).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) < 1e-3);
        // untouched rows stay bit-identical
        for r in 0..4 {
            if r != 2 {
                assert_eq!(bank.video().row(r), before.video().row(r));
            }
        }
    }

    #[test]
    fn ema_rejects_bad_ids() {
        let mut bank = MemoryBank::random(3, 4, 0.5, 0).unwrap();
        let x = Matrix::zeros(1, 4);
        assert!(matches!(bank.ema_update(&[3], &x, &x), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn negatives_with_single_candidate() {
        let bank = MemoryBank::random(2, 4, 0.5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(bank.sample_negatives(0, 5, &mut rng, &[]).unwrap(), vec![1; 5]);
        assert!(bank.sample_negatives(0, 1, &mut rng, &[1]).is_err());
    }

    #[test]
    fn excluded_ids_never_sampled() {
        let bank = MemoryBank::random(20, 4, 0.5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let excl = [0, 3, 4, 5, 19];
        let draws = bank.sample_negatives(7, 5000, &mut rng, &excl).unwrap();
        assert!(draws.iter().all(|d| !excl.contains(d) && *d != 7 && *d < 20));
        let mut seen = [false; 20];
        draws.iter().for_each(|&d| seen[d] = true);
        assert_eq!(seen.iter().filter(|&&s| s).count(), 20 - 6);
    }

    #[test]
    fn negatives_pass_chi_square_uniformity() {
        let n = 100;
        let bank = MemoryBank::random(n, 4, 0.5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = bank.sample_negatives(0, 100_000, &mut rng, &[]).unwrap();
        let mut counts = vec![0usize; n];
        draws.iter().for_each(|&d| counts[d] += 1);
        assert_eq!(counts[0], 0);
        let expected = 100_000.0 / 99.0;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 98 degrees of freedom; the 0.999 quantile is about 148.2
        assert!(chi2 < 148.2, "chi2 = {chi2}");
    }

    #[test]
    fn zbar_closed_forms() {
        let v = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let mut bank = MemoryBank::from_embeddings(&v, &v, 0.5).unwrap();
        let probe = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let ortho = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let (zv, za) = bank.estimate_zbar(&probe, &ortho, 1.0).unwrap();
        assert!((zv - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(za, 1.0);
        assert!(bank.estimate_zbar(&probe, &probe, 1.0).is_err());
        assert_eq!(bank.zbar(Modality::Video), Some(zv));
    }

    #[test]
    fn zbar_matches_double_loop() {
        let mut bank = MemoryBank::random(64, 128, 0.5, 5).unwrap();
        let probe = MemoryBank::random(16, 128, 0.5, 6).unwrap().video().clone();
        let tau = 0.07;
        let mut brute = 0.0;
        for p in probe.row_iter() {
            let mut inner = 0.0;
            for m in bank.video().row_iter() {
                let mut s = 0.0;
                for k in 0..128 {
                    s += p[k] * m[k];
                }
                inner += (s / tau).exp();
            }
            brute += inner / 64.0;
        }
        brute /= 16.0;
        let (zv, _) = bank.estimate_zbar(&probe, &probe, tau).unwrap();
        assert!((zv - brute).abs() < 1e-12 * brute.max(1.0), "{zv} vs {brute}");
    }

    #[test]
    fn file_round_trip() {
        let mut bank = MemoryBank::random(7, 3, 0.5, 9).unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(MemoryBank::from_bytes(&bytes).unwrap(), bank);
        let vp = bank.video().select_rows(&[0]);
        let ap = bank.audio().select_rows(&[1]);
        bank.estimate_zbar(&vp, &ap, 0.1).unwrap();
        assert_eq!(MemoryBank::from_bytes(&bank.to_bytes()).unwrap(), bank);
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(MemoryBank::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(MemoryBank::from_bytes(&bytes[..30]), Err(Error::Format(_))));
    }
}
