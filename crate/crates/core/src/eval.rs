//! Frozen-feature evaluation: linear probes, memory geometry, and the
//! per-variant comparison table.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::numerics::{dot, AdamConfig, AdamState, Matrix, Tape};
use crate::synthdata::Dataset;
use crate::trainer::RunState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    VideoEnc,
    AudioEnc,
    VideoMem,
    AudioMem,
    ConcatMem,
    /// Video encoder output before the head.
    VideoTrunk,
    AudioTrunk,
}

impl FeatureSource {
    pub const ALL: [FeatureSource; 7] = [
        FeatureSource::VideoEnc,
        FeatureSource::AudioEnc,
        FeatureSource::VideoMem,
        FeatureSource::AudioMem,
        FeatureSource::ConcatMem,
        FeatureSource::VideoTrunk,
        FeatureSource::AudioTrunk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::VideoEnc => "video_enc",
            FeatureSource::AudioEnc => "audio_enc",
            FeatureSource::VideoMem => "video_mem",
            FeatureSource::AudioMem => "audio_mem",
            FeatureSource::ConcatMem => "concat_mem",
            FeatureSource::VideoTrunk => "video_trunk",
            FeatureSource::AudioTrunk => "audio_trunk",
        }
    }

    pub fn needs_encoders(self) -> bool {
        !matches!(
            self,
            FeatureSource::VideoMem | FeatureSource::AudioMem | FeatureSource::ConcatMem
        )
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown feature source {s:?}")))
    }
}

/// Features for every instance, in id order. Encoders see the noise-free
/// anchors.
pub fn features_for(
    source: FeatureSource,
    encoders: Option<(&Encoder, &Encoder)>,
    bank: Option<&MemoryBank>,
    dataset: &Dataset,
) -> Result<Matrix> {
    let need_bank = || bank.ok_or_else(|| Error::config(format!("{source} features need a memory bank")));
    let need_enc = || encoders.ok_or_else(|| Error::config(format!("{source} features need encoders")));
    match source {
        FeatureSource::VideoMem => Ok(need_bank()?.video().clone()),
        FeatureSource::AudioMem => Ok(need_bank()?.audio().clone()),
        FeatureSource::ConcatMem => {
            let b = need_bank()?;
            b.video().hstack(b.audio())
        }
        FeatureSource::VideoEnc => need_enc()?.0.forward(&dataset.anchors_a()),
        FeatureSource::AudioEnc => need_enc()?.1.forward(&dataset.anchors_b()),
        FeatureSource::VideoTrunk => need_enc()?.0.trunk_features(&dataset.anchors_a()),
        FeatureSource::AudioTrunk => need_enc()?.1.trunk_features(&dataset.anchors_b()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Number of independent splits averaged.
    pub repeats: usize,
    pub split_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            epochs: 500,
            learning_rate: 1e-2,
            repeats: 5,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Mean validation top-1 over splits.
    pub top1_accuracy: f64,
    pub top1_std: f64,
    pub split_accuracies: Vec<f64>,
    /// Per class, averaged over splits.
    pub per_class_accuracy: Vec<f64>,
    pub feature_source: Option<FeatureSource>,
    pub split_seed: u64,
}

/// Stratified split: within each class, the first `round(fraction·n_c)`
/// ids of a seeded shuffle go to training.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("train fraction must lie in (0, 1), got {fraction}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let cut = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        val.extend_from_slice(&members[cut..]);
        train.extend_from_slice(&members[..cut]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn standardize(train: &Matrix, other: &Matrix) -> (Matrix, Matrix) {
    let (n, d) = train.shape();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in train.row_iter() {
        row.iter().zip(&mut mean).for_each(|(x, m)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in train.row_iter() {
        for ((x, m), v) in row.iter().zip(&mean).zip(&mut var) {
            *v += (x - m) * (x - m);
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / ((v / n as f64).sqrt() + 1e-8)).collect();
    let apply = |m: &Matrix| Matrix::from_fn(m.rows(), d, |r, c| (m.get(r, c) - mean[c]) * scale[c]);
    (apply(train), apply(other))
}

/// Softmax regression on one split; returns predicted validation labels.
fn fit_predict(x_train: &Matrix, y_train: &[usize], x_val: &Matrix, classes: usize, config: &ProbeConfig) -> Result<Vec<usize>> {
    let d = x_train.cols();
    let mut w = Matrix::zeros(d, classes);
    let mut b = Matrix::zeros(1, classes);
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(adam, &[w.shape(), b.shape()]);
    for _ in 0..config.epochs {
        let grads = {
            let mut tape = Tape::new();
            let x = tape.input(x_train.clone());
            let wv = tape.input(w.clone());
            let bv = tape.input(b.clone());
            let z = tape.matmul(x, wv)?;
            let logits = tape.add_row(z, bv)?;
            let loss = tape.softmax_cross_entropy(logits, y_train)?;
            let g = tape.backward(loss)?;
            [g.get_or_zeros(wv, w.shape()), g.get_or_zeros(bv, b.shape())]
        };
        opt.update(&mut [&mut w, &mut b], &grads)?;
    }
    let logits = x_val.matmul(&w)?;
    Ok(logits
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(b.row(0))
                .map(|(z, bb)| z + bb)
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best })
                .0
        })
        .collect())
}

/// Multinomial logistic regression on frozen features, averaged over
/// `config.repeats` seeded stratified splits. Features are standardized
/// with training-split statistics.
pub fn linear_probe(features: &Matrix, labels: &[usize], config: &ProbeConfig) -> Result<ProbeResult> {
    if features.rows() != labels.len() {
        return Err(Error::contract(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if config.repeats == 0 || config.epochs == 0 {
        return Err(Error::config("probe needs at least one repeat and one epoch"));
    }
    if !features.is_finite() {
        return Err(Error::Numeric {
            what: "probe features".into(),
            epoch: 0,
            batch: 0,
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut split_accuracies = Vec::with_capacity(config.repeats);
    let mut class_hits = vec![0.0; classes];
    for rep in 0..config.repeats {
        let (train, val) = stratified_split(labels, config.train_fraction, config.split_seed.wrapping_add(rep as u64))?;
        let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let mut distinct = y_train.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::config("training split holds a single class"));
        }
        if val.is_empty() {
            return Err(Error::config("validation split is empty"));
        }
        let (x_train, x_val) = standardize(&features.select_rows(&train), &features.select_rows(&val));
        let pred = fit_predict(&x_train, &y_train, &x_val, classes, config)?;
        let mut correct = vec![0usize; classes];
        let mut total = vec![0usize; classes];
        for (&i, &p) in val.iter().zip(&pred) {
            total[labels[i]] += 1;
            if p == labels[i] {
                correct[labels[i]] += 1;
            }
        }
        split_accuracies.push(correct.iter().sum::<usize>() as f64 / val.len() as f64);
        for c in 0..classes {
            if total[c] > 0 {
                class_hits[c] += correct[c] as f64 / total[c] as f64;
            }
        }
    }
    let r = config.repeats as f64;
    let mean = split_accuracies.iter().sum::<f64>() / r;
    let var = split_accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / r;
    Ok(ProbeResult {
        top1_accuracy: mean,
        top1_std: var.sqrt(),
        split_accuracies,
        per_class_accuracy: class_hits.into_iter().map(|h| h / r).collect(),
        feature_source: None,
        split_seed: config.split_seed,
    })
}

/// Mean of `row_iᵀrow_j` over all pairs `i < j`, summed pair by pair.
pub fn collapse_diagnostic(rows: &Matrix) -> Result<f64> {
    let n = rows.rows();
    if n < 2 {
        return Err(Error::config("collapse diagnostic needs at least 2 rows"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dot(rows.row(i), rows.row(j));
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Same quantity via `‖Σ rows‖² = Σ‖row‖² + 2·Σ_{i<j} dot`, in O(N·d).
pub fn collapse_diagnostic_fast(rows: &Matrix) -> Result<f64> {
    let n = rows.rows();
    if n < 2 {
        return Err(Error::config("collapse diagnostic needs at least 2 rows"));
    }
    let mut sum = vec![0.0; rows.cols()];
    let mut sq = 0.0;
    for row in rows.row_iter() {
        row.iter().zip(&mut sum).for_each(|(x, s)| *s += x);
        sq += dot(row, row);
    }
    Ok((dot(&sum, &sum) - sq) / (n * (n - 1)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub run: String,
    pub feature_source: FeatureSource,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub dataset_fingerprint: String,
    pub sources: Vec<FeatureSource>,
    pub entries: Vec<ReportEntry>,
}

impl VariantReport {
    pub fn accuracy(&self, run: &str, source: FeatureSource) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.run == run && e.feature_source == source)
            .map(|e| e.mean)
    }

    /// CSV with one row per run and one column per feature source.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run");
        for s in &self.sources {
            out.push(',');
            out.push_str(s.name());
        }
        out.push('\n');
        let mut runs: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !runs.contains(&e.run.as_str()) {
                runs.push(&e.run);
            }
        }
        for run in runs {
            out.push_str(run);
            for &s in &self.sources {
                out.push(',');
                if let Some(a) = self.accuracy(run, s) {
                    out.push_str(&a.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Probe accuracy for every (run, feature source) pair. All runs must have
/// been trained on `dataset`.
pub fn variant_report(
    runs: &[(&str, &RunState)],
    dataset: &Dataset,
    sources: &[FeatureSource],
    config: &ProbeConfig,
) -> Result<VariantReport> {
    let fingerprint = dataset.fingerprint();
    let labels = dataset.labels();
    let mut entries = Vec::new();
    for (name, state) in runs {
        if state.dataset_fingerprint != fingerprint {
            return Err(Error::contract(format!("run {name:?} was trained on a different dataset")));
        }
        for &source in sources {
            let feats = features_for(source, Some((&state.video, &state.audio)), Some(&state.bank), dataset)?;
            let r = linear_probe(&feats, &labels, config)?;
            entries.push(ReportEntry {
                run: name.to_string(),
                feature_source: source,
                mean: r.top1_accuracy,
                std: r.top1_std,
            });
        }
    }
    Ok(VariantReport {
        dataset_fingerprint: fingerprint,
        sources: sources.to_vec(),
        entries,
    })
}
