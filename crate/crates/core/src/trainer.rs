//! Two-phase training: instance discrimination, then optional agreement
//! refinement started from a mid-training checkpoint.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avid_loss::{avid_loss, AvidVariant, LossBreakdown};
use crate::cma::{
    cma_loss, mine, refresh_schedule, sample_cma_negatives, sample_positives, AgreementSets, CmaConfig, MiningMethod,
};
use crate::config::{join_list, KeyValues};
use crate::encoder::{read_encoder_pair, write_encoder_pair, Encoder, EncoderConfig, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use crate::error::{Error, FormatError, Result};
use crate::eval::collapse_diagnostic_fast;
use crate::format::{Reader, Writer};
use crate::membank::{MemoryBank, Modality};
use crate::numerics::{AdamConfig, AdamState, Matrix, Tape};
use crate::synthdata::Unlabeled;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: AvidVariant,
    /// Length of the instance-discrimination run. A refinement run started
    /// at `cma_init_epoch` lasts `epochs - cma_init_epoch`, so both runs
    /// perform the same number of updates.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Noise samples per instance.
    pub negatives: usize,
    pub momentum: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub head_dims: Vec<usize>,
    /// Per-view Gaussian noise around the instance anchors.
    pub view_noise: f64,
    pub cma: Option<CmaConfig>,
    pub cma_init_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: AvidVariant::CrossAvid,
            epochs: 400,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            tau: 0.07,
            negatives: 1024,
            momentum: 0.5,
            seed: 0,
            hidden_dims: vec![512, 512],
            head_dims: vec![512, 512, 128],
            view_noise: 0.05,
            cma: None,
            cma_init_epoch: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.negatives == 0 {
            return Err(Error::config("epochs, batch_size and negatives must be >= 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.view_noise >= 0.0) {
            return Err(Error::config("learning_rate must be > 0; weight_decay and view_noise >= 0"));
        }
        if let Some(cma) = &self.cma {
            cma.validate()?;
            if self.cma_init_epoch >= self.epochs {
                return Err(Error::config(format!(
                    "cma_init_epoch {} must be < epochs {}",
                    self.cma_init_epoch, self.epochs
                )));
            }
        }
        self.encoder_config(1).validate()
    }

    /// Checks the parts that depend on the dataset size.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.batch_size > n {
            return Err(Error::config(format!("batch_size {} exceeds N = {n}", self.batch_size)));
        }
        if let Some(cma) = &self.cma {
            if cma.k_pool >= n {
                return Err(Error::config(format!("k_pool {} must be < N = {n}", cma.k_pool)));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig::new(input_dim, self.hidden_dims.clone(), self.head_dims.clone())
    }

    pub fn cma_epochs(&self) -> usize {
        self.epochs.saturating_sub(self.cma_init_epoch)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "variant = {}\nepochs = {}\nbatch_size = {}\nlr = {}\nweight_decay = {}\ntau = {}\n\
             negatives = {}\nmomentum = {}\nseed = {}\nhidden_dims = {}\nhead_dims = {}\n\
             view_noise = {}\ncma_init_epoch = {}\n",
            self.variant,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.weight_decay,
            self.tau,
            self.negatives,
            self.momentum,
            self.seed,
            join_list(&self.hidden_dims),
            join_list(&self.head_dims),
            self.view_noise,
            self.cma_init_epoch,
        );
        match &self.cma {
            None => s.push_str("cma = false\n"),
            Some(c) => s.push_str(&format!(
                "cma = true\nk_pool = {}\nk_p = {}\nk_n = {}\nlambda = {}\nrefresh_period = {}\nmethod = {}\n",
                c.k_pool, c.k_p, c.k_n, c.lambda, c.refresh_period, c.method
            )),
        }
        s
    }

    /// Parses `key = value` text; missing keys take their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub(crate) fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let dc = CmaConfig::default();
        let enabled = kv.take_or("cma", false)?;
        let k_pool = kv.take::<usize>("k_pool")?;
        let k_p = kv.take::<usize>("k_p")?;
        let k_n = kv.take::<usize>("k_n")?;
        let lambda = kv.take::<f64>("lambda")?;
        let refresh_period = kv.take::<usize>("refresh_period")?;
        let method = kv.take::<MiningMethod>("method")?;
        let any_cma = k_pool.is_some()
            || k_p.is_some()
            || k_n.is_some()
            || lambda.is_some()
            || refresh_period.is_some()
            || method.is_some();
        if any_cma && !enabled {
            return Err(Error::config("agreement settings given but cma = false"));
        }
        let cma = enabled.then(|| CmaConfig {
            k_pool: k_pool.unwrap_or(dc.k_pool),
            k_p: k_p.unwrap_or(dc.k_p),
            k_n: k_n.unwrap_or(dc.k_n),
            lambda: lambda.unwrap_or(dc.lambda),
            refresh_period: refresh_period.unwrap_or(dc.refresh_period),
            method: method.unwrap_or(dc.method),
        });
        let c = Self {
            variant: kv.take_or("variant", d.variant)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            learning_rate: kv.take_or("lr", d.learning_rate)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            tau: kv.take_or("tau", d.tau)?,
            negatives: kv.take_or("negatives", d.negatives)?,
            momentum: kv.take_or("momentum", d.momentum)?,
            seed: kv.take_or("seed", d.seed)?,
            hidden_dims: kv.take_list("hidden_dims")?.unwrap_or(d.hidden_dims),
            head_dims: kv.take_list("head_dims")?.unwrap_or(d.head_dims),
            view_noise: kv.take_or("view_noise", d.view_noise)?,
            cma,
            cma_init_epoch: kv.take_or("cma_init_epoch", d.cma_init_epoch)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Avid,
    Cma,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Avid => "avid",
            Phase::Cma => "cma",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avid" => Ok(Phase::Avid),
            "cma" => Ok(Phase::Cma),
            _ => Err(Error::config(format!("unknown phase {s:?}"))),
        }
    }
}

/// One record per training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Epoch index within the phase.
    pub epoch: usize,
    pub phase: Phase,
    pub loss_total: f64,
    pub loss_terms: BTreeMap<String, f64>,
    pub zbar_v: f64,
    pub zbar_a: f64,
    pub mean_mem_dot_v: f64,
    pub mean_mem_dot_a: f64,
    pub wallclock_ms: f64,
    /// Optimizer steps taken so far, across both phases.
    pub updates: u64,
    /// Set when positives were re-mined at the start of this epoch.
    pub mined_epoch: Option<u64>,
}

impl EpochMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// The record with timing removed, for reproducibility comparisons.
    pub fn timeless(&self) -> Self {
        Self {
            wallclock_ms: 0.0,
            ..self.clone()
        }
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_VIEWS: u64 = 2;
const STREAM_NEGATIVES: u64 = 3;
const STREAM_POSITIVES: u64 = 4;

/// Independent random streams, one per purpose.
#[derive(Clone, Debug, PartialEq)]
struct Streams {
    order: ChaCha8Rng,
    views: ChaCha8Rng,
    negatives: ChaCha8Rng,
    positives: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            order: stream(seed, STREAM_ORDER),
            views: stream(seed, STREAM_VIEWS),
            negatives: stream(seed, STREAM_NEGATIVES),
            positives: stream(seed, STREAM_POSITIVES),
        }
    }

    fn all_mut(&mut self) -> [&mut ChaCha8Rng; 4] {
        [&mut self.order, &mut self.views, &mut self.negatives, &mut self.positives]
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub config: TrainConfig,
    pub dataset_fingerprint: String,
    pub phase: Phase,
    /// Epochs completed in the current phase.
    pub epoch: usize,
    pub updates: u64,
    pub video: Encoder,
    pub audio: Encoder,
    pub bank: MemoryBank,
    pub optimizer: AdamState,
    streams: Streams,
    pub sets: Option<AgreementSets>,
    pub metrics: Vec<EpochMetrics>,
}

fn vstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Matrix::new(a.rows() + b.rows(), a.cols(), data).expect("equal widths")
}

#[cfg(not(target_arch = "wasm32"))]
struct Clock(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Clock {
    fn start() -> Self {
        Clock(std::time::Instant::now())
    }

    fn elapsed_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

#[cfg(target_arch = "wasm32")]
struct Clock;

#[cfg(target_arch = "wasm32")]
impl Clock {
    fn start() -> Self {
        Clock
    }

    fn elapsed_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Default)]
struct LossAccumulator {
    batches: usize,
    total: f64,
    terms: BTreeMap<String, f64>,
}

impl LossAccumulator {
    fn add(&mut self, b: &LossBreakdown) {
        self.batches += 1;
        self.total += b.total;
        for (k, v) in b.terms() {
            *self.terms.entry(k.to_string()).or_insert(0.0) += v;
        }
    }

    fn means(self) -> (f64, BTreeMap<String, f64>) {
        let n = self.batches.max(1) as f64;
        (self.total / n, self.terms.into_iter().map(|(k, v)| (k, v / n)).collect())
    }
}

impl RunState {
    /// Fresh encoders and a random memory bank, all derived from `config.seed`.
    pub fn new(config: TrainConfig, data: &Unlabeled<'_>) -> Result<Self> {
        config.validate_for(data.len())?;
        let mut init = stream(config.seed, STREAM_INIT);
        let video = Encoder::init(config.encoder_config(data.dim_a()), init.next_u64())?;
        let audio = Encoder::init(config.encoder_config(data.dim_b()), init.next_u64())?;
        let bank = MemoryBank::random(data.len(), video.embed_dim(), config.momentum, init.next_u64())?;
        let shapes: Vec<_> = video.param_shapes().into_iter().chain(audio.param_shapes()).collect();
        Ok(Self {
            optimizer: AdamState::new(config.adam(), &shapes),
            streams: Streams::new(config.seed),
            dataset_fingerprint: data.fingerprint(),
            phase: Phase::Avid,
            epoch: 0,
            updates: 0,
            video,
            audio,
            bank,
            sets: None,
            metrics: Vec::new(),
            config,
        })
    }

    /// Replaces the run configuration, keeping the learned state. Encoder
    /// dims, momentum and seed must be unchanged.
    pub fn set_config(&mut self, config: TrainConfig) -> Result<()> {
        config.validate_for(self.bank.len())?;
        let old = &self.config;
        if config.hidden_dims != old.hidden_dims || config.head_dims != old.head_dims {
            return Err(Error::config("encoder dims differ from the checkpoint"));
        }
        if config.momentum != old.momentum || config.seed != old.seed {
            return Err(Error::config("momentum and seed must match the checkpoint"));
        }
        let adam = config.adam();
        self.optimizer.config = adam;
        self.config = config;
        Ok(())
    }

    fn check_data(&self, data: &Unlabeled<'_>) -> Result<()> {
        if self.video.config.input_dim != data.dim_a()
            || self.audio.config.input_dim != data.dim_b()
            || self.bank.len() != data.len()
        {
            return Err(Error::Dimension {
                op: "checkpoint vs dataset",
                lhs: (self.bank.len(), self.video.config.input_dim),
                rhs: (data.len(), data.dim_a()),
            });
        }
        if self.dataset_fingerprint != data.fingerprint() {
            return Err(Error::contract("checkpoint was trained on a different dataset"));
        }
        Ok(())
    }

    /// Number of epochs the current phase runs for.
    pub fn phase_length(&self) -> usize {
        match self.phase {
            Phase::Avid => self.config.epochs,
            Phase::Cma => self.config.cma_epochs(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.phase_length()
    }

    /// Switches to agreement refinement. Optimizer moments carry over.
    pub fn begin_cma(&mut self) -> Result<()> {
        if self.phase != Phase::Avid {
            return Err(Error::contract("refinement must start from an instance-discrimination state"));
        }
        if self.config.cma.is_none() {
            return Err(Error::config("config has no cma section"));
        }
        if self.bank.zbar(Modality::Video).is_none() {
            return Err(Error::contract("checkpoint has no partition estimates"));
        }
        self.phase = Phase::Cma;
        self.epoch = 0;
        self.sets = None;
        Ok(())
    }

    /// One pass over a seeded permutation of the data.
    pub fn train_epoch(&mut self, data: &Unlabeled<'_>, threads: usize) -> Result<&EpochMetrics> {
        self.check_data(data)?;
        let clock = Clock::start();
        let mut mined_epoch = None;
        if self.phase == Phase::Cma {
            let cma = self.config.cma.clone().ok_or_else(|| Error::config("config has no cma section"))?;
            if self.sets.is_none() || refresh_schedule(self.epoch, cma.refresh_period) {
                self.sets = Some(mine(&self.bank, cma.k_pool, cma.method, self.epoch as u64, threads)?);
                mined_epoch = Some(self.epoch as u64);
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.streams.order);
        let mut acc = LossAccumulator::default();
        for (batch, ids) in order.chunks(self.config.batch_size).enumerate() {
            let b = self.step(data, ids, batch)?;
            acc.add(&b);
        }
        let (loss_total, loss_terms) = acc.means();
        let record = EpochMetrics {
            epoch: self.epoch,
            phase: self.phase,
            loss_total,
            loss_terms,
            zbar_v: self.bank.zbar(Modality::Video).unwrap_or(0.0),
            zbar_a: self.bank.zbar(Modality::Audio).unwrap_or(0.0),
            mean_mem_dot_v: collapse_diagnostic_fast(self.bank.video())?,
            mean_mem_dot_a: collapse_diagnostic_fast(self.bank.audio())?,
            wallclock_ms: clock.elapsed_ms(),
            updates: self.updates,
            mined_epoch,
        };
        self.metrics.push(record);
        self.epoch += 1;
        Ok(self.metrics.last().expect("just pushed"))
    }

    fn estimate_zbar(&mut self, xv: &Matrix, xa: &Matrix) -> Result<()> {
        let v = self.video.forward(xv)?;
        let a = self.audio.forward(xa)?;
        let (vp, ap) = match self.config.variant {
            AvidVariant::SelfAvid => (v, a),
            AvidVariant::CrossAvid => (a, v),
            AvidVariant::JointAvid => (vstack(&v, &a), vstack(&a, &v)),
        };
        self.bank.estimate_zbar(&vp, &ap, self.config.tau)?;
        Ok(())
    }

    fn step(&mut self, data: &Unlabeled<'_>, ids: &[usize], batch: usize) -> Result<LossBreakdown> {
        let (xv, xa) = data.sample_views(ids, self.config.view_noise, &mut self.streams.views);
        if self.bank.zbar(Modality::Video).is_none() {
            self.estimate_zbar(&xv, &xa)?;
        }
        let mut positives = Vec::new();
        let mut negatives = Vec::with_capacity(ids.len());
        match (&self.phase, &self.sets, &self.config.cma) {
            (Phase::Avid, _, _) => {
                for &i in ids {
                    negatives.push(self.bank.sample_negatives(i, self.config.negatives, &mut self.streams.negatives, &[])?);
                }
            }
            (Phase::Cma, Some(sets), Some(cma)) => {
                for &i in ids {
                    positives.push(sample_positives(sets, i, cma.k_p, &mut self.streams.positives)?);
                    negatives.push(sample_cma_negatives(sets, i, cma.k_n, &mut self.streams.negatives)?);
                }
            }
            _ => return Err(Error::contract("refinement step without agreement sets")),
        }

        let epoch = self.epoch;
        let numeric = |what: &str| Error::Numeric {
            what: what.to_string(),
            epoch,
            batch,
        };
        let (breakdown, grads, v_emb, a_emb) = {
            let mut tape = Tape::new();
            let xv = tape.input(xv);
            let xa = tape.input(xa);
            let ev = self.video.forward_traced(&mut tape, xv)?;
            let ea = self.audio.forward_traced(&mut tape, xa)?;
            let (v, a) = (ev.embeddings, ea.embeddings);
            let out = match (&self.sets, &self.config.cma, self.phase) {
                (Some(sets), Some(cma), Phase::Cma) => {
                    cma_loss(&mut tape, v, a, &self.bank, sets, ids, &positives, &negatives, cma.lambda, self.config.tau)?
                }
                _ => avid_loss(self.config.variant, &mut tape, v, a, &self.bank, ids, &negatives, self.config.tau)?,
            };
            if !out.breakdown.total.is_finite() {
                return Err(numeric("loss"));
            }
            let g = tape.backward(out.total)?;
            let grads: Vec<Matrix> = ev
                .params
                .iter()
                .chain(&ea.params)
                .map(|&p| g.get_or_zeros(p, tape.value(p).shape()))
                .collect();
            if grads.iter().any(|m| !m.is_finite()) {
                return Err(numeric("gradient"));
            }
            (out.breakdown, grads, tape.value(v).clone(), tape.value(a).clone())
        };
        {
            let mut params: Vec<&mut Matrix> = self.video.params_mut();
            params.extend(self.audio.params_mut());
            self.optimizer.update(&mut params, &grads)?;
        }
        if self.video.params().iter().chain(self.audio.params().iter()).any(|p| !p.is_finite()) {
            return Err(numeric("parameters"));
        }
        self.bank.ema_update(ids, &v_emb, &a_emb)?;
        self.updates += 1;
        Ok(breakdown)
    }

    /// Trains until the current phase is complete, calling `after_epoch`
    /// after every epoch.
    pub fn run_phase(
        &mut self,
        data: &Unlabeled<'_>,
        threads: usize,
        mut after_epoch: impl FnMut(&RunState) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            self.train_epoch(data, threads)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        write_encoder_pair(&mut w, &self.video, &self.audio);
        w.u8(1);
        w.blob(self.config.to_text().as_bytes());
        w.blob(self.dataset_fingerprint.as_bytes());
        w.u8(match self.phase {
            Phase::Avid => 0,
            Phase::Cma => 1,
        });
        w.u64(self.epoch as u64);
        w.u64(self.updates);
        let mut streams = self.streams.clone();
        for r in streams.all_mut() {
            w.u128(r.get_word_pos());
        }
        w.u64(self.optimizer.step);
        w.u32(self.optimizer.first_moment.len() as u32);
        for m in self.optimizer.first_moment.iter().chain(&self.optimizer.second_moment) {
            w.matrix(m);
        }
        self.bank.write(&mut w);
        match &self.sets {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                s.write(&mut w);
            }
        }
        let lines: String = self.metrics.iter().map(|m| m.to_json() + "\n").collect();
        w.blob(lines.as_bytes());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let (video, audio) = read_encoder_pair(&mut r)?;
        let at = r.offset();
        if r.u8()? != 1 {
            return Err(FormatError::new(at, "checkpoint holds encoders only, not a training state").into());
        }
        let at = r.offset();
        let text = std::str::from_utf8(r.blob()?).map_err(|_| FormatError::new(at, "config is not UTF-8"))?;
        let config = TrainConfig::from_text(text)
            .map_err(|e| FormatError::new(at, format!("stored config is invalid: {e}")))?;
        let at = r.offset();
        let dataset_fingerprint = std::str::from_utf8(r.blob()?)
            .map_err(|_| FormatError::new(at, "fingerprint is not UTF-8"))?
            .to_string();
        let at = r.offset();
        let phase = match r.u8()? {
            0 => Phase::Avid,
            1 => Phase::Cma,
            t => return Err(FormatError::new(at, format!("unknown phase tag {t}")).into()),
        };
        let epoch = r.u64()? as usize;
        let updates = r.u64()?;
        let mut streams = Streams::new(config.seed);
        for s in streams.all_mut() {
            s.set_word_pos(r.u128()?);
        }
        let step = r.u64()?;
        let at = r.offset();
        let count = r.u32()? as usize;
        let shapes: Vec<_> = video.param_shapes().into_iter().chain(audio.param_shapes()).collect();
        if count != shapes.len() {
            return Err(FormatError::new(at, format!("{count} optimizer slots for {} parameters", shapes.len())).into());
        }
        let mut moments = Vec::with_capacity(2 * count);
        for k in 0..2 * count {
            let at = r.offset();
            let m = r.matrix()?;
            if m.shape() != shapes[k % count] {
                return Err(FormatError::new(at, "optimizer moment shape mismatch").into());
            }
            moments.push(m);
        }
        let second_moment = moments.split_off(count);
        let bank = MemoryBank::read(&mut r)?;
        if bank.embed_dim() != video.embed_dim() {
            return Err(r.err("memory width differs from the embedding width").into());
        }
        let at = r.offset();
        let sets = match r.u8()? {
            0 => None,
            1 => Some(AgreementSets::read(&mut r)?),
            t => return Err(FormatError::new(at, format!("unknown agreement flag {t}")).into()),
        };
        let at = r.offset();
        let lines = std::str::from_utf8(r.blob()?).map_err(|_| FormatError::new(at, "metrics are not UTF-8"))?;
        let metrics = lines
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpochMetrics>, _>>()
            .map_err(|e| FormatError::new(at, format!("bad metrics record: {e}")))?;
        r.finish()?;
        Ok(Self {
            optimizer: AdamState {
                config: config.adam(),
                step,
                first_moment: moments,
                second_moment,
            },
            config,
            dataset_fingerprint,
            phase,
            epoch,
            updates,
            video,
            audio,
            bank,
            streams,
            sets,
            metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Instance-discrimination run of `config.epochs` epochs.
pub fn pretrain_avid(data: &Unlabeled<'_>, config: TrainConfig) -> Result<RunState> {
    pretrain_avid_with(data, config, |_| Ok(()))
}

pub fn pretrain_avid_with(
    data: &Unlabeled<'_>,
    config: TrainConfig,
    after_epoch: impl FnMut(&RunState) -> Result<()>,
) -> Result<RunState> {
    let mut state = RunState::new(config, data)?;
    state.run_phase(data, 1, after_epoch)?;
    Ok(state)
}

/// Agreement refinement for `epochs - cma_init_epoch` epochs, starting from
/// an instance-discrimination state.
pub fn refine_cma(data: &Unlabeled<'_>, start: RunState, threads: usize) -> Result<RunState> {
    refine_cma_with(data, start, threads, |_| Ok(()))
}

pub fn refine_cma_with(
    data: &Unlabeled<'_>,
    mut state: RunState,
    threads: usize,
    after_epoch: impl FnMut(&RunState) -> Result<()>,
) -> Result<RunState> {
    state.check_data(data)?;
    state.begin_cma()?;
    state.run_phase(data, threads, after_epoch)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, Dataset, DatasetSpec};

    fn tiny_data() -> Dataset {
        generate(&DatasetSpec {
            num_classes: 4,
            instances_per_class: 8,
            dim_a: 6,
            dim_b: 5,
            confound_pairs_a: vec![(0, 1)],
            confound_pairs_b: vec![(2, 3)],
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            negatives: 6,
            hidden_dims: vec![8],
            head_dims: vec![8, 4],
            cma_init_epoch: 1,
            ..TrainConfig::default()
        }
    }

    fn with_cma(mut c: TrainConfig) -> TrainConfig {
        c.cma = Some(CmaConfig {
            k_pool: 4,
            k_p: 2,
            k_n: 6,
            lambda: 1.0,
            refresh_period: 2,
            method: MiningMethod::Cma,
        });
        c
    }

    #[test]
    fn config_text_round_trip() {
        for c in [TrainConfig::default(), with_cma(tiny_config())] {
            assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        }
        assert!(TrainConfig::from_text("lambda = 1").is_err());
        assert!(TrainConfig::from_text("epochs = 4\nbogus = 1").is_err());
        assert!(TrainConfig::from_text("cma = true\nepochs = 10\ncma_init_epoch = 10").is_err());
    }

    #[test]
    fn batch_larger_than_dataset_is_rejected() {
        let data = tiny_data();
        let c = TrainConfig {
            batch_size: 33,
            ..tiny_config()
        };
        assert!(matches!(RunState::new(c, &data.unlabeled()), Err(Error::Config(_))));
    }

    #[test]
    fn short_run_keeps_unit_memories_and_freezes_zbar() {
        let data = tiny_data();
        let mut state = RunState::new(tiny_config(), &data.unlabeled()).unwrap();
        state.train_epoch(&data.unlabeled(), 1).unwrap();
        let z = (state.bank.zbar(Modality::Video), state.bank.zbar(Modality::Audio));
        assert!(z.0.is_some() && z.1.is_some());
        state.train_epoch(&data.unlabeled(), 1).unwrap();
        assert_eq!(z, (state.bank.zbar(Modality::Video), state.bank.zbar(Modality::Audio)));
        for n in state.bank.video().row_norms().into_iter().chain(state.bank.audio().row_norms()) {
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(state.updates, 8);
        assert_eq!(state.metrics.len(), 2);
        assert!(state.is_finished());
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let data = tiny_data();
        let a = pretrain_avid(&data.unlabeled(), tiny_config()).unwrap();
        let b = pretrain_avid(&data.unlabeled(), tiny_config()).unwrap();
        assert_eq!(a.video, b.video);
        assert_eq!(a.bank, b.bank);
        let strip = |s: &RunState| s.metrics.iter().map(EpochMetrics::timeless).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let data = tiny_data();
        let config = with_cma(TrainConfig {
            epochs: 4,
            cma_init_epoch: 2,
            ..tiny_config()
        });
        let mut straight = RunState::new(config.clone(), &data.unlabeled()).unwrap();
        let mut resumed = straight.clone();
        straight.run_phase(&data.unlabeled(), 1, |_| Ok(())).unwrap();

        resumed.train_epoch(&data.unlabeled(), 1).unwrap();
        let bytes = resumed.to_bytes();
        let mut resumed = RunState::from_bytes(&bytes).unwrap();
        assert_eq!(RunState::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        resumed.run_phase(&data.unlabeled(), 1, |_| Ok(())).unwrap();
        let strip = |s: &RunState| s.metrics.iter().map(EpochMetrics::timeless).collect::<Vec<_>>();
        assert_eq!(strip(&straight), strip(&resumed));
        assert_eq!(straight.bank, resumed.bank);
        assert_eq!(straight.optimizer, resumed.optimizer);

        let refined = refine_cma(&data.unlabeled(), straight, 2).unwrap();
        let bytes = refined.to_bytes();
        let back = RunState::from_bytes(&bytes).unwrap();
        assert_eq!(back.sets, refined.sets);
        assert_eq!(back.to_bytes(), bytes);
        assert!(RunState::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(RunState::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn refinement_mines_on_schedule() {
        let data = tiny_data();
        let config = with_cma(TrainConfig {
            epochs: 6,
            cma_init_epoch: 1,
            ..tiny_config()
        });
        let mut state = RunState::new(config, &data.unlabeled()).unwrap();
        state.train_epoch(&data.unlabeled(), 1).unwrap();
        let start_updates = state.updates;
        let refined = refine_cma(&data.unlabeled(), state, 1).unwrap();
        let cma: Vec<_> = refined.metrics.iter().filter(|m| m.phase == Phase::Cma).collect();
        assert_eq!(cma.len(), 5);
        let mined: Vec<_> = cma.iter().filter_map(|m| m.mined_epoch).collect();
        assert_eq!(mined, vec![0, 2, 4]);
        assert_eq!(refined.updates, start_updates + 5 * 4);
        for m in &cma {
            assert!(m.loss_terms.contains_key("wmpd_v") && m.loss_terms.contains_key("cross_v_to_a"));
        }
    }

    #[test]
    fn refinement_needs_matching_dataset() {
        let data = tiny_data();
        let other = generate(&DatasetSpec {
            seed: 1,
            num_classes: 4,
            instances_per_class: 8,
            dim_a: 6,
            dim_b: 5,
            confound_pairs_a: vec![],
            confound_pairs_b: vec![],
            ..DatasetSpec::default()
        })
        .unwrap();
        let state = pretrain_avid(&data.unlabeled(), with_cma(tiny_config())).unwrap();
        assert!(refine_cma(&other.unlabeled(), state, 1).is_err());
    }
}
