//! Browser bindings for the demo page in `www/`.

use wasm_bindgen::prelude::*;
use xmodal::avid_loss::{nce_loss, AvidVariant, NceContext};
use xmodal::cma::{mine, precision_at_k, MiningMethod};
use xmodal::eval::collapse_diagnostic;
use xmodal::membank::MemoryBank;
use xmodal::synthdata::{generate, Dataset, DatasetSpec};
use xmodal::trainer::{RunState, TrainConfig};

fn js_err(e: xmodal::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Unit vector at cosine `c` from the first axis.
fn at_cosine(c: f64) -> [f64; 2] {
    let c = c.clamp(-1.0, 1.0);
    [c, (1.0 - c * c).sqrt()]
}

/// NCE loss of one anchor over `points` temperatures in `[tau_min, tau_max]`.
/// The positive sits at cosine `sim_pos` and all `k` negatives at `sim_neg`.
#[wasm_bindgen]
pub fn loss_vs_temperature(
    sim_pos: f64,
    sim_neg: f64,
    k: usize,
    n: usize,
    tau_min: f64,
    tau_max: f64,
    points: usize,
) -> Result<Vec<f64>, JsValue> {
    let x = [1.0, 0.0];
    let pos = at_cosine(sim_pos);
    let neg = at_cosine(sim_neg);
    let negatives = vec![&neg[..]; k];
    (0..points.max(2))
        .map(|i| {
            let tau = tau_min + (tau_max - tau_min) * i as f64 / (points.max(2) - 1) as f64;
            // Z̄ as if the memory were uniform on the circle.
            let zbar = (0..64)
                .map(|j| (((j as f64) * std::f64::consts::TAU / 64.0).cos() / tau).exp())
                .sum::<f64>()
                / 64.0;
            let ctx = NceContext::new(tau, zbar, n, k).map_err(js_err)?;
            nce_loss(&x, &pos, &negatives, &ctx).map_err(js_err)
        })
        .collect()
}

fn demo_dataset(seed: u64, per_class: usize, noise: f64) -> Result<Dataset, JsValue> {
    generate(&DatasetSpec {
        num_classes: 8,
        instances_per_class: per_class,
        dim_a: 16,
        dim_b: 16,
        noise_sigma: noise,
        confound_pairs_a: vec![(0, 1), (2, 3)],
        confound_pairs_b: vec![(4, 5), (6, 7)],
        seed,
        ..DatasetSpec::default()
    })
    .map_err(js_err)
}

/// Precision@1..k of positive sets mined from the raw inputs, for the
/// methods `cma`, `video_only`, `audio_only`, `union` in that order,
/// concatenated into one array of length `4 * k`.
#[wasm_bindgen]
pub fn mining_precision(seed: u64, per_class: usize, noise: f64, k: usize) -> Result<Vec<f64>, JsValue> {
    let data = demo_dataset(seed, per_class, noise)?;
    let bank = MemoryBank::from_embeddings(&data.anchors_a(), &data.anchors_b(), 0.5).map_err(js_err)?;
    let labels = data.labels();
    let mut out = Vec::with_capacity(4 * k);
    for method in [MiningMethod::Cma, MiningMethod::VideoOnly, MiningMethod::AudioOnly, MiningMethod::Union] {
        let sets = mine(&bank, k, method, 0, 1).map_err(js_err)?;
        out.extend(precision_at_k(&sets, &labels, k).map_err(js_err)?);
    }
    Ok(out)
}

/// A small instance-discrimination run stepped one epoch at a time.
#[wasm_bindgen]
pub struct TrainingDemo {
    data: Dataset,
    state: RunState,
}

#[wasm_bindgen]
impl TrainingDemo {
    /// `variant` is `self`, `cross` or `joint`.
    #[wasm_bindgen(constructor)]
    pub fn new(variant: &str, seed: u64, tau: f64, learning_rate: f64) -> Result<TrainingDemo, JsValue> {
        let variant: AvidVariant = variant.parse().map_err(js_err)?;
        let data = demo_dataset(seed, 16, 0.05)?;
        let config = TrainConfig {
            variant,
            epochs: 1000,
            batch_size: 32,
            negatives: 64,
            tau,
            learning_rate,
            seed,
            hidden_dims: vec![32],
            head_dims: vec![32, 16],
            ..TrainConfig::default()
        };
        let state = RunState::new(config, &data.unlabeled()).map_err(js_err)?;
        Ok(TrainingDemo { data, state })
    }

    /// Runs one epoch; returns `[epoch, loss, mean memory dot video, audio]`.
    pub fn step(&mut self) -> Result<Vec<f64>, JsValue> {
        self.state.train_epoch(&self.data.unlabeled(), 1).map_err(js_err)?;
        let m = self.state.metrics.last().expect("epoch recorded");
        Ok(vec![m.epoch as f64, m.loss_total, m.mean_mem_dot_v, m.mean_mem_dot_a])
    }

    /// Precision@1..k of agreement sets mined from the current memory.
    pub fn agreement_precision(&self, k: usize) -> Result<Vec<f64>, JsValue> {
        let sets = mine(&self.state.bank, k, MiningMethod::Cma, self.state.epoch as u64, 1).map_err(js_err)?;
        precision_at_k(&sets, &self.data.labels(), k).map_err(js_err)
    }

    /// Exact mean pairwise dot product of the video and audio memories.
    pub fn collapse(&self) -> Result<Vec<f64>, JsValue> {
        Ok(vec![
            collapse_diagnostic(self.state.bank.video()).map_err(js_err)?,
            collapse_diagnostic(self.state.bank.audio()).map_err(js_err)?,
        ])
    }
}
