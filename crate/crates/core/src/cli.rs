//! Command-line front end. Every command records a `manifest.json` beside
//! its outputs before doing any work.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cma::{mine, precision_at_k, AgreementSets, MiningMethod};
use crate::encoder::encoders_from_bytes;
use crate::error::{Error, Result};
use crate::eval::{collapse_diagnostic, collapse_diagnostic_fast, features_for, linear_probe, FeatureSource, ProbeConfig};
use crate::membank::MemoryBank;
use crate::synthdata::{generate, Dataset, DatasetSpec};
use crate::trainer::{EpochMetrics, Phase, RunState, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "xmodal", version, about = "Audio-visual instance discrimination and cross-modal agreement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset from a spec file.
    Gen(GenArgs),
    /// Instance-discrimination training.
    Pretrain(PretrainArgs),
    /// Agreement refinement from a pretraining checkpoint.
    Refine(RefineArgs),
    /// Mine agreement sets from a memory bank.
    Mine(MineArgs),
    /// Precision@k curve of agreement sets.
    Precision(PrecisionArgs),
    /// Linear probes on frozen features.
    Probe(ProbeArgs),
    /// Memory geometry: mean pairwise dot product and norm histogram.
    Diagnose(DiagnoseArgs),
    /// Refinement sweep over lambda values, with probes.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Dataset spec (key = value); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a saved training state instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mining threads.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value = "cma")]
    pub method: MiningMethod,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PrecisionArgs {
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Largest k; defaults to the pool size.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Encoder or training-state checkpoint.
    #[arg(long, required_unless_present = "bank")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON report; a CSV with the same stem is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated feature sources; defaults to all available.
    #[arg(long, value_delimiter = ',')]
    pub sources: Vec<FeatureSource>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 500)]
    pub probe_epochs: usize,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// JSON output; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only `lambda` is supported.
    #[arg(long, default_value = "lambda")]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sources: Vec<FeatureSource>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub dataset_fingerprint: Option<String>,
    pub code_version: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: None,
            dataset_fingerprint: None,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(())
    }
}

/// Process exit code for an error: 1 configuration, 2 file format or I/O,
/// 3 non-finite numbers.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Format(_) | Error::Io(_) => 2,
        Error::Numeric { .. } => 3,
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } | Error::IdOutOfRange { .. } => 1,
    }
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn threads(t: Option<usize>) -> usize {
    t.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut c = TrainConfig::from_text(&read_text(path)?)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Mine(a) => cmd_mine(a),
        Command::Precision(a) => cmd_precision(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => DatasetSpec::from_text(&read_text(p)?)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let mut m = RunManifest::new("gen");
    m.config = Some(spec.to_text());
    m.seed = Some(spec.seed);
    m.inputs = a.config.iter().map(|p| show(p)).collect();
    m.outputs = vec![show(&a.out)];
    m.write(&manifest_beside(&a.out))?;
    let data = generate(&spec)?;
    data.save(&a.out)?;
    println!("wrote {} instances to {} ({})", data.len(), a.out.display(), data.fingerprint());
    Ok(())
}

struct MetricsSink {
    jsonl: fs::File,
    csv: fs::File,
}

impl MetricsSink {
    fn create(dir: &Path, append: bool) -> Result<Self> {
        let open = |name: &str| -> Result<fs::File> {
            Ok(fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(dir.join(name))?)
        };
        let csv_exists = append && dir.join("metrics.csv").exists();
        let mut csv = open("metrics.csv")?;
        if !csv_exists {
            writeln!(csv, "phase,epoch,updates,loss_total,zbar_v,zbar_a,mean_mem_dot_v,mean_mem_dot_a,mined_epoch")?;
        }
        Ok(Self {
            jsonl: open("metrics.jsonl")?,
            csv,
        })
    }

    fn record(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.jsonl, "{}", m.to_json())?;
        writeln!(
            self.csv,
            "{},{},{},{},{},{},{},{},{}",
            m.phase,
            m.epoch,
            m.updates,
            m.loss_total,
            m.zbar_v,
            m.zbar_a,
            m.mean_mem_dot_v,
            m.mean_mem_dot_a,
            m.mined_epoch.map(|e| e.to_string()).unwrap_or_default()
        )?;
        Ok(())
    }
}

fn finish_run(state: &RunState, out: &Path) -> Result<()> {
    state.save(out.join("final.xmck"))?;
    state.bank.save(out.join("bank.xmmb"))?;
    if let Some(sets) = &state.sets {
        sets.save(out.join("sets.xmag"))?;
    }
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let config = load_train_config(&a.config, a.seed)?;
    let data = Dataset::load(&a.dataset)?;
    fs::create_dir_all(&a.out)?;
    let init_name = format!("epoch{}.xmck", config.cma_init_epoch);
    let mut m = RunManifest::new("pretrain");
    m.config = Some(config.to_text());
    m.dataset_fingerprint = Some(data.fingerprint());
    m.seed = Some(config.seed);
    m.inputs = [Some(&a.config), Some(&a.dataset), a.resume.as_ref()]
        .into_iter()
        .flatten()
        .map(|p| show(p))
        .collect();
    m.outputs = ["metrics.jsonl", "metrics.csv", &init_name, "final.xmck", "bank.xmmb"]
        .iter()
        .map(|f| show(&a.out.join(f)))
        .collect();
    m.write(&a.out.join("manifest.json"))?;

    let view = data.unlabeled();
    let mut state = match &a.resume {
        Some(p) => {
            let s = RunState::load(p)?;
            if s.config != config {
                return Err(Error::config("resume checkpoint was written with a different config"));
            }
            if s.phase != Phase::Avid {
                return Err(Error::config("resume checkpoint is not a pretraining state"));
            }
            s
        }
        None => RunState::new(config.clone(), &view)?,
    };
    let mut sink = MetricsSink::create(&a.out, a.resume.is_some())?;
    let init_epoch = config.cma_init_epoch;
    state.run_phase(&view, 1, |s| {
        let m = s.metrics.last().expect("epoch recorded");
        sink.record(m)?;
        if s.epoch == init_epoch {
            s.save(a.out.join(&init_name))?;
        }
        Ok(())
    })?;
    finish_run(&state, &a.out)?;
    let last = state.metrics.last().map_or(f64::NAN, |m| m.loss_total);
    println!("pretrained {} epochs, final loss {last:.4}", state.epoch);
    Ok(())
}

fn refine_from(
    config: TrainConfig,
    checkpoint: &Path,
    data: &Dataset,
    threads: usize,
    mut after_epoch: impl FnMut(&RunState) -> Result<()>,
) -> Result<RunState> {
    if config.cma.is_none() {
        return Err(Error::config("refinement needs cma = true"));
    }
    let mut state = RunState::load(checkpoint)?;
    state.set_config(config)?;
    crate::trainer::refine_cma_with(&data.unlabeled(), state, threads, |s| after_epoch(s))
}

fn cmd_refine(a: RefineArgs) -> Result<()> {
    let config = load_train_config(&a.config, a.seed)?;
    let data = Dataset::load(&a.dataset)?;
    fs::create_dir_all(&a.out)?;
    let mut m = RunManifest::new("refine");
    m.config = Some(config.to_text());
    m.dataset_fingerprint = Some(data.fingerprint());
    m.seed = Some(config.seed);
    m.inputs = vec![show(&a.config), show(&a.checkpoint), show(&a.dataset)];
    m.outputs = ["metrics.jsonl", "metrics.csv", "final.xmck", "bank.xmmb", "sets.xmag"]
        .iter()
        .map(|f| show(&a.out.join(f)))
        .collect();
    m.write(&a.out.join("manifest.json"))?;
    let mut sink = MetricsSink::create(&a.out, false)?;
    let state = refine_from(config, &a.checkpoint, &data, threads(a.threads), |s| {
        sink.record(s.metrics.last().expect("epoch recorded"))
    })?;
    finish_run(&state, &a.out)?;
    println!("refined {} epochs", state.epoch);
    Ok(())
}

fn cmd_mine(a: MineArgs) -> Result<()> {
    let mut m = RunManifest::new("mine");
    m.config = Some(format!("method = {}\nk = {}\nepoch = {}\n", a.method, a.k, a.epoch));
    m.inputs = vec![show(&a.bank)];
    m.outputs = vec![show(&a.out)];
    m.write(&manifest_beside(&a.out))?;
    let bank = MemoryBank::load(&a.bank)?;
    let sets = mine(&bank, a.k, a.method, a.epoch, threads(a.threads))?;
    sets.save(&a.out)?;
    println!("mined {} x {} {} positives", sets.len(), sets.k_pool, sets.method);
    Ok(())
}

fn cmd_precision(a: PrecisionArgs) -> Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let mut m = RunManifest::new("precision");
    m.dataset_fingerprint = Some(data.fingerprint());
    m.inputs = vec![show(&a.sets), show(&a.dataset)];
    m.outputs = vec![show(&a.out)];
    m.write(&manifest_beside(&a.out))?;
    let sets = AgreementSets::load(&a.sets)?;
    let curve = precision_at_k(&sets, &data.labels(), a.k.unwrap_or(sets.k_pool))?;
    let mut csv = String::from("k,precision\n");
    for (k, p) in curve.iter().enumerate() {
        writeln!(csv, "{},{}", k + 1, p).expect("string write");
    }
    fs::write(&a.out, csv)?;
    println!("precision@{} = {:.4}", curve.len(), curve.last().copied().unwrap_or(0.0));
    Ok(())
}

#[derive(Serialize)]
struct ProbeRecord {
    label: String,
    feature_source: FeatureSource,
    mean: f64,
    std: f64,
    split_accuracies: Vec<f64>,
    per_class_accuracy: Vec<f64>,
}

fn probe_all(
    label: &str,
    sources: &[FeatureSource],
    encoders: Option<(&crate::encoder::Encoder, &crate::encoder::Encoder)>,
    bank: Option<&MemoryBank>,
    data: &Dataset,
    config: &ProbeConfig,
) -> Result<Vec<ProbeRecord>> {
    let labels = data.labels();
    sources
        .iter()
        .map(|&s| {
            let f = features_for(s, encoders, bank, data)?;
            let r = linear_probe(&f, &labels, config)?;
            Ok(ProbeRecord {
                label: label.to_string(),
                feature_source: s,
                mean: r.top1_accuracy,
                std: r.top1_std,
                split_accuracies: r.split_accuracies,
                per_class_accuracy: r.per_class_accuracy,
            })
        })
        .collect()
}

fn records_csv(head: &str, records: &[ProbeRecord]) -> String {
    let mut csv = format!("{head},feature_source,mean,std\n");
    for r in records {
        writeln!(csv, "{},{},{},{}", r.label, r.feature_source, r.mean, r.std).expect("string write");
    }
    csv
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let csv_path = a.out.with_extension("csv");
    let mut m = RunManifest::new("probe");
    m.dataset_fingerprint = Some(data.fingerprint());
    m.seed = a.seed;
    m.inputs = [a.checkpoint.as_ref(), a.bank.as_ref(), Some(&a.dataset)]
        .into_iter()
        .flatten()
        .map(|p| show(p))
        .collect();
    m.outputs = vec![show(&a.out), show(&csv_path)];
    m.write(&manifest_beside(&a.out))?;

    let (encoders, mut bank) = match &a.checkpoint {
        Some(p) => {
            let bytes = fs::read(p)?;
            let enc = encoders_from_bytes(&bytes)?;
            let bank = RunState::from_bytes(&bytes).ok().map(|s| s.bank);
            (Some(enc), bank)
        }
        None => (None, None),
    };
    if let Some(p) = &a.bank {
        bank = Some(MemoryBank::load(p)?);
    }
    let sources: Vec<FeatureSource> = if a.sources.is_empty() {
        FeatureSource::ALL
            .into_iter()
            .filter(|s| if s.needs_encoders() { encoders.is_some() } else { bank.is_some() })
            .collect()
    } else {
        a.sources.clone()
    };
    let config = ProbeConfig {
        repeats: a.repeats,
        epochs: a.probe_epochs,
        split_seed: a.seed.unwrap_or(0),
        ..ProbeConfig::default()
    };
    let enc_ref = encoders.as_ref().map(|(v, au)| (v, au));
    let records = probe_all("probe", &sources, enc_ref, bank.as_ref(), &data, &config)?;
    fs::write(&a.out, serde_json::to_string_pretty(&records).expect("records serialize"))?;
    fs::write(&csv_path, records_csv("run", &records))?;
    for r in &records {
        println!("{:>12}: {:.4} ± {:.4}", r.feature_source.name(), r.mean, r.std);
    }
    Ok(())
}

#[derive(Serialize)]
struct Diagnosis {
    n: usize,
    embed_dim: usize,
    mean_dot_video: f64,
    mean_dot_audio: f64,
    mean_dot_video_fast: f64,
    mean_dot_audio_fast: f64,
    /// `(lower edge, upper edge, count)` of row norms, both modalities.
    norm_histogram: Vec<(f64, f64, usize)>,
}

fn norm_histogram(norms: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &n in norms {
        let b = (((n - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    if a.bins == 0 {
        return Err(Error::config("bins must be >= 1"));
    }
    let mut m = RunManifest::new("diagnose");
    m.inputs = vec![show(&a.bank)];
    m.outputs = a.out.iter().map(|p| show(p)).collect();
    let manifest_path = match &a.out {
        Some(o) => manifest_beside(o),
        None => manifest_beside(&a.bank).with_file_name(format!(
            "{}.diagnose.manifest.json",
            a.bank.file_name().map_or("bank".into(), |n| n.to_string_lossy().into_owned())
        )),
    };
    m.write(&manifest_path)?;
    let bank = MemoryBank::load(&a.bank)?;
    let mut norms = bank.video().row_norms();
    norms.extend(bank.audio().row_norms());
    let d = Diagnosis {
        n: bank.len(),
        embed_dim: bank.embed_dim(),
        mean_dot_video: collapse_diagnostic(bank.video())?,
        mean_dot_audio: collapse_diagnostic(bank.audio())?,
        mean_dot_video_fast: collapse_diagnostic_fast(bank.video())?,
        mean_dot_audio_fast: collapse_diagnostic_fast(bank.audio())?,
        norm_histogram: norm_histogram(&norms, a.bins),
    };
    let json = serde_json::to_string_pretty(&d).expect("diagnosis serializes");
    if let Some(o) = &a.out {
        fs::write(o, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    if a.param != "lambda" {
        return Err(Error::config(format!("unsupported sweep parameter {:?}", a.param)));
    }
    let base = load_train_config(&a.config, a.seed)?;
    let data = Dataset::load(&a.dataset)?;
    fs::create_dir_all(&a.out)?;
    let mut m = RunManifest::new("sweep");
    m.config = Some(format!("{}sweep = lambda:{:?}\n", base.to_text(), a.values));
    m.dataset_fingerprint = Some(data.fingerprint());
    m.seed = Some(base.seed);
    m.inputs = vec![show(&a.config), show(&a.checkpoint), show(&a.dataset)];
    m.outputs = vec![show(&a.out.join("sweep.csv")), show(&a.out.join("sweep.json"))];
    m.write(&a.out.join("manifest.json"))?;
    let sources = if a.sources.is_empty() {
        vec![FeatureSource::VideoEnc, FeatureSource::AudioEnc]
    } else {
        a.sources.clone()
    };
    let probe = ProbeConfig {
        repeats: a.repeats,
        split_seed: base.seed,
        ..ProbeConfig::default()
    };
    let mut records = Vec::new();
    for &lambda in &a.values {
        let mut config = base.clone();
        match config.cma.as_mut() {
            Some(c) => c.lambda = lambda,
            None => return Err(Error::config("sweep needs cma = true")),
        }
        let state = refine_from(config, &a.checkpoint, &data, threads(a.threads), |_| Ok(()))?;
        let label = lambda.to_string();
        records.extend(probe_all(&label, &sources, Some((&state.video, &state.audio)), Some(&state.bank), &data, &probe)?);
        println!("lambda {lambda}: done");
    }
    fs::write(a.out.join("sweep.csv"), records_csv("lambda", &records))?;
    fs::write(
        a.out.join("sweep.json"),
        serde_json::to_string_pretty(&records).expect("records serialize"),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::config("x")), 1);
        assert_eq!(exit_code(&Error::Format(crate::error::FormatError::new(0, "x"))), 2);
        assert_eq!(
            exit_code(&Error::Numeric {
                what: "loss".into(),
                epoch: 1,
                batch: 2
            }),
            3
        );
    }

    #[test]
    fn histogram_counts_every_norm() {
        let h = norm_histogram(&[1.0, 1.0, 0.5, 0.75], 2);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 4);
        assert_eq!(h[1].2, 3);
        assert_eq!(norm_histogram(&[1.0; 3], 4)[0].2, 3);
    }

    #[test]
    fn manifest_path_sits_beside_output() {
        assert_eq!(manifest_beside(Path::new("/tmp/d.xmds")), Path::new("/tmp/d.xmds.manifest.json"));
    }

    #[test]
    fn arguments_parse() {
        let cli = Cli::try_parse_from(["xmodal", "mine", "--bank", "b", "--method", "union", "--k", "8", "--out", "o"]).unwrap();
        assert!(matches!(cli.command, Command::Mine(MineArgs { method: MiningMethod::Union, k: 8, .. })));
        assert!(Cli::try_parse_from(["xmodal", "mine", "--bank", "b", "--method", "both", "--out", "o"]).is_err());
        let cli = Cli::try_parse_from(["xmodal", "sweep", "--config", "c", "--checkpoint", "k", "--dataset", "d", "--out", "o", "--values", "0,1"]).unwrap();
        assert!(matches!(cli.command, Command::Sweep(SweepArgs { ref values, .. }) if values == &[0.0, 1.0]));
    }
}
