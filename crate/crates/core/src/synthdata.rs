//! Synthetic paired-modality dataset.
//!
//! Each class has one mean per modality on the unit sphere. Confound pairs
//! overwrite one class's mean with its partner's in a single modality, so the
//! two classes can only be told apart through the other modality. Instances
//! are fixed anchors around their class means; training sees fresh noisy
//! views of those anchors every epoch.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"XMDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub instances_per_class: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    /// Per-view noise around each anchor. Zero gives noise-free views.
    pub noise_sigma: f64,
    /// Spread of instance anchors around their class mean.
    pub instance_sigma: f64,
    pub confound_pairs_a: Vec<(usize, usize)>,
    pub confound_pairs_b: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            instances_per_class: 64,
            dim_a: 32,
            dim_b: 32,
            noise_sigma: 0.05,
            instance_sigma: 0.1,
            confound_pairs_a: vec![(0, 1), (2, 3), (4, 5), (6, 7)],
            confound_pairs_b: vec![(8, 9), (10, 11), (12, 13), (14, 15)],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn num_instances(&self) -> usize {
        self.num_classes * self.instances_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.instances_per_class == 0 {
            return Err(Error::config("instances_per_class must be >= 1"));
        }
        if self.dim_a == 0 || self.dim_b == 0 {
            return Err(Error::config("dim_a and dim_b must be positive"));
        }
        if !(self.instance_sigma > 0.0 && self.instance_sigma.is_finite()) {
            return Err(Error::config("instance_sigma must be > 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        for (name, pairs) in [
            ("confound_pairs_a", &self.confound_pairs_a),
            ("confound_pairs_b", &self.confound_pairs_b),
        ] {
            let mut seen = vec![false; self.num_classes];
            for &(p, q) in pairs {
                if p >= self.num_classes || q >= self.num_classes || p == q {
                    return Err(Error::config(format!("{name}: invalid pair ({p}, {q})")));
                }
                if seen[p] || seen[q] {
                    return Err(Error::config(format!("{name}: pairs must be disjoint, ({p}, {q}) overlaps")));
                }
                seen[p] = true;
                seen[q] = true;
            }
        }
        let norm = |&(p, q): &(usize, usize)| (p.min(q), p.max(q));
        for pa in &self.confound_pairs_a {
            if self.confound_pairs_b.iter().any(|pb| norm(pb) == norm(pa)) {
                return Err(Error::config(format!(
                    "confound pair {pa:?} appears in both modalities"
                )));
            }
        }
        Ok(())
    }

    /// `key = value` text. Pairs are written `p:q`, comma separated.
    pub fn to_text(&self) -> String {
        let pairs = |ps: &[(usize, usize)]| ps.iter().map(|(p, q)| format!("{p}:{q}")).collect::<Vec<_>>().join(",");
        format!(
            "num_classes = {}\ninstances_per_class = {}\ndim_a = {}\ndim_b = {}\nnoise_sigma = {}\n\
             instance_sigma = {}\nconfound_pairs_a = {}\nconfound_pairs_b = {}\nseed = {}\n",
            self.num_classes,
            self.instances_per_class,
            self.dim_a,
            self.dim_b,
            self.noise_sigma,
            self.instance_sigma,
            pairs(&self.confound_pairs_a),
            pairs(&self.confound_pairs_b),
            self.seed
        )
    }

    /// Parses `key = value` text; missing keys take their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = Self::default();
        let pairs = |kv: &mut KeyValues, key: &str, default: Vec<(usize, usize)>| -> Result<Vec<(usize, usize)>> {
            let Some(items) = kv.take_list::<String>(key)? else {
                return Ok(default);
            };
            items
                .iter()
                .map(|it| {
                    let (p, q) = it
                        .split_once(':')
                        .ok_or_else(|| Error::config(format!("{key}: expected p:q, got {it:?}")))?;
                    let num = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::config(format!("{key}: {s:?}: {e}")));
                    Ok((num(p)?, num(q)?))
                })
                .collect()
        };
        let spec = Self {
            num_classes: kv.take_or("num_classes", d.num_classes)?,
            instances_per_class: kv.take_or("instances_per_class", d.instances_per_class)?,
            dim_a: kv.take_or("dim_a", d.dim_a)?,
            dim_b: kv.take_or("dim_b", d.dim_b)?,
            noise_sigma: kv.take_or("noise_sigma", d.noise_sigma)?,
            instance_sigma: kv.take_or("instance_sigma", d.instance_sigma)?,
            confound_pairs_a: pairs(&mut kv, "confound_pairs_a", d.confound_pairs_a)?,
            confound_pairs_b: pairs(&mut kv, "confound_pairs_b", d.confound_pairs_b)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub label: usize,
    pub anchor_a: Vec<f64>,
    pub anchor_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub instances: Vec<Instance>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut means_a = sphere_points(&mut rng, spec.num_classes, spec.dim_a);
    let mut means_b = sphere_points(&mut rng, spec.num_classes, spec.dim_b);
    for &(p, q) in &spec.confound_pairs_a {
        means_a[q] = means_a[p].clone();
    }
    for &(p, q) in &spec.confound_pairs_b {
        means_b[q] = means_b[p].clone();
    }
    let mut instances = Vec::with_capacity(spec.num_instances());
    for label in 0..spec.num_classes {
        for _ in 0..spec.instances_per_class {
            let anchor_a = jitter(&mut rng, &means_a[label], spec.instance_sigma);
            let anchor_b = jitter(&mut rng, &means_b[label], spec.instance_sigma);
            instances.push(Instance {
                id: instances.len(),
                label,
                anchor_a,
                anchor_b,
            });
        }
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        dim_a: spec.dim_a,
        dim_b: spec.dim_b,
        instances,
    })
}

fn sphere_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect()
}

/// One stochastic view per modality: anchor plus isotropic Gaussian noise.
pub fn sample_view<R: rand::Rng + ?Sized>(
    instance: &Instance,
    noise_sigma: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut view = |anchor: &[f64]| -> Vec<f64> {
        anchor
            .iter()
            .map(|&a| {
                let z: f64 = StandardNormal.sample(rng);
                a + noise_sigma * z
            })
            .collect()
    };
    let a = view(&instance.anchor_a);
    let b = view(&instance.anchor_b);
    (a, b)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn anchors_a(&self) -> Matrix {
        Matrix::from_rows(&self.instances.iter().map(|i| &i.anchor_a[..]).collect::<Vec<_>>())
            .expect("anchors share a dimension")
    }

    pub fn anchors_b(&self) -> Matrix {
        Matrix::from_rows(&self.instances.iter().map(|i| &i.anchor_b[..]).collect::<Vec<_>>())
            .expect("anchors share a dimension")
    }

    /// Label-free access for training code.
    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled { dataset: self }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(MAGIC, VERSION);
        w.u64(self.instances.len() as u64);
        w.u32(self.num_classes as u32);
        w.u32(self.dim_a as u32);
        w.u32(self.dim_b as u32);
        for inst in &self.instances {
            w.u64(inst.id as u64);
            w.u32(inst.label as u32);
            w.f64s(&inst.anchor_a);
            w.f64s(&inst.anchor_b);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, MAGIC, VERSION)?;
        let n_at = r.offset();
        let n = r.u64()?;
        let num_classes = r.u32()? as usize;
        let dim_a = r.u32()? as usize;
        let dim_b = r.u32()? as usize;
        let per = 12 + 8 * (dim_a + dim_b);
        let remaining = bytes.len() as u64 - r.offset();
        if n.checked_mul(per as u64).is_none_or(|need| need > remaining) {
            return Err(crate::error::FormatError::new(
                n_at,
                format!("instance count {n} exceeds file size"),
            )
            .into());
        }
        let mut instances = Vec::with_capacity(n as usize);
        for k in 0..n as usize {
            let at = r.offset();
            let id = r.u64()? as usize;
            let label = r.u32()? as usize;
            if id != k {
                return Err(crate::error::FormatError::new(at, format!("instance {k} has id {id}")).into());
            }
            if label >= num_classes {
                return Err(crate::error::FormatError::new(at, format!("label {label} >= {num_classes}")).into());
            }
            let anchor_a = r.f64s(dim_a)?;
            let anchor_b = r.f64s(dim_b)?;
            instances.push(Instance {
                id,
                label,
                anchor_a,
                anchor_b,
            });
        }
        r.finish()?;
        Ok(Self {
            num_classes,
            dim_a,
            dim_b,
            instances,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// A dataset with labels hidden. Training consumes only ids and views.
#[derive(Clone, Copy)]
pub struct Unlabeled<'a> {
    dataset: &'a Dataset,
}

impl<'a> Unlabeled<'a> {
    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn dim_a(&self) -> usize {
        self.dataset.dim_a
    }

    pub fn dim_b(&self) -> usize {
        self.dataset.dim_b
    }

    pub fn fingerprint(&self) -> String {
        self.dataset.fingerprint()
    }

    /// Noise-free anchors, used when embedding the whole set.
    pub fn anchors(&self) -> (Matrix, Matrix) {
        (self.dataset.anchors_a(), self.dataset.anchors_b())
    }

    /// Stacks one fresh view per id for each modality.
    pub fn sample_views<R: rand::Rng + ?Sized>(
        &self,
        ids: &[usize],
        noise_sigma: f64,
        rng: &mut R,
    ) -> (Matrix, Matrix) {
        let mut a = Vec::with_capacity(ids.len() * self.dataset.dim_a);
        let mut b = Vec::with_capacity(ids.len() * self.dataset.dim_b);
        for &i in ids {
            let (va, vb) = sample_view(&self.dataset.instances[i], noise_sigma, rng);
            a.extend(va);
            b.extend(vb);
        }
        (
            Matrix::new(ids.len(), self.dataset.dim_a, a).expect("view width"),
            Matrix::new(ids.len(), self.dataset.dim_b, b).expect("view width"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_text_round_trip() {
        let spec = DatasetSpec::default();
        assert_eq!(DatasetSpec::from_text(&spec.to_text()).unwrap(), spec);
        let small = DatasetSpec::from_text("num_classes = 2\ninstances_per_class = 3\nconfound_pairs_a = 0:1\nconfound_pairs_b =").unwrap();
        assert_eq!(small.confound_pairs_a, vec![(0, 1)]);
        assert!(small.confound_pairs_b.is_empty());
        assert!(DatasetSpec::from_text("confound_pairs_a = 0-1").is_err());
        assert!(DatasetSpec::from_text("colour = red").is_err());
    }

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_classes: 2,
            instances_per_class: 3,
            dim_a: 4,
            dim_b: 3,
            confound_pairs_a: vec![(0, 1)],
            confound_pairs_b: vec![],
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.labels(), vec![0, 0, 0, 1, 1, 1]);
        assert!(d.instances.iter().enumerate().all(|(k, i)| i.id == k));
    }

    #[test]
    fn confounded_means_are_bit_identical() {
        // With a vanishing instance spread the anchors collapse onto the means.
        let spec = DatasetSpec {
            instance_sigma: 1e-300,
            ..small()
        };
        let d = generate(&spec).unwrap();
        assert_eq!(d.instances[0].anchor_a, d.instances[3].anchor_a);
        assert_ne!(d.instances[0].anchor_b, d.instances[3].anchor_b);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = DatasetSpec { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad = DatasetSpec { num_classes: 1, confound_pairs_a: vec![], confound_pairs_b: vec![], ..small() };
        assert!(generate(&bad).unwrap_err().to_string().contains("num_classes"));
        let bad = DatasetSpec { instance_sigma: 0.0, ..small() };
        assert!(generate(&bad).unwrap_err().to_string().contains("instance_sigma"));
        let bad = DatasetSpec {
            num_classes: 4,
            confound_pairs_a: vec![(0, 1), (1, 2)],
            ..small()
        };
        assert!(generate(&bad).unwrap_err().to_string().contains("confound_pairs_a"));
        let bad = DatasetSpec {
            num_classes: 4,
            confound_pairs_a: vec![(0, 1)],
            confound_pairs_b: vec![(1, 0)],
            ..small()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn zero_noise_view_is_the_anchor() {
        let d = generate(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = sample_view(&d.instances[2], 0.0, &mut rng);
        assert_eq!(a, d.instances[2].anchor_a);
        assert_eq!(b, d.instances[2].anchor_b);
    }

    #[test]
    fn views_differ_between_calls_and_average_to_anchor() {
        let d = generate(&small()).unwrap();
        let inst = &d.instances[1];
        let sigma = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let first = sample_view(inst, sigma, &mut rng);
        let second = sample_view(inst, sigma, &mut rng);
        assert_ne!(first, second);

        let n = 10_000;
        let mut mean = vec![0.0; d.dim_a];
        for _ in 0..n {
            let (a, _) = sample_view(inst, sigma, &mut rng);
            mean.iter_mut().zip(&a).for_each(|(m, v)| *m += v / n as f64);
        }
        for (m, a) in mean.iter().zip(&inst.anchor_a) {
            assert!((m - a).abs() < 4.0 * sigma / 100.0, "{m} vs {a}");
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = generate(&small()).unwrap().to_bytes();
        bytes[0] = b'Y';
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
        let good = generate(&small()).unwrap().to_bytes();
        assert!(matches!(Dataset::from_bytes(&good[..good.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn header_records_instance_count() {
        let bytes = generate(&small()).unwrap().to_bytes();
        assert_eq!(&bytes[0..4], b"XMDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
    }
}
