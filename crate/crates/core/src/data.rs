//! Synthetic utterance-classification tasks.
//!
//! Each class owns a fixed source signature: a random FIR filter driven by
//! white noise plus a harmonic comb at a class-specific fundamental. Every
//! sample draws fresh excitation noise, harmonic phases and a small pitch
//! jitter, is scaled to RMS 1, and then receives white noise at the
//! requested SNR.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const FIR_TAPS: usize = 12;
const HARMONICS: usize = 4;
const F0_MIN: f64 = 0.012;
const F0_MAX: f64 = 0.05;
const F0_JITTER: f64 = 0.04;
const COMB_GAIN: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub wave_length: usize,
    /// Signal-to-noise ratio in dB; `inf` adds no noise.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            samples_per_class: 100,
            wave_length: 400,
            snr_db: 30.0,
            seed: 0,
        }
    }
}

/// JSON has no infinity, so an infinite SNR is written as the string "inf".
mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("invalid snr_db {other:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSignature {
    pub fir: Vec<f64>,
    /// Fundamental in cycles per sample.
    pub f0: f64,
    pub harmonic_gains: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[1, wave_length]`
    pub wave: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub signatures: Vec<ClassSignature>,
    /// Grouped by class, in class order.
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn class_signature(spec: &SyntheticTaskSpec, class: usize) -> ClassSignature {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("class.{class}")));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let fir = (0..FIR_TAPS)
        .map(|k| normal.sample(&mut rng) * (-(k as f64) / 4.0).exp())
        .collect();
    // Evenly spaced on a log axis with a small random offset, so that classes
    // stay distinct.
    let span = (F0_MAX / F0_MIN).ln();
    let slot = (class as f64 + rng.random_range(0.25..0.75)) / spec.n_classes as f64;
    let f0 = F0_MIN * (span * slot).exp();
    let harmonic_gains = (0..HARMONICS).map(|_| rng.random_range(0.2..1.0)).collect();
    ClassSignature { fir, f0, harmonic_gains }
}

fn render(spec: &SyntheticTaskSpec, sig: &ClassSignature, class: usize, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("sample.{class}.{index}")));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = spec.wave_length;
    let excitation: Vec<f64> = (0..n + FIR_TAPS).map(|_| normal.sample(&mut rng)).collect();
    let mut wave: Vec<f64> = (0..n)
        .map(|t| sig.fir.iter().enumerate().map(|(k, h)| h * excitation[t + FIR_TAPS - k]).sum())
        .collect();
    let f0 = sig.f0 * (1.0 + F0_JITTER * normal.sample(&mut rng));
    let noise_rms = rms(&wave).max(1e-12);
    for (h, gain) in sig.harmonic_gains.iter().enumerate() {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = f0 * (h + 1) as f64;
        for (t, w) in wave.iter_mut().enumerate() {
            *w += COMB_GAIN * noise_rms * gain * (std::f64::consts::TAU * freq * t as f64 + phase).sin();
        }
    }
    let r = rms(&wave).max(1e-12);
    wave.iter_mut().for_each(|w| *w /= r);
    if spec.snr_db.is_finite() {
        let sd = 10f64.powf(-spec.snr_db / 20.0);
        wave.iter_mut().for_each(|w| *w += sd * normal.sample(&mut rng));
    }
    wave
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Split sizes for one class: 8:1:1 with the remainder going to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(PetError::config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.samples_per_class < 10 {
            return Err(PetError::config("samples_per_class must be >= 10 for an 8:1:1 split"));
        }
        if self.wave_length == 0 {
            return Err(PetError::config("wave_length must be positive"));
        }
        if self.snr_db.is_nan() {
            return Err(PetError::config("snr_db is NaN"));
        }
        Ok(())
    }
}

pub fn gen_synthetic_dataset(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let signatures: Vec<ClassSignature> = (0..spec.n_classes).map(|c| class_signature(spec, c)).collect();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let (n_train, n_val, _) = split_sizes(spec.samples_per_class);
    for (c, sig) in signatures.iter().enumerate() {
        let mut order: Vec<usize> = (0..spec.samples_per_class).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("split.{c}"))));
        for (pos, &i) in order.iter().enumerate() {
            let ex = Example {
                wave: Tensor::new([1, spec.wave_length], render(spec, sig, c, i))?,
                label: c,
            };
            match pos {
                p if p < n_train => train.push(ex),
                p if p < n_train + n_val => val.push(ex),
                _ => test.push(ex),
            }
        }
    }
    Ok(Dataset {
        spec: *spec,
        signatures,
        train,
        val,
        test,
    })
}

impl Dataset {
    /// Per-class-balanced subset of the training split: each class keeps
    /// `floor(fraction * n_c)` samples, taken as a prefix of a seed-shuffled
    /// order.
    pub fn train_subset(&self, fraction: f64, seed: u64) -> Result<Vec<&Example>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(PetError::config(format!("subset fraction {fraction} outside (0, 1]")));
        }
        let mut out = Vec::new();
        for c in 0..self.spec.n_classes {
            let mut members: Vec<&Example> = self.train.iter().filter(|e| e.label == c).collect();
            let keep = (fraction * members.len() as f64 + 1e-9).floor() as usize;
            if keep == 0 {
                return Err(PetError::config(format!(
                    "fraction {fraction} leaves class {c} with no training samples"
                )));
            }
            if keep < members.len() {
                members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("subset.{c}"))));
                members.truncate(keep);
            }
            out.extend(members);
        }
        Ok(out)
    }
}
