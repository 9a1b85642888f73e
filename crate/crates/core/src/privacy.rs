//! DP-SGD pieces: per-example L2 clipping, Gaussian noise over the
//! coordinates that are actually trained, and a basic-composition ledger.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, RngStream};

/// Where Gaussian noise is injected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    /// Each client privatizes every local step (DP-SGD).
    #[default]
    Client,
    /// Clients clip their whole round update; the server noises the average.
    Server,
}

/// Granularity of the clipping bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipGranularity {
    /// One bound `C` over the concatenation of all trained blocks.
    #[default]
    Global,
    /// Each of the `m` trained blocks clipped to `C / sqrt(m)`.
    PerBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyParams {
    pub enabled: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub placement: NoisePlacement,
    pub clipping: ClipGranularity,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            enabled: false,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            delta: 1e-5,
            placement: NoisePlacement::Client,
            clipping: ClipGranularity::Global,
        }
    }
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("privacy.clip_norm", "must be positive and finite"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("privacy.delta", "must lie in (0, 1)"));
        }
        if self.noise_multiplier.is_nan() || self.noise_multiplier < 0.0 {
            return Err(Error::config("privacy.noise_multiplier", "must be nonnegative"));
        }
        Ok(())
    }

    /// Standard deviation of the noise added to a sum of clipped values.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }

    /// ε of one Gaussian release with sensitivity `C` and std `σC`:
    /// `sqrt(2 ln(1.25 / δ)) / σ`. Infinite when `σ = 0`.
    pub fn epsilon_per_release(&self) -> f64 {
        if self.noise_multiplier == 0.0 {
            f64::INFINITY
        } else {
            (2.0 * (1.25 / self.delta).ln()).sqrt() / self.noise_multiplier
        }
    }
}

/// `grad · min(1, C / ‖grad‖₂)`.
pub fn clip_per_example(grad: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = l2_norm(grad);
    if norm <= clip_norm {
        return grad.to_vec();
    }
    let s = clip_norm / norm;
    grad.iter().map(|g| g * s).collect()
}

/// Clips each block separately to `C / sqrt(m)` so the concatenation stays
/// within `C`.
pub fn clip_per_block(blocks: &[&[f64]], clip_norm: f64) -> Vec<Vec<f64>> {
    let per = clip_norm / (blocks.len().max(1) as f64).sqrt();
    blocks.iter().map(|b| clip_per_example(b, per)).collect()
}

/// `(sum + N(0, (σC)²) per coordinate) / batch_size`. Only the coordinates
/// present in `sum_of_clipped` receive noise.
pub fn privatize_update(
    sum_of_clipped: &[f64],
    batch_size: usize,
    params: &PrivacyParams,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if params.noise_multiplier.is_nan() || params.noise_multiplier < 0.0 {
        return Err(Error::config("privacy.noise_multiplier", "must be nonnegative"));
    }
    if batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let std = params.noise_std();
    let b = batch_size as f64;
    Ok(sum_of_clipped
        .iter()
        .map(|s| {
            if std == 0.0 {
                s / b
            } else {
                (s + std * rng.normal()) / b
            }
        })
        .collect())
}

/// ε as a JSON number, or the string `"inf"` when unbounded.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Epsilon(pub f64);

impl Epsilon {
    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

impl std::fmt::Display for Epsilon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_finite() {
            write!(f, "{}", self.0)
        } else {
            f.write_str("inf")
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Epsilon(v)),
            Raw::Str(s) if s == "inf" => Ok(Epsilon(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad epsilon `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    /// Gaussian releases composed into this entry.
    pub releases: usize,
    pub noise_multiplier: f64,
    pub clip_norm: f64,
    pub epsilon_per_release: Epsilon,
    pub delta_per_release: f64,
    pub epsilon: Epsilon,
    pub delta: f64,
    pub epsilon_total: Epsilon,
    pub delta_total: f64,
}

/// Append-only (ε, δ) record under basic composition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rounds_elapsed(&self) -> usize {
        self.entries.len()
    }

    pub fn epsilon_total(&self) -> Epsilon {
        self.entries.last().map_or(Epsilon(0.0), |e| e.epsilon_total)
    }

    pub fn delta_total(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.delta_total)
    }

    /// Appends one round made of a single Gaussian release.
    pub fn account(&mut self, params: &PrivacyParams) -> Result<&LedgerEntry> {
        self.account_releases(params, 1)
    }

    /// Appends one round made of `releases` Gaussian releases, composed
    /// additively within the round.
    pub fn account_releases(&mut self, params: &PrivacyParams, releases: usize) -> Result<&LedgerEntry> {
        params.validate()?;
        let k = releases as f64;
        let eps = if releases == 0 {
            0.0
        } else {
            k * params.epsilon_per_release()
        };
        let delta = k * params.delta;
        if eps.is_infinite() {
            log::warn!("σ = 0 with privacy enabled: ε is unbounded");
        }
        let mut entry = LedgerEntry {
            round: self.entries.len(),
            releases,
            noise_multiplier: params.noise_multiplier,
            clip_norm: params.clip_norm,
            epsilon_per_release: Epsilon(params.epsilon_per_release()),
            delta_per_release: params.delta,
            epsilon: Epsilon(eps),
            delta,
            epsilon_total: Epsilon(0.0),
            delta_total: 0.0,
        };
        self.entries.push(entry.clone());
        let (e, d) = self.composed();
        entry.epsilon_total = Epsilon(e);
        entry.delta_total = d;
        *self.entries.last_mut().expect("just pushed") = entry;
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Basic composition as release count times per-release cost, grouped
    /// by mechanism, so `n` identical releases total exactly `n · ε`.
    fn composed(&self) -> (f64, f64) {
        let mut groups: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.releases > 0) {
            *groups
                .entry((e.epsilon_per_release.0.to_bits(), e.delta_per_release.to_bits()))
                .or_default() += e.releases;
        }
        groups.iter().fold((0.0, 0.0), |(eps, delta), ((e, d), n)| {
            let n = *n as f64;
            (eps + n * f64::from_bits(*e), delta + n * f64::from_bits(*d))
        })
    }

    pub fn write_json(&self, params: &PrivacyParams, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Dump<'a> {
            params: &'a PrivacyParams,
            rounds_elapsed: usize,
            epsilon_total: Epsilon,
            delta_total: f64,
            entries: &'a [LedgerEntry],
        }
        let path = path.as_ref();
        let dump = Dump {
            params,
            rounds_elapsed: self.rounds_elapsed(),
            epsilon_total: self.epsilon_total(),
            delta_total: self.delta_total(),
            entries: &self.entries,
        };
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &dump).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_scales_long_vectors_only() {
        let g = vec![6.0, 8.0];
        let c = clip_per_example(&g, 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert!((l2_norm(&c) - 1.0).abs() < 1e-12);
        let short = vec![0.3, 0.4];
        assert_eq!(clip_per_example(&short, 1.0), short);
    }

    #[test]
    fn per_block_clipping_bounds_the_concatenation() {
        let a = vec![3.0, 4.0];
        let b = vec![10.0];
        let clipped = clip_per_block(&[&a, &b], 1.0);
        let all: Vec<f64> = clipped.concat();
        assert!(l2_norm(&all) <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_noise_is_the_plain_mean() {
        let p = PrivacyParams {
            noise_multiplier: 0.0,
            enabled: true,
            ..Default::default()
        };
        let out = privatize_update(&[2.0, 4.0], 2, &p, &mut RngStream::new(0, "n")).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn negative_sigma_is_a_config_error() {
        let p = PrivacyParams {
            noise_multiplier: -1.0,
            ..Default::default()
        };
        let r = privatize_update(&[1.0], 1, &p, &mut RngStream::new(0, "n"));
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn composition_is_additive() {
        let p = PrivacyParams {
            enabled: true,
            noise_multiplier: 2.0,
            ..Default::default()
        };
        let mut l = PrivacyLedger::new();
        let e1 = l.account(&p).unwrap().epsilon.0;
        l.account(&p).unwrap();
        assert_eq!(l.epsilon_total().0, 2.0 * e1);
        assert_eq!(l.rounds_elapsed(), 2);
        assert!((l.delta_total() - 2e-5).abs() < 1e-20);
    }

    #[test]
    fn epsilon_plug_in_and_limits() {
        let sigma = (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
        let p = PrivacyParams {
            noise_multiplier: sigma,
            ..Default::default()
        };
        assert!((p.epsilon_per_release() - 1.0).abs() < 1e-12);
        let huge = PrivacyParams {
            noise_multiplier: 1e12,
            ..Default::default()
        };
        assert!(huge.epsilon_per_release() < 1e-10);
        let zero = PrivacyParams {
            noise_multiplier: 0.0,
            ..Default::default()
        };
        let mut l = PrivacyLedger::new();
        let e = l.account(&zero).unwrap();
        assert!(e.epsilon.0.is_infinite());
        assert_eq!(serde_json::to_string(&e.epsilon).unwrap(), "\"inf\"");
        let back: Epsilon = serde_json::from_str("\"inf\"").unwrap();
        assert!(back.0.is_infinite());
    }
}
