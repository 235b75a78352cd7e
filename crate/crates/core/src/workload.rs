//! Model schemas and deterministic skewed categorical data generation.
//!
//! A wide-and-deep model is described by its categorical feature fields (each
//! backed by an embedding table of a fixed dimension), a set of feature
//! interaction modules, and an MLP head. Only the cost figures of the dense
//! part are kept; its math is out of scope. Categorical IDs are drawn from a
//! finite rank-frequency law `p(r) ∝ r^-s`, with the exponent solved so that
//! the hottest `head_fraction` of the vocabulary carries `head_mass` of the
//! traffic.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One categorical input column and the embedding table behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureField {
    pub name: String,
    /// Identifier of the embedding table this field reads from.
    pub table_ref: String,
    /// Embedding dimension in floats.
    pub dim: usize,
    /// Multi-hot width: how many IDs each instance contributes.
    pub ids_per_instance: usize,
    pub vocab_size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionModule {
    pub name: String,
    pub input_fields: Vec<String>,
    /// Cost units per training instance spent in this module's forward pass.
    pub compute_cost_per_instance: f64,
    /// Dense parameter count, used for gradient-exchange payloads.
    pub params: u64,
}

/// The three workload patterns a model can exhibit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    IoMemory,
    Communication,
    Computation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fields: Vec<FeatureField>,
    pub interaction_modules: Vec<InteractionModule>,
    pub mlp_cost_per_instance: f64,
    /// Dense parameter count of the MLP head.
    pub mlp_params: u64,
    pub archetype: Archetype,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::InvalidArgument("model has no feature fields".into()));
        }
        for f in &self.fields {
            if f.dim == 0 || f.ids_per_instance == 0 || f.vocab_size == 0 {
                return Err(Error::InvalidArgument(format!(
                    "field `{}` must have dim, ids_per_instance and vocab_size >= 1",
                    f.name
                )));
            }
        }
        let mut names: Vec<&str> = self.fields.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate field names".into()));
        }
        for m in &self.interaction_modules {
            for input in &m.input_fields {
                if !self.fields.iter().any(|f| &f.name == input) {
                    return Err(Error::InvalidArgument(format!(
                        "interaction `{}` references unknown field `{}`",
                        m.name, input
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn field(&self, name: &str) -> Option<&FeatureField> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Total dense parameter bytes (interactions + MLP), float32.
    pub fn dense_param_bytes(&self) -> u64 {
        let params: u64 =
            self.interaction_modules.iter().map(|m| m.params).sum::<u64>() + self.mlp_params;
        params * 4
    }

    /// Bytes of pooled embedding output per training instance.
    pub fn embedding_bytes_per_instance(&self) -> f64 {
        self.fields.iter().map(|f| f.dim as f64 * 4.0).sum()
    }
}

/// A resolved rank-frequency law over a finite vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewSpec {
    pub head_fraction: f64,
    pub head_mass: f64,
    /// Exponent `s` of `p(r) ∝ r^-s` over ranks `1..=vocab`.
    pub exponent: f64,
}

impl SkewSpec {
    pub fn uniform() -> Self {
        SkewSpec { head_fraction: 1.0, head_mass: 1.0, exponent: 0.0 }
    }
}

/// Fraction of probability mass carried by the top `head_count` ranks of
/// `p(r) ∝ r^-exponent` over `vocab_size` ranks.
pub fn zipf_head_coverage(exponent: f64, head_count: u64, vocab_size: u64) -> f64 {
    let mut head = 0.0f64;
    let mut total = 0.0f64;
    for r in 1..=vocab_size {
        let w = (r as f64).powf(-exponent);
        total += w;
        if r <= head_count {
            head += w;
        }
    }
    head / total
}

const MAX_EXPONENT: f64 = 64.0;

/// Solve for the exponent that makes the top `head_fraction` of the
/// vocabulary carry `head_mass` of the traffic, by bisection.
pub fn resolve_skew(head_fraction: f64, head_mass: f64, vocab_size: u64) -> Result<SkewSpec> {
    let infeasible = |reason: &str| Error::InfeasibleSkew {
        head_fraction,
        head_mass,
        vocab_size,
        reason: reason.to_string(),
    };
    if vocab_size < 10 {
        return Err(infeasible("vocab_size must be at least 10"));
    }
    if !(head_fraction > 0.0 && head_fraction <= 1.0) || !(head_mass > 0.0 && head_mass <= 1.0) {
        return Err(infeasible("head_fraction and head_mass must lie in (0, 1]"));
    }
    if head_fraction > head_mass {
        return Err(infeasible("a head cannot cover less than its uniform share"));
    }

    let head_count = ((head_fraction * vocab_size as f64).ceil() as u64).max(1);
    let uniform_coverage = head_count as f64 / vocab_size as f64;
    if head_mass < uniform_coverage - 1e-12 {
        // Rounding the head up can make the uniform head already exceed the target.
        return Err(infeasible("uniform distribution already exceeds the requested head mass"));
    }
    if (zipf_head_coverage(0.0, head_count, vocab_size) - head_mass).abs() <= 1e-12 {
        return Ok(SkewSpec { head_fraction, head_mass, exponent: 0.0 });
    }

    let (mut lo, mut hi) = (0.0f64, MAX_EXPONENT);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if zipf_head_coverage(mid, head_count, vocab_size) < head_mass {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let exponent = 0.5 * (lo + hi);
    let achieved = zipf_head_coverage(exponent, head_count, vocab_size);
    if (achieved - head_mass).abs() > 0.01 {
        return Err(infeasible("no exponent reaches the target head mass within 0.01"));
    }
    Ok(SkewSpec { head_fraction, head_mass, exponent })
}

/// IDs of one field within a batch, as `(instance_index, id)` pairs in
/// generation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldIds {
    pub field: String,
    pub pairs: Vec<(u32, u64)>,
}

/// Ragged per-field categorical IDs for `batch_size` training instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_size: usize,
    pub seed: u64,
    fields: Vec<FieldIds>,
}

impl Batch {
    pub fn fields(&self) -> &[FieldIds] {
        &self.fields
    }

    pub fn field_ids(&self, name: &str) -> Option<&FieldIds> {
        self.fields.iter().find(|f| f.field == name)
    }

    pub fn total_ids(&self) -> usize {
        self.fields.iter().map(|f| f.pairs.len()).sum()
    }

    /// Instance range `[start, end)` of this batch, with instance indices
    /// re-based to zero. Pair order within each field is preserved.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        assert!(start <= end && end <= self.batch_size);
        let fields = self
            .fields
            .iter()
            .map(|f| FieldIds {
                field: f.field.clone(),
                pairs: f
                    .pairs
                    .iter()
                    .filter(|(i, _)| (*i as usize) >= start && (*i as usize) < end)
                    .map(|(i, id)| (i - start as u32, *id))
                    .collect(),
            })
            .collect();
        Batch { batch_size: end - start, seed: self.seed, fields }
    }

    /// Newline-delimited debug dump: `field_name,instance_index,id`.
    pub fn write_debug<W: Write>(&self, w: &mut W) -> Result<()> {
        for f in &self.fields {
            for (i, id) in &f.pairs {
                writeln!(w, "{},{},{}", f.field, i, id)?;
            }
        }
        Ok(())
    }
}

/// Inverse-CDF sampler over ranks `0..vocab` of the resolved law.
struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    fn new(exponent: f64, vocab_size: u64) -> Self {
        let mut cdf = Vec::with_capacity(vocab_size as usize);
        let mut acc = 0.0f64;
        for r in 1..=vocab_size {
            acc += (r as f64).powf(-exponent);
            cdf.push(acc);
        }
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        // Swallow floating point shortfall so every u in [0,1) lands in range.
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        ZipfSampler { cdf }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c <= u) as u64
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn field_seed(seed: u64, field_idx: usize) -> u64 {
    splitmix64(seed ^ splitmix64(field_idx as u64 + 1))
}

/// Draw a deterministic batch. Pure in all arguments: the same
/// `(model, skew, batch_size, seed)` always yields the same batch.
pub fn generate_batch(
    model: &ModelConfig,
    skew: &SkewSpec,
    batch_size: usize,
    seed: u64,
) -> Batch {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut samplers: HashMap<(u64, u64), ZipfSampler> = HashMap::new();
    let mut fields = Vec::with_capacity(model.fields.len());
    for (fi, field) in model.fields.iter().enumerate() {
        let key = (skew.exponent.to_bits(), field.vocab_size);
        let sampler = samplers
            .entry(key)
            .or_insert_with(|| ZipfSampler::new(skew.exponent, field.vocab_size));
        let mut rng = ChaCha8Rng::seed_from_u64(field_seed(seed, fi));
        let mut pairs = Vec::with_capacity(batch_size * field.ids_per_instance);
        for instance in 0..batch_size {
            for _ in 0..field.ids_per_instance {
                pairs.push((instance as u32, sampler.sample(&mut rng)));
            }
        }
        fields.push(FieldIds { field: field.name.clone(), pairs });
    }
    Batch { batch_size, seed, fields }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(fields: &[(&str, usize, usize, u64)]) -> ModelConfig {
        ModelConfig {
            fields: fields
                .iter()
                .map(|(name, dim, per, vocab)| FeatureField {
                    name: name.to_string(),
                    table_ref: name.to_string(),
                    dim: *dim,
                    ids_per_instance: *per,
                    vocab_size: *vocab,
                })
                .collect(),
            interaction_modules: vec![],
            mlp_cost_per_instance: 0.0,
            mlp_params: 0,
            archetype: Archetype::IoMemory,
        }
    }

    /// Independent oracle: partial sums evaluated directly, no reuse of the
    /// implementation's accumulator loop shape.
    fn oracle_coverage(s: f64, head: u64, vocab: u64) -> f64 {
        let weights: Vec<f64> = (1..=vocab).map(|r| (r as f64).powf(-s)).collect();
        let head_sum: f64 = weights[..head as usize].iter().sum();
        let total: f64 = weights.iter().sum();
        head_sum / total
    }

    #[test]
    fn uniform_head_resolves_to_zero_exponent() {
        let spec = resolve_skew(0.2, 0.2, 1000).unwrap();
        assert!(spec.exponent.abs() < 1e-9, "exponent {}", spec.exponent);
    }

    #[test]
    fn head_mass_target_is_met() {
        let spec = resolve_skew(0.2, 0.7, 10_000).unwrap();
        let cov = oracle_coverage(spec.exponent, 2000, 10_000);
        assert!((cov - 0.7).abs() <= 0.01, "coverage {cov}");

        // Bisection oracle over s, evaluating the partial sums directly.
        let (mut lo, mut hi) = (0.0, 64.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if oracle_coverage(mid, 2000, 10_000) < 0.7 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((spec.exponent - 0.5 * (lo + hi)).abs() < 1e-6);
    }

    #[test]
    fn extreme_head_mass() {
        let spec = resolve_skew(0.2, 0.99, 10_000).unwrap();
        let cov = oracle_coverage(spec.exponent, 2000, 10_000);
        assert!((0.98..=1.0).contains(&cov), "coverage {cov}");
    }

    #[test]
    fn infeasible_pairs_error() {
        assert!(resolve_skew(0.5, 0.2, 1000).is_err());
        assert!(resolve_skew(0.2, 0.7, 5).is_err());
        // head rounds up to 2/10 = 0.2 > 0.15
        assert!(resolve_skew(0.15, 0.15, 10).is_err());
    }

    #[test]
    fn batch_generation_is_deterministic() {
        let model = tiny_model(&[("a", 4, 2, 1000), ("b", 8, 1, 500)]);
        let skew = resolve_skew(0.2, 0.7, 1000).unwrap();
        let b1 = generate_batch(&model, &skew, 64, 7);
        let b2 = generate_batch(&model, &skew, 64, 7);
        assert_eq!(b1, b2);
        let b3 = generate_batch(&model, &skew, 64, 8);
        assert_ne!(b1, b3);
    }

    #[test]
    fn ids_respect_vocab_bound() {
        let model = tiny_model(&[("a", 4, 3, 137)]);
        let skew = resolve_skew(0.2, 0.8, 137).unwrap();
        let b = generate_batch(&model, &skew, 500, 3);
        for f in b.fields() {
            for (i, id) in &f.pairs {
                assert!((*i as usize) < 500);
                assert!(*id < 137);
            }
        }
    }

    #[test]
    fn empirical_head_mass_converges() {
        let model = tiny_model(&[("a", 4, 1, 10_000)]);
        let skew = resolve_skew(0.2, 0.7, 10_000).unwrap();
        let b = generate_batch(&model, &skew, 1_000_000, 11);
        // Direct frequency counting oracle.
        let mut counts = vec![0u64; 10_000];
        for (_, id) in &b.fields()[0].pairs {
            counts[*id as usize] += 1;
        }
        let head: u64 = counts[..2000].iter().sum();
        let mass = head as f64 / 1_000_000.0;
        assert!((0.68..=0.72).contains(&mass), "head mass {mass}");
    }

    #[test]
    fn slice_rebases_instances() {
        let model = tiny_model(&[("a", 4, 2, 100)]);
        let skew = SkewSpec::uniform();
        let b = generate_batch(&model, &skew, 10, 1);
        let s = b.slice(4, 8);
        assert_eq!(s.batch_size, 4);
        assert_eq!(s.fields()[0].pairs.len(), 8);
        assert!(s.fields()[0].pairs.iter().all(|(i, _)| *i < 4));
    }
}
