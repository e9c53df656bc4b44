//! Generates (a, b, c, d) tuples with a^b = d mod c under the four scheme
//! combinations: {uniform, reciprocal} operands x {computed, uniform}
//! outcomes.
//!
//! Draws are counter-based: sample i is a pure function of (seed, i), so
//! generation is reproducible and order-independent.

use crate::numtheory::modpow;
use crate::rng::CounterRng;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperandLaw {
    Uniform,
    Reciprocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeLaw {
    Computed,
    Uniform,
}

/// One sampled tuple with a^b = d mod c.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModExpInstance {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub operand_law: OperandLaw,
    pub outcome_law: OutcomeLaw,
    /// Maximum operand value (inclusive).
    pub m: u64,
    /// Maximum modulus (inclusive); c is drawn from [1, c_max].
    pub c_max: u64,
    pub seed: u64,
    pub max_rejections: u64,
}

impl SamplerSpec {
    pub fn new(operand_law: OperandLaw, outcome_law: OutcomeLaw, seed: u64) -> Self {
        SamplerSpec {
            operand_law,
            outcome_law,
            m: 1_000_000,
            c_max: 100,
            seed,
            max_rejections: 1_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config("sampler: M must be >= 1".into()));
        }
        if self.c_max < 1 || self.c_max > self.m {
            return Err(Error::Config("sampler: need 1 <= c_max <= M".into()));
        }
        if self.max_rejections == 0 {
            return Err(Error::Config("sampler: max_rejections must be >= 1".into()));
        }
        Ok(())
    }
}

/// PMF of the shifted log-uniform operand law:
/// P(n) = (ln(n+2) - ln(n+1)) / ln(M+2) on 0 <= n <= M, else 0.
pub fn reciprocal_pmf(n: i64, m: u64) -> f64 {
    if n < 0 || n as u64 > m {
        return 0.0;
    }
    let n = n as f64;
    ((n + 2.0).ln() - (n + 1.0).ln()) / ((m as f64) + 2.0).ln()
}

/// Draw from the reciprocal law: u ~ U[ln 1, ln(M+2)), n = floor(e^u) - 1.
pub fn draw_reciprocal(rng: &mut CounterRng, m: u64) -> u64 {
    let u = rng.next_f64() * ((m as f64) + 2.0).ln();
    // floor(e^u) <= M+1 holds mathematically since u < ln(M+2); the min
    // guards float rounding at the boundary.
    let n = u.exp().floor() as u64 - 1;
    n.min(m)
}

fn draw_operand(rng: &mut CounterRng, law: OperandLaw, m: u64) -> u64 {
    match law {
        OperandLaw::Uniform => rng.uniform(m + 1),
        OperandLaw::Reciprocal => draw_reciprocal(rng, m),
    }
}

/// Draw one instance under the given sampling scheme using the supplied stream.
pub fn draw_instance(spec: &SamplerSpec, rng: &mut CounterRng) -> Result<ModExpInstance> {
    match spec.outcome_law {
        OutcomeLaw::Computed => {
            let a = draw_operand(rng, spec.operand_law, spec.m);
            let b = draw_operand(rng, spec.operand_law, spec.m);
            let c = rng.range_inclusive(1, spec.c_max);
            let d = modpow(a, b, c)?;
            Ok(ModExpInstance { a, b, c, d })
        }
        OutcomeLaw::Uniform => {
            // d uniform on [0, c_max - 1], then rejection-sample (a, b, c)
            // with c > d until a^b = d mod c.
            let d = rng.uniform(spec.c_max);
            for _ in 0..spec.max_rejections {
                let c = rng.range_inclusive(d + 1, spec.c_max);
                let a = draw_operand(rng, spec.operand_law, spec.m);
                let b = draw_operand(rng, spec.operand_law, spec.m);
                if modpow(a, b, c)? == d {
                    return Ok(ModExpInstance { a, b, c, d });
                }
            }
            Err(Error::RejectionExhausted {
                target: d,
                attempts: spec.max_rejections,
            })
        }
    }
}

const STREAM_SAMPLE: u64 = 0x5A4D;

/// Instance i as a pure function of (spec.seed, i).
pub fn instance_at(spec: &SamplerSpec, index: u64) -> Result<ModExpInstance> {
    let mut rng = CounterRng::from_stream(spec.seed, &[STREAM_SAMPLE, index]);
    draw_instance(spec, &mut rng)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GenerationStats {
    pub emitted: u64,
    pub rejections: u64,
    /// Count of emitted instances per modulus value c.
    pub per_c: std::collections::BTreeMap<u64, u64>,
}

pub const DATASET_FORMAT_VERSION: &str = "mexp-ds-1";

/// Sidecar metadata written next to each generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub spec: SamplerSpec,
    pub count: u64,
    pub stats: GenerationStats,
}

/// Stream exactly `count` instances as JSONL into the sink. Output is a pure
/// function of (spec, count).
pub fn generate_dataset(
    spec: &SamplerSpec,
    count: u64,
    sink: &mut dyn Write,
) -> Result<GenerationStats> {
    spec.validate()?;
    let mut stats = GenerationStats::default();
    for i in 0..count {
        let mut rng = CounterRng::from_stream(spec.seed, &[STREAM_SAMPLE, i]);
        let inst = match spec.outcome_law {
            OutcomeLaw::Computed => draw_instance(spec, &mut rng)?,
            OutcomeLaw::Uniform => {
                // Re-draw by hand to count rejections.
                let d = rng.uniform(spec.c_max);
                let mut found = None;
                for _ in 0..spec.max_rejections {
                    let c = rng.range_inclusive(d + 1, spec.c_max);
                    let a = draw_operand(&mut rng, spec.operand_law, spec.m);
                    let b = draw_operand(&mut rng, spec.operand_law, spec.m);
                    if modpow(a, b, c)? == d {
                        found = Some(ModExpInstance { a, b, c, d });
                        break;
                    }
                    stats.rejections += 1;
                }
                found.ok_or(Error::RejectionExhausted {
                    target: d,
                    attempts: spec.max_rejections,
                })?
            }
        };
        let line = serde_json::to_string(&inst)
            .map_err(|e| Error::Format { what: "dataset line", detail: e.to_string() })?;
        sink.write_all(line.as_bytes())
            .and_then(|_| sink.write_all(b"\n"))
            .map_err(|e| Error::io("<sink>", e))?;
        *stats.per_c.entry(inst.c).or_insert(0) += 1;
        stats.emitted += 1;
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    A,
    B,
    C,
    D,
}

impl std::str::FromStr for Field {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Field::A),
            "b" => Ok(Field::B),
            "c" => Ok(Field::C),
            "d" => Ok(Field::D),
            other => Err(Error::Config(format!("unknown field '{other}' (expected a|b|c|d)"))),
        }
    }
}

pub fn field_value(inst: &ModExpInstance, field: Field) -> u64 {
    match field {
        Field::A => inst.a,
        Field::B => inst.b,
        Field::C => inst.c,
        Field::D => inst.d,
    }
}

/// Integer bin edges, log-spaced over [0, m]. Returned edges are strictly
/// increasing, start at 0 and end at m + 1; bin i covers [e_i, e_{i+1}).
pub fn log_spaced_edges(m: u64, bins: usize) -> Vec<u64> {
    let top = (m as f64 + 2.0).ln();
    let mut edges: Vec<u64> = (0..=bins)
        .map(|i| {
            let u = top * (i as f64) / (bins as f64);
            (u.exp().floor() as u64).saturating_sub(1).min(m + 1)
        })
        .collect();
    edges[0] = 0;
    *edges.last_mut().unwrap() = m + 1;
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Histogram of one field over integer bin edges. Values outside the edge
/// range are ignored; with edges covering the full support, counts sum to
/// the dataset size.
pub fn empirical_histogram(data: &[ModExpInstance], field: Field, edges: &[u64]) -> Result<Vec<u64>> {
    if data.is_empty() {
        return Err(Error::domain("empirical_histogram: dataset is empty"));
    }
    if edges.len() < 2 {
        return Err(Error::domain("empirical_histogram: need at least two edges"));
    }
    let mut counts = vec![0u64; edges.len() - 1];
    for inst in data {
        let v = field_value(inst, field);
        if v < edges[0] || v >= *edges.last().unwrap() {
            continue;
        }
        // partition_point gives the first edge > v; bin index is one less.
        let idx = edges.partition_point(|&e| e <= v) - 1;
        counts[idx] += 1;
    }
    Ok(counts)
}

/// Analytic reciprocal-law mass of bin [lo, hi): telescopes to
/// (ln(hi+1) - ln(lo+1)) / ln(M+2), clipped to the support.
pub fn reciprocal_bin_mass(lo: u64, hi: u64, m: u64) -> f64 {
    let lo = lo.min(m + 1);
    let hi = hi.min(m + 1);
    if hi <= lo {
        return 0.0;
    }
    (((hi as f64) + 1.0).ln() - ((lo as f64) + 1.0).ln()) / ((m as f64) + 2.0).ln()
}

/// Pearson chi-square p-value of observed counts against expected counts.
pub fn chi_square_p(observed: &[u64], expected: &[f64]) -> Result<f64> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(Error::domain("chi_square_p: need matching vectors of length >= 2"));
    }
    let mut stat = 0.0;
    for (&o, &e) in observed.iter().zip(expected) {
        if e <= 0.0 {
            return Err(Error::domain("chi_square_p: expected counts must be positive"));
        }
        let diff = o as f64 - e;
        stat += diff * diff / e;
    }
    let df = (observed.len() - 1) as f64;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let dist = ChiSquared::new(df).map_err(|e| Error::domain(e.to_string()))?;
    Ok(1.0 - dist.cdf(stat))
}
