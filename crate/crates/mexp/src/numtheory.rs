//! Exact integer number theory. Ground-truth oracle for d = a^b mod c and
//! the label source for embedding analysis. Everything is unconditional:
//! trial division only, no probabilistic tests (inputs are bounded by 10^6).

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// a^b mod c by square-and-multiply. Intermediate products go through u128
/// so they cannot overflow. Convention: 0^0 = 1.
pub fn modpow(a: u64, mut b: u64, c: u64) -> Result<u64> {
    if c == 0 {
        return Err(Error::domain("modpow: modulus must be >= 1"));
    }
    let m = c as u128;
    let mut acc: u128 = 1 % m;
    let mut base = (a as u128) % m;
    while b > 0 {
        if b & 1 == 1 {
            acc = acc * base % m;
        }
        base = base * base % m;
        b >>= 1;
    }
    Ok(acc as u64)
}

/// Smallest prime dividing n; 1 for n = 1 (sentinel so labeling never errors
/// on token 1).
pub fn lowest_prime_factor(n: u64) -> Result<u64> {
    if n == 0 {
        return Err(Error::domain("lowest_prime_factor: n must be >= 1"));
    }
    if n == 1 {
        return Ok(1);
    }
    if n.is_multiple_of(2) {
        return Ok(2);
    }
    let mut p = 3;
    while p * p <= n {
        if n.is_multiple_of(p) {
            return Ok(p);
        }
        p += 2;
    }
    Ok(n)
}

/// Exact primality by trial division to sqrt(n).
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n.is_multiple_of(2) {
        return n == 2;
    }
    let mut p = 3;
    while p * p <= n {
        if n.is_multiple_of(p) {
            return false;
        }
        p += 2;
    }
    true
}

/// Number of positive divisors of n.
pub fn divisor_count(n: u64) -> Result<u64> {
    if n == 0 {
        return Err(Error::domain("divisor_count: n must be >= 1"));
    }
    let mut count = 1u64;
    let mut rest = n;
    let mut p = 2;
    while p * p <= rest {
        if rest.is_multiple_of(p) {
            let mut e = 0u64;
            while rest.is_multiple_of(p) {
                rest /= p;
                e += 1;
            }
            count *= e + 1;
        }
        p += if p == 2 { 1 } else { 2 };
    }
    if rest > 1 {
        count *= 2;
    }
    Ok(count)
}

/// Euler's totient: count of k in [1, n] coprime to n.
pub fn totient(n: u64) -> Result<u64> {
    if n == 0 {
        return Err(Error::domain("totient: n must be >= 1"));
    }
    let mut phi = n;
    let mut rest = n;
    let mut p = 2;
    while p * p <= rest {
        if rest.is_multiple_of(p) {
            while rest.is_multiple_of(p) {
                rest /= p;
            }
            phi -= phi / p;
        }
        p += if p == 2 { 1 } else { 2 };
    }
    if rest > 1 {
        phi -= phi / rest;
    }
    Ok(phi)
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Least k >= 1 with a^k = 1 mod n; requires gcd(a, n) = 1. The order
/// divides totient(n), so only divisors of the totient are tried.
pub fn multiplicative_order(a: u64, n: u64) -> Result<u64> {
    if n < 2 {
        return Err(Error::domain("multiplicative_order: n must be >= 2"));
    }
    if gcd(a, n) != 1 {
        return Err(Error::UndefinedOrder { a, n });
    }
    let phi = totient(n)?;
    let mut divisors: Vec<u64> = Vec::new();
    let mut d = 1;
    while d * d <= phi {
        if phi % d == 0 {
            divisors.push(d);
            divisors.push(phi / d);
        }
        d += 1;
    }
    divisors.sort_unstable();
    divisors.dedup();
    for k in divisors {
        if modpow(a % n, k, n)? == 1 {
            return Ok(k);
        }
    }
    unreachable!("order must divide totient(n)")
}

/// True iff gcd(g, n) = 1 and ord(g) = totient(n). gcd != 1 yields false,
/// never an error.
pub fn is_primitive_root(g: u64, n: u64) -> bool {
    if n < 2 || gcd(g, n) != 1 {
        return false;
    }
    match (multiplicative_order(g, n), totient(n)) {
        (Ok(ord), Ok(phi)) => ord == phi,
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

/// Number-theoretic labels for one token value, used to color PCA
/// projections of the embedding space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropertyLabels {
    pub value: u64,
    pub lowest_prime_factor: u64,
    pub parity: Parity,
    pub is_prime: bool,
    pub divisor_count: u64,
    /// Order of value modulo the configured probe modulus; absent when
    /// gcd(value, modulus) != 1.
    pub multiplicative_order: Option<u64>,
    pub totient: u64,
    /// Whether value is a primitive root of the probe modulus; absent when
    /// gcd(value, modulus) != 1.
    pub is_primitive_root: Option<bool>,
    pub residue_mod_5: u64,
    /// The configured primes that divide value.
    pub multiple_of: Vec<u64>,
}

/// Compute labels for one value against a probe modulus and a set of primes.
pub fn labels_for(value: u64, order_modulus: u64, multiple_primes: &[u64]) -> Result<PropertyLabels> {
    if value == 0 {
        return Err(Error::domain("labels_for: value must be >= 1"));
    }
    let coprime = order_modulus >= 2 && gcd(value, order_modulus) == 1;
    let order = if coprime {
        Some(multiplicative_order(value, order_modulus)?)
    } else {
        None
    };
    let prim = if coprime {
        Some(order == Some(totient(order_modulus)?))
    } else {
        None
    };
    Ok(PropertyLabels {
        value,
        lowest_prime_factor: lowest_prime_factor(value)?,
        parity: if value.is_multiple_of(2) { Parity::Even } else { Parity::Odd },
        is_prime: is_prime(value),
        divisor_count: divisor_count(value)?,
        multiplicative_order: order,
        totient: totient(value)?,
        is_primitive_root: prim,
        residue_mod_5: value % 5,
        multiple_of: multiple_primes.iter().copied().filter(|&p| value.is_multiple_of(p)).collect(),
    })
}

/// One PropertyLabels row per value.
pub fn build_label_table(
    values: &[u64],
    order_modulus: u64,
    multiple_primes: &[u64],
) -> Result<Vec<PropertyLabels>> {
    if values.is_empty() {
        return Err(Error::domain("build_label_table: values must be nonempty"));
    }
    values
        .iter()
        .map(|&v| labels_for(v, order_modulus, multiple_primes))
        .collect()
}

pub const LABEL_CSV_HEADER: &str = "value,lowest_prime_factor,parity,is_prime,divisor_count,multiplicative_order,totient,is_primitive_root,residue_mod_5,multiple_of";

pub fn label_csv_row(l: &PropertyLabels) -> String {
    let order = l.multiplicative_order.map(|o| o.to_string()).unwrap_or_default();
    let prim = l.is_primitive_root.map(|p| p.to_string()).unwrap_or_default();
    let multiples = l
        .multiple_of
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(";");
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        l.value,
        l.lowest_prime_factor,
        match l.parity {
            Parity::Even => "even",
            Parity::Odd => "odd",
        },
        l.is_prime,
        l.divisor_count,
        order,
        l.totient,
        prim,
        l.residue_mod_5,
        multiples
    )
}

/// Write a label table as CSV, one row per value, columns matching the
/// PropertyLabels field names.
pub fn write_label_csv(path: &Path, labels: &[PropertyLabels]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 48);
    out.push_str(LABEL_CSV_HEADER);
    out.push('\n');
    for l in labels {
        out.push_str(&label_csv_row(l));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
