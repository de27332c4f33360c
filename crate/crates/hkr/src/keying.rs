//! Secret-key lifecycle: generation from an owner string and seed,
//! similarity measurement, forgery, and key pruning.
//!
//! A binary key is the element-wise product of the owner's bit vector BE
//! with a seed-sampled ±1 vector BC, which decorrelates near-identical
//! owner strings. Float keys are uniform draws in [−1, 1].

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{HkrError, Result};
use crate::numcore::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyVariant {
    Binary,
    Float,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecretKey {
    pub variant: KeyVariant,
    pub values: Vec<f64>,
    /// Derivation record; `None` for raw / derived-by-attack keys.
    pub owner: Option<String>,
    pub bc_seed: Option<u64>,
}

impl SecretKey {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = KeyFile {
            variant: self.variant,
            n: self.values.len(),
            values: self.values.clone(),
            owner: self.owner.clone(),
            bc_seed: self.bc_seed,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SecretKey> {
        let text = std::fs::read_to_string(path)?;
        let file: KeyFile = serde_json::from_str(&text)?;
        if file.values.len() != file.n {
            return Err(HkrError::Key(format!(
                "key file declares n={} but carries {} values",
                file.n,
                file.values.len()
            )));
        }
        Ok(SecretKey {
            variant: file.variant,
            values: file.values,
            owner: file.owner,
            bc_seed: file.bc_seed,
        })
    }

    /// Stable fingerprint of the key material (variant + values).
    pub fn fingerprint(&self) -> String {
        let payload = serde_json::to_vec(&(self.variant, &self.values)).expect("key serializes");
        crate::numcore::fnv1a_hex(&payload)
    }
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    variant: KeyVariant,
    n: usize,
    values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    owner: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bc_seed: Option<u64>,
}

/// Expand an owner string into a ±1 bit vector of length `n`:
/// UTF-8 bytes, MSB-first bits, 0 → −1 and 1 → +1, cycled to length.
pub fn expand_owner_bits(owner: &str, n: usize) -> Result<Vec<f64>> {
    if owner.is_empty() {
        return Err(HkrError::Key("owner string must be non-empty".into()));
    }
    if n == 0 {
        return Err(HkrError::Key("bit vector length must be >= 1".into()));
    }
    let bytes = owner.as_bytes();
    let mut out = Vec::with_capacity(n);
    let total_bits = bytes.len() * 8;
    for i in 0..n {
        let bit_idx = i % total_bits;
        let byte = bytes[bit_idx / 8];
        let bit = (byte >> (7 - (bit_idx % 8))) & 1;
        out.push(if bit == 1 { 1.0 } else { -1.0 });
    }
    Ok(out)
}

/// Element-wise product of two ±1 vectors. Involutive in BC.
pub fn transform_t(be: &[f64], bc: &[f64]) -> Result<Vec<f64>> {
    if be.len() != bc.len() {
        return Err(HkrError::Key(format!(
            "transform length mismatch: {} vs {}",
            be.len(),
            bc.len()
        )));
    }
    for v in be.iter().chain(bc.iter()) {
        if *v != 1.0 && *v != -1.0 {
            return Err(HkrError::Key(format!("non-±1 entry {v} in transform input")));
        }
    }
    Ok(be.iter().zip(bc).map(|(a, b)| a * b).collect())
}

fn sample_bc(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| rng.sign()).collect()
}

/// Deterministic key generation. Binary keys combine the owner bit vector
/// with a seed-sampled ±1 vector; float keys are uniform in [−1, 1] from
/// the seed (the owner string is recorded but does not enter the values).
pub fn generate_key(owner: &str, bc_seed: u64, n: usize, variant: KeyVariant) -> Result<SecretKey> {
    if n < 1 {
        return Err(HkrError::Key("key length must be >= 1".into()));
    }
    let values = match variant {
        KeyVariant::Binary => {
            let be = expand_owner_bits(owner, n)?;
            let bc = sample_bc(bc_seed, n);
            transform_t(&be, &bc)?
        }
        KeyVariant::Float => {
            let mut rng = SeededRng::new(bc_seed);
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
        }
    };
    Ok(SecretKey {
        variant,
        values,
        owner: Some(owner.to_string()),
        bc_seed: Some(bc_seed),
    })
}

/// Fraction of coordinates where the two keys differ. Binary keys use
/// Hamming distance / N; float keys count coordinates differing by more
/// than 1e−12.
pub fn key_dissimilarity(a: &SecretKey, b: &SecretKey) -> Result<f64> {
    if a.variant != b.variant {
        return Err(HkrError::Key("key variant mismatch".into()));
    }
    if a.len() != b.len() {
        return Err(HkrError::Key(format!(
            "key length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let differing = a
        .values
        .iter()
        .zip(&b.values)
        .filter(|(x, y)| (**x - **y).abs() > 1e-12)
        .count();
    Ok(differing as f64 / a.len() as f64)
}

/// Forge a key at exactly ⌊pN⌋/N dissimilarity from `real`: binary keys
/// negate the chosen positions, float keys resample them.
pub fn forge_key(real: &SecretKey, dissimilarity: f64, seed: u64) -> Result<SecretKey> {
    if !(0.0..=1.0).contains(&dissimilarity) {
        return Err(HkrError::Key(format!(
            "dissimilarity {dissimilarity} out of [0,1]"
        )));
    }
    let n = real.len();
    let k = (dissimilarity * n as f64).floor() as usize;
    let mut rng = SeededRng::new(seed);
    let positions = rng.sample_indices(n, k);
    let mut values = real.values.clone();
    for &i in &positions {
        match real.variant {
            KeyVariant::Binary => values[i] = -values[i],
            KeyVariant::Float => loop {
                let v = rng.uniform(-1.0, 1.0);
                if (v - real.values[i]).abs() > 1e-12 {
                    values[i] = v;
                    break;
                }
            },
        }
    }
    Ok(SecretKey { variant: real.variant, values, owner: None, bc_seed: None })
}

/// Zero ⌊rate·N⌋ seeded-random positions. Zeroed binary entries leave the
/// ±1 domain, so the result is always marked Float.
pub fn prune_key(key: &SecretKey, rate: f64, seed: u64) -> Result<SecretKey> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(HkrError::Key(format!("prune rate {rate} out of [0,1]")));
    }
    let n = key.len();
    let k = (rate * n as f64).floor() as usize;
    let mut rng = SeededRng::new(seed);
    let positions = rng.sample_indices(n, k);
    let mut values = key.values.clone();
    for &i in &positions {
        values[i] = 0.0;
    }
    Ok(SecretKey { variant: KeyVariant::Float, values, owner: None, bc_seed: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn expand_single_byte() {
        // 'A' = 0x41 = 01000001
        let bits = expand_owner_bits("A", 8).unwrap();
        assert_eq!(bits, vec![-1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn expand_cycles() {
        let eight = expand_owner_bits("A", 8).unwrap();
        let sixteen = expand_owner_bits("A", 16).unwrap();
        assert_eq!(&sixteen[..8], &eight[..]);
        assert_eq!(&sixteen[8..], &eight[..]);
    }

    #[test]
    fn expand_alice_against_byte_oracle() {
        // Independent byte-to-bit oracle.
        let expected: Vec<f64> = {
            let bytes = "Alice".as_bytes();
            let mut bits = Vec::new();
            for b in bytes {
                for k in (0..8).rev() {
                    bits.push(if (b >> k) & 1 == 1 { 1.0 } else { -1.0 });
                }
            }
            (0..64).map(|i| bits[i % bits.len()]).collect()
        };
        assert_eq!(expand_owner_bits("Alice", 64).unwrap(), expected);
    }

    #[test]
    fn expand_empty_owner_errors() {
        assert!(expand_owner_bits("", 8).is_err());
    }

    #[test]
    fn transform_hand_cases() {
        assert_eq!(
            transform_t(&[1.0, -1.0, 1.0], &[-1.0, -1.0, 1.0]).unwrap(),
            vec![-1.0, 1.0, 1.0]
        );
        let be = vec![1.0, -1.0, 1.0, 1.0];
        assert_eq!(transform_t(&be, &[1.0; 4]).unwrap(), be);
        assert!(transform_t(&[1.0], &[0.5]).is_err());
        assert!(transform_t(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate_key("Alice", 42, 64, KeyVariant::Binary).unwrap();
        let b = generate_key("Alice", 42, 64, KeyVariant::Binary).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| *v == 1.0 || *v == -1.0));
    }

    #[test]
    fn generate_binary_matches_oracle() {
        // splitmix64 + bit-expansion oracle, recomputed independently.
        let key = generate_key("Alice", 42, 64, KeyVariant::Binary).unwrap();
        let be = expand_owner_bits("Alice", 64).unwrap();
        let mut rng = SeededRng::new(42);
        let expected: Vec<f64> = be
            .iter()
            .map(|b| {
                let bc = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
                b * bc
            })
            .collect();
        assert_eq!(key.values, expected);
    }

    #[test]
    fn generate_float_in_range() {
        let key = generate_key("Alice", 42, 64, KeyVariant::Float).unwrap();
        assert!(key.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn dissimilarity_basics() {
        let k = generate_key("Alice", 42, 64, KeyVariant::Binary).unwrap();
        assert_eq!(key_dissimilarity(&k, &k).unwrap(), 0.0);
        let neg = SecretKey {
            variant: k.variant,
            values: k.values.iter().map(|v| -v).collect(),
            owner: None,
            bc_seed: None,
        };
        assert_eq!(key_dissimilarity(&k, &neg).unwrap(), 1.0);
    }

    #[test]
    fn forge_half_is_exact() {
        let k = generate_key("Alice", 7, 512, KeyVariant::Binary).unwrap();
        let f = forge_key(&k, 0.5, 99).unwrap();
        // Counting oracle.
        let differing = k
            .values
            .iter()
            .zip(&f.values)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(differing, 256);
        assert_eq!(key_dissimilarity(&k, &f).unwrap(), 0.5);
    }

    #[test]
    fn forge_edge_rates() {
        let k = generate_key("Bob", 1, 8, KeyVariant::Binary).unwrap();
        assert_eq!(forge_key(&k, 0.0, 5).unwrap().values, k.values);
        let full = forge_key(&k, 1.0, 5).unwrap();
        assert!(k.values.iter().zip(&full.values).all(|(a, b)| *a == -b));
        let p75 = forge_key(&k, 0.75, 5).unwrap();
        let diff = k.values.iter().zip(&p75.values).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 6);
        assert!(forge_key(&k, 1.5, 5).is_err());
    }

    #[test]
    fn prune_counts() {
        let k = generate_key("Alice", 42, 64, KeyVariant::Binary).unwrap();
        assert_eq!(prune_key(&k, 0.0, 3).unwrap().values, k.values);
        let all = prune_key(&k, 1.0, 3).unwrap();
        assert!(all.values.iter().all(|v| *v == 0.0));
        let half = prune_key(&k, 0.5, 3).unwrap();
        assert_eq!(half.values.iter().filter(|v| **v == 0.0).count(), 32);
        assert_eq!(half.variant, KeyVariant::Float);
    }

    #[test]
    fn near_alphanumeric_separation() {
        // Owners one byte-bit apart differ exactly where BE differs, and
        // the BC product preserves that count.
        let n = 64;
        let be_a = expand_owner_bits("A", n).unwrap();
        let be_c = expand_owner_bits("C", n).unwrap();
        let be_diff = be_a.iter().zip(&be_c).filter(|(a, b)| a != b).count();
        let ka = generate_key("A", 42, n, KeyVariant::Binary).unwrap();
        let kc = generate_key("C", 42, n, KeyVariant::Binary).unwrap();
        let key_diff = ka.values.iter().zip(&kc.values).filter(|(a, b)| a != b).count();
        assert_eq!(key_diff, be_diff);
        let diff_positions_match = be_a
            .iter()
            .zip(&be_c)
            .zip(ka.values.iter().zip(&kc.values))
            .all(|((ba, bc), (a, c))| (ba != bc) == (a != c));
        assert!(diff_positions_match);
    }

    #[test]
    fn key_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.json");
        let k = generate_key("Alice", 42, 64, KeyVariant::Float).unwrap();
        k.save(&path).unwrap();
        assert_eq!(SecretKey::load(&path).unwrap(), k);
    }

    proptest! {
        #[test]
        fn transform_is_involution(seed in 0u64..5000, n in 1usize..128) {
            let mut rng = SeededRng::new(seed);
            let be: Vec<f64> = (0..n).map(|_| rng.sign()).collect();
            let bc: Vec<f64> = (0..n).map(|_| rng.sign()).collect();
            let once = transform_t(&be, &bc).unwrap();
            let twice = transform_t(&once, &bc).unwrap();
            prop_assert_eq!(twice, be);
        }

        #[test]
        fn forge_dissimilarity_is_exact(
            p in 0.0f64..=1.0,
            seed in 0u64..1000,
            n in prop::sample::select(vec![8usize, 64, 512]),
        ) {
            let k = generate_key("Owner", seed, n, KeyVariant::Binary).unwrap();
            let f = forge_key(&k, p, seed.wrapping_add(1)).unwrap();
            let expected = (p * n as f64).floor() / n as f64;
            prop_assert_eq!(key_dissimilarity(&k, &f).unwrap(), expected);
        }

        #[test]
        fn float_forge_dissimilarity_is_exact(p in 0.0f64..=1.0, seed in 0u64..500) {
            let k = generate_key("Owner", seed, 64, KeyVariant::Float).unwrap();
            let f = forge_key(&k, p, seed.wrapping_add(1)).unwrap();
            let expected = (p * 64.0).floor() / 64.0;
            prop_assert_eq!(key_dissimilarity(&k, &f).unwrap(), expected);
        }
    }
}
