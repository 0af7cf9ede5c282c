//! Measured crypto latencies and the lookup used to charge simulated time.
//!
//! Tables are loaded from TOML records of
//! `(algorithm, key_bits, operation, backend, cost_seconds[, per_block])`.
//! RSA costs are fixed per block, AES costs are per 16-byte block, MD5 is a
//! fixed cost per digest. Hardware RSA and MD5 entries may be omitted, in which
//! case they are derived from the software entries by the calibration factors
//! recorded in the same file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crypto::CryptoError;
use crate::time::SimDuration;

/// The table shipped with the simulator: STM32F415 measurements.
pub const DEFAULT_TIMING_TOML: &str = include_str!("../../data/timing_stm32f415.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Rsa,
    Aes,
    Md5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Enc,
    Dec,
    Sign,
    Verify,
    Hash,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[serde(alias = "HW")]
    Hw,
    #[serde(alias = "SW")]
    Sw,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Hw => "HW",
            Backend::Sw => "SW",
        })
    }
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hw" => Ok(Backend::Hw),
            "sw" => Ok(Backend::Sw),
            other => Err(format!("unknown backend `{other}` (expected HW or SW)")),
        }
    }
}

/// Which half of an asymmetric key pair an operation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyClass {
    Public,
    Private,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostModel {
    Fixed(SimDuration),
    PerBlock(SimDuration),
}

impl CostModel {
    fn raw(self) -> SimDuration {
        match self {
            CostModel::Fixed(d) | CostModel::PerBlock(d) => d,
        }
    }
}

/// One crypto operation as the timing table sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpDescriptor {
    /// `blocks` RSA blocks with the given key half.
    Rsa {
        key_bits: u32,
        class: KeyClass,
        blocks: u64,
        backend: Backend,
    },
    /// AES-CBC over `input_len` plaintext bytes.
    Aes {
        encrypt: bool,
        input_len: usize,
        backend: Backend,
    },
    Hash {
        backend: Backend,
    },
}

#[derive(Debug, Deserialize)]
struct RawTable {
    #[serde(default)]
    calibration: Calibration,
    #[serde(default, rename = "entry")]
    entries: Vec<RawEntry>,
}

/// Factors used to derive hardware entries that the table does not list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Deserialize, Serialize)]
pub struct Calibration {
    pub hw_asymmetric_factor: Option<f64>,
    pub hw_hash_factor: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    algorithm: Algorithm,
    key_bits: u32,
    operation: Operation,
    backend: Backend,
    cost_seconds: f64,
    #[serde(default)]
    per_block: bool,
}

type EntryKey = (Algorithm, u32, Operation, Backend);

#[derive(Clone, Debug)]
pub struct TimingTable {
    entries: BTreeMap<EntryKey, CostModel>,
    calibration: Calibration,
}

impl Default for TimingTable {
    fn default() -> Self {
        TimingTable::from_toml_str(DEFAULT_TIMING_TOML).expect("bundled timing table is valid")
    }
}

impl TimingTable {
    pub fn from_file(path: &Path) -> Result<Self, CryptoError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CryptoError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CryptoError> {
        let raw: RawTable = toml::from_str(text).map_err(|e| CryptoError::Config(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for e in raw.entries {
            if e.cost_seconds.is_nan() || e.cost_seconds <= 0.0 {
                return Err(CryptoError::Config(format!(
                    "non-positive cost for {:?}/{}/{:?}/{:?}",
                    e.algorithm, e.key_bits, e.operation, e.backend
                )));
            }
            let d = SimDuration::from_secs_f64(e.cost_seconds);
            let model = if e.per_block {
                CostModel::PerBlock(d)
            } else {
                CostModel::Fixed(d)
            };
            if entries
                .insert((e.algorithm, e.key_bits, e.operation, e.backend), model)
                .is_some()
            {
                return Err(CryptoError::Config(format!(
                    "duplicate entry {:?}/{}/{:?}/{:?}",
                    e.algorithm, e.key_bits, e.operation, e.backend
                )));
            }
        }
        let mut table = TimingTable {
            entries,
            calibration: raw.calibration,
        };
        table.derive_hardware()?;
        table.validate()?;
        Ok(table)
    }

    pub fn calibration(&self) -> Calibration {
        self.calibration
    }

    /// RSA key lengths with complete entries.
    pub fn rsa_key_lengths(&self) -> Vec<u32> {
        let mut bits: Vec<u32> = self
            .entries
            .keys()
            .filter(|k| k.0 == Algorithm::Rsa)
            .map(|k| k.1)
            .collect();
        bits.dedup();
        bits
    }

    fn derive_hardware(&mut self) -> Result<(), CryptoError> {
        let sw: Vec<(EntryKey, CostModel)> = self
            .entries
            .iter()
            .filter(|(k, _)| k.3 == Backend::Sw && k.0 != Algorithm::Aes)
            .map(|(k, v)| (*k, *v))
            .collect();
        for ((alg, bits, op, _), model) in sw {
            let hw_key = (alg, bits, op, Backend::Hw);
            if self.entries.contains_key(&hw_key) {
                continue;
            }
            let factor = match alg {
                Algorithm::Rsa => self.calibration.hw_asymmetric_factor,
                _ => self.calibration.hw_hash_factor,
            };
            let Some(factor) = factor else { continue };
            if factor.is_nan() || factor <= 0.0 {
                return Err(CryptoError::Config(format!(
                    "calibration factor {factor} must be positive"
                )));
            }
            let derived = model.raw().div_f64(factor);
            let derived = match model {
                CostModel::Fixed(_) => CostModel::Fixed(derived),
                CostModel::PerBlock(_) => CostModel::PerBlock(derived),
            };
            self.entries.insert(hw_key, derived);
        }
        Ok(())
    }

    /// Lookup must be total over the configured algorithms, so gaps are reported here
    /// rather than in the middle of a simulation.
    fn validate(&self) -> Result<(), CryptoError> {
        let mut missing = Vec::new();
        let mut need = |key: EntryKey| {
            if !self.entries.contains_key(&key) {
                missing.push(format!("{:?}/{}/{:?}/{:?}", key.0, key.1, key.2, key.3));
            }
        };
        for bits in self.rsa_key_lengths() {
            for b in [Backend::Hw, Backend::Sw] {
                need((Algorithm::Rsa, bits, Operation::Enc, b));
                need((Algorithm::Rsa, bits, Operation::Dec, b));
            }
        }
        for b in [Backend::Hw, Backend::Sw] {
            need((Algorithm::Aes, 128, Operation::Enc, b));
            need((Algorithm::Aes, 128, Operation::Dec, b));
            need((Algorithm::Md5, 128, Operation::Hash, b));
        }
        if !missing.is_empty() {
            return Err(CryptoError::Config(format!(
                "timing table incomplete: missing {}",
                missing.join(", ")
            )));
        }
        for op in [Operation::Enc, Operation::Dec] {
            let hw = self.entries[&(Algorithm::Aes, 128, op, Backend::Hw)];
            let sw = self.entries[&(Algorithm::Aes, 128, op, Backend::Sw)];
            if !matches!((hw, sw), (CostModel::PerBlock(_), CostModel::PerBlock(_))) {
                return Err(CryptoError::Config("AES entries must be per_block".into()));
            }
            if hw.raw() >= sw.raw() {
                return Err(CryptoError::Config(format!(
                    "AES {op:?}: HW per-block cost must be below SW"
                )));
            }
        }
        Ok(())
    }

    fn entry(&self, key: EntryKey) -> Result<CostModel, CryptoError> {
        self.entries
            .get(&key)
            .copied()
            .ok_or(CryptoError::MissingTiming {
                algorithm: key.0,
                key_bits: key.1,
                operation: key.2,
                backend: key.3,
            })
    }

    /// Cost of one RSA block with the given key half.
    pub fn rsa_block(
        &self,
        key_bits: u32,
        class: KeyClass,
        backend: Backend,
    ) -> Result<SimDuration, CryptoError> {
        let op = match class {
            KeyClass::Public => Operation::Enc,
            KeyClass::Private => Operation::Dec,
        };
        Ok(self.entry((Algorithm::Rsa, key_bits, op, backend))?.raw())
    }

    pub fn aes_block(&self, encrypt: bool, backend: Backend) -> Result<SimDuration, CryptoError> {
        let op = if encrypt {
            Operation::Enc
        } else {
            Operation::Dec
        };
        Ok(self.entry((Algorithm::Aes, 128, op, backend))?.raw())
    }

    pub fn hash(&self, backend: Backend) -> Result<SimDuration, CryptoError> {
        Ok(self
            .entry((Algorithm::Md5, 128, Operation::Hash, backend))?
            .raw())
    }

    pub fn lookup(&self, op: OpDescriptor) -> Result<SimDuration, CryptoError> {
        match op {
            OpDescriptor::Rsa {
                key_bits,
                class,
                blocks,
                backend,
            } => Ok(self.rsa_block(key_bits, class, backend)? * blocks),
            OpDescriptor::Aes {
                encrypt,
                input_len,
                backend,
            } => Ok(self.aes_block(encrypt, backend)? * aes_blocks(input_len)),
            OpDescriptor::Hash { backend } => self.hash(backend),
        }
    }
}

/// AES-CBC block count: at least one block, padding rounds up.
pub fn aes_blocks(plain_len: usize) -> u64 {
    plain_len.div_ceil(16).max(1) as u64
}

/// RSA block count for a payload, using `key_bytes - 11` bytes of capacity per block.
pub fn rsa_blocks(plain_len: usize, key_bits: u32) -> u64 {
    let capacity = (key_bits / 8) as usize - 11;
    plain_len.div_ceil(capacity).max(1) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(d: SimDuration) -> f64 {
        d.as_millis_f64()
    }

    #[test]
    fn rsa_values_from_measurement_table() {
        let t = TimingTable::default();
        let sw = |bits, class| t.rsa_block(bits, class, Backend::Sw).unwrap().as_secs_f64();
        assert_eq!(sw(512, KeyClass::Public), 0.206);
        assert_eq!(sw(512, KeyClass::Private), 0.886);
        assert_eq!(sw(1024, KeyClass::Public), 0.709);
        assert_eq!(sw(1024, KeyClass::Private), 4.977);
        assert_eq!(sw(2048, KeyClass::Public), 2.626);
        assert_eq!(sw(2048, KeyClass::Private), 33.181);
    }

    #[test]
    fn aes_pins() {
        let t = TimingTable::default();
        let look = |encrypt, len, backend| {
            ms(t.lookup(OpDescriptor::Aes {
                encrypt,
                input_len: len,
                backend,
            })
            .unwrap())
        };
        assert!((look(true, 60, Backend::Hw) - 0.090875).abs() < 1e-6);
        assert!((look(false, 90, Backend::Hw) - 0.1170625).abs() < 1e-6);
        assert!((look(true, 75, Backend::Sw) - 0.441125).abs() < 1e-6);
        assert!((look(false, 100, Backend::Sw) - 0.65625).abs() < 1e-6);
    }

    #[test]
    fn block_counts() {
        assert_eq!(aes_blocks(0), 1);
        assert_eq!(aes_blocks(16), 1);
        assert_eq!(aes_blocks(17), 2);
        assert_eq!(rsa_blocks(0, 512), 1);
        assert_eq!(rsa_blocks(36, 512), 1);
        assert_eq!(rsa_blocks(53, 512), 1);
        assert_eq!(rsa_blocks(120, 512), 3);
    }

    #[test]
    fn hardware_rsa_is_derived_from_calibration() {
        let t = TimingTable::default();
        let f = t.calibration().hw_asymmetric_factor.unwrap();
        let sw = t.rsa_block(512, KeyClass::Private, Backend::Sw).unwrap();
        let hw = t.rsa_block(512, KeyClass::Private, Backend::Hw).unwrap();
        assert_eq!(hw, sw.div_f64(f));
        assert!(hw < sw);
    }

    #[test]
    fn missing_entry_is_a_load_error() {
        let text = r#"
[[entry]]
algorithm = "rsa"
key_bits = 512
operation = "enc"
backend = "sw"
cost_seconds = 0.206
"#;
        let err = TimingTable::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("incomplete"), "{err}");
    }

    #[test]
    fn zero_cost_rejected() {
        let text = DEFAULT_TIMING_TOML.replace("cost_seconds = 0.206", "cost_seconds = 0.0");
        assert!(TimingTable::from_toml_str(&text).is_err());
    }

    #[test]
    fn hw_aes_must_beat_sw() {
        // swap the SW enc per-block cost for something below HW
        let text =
            DEFAULT_TIMING_TOML.replace("cost_seconds = 0.000088225", "cost_seconds = 0.00000001");
        let err = TimingTable::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("HW per-block"), "{err}");
    }
}
