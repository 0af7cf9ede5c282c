//! Symbolic cryptography with timed cost.
//!
//! Operations transform structured [`Term`]s instead of bytes. Ciphertexts keep
//! their plaintext body together with the key that sealed it; only a holder of
//! the matching key can open them. Every operation also reports how long it
//! takes on the selected backend, taken from the [`TimingTable`].

mod ledger;
pub mod timing;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use ledger::FieldLedger;
pub use timing::{
    aes_blocks, rsa_blocks, Algorithm, Backend, Calibration, KeyClass, OpDescriptor, Operation,
    TimingTable,
};

use crate::ids::{DeviceId, Nonce, StreamId};
use crate::protocol::Certificate;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CryptoError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no timing entry for {algorithm:?}/{key_bits}/{operation:?}/{backend:?}")]
    MissingTiming {
        algorithm: Algorithm,
        key_bits: u32,
        operation: Operation,
        backend: Backend,
    },
    #[error("decryption failed")]
    DecryptFailed,
    #[error("unsupported RSA key length {0}")]
    UnsupportedKeyLength(u32),
}

/// One half of an asymmetric key pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyHandle {
    pub pair: u32,
    pub class: KeyClass,
    pub bits: u32,
}

impl KeyHandle {
    /// The other half of the same pair.
    pub fn paired(self) -> KeyHandle {
        let class = match self.class {
            KeyClass::Public => KeyClass::Private,
            KeyClass::Private => KeyClass::Public,
        };
        KeyHandle { class, ..self }
    }

    pub fn bytes(self) -> usize {
        self.bits as usize / 8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPair {
    pub owner: DeviceId,
    pub public: KeyHandle,
    pub private: KeyHandle,
    pub length_bits: u32,
}

/// AES-128 key, identified by an opaque token unique within one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SymmetricKey {
    pub value: u64,
    pub length_bits: u32,
}

/// Hands out key material. Tokens are sequential so runs are reproducible.
#[derive(Clone, Debug, Default)]
pub struct KeyFactory {
    next_pair: u32,
    next_sym: u64,
}

impl KeyFactory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keypair(&mut self, owner: DeviceId, bits: u32) -> Result<KeyPair, CryptoError> {
        if ![512, 1024, 2048].contains(&bits) {
            return Err(CryptoError::UnsupportedKeyLength(bits));
        }
        let pair = self.next_pair;
        self.next_pair += 1;
        Ok(KeyPair {
            owner,
            public: KeyHandle {
                pair,
                class: KeyClass::Public,
                bits,
            },
            private: KeyHandle {
                pair,
                class: KeyClass::Private,
                bits,
            },
            length_bits: bits,
        })
    }

    pub fn symmetric(&mut self) -> SymmetricKey {
        let value = self.next_sym;
        self.next_sym += 1;
        SymmetricKey {
            value,
            length_bits: 128,
        }
    }
}

/// A 16-byte symbolic digest. Equal digests mean equal preimages within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest(pub [u8; 16]);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CipherKind {
    AsymEnc,
    SymEnc,
    Signature,
    Hash,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyRef {
    Asym(KeyHandle),
    Sym(SymmetricKey),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CipherTerm {
    pub kind: CipherKind,
    pub key_ref: Option<KeyRef>,
    pub body: Vec<Term>,
    pub byte_length: usize,
}

impl CipherTerm {
    /// The digest carried by a hash or signature term.
    pub fn digest(&self) -> Option<Digest> {
        match (self.kind, self.body.as_slice()) {
            (CipherKind::Hash | CipherKind::Signature, [Term::Digest(d)]) => Some(*d),
            _ => None,
        }
    }
}

/// A symbolic protocol value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Device(DeviceId),
    Stream(StreamId),
    Nonce(Nonce),
    Time(SimTime),
    SymKey(SymmetricKey),
    AsymKey(KeyHandle),
    Digest(Digest),
    Cert(Box<Certificate>),
    Bytes(Vec<u8>),
    Tuple(Vec<Term>),
    Cipher(CipherTerm),
}

impl Term {
    pub fn wire_len(&self, ledger: &FieldLedger) -> usize {
        match self {
            Term::Device(_) => ledger.device_id,
            Term::Stream(_) => ledger.stream_id,
            Term::Nonce(_) => ledger.nonce,
            Term::Time(_) => ledger.timestamp,
            Term::SymKey(_) => ledger.symmetric_key,
            Term::AsymKey(k) => k.bytes(),
            Term::Digest(_) => ledger.digest,
            Term::Cert(_) => ledger.certificate(),
            Term::Bytes(b) => b.len(),
            Term::Tuple(ts) => ts.iter().map(|t| t.wire_len(ledger)).sum(),
            Term::Cipher(c) => c.byte_length,
        }
    }

    /// Canonical byte encoding, the preimage fed to the digest.
    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Term::Device(d) => {
                out.push(1);
                out.extend_from_slice(&d.0.to_be_bytes());
            }
            Term::Stream(s) => {
                out.push(2);
                out.extend_from_slice(&s.0.to_be_bytes());
            }
            Term::Nonce(n) => {
                out.push(3);
                out.extend_from_slice(&n.0.to_be_bytes());
            }
            Term::Time(t) => {
                out.push(4);
                out.extend_from_slice(&t.as_ps().to_be_bytes());
            }
            Term::SymKey(k) => {
                out.push(5);
                out.extend_from_slice(&k.value.to_be_bytes());
            }
            Term::AsymKey(k) => {
                out.push(6);
                encode_handle(k, out);
            }
            Term::Digest(d) => {
                out.push(7);
                out.extend_from_slice(&d.0);
            }
            Term::Cert(c) => {
                out.push(8);
                c.encode(out);
            }
            Term::Bytes(b) => {
                out.push(9);
                out.extend_from_slice(&(b.len() as u32).to_be_bytes());
                out.extend_from_slice(b);
            }
            Term::Tuple(ts) => {
                out.push(10);
                encode_list(ts, out);
            }
            Term::Cipher(c) => {
                out.push(11);
                out.push(c.kind as u8);
                match c.key_ref {
                    None => out.push(0),
                    Some(KeyRef::Asym(k)) => {
                        out.push(1);
                        encode_handle(&k, out);
                    }
                    Some(KeyRef::Sym(k)) => {
                        out.push(2);
                        out.extend_from_slice(&k.value.to_be_bytes());
                    }
                }
                out.extend_from_slice(&(c.byte_length as u32).to_be_bytes());
                encode_list(&c.body, out);
            }
        }
    }
}

fn encode_handle(k: &KeyHandle, out: &mut Vec<u8>) {
    out.extend_from_slice(&k.pair.to_be_bytes());
    out.push(k.class as u8);
    out.extend_from_slice(&k.bits.to_be_bytes());
}

fn encode_list(ts: &[Term], out: &mut Vec<u8>) {
    out.extend_from_slice(&(ts.len() as u32).to_be_bytes());
    for t in ts {
        t.encode(out);
    }
}

/// Digest of a term list.
pub fn digest_of(payload: &[Term]) -> Digest {
    let mut buf = Vec::with_capacity(64);
    encode_list(payload, &mut buf);
    let full = Sha256::digest(&buf);
    let mut d = [0u8; 16];
    d.copy_from_slice(&full[..16]);
    Digest(d)
}

/// A value together with the simulated time it took to compute.
#[derive(Clone, Debug, PartialEq)]
pub struct Timed<T> {
    pub value: T,
    pub cost: SimDuration,
}

impl<T> Timed<T> {
    fn new(value: T, cost: SimDuration) -> Self {
        Timed { value, cost }
    }
}

/// Accumulates the cost of a sequence of operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Meter {
    elapsed: SimDuration,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn take<T>(&mut self, t: Timed<T>) -> T {
        self.elapsed += t.cost;
        t.value
    }

    pub fn add(&mut self, d: SimDuration) {
        self.elapsed += d;
    }

    pub fn elapsed(&self) -> SimDuration {
        self.elapsed
    }
}

/// Symbolic crypto provider for one simulation.
#[derive(Clone, Debug)]
pub struct Crypto {
    table: Arc<TimingTable>,
    ledger: FieldLedger,
}

impl Default for Crypto {
    fn default() -> Self {
        Crypto::new(Arc::new(TimingTable::default()), FieldLedger::default())
    }
}

impl Crypto {
    pub fn new(table: Arc<TimingTable>, ledger: FieldLedger) -> Self {
        Crypto { table, ledger }
    }

    pub fn table(&self) -> &TimingTable {
        &self.table
    }

    pub fn ledger(&self) -> &FieldLedger {
        &self.ledger
    }

    pub fn payload_len(&self, payload: &[Term]) -> usize {
        payload.iter().map(|t| t.wire_len(&self.ledger)).sum()
    }

    pub fn timing_lookup(&self, op: OpDescriptor) -> Result<SimDuration, CryptoError> {
        self.table.lookup(op)
    }

    pub fn asym_encrypt(
        &self,
        payload: Vec<Term>,
        key: KeyHandle,
        backend: Backend,
    ) -> Result<Timed<CipherTerm>, CryptoError> {
        let blocks = rsa_blocks(self.payload_len(&payload), key.bits);
        let cost = self.table.rsa_block(key.bits, key.class, backend)? * blocks;
        let c = CipherTerm {
            kind: CipherKind::AsymEnc,
            key_ref: Some(KeyRef::Asym(key)),
            body: payload,
            byte_length: blocks as usize * key.bytes(),
        };
        Ok(Timed::new(c, cost))
    }

    /// Opens `c` if `key` is the other half of the sealing key. The block cost is
    /// charged whether or not decryption succeeds.
    pub fn asym_decrypt(
        &self,
        c: &CipherTerm,
        key: KeyHandle,
        backend: Backend,
    ) -> Result<Timed<Result<Vec<Term>, CryptoError>>, CryptoError> {
        let blocks = (c.byte_length / key.bytes()).max(1) as u64;
        let cost = self.table.rsa_block(key.bits, key.class, backend)? * blocks;
        let opened = match (c.kind, c.key_ref) {
            (CipherKind::AsymEnc, Some(KeyRef::Asym(sealed))) if sealed.paired() == key => {
                Ok(c.body.clone())
            }
            _ => Err(CryptoError::DecryptFailed),
        };
        Ok(Timed::new(opened, cost))
    }

    pub fn hash(
        &self,
        payload: &[Term],
        backend: Backend,
    ) -> Result<Timed<CipherTerm>, CryptoError> {
        let cost = self.table.hash(backend)?;
        let c = CipherTerm {
            kind: CipherKind::Hash,
            key_ref: None,
            body: vec![Term::Digest(digest_of(payload))],
            byte_length: self.ledger.digest,
        };
        Ok(Timed::new(c, cost))
    }

    /// Hash, then one private-key block over the digest.
    pub fn sign(
        &self,
        payload: &[Term],
        private: KeyHandle,
        backend: Backend,
    ) -> Result<Timed<CipherTerm>, CryptoError> {
        let mut m = Meter::new();
        let h = m.take(self.hash(payload, backend)?);
        let blocks = rsa_blocks(h.byte_length, private.bits);
        m.add(self.table.rsa_block(private.bits, private.class, backend)? * blocks);
        let sig = CipherTerm {
            kind: CipherKind::Signature,
            key_ref: Some(KeyRef::Asym(private)),
            body: h.body,
            byte_length: blocks as usize * private.bytes(),
        };
        Ok(Timed::new(sig, m.elapsed()))
    }

    /// Public-key block over the signature, then hash and compare.
    pub fn verify(
        &self,
        sig: &CipherTerm,
        payload: &[Term],
        public: KeyHandle,
        backend: Backend,
    ) -> Result<Timed<bool>, CryptoError> {
        let mut m = Meter::new();
        let blocks = (sig.byte_length / public.bytes()).max(1) as u64;
        m.add(self.table.rsa_block(public.bits, public.class, backend)? * blocks);
        let h = m.take(self.hash(payload, backend)?);
        let ok = sig.kind == CipherKind::Signature
            && sig.key_ref == Some(KeyRef::Asym(public.paired()))
            && public.class == KeyClass::Public
            && sig.digest().is_some()
            && sig.digest() == h.digest();
        Ok(Timed::new(ok, m.elapsed()))
    }

    pub fn sym_encrypt(
        &self,
        payload: Vec<Term>,
        key: SymmetricKey,
        backend: Backend,
    ) -> Result<Timed<CipherTerm>, CryptoError> {
        let len = self.payload_len(&payload);
        let blocks = aes_blocks(len);
        let cost = self.table.aes_block(true, backend)? * blocks;
        let c = CipherTerm {
            kind: CipherKind::SymEnc,
            key_ref: Some(KeyRef::Sym(key)),
            body: payload,
            byte_length: blocks as usize * 16,
        };
        Ok(Timed::new(c, cost))
    }

    pub fn sym_decrypt(
        &self,
        c: &CipherTerm,
        key: SymmetricKey,
        backend: Backend,
    ) -> Result<Timed<Result<Vec<Term>, CryptoError>>, CryptoError> {
        let blocks = (c.byte_length / 16).max(1) as u64;
        let cost = self.table.aes_block(false, backend)? * blocks;
        let opened = match (c.kind, c.key_ref) {
            (CipherKind::SymEnc, Some(KeyRef::Sym(k))) if k == key => Ok(c.body.clone()),
            _ => Err(CryptoError::DecryptFailed),
        };
        Ok(Timed::new(opened, cost))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Crypto, KeyFactory, KeyPair) {
        let mut keys = KeyFactory::new();
        let kp = keys.keypair(DeviceId(1), 512).unwrap();
        (Crypto::default(), keys, kp)
    }

    /// e, y, k, n, omega: 2 + 2 + 16 + 8 + 8 = 36 bytes.
    fn registration_inner(keys: &mut KeyFactory) -> Vec<Term> {
        vec![
            Term::Device(DeviceId(1)),
            Term::Device(DeviceId(0)),
            Term::SymKey(keys.symmetric()),
            Term::Nonce(Nonce(7)),
            Term::Time(SimTime::from_ps(5)),
        ]
    }

    #[test]
    fn asym_encrypt_36_bytes_one_block() {
        let (c, mut keys, kp) = setup();
        let payload = registration_inner(&mut keys);
        assert_eq!(c.payload_len(&payload), 36);
        let enc = c
            .asym_encrypt(payload.clone(), kp.public, Backend::Sw)
            .unwrap();
        assert_eq!(enc.value.byte_length, 64);
        assert_eq!(enc.cost.as_secs_f64(), 0.206);
        let dec = c.asym_decrypt(&enc.value, kp.private, Backend::Sw).unwrap();
        assert_eq!(dec.value.unwrap(), payload);
        assert_eq!(dec.cost.as_secs_f64(), 0.886);
    }

    #[test]
    fn asym_empty_payload_is_one_block() {
        let (c, _, kp) = setup();
        let enc = c.asym_encrypt(vec![], kp.public, Backend::Sw).unwrap();
        assert_eq!(enc.value.byte_length, 64);
        assert_eq!(
            enc.cost,
            c.table()
                .rsa_block(512, KeyClass::Public, Backend::Sw)
                .unwrap()
        );
    }

    #[test]
    fn asym_120_bytes_three_blocks() {
        let (c, _, kp) = setup();
        let enc = c
            .asym_encrypt(vec![Term::Bytes(vec![0; 120])], kp.public, Backend::Sw)
            .unwrap();
        assert_eq!(enc.value.byte_length, 192);
        assert_eq!(enc.cost, SimDuration::from_secs_f64(0.206) * 3);
    }

    #[test]
    fn rsa1024_three_block_private_decrypt() {
        let mut keys = KeyFactory::new();
        let kp = keys.keypair(DeviceId(1), 1024).unwrap();
        let c = Crypto::default();
        // capacity 117 bytes per block, 300 bytes -> 3 blocks
        let enc = c
            .asym_encrypt(vec![Term::Bytes(vec![1; 300])], kp.public, Backend::Sw)
            .unwrap();
        assert_eq!(enc.value.byte_length, 3 * 128);
        let dec = c.asym_decrypt(&enc.value, kp.private, Backend::Sw).unwrap();
        assert_eq!(dec.cost, SimDuration::from_secs_f64(4.977) * 3);
    }

    #[test]
    fn wrong_key_fails_without_panicking() {
        let (c, mut keys, kp) = setup();
        let other = keys.keypair(DeviceId(2), 512).unwrap();
        let enc = c
            .asym_encrypt(vec![Term::Nonce(Nonce(1))], kp.public, Backend::Sw)
            .unwrap();
        let dec = c
            .asym_decrypt(&enc.value, other.private, Backend::Sw)
            .unwrap();
        assert_eq!(dec.value, Err(CryptoError::DecryptFailed));
        // the public key itself does not open a public-key ciphertext
        let dec = c.asym_decrypt(&enc.value, kp.public, Backend::Sw).unwrap();
        assert_eq!(dec.value, Err(CryptoError::DecryptFailed));
    }

    #[test]
    fn unsupported_key_length() {
        let mut keys = KeyFactory::new();
        assert_eq!(
            keys.keypair(DeviceId(1), 768),
            Err(CryptoError::UnsupportedKeyLength(768))
        );
    }

    #[test]
    fn sign_verify_round_trip_and_cost() {
        let (c, mut keys, kp) = setup();
        let payload = registration_inner(&mut keys);
        let sig = c.sign(&payload, kp.private, Backend::Sw).unwrap();
        let hash = c.table().hash(Backend::Sw).unwrap();
        assert_eq!(sig.cost, hash + SimDuration::from_secs_f64(0.886));
        assert_eq!(sig.value.byte_length, 64);
        let ok = c
            .verify(&sig.value, &payload, kp.public, Backend::Sw)
            .unwrap();
        assert!(ok.value);
        assert_eq!(ok.cost, hash + SimDuration::from_secs_f64(0.206));

        let mut mutated = payload.clone();
        mutated[3] = Term::Nonce(Nonce(8));
        assert!(
            !c.verify(&sig.value, &mutated, kp.public, Backend::Sw)
                .unwrap()
                .value
        );
    }

    #[test]
    fn verify_rejects_foreign_and_malformed_signatures() {
        let (c, mut keys, kp) = setup();
        let other = keys.keypair(DeviceId(2), 512).unwrap();
        let payload = vec![Term::Device(DeviceId(3))];
        let sig = c.sign(&payload, other.private, Backend::Sw).unwrap().value;
        assert!(
            !c.verify(&sig, &payload, kp.public, Backend::Sw)
                .unwrap()
                .value
        );
        let not_a_sig = c
            .asym_encrypt(payload.clone(), kp.public, Backend::Sw)
            .unwrap()
            .value;
        assert!(
            !c.verify(&not_a_sig, &payload, kp.public, Backend::Sw)
                .unwrap()
                .value
        );
    }

    #[test]
    fn sym_block_boundaries_and_pins() {
        let c = Crypto::default();
        let mut keys = KeyFactory::new();
        let k = keys.symmetric();
        let enc = c
            .sym_encrypt(vec![Term::Bytes(vec![0; 60])], k, Backend::Hw)
            .unwrap();
        assert_eq!(enc.value.byte_length, 64);
        assert!((enc.cost.as_millis_f64() - 0.090875).abs() < 1e-6);
        let one = c
            .sym_encrypt(vec![Term::Bytes(vec![0; 16])], k, Backend::Sw)
            .unwrap();
        assert_eq!(one.value.byte_length, 16);
        let big = c
            .sym_encrypt(vec![Term::Bytes(vec![0; 100])], k, Backend::Sw)
            .unwrap();
        let dec = c.sym_decrypt(&big.value, k, Backend::Sw).unwrap();
        assert!((dec.cost.as_millis_f64() - 0.65625).abs() < 1e-6);
        assert_eq!(dec.value.unwrap(), vec![Term::Bytes(vec![0; 100])]);
        let other = keys.symmetric();
        assert_eq!(
            c.sym_decrypt(&big.value, other, Backend::Sw).unwrap().value,
            Err(CryptoError::DecryptFailed)
        );
    }

    #[test]
    fn hash_is_deterministic_and_injective() {
        let c = Crypto::default();
        let x = vec![Term::Nonce(Nonce(1))];
        let y = vec![Term::Nonce(Nonce(2))];
        let hx = c.hash(&x, Backend::Sw).unwrap().value;
        assert_eq!(hx, c.hash(&x, Backend::Sw).unwrap().value);
        assert_ne!(hx, c.hash(&y, Backend::Sw).unwrap().value);
        assert_eq!(hx.byte_length, 16);
    }

    #[test]
    fn keys_are_unique() {
        let mut keys = KeyFactory::new();
        let a = keys.symmetric();
        let b = keys.symmetric();
        assert_ne!(a, b);
        assert_eq!(a.length_bits, 128);
        let p = keys.keypair(DeviceId(1), 512).unwrap();
        assert_ne!(p.public, p.private);
        assert_eq!(p.public.paired(), p.private);
    }
}
