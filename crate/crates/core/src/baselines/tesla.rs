use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{digest_of, Backend, Crypto, CryptoError, Digest, Term};
use crate::ids::{DeviceId, StreamId};
use crate::time::{SimDuration, SimTime};

/// Keys per chain unless configured otherwise.
pub const DEFAULT_CHAIN_LENGTH: usize = 400_000;
/// Bytes of MAC appended to every TESLA data frame.
pub const MAC_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TeslaError {
    #[error("chain of {stream} is exhausted")]
    Exhausted { stream: StreamId },
    #[error("key {index} disclosed out of order (last verified {last})")]
    OutOfOrder { index: u32, last: u32 },
    #[error("disclosed key {index} does not hash to the verified chain")]
    KeyMismatch { index: u32 },
    #[error("packet for interval {index} arrived after its key became public")]
    TooLate { index: u32 },
    #[error("MAC of interval {index} does not verify")]
    BadMac { index: u32 },
    #[error("packet belongs to {got}, expected {expected}")]
    WrongStream { expected: StreamId, got: StreamId },
}

/// One step down the chain.
pub fn chain_step(key: &Digest) -> Digest {
    digest_of(&[Term::Digest(*key)])
}

/// Whether `key` at `index` hashes down to `trusted` at `trusted_index`.
pub fn verify_to(trusted: Digest, trusted_index: u32, key: Digest, index: u32) -> bool {
    if index <= trusted_index {
        return false;
    }
    let mut k = key;
    for _ in trusted_index..index {
        k = chain_step(&k);
    }
    k == trusted
}

/// Simulated time to generate a chain of `length` keys.
pub fn generation_cost(
    crypto: &Crypto,
    length: usize,
    backend: Backend,
) -> Result<SimDuration, CryptoError> {
    Ok(crypto.table().hash(backend)? * length as u64)
}

/// A one-way key chain: `key[i] = H(key[i + 1])`, committed through `key[0]`.
///
/// A chain can be built in full or lazily. A lazy chain keeps only its seed
/// and recomputes keys on demand, which keeps long simulated chains cheap in
/// wall-clock time while producing the same keys.
#[derive(Clone, Debug, PartialEq)]
pub struct TeslaChain {
    pub owner: DeviceId,
    pub stream: StreamId,
    pub disclosure_interval: SimDuration,
    length: u32,
    seed: Digest,
    keys: Option<Vec<Digest>>,
    next_index: u32,
    generation: u32,
}

impl TeslaChain {
    pub fn generate(
        owner: DeviceId,
        stream: StreamId,
        seed: Digest,
        length: usize,
        disclosure_interval: SimDuration,
    ) -> Self {
        let mut c = Self::lazy(owner, stream, seed, length, disclosure_interval);
        c.keys = Some(c.materialize());
        c
    }

    pub fn lazy(
        owner: DeviceId,
        stream: StreamId,
        seed: Digest,
        length: usize,
        disclosure_interval: SimDuration,
    ) -> Self {
        assert!(length >= 2, "a chain needs an anchor and at least one key");
        TeslaChain {
            owner,
            stream,
            disclosure_interval,
            length: length as u32,
            seed,
            keys: None,
            next_index: 1,
            generation: 0,
        }
    }

    fn materialize(&self) -> Vec<Digest> {
        let n = self.length as usize;
        let mut keys = vec![self.seed; n];
        for i in (0..n - 1).rev() {
            keys[i] = chain_step(&keys[i + 1]);
        }
        keys
    }

    pub fn len(&self) -> usize {
        self.length as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn key(&self, index: u32) -> Option<Digest> {
        if index >= self.length {
            return None;
        }
        if let Some(keys) = &self.keys {
            return Some(keys[index as usize]);
        }
        let mut k = self.seed;
        for _ in index..self.length - 1 {
            k = chain_step(&k);
        }
        Some(k)
    }

    pub fn anchor(&self) -> Digest {
        self.key(0).expect("chains are never empty")
    }

    pub fn next_index(&self) -> u32 {
        self.next_index
    }

    pub fn remaining(&self) -> usize {
        (self.length - self.next_index) as usize
    }

    pub fn is_exhausted(&self) -> bool {
        self.next_index >= self.length
    }

    /// Hands out the next unused key.
    pub fn take(&mut self) -> Result<(u32, Digest), TeslaError> {
        if self.is_exhausted() {
            return Err(TeslaError::Exhausted {
                stream: self.stream,
            });
        }
        let i = self.next_index;
        self.next_index += 1;
        Ok((i, self.key(i).expect("index in range")))
    }

    /// Replaces an exhausted chain with a new one from `seed`.
    pub fn regenerate(&mut self, seed: Digest) {
        self.seed = seed;
        self.next_index = 1;
        self.generation += 1;
        if self.keys.is_some() {
            self.keys = Some(self.materialize());
        }
    }

    /// How long until the chain runs out at one key per interval.
    pub fn lifetime(&self) -> SimDuration {
        self.disclosure_interval * u64::from(self.length - 1)
    }
}

fn mac(stream: StreamId, index: u32, payload: &[u8], key: &Digest) -> Digest {
    digest_of(&[
        Term::Stream(stream),
        Term::Bytes(index.to_be_bytes().to_vec()),
        Term::Bytes(payload.to_vec()),
        Term::Digest(*key),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeslaPacket {
    pub stream: StreamId,
    pub index: u32,
    pub payload: Vec<u8>,
    pub mac: Digest,
    /// The key of the previous interval, if one has ended.
    pub disclosed: Option<(u32, Digest)>,
}

impl TeslaPacket {
    pub fn wire_length(&self) -> usize {
        2 + self.payload.len() + MAC_LEN + if self.disclosed.is_some() { 16 } else { 0 }
    }
}

/// Sender side of one TESLA stream. Intervals start at `start`; interval `i`
/// spans `[start + (i - 1) d, start + i d)` and uses key `i`.
#[derive(Clone, Debug)]
pub struct TeslaSender {
    chain: TeslaChain,
    start: SimTime,
}

impl TeslaSender {
    pub fn new(chain: TeslaChain, start: SimTime) -> Self {
        TeslaSender { chain, start }
    }

    pub fn chain(&self) -> &TeslaChain {
        &self.chain
    }

    pub fn chain_mut(&mut self) -> &mut TeslaChain {
        &mut self.chain
    }

    pub fn interval_at(&self, now: SimTime) -> u32 {
        let d = self.chain.disclosure_interval.as_ps().max(1);
        (now.since(self.start).as_ps() / d) as u32 + 1
    }

    /// MACs `payload` under the key of the current interval and discloses the
    /// key of the interval before it.
    pub fn send(&mut self, payload: Vec<u8>, now: SimTime) -> Result<TeslaPacket, TeslaError> {
        let index = self.interval_at(now);
        if index >= self.chain.length {
            return Err(TeslaError::Exhausted {
                stream: self.chain.stream,
            });
        }
        self.chain.next_index = self.chain.next_index.max(index + 1);
        let key = self.chain.key(index).expect("index in range");
        let disclosed = (index > 1).then(|| {
            (
                index - 1,
                self.chain.key(index - 1).expect("index in range"),
            )
        });
        Ok(TeslaPacket {
            stream: self.chain.stream,
            index,
            mac: mac(self.chain.stream, index, &payload, &key),
            payload,
            disclosed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Authenticated {
    pub index: u32,
    pub payload: Vec<u8>,
    pub received_at: SimTime,
    pub authenticated_at: SimTime,
}

/// Receiver side: buffers packets until their key is disclosed.
#[derive(Clone, Debug)]
pub struct TeslaReceiver {
    stream: StreamId,
    start: SimTime,
    interval: SimDuration,
    trusted: (u32, Digest),
    buffered: BTreeMap<u32, Vec<(Vec<u8>, Digest, SimTime)>>,
}

impl TeslaReceiver {
    pub fn new(stream: StreamId, anchor: Digest, start: SimTime, interval: SimDuration) -> Self {
        TeslaReceiver {
            stream,
            start,
            interval,
            trusted: (0, anchor),
            buffered: BTreeMap::new(),
        }
    }

    pub fn last_verified(&self) -> u32 {
        self.trusted.0
    }

    pub fn pending(&self) -> usize {
        self.buffered.values().map(Vec::len).sum()
    }

    /// Key `index` becomes public when interval `index + 1` begins.
    pub fn disclosure_time(&self, index: u32) -> SimTime {
        self.start + self.interval * u64::from(index)
    }

    /// Processes one packet: checks the security condition, buffers it, and
    /// authenticates whatever its disclosed key unlocks.
    pub fn receive(
        &mut self,
        p: &TeslaPacket,
        at: SimTime,
    ) -> Result<Vec<Authenticated>, TeslaError> {
        if p.stream != self.stream {
            return Err(TeslaError::WrongStream {
                expected: self.stream,
                got: p.stream,
            });
        }
        if at >= self.disclosure_time(p.index) {
            return Err(TeslaError::TooLate { index: p.index });
        }
        self.buffered
            .entry(p.index)
            .or_default()
            .push((p.payload.clone(), p.mac, at));
        let Some((index, key)) = p.disclosed else {
            return Ok(Vec::new());
        };
        self.disclose(index, key, at)
    }

    pub fn disclose(
        &mut self,
        index: u32,
        key: Digest,
        at: SimTime,
    ) -> Result<Vec<Authenticated>, TeslaError> {
        let (last, trusted) = self.trusted;
        if index <= last {
            return Err(TeslaError::OutOfOrder { index, last });
        }
        if !verify_to(trusted, last, key, index) {
            return Err(TeslaError::KeyMismatch { index });
        }
        self.trusted = (index, key);
        let mut out = Vec::new();
        let mut bad = None;
        // Keys of skipped intervals follow from the disclosed one.
        let mut k = key;
        for i in (last + 1..=index).rev() {
            for (payload, tag, received_at) in self.buffered.remove(&i).unwrap_or_default() {
                if mac(self.stream, i, &payload, &k) == tag {
                    out.push(Authenticated {
                        index: i,
                        payload,
                        received_at,
                        authenticated_at: at,
                    });
                } else {
                    bad.get_or_insert(TeslaError::BadMac { index: i });
                }
            }
            k = chain_step(&k);
        }
        out.sort_by_key(|a| a.index);
        match bad {
            Some(e) if out.is_empty() => Err(e),
            _ => Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(b: u8) -> Digest {
        Digest([b; 16])
    }

    fn chain(n: usize) -> TeslaChain {
        TeslaChain::generate(
            DeviceId(2),
            StreamId(0),
            seed(9),
            n,
            SimDuration::from_millis(10),
        )
    }

    #[test]
    fn length_three_chain_links() {
        let c = chain(3);
        let (k0, k1, k2) = (c.key(0).unwrap(), c.key(1).unwrap(), c.key(2).unwrap());
        assert_eq!(k2, seed(9));
        assert_eq!(k1, chain_step(&k2));
        assert_eq!(k0, chain_step(&k1));
        assert_eq!(c.anchor(), k0);
    }

    #[test]
    fn lazy_and_full_chains_agree() {
        let full = chain(50);
        let lazy = TeslaChain::lazy(
            DeviceId(2),
            StreamId(0),
            seed(9),
            50,
            SimDuration::from_millis(10),
        );
        for i in 0..50 {
            assert_eq!(full.key(i), lazy.key(i));
        }
    }

    #[test]
    fn disclosed_keys_verify_to_anchor() {
        let c = chain(20);
        assert!(verify_to(c.anchor(), 0, c.key(7).unwrap(), 7));
        assert!(!verify_to(c.anchor(), 0, c.key(7).unwrap(), 6));
        assert!(!verify_to(c.key(7).unwrap(), 7, c.key(7).unwrap(), 7));
    }

    #[test]
    fn exhaustion_and_regeneration() {
        let mut c = chain(3);
        assert_eq!(c.take().unwrap().0, 1);
        assert_eq!(c.take().unwrap().0, 2);
        assert!(c.is_exhausted());
        assert!(matches!(c.take(), Err(TeslaError::Exhausted { .. })));
        let old = c.anchor();
        c.regenerate(seed(3));
        assert_eq!(c.generation(), 1);
        assert_ne!(c.anchor(), old);
        assert_eq!(c.take().unwrap().0, 1);
    }

    #[test]
    fn default_chain_lasts_about_an_hour_at_ten_ms() {
        let c = TeslaChain::lazy(
            DeviceId(2),
            StreamId(0),
            seed(1),
            DEFAULT_CHAIN_LENGTH,
            SimDuration::from_millis(10),
        );
        let h = c.lifetime().as_secs_f64() / 3600.0;
        assert!((1.0..1.2).contains(&h), "{h}");
    }

    #[test]
    fn generation_cost_is_linear_in_length() {
        let crypto = Crypto::default();
        let h = crypto.table().hash(Backend::Sw).unwrap();
        assert_eq!(
            generation_cost(&crypto, 400_000, Backend::Sw).unwrap(),
            h * 400_000
        );
    }

    #[test]
    fn messages_authenticate_one_interval_late() {
        let d = SimDuration::from_millis(10);
        let c = TeslaChain::generate(DeviceId(2), StreamId(4), seed(5), 10, d);
        let mut rx = TeslaReceiver::new(StreamId(4), c.anchor(), SimTime::ZERO, d);
        let mut tx = TeslaSender::new(c, SimTime::ZERO);
        let lat = SimDuration::from_micros(300);
        let mut authed = Vec::new();
        for i in 0..4u64 {
            let now = SimTime::ZERO + d * i;
            let p = tx.send(vec![i as u8], now).unwrap();
            authed.extend(rx.receive(&p, now + lat).unwrap());
        }
        assert_eq!(authed.len(), 3);
        for a in &authed {
            assert!(a.authenticated_at >= rx.disclosure_time(a.index));
            assert_eq!(a.authenticated_at.since(a.received_at), d);
        }
        assert_eq!(rx.pending(), 1);
    }

    #[test]
    fn out_of_order_disclosure_is_rejected() {
        let c = chain(10);
        let mut rx = TeslaReceiver::new(
            StreamId(0),
            c.anchor(),
            SimTime::ZERO,
            c.disclosure_interval,
        );
        rx.disclose(3, c.key(3).unwrap(), SimTime::ZERO).unwrap();
        assert_eq!(
            rx.disclose(2, c.key(2).unwrap(), SimTime::ZERO),
            Err(TeslaError::OutOfOrder { index: 2, last: 3 })
        );
        assert_eq!(
            rx.disclose(5, c.key(6).unwrap(), SimTime::ZERO),
            Err(TeslaError::KeyMismatch { index: 5 })
        );
    }

    #[test]
    fn late_packets_and_forged_macs_fail() {
        let d = SimDuration::from_millis(10);
        let c = TeslaChain::generate(DeviceId(2), StreamId(0), seed(5), 10, d);
        let mut rx = TeslaReceiver::new(StreamId(0), c.anchor(), SimTime::ZERO, d);
        let mut tx = TeslaSender::new(c, SimTime::ZERO);
        let p1 = tx.send(b"a".to_vec(), SimTime::ZERO).unwrap();
        assert_eq!(
            rx.receive(&p1, SimTime::ZERO + d),
            Err(TeslaError::TooLate { index: 1 })
        );

        let mut forged = p1.clone();
        forged.payload = b"b".to_vec();
        rx.receive(&forged, SimTime::ZERO).unwrap();
        let p2 = tx.send(b"c".to_vec(), SimTime::ZERO + d).unwrap();
        assert_eq!(
            rx.receive(&p2, SimTime::ZERO + d),
            Err(TeslaError::BadMac { index: 1 })
        );
    }
}
