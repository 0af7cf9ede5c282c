use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::crypto::timing::{aes_blocks, KeyClass};
use crate::crypto::{Backend, Crypto, CryptoError, FieldLedger, SymmetricKey};
use crate::ids::{DeviceId, StreamId};
use crate::protocol::Stream;
use crate::time::SimDuration;

/// Version, 32-byte random, cipher suite and compression.
const HELLO_LEN: usize = 38;
/// Certificate types plus an empty CA list.
const CERT_REQUEST_LEN: usize = 4;
/// Change-cipher-spec byte.
const CCS_LEN: usize = 1;
/// 12 bytes of verify data.
const FINISHED_PLAIN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyExchange {
    /// Ephemeral Diffie-Hellman signed with RSA.
    #[default]
    DheRsa,
    /// Premaster secret encrypted under the server's RSA key.
    Rsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduling {
    /// One handshake at a time across the whole vehicle.
    #[default]
    Sequential,
    /// Every sender works through its own receivers; senders run in parallel.
    Concurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlsProfile {
    pub key_exchange: KeyExchange,
    pub scheduling: Scheduling,
    pub mutual_auth: bool,
}

impl Default for TlsProfile {
    fn default() -> Self {
        TlsProfile {
            key_exchange: KeyExchange::DheRsa,
            scheduling: Scheduling::Sequential,
            mutual_auth: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Client,
    Server,
}

impl Side {
    pub fn peer(self) -> Side {
        match self {
            Side::Client => Side::Server,
            Side::Server => Side::Client,
        }
    }
}

/// Crypto work done while building or absorbing a flight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TlsOp {
    VerifyCert,
    VerifySignature,
    Sign,
    DhKeygen,
    DhAgree,
    RsaEncrypt,
    RsaDecrypt,
    Prf,
    SealFinished,
    OpenFinished,
}

impl TlsOp {
    pub fn cost(self, crypto: &Crypto, backend: Backend) -> Result<SimDuration, CryptoError> {
        let t = crypto.table();
        let bits = crypto.ledger().rsa_key_bits;
        let public = t.rsa_block(bits, KeyClass::Public, backend)?;
        let private = t.rsa_block(bits, KeyClass::Private, backend)?;
        let h = t.hash(backend)?;
        let blocks = aes_blocks(FINISHED_PLAIN);
        Ok(match self {
            TlsOp::VerifyCert | TlsOp::VerifySignature => public + h,
            TlsOp::Sign => private + h,
            TlsOp::DhKeygen | TlsOp::DhAgree | TlsOp::RsaDecrypt => private,
            TlsOp::RsaEncrypt => public,
            TlsOp::Prf => h,
            TlsOp::SealFinished => h + t.aes_block(true, backend)? * blocks,
            TlsOp::OpenFinished => h + t.aes_block(false, backend)? * blocks,
        })
    }

    pub fn key_class(self) -> Option<KeyClass> {
        match self {
            TlsOp::VerifyCert | TlsOp::VerifySignature | TlsOp::RsaEncrypt => {
                Some(KeyClass::Public)
            }
            TlsOp::Sign | TlsOp::DhKeygen | TlsOp::DhAgree | TlsOp::RsaDecrypt => {
                Some(KeyClass::Private)
            }
            TlsOp::Prf | TlsOp::SealFinished | TlsOp::OpenFinished => None,
        }
    }
}

/// One handshake message: who sends it, what it costs them to build, and its size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Flight {
    pub from: Side,
    pub name: &'static str,
    pub wire_length: usize,
    pub ops: Vec<TlsOp>,
}

impl Flight {
    pub fn cost(&self, crypto: &Crypto, backend: Backend) -> Result<SimDuration, CryptoError> {
        self.ops.iter().map(|op| op.cost(crypto, backend)).sum()
    }
}

/// The full message sequence of one handshake, plus the work the client does
/// after the last flight.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Handshake {
    pub flights: Vec<Flight>,
    pub finish: Vec<TlsOp>,
}

impl Handshake {
    pub fn ops(&self) -> impl Iterator<Item = (Side, TlsOp)> + '_ {
        self.flights
            .iter()
            .flat_map(|f| f.ops.iter().map(move |op| (f.from, *op)))
            .chain(self.finish.iter().map(|op| (Side::Client, *op)))
    }

    /// Number of asymmetric operations with the given key half.
    pub fn count(&self, class: KeyClass) -> usize {
        self.ops()
            .filter(|(_, op)| op.key_class() == Some(class))
            .count()
    }

    pub fn side_cost(
        &self,
        side: Side,
        crypto: &Crypto,
        backend: Backend,
    ) -> Result<SimDuration, CryptoError> {
        self.ops()
            .filter(|(s, _)| *s == side)
            .map(|(_, op)| op.cost(crypto, backend))
            .sum()
    }

    pub fn total_cost(
        &self,
        crypto: &Crypto,
        backend: Backend,
    ) -> Result<SimDuration, CryptoError> {
        self.ops().map(|(_, op)| op.cost(crypto, backend)).sum()
    }

    pub fn finish_cost(
        &self,
        crypto: &Crypto,
        backend: Backend,
    ) -> Result<SimDuration, CryptoError> {
        self.finish.iter().map(|op| op.cost(crypto, backend)).sum()
    }
}

impl TlsProfile {
    /// The six-flight handshake this profile performs. The client is the
    /// stream sender, the server one of its receivers.
    pub fn handshake(&self, ledger: &FieldLedger) -> Handshake {
        use TlsOp::*;
        let m = self.mutual_auth;
        let cert = ledger.certificate();
        let sig = ledger.signature();
        let share = ledger.public_key();
        let finished = CCS_LEN + aes_blocks(FINISHED_PLAIN) as usize * 16;
        let when = |cond: bool, ops: &[TlsOp]| if cond { ops.to_vec() } else { Vec::new() };
        let (server_hello, client_kex, server_kex) = match self.key_exchange {
            KeyExchange::DheRsa => (
                Flight {
                    from: Side::Server,
                    name: "server-hello",
                    wire_length: HELLO_LEN
                        + cert
                        + share
                        + sig
                        + if m { CERT_REQUEST_LEN } else { 0 },
                    ops: vec![DhKeygen, Sign],
                },
                Flight {
                    from: Side::Client,
                    name: "client-key-exchange",
                    wire_length: share + if m { cert + sig } else { 0 },
                    ops: [
                        vec![VerifyCert, VerifySignature, DhKeygen, DhAgree, Prf],
                        when(m, &[Sign]),
                    ]
                    .concat(),
                },
                Flight {
                    from: Side::Server,
                    name: "server-change-cipher",
                    wire_length: CCS_LEN,
                    ops: [
                        when(m, &[VerifyCert, VerifySignature]),
                        vec![DhAgree, Prf, OpenFinished],
                    ]
                    .concat(),
                },
            ),
            KeyExchange::Rsa => (
                Flight {
                    from: Side::Server,
                    name: "server-hello",
                    wire_length: HELLO_LEN + cert + if m { CERT_REQUEST_LEN } else { 0 },
                    ops: Vec::new(),
                },
                Flight {
                    from: Side::Client,
                    name: "client-key-exchange",
                    wire_length: share + if m { cert + sig } else { 0 },
                    ops: [vec![VerifyCert, RsaEncrypt, Prf], when(m, &[Sign])].concat(),
                },
                Flight {
                    from: Side::Server,
                    name: "server-change-cipher",
                    wire_length: CCS_LEN,
                    ops: [
                        when(m, &[VerifyCert, VerifySignature]),
                        vec![RsaDecrypt, Prf, OpenFinished],
                    ]
                    .concat(),
                },
            ),
        };
        Handshake {
            flights: vec![
                Flight {
                    from: Side::Client,
                    name: "client-hello",
                    wire_length: HELLO_LEN,
                    ops: Vec::new(),
                },
                server_hello,
                client_kex,
                Flight {
                    from: Side::Client,
                    name: "client-finished",
                    wire_length: finished,
                    ops: vec![SealFinished],
                },
                server_kex,
                Flight {
                    from: Side::Server,
                    name: "server-finished",
                    wire_length: finished - CCS_LEN,
                    ops: vec![SealFinished],
                },
            ],
            finish: vec![OpenFinished],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TlsPhase {
    Hello,
    KeyExchange,
    Established,
}

/// A unicast channel from a stream's sender (client) to one receiver (server).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsSession {
    pub client: DeviceId,
    pub server: DeviceId,
    pub stream: StreamId,
    phase: TlsPhase,
    next_flight: usize,
    session_key: Option<SymmetricKey>,
}

impl TlsSession {
    pub fn new(stream: StreamId, client: DeviceId, server: DeviceId) -> Self {
        TlsSession {
            client,
            server,
            stream,
            phase: TlsPhase::Hello,
            next_flight: 0,
            session_key: None,
        }
    }

    pub fn phase(&self) -> TlsPhase {
        self.phase
    }

    pub fn session_key(&self) -> Option<SymmetricKey> {
        self.session_key
    }

    pub fn device(&self, side: Side) -> DeviceId {
        match side {
            Side::Client => self.client,
            Side::Server => self.server,
        }
    }

    /// The flight due next, if the handshake is still running.
    pub fn next<'h>(&self, hs: &'h Handshake) -> Option<&'h Flight> {
        hs.flights.get(self.next_flight)
    }

    /// Records that the flight returned by [`next`](Self::next) was delivered.
    /// `key` is the secret both ends derive once the key exchange is through.
    pub fn delivered(&mut self, hs: &Handshake, key: impl FnOnce() -> SymmetricKey) {
        self.next_flight += 1;
        if self.next_flight >= 2 && self.phase == TlsPhase::Hello {
            self.phase = TlsPhase::KeyExchange;
        }
        if self.next_flight == 3 {
            self.session_key = Some(key());
        }
        if self.next_flight >= hs.flights.len() {
            self.phase = TlsPhase::Established;
        }
    }
}

/// Every (stream, sender, receiver) pair that needs its own handshake, in
/// stream order and then receiver order.
pub fn handshake_pairs(streams: &[Stream]) -> Vec<(StreamId, DeviceId, DeviceId)> {
    let mut out = Vec::new();
    for s in streams {
        let receivers: BTreeSet<_> = s
            .receivers
            .iter()
            .copied()
            .filter(|r| *r != s.sender)
            .collect();
        out.extend(receivers.into_iter().map(|r| (s.id, s.sender, r)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crypto() -> Crypto {
        Crypto::default()
    }

    #[test]
    fn six_flights_in_every_profile() {
        let l = FieldLedger::default();
        for key_exchange in [KeyExchange::DheRsa, KeyExchange::Rsa] {
            for mutual_auth in [true, false] {
                let p = TlsProfile {
                    key_exchange,
                    mutual_auth,
                    ..Default::default()
                };
                let hs = p.handshake(&l);
                assert_eq!(hs.flights.len(), 6);
                assert_eq!(hs.flights[0].from, Side::Client);
                assert_eq!(hs.flights[5].from, Side::Server);
            }
        }
    }

    #[test]
    fn dhe_mutual_uses_six_private_and_four_public_ops() {
        let hs = TlsProfile::default().handshake(&FieldLedger::default());
        assert_eq!(hs.count(KeyClass::Private), 6);
        assert_eq!(hs.count(KeyClass::Public), 4);
        let total = hs.total_cost(&crypto(), Backend::Sw).unwrap().as_secs_f64();
        assert!((6.1..6.2).contains(&total), "{total}");
    }

    #[test]
    fn rsa_exchange_has_the_textbook_asymmetric_core() {
        let p = TlsProfile {
            key_exchange: KeyExchange::Rsa,
            mutual_auth: false,
            ..Default::default()
        };
        let hs = p.handshake(&FieldLedger::default());
        let ops: Vec<_> = hs.ops().collect();
        assert!(ops.contains(&(Side::Client, TlsOp::VerifyCert)));
        assert!(ops.contains(&(Side::Client, TlsOp::RsaEncrypt)));
        assert!(ops.contains(&(Side::Server, TlsOp::RsaDecrypt)));
        let c = crypto();
        let server = hs
            .side_cost(Side::Server, &c, Backend::Sw)
            .unwrap()
            .as_secs_f64();
        let client = hs
            .side_cost(Side::Client, &c, Backend::Sw)
            .unwrap()
            .as_secs_f64();
        assert!(client + server >= 0.206 + 0.886);
    }

    #[test]
    fn hardware_handshake_is_cheaper() {
        let hs = TlsProfile::default().handshake(&FieldLedger::default());
        let c = crypto();
        assert!(hs.total_cost(&c, Backend::Hw).unwrap() < hs.total_cost(&c, Backend::Sw).unwrap());
    }

    #[test]
    fn session_walks_through_phases() {
        let hs = TlsProfile::default().handshake(&FieldLedger::default());
        let mut s = TlsSession::new(StreamId(0), DeviceId(2), DeviceId(3));
        let mut n = 0;
        let mut seen = Vec::new();
        while let Some(f) = s.next(&hs) {
            seen.push(f.name);
            s.delivered(&hs, || {
                n += 1;
                SymmetricKey {
                    value: 7,
                    length_bits: 128,
                }
            });
        }
        assert_eq!(seen.len(), 6);
        assert_eq!(n, 1);
        assert_eq!(s.phase(), TlsPhase::Established);
        assert!(s.session_key().is_some());
    }

    #[test]
    fn one_handshake_per_receiver() {
        let s = |id, sender, rx: &[u16]| Stream {
            id: StreamId(id),
            sender: DeviceId(sender),
            receivers: rx.iter().map(|r| DeviceId(*r)).collect(),
            period_ms: 10.0,
            payload_len: 8,
            deadline_ms: 10.0,
        };
        let pairs = handshake_pairs(&[s(0, 2, &[3, 4, 5]), s(1, 3, &[2]), s(2, 4, &[])]);
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[0], (StreamId(0), DeviceId(2), DeviceId(3)));
        assert_eq!(pairs[3], (StreamId(1), DeviceId(3), DeviceId(2)));
    }
}
