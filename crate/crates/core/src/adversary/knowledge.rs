use std::collections::HashSet;

use crate::crypto::{CipherKind, CipherTerm, KeyHandle, KeyRef, SymmetricKey, Term};

/// What an attacker has learned, closed under decomposition.
///
/// Adding a term also adds every subterm it can reach: tuple components,
/// certificate fields, the digest inside hashes and signatures, and the body of
/// any ciphertext whose opening key is known. Ciphertexts that cannot be
/// opened yet are kept aside and retried whenever a new key arrives.
///
/// Composition (pairing, encrypting, signing) is not materialized because it
/// would make the set infinite. [`Knowledge::can_derive`] answers it on demand.
#[derive(Clone, Debug, Default)]
pub struct Knowledge {
    terms: HashSet<Term>,
    sealed: Vec<CipherTerm>,
    sym: HashSet<SymmetricKey>,
    asym: HashSet<KeyHandle>,
}

impl Knowledge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Membership in the closed set.
    pub fn contains(&self, t: &Term) -> bool {
        self.terms.contains(t)
    }

    pub fn knows_sym(&self, k: SymmetricKey) -> bool {
        self.sym.contains(&k)
    }

    pub fn knows_asym(&self, k: KeyHandle) -> bool {
        self.asym.contains(&k)
    }

    /// Ciphertexts seen but not openable with current keys.
    pub fn sealed(&self) -> &[CipherTerm] {
        &self.sealed
    }

    pub fn learn(&mut self, t: Term) {
        let mut work = vec![t];
        while let Some(t) = work.pop() {
            if self.terms.contains(&t) {
                continue;
            }
            self.terms.insert(t.clone());
            match t {
                Term::Tuple(ts) => work.extend(ts),
                Term::Cert(c) => {
                    work.extend(c.tbs_terms());
                    work.push(Term::Cipher(c.signature.clone()));
                }
                Term::SymKey(k) => {
                    self.sym.insert(k);
                    self.reopen(&mut work);
                }
                Term::AsymKey(k) => {
                    self.asym.insert(k);
                    self.reopen(&mut work);
                }
                Term::Cipher(c) => match self.open(&c) {
                    Some(body) => work.extend(body),
                    None => self.sealed.push(c),
                },
                Term::Device(_)
                | Term::Stream(_)
                | Term::Nonce(_)
                | Term::Time(_)
                | Term::Digest(_)
                | Term::Bytes(_) => {}
            }
        }
    }

    pub fn learn_all(&mut self, ts: impl IntoIterator<Item = Term>) {
        for t in ts {
            self.learn(t);
        }
    }

    fn reopen(&mut self, work: &mut Vec<Term>) {
        let sealed = std::mem::take(&mut self.sealed);
        for c in sealed {
            match self.open(&c) {
                Some(body) => work.extend(body),
                None => self.sealed.push(c),
            }
        }
    }

    fn open(&self, c: &CipherTerm) -> Option<Vec<Term>> {
        let ok = match (c.kind, c.key_ref) {
            (CipherKind::Plain, _) => true,
            // The digest under a signature is recoverable with the public key.
            (CipherKind::Hash | CipherKind::Signature, _) => true,
            (CipherKind::SymEnc, Some(KeyRef::Sym(k))) => self.sym.contains(&k),
            (CipherKind::AsymEnc, Some(KeyRef::Asym(k))) => self.asym.contains(&k.paired()),
            _ => false,
        };
        ok.then(|| c.body.clone())
    }

    /// Whether the attacker can build `t` from what it knows. Identifiers,
    /// times and raw bytes are public; nonces, keys and digests must be known.
    pub fn can_derive(&self, t: &Term) -> bool {
        if self.contains(t) {
            return true;
        }
        match t {
            Term::Device(_) | Term::Stream(_) | Term::Time(_) | Term::Bytes(_) => true,
            Term::Nonce(_) | Term::Digest(_) | Term::Cert(_) => false,
            Term::SymKey(k) => self.sym.contains(k),
            Term::AsymKey(k) => self.asym.contains(k),
            Term::Tuple(ts) => ts.iter().all(|t| self.can_derive(t)),
            Term::Cipher(c) => {
                let key_ok = match c.key_ref {
                    None => true,
                    Some(KeyRef::Sym(k)) => self.sym.contains(&k),
                    Some(KeyRef::Asym(k)) => self.asym.contains(&k),
                };
                key_ok && c.body.iter().all(|t| self.can_derive(t))
            }
        }
    }

    /// Every known term rendered on one line each, sorted for stable output.
    pub fn dump(&self) -> Vec<String> {
        let mut v: Vec<String> = self.terms.iter().map(|t| format!("{t:?}")).collect();
        v.sort();
        v
    }
}
