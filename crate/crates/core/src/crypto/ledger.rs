use serde::{Deserialize, Serialize};

/// Encoded sizes of protocol fields, in bytes.
///
/// Every wire length in the simulator is a sum of these entries, so changing
/// an encoding only requires touching this section of the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldLedger {
    pub device_id: usize,
    pub stream_id: usize,
    pub nonce: usize,
    pub timestamp: usize,
    pub symmetric_key: usize,
    pub digest: usize,
    pub certificate_attributes: usize,
    /// RSA key length used for device certificates.
    pub rsa_key_bits: u32,
}

impl Default for FieldLedger {
    fn default() -> Self {
        FieldLedger {
            device_id: 2,
            stream_id: 2,
            nonce: 8,
            timestamp: 8,
            symmetric_key: 16,
            digest: 16,
            certificate_attributes: 30,
            rsa_key_bits: 512,
        }
    }
}

impl FieldLedger {
    pub fn public_key(&self) -> usize {
        self.rsa_key_bits as usize / 8
    }

    pub fn signature(&self) -> usize {
        self.rsa_key_bits as usize / 8
    }

    /// ID + public key + attributes + CA signature.
    pub fn certificate(&self) -> usize {
        self.device_id + self.public_key() + self.certificate_attributes + self.signature()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_certificate_is_160_bytes() {
        assert_eq!(FieldLedger::default().certificate(), 160);
    }
}
