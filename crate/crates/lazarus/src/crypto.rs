//! Key derivation chain and signatures for the device identity and the hub PKI.
//!
//! Every derivation the device or hub performs is an HMAC-SHA256 over fixed
//! inputs, so the whole chain is a pure function of the device secret, the
//! installed binaries and `dev_uuid`. Asymmetric identity keys are P-256,
//! derived deterministically from 32-byte seeds by hash-and-increment
//! rejection sampling.

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::FromEncodedPoint;
use p256::{EncodedPoint, PublicKey, SecretKey};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroize;

type HmacSha256 = Hmac<Sha256>;

/// Seed label for the DeviceID key pair, stable per recovery-TCB version.
pub const DEVICE_ID_LABEL: &[u8] = b"DeviceID";
/// Seed label for the AliasID key pair, additionally bound to the untrusted
/// firmware measurement.
pub const ALIAS_ID_LABEL: &[u8] = b"AliasID";

const ENROLLMENT_PLAINTEXT_LEN: usize = 16 + 32;
const ENROLLMENT_HKDF_INFO: &[u8] = b"enrollment-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid P-256 public key encoding")]
    InvalidPublicKey,
    #[error("enrollment blob signature does not verify")]
    BlobSignature,
    #[error("authenticated decryption failed")]
    AeadFailure,
    #[error("enrollment plaintext has wrong length")]
    BlobLength,
}

/// 32-byte symmetric key material (UDS, CDI, CDI', static_sym, core_auth).
#[derive(Clone, PartialEq, Eq)]
pub struct Key256(pub [u8; 32]);

impl Zeroize for Key256 {
    fn zeroize(&mut self) {
        self.0.zeroize();
    }
}

impl Key256 {
    pub const fn zero() -> Self {
        Key256([0u8; 32])
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl std::fmt::Debug for Key256 {
    // Key material never lands in logs or event records.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Key256(<redacted>)")
    }
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Digest256(pub [u8; 32]);

impl Digest256 {
    pub const fn zero() -> Self {
        Digest256([0u8; 32])
    }
}

impl std::fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest256({})", hex::encode(&self.0[..8]))
    }
}

/// Static 16-byte device identifier, generated once at first boot and
/// unchanged across recovery-TCB updates.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct DevUuid(pub [u8; 16]);

impl std::fmt::Debug for DevUuid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DevUuid({})", hex::encode(self.0))
    }
}

/// Fixed 64-byte x||y (big-endian) serialization of a P-256 public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKeyBytes(pub [u8; 64]);

impl PublicKeyBytes {
    pub fn to_verifying_key(&self) -> Result<VerifyingKey, CryptoError> {
        let mut sec1 = [0u8; 65];
        sec1[0] = 0x04;
        sec1[1..].copy_from_slice(&self.0);
        VerifyingKey::from_sec1_bytes(&sec1).map_err(|_| CryptoError::InvalidPublicKey)
    }

    fn to_public_key(self) -> Result<PublicKey, CryptoError> {
        let mut sec1 = [0u8; 65];
        sec1[0] = 0x04;
        sec1[1..].copy_from_slice(&self.0);
        let point = EncodedPoint::from_bytes(sec1).map_err(|_| CryptoError::InvalidPublicKey)?;
        Option::from(PublicKey::from_encoded_point(&point)).ok_or(CryptoError::InvalidPublicKey)
    }

    /// SHA-256 of the serialized key; used as a compact issuer/subject id.
    pub fn key_id(&self) -> Digest256 {
        sha256(&self.0)
    }
}

impl std::fmt::Debug for PublicKeyBytes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKeyBytes({})", hex::encode(&self.0[..8]))
    }
}

/// Identity token proving that a specific recovery-TCB version runs on a
/// specific device; verifiable by any holder of `static_sym`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DevAuthToken {
    pub mac: [u8; 32],
    pub version: u32,
}

/// P-256 signing key pair. The private scalar is derivable deterministically
/// from a 32-byte seed, so the same device state always yields the same keys.
#[derive(Clone)]
pub struct SigningKeyPair {
    signing: SigningKey,
    public: PublicKeyBytes,
}

impl SigningKeyPair {
    pub fn public_bytes(&self) -> PublicKeyBytes {
        self.public
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        *self.signing.verifying_key()
    }

    /// Raw private scalar, for handing the AliasID pair to untrusted code
    /// through the RAM mailbox.
    pub fn private_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes().into()
    }

    pub fn from_private_bytes(bytes: &[u8; 32]) -> Result<Self, CryptoError> {
        let signing =
            SigningKey::from_bytes(&(*bytes).into()).map_err(|_| CryptoError::InvalidPublicKey)?;
        let point = signing.verifying_key().to_encoded_point(false);
        let mut pub_bytes = [0u8; 64];
        pub_bytes.copy_from_slice(&point.as_bytes()[1..]);
        Ok(SigningKeyPair {
            signing,
            public: PublicKeyBytes(pub_bytes),
        })
    }
}

impl std::fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigningKeyPair(pub {})", hex::encode(&self.public.0[..8]))
    }
}

pub fn sha256(data: &[u8]) -> Digest256 {
    let mut h = Sha256::new();
    h.update(data);
    Digest256(h.finalize().into())
}

pub fn sha256_concat(parts: &[&[u8]]) -> Digest256 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest256(h.finalize().into())
}

fn hmac_sha256(key: &[u8; 32], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// CDI = HMAC-SHA256(UDS, measurement of the first mutable layer).
pub fn derive_cdi(uds: &Key256, measurement: &Digest256) -> Key256 {
    Key256(hmac_sha256(&uds.0, &[&measurement.0]))
}

/// CDI' = HMAC-SHA256(CDI, SHA256(core binary)).
///
/// Consumes and zeroizes the CDI: after this call the caller no longer holds
/// the lower-layer secret.
pub fn derive_cdi_prime(mut cdi: Key256, core_binary: &[u8]) -> Key256 {
    let out = Key256(hmac_sha256(&cdi.0, &[&sha256(core_binary).0]));
    cdi.zeroize();
    out
}

/// static_sym = HMAC-SHA256(UDS, dev_uuid); stable across recovery-TCB updates.
pub fn derive_static_sym(uds: &Key256, dev_uuid: &DevUuid) -> Key256 {
    Key256(hmac_sha256(&uds.0, &[&dev_uuid.0]))
}

/// core_auth = HMAC-SHA256(static_sym, SHA256(core binary || dev_uuid)).
pub fn derive_core_auth(static_sym: &Key256, core_binary: &[u8], dev_uuid: &DevUuid) -> Key256 {
    let digest = sha256_concat(&[core_binary, &dev_uuid.0]);
    Key256(hmac_sha256(&static_sym.0, &[&digest.0]))
}

/// dev_auth = HMAC-SHA256(core_auth, DeviceID_pub || dev_uuid).
pub fn derive_dev_auth(
    core_auth: &Key256,
    device_id_pub: &PublicKeyBytes,
    dev_uuid: &DevUuid,
    version: u32,
) -> DevAuthToken {
    DevAuthToken {
        mac: hmac_sha256(&core_auth.0, &[&device_id_pub.0, &dev_uuid.0]),
        version,
    }
}

/// Seed for the AliasID pair: binds CDI' to the untrusted firmware
/// measurement, so business-logic updates rotate the AliasID while the
/// DeviceID stays put.
pub fn derive_alias_seed(cdi_prime: &Key256, firmware_measurement: &Digest256) -> Key256 {
    Key256(hmac_sha256(
        &cdi_prime.0,
        &[ALIAS_ID_LABEL, &firmware_measurement.0],
    ))
}

/// Deterministic P-256 key pair from a seed and a domain label.
///
/// Candidate scalars are HMAC-SHA256(seed, label || counter); out-of-range or
/// zero candidates re-hash with the next counter value.
pub fn derive_keypair(seed: &Key256, label: &[u8]) -> SigningKeyPair {
    for counter in 0u32.. {
        let candidate = hmac_sha256(&seed.0, &[label, &counter.to_le_bytes()]);
        if let Ok(secret) = SecretKey::from_bytes(&candidate.into()) {
            let signing = SigningKey::from(&secret);
            let point = signing.verifying_key().to_encoded_point(false);
            let mut pub_bytes = [0u8; 64];
            pub_bytes.copy_from_slice(&point.as_bytes()[1..]);
            return SigningKeyPair {
                signing,
                public: PublicKeyBytes(pub_bytes),
            };
        }
    }
    unreachable!("rejection sampling terminates")
}

/// ECDSA-P256 over SHA-256, raw r||s. Deterministic (RFC 6979).
pub fn sign(pair: &SigningKeyPair, msg: &[u8]) -> [u8; 64] {
    let sig: Signature = pair.signing.sign(msg);
    sig.to_bytes().into()
}

/// Verifies a raw r||s signature. Malformed inputs verify as false.
pub fn verify(public: &PublicKeyBytes, msg: &[u8], signature: &[u8]) -> bool {
    let Ok(key) = public.to_verifying_key() else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(signature) else {
        return false;
    };
    key.verify(msg, &sig).is_ok()
}

/// Roles a certificate subject can play in the two-level device PKI.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertRole {
    Device = 1,
    Alias = 2,
}

impl CertRole {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(CertRole::Device),
            2 => Some(CertRole::Alias),
            _ => None,
        }
    }
}

/// Minimal signed certificate with a stable byte serialization.
///
/// `measurement`/`version` describe the software layer the subject key is
/// bound to (the core for a DeviceID, the untrusted firmware for an AliasID).
/// A DeviceID certificate may carry the `dev_auth` identity token.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Certificate {
    pub subject_pub: PublicKeyBytes,
    pub issuer_id: Digest256,
    pub role: CertRole,
    pub measurement: Digest256,
    pub version: u32,
    pub dev_auth: Option<DevAuthToken>,
    pub signature: [u8; 64],
}

impl Certificate {
    pub const MAX_LEN: usize = 64 + 32 + 1 + 32 + 4 + 1 + 36 + 64;

    fn signed_fields(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::MAX_LEN);
        out.extend_from_slice(&self.subject_pub.0);
        out.extend_from_slice(&self.issuer_id.0);
        out.push(self.role as u8);
        out.extend_from_slice(&self.measurement.0);
        out.extend_from_slice(&self.version.to_le_bytes());
        match &self.dev_auth {
            Some(tok) => {
                out.push(1);
                out.extend_from_slice(&tok.mac);
                out.extend_from_slice(&tok.version.to_le_bytes());
            }
            None => out.push(0),
        }
        out
    }

    /// Builds and signs a certificate with the issuer's private key.
    pub fn issue(
        issuer: &SigningKeyPair,
        subject_pub: PublicKeyBytes,
        role: CertRole,
        measurement: Digest256,
        version: u32,
        dev_auth: Option<DevAuthToken>,
    ) -> Self {
        let mut cert = Certificate {
            subject_pub,
            issuer_id: issuer.public_bytes().key_id(),
            role,
            measurement,
            version,
            dev_auth,
            signature: [0u8; 64],
        };
        cert.signature = sign(issuer, &cert.signed_fields());
        cert
    }

    pub fn verify(&self, issuer_pub: &PublicKeyBytes) -> bool {
        self.issuer_id == issuer_pub.key_id() && verify(issuer_pub, &self.signed_fields(), &self.signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signed_fields();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let fixed = 64 + 32 + 1 + 32 + 4 + 1;
        if bytes.len() < fixed + 64 {
            return None;
        }
        let mut off = 0usize;
        let mut subject = [0u8; 64];
        subject.copy_from_slice(&bytes[off..off + 64]);
        off += 64;
        let mut issuer = [0u8; 32];
        issuer.copy_from_slice(&bytes[off..off + 32]);
        off += 32;
        let role = CertRole::from_u8(bytes[off])?;
        off += 1;
        let mut measurement = [0u8; 32];
        measurement.copy_from_slice(&bytes[off..off + 32]);
        off += 32;
        let version = u32::from_le_bytes(bytes[off..off + 4].try_into().ok()?);
        off += 4;
        let has_tok = bytes[off];
        off += 1;
        let dev_auth = match has_tok {
            0 => None,
            1 => {
                if bytes.len() < off + 36 + 64 {
                    return None;
                }
                let mut mac = [0u8; 32];
                mac.copy_from_slice(&bytes[off..off + 32]);
                off += 32;
                let tver = u32::from_le_bytes(bytes[off..off + 4].try_into().ok()?);
                off += 4;
                Some(DevAuthToken { mac, version: tver })
            }
            _ => return None,
        };
        if bytes.len() != off + 64 {
            return None;
        }
        let mut signature = [0u8; 64];
        signature.copy_from_slice(&bytes[off..off + 64]);
        Some(Certificate {
            subject_pub: PublicKeyBytes(subject),
            issuer_id: Digest256(issuer),
            role,
            measurement: Digest256(measurement),
            version,
            dev_auth,
            signature,
        })
    }
}

/// Verifies the two-link chain hub root -> DeviceID -> AliasID.
pub fn verify_chain(
    hub_root_pub: &PublicKeyBytes,
    device_cert: &Certificate,
    alias_cert: &Certificate,
) -> bool {
    device_cert.role == CertRole::Device
        && device_cert.verify(hub_root_pub)
        && alias_cert.role == CertRole::Alias
        && alias_cert.verify(&device_cert.subject_pub)
}

/// First-connection enrollment structure: `dev_uuid || static_sym` encrypted
/// to the hub and signed with the initial DeviceID private key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EnrollmentBlob {
    pub ephemeral_pub: PublicKeyBytes,
    pub aead_nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub signature: [u8; 64],
}

impl EnrollmentBlob {
    fn signed_fields(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 12 + self.ciphertext.len());
        out.extend_from_slice(&self.ephemeral_pub.0);
        out.extend_from_slice(&self.aead_nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }
}

fn enrollment_cipher(
    shared: &p256::ecdh::SharedSecret,
    ephemeral_pub: &PublicKeyBytes,
) -> chacha20poly1305::ChaCha20Poly1305 {
    use chacha20poly1305::KeyInit;
    let hk = Hkdf::<Sha256>::new(Some(&ephemeral_pub.0), shared.raw_secret_bytes());
    let mut key = [0u8; 32];
    hk.expand(ENROLLMENT_HKDF_INFO, &mut key)
        .expect("32-byte OKM is valid for HKDF-SHA256");
    chacha20poly1305::ChaCha20Poly1305::new(&key.into())
}

/// Builds the enrollment blob. `ephemeral_seed` and `aead_nonce` come from the
/// device entropy source so the construction stays reproducible in simulation.
pub fn build_enrollment_blob(
    dev_uuid: &DevUuid,
    static_sym: &Key256,
    hub_pub: &PublicKeyBytes,
    device_id_priv: &SigningKeyPair,
    ephemeral_seed: &Key256,
    aead_nonce: [u8; 12],
) -> Result<EnrollmentBlob, CryptoError> {
    use chacha20poly1305::aead::Aead;

    let ephemeral = derive_keypair(ephemeral_seed, b"enroll-ephemeral");
    let eph_secret = SecretKey::from_bytes(&ephemeral.signing.to_bytes())
        .expect("derived scalar is in range");
    let hub_point = hub_pub.to_public_key()?;
    let shared = p256::ecdh::diffie_hellman(eph_secret.to_nonzero_scalar(), hub_point.as_affine());

    let mut plaintext = [0u8; ENROLLMENT_PLAINTEXT_LEN];
    plaintext[..16].copy_from_slice(&dev_uuid.0);
    plaintext[16..].copy_from_slice(&static_sym.0);
    let cipher = enrollment_cipher(&shared, &ephemeral.public_bytes());
    let ciphertext = cipher
        .encrypt(&aead_nonce.into(), plaintext.as_slice())
        .map_err(|_| CryptoError::AeadFailure)?;

    let mut blob = EnrollmentBlob {
        ephemeral_pub: ephemeral.public_bytes(),
        aead_nonce,
        ciphertext,
        signature: [0u8; 64],
    };
    blob.signature = sign(device_id_priv, &blob.signed_fields());
    Ok(blob)
}

/// Verifies the blob signature, then decrypts. The plaintext is released only
/// after both the signature and the AEAD tag check out.
pub fn open_enrollment_blob(
    blob: &EnrollmentBlob,
    hub_priv: &SigningKeyPair,
    device_id_pub: &PublicKeyBytes,
) -> Result<(DevUuid, Key256), CryptoError> {
    use chacha20poly1305::aead::Aead;

    if !verify(device_id_pub, &blob.signed_fields(), &blob.signature) {
        return Err(CryptoError::BlobSignature);
    }
    let hub_secret = SecretKey::from_bytes(&hub_priv.signing.to_bytes())
        .expect("hub scalar is in range");
    let eph_point = blob.ephemeral_pub.to_public_key()?;
    let shared = p256::ecdh::diffie_hellman(hub_secret.to_nonzero_scalar(), eph_point.as_affine());
    let cipher = enrollment_cipher(&shared, &blob.ephemeral_pub);
    let plaintext = cipher
        .decrypt(&blob.aead_nonce.into(), blob.ciphertext.as_slice())
        .map_err(|_| CryptoError::AeadFailure)?;
    if plaintext.len() != ENROLLMENT_PLAINTEXT_LEN {
        return Err(CryptoError::BlobLength);
    }
    let mut uuid = [0u8; 16];
    uuid.copy_from_slice(&plaintext[..16]);
    let mut sym = [0u8; 32];
    sym.copy_from_slice(&plaintext[16..]);
    Ok((DevUuid(uuid), Key256(sym)))
}
