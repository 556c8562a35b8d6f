//! Byte-exact message encoding shared by device and hub.
//!
//! Every message except the 2-byte ack is a 140-byte authenticated header
//! followed by the payload:
//!
//! ```text
//! offset  size  field
//!      0     4  msg_type        u32 LE
//!      4    32  nonce
//!     36    32  payload_digest  SHA-256 of the payload
//!     68    64  signature       ECDSA-P256 raw r||s
//!    132     4  payload_len     u32 LE
//!    136     4  proto_version   u32 LE
//! ```
//!
//! The signature covers all other header fields in serialized order
//! (`msg_type || nonce || payload_digest || payload_len || proto_version`),
//! which binds the payload through its digest. Hub-issued tickets are exactly
//! these signed response headers, so TEE-side ticket verification rebuilds
//! the same preimage from `(type, nonce, value)`.

use crate::crypto::{sha256, sign, verify, Digest256, PublicKeyBytes, SigningKeyPair};
use thiserror::Error;

pub const HEADER_LEN: usize = 140;
pub const SIGNING_PREIMAGE_LEN: usize = HEADER_LEN - 64;
pub const ACK_LEN: usize = 2;
pub const PROTO_VERSION: u32 = 1;

/// Fixed 4-byte boot-ticket payload value.
pub const BOOT_TICKET_PAYLOAD: [u8; 4] = *b"LZBT";

/// Hard cap on payload length accepted by the decoder; well above any
/// legitimate message (the largest is an update chunk).
pub const MAX_PAYLOAD_LEN: u32 = 64 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("buffer too short: got {got}, need {need}")]
    ShortBuffer { got: usize, need: usize },
    #[error("unknown message type {0}")]
    UnknownType(u32),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u32),
    #[error("declared payload length {declared} does not match buffer ({actual})")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("payload digest mismatch")]
    DigestMismatch,
    #[error("header signature does not verify")]
    BadSignature,
    #[error("ack frame must be exactly 2 bytes")]
    BadAck,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u32)]
pub enum MessageType {
    SendAliasId = 1,
    BootTicketReq = 2,
    BootTicketResp = 3,
    DeferralReq = 4,
    DeferralResp = 5,
    UpdateOffer = 6,
    UpdateChunk = 7,
    ReassocClaim = 8,
    Ack = 9,
}

impl MessageType {
    pub fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            1 => MessageType::SendAliasId,
            2 => MessageType::BootTicketReq,
            3 => MessageType::BootTicketResp,
            4 => MessageType::DeferralReq,
            5 => MessageType::DeferralResp,
            6 => MessageType::UpdateOffer,
            7 => MessageType::UpdateChunk,
            8 => MessageType::ReassocClaim,
            9 => MessageType::Ack,
            _ => return None,
        })
    }
}

/// Parsed 140-byte header.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MessageHeader {
    pub msg_type: MessageType,
    pub nonce: [u8; 32],
    pub payload_digest: Digest256,
    pub signature: [u8; 64],
    pub payload_len: u32,
    pub proto_version: u32,
}

/// Ack status codes (u16 LE on the wire).
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[repr(u16)]
pub enum AckStatus {
    Ok = 0,
    UnknownDevice = 1,
    ReassocRequired = 2,
    MeasurementMismatch = 3,
    PolicyRefusal = 4,
    BadRequest = 5,
    VersionRejected = 6,
}

impl AckStatus {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            0 => AckStatus::Ok,
            1 => AckStatus::UnknownDevice,
            2 => AckStatus::ReassocRequired,
            3 => AckStatus::MeasurementMismatch,
            4 => AckStatus::PolicyRefusal,
            5 => AckStatus::BadRequest,
            6 => AckStatus::VersionRejected,
            _ => return None,
        })
    }
}

/// The 76-byte signing preimage for a message with the given type, nonce and
/// payload. Also the verification preimage for boot and deferral tickets.
pub fn signing_bytes(msg_type: MessageType, nonce: &[u8; 32], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(SIGNING_PREIMAGE_LEN);
    out.extend_from_slice(&(msg_type as u32).to_le_bytes());
    out.extend_from_slice(nonce);
    out.extend_from_slice(&sha256(payload).0);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&PROTO_VERSION.to_le_bytes());
    out
}

fn serialize(header: &MessageHeader, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(header.msg_type as u32).to_le_bytes());
    out.extend_from_slice(&header.nonce);
    out.extend_from_slice(&header.payload_digest.0);
    out.extend_from_slice(&header.signature);
    out.extend_from_slice(&header.payload_len.to_le_bytes());
    out.extend_from_slice(&header.proto_version.to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Builds, signs and serializes a frame.
pub fn encode_signed(
    msg_type: MessageType,
    nonce: [u8; 32],
    payload: &[u8],
    signer: &SigningKeyPair,
) -> Vec<u8> {
    let header = MessageHeader {
        msg_type,
        nonce,
        payload_digest: sha256(payload),
        signature: sign(signer, &signing_bytes(msg_type, &nonce, payload)),
        payload_len: payload.len() as u32,
        proto_version: PROTO_VERSION,
    };
    serialize(&header, payload)
}

/// Serializes a frame with a caller-provided signature (used when relaying a
/// ticket whose signature came from the hub, and by the layout fixtures).
pub fn encode_presigned(
    msg_type: MessageType,
    nonce: [u8; 32],
    payload: &[u8],
    signature: [u8; 64],
) -> Vec<u8> {
    let header = MessageHeader {
        msg_type,
        nonce,
        payload_digest: sha256(payload),
        signature,
        payload_len: payload.len() as u32,
        proto_version: PROTO_VERSION,
    };
    serialize(&header, payload)
}

/// Structural parse of the header plus length validation. No cryptographic
/// checks; callers that need authenticated payloads go through [`decode`].
pub fn parse_frame(bytes: &[u8]) -> Result<(MessageHeader, &[u8]), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::ShortBuffer {
            got: bytes.len(),
            need: HEADER_LEN,
        });
    }
    let raw_type = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let msg_type = MessageType::from_u32(raw_type).ok_or(WireError::UnknownType(raw_type))?;
    let mut nonce = [0u8; 32];
    nonce.copy_from_slice(&bytes[4..36]);
    let mut digest = [0u8; 32];
    digest.copy_from_slice(&bytes[36..68]);
    let mut signature = [0u8; 64];
    signature.copy_from_slice(&bytes[68..132]);
    let payload_len = u32::from_le_bytes(bytes[132..136].try_into().unwrap());
    let proto_version = u32::from_le_bytes(bytes[136..140].try_into().unwrap());

    if proto_version != PROTO_VERSION {
        return Err(WireError::UnsupportedVersion(proto_version));
    }
    if payload_len > MAX_PAYLOAD_LEN || bytes.len() != HEADER_LEN + payload_len as usize {
        return Err(WireError::LengthMismatch {
            declared: payload_len,
            actual: bytes.len().saturating_sub(HEADER_LEN),
        });
    }
    Ok((
        MessageHeader {
            msg_type,
            nonce,
            payload_digest: Digest256(digest),
            signature,
            payload_len,
            proto_version,
        },
        &bytes[HEADER_LEN..],
    ))
}

/// Full decode: structural parse, digest check, then signature check under
/// `verifier`. The payload is only released when every check passed.
pub fn decode(bytes: &[u8], verifier: &PublicKeyBytes) -> Result<(MessageHeader, Vec<u8>), WireError> {
    let (header, payload) = parse_frame(bytes)?;
    if sha256(payload) != header.payload_digest {
        return Err(WireError::DigestMismatch);
    }
    let preimage = signing_bytes(header.msg_type, &header.nonce, payload);
    if !verify(verifier, &preimage, &header.signature) {
        return Err(WireError::BadSignature);
    }
    Ok((header, payload.to_vec()))
}

// ---- payload layouts --------------------------------------------------

use crate::crypto::{Certificate, DevUuid};

/// `SendAliasId` request payload: the device presents its AliasID chain.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AliasIdPayload {
    pub dev_uuid: DevUuid,
    pub bl_version: u32,
    pub device_pub: PublicKeyBytes,
    pub alias_cert: Certificate,
}

impl AliasIdPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cert = self.alias_cert.to_bytes();
        let mut out = Vec::with_capacity(16 + 4 + 64 + 4 + cert.len());
        out.extend_from_slice(&self.dev_uuid.0);
        out.extend_from_slice(&self.bl_version.to_le_bytes());
        out.extend_from_slice(&self.device_pub.0);
        out.extend_from_slice(&(cert.len() as u32).to_le_bytes());
        out.extend_from_slice(&cert);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 16 + 4 + 64 + 4 {
            return None;
        }
        let mut uuid = [0u8; 16];
        uuid.copy_from_slice(&bytes[..16]);
        let bl_version = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let mut device_pub = [0u8; 64];
        device_pub.copy_from_slice(&bytes[20..84]);
        let cert_len = u32::from_le_bytes(bytes[84..88].try_into().unwrap()) as usize;
        if bytes.len() != 88 + cert_len {
            return None;
        }
        let alias_cert = Certificate::from_bytes(&bytes[88..])?;
        Some(AliasIdPayload {
            dev_uuid: DevUuid(uuid),
            bl_version,
            device_pub: PublicKeyBytes(device_pub),
            alias_cert,
        })
    }
}

/// `ReassocClaim` payload: identity claim after a recovery-TCB update.
/// Authenticity rests on the `dev_auth` MAC, which only the correct device at
/// the claimed version can compute.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ReassocClaimPayload {
    pub dev_uuid: DevUuid,
    pub version: u32,
    pub device_pub: PublicKeyBytes,
    pub dev_auth_mac: [u8; 32],
}

impl ReassocClaimPayload {
    pub const LEN: usize = 16 + 4 + 64 + 32;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.dev_uuid.0);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.device_pub.0);
        out.extend_from_slice(&self.dev_auth_mac);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::LEN {
            return None;
        }
        let mut uuid = [0u8; 16];
        uuid.copy_from_slice(&bytes[..16]);
        let version = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let mut device_pub = [0u8; 64];
        device_pub.copy_from_slice(&bytes[20..84]);
        let mut mac = [0u8; 32];
        mac.copy_from_slice(&bytes[84..116]);
        Some(ReassocClaimPayload {
            dev_uuid: DevUuid(uuid),
            version,
            device_pub: PublicKeyBytes(device_pub),
            dev_auth_mac: mac,
        })
    }
}

/// `UpdateOffer` payload: the hub mandates an update instead of a ticket.
/// Carries the manifest header; the payload follows in chunks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct UpdateOfferPayload {
    pub target_tag: u8,
    pub version: u32,
    pub payload_digest: Digest256,
    pub total_len: u32,
    pub manifest_sig: [u8; 64],
}

impl UpdateOfferPayload {
    pub const LEN: usize = 1 + 4 + 32 + 4 + 64;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.push(self.target_tag);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.payload_digest.0);
        out.extend_from_slice(&self.total_len.to_le_bytes());
        out.extend_from_slice(&self.manifest_sig);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::LEN {
            return None;
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&bytes[5..37]);
        let total_len = u32::from_le_bytes(bytes[37..41].try_into().unwrap());
        let mut sig = [0u8; 64];
        sig.copy_from_slice(&bytes[41..105]);
        Some(UpdateOfferPayload {
            target_tag: bytes[0],
            version: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
            payload_digest: Digest256(digest),
            total_len,
            manifest_sig: sig,
        })
    }
}

/// `UpdateChunk` request payload (device pulls a byte range).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct UpdateChunkReqPayload {
    pub target_tag: u8,
    pub version: u32,
    pub offset: u32,
    pub max_len: u32,
}

impl UpdateChunkReqPayload {
    pub const LEN: usize = 1 + 4 + 4 + 4;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.push(self.target_tag);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.max_len.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::LEN {
            return None;
        }
        Some(UpdateChunkReqPayload {
            target_tag: bytes[0],
            version: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
            offset: u32::from_le_bytes(bytes[5..9].try_into().unwrap()),
            max_len: u32::from_le_bytes(bytes[9..13].try_into().unwrap()),
        })
    }
}

/// `UpdateChunk` response payload.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct UpdateChunkRespPayload {
    pub offset: u32,
    pub data: Vec<u8>,
}

impl UpdateChunkRespPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.data.len());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 4 {
            return None;
        }
        Some(UpdateChunkRespPayload {
            offset: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            data: bytes[4..].to_vec(),
        })
    }
}

pub fn encode_ack(status: AckStatus) -> [u8; 2] {
    (status as u16).to_le_bytes()
}

pub fn decode_ack(bytes: &[u8]) -> Result<AckStatus, WireError> {
    if bytes.len() != ACK_LEN {
        return Err(WireError::BadAck);
    }
    let raw = u16::from_le_bytes([bytes[0], bytes[1]]);
    AckStatus::from_u16(raw).ok_or(WireError::BadAck)
}

/// True when the frame is a bare 2-byte ack rather than a header frame.
pub fn is_ack_frame(bytes: &[u8]) -> bool {
    bytes.len() == ACK_LEN
}
