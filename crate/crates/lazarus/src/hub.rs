//! The hub: device registry, enrollment, attestation verification,
//! re-association after recovery-TCB updates, ticket issuance, update
//! publication and recovery policy.
//!
//! Registry mutations append to an op log and rewrite a human-readable
//! snapshot when persistence is configured; simulations run fully in memory.

use crate::boot::{UpdateManifest, UpdateTarget};
use crate::crypto::{
    derive_core_auth, derive_dev_auth, derive_keypair, open_enrollment_blob, sha256, verify,
    CertRole, Certificate, DevUuid, Digest256, EnrollmentBlob, Key256, PublicKeyBytes,
    SigningKeyPair,
};
use crate::wire::{
    self, AckStatus, AliasIdPayload, MessageType, ReassocClaimPayload, UpdateChunkReqPayload,
    UpdateChunkRespPayload, UpdateOfferPayload, BOOT_TICKET_PAYLOAD,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

/// Maximum bytes served per update chunk.
pub const UPDATE_CHUNK_LEN: u32 = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HubError {
    #[error("device with this dev_uuid is already enrolled")]
    DuplicateDevice,
    #[error("enrollment blob rejected: {0}")]
    BadBlob(crate::crypto::CryptoError),
    #[error("published version must be strictly greater than the current one")]
    NonMonotonicVersion,
    #[error("updates cannot target the immutable first layer")]
    ImmutableTarget,
    #[error("unknown device")]
    UnknownDevice,
    #[error("persistence failure: {0}")]
    Persist(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DevicePolicy {
    Normal,
    /// Refuse deferrals so the AWDT forces a reset; cleared once the device
    /// has re-attested cleanly with no update pending.
    ForceRecover,
    Revoked,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReassocReject {
    UnknownDevice,
    UnknownVersion,
    MacMismatch,
}

/// Registry row for one device.
#[derive(Clone, Debug)]
pub struct DeviceRecord {
    pub dev_uuid: DevUuid,
    static_sym: Key256,
    pub device_pub: PublicKeyBytes,
    pub device_cert: Certificate,
    /// Installed versions the hub has evidence for.
    pub installed: BTreeMap<UpdateTarget, u32>,
    pub last_seen: u64,
    pub policy: DevicePolicy,
}

#[derive(Clone, Debug)]
struct CatalogEntry {
    payload: Vec<u8>,
    digest: Digest256,
    manifest_sig: [u8; 64],
}

#[derive(Clone, Debug, Default)]
struct Session {
    alias_pub: Option<PublicKeyBytes>,
    dev_uuid: Option<DevUuid>,
    attested: bool,
}

/// Hub-side record of what a request handler did; feeds the event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "hub", rename_all = "snake_case")]
pub enum HubEvent {
    AliasAccepted { bl_version: u32 },
    AliasRejected { status: AckStatus },
    ReassocAccepted { version: u32 },
    ReassocRejected { reason: ReassocReject },
    BootTicketIssued,
    DeferralIssued { deferral_ms: u32 },
    TicketRefused { status: AckStatus },
    UpdateOffered { target: UpdateTarget, version: u32 },
    ChunkServed { offset: u32, len: u32 },
    BadRequest,
}

/// Global knobs plus per-device policy in the records.
#[derive(Clone, Copy, Debug)]
pub struct HubPolicy {
    /// Cap on granted deferral times.
    pub deferral_ms: u32,
    /// Re-publish the latest business-logic image under a fresh version when
    /// a device attests with an unexpected measurement.
    pub auto_patch_on_mismatch: bool,
}

impl Default for HubPolicy {
    fn default() -> Self {
        HubPolicy {
            deferral_ms: 600_000,
            auto_patch_on_mismatch: false,
        }
    }
}

pub struct Hub {
    root: SigningKeyPair,
    code_sign: SigningKeyPair,
    pub policy: HubPolicy,
    registry: BTreeMap<DevUuid, DeviceRecord>,
    by_device_pub: BTreeMap<[u8; 64], DevUuid>,
    catalog: BTreeMap<(UpdateTarget, u32), CatalogEntry>,
    latest: BTreeMap<UpdateTarget, u32>,
    sessions: BTreeMap<u64, Session>,
    persist_dir: Option<PathBuf>,
}

impl Hub {
    pub fn new(root_seed: &Key256, code_seed: &Key256) -> Self {
        Hub {
            root: derive_keypair(root_seed, b"hub-root"),
            code_sign: derive_keypair(code_seed, b"hub-code-sign"),
            policy: HubPolicy::default(),
            registry: BTreeMap::new(),
            by_device_pub: BTreeMap::new(),
            catalog: BTreeMap::new(),
            latest: BTreeMap::new(),
            sessions: BTreeMap::new(),
            persist_dir: None,
        }
    }

    /// Enables the append-only op log and snapshot under `dir`.
    pub fn with_persistence(mut self, dir: PathBuf) -> Result<Self, HubError> {
        std::fs::create_dir_all(&dir).map_err(|e| HubError::Persist(e.to_string()))?;
        self.persist_dir = Some(dir);
        Ok(self)
    }

    pub fn root_pub(&self) -> PublicKeyBytes {
        self.root.public_bytes()
    }

    pub fn code_sign_pub(&self) -> PublicKeyBytes {
        self.code_sign.public_bytes()
    }

    pub fn record(&self, dev_uuid: &DevUuid) -> Option<&DeviceRecord> {
        self.registry.get(dev_uuid)
    }

    pub fn set_policy(&mut self, dev_uuid: &DevUuid, policy: DevicePolicy) -> Result<(), HubError> {
        let record = self
            .registry
            .get_mut(dev_uuid)
            .ok_or(HubError::UnknownDevice)?;
        record.policy = policy;
        self.append_op(&format!(
            "{{\"op\":\"set_policy\",\"dev_uuid\":\"{}\",\"policy\":\"{:?}\"}}",
            hex::encode(dev_uuid.0),
            policy
        ));
        self.write_snapshot();
        Ok(())
    }

    pub fn latest_version(&self, target: UpdateTarget) -> Option<u32> {
        self.latest.get(&target).copied()
    }

    pub fn expected_measurement(&self, target: UpdateTarget, version: u32) -> Option<Digest256> {
        self.catalog.get(&(target, version)).map(|e| e.digest)
    }

    /// Registers the image a device ships with, so measurements and
    /// re-association can be checked against it. Provisioning-time call.
    pub fn register_initial_image(&mut self, target: UpdateTarget, version: u32, payload: Vec<u8>) {
        let digest = sha256(&payload);
        let manifest_sig = crate::crypto::sign(
            &self.code_sign,
            &UpdateManifest::signed_fields(target, version, &digest),
        );
        self.catalog.insert(
            (target, version),
            CatalogEntry {
                payload,
                digest,
                manifest_sig,
            },
        );
        let latest = self.latest.entry(target).or_insert(version);
        if version > *latest {
            *latest = version;
        }
    }

    /// Provisioning-context enrollment: creates the registry row and signs
    /// the DeviceID certificate that establishes the PKI.
    pub fn enroll(
        &mut self,
        dev_uuid: DevUuid,
        static_sym: Key256,
        device_pub: PublicKeyBytes,
        core_measurement: Digest256,
        core_version: u32,
    ) -> Result<Certificate, HubError> {
        if self.registry.contains_key(&dev_uuid) {
            return Err(HubError::DuplicateDevice);
        }
        let device_cert = Certificate::issue(
            &self.root,
            device_pub,
            CertRole::Device,
            core_measurement,
            core_version,
            None,
        );
        let mut installed = BTreeMap::new();
        installed.insert(UpdateTarget::LazarusCore, core_version);
        for target in [UpdateTarget::Downloader, UpdateTarget::BusinessLogic] {
            if let Some(v) = self.latest.get(&target) {
                installed.insert(target, *v);
            }
        }
        self.registry.insert(
            dev_uuid,
            DeviceRecord {
                dev_uuid,
                static_sym,
                device_pub,
                device_cert: device_cert.clone(),
                installed,
                last_seen: 0,
                policy: DevicePolicy::Normal,
            },
        );
        self.by_device_pub.insert(device_pub.0, dev_uuid);
        self.append_op(&format!(
            "{{\"op\":\"enroll\",\"dev_uuid\":\"{}\"}}",
            hex::encode(dev_uuid.0)
        ));
        self.write_snapshot();
        Ok(device_cert)
    }

    /// Online enrollment from the signed-and-encrypted first-connection
    /// structure. The initial DeviceID public key must be preregistered (it
    /// authenticates the blob).
    pub fn enroll_online(
        &mut self,
        blob: &EnrollmentBlob,
        device_pub: PublicKeyBytes,
        core_measurement: Digest256,
        core_version: u32,
    ) -> Result<Certificate, HubError> {
        let (dev_uuid, static_sym) =
            open_enrollment_blob(blob, &self.root, &device_pub).map_err(HubError::BadBlob)?;
        self.enroll(dev_uuid, static_sym, device_pub, core_measurement, core_version)
    }

    /// Re-association after a recovery-TCB update: recompute the identity
    /// token from the shared secret and the published binary, accept only on
    /// an exact match, then bind the new DeviceID.
    pub fn handle_reassoc(
        &mut self,
        claim: &ReassocClaimPayload,
        now: u64,
    ) -> Result<(), ReassocReject> {
        let record = self
            .registry
            .get(&claim.dev_uuid)
            .ok_or(ReassocReject::UnknownDevice)?;
        let entry = self
            .catalog
            .get(&(UpdateTarget::LazarusCore, claim.version))
            .ok_or(ReassocReject::UnknownVersion)?;
        let core_auth = derive_core_auth(&record.static_sym, &entry.payload, &claim.dev_uuid);
        let expected = derive_dev_auth(&core_auth, &claim.device_pub, &claim.dev_uuid, claim.version);
        if expected.mac != claim.dev_auth_mac {
            return Err(ReassocReject::MacMismatch);
        }

        let record = self.registry.get_mut(&claim.dev_uuid).expect("checked above");
        let old_pub = record.device_pub;
        record.device_pub = claim.device_pub;
        record.device_cert = Certificate::issue(
            &self.root,
            claim.device_pub,
            CertRole::Device,
            entry.digest,
            claim.version,
            None,
        );
        record.installed.insert(UpdateTarget::LazarusCore, claim.version);
        record.last_seen = now;
        self.by_device_pub.remove(&old_pub.0);
        self.by_device_pub.insert(claim.device_pub.0, claim.dev_uuid);
        self.append_op(&format!(
            "{{\"op\":\"reassoc\",\"dev_uuid\":\"{}\",\"version\":{}}}",
            hex::encode(claim.dev_uuid.0),
            claim.version
        ));
        self.write_snapshot();
        Ok(())
    }

    /// Publishes a signed update and updates the expected-measurement table.
    pub fn publish_update(
        &mut self,
        target: UpdateTarget,
        version: u32,
        payload: Vec<u8>,
    ) -> Result<UpdateManifest, HubError> {
        if target == UpdateTarget::DicePlusPlus {
            return Err(HubError::ImmutableTarget);
        }
        if let Some(latest) = self.latest.get(&target) {
            if version <= *latest {
                return Err(HubError::NonMonotonicVersion);
            }
        }
        let manifest = UpdateManifest::build(target, version, payload.clone(), &self.code_sign);
        self.catalog.insert(
            (target, version),
            CatalogEntry {
                payload,
                digest: manifest.payload_digest,
                manifest_sig: manifest.signature,
            },
        );
        self.latest.insert(target, version);
        self.append_op(&format!(
            "{{\"op\":\"publish\",\"target\":\"{:?}\",\"version\":{}}}",
            target, version
        ));
        self.write_snapshot();
        Ok(manifest)
    }

    /// Signs a boot ticket over the presented nonce.
    pub fn issue_boot_ticket_frame(&self, nonce: [u8; 32]) -> Vec<u8> {
        wire::encode_signed(
            MessageType::BootTicketResp,
            nonce,
            &BOOT_TICKET_PAYLOAD,
            &self.root,
        )
    }

    /// Signs a deferral ticket over the presented nonce.
    pub fn issue_deferral_frame(&self, nonce: [u8; 32], deferral_ms: u32) -> Vec<u8> {
        wire::encode_signed(
            MessageType::DeferralResp,
            nonce,
            &deferral_ms.to_le_bytes(),
            &self.root,
        )
    }

    /// Per-device convergence view: (installed, latest) per target.
    pub fn convergence_report(&self) -> Vec<(DevUuid, UpdateTarget, Option<u32>, Option<u32>)> {
        let mut out = Vec::new();
        for (uuid, record) in &self.registry {
            for target in [
                UpdateTarget::LazarusCore,
                UpdateTarget::Downloader,
                UpdateTarget::BusinessLogic,
            ] {
                out.push((
                    *uuid,
                    target,
                    record.installed.get(&target).copied(),
                    self.latest.get(&target).copied(),
                ));
            }
        }
        out
    }

    /// The update the device should install next, most critical layer first.
    fn pending_update_for(&self, record: &DeviceRecord) -> Option<(UpdateTarget, u32)> {
        for target in [
            UpdateTarget::LazarusCore,
            UpdateTarget::Downloader,
            UpdateTarget::BusinessLogic,
        ] {
            if let Some(latest) = self.latest.get(&target) {
                let installed = record.installed.get(&target).copied().unwrap_or(0);
                if *latest > installed {
                    return Some((target, *latest));
                }
            }
        }
        None
    }

    fn ack(status: AckStatus) -> Vec<u8> {
        wire::encode_ack(status).to_vec()
    }

    /// Serves one request frame for the given connection. Returns the
    /// response frame (a signed message or a 2-byte ack) plus the event for
    /// the log.
    pub fn handle_frame(&mut self, conn: u64, frame: &[u8], now: u64) -> (Vec<u8>, HubEvent) {
        let Ok((header, payload)) = wire::parse_frame(frame) else {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        };
        if sha256(payload) != header.payload_digest {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        }
        match header.msg_type {
            MessageType::SendAliasId => self.on_send_alias(conn, &header, payload, now),
            MessageType::ReassocClaim => self.on_reassoc(&header, payload, now),
            MessageType::BootTicketReq => self.on_boot_ticket_req(conn, &header, payload, now),
            MessageType::DeferralReq => self.on_deferral_req(conn, &header, payload, now),
            MessageType::UpdateChunk => self.on_chunk_req(conn, &header, payload),
            _ => (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest),
        }
    }

    fn verify_session_signature(
        &self,
        conn: u64,
        header: &wire::MessageHeader,
        payload: &[u8],
    ) -> bool {
        let Some(session) = self.sessions.get(&conn) else {
            return false;
        };
        let Some(alias_pub) = session.alias_pub else {
            return false;
        };
        let preimage = wire::signing_bytes(header.msg_type, &header.nonce, payload);
        verify(&alias_pub, &preimage, &header.signature)
    }

    fn on_send_alias(
        &mut self,
        conn: u64,
        header: &wire::MessageHeader,
        payload: &[u8],
        now: u64,
    ) -> (Vec<u8>, HubEvent) {
        let Some(alias) = AliasIdPayload::from_bytes(payload) else {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        };
        // The hello is self-certifying: the header is signed with the alias
        // key presented inside; trust comes from the chain checks below.
        let preimage = wire::signing_bytes(header.msg_type, &header.nonce, payload);
        if !verify(&alias.alias_cert.subject_pub, &preimage, &header.signature) {
            return (
                Self::ack(AckStatus::BadRequest),
                HubEvent::AliasRejected {
                    status: AckStatus::BadRequest,
                },
            );
        }

        let Some(dev_uuid) = self.by_device_pub.get(&alias.device_pub.0).copied() else {
            // Known device claiming a new DeviceID must re-associate first.
            let status = if self.registry.contains_key(&alias.dev_uuid) {
                AckStatus::ReassocRequired
            } else {
                AckStatus::UnknownDevice
            };
            return (Self::ack(status), HubEvent::AliasRejected { status });
        };
        if dev_uuid != alias.dev_uuid {
            let status = AckStatus::UnknownDevice;
            return (Self::ack(status), HubEvent::AliasRejected { status });
        }
        let record = self.registry.get(&dev_uuid).expect("indexed");
        if record.policy == DevicePolicy::Revoked {
            let status = AckStatus::PolicyRefusal;
            return (Self::ack(status), HubEvent::AliasRejected { status });
        }
        if !alias.alias_cert.verify(&record.device_pub) {
            let status = AckStatus::BadRequest;
            return (Self::ack(status), HubEvent::AliasRejected { status });
        }

        let expected = self.expected_measurement(UpdateTarget::BusinessLogic, alias.bl_version);
        let attested = expected == Some(alias.alias_cert.measurement);
        if !attested {
            if self.policy.auto_patch_on_mismatch {
                self.republish_business_logic();
            }
            // Session opens unattested: ticket requests will be funneled into
            // the update path rather than granted.
            self.sessions.insert(
                conn,
                Session {
                    alias_pub: Some(alias.alias_cert.subject_pub),
                    dev_uuid: Some(dev_uuid),
                    attested: false,
                },
            );
            let record = self.registry.get_mut(&dev_uuid).expect("indexed");
            record.last_seen = now;
            let status = AckStatus::MeasurementMismatch;
            return (Self::ack(status), HubEvent::AliasRejected { status });
        }

        let record = self.registry.get_mut(&dev_uuid).expect("indexed");
        record.last_seen = now;
        record
            .installed
            .insert(UpdateTarget::BusinessLogic, alias.bl_version);
        self.sessions.insert(
            conn,
            Session {
                alias_pub: Some(alias.alias_cert.subject_pub),
                dev_uuid: Some(dev_uuid),
                attested: true,
            },
        );
        (
            Self::ack(AckStatus::Ok),
            HubEvent::AliasAccepted {
                bl_version: alias.bl_version,
            },
        )
    }

    /// Clones the newest business-logic image under a fresh version; models
    /// the operator response to a failed attestation.
    fn republish_business_logic(&mut self) {
        let Some(latest) = self.latest.get(&UpdateTarget::BusinessLogic).copied() else {
            return;
        };
        let Some(entry) = self.catalog.get(&(UpdateTarget::BusinessLogic, latest)) else {
            return;
        };
        let payload = entry.payload.clone();
        let _ = self.publish_update(UpdateTarget::BusinessLogic, latest + 1, payload);
    }

    fn on_reassoc(
        &mut self,
        _header: &wire::MessageHeader,
        payload: &[u8],
        now: u64,
    ) -> (Vec<u8>, HubEvent) {
        let Some(claim) = ReassocClaimPayload::from_bytes(payload) else {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        };
        match self.handle_reassoc(&claim, now) {
            Ok(()) => (
                Self::ack(AckStatus::Ok),
                HubEvent::ReassocAccepted {
                    version: claim.version,
                },
            ),
            Err(reason) => {
                let status = match reason {
                    ReassocReject::UnknownDevice => AckStatus::UnknownDevice,
                    ReassocReject::UnknownVersion => AckStatus::VersionRejected,
                    ReassocReject::MacMismatch => AckStatus::BadRequest,
                };
                (Self::ack(status), HubEvent::ReassocRejected { reason })
            }
        }
    }

    fn on_boot_ticket_req(
        &mut self,
        conn: u64,
        header: &wire::MessageHeader,
        payload: &[u8],
        now: u64,
    ) -> (Vec<u8>, HubEvent) {
        if payload != BOOT_TICKET_PAYLOAD || !self.verify_session_signature(conn, header, payload) {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        }
        let session = self.sessions.get(&conn).expect("verified above").clone();
        let dev_uuid = session.dev_uuid.expect("session bound");
        let record = self.registry.get(&dev_uuid).expect("session bound");
        if record.policy == DevicePolicy::Revoked {
            let status = AckStatus::PolicyRefusal;
            return (Self::ack(status), HubEvent::TicketRefused { status });
        }
        if let Some((target, version)) = self.pending_update_for(record) {
            let entry = self.catalog.get(&(target, version)).expect("published");
            let offer = UpdateOfferPayload {
                target_tag: target.tag(),
                version,
                payload_digest: entry.digest,
                total_len: entry.payload.len() as u32,
                manifest_sig: entry.manifest_sig,
            };
            let frame = wire::encode_signed(
                MessageType::UpdateOffer,
                header.nonce,
                &offer.to_bytes(),
                &self.root,
            );
            return (frame, HubEvent::UpdateOffered { target, version });
        }
        if !session.attested {
            let status = AckStatus::MeasurementMismatch;
            return (Self::ack(status), HubEvent::TicketRefused { status });
        }
        // A clean, fully updated re-attestation completes forced recovery.
        if record.policy == DevicePolicy::ForceRecover {
            let record = self.registry.get_mut(&dev_uuid).expect("session bound");
            record.policy = DevicePolicy::Normal;
        }
        let record = self.registry.get_mut(&dev_uuid).expect("session bound");
        record.last_seen = now;
        (self.issue_boot_ticket_frame(header.nonce), HubEvent::BootTicketIssued)
    }

    fn on_deferral_req(
        &mut self,
        conn: u64,
        header: &wire::MessageHeader,
        payload: &[u8],
        now: u64,
    ) -> (Vec<u8>, HubEvent) {
        if payload.len() != 4 || !self.verify_session_signature(conn, header, payload) {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        }
        let requested = u32::from_le_bytes(payload.try_into().unwrap());
        let session = self.sessions.get(&conn).expect("verified above").clone();
        let dev_uuid = session.dev_uuid.expect("session bound");
        let record = self.registry.get_mut(&dev_uuid).expect("session bound");
        if record.policy != DevicePolicy::Normal || !session.attested {
            let status = AckStatus::PolicyRefusal;
            return (Self::ack(status), HubEvent::TicketRefused { status });
        }
        record.last_seen = now;
        let granted = requested.min(self.policy.deferral_ms).max(1);
        (
            self.issue_deferral_frame(header.nonce, granted),
            HubEvent::DeferralIssued {
                deferral_ms: granted,
            },
        )
    }

    fn on_chunk_req(
        &mut self,
        conn: u64,
        header: &wire::MessageHeader,
        payload: &[u8],
    ) -> (Vec<u8>, HubEvent) {
        let Some(req) = UpdateChunkReqPayload::from_bytes(payload) else {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        };
        if !self.verify_session_signature(conn, header, payload) {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        }
        let Some(target) = UpdateTarget::from_tag(req.target_tag) else {
            return (Self::ack(AckStatus::BadRequest), HubEvent::BadRequest);
        };
        let Some(entry) = self.catalog.get(&(target, req.version)) else {
            return (
                Self::ack(AckStatus::VersionRejected),
                HubEvent::TicketRefused {
                    status: AckStatus::VersionRejected,
                },
            );
        };
        let offset = req.offset.min(entry.payload.len() as u32);
        let len = req
            .max_len
            .min(UPDATE_CHUNK_LEN)
            .min(entry.payload.len() as u32 - offset);
        let resp = UpdateChunkRespPayload {
            offset,
            data: entry.payload[offset as usize..(offset + len) as usize].to_vec(),
        };
        let frame = wire::encode_signed(
            MessageType::UpdateChunk,
            header.nonce,
            &resp.to_bytes(),
            &self.root,
        );
        (frame, HubEvent::ChunkServed { offset, len })
    }

    /// Drops per-connection state (TCP demo closes connections; the
    /// simulation keeps one virtual connection per device per boot).
    pub fn close_session(&mut self, conn: u64) {
        self.sessions.remove(&conn);
    }

    // ---- persistence -----------------------------------------------------

    fn append_op(&self, line: &str) {
        if let Some(dir) = &self.persist_dir {
            if let Ok(mut f) = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("oplog.jsonl"))
            {
                let _ = writeln!(f, "{}", line);
            }
        }
    }

    fn write_snapshot(&self) {
        let Some(dir) = &self.persist_dir else {
            return;
        };
        #[derive(Serialize)]
        struct Row {
            dev_uuid: String,
            device_pub: String,
            static_sym: String,
            installed: BTreeMap<String, u32>,
            policy: DevicePolicy,
            last_seen: u64,
        }
        let rows: Vec<Row> = self
            .registry
            .values()
            .map(|r| Row {
                dev_uuid: hex::encode(r.dev_uuid.0),
                device_pub: hex::encode(r.device_pub.0),
                static_sym: hex::encode(r.static_sym.0),
                installed: r
                    .installed
                    .iter()
                    .map(|(k, v)| (format!("{:?}", k), *v))
                    .collect(),
                policy: r.policy,
                last_seen: r.last_seen,
            })
            .collect();
        if let Ok(json) = serde_json::to_string_pretty(&rows) {
            let _ = std::fs::write(dir.join("registry.json"), json);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{build_enrollment_blob, derive_cdi_prime, derive_static_sym, sign};
    use crate::wire::{decode, decode_ack, HEADER_LEN};

    struct FakeDevice {
        uds: Key256,
        dev_uuid: DevUuid,
        core: Vec<u8>,
        bl: Vec<u8>,
    }

    impl FakeDevice {
        fn new(id: u8) -> Self {
            FakeDevice {
                uds: Key256([id; 32]),
                dev_uuid: DevUuid([id ^ 0x5A; 16]),
                core: vec![id; 700],
                bl: vec![id ^ 0xFF; 900],
            }
        }

        fn static_sym(&self) -> Key256 {
            derive_static_sym(&self.uds, &self.dev_uuid)
        }

        fn cdi_prime(&self) -> Key256 {
            let cdi = crate::crypto::derive_cdi(&self.uds, &sha256(b"dicepp"));
            derive_cdi_prime(cdi, &self.core)
        }

        fn device_pair(&self) -> SigningKeyPair {
            derive_keypair(&self.cdi_prime(), crate::crypto::DEVICE_ID_LABEL)
        }

        fn alias_pair(&self) -> SigningKeyPair {
            let seed = crate::crypto::derive_alias_seed(&self.cdi_prime(), &sha256(&self.bl));
            derive_keypair(&seed, crate::crypto::ALIAS_ID_LABEL)
        }

        fn alias_cert(&self) -> Certificate {
            Certificate::issue(
                &self.device_pair(),
                self.alias_pair().public_bytes(),
                CertRole::Alias,
                sha256(&self.bl),
                1,
                None,
            )
        }
    }

    fn hub_with_device(dev: &FakeDevice) -> Hub {
        let mut hub = Hub::new(&Key256([0xE0; 32]), &Key256([0xE1; 32]));
        hub.register_initial_image(UpdateTarget::LazarusCore, 1, dev.core.clone());
        hub.register_initial_image(UpdateTarget::BusinessLogic, 1, dev.bl.clone());
        hub.enroll(
            dev.dev_uuid,
            dev.static_sym(),
            dev.device_pair().public_bytes(),
            sha256(&dev.core),
            1,
        )
        .unwrap();
        hub
    }

    fn send_alias(hub: &mut Hub, dev: &FakeDevice, conn: u64) -> AckStatus {
        let payload = AliasIdPayload {
            dev_uuid: dev.dev_uuid,
            bl_version: 1,
            device_pub: dev.device_pair().public_bytes(),
            alias_cert: dev.alias_cert(),
        }
        .to_bytes();
        let frame = wire::encode_signed(MessageType::SendAliasId, [7; 32], &payload, &dev.alias_pair());
        let (resp, _ev) = hub.handle_frame(conn, &frame, 100);
        decode_ack(&resp).unwrap()
    }

    #[test]
    fn enroll_creates_record_and_verifiable_cert() {
        let dev = FakeDevice::new(1);
        let hub = hub_with_device(&dev);
        let record = hub.record(&dev.dev_uuid).unwrap();
        assert!(record.device_cert.verify(&hub.root_pub()));
        assert_eq!(record.device_pub, dev.device_pair().public_bytes());
    }

    #[test]
    fn duplicate_enrollment_rejected() {
        let dev = FakeDevice::new(2);
        let mut hub = hub_with_device(&dev);
        let err = hub
            .enroll(
                dev.dev_uuid,
                dev.static_sym(),
                dev.device_pair().public_bytes(),
                sha256(&dev.core),
                1,
            )
            .unwrap_err();
        assert_eq!(err, HubError::DuplicateDevice);
    }

    #[test]
    fn online_enrollment_reaches_same_end_state() {
        let dev = FakeDevice::new(3);
        let mut hub = Hub::new(&Key256([0xE0; 32]), &Key256([0xE1; 32]));
        hub.register_initial_image(UpdateTarget::LazarusCore, 1, dev.core.clone());
        hub.register_initial_image(UpdateTarget::BusinessLogic, 1, dev.bl.clone());
        let blob = build_enrollment_blob(
            &dev.dev_uuid,
            &dev.static_sym(),
            &hub.root_pub(),
            &dev.device_pair(),
            &Key256([0x21; 32]),
            [6; 12],
        )
        .unwrap();
        hub.enroll_online(&blob, dev.device_pair().public_bytes(), sha256(&dev.core), 1)
            .unwrap();
        let record = hub.record(&dev.dev_uuid).unwrap();
        assert_eq!(record.device_pub, dev.device_pair().public_bytes());
    }

    #[test]
    fn publish_rejects_non_monotonic_and_immutable_targets() {
        let dev = FakeDevice::new(4);
        let mut hub = hub_with_device(&dev);
        assert!(hub
            .publish_update(UpdateTarget::BusinessLogic, 2, vec![1; 600])
            .is_ok());
        assert_eq!(
            hub.publish_update(UpdateTarget::BusinessLogic, 2, vec![2; 600]),
            Err(HubError::NonMonotonicVersion)
        );
        assert_eq!(
            hub.publish_update(UpdateTarget::DicePlusPlus, 2, vec![2; 600]),
            Err(HubError::ImmutableTarget)
        );
    }

    #[test]
    fn reassoc_accepts_legitimate_claim_and_rotates_binding() {
        let dev = FakeDevice::new(5);
        let mut hub = hub_with_device(&dev);
        let core_v2 = vec![0x5E; 800];
        hub.publish_update(UpdateTarget::LazarusCore, 2, core_v2.clone())
            .unwrap();

        // Device side after applying the update.
        let cdi = crate::crypto::derive_cdi(&dev.uds, &sha256(b"dicepp"));
        let cdi_prime_v2 = derive_cdi_prime(cdi, &core_v2);
        let new_pair = derive_keypair(&cdi_prime_v2, crate::crypto::DEVICE_ID_LABEL);
        let core_auth_v2 = derive_core_auth(&dev.static_sym(), &core_v2, &dev.dev_uuid);
        let token = derive_dev_auth(&core_auth_v2, &new_pair.public_bytes(), &dev.dev_uuid, 2);

        let claim = ReassocClaimPayload {
            dev_uuid: dev.dev_uuid,
            version: 2,
            device_pub: new_pair.public_bytes(),
            dev_auth_mac: token.mac,
        };
        hub.handle_reassoc(&claim, 50).unwrap();
        let record = hub.record(&dev.dev_uuid).unwrap();
        assert_eq!(record.device_pub, new_pair.public_bytes());
        assert_eq!(record.installed[&UpdateTarget::LazarusCore], 2);
        assert!(record.device_cert.verify(&hub.root_pub()));
    }

    #[test]
    fn reassoc_rejects_stale_version_unknown_version_and_bad_mac() {
        let dev = FakeDevice::new(6);
        let mut hub = hub_with_device(&dev);
        let core_v2 = vec![0x5E; 800];
        hub.publish_update(UpdateTarget::LazarusCore, 2, core_v2.clone())
            .unwrap();

        // dev_auth computed for version 1 presented as version 2.
        let core_auth_v1 = derive_core_auth(&dev.static_sym(), &dev.core, &dev.dev_uuid);
        let stale = derive_dev_auth(
            &core_auth_v1,
            &dev.device_pair().public_bytes(),
            &dev.dev_uuid,
            1,
        );
        let claim = ReassocClaimPayload {
            dev_uuid: dev.dev_uuid,
            version: 2,
            device_pub: dev.device_pair().public_bytes(),
            dev_auth_mac: stale.mac,
        };
        assert_eq!(hub.handle_reassoc(&claim, 0), Err(ReassocReject::MacMismatch));

        let claim_unknown_version = ReassocClaimPayload {
            version: 9,
            ..claim
        };
        assert_eq!(
            hub.handle_reassoc(&claim_unknown_version, 0),
            Err(ReassocReject::UnknownVersion)
        );

        let claim_unknown_device = ReassocClaimPayload {
            dev_uuid: DevUuid([0xEE; 16]),
            ..claim
        };
        assert_eq!(
            hub.handle_reassoc(&claim_unknown_device, 0),
            Err(ReassocReject::UnknownDevice)
        );
    }

    #[test]
    fn session_flow_issues_tickets_with_exact_sizes() {
        let dev = FakeDevice::new(7);
        let mut hub = hub_with_device(&dev);
        assert_eq!(send_alias(&mut hub, &dev, 1), AckStatus::Ok);

        let nonce = [0x44; 32];
        let req = wire::encode_signed(
            MessageType::BootTicketReq,
            nonce,
            &BOOT_TICKET_PAYLOAD,
            &dev.alias_pair(),
        );
        assert_eq!(req.len(), 144);
        let (resp, ev) = hub.handle_frame(1, &req, 5);
        assert_eq!(ev, HubEvent::BootTicketIssued);
        assert_eq!(resp.len(), 144);
        let (header, payload) = decode(&resp, &hub.root_pub()).unwrap();
        assert_eq!(header.msg_type, MessageType::BootTicketResp);
        assert_eq!(header.nonce, nonce);
        assert_eq!(payload, BOOT_TICKET_PAYLOAD);

        let dreq = wire::encode_signed(
            MessageType::DeferralReq,
            [0x45; 32],
            &600_000u32.to_le_bytes(),
            &dev.alias_pair(),
        );
        assert_eq!(dreq.len(), 144);
        let (dresp, ev) = hub.handle_frame(1, &dreq, 6);
        assert!(matches!(ev, HubEvent::DeferralIssued { deferral_ms: 600_000 }));
        assert_eq!(dresp.len(), 144);
        assert_eq!(dreq.len() + dresp.len(), 288);
    }

    #[test]
    fn ticket_requests_without_session_are_rejected() {
        let dev = FakeDevice::new(8);
        let mut hub = hub_with_device(&dev);
        let req = wire::encode_signed(
            MessageType::BootTicketReq,
            [1; 32],
            &BOOT_TICKET_PAYLOAD,
            &dev.alias_pair(),
        );
        let (resp, _) = hub.handle_frame(9, &req, 0);
        assert_eq!(decode_ack(&resp).unwrap(), AckStatus::BadRequest);
    }

    #[test]
    fn measurement_mismatch_refuses_and_funnels_to_update() {
        let mut dev = FakeDevice::new(9);
        let mut hub = hub_with_device(&dev);
        // Malware modified the firmware: the alias cert now carries a
        // different measurement.
        dev.bl[7] ^= 0x80;
        assert_eq!(send_alias(&mut hub, &dev, 1), AckStatus::MeasurementMismatch);

        // Without auto-patching there is no pending update, so the ticket
        // request is refused outright.
        let req = wire::encode_signed(
            MessageType::BootTicketReq,
            [2; 32],
            &BOOT_TICKET_PAYLOAD,
            &dev.alias_pair(),
        );
        let (resp, _) = hub.handle_frame(1, &req, 0);
        assert_eq!(decode_ack(&resp).unwrap(), AckStatus::MeasurementMismatch);

        // With auto-patching, the hub publishes a clean image and offers it.
        hub.policy.auto_patch_on_mismatch = true;
        assert_eq!(send_alias(&mut hub, &dev, 2), AckStatus::MeasurementMismatch);
        let req = wire::encode_signed(
            MessageType::BootTicketReq,
            [3; 32],
            &BOOT_TICKET_PAYLOAD,
            &dev.alias_pair(),
        );
        let (resp, ev) = hub.handle_frame(2, &req, 0);
        assert!(matches!(
            ev,
            HubEvent::UpdateOffered {
                target: UpdateTarget::BusinessLogic,
                version: 2
            }
        ));
        let (header, _) = decode(&resp, &hub.root_pub()).unwrap();
        assert_eq!(header.msg_type, MessageType::UpdateOffer);
    }

    #[test]
    fn force_recover_refuses_deferrals_until_clean_reattestation() {
        let dev = FakeDevice::new(10);
        let mut hub = hub_with_device(&dev);
        assert_eq!(send_alias(&mut hub, &dev, 1), AckStatus::Ok);
        hub.set_policy(&dev.dev_uuid, DevicePolicy::ForceRecover).unwrap();

        let dreq = wire::encode_signed(
            MessageType::DeferralReq,
            [5; 32],
            &600_000u32.to_le_bytes(),
            &dev.alias_pair(),
        );
        let (resp, _) = hub.handle_frame(1, &dreq, 0);
        assert_eq!(decode_ack(&resp).unwrap(), AckStatus::PolicyRefusal);

        // After the forced reset the device re-attests; a clean boot-ticket
        // request completes recovery and clears the flag.
        assert_eq!(send_alias(&mut hub, &dev, 1), AckStatus::Ok);
        let req = wire::encode_signed(
            MessageType::BootTicketReq,
            [6; 32],
            &BOOT_TICKET_PAYLOAD,
            &dev.alias_pair(),
        );
        let (resp, ev) = hub.handle_frame(1, &req, 0);
        assert_eq!(ev, HubEvent::BootTicketIssued);
        assert_eq!(resp.len(), 144);
        assert_eq!(
            hub.record(&dev.dev_uuid).unwrap().policy,
            DevicePolicy::Normal
        );
    }

    #[test]
    fn revoked_devices_get_nothing() {
        let dev = FakeDevice::new(11);
        let mut hub = hub_with_device(&dev);
        hub.set_policy(&dev.dev_uuid, DevicePolicy::Revoked).unwrap();
        assert_eq!(send_alias(&mut hub, &dev, 1), AckStatus::PolicyRefusal);
    }

    #[test]
    fn update_chunks_stream_the_published_payload() {
        let dev = FakeDevice::new(12);
        let mut hub = hub_with_device(&dev);
        let payload: Vec<u8> = (0..3_000u32).map(|i| (i % 251) as u8).collect();
        hub.publish_update(UpdateTarget::BusinessLogic, 2, payload.clone())
            .unwrap();
        assert_eq!(send_alias(&mut hub, &dev, 1), AckStatus::Ok);

        let mut got = Vec::new();
        while (got.len() as u32) < payload.len() as u32 {
            let req = UpdateChunkReqPayload {
                target_tag: UpdateTarget::BusinessLogic.tag(),
                version: 2,
                offset: got.len() as u32,
                max_len: UPDATE_CHUNK_LEN,
            };
            let frame = wire::encode_signed(
                MessageType::UpdateChunk,
                [9; 32],
                &req.to_bytes(),
                &dev.alias_pair(),
            );
            let (resp, _) = hub.handle_frame(1, &frame, 0);
            let (header, body) = decode(&resp, &hub.root_pub()).unwrap();
            assert_eq!(header.msg_type, MessageType::UpdateChunk);
            let chunk = UpdateChunkRespPayload::from_bytes(&body).unwrap();
            assert_eq!(chunk.offset as usize, got.len());
            got.extend_from_slice(&chunk.data);
        }
        assert_eq!(got, payload);
    }

    #[test]
    fn alias_send_fits_the_size_budget() {
        let dev = FakeDevice::new(13);
        let payload = AliasIdPayload {
            dev_uuid: dev.dev_uuid,
            bl_version: 1,
            device_pub: dev.device_pair().public_bytes(),
            alias_cert: dev.alias_cert(),
        }
        .to_bytes();
        let frame = wire::encode_signed(MessageType::SendAliasId, [7; 32], &payload, &dev.alias_pair());
        assert!(frame.len() <= 1_001, "alias send is {} bytes", frame.len());
        assert!(frame.len() > HEADER_LEN);
    }

    #[test]
    fn registry_rotation_only_through_accepted_reassoc() {
        let dev = FakeDevice::new(14);
        let mut hub = hub_with_device(&dev);
        let before = hub.record(&dev.dev_uuid).unwrap().device_pub;

        // A failed claim leaves the binding untouched.
        let claim = ReassocClaimPayload {
            dev_uuid: dev.dev_uuid,
            version: 1,
            device_pub: derive_keypair(&Key256([0x77; 32]), b"imposter").public_bytes(),
            dev_auth_mac: [0xAB; 32],
        };
        assert!(hub.handle_reassoc(&claim, 0).is_err());
        assert_eq!(hub.record(&dev.dev_uuid).unwrap().device_pub, before);
    }

    #[test]
    fn persistence_writes_snapshot_and_oplog() {
        let dir = tempfile::tempdir().unwrap();
        let dev = FakeDevice::new(15);
        let mut hub = Hub::new(&Key256([0xE0; 32]), &Key256([0xE1; 32]))
            .with_persistence(dir.path().to_path_buf())
            .unwrap();
        hub.register_initial_image(UpdateTarget::LazarusCore, 1, dev.core.clone());
        hub.enroll(
            dev.dev_uuid,
            dev.static_sym(),
            dev.device_pair().public_bytes(),
            sha256(&dev.core),
            1,
        )
        .unwrap();
        hub.publish_update(UpdateTarget::BusinessLogic, 1, vec![3; 100])
            .unwrap();

        let snapshot = std::fs::read_to_string(dir.path().join("registry.json")).unwrap();
        assert!(snapshot.contains(&hex::encode(dev.dev_uuid.0)));
        let oplog = std::fs::read_to_string(dir.path().join("oplog.jsonl")).unwrap();
        assert_eq!(oplog.lines().count(), 2);
        assert!(oplog.lines().next().unwrap().contains("enroll"));
    }

    #[test]
    fn request_signed_by_wrong_alias_is_rejected() {
        let dev = FakeDevice::new(16);
        let mut hub = hub_with_device(&dev);
        assert_eq!(send_alias(&mut hub, &dev, 1), AckStatus::Ok);
        let intruder = derive_keypair(&Key256([0x3C; 32]), b"intruder");
        let req = wire::encode_signed(
            MessageType::DeferralReq,
            [5; 32],
            &1000u32.to_le_bytes(),
            &intruder,
        );
        let (resp, _) = hub.handle_frame(1, &req, 0);
        assert_eq!(decode_ack(&resp).unwrap(), AckStatus::BadRequest);
    }

    #[test]
    fn tampered_request_digest_is_rejected() {
        let dev = FakeDevice::new(17);
        let mut hub = hub_with_device(&dev);
        assert_eq!(send_alias(&mut hub, &dev, 1), AckStatus::Ok);
        let mut req = wire::encode_signed(
            MessageType::DeferralReq,
            [5; 32],
            &1000u32.to_le_bytes(),
            &dev.alias_pair(),
        );
        let last = req.len() - 1;
        req[last] ^= 1;
        let (resp, ev) = hub.handle_frame(1, &req, 0);
        assert_eq!(ev, HubEvent::BadRequest);
        assert_eq!(decode_ack(&resp).unwrap(), AckStatus::BadRequest);
    }

    #[test]
    fn unused_sign_helper_matches_wire_expectation() {
        // The ticket frames the hub emits verify as standalone tickets.
        let dev = FakeDevice::new(18);
        let hub = hub_with_device(&dev);
        let nonce = [0x31; 32];
        let frame = hub.issue_deferral_frame(nonce, 42_000);
        let (header, payload) = decode(&frame, &hub.root_pub()).unwrap();
        let ticket = crate::tee::DeferralTicket {
            nonce: header.nonce,
            deferral_ms: u32::from_le_bytes(payload[..4].try_into().unwrap()),
            signature: header.signature,
        };
        assert!(ticket.verify(&hub.root_pub()));
        let _ = sign(&dev.alias_pair(), b"x");
    }
}
