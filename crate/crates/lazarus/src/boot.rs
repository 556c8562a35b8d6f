//! Trusted boot sequence: ROM DICE, the DICE++ layer, Lazarus Core (staged
//! update check, boot-ticket check, identity derivation, TEE configuration,
//! untrusted handoff) and the Core Patcher.
//!
//! The chain runs to completion before any untrusted step executes. Identity
//! secrets live only in locals of these functions; everything handed to the
//! untrusted world goes through the RAM mailbox.

use crate::crypto::{
    self, derive_alias_seed, derive_cdi, derive_cdi_prime, derive_core_auth, derive_dev_auth,
    derive_keypair, derive_static_sym, sha256, verify, CertRole, Certificate, DevAuthToken,
    DevUuid, Digest256, Key256, PublicKeyBytes, SigningKeyPair, ALIAS_ID_LABEL, DEVICE_ID_LABEL,
};
use crate::mcu::{
    AddrRange, BootStage, FaultKind, LatchKind, McuState, PageRange, ResetCause, World, PAGE_SIZE,
};
use crate::tee::{FlashWritePolicy, TeeRuntime};
use crate::wire::{signing_bytes, MessageType, BOOT_TICKET_PAYLOAD};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroize;

const META_MAGIC: u32 = 0x4C5A_4D30; // "LZM0"
const IDENTITY_MAGIC: u32 = 0x4C5A_4930; // "LZI0"
const NONCE_MAGIC: u32 = 0x4C5A_4E30; // "LZN0"
const PROVISION_MAGIC: u32 = 0x4C5A_5030; // "LZP0"

const STAGED_TICKET_TAG: u8 = 0x01;
const STAGED_UPDATE_TAG: u8 = 0x02;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BootHalt {
    #[error("device is not provisioned")]
    Unprovisioned,
    #[error("metadata page is corrupt")]
    MetaCorrupt,
    #[error("latch configuration failed: {0}")]
    LatchConfig(FaultKind),
    #[error("flash operation failed during boot: {0}")]
    Flash(FaultKind),
    #[error("update application failed after retry")]
    ApplyFailed,
}

/// Software layers addressable by updates.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum UpdateTarget {
    DicePlusPlus,
    LazarusCore,
    Downloader,
    BusinessLogic,
}

impl UpdateTarget {
    pub fn tag(self) -> u8 {
        match self {
            UpdateTarget::DicePlusPlus => 0,
            UpdateTarget::LazarusCore => 1,
            UpdateTarget::Downloader => 2,
            UpdateTarget::BusinessLogic => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => UpdateTarget::DicePlusPlus,
            1 => UpdateTarget::LazarusCore,
            2 => UpdateTarget::Downloader,
            3 => UpdateTarget::BusinessLogic,
            _ => return None,
        })
    }
}

/// Installed version and binary length per layer, persisted in the meta page.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct LayerMeta {
    pub version: u32,
    pub len: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DeviceMeta {
    pub dicepp: LayerMeta,
    pub lz_core: LayerMeta,
    pub downloader: LayerMeta,
    pub business_logic: LayerMeta,
}

impl DeviceMeta {
    pub fn layer(&self, target: UpdateTarget) -> LayerMeta {
        match target {
            UpdateTarget::DicePlusPlus => self.dicepp,
            UpdateTarget::LazarusCore => self.lz_core,
            UpdateTarget::Downloader => self.downloader,
            UpdateTarget::BusinessLogic => self.business_logic,
        }
    }

    pub fn layer_mut(&mut self, target: UpdateTarget) -> &mut LayerMeta {
        match target {
            UpdateTarget::DicePlusPlus => &mut self.dicepp,
            UpdateTarget::LazarusCore => &mut self.lz_core,
            UpdateTarget::Downloader => &mut self.downloader,
            UpdateTarget::BusinessLogic => &mut self.business_logic,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * 4);
        out.extend_from_slice(&META_MAGIC.to_le_bytes());
        for layer in [self.dicepp, self.lz_core, self.downloader, self.business_logic] {
            out.extend_from_slice(&layer.version.to_le_bytes());
            out.extend_from_slice(&layer.len.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 4 + 32 {
            return None;
        }
        if u32::from_le_bytes(bytes[..4].try_into().unwrap()) != META_MAGIC {
            return None;
        }
        let mut layers = [LayerMeta { version: 0, len: 0 }; 4];
        for (i, layer) in layers.iter_mut().enumerate() {
            let off = 4 + i * 8;
            layer.version = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            layer.len = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
        }
        Some(DeviceMeta {
            dicepp: layers[0],
            lz_core: layers[1],
            downloader: layers[2],
            business_logic: layers[3],
        })
    }
}

/// Hub-signed update candidate.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct UpdateManifest {
    pub target: UpdateTarget,
    pub version: u32,
    pub payload_digest: Digest256,
    pub payload: Vec<u8>,
    pub signature: [u8; 64],
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateInvalid {
    Signature,
    Digest,
    Version,
    Target,
}

impl UpdateManifest {
    pub fn signed_fields(target: UpdateTarget, version: u32, digest: &Digest256) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 4 + 32);
        out.push(target.tag());
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&digest.0);
        out
    }

    pub fn build(target: UpdateTarget, version: u32, payload: Vec<u8>, signer: &SigningKeyPair) -> Self {
        let payload_digest = sha256(&payload);
        let signature = crypto::sign(
            signer,
            &Self::signed_fields(target, version, &payload_digest),
        );
        UpdateManifest {
            target,
            version,
            payload_digest,
            payload,
            signature,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 4 + 32 + 64 + 4 + self.payload.len());
        out.push(self.target.tag());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.payload_digest.0);
        out.extend_from_slice(&self.signature);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let fixed = 1 + 4 + 32 + 64 + 4;
        if bytes.len() < fixed {
            return None;
        }
        let target = UpdateTarget::from_tag(bytes[0])?;
        let version = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&bytes[5..37]);
        let mut signature = [0u8; 64];
        signature.copy_from_slice(&bytes[37..101]);
        let payload_len = u32::from_le_bytes(bytes[101..105].try_into().unwrap()) as usize;
        if bytes.len() != fixed + payload_len {
            return None;
        }
        Some(UpdateManifest {
            target,
            version,
            payload_digest: Digest256(digest),
            payload: bytes[fixed..].to_vec(),
            signature,
        })
    }
}

/// Valid iff the signature verifies, the digest matches the payload, the
/// version is strictly newer than the installed one, and the target layer is
/// actually updatable (DICE++ is immutable).
pub fn verify_update(
    manifest: &UpdateManifest,
    code_sign_pub: &PublicKeyBytes,
    meta: &DeviceMeta,
) -> Result<(), UpdateInvalid> {
    let fields =
        UpdateManifest::signed_fields(manifest.target, manifest.version, &manifest.payload_digest);
    if !verify(code_sign_pub, &fields, &manifest.signature) {
        return Err(UpdateInvalid::Signature);
    }
    if sha256(&manifest.payload) != manifest.payload_digest {
        return Err(UpdateInvalid::Digest);
    }
    if manifest.version <= meta.layer(manifest.target).version {
        return Err(UpdateInvalid::Version);
    }
    if manifest.target == UpdateTarget::DicePlusPlus {
        return Err(UpdateInvalid::Target);
    }
    Ok(())
}

/// One-time accreditation of the hub to boot into business logic.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BootTicket {
    pub nonce: [u8; 32],
    pub payload: [u8; 4],
    pub signature: [u8; 64],
}

impl BootTicket {
    pub fn verify(&self, hub_pub: &PublicKeyBytes) -> bool {
        self.payload == BOOT_TICKET_PAYLOAD
            && verify(
                hub_pub,
                &signing_bytes(MessageType::BootTicketResp, &self.nonce, &self.payload),
                &self.signature,
            )
    }

    fn to_bytes(self) -> [u8; 100] {
        let mut out = [0u8; 100];
        out[..32].copy_from_slice(&self.nonce);
        out[32..36].copy_from_slice(&self.payload);
        out[36..].copy_from_slice(&self.signature);
        out
    }

    fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 100 {
            return None;
        }
        let mut nonce = [0u8; 32];
        nonce.copy_from_slice(&bytes[..32]);
        let mut payload = [0u8; 4];
        payload.copy_from_slice(&bytes[32..36]);
        let mut signature = [0u8; 64];
        signature.copy_from_slice(&bytes[36..]);
        Some(BootTicket {
            nonce,
            payload,
            signature,
        })
    }
}

/// What the staging area currently holds.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum StagedRecord {
    Ticket(BootTicket),
    Update(UpdateManifest),
}

/// Serializes a staging record (tag, length, value) ready to be written at
/// the start of the staging area.
pub fn staged_record_bytes(record: &StagedRecord) -> Vec<u8> {
    let (tag, value) = match record {
        StagedRecord::Ticket(t) => (STAGED_TICKET_TAG, t.to_bytes().to_vec()),
        StagedRecord::Update(m) => (STAGED_UPDATE_TAG, m.to_bytes()),
    };
    let mut out = Vec::with_capacity(5 + value.len());
    out.push(tag);
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(&value);
    out
}

/// Defensive parse of the staging area. Anything malformed reads as absent.
pub fn parse_staging(bytes: &[u8]) -> Option<StagedRecord> {
    if bytes.len() < 5 {
        return None;
    }
    let tag = bytes[0];
    let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    if len > bytes.len() - 5 {
        return None;
    }
    let value = &bytes[5..5 + len];
    match tag {
        STAGED_TICKET_TAG => BootTicket::from_bytes(value).map(StagedRecord::Ticket),
        STAGED_UPDATE_TAG => UpdateManifest::from_bytes(value).map(StagedRecord::Update),
        _ => None,
    }
}

/// Provisioned device configuration, written next to the trust anchors.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub awdt_total_ticks: u64,
    pub hw_timeout_ticks: u64,
    pub warn_margin_ticks: u64,
    pub max_writes_per_window: u32,
    pub window_ticks: u64,
    pub allow_ns_awdt_init: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            awdt_total_ticks: 600_000,
            hw_timeout_ticks: 60_000,
            warn_margin_ticks: 60_000 / 16,
            max_writes_per_window: 64,
            window_ticks: 60_000,
            allow_ns_awdt_init: false,
        }
    }
}

/// Trust anchors and device certificate stored in the provision page.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ProvisionedTrust {
    pub hub_root_pub: PublicKeyBytes,
    pub code_sign_pub: PublicKeyBytes,
    pub device_cert: Certificate,
    pub config: DeviceConfig,
}

impl ProvisionedTrust {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cert = self.device_cert.to_bytes();
        let mut out = Vec::with_capacity(4 + 64 + 64 + 4 + cert.len() + 37);
        out.extend_from_slice(&PROVISION_MAGIC.to_le_bytes());
        out.extend_from_slice(&self.hub_root_pub.0);
        out.extend_from_slice(&self.code_sign_pub.0);
        out.extend_from_slice(&(cert.len() as u32).to_le_bytes());
        out.extend_from_slice(&cert);
        out.extend_from_slice(&self.config.awdt_total_ticks.to_le_bytes());
        out.extend_from_slice(&self.config.hw_timeout_ticks.to_le_bytes());
        out.extend_from_slice(&self.config.warn_margin_ticks.to_le_bytes());
        out.extend_from_slice(&self.config.max_writes_per_window.to_le_bytes());
        out.extend_from_slice(&self.config.window_ticks.to_le_bytes());
        out.push(self.config.allow_ns_awdt_init as u8);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 4 + 64 + 64 + 4 {
            return None;
        }
        if u32::from_le_bytes(bytes[..4].try_into().unwrap()) != PROVISION_MAGIC {
            return None;
        }
        let mut hub = [0u8; 64];
        hub.copy_from_slice(&bytes[4..68]);
        let mut code = [0u8; 64];
        code.copy_from_slice(&bytes[68..132]);
        let cert_len = u32::from_le_bytes(bytes[132..136].try_into().unwrap()) as usize;
        if cert_len > Certificate::MAX_LEN || bytes.len() < 136 + cert_len + 37 {
            return None;
        }
        let device_cert = Certificate::from_bytes(&bytes[136..136 + cert_len])?;
        let c = 136 + cert_len;
        let config = DeviceConfig {
            awdt_total_ticks: u64::from_le_bytes(bytes[c..c + 8].try_into().unwrap()),
            hw_timeout_ticks: u64::from_le_bytes(bytes[c + 8..c + 16].try_into().unwrap()),
            warn_margin_ticks: u64::from_le_bytes(bytes[c + 16..c + 24].try_into().unwrap()),
            max_writes_per_window: u32::from_le_bytes(bytes[c + 24..c + 28].try_into().unwrap()),
            window_ticks: u64::from_le_bytes(bytes[c + 28..c + 36].try_into().unwrap()),
            allow_ns_awdt_init: bytes[c + 36] != 0,
        };
        Some(ProvisionedTrust {
            hub_root_pub: PublicKeyBytes(hub),
            code_sign_pub: PublicKeyBytes(code),
            device_cert,
            config,
        })
    }
}

/// What DICE++ hands to Lazarus Core.
pub struct DiceHandoff {
    pub cdi_prime: Key256,
    pub core_auth: Key256,
    pub dev_uuid: DevUuid,
    /// Exposed exactly once, on the device's first boot.
    pub static_sym_first_boot: Option<Key256>,
}

/// Everything the untrusted world receives at handoff.
#[derive(Clone, Debug)]
pub struct IdentityBundle {
    pub dev_uuid: DevUuid,
    pub core_version: u32,
    pub bl_version: u32,
    pub device_pub: PublicKeyBytes,
    pub device_cert: Certificate,
    pub alias_pair: SigningKeyPair,
    pub alias_cert: Certificate,
    pub dev_auth: DevAuthToken,
    pub bl_measurement: Digest256,
}

impl IdentityBundle {
    /// Serialization written to the non-secure RAM mailbox.
    pub fn to_mailbox_bytes(&self) -> Vec<u8> {
        let alias_cert = self.alias_cert.to_bytes();
        let device_cert = self.device_cert.to_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(&self.dev_uuid.0);
        out.extend_from_slice(&self.core_version.to_le_bytes());
        out.extend_from_slice(&self.bl_version.to_le_bytes());
        out.extend_from_slice(&self.device_pub.0);
        out.extend_from_slice(&self.dev_auth.mac);
        out.extend_from_slice(&self.dev_auth.version.to_le_bytes());
        out.extend_from_slice(&self.alias_pair.private_bytes());
        out.extend_from_slice(&self.alias_pair.public_bytes().0);
        out.extend_from_slice(&self.bl_measurement.0);
        out.extend_from_slice(&(alias_cert.len() as u32).to_le_bytes());
        out.extend_from_slice(&alias_cert);
        out.extend_from_slice(&(device_cert.len() as u32).to_le_bytes());
        out.extend_from_slice(&device_cert);
        out
    }

    pub fn from_mailbox_bytes(bytes: &[u8]) -> Option<Self> {
        let fixed = 16 + 4 + 4 + 64 + 32 + 4 + 32 + 64 + 32 + 4;
        if bytes.len() < fixed {
            return None;
        }
        let mut off = 0;
        let mut uuid = [0u8; 16];
        uuid.copy_from_slice(&bytes[off..off + 16]);
        off += 16;
        let core_version = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        let bl_version = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        let mut device_pub = [0u8; 64];
        device_pub.copy_from_slice(&bytes[off..off + 64]);
        off += 64;
        let mut mac = [0u8; 32];
        mac.copy_from_slice(&bytes[off..off + 32]);
        off += 32;
        let tok_version = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        let mut alias_priv = [0u8; 32];
        alias_priv.copy_from_slice(&bytes[off..off + 32]);
        off += 32;
        off += 64; // alias public key is implied by the private scalar
        let mut bl_meas = [0u8; 32];
        bl_meas.copy_from_slice(&bytes[off..off + 32]);
        off += 32;
        let alias_cert_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if bytes.len() < off + alias_cert_len + 4 {
            return None;
        }
        let alias_cert = Certificate::from_bytes(&bytes[off..off + alias_cert_len])?;
        off += alias_cert_len;
        let device_cert_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if bytes.len() < off + device_cert_len {
            return None;
        }
        let device_cert = Certificate::from_bytes(&bytes[off..off + device_cert_len])?;
        let alias_pair = SigningKeyPair::from_private_bytes(&alias_priv).ok()?;
        Some(IdentityBundle {
            dev_uuid: DevUuid(uuid),
            core_version,
            bl_version,
            device_pub: PublicKeyBytes(device_pub),
            device_cert,
            alias_pair,
            alias_cert,
            dev_auth: DevAuthToken {
                mac,
                version: tok_version,
            },
            bl_measurement: Digest256(bl_meas),
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootDecision {
    ApplyUpdateThenReset,
    RunDownloader,
    BootBusinessLogic,
}

/// Result of a complete trusted boot.
#[derive(Debug)]
pub struct BootOutcome {
    pub decision: BootDecision,
    /// Present for the two decisions that hand off to untrusted code.
    pub handoff: Option<UntrustedHandoff>,
}

#[derive(Debug)]
pub struct UntrustedHandoff {
    pub bundle: IdentityBundle,
    pub runtime: TeeRuntime,
}

/// Copies of this boot's secrets, kept by the harness to assert that none of
/// them survive in reachable device state after handoff.
#[derive(Default)]
pub struct SecretWitness {
    secrets: Vec<(&'static str, Vec<u8>)>,
}

impl SecretWitness {
    pub fn clear(&mut self) {
        self.secrets.clear();
    }

    pub fn record(&mut self, name: &'static str, bytes: &[u8]) {
        self.secrets.push((name, bytes.to_vec()));
    }

    /// Returns the name of the first recorded secret found in `haystack`.
    pub fn find_in(&self, haystack: &[u8]) -> Option<&'static str> {
        for (name, secret) in &self.secrets {
            if !secret.is_empty() && haystack.windows(secret.len()).any(|w| w == secret) {
                return Some(name);
            }
        }
        None
    }
}

fn read_page(mcu: &McuState, page: u32) -> &[u8] {
    mcu.flash_bytes(PageRange::new(page, 1).addr_range())
}

pub fn read_meta(mcu: &McuState) -> Option<DeviceMeta> {
    DeviceMeta::from_bytes(read_page(mcu, mcu.layout.regions.meta.first))
}

pub fn write_meta(mcu: &mut McuState, meta: &DeviceMeta) -> Result<(), FaultKind> {
    let page = mcu.layout.regions.meta.first;
    mcu.flash_program(page, &meta.to_bytes())
}

/// Stored boot nonce, regenerated by Lazarus Core on every boot that reaches
/// the ticket check.
pub fn read_boot_nonce(mcu: &McuState) -> Option<[u8; 32]> {
    let bytes = read_page(mcu, mcu.layout.regions.boot_nonce.first);
    if u32::from_le_bytes(bytes[..4].try_into().unwrap()) != NONCE_MAGIC {
        return None;
    }
    let mut nonce = [0u8; 32];
    nonce.copy_from_slice(&bytes[4..36]);
    Some(nonce)
}

fn write_boot_nonce(mcu: &mut McuState, nonce: &[u8; 32]) -> Result<(), FaultKind> {
    let mut bytes = Vec::with_capacity(36);
    bytes.extend_from_slice(&NONCE_MAGIC.to_le_bytes());
    bytes.extend_from_slice(nonce);
    let page = mcu.layout.regions.boot_nonce.first;
    mcu.flash_program(page, &bytes)
}

struct IdentityRecord {
    first_boot: bool,
    dev_uuid: DevUuid,
}

fn read_identity_record(mcu: &McuState) -> Option<IdentityRecord> {
    let bytes = read_page(mcu, mcu.layout.identity_page());
    if u32::from_le_bytes(bytes[..4].try_into().unwrap()) != IDENTITY_MAGIC {
        return None;
    }
    let mut uuid = [0u8; 16];
    uuid.copy_from_slice(&bytes[5..21]);
    Some(IdentityRecord {
        first_boot: bytes[4] != 0,
        dev_uuid: DevUuid(uuid),
    })
}

fn write_identity_record(mcu: &mut McuState, record: &IdentityRecord) -> Result<(), FaultKind> {
    let mut bytes = Vec::with_capacity(21);
    bytes.extend_from_slice(&IDENTITY_MAGIC.to_le_bytes());
    bytes.push(record.first_boot as u8);
    bytes.extend_from_slice(&record.dev_uuid.0);
    let page = mcu.layout.identity_page();
    mcu.flash_program(page, &bytes)
}

/// Installs an initial identity record with the first-boot flag set; part of
/// device manufacturing, not of the boot chain.
pub fn install_blank_identity(mcu: &mut McuState) -> Result<(), FaultKind> {
    write_identity_record(
        mcu,
        &IdentityRecord {
            first_boot: true,
            dev_uuid: DevUuid([0; 16]),
        },
    )
}

pub fn read_provisioned_trust(mcu: &McuState) -> Option<ProvisionedTrust> {
    let region = mcu.layout.regions.provision;
    ProvisionedTrust::from_bytes(mcu.flash_bytes(region.addr_range()))
}

pub fn write_provisioned_trust(mcu: &mut McuState, trust: &ProvisionedTrust) -> Result<(), FaultKind> {
    let region = mcu.layout.regions.provision;
    mcu.write_region(region, &trust.to_bytes())
}

/// Measurement of a layer: SHA-256 over the installed binary bytes.
pub fn measure_layer(mcu: &McuState, region: PageRange, len: u32) -> Digest256 {
    let len = (len as usize).min(region.byte_len());
    let range = region.addr_range();
    sha256(&mcu.flash_bytes(AddrRange::new(range.start, range.start + len as u32))[..len])
}

/// ROM DICE: measure the first mutable layer and derive the CDI from it and
/// the UDS. Runs from the simulated ROM immediately after reset.
pub fn rom_dice(mcu: &mut McuState) -> Result<Key256, BootHalt> {
    debug_assert_eq!(mcu.boot_stage, BootStage::RomDice);
    let meta = read_meta(mcu).ok_or(BootHalt::MetaCorrupt)?;
    let measurement = measure_layer(mcu, mcu.layout.regions.dicepp, meta.dicepp.len);
    let uds = mcu.uds().map_err(BootHalt::Flash)?;
    let cdi = derive_cdi(&uds, &measurement);
    mcu.boot_stage = BootStage::DicePlusPlus;
    Ok(cdi)
}

/// DICE++: first-boot identity generation, per-boot derivation of CDI' and
/// core_auth, erasure of the CDI, and the read-write latch over its own
/// region (UDS included) before handing off to Lazarus Core.
pub fn dicepp_boot(mcu: &mut McuState, cdi: Key256) -> Result<DiceHandoff, BootHalt> {
    debug_assert_eq!(mcu.boot_stage, BootStage::DicePlusPlus);
    let meta = read_meta(mcu).ok_or(BootHalt::MetaCorrupt)?;
    let record = read_identity_record(mcu).ok_or(BootHalt::Unprovisioned)?;

    let (dev_uuid, first_boot) = if record.first_boot {
        let draw = mcu.entropy_next();
        let mut uuid = [0u8; 16];
        uuid.copy_from_slice(&draw[..16]);
        let uuid = DevUuid(uuid);
        write_identity_record(
            mcu,
            &IdentityRecord {
                first_boot: false,
                dev_uuid: uuid,
            },
        )
        .map_err(BootHalt::Flash)?;
        (uuid, true)
    } else {
        (record.dev_uuid, false)
    };

    let uds = mcu.uds().map_err(BootHalt::Flash)?;
    let mut static_sym = derive_static_sym(&uds, &dev_uuid);

    let core_region = mcu.layout.regions.lz_core;
    let core_bytes =
        mcu.flash_bytes(core_region.addr_range())[..meta.lz_core.len as usize].to_vec();
    let core_auth = derive_core_auth(&static_sym, &core_bytes, &dev_uuid);
    let cdi_prime = derive_cdi_prime(cdi, &core_bytes);

    let static_sym_first_boot = if first_boot {
        Some(static_sym.clone())
    } else {
        None
    };
    static_sym.zeroize();

    // Latch this layer: the DICE++ region (dev_uuid storage included) becomes
    // unreadable and unwritable, and the UDS goes away until the next reset.
    mcu.lock_latch(mcu.layout.regions.dicepp.addr_range(), LatchKind::RwLatch)
        .map_err(BootHalt::LatchConfig)?;
    mcu.latch_uds();
    mcu.boot_stage = BootStage::LzCore;

    Ok(DiceHandoff {
        cdi_prime,
        core_auth,
        dev_uuid,
        static_sym_first_boot,
    })
}

/// Derives the per-boot identity key material and certificates.
///
/// The DeviceID private key signs the AliasID certificate and is dropped
/// before this function returns; only the AliasID pair and the certificates
/// reach the caller.
pub fn make_identity_bundle(
    cdi_prime: &Key256,
    core_auth: &Key256,
    dev_uuid: DevUuid,
    core_measurement: Digest256,
    fw_measurement: Digest256,
    core_version: u32,
    bl_version: u32,
) -> IdentityBundle {
    let device_pair = derive_keypair(cdi_prime, DEVICE_ID_LABEL);
    let mut alias_seed = derive_alias_seed(cdi_prime, &fw_measurement);
    let alias_pair = derive_keypair(&alias_seed, ALIAS_ID_LABEL);
    alias_seed.zeroize();

    let dev_auth = derive_dev_auth(core_auth, &device_pair.public_bytes(), &dev_uuid, core_version);

    // Self-signed DeviceID certificate carrying the identity token; the
    // hub-signed counterpart lives in the provision page and the registry.
    let device_cert = Certificate::issue(
        &device_pair,
        device_pair.public_bytes(),
        CertRole::Device,
        core_measurement,
        core_version,
        Some(dev_auth),
    );
    let alias_cert = Certificate::issue(
        &device_pair,
        alias_pair.public_bytes(),
        CertRole::Alias,
        fw_measurement,
        bl_version,
        None,
    );

    IdentityBundle {
        dev_uuid,
        core_version,
        bl_version,
        device_pub: device_pair.public_bytes(),
        device_cert,
        alias_pair,
        alias_cert,
        dev_auth,
        bl_measurement: fw_measurement,
    }
}

/// Erases the record at the head of the staging area.
fn erase_staging_record(mcu: &mut McuState) -> Result<(), FaultKind> {
    let page = mcu.layout.regions.staging.first;
    mcu.flash_program(page, &[])
}

/// Applies a verified Lazarus Core update and schedules the reset. Retries
/// the region write once on digest mismatch.
pub fn core_patcher_apply(mcu: &mut McuState, manifest: &UpdateManifest) -> Result<(), BootHalt> {
    apply_update(mcu, manifest)
}

fn apply_update(mcu: &mut McuState, manifest: &UpdateManifest) -> Result<(), BootHalt> {
    let region = match manifest.target {
        UpdateTarget::LazarusCore => mcu.layout.regions.lz_core,
        UpdateTarget::Downloader => mcu.layout.regions.downloader,
        UpdateTarget::BusinessLogic => mcu.layout.regions.business_logic,
        UpdateTarget::DicePlusPlus => return Err(BootHalt::ApplyFailed),
    };
    let mut attempts = 0;
    loop {
        attempts += 1;
        mcu.write_region(region, &manifest.payload)
            .map_err(BootHalt::Flash)?;
        let written = measure_layer(mcu, region, manifest.payload.len() as u32);
        if written == manifest.payload_digest {
            break;
        }
        if attempts >= 2 {
            return Err(BootHalt::ApplyFailed);
        }
    }
    let mut meta = read_meta(mcu).ok_or(BootHalt::MetaCorrupt)?;
    *meta.layer_mut(manifest.target) = LayerMeta {
        version: manifest.version,
        len: manifest.payload.len() as u32,
    };
    write_meta(mcu, &meta).map_err(BootHalt::Flash)?;
    erase_staging_record(mcu).map_err(BootHalt::Flash)?;
    mcu.request_reset(ResetCause::UpdateApplied);
    Ok(())
}

/// Lazarus Core: staged-update check, boot-ticket check, key derivation, TEE
/// configuration and handoff.
pub fn lz_core_boot(
    mcu: &mut McuState,
    dice: DiceHandoff,
    witness: &mut SecretWitness,
) -> Result<BootOutcome, BootHalt> {
    debug_assert_eq!(mcu.boot_stage, BootStage::LzCore);
    let meta = read_meta(mcu).ok_or(BootHalt::MetaCorrupt)?;
    let trust = read_provisioned_trust(mcu).ok_or(BootHalt::Unprovisioned)?;

    let DiceHandoff {
        mut cdi_prime,
        mut core_auth,
        dev_uuid,
        static_sym_first_boot,
    } = dice;
    witness.record("cdi_prime", cdi_prime.as_bytes());
    witness.record("core_auth", core_auth.as_bytes());
    if let Some(ss) = &static_sym_first_boot {
        witness.record("static_sym", ss.as_bytes());
    }

    // 1. Update path: a valid staged update is applied before anything else;
    //    the device resets and re-measures on the next boot.
    let staging_bytes = mcu
        .flash_bytes(mcu.layout.regions.staging.addr_range())
        .to_vec();
    let staged = parse_staging(&staging_bytes);
    if let Some(StagedRecord::Update(manifest)) = &staged {
        match verify_update(manifest, &trust.code_sign_pub, &meta) {
            Ok(()) => {
                cdi_prime.zeroize();
                core_auth.zeroize();
                // Only a Lazarus Core update routes through the Core Patcher;
                // the other layers are applied by Lazarus Core itself.
                if manifest.target == UpdateTarget::LazarusCore {
                    core_patcher_apply(mcu, manifest)?;
                } else {
                    apply_update(mcu, manifest)?;
                }
                return Ok(BootOutcome {
                    decision: BootDecision::ApplyUpdateThenReset,
                    handoff: None,
                });
            }
            Err(_) => {
                // Tampered or replayed update: discard and fall through to
                // the downloader path.
                erase_staging_record(mcu).map_err(BootHalt::Flash)?;
            }
        }
    }

    // 2. Ticket path.
    let stored_nonce = read_boot_nonce(mcu);
    let mut ticket_ok = false;
    if let Some(StagedRecord::Ticket(ticket)) = &staged {
        ticket_ok = match stored_nonce {
            Some(nonce) => ticket.verify(&trust.hub_root_pub) && ticket.nonce == nonce,
            None => false,
        };
        // Single use: the staged ticket is erased whether it verified or not.
        erase_staging_record(mcu).map_err(BootHalt::Flash)?;
    }

    // 3. Fresh boot nonce for the next epoch, stored before untrusted code
    //    gets a chance to run.
    let next_nonce = mcu.entropy_next();
    write_boot_nonce(mcu, &next_nonce).map_err(BootHalt::Flash)?;

    // 4. Identity derivation for this boot.
    let core_measurement = measure_layer(mcu, mcu.layout.regions.lz_core, meta.lz_core.len);
    let bl_measurement = measure_layer(
        mcu,
        mcu.layout.regions.business_logic,
        meta.business_logic.len,
    );
    let bundle = make_identity_bundle(
        &cdi_prime,
        &core_auth,
        dev_uuid,
        core_measurement,
        bl_measurement,
        meta.lz_core.version,
        meta.business_logic.version,
    );
    cdi_prime.zeroize();
    core_auth.zeroize();
    if let Some(mut ss) = static_sym_first_boot {
        ss.zeroize();
    }

    // 5. Latch everything untrusted code must not touch: core + patcher,
    //    downloader, metadata, provision data and the nonce page.
    let regions = mcu.layout.regions;
    for range in [
        AddrRange::new(
            regions.lz_core.addr_range().start,
            regions.core_patcher.addr_range().end,
        ),
        regions.downloader.addr_range(),
        regions.meta.addr_range(),
        regions.provision.addr_range(),
        regions.boot_nonce.addr_range(),
    ] {
        mcu.lock_latch(range, LatchKind::WrLatch)
            .map_err(BootHalt::LatchConfig)?;
    }

    // 6. TEE runtime: TEETrigger plus peripheral handler policy.
    let cfg = trust.config;
    let policy = FlashWritePolicy::new(
        vec![
            regions.staging.addr_range(),
            regions.business_logic.addr_range(),
            regions.untrusted_data.addr_range(),
        ],
        cfg.max_writes_per_window,
        cfg.window_ticks,
    );
    let mut runtime = TeeRuntime::new(
        trust.hub_root_pub,
        policy,
        cfg.warn_margin_ticks,
        cfg.allow_ns_awdt_init,
    );
    runtime
        .awdt_init(mcu, trust.hub_root_pub, cfg.awdt_total_ticks, cfg.hw_timeout_ticks)
        .map_err(BootHalt::LatchConfig)?;

    // 7. Identity bundle into the non-secure mailbox, then drop privileges.
    let mailbox = mcu.layout.mailbox_range();
    let bundle_bytes = bundle.to_mailbox_bytes();
    if bundle_bytes.len() <= mailbox.len() as usize {
        mcu.ram_write(mailbox.start, &bundle_bytes)
            .map_err(BootHalt::Flash)?;
    }
    mcu.boot_stage = BootStage::Untrusted;
    mcu.world = World::NonSecure;

    let decision = if ticket_ok {
        BootDecision::BootBusinessLogic
    } else {
        BootDecision::RunDownloader
    };
    Ok(BootOutcome {
        decision,
        handoff: Some(UntrustedHandoff { bundle, runtime }),
    })
}

/// Complete trusted boot from reset to handoff (or to a scheduled reset when
/// an update was applied).
pub fn boot_device(mcu: &mut McuState, witness: &mut SecretWitness) -> Result<BootOutcome, BootHalt> {
    witness.clear();
    let cdi = rom_dice(mcu)?;
    witness.record("cdi", cdi.as_bytes());
    let dice = dicepp_boot(mcu, cdi)?;
    lz_core_boot(mcu, dice, witness)
}

/// Material the provisioning environment captures from the first boot.
pub struct ProvisionMaterial {
    pub dev_uuid: DevUuid,
    pub static_sym: Key256,
    pub device_pair: SigningKeyPair,
    pub core_measurement: Digest256,
}

/// Runs the first-boot part of the chain in the provisioning environment and
/// reads out the enrollment material. The caller writes the provision page
/// and resets the device afterwards.
pub fn provisioning_first_boot(mcu: &mut McuState) -> Result<ProvisionMaterial, BootHalt> {
    let meta = read_meta(mcu).ok_or(BootHalt::MetaCorrupt)?;
    let cdi = rom_dice(mcu)?;
    let dice = dicepp_boot(mcu, cdi)?;
    let static_sym = dice
        .static_sym_first_boot
        .clone()
        .ok_or(BootHalt::Unprovisioned)?;
    let device_pair = derive_keypair(&dice.cdi_prime, DEVICE_ID_LABEL);
    let core_measurement = measure_layer(mcu, mcu.layout.regions.lz_core, meta.lz_core.len);
    Ok(ProvisionMaterial {
        dev_uuid: dice.dev_uuid,
        static_sym,
        device_pair,
        core_measurement,
    })
}
