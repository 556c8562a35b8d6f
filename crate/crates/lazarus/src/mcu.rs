//! Deterministic simulated microcontroller: flash with wear accounting, a
//! latch table, a windowed hardware watchdog with warn interrupt, a power
//! controller, a seeded entropy source, and secure/non-secure access
//! mediation.
//!
//! Time is a logical tick clock (1 tick = 1 ms of simulated time). The MCU
//! only advances through [`McuState::tick`]; everything else is synchronous.
//! Software layers are modeled as state machines driven by the simulation,
//! not as executed machine code.

use crate::crypto::Key256;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SIZE: usize = 512;
pub const FLASH_BASE: u32 = 0x0000_0000;
pub const RAM_BASE: u32 = 0x2000_0000;

/// Half-open address range `[start, end)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AddrRange {
    pub start: u32,
    pub end: u32,
}

impl AddrRange {
    pub fn new(start: u32, end: u32) -> Self {
        AddrRange { start, end }
    }

    pub fn len(&self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.start && addr < self.end
    }

    pub fn contains_range(&self, other: &AddrRange) -> bool {
        other.start >= self.start && other.end <= self.end && !other.is_empty()
    }

    pub fn overlaps(&self, other: &AddrRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Contiguous run of flash pages.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PageRange {
    pub first: u32,
    pub count: u32,
}

impl PageRange {
    pub const fn new(first: u32, count: u32) -> Self {
        PageRange { first, count }
    }

    pub fn addr_range(&self) -> AddrRange {
        AddrRange {
            start: FLASH_BASE + self.first * PAGE_SIZE as u32,
            end: FLASH_BASE + (self.first + self.count) * PAGE_SIZE as u32,
        }
    }

    pub fn end_page(&self) -> u32 {
        self.first + self.count
    }

    pub fn byte_len(&self) -> usize {
        self.count as usize * PAGE_SIZE
    }
}

/// Flash regions used by the boot chain and the runtime policy.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct RegionMap {
    pub dicepp: PageRange,
    pub lz_core: PageRange,
    pub core_patcher: PageRange,
    pub downloader: PageRange,
    pub meta: PageRange,
    pub provision: PageRange,
    pub boot_nonce: PageRange,
    pub staging: PageRange,
    pub business_logic: PageRange,
    pub untrusted_data: PageRange,
}

/// Memory geometry plus the flash region map, in one place.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct MemLayout {
    pub flash_pages: u32,
    pub ram_len: u32,
    pub secure_ram_len: u32,
    pub mailbox_len: u32,
    pub regions: RegionMap,
}

impl MemLayout {
    /// Default geometry: 640 KB flash, 320 KB RAM, 8 KB secure RAM.
    pub fn standard() -> Self {
        MemLayout {
            flash_pages: 1280,
            ram_len: 320 * 1024,
            secure_ram_len: 8 * 1024,
            mailbox_len: 4 * 1024,
            regions: RegionMap {
                dicepp: PageRange::new(0, 32),
                lz_core: PageRange::new(32, 96),
                core_patcher: PageRange::new(128, 16),
                downloader: PageRange::new(144, 48),
                meta: PageRange::new(192, 1),
                provision: PageRange::new(193, 2),
                boot_nonce: PageRange::new(195, 1),
                staging: PageRange::new(196, 256),
                business_logic: PageRange::new(452, 512),
                untrusted_data: PageRange::new(964, 316),
            },
        }
    }

    /// Reduced geometry for high-volume fuzzing; same semantics, less memcpy.
    pub fn compact() -> Self {
        MemLayout {
            flash_pages: 64,
            ram_len: 8 * 1024,
            secure_ram_len: 1024,
            mailbox_len: 1024,
            regions: RegionMap {
                dicepp: PageRange::new(0, 4),
                lz_core: PageRange::new(4, 8),
                core_patcher: PageRange::new(12, 2),
                downloader: PageRange::new(14, 4),
                meta: PageRange::new(18, 1),
                provision: PageRange::new(19, 2),
                boot_nonce: PageRange::new(21, 1),
                staging: PageRange::new(22, 16),
                business_logic: PageRange::new(38, 16),
                untrusted_data: PageRange::new(54, 10),
            },
        }
    }

    pub fn flash_range(&self) -> AddrRange {
        AddrRange::new(FLASH_BASE, FLASH_BASE + self.flash_pages * PAGE_SIZE as u32)
    }

    pub fn ram_range(&self) -> AddrRange {
        AddrRange::new(RAM_BASE, RAM_BASE + self.ram_len)
    }

    pub fn secure_ram_range(&self) -> AddrRange {
        AddrRange::new(RAM_BASE, RAM_BASE + self.secure_ram_len)
    }

    /// Non-secure RAM window where the boot chain leaves the identity bundle.
    pub fn mailbox_range(&self) -> AddrRange {
        AddrRange::new(
            RAM_BASE + self.secure_ram_len,
            RAM_BASE + self.secure_ram_len + self.mailbox_len,
        )
    }

    /// Page holding `dev_uuid` and the first-boot flag; last page of the
    /// DICE++ region so the region latch covers it.
    pub fn identity_page(&self) -> u32 {
        self.regions.dicepp.end_page() - 1
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatchKind {
    /// Blocks writes; reads stay allowed.
    WrLatch,
    /// Blocks reads and writes.
    RwLatch,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatchState {
    Open,
    Locked,
}

/// One-way protection on an address range; reopened only by reset.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct LatchEntry {
    pub range: AddrRange,
    pub kind: LatchKind,
    pub state: LatchState,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerState {
    Active,
    Sleep,
    DeepSleep,
    PowerDown,
}

impl PowerState {
    /// The watchdog clock runs only in active and sleep mode.
    pub fn wdt_clock_on(&self) -> bool {
        matches!(self, PowerState::Active | PowerState::Sleep)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum World {
    Secure,
    NonSecure,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootStage {
    RomDice,
    DicePlusPlus,
    LzCore,
    Untrusted,
    Halted,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultPolicy {
    /// Record the fault and keep running.
    LogOnly,
    /// Record the fault and schedule a device reset.
    Reset,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MemOp {
    Read,
    Write,
    Execute,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    #[error("access blocked by latch")]
    LatchViolation,
    #[error("non-secure access to secure resource")]
    SecureViolation,
    #[error("address outside mapped memory")]
    Unmapped,
    #[error("flash page index out of range")]
    PageOutOfRange,
    #[error("UDS read after latch")]
    UdsLatched,
    #[error("watchdog serviced outside warn window")]
    WdtWindowViolation,
    #[error("watchdog not running")]
    WdtNotRunning,
    #[error("latch configuration rejected")]
    BadLatchConfig,
    #[error("gateway called with unknown call id")]
    UnknownGatewayCall,
    #[error("flash operation interrupted by injected fault")]
    FlashInterrupted,
    #[error("secure runtime state violation")]
    RuntimeViolation,
}

/// Reasons a device reset gets scheduled.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetCause {
    WdtExpired,
    FaultPolicy(FaultKind),
    SelfRequested,
    UpdateApplied,
    PowerOn,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum WdtEvent {
    /// Fired once per countdown when the remaining time reaches the warn
    /// margin.
    WarnInterrupt,
    /// The countdown reached zero; the device resets.
    HardReset,
}

/// View of one flash page.
#[derive(Clone, Copy, Debug)]
pub struct FlashPage<'a> {
    pub data: &'a [u8],
    pub write_count: u32,
}

/// Windowed hardware watchdog.
///
/// The warn interrupt fires `warn_margin_ticks` before expiry. `service` is
/// accepted only inside the warn window and extends the deadline by one full
/// period measured from the current countdown's scheduled expiry, so a
/// continuously serviced watchdog expires at exact multiples of
/// `timeout_ticks`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct HwWdt {
    pub timeout_ticks: u64,
    pub warn_margin_ticks: u64,
    remaining: u64,
    warn_armed: bool,
    pub running: bool,
}

impl HwWdt {
    pub fn stopped() -> Self {
        HwWdt {
            timeout_ticks: 0,
            warn_margin_ticks: 0,
            remaining: 0,
            warn_armed: false,
            running: false,
        }
    }

    fn start(&mut self, timeout_ticks: u64, warn_margin_ticks: u64) {
        debug_assert!(timeout_ticks > 0 && warn_margin_ticks > 0 && warn_margin_ticks < timeout_ticks);
        self.timeout_ticks = timeout_ticks;
        self.warn_margin_ticks = warn_margin_ticks;
        self.remaining = timeout_ticks;
        self.warn_armed = true;
        self.running = true;
    }

    pub fn remaining_ticks(&self) -> u64 {
        self.remaining
    }

    /// Ticks until the next warn or expiry event, if the countdown runs.
    pub fn ticks_until_event(&self) -> Option<u64> {
        if !self.running {
            return None;
        }
        if self.warn_armed && self.remaining > self.warn_margin_ticks {
            Some(self.remaining - self.warn_margin_ticks)
        } else {
            Some(self.remaining)
        }
    }

    fn tick(&mut self, mut n: u64, events: &mut Vec<WdtEvent>) {
        while n > 0 && self.running {
            let boundary = if self.warn_armed {
                self.remaining - self.warn_margin_ticks
            } else {
                self.remaining
            };
            let step = n.min(boundary.max(1));
            let step = step.min(self.remaining);
            self.remaining -= step;
            n -= step;
            if self.warn_armed && self.remaining == self.warn_margin_ticks {
                self.warn_armed = false;
                events.push(WdtEvent::WarnInterrupt);
            }
            if self.remaining == 0 {
                self.running = false;
                events.push(WdtEvent::HardReset);
                return;
            }
        }
    }
}

#[derive(Clone, Copy, Default, Debug, PartialEq, Eq, Serialize)]
pub struct McuStats {
    /// Successful page programs, cumulative over the device lifetime.
    pub programs_total: u64,
    /// Successful page programs since the last reset.
    pub programs_epoch: u64,
    pub faults: u64,
    /// Flash mutations that happened in the untrusted stage without passing
    /// through a TEE handler; must stay zero.
    pub unmediated_untrusted_programs: u64,
}

/// Complete simulated MCU state.
pub struct McuState {
    pub layout: MemLayout,
    flash: Vec<u8>,
    wear: Vec<u32>,
    ram: Vec<u8>,
    pub latches: Vec<LatchEntry>,
    pub wdt: HwWdt,
    pub power: PowerState,
    pub world: World,
    pub boot_stage: BootStage,
    uds: Key256,
    uds_latched: bool,
    entropy: ChaCha20Rng,
    pub fault_policy: FaultPolicy,
    pub stats: McuStats,
    pending_reset: Option<ResetCause>,
    handler_grant: bool,
    /// Injected fault: remaining successful programs before flash stalls.
    pub interrupt_flash_after: Option<u32>,
}

impl McuState {
    pub fn new(layout: MemLayout, uds: Key256, entropy_seed: [u8; 32], fault_policy: FaultPolicy) -> Self {
        McuState {
            layout,
            flash: vec![0u8; layout.flash_pages as usize * PAGE_SIZE],
            wear: vec![0u32; layout.flash_pages as usize],
            ram: vec![0u8; layout.ram_len as usize],
            latches: Vec::new(),
            wdt: HwWdt::stopped(),
            power: PowerState::Active,
            world: World::Secure,
            boot_stage: BootStage::RomDice,
            uds,
            uds_latched: false,
            entropy: ChaCha20Rng::from_seed(entropy_seed),
            fault_policy,
            stats: McuStats::default(),
            pending_reset: None,
            handler_grant: false,
            interrupt_flash_after: None,
        }
    }

    fn fault(&mut self, kind: FaultKind) -> FaultKind {
        self.stats.faults += 1;
        if self.fault_policy == FaultPolicy::Reset && self.pending_reset.is_none() {
            self.pending_reset = Some(ResetCause::FaultPolicy(kind));
        }
        kind
    }

    /// Orderly reset: every reachable state leads back to the same post-reset
    /// state, flash contents and wear excepted.
    pub fn reset(&mut self) {
        self.latches.clear();
        self.ram.fill(0);
        self.wdt = HwWdt::stopped();
        self.power = PowerState::Active;
        self.world = World::Secure;
        self.boot_stage = BootStage::RomDice;
        self.uds_latched = false;
        self.pending_reset = None;
        self.handler_grant = false;
        self.stats.programs_epoch = 0;
    }

    /// True when the state equals the canonical post-reset state (flash
    /// contents and wear counters aside).
    pub fn is_canonical_post_reset(&self) -> bool {
        self.latches.is_empty()
            && self.ram.iter().all(|&b| b == 0)
            && !self.wdt.running
            && self.power == PowerState::Active
            && self.world == World::Secure
            && self.boot_stage == BootStage::RomDice
            && !self.uds_latched
            && self.pending_reset.is_none()
            && !self.handler_grant
            && self.stats.programs_epoch == 0
    }

    pub fn pending_reset(&self) -> Option<ResetCause> {
        self.pending_reset
    }

    pub fn request_reset(&mut self, cause: ResetCause) {
        if self.pending_reset.is_none() {
            self.pending_reset = Some(cause);
        }
    }

    pub fn take_pending_reset(&mut self) -> Option<ResetCause> {
        self.pending_reset.take()
    }

    // ---- latches -------------------------------------------------------

    /// Locks a latch over `range`. Secure world, boot time only.
    pub fn lock_latch(&mut self, range: AddrRange, kind: LatchKind) -> Result<(), FaultKind> {
        if self.world != World::Secure {
            return Err(self.fault(FaultKind::SecureViolation));
        }
        if self.boot_stage == BootStage::Untrusted {
            return Err(self.fault(FaultKind::BadLatchConfig));
        }
        if range.is_empty()
            || !(self.layout.flash_range().contains_range(&range)
                || self.layout.ram_range().contains_range(&range))
        {
            return Err(self.fault(FaultKind::BadLatchConfig));
        }
        self.latches.push(LatchEntry {
            range,
            kind,
            state: LatchState::Locked,
        });
        Ok(())
    }

    fn latch_denies(&self, range: &AddrRange, op: MemOp) -> bool {
        self.latches.iter().any(|l| {
            l.state == LatchState::Locked
                && l.range.overlaps(range)
                && match l.kind {
                    // Overlapping entries enforce the strictest kind.
                    LatchKind::RwLatch => true,
                    LatchKind::WrLatch => op == MemOp::Write,
                }
        })
    }

    // ---- access mediation ---------------------------------------------

    /// Bus-level access check for a single address.
    pub fn mem_access(&mut self, world: World, addr: u32, op: MemOp) -> Result<(), FaultKind> {
        self.access_range(world, AddrRange::new(addr, addr.saturating_add(1)), op)
    }

    /// Bus-level access check for a range.
    pub fn access_range(&mut self, world: World, range: AddrRange, op: MemOp) -> Result<(), FaultKind> {
        let flash = self.layout.flash_range();
        let ram = self.layout.ram_range();
        if flash.contains_range(&range) {
            // The flash controller is a critical peripheral: programming is
            // secure-world only. Reads go over the bus.
            if op == MemOp::Write && world == World::NonSecure {
                return Err(self.fault(FaultKind::SecureViolation));
            }
        } else if ram.contains_range(&range) {
            if world == World::NonSecure && range.overlaps(&self.layout.secure_ram_range()) {
                return Err(self.fault(FaultKind::SecureViolation));
            }
        } else {
            return Err(self.fault(FaultKind::Unmapped));
        }
        if self.latch_denies(&range, op) {
            return Err(self.fault(FaultKind::LatchViolation));
        }
        Ok(())
    }

    // ---- flash ---------------------------------------------------------

    pub fn page(&self, index: u32) -> Option<FlashPage<'_>> {
        if index >= self.layout.flash_pages {
            return None;
        }
        let start = index as usize * PAGE_SIZE;
        Some(FlashPage {
            data: &self.flash[start..start + PAGE_SIZE],
            write_count: self.wear[index as usize],
        })
    }

    pub fn wear_counts(&self) -> &[u32] {
        &self.wear
    }

    /// Programs one page: replaces its contents (zero-padded) and bumps the
    /// wear counter by exactly one.
    pub fn flash_program(&mut self, page_index: u32, data: &[u8]) -> Result<(), FaultKind> {
        if page_index >= self.layout.flash_pages || data.len() > PAGE_SIZE {
            return Err(self.fault(FaultKind::PageOutOfRange));
        }
        if self.world != World::Secure {
            return Err(self.fault(FaultKind::SecureViolation));
        }
        let range = PageRange::new(page_index, 1).addr_range();
        if self.latch_denies(&range, MemOp::Write) {
            return Err(self.fault(FaultKind::LatchViolation));
        }
        if let Some(left) = self.interrupt_flash_after.as_mut() {
            if *left == 0 {
                return Err(FaultKind::FlashInterrupted);
            }
            *left -= 1;
        }
        let start = page_index as usize * PAGE_SIZE;
        self.flash[start..start + data.len()].copy_from_slice(data);
        self.flash[start + data.len()..start + PAGE_SIZE].fill(0);
        self.wear[page_index as usize] += 1;
        self.stats.programs_total += 1;
        self.stats.programs_epoch += 1;
        if self.boot_stage == BootStage::Untrusted && !self.handler_grant {
            self.stats.unmediated_untrusted_programs += 1;
        }
        Ok(())
    }

    /// Checked flash read honoring latches and the current world.
    pub fn flash_read(&mut self, range: AddrRange) -> Result<Vec<u8>, FaultKind> {
        self.access_range(self.world, range, MemOp::Read)?;
        Ok(self.flash[range.start as usize..range.end as usize].to_vec())
    }

    /// Unchecked flash view for the simulation harness and assertions.
    pub fn flash_bytes(&self, range: AddrRange) -> &[u8] {
        &self.flash[range.start as usize..range.end as usize]
    }

    /// Writes `bytes` at the start of a page-aligned region, one page at a
    /// time. Boot-chain installs go through here.
    pub fn write_region(&mut self, region: PageRange, bytes: &[u8]) -> Result<(), FaultKind> {
        if bytes.len() > region.byte_len() {
            return Err(self.fault(FaultKind::PageOutOfRange));
        }
        for (i, chunk) in bytes.chunks(PAGE_SIZE).enumerate() {
            self.flash_program(region.first + i as u32, chunk)?;
        }
        Ok(())
    }

    /// Runs `f` with handler privileges: secure world plus the mediation
    /// grant that marks flash writes as handler-approved.
    pub fn with_handler_grant<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved_world = self.world;
        let saved_grant = self.handler_grant;
        self.world = World::Secure;
        self.handler_grant = true;
        let out = f(self);
        self.world = saved_world;
        self.handler_grant = saved_grant;
        out
    }

    // ---- RAM -----------------------------------------------------------

    pub fn ram_write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), FaultKind> {
        let range = AddrRange::new(addr, addr + bytes.len() as u32);
        self.access_range(self.world, range, MemOp::Write)?;
        let off = (addr - RAM_BASE) as usize;
        self.ram[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn ram_read(&mut self, addr: u32, len: u32) -> Result<Vec<u8>, FaultKind> {
        let range = AddrRange::new(addr, addr + len);
        self.access_range(self.world, range, MemOp::Read)?;
        let off = (addr - RAM_BASE) as usize;
        Ok(self.ram[off..off + len as usize].to_vec())
    }

    /// Unchecked RAM view for harness assertions.
    pub fn ram_bytes(&self) -> &[u8] {
        &self.ram
    }

    // ---- UDS lifecycle ---------------------------------------------------

    /// The unique device secret, readable only until the DICE layer latches
    /// it.
    pub fn uds(&mut self) -> Result<Key256, FaultKind> {
        if self.uds_latched || matches!(self.boot_stage, BootStage::LzCore | BootStage::Untrusted) {
            return Err(self.fault(FaultKind::UdsLatched));
        }
        Ok(self.uds.clone())
    }

    pub fn latch_uds(&mut self) {
        self.uds_latched = true;
    }

    pub fn uds_is_latched(&self) -> bool {
        self.uds_latched
    }

    // ---- watchdog --------------------------------------------------------

    pub fn wdt_start(&mut self, timeout_ticks: u64, warn_margin_ticks: u64) -> Result<(), FaultKind> {
        if self.world != World::Secure {
            return Err(self.fault(FaultKind::SecureViolation));
        }
        self.wdt.start(timeout_ticks, warn_margin_ticks);
        Ok(())
    }

    /// Feeds the watchdog inside the warn window; the deadline moves one full
    /// period past the current countdown's scheduled expiry.
    pub fn wdt_service(&mut self) -> Result<(), FaultKind> {
        if self.world != World::Secure {
            return Err(self.fault(FaultKind::SecureViolation));
        }
        if !self.wdt.running {
            return Err(self.fault(FaultKind::WdtNotRunning));
        }
        if self.wdt.warn_armed || self.wdt.remaining > self.wdt.warn_margin_ticks {
            return Err(self.fault(FaultKind::WdtWindowViolation));
        }
        self.wdt.remaining += self.wdt.timeout_ticks;
        self.wdt.warn_armed = true;
        Ok(())
    }

    /// Restarts a fresh full countdown anchored at the current instant
    /// (ticket acceptance re-anchors the schedule).
    pub fn wdt_restart(&mut self) -> Result<(), FaultKind> {
        if self.world != World::Secure {
            return Err(self.fault(FaultKind::SecureViolation));
        }
        if !self.wdt.running && self.wdt.timeout_ticks == 0 {
            return Err(self.fault(FaultKind::WdtNotRunning));
        }
        self.wdt.remaining = self.wdt.timeout_ticks;
        self.wdt.warn_armed = true;
        self.wdt.running = true;
        Ok(())
    }

    /// Advances simulated time. Watchdog ticks are not delivered in deep
    /// sleep or power-down.
    pub fn tick(&mut self, n: u64) -> Vec<WdtEvent> {
        let mut events = Vec::new();
        if self.power.wdt_clock_on() {
            self.wdt.tick(n, &mut events);
        }
        events
    }

    /// Ticks until the next watchdog event, honoring the power gate.
    pub fn ticks_until_wdt_event(&self) -> Option<u64> {
        if !self.power.wdt_clock_on() {
            return None;
        }
        self.wdt.ticks_until_event()
    }

    // ---- power -----------------------------------------------------------

    /// Raw power-state change. The power controller is secure-mapped; the
    /// deny-list policy for low-power states lives in the TEE handler.
    pub fn power_request(&mut self, state: PowerState) -> Result<(), FaultKind> {
        if self.world != World::Secure {
            return Err(self.fault(FaultKind::SecureViolation));
        }
        self.power = state;
        Ok(())
    }

    // ---- entropy ---------------------------------------------------------

    /// Next 32 bytes from the seeded entropy source.
    pub fn entropy_next(&mut self) -> [u8; 32] {
        let mut out = [0u8; 32];
        self.entropy.fill_bytes(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mcu() -> McuState {
        McuState::new(
            MemLayout::compact(),
            Key256([0xA1; 32]),
            [7u8; 32],
            FaultPolicy::Reset,
        )
    }

    #[test]
    fn reset_restores_canonical_state_but_keeps_flash() {
        let mut m = mcu();
        let staging = m.layout.regions.staging;
        m.flash_program(staging.first, b"staged-update").unwrap();
        m.lock_latch(m.layout.regions.lz_core.addr_range(), LatchKind::WrLatch)
            .unwrap();
        m.power_request(PowerState::PowerDown).unwrap();
        m.boot_stage = BootStage::Untrusted;
        m.world = World::NonSecure;

        m.reset();
        assert!(m.is_canonical_post_reset());
        assert_eq!(&m.page(staging.first).unwrap().data[..13], b"staged-update");
        assert_eq!(m.page(staging.first).unwrap().write_count, 1);
    }

    #[test]
    fn rw_latch_blocks_even_secure_reads() {
        let mut m = mcu();
        let dicepp = m.layout.regions.dicepp.addr_range();
        m.lock_latch(dicepp, LatchKind::RwLatch).unwrap();
        assert_eq!(
            m.flash_read(AddrRange::new(dicepp.start, dicepp.start + 16)),
            Err(FaultKind::LatchViolation)
        );
    }

    #[test]
    fn wr_latch_blocks_writes_allows_reads() {
        let mut m = mcu();
        let core = m.layout.regions.lz_core;
        m.flash_program(core.first, b"core").unwrap();
        m.lock_latch(core.addr_range(), LatchKind::WrLatch).unwrap();
        assert_eq!(m.flash_program(core.first, b"evil"), Err(FaultKind::LatchViolation));
        assert_eq!(&m.flash_read(core.addr_range()).unwrap()[..4], b"core");
        // Non-secure reads of a WR-latched region stay allowed.
        m.world = World::NonSecure;
        assert!(m.access_range(World::NonSecure, core.addr_range(), MemOp::Read).is_ok());
    }

    #[test]
    fn non_secure_latch_attempt_faults_and_schedules_reset() {
        let mut m = mcu();
        m.world = World::NonSecure;
        let r = m.layout.regions.untrusted_data.addr_range();
        assert_eq!(m.lock_latch(r, LatchKind::WrLatch), Err(FaultKind::SecureViolation));
        assert_eq!(
            m.pending_reset(),
            Some(ResetCause::FaultPolicy(FaultKind::SecureViolation))
        );
    }

    #[test]
    fn non_secure_flash_write_faults() {
        let mut m = mcu();
        let core = m.layout.regions.lz_core.addr_range();
        assert_eq!(
            m.access_range(World::NonSecure, core, MemOp::Write),
            Err(FaultKind::SecureViolation)
        );
        // Secure read of non-secure RAM is allowed.
        let mailbox = m.layout.mailbox_range();
        assert!(m.access_range(World::Secure, mailbox, MemOp::Read).is_ok());
    }

    #[test]
    fn wear_counts_one_per_program() {
        let mut m = mcu();
        let p = m.layout.regions.untrusted_data.first;
        m.flash_program(p, b"one").unwrap();
        m.flash_program(p, b"two").unwrap();
        assert_eq!(m.page(p).unwrap().write_count, 2);
        assert_eq!(m.stats.programs_total, 2);
        assert_eq!(m.flash_program(m.layout.flash_pages, b"x"), Err(FaultKind::PageOutOfRange));
    }

    #[test]
    fn wdt_warn_then_expiry_arithmetic() {
        let mut m = mcu();
        m.wdt_start(60, 5).unwrap();
        assert_eq!(m.tick(55), vec![WdtEvent::WarnInterrupt]);
        assert_eq!(m.tick(5), vec![WdtEvent::HardReset]);
    }

    #[test]
    fn wdt_service_at_warn_prevents_reset_this_cycle() {
        let mut m = mcu();
        m.wdt_start(60, 5).unwrap();
        assert_eq!(m.tick(55), vec![WdtEvent::WarnInterrupt]);
        m.wdt_service().unwrap();
        // Deadline extends to the next multiple of the full period.
        assert_eq!(m.tick(60), vec![WdtEvent::WarnInterrupt]);
        assert_eq!(m.tick(5), vec![WdtEvent::HardReset]);
    }

    #[test]
    fn wdt_service_outside_window_or_non_secure_faults() {
        let mut m = mcu();
        m.wdt_start(60, 5).unwrap();
        assert_eq!(m.wdt_service(), Err(FaultKind::WdtWindowViolation));
        m.tick(55);
        m.world = World::NonSecure;
        assert_eq!(m.wdt_service(), Err(FaultKind::SecureViolation));
    }

    #[test]
    fn unserviced_watchdog_resets_after_exactly_the_timeout() {
        let mut m = mcu();
        m.wdt_start(60_000, 3_750).unwrap();
        let mut events = m.tick(59_999);
        assert_eq!(events, vec![WdtEvent::WarnInterrupt]);
        events = m.tick(1);
        assert_eq!(events, vec![WdtEvent::HardReset]);
    }

    #[test]
    fn low_power_states_freeze_the_wdt_clock() {
        let mut m = mcu();
        m.wdt_start(60, 5).unwrap();
        m.power_request(PowerState::Sleep).unwrap();
        assert_eq!(m.tick(55), vec![WdtEvent::WarnInterrupt]);

        m.power_request(PowerState::DeepSleep).unwrap();
        assert!(m.tick(1000).is_empty());
        assert_eq!(m.ticks_until_wdt_event(), None);

        m.power_request(PowerState::PowerDown).unwrap();
        assert!(m.tick(1000).is_empty());

        // Back to active: the countdown resumes where it stopped.
        m.power_request(PowerState::Active).unwrap();
        assert_eq!(m.tick(5), vec![WdtEvent::HardReset]);
    }

    #[test]
    fn non_secure_power_request_faults() {
        let mut m = mcu();
        m.world = World::NonSecure;
        assert_eq!(m.power_request(PowerState::PowerDown), Err(FaultKind::SecureViolation));
    }

    #[test]
    fn uds_gated_by_lifecycle() {
        let mut m = mcu();
        assert!(m.uds().is_ok());
        m.latch_uds();
        assert_eq!(m.uds(), Err(FaultKind::UdsLatched));
        m.reset();
        assert!(m.uds().is_ok());
    }

    #[test]
    fn entropy_is_seeded_and_non_repeating() {
        let mut a = mcu();
        let mut b = mcu();
        let s1: Vec<[u8; 32]> = (0..16).map(|_| a.entropy_next()).collect();
        let s2: Vec<[u8; 32]> = (0..16).map(|_| b.entropy_next()).collect();
        assert_eq!(s1, s2);
        assert_ne!(s1[0], s1[1]);

        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            assert!(seen.insert(a.entropy_next()));
        }
    }

    #[test]
    fn ram_secure_partition_enforced() {
        let mut m = mcu();
        let secure_addr = RAM_BASE + 16;
        m.ram_write(secure_addr, b"secret").unwrap();
        m.world = World::NonSecure;
        assert_eq!(m.ram_read(secure_addr, 6), Err(FaultKind::SecureViolation));
        let mailbox = m.layout.mailbox_range().start;
        assert!(m.ram_read(mailbox, 16).is_ok());
    }
}
