//! Secure-world runtime active while untrusted software executes: the
//! TEETrigger authenticated watchdog built over the short-interval hardware
//! WDT, and the critical-peripheral handlers (flash, power) reachable through
//! a fixed gateway call table.
//!
//! The runtime holds no key material beyond the hub public key, so there is
//! nothing for side channels to extract from it.

use crate::crypto::{verify, PublicKeyBytes};
use crate::mcu::{AddrRange, FaultKind, McuState, PowerState, ResetCause, PAGE_SIZE};
use crate::wire::{signing_bytes, MessageType};
use serde::{Deserialize, Serialize};

/// Gateway call table. Unknown ids fault the device.
pub const GW_AWDT_GET_NONCE: u32 = 1;
pub const GW_AWDT_PUT_TICKET: u32 = 2;
pub const GW_FLASH_WRITE: u32 = 3;
pub const GW_POWER_REQUEST: u32 = 4;
pub const GW_AWDT_INIT: u32 = 5;

/// 1 simulated tick corresponds to 1 ms, so deferral times convert 1:1.
pub fn deferral_ms_to_ticks(ms: u32) -> u64 {
    ms as u64
}

/// Hardware-WDT service budget for a requested timespan: the counter is the
/// number of warn-interrupt services needed so the countdown chain covers at
/// least the requested time, rounding up to whole hardware periods.
pub fn awdt_counter_for(total_ticks: u64, hw_timeout_ticks: u64) -> i64 {
    debug_assert!(hw_timeout_ticks > 0);
    (total_ticks.div_ceil(hw_timeout_ticks)) as i64
}

/// Hub-signed deferral authorization. The signature is the hub's signed
/// response header rebuilt from `(type, nonce, deferral_ms)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DeferralTicket {
    pub nonce: [u8; 32],
    pub deferral_ms: u32,
    pub signature: [u8; 64],
}

impl DeferralTicket {
    pub fn verify(&self, hub_pub: &PublicKeyBytes) -> bool {
        let preimage = signing_bytes(
            MessageType::DeferralResp,
            &self.nonce,
            &self.deferral_ms.to_le_bytes(),
        );
        verify(hub_pub, &preimage, &self.signature)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketReject {
    NotInitialized,
    ZeroDeferral,
    BadSignature,
    NonceMismatch,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TicketOutcome {
    Accepted,
    Rejected(TicketReject),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum WarnOutcome {
    Serviced,
    AllowedToExpire,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteDenied {
    Region,
    RateLimit,
}

/// TEETrigger state.
#[derive(Clone, Debug)]
pub struct AwdtState {
    pub hub_pub: PublicKeyBytes,
    pub counter: i64,
    pub hw_timeout_ticks: u64,
    pub pending_nonce: Option<[u8; 32]>,
    pub initialized: bool,
}

/// Untrusted-write policy for the flash handler: an allow-list of ranges plus
/// a per-window page budget.
#[derive(Clone, Debug)]
pub struct FlashWritePolicy {
    pub allowed_ranges: Vec<AddrRange>,
    pub max_writes_per_window: u32,
    pub window_ticks: u64,
    window_start: u64,
    window_count: u32,
}

impl FlashWritePolicy {
    pub fn new(allowed_ranges: Vec<AddrRange>, max_writes_per_window: u32, window_ticks: u64) -> Self {
        FlashWritePolicy {
            allowed_ranges,
            max_writes_per_window,
            window_ticks,
            window_start: 0,
            window_count: 0,
        }
    }

    fn roll_window(&mut self, now: u64) {
        if self.window_ticks == 0 {
            return;
        }
        if now >= self.window_start + self.window_ticks {
            let advanced = (now - self.window_start) / self.window_ticks;
            self.window_start += advanced * self.window_ticks;
            self.window_count = 0;
        }
    }

    pub fn window_count(&self) -> u32 {
        self.window_count
    }
}

/// Everything the secure world keeps around while untrusted code runs.
#[derive(Clone, Debug)]
pub struct TeeRuntime {
    pub awdt: AwdtState,
    pub flash_policy: FlashWritePolicy,
    /// Accept `awdt_init` through the gateway with a caller-supplied hub key
    /// (the simple parameterized construction) instead of requiring the boot
    /// chain to pass the provisioned key.
    pub allow_ns_awdt_init: bool,
    warn_margin_ticks: u64,
}

impl TeeRuntime {
    pub fn new(
        hub_pub: PublicKeyBytes,
        flash_policy: FlashWritePolicy,
        warn_margin_ticks: u64,
        allow_ns_awdt_init: bool,
    ) -> Self {
        TeeRuntime {
            awdt: AwdtState {
                hub_pub,
                counter: 0,
                hw_timeout_ticks: 0,
                pending_nonce: None,
                initialized: false,
            },
            flash_policy,
            allow_ns_awdt_init,
            warn_margin_ticks,
        }
    }

    /// Initializes TEETrigger and starts the hardware countdown. Called once
    /// by the boot chain before untrusted handoff; a second initialization is
    /// treated as a runtime violation.
    pub fn awdt_init(
        &mut self,
        mcu: &mut McuState,
        hub_pub: PublicKeyBytes,
        total_timeout_ticks: u64,
        hw_timeout_ticks: u64,
    ) -> Result<(), FaultKind> {
        if self.awdt.initialized {
            mcu.request_reset(ResetCause::FaultPolicy(FaultKind::RuntimeViolation));
            return Err(FaultKind::RuntimeViolation);
        }
        self.awdt.hub_pub = hub_pub;
        self.awdt.hw_timeout_ticks = hw_timeout_ticks;
        self.awdt.counter = awdt_counter_for(total_timeout_ticks, hw_timeout_ticks);
        self.awdt.pending_nonce = None;
        self.awdt.initialized = true;
        mcu.wdt_start(hw_timeout_ticks, self.warn_margin_ticks)
    }

    /// Draws a fresh nonce, stores it in the single slot (latest wins) and
    /// returns it to the caller.
    pub fn awdt_get_nonce(&mut self, mcu: &mut McuState) -> Result<[u8; 32], TicketReject> {
        if !self.awdt.initialized {
            return Err(TicketReject::NotInitialized);
        }
        let nonce = mcu.entropy_next();
        self.awdt.pending_nonce = Some(nonce);
        Ok(nonce)
    }

    /// Verifies a deferral ticket; on acceptance re-anchors the hardware
    /// countdown at the current instant and reloads the service counter.
    pub fn awdt_put_ticket(&mut self, mcu: &mut McuState, ticket: &DeferralTicket) -> TicketOutcome {
        if !self.awdt.initialized {
            return TicketOutcome::Rejected(TicketReject::NotInitialized);
        }
        if ticket.deferral_ms == 0 {
            return TicketOutcome::Rejected(TicketReject::ZeroDeferral);
        }
        if !ticket.verify(&self.awdt.hub_pub) {
            return TicketOutcome::Rejected(TicketReject::BadSignature);
        }
        if self.awdt.pending_nonce != Some(ticket.nonce) {
            return TicketOutcome::Rejected(TicketReject::NonceMismatch);
        }
        self.awdt.pending_nonce = None;
        self.awdt.counter = awdt_counter_for(
            deferral_ms_to_ticks(ticket.deferral_ms),
            self.awdt.hw_timeout_ticks,
        );
        mcu.with_handler_grant(|m| m.wdt_restart()).expect("wdt restart from secure world");
        TicketOutcome::Accepted
    }

    /// Warn-interrupt handler: decrement, and service the hardware WDT if and
    /// only if the result is not negative.
    pub fn on_wdt_warn(&mut self, mcu: &mut McuState) -> WarnOutcome {
        self.awdt.counter -= 1;
        if self.awdt.counter >= 0 {
            mcu.with_handler_grant(|m| m.wdt_service()).expect("service inside warn window");
            WarnOutcome::Serviced
        } else {
            WarnOutcome::AllowedToExpire
        }
    }

    /// Flash handler: allows writes only into the allow-listed ranges and
    /// within the per-window budget. Budget excess is illicit use and resets
    /// the device per policy.
    pub fn handler_flash_write(
        &mut self,
        mcu: &mut McuState,
        now: u64,
        addr: u32,
        data: &[u8],
    ) -> Result<(), WriteDenied> {
        self.flash_policy.roll_window(now);
        let range = AddrRange::new(addr, addr + data.len() as u32);
        if data.is_empty()
            || !self
                .flash_policy
                .allowed_ranges
                .iter()
                .any(|allowed| allowed.contains_range(&range))
        {
            return Err(WriteDenied::Region);
        }
        let first_page = addr / PAGE_SIZE as u32;
        let last_page = (range.end - 1) / PAGE_SIZE as u32;
        let pages = last_page - first_page + 1;
        if self.flash_policy.window_count + pages > self.flash_policy.max_writes_per_window {
            mcu.request_reset(ResetCause::FaultPolicy(FaultKind::RuntimeViolation));
            return Err(WriteDenied::RateLimit);
        }
        self.flash_policy.window_count += pages;

        mcu.with_handler_grant(|m| {
            for page in first_page..=last_page {
                let page_start = page * PAGE_SIZE as u32;
                let mut buf = [0u8; PAGE_SIZE];
                buf.copy_from_slice(m.flash_bytes(AddrRange::new(
                    page_start,
                    page_start + PAGE_SIZE as u32,
                )));
                let from = range.start.max(page_start);
                let to = range.end.min(page_start + PAGE_SIZE as u32);
                let src_off = (from - range.start) as usize;
                let dst_off = (from - page_start) as usize;
                buf[dst_off..dst_off + (to - from) as usize]
                    .copy_from_slice(&data[src_off..src_off + (to - from) as usize]);
                m.flash_program(page, &buf).expect("allow-listed page is writable");
            }
        });
        Ok(())
    }

    /// Power handler: active and sleep are granted, the states that stop the
    /// watchdog clock are blocked.
    pub fn handler_power_request(&mut self, mcu: &mut McuState, state: PowerState) -> Result<(), ()> {
        if state.wdt_clock_on() {
            mcu.with_handler_grant(|m| m.power_request(state))
                .expect("power change from secure world");
            Ok(())
        } else {
            Err(())
        }
    }

    /// Serialized view of the runtime state for the no-secret scan.
    pub fn scan_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.awdt.hub_pub.0);
        out.extend_from_slice(&self.awdt.counter.to_le_bytes());
        out.extend_from_slice(&self.awdt.hw_timeout_ticks.to_le_bytes());
        if let Some(n) = self.awdt.pending_nonce {
            out.extend_from_slice(&n);
        }
        for r in &self.flash_policy.allowed_ranges {
            out.extend_from_slice(&r.start.to_le_bytes());
            out.extend_from_slice(&r.end.to_le_bytes());
        }
        out.extend_from_slice(&self.flash_policy.max_writes_per_window.to_le_bytes());
        out.extend_from_slice(&self.flash_policy.window_ticks.to_le_bytes());
        out
    }
}

/// Gateway result byte for ticket and write handlers.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GatewayFault {
    UnknownCall,
    BadArgument,
}

/// Fixed gateway ABI: `call(call_id, argument bytes) -> result bytes`.
///
/// Result encodings:
/// - `GW_AWDT_GET_NONCE`: 32-byte nonce, or `[0xFF]` before initialization.
/// - `GW_AWDT_PUT_TICKET`: arg `nonce(32) || deferral_ms(4 LE) || sig(64)`;
///   result `[0]` accepted, `[1, reason]` rejected.
/// - `GW_FLASH_WRITE`: arg `addr(4 LE) || data`; result `[0]` ok,
///   `[1, reason]` denied (reason 0 region, 1 rate limit).
/// - `GW_POWER_REQUEST`: arg `[state]` (0 active, 1 sleep, 2 deep sleep,
///   3 power down); result `[0]` ok, `[1]` denied.
/// - `GW_AWDT_INIT`: arg `hub_pub(64) || total_ticks(8 LE)`; result `[0]` ok,
///   `[1]` refused. Only honored when the parameterized init mode is enabled.
///
/// Unknown call ids are a fault and reset the device per policy.
pub fn gateway_call(
    rt: &mut TeeRuntime,
    mcu: &mut McuState,
    now: u64,
    call_id: u32,
    arg: &[u8],
) -> Result<Vec<u8>, GatewayFault> {
    match call_id {
        GW_AWDT_GET_NONCE => {
            if !arg.is_empty() {
                return Err(GatewayFault::BadArgument);
            }
            match rt.awdt_get_nonce(mcu) {
                Ok(nonce) => Ok(nonce.to_vec()),
                Err(_) => Ok(vec![0xFF]),
            }
        }
        GW_AWDT_PUT_TICKET => {
            if arg.len() != 32 + 4 + 64 {
                return Err(GatewayFault::BadArgument);
            }
            let mut nonce = [0u8; 32];
            nonce.copy_from_slice(&arg[..32]);
            let deferral_ms = u32::from_le_bytes(arg[32..36].try_into().unwrap());
            let mut signature = [0u8; 64];
            signature.copy_from_slice(&arg[36..100]);
            let ticket = DeferralTicket {
                nonce,
                deferral_ms,
                signature,
            };
            match rt.awdt_put_ticket(mcu, &ticket) {
                TicketOutcome::Accepted => Ok(vec![0]),
                TicketOutcome::Rejected(r) => Ok(vec![1, r as u8]),
            }
        }
        GW_FLASH_WRITE => {
            if arg.len() < 5 {
                return Err(GatewayFault::BadArgument);
            }
            let addr = u32::from_le_bytes(arg[..4].try_into().unwrap());
            match rt.handler_flash_write(mcu, now, addr, &arg[4..]) {
                Ok(()) => Ok(vec![0]),
                Err(WriteDenied::Region) => Ok(vec![1, 0]),
                Err(WriteDenied::RateLimit) => Ok(vec![1, 1]),
            }
        }
        GW_POWER_REQUEST => {
            if arg.len() != 1 {
                return Err(GatewayFault::BadArgument);
            }
            let state = match arg[0] {
                0 => PowerState::Active,
                1 => PowerState::Sleep,
                2 => PowerState::DeepSleep,
                3 => PowerState::PowerDown,
                _ => return Err(GatewayFault::BadArgument),
            };
            match rt.handler_power_request(mcu, state) {
                Ok(()) => Ok(vec![0]),
                Err(()) => Ok(vec![1]),
            }
        }
        GW_AWDT_INIT => {
            if arg.len() != 64 + 8 {
                return Err(GatewayFault::BadArgument);
            }
            if !rt.allow_ns_awdt_init {
                return Ok(vec![1]);
            }
            let mut pub_bytes = [0u8; 64];
            pub_bytes.copy_from_slice(&arg[..64]);
            let total = u64::from_le_bytes(arg[64..72].try_into().unwrap());
            let hw = rt.awdt.hw_timeout_ticks.max(1);
            match rt.awdt_init(mcu, PublicKeyBytes(pub_bytes), total, hw) {
                Ok(()) => Ok(vec![0]),
                Err(_) => Ok(vec![1]),
            }
        }
        other => {
            let _ = other;
            mcu.request_reset(ResetCause::FaultPolicy(FaultKind::UnknownGatewayCall));
            Err(GatewayFault::UnknownCall)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{derive_keypair, sign, Key256, SigningKeyPair};
    use crate::mcu::{FaultPolicy, MemLayout, WdtEvent};

    const HW: u64 = 60_000;
    const MARGIN: u64 = 3_750;

    fn hub() -> SigningKeyPair {
        derive_keypair(&Key256([0x99; 32]), b"hub-root")
    }

    fn setup(total: u64) -> (TeeRuntime, McuState) {
        let mut mcu = McuState::new(
            MemLayout::compact(),
            Key256([1; 32]),
            [2; 32],
            FaultPolicy::Reset,
        );
        let staging = mcu.layout.regions.staging.addr_range();
        let data = mcu.layout.regions.untrusted_data.addr_range();
        let mut rt = TeeRuntime::new(
            hub().public_bytes(),
            FlashWritePolicy::new(vec![staging, data], 8, HW),
            MARGIN,
            false,
        );
        rt.awdt_init(&mut mcu, hub().public_bytes(), total, HW).unwrap();
        (rt, mcu)
    }

    fn sign_deferral(nonce: [u8; 32], ms: u32) -> DeferralTicket {
        let preimage = signing_bytes(MessageType::DeferralResp, &nonce, &ms.to_le_bytes());
        DeferralTicket {
            nonce,
            deferral_ms: ms,
            signature: sign(&hub(), &preimage),
        }
    }

    /// Steps the pair until the hardware watchdog expires; returns the expiry
    /// tick and the number of warn services performed.
    fn run_to_expiry(rt: &mut TeeRuntime, mcu: &mut McuState, start: u64) -> (u64, u32) {
        let mut now = start;
        let mut services = 0;
        loop {
            let dt = mcu.ticks_until_wdt_event().expect("wdt running");
            now += dt;
            for ev in mcu.tick(dt) {
                match ev {
                    WdtEvent::WarnInterrupt => {
                        if rt.on_wdt_warn(mcu) == WarnOutcome::Serviced {
                            services += 1;
                        }
                    }
                    WdtEvent::HardReset => return (now, services),
                }
            }
        }
    }

    #[test]
    fn ten_minute_target_services_ten_times_resets_at_660k() {
        let (mut rt, mut mcu) = setup(600_000);
        assert_eq!(rt.awdt.counter, 10);
        let (expiry, services) = run_to_expiry(&mut rt, &mut mcu, 0);
        assert_eq!(services, 10);
        assert_eq!(expiry, 660_000);
    }

    #[test]
    fn zero_counter_lets_first_countdown_expire() {
        let (mut rt, mut mcu) = setup(600_000);
        rt.awdt.counter = 0;
        let (expiry, services) = run_to_expiry(&mut rt, &mut mcu, 0);
        assert_eq!(services, 0);
        assert_eq!(expiry, 60_000);
    }

    #[test]
    fn double_init_is_a_fault() {
        let (mut rt, mut mcu) = setup(600_000);
        assert_eq!(
            rt.awdt_init(&mut mcu, hub().public_bytes(), 600_000, HW),
            Err(FaultKind::RuntimeViolation)
        );
        assert!(mcu.pending_reset().is_some());
    }

    #[test]
    fn nonce_slot_is_single_entry_latest_wins() {
        let (mut rt, mut mcu) = setup(600_000);
        let n1 = rt.awdt_get_nonce(&mut mcu).unwrap();
        assert_eq!(rt.awdt.pending_nonce, Some(n1));
        let ticket1 = sign_deferral(n1, 600_000);
        let n2 = rt.awdt_get_nonce(&mut mcu).unwrap();
        assert_ne!(n1, n2);
        // The first ticket was invalidated by the second nonce draw.
        assert_eq!(
            rt.awdt_put_ticket(&mut mcu, &ticket1),
            TicketOutcome::Rejected(TicketReject::NonceMismatch)
        );
        let ticket2 = sign_deferral(n2, 600_000);
        assert_eq!(rt.awdt_put_ticket(&mut mcu, &ticket2), TicketOutcome::Accepted);
    }

    #[test]
    fn ticket_rejections_have_distinct_reasons() {
        let (mut rt, mut mcu) = setup(600_000);
        let nonce = rt.awdt_get_nonce(&mut mcu).unwrap();

        let zero = sign_deferral(nonce, 0);
        assert_eq!(
            rt.awdt_put_ticket(&mut mcu, &zero),
            TicketOutcome::Rejected(TicketReject::ZeroDeferral)
        );

        let attacker = derive_keypair(&Key256([0x13; 32]), b"attacker");
        let preimage = signing_bytes(MessageType::DeferralResp, &nonce, &600_000u32.to_le_bytes());
        let forged = DeferralTicket {
            nonce,
            deferral_ms: 600_000,
            signature: sign(&attacker, &preimage),
        };
        assert_eq!(
            rt.awdt_put_ticket(&mut mcu, &forged),
            TicketOutcome::Rejected(TicketReject::BadSignature)
        );

        let good = sign_deferral(nonce, 600_000);
        assert_eq!(rt.awdt_put_ticket(&mut mcu, &good), TicketOutcome::Accepted);
        // Replay: nonce was consumed on acceptance.
        assert_eq!(
            rt.awdt_put_ticket(&mut mcu, &good),
            TicketOutcome::Rejected(TicketReject::NonceMismatch)
        );
    }

    #[test]
    fn accepted_ticket_re_anchors_the_schedule() {
        let (mut rt, mut mcu) = setup(600_000);
        // Advance into the first countdown, then accept a ticket at t.
        let t = 20_000;
        assert!(mcu.tick(t).is_empty());
        let nonce = rt.awdt_get_nonce(&mut mcu).unwrap();
        let ticket = sign_deferral(nonce, 600_000);
        assert_eq!(rt.awdt_put_ticket(&mut mcu, &ticket), TicketOutcome::Accepted);
        assert_eq!(rt.awdt.counter, 10);
        let (expiry, services) = run_to_expiry(&mut rt, &mut mcu, t);
        assert_eq!(services, 10);
        assert_eq!(expiry, t + 660_000);
    }

    #[test]
    fn guaranteed_reset_bound_over_random_adversarial_schedules() {
        use rand_core::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0xBADC0DE);

        for _ in 0..300 {
            let (mut rt, mut mcu) = setup(600_000);
            let mut now = 0u64;
            let mut last_accept = 0u64;
            let mut counter_at_accept = rt.awdt.counter;
            // Random interleaving of garbage tickets, nonce draws, valid
            // tickets, and idle gaps.
            for _ in 0..(rng.next_u32() % 20) {
                let gap = (rng.next_u64() % 50_000) + 1;
                let mut advanced = 0;
                while advanced < gap {
                    let until = mcu.ticks_until_wdt_event().unwrap_or(gap - advanced);
                    let step = until.min(gap - advanced);
                    let events = mcu.tick(step);
                    advanced += step;
                    now += step;
                    let mut expired = false;
                    for ev in events {
                        match ev {
                            WdtEvent::WarnInterrupt => {
                                rt.on_wdt_warn(&mut mcu);
                            }
                            WdtEvent::HardReset => expired = true,
                        }
                    }
                    if expired {
                        let bound = (counter_at_accept as u64 + 1) * HW + MARGIN;
                        assert!(now <= last_accept + bound, "reset after the bound");
                        return;
                    }
                }
                match rng.next_u32() % 4 {
                    0 => {
                        let _ = rt.awdt_get_nonce(&mut mcu);
                    }
                    1 => {
                        let mut junk = [0u8; 32];
                        rng.fill_bytes(&mut junk);
                        let bad = DeferralTicket {
                            nonce: junk,
                            deferral_ms: 600_000,
                            signature: [0xEE; 64],
                        };
                        assert!(matches!(
                            rt.awdt_put_ticket(&mut mcu, &bad),
                            TicketOutcome::Rejected(_)
                        ));
                    }
                    2 => {
                        let nonce = rt.awdt_get_nonce(&mut mcu).unwrap();
                        let good = sign_deferral(nonce, 600_000);
                        assert_eq!(rt.awdt_put_ticket(&mut mcu, &good), TicketOutcome::Accepted);
                        last_accept = now;
                        counter_at_accept = rt.awdt.counter;
                    }
                    _ => {}
                }
            }
            // No further ticket activity: the device must reset within the bound.
            let (expiry, _) = run_to_expiry(&mut rt, &mut mcu, now);
            let bound = (counter_at_accept as u64 + 1) * HW + MARGIN;
            assert!(expiry <= last_accept + bound, "reset after the bound");
        }
    }

    #[test]
    fn flash_handler_region_and_rate_checks() {
        let (mut rt, mut mcu) = setup(600_000);
        let staging = mcu.layout.regions.staging.addr_range();
        let core = mcu.layout.regions.lz_core.addr_range();

        assert!(rt.handler_flash_write(&mut mcu, 0, staging.start, b"ticket-bytes").is_ok());
        assert_eq!(
            rt.handler_flash_write(&mut mcu, 0, core.start, b"overwrite"),
            Err(WriteDenied::Region)
        );
        // Straddling out of the allowed range is a region denial too.
        assert_eq!(
            rt.handler_flash_write(&mut mcu, 0, staging.end - 2, b"spill"),
            Err(WriteDenied::Region)
        );

        // Exhaust the 8-page budget within one window.
        for i in 1..8 {
            rt.handler_flash_write(&mut mcu, 10, staging.start + i * PAGE_SIZE as u32, b"x")
                .unwrap();
        }
        assert_eq!(
            rt.handler_flash_write(&mut mcu, 10, staging.start, b"over budget"),
            Err(WriteDenied::RateLimit)
        );
        assert!(mcu.pending_reset().is_some());

        // A new window resets the count.
        mcu.take_pending_reset();
        assert!(rt.handler_flash_write(&mut mcu, HW + 1, staging.start, b"fresh").is_ok());
    }

    #[test]
    fn power_handler_blocks_states_that_stop_the_wdt() {
        let (mut rt, mut mcu) = setup(600_000);
        assert!(rt.handler_power_request(&mut mcu, PowerState::Sleep).is_ok());
        assert_eq!(mcu.power, PowerState::Sleep);
        assert!(mcu.ticks_until_wdt_event().is_some());
        assert_eq!(rt.handler_power_request(&mut mcu, PowerState::DeepSleep), Err(()));
        assert_eq!(rt.handler_power_request(&mut mcu, PowerState::PowerDown), Err(()));
        assert_eq!(mcu.power, PowerState::Sleep);
    }

    #[test]
    fn gateway_unknown_id_faults_malformed_args_do_not() {
        let (mut rt, mut mcu) = setup(600_000);
        assert_eq!(
            gateway_call(&mut rt, &mut mcu, 0, 0xDEAD, &[]),
            Err(GatewayFault::UnknownCall)
        );
        assert!(mcu.pending_reset().is_some());
        mcu.take_pending_reset();

        assert_eq!(
            gateway_call(&mut rt, &mut mcu, 0, GW_AWDT_PUT_TICKET, &[0; 5]),
            Err(GatewayFault::BadArgument)
        );
        assert!(mcu.pending_reset().is_none());
    }

    #[test]
    fn gateway_round_trips_nonce_and_ticket() {
        let (mut rt, mut mcu) = setup(600_000);
        let nonce_bytes = gateway_call(&mut rt, &mut mcu, 0, GW_AWDT_GET_NONCE, &[]).unwrap();
        assert_eq!(nonce_bytes.len(), 32);
        let mut nonce = [0u8; 32];
        nonce.copy_from_slice(&nonce_bytes);
        let ticket = sign_deferral(nonce, 120_000);
        let mut arg = Vec::new();
        arg.extend_from_slice(&ticket.nonce);
        arg.extend_from_slice(&ticket.deferral_ms.to_le_bytes());
        arg.extend_from_slice(&ticket.signature);
        assert_eq!(
            gateway_call(&mut rt, &mut mcu, 0, GW_AWDT_PUT_TICKET, &arg),
            Ok(vec![0])
        );
        assert_eq!(rt.awdt.counter, 2);
    }

    #[test]
    fn ns_awdt_init_mode_is_off_by_default() {
        let (mut rt, mut mcu) = setup(600_000);
        let mut arg = vec![0u8; 72];
        arg[64..].copy_from_slice(&600_000u64.to_le_bytes());
        assert_eq!(
            gateway_call(&mut rt, &mut mcu, 0, GW_AWDT_INIT, &arg),
            Ok(vec![1])
        );
    }
}
