//! Simulated trusted boundary for operator code.
//!
//! Nothing here talks to real enclave hardware. The boundary is modeled as:
//! authenticated encryption of every event crossing it ([`SecureChannels`]),
//! sealing of state snapshots under an operator-wide key ([`EnclaveContext::seal`]),
//! a resident-memory budget with sealed eviction ([`PagedStateStore`]), and
//! attestation as equality of a code-identity measurement.
//!
//! Cipher: ChaCha20-Poly1305 (256-bit key, 96-bit nonce, 128-bit tag).

use std::collections::BTreeMap;
use std::fmt;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::event::Event;
use crate::runtime::{
    snapshot_header, Cursor, Entries, Params, RuntimeError, StateSnapshot, StateStore, StoreError,
    SNAPSHOT_HEADER_LEN,
};

/// 128 MiB, the protected page cache size of first-generation enclaves.
pub const DEFAULT_MEMORY_BUDGET: u64 = 128 * 1024 * 1024;
/// Accounting granularity for resident pages.
pub const DEFAULT_PAGE_FRAME: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("authentication failed")]
    AuthenticationFailure,
    #[error("replayed message from peer {peer}: counter {counter} <= {last}")]
    ReplayDetected { peer: u64, counter: u64, last: u64 },
    #[error("page of {size} bytes exceeds memory budget {budget}")]
    PageTooLarge { size: u64, budget: u64 },
    #[error("no channel key for peer {0}")]
    UnknownPeer(u64),
    #[error("malformed sealed blob")]
    Malformed,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; 32]);

impl SecretKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SecretKey(bytes)
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.0))
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(<redacted>)")
    }
}

/// Identity of a channel endpoint: an enclave, a meter gateway or a sink.
pub type PeerId = u64;

/// Derives all pre-shared key material for a run from one seed.
#[derive(Clone)]
pub struct KeyProvisioner {
    seed: Vec<u8>,
}

impl fmt::Debug for KeyProvisioner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyProvisioner(<redacted>)")
    }
}

impl KeyProvisioner {
    pub fn new(seed: impl AsRef<[u8]>) -> Self {
        KeyProvisioner {
            seed: seed.as_ref().to_vec(),
        }
    }

    fn derive(&self, label: &[u8], ids: &[u64]) -> SecretKey {
        let mut h = Sha256::new();
        h.update(&self.seed);
        h.update(label);
        for id in ids {
            h.update(id.to_be_bytes());
        }
        SecretKey(h.finalize().into())
    }

    /// Shared by every replica of the operator so snapshots can move.
    pub fn sealing_key(&self, op_id: u64) -> SecretKey {
        self.derive(b"seal", &[op_id])
    }

    /// Symmetric per unordered peer pair.
    pub fn channel_key(&self, a: PeerId, b: PeerId) -> SecretKey {
        self.derive(b"chan", &[a.min(b), a.max(b)])
    }
}

/// `code identity || 0 || k=v;...` hashed; params in key order.
pub fn measure(logic_id: &str, params: &Params) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(logic_id.as_bytes());
    h.update([0u8]);
    for (k, v) in params {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b";");
    }
    h.finalize().into()
}

/// Authenticated ciphertext plus the associated data it is bound to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub nonce: [u8; 12],
    pub associated_data: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
}

impl SealedBlob {
    fn seal(key: &SecretKey, nonce: [u8; 12], associated_data: Vec<u8>, plaintext: &[u8]) -> Self {
        let mut buf = plaintext.to_vec();
        let tag = key
            .cipher()
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), &associated_data, &mut buf)
            .expect("plaintext within cipher limits");
        SealedBlob {
            nonce,
            associated_data,
            ciphertext: buf,
            tag: tag.into(),
        }
    }

    fn open(&self, key: &SecretKey) -> Result<Vec<u8>, EnclaveError> {
        let mut buf = self.ciphertext.clone();
        key.cipher()
            .decrypt_in_place_detached(
                Nonce::from_slice(&self.nonce),
                &self.associated_data,
                &mut buf,
                Tag::from_slice(&self.tag),
            )
            .map_err(|_| EnclaveError::AuthenticationFailure)?;
        Ok(buf)
    }

    /// nonce ‖ u32 AD length ‖ AD ‖ u32 ciphertext length ‖ ciphertext ‖ tag
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            12 + 4 + self.associated_data.len() + 4 + self.ciphertext.len() + 16,
        );
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.associated_data.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.associated_data);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<SealedBlob, EnclaveError> {
        let mut cur = Cursor::new(bytes);
        let nonce: [u8; 12] = cur
            .take(12)
            .ok_or(EnclaveError::Malformed)?
            .try_into()
            .unwrap();
        let ad_len = cur.u32().ok_or(EnclaveError::Malformed)? as usize;
        let associated_data = cur.take(ad_len).ok_or(EnclaveError::Malformed)?.to_vec();
        let ct_len = cur.u32().ok_or(EnclaveError::Malformed)? as usize;
        let ciphertext = cur.take(ct_len).ok_or(EnclaveError::Malformed)?.to_vec();
        let tag: [u8; 16] = cur
            .take(16)
            .ok_or(EnclaveError::Malformed)?
            .try_into()
            .unwrap();
        if !cur.is_empty() {
            return Err(EnclaveError::Malformed);
        }
        Ok(SealedBlob {
            nonce,
            associated_data,
            ciphertext,
            tag,
        })
    }
}

/// Per-peer authenticated channels with a monotone nonce counter that
/// doubles as transport-level replay detection.
#[derive(Debug, Clone)]
pub struct SecureChannels {
    me: PeerId,
    keys: BTreeMap<PeerId, SecretKey>,
    sent: BTreeMap<PeerId, u64>,
    received: BTreeMap<PeerId, u64>,
}

impl SecureChannels {
    pub fn new(me: PeerId) -> Self {
        SecureChannels {
            me,
            keys: BTreeMap::new(),
            sent: BTreeMap::new(),
            received: BTreeMap::new(),
        }
    }

    pub fn me(&self) -> PeerId {
        self.me
    }

    pub fn add_peer(&mut self, peer: PeerId, key: SecretKey) {
        self.keys.insert(peer, key);
    }

    pub fn has_peer(&self, peer: PeerId) -> bool {
        self.keys.contains_key(&peer)
    }

    fn channel_ad(from: PeerId, to: PeerId) -> Vec<u8> {
        let mut ad = Vec::with_capacity(16);
        ad.extend_from_slice(&from.to_be_bytes());
        ad.extend_from_slice(&to.to_be_bytes());
        ad
    }

    fn nonce(from: PeerId, to: PeerId, counter: u64) -> [u8; 12] {
        // Both directions share the key; the first byte separates them.
        let mut nonce = [0u8; 12];
        nonce[0] = if from < to { 1 } else { 2 };
        nonce[4..].copy_from_slice(&counter.to_be_bytes());
        nonce
    }

    pub fn encrypt_event(&mut self, event: &Event, to: PeerId) -> Result<Vec<u8>, EnclaveError> {
        let key = self.keys.get(&to).ok_or(EnclaveError::UnknownPeer(to))?;
        let counter = self.sent.entry(to).or_insert(0);
        *counter += 1;
        let blob = SealedBlob::seal(
            key,
            Self::nonce(self.me, to, *counter),
            Self::channel_ad(self.me, to),
            &event.encode(),
        );
        Ok(blob.encode())
    }

    pub fn decrypt_event(&mut self, wire: &[u8], from: PeerId) -> Result<Event, EnclaveError> {
        let key = self
            .keys
            .get(&from)
            .ok_or(EnclaveError::UnknownPeer(from))?;
        let blob = SealedBlob::decode(wire).map_err(|_| EnclaveError::AuthenticationFailure)?;
        if blob.associated_data != Self::channel_ad(from, self.me) {
            return Err(EnclaveError::AuthenticationFailure);
        }
        let plain = blob.open(key)?;
        let counter = u64::from_be_bytes(blob.nonce[4..].try_into().unwrap());
        let last = self.received.get(&from).copied().unwrap_or(0);
        if counter <= last {
            return Err(EnclaveError::ReplayDetected {
                peer: from,
                counter,
                last,
            });
        }
        let event = Event::decode_exact(&plain).map_err(|_| EnclaveError::AuthenticationFailure)?;
        self.received.insert(from, counter);
        Ok(event)
    }
}

/// Key material, memory budget and measurement for one simulated enclave.
#[derive(Debug, Clone)]
pub struct EnclaveContext {
    pub enclave_id: u32,
    sealing_key: SecretKey,
    pub channels: SecureChannels,
    pub memory_budget_bytes: u64,
    pub measurement: [u8; 32],
    seal_counter: u64,
}

impl EnclaveContext {
    pub fn new(
        enclave_id: u32,
        peer: PeerId,
        sealing_key: SecretKey,
        memory_budget_bytes: u64,
        measurement: [u8; 32],
    ) -> Self {
        EnclaveContext {
            enclave_id,
            sealing_key,
            channels: SecureChannels::new(peer),
            memory_budget_bytes,
            measurement,
            seal_counter: 0,
        }
    }

    /// Enclave id prefix keeps nonces unique among contexts sharing a
    /// sealing key.
    fn next_seal_nonce(&mut self) -> [u8; 12] {
        self.seal_counter += 1;
        let mut nonce = [0u8; 12];
        nonce[..4].copy_from_slice(&self.enclave_id.to_be_bytes());
        nonce[4..].copy_from_slice(&self.seal_counter.to_be_bytes());
        nonce
    }

    fn seal_bytes(&mut self, associated_data: Vec<u8>, plaintext: &[u8]) -> SealedBlob {
        let nonce = self.next_seal_nonce();
        SealedBlob::seal(&self.sealing_key, nonce, associated_data, plaintext)
    }

    fn open_bytes(&self, blob: &SealedBlob) -> Result<Vec<u8>, EnclaveError> {
        blob.open(&self.sealing_key)
    }

    /// Seals the snapshot file encoding; the snapshot header is the
    /// associated data, binding the blob to its operator partition.
    pub fn seal(&mut self, snapshot: &StateSnapshot) -> SealedBlob {
        self.seal_bytes(snapshot.header_bytes(), &snapshot.encode())
    }

    /// Opens a sealed snapshot meant for `(op_id, partition)`.
    pub fn unseal(
        &self,
        blob: &SealedBlob,
        op_id: u64,
        partition: u32,
    ) -> Result<StateSnapshot, EnclaveError> {
        let ad = &blob.associated_data;
        if ad.len() != SNAPSHOT_HEADER_LEN
            || ad[..SNAPSHOT_HEADER_LEN - 8]
                != snapshot_header(op_id, partition, 0)[..SNAPSHOT_HEADER_LEN - 8]
        {
            return Err(EnclaveError::AuthenticationFailure);
        }
        let plain = self.open_bytes(blob)?;
        let snapshot =
            StateSnapshot::decode(&plain).map_err(|_| EnclaveError::AuthenticationFailure)?;
        if snapshot.header_bytes() != *ad {
            return Err(EnclaveError::AuthenticationFailure);
        }
        Ok(snapshot)
    }

    /// Decodes and opens a sealed snapshot received as bytes. Damage that
    /// breaks the framing is reported like any other tampering.
    pub fn unseal_bytes(
        &self,
        bytes: &[u8],
        op_id: u64,
        partition: u32,
    ) -> Result<StateSnapshot, EnclaveError> {
        let blob = SealedBlob::decode(bytes).map_err(|_| EnclaveError::AuthenticationFailure)?;
        self.unseal(&blob, op_id, partition)
    }

    pub fn attest(&self, expected_measurement: &[u8; 32]) -> bool {
        self.measurement == *expected_measurement
    }
}

/// Which resident page to give up when the budget is exceeded.
pub trait EvictionPolicy: fmt::Debug + Send {
    fn name(&self) -> &'static str;
    /// The page was inserted or accessed.
    fn touch(&mut self, key: &[u8]);
    fn forget(&mut self, key: &[u8]);
    fn victim(&self, exclude: &[u8]) -> Option<Vec<u8>>;
}

#[derive(Debug, Default)]
pub struct Lru {
    tick: u64,
    order: BTreeMap<u64, Vec<u8>>,
    ticks: BTreeMap<Vec<u8>, u64>,
}

impl EvictionPolicy for Lru {
    fn name(&self) -> &'static str {
        "lru"
    }

    fn touch(&mut self, key: &[u8]) {
        self.forget(key);
        self.tick += 1;
        self.order.insert(self.tick, key.to_vec());
        self.ticks.insert(key.to_vec(), self.tick);
    }

    fn forget(&mut self, key: &[u8]) {
        if let Some(t) = self.ticks.remove(key) {
            self.order.remove(&t);
        }
    }

    fn victim(&self, exclude: &[u8]) -> Option<Vec<u8>> {
        self.order
            .values()
            .find(|k| k.as_slice() != exclude)
            .cloned()
    }
}

/// Evicts in insertion order regardless of later accesses.
#[derive(Debug, Default)]
pub struct Fifo {
    inner: Lru,
}

impl EvictionPolicy for Fifo {
    fn name(&self) -> &'static str {
        "fifo"
    }

    fn touch(&mut self, key: &[u8]) {
        if !self.inner.ticks.contains_key(key) {
            self.inner.touch(key);
        }
    }

    fn forget(&mut self, key: &[u8]) {
        self.inner.forget(key);
    }

    fn victim(&self, exclude: &[u8]) -> Option<Vec<u8>> {
        self.inner.victim(exclude)
    }
}

pub fn policy_by_name(name: &str) -> Option<Box<dyn EvictionPolicy>> {
    match name {
        "lru" => Some(Box::new(Lru::default())),
        "fifo" => Some(Box::new(Fifo::default())),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PagingStats {
    pub evictions: u64,
    pub faults: u64,
    pub resident_bytes: u64,
    pub peak_resident_bytes: u64,
}

/// Keyed pages held under a byte budget; pages that do not fit are sealed
/// into an untrusted backing map. A page lives in exactly one of the two.
#[derive(Debug)]
pub struct PagedStateStore {
    resident: BTreeMap<Vec<u8>, Vec<u8>>,
    backing: BTreeMap<Vec<u8>, SealedBlob>,
    policy: Box<dyn EvictionPolicy>,
    budget: u64,
    frame: u64,
    stats: PagingStats,
}

impl PagedStateStore {
    /// `frame` rounds every page's charge up to a multiple of it; 0 charges
    /// exact byte sizes.
    pub fn new(budget: u64, frame: u64, policy: Box<dyn EvictionPolicy>) -> Self {
        assert!(budget > 0, "memory budget must be positive");
        PagedStateStore {
            resident: BTreeMap::new(),
            backing: BTreeMap::new(),
            policy,
            budget,
            frame,
            stats: PagingStats::default(),
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn stats(&self) -> PagingStats {
        self.stats
    }

    pub fn policy_name(&self) -> &'static str {
        self.policy.name()
    }

    pub fn is_resident(&self, key: &[u8]) -> bool {
        self.resident.contains_key(key)
    }

    pub fn backing_blobs(&self) -> impl Iterator<Item = &SealedBlob> {
        self.backing.values()
    }

    pub fn page_count(&self) -> usize {
        self.resident.len() + self.backing.len()
    }

    fn charge(&self, len: usize) -> u64 {
        let len = len as u64;
        if self.frame == 0 {
            len
        } else {
            len.max(1).div_ceil(self.frame) * self.frame
        }
    }

    fn page_ad(ctx: &EnclaveContext, key: &[u8]) -> Vec<u8> {
        let mut ad = b"PAGE".to_vec();
        ad.extend_from_slice(&ctx.enclave_id.to_be_bytes());
        ad.extend_from_slice(key);
        ad
    }

    fn note_resident(&mut self) {
        debug_assert!(self.stats.resident_bytes <= self.budget);
        self.stats.peak_resident_bytes = self
            .stats
            .peak_resident_bytes
            .max(self.stats.resident_bytes);
    }

    /// Evicts pages other than `keep` until `incoming` more bytes fit.
    fn make_room(&mut self, ctx: &mut EnclaveContext, incoming: u64, keep: &[u8]) {
        while self.stats.resident_bytes + incoming > self.budget {
            let victim = self
                .policy
                .victim(keep)
                .expect("pages resident while over budget");
            let page = self
                .resident
                .remove(&victim)
                .expect("policy tracks resident pages");
            self.policy.forget(&victim);
            self.stats.resident_bytes -= self.charge(page.len());
            let blob = ctx.seal_bytes(Self::page_ad(ctx, &victim), &page);
            self.backing.insert(victim, blob);
            self.stats.evictions += 1;
        }
    }

    pub fn get(
        &mut self,
        ctx: &mut EnclaveContext,
        key: &[u8],
    ) -> Result<Option<Vec<u8>>, EnclaveError> {
        if let Some(page) = self.resident.get(key) {
            let page = page.clone();
            self.policy.touch(key);
            return Ok(Some(page));
        }
        let Some(blob) = self.backing.get(key) else {
            return Ok(None);
        };
        if blob.associated_data != Self::page_ad(ctx, key) {
            return Err(EnclaveError::AuthenticationFailure);
        }
        let page = ctx.open_bytes(blob)?;
        self.backing.remove(key);
        self.stats.faults += 1;
        let charge = self.charge(page.len());
        self.make_room(ctx, charge, key);
        self.stats.resident_bytes += charge;
        self.resident.insert(key.to_vec(), page.clone());
        self.policy.touch(key);
        self.note_resident();
        Ok(Some(page))
    }

    pub fn put(
        &mut self,
        ctx: &mut EnclaveContext,
        key: &[u8],
        page: Vec<u8>,
    ) -> Result<(), EnclaveError> {
        let charge = self.charge(page.len());
        if charge > self.budget {
            return Err(EnclaveError::PageTooLarge {
                size: page.len() as u64,
                budget: self.budget,
            });
        }
        if let Some(old) = self.resident.remove(key) {
            self.stats.resident_bytes -= self.charge(old.len());
        }
        self.backing.remove(key);
        self.make_room(ctx, charge, key);
        self.stats.resident_bytes += charge;
        self.resident.insert(key.to_vec(), page);
        self.policy.touch(key);
        self.note_resident();
        Ok(())
    }

    pub fn remove(&mut self, key: &[u8]) {
        if let Some(old) = self.resident.remove(key) {
            self.stats.resident_bytes -= self.charge(old.len());
            self.policy.forget(key);
        }
        self.backing.remove(key);
    }

    /// Every page in key order, without changing residency.
    pub fn entries(&self, ctx: &EnclaveContext) -> Result<Entries, EnclaveError> {
        let mut all: BTreeMap<Vec<u8>, Vec<u8>> = self.resident.clone();
        for (key, blob) in &self.backing {
            if blob.associated_data != Self::page_ad(ctx, key) {
                return Err(EnclaveError::AuthenticationFailure);
            }
            all.insert(key.clone(), ctx.open_bytes(blob)?);
        }
        Ok(all.into_iter().collect())
    }

    pub fn clear(&mut self) {
        for key in self.resident.keys() {
            self.policy.forget(key);
        }
        self.resident.clear();
        self.backing.clear();
        self.stats.resident_bytes = 0;
    }

    #[cfg(test)]
    fn backing_mut(&mut self) -> &mut BTreeMap<Vec<u8>, SealedBlob> {
        &mut self.backing
    }
}

/// An operator's state store inside the simulated enclave.
#[derive(Debug)]
pub struct EnclaveStore {
    pub ctx: EnclaveContext,
    pub pages: PagedStateStore,
}

impl EnclaveStore {
    pub fn new(ctx: EnclaveContext, frame: u64, policy: Box<dyn EvictionPolicy>) -> Self {
        let pages = PagedStateStore::new(ctx.memory_budget_bytes, frame, policy);
        EnclaveStore { ctx, pages }
    }
}

impl StateStore for EnclaveStore {
    fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        Ok(self.pages.get(&mut self.ctx, key)?)
    }

    fn put(&mut self, key: &[u8], value: Vec<u8>) -> Result<(), StoreError> {
        Ok(self.pages.put(&mut self.ctx, key, value)?)
    }

    fn remove(&mut self, key: &[u8]) -> Result<(), StoreError> {
        self.pages.remove(key);
        Ok(())
    }

    fn entries(&mut self) -> Result<Vec<(Vec<u8>, Vec<u8>)>, StoreError> {
        Ok(self.pages.entries(&self.ctx)?)
    }

    fn clear(&mut self) -> Result<(), StoreError> {
        self.pages.clear();
        Ok(())
    }
}

impl From<EnclaveError> for RuntimeError {
    fn from(e: EnclaveError) -> Self {
        RuntimeError::Store(StoreError::Enclave(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{SourceId, Timestamp, TimestampVector};
    use proptest::prelude::*;

    fn ctx(id: u32, budget: u64) -> EnclaveContext {
        let keys = KeyProvisioner::new("test");
        EnclaveContext::new(id, id as u64, keys.sealing_key(1), budget, [0; 32])
    }

    fn snapshot(partition: u32) -> StateSnapshot {
        let mut tv = TimestampVector::new();
        tv.advance(SourceId(1), Timestamp(50));
        let body = StateSnapshot {
            op_id: 1,
            partition,
            tv,
            out_seq: 3,
            user_state: b"SECRET-STATE".to_vec(),
            state_hash: [0; 32],
        };
        // Round-trip through encode/decode to get a valid hash.
        let mut bytes = body.encode();
        let n = bytes.len();
        let digest: [u8; 32] = Sha256::digest(&bytes[..n - 32]).into();
        bytes[n - 32..].copy_from_slice(&digest);
        StateSnapshot::decode(&bytes).unwrap()
    }

    #[test]
    fn seal_unseal_round_trip() {
        let mut c = ctx(1, 1024);
        let snap = snapshot(0);
        let blob = c.seal(&snap);
        let back = c.unseal(&blob, 1, 0).unwrap();
        assert_eq!(back.state_hash, snap.state_hash);
        let decoded = SealedBlob::decode(&blob.encode()).unwrap();
        assert_eq!(decoded, blob);
    }

    #[test]
    fn flipped_ciphertext_bit_fails_authentication() {
        let mut c = ctx(1, 1024);
        let mut blob = c.seal(&snapshot(0));
        blob.ciphertext[3] ^= 0x10;
        assert_eq!(
            c.unseal(&blob, 1, 0),
            Err(EnclaveError::AuthenticationFailure)
        );
    }

    #[test]
    fn blob_is_bound_to_its_partition() {
        let mut c = ctx(1, 1024);
        let mut blob = c.seal(&snapshot(0));
        assert_eq!(
            c.unseal(&blob, 1, 1),
            Err(EnclaveError::AuthenticationFailure)
        );
        blob.associated_data = snapshot(1).header_bytes();
        assert_eq!(
            c.unseal(&blob, 1, 1),
            Err(EnclaveError::AuthenticationFailure)
        );
    }

    #[test]
    fn fresh_nonces_per_seal() {
        let mut c = ctx(1, 1024);
        let snap = snapshot(0);
        let a = c.seal(&snap);
        let b = c.seal(&snap);
        assert_ne!(a.ciphertext, b.ciphertext);
        assert!(c.unseal(&a, 1, 0).is_ok());
        assert!(c.unseal(&b, 1, 0).is_ok());
    }

    #[test]
    fn other_replica_with_shared_key_can_unseal() {
        let mut a = ctx(1, 1024);
        let b = ctx(2, 1024);
        let blob = a.seal(&snapshot(0));
        assert!(b.unseal(&blob, 1, 0).is_ok());
        let wrong = EnclaveContext::new(
            3,
            3,
            KeyProvisioner::new("other").sealing_key(1),
            1024,
            [0; 32],
        );
        assert_eq!(
            wrong.unseal(&blob, 1, 0),
            Err(EnclaveError::AuthenticationFailure)
        );
    }

    #[test]
    fn blob_layout() {
        let blob = SealedBlob {
            nonce: [7; 12],
            associated_data: vec![1, 2],
            ciphertext: vec![9, 9, 9],
            tag: [5; 16],
        };
        let bytes = blob.encode();
        assert_eq!(&bytes[..12], &[7; 12]);
        assert_eq!(&bytes[12..16], &2u32.to_be_bytes());
        assert_eq!(&bytes[16..18], &[1, 2]);
        assert_eq!(&bytes[18..22], &3u32.to_be_bytes());
        assert_eq!(&bytes[22..25], &[9, 9, 9]);
        assert_eq!(&bytes[25..], &[5; 16]);
    }

    fn channel_pair() -> (SecureChannels, SecureChannels, SecureChannels) {
        let keys = KeyProvisioner::new("net");
        let mut a = SecureChannels::new(10);
        let mut b = SecureChannels::new(20);
        let mut c = SecureChannels::new(30);
        a.add_peer(20, keys.channel_key(10, 20));
        a.add_peer(30, keys.channel_key(10, 30));
        b.add_peer(10, keys.channel_key(10, 20));
        c.add_peer(10, keys.channel_key(10, 30));
        (a, b, c)
    }

    fn event() -> Event {
        Event::data(
            SourceId(4),
            Timestamp(8),
            b"plug".to_vec(),
            b"payload".to_vec(),
        )
    }

    #[test]
    fn event_round_trip_and_replay() {
        let (mut a, mut b, _) = channel_pair();
        let wire = a.encrypt_event(&event(), 20).unwrap();
        assert_eq!(b.decrypt_event(&wire, 10).unwrap(), event());
        assert!(matches!(
            b.decrypt_event(&wire, 10),
            Err(EnclaveError::ReplayDetected { .. })
        ));
        let wire2 = a.encrypt_event(&event(), 20).unwrap();
        assert_eq!(b.decrypt_event(&wire2, 10).unwrap(), event());
    }

    #[test]
    fn message_for_other_peer_fails_authentication() {
        let (mut a, _, mut c) = channel_pair();
        let wire = a.encrypt_event(&event(), 20).unwrap();
        assert_eq!(
            c.decrypt_event(&wire, 10),
            Err(EnclaveError::AuthenticationFailure)
        );
    }

    #[test]
    fn both_directions_use_distinct_nonces() {
        let (mut a, mut b, _) = channel_pair();
        let ab = SealedBlob::decode(&a.encrypt_event(&event(), 20).unwrap()).unwrap();
        let ba = SealedBlob::decode(&b.encrypt_event(&event(), 10).unwrap()).unwrap();
        assert_ne!(ab.nonce, ba.nonce);
        assert_eq!(a.decrypt_event(&ba.encode(), 20).unwrap(), event());
    }

    #[test]
    fn attestation_compares_measurements() {
        let mut params = Params::new();
        params.insert("window".into(), "4".into());
        let m = measure("forecast", &params);
        let c = EnclaveContext::new(1, 1, KeyProvisioner::new("x").sealing_key(1), 10, m);
        assert!(c.attest(&m));
        params.insert("window".into(), "5".into());
        assert!(!c.attest(&measure("forecast", &params)));
    }

    #[test]
    fn keys_are_redacted_in_debug_output() {
        let c = ctx(1, 10);
        let text = format!("{c:?}");
        assert!(text.contains("redacted"));
    }

    fn page(n: u8) -> Vec<u8> {
        vec![n; 10]
    }

    #[test]
    fn lru_three_pages_then_fault() {
        // Budget of three 10-byte pages, exact accounting.
        let mut c = ctx(1, 30);
        let mut store = PagedStateStore::new(30, 0, Box::new(Lru::default()));
        for k in 1..=4u8 {
            store.put(&mut c, &[k], page(k)).unwrap();
        }
        assert!(!store.is_resident(&[1]));
        assert_eq!(store.get(&mut c, &[1]).unwrap(), Some(page(1)));
        assert_eq!(store.stats().evictions, 2);
        assert_eq!(store.stats().faults, 1);
        assert!(!store.is_resident(&[2]));
    }

    #[test]
    fn single_page_never_evicts() {
        let mut c = ctx(1, 30);
        let mut store = PagedStateStore::new(30, 0, Box::new(Lru::default()));
        store.put(&mut c, b"a", page(1)).unwrap();
        for _ in 0..20 {
            store.get(&mut c, b"a").unwrap();
        }
        assert_eq!(store.stats().evictions, 0);
    }

    #[test]
    fn oversized_page_is_rejected() {
        let mut c = ctx(1, 30);
        let mut store = PagedStateStore::new(30, 0, Box::new(Lru::default()));
        assert!(matches!(
            store.put(&mut c, b"big", vec![0; 31]),
            Err(EnclaveError::PageTooLarge { .. })
        ));
    }

    #[test]
    fn frames_round_up_charges() {
        let mut c = ctx(1, 8192);
        let mut store = PagedStateStore::new(8192, 4096, Box::new(Lru::default()));
        store.put(&mut c, b"a", vec![1]).unwrap();
        assert_eq!(store.stats().resident_bytes, 4096);
        store.put(&mut c, b"b", vec![1; 4097]).unwrap();
        assert_eq!(store.stats().resident_bytes, 8192);
        assert_eq!(store.stats().evictions, 1);
        store.put(&mut c, b"c", vec![1]).unwrap();
        assert_eq!(store.stats().evictions, 2);
        assert!(store.put(&mut c, b"d", vec![1; 8193]).is_err());
    }

    #[test]
    fn fifo_ignores_accesses() {
        let mut c = ctx(1, 20);
        let mut store = PagedStateStore::new(20, 0, Box::new(Fifo::default()));
        store.put(&mut c, b"a", page(1)).unwrap();
        store.put(&mut c, b"b", page(2)).unwrap();
        store.get(&mut c, b"a").unwrap();
        store.put(&mut c, b"c", page(3)).unwrap();
        assert!(!store.is_resident(b"a"));
        assert!(store.is_resident(b"b"));
    }

    #[test]
    fn corrupted_backing_page_is_rejected() {
        let mut c = ctx(1, 10);
        let mut store = PagedStateStore::new(10, 0, Box::new(Lru::default()));
        store.put(&mut c, b"a", page(1)).unwrap();
        store.put(&mut c, b"b", page(2)).unwrap();
        store
            .backing_mut()
            .get_mut(b"a".as_slice())
            .unwrap()
            .ciphertext[0] ^= 1;
        assert_eq!(
            store.get(&mut c, b"a"),
            Err(EnclaveError::AuthenticationFailure)
        );
    }

    #[test]
    fn backing_pages_do_not_leak_plaintext() {
        let mut c = ctx(1, 32);
        let mut store = PagedStateStore::new(32, 0, Box::new(Lru::default()));
        store
            .put(&mut c, b"a", b"SENTINEL-abcdefghijklmnop".to_vec())
            .unwrap();
        store
            .put(&mut c, b"b", b"other-page-contents-xxxxx".to_vec())
            .unwrap();
        let blob = store.backing_blobs().next().unwrap().encode();
        assert!(!blob.windows(8).any(|w| w == b"SENTINEL"));
    }

    proptest! {
        #[test]
        fn budget_holds_and_contents_survive(
            ops in proptest::collection::vec((0u8..12, 0usize..40, any::<bool>()), 1..200),
            budget in 40u64..200,
        ) {
            let mut c = ctx(1, budget);
            let mut store = PagedStateStore::new(budget, 0, Box::new(Lru::default()));
            let mut model: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
            for (key, len, write) in ops {
                let key = vec![key];
                if write {
                    let value = vec![len as u8; len];
                    store.put(&mut c, &key, value.clone()).unwrap();
                    model.insert(key, value);
                } else {
                    prop_assert_eq!(store.get(&mut c, &key).unwrap(), model.get(&key).cloned());
                }
                prop_assert!(store.stats().resident_bytes <= budget);
                prop_assert_eq!(store.page_count(), model.len());
            }
            let entries: BTreeMap<_, _> = store.entries(&c).unwrap().into_iter().collect();
            prop_assert_eq!(entries, model);
        }
    }
}
