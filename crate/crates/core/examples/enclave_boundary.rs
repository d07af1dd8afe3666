//! Sealed snapshots, authenticated channels with replay detection, and a
//! state store paged under a small memory budget.

use elastream::enclave::{
    policy_by_name, EnclaveContext, EnclaveStore, KeyProvisioner, SecureChannels,
};
use elastream::event::{Event, SourceId, Timestamp};
use elastream::runtime::{MemStore, OperatorInstance, Params, StateStore};
use elastream::workloads::standard_registry;

fn main() {
    let keys = KeyProvisioner::new("demo-seed");

    // Channels between two enclaves.
    let mut alice = SecureChannels::new(1);
    let mut bob = SecureChannels::new(2);
    alice.add_peer(2, keys.channel_key(1, 2));
    bob.add_peer(1, keys.channel_key(1, 2));
    let event = Event::data(
        SourceId(4),
        Timestamp(17),
        b"plug-4".to_vec(),
        vec![1, 2, 3],
    );
    let wire = alice.encrypt_event(&event, 2).unwrap();
    println!("wire message: {} bytes", wire.len());
    println!(
        "first delivery: {:?}",
        bob.decrypt_event(&wire, 1).map(|e| e.ts)
    );
    println!("replayed:       {:?}", bob.decrypt_event(&wire, 1).err());
    let mut tampered = alice.encrypt_event(&event, 2).unwrap();
    tampered[20] ^= 1;
    println!(
        "tampered:       {:?}",
        bob.decrypt_event(&tampered, 1).err()
    );

    // Sealed snapshot bound to its operator partition.
    let logic = standard_registry()
        .build("counter", &Params::new())
        .unwrap();
    let mut op = OperatorInstance::new(3, 0, logic, MemStore::new(), 16);
    op.process(&event).unwrap();
    let mut ctx = EnclaveContext::new(1, 1, keys.sealing_key(3), 1 << 20, [0; 32]);
    let sealed = ctx.seal(&op.snapshot().unwrap()).encode();
    println!(
        "sealed snapshot opens for op 3/p0: {}",
        ctx.unseal_bytes(&sealed, 3, 0).is_ok()
    );
    println!(
        "and for op 3/p1: {:?}",
        ctx.unseal_bytes(&sealed, 3, 1).err()
    );

    // Paging: 16 KiB budget, 4 KiB frames.
    let ctx = EnclaveContext::new(2, 2, keys.sealing_key(3), 16 * 1024, [0; 32]);
    let mut store = EnclaveStore::new(ctx, 4096, policy_by_name("lru").unwrap());
    for i in 0..10u8 {
        store.put(&[i], vec![i; 3000]).unwrap();
    }
    assert_eq!(store.get(&[0]).unwrap(), Some(vec![0; 3000]));
    let stats = store.pages.stats();
    println!(
        "10 pages under 16 KiB: resident {} B, {} evictions, {} faults, {} sealed pages outside",
        stats.resident_bytes,
        stats.evictions,
        stats.faults,
        store.pages.backing_blobs().count()
    );
}
