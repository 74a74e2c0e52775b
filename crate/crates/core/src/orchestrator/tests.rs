use super::*;
use proptest::prelude::*;

const A: HolderId = HolderId::new(1, 100, 1);
const B: HolderId = HolderId::new(2, 200, 1);
const C: HolderId = HolderId::new(3, 300, 1);

fn small_cfg() -> OrchestratorConfig {
    OrchestratorConfig {
        pool_base: 0x1000_0000,
        pool_span: 1 << 30,
        default_quota: 1 << 20,
        ..OrchestratorConfig::default()
    }
}

fn manual() -> (Orchestrator<Arc<ManualClock>>, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new());
    (Orchestrator::with_clock(small_cfg(), clock.clone()), clock)
}

#[test]
fn register_and_lookup() {
    let (mut o, _) = manual();
    let (rec, lease) = o
        .register_channel("/svc/kv", ChannelOptions::new(HeapMode::PerConnection, 10_000), A)
        .unwrap();
    assert_eq!(rec.heaps.len(), 1);
    assert_eq!(rec.heaps[0].size, 12288);
    assert_eq!(lease.holder, A);
    let found = o.lookup_channel("/svc/kv", B).unwrap();
    assert_eq!(found, rec);
    assert_eq!(
        o.register_channel("/svc/kv", ChannelOptions::new(HeapMode::ChannelWide, 4096), B),
        Err(OrchError::DuplicateName("/svc/kv".into()))
    );
    assert!(matches!(o.lookup_channel("/nope", A), Err(OrchError::UnknownChannel(_))));
}

#[test]
fn malformed_names_rejected() {
    for bad in ["", "/", "svc", "/a//b", "/a/"] {
        assert!(validate_channel_name(bad).is_err(), "{bad:?}");
    }
    validate_channel_name("/a/b/c").unwrap();
}

#[test]
fn acl_limits_lookup_and_attach() {
    let (mut o, _) = manual();
    let mut opts = ChannelOptions::new(HeapMode::ChannelWide, 4096);
    opts.allow_nodes = vec![1, 2];
    let (rec, _) = o.register_channel("/priv", opts, A).unwrap();
    o.lookup_channel("/priv", B).unwrap();
    assert!(matches!(o.lookup_channel("/priv", C), Err(OrchError::AclDenied(_))));
    assert!(matches!(
        o.attach_heap(rec.heaps[0].heap_id, C),
        Err(OrchError::AclDenied(_))
    ));
}

#[test]
fn heaps_are_disjoint_and_page_aligned() {
    let (mut o, _) = manual();
    let mut got = Vec::new();
    for sz in [1u64, 4096, 4097, 20000, 8192] {
        got.push(o.allocate_heap(sz, A).unwrap().0);
    }
    for (i, a) in got.iter().enumerate() {
        assert_eq!(a.base % 4096, 0);
        assert_eq!(a.size % 4096, 0);
        for b in &got[i + 1..] {
            assert!(a.end() <= b.base || b.end() <= a.base);
        }
    }
}

#[test]
fn quota_enforced_at_grant_and_refunded_on_release() {
    let (mut o, _) = manual();
    o.set_quota(A, 3 * 4096);
    let (h1, _) = o.allocate_heap(2 * 4096, A).unwrap();
    assert_eq!(
        o.allocate_heap(2 * 4096, A).unwrap_err(),
        OrchError::QuotaExceeded {
            current: 8192,
            limit: 12288
        }
    );
    assert_eq!(o.check_quota(A, 4096), QuotaDecision::Allow);
    assert!(o.release_heap(h1.heap_id, A).unwrap());
    assert_eq!(o.ledger_entry(A).mapped, 0);
    o.allocate_heap(3 * 4096, A).unwrap();
}

#[test]
fn attach_charges_second_holder_once() {
    let (mut o, _) = manual();
    let (h, _) = o.allocate_heap(8192, A).unwrap();
    let (_, l1) = o.attach_heap(h.heap_id, B).unwrap();
    let (_, l2) = o.attach_heap(h.heap_id, B).unwrap();
    assert_eq!(l1.lease_id, l2.lease_id);
    assert_eq!(o.ledger_entry(B).mapped, 8192);
    assert!(!o.release_heap(h.heap_id, A).unwrap());
    assert!(o.heap(h.heap_id).is_some());
    assert!(o.release_heap(h.heap_id, B).unwrap());
    assert!(o.heap(h.heap_id).is_none());
    assert!(matches!(
        o.release_heap(h.heap_id, B),
        Err(OrchError::UnknownHeap(_))
    ));
}

#[test]
fn lease_renewal_extends_expiry() {
    let (mut o, clock) = manual();
    let (_, lease) = o.allocate_heap(4096, A).unwrap();
    assert_eq!(lease.expiry, Duration::from_secs(3));
    clock.advance(Duration::from_millis(2500));
    let exp = o.renew_lease(lease.lease_id).unwrap();
    assert_eq!(exp, Duration::from_millis(5500));
    clock.advance(Duration::from_secs(3));
    assert!(o.expire_sweep(clock.now()).is_empty());
    assert!(o.lease(lease.lease_id).is_some());
}

#[test]
fn expiry_notifies_survivors_and_reclaims_orphans() {
    let (mut o, clock) = manual();
    let (rec, la) = o
        .register_channel("/svc", ChannelOptions::new(HeapMode::ChannelWide, 4096), A)
        .unwrap();
    let heap = rec.heaps[0].heap_id;
    let (_, lb) = o.attach_heap(heap, B).unwrap();
    let (orphan, _) = o.allocate_heap(4096, C).unwrap();
    let free_before = o.pool_free_bytes();

    clock.advance(Duration::from_secs(2));
    o.renew_lease(la.lease_id).unwrap();
    clock.advance(Duration::from_millis(1500));
    let notes = o.expire_sweep(clock.now());
    assert_eq!(
        notes,
        vec![FailureNotification {
            recipient: A,
            failed: B,
            heap_id: heap,
            channel: Some("/svc".into()),
        }]
    );
    assert!(o.lease(lb.lease_id).is_none());
    assert_eq!(o.holders(heap), vec![A]);
    assert_eq!(o.ledger_entry(B).mapped, 0);
    assert!(o.heap(orphan.heap_id).is_none());
    assert_eq!(o.pool_free_bytes(), free_before + 4096);
    assert!(matches!(
        o.renew_lease(lb.lease_id),
        Err(OrchError::UnknownLease(_))
    ));
}

#[test]
fn channel_vanishes_when_all_holders_expire() {
    let (mut o, clock) = manual();
    o.register_channel("/gone", ChannelOptions::new(HeapMode::ChannelWide, 4096), A)
        .unwrap();
    clock.advance(Duration::from_secs(4));
    o.expire_sweep(clock.now());
    assert!(o.lookup_channel("/gone", A).is_err());
    assert!(o.live_heaps().is_empty());
}

#[test]
fn renewal_of_overdue_lease_fails() {
    let (mut o, clock) = manual();
    let (_, l) = o.allocate_heap(4096, A).unwrap();
    clock.advance(Duration::from_millis(3001));
    assert_eq!(o.renew_lease(l.lease_id), Err(OrchError::LeaseExpired(l.lease_id)));
}

#[test]
fn close_channel_only_by_creator() {
    let (mut o, _) = manual();
    let (rec, _) = o
        .register_channel("/c", ChannelOptions::new(HeapMode::ChannelWide, 4096), A)
        .unwrap();
    o.attach_heap(rec.heaps[0].heap_id, B).unwrap();
    assert!(matches!(o.close_channel("/c", B), Err(OrchError::NotOwner(_))));
    o.close_channel("/c", A).unwrap();
    assert!(o.lookup_channel("/c", A).is_err());
    // B still maps the heap.
    assert_eq!(o.holders(rec.heaps[0].heap_id), vec![B]);
    o.register_channel("/c", ChannelOptions::new(HeapMode::ChannelWide, 4096), A)
        .unwrap();
}

#[test]
fn linked_connection_heap_listed_on_channel() {
    let (mut o, _) = manual();
    let (rec, _) = o
        .register_channel("/p", ChannelOptions::new(HeapMode::PerConnection, 4096), A)
        .unwrap();
    let (h, _) = o.allocate_heap(8192, B).unwrap();
    o.link_heap(rec.channel_id, h.heap_id).unwrap();
    assert_eq!(o.lookup_channel("/p", C).unwrap().heaps.len(), 2);
    o.release_heap(h.heap_id, B).unwrap();
    assert_eq!(o.lookup_channel("/p", C).unwrap().heaps.len(), 1);
}

#[test]
fn local_handle_delivers_notifications() {
    let clock = Arc::new(ManualClock::new());
    let shared = SharedOrchestrator::new(Orchestrator::with_clock(small_cfg(), clock.clone()));
    let a = LocalOrchestrator::new(shared.clone(), A);
    let b = LocalOrchestrator::new(shared.clone(), B);
    let (rec, ga) = a
        .register_channel("/n", ChannelOptions::new(HeapMode::ChannelWide, 4096))
        .unwrap();
    assert_eq!(ga.remaining, Duration::from_secs(3));
    b.attach_heap(rec.heaps[0].heap_id).unwrap();
    clock.advance(Duration::from_secs(2));
    assert_eq!(a.renew_lease(ga.lease_id).unwrap(), Duration::from_secs(3));
    clock.advance(Duration::from_secs(2));
    shared.sweep();
    let n = a.notifications().try_recv().unwrap();
    assert_eq!(n.failed, B);
    assert!(b.notifications().try_recv().is_err());
}

#[test]
fn undelivered_notification_waits_one_term() {
    let clock = Arc::new(ManualClock::new());
    let shared = SharedOrchestrator::new(Orchestrator::with_clock(small_cfg(), clock.clone()));
    let (rec, la) = shared
        .lock()
        .register_channel("/q", ChannelOptions::new(HeapMode::ChannelWide, 4096), A)
        .unwrap();
    let heap = rec.heaps[0].heap_id;
    shared.lock().attach_heap(heap, B).unwrap();
    shared.lock().attach_heap(heap, C).unwrap();
    clock.advance(Duration::from_secs(2));
    shared.lock().renew_lease(la.lease_id).unwrap();
    // C renews too, by attaching again after a release.
    shared.lock().release_heap(heap, C).unwrap();
    shared.lock().attach_heap(heap, C).unwrap();
    clock.advance(Duration::from_millis(1500));
    assert_eq!(shared.sweep().len(), 2);
    assert_eq!(shared.undelivered(), 2);
    let a = shared.subscribe(A);
    assert_eq!(a.try_recv().unwrap().failed, B);
    assert_eq!(shared.undelivered(), 1);
    clock.advance(Duration::from_millis(3001));
    shared.sweep();
    let c = shared.subscribe(C);
    // C's lease lapsed as well by now, and the old message aged out.
    assert!(c.try_iter().all(|n| n.failed != B));
}

#[derive(Debug, Clone)]
enum Op {
    Alloc(u8, u16),
    Attach(u8, usize),
    Release(u8, usize),
    Advance(u16),
    Renew(usize),
    Sweep,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..3, 1u16..40000).prop_map(|(h, s)| Op::Alloc(h, s)),
        (0u8..3, any::<usize>()).prop_map(|(h, i)| Op::Attach(h, i)),
        (0u8..3, any::<usize>()).prop_map(|(h, i)| Op::Release(h, i)),
        (0u16..2000).prop_map(Op::Advance),
        any::<usize>().prop_map(Op::Renew),
        Just(Op::Sweep),
    ]
}

proptest! {
    // Invariants after any sequence: live heaps disjoint, each holder's mapped
    // bytes equal the sum of sizes of heaps it holds, and no holder exceeds quota.
    #[test]
    fn state_invariants_hold(ops in proptest::collection::vec(op(), 1..80)) {
        let holders = [A, B, C];
        let clock = Arc::new(ManualClock::new());
        let mut o = Orchestrator::with_clock(OrchestratorConfig {
            pool_base: 0x1000_0000,
            pool_span: 64 << 20,
            default_quota: 256 << 10,
            ..OrchestratorConfig::default()
        }, clock.clone());
        let mut leases: Vec<LeaseId> = Vec::new();
        for op in ops {
            let ids: Vec<HeapId> = o.live_heaps().iter().map(|h| h.heap_id).collect();
            match op {
                Op::Alloc(h, s) => {
                    if let Ok((_, l)) = o.allocate_heap(s as u64, holders[h as usize]) {
                        leases.push(l.lease_id);
                    }
                }
                Op::Attach(h, i) if !ids.is_empty() => {
                    if let Ok((_, l)) = o.attach_heap(ids[i % ids.len()], holders[h as usize]) {
                        leases.push(l.lease_id);
                    }
                }
                Op::Release(h, i) if !ids.is_empty() => {
                    let _ = o.release_heap(ids[i % ids.len()], holders[h as usize]);
                }
                Op::Advance(ms) => clock.advance(Duration::from_millis(ms as u64)),
                Op::Renew(i) if !leases.is_empty() => {
                    let _ = o.renew_lease(leases[i % leases.len()]);
                }
                Op::Sweep => {
                    o.expire_sweep(clock.now());
                }
                _ => {}
            }
            let live = o.live_heaps();
            for (i, a) in live.iter().enumerate() {
                for b in &live[i + 1..] {
                    prop_assert!(a.end() <= b.base || b.end() <= a.base);
                }
            }
            for h in holders {
                let expect: u64 = live
                    .iter()
                    .filter(|d| o.holders(d.heap_id).contains(&h))
                    .map(|d| d.size)
                    .sum();
                let e = o.ledger_entry(h);
                prop_assert_eq!(e.mapped, expect);
                prop_assert!(e.mapped <= e.quota);
            }
            for d in &live {
                prop_assert!(!o.holders(d.heap_id).is_empty());
            }
        }
    }
}
