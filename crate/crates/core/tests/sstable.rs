use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use deferlsm::config::MIB;
use deferlsm::error::Error;
use deferlsm::io::{BackendParams, IoEngine, IoQueue, Vfs};
use deferlsm::memtable::Lookup;
use deferlsm::sstable::{
    collect, verify_table, BoxedIter, BufferPool, BuilderOptions, MergeIterator, PendingWrites,
    SstBuilder, SstReader, VecIter, WriteMode, FOOTER_LEN,
};
use deferlsm::types::{sst_file_name, KvRecord, SstMeta, ValueKind, MAX_SEQNO};
use proptest::prelude::*;

fn opts(block: usize, buffer: usize, target: u64, mode: WriteMode) -> BuilderOptions {
    BuilderOptions {
        block_size: block,
        buffer_size: buffer,
        target_size: target,
        mode,
        submit_hook: None,
    }
}

fn build(
    vfs: &Arc<Vfs>,
    q: &IoQueue,
    id: u64,
    recs: &[KvRecord],
    o: BuilderOptions,
) -> (SstMeta, Vec<usize>) {
    let pool = BufferPool::new(o.buffer_size);
    let mut pending = PendingWrites::default();
    let file = vfs.create(&sst_file_name(id)).unwrap();
    let mut b = SstBuilder::new(q, &mut pending, pool.clone(), file, id, 1, 0, o);
    for r in recs {
        b.add(r).unwrap();
    }
    let built = b.finish().unwrap();
    pending.wait_all(q, &pool).unwrap();
    (built.meta, built.submissions)
}

fn key(i: usize) -> String {
    format!("key{i:08}")
}

#[test]
fn build_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let vfs = Vfs::new(dir.path()).unwrap();
    let engine = IoEngine::new(vfs.clone(), BackendParams::sync());
    let q = engine.queue(8);
    let recs: Vec<KvRecord> = (0..2000)
        .map(|i| {
            if i % 7 == 0 {
                KvRecord::delete(key(i), i as u64 + 1)
            } else {
                KvRecord::put(key(i), i as u64 + 1, format!("value-{i}"))
            }
        })
        .collect();
    let (meta, _) = build(&vfs, &q, 3, &recs, opts(512, 4096, u64::MAX, WriteMode::Blocking));
    assert_eq!(meta.record_count, 2000);
    assert_eq!(meta.smallest, recs[0].key);
    assert_eq!(meta.largest, recs[1999].key);

    let path = vfs.path(&sst_file_name(3));
    assert_eq!(std::fs::metadata(&path).unwrap().len(), meta.file_size);
    let footer = verify_table(&path).unwrap();
    assert_eq!(footer.checksum, meta.checksum);

    let r = SstReader::open(&path, 3).unwrap();
    assert_eq!(r.read_all().unwrap(), recs);
    for (i, rec) in recs.iter().enumerate() {
        let got = r.get(key(i).as_bytes(), MAX_SEQNO).unwrap();
        let want = match rec.key.kind {
            ValueKind::Put => Lookup::Found(rec.value.clone()),
            ValueKind::Delete => Lookup::Deleted,
        };
        assert_eq!(got, Some(want));
        // Not visible below its own sequence number.
        assert_eq!(r.get(key(i).as_bytes(), i as u64).unwrap(), None);
    }
    assert_eq!(r.get(b"absent", MAX_SEQNO).unwrap(), None);
    assert_eq!(r.get(b"key00000500x", MAX_SEQNO).unwrap(), None);

    let mut it = r.iter_from(key(1500).as_bytes());
    let tail = collect(&mut it).unwrap();
    assert_eq!(tail, recs[1500..].to_vec());
}

#[test]
fn damaged_footer_is_unreadable() {
    let dir = tempfile::tempdir().unwrap();
    let vfs = Vfs::new(dir.path()).unwrap();
    let engine = IoEngine::new(vfs.clone(), BackendParams::sync());
    let q = engine.queue(8);
    let recs: Vec<KvRecord> = (0..100).map(|i| KvRecord::put(key(i), 1, "v")).collect();
    build(&vfs, &q, 1, &recs, opts(256, 1024, u64::MAX, WriteMode::Blocking));
    let path = vfs.path(&sst_file_name(1));
    let data = std::fs::read(&path).unwrap();

    let mut bad_magic = data.clone();
    *bad_magic.last_mut().unwrap() ^= 1;
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(SstReader::open(&path, 1), Err(Error::UnreadableFile { .. })));

    let mut bad_index = data.clone();
    let at = data.len() - FOOTER_LEN - 40;
    bad_index[at] ^= 0xff;
    std::fs::write(&path, &bad_index).unwrap();
    assert!(matches!(verify_table(&path), Err(Error::UnreadableFile { .. })));

    std::fs::write(&path, &data[..data.len() - 5]).unwrap();
    assert!(verify_table(&path).is_err());
}

#[test]
fn buffer_submissions_cover_the_file_exactly() {
    // About 2.5 MiB of records through 1 MiB buffers: two full buffers and
    // one partial one.
    let dir = tempfile::tempdir().unwrap();
    let vfs = Vfs::new(dir.path()).unwrap();
    let engine = IoEngine::new(vfs.clone(), BackendParams::sync());
    let q = engine.queue(16);
    let n = (5 * MIB as usize / 2) / (1024 + 29);
    let recs: Vec<KvRecord> = (0..n).map(|i| KvRecord::put(key(i), 1, vec![7u8; 1024])).collect();
    let (meta, subs) = build(&vfs, &q, 9, &recs, opts(4096, MIB as usize, u64::MAX, WriteMode::Deferred));
    let expected = (meta.file_size as usize).div_ceil(MIB as usize);
    assert_eq!(expected, 3);
    assert_eq!(subs.len(), 3);
    assert_eq!(subs[0], MIB as usize);
    assert_eq!(subs[1], MIB as usize);
    assert_eq!(subs.iter().sum::<usize>() as u64, meta.file_size);
}

#[test]
fn deferred_writes_survive_queue_backpressure() {
    let dir = tempfile::tempdir().unwrap();
    let vfs = Vfs::new(dir.path()).unwrap();
    let engine = IoEngine::new(
        vfs.clone(),
        BackendParams::simulated(Duration::from_micros(200), Duration::ZERO),
    );
    let q = engine.queue(2);
    let recs: Vec<KvRecord> = (0..3000).map(|i| KvRecord::put(key(i), 1, vec![1u8; 100])).collect();
    let (meta, subs) = build(&vfs, &q, 4, &recs, opts(1024, 8192, u64::MAX, WriteMode::Deferred));
    assert!(subs.len() > 10);
    assert_eq!(q.pending(), 0);
    let r = SstReader::open(vfs.path(&sst_file_name(4)), 4).unwrap();
    assert_eq!(r.record_count(), meta.record_count);
    assert_eq!(r.read_all().unwrap(), recs);
}

#[test]
fn rolled_outputs_respect_target_size() {
    let dir = tempfile::tempdir().unwrap();
    let vfs = Vfs::new(dir.path()).unwrap();
    let engine = IoEngine::new(vfs.clone(), BackendParams::sync());
    let q = engine.queue(8);
    let pool = BufferPool::new(16 * 1024);
    let o = opts(1024, 16 * 1024, 32 * 1024, WriteMode::Deferred);
    let recs: Vec<KvRecord> = (0..4000).map(|i| KvRecord::put(key(i), 1, vec![3u8; 50])).collect();
    let mut pending = PendingWrites::default();
    let mut metas = Vec::new();
    let mut next_id = 1;
    let mut iter = recs.iter().peekable();
    while iter.peek().is_some() {
        let file = vfs.create(&sst_file_name(next_id)).unwrap();
        let mut b = SstBuilder::new(&q, &mut pending, pool.clone(), file, next_id, 1, 0, o);
        while let Some(r) = iter.peek() {
            if b.is_full() {
                break;
            }
            b.add(r).unwrap();
            iter.next();
        }
        metas.push(b.finish().unwrap().meta);
        next_id += 1;
    }
    pending.wait_all(&q, &pool).unwrap();
    assert!(metas.len() > 3);
    // At most one record past the threshold.
    let slack = 80;
    for m in &metas {
        assert!(m.file_size <= o.target_size + slack, "{} > target", m.file_size);
    }
    for m in &metas[..metas.len() - 1] {
        assert!(m.file_size >= o.target_size);
    }
    let total: u64 = metas.iter().map(|m| m.record_count).sum();
    assert_eq!(total, 4000);
}

#[test]
fn unsorted_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let vfs = Vfs::new(dir.path()).unwrap();
    let engine = IoEngine::new(vfs.clone(), BackendParams::sync());
    let q = engine.queue(8);
    let pool = BufferPool::new(4096);
    let mut pending = PendingWrites::default();
    let file = vfs.create("sst-1.sst").unwrap();
    let o = opts(256, 4096, u64::MAX, WriteMode::Blocking);
    let mut b = SstBuilder::new(&q, &mut pending, pool, file, 1, 0, 0, o);
    b.add(&KvRecord::put("b", 1, "")).unwrap();
    assert!(matches!(b.add(&KvRecord::put("a", 2, "")), Err(Error::Unsorted)));
    assert!(matches!(b.add(&KvRecord::put("b", 1, "")), Err(Error::Unsorted)));
}

fn merge(inputs: Vec<Vec<KvRecord>>, drop: bool) -> Vec<KvRecord> {
    let sources: Vec<BoxedIter> = inputs
        .into_iter()
        .map(|v| Box::new(VecIter::new(v)) as BoxedIter)
        .collect();
    collect(&mut MergeIterator::new(sources, drop)).unwrap()
}

#[test]
fn merge_examples() {
    let single = vec![KvRecord::put("a", 1, "x"), KvRecord::put("b", 1, "y")];
    assert_eq!(merge(vec![single.clone()], false), single);

    let out = merge(
        vec![
            vec![KvRecord::put("a", 1, "1"), KvRecord::put("c", 3, "3")],
            vec![KvRecord::put("b", 2, "2")],
        ],
        false,
    );
    let keys: Vec<_> = out.iter().map(|r| (r.key.user_key.clone(), r.key.seqno)).collect();
    assert_eq!(keys, vec![(b"a".to_vec(), 1), (b"b".to_vec(), 2), (b"c".to_vec(), 3)]);

    let out = merge(
        vec![vec![KvRecord::put("k", 3, "old")], vec![KvRecord::put("k", 7, "new")]],
        false,
    );
    assert_eq!(out, vec![KvRecord::put("k", 7, "new")]);

    let with_tomb = vec![vec![KvRecord::delete("k", 9)], vec![KvRecord::put("k", 7, "new")]];
    assert_eq!(merge(with_tomb.clone(), false), vec![KvRecord::delete("k", 9)]);
    assert!(merge(with_tomb, true).is_empty());
}

/// Reference merge: keep the entry with the highest seqno per user key.
fn oracle_merge(inputs: &[Vec<KvRecord>], drop: bool) -> Vec<KvRecord> {
    let mut newest: BTreeMap<Vec<u8>, KvRecord> = BTreeMap::new();
    for r in inputs.iter().flatten() {
        match newest.get(&r.key.user_key) {
            Some(cur) if cur.key.seqno >= r.key.seqno => {}
            _ => {
                newest.insert(r.key.user_key.clone(), r.clone());
            }
        }
    }
    newest
        .into_values()
        .filter(|r| !(drop && r.is_tombstone()))
        .collect()
}

fn arb_inputs() -> impl Strategy<Value = Vec<Vec<KvRecord>>> {
    // Seqnos are unique across sources, as the engine guarantees.
    let rec = (0u8..40, any::<bool>(), prop::collection::vec(any::<u8>(), 0..8));
    prop::collection::vec(prop::collection::vec(rec, 0..30), 1..6).prop_map(|srcs| {
        let mut seq = 0u64;
        srcs.into_iter()
            .map(|src| {
                let mut recs: Vec<KvRecord> = src
                    .into_iter()
                    .map(|(k, del, v)| {
                        seq += 1;
                        let key = vec![b'k', k];
                        if del {
                            KvRecord::delete(key, seq)
                        } else {
                            KvRecord::put(key, seq, v)
                        }
                    })
                    .collect();
                recs.sort_by(|a, b| a.key.cmp(&b.key));
                recs
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn merge_matches_oracle(inputs in arb_inputs(), drop in any::<bool>()) {
        let want = oracle_merge(&inputs, drop);
        prop_assert_eq!(merge(inputs, drop), want);
    }
}
