use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use deferlsm::memtable::MemTable;
use deferlsm::sstable::{collect, BoxedIter, MergeIterator, VecIter};
use deferlsm::types::KvRecord;
use deferlsm::{CompactionMode, Db};
use deferlsm_bench::{bench_config, fill, scattered_key};
use rand::{Rng, SeedableRng};

const FILL_OPS: u64 = 20_000;
const VALUE: usize = 256;

fn fill_by_mode(c: &mut Criterion) {
    let mut g = c.benchmark_group("fill");
    g.sample_size(10);
    g.throughput(Throughput::Elements(FILL_OPS));
    for mode in [CompactionMode::Synchronous, CompactionMode::Asynchronous] {
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter_batched(
                || tempfile::tempdir().unwrap(),
                |dir| {
                    let db = Db::open(dir.path(), bench_config(mode, Duration::from_millis(2))).unwrap();
                    fill(&db, 0, FILL_OPS, VALUE).unwrap();
                    db.close().unwrap();
                },
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

fn point_reads(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let db = Db::open(dir.path(), bench_config(CompactionMode::Asynchronous, Duration::ZERO)).unwrap();
    fill(&db, 0, FILL_OPS, VALUE).unwrap();
    db.wait_idle().unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    c.bench_function("get/hit", |b| {
        b.iter(|| db.get(&scattered_key(rng.gen_range(0..FILL_OPS))).unwrap())
    });
    c.bench_function("get/miss", |b| {
        b.iter(|| db.get(&scattered_key(FILL_OPS + rng.gen_range(0..FILL_OPS))).unwrap())
    });
    db.close().unwrap();
}

fn memtable_insert(c: &mut Criterion) {
    let mut g = c.benchmark_group("memtable");
    g.throughput(Throughput::Elements(10_000));
    g.bench_function("insert", |b| {
        b.iter_batched(
            || MemTable::new(1),
            |m| {
                for i in 0..10_000u64 {
                    m.insert(KvRecord::put(scattered_key(i).to_vec(), i + 1, vec![0u8; 64]));
                }
                m
            },
            BatchSize::PerIteration,
        )
    });
    g.finish();
}

fn merge(c: &mut Criterion) {
    let sources: Vec<Vec<KvRecord>> = (0..4u64)
        .map(|s| {
            let mut v: Vec<KvRecord> = (0..5_000u64)
                .map(|i| KvRecord::put(scattered_key(i * 4 + s % 3).to_vec(), s * 10_000 + i + 1, vec![1u8; 32]))
                .collect();
            v.sort_by(|a, b| a.key.cmp(&b.key));
            v.dedup_by(|a, b| a.key.user_key == b.key.user_key);
            v
        })
        .collect();
    let mut g = c.benchmark_group("merge");
    g.throughput(Throughput::Elements(20_000));
    g.bench_function("4-way", |b| {
        b.iter_batched(
            || {
                sources
                    .iter()
                    .map(|v| Box::new(VecIter::new(v.clone())) as BoxedIter)
                    .collect::<Vec<_>>()
            },
            |srcs| collect(&mut MergeIterator::new(srcs, false)).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, fill_by_mode, point_reads, memtable_insert, merge);
criterion_main!(benches);
