//! Choosing what to compact next.

use std::collections::HashSet;

use crate::config::{level_capacity, EngineConfig};
use crate::types::{Durability, FileId, SstMeta};

#[derive(Debug, Clone, PartialEq)]
pub struct CompactionPlan {
    pub level: u32,
    pub output_level: u32,
    /// Files taken from `level`.
    pub inputs: Vec<SstMeta>,
    /// Files of `output_level` overlapping the inputs.
    pub overlaps: Vec<SstMeta>,
    /// No deeper level holds keys in range, so tombstones can be dropped.
    pub is_bottom: bool,
    pub score: f64,
}

impl CompactionPlan {
    pub fn reads_volatile(&self) -> bool {
        self.all_inputs().any(|m| m.durability == Durability::Volatile)
    }

    /// A single input with nothing to merge against can be moved down
    /// without rewriting it.
    pub fn is_trivial_move(&self) -> bool {
        self.level > 0 && self.inputs.len() == 1 && self.overlaps.is_empty()
    }

    pub fn all_inputs(&self) -> impl Iterator<Item = &SstMeta> {
        self.inputs.iter().chain(self.overlaps.iter())
    }

    pub fn input_bytes(&self) -> u64 {
        self.all_inputs().map(|m| m.file_size).sum()
    }

    pub fn key_range(&self) -> (Vec<u8>, Vec<u8>) {
        key_range(self.all_inputs())
    }
}

fn key_range<'a>(files: impl Iterator<Item = &'a SstMeta>) -> (Vec<u8>, Vec<u8>) {
    let mut lo: Option<&[u8]> = None;
    let mut hi: Option<&[u8]> = None;
    for m in files {
        let s = m.smallest.user_key.as_slice();
        let l = m.largest.user_key.as_slice();
        lo = Some(lo.map_or(s, |x| x.min(s)));
        hi = Some(hi.map_or(l, |x| x.max(l)));
    }
    (lo.unwrap_or_default().to_vec(), hi.unwrap_or_default().to_vec())
}

/// Files of `level` whose user-key range intersects `[lo, hi]`.
pub fn overlapping(level: &[SstMeta], lo: &[u8], hi: &[u8]) -> Vec<SstMeta> {
    level.iter().filter(|m| m.overlaps(lo, hi)).cloned().collect()
}

/// Compaction pressure of each level: file count over the trigger for
/// level 0, bytes over capacity elsewhere. The last level scores 0.
pub fn level_scores(levels: &[Vec<SstMeta>], config: &EngineConfig) -> Vec<f64> {
    let last = levels.len() - 1;
    levels
        .iter()
        .enumerate()
        .map(|(n, files)| {
            if n == last {
                0.0
            } else if n == 0 {
                files.len() as f64 / config.l0_compaction_trigger as f64
            } else {
                let bytes: u64 = files.iter().map(|m| m.file_size).sum();
                bytes as f64 / level_capacity(config, n as u32).unwrap() as f64
            }
        })
        .collect()
}

/// Round-robin position per level: the largest key of the last seed.
#[derive(Debug, Clone, Default)]
pub struct Cursors(Vec<Option<Vec<u8>>>);

impl Cursors {
    pub fn new(levels: usize) -> Self {
        Cursors(vec![None; levels])
    }
}

/// Picks the level with the highest score >= 1 (the smaller level on ties)
/// whose inputs are not already being compacted. `levels[0]` must be
/// ordered newest first and deeper levels by smallest key.
pub fn pick(
    levels: &[Vec<SstMeta>],
    busy: &HashSet<FileId>,
    cursors: &mut Cursors,
    config: &EngineConfig,
) -> Option<CompactionPlan> {
    let scores = level_scores(levels, config);
    let mut order: Vec<usize> = (0..levels.len()).filter(|&n| scores[n] >= 1.0).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    // Plans that read no volatile file go first, so a job does not block
    // on a batch that is still in flight while other due work exists.
    for durable_only in [true, false] {
        for &n in &order {
            let plan = if n == 0 {
                pick_l0(levels, busy)
            } else {
                pick_level(levels, n, busy, cursors, durable_only)
            };
            let Some(mut plan) = plan else { continue };
            if durable_only && plan.reads_volatile() {
                continue;
            }
            plan.score = scores[n];
            let (lo, hi) = plan.key_range();
            let out = plan.output_level as usize;
            plan.is_bottom = levels[out + 1..]
                .iter()
                .all(|l| l.iter().all(|m| !m.overlaps(&lo, &hi)));
            if n > 0 {
                cursors.0[n] = Some(plan.inputs[0].largest.user_key.clone());
            }
            return Some(plan);
        }
    }
    None
}

fn pick_l0(levels: &[Vec<SstMeta>], busy: &HashSet<FileId>) -> Option<CompactionPlan> {
    let inputs = levels[0].clone();
    if inputs.is_empty() || inputs.iter().any(|m| busy.contains(&m.file_id)) {
        return None;
    }
    let (lo, hi) = key_range(inputs.iter());
    let overlaps = overlapping(&levels[1], &lo, &hi);
    if overlaps.iter().any(|m| busy.contains(&m.file_id)) {
        return None;
    }
    Some(CompactionPlan {
        level: 0,
        output_level: 1,
        inputs,
        overlaps,
        is_bottom: false,
        score: 0.0,
    })
}

fn pick_level(
    levels: &[Vec<SstMeta>],
    n: usize,
    busy: &HashSet<FileId>,
    cursors: &Cursors,
    durable_only: bool,
) -> Option<CompactionPlan> {
    let files = &levels[n];
    let start = match &cursors.0[n] {
        Some(k) => files.partition_point(|m| m.smallest.user_key <= *k),
        None => 0,
    };
    for i in (start..files.len()).chain(0..start) {
        let seed = &files[i];
        if busy.contains(&seed.file_id) {
            continue;
        }
        let overlaps = overlapping(
            &levels[n + 1],
            &seed.smallest.user_key,
            &seed.largest.user_key,
        );
        if overlaps.iter().any(|m| busy.contains(&m.file_id)) {
            continue;
        }
        let plan = CompactionPlan {
            level: n as u32,
            output_level: n as u32 + 1,
            inputs: vec![seed.clone()],
            overlaps,
            is_bottom: false,
            score: 0.0,
        };
        if durable_only && plan.reads_volatile() {
            continue;
        }
        return Some(plan);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MIB;
    use crate::types::{Durability, InternalKey, ValueKind};
    use proptest::prelude::*;

    fn meta(id: FileId, level: u32, lo: u32, hi: u32, size: u64) -> SstMeta {
        SstMeta {
            file_id: id,
            level,
            smallest: InternalKey::new(format!("{lo:06}").into_bytes(), 1, ValueKind::Put),
            largest: InternalKey::new(format!("{hi:06}").into_bytes(), 1, ValueKind::Put),
            file_size: size,
            durability: Durability::Durable,
            birth_epoch: 0,
            checksum: 0,
            record_count: 1,
        }
    }

    fn cfg() -> EngineConfig {
        EngineConfig {
            base_level_size: 10 * MIB,
            ..EngineConfig::default()
        }
    }

    #[test]
    fn l0_triggers_by_file_count() {
        let mut levels = vec![Vec::new(); 4];
        for i in 0..3 {
            levels[0].push(meta(10 - i, 0, 0, 100, 1));
        }
        let mut cur = Cursors::new(4);
        assert_eq!(pick(&levels, &HashSet::new(), &mut cur, &cfg()), None);
        levels[0].insert(0, meta(11, 0, 50, 60, 1));
        levels[1].push(meta(1, 1, 90, 95, MIB));
        levels[1].push(meta(2, 1, 200, 300, MIB));
        let p = pick(&levels, &HashSet::new(), &mut cur, &cfg()).unwrap();
        assert_eq!((p.level, p.output_level), (0, 1));
        assert_eq!(p.inputs.len(), 4);
        assert_eq!(p.overlaps.iter().map(|m| m.file_id).collect::<Vec<_>>(), vec![1]);
        assert!(p.is_bottom);
        // A busy input blocks the whole level-0 compaction.
        let busy: HashSet<FileId> = [10].into();
        assert_eq!(pick(&levels, &busy, &mut cur, &cfg()), None);
    }

    #[test]
    fn highest_score_wins_and_ties_go_to_smaller_level() {
        let mut levels = vec![Vec::new(); 4];
        // L1 at 2x capacity (10 MiB), L2 at 1.5x (100 MiB).
        levels[1].push(meta(1, 1, 0, 10, 20 * MIB));
        levels[2].push(meta(2, 2, 20, 30, 150 * MIB));
        let mut cur = Cursors::new(4);
        let p = pick(&levels, &HashSet::new(), &mut cur, &cfg()).unwrap();
        assert_eq!(p.level, 1);
        assert!(p.is_trivial_move());

        let mut levels = vec![Vec::new(); 4];
        levels[1].push(meta(1, 1, 0, 10, 20 * MIB));
        levels[2].push(meta(2, 2, 20, 30, 200 * MIB));
        let p = pick(&levels, &HashSet::new(), &mut Cursors::new(4), &cfg()).unwrap();
        assert_eq!(p.level, 1);
    }

    #[test]
    fn seeds_rotate_round_robin() {
        let mut levels = vec![Vec::new(); 3];
        for i in 0..4u32 {
            levels[1].push(meta(i as u64 + 1, 1, i * 10, i * 10 + 5, 5 * MIB));
        }
        let mut cur = Cursors::new(3);
        let seeds: Vec<FileId> = (0..6)
            .map(|_| pick(&levels, &HashSet::new(), &mut cur, &cfg()).unwrap().inputs[0].file_id)
            .collect();
        assert_eq!(seeds, vec![1, 2, 3, 4, 1, 2]);
    }

    #[test]
    fn durable_plans_are_preferred_over_volatile_ones() {
        let mut levels = vec![Vec::new(); 4];
        levels[1].push(meta(1, 1, 0, 10, 20 * MIB));
        levels[1].push(meta(2, 1, 20, 30, 20 * MIB));
        levels[2].push(meta(3, 2, 0, 5, MIB));
        levels[2].push(meta(4, 2, 20, 25, MIB));
        levels[2][0].durability = Durability::Volatile;
        let p = pick(&levels, &HashSet::new(), &mut Cursors::new(4), &cfg()).unwrap();
        assert_eq!(p.inputs[0].file_id, 2);
        assert!(!p.reads_volatile());

        // With nothing durable left, the volatile plan still runs.
        levels[2][1].durability = Durability::Volatile;
        let p = pick(&levels, &HashSet::new(), &mut Cursors::new(4), &cfg()).unwrap();
        assert_eq!(p.inputs[0].file_id, 1);
        assert!(p.reads_volatile());
    }

    #[test]
    fn level_capacity_scores() {
        let mut levels = vec![Vec::new(); 3];
        levels[1].push(meta(1, 1, 0, 1, 5 * MIB));
        let s = level_scores(&levels, &cfg());
        assert_eq!(s, vec![0.0, 0.5, 0.0]);
    }

    proptest! {
        #[test]
        fn overlap_matches_brute_force(
            ranges in prop::collection::vec((0u32..1000, 0u32..50), 1..20),
            lo in 0u32..1000,
            len in 0u32..200,
        ) {
            let files: Vec<SstMeta> = ranges
                .iter()
                .enumerate()
                .map(|(i, &(s, l))| meta(i as u64, 1, s, s + l, 1))
                .collect();
            let hi = lo + len;
            let got: Vec<FileId> = overlapping(
                &files,
                format!("{lo:06}").as_bytes(),
                format!("{hi:06}").as_bytes(),
            )
            .iter()
            .map(|m| m.file_id)
            .collect();
            // Integer interval intersection as the oracle.
            let want: Vec<FileId> = ranges
                .iter()
                .enumerate()
                .filter(|(_, &(s, l))| s <= hi && s + l >= lo)
                .map(|(i, _)| i as u64)
                .collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn busy_files_are_never_picked(
            sizes in prop::collection::vec(1u64..8, 2..12),
            busy_mask in any::<u16>(),
        ) {
            let mut levels = vec![Vec::new(); 4];
            for (i, s) in sizes.iter().enumerate() {
                let i = i as u32;
                levels[1].push(meta(i as u64 + 1, 1, i * 10, i * 10 + 5, s * MIB));
                levels[2].push(meta(i as u64 + 100, 2, i * 10 + 3, i * 10 + 8, MIB));
            }
            let busy: HashSet<FileId> = (0..16)
                .filter(|b| busy_mask & (1 << b) != 0)
                .flat_map(|b| [b as u64 + 1, b as u64 + 100])
                .collect();
            if let Some(p) = pick(&levels, &busy, &mut Cursors::new(4), &cfg()) {
                for m in p.all_inputs() {
                    prop_assert!(!busy.contains(&m.file_id));
                }
                let (lo, hi) = (&p.inputs[0].smallest.user_key, &p.inputs[0].largest.user_key);
                let want: Vec<FileId> = levels[2].iter().filter(|m| m.overlaps(lo, hi)).map(|m| m.file_id).collect();
                prop_assert_eq!(p.overlaps.iter().map(|m| m.file_id).collect::<Vec<_>>(), want);
            }
        }
    }
}
