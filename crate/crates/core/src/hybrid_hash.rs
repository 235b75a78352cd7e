//! Two-tier embedding store: an unbounded cold hashmap plus a bounded hot
//! scratchpad periodically refreshed with the most frequently queried rows.
//!
//! Queries are tier-transparent: the returned rows are bit-identical to a
//! cold-store-only lookup, whichever tier served them. During a configurable
//! warmup phase every lookup hits the cold store while a frequency counter
//! accumulates; afterwards the hot store is checked first and refreshed with
//! the top-k IDs every `flush_iters` iterations. When the hot capacity turns
//! out to dwarf the whole table, everything is promoted and flushing stops.

use std::collections::HashMap;

use crate::embedding::{EmbeddingTable, Matrix};

/// Which tier served a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    Hot,
    Cold,
}

/// Post-warmup query counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HhStats {
    pub hot_hits: u64,
    pub cold_hits: u64,
    pub queries: u64,
}

/// One per-iteration stats record, exportable for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iteration: u64,
    pub hot_hits: u64,
    pub cold_hits: u64,
    pub hit_ratio: f64,
    pub hstore_bytes: u64,
}

#[derive(Debug)]
pub struct HybridHashState {
    pub cstore: EmbeddingTable,
    hstore: HashMap<u64, Vec<f32>>,
    pub capacity_bytes: u64,
    fcounter: HashMap<u64, u64>,
    pub warmup_iters: u64,
    pub flush_iters: u64,
    itr: u64,
    stats: HhStats,
    promote_threshold: f64,
    promoted: bool,
    iter_log: Vec<IterRecord>,
    iter_hot: u64,
    iter_cold: u64,
}

pub const DEFAULT_PROMOTE_THRESHOLD: f64 = 0.5;

impl HybridHashState {
    pub fn new(cstore: EmbeddingTable, capacity_bytes: u64, warmup_iters: u64, flush_iters: u64) -> Self {
        Self::with_threshold(cstore, capacity_bytes, warmup_iters, flush_iters, DEFAULT_PROMOTE_THRESHOLD)
    }

    pub fn with_threshold(
        cstore: EmbeddingTable,
        capacity_bytes: u64,
        warmup_iters: u64,
        flush_iters: u64,
        promote_threshold: f64,
    ) -> Self {
        assert!(flush_iters >= 1);
        HybridHashState {
            cstore,
            hstore: HashMap::new(),
            capacity_bytes,
            fcounter: HashMap::new(),
            warmup_iters,
            flush_iters,
            itr: 0,
            stats: HhStats::default(),
            promote_threshold,
            promoted: false,
            iter_log: Vec::new(),
            iter_hot: 0,
            iter_cold: 0,
        }
    }

    fn row_bytes(&self) -> u64 {
        (self.cstore.dim * 4) as u64
    }

    /// Hot-store row budget derived from the byte capacity.
    pub fn capacity_rows(&self) -> u64 {
        self.capacity_bytes / self.row_bytes().max(1)
    }

    pub fn hstore_bytes(&self) -> u64 {
        self.hstore.len() as u64 * self.row_bytes()
    }

    pub fn hstore_len(&self) -> usize {
        self.hstore.len()
    }

    pub fn iteration(&self) -> u64 {
        self.itr
    }

    pub fn stats(&self) -> HhStats {
        self.stats
    }

    pub fn is_promoted(&self) -> bool {
        self.promoted
    }

    pub fn fcounter_total(&self) -> u64 {
        self.fcounter.values().sum()
    }

    pub fn count_of(&self, id: u64) -> u64 {
        self.fcounter.get(&id).copied().unwrap_or(0)
    }

    pub fn iter_log(&self) -> &[IterRecord] {
        &self.iter_log
    }

    fn in_warmup(&self) -> bool {
        self.itr < self.warmup_iters
    }

    /// Look up a batch of IDs. Every query bumps the frequency counter;
    /// post-warmup queries try the hot store first.
    pub fn query(&mut self, ids: &[u64]) -> (Matrix, Vec<RowSource>) {
        let mut rows = Matrix::with_capacity(ids.len(), self.cstore.dim);
        let mut sources = Vec::with_capacity(ids.len());
        let warmup = self.in_warmup();
        for &id in ids {
            *self.fcounter.entry(id).or_insert(0) += 1;
            if !warmup {
                self.stats.queries += 1;
            }
            if !warmup {
                if let Some(row) = self.hstore.get(&id) {
                    rows.push_row(row);
                    sources.push(RowSource::Hot);
                    self.stats.hot_hits += 1;
                    self.iter_hot += 1;
                    continue;
                }
            }
            let row = self.cstore.get_or_init(id).to_vec();
            if !warmup {
                self.stats.cold_hits += 1;
                self.iter_cold += 1;
                // In promoted mode the hot store mirrors the cold store.
                if self.promoted && self.hstore_bytes() + self.row_bytes() <= self.capacity_bytes {
                    self.hstore.insert(id, row.clone());
                }
            }
            rows.push_row(&row);
            sources.push(RowSource::Cold);
        }
        (rows, sources)
    }

    /// Membership-only variant of [`query`]: identical counting, flushing
    /// and tier decisions, but no rows are materialized. Used to measure hit
    /// ratios cheaply.
    pub fn probe(&mut self, ids: &[u64]) -> (u64, u64) {
        let warmup = self.in_warmup();
        let mut hot = 0u64;
        let mut cold = 0u64;
        for &id in ids {
            *self.fcounter.entry(id).or_insert(0) += 1;
            if warmup {
                cold += 1;
                continue;
            }
            self.stats.queries += 1;
            if self.promoted || self.hstore.contains_key(&id) {
                hot += 1;
                self.stats.hot_hits += 1;
                self.iter_hot += 1;
            } else {
                cold += 1;
                self.stats.cold_hits += 1;
                self.iter_cold += 1;
            }
        }
        (hot, cold)
    }

    /// Replace the hot store with the `k` most frequent IDs' rows, `k`
    /// derived from the byte capacity. Ties break toward the smaller ID.
    pub fn flush(&mut self) {
        if self.promoted {
            return;
        }
        let k = self.capacity_rows() as usize;
        self.hstore.clear();
        if k == 0 {
            return;
        }
        let mut by_freq: Vec<(u64, u64)> = self.fcounter.iter().map(|(&id, &c)| (id, c)).collect();
        by_freq.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        by_freq.truncate(k);
        for (id, _) in by_freq {
            let row = self.cstore.get_or_init(id).to_vec();
            self.hstore.insert(id, row);
        }
    }

    /// Promote the whole table into hot storage when the hot capacity is far
    /// beyond the total table size; disables periodic flushing.
    pub fn maybe_promote_all(&mut self) {
        // Every counted ID has a cold-store row, so the counter cardinality
        // sizes the table even when rows were never materialized.
        let total_bytes = (self.fcounter.len().max(self.cstore.len()) as u64) * self.row_bytes();
        if total_bytes as f64 <= self.promote_threshold * self.capacity_bytes as f64 {
            self.promoted = true;
            self.hstore.clear();
            for id in self.fcounter.keys() {
                let row = self.cstore.get_or_init(*id).to_vec();
                self.hstore.insert(*id, row);
            }
        }
    }

    /// Close the current training iteration: record stats, run the periodic
    /// flush schedule, and advance the iteration counter. The promotion check
    /// runs once, when warmup ends.
    pub fn end_iteration(&mut self) {
        let ratio = if self.iter_hot + self.iter_cold > 0 {
            self.iter_hot as f64 / (self.iter_hot + self.iter_cold) as f64
        } else {
            0.0
        };
        self.iter_log.push(IterRecord {
            iteration: self.itr,
            hot_hits: self.iter_hot,
            cold_hits: self.iter_cold,
            hit_ratio: ratio,
            hstore_bytes: self.hstore_bytes(),
        });
        self.iter_hot = 0;
        self.iter_cold = 0;

        if !self.in_warmup() && self.itr % self.flush_iters == 0 {
            self.flush();
        }
        self.itr += 1;
        if self.itr == self.warmup_iters {
            self.maybe_promote_all();
        }
        debug_assert!(self.hstore_bytes() <= self.capacity_bytes);
    }

    /// Post-warmup hit ratio.
    pub fn hit_ratio(&self) -> f64 {
        if self.stats.queries == 0 {
            0.0
        } else {
            self.stats.hot_hits as f64 / self.stats.queries as f64
        }
    }

    /// Writes land in the cold store; the hot copy is refreshed in place so
    /// queries stay tier-transparent.
    pub fn update(&mut self, id: u64, row: Vec<f32>) -> crate::error::Result<()> {
        if self.hstore.contains_key(&id) {
            self.hstore.insert(id, row.clone());
        }
        self.cstore.insert(id, row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(dim: usize, capacity_rows: u64, warmup: u64, flush: u64) -> HybridHashState {
        HybridHashState::new(
            EmbeddingTable::new("t", dim),
            capacity_rows * (dim as u64) * 4,
            warmup,
            flush,
        )
    }

    #[test]
    fn warmup_counts_and_tags_cold() {
        let mut s = state(2, 4, 2, 1);
        let (_, tags) = s.query(&[7, 7, 9]);
        assert!(tags.iter().all(|t| *t == RowSource::Cold));
        assert_eq!(s.count_of(7), 2);
        assert_eq!(s.count_of(9), 1);
        assert_eq!(s.stats().queries, 0);
    }

    #[test]
    fn hand_trace_of_flush_schedule() {
        // warmup_iters=1, flush_iters=1, capacity = 1 row.
        let mut s = state(2, 1, 1, 1);
        // itr 0: warmup
        s.query(&[1, 1, 2]);
        s.end_iteration();
        // itr 1: post-warmup, hot store still empty, flush afterwards
        let (_, tags) = s.query(&[1, 2]);
        assert_eq!(tags, vec![RowSource::Cold, RowSource::Cold]);
        s.end_iteration();
        assert_eq!(s.hstore_len(), 1);
        // itr 2: id 1 is the top-1 by frequency -> hot; 2 -> cold
        let (_, tags) = s.query(&[1, 2]);
        assert_eq!(tags, vec![RowSource::Hot, RowSource::Cold]);
    }

    #[test]
    fn tier_transparency() {
        let mut s = state(3, 2, 1, 1);
        let mut plain = EmbeddingTable::new("t", 3);
        let stream: [&[u64]; 4] = [&[1, 2, 3], &[1, 1, 4], &[2, 1, 3], &[4, 4, 1]];
        for ids in stream {
            let (rows, _) = s.query(ids);
            let expect = plain.gather(ids);
            assert!(rows.bit_eq(&expect));
            s.end_iteration();
        }
    }

    #[test]
    fn capacity_safety_and_tie_break() {
        let mut s = state(2, 2, 1, 1);
        s.query(&[5, 6, 7, 8]);
        s.end_iteration();
        s.query(&[5, 6, 7, 8]);
        s.end_iteration();
        // All counts equal; ties break toward smaller IDs.
        assert_eq!(s.hstore_len(), 2);
        let (_, tags) = s.query(&[5, 6, 7, 8]);
        assert_eq!(
            tags,
            vec![RowSource::Hot, RowSource::Hot, RowSource::Cold, RowSource::Cold]
        );
        assert!(s.hstore_bytes() <= s.capacity_bytes);
    }

    #[test]
    fn zero_capacity_never_hits() {
        let mut s = state(2, 0, 1, 1);
        for _ in 0..5 {
            s.query(&[1, 2, 3]);
            s.end_iteration();
        }
        assert_eq!(s.hit_ratio(), 0.0);
    }

    #[test]
    fn promote_all_hits_everything() {
        // Capacity for 100 rows, table of ~4 ids: promoted after warmup.
        let mut s = state(2, 100, 1, 4);
        s.query(&[1, 2, 3, 4]);
        s.end_iteration();
        assert!(s.is_promoted());
        let (_, tags) = s.query(&[1, 2, 3, 4]);
        assert!(tags.iter().all(|t| *t == RowSource::Hot));
        assert_eq!(s.hit_ratio(), 1.0);
    }

    #[test]
    fn counter_exactness() {
        let mut s = state(2, 2, 2, 3);
        let mut total = 0u64;
        for (i, ids) in [[1u64, 2, 3], [2, 2, 4], [9, 1, 1]].iter().enumerate() {
            s.query(ids);
            total += ids.len() as u64;
            s.end_iteration();
            let _ = i;
        }
        assert_eq!(s.fcounter_total(), total);
    }

    #[test]
    fn update_refreshes_hot_copy() {
        let mut s = state(2, 1, 1, 1);
        s.query(&[3]);
        s.end_iteration();
        s.query(&[3]);
        s.end_iteration();
        let (_, tags) = s.query(&[3]);
        assert_eq!(tags, vec![RowSource::Hot]);
        s.update(3, vec![9.0, 9.0]).unwrap();
        let (rows, tags) = s.query(&[3]);
        assert_eq!(tags, vec![RowSource::Hot]);
        assert_eq!(rows.row(0), &[9.0, 9.0]);
    }

    #[test]
    fn probe_matches_query_decisions() {
        let mut a = state(2, 2, 1, 1);
        let mut b = state(2, 2, 1, 1);
        let stream: [&[u64]; 5] = [&[1, 2, 3, 1], &[1, 2, 5], &[5, 5, 1], &[2, 3], &[1, 5, 3]];
        for ids in stream {
            let (_, tags) = a.query(ids);
            let hot_a = tags.iter().filter(|t| **t == RowSource::Hot).count() as u64;
            let (hot_b, _) = b.probe(ids);
            assert_eq!(hot_a, hot_b);
            a.end_iteration();
            b.end_iteration();
        }
        assert_eq!(a.stats(), b.stats());
    }
}
