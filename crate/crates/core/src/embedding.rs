//! Functional embedding layer: the naive per-field reference path and the
//! packed path, built from the same six operators so that optimization
//! correctness is checkable by exact output comparison.
//!
//! All reductions run in fixed input order and no floating-point
//! reassociation is permitted, so the two paths compare bitwise.

use std::collections::HashMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::hybrid_hash::HybridHashState;
use crate::packing::PackPlan;
use crate::workload::{Batch, ModelConfig};

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn with_capacity(rows: usize, cols: usize) -> Self {
        Matrix { rows: 0, cols, data: Vec::with_capacity(rows * cols) }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Exact bit-level equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn stable_hash(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn init_component(seed: u64, id: u64, col: usize) -> f32 {
    let mut x = seed ^ id.wrapping_mul(0x9E3779B97F4A7C15) ^ (col as u64).wrapping_mul(0xD1B54A32D192ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^= x >> 31;
    ((x >> 40) as f32) / 16_777_216.0 - 0.5
}

/// Growable hashmap-backed embedding table. Rows a given ID maps to are a
/// pure function of `(table_id, id)` until explicitly updated, so lookups are
/// reproducible regardless of which path materialized them first.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table_id: String,
    pub dim: usize,
    init_seed: u64,
    store: HashMap<u64, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(table_id: &str, dim: usize) -> Self {
        assert!(dim >= 1);
        EmbeddingTable {
            table_id: table_id.to_string(),
            dim,
            init_seed: stable_hash(table_id),
            store: HashMap::new(),
        }
    }

    /// Deterministic initial row for an unseen ID.
    pub fn init_vector(&self, id: u64) -> Vec<f32> {
        (0..self.dim).map(|c| init_component(self.init_seed, id, c)).collect()
    }

    pub fn get_or_init(&mut self, id: u64) -> &[f32] {
        if !self.store.contains_key(&id) {
            let v = self.init_vector(id);
            self.store.insert(id, v);
        }
        self.store.get(&id).unwrap()
    }

    pub fn peek(&self, id: u64) -> Option<&[f32]> {
        self.store.get(&id).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, id: u64, row: Vec<f32>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "row of length {} inserted into table `{}` of dim {}",
                row.len(),
                self.table_id,
                self.dim
            )));
        }
        self.store.insert(id, row);
        Ok(())
    }

    /// Row `i` of the result is the stored vector for `ids[i]`; unseen IDs
    /// are materialized via the init rule and inserted (the table grows).
    pub fn gather(&mut self, ids: &[u64]) -> Matrix {
        let mut out = Matrix::with_capacity(ids.len(), self.dim);
        for &id in ids {
            out.push_row(self.get_or_init(id));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        (self.store.len() * self.dim * 4) as u64
    }
}

/// Output of [`unique`]: de-duplicated IDs in first-occurrence order plus the
/// index mapping each input position back into `unique_ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniqueResult {
    pub unique_ids: Vec<u64>,
    pub inverse_index: Vec<usize>,
}

pub fn unique(ids: &[u64]) -> UniqueResult {
    let mut seen: HashMap<u64, usize> = HashMap::with_capacity(ids.len());
    let mut unique_ids = Vec::new();
    let mut inverse_index = Vec::with_capacity(ids.len());
    for &id in ids {
        let idx = *seen.entry(id).or_insert_with(|| {
            unique_ids.push(id);
            unique_ids.len() - 1
        });
        inverse_index.push(idx);
    }
    UniqueResult { unique_ids, inverse_index }
}

/// Output of [`partition`]: per-executor ID lists plus, for each partitioned
/// ID, its index into the unique list it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionResult {
    pub per_executor_ids: Vec<Vec<u64>>,
    pub origin_map: Vec<Vec<usize>>,
}

/// Stateless placement: an ID lives on executor `id % n_executors`.
pub fn owner_of(id: u64, n_executors: usize) -> usize {
    (id % n_executors as u64) as usize
}

pub fn partition(ids: &[u64], n_executors: usize) -> PartitionResult {
    assert!(n_executors >= 1);
    let mut per_executor_ids = vec![Vec::new(); n_executors];
    let mut origin_map = vec![Vec::new(); n_executors];
    for (idx, &id) in ids.iter().enumerate() {
        let j = owner_of(id, n_executors);
        per_executor_ids[j].push(id);
        origin_map[j].push(idx);
    }
    PartitionResult { per_executor_ids, origin_map }
}

/// One executor's partition of a table: either the bare table or the table
/// behind a two-tier hot/cold cache.
#[derive(Debug)]
pub enum Shard {
    Plain(EmbeddingTable),
    Cached(HybridHashState),
}

impl Shard {
    pub fn table(&self) -> &EmbeddingTable {
        match self {
            Shard::Plain(t) => t,
            Shard::Cached(h) => &h.cstore,
        }
    }

    pub fn dim(&self) -> usize {
        self.table().dim
    }

    pub fn query(&mut self, ids: &[u64]) -> Matrix {
        match self {
            Shard::Plain(t) => t.gather(ids),
            Shard::Cached(h) => h.query(ids).0,
        }
    }
}

/// Byte accounting of one shuffle, for the simulator and the audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleStats {
    pub per_executor_rows: Vec<usize>,
    pub dim: usize,
}

impl ShuffleStats {
    pub fn total_rows(&self) -> usize {
        self.per_executor_rows.iter().sum()
    }

    pub fn total_bytes(&self) -> u64 {
        (self.total_rows() * self.dim * 4) as u64
    }
}

/// In-process AllToAllv: each executor receives, for each of its requested
/// IDs, the owning shard's row. `requests[j]` must contain only IDs placed on
/// executor `j`.
pub fn shuffle(requests: &[Vec<u64>], shards: &mut [Shard]) -> Result<(Vec<Matrix>, ShuffleStats)> {
    if requests.len() != shards.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} request lists against {} shards",
            requests.len(),
            shards.len()
        )));
    }
    let n = shards.len();
    let mut rows = Vec::with_capacity(n);
    let mut per_executor_rows = Vec::with_capacity(n);
    for (j, ids) in requests.iter().enumerate() {
        for &id in ids {
            let owner = owner_of(id, n);
            if owner != j {
                return Err(Error::PlacementViolation { id, executor: j, owner });
            }
        }
        per_executor_rows.push(ids.len());
        rows.push(shards[j].query(ids));
    }
    let dim = shards.first().map(|s| s.dim()).unwrap_or(0);
    Ok((rows, ShuffleStats { per_executor_rows, dim }))
}

/// Concatenate locally queried and remotely fetched rows back into the
/// original (pre-unique) input order. `origin_map[0]` describes `local`;
/// `origin_map[1..]` describe `remote` in executor order.
pub fn stitch(
    local: &Matrix,
    remote: &[&Matrix],
    origin_map: &[Vec<usize>],
    inverse_index: &[usize],
) -> Result<Matrix> {
    if origin_map.len() != remote.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} origin lists for 1 local + {} remote matrices",
            origin_map.len(),
            remote.len()
        )));
    }
    let dim = local.cols();
    let n_unique: usize = origin_map.iter().map(|o| o.len()).sum();
    let mut unique_rows = Matrix::zeros(n_unique, dim);
    let mut place = |mat: &Matrix, origin: &[usize]| -> Result<()> {
        if mat.rows() != origin.len() {
            return Err(Error::ShapeMismatch(format!(
                "matrix of {} rows against origin list of {}",
                mat.rows(),
                origin.len()
            )));
        }
        if mat.cols() != dim {
            return Err(Error::ShapeMismatch(format!("dim {} vs {}", mat.cols(), dim)));
        }
        for (k, &u) in origin.iter().enumerate() {
            unique_rows.row_mut(u).copy_from_slice(mat.row(k));
        }
        Ok(())
    };
    place(local, &origin_map[0])?;
    for (j, mat) in remote.iter().enumerate() {
        place(mat, &origin_map[j + 1])?;
    }
    let mut out = Matrix::with_capacity(inverse_index.len(), dim);
    for &u in inverse_index {
        out.push_row(unique_rows.row(u));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
}

/// Pool rows by segment index. Row `k` of the output is the reduction of all
/// input rows whose segment equals `k`; segments that never occur yield zero
/// rows. Accumulation is strictly in input order.
pub fn segment_reduction_n(
    rows: &Matrix,
    segments: &[usize],
    mode: ReduceMode,
    n_segments: usize,
) -> Matrix {
    assert_eq!(rows.rows(), segments.len());
    let mut out = Matrix::zeros(n_segments, rows.cols());
    let mut counts = vec![0u32; n_segments];
    for (i, &seg) in segments.iter().enumerate() {
        let src = rows.row(i);
        let dst = out.row_mut(seg);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
        counts[seg] += 1;
    }
    if mode == ReduceMode::Mean {
        for (k, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = 1.0 / c as f32;
                for v in out.row_mut(k) {
                    *v *= inv;
                }
            }
        }
    }
    out
}

/// [`segment_reduction_n`] with the segment count inferred as `max + 1`.
pub fn segment_reduction(rows: &Matrix, segments: &[usize], mode: ReduceMode) -> Matrix {
    let n = segments.iter().copied().max().map_or(0, |m| m + 1);
    segment_reduction_n(rows, segments, mode, n)
}

/// All embedding tables of a model, each partitioned across executors by the
/// `id % n_executors` placement rule.
#[derive(Debug)]
pub struct TableSet {
    n_executors: usize,
    tables: Vec<ShardedTable>,
}

#[derive(Debug)]
pub struct ShardedTable {
    pub table_id: String,
    pub dim: usize,
    shards: Vec<Shard>,
}

impl ShardedTable {
    pub fn shard(&self, j: usize) -> &Shard {
        &self.shards[j]
    }

    pub fn shard_mut(&mut self, j: usize) -> &mut Shard {
        &mut self.shards[j]
    }

    pub fn n_shards(&self) -> usize {
        self.shards.len()
    }
}

impl TableSet {
    pub fn from_model(model: &ModelConfig, n_executors: usize) -> Result<TableSet> {
        assert!(n_executors >= 1);
        let mut tables: Vec<ShardedTable> = Vec::new();
        for f in &model.fields {
            match tables.iter().find(|t| t.table_id == f.table_ref) {
                Some(t) if t.dim != f.dim => {
                    return Err(Error::InvalidArgument(format!(
                        "table `{}` referenced with dims {} and {}",
                        f.table_ref, t.dim, f.dim
                    )));
                }
                Some(_) => {}
                None => {
                    let shards = (0..n_executors)
                        .map(|_| Shard::Plain(EmbeddingTable::new(&f.table_ref, f.dim)))
                        .collect();
                    tables.push(ShardedTable { table_id: f.table_ref.clone(), dim: f.dim, shards });
                }
            }
        }
        Ok(TableSet { n_executors, tables })
    }

    pub fn n_executors(&self) -> usize {
        self.n_executors
    }

    pub fn tables(&self) -> &[ShardedTable] {
        &self.tables
    }

    pub fn table_index(&self, table_id: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.table_id == table_id)
    }

    pub fn table_mut(&mut self, idx: usize) -> &mut ShardedTable {
        &mut self.tables[idx]
    }

    /// Put every shard behind a hot/cold cache with `capacity_bytes` of hot
    /// storage per shard.
    pub fn enable_cache(
        &mut self,
        capacity_bytes: u64,
        warmup_iters: u64,
        flush_iters: u64,
        promote_threshold: f64,
    ) {
        for t in &mut self.tables {
            for shard in &mut t.shards {
                let plain = std::mem::replace(shard, Shard::Plain(EmbeddingTable::new("swap", 1)));
                *shard = match plain {
                    Shard::Plain(table) => Shard::Cached(HybridHashState::with_threshold(
                        table,
                        capacity_bytes,
                        warmup_iters,
                        flush_iters,
                        promote_threshold,
                    )),
                    cached => cached,
                };
            }
        }
    }

    /// Advance the training-iteration counter of every cached shard,
    /// applying the periodic hot-store refresh.
    pub fn advance_iteration(&mut self) {
        for t in &mut self.tables {
            for shard in &mut t.shards {
                if let Shard::Cached(h) = shard {
                    h.end_iteration();
                }
            }
        }
    }

    /// Aggregate post-warmup hit ratio across all cached shards, or `None`
    /// when no shard is cached.
    pub fn cache_hit_ratio(&self) -> Option<f64> {
        let mut hot = 0u64;
        let mut queries = 0u64;
        let mut any = false;
        for t in &self.tables {
            for shard in &t.shards {
                if let Shard::Cached(h) = shard {
                    any = true;
                    hot += h.stats().hot_hits;
                    queries += h.stats().queries;
                }
            }
        }
        if !any {
            None
        } else if queries == 0 {
            Some(0.0)
        } else {
            Some(hot as f64 / queries as f64)
        }
    }
}

/// The duplicated per-field path: unique → partition → gather → shuffle →
/// stitch → segment reduction, independently per field. This is the oracle
/// the packed path is compared against.
pub fn lookup_reference(
    batch: &Batch,
    model: &ModelConfig,
    tables: &mut TableSet,
    mode: ReduceMode,
) -> Result<Vec<(String, Matrix)>> {
    let n = tables.n_executors();
    let mut out = Vec::with_capacity(batch.fields().len());
    for field_ids in batch.fields() {
        let field = model
            .field(&field_ids.field)
            .ok_or_else(|| Error::PlanMismatch(format!("unknown field `{}`", field_ids.field)))?;
        let ids: Vec<u64> = field_ids.pairs.iter().map(|(_, id)| *id).collect();
        let segments: Vec<usize> = field_ids.pairs.iter().map(|(i, _)| *i as usize).collect();
        let uq = unique(&ids);
        let part = partition(&uq.unique_ids, n);
        let t_idx = tables
            .table_index(&field.table_ref)
            .ok_or_else(|| Error::PlanMismatch(format!("unknown table `{}`", field.table_ref)))?;
        let table = tables.table_mut(t_idx);
        let (mats, _stats) = shuffle(&part.per_executor_ids, &mut table.shards)?;
        let rows = stitch(&mats[0], &mats[1..].iter().collect::<Vec<_>>(), &part.origin_map, &uq.inverse_index)?;
        let pooled = segment_reduction_n(&rows, &segments, mode, batch.batch_size);
        out.push((field_ids.field.clone(), pooled));
    }
    Ok(out)
}

/// The packed path: one fused unique-and-partition and one fused
/// shuffle-and-stitch per pack shard, followed by per-field pooling.
/// Output is bitwise-equal to [`lookup_reference`] on the same inputs.
pub fn lookup_packed(
    batch: &Batch,
    model: &ModelConfig,
    plan: &PackPlan,
    tables: &mut TableSet,
    mode: ReduceMode,
) -> Result<Vec<(String, Matrix)>> {
    let order = plan.shard_refs();
    lookup_packed_ordered(batch, model, plan, tables, mode, &order)
}

/// [`lookup_packed`] with an explicit shard execution order (for example an
/// interleave-group order). The order affects only which shard touches the
/// tables first, never the result.
pub fn lookup_packed_ordered(
    batch: &Batch,
    model: &ModelConfig,
    plan: &PackPlan,
    tables: &mut TableSet,
    mode: ReduceMode,
    order: &[crate::packing::ShardRef],
) -> Result<Vec<(String, Matrix)>> {
    plan.check_covers(batch)?;
    let n = tables.n_executors();
    let mut pooled: HashMap<String, Matrix> = HashMap::new();

    for &sref in order {
        let members = plan.shard_members(sref);
        let dim = plan.groups[sref.group].dim;

        // Packed ID tensor: per member field, that field's (instance, id)
        // pairs in batch order, keyed by (table, id) to keep table identity.
        let mut keys: Vec<(usize, u64)> = Vec::new();
        let mut field_ranges: Vec<(&str, usize, usize)> = Vec::new();
        let mut field_segments: Vec<Vec<usize>> = Vec::new();
        for name in members {
            let field = model
                .field(name)
                .ok_or_else(|| Error::PlanMismatch(format!("unknown field `{name}`")))?;
            let t_idx = tables
                .table_index(&field.table_ref)
                .ok_or_else(|| Error::PlanMismatch(format!("unknown table `{}`", field.table_ref)))?;
            let fids = match batch.field_ids(name) {
                Some(f) => f,
                None => continue,
            };
            let start = keys.len();
            keys.extend(fids.pairs.iter().map(|(_, id)| (t_idx, *id)));
            field_ranges.push((name.as_str(), start, keys.len()));
            field_segments.push(fids.pairs.iter().map(|(i, _)| *i as usize).collect());
        }

        // Fused unique & partition over the packed tensor.
        let mut seen: HashMap<(usize, u64), usize> = HashMap::with_capacity(keys.len());
        let mut unique_keys: Vec<(usize, u64)> = Vec::new();
        let mut inverse: Vec<usize> = Vec::with_capacity(keys.len());
        for &key in &keys {
            let idx = *seen.entry(key).or_insert_with(|| {
                unique_keys.push(key);
                unique_keys.len() - 1
            });
            inverse.push(idx);
        }
        // requests[j][t] = (ids, origin indices into unique_keys)
        let mut requests: Vec<HashMap<usize, (Vec<u64>, Vec<usize>)>> = vec![HashMap::new(); n];
        for (u_idx, &(t_idx, id)) in unique_keys.iter().enumerate() {
            let j = owner_of(id, n);
            let entry = requests[j].entry(t_idx).or_default();
            entry.0.push(id);
            entry.1.push(u_idx);
        }

        // Fused shuffle & stitch: owning shards answer straight into the
        // stitched unique-order buffer.
        let mut unique_rows = Matrix::zeros(unique_keys.len(), dim);
        for (j, per_table) in requests.iter().enumerate() {
            let mut table_indices: Vec<usize> = per_table.keys().copied().collect();
            table_indices.sort_unstable();
            for t_idx in table_indices {
                let (ids, origin) = &per_table[&t_idx];
                let mat = tables.table_mut(t_idx).shard_mut(j).query(ids);
                for (k, &u) in origin.iter().enumerate() {
                    unique_rows.row_mut(u).copy_from_slice(mat.row(k));
                }
            }
        }

        // Per-field pooling over the shard's slice of the packed tensor.
        for ((name, start, end), segments) in field_ranges.iter().zip(&field_segments) {
            let mut rows = Matrix::with_capacity(end - start, dim);
            for pos in *start..*end {
                rows.push_row(unique_rows.row(inverse[pos]));
            }
            let out = segment_reduction_n(&rows, segments, mode, batch.batch_size);
            pooled.insert(name.to_string(), out);
        }
    }

    let mut out = Vec::with_capacity(batch.fields().len());
    for f in batch.fields() {
        let mat = pooled
            .remove(&f.field)
            .ok_or_else(|| Error::PlanMismatch(format!("plan missed field `{}`", f.field)))?;
        out.push((f.field.clone(), mat));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unique_first_occurrence_order() {
        let r = unique(&[5, 3, 5, 7]);
        assert_eq!(r.unique_ids, vec![5, 3, 7]);
        assert_eq!(r.inverse_index, vec![0, 1, 0, 2]);

        let e = unique(&[]);
        assert!(e.unique_ids.is_empty() && e.inverse_index.is_empty());
    }

    #[test]
    fn unique_reconstruction_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ids: Vec<u64> = (0..10_000).map(|_| rng.gen_range(0..500)).collect();
        let r = unique(&ids);
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(r.unique_ids[r.inverse_index[i]], id);
        }
        let mut sorted = r.unique_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), r.unique_ids.len());
    }

    #[test]
    fn partition_mod_rule() {
        let r = partition(&[4, 3, 7], 2);
        assert_eq!(r.per_executor_ids[0], vec![4]);
        assert_eq!(r.per_executor_ids[1], vec![3, 7]);
        assert_eq!(r.origin_map[0], vec![0]);
        assert_eq!(r.origin_map[1], vec![1, 2]);

        let one = partition(&[9, 1, 9], 1);
        assert_eq!(one.per_executor_ids[0], vec![9, 1, 9]);
    }

    #[test]
    fn partition_union_and_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<u64> = (0..2000).map(|_| rng.gen_range(0..10_000)).collect();
        let uq = unique(&ids);
        let r = partition(&uq.unique_ids, 4);
        let mut union: Vec<u64> = r.per_executor_ids.concat();
        union.sort_unstable();
        let mut expect = uq.unique_ids.clone();
        expect.sort_unstable();
        assert_eq!(union, expect);
        for (j, list) in r.per_executor_ids.iter().enumerate() {
            assert!(list.iter().all(|&id| owner_of(id, 4) == j));
        }
    }

    #[test]
    fn gather_is_deterministic_and_grows() {
        let mut t = EmbeddingTable::new("t", 4);
        let first = t.gather(&[10]);
        let second = t.gather(&[10]);
        assert!(first.bit_eq(&second));
        assert_eq!(t.len(), 1);

        t.insert(11, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let got = t.gather(&[11, 10]);
        assert_eq!(got.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert!(got.row(1).iter().zip(first.row(0)).all(|(a, b)| a == b));
    }

    #[test]
    fn gather_rowwise_oracle() {
        let mut t = EmbeddingTable::new("x", 3);
        t.insert(5, vec![0.5, 0.5, 0.5]).unwrap();
        let ids = [5u64, 9, 5, 2];
        let got = t.gather(&ids);
        for (i, &id) in ids.iter().enumerate() {
            let expect = t.peek(id).unwrap();
            assert_eq!(got.row(i), expect);
        }
    }

    #[test]
    fn segment_reduction_examples() {
        let mut rows = Matrix::with_capacity(3, 2);
        rows.push_row(&[1.0, 2.0]);
        rows.push_row(&[3.0, 4.0]);
        rows.push_row(&[5.0, 6.0]);
        let sum = segment_reduction(&rows, &[0, 0, 1], ReduceMode::Sum);
        assert_eq!(sum.row(0), &[4.0, 6.0]);
        assert_eq!(sum.row(1), &[5.0, 6.0]);
        let mean = segment_reduction(&rows, &[0, 0, 1], ReduceMode::Mean);
        assert_eq!(mean.row(0), &[2.0, 3.0]);
        assert_eq!(mean.row(1), &[5.0, 6.0]);
    }

    #[test]
    fn segment_reduction_random_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n_rows = 200;
        let dim = 3;
        let mut rows = Matrix::with_capacity(n_rows, dim);
        let mut segments = Vec::new();
        for _ in 0..n_rows {
            let row: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            rows.push_row(&row);
            segments.push(rng.gen_range(0..17usize));
        }
        let got = segment_reduction_n(&rows, &segments, ReduceMode::Sum, 17);
        // Loop-based oracle with the same accumulation order.
        let mut expect = vec![vec![0.0f32; dim]; 17];
        for (i, &s) in segments.iter().enumerate() {
            for c in 0..dim {
                expect[s][c] += rows.row(i)[c];
            }
        }
        for (k, row) in expect.iter().enumerate() {
            assert_eq!(got.row(k), row.as_slice());
        }
    }

    #[test]
    fn segment_reduction_missing_segments_are_zero() {
        let mut rows = Matrix::with_capacity(1, 2);
        rows.push_row(&[1.0, 1.0]);
        let out = segment_reduction_n(&rows, &[2], ReduceMode::Sum, 4);
        assert_eq!(out.row(0), &[0.0, 0.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
        assert_eq!(out.row(2), &[1.0, 1.0]);
        assert_eq!(out.row(3), &[0.0, 0.0]);
    }

    #[test]
    fn shuffle_rejects_misplaced_ids() {
        let mut shards = vec![
            Shard::Plain(EmbeddingTable::new("t", 2)),
            Shard::Plain(EmbeddingTable::new("t", 2)),
        ];
        // id 3 belongs on executor 1
        let err = shuffle(&[vec![3], vec![]], &mut shards);
        assert!(matches!(err, Err(Error::PlacementViolation { id: 3, .. })));
    }

    #[test]
    fn shuffle_conserves_rows() {
        let mut shards: Vec<Shard> =
            (0..3).map(|_| Shard::Plain(EmbeddingTable::new("t", 2))).collect();
        let ids: Vec<u64> = (0..50).collect();
        let part = partition(&ids, 3);
        let (mats, stats) = shuffle(&part.per_executor_ids, &mut shards).unwrap();
        let received: usize = mats.iter().map(|m| m.rows()).sum();
        assert_eq!(received, 50);
        assert_eq!(stats.total_rows(), 50);
        assert_eq!(stats.total_bytes(), 50 * 2 * 4);
    }

    #[test]
    fn stitch_restores_input_order() {
        let mut shards: Vec<Shard> =
            (0..2).map(|_| Shard::Plain(EmbeddingTable::new("t", 2))).collect();
        let ids = [7u64, 2, 7, 5, 2];
        let uq = unique(&ids);
        let part = partition(&uq.unique_ids, 2);
        let (mats, _) = shuffle(&part.per_executor_ids, &mut shards).unwrap();
        let remote: Vec<&Matrix> = mats[1..].iter().collect();
        let rows = stitch(&mats[0], &remote, &part.origin_map, &uq.inverse_index).unwrap();
        assert_eq!(rows.rows(), ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let expect = shards[owner_of(id, 2)].table().peek(id).unwrap();
            assert_eq!(rows.row(i), expect);
        }
    }

    #[test]
    fn stitch_shape_mismatch_errors() {
        let local = Matrix::zeros(2, 3);
        let err = stitch(&local, &[], &[vec![0]], &[0]);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }
}
