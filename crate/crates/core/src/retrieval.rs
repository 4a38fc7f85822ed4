//! Support retrieval: an exhaustive-scan feature index over encoded
//! training frames, queried by mean role-wise cosine similarity.
//!
//! Similarity averages cosines over the role types both frames share;
//! frames with disjoint role sets fall back to the cosine of their verb
//! features, and the fallback is flagged so reports can count it. Scores
//! clamp to [-1, 1] (cosines can overshoot by an ulp). Ties break toward
//! the lower frame id, which keeps retrieval equal to a brute-force
//! argsort everywhere, including engineered ties.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use crate::dataset::{RoleId, VerbId};
use crate::encoder::EncodedFrame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: u64,
    pub verb: VerbId,
    pub role_types: Vec<RoleId>,
    /// Aligned with `role_types`, each of the index width.
    pub role_features: Vec<Vec<f64>>,
    /// h_v of the frame; the disjoint-role fallback compares these.
    pub verb_feature: Vec<f64>,
}

/// Immutable after build; queries are read-only scans.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    d: usize,
    entries: Vec<IndexEntry>,
    ids: BTreeSet<u64>,
}

const INDEX_MAGIC: &[u8; 8] = b"GSRIDX01";

impl FeatureIndex {
    pub fn new(d: usize) -> FeatureIndex {
        FeatureIndex { d, entries: Vec::new(), ids: BTreeSet::new() }
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, pos: usize) -> &IndexEntry {
        &self.entries[pos]
    }

    pub fn by_id(&self, id: u64) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Inserts one frame's features, enforcing the index invariants:
    /// unique id, consistent width, finite values, no zero-norm feature.
    pub fn insert(&mut self, entry: IndexEntry) -> Result<()> {
        if self.ids.contains(&entry.id) {
            return Err(Error::Index(format!("duplicate frame id {}", entry.id)));
        }
        if entry.role_types.len() != entry.role_features.len() {
            return Err(Error::Index(format!(
                "frame {}: {} role types but {} features",
                entry.id,
                entry.role_types.len(),
                entry.role_features.len()
            )));
        }
        if entry.role_types.is_empty() {
            return Err(Error::Index(format!("frame {} has no roles", entry.id)));
        }
        let check = |what: &str, feature: &[f64]| -> Result<()> {
            if feature.len() != self.d {
                return Err(Error::Index(format!(
                    "frame {}: {what} feature is {}-wide, index expects {}",
                    entry.id,
                    feature.len(),
                    self.d
                )));
            }
            if !feature.iter().all(|v| v.is_finite()) {
                return Err(Error::Index(format!("frame {}: non-finite {what} feature", entry.id)));
            }
            if feature.iter().all(|&v| v == 0.0) {
                return Err(Error::Index(format!(
                    "frame {}: zero-norm {what} feature carries no direction to compare",
                    entry.id
                )));
            }
            Ok(())
        };
        check("verb", &entry.verb_feature)?;
        for (t, f) in entry.role_types.iter().zip(&entry.role_features) {
            check(&format!("role-{t}"), f)?;
        }
        self.ids.insert(entry.id);
        self.entries.push(entry);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.id.to_le_bytes());
            out.extend_from_slice(&e.verb.0.to_le_bytes());
            out.extend_from_slice(&(e.role_types.len() as u32).to_le_bytes());
            for r in &e.role_types {
                out.extend_from_slice(&r.0.to_le_bytes());
            }
            for f in e.role_features.iter().chain(std::iter::once(&e.verb_feature)) {
                for v in f {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureIndex> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fail = |m: &str| Error::Index(format!("{}: {m}", path.display()));
        let mut off = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if off + n > bytes.len() {
                return Err(fail("truncated"));
            }
            let s = &bytes[off..off + n];
            off += n;
            Ok(s)
        };
        if take(8)? != INDEX_MAGIC {
            return Err(fail("not an index file"));
        }
        let read_u64 = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
        let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let d = read_u64(take(8)?) as usize;
        let count = read_u64(take(8)?) as usize;
        let mut index = FeatureIndex::new(d);
        for _ in 0..count {
            let id = read_u64(take(8)?);
            let verb = VerbId(read_u32(take(4)?));
            let m = read_u32(take(4)?) as usize;
            let mut role_types = Vec::with_capacity(m);
            for _ in 0..m {
                role_types.push(RoleId(read_u32(take(4)?)));
            }
            let mut feature = |n: usize| -> Result<Vec<f64>> {
                Ok(take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect())
            };
            let mut role_features = Vec::with_capacity(m);
            for _ in 0..m {
                role_features.push(feature(d)?);
            }
            let verb_feature = feature(d)?;
            index.insert(IndexEntry { id, verb, role_types, role_features, verb_feature })?;
        }
        if off != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(index)
    }
}

/// Borrowed view of the features one side of a similarity carries.
#[derive(Debug, Clone, Copy)]
pub struct QueryFeatures<'a> {
    pub verb: VerbId,
    pub role_types: &'a [RoleId],
    pub role_features: &'a [Vec<f64>],
    pub verb_feature: &'a [f64],
}

impl<'a> From<&'a EncodedFrame> for QueryFeatures<'a> {
    fn from(f: &'a EncodedFrame) -> Self {
        QueryFeatures {
            verb: f.pseudo_verb,
            role_types: &f.role_types,
            role_features: &f.role_features,
            verb_feature: &f.verb_feature,
        }
    }
}

impl<'a> From<&'a IndexEntry> for QueryFeatures<'a> {
    fn from(e: &'a IndexEntry) -> Self {
        QueryFeatures {
            verb: e.verb,
            role_types: &e.role_types,
            role_features: &e.role_features,
            verb_feature: &e.verb_feature,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine over shared role types (iterated in role-type order), or
/// the verb-feature cosine when the frames share none. Returns the score
/// and whether the fallback fired.
pub fn frame_similarity(a: QueryFeatures<'_>, b: QueryFeatures<'_>) -> (f64, bool) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut shared: Vec<RoleId> = a.role_types.iter().filter(|t| b.role_types.contains(t)).copied().collect();
    shared.sort();
    for t in shared {
        let fa = &a.role_features[a.role_types.iter().position(|&x| x == t).expect("shared")];
        let fb = &b.role_features[b.role_types.iter().position(|&x| x == t).expect("shared")];
        sum += cosine(fa, fb);
        n += 1;
    }
    if n == 0 {
        (cosine(a.verb_feature, b.verb_feature), true)
    } else {
        (sum / n as f64, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetrievalMode {
    /// Score every entry over the shared role types.
    Intersection,
    /// Consider only entries whose verb equals the query's.
    StrictVerb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem {
    /// Position in the index's entry list.
    pub pos: usize,
    pub id: u64,
    pub score: f64,
    pub verb_fallback: bool,
}

/// Retrieved support frames, scores non-increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupportSet {
    pub items: Vec<SupportItem>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Exhaustive top-K: scores every candidate, orders by score descending
/// with ties toward the lower frame id, takes K. `exclude_id` drops the
/// query's own training entry.
pub fn topk_support(
    query: QueryFeatures<'_>,
    index: &FeatureIndex,
    k: usize,
    exclude_id: Option<u64>,
    mode: RetrievalMode,
) -> Result<SupportSet> {
    if k == 0 {
        return Err(Error::Index("support size must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Index("cannot retrieve support from an empty index".into()));
    }
    let mut scored: Vec<SupportItem> = Vec::with_capacity(index.len());
    for (pos, entry) in index.entries().iter().enumerate() {
        if exclude_id == Some(entry.id) {
            continue;
        }
        if mode == RetrievalMode::StrictVerb && entry.verb != query.verb {
            continue;
        }
        let (score, verb_fallback) = frame_similarity(query, entry.into());
        scored.push(SupportItem { pos, id: entry.id, score, verb_fallback });
    }
    scored.sort_by(|x, y| y.score.total_cmp(&x.score).then(x.id.cmp(&y.id)));
    scored.truncate(k);
    Ok(SupportSet { items: scored })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn entry(id: u64, verb: u32, types: &[u32], feats: &[&[f64]], verb_feat: &[f64]) -> IndexEntry {
        IndexEntry {
            id,
            verb: VerbId(verb),
            role_types: types.iter().map(|&t| RoleId(t)).collect(),
            role_features: feats.iter().map(|f| f.to_vec()).collect(),
            verb_feature: verb_feat.to_vec(),
        }
    }

    fn random_entry(rng: &mut CounterRng, id: u64, d: usize, verbs: u32, type_pool: u32) -> IndexEntry {
        let m = 1 + rng.below(3);
        let mut types: Vec<u32> = (0..type_pool).collect();
        rng.shuffle(&mut types);
        let verb = VerbId(rng.below(verbs as usize) as u32);
        let feat = |rng: &mut CounterRng| -> Vec<f64> { (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect() };
        IndexEntry {
            id,
            verb,
            role_types: types[..m].iter().map(|&t| RoleId(t)).collect(),
            role_features: (0..m).map(|_| feat(rng)).collect(),
            verb_feature: feat(rng),
        }
    }

    #[test]
    fn insert_enumerate_and_invariants() {
        let mut index = FeatureIndex::new(2);
        for id in 0..5u64 {
            index.insert(entry(id, 0, &[0], &[&[1.0, id as f64]], &[1.0, 0.0])).unwrap();
        }
        assert_eq!(index.len(), 5);
        assert!(index.insert(entry(3, 0, &[0], &[&[1.0, 0.0]], &[1.0, 0.0])).is_err(), "duplicate id");
        let zero = index.insert(entry(9, 0, &[0], &[&[0.0, 0.0]], &[1.0, 0.0]));
        match zero {
            Err(Error::Index(m)) => assert!(m.contains("zero-norm"), "{m}"),
            other => panic!("expected zero-norm rejection, got {other:?}"),
        }
        assert!(index.insert(entry(10, 0, &[0, 1], &[&[1.0, 0.0]], &[1.0, 0.0])).is_err(), "type/feature mismatch");
        assert!(index.insert(entry(11, 0, &[0], &[&[1.0]], &[1.0, 0.0])).is_err(), "width mismatch");
    }

    #[test]
    fn disk_round_trip_is_bit_exact() {
        let mut rng = CounterRng::keyed(&[21]);
        let mut index = FeatureIndex::new(6);
        for id in 0..12u64 {
            index.insert(random_entry(&mut rng, id, 6, 4, 5)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.idx");
        index.save(&path).unwrap();
        assert_eq!(FeatureIndex::load(&path).unwrap(), index);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(FeatureIndex::load(&path).is_err());
    }

    #[test]
    fn similarity_hand_oracles() {
        let a = entry(0, 0, &[0, 1], &[&[1.0, 0.0], &[0.0, 2.0]], &[1.0, 1.0]);
        // identical directions → 1.0
        let (s, fb) = frame_similarity((&a).into(), (&a).into());
        assert_eq!(s, 1.0);
        assert!(!fb);
        // orthogonal on every shared role → 0.0
        let b = entry(1, 0, &[0, 1], &[&[0.0, 1.0], &[3.0, 0.0]], &[1.0, 1.0]);
        let (s, _) = frame_similarity((&a).into(), (&b).into());
        assert_eq!(s, 0.0);
        // one aligned (cos 1), one orthogonal (cos 0) → mean 0.5
        let c = entry(2, 0, &[0, 1], &[&[2.0, 0.0], &[5.0, 0.0]], &[1.0, 1.0]);
        let (s, _) = frame_similarity((&a).into(), (&c).into());
        assert_eq!(s, 0.5);
        // positive scaling of a feature changes nothing
        let scaled = entry(3, 0, &[0, 1], &[&[0.25, 0.0], &[0.0, 17.0]], &[1.0, 1.0]);
        let (s, _) = frame_similarity((&a).into(), (&scaled).into());
        assert_eq!(s, 1.0);
    }

    #[test]
    fn similarity_is_symmetric() {
        let mut rng = CounterRng::keyed(&[33]);
        for i in 0..20u64 {
            let a = random_entry(&mut rng, i, 4, 3, 4);
            let b = random_entry(&mut rng, 100 + i, 4, 3, 4);
            let (sab, fab) = frame_similarity((&a).into(), (&b).into());
            let (sba, fba) = frame_similarity((&b).into(), (&a).into());
            assert_eq!(sab, sba);
            assert_eq!(fab, fba);
        }
    }

    #[test]
    fn disjoint_role_sets_fall_back_to_verb_cosine() {
        let a = entry(0, 0, &[0], &[&[1.0, 0.0]], &[1.0, 0.0]);
        let b = entry(1, 1, &[1], &[&[1.0, 0.0]], &[0.0, 1.0]);
        let (s, fallback) = frame_similarity((&a).into(), (&b).into());
        assert!(fallback);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn k_larger_than_index_returns_everything_sorted() {
        let mut index = FeatureIndex::new(2);
        index.insert(entry(0, 0, &[0], &[&[1.0, 0.0]], &[1.0, 0.0])).unwrap();
        index.insert(entry(1, 0, &[0], &[&[0.0, 1.0]], &[1.0, 0.0])).unwrap();
        index.insert(entry(2, 0, &[0], &[&[1.0, 1.0]], &[1.0, 0.0])).unwrap();
        let query = entry(99, 0, &[0], &[&[1.0, 0.0]], &[1.0, 0.0]);
        let set = topk_support((&query).into(), &index, 10, None, RetrievalMode::Intersection).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.items[0].id, 0);
        assert_eq!(set.items[0].score, 1.0);
        for w in set.items.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn exact_copy_wins_at_k1_and_self_exclusion_skips_it() {
        let mut index = FeatureIndex::new(2);
        index.insert(entry(7, 0, &[0], &[&[3.0, 4.0]], &[1.0, 0.0])).unwrap();
        index.insert(entry(8, 0, &[0], &[&[-4.0, 3.0]], &[1.0, 0.0])).unwrap();
        let query = entry(7, 0, &[0], &[&[3.0, 4.0]], &[1.0, 0.0]);
        let set = topk_support((&query).into(), &index, 1, None, RetrievalMode::Intersection).unwrap();
        assert_eq!((set.items[0].id, set.items[0].score), (7, 1.0));
        let set = topk_support((&query).into(), &index, 1, Some(7), RetrievalMode::Intersection).unwrap();
        assert_eq!(set.items[0].id, 8);
    }

    #[test]
    fn strict_mode_keeps_only_matching_verbs() {
        let mut index = FeatureIndex::new(2);
        index.insert(entry(0, 0, &[0], &[&[1.0, 0.0]], &[1.0, 0.0])).unwrap();
        index.insert(entry(1, 1, &[0], &[&[1.0, 0.0]], &[1.0, 0.0])).unwrap();
        index.insert(entry(2, 1, &[0], &[&[0.5, 0.5]], &[1.0, 0.0])).unwrap();
        let query = entry(9, 1, &[0], &[&[1.0, 0.0]], &[1.0, 0.0]);
        let set = topk_support((&query).into(), &index, 5, None, RetrievalMode::StrictVerb).unwrap();
        assert_eq!(set.items.iter().map(|i| i.id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn empty_index_and_zero_k_are_errors() {
        let index = FeatureIndex::new(2);
        let query = entry(0, 0, &[0], &[&[1.0, 0.0]], &[1.0, 0.0]);
        assert!(topk_support((&query).into(), &index, 1, None, RetrievalMode::Intersection).is_err());
        let mut index = FeatureIndex::new(2);
        index.insert(entry(0, 0, &[0], &[&[1.0, 0.0]], &[1.0, 0.0])).unwrap();
        assert!(topk_support((&query).into(), &index, 0, None, RetrievalMode::Intersection).is_err());
    }

    /// Independent selection loop (repeated max-scan) must agree with the
    /// sort-based implementation on random indexes with planted ties.
    #[test]
    fn matches_brute_force_oracle_with_ties() {
        let mut rng = CounterRng::keyed(&[77, 1]);
        for trial in 0..40u64 {
            let d = 3 + rng.below(4);
            let mut index = FeatureIndex::new(d);
            let n = 10 + rng.below(40);
            for id in 0..n as u64 {
                index.insert(random_entry(&mut rng, id, d, 4, 5)).unwrap();
            }
            // plant ties: clone an existing entry's features under new ids
            let victim = index.entry(rng.below(n)).clone();
            for extra in 0..2u64 {
                let mut tie = victim.clone();
                tie.id = 1000 + trial * 10 + extra;
                index.insert(tie).unwrap();
            }
            let query = random_entry(&mut rng, 5000, d, 4, 5);
            let k = 1 + rng.below(7);
            let got = topk_support((&query).into(), &index, k, None, RetrievalMode::Intersection).unwrap();

            let mut remaining: Vec<SupportItem> = index
                .entries()
                .iter()
                .enumerate()
                .map(|(pos, e)| {
                    let (score, verb_fallback) = frame_similarity((&query).into(), e.into());
                    SupportItem { pos, id: e.id, score, verb_fallback }
                })
                .collect();
            let mut expect = Vec::new();
            while expect.len() < k && !remaining.is_empty() {
                let mut best = 0usize;
                for i in 1..remaining.len() {
                    let b = &remaining[best];
                    let c = &remaining[i];
                    if c.score > b.score || (c.score == b.score && c.id < b.id) {
                        best = i;
                    }
                }
                expect.push(remaining.remove(best));
            }
            assert_eq!(got.items, expect, "trial {trial}");
        }
    }
}
