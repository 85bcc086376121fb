//! Importance-weighted link prediction over all snapshot spaces.
//!
//! For a query at snapshot `i`, each earlier snapshot `j` gets a relevance
//! `delta_j`: the mean of the top-k cosines between the query relation and
//! the relations the anchor takes part in within the training delta of `j`.
//! A softmax over `delta_0..delta_i` weights per-snapshot scores
//! `-||h_j + r - t_j||`, where entity vectors are resolved through pointers.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::config::{Incidence, TrainConfig};
use crate::error::{Error, Result};
use crate::kg::{EntityId, GrowingKg, RelationId, Triple};
use crate::store::EmbeddingStore;
use crate::trainer::score::{Norm, TransE, TripleScorer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(anchor, r, ?)`
    Tail,
    /// `(?, r, anchor)`
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub direction: Direction,
    pub anchor: EntityId,
    pub relation: RelationId,
    pub snapshot: usize,
}

impl Query {
    pub fn tail(head: EntityId, relation: RelationId, snapshot: usize) -> Self {
        Self {
            direction: Direction::Tail,
            anchor: head,
            relation,
            snapshot,
        }
    }

    pub fn head(relation: RelationId, tail: EntityId, snapshot: usize) -> Self {
        Self {
            direction: Direction::Head,
            anchor: tail,
            relation,
            snapshot,
        }
    }

    /// The triple this query forms with `answer`.
    pub fn complete(&self, answer: EntityId) -> Triple {
        match self.direction {
            Direction::Tail => Triple::new(self.anchor, self.relation, answer),
            Direction::Head => Triple::new(answer, self.relation, self.anchor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    /// Raw relevance per snapshot `0..=i`.
    pub delta: Vec<f64>,
    /// Normalized weights per snapshot `0..=i`.
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub entity: EntityId,
    /// `psi_j` per snapshot, `None` where anchor or candidate is unrepresentable.
    pub per_snapshot: Vec<Option<f64>>,
    pub aggregated: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub top_k: usize,
    pub norm: Norm,
    pub incidence: Incidence,
    /// Divide by the weight mass of contributing snapshots.
    pub renormalize: bool,
    /// `beta_j = 1/(i+1)` instead of the softmax.
    pub uniform_importance: bool,
    /// Score with the snapshot-`i` resolution only.
    pub single_space: bool,
}

impl InferenceOptions {
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        if config.top_k < 1 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(Self {
            top_k: config.top_k,
            norm: Norm::from_p(config.norm)?,
            incidence: config.incidence,
            renormalize: config.renormalize,
            uniform_importance: config.uniform_importance,
            single_space: config.no_decoupling,
        })
    }
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default()).expect("default config is valid")
    }
}

/// Relations of training-delta triples at snapshot `j` that touch `anchor`.
/// With [`Incidence::QueryRole`] only triples where the anchor plays the
/// query's role count (head for tail queries, tail for head queries).
pub fn candidate_relations(
    anchor: EntityId,
    direction: Direction,
    j: usize,
    kg: &GrowingKg,
    incidence: Incidence,
) -> Result<BTreeSet<RelationId>> {
    let delta = &kg.delta(j)?.train_delta;
    let as_head = incidence == Incidence::Both || direction == Direction::Tail;
    let as_tail = incidence == Incidence::Both || direction == Direction::Head;
    Ok(delta
        .iter()
        .filter(|t| (as_head && t.head == anchor) || (as_tail && t.tail == anchor))
        .map(|t| t.relation)
        .collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// Cosines between the query relation and each relation of `relations`,
/// in ascending relation order. Relations without a vector are skipped.
pub fn relation_similarity_set(
    relations: &BTreeSet<RelationId>,
    query_relation: RelationId,
    store: &EmbeddingStore,
) -> Result<Vec<f64>> {
    let r = store.relation_embedding(query_relation)?;
    Ok(relations
        .iter()
        .filter_map(|&rj| store.relations().get(rj))
        .map(|v| cosine(v, r))
        .collect())
}

/// Mean of the `k` largest values; of all values when fewer than `k`;
/// `0.0` for an empty set.
pub fn topk_average(similarities: &[f64], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("top-k requires k >= 1".into()));
    }
    if similarities.is_empty() {
        return Ok(0.0);
    }
    let mut sorted = similarities.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let take = k.min(sorted.len());
    Ok(sorted[..take].iter().sum::<f64>() / take as f64)
}

/// Max-shifted softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Weighted combination of per-snapshot scores. With `renormalize` the
/// weights of non-contributing snapshots are removed from the denominator;
/// otherwise they contribute zero. `None` when nothing contributes.
pub fn aggregate_score(per_snapshot: &[Option<f64>], beta: &[f64], renormalize: bool) -> Option<f64> {
    let mut num = 0.0f64;
    let mut mass = 0.0f64;
    let mut any = false;
    for (psi, &b) in per_snapshot.iter().zip(beta) {
        if let Some(psi) = psi {
            num += b * psi;
            mass += b;
            any = true;
        }
    }
    if !any {
        None
    } else if renormalize {
        Some(num / mass)
    } else {
        Some(num)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    UnknownRelation,
    UnrepresentableAnchor,
    UnrepresentableGold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    /// Pessimistic: equal-scored candidates rank ahead of the gold entity.
    pub rank: usize,
    pub gold_score: f64,
    /// Entities scored (after filtering, gold included).
    pub n_candidates: usize,
    pub top: Vec<(EntityId, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankResult {
    Ranked(RankOutcome),
    Skipped(SkipReason),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub query: Query,
    pub importance: ImportanceProfile,
    /// Top-m `(entity, psi_j)` for each snapshot `j`.
    pub per_snapshot_top: Vec<Vec<(EntityId, f64)>>,
    pub final_top: Vec<(EntityId, f64)>,
}

type IncidenceMap = HashMap<EntityId, (BTreeSet<RelationId>, BTreeSet<RelationId>)>;
type CacheKey = (Direction, EntityId, RelationId, usize);

/// Query engine over a store. Resolved entity vectors are borrowed from the
/// store once per snapshot; importance profiles are memoized.
pub struct Predictor<'a> {
    kg: &'a GrowingKg,
    store: &'a EmbeddingStore,
    options: InferenceOptions,
    scorer: TransE,
    resolved: Vec<Vec<Option<&'a [f32]>>>,
    incidence: Vec<IncidenceMap>,
    cache: RwLock<HashMap<CacheKey, ImportanceProfile>>,
}

impl<'a> Predictor<'a> {
    pub fn new(kg: &'a GrowingKg, store: &'a EmbeddingStore, options: InferenceOptions) -> Result<Self> {
        if options.top_k < 1 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if store.num_spaces() > kg.num_snapshots() {
            return Err(Error::Protocol(format!(
                "store has {} spaces but the KG only {} snapshots",
                store.num_spaces(),
                kg.num_snapshots()
            )));
        }
        let mut resolved = Vec::with_capacity(store.num_spaces());
        for j in 0..store.num_spaces() {
            let mut row = Vec::with_capacity(store.n_entities());
            for e in 0..store.n_entities() as EntityId {
                row.push(store.resolve(e, j)?.vector());
            }
            resolved.push(row);
        }
        let incidence = (0..store.num_spaces())
            .map(|j| {
                let mut map = IncidenceMap::new();
                for t in &kg.deltas()[j].train_delta {
                    map.entry(t.head).or_default().0.insert(t.relation);
                    map.entry(t.tail).or_default().1.insert(t.relation);
                }
                map
            })
            .collect();
        Ok(Self {
            kg,
            store,
            options,
            scorer: TransE::new(options.norm),
            resolved,
            incidence,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn options(&self) -> &InferenceOptions {
        &self.options
    }

    pub fn kg(&self) -> &GrowingKg {
        self.kg
    }

    pub fn store(&self) -> &EmbeddingStore {
        self.store
    }

    fn check(&self, query: &Query) -> Result<()> {
        if query.snapshot >= self.store.num_spaces() {
            return Err(Error::Protocol(format!(
                "query at snapshot {} but only {} snapshots are trained",
                query.snapshot,
                self.store.num_spaces()
            )));
        }
        Ok(())
    }

    fn relations_at(&self, query: &Query, j: usize) -> BTreeSet<RelationId> {
        let Some((as_head, as_tail)) = self.incidence[j].get(&query.anchor) else {
            return BTreeSet::new();
        };
        match (self.options.incidence, query.direction) {
            (Incidence::Both, _) => as_head.union(as_tail).copied().collect(),
            (Incidence::QueryRole, Direction::Tail) => as_head.clone(),
            (Incidence::QueryRole, Direction::Head) => as_tail.clone(),
        }
    }

    /// Relevance and weights of snapshots `0..=query.snapshot`.
    pub fn importance(&self, query: &Query) -> Result<ImportanceProfile> {
        self.check(query)?;
        let key = (query.direction, query.anchor, query.relation, query.snapshot);
        if let Some(p) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let mut delta = Vec::with_capacity(query.snapshot + 1);
        for j in 0..=query.snapshot {
            let rels = self.relations_at(query, j);
            let sims = relation_similarity_set(&rels, query.relation, self.store)?;
            delta.push(topk_average(&sims, self.options.top_k)?);
        }
        let beta = if self.options.uniform_importance {
            vec![1.0 / delta.len() as f64; delta.len()]
        } else {
            softmax(&delta)
        };
        let profile = ImportanceProfile { delta, beta };
        self.cache
            .write()
            .expect("cache lock")
            .insert(key, profile.clone());
        Ok(profile)
    }

    /// `psi_j` for `candidate`, or `None` if either side is unrepresentable
    /// at `j`.
    pub fn snapshot_score(&self, query: &Query, candidate: EntityId, j: usize) -> Option<f64> {
        let r = self.store.relations().get(query.relation)?;
        let row = self.resolved.get(j)?;
        let a = (*row.get(query.anchor as usize)?)?;
        let c = (*row.get(candidate as usize)?)?;
        Some(match query.direction {
            Direction::Tail => -self.scorer.distance(a, r, c),
            Direction::Head => -self.scorer.distance(c, r, a),
        })
    }

    pub fn score_candidate(&self, query: &Query, candidate: EntityId, profile: &ImportanceProfile) -> CandidateScore {
        let i = query.snapshot;
        if self.options.single_space {
            let mut per_snapshot = vec![None; i + 1];
            per_snapshot[i] = self.snapshot_score(query, candidate, i);
            return CandidateScore {
                entity: candidate,
                aggregated: per_snapshot[i],
                per_snapshot,
            };
        }
        let per_snapshot: Vec<Option<f64>> = (0..=i)
            .map(|j| self.snapshot_score(query, candidate, j))
            .collect();
        let aggregated = aggregate_score(&per_snapshot, &profile.beta, self.options.renormalize);
        CandidateScore {
            entity: candidate,
            per_snapshot,
            aggregated,
        }
    }

    fn skip_reason(&self, query: &Query) -> Option<SkipReason> {
        if self.store.relations().get(query.relation).is_none() {
            return Some(SkipReason::UnknownRelation);
        }
        if self.resolved[query.snapshot][query.anchor as usize].is_none() {
            return Some(SkipReason::UnrepresentableAnchor);
        }
        None
    }

    fn candidates(&self, query: &Query) -> Result<&'a BTreeSet<EntityId>> {
        Ok(&self.kg.snapshot(query.snapshot)?.entities)
    }

    /// Filtered rank of `gold` among all entities of snapshot `i`.
    pub fn rank(
        &self,
        query: &Query,
        gold: EntityId,
        filter: &HashSet<Triple>,
        top_m: usize,
    ) -> Result<RankResult> {
        self.check(query)?;
        let entities = self.candidates(query)?;
        if !entities.contains(&gold) {
            return Err(Error::Protocol(format!(
                "gold entity {gold} is not part of snapshot {}",
                query.snapshot
            )));
        }
        if let Some(reason) = self.skip_reason(query) {
            return Ok(RankResult::Skipped(reason));
        }
        let profile = self.importance(query)?;
        let Some(gold_score) = self.score_candidate(query, gold, &profile).aggregated else {
            return Ok(RankResult::Skipped(SkipReason::UnrepresentableGold));
        };
        let mut rank = 1;
        let mut scored = Vec::new();
        for &e in entities {
            if e != gold && filter.contains(&query.complete(e)) {
                continue;
            }
            let score = if e == gold {
                gold_score
            } else {
                match self.score_candidate(query, e, &profile).aggregated {
                    Some(s) => s,
                    None => continue,
                }
            };
            if e != gold && score >= gold_score {
                rank += 1;
            }
            scored.push((e, score));
        }
        let n_candidates = scored.len();
        Ok(RankResult::Ranked(RankOutcome {
            rank,
            gold_score,
            n_candidates,
            top: top_m_of(scored, top_m),
        }))
    }

    /// Importance, per-snapshot top lists and the final top list for a query.
    /// No filtering is applied.
    pub fn explain(&self, query: &Query, m: usize) -> Result<Explanation> {
        self.check(query)?;
        if let Some(reason) = self.skip_reason(query) {
            return Err(Error::Protocol(format!("query cannot be scored: {reason:?}")));
        }
        let importance = self.importance(query)?;
        let entities = self.candidates(query)?;
        let scores: Vec<CandidateScore> = entities
            .iter()
            .map(|&e| self.score_candidate(query, e, &importance))
            .collect();
        let per_snapshot_top = (0..=query.snapshot)
            .map(|j| {
                let list = scores
                    .iter()
                    .filter_map(|c| c.per_snapshot[j].map(|s| (c.entity, s)))
                    .collect();
                top_m_of(list, m)
            })
            .collect();
        let final_top = top_m_of(
            scores
                .iter()
                .filter_map(|c| c.aggregated.map(|s| (c.entity, s)))
                .collect(),
            m,
        );
        Ok(Explanation {
            query: *query,
            importance,
            per_snapshot_top,
            final_top,
        })
    }
}

fn top_m_of(mut scored: Vec<(EntityId, f64)>, m: usize) -> Vec<(EntityId, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(m);
    scored
}

/// One-off importance profile for a query.
pub fn snapshot_importance(
    query: &Query,
    kg: &GrowingKg,
    store: &EmbeddingStore,
    options: InferenceOptions,
) -> Result<ImportanceProfile> {
    Predictor::new(kg, store, options)?.importance(query)
}

/// One-off filtered rank of `gold`.
pub fn rank_query(
    query: &Query,
    gold: EntityId,
    filter: &HashSet<Triple>,
    kg: &GrowingKg,
    store: &EmbeddingStore,
    options: InferenceOptions,
    top_m: usize,
) -> Result<RankResult> {
    Predictor::new(kg, store, options)?.rank(query, gold, filter, top_m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Snapshot, Vocab};
    use crate::store::SnapshotSpace;

    #[test]
    fn topk_examples() {
        assert!((topk_average(&[0.9, 0.8, 0.1, 0.05], 3).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(topk_average(&[0.5], 3).unwrap(), 0.5);
        assert_eq!(topk_average(&[], 3).unwrap(), 0.0);
        assert!(matches!(topk_average(&[0.1], 0), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let b = softmax(&[0.9, 0.3, 0.3]);
        for (x, y) in b.iter().zip([0.476730027, 0.261634986, 0.261634986]) {
            assert!((x - y).abs() < 1e-8, "{b:?}");
        }
        let u = softmax(&[0.2; 4]);
        assert!(u.iter().all(|x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn aggregation_examples() {
        let psi = [Some(-1.0), Some(-5.0), Some(-5.0)];
        assert!((aggregate_score(&psi, &[0.8, 0.1, 0.1], true).unwrap() + 1.8).abs() < 1e-12);
        let single = [None, Some(-3.0), None];
        assert!((aggregate_score(&single, &[0.8, 0.1, 0.1], true).unwrap() + 3.0).abs() < 1e-12);
        assert!((aggregate_score(&single, &[0.8, 0.1, 0.1], false).unwrap() + 0.3).abs() < 1e-12);
        assert_eq!(aggregate_score(&[None, None], &[0.5, 0.5], true), None);
    }

    fn toy() -> (GrowingKg, EmbeddingStore) {
        // entities a=0, b=1, c=2, d=3; relations r1=0, r2=1
        let mut ents = Vocab::new();
        for l in ["a", "b", "c", "d"] {
            ents.intern(l);
        }
        let mut rels = Vocab::new();
        rels.intern("r1");
        rels.intern("r2");
        let s0 = Snapshot {
            index: 0,
            train: vec![Triple::new(0, 0, 1), Triple::new(2, 1, 0)],
            valid: vec![Triple::new(0, 1, 2)],
            test: vec![],
            entities: [0, 1, 2].into_iter().collect(),
            relations: [0, 1].into_iter().collect(),
        };
        let s1 = Snapshot {
            index: 1,
            train: vec![Triple::new(3, 0, 1)],
            valid: vec![],
            test: vec![Triple::new(0, 0, 3)],
            entities: [0, 1, 2, 3].into_iter().collect(),
            relations: [0, 1].into_iter().collect(),
        };
        let kg = GrowingKg::from_parts(ents, rels, vec![s0, s1]).unwrap();
        let mut store = EmbeddingStore::new(2, 4, 2);
        let mut sp0 = SnapshotSpace::new(0, 2);
        sp0.insert_explicit(0, vec![0.0, 0.0]).unwrap();
        sp0.insert_explicit(1, vec![1.0, 0.0]).unwrap();
        sp0.insert_explicit(2, vec![0.0, 1.0]).unwrap();
        store.push_space(sp0).unwrap();
        store.seal(0).unwrap();
        let mut sp1 = SnapshotSpace::new(1, 2);
        sp1.insert_explicit(3, vec![1.0, 0.5]).unwrap();
        sp1.insert_explicit(1, vec![2.0, 0.0]).unwrap();
        store.push_space(sp1).unwrap();
        store.seal(1).unwrap();
        store.set_relation(0, vec![1.0, 0.0], 0).unwrap();
        store.set_relation(1, vec![1.0, 1.0], 0).unwrap();
        (kg, store)
    }

    #[test]
    fn candidate_relations_both_roles_and_training_only() {
        let (kg, _) = toy();
        let both = candidate_relations(0, Direction::Tail, 0, &kg, Incidence::Both).unwrap();
        assert_eq!(both, [0, 1].into_iter().collect());
        let role = candidate_relations(0, Direction::Tail, 0, &kg, Incidence::QueryRole).unwrap();
        assert_eq!(role, [0].into_iter().collect());
        // anchor 0 only occurs in the test split of snapshot 1
        assert!(candidate_relations(0, Direction::Tail, 1, &kg, Incidence::Both)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn relation_similarity_examples() {
        let (_, store) = toy();
        let rels: BTreeSet<_> = [0, 1].into_iter().collect();
        let sims = relation_similarity_set(&rels, 0, &store).unwrap();
        assert_eq!(sims[0], 1.0);
        assert!((sims[1] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn scores_use_pointer_resolution_and_skip_unrepresentable() {
        let (kg, store) = toy();
        let p = Predictor::new(&kg, &store, InferenceOptions::default()).unwrap();
        let q = Query::tail(0, 0, 1);
        // a + r1 = (1,0) = b at snapshot 0
        assert_eq!(p.snapshot_score(&q, 1, 0), Some(0.0));
        // b at snapshot 1 is (2,0)
        assert_eq!(p.snapshot_score(&q, 1, 1), Some(-1.0));
        // d does not exist at snapshot 0
        assert_eq!(p.snapshot_score(&q, 3, 0), None);
        // c walks back to snapshot 0 at snapshot 1
        assert_eq!(p.snapshot_score(&q, 2, 1), p.snapshot_score(&q, 2, 0));
    }

    #[test]
    fn ranking_filters_and_ties_pessimistic() {
        let (kg, store) = toy();
        let p = Predictor::new(&kg, &store, InferenceOptions::default()).unwrap();
        let q = Query::tail(0, 0, 1);
        let profile = p.importance(&q).unwrap();
        assert!((profile.beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // delta_0 = mean(1, 0.707..), delta_1 = 0 (anchor absent)
        assert!(profile.beta[0] > profile.beta[1]);
        let none = HashSet::new();
        let RankResult::Ranked(raw) = p.rank(&q, 3, &none, 10).unwrap() else {
            panic!()
        };
        let filter: HashSet<_> = [Triple::new(0, 0, 1)].into_iter().collect();
        let RankResult::Ranked(filtered) = p.rank(&q, 3, &filter, 10).unwrap() else {
            panic!()
        };
        assert_eq!(filtered.n_candidates + 1, raw.n_candidates);
        assert!(filtered.rank <= raw.rank);
        assert!(filtered.top.iter().all(|(e, _)| *e != 1));
        assert!(matches!(
            p.rank(&Query::tail(0, 0, 0), 3, &none, 1),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn explain_clamps_m() {
        let (kg, store) = toy();
        let p = Predictor::new(&kg, &store, InferenceOptions::default()).unwrap();
        let ex = p.explain(&Query::tail(0, 0, 1), 100).unwrap();
        assert_eq!(ex.final_top.len(), 4);
        assert_eq!(ex.per_snapshot_top[0].len(), 3);
        assert_eq!(ex.per_snapshot_top.len(), 2);
    }
}
