//! Per-snapshot representation learning.
//!
//! Training snapshot `i` allocates a fresh entity space holding only the
//! entities that occur in the snapshot's training delta, optimizes
//! `kge + alpha * ra + eta * mae` with Adam over mini-batches of that delta,
//! early-stops on validation MRR and seals the space. Earlier spaces are
//! never written.

pub mod adam;
pub mod loss;
pub mod negative;
pub mod score;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId, TrainingSource, Triple};
use crate::store::{uniform_bound, EmbeddingStore};

use adam::Adam;
use loss::{kge_loss, mae_loss, ra_loss, LocalTriple, Neighborhoods, Params};
use negative::sample_negative;
use score::{Norm, TransE, TripleScorer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub kge: f64,
    pub ra: f64,
    pub mae: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub snapshot: usize,
    pub n_train_triples: usize,
    pub n_trainable_entities: usize,
    pub n_inherited_entities: usize,
    pub n_trainable_relations: usize,
    pub n_anchored_relations: usize,
    pub epochs: Vec<EpochLosses>,
    /// `(epoch, raw validation MRR)` at every check.
    pub validation: Vec<(usize, f64)>,
    pub epochs_run: usize,
    /// Epoch whose parameters were kept (best validation MRR).
    pub best_epoch: Option<usize>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    fn empty(snapshot: usize) -> Self {
        Self {
            snapshot,
            n_train_triples: 0,
            n_trainable_entities: 0,
            n_inherited_entities: 0,
            n_trainable_relations: 0,
            n_anchored_relations: 0,
            epochs: Vec::new(),
            validation: Vec::new(),
            epochs_run: 0,
            best_epoch: None,
            wall_time_secs: 0.0,
        }
    }

    /// Losses of the last epoch run.
    pub fn final_losses(&self) -> Option<&EpochLosses> {
        self.epochs.last()
    }
}

/// Seed for the RNG of snapshot `i`.
pub fn snapshot_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains snapshot `i` in place. Reads only `train_delta(i)` and `valid(i)`.
pub fn train_snapshot<S: TrainingSource + ?Sized>(
    store: &mut EmbeddingStore,
    data: &S,
    i: usize,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if i >= data.num_snapshots() {
        return Err(Error::Index {
            index: i,
            len: data.num_snapshots(),
        });
    }
    if store.num_spaces() != i {
        return Err(Error::Protocol(format!(
            "training snapshot {i} but the store holds {} spaces",
            store.num_spaces()
        )));
    }
    if i > 0 && !store.space(i - 1)?.is_sealed() {
        return Err(Error::Protocol(format!("snapshot {} is not sealed", i - 1)));
    }
    if store.dim() != config.dim {
        return Err(Error::Config(format!(
            "store dim {} differs from configured dim {}",
            store.dim(),
            config.dim
        )));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(snapshot_seed(config.seed, i));
    let delta: Vec<Triple> = data.train_delta(i).to_vec();
    if delta.is_empty() {
        log::warn!("snapshot {i}: empty training delta, nothing to train");
        store.allocate_space(i, &BTreeSet::new(), &BTreeSet::new(), &mut rng)?;
        store.seal(i)?;
        return Ok(TrainReport::empty(i));
    }

    let trainable: BTreeSet<EntityId> = delta.iter().flat_map(|t| [t.head, t.tail]).collect();
    let inherit: BTreeSet<EntityId> = trainable
        .iter()
        .copied()
        .filter(|&e| store.first_appearance(e).is_some())
        .collect();
    store.allocate_space(i, &trainable, &inherit, &mut rng)?;

    let entity_ids: Vec<EntityId> = trainable.iter().copied().collect();
    let entity_row: HashMap<EntityId, usize> =
        entity_ids.iter().enumerate().map(|(k, &e)| (e, k)).collect();
    let relation_ids: Vec<RelationId> = delta
        .iter()
        .map(|t| t.relation)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let relation_row: HashMap<RelationId, usize> =
        relation_ids.iter().enumerate().map(|(k, &r)| (r, k)).collect();

    let dim = config.dim;
    let mut params = Params::<f32>::zeros(dim, entity_ids.len(), relation_ids.len());
    {
        let space = store.space(i)?;
        for (k, &e) in entity_ids.iter().enumerate() {
            let v = space.explicit(e).expect("allocated above");
            params.entity_mut(k).copy_from_slice(v);
        }
    }
    let bound = uniform_bound(dim);
    let mut anchors: Vec<(usize, Vec<f32>)> = Vec::new();
    for (k, &r) in relation_ids.iter().enumerate() {
        match store.relations().get(r) {
            Some(v) => {
                params.relation_mut(k).copy_from_slice(v);
                anchors.push((k, v.to_vec()));
            }
            None => {
                for x in params.relation_mut(k) {
                    *x = rng.random_range(-bound..=bound);
                }
            }
        }
    }

    let to_local = |t: &Triple| LocalTriple {
        head: entity_row[&t.head],
        relation: relation_row[&t.relation],
        tail: entity_row[&t.tail],
    };
    let local: Vec<LocalTriple> = delta.iter().map(to_local).collect();
    let positives: HashSet<Triple> = delta.iter().copied().collect();
    let nb = Neighborhoods::new(&local, entity_ids.len(), relation_ids.len());
    let scorer = TransE::new(Norm::from_p(config.norm)?);

    let valid: Vec<LocalTriple> = data
        .valid(i)
        .iter()
        .filter(|t| {
            entity_row.contains_key(&t.head)
                && entity_row.contains_key(&t.tail)
                && relation_row.contains_key(&t.relation)
        })
        .map(to_local)
        .collect();

    let mut report = TrainReport {
        snapshot: i,
        n_train_triples: delta.len(),
        n_trainable_entities: entity_ids.len(),
        n_inherited_entities: inherit.len(),
        n_trainable_relations: relation_ids.len(),
        n_anchored_relations: anchors.len(),
        ..TrainReport::empty(i)
    };

    let mut grad = params.zeros_like();
    let mut aux = params.zeros_like();
    let mut adam_e = Adam::new(params.entities.len(), config.learning_rate);
    let mut adam_r = Adam::new(params.relations.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..delta.len()).collect();
    let mut best: Option<(f64, usize, Params<f32>)> = None;
    let mut checks_without_gain = 0usize;
    let alpha = config.alpha;
    let eta = config.eta;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = EpochLosses {
            epoch,
            kge: 0.0,
            ra: 0.0,
            mae: 0.0,
            total: 0.0,
        };
        for batch in order.chunks(config.batch_size) {
            grad.fill_zero();
            let mut pairs = Vec::with_capacity(batch.len() * config.negatives_per_positive);
            for &idx in batch {
                for _ in 0..config.negatives_per_positive {
                    let neg = sample_negative(&delta[idx], &entity_ids, &positives, &mut rng)?;
                    pairs.push((local[idx], to_local(&neg)));
                }
            }
            let kge = kge_loss(&pairs, &params, config.margin as f64, &scorer, &mut grad);

            let mut ra = 0.0;
            if alpha > 0.0 && !anchors.is_empty() {
                aux.fill_zero();
                ra = ra_loss(&anchors, &params, &mut aux);
                axpy(&mut grad, &aux, alpha);
            }
            let mut mae = 0.0;
            if eta > 0.0 {
                let ents: BTreeSet<usize> =
                    batch.iter().flat_map(|&k| [local[k].head, local[k].tail]).collect();
                let rels: BTreeSet<usize> = batch.iter().map(|&k| local[k].relation).collect();
                let ents: Vec<usize> = ents.into_iter().collect();
                let rels: Vec<usize> = rels.into_iter().collect();
                aux.fill_zero();
                mae = mae_loss(&ents, &rels, &nb, &params, &mut aux);
                axpy(&mut grad, &aux, eta);
            }
            sums.kge += kge;
            sums.ra += ra;
            sums.mae += mae;
            sums.total += kge + alpha as f64 * ra + eta as f64 * mae;

            adam_e.step(&mut params.entities, &grad.entities);
            adam_r.step(&mut params.relations, &grad.relations);
        }
        report.epochs.push(sums);
        report.epochs_run = epoch;

        if epoch % config.eval_every == 0 && !valid.is_empty() {
            let mrr = validation_mrr(&valid, &params, &scorer);
            report.validation.push((epoch, mrr));
            match &best {
                Some((b, _, _)) if mrr <= *b => {
                    checks_without_gain += 1;
                    if checks_without_gain >= config.patience {
                        log::debug!("snapshot {i}: early stop at epoch {epoch}");
                        break;
                    }
                }
                _ => {
                    best = Some((mrr, epoch, params.clone()));
                    checks_without_gain = 0;
                }
            }
        }
    }
    if let Some((_, epoch, kept)) = best {
        params = kept;
        report.best_epoch = Some(epoch);
    }

    {
        let space = store.space_mut(i)?;
        for (k, &e) in entity_ids.iter().enumerate() {
            space
                .explicit_mut(e)
                .expect("allocated above")
                .copy_from_slice(params.entity(k));
        }
    }
    for (k, &r) in relation_ids.iter().enumerate() {
        store.set_relation(r, params.relation(k).to_vec(), i)?;
    }
    store.seal(i)?;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

fn axpy(dst: &mut Params<f32>, src: &Params<f32>, a: f32) {
    for (d, s) in dst.entities.iter_mut().zip(&src.entities) {
        *d += a * s;
    }
    for (d, s) in dst.relations.iter_mut().zip(&src.relations) {
        *d += a * s;
    }
}

/// Raw MRR over both query directions, ranking against every local entity.
/// Ties count against the gold entity.
fn validation_mrr<S: TripleScorer>(valid: &[LocalTriple], params: &Params<f32>, scorer: &S) -> f64 {
    let n = params.n_entities();
    let rr: Vec<f64> = valid
        .par_iter()
        .flat_map_iter(|t| {
            let r = params.relation(t.relation);
            let h = params.entity(t.head);
            let tl = params.entity(t.tail);
            let gold_d = scorer.distance(h, r, tl);
            let mut tail_rank = 1usize;
            let mut head_rank = 1usize;
            for e in 0..n {
                let v = params.entity(e);
                if e != t.tail && scorer.distance(h, r, v) <= gold_d {
                    tail_rank += 1;
                }
                if e != t.head && scorer.distance(v, r, tl) <= gold_d {
                    head_rank += 1;
                }
            }
            [1.0 / tail_rank as f64, 1.0 / head_rank as f64]
        })
        .collect();
    rr.iter().sum::<f64>() / rr.len() as f64
}

/// `sum ||r_now - r_before||_2` over relations present in both maps.
pub fn relation_drift(before: &EmbeddingStore, after: &EmbeddingStore, relations: &[RelationId]) -> f64 {
    relations
        .iter()
        .filter_map(|&r| {
            let a = before.relations().get(r)?;
            let b = after.relations().get(r)?;
            Some(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let d = (*x as f64) - (*y as f64);
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt(),
            )
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{GrowingKg, Snapshot, Vocab};

    fn kg_from(snapshots: Vec<(Vec<Triple>, Vec<Triple>, Vec<Triple>)>) -> GrowingKg {
        let mut ents = Vocab::new();
        let mut rels = Vocab::new();
        let mut out = Vec::new();
        let mut e_acc = BTreeSet::new();
        let mut r_acc = BTreeSet::new();
        for (i, (train, valid, test)) in snapshots.into_iter().enumerate() {
            for t in train.iter().chain(&valid).chain(&test) {
                while ents.len() <= t.head.max(t.tail) as usize {
                    ents.intern(&format!("e{}", ents.len()));
                }
                while rels.len() <= t.relation as usize {
                    rels.intern(&format!("r{}", rels.len()));
                }
                e_acc.extend([t.head, t.tail]);
                r_acc.insert(t.relation);
            }
            out.push(Snapshot {
                index: i,
                train,
                valid,
                test,
                entities: e_acc.clone(),
                relations: r_acc.clone(),
            });
        }
        GrowingKg::from_parts(ents, rels, out).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 8,
            margin: 2.0,
            batch_size: 4,
            max_epochs: 60,
            eval_every: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_triple_learns_margin() {
        let t = Triple::new(0, 0, 1);
        let kg = kg_from(vec![(
            vec![t, Triple::new(2, 1, 3), Triple::new(3, 1, 4)],
            vec![],
            vec![],
        )]);
        let mut store = EmbeddingStore::new(8, kg.num_entities(), kg.num_relations());
        let cfg = TrainConfig {
            max_epochs: 300,
            learning_rate: 0.02,
            ..small_config()
        };
        train_snapshot(&mut store, &kg, 0, &cfg).unwrap();
        let scorer = TransE::new(Norm::L1);
        let v = |e| store.resolve(e, 0).unwrap().vector().unwrap().to_vec();
        let r = store.relation_embedding(0).unwrap().to_vec();
        let fp = scorer.distance(&v(0), &r, &v(1));
        let positives: HashSet<Triple> = kg.train_delta(0).iter().copied().collect();
        let candidates: Vec<u32> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut satisfied = 0;
        let n = 200;
        for _ in 0..n {
            let neg = sample_negative(&t, &candidates, &positives, &mut rng).unwrap();
            let fneg = scorer.distance(&v(neg.head), &r, &v(neg.tail));
            if fp + cfg.margin as f64 <= fneg {
                satisfied += 1;
            }
        }
        assert!(satisfied as f64 / n as f64 >= 0.9, "{satisfied}/{n}");
    }

    #[test]
    fn empty_delta_is_noop_report() {
        let t = Triple::new(0, 0, 1);
        let kg = kg_from(vec![(vec![t], vec![], vec![]), (vec![t], vec![], vec![])]);
        let mut store = EmbeddingStore::new(8, kg.num_entities(), kg.num_relations());
        train_snapshot(&mut store, &kg, 0, &small_config()).unwrap();
        let report = train_snapshot(&mut store, &kg, 1, &small_config()).unwrap();
        assert_eq!(report.epochs_run, 0);
        assert!(report.epochs.is_empty());
        assert!(store.space(1).unwrap().is_sealed());
        assert!(store.space(1).unwrap().entries().is_empty());
    }

    #[test]
    fn out_of_order_training_is_protocol_error() {
        let kg = kg_from(vec![
            (vec![Triple::new(0, 0, 1)], vec![], vec![]),
            (vec![Triple::new(1, 0, 2)], vec![], vec![]),
        ]);
        let mut store = EmbeddingStore::new(8, kg.num_entities(), kg.num_relations());
        assert!(matches!(
            train_snapshot(&mut store, &kg, 1, &small_config()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn loss_total_decomposes() {
        let train: Vec<Triple> = (0..12).map(|k| Triple::new(k, k % 3, (k + 1) % 12)).collect();
        let valid = vec![Triple::new(0, 1, 5)];
        let train2: Vec<Triple> = (0..12).map(|k| Triple::new(k, k % 3, (k + 5) % 12)).collect();
        let kg = kg_from(vec![(train, valid.clone(), vec![]), (train2, vec![], vec![])]);
        let mut store = EmbeddingStore::new(8, kg.num_entities(), kg.num_relations());
        let cfg = TrainConfig {
            alpha: 0.5,
            eta: 0.25,
            ..small_config()
        };
        train_snapshot(&mut store, &kg, 0, &cfg).unwrap();
        let report = train_snapshot(&mut store, &kg, 1, &cfg).unwrap();
        assert_eq!(report.n_anchored_relations, 3);
        for e in &report.epochs {
            let recombined = e.kge + 0.5 * e.ra + 0.25 * e.mae;
            assert!((recombined - e.total).abs() <= 1e-6 * e.total.abs().max(1e-12));
        }
        assert!(report.epochs.iter().any(|e| e.ra > 0.0));
    }

    #[test]
    fn identical_runs_identical_traces() {
        let train: Vec<Triple> = (0..20).map(|k| Triple::new(k, k % 4, (k * 7 + 3) % 20)).collect();
        let valid: Vec<Triple> = (0..4).map(|k| Triple::new(k, 0, (k + 9) % 20)).collect();
        let kg = kg_from(vec![(train, valid, vec![])]);
        let run = || {
            let mut store = EmbeddingStore::new(8, kg.num_entities(), kg.num_relations());
            let r = train_snapshot(&mut store, &kg, 0, &small_config()).unwrap();
            (r.epochs, r.validation, store.checksum())
        };
        assert_eq!(run(), run());
    }
}
