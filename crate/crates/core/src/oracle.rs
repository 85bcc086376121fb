//! Slow, straightforward reference computations.
//!
//! Nothing here calls into `inference`, `decoupler` or `store::resolve`;
//! vectors are looked up by walking raw space entries.

use std::collections::{BTreeSet, HashSet};

use rand::Rng;

use crate::config::{Incidence, TrainConfig};
use crate::error::{Error, Result};
use crate::inference::{Direction, Query};
use crate::kg::{EntityId, GrowingKg, Snapshot, Triple, Vocab};
use crate::store::{EmbeddingStore, EntityEntry, SnapshotSpace};

fn lookup(store: &EmbeddingStore, e: EntityId, i: usize) -> Option<&[f32]> {
    let spaces = store.spaces();
    let mut j = i.min(spaces.len().checked_sub(1)?) as isize;
    while j >= 0 {
        match spaces[j as usize].entries().get(&e) {
            Some(EntityEntry::Explicit(v)) => return Some(v),
            Some(EntityEntry::Pointer(x)) => {
                return match spaces[*x].entries().get(&e) {
                    Some(EntityEntry::Explicit(v)) => Some(v),
                    _ => None,
                }
            }
            None => j -= 1,
        }
    }
    None
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).fold(0.0, |s, (x, y)| s + (*x as f64) * (*y as f64));
    let na: f64 = a.iter().fold(0.0, |s, x| s + (*x as f64) * (*x as f64));
    let nb: f64 = b.iter().fold(0.0, |s, x| s + (*x as f64) * (*x as f64));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

fn distance(h: &[f32], r: &[f32], t: &[f32], p: u8) -> f64 {
    let mut acc = 0.0f64;
    for k in 0..h.len() {
        let x = (h[k] + r[k] - t[k]) as f64;
        acc += if p == 1 { x.abs() } else { x * x };
    }
    if p == 1 {
        acc
    } else {
        acc.sqrt()
    }
}

/// Filtered, pessimistic rank of `gold`, recomputed from scratch.
/// `Ok(None)` when the query cannot be scored (unknown relation,
/// unrepresentable anchor or gold).
pub fn brute_force_rank(
    query: &Query,
    gold: EntityId,
    filter: &HashSet<Triple>,
    kg: &GrowingKg,
    store: &EmbeddingStore,
    config: &TrainConfig,
) -> Result<Option<usize>> {
    let i = query.snapshot;
    if i >= store.num_spaces() {
        return Err(Error::Protocol(format!("snapshot {i} is not trained")));
    }
    let entities = &kg.snapshots()[i].entities;
    if !entities.contains(&gold) {
        return Err(Error::Protocol(format!("gold {gold} not in snapshot {i}")));
    }
    let Some(r) = store.relations().get(query.relation) else {
        return Ok(None);
    };
    if lookup(store, query.anchor, i).is_none() {
        return Ok(None);
    }

    let mut delta = Vec::new();
    for j in 0..=i {
        let mut rels: Vec<u32> = Vec::new();
        for t in &kg.deltas()[j].train_delta {
            let as_head = t.head == query.anchor;
            let as_tail = t.tail == query.anchor;
            let counts = match (config.incidence, query.direction) {
                (Incidence::Both, _) => as_head || as_tail,
                (Incidence::QueryRole, Direction::Tail) => as_head,
                (Incidence::QueryRole, Direction::Head) => as_tail,
            };
            if counts && !rels.contains(&t.relation) {
                rels.push(t.relation);
            }
        }
        let mut sims: Vec<f64> = rels
            .iter()
            .filter_map(|&x| store.relations().get(x))
            .map(|v| cos(v, r))
            .collect();
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let n = sims.len().min(config.top_k);
        delta.push(if n == 0 {
            0.0
        } else {
            sims[..n].iter().sum::<f64>() / n as f64
        });
    }
    let beta: Vec<f64> = if config.uniform_importance {
        vec![1.0 / (i + 1) as f64; i + 1]
    } else {
        let m = delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = delta.iter().map(|d| (d - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        ex.iter().map(|x| x / z).collect()
    };

    let score = |e: EntityId| -> Option<f64> {
        let snaps: Vec<usize> = if config.no_decoupling {
            vec![i]
        } else {
            (0..=i).collect()
        };
        let mut num = 0.0;
        let mut mass = 0.0;
        let mut seen = 0;
        for j in snaps {
            let (Some(a), Some(c)) = (lookup(store, query.anchor, j), lookup(store, e, j)) else {
                continue;
            };
            let psi = match query.direction {
                Direction::Tail => -distance(a, r, c, config.norm),
                Direction::Head => -distance(c, r, a, config.norm),
            };
            if config.no_decoupling {
                return Some(psi);
            }
            num += beta[j] * psi;
            mass += beta[j];
            seen += 1;
        }
        match seen {
            0 => None,
            _ if config.renormalize => Some(num / mass),
            _ => Some(num),
        }
    };

    let Some(gold_score) = score(gold) else {
        return Ok(None);
    };
    let mut rank = 1;
    for &e in entities {
        if e == gold {
            continue;
        }
        let t = match query.direction {
            Direction::Tail => Triple::new(query.anchor, query.relation, e),
            Direction::Head => Triple::new(e, query.relation, query.anchor),
        };
        if filter.contains(&t) {
            continue;
        }
        if let Some(s) = score(e) {
            if s >= gold_score {
                rank += 1;
            }
        }
    }
    Ok(Some(rank))
}

/// Most cosine-similar earlier explicit vector for `entity`, compared with
/// its explicit (or kept raw) vector at space `i`. Later spaces win ties.
pub fn exhaustive_most_similar(store: &EmbeddingStore, entity: EntityId, i: usize) -> Option<(usize, f64)> {
    let space = store.spaces().get(i)?;
    let v: &[f32] = match space.entries().get(&entity) {
        Some(EntityEntry::Explicit(v)) => v,
        _ => space.dropped().get(&entity)?.as_deref()?,
    };
    let mut best: Option<(usize, f64)> = None;
    for x in 0..i {
        if let Some(EntityEntry::Explicit(u)) = store.spaces()[x].entries().get(&entity) {
            let s = cos(v, u);
            best = match best {
                Some((_, b)) if b > s => best,
                _ => Some((x, s)),
            };
        }
    }
    best
}

/// Largest relative error between `analytic` and central differences of
/// `loss` around `params`. The denominator is floored at `1e-6`, above the
/// rounding noise of the differences.
pub fn finite_diff_grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        probe[k] = params[k] + eps;
        let up = loss(&probe);
        probe[k] = params[k] - eps;
        let down = loss(&probe);
        probe[k] = params[k];
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    worst
}

/// A small random growing KG with an arbitrary sealed store over it.
///
/// Vector coordinates come from a coarse grid so score ties occur. Some
/// entities get no entry in a space (inherited or unrepresentable), some get
/// pointers to earlier explicit entries and some relations stay untrained.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    max_entities: usize,
    max_relations: usize,
    n_snapshots: usize,
    dim: usize,
) -> (GrowingKg, EmbeddingStore) {
    let n_e = rng.random_range(4..=max_entities.max(4));
    let n_r = rng.random_range(1..=max_relations.max(1));
    let mut entities = Vocab::new();
    let mut relations = Vocab::new();
    for e in 0..n_e {
        entities.intern(&format!("e{e}"));
    }
    for r in 0..n_r {
        relations.intern(&format!("r{r}"));
    }
    let mut snapshots: Vec<Snapshot> = Vec::with_capacity(n_snapshots);
    for i in 0..n_snapshots {
        let pool_e = (n_e * (i + 1)).div_ceil(n_snapshots).max(2) as u32;
        let pool_r = (n_r * (i + 1)).div_ceil(n_snapshots).max(1) as u32;
        let mut facts = BTreeSet::new();
        for _ in 0..rng.random_range(3..12) {
            let h = rng.random_range(0..pool_e);
            let t = rng.random_range(0..pool_e);
            if h != t {
                facts.insert(Triple::new(h, rng.random_range(0..pool_r), t));
            }
        }
        if facts.is_empty() {
            facts.insert(Triple::new(0, 0, 1));
        }
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for t in facts {
            match rng.random_range(0..4) {
                0 => valid.push(t),
                1 => test.push(t),
                _ => train.push(t),
            }
        }
        let (mut ents, mut rels) = match snapshots.last() {
            Some(prev) => (prev.entities.clone(), prev.relations.clone()),
            None => Default::default(),
        };
        for t in train.iter().chain(&valid).chain(&test) {
            ents.insert(t.head);
            ents.insert(t.tail);
            rels.insert(t.relation);
        }
        snapshots.push(Snapshot {
            index: i,
            train,
            valid,
            test,
            entities: ents,
            relations: rels,
        });
    }
    let kg = GrowingKg::from_parts(entities, relations, snapshots).expect("well-formed by construction");

    let grid = |rng: &mut R| -> Vec<f32> { (0..dim).map(|_| rng.random_range(-2..=2) as f32 * 0.5).collect() };
    let mut store = EmbeddingStore::new(dim, n_e, n_r);
    for i in 0..n_snapshots {
        let mut space = SnapshotSpace::new(i, dim);
        for &e in &kg.snapshots()[i].entities {
            let earlier: Vec<usize> = (0..i).filter(|&x| store.spaces()[x].explicit(e).is_some()).collect();
            match rng.random_range(0..10) {
                0..5 => space.insert_explicit(e, grid(rng)).expect("dim matches"),
                5..7 if !earlier.is_empty() => {
                    let x = earlier[rng.random_range(0..earlier.len())];
                    space.insert_pointer(e, x).expect("earlier space");
                }
                _ => {}
            }
        }
        store.push_space(space).expect("valid space");
        store.seal(i).expect("space exists");
    }
    for r in 0..n_r as u32 {
        if rng.random_bool(0.85) {
            let v = grid(rng);
            store.set_relation(r, v, n_snapshots - 1).expect("dim matches");
        }
    }
    (kg, store)
}
