//! Similarity-driven entity decoupling.
//!
//! After snapshot `i` is trained, every explicit entity that also has an
//! explicit vector in some earlier space is compared (cosine) with those
//! earlier vectors. If the best match reaches `theta` the entry becomes a
//! pointer to that space. Ties go to the most recent space.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::store::{EmbeddingStore, EntityEntry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingStats {
    pub snapshot: usize,
    /// Explicit entries that had an earlier explicit vector to compare with.
    pub examined: usize,
    pub dropped: usize,
    /// Explicit entries left in the space.
    pub retained: usize,
    pub static_pointers: usize,
    /// Retained explicit vectors over originally explicit vectors, summed
    /// over spaces `0..=snapshot`.
    pub compression_ratio: f64,
}

pub const STATS_CSV_HEADER: &str = "snapshot,examined,dropped,retained,static_pointers,compression_ratio";

impl DecouplingStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6}",
            self.snapshot,
            self.examined,
            self.dropped,
            self.retained,
            self.static_pointers,
            self.compression_ratio
        )
    }
}

pub fn stats_csv(stats: &[DecouplingStats]) -> String {
    let mut out = String::from(STATS_CSV_HEADER);
    out.push('\n');
    for s in stats {
        let _ = writeln!(out, "{}", s.csv_row());
    }
    out
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

/// The earlier space (`< i`) whose explicit vector for `entity` is most
/// cosine-similar to `vector`, with that similarity. `None` when no earlier
/// space holds an explicit vector for the entity.
pub fn most_similar_prior(
    store: &EmbeddingStore,
    entity: EntityId,
    vector: &[f32],
    i: usize,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..i.min(store.num_spaces()) {
        if let Some(prior) = store.spaces()[j].explicit(entity) {
            let sim = cosine(vector, prior);
            // later spaces win ties because of `>=`
            if best.is_none_or(|(_, b)| sim >= b) {
                best = Some((j, sim));
            }
        }
    }
    best
}

fn check_theta(theta: f32) -> Result<()> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("theta must lie in (0, 1], got {theta}")))
    }
}

/// Drops redundant explicit entries of space `i`. Spaces before `i` are
/// only read.
pub fn apply_semantic_decoupling(
    store: &mut EmbeddingStore,
    i: usize,
    theta: f32,
    keep_dropped: bool,
) -> Result<DecouplingStats> {
    check_theta(theta)?;
    let space = store.space(i)?;
    let mut decisions = Vec::new();
    let mut examined = 0;
    for (&e, entry) in space.entries() {
        let EntityEntry::Explicit(v) = entry else {
            continue;
        };
        if let Some((x, sim)) = most_similar_prior(store, e, v, i) {
            examined += 1;
            if sim >= theta as f64 {
                decisions.push((e, x));
            }
        }
    }
    let dropped = decisions.len();
    let space = store.space_mut(i)?;
    for (e, x) in decisions {
        space.drop_to_pointer(e, x, keep_dropped)?;
    }
    Ok(DecouplingStats {
        snapshot: i,
        examined,
        dropped,
        retained: space.explicit_count(),
        static_pointers: 0,
        compression_ratio: compression_ratio(store, i),
    })
}

/// Gives every entity of `snapshot_entities` that existed before `i` but has
/// no entry in space `i` a pointer to the space that currently represents
/// it. Returns how many pointers were added.
pub fn assign_static_pointers(
    store: &mut EmbeddingStore,
    snapshot_entities: &BTreeSet<EntityId>,
    i: usize,
) -> Result<usize> {
    if i == 0 {
        return Ok(0);
    }
    let mut targets = Vec::new();
    let space = store.space(i)?;
    for &e in snapshot_entities {
        if space.entry(e).is_some() {
            continue;
        }
        match store.first_appearance(e) {
            Some(first) if first < i => {}
            _ => continue,
        }
        let x = store.resolve_space(e, i - 1).ok_or_else(|| {
            Error::CorruptStore(format!("entity {e} has no representation before {i}"))
        })?;
        targets.push((e, x));
    }
    let n = targets.len();
    let space = store.space_mut(i)?;
    for (e, x) in targets {
        space.insert_pointer(e, x)?;
    }
    Ok(n)
}

/// Retained explicit entries over originally explicit entries (retained
/// plus dropped), over spaces `0..=i`. `1.0` for an empty prefix.
pub fn compression_ratio(store: &EmbeddingStore, i: usize) -> f64 {
    let mut retained = 0usize;
    let mut original = 0usize;
    for space in store.spaces().iter().take(i + 1) {
        retained += space.explicit_count();
        original += space.explicit_count() + space.dropped().len();
    }
    if original == 0 {
        1.0
    } else {
        retained as f64 / original as f64
    }
}

/// Re-applies decoupling to every space with a new threshold.
///
/// Lowering the threshold always works. Raising it must restore entries
/// whose similarity now falls below it, which needs the raw vectors kept at
/// drop time; without them the call fails with [`Error::Irreversible`].
/// Drops whose raw vector was discarded stay pointers; if their target was
/// itself dropped, they follow it.
pub fn recompress(
    store: &mut EmbeddingStore,
    theta_new: f32,
    theta_original: f32,
    keep_dropped: bool,
) -> Result<Vec<DecouplingStats>> {
    check_theta(theta_new)?;
    if theta_new > theta_original {
        let missing = store
            .spaces()
            .iter()
            .flat_map(|s| s.dropped().values())
            .filter(|raw| raw.is_none())
            .count();
        if missing > 0 {
            return Err(Error::Irreversible(format!(
                "raising theta from {theta_original} to {theta_new} needs {missing} discarded vectors"
            )));
        }
    }
    let mut stats = Vec::with_capacity(store.num_spaces());
    if store.num_spaces() > 0 {
        stats.push(DecouplingStats {
            snapshot: 0,
            examined: 0,
            dropped: 0,
            retained: store.spaces()[0].explicit_count(),
            static_pointers: 0,
            compression_ratio: compression_ratio(store, 0),
        });
    }
    for i in 1..store.num_spaces() {
        let space = store.space(i)?;
        let mut candidates: Vec<(EntityId, Vec<f32>)> = Vec::new();
        let mut blind: Vec<EntityId> = Vec::new();
        let mut statics: Vec<EntityId> = Vec::new();
        for (&e, entry) in space.entries() {
            match entry {
                EntityEntry::Explicit(v) => candidates.push((e, v.clone())),
                EntityEntry::Pointer(_) => match space.dropped().get(&e) {
                    Some(Some(raw)) => candidates.push((e, raw.clone())),
                    Some(None) => blind.push(e),
                    None => statics.push(e),
                },
            }
        }
        let mut examined = 0;
        let mut dropped = 0;
        let mut decisions: Vec<(EntityId, Vec<f32>, Option<usize>)> = Vec::new();
        for (e, v) in candidates {
            let target = match most_similar_prior(store, e, &v, i) {
                Some((x, sim)) => {
                    examined += 1;
                    (sim >= theta_new as f64).then_some(x)
                }
                None => None,
            };
            if target.is_some() {
                dropped += 1;
            }
            decisions.push((e, v, target));
        }
        let mut repoints = Vec::new();
        for e in blind.iter().chain(&statics) {
            let EntityEntry::Pointer(x) = space.entry(*e).expect("listed above") else {
                unreachable!()
            };
            let y = store.resolve_space(*e, *x).ok_or_else(|| {
                Error::CorruptStore(format!("entity {e}: pointer target {x} unresolvable"))
            })?;
            repoints.push((*e, y, blind.contains(e)));
        }
        dropped += blind.len();

        let space = store.space_mut(i)?;
        let sealed = space.is_sealed();
        for (e, v, target) in decisions {
            space.remove(e);
            match target {
                Some(x) => {
                    space.insert_pointer(e, x)?;
                    space.record_drop(e, keep_dropped.then_some(v));
                }
                None => space.insert_explicit(e, v)?,
            }
        }
        for (e, y, was_drop) in repoints {
            space.insert_pointer(e, y)?;
            if was_drop {
                space.record_drop(e, None);
            }
        }
        space.set_sealed(sealed);
        let static_pointers = space.pointer_count() - space.dropped().len();
        stats.push(DecouplingStats {
            snapshot: i,
            examined,
            dropped,
            retained: space.explicit_count(),
            static_pointers,
            compression_ratio: compression_ratio(store, i),
        });
    }
    Ok(stats)
}
