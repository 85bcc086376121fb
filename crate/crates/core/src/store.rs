//! Multi-space embedding storage.
//!
//! Every snapshot owns one entity space. An entity's entry in a space is
//! either an explicit vector or a pointer to an earlier space where the same
//! entity is explicit. Relations live in a single space where the most
//! recent training wins.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId};

#[derive(Clone, Debug, PartialEq)]
pub enum EntityEntry {
    Explicit(Vec<f32>),
    /// Redirects to the explicit vector of the same entity in an earlier space.
    Pointer(usize),
}

/// Result of resolving an entity at a snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Resolved<'a> {
    Vector(&'a [f32]),
    /// The entity has no representation at or before the snapshot.
    Unrepresentable,
}

impl<'a> Resolved<'a> {
    pub fn vector(self) -> Option<&'a [f32]> {
        match self {
            Resolved::Vector(v) => Some(v),
            Resolved::Unrepresentable => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSpace {
    index: usize,
    dim: usize,
    entries: BTreeMap<EntityId, EntityEntry>,
    /// Entries replaced by a pointer during decoupling, with the discarded
    /// vector when it was kept for later recompression.
    dropped: BTreeMap<EntityId, Option<Vec<f32>>>,
    sealed: bool,
}

impl SnapshotSpace {
    pub fn new(index: usize, dim: usize) -> Self {
        Self {
            index,
            dim,
            entries: BTreeMap::new(),
            dropped: BTreeMap::new(),
            sealed: false,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn entry(&self, entity: EntityId) -> Option<&EntityEntry> {
        self.entries.get(&entity)
    }

    pub fn entries(&self) -> &BTreeMap<EntityId, EntityEntry> {
        &self.entries
    }

    pub fn explicit(&self, entity: EntityId) -> Option<&[f32]> {
        match self.entries.get(&entity) {
            Some(EntityEntry::Explicit(v)) => Some(v),
            _ => None,
        }
    }

    pub fn explicit_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| matches!(e, EntityEntry::Explicit(_)))
            .count()
    }

    pub fn pointer_count(&self) -> usize {
        self.entries.len() - self.explicit_count()
    }

    pub fn dropped(&self) -> &BTreeMap<EntityId, Option<Vec<f32>>> {
        &self.dropped
    }

    /// Whether `entity` was dropped by decoupling here (as opposed to a
    /// static pointer or an explicit entry).
    pub fn was_dropped(&self, entity: EntityId) -> bool {
        self.dropped.contains_key(&entity)
    }

    pub fn insert_explicit(&mut self, entity: EntityId, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dim {
                left: vector.len(),
                right: self.dim,
            });
        }
        self.entries.insert(entity, EntityEntry::Explicit(vector));
        self.dropped.remove(&entity);
        Ok(())
    }

    /// Inserts a static pointer (not a decoupling drop).
    pub fn insert_pointer(&mut self, entity: EntityId, target: usize) -> Result<()> {
        if target >= self.index {
            return Err(Error::CorruptStore(format!(
                "pointer from space {} to non-earlier space {target}",
                self.index
            )));
        }
        self.entries.insert(entity, EntityEntry::Pointer(target));
        self.dropped.remove(&entity);
        Ok(())
    }

    /// Replaces an explicit entry with a pointer, optionally keeping the raw
    /// vector. Returns the discarded vector.
    pub(crate) fn drop_to_pointer(
        &mut self,
        entity: EntityId,
        target: usize,
        keep_raw: bool,
    ) -> Result<Vec<f32>> {
        if target >= self.index {
            return Err(Error::CorruptStore(format!(
                "pointer from space {} to non-earlier space {target}",
                self.index
            )));
        }
        match self.entries.insert(entity, EntityEntry::Pointer(target)) {
            Some(EntityEntry::Explicit(v)) => {
                self.dropped.insert(entity, keep_raw.then(|| v.clone()));
                Ok(v)
            }
            other => Err(Error::CorruptStore(format!(
                "entity {entity} in space {} is not explicit: {other:?}",
                self.index
            ))),
        }
    }

    /// Marks an entry as a decoupling drop without touching the entry itself;
    /// used when restoring checkpoints and recompressing.
    pub(crate) fn record_drop(&mut self, entity: EntityId, raw: Option<Vec<f32>>) {
        self.dropped.insert(entity, raw);
    }

    pub(crate) fn remove(&mut self, entity: EntityId) {
        self.entries.remove(&entity);
        self.dropped.remove(&entity);
    }

    pub(crate) fn set_sealed(&mut self, sealed: bool) {
        self.sealed = sealed;
    }

    pub(crate) fn explicit_mut(&mut self, entity: EntityId) -> Option<&mut Vec<f32>> {
        match self.entries.get_mut(&entity) {
            Some(EntityEntry::Explicit(v)) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationSpace {
    dim: usize,
    /// Latest vector and the snapshot that last wrote it.
    slots: Vec<Option<(Vec<f32>, usize)>>,
}

impl RelationSpace {
    pub fn new(dim: usize, n_relations: usize) -> Self {
        Self {
            dim,
            slots: vec![None; n_relations],
        }
    }

    pub fn get(&self, relation: RelationId) -> Option<&[f32]> {
        self.slots
            .get(relation as usize)
            .and_then(|s| s.as_ref())
            .map(|(v, _)| v.as_slice())
    }

    pub fn last_updated(&self, relation: RelationId) -> Option<usize> {
        self.slots
            .get(relation as usize)
            .and_then(|s| s.as_ref())
            .map(|(_, i)| *i)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn trained_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn set(&mut self, relation: RelationId, vector: Vec<f32>, snapshot: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dim {
                left: vector.len(),
                right: self.dim,
            });
        }
        let slot = self
            .slots
            .get_mut(relation as usize)
            .ok_or(Error::Key {
                kind: "relation",
                id: relation,
            })?;
        *slot = Some((vector, snapshot));
        Ok(())
    }
}

/// All entity spaces plus the shared relation space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    n_entities: usize,
    spaces: Vec<SnapshotSpace>,
    relations: RelationSpace,
    first_appearance: BTreeMap<EntityId, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, n_entities: usize, n_relations: usize) -> Self {
        Self {
            dim,
            n_entities,
            spaces: Vec::new(),
            relations: RelationSpace::new(dim, n_relations),
            first_appearance: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn spaces(&self) -> &[SnapshotSpace] {
        &self.spaces
    }

    pub fn space(&self, i: usize) -> Result<&SnapshotSpace> {
        self.spaces.get(i).ok_or(Error::Index {
            index: i,
            len: self.spaces.len(),
        })
    }

    pub(crate) fn space_mut(&mut self, i: usize) -> Result<&mut SnapshotSpace> {
        let len = self.spaces.len();
        self.spaces.get_mut(i).ok_or(Error::Index { index: i, len })
    }

    pub fn num_spaces(&self) -> usize {
        self.spaces.len()
    }

    pub fn relations(&self) -> &RelationSpace {
        &self.relations
    }

    pub fn first_appearance(&self, entity: EntityId) -> Option<usize> {
        self.first_appearance.get(&entity).copied()
    }

    pub fn first_appearances(&self) -> &BTreeMap<EntityId, usize> {
        &self.first_appearance
    }

    /// Appends a hand-built space. The space must be the next index and
    /// every pointer in it must reference an explicit entry.
    pub fn push_space(&mut self, space: SnapshotSpace) -> Result<()> {
        if space.index != self.spaces.len() {
            return Err(Error::Protocol(format!(
                "expected space {}, got {}",
                self.spaces.len(),
                space.index
            )));
        }
        if space.dim != self.dim {
            return Err(Error::Dim {
                left: space.dim,
                right: self.dim,
            });
        }
        for (&e, entry) in &space.entries {
            if e as usize >= self.n_entities {
                return Err(Error::Key {
                    kind: "entity",
                    id: e,
                });
            }
            if let EntityEntry::Pointer(x) = entry {
                if self.spaces[*x].explicit(e).is_none() {
                    return Err(Error::CorruptStore(format!(
                        "entity {e}: pointer from space {} to space {x} which is not explicit",
                        space.index
                    )));
                }
            }
            self.first_appearance.entry(e).or_insert(space.index);
        }
        self.spaces.push(space);
        Ok(())
    }

    pub fn set_relation(&mut self, relation: RelationId, vector: Vec<f32>, snapshot: usize) -> Result<()> {
        self.relations.set(relation, vector, snapshot)
    }

    pub fn seal(&mut self, i: usize) -> Result<()> {
        self.space_mut(i)?.set_sealed(true);
        Ok(())
    }

    /// Creates space `i` with explicit entries for `trainable` entities.
    /// Entities in `inherit_from_prior` copy their resolved vector at `i - 1`;
    /// the rest are drawn uniformly from `[-6/sqrt(dim), 6/sqrt(dim)]`.
    pub fn allocate_space<R: Rng + ?Sized>(
        &mut self,
        i: usize,
        trainable: &BTreeSet<EntityId>,
        inherit_from_prior: &BTreeSet<EntityId>,
        rng: &mut R,
    ) -> Result<&SnapshotSpace> {
        if i != self.spaces.len() {
            return Err(Error::Protocol(format!(
                "allocating space {i} but the store has {} spaces",
                self.spaces.len()
            )));
        }
        if let Some(prev) = self.spaces.last() {
            if !prev.sealed {
                return Err(Error::Protocol(format!(
                    "space {} must be sealed before allocating space {i}",
                    prev.index
                )));
            }
        }
        let bound = uniform_bound(self.dim);
        let mut space = SnapshotSpace::new(i, self.dim);
        for &e in trainable {
            if e as usize >= self.n_entities {
                return Err(Error::Key {
                    kind: "entity",
                    id: e,
                });
            }
            let v = if inherit_from_prior.contains(&e) {
                let prior = i.checked_sub(1).ok_or(Error::Resolution {
                    entity: e,
                    snapshot: 0,
                })?;
                match self.resolve(e, prior)? {
                    Resolved::Vector(v) => v.to_vec(),
                    Resolved::Unrepresentable => {
                        return Err(Error::Resolution {
                            entity: e,
                            snapshot: prior,
                        })
                    }
                }
            } else {
                (0..self.dim).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            space.entries.insert(e, EntityEntry::Explicit(v));
        }
        for &e in trainable {
            self.first_appearance.entry(e).or_insert(i);
        }
        self.spaces.push(space);
        Ok(&self.spaces[i])
    }

    /// Resolves `entity` at snapshot `i`: the explicit vector there, the
    /// target of its pointer, or (without an entry) the nearest earlier
    /// space that has one.
    pub fn resolve(&self, entity: EntityId, i: usize) -> Result<Resolved<'_>> {
        match self.first_appearance.get(&entity) {
            Some(&first) if first <= i => {}
            _ => return Ok(Resolved::Unrepresentable),
        }
        let top = i.min(self.spaces.len().saturating_sub(1));
        for j in (0..=top).rev() {
            match self.spaces[j].entries.get(&entity) {
                Some(EntityEntry::Explicit(v)) => return Ok(Resolved::Vector(v)),
                Some(EntityEntry::Pointer(x)) => {
                    return match self.spaces.get(*x).and_then(|s| s.explicit(entity)) {
                        Some(v) if *x < j => Ok(Resolved::Vector(v)),
                        _ => Err(Error::CorruptStore(format!(
                            "entity {entity}: dangling pointer from space {j} to space {x}"
                        ))),
                    };
                }
                None => {}
            }
        }
        Err(Error::CorruptStore(format!(
            "entity {entity} appears at snapshot {} but has no entry",
            self.first_appearance[&entity]
        )))
    }

    /// The nearest space `j <= i` holding an explicit entry for `entity`,
    /// following a pointer if one is found first.
    pub fn resolve_space(&self, entity: EntityId, i: usize) -> Option<usize> {
        let top = i.min(self.spaces.len().checked_sub(1)?);
        for j in (0..=top).rev() {
            match self.spaces[j].entries.get(&entity) {
                Some(EntityEntry::Explicit(_)) => return Some(j),
                Some(EntityEntry::Pointer(x)) => return Some(*x),
                None => {}
            }
        }
        None
    }

    pub fn relation_embedding(&self, relation: RelationId) -> Result<&[f32]> {
        self.relations.get(relation).ok_or(Error::Key {
            kind: "relation",
            id: relation,
        })
    }

    /// SHA-256 over the canonical bytes of space `j` (entries, drop records
    /// and the seal flag).
    pub fn space_checksum(&self, j: usize) -> Result<String> {
        let space = self.space(j)?;
        let mut h = Sha256::new();
        h.update((space.index as u64).to_le_bytes());
        h.update([space.sealed as u8]);
        for (e, entry) in &space.entries {
            h.update(e.to_le_bytes());
            match entry {
                EntityEntry::Explicit(v) => {
                    h.update([0u8]);
                    for x in v {
                        h.update(x.to_le_bytes());
                    }
                }
                EntityEntry::Pointer(x) => {
                    h.update([1u8]);
                    h.update((*x as u64).to_le_bytes());
                }
            }
        }
        for (e, raw) in &space.dropped {
            h.update(e.to_le_bytes());
            if let Some(v) = raw {
                for x in v {
                    h.update(x.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Checksum over every space and the relation space.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for j in 0..self.spaces.len() {
            h.update(self.space_checksum(j).expect("index in range").as_bytes());
        }
        for (r, slot) in self.relations.slots.iter().enumerate() {
            if let Some((v, i)) = slot {
                h.update((r as u64).to_le_bytes());
                h.update((*i as u64).to_le_bytes());
                for x in v {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn set_first_appearance(&mut self, entity: EntityId, i: usize) {
        self.first_appearance.insert(entity, i);
    }

    pub(crate) fn push_raw_space(&mut self, space: SnapshotSpace) {
        self.spaces.push(space);
    }

    pub(crate) fn relations_from(&mut self, relations: RelationSpace) {
        self.relations = relations;
    }
}

pub fn uniform_bound(dim: usize) -> f32 {
    6.0 / (dim as f32).sqrt()
}
