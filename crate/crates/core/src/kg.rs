//! Growing knowledge graphs: snapshot datasets, vocabularies, deltas and
//! filter sets.
//!
//! A dataset is a directory with one numbered subdirectory per snapshot
//! (`0/`, `1/`, ...), each holding `train.txt`, `valid.txt` and `test.txt`
//! with one `head<TAB>relation<TAB>tail` fact per line. Labels are interned
//! to dense ids in first-seen order, so ids stay stable across snapshots.
//!
//! Snapshot indices are 0-based everywhere in this crate and match the
//! directory names.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

/// A `(head, relation, tail)` fact over interned ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// String interner assigning dense ids in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    pub fn id(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// One snapshot of a growing KG: its three splits plus the cumulative
/// vocabularies visible at this point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub index: usize,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub entities: BTreeSet<EntityId>,
    pub relations: BTreeSet<RelationId>,
}

impl Snapshot {
    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What snapshot `index` adds over its predecessor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SnapshotDelta {
    pub index: usize,
    pub new_entities: BTreeSet<EntityId>,
    pub new_relations: BTreeSet<RelationId>,
    /// New facts over all three splits, deduplicated, in file order.
    pub new_facts: Vec<Triple>,
    /// Training-split portion of `new_facts`; the only data trained on.
    pub train_delta: Vec<Triple>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TripleClass {
    /// Head, relation and tail are all unseen before this snapshot.
    TotallyNew,
    /// At least one new element, or a new combination of known elements.
    PartiallyNew,
    /// Already known in an earlier snapshot.
    Static,
}

/// Classifies `triple` against the vocabularies and facts of the previous
/// snapshot. Pass empty sets for the first snapshot.
pub fn classify_triple(
    triple: &Triple,
    prior_entities: &BTreeSet<EntityId>,
    prior_relations: &BTreeSet<RelationId>,
    prior_facts: &HashSet<Triple>,
) -> TripleClass {
    if prior_facts.contains(triple) {
        TripleClass::Static
    } else if !prior_entities.contains(&triple.head)
        && !prior_entities.contains(&triple.tail)
        && !prior_relations.contains(&triple.relation)
    {
        TripleClass::TotallyNew
    } else {
        TripleClass::PartiallyNew
    }
}

/// A loaded growing KG with precomputed deltas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrowingKg {
    entities: Vocab,
    relations: Vocab,
    snapshots: Vec<Snapshot>,
    deltas: Vec<SnapshotDelta>,
}

impl GrowingKg {
    /// Builds a KG from already-interned snapshots, validating the load
    /// invariants and computing deltas.
    pub fn from_parts(entities: Vocab, relations: Vocab, snapshots: Vec<Snapshot>) -> Result<Self> {
        for (i, s) in snapshots.iter().enumerate() {
            if s.index != i {
                return Err(Error::InvariantViolation(format!(
                    "snapshot at position {i} has index {}",
                    s.index
                )));
            }
            if s.is_empty() {
                return Err(Error::EmptySnapshot(i));
            }
            check_disjoint(s)?;
            for t in s.all_triples() {
                if t.head as usize >= entities.len()
                    || t.tail as usize >= entities.len()
                    || t.relation as usize >= relations.len()
                {
                    return Err(Error::InvariantViolation(format!(
                        "snapshot {i}: triple {t:?} references an id outside the vocabulary"
                    )));
                }
                if !s.entities.contains(&t.head)
                    || !s.entities.contains(&t.tail)
                    || !s.relations.contains(&t.relation)
                {
                    return Err(Error::InvariantViolation(format!(
                        "snapshot {i}: triple {t:?} not covered by the snapshot vocabulary"
                    )));
                }
            }
        }
        let deltas = compute_deltas(&snapshots)?;
        Ok(Self {
            entities,
            relations,
            snapshots,
            deltas,
        })
    }

    pub fn num_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, i: usize) -> Result<&Snapshot> {
        self.snapshots.get(i).ok_or(Error::Index {
            index: i,
            len: self.snapshots.len(),
        })
    }

    pub fn deltas(&self) -> &[SnapshotDelta] {
        &self.deltas
    }

    pub fn delta(&self, i: usize) -> Result<&SnapshotDelta> {
        self.deltas.get(i).ok_or(Error::Index {
            index: i,
            len: self.deltas.len(),
        })
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// SHA-256 over the canonical text serialization of every split.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for s in &self.snapshots {
            for (name, split) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
                hasher.update(format!("#{}/{name}\n", s.index).as_bytes());
                for t in split {
                    hasher.update(self.format_triple(t).as_bytes());
                    hasher.update(b"\n");
                }
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn format_triple(&self, t: &Triple) -> String {
        format!(
            "{}\t{}\t{}",
            self.entities.label(t.head).unwrap_or("?"),
            self.relations.label(t.relation).unwrap_or("?"),
            self.entities.label(t.tail).unwrap_or("?")
        )
    }
}

fn check_disjoint(s: &Snapshot) -> Result<()> {
    let train: HashSet<_> = s.train.iter().collect();
    let valid: HashSet<_> = s.valid.iter().collect();
    let clash = s
        .valid
        .iter()
        .find(|t| train.contains(t))
        .or_else(|| s.test.iter().find(|t| train.contains(t) || valid.contains(t)));
    match clash {
        Some(t) => Err(Error::InvariantViolation(format!(
            "snapshot {}: triple {t:?} occurs in more than one split",
            s.index
        ))),
        None => Ok(()),
    }
}

/// Per-snapshot deltas. `train_delta` excludes training triples already
/// present in any split of an earlier snapshot.
pub fn compute_deltas(snapshots: &[Snapshot]) -> Result<Vec<SnapshotDelta>> {
    let empty_e = BTreeSet::new();
    let empty_r = BTreeSet::new();
    let mut prior_facts: HashSet<Triple> = HashSet::new();
    let mut out = Vec::with_capacity(snapshots.len());
    for (i, s) in snapshots.iter().enumerate() {
        let (prior_e, prior_r) = match i {
            0 => (&empty_e, &empty_r),
            _ => (&snapshots[i - 1].entities, &snapshots[i - 1].relations),
        };
        if !prior_e.is_subset(&s.entities) {
            return Err(Error::InvariantViolation(format!(
                "entity vocabulary of snapshot {i} does not contain that of snapshot {}",
                i - 1
            )));
        }
        if !prior_r.is_subset(&s.relations) {
            return Err(Error::InvariantViolation(format!(
                "relation vocabulary of snapshot {i} does not contain that of snapshot {}",
                i - 1
            )));
        }
        let mut seen = HashSet::new();
        let new_facts: Vec<Triple> = s
            .all_triples()
            .filter(|t| !prior_facts.contains(t) && seen.insert(**t))
            .copied()
            .collect();
        let train_delta: Vec<Triple> = s
            .train
            .iter()
            .filter(|t| classify_triple(t, prior_e, prior_r, &prior_facts) != TripleClass::Static)
            .copied()
            .collect();
        out.push(SnapshotDelta {
            index: i,
            new_entities: s.entities.difference(prior_e).copied().collect(),
            new_relations: s.relations.difference(prior_r).copied().collect(),
            new_facts,
            train_delta,
        });
        prior_facts.extend(s.all_triples().copied());
    }
    Ok(out)
}

/// Every known true triple of snapshots `0..=i`, for filtered ranking.
pub fn accumulated_filter_set(kg: &GrowingKg, i: usize) -> Result<HashSet<Triple>> {
    if i >= kg.num_snapshots() {
        return Err(Error::Index {
            index: i,
            len: kg.num_snapshots(),
        });
    }
    Ok(kg.snapshots[..=i]
        .iter()
        .flat_map(|s| s.all_triples().copied())
        .collect())
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Loads `<root>/<i>/{train,valid,test}.txt` for `i = 0..n-1`.
pub fn load_growing_kg(root: &Path) -> Result<GrowingKg> {
    let n = count_snapshot_dirs(root)?;
    if n == 0 {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no snapshot directories"),
        ));
    }
    let mut entities = Vocab::new();
    let mut relations = Vocab::new();
    let mut snapshots: Vec<Snapshot> = Vec::with_capacity(n);
    for i in 0..n {
        let dir = root.join(i.to_string());
        let mut splits: [Vec<Triple>; 3] = Default::default();
        for (slot, name) in splits.iter_mut().zip(SPLITS) {
            let path = dir.join(format!("{name}.txt"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            *slot = parse_split(&text, &path, &mut entities, &mut relations)?;
        }
        let [train, valid, test] = splits;
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
    GrowingKg::from_parts(entities, relations, snapshots)
}

fn count_snapshot_dirs(root: &Path) -> Result<usize> {
    let listing = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut indices = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        if let Some(i) = entry.file_name().to_str().and_then(|s| s.parse::<usize>().ok()) {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    for (expected, &found) in indices.iter().enumerate() {
        if expected != found {
            return Err(Error::io(
                root.join(expected.to_string()),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing snapshot directory"),
            ));
        }
    }
    Ok(indices.len())
}

fn parse_split(
    text: &str,
    path: &Path,
    entities: &mut Vocab,
    relations: &mut Vocab,
) -> Result<Vec<Triple>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected head<TAB>relation<TAB>tail, got {line:?}"),
            });
        }
        let head = entities.intern(fields[0]);
        let relation = relations.intern(fields[1]);
        let tail = entities.intern(fields[2]);
        let t = Triple::new(head, relation, tail);
        if seen.insert(t) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Writes `kg` back out in the dataset layout. Reloading yields an equal KG.
pub fn write_growing_kg(kg: &GrowingKg, root: &Path) -> Result<()> {
    for s in &kg.snapshots {
        let dir = root.join(s.index.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, split) in SPLITS.iter().zip([&s.train, &s.valid, &s.test]) {
            let path = dir.join(format!("{name}.txt"));
            let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut buf = String::new();
            for t in split {
                buf.push_str(&kg.format_triple(t));
                buf.push('\n');
            }
            file.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// The slice of a growing KG that training one snapshot may see.
///
/// Training code goes through this trait rather than [`GrowingKg`] so the
/// protocol (only the current snapshot's training delta and validation
/// split) can be audited with [`AccessLog`].
pub trait TrainingSource: Sync {
    fn num_snapshots(&self) -> usize;
    fn num_entities(&self) -> usize;
    fn num_relations(&self) -> usize;
    fn train_delta(&self, i: usize) -> &[Triple];
    fn valid(&self, i: usize) -> &[Triple];
}

impl TrainingSource for GrowingKg {
    fn num_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    fn num_entities(&self) -> usize {
        self.entities.len()
    }

    fn num_relations(&self) -> usize {
        self.relations.len()
    }

    fn train_delta(&self, i: usize) -> &[Triple] {
        &self.deltas[i].train_delta
    }

    fn valid(&self, i: usize) -> &[Triple] {
        &self.snapshots[i].valid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DataAccess {
    TrainDelta(usize),
    Valid(usize),
}

/// Wraps a [`TrainingSource`] and records every split read.
pub struct AccessLog<'a, S: TrainingSource> {
    inner: &'a S,
    log: Mutex<Vec<DataAccess>>,
}

impl<'a, S: TrainingSource> AccessLog<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Drains and returns the accesses recorded so far.
    pub fn take(&self) -> Vec<DataAccess> {
        std::mem::take(&mut *self.log.lock().expect("access log poisoned"))
    }

    fn record(&self, a: DataAccess) {
        self.log.lock().expect("access log poisoned").push(a);
    }
}

impl<S: TrainingSource> TrainingSource for AccessLog<'_, S> {
    fn num_snapshots(&self) -> usize {
        self.inner.num_snapshots()
    }

    fn num_entities(&self) -> usize {
        self.inner.num_entities()
    }

    fn num_relations(&self) -> usize {
        self.inner.num_relations()
    }

    fn train_delta(&self, i: usize) -> &[Triple] {
        self.record(DataAccess::TrainDelta(i));
        self.inner.train_delta(i)
    }

    fn valid(&self, i: usize) -> &[Triple] {
        self.record(DataAccess::Valid(i));
        self.inner.valid(i)
    }
}
