//! Synthetic growing KGs.
//!
//! Triples come from a latent translational model: every entity has a
//! latent point per domain it takes part in, every relation a latent
//! translation, and the tail of `(h, r, ?)` is the point nearest to
//! `z_h + z_r` (or one of the few nearest). A small share of random triples
//! is mixed in; for `facet` they are drawn from the snapshot's active
//! entities and relations.
//!
//! The `facet` pattern partitions relations into domains. Hub entities exist
//! from the first snapshot and take part in every domain with a latent point
//! per domain; leaf entities belong to one domain and appear with it.
//! Snapshot `i` is dominated by domain `i mod n_domains`, except that a
//! `repeat_fraction` share of hubs may stay in the previous domain.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{load_growing_kg, write_growing_kg, GrowingKg, Snapshot, Triple, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Equal,
    Higher,
    Lower,
    EntityGrowth,
    RelationGrowth,
    Hybrid,
    Facet,
}

fn default_noise() -> f64 {
    0.05
}
fn default_latent_dim() -> usize {
    4
}
fn default_hub_fraction() -> f64 {
    0.4
}
fn default_relation_scale() -> f64 {
    3.0
}
fn default_tail_choices() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_snapshots: usize,
    pub pattern: Pattern,
    pub n_entities: usize,
    pub n_relations: usize,
    /// Facet only.
    #[serde(default)]
    pub n_domains: usize,
    /// New facts per snapshot.
    pub triples_per_snapshot: Vec<usize>,
    pub seed: u64,
    /// Share of random triples.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// The tail is drawn uniformly from this many latent points nearest to
    /// `z_h + z_r`.
    #[serde(default = "default_tail_choices")]
    pub tail_choices: usize,
    /// Facet only: share of entities that are hubs.
    #[serde(default = "default_hub_fraction")]
    pub hub_fraction: f64,
    /// Facet only: weight of a hub's shared latent point in each of its
    /// per-domain points (0 = independent facets, 1 = identical).
    #[serde(default)]
    pub facet_correlation: f64,
    /// Facet only: length of the shared per-domain direction in relation
    /// latents.
    #[serde(default = "default_relation_scale")]
    pub relation_scale: f64,
    /// Facet only: per snapshot, the share of hubs that stay in the previous
    /// snapshot's domain. Empty means all zero.
    #[serde(default)]
    pub repeat_fraction: Vec<f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_snapshots == 0 || self.n_entities < 2 || self.n_relations == 0 {
            return fail("n_snapshots and n_relations must be positive, n_entities at least 2".into());
        }
        if self.triples_per_snapshot.len() != self.n_snapshots {
            return fail(format!(
                "schedule has {} entries for {} snapshots",
                self.triples_per_snapshot.len(),
                self.n_snapshots
            ));
        }
        if self.triples_per_snapshot.contains(&0) {
            return fail("every snapshot needs at least one triple".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail("noise must lie in [0, 1)".into());
        }
        if self.latent_dim == 0 || self.tail_choices == 0 {
            return fail("latent_dim and tail_choices must be positive".into());
        }
        let s = &self.triples_per_snapshot;
        let shape_ok = match self.pattern {
            Pattern::Equal => s.windows(2).all(|w| w[0] == w[1]),
            Pattern::Higher => s.windows(2).all(|w| w[0] < w[1]),
            Pattern::Lower => s.windows(2).all(|w| w[0] > w[1]),
            _ => true,
        };
        if !shape_ok {
            return fail(format!("schedule {s:?} does not fit pattern {:?}", self.pattern));
        }
        if self.pattern == Pattern::Facet {
            if self.n_domains == 0 || self.n_domains > self.n_relations {
                return fail(format!(
                    "facet needs 1..={} domains, got {}",
                    self.n_relations, self.n_domains
                ));
            }
            if !(0.0..=1.0).contains(&self.hub_fraction) || !(0.0..=1.0).contains(&self.facet_correlation) {
                return fail("hub_fraction and facet_correlation must lie in [0, 1]".into());
            }
            if !self.repeat_fraction.is_empty() {
                if self.repeat_fraction.len() != self.n_snapshots {
                    return fail("repeat_fraction needs one entry per snapshot".into());
                }
                if self.repeat_fraction.iter().any(|f| !(0.0..=1.0).contains(f)) {
                    return fail("repeat_fraction entries must lie in [0, 1]".into());
                }
                if self.repeat_fraction[0] != 0.0 {
                    return fail("the first snapshot has no previous domain to repeat".into());
                }
            }
        } else if !self.repeat_fraction.is_empty() {
            return fail("repeat_fraction applies to the facet pattern only".into());
        }
        Ok(())
    }

    /// Dominant domain of snapshot `i` (facet pattern).
    pub fn snapshot_domain(&self, i: usize) -> usize {
        i % self.n_domains.max(1)
    }
}

/// Relation-to-domain and snapshot-to-domain ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainMap {
    /// Relation label to domain.
    pub relations: BTreeMap<String, usize>,
    /// Dominant domain per snapshot.
    pub snapshots: Vec<usize>,
    /// Labels of hub entities.
    pub hubs: Vec<String>,
}

impl DomainMap {
    pub fn relations_csv(&self) -> String {
        let mut out = String::from("relation_id,domain_id\n");
        for (r, d) in &self.relations {
            let _ = writeln!(out, "{r},{d}");
        }
        out
    }

    pub fn snapshots_csv(&self) -> String {
        let mut out = String::from("snapshot,domain_id\n");
        for (i, d) in self.snapshots.iter().enumerate() {
            let _ = writeln!(out, "{i},{d}");
        }
        out
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut map = DomainMap::default();
        for (file, rows) in [("domains.csv", 0), ("snapshot_domains.csv", 1)] {
            let path = dir.join(file);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (n, line) in text.lines().enumerate().skip(1) {
                let bad = || Error::Parse {
                    file: path.clone(),
                    line: n + 1,
                    message: format!("expected two comma-separated fields, got {line:?}"),
                };
                let (a, b) = line.split_once(',').ok_or_else(bad)?;
                let d: usize = b.trim().parse().map_err(|_| bad())?;
                if rows == 0 {
                    map.relations.insert(a.to_string(), d);
                } else {
                    map.snapshots.push(d);
                }
            }
        }
        Ok(map)
    }
}

#[derive(Clone, Debug)]
pub struct Synthesized {
    pub kg: GrowingKg,
    pub domains: Option<DomainMap>,
}

fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Generation state shared by all patterns.
struct World {
    rng: ChaCha8Rng,
    tail_choices: usize,
    /// Latent point per (entity, domain).
    entity_latent: BTreeMap<(u32, usize), Vec<f64>>,
    relation_latent: Vec<Vec<f64>>,
    relation_domain: Vec<usize>,
    facts: HashSet<Triple>,
    covered_e: HashSet<u32>,
    covered_r: HashSet<u32>,
}

impl World {
    /// One of the `tail_choices` pool members nearest to `z_h + z_r` in
    /// domain `d`.
    fn translate(&mut self, h: u32, r: u32, d: usize, pool: &[u32]) -> Option<u32> {
        let zh = &self.entity_latent[&(h, d)];
        let target: Vec<f64> = zh.iter().zip(&self.relation_latent[r as usize]).map(|(a, b)| a + b).collect();
        let mut ranked: Vec<(f64, u32)> = pool
            .iter()
            .filter(|&&e| e != h)
            .map(|&e| (sq_dist(&target, &self.entity_latent[&(e, d)]), e))
            .collect();
        if ranked.is_empty() {
            return None;
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let top = ranked.len().min(self.tail_choices);
        Some(ranked[self.rng.random_range(0..top)].1)
    }

    fn push_new(&mut self, t: Triple, out: &mut Vec<Triple>) -> bool {
        if self.facts.insert(t) {
            out.push(t);
            true
        } else {
            false
        }
    }

    /// 3:1:1 split of `triples`; triples carrying an entity or relation
    /// not yet seen in any training split go to training.
    fn split(&mut self, mut triples: Vec<Triple>) -> (Vec<Triple>, Vec<Triple>, Vec<Triple>) {
        triples.shuffle(&mut self.rng);
        let n = triples.len();
        let n_train = (n * 3).div_ceil(5);
        let mut train = Vec::new();
        let mut rest = Vec::new();
        for t in triples {
            let uncovered = !self.covered_e.contains(&t.head)
                || !self.covered_e.contains(&t.tail)
                || !self.covered_r.contains(&t.relation);
            if uncovered {
                self.covered_e.insert(t.head);
                self.covered_e.insert(t.tail);
                self.covered_r.insert(t.relation);
                train.push(t);
            } else {
                rest.push(t);
            }
        }
        let mut rest = rest.into_iter();
        while train.len() < n_train {
            match rest.next() {
                Some(t) => train.push(t),
                None => break,
            }
        }
        let rest: Vec<Triple> = rest.collect();
        let n_valid = rest.len().div_ceil(2);
        let valid = rest[..n_valid].to_vec();
        let test = rest[n_valid..].to_vec();
        (train, valid, test)
    }
}

const MAX_DRAWS: usize = 200;

fn infeasible(i: usize, what: &str) -> Error {
    Error::Config(format!("snapshot {i}: could not generate {what}; the requested counts are too dense"))
}

/// Generates the dataset in memory.
pub fn generate(spec: &SynthSpec) -> Result<Synthesized> {
    spec.validate()?;
    match spec.pattern {
        Pattern::Facet => generate_facet(spec),
        _ => generate_plain(spec),
    }
}

fn assemble(
    spec: &SynthSpec,
    snapshots_triples: Vec<(Vec<Triple>, Vec<Triple>, Vec<Triple>)>,
) -> Result<GrowingKg> {
    let mut ents = Vocab::new();
    for e in 0..spec.n_entities {
        ents.intern(&format!("e{e}"));
    }
    let mut rels = Vocab::new();
    for r in 0..spec.n_relations {
        rels.intern(&format!("r{r}"));
    }
    let mut e_acc = BTreeSet::new();
    let mut r_acc = BTreeSet::new();
    let mut snapshots = Vec::new();
    for (i, (train, valid, test)) in snapshots_triples.into_iter().enumerate() {
        for t in train.iter().chain(&valid).chain(&test) {
            e_acc.insert(t.head);
            e_acc.insert(t.tail);
            r_acc.insert(t.relation);
        }
        snapshots.push(Snapshot {
            index: i,
            train,
            valid,
            test,
            entities: e_acc.clone(),
            relations: r_acc.clone(),
        });
    }
    GrowingKg::from_parts(ents, rels, snapshots)
}

fn generate_plain(spec: &SynthSpec) -> Result<Synthesized> {
    let n = spec.n_snapshots;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (entity_intro, relation_intro) = match spec.pattern {
        Pattern::EntityGrowth => (split_evenly(spec.n_entities, n), {
            let mut v = vec![0; n];
            v[0] = spec.n_relations;
            v
        }),
        Pattern::RelationGrowth => (
            {
                let mut v = vec![0; n];
                v[0] = spec.n_entities;
                v
            },
            split_evenly(spec.n_relations, n),
        ),
        _ => (split_evenly(spec.n_entities, n), split_evenly(spec.n_relations, n)),
    };
    if entity_intro[0] < 2 {
        return Err(Error::Config("the first snapshot needs at least two entities".into()));
    }
    let mut entity_latent = BTreeMap::new();
    for e in 0..spec.n_entities as u32 {
        entity_latent.insert((e, 0), gaussian(&mut rng, spec.latent_dim));
    }
    let relation_latent: Vec<Vec<f64>> = (0..spec.n_relations).map(|_| gaussian(&mut rng, spec.latent_dim)).collect();
    let mut world = World {
        rng,
        tail_choices: spec.tail_choices,
        entity_latent,
        relation_latent,
        relation_domain: vec![0; spec.n_relations],
        facts: HashSet::new(),
        covered_e: HashSet::new(),
        covered_r: HashSet::new(),
    };

    let mut out = Vec::new();
    let mut e_known: Vec<u32> = Vec::new();
    let mut r_known: Vec<u32> = Vec::new();
    for i in 0..n {
        let new_e: Vec<u32> = (e_known.len()..e_known.len() + entity_intro[i]).map(|e| e as u32).collect();
        let new_r: Vec<u32> = (r_known.len()..r_known.len() + relation_intro[i]).map(|r| r as u32).collect();
        e_known.extend(&new_e);
        r_known.extend(&new_r);
        let target = spec.triples_per_snapshot[i];
        if target < new_e.len().max(new_r.len()) {
            return Err(Error::Config(format!(
                "snapshot {i}: {target} triples cannot cover {} new entities and {} new relations",
                new_e.len(),
                new_r.len()
            )));
        }
        let n_noise = (spec.noise * target as f64).round() as usize;
        let mut triples = Vec::with_capacity(target);
        // coverage: every new entity heads a triple, every new relation is used
        for k in 0..new_e.len().max(new_r.len()) {
            let mut ok = false;
            for _ in 0..MAX_DRAWS {
                let h = if k < new_e.len() {
                    new_e[k]
                } else {
                    e_known[world.rng.random_range(0..e_known.len())]
                };
                let r = if k < new_r.len() {
                    new_r[k]
                } else {
                    r_known[world.rng.random_range(0..r_known.len())]
                };
                let Some(t) = world.translate(h, r, 0, &e_known) else { break };
                if world.push_new(Triple::new(h, r, t), &mut triples) {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(infeasible(i, "coverage triples"));
            }
        }
        let structured = target.saturating_sub(n_noise).max(triples.len());
        while triples.len() < structured {
            let mut ok = false;
            for _ in 0..MAX_DRAWS {
                let h = e_known[world.rng.random_range(0..e_known.len())];
                let r = r_known[world.rng.random_range(0..r_known.len())];
                let t = world.translate(h, r, 0, &e_known).expect("two entities known");
                if world.push_new(Triple::new(h, r, t), &mut triples) {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(infeasible(i, "structured triples"));
            }
        }
        add_noise(&mut world, &mut triples, target, &e_known, &r_known, i)?;
        out.push(world.split(triples));
    }
    Ok(Synthesized {
        kg: assemble(spec, out)?,
        domains: None,
    })
}

fn add_noise(
    world: &mut World,
    triples: &mut Vec<Triple>,
    target: usize,
    entities: &[u32],
    relations: &[u32],
    i: usize,
) -> Result<()> {
    while triples.len() < target {
        let mut ok = false;
        for _ in 0..MAX_DRAWS {
            let h = entities[world.rng.random_range(0..entities.len())];
            let t = entities[world.rng.random_range(0..entities.len())];
            let r = relations[world.rng.random_range(0..relations.len())];
            if h != t && world.push_new(Triple::new(h, r, t), triples) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(infeasible(i, "noise triples"));
        }
    }
    Ok(())
}

fn generate_facet(spec: &SynthSpec) -> Result<Synthesized> {
    let n = spec.n_snapshots;
    let nd = spec.n_domains;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.latent_dim;

    let n_hubs = ((spec.n_entities as f64) * spec.hub_fraction).round() as usize;
    let hubs: Vec<u32> = (0..n_hubs as u32).collect();
    let leaf_counts = split_evenly(spec.n_entities - n_hubs, nd);
    let mut leaves: Vec<Vec<u32>> = Vec::with_capacity(nd);
    let mut next = n_hubs as u32;
    for &c in &leaf_counts {
        leaves.push((next..next + c as u32).collect());
        next += c as u32;
    }
    let rel_counts = split_evenly(spec.n_relations, nd);
    let mut domain_relations: Vec<Vec<u32>> = Vec::with_capacity(nd);
    let mut relation_domain = Vec::with_capacity(spec.n_relations);
    let mut next = 0u32;
    for (d, &c) in rel_counts.iter().enumerate() {
        domain_relations.push((next..next + c as u32).collect());
        relation_domain.extend(std::iter::repeat_n(d, c));
        next += c as u32;
    }

    let mut entity_latent = BTreeMap::new();
    let rho = spec.facet_correlation;
    for &h in &hubs {
        let shared = gaussian(&mut rng, dim);
        for d in 0..nd {
            let own = gaussian(&mut rng, dim);
            let z = shared
                .iter()
                .zip(&own)
                .map(|(s, o)| rho.sqrt() * s + (1.0 - rho).sqrt() * o)
                .collect();
            entity_latent.insert((h, d), z);
        }
    }
    let directions: Vec<Vec<f64>> = (0..nd)
        .map(|_| {
            let v = gaussian(&mut rng, dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    for (d, ls) in leaves.iter().enumerate() {
        for &l in ls {
            entity_latent.insert((l, d), gaussian(&mut rng, dim));
        }
    }
    let relation_latent: Vec<Vec<f64>> = (0..spec.n_relations)
        .map(|r| {
            let d = relation_domain[r];
            gaussian(&mut rng, dim)
                .into_iter()
                .zip(&directions[d])
                .map(|(g, u)| spec.relation_scale * u + 0.5 * g)
                .collect()
        })
        .collect();

    let mut world = World {
        rng,
        tail_choices: spec.tail_choices,
        entity_latent,
        relation_latent,
        relation_domain: relation_domain.clone(),
        facts: HashSet::new(),
        covered_e: HashSet::new(),
        covered_r: HashSet::new(),
    };

    let mut seen_domains: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::new();
    for i in 0..n {
        let d = spec.snapshot_domain(i);
        let fresh = seen_domains.insert(d);
        let mut new_e: Vec<u32> = Vec::new();
        if i == 0 {
            new_e.extend(&hubs);
        }
        let mut new_r: Vec<u32> = Vec::new();
        if fresh {
            new_e.extend(&leaves[d]);
            new_r.extend(&domain_relations[d]);
        }

        let repeat = spec.repeat_fraction.get(i).copied().unwrap_or(0.0);
        let mut shuffled_hubs = hubs.clone();
        shuffled_hubs.shuffle(&mut world.rng);
        let n_rep = if i == 0 { 0 } else { (repeat * hubs.len() as f64).round() as usize };
        let rep: BTreeSet<u32> = shuffled_hubs[..n_rep].iter().copied().collect();
        let prev = if i == 0 { d } else { spec.snapshot_domain(i - 1) };
        let main_pool: Vec<u32> = hubs
            .iter()
            .filter(|h| !rep.contains(h))
            .chain(&leaves[d])
            .copied()
            .collect();
        let rep_pool: Vec<u32> = rep.iter().chain(&leaves[prev]).copied().collect();

        let target = spec.triples_per_snapshot[i];
        let n_noise = (spec.noise * target as f64).round() as usize;
        let mut triples = Vec::with_capacity(target);
        let mut heads_to_cover: Vec<(u32, usize)> = Vec::new();
        if fresh {
            heads_to_cover.extend(leaves[d].iter().map(|&l| (l, d)));
        }
        if i == 0 {
            heads_to_cover.extend(hubs.iter().map(|&h| (h, d)));
        }
        let n_cover = heads_to_cover.len().max(new_r.len());
        if target < n_cover + n_noise {
            return Err(Error::Config(format!(
                "snapshot {i}: {target} triples cannot cover {} new entities and {} new relations",
                new_e.len(),
                new_r.len()
            )));
        }
        for k in 0..n_cover {
            let mut ok = false;
            for _ in 0..MAX_DRAWS {
                let (h, hd) = if k < heads_to_cover.len() {
                    heads_to_cover[k]
                } else {
                    (main_pool[world.rng.random_range(0..main_pool.len())], d)
                };
                let rels = &domain_relations[hd];
                let r = if k < new_r.len() && hd == d {
                    new_r[k]
                } else {
                    rels[world.rng.random_range(0..rels.len())]
                };
                let pool = if hd == d { &main_pool } else { &rep_pool };
                let Some(t) = world.translate(h, r, hd, pool) else { break };
                if world.push_new(Triple::new(h, r, t), &mut triples) {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(infeasible(i, "coverage triples"));
            }
        }
        let heads: Vec<u32> = main_pool.iter().chain(&rep).copied().collect();
        while triples.len() < target - n_noise {
            let mut ok = false;
            for _ in 0..MAX_DRAWS {
                let h = heads[world.rng.random_range(0..heads.len())];
                let (hd, pool) = if rep.contains(&h) {
                    (prev, &rep_pool)
                } else {
                    (d, &main_pool)
                };
                let rels = &domain_relations[hd];
                let r = rels[world.rng.random_range(0..rels.len())];
                let Some(t) = world.translate(h, r, hd, pool) else { continue };
                if world.push_new(Triple::new(h, r, t), &mut triples) {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(infeasible(i, "facet triples"));
            }
        }
        let mut active_e: Vec<u32> = heads.clone();
        active_e.extend(leaves[prev].iter().filter(|_| !rep.is_empty()));
        let mut active_r: Vec<u32> = domain_relations[d].clone();
        if !rep.is_empty() && prev != d {
            active_r.extend(&domain_relations[prev]);
        }
        add_noise(&mut world, &mut triples, target, &active_e, &active_r, i)?;
        out.push(world.split(triples));
    }

    let domains = DomainMap {
        relations: (0..spec.n_relations)
            .map(|r| (format!("r{r}"), world.relation_domain[r]))
            .collect(),
        snapshots: (0..n).map(|i| spec.snapshot_domain(i)).collect(),
        hubs: hubs.iter().map(|h| format!("e{h}")).collect(),
    };
    Ok(Synthesized {
        kg: assemble(spec, out)?,
        domains: Some(domains),
    })
}

/// Generates and writes the dataset plus `spec.json` (and the domain
/// sidecars for the facet pattern) into `out`.
pub fn synthesize_growing_kg(spec: &SynthSpec, out: &Path) -> Result<Synthesized> {
    let synth = generate(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_growing_kg(&synth.kg, out)?;
    let spec_path = out.join("spec.json");
    let text = serde_json::to_string_pretty(spec).map_err(|e| Error::Json {
        path: spec_path.clone(),
        source: e,
    })?;
    fs::write(&spec_path, text + "\n").map_err(|e| Error::io(&spec_path, e))?;
    if let Some(domains) = &synth.domains {
        for (name, body) in [
            ("domains.csv", domains.relations_csv()),
            ("snapshot_domains.csv", domains.snapshots_csv()),
            ("hubs.txt", domains.hubs.join("\n") + "\n"),
        ] {
            let path = out.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(synth)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub snapshot: usize,
    pub entities: usize,
    pub relations: usize,
    pub new_facts: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub fn kg_stats(kg: &GrowingKg) -> Vec<StatsRow> {
    kg.snapshots()
        .iter()
        .zip(kg.deltas())
        .map(|(s, d)| StatsRow {
            snapshot: s.index,
            entities: s.entities.len(),
            relations: s.relations.len(),
            new_facts: d.new_facts.len(),
            train: s.train.len(),
            valid: s.valid.len(),
            test: s.test.len(),
        })
        .collect()
}

/// Per-snapshot `|E_i|`, `|R_i|` and new-fact counts of a dataset directory.
pub fn dataset_stats(path: &Path) -> Result<Vec<StatsRow>> {
    Ok(kg_stats(&load_growing_kg(path)?))
}

pub fn stats_table(rows: &[StatsRow]) -> String {
    let mut out = String::from("snapshot\tentities\trelations\tnew_facts\ttrain\tvalid\ttest\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.snapshot, r.entities, r.relations, r.new_facts, r.train, r.valid, r.test
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(pattern: Pattern, schedule: Vec<usize>) -> SynthSpec {
        SynthSpec {
            n_snapshots: schedule.len(),
            pattern,
            n_entities: 60,
            n_relations: 6,
            n_domains: 0,
            triples_per_snapshot: schedule,
            seed: 7,
            noise: 0.05,
            latent_dim: 8,
            tail_choices: 3,
            hub_fraction: 0.4,
            facet_correlation: 0.0,
            relation_scale: 1.0,
            repeat_fraction: vec![],
        }
    }

    fn facet() -> SynthSpec {
        SynthSpec {
            n_entities: 90,
            n_relations: 9,
            n_domains: 3,
            ..plain(Pattern::Facet, vec![300, 300, 300])
        }
    }

    #[test]
    fn equal_schedule_is_exact() {
        let s = generate(&plain(Pattern::Equal, vec![100, 100, 100])).unwrap();
        let rows = kg_stats(&s.kg);
        assert!(rows.iter().all(|r| r.new_facts == 100));
    }

    #[test]
    fn higher_and_lower_shapes() {
        let s = generate(&plain(Pattern::Higher, vec![50, 100, 200])).unwrap();
        let counts: Vec<_> = kg_stats(&s.kg).iter().map(|r| r.new_facts).collect();
        assert_eq!(counts, vec![50, 100, 200]);
        assert!(generate(&plain(Pattern::Higher, vec![100, 100])).is_err());
        generate(&plain(Pattern::Lower, vec![100, 60, 30])).unwrap();
        assert!(generate(&plain(Pattern::Lower, vec![50, 100])).is_err());
    }

    #[test]
    fn growth_patterns() {
        let s = generate(&plain(Pattern::EntityGrowth, vec![80, 80, 80])).unwrap();
        let rows = kg_stats(&s.kg);
        assert_eq!(rows[0].relations, 6);
        assert!(rows[0].entities < rows[2].entities);
        let s = generate(&plain(Pattern::RelationGrowth, vec![80, 80, 80])).unwrap();
        let rows = kg_stats(&s.kg);
        assert_eq!(rows[0].relations, 2);
        assert_eq!(rows[2].relations, 6);
    }

    #[test]
    fn facet_dominant_domain() {
        let spec = facet();
        let s = generate(&spec).unwrap();
        let domains = s.domains.unwrap();
        for i in 0..3 {
            let delta = &s.kg.deltas()[i].new_facts;
            let dominant = delta
                .iter()
                .filter(|t| {
                    let label = s.kg.relations().label(t.relation).unwrap();
                    domains.relations[label] == domains.snapshots[i]
                })
                .count();
            assert!(dominant as f64 >= 0.9 * delta.len() as f64, "{dominant}/{}", delta.len());
        }
    }

    #[test]
    fn every_element_is_trained() {
        let s = generate(&facet()).unwrap();
        let mut trained_e = HashSet::new();
        let mut trained_r = HashSet::new();
        for snap in s.kg.snapshots() {
            for t in &snap.train {
                trained_e.extend([t.head, t.tail]);
                trained_r.insert(t.relation);
            }
            for t in snap.valid.iter().chain(&snap.test) {
                assert!(trained_e.contains(&t.head) && trained_e.contains(&t.tail));
                assert!(trained_r.contains(&t.relation));
            }
        }
    }

    #[test]
    fn infeasible_specs() {
        let mut spec = facet();
        spec.n_domains = 10;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let mut spec = facet();
        spec.triples_per_snapshot = vec![10, 300, 300];
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let mut spec = facet();
        spec.repeat_fraction = vec![0.5, 0.0, 0.0];
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        synthesize_growing_kg(&facet(), &a).unwrap();
        synthesize_growing_kg(&facet(), &b).unwrap();
        for f in ["0/train.txt", "1/valid.txt", "2/test.txt", "domains.csv", "spec.json"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        let rows = dataset_stats(&a).unwrap();
        assert!(rows.iter().all(|r| r.new_facts == 300));
        let map = DomainMap::read(&a).unwrap();
        assert_eq!(map.snapshots, vec![0, 1, 2]);
        assert_eq!(map.relations.len(), 9);
    }
}
