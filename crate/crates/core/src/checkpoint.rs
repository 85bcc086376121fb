//! Checkpoint directories: `manifest.json` plus one little-endian f32 matrix
//! per entity space and one for relations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, EntityEntry, RelationSpace, SnapshotSpace};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dim: usize,
    n_snapshots: usize,
    n_entities: usize,
    n_relations: usize,
    first_appearance: Vec<(u32, usize)>,
    spaces: Vec<SpaceManifest>,
    relations: MatrixManifest<RelationRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpaceManifest {
    index: usize,
    sealed: bool,
    #[serde(flatten)]
    matrix: MatrixManifest<EntityRow>,
    /// Decoupling drops; `offset` is set when the raw vector was kept.
    dropped: Vec<DroppedRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixManifest<R> {
    file: Option<String>,
    rows: usize,
    bytes: usize,
    entries: Vec<R>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntityRow {
    entity: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    offset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pointer: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DroppedRow {
    entity: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    offset: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RelationRow {
    relation: u32,
    offset: usize,
    last_updated: usize,
}

fn write_matrix(path: &Path, rows: &[&[f32]]) -> Result<usize> {
    let mut buf = Vec::with_capacity(rows.iter().map(|r| r.len() * 4).sum());
    for row in rows {
        for x in *row {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(buf.len())
}

fn read_matrix(dir: &Path, m: &MatrixManifest<impl Sized>, dim: usize) -> Result<Vec<f32>> {
    if m.bytes != m.rows * dim * 4 {
        return Err(Error::Version(format!(
            "{:?}: {} rows of dim {dim} need {} bytes, manifest says {}",
            m.file,
            m.rows,
            m.rows * dim * 4,
            m.bytes
        )));
    }
    let Some(name) = &m.file else {
        return if m.rows == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::Version("matrix rows without a file".into()))
        };
    };
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != m.bytes {
        return Err(Error::io(
            &path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("expected {} bytes, found {}", m.bytes, bytes.len()),
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_checkpoint(store: &EmbeddingStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dim = store.dim();
    let mut spaces = Vec::with_capacity(store.num_spaces());
    for space in store.spaces() {
        let mut rows: Vec<&[f32]> = Vec::new();
        let mut entries = Vec::new();
        for (&entity, entry) in space.entries() {
            match entry {
                EntityEntry::Explicit(v) => {
                    entries.push(EntityRow {
                        entity,
                        offset: Some(rows.len()),
                        pointer: None,
                    });
                    rows.push(v);
                }
                EntityEntry::Pointer(x) => entries.push(EntityRow {
                    entity,
                    offset: None,
                    pointer: Some(*x),
                }),
            }
        }
        let mut dropped = Vec::new();
        for (&entity, raw) in space.dropped() {
            let offset = raw.as_ref().map(|v| {
                rows.push(v);
                rows.len() - 1
            });
            dropped.push(DroppedRow { entity, offset });
        }
        let file = (!rows.is_empty()).then(|| format!("space_{}.bin", space.index()));
        let bytes = match &file {
            Some(name) => write_matrix(&dir.join(name), &rows)?,
            None => 0,
        };
        spaces.push(SpaceManifest {
            index: space.index(),
            sealed: space.is_sealed(),
            matrix: MatrixManifest {
                file,
                rows: rows.len(),
                bytes,
                entries,
            },
            dropped,
        });
    }

    let rel = store.relations();
    let mut rows: Vec<&[f32]> = Vec::new();
    let mut entries = Vec::new();
    for r in 0..rel.len() as u32 {
        if let (Some(v), Some(i)) = (rel.get(r), rel.last_updated(r)) {
            entries.push(RelationRow {
                relation: r,
                offset: rows.len(),
                last_updated: i,
            });
            rows.push(v);
        }
    }
    let file = (!rows.is_empty()).then(|| "relations.bin".to_owned());
    let bytes = match &file {
        Some(name) => write_matrix(&dir.join(name), &rows)?,
        None => 0,
    };

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dim,
        n_snapshots: store.num_spaces(),
        n_entities: store.n_entities(),
        n_relations: store.n_relations(),
        first_appearance: store
            .first_appearances()
            .iter()
            .map(|(&e, &i)| (e, i))
            .collect(),
        spaces,
        relations: MatrixManifest {
            file,
            rows: rows.len(),
            bytes,
            entries,
        },
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<EmbeddingStore> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "format version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.spaces.len() != m.n_snapshots {
        return Err(Error::Version(format!(
            "n_snapshots {} but {} spaces listed",
            m.n_snapshots,
            m.spaces.len()
        )));
    }
    let dim = m.dim;
    let row = |data: &[f32], offset: usize, rows: usize| -> Result<Vec<f32>> {
        if offset >= rows {
            return Err(Error::Version(format!("row offset {offset} out of {rows}")));
        }
        Ok(data[offset * dim..(offset + 1) * dim].to_vec())
    };

    let mut store = EmbeddingStore::new(dim, m.n_entities, m.n_relations);
    for (expected, sm) in m.spaces.iter().enumerate() {
        if sm.index != expected {
            return Err(Error::Version(format!(
                "space {} listed at position {expected}",
                sm.index
            )));
        }
        let data = read_matrix(dir, &sm.matrix, dim)?;
        let mut space = SnapshotSpace::new(sm.index, dim);
        for er in &sm.matrix.entries {
            match (er.offset, er.pointer) {
                (Some(o), None) => space.insert_explicit(er.entity, row(&data, o, sm.matrix.rows)?)?,
                (None, Some(x)) => space.insert_pointer(er.entity, x)?,
                _ => {
                    return Err(Error::Version(format!(
                        "entity {} in space {} needs exactly one of offset/pointer",
                        er.entity, sm.index
                    )))
                }
            }
        }
        for dr in &sm.dropped {
            let raw = dr
                .offset
                .map(|o| row(&data, o, sm.matrix.rows))
                .transpose()?;
            space.record_drop(dr.entity, raw);
        }
        space.set_sealed(sm.sealed);
        store.push_raw_space(space);
    }
    for (e, i) in &m.first_appearance {
        store.set_first_appearance(*e, *i);
    }
    // pointer targets must be explicit
    for space in store.spaces() {
        for (&e, entry) in space.entries() {
            if let EntityEntry::Pointer(x) = entry {
                if store.space(*x)?.explicit(e).is_none() {
                    return Err(Error::CorruptStore(format!(
                        "entity {e}: pointer from space {} to non-explicit space {x}",
                        space.index()
                    )));
                }
            }
        }
    }

    let data = read_matrix(dir, &m.relations, dim)?;
    let mut relations = RelationSpace::new(dim, m.n_relations);
    for rr in &m.relations.entries {
        relations.set(rr.relation, row(&data, rr.offset, m.relations.rows)?, rr.last_updated)?;
    }
    store.relations_from(relations);
    Ok(store)
}
