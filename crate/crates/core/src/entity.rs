//! Identity-unified registry of drugs, proteins, and diseases together with
//! their pretrained embeddings and fingerprints.
//!
//! Records from different sources are merged whenever they share a primary
//! ID or an alias. The mutable [`EntityStore`] is used during ingestion;
//! [`EntityStore::freeze`] turns it into a dense, read-only [`FrozenStore`]
//! whose indices become graph node indices.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tsv::{parse_floats, parse_list, ParseError, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Drug,
    Protein,
    Disease,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [EntityKind::Drug, EntityKind::Protein, EntityKind::Disease];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Drug => "drug",
            EntityKind::Protein => "protein",
            EntityKind::Disease => "disease",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "drug" => Ok(EntityKind::Drug),
            "protein" | "gene" | "protein/gene" => Ok(EntityKind::Protein),
            "disease" => Ok(EntityKind::Disease),
            other => Err(format!("unknown entity kind `{other}`")),
        }
    }
}

/// Embedding width per entity kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindDims {
    pub drug: usize,
    pub protein: usize,
    pub disease: usize,
}

impl Default for KindDims {
    fn default() -> Self {
        Self {
            drug: 2304,
            protein: 768,
            disease: 512,
        }
    }
}

impl KindDims {
    pub fn uniform(d: usize) -> Self {
        Self {
            drug: d,
            protein: d,
            disease: d,
        }
    }

    pub fn get(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::Drug => self.drug,
            EntityKind::Protein => self.protein,
            EntityKind::Disease => self.disease,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub kind: EntityKind,
    pub aliases: BTreeSet<String>,
    pub descriptor: Option<String>,
}

/// Dense embedding vector with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, StoreError> {
        if values.is_empty() {
            return Err(StoreError::EmptyEmbedding);
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(StoreError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FingerprintSource {
    Ingested,
    Toy,
}

/// Fixed-length molecular fingerprint bit vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    len: usize,
    words: Vec<u64>,
    pub source: FingerprintSource,
}

impl Fingerprint {
    pub fn zeros(len: usize, source: FingerprintSource) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
            source,
        }
    }

    pub fn from_bits(len: usize, bits: impl IntoIterator<Item = usize>) -> Self {
        let mut fp = Self::zeros(len, FingerprintSource::Ingested);
        for b in bits {
            fp.set(b);
        }
        fp
    }

    /// Decodes a hex string, most significant bit of each byte first. The
    /// bit length is four times the number of hex digits.
    pub fn from_hex(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let padded;
        let src = if s.len() % 2 == 1 {
            padded = format!("{s}0");
            padded.as_str()
        } else {
            s
        };
        let bytes = hex::decode(src).map_err(|e| format!("bad hex fingerprint: {e}"))?;
        let len = s.len() * 4;
        let mut fp = Self::zeros(len, FingerprintSource::Ingested);
        for (i, byte) in bytes.iter().enumerate() {
            for bit in 0..8 {
                let pos = i * 8 + bit;
                if pos < len && byte & (0x80 >> bit) != 0 {
                    fp.set(pos);
                }
            }
        }
        Ok(fp)
    }

    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.len.div_ceil(8)];
        for pos in self.ones() {
            bytes[pos / 8] |= 0x80 >> (pos % 8);
        }
        let mut s = hex::encode(bytes);
        s.truncate(self.len.div_ceil(4));
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range");
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// True when no bit is set.
    pub fn is_blank(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x100_0000_01b3);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Deterministic stand-in fingerprint: every character 1-, 2- and 3-gram of
/// the string is hashed to one bit. Only meant for synthetic corpora.
pub fn toy_fingerprint(smiles: &str, length: usize) -> Fingerprint {
    assert!(length > 0, "fingerprint length must be positive");
    let mut fp = Fingerprint::zeros(length, FingerprintSource::Toy);
    let chars: Vec<char> = smiles.chars().collect();
    for k in 1..=3usize {
        for gram in chars.windows(k) {
            let s: String = gram.iter().collect();
            let h = fnv1a(k as u64, s.as_bytes());
            fp.set((h % length as u64) as usize);
        }
    }
    fp
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("primary id must be nonempty")]
    EmptyId,
    #[error("`{key}` is bound to a {existing} entity, cannot use it for a {requested}")]
    KindConflict {
        key: String,
        existing: EntityKind,
        requested: EntityKind,
    },
    #[error("descriptor of `{requested}` already belongs to `{existing}` and they share no alias")]
    DescriptorConflict { existing: String, requested: String },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("{kind} embedding for `{id}` has dimension {got}, expected {expected}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    DimMismatch {
        id: String,
        kind: EntityKind,
        got: usize,
        expected: usize,
        line: Option<usize>,
    },
    #[error("embedding is empty")]
    EmptyEmbedding,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("fingerprint for `{id}` has {got} bits, store uses {expected}")]
    FingerprintLength { id: String, got: usize, expected: usize },
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Clone, Debug)]
struct Slot {
    entity: Entity,
    embedding: Option<Embedding>,
    fingerprint: Option<Fingerprint>,
    merged_into: Option<usize>,
}

/// Outcome of a bulk load: rows attached plus IDs that resolved to nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub unknown: Vec<String>,
}

/// Mutable ingestion-time registry.
#[derive(Clone, Debug)]
pub struct EntityStore {
    dims: KindDims,
    slots: Vec<Slot>,
    ids: HashMap<String, usize>,
    aliases: HashMap<String, usize>,
    descriptors: HashMap<(EntityKind, String), usize>,
    fingerprint_len: Option<usize>,
}

/// Handle returned by registration; stays valid across later merges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntityRef(usize);

impl EntityStore {
    pub fn new(dims: KindDims) -> Self {
        Self {
            dims,
            slots: Vec::new(),
            ids: HashMap::new(),
            aliases: HashMap::new(),
            descriptors: HashMap::new(),
            fingerprint_len: None,
        }
    }

    pub fn dims(&self) -> KindDims {
        self.dims
    }

    fn root(&self, mut i: usize) -> usize {
        while let Some(next) = self.slots[i].merged_into {
            i = next;
        }
        i
    }

    /// Number of distinct (unmerged) entities.
    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.merged_into.is_none()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Resolves a primary ID or alias.
    pub fn resolve(&self, key: &str) -> Option<EntityRef> {
        self.ids
            .get(key)
            .or_else(|| self.aliases.get(key))
            .map(|&i| EntityRef(self.root(i)))
    }

    pub fn entity(&self, r: EntityRef) -> &Entity {
        &self.slots[self.root(r.0)].entity
    }

    pub fn embedding(&self, r: EntityRef) -> Option<&Embedding> {
        self.slots[self.root(r.0)].embedding.as_ref()
    }

    pub fn fingerprint(&self, r: EntityRef) -> Option<&Fingerprint> {
        self.slots[self.root(r.0)].fingerprint.as_ref()
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.slots
            .iter()
            .filter(|s| s.merged_into.is_none())
            .map(|s| &s.entity)
    }

    /// Registers a record, merging it into every existing entity of the same
    /// kind that shares its primary ID or any alias.
    pub fn register_entity(
        &mut self,
        kind: EntityKind,
        primary_id: &str,
        aliases: &BTreeSet<String>,
        descriptor: Option<&str>,
    ) -> Result<EntityRef, StoreError> {
        let primary_id = primary_id.trim();
        if primary_id.is_empty() {
            return Err(StoreError::EmptyId);
        }
        let mut matched = BTreeSet::new();
        for key in std::iter::once(primary_id).chain(aliases.iter().map(String::as_str)) {
            for &i in self.ids.get(key).into_iter().chain(self.aliases.get(key)) {
                let root = self.root(i);
                let existing = self.slots[root].entity.kind;
                if existing != kind {
                    return Err(StoreError::KindConflict {
                        key: key.to_string(),
                        existing,
                        requested: kind,
                    });
                }
                matched.insert(root);
            }
        }
        let descriptor = descriptor.map(str::trim).filter(|d| !d.is_empty());
        if let Some(d) = descriptor {
            if let Some(&owner) = self.descriptors.get(&(kind, d.to_string())) {
                let owner = self.root(owner);
                if !matched.contains(&owner) {
                    return Err(StoreError::DescriptorConflict {
                        existing: self.slots[owner].entity.id.clone(),
                        requested: primary_id.to_string(),
                    });
                }
            }
        }

        let survivor = match matched.iter().next() {
            Some(&first) => first,
            None => {
                self.slots.push(Slot {
                    entity: Entity {
                        id: primary_id.to_string(),
                        kind,
                        aliases: BTreeSet::new(),
                        descriptor: None,
                    },
                    embedding: None,
                    fingerprint: None,
                    merged_into: None,
                });
                self.slots.len() - 1
            }
        };
        for &other in matched.iter().skip(1) {
            self.merge_into(survivor, other);
        }

        let slot = &mut self.slots[survivor];
        slot.entity.aliases.extend(aliases.iter().cloned());
        slot.entity.aliases.insert(primary_id.to_string());
        let own = slot.entity.id.clone();
        slot.entity.aliases.remove(&own);
        if slot.entity.descriptor.is_none() {
            slot.entity.descriptor = descriptor.map(str::to_string);
        }
        self.ids.entry(primary_id.to_string()).or_insert(survivor);
        for a in aliases {
            self.aliases.entry(a.clone()).or_insert(survivor);
        }
        if let Some(d) = descriptor {
            self.descriptors.entry((kind, d.to_string())).or_insert(survivor);
        }
        Ok(EntityRef(survivor))
    }

    fn merge_into(&mut self, survivor: usize, other: usize) {
        let entity = self.slots[other].entity.clone();
        let taken = std::mem::replace(
            &mut self.slots[other],
            Slot {
                entity,
                embedding: None,
                fingerprint: None,
                merged_into: Some(survivor),
            },
        );
        let s = &mut self.slots[survivor];
        s.entity.aliases.extend(taken.entity.aliases);
        // the absorbed primary ID stays resolvable and listed
        s.entity.aliases.insert(taken.entity.id);
        let own = s.entity.id.clone();
        s.entity.aliases.remove(&own);
        if s.entity.descriptor.is_none() {
            s.entity.descriptor = taken.entity.descriptor;
        }
        if s.embedding.is_none() {
            s.embedding = taken.embedding;
        }
        if s.fingerprint.is_none() {
            s.fingerprint = taken.fingerprint;
        }
    }

    /// Stores (or replaces) an entity's embedding.
    pub fn attach_embedding(&mut self, r: EntityRef, emb: Embedding) -> Result<(), StoreError> {
        let root = self.root(r.0);
        let kind = self.slots[root].entity.kind;
        let expected = self.dims.get(kind);
        if emb.dim() != expected {
            return Err(StoreError::DimMismatch {
                id: self.slots[root].entity.id.clone(),
                kind,
                got: emb.dim(),
                expected,
                line: None,
            });
        }
        self.slots[root].embedding = Some(emb);
        Ok(())
    }

    pub fn attach_fingerprint(&mut self, r: EntityRef, fp: Fingerprint) -> Result<(), StoreError> {
        let root = self.root(r.0);
        match self.fingerprint_len {
            Some(len) if len != fp.len() => {
                return Err(StoreError::FingerprintLength {
                    id: self.slots[root].entity.id.clone(),
                    got: fp.len(),
                    expected: len,
                })
            }
            _ => self.fingerprint_len = Some(fp.len()),
        }
        self.slots[root].fingerprint = Some(fp);
        Ok(())
    }

    /// Reads an entities TSV (`id kind aliases descriptor`). Returns the
    /// number of rows registered.
    pub fn load_entities(&mut self, path: &Path) -> Result<usize, StoreError> {
        let table = Table::read(path)?;
        table.expect_header(&["id", "kind", "aliases", "descriptor"])?;
        for row in &table.rows {
            let kind: EntityKind = row.get(1).parse().map_err(|e: String| table.error(row, e))?;
            let aliases: BTreeSet<String> = parse_list(row.get(2)).into_iter().collect();
            let descriptor = Some(row.get(3)).filter(|d| !d.is_empty());
            self.register_entity(kind, row.get(0), &aliases, descriptor)?;
        }
        Ok(table.rows.len())
    }

    /// Reads an embedding TSV (`id values`) for entities of `kind`. Unknown
    /// IDs are reported; a wrong dimension aborts the load.
    pub fn load_embedding_table(
        &mut self,
        path: &Path,
        kind: EntityKind,
    ) -> Result<LoadReport, StoreError> {
        let table = Table::read(path)?;
        table.expect_header(&["id", "values"])?;
        let mut report = LoadReport::default();
        for row in &table.rows {
            let id = row.get(0);
            let Some(r) = self.resolve(id) else {
                report.unknown.push(id.to_string());
                continue;
            };
            let existing = self.entity(r).kind;
            if existing != kind {
                return Err(StoreError::KindConflict {
                    key: id.to_string(),
                    existing,
                    requested: kind,
                });
            }
            let values = parse_floats(row.get(1)).map_err(|e| table.error(row, e))?;
            let expected = self.dims.get(kind);
            if values.len() != expected {
                return Err(StoreError::DimMismatch {
                    id: id.to_string(),
                    kind,
                    got: values.len(),
                    expected,
                    line: Some(row.line),
                });
            }
            let emb = Embedding::new(values).map_err(|e| table.error(row, e.to_string()))?;
            self.attach_embedding(r, emb)?;
            report.loaded += 1;
        }
        Ok(report)
    }

    /// Reads a fingerprint TSV (`id hexbits`).
    pub fn load_fingerprints(&mut self, path: &Path) -> Result<LoadReport, StoreError> {
        let table = Table::read(path)?;
        table.expect_header(&["id", "hexbits"])?;
        let mut report = LoadReport::default();
        for row in &table.rows {
            let id = row.get(0);
            let Some(r) = self.resolve(id) else {
                report.unknown.push(id.to_string());
                continue;
            };
            let fp = Fingerprint::from_hex(row.get(1)).map_err(|e| table.error(row, e))?;
            self.attach_fingerprint(r, fp)?;
            report.loaded += 1;
        }
        Ok(report)
    }

    /// Ends ingestion. Entities keep their registration order.
    pub fn freeze(self) -> FrozenStore {
        let mut dense = vec![usize::MAX; self.slots.len()];
        let mut entities = Vec::new();
        let mut embeddings = Vec::new();
        let mut fingerprints = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.merged_into.is_none() {
                dense[i] = entities.len();
                entities.push(slot.entity.clone());
                embeddings.push(slot.embedding.clone());
                fingerprints.push(slot.fingerprint.clone());
            }
        }
        let mut index = HashMap::new();
        for (key, &i) in self.ids.iter().chain(self.aliases.iter()) {
            index.entry(key.clone()).or_insert(dense[self.root(i)]);
        }
        // primary IDs win over aliases when both spellings exist
        for (key, &i) in &self.ids {
            index.insert(key.clone(), dense[self.root(i)]);
        }
        FrozenStore {
            dims: self.dims,
            entities,
            embeddings,
            fingerprints,
            index,
        }
    }
}

/// Immutable registry with dense indices.
#[derive(Clone, Debug)]
pub struct FrozenStore {
    dims: KindDims,
    entities: Vec<Entity>,
    embeddings: Vec<Option<Embedding>>,
    fingerprints: Vec<Option<Fingerprint>>,
    index: HashMap<String, usize>,
}

impl FrozenStore {
    pub fn dims(&self) -> KindDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn resolve(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn entity(&self, i: usize) -> &Entity {
        &self.entities[i]
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn embedding(&self, i: usize) -> Option<&Embedding> {
        self.embeddings[i].as_ref()
    }

    pub fn fingerprint(&self, i: usize) -> Option<&Fingerprint> {
        self.fingerprints[i].as_ref()
    }

    /// Keys (primary IDs and aliases) that resolve to entity `i`, sorted.
    pub fn keys_of(&self, i: usize) -> Vec<&str> {
        let mut keys: Vec<&str> = self
            .index
            .iter()
            .filter(|(_, &v)| v == i)
            .map(|(k, _)| k.as_str())
            .collect();
        keys.sort_unstable();
        keys
    }
}
