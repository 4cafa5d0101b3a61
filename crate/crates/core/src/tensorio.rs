//! Hidden-state data model and the on-disk dataset format.
//!
//! A dataset lives in a directory holding two files:
//!
//! * `records.hsb`: magic `HSB1`, then `u32` version (= 1), `u32` layer count
//!   (embedding layer included), `u32` hidden dim. Each record follows as a
//!   `u32` id length, the UTF-8 id, a `u32` token count `T`, and then
//!   `layers * T * dim` little-endian `f32` values in `[layer][token][dim]`
//!   order.
//! * `manifest.json`: task metadata, labels keyed by id and the split lists.
//!
//! Layer 0 is always the word-embedding layer. Records carry their own token
//! count, so no padding is ever stored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSB1";
pub const FORMAT_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "records.hsb";
pub const MANIFEST_FILE: &str = "manifest.json";

/// All-layer hidden states of a single input, laid out `[layer][token][dim]`.
///
/// Values are kept in `f32`, exactly as stored on disk; the head widens them
/// to `f64` on access.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    layers: usize,
    tokens: usize,
    dim: usize,
    values: Vec<f32>,
}

impl HiddenStates {
    pub fn new(layers: usize, tokens: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        let states = Self { layers, tokens, dim, values };
        states.validate()?;
        Ok(states)
    }

    /// Builds a tensor by evaluating `f(layer, token, dim)` at every position.
    pub fn from_fn(
        layers: usize,
        tokens: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(layers * tokens * dim);
        for l in 0..layers {
            for t in 0..tokens {
                for j in 0..dim {
                    values.push(f(l, t, j));
                }
            }
        }
        Self::new(layers, tokens, dim, values)
    }

    /// Number of layers including the embedding layer (`L + 1`).
    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, layer: usize, token: usize, j: usize) -> f64 {
        f64::from(self.values[(layer * self.tokens + token) * self.dim + j])
    }

    /// The `dim`-long vector for one token at one layer.
    pub fn token(&self, layer: usize, token: usize) -> &[f32] {
        let start = (layer * self.tokens + token) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Shape("layer count must be at least 1".into()));
        }
        if self.tokens == 0 {
            return Err(Error::Shape("token count must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Shape("hidden dim must be at least 1".into()));
        }
        let expected = self.layers * self.tokens * self.dim;
        if self.values.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} values for {}x{}x{}, got {}",
                self.layers,
                self.tokens,
                self.dim,
                self.values.len()
            )));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            let per_layer = self.tokens * self.dim;
            return Err(Error::NonFinite(format!(
                "value {} at layer {}, token {}, dim {}",
                self.values[pos],
                pos / per_layer,
                (pos % per_layer) / self.dim,
                pos % self.dim
            )));
        }
        Ok(())
    }
}

/// Checks every tensor invariant, returning the first violation.
pub fn validate_tensor(states: &HiddenStates) -> Result<()> {
    states.validate()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Sequence,
}

/// A single class index, or one class index per token for sequence labeling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub states: HiddenStates,
    pub label: Label,
}

impl LabeledExample {
    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Tokens(_) => None,
        }
    }
}

/// JSON manifest as stored next to the record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task_name: String,
    pub task_kind: TaskKind,
    pub num_classes: usize,
    pub num_layers_incl_embedding: usize,
    pub dim: usize,
    pub labels: BTreeMap<String, Label>,
    pub splits: BTreeMap<String, Vec<String>>,
}

/// A labeled collection of hidden-state records with named splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub task_name: String,
    pub task_kind: TaskKind,
    pub num_classes: usize,
    pub num_layers: usize,
    pub dim: usize,
    pub splits: BTreeMap<String, Vec<String>>,
    pub examples: Vec<LabeledExample>,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.dim == 0 {
            return Err(Error::Shape("layer count and dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Label(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let mut ids = HashSet::with_capacity(self.examples.len());
        for ex in &self.examples {
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::Corruption(format!("duplicate record id {:?}", ex.id)));
            }
            ex.states.validate()?;
            if ex.states.num_layers() != self.num_layers || ex.states.dim() != self.dim {
                return Err(Error::Corruption(format!(
                    "record {:?} is {}x{} (layers x dim), dataset declares {}x{}",
                    ex.id,
                    ex.states.num_layers(),
                    ex.states.dim(),
                    self.num_layers,
                    self.dim
                )));
            }
            self.check_label(ex)?;
        }
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (split, members) in &self.splits {
            for id in members {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Corruption(format!(
                        "split {split:?} references unknown id {id:?}"
                    )));
                }
                if let Some(other) = seen.insert(id, split) {
                    return Err(Error::Corruption(format!(
                        "id {id:?} appears in both {other:?} and {split:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_label(&self, ex: &LabeledExample) -> Result<()> {
        match (&ex.label, self.task_kind) {
            (Label::Class(c), TaskKind::Classification) => {
                if *c >= self.num_classes {
                    return Err(Error::Label(format!(
                        "{:?}: class {c} out of range for {} classes",
                        ex.id, self.num_classes
                    )));
                }
            }
            (Label::Tokens(tags), TaskKind::Sequence) => {
                if tags.len() != ex.states.num_tokens() {
                    return Err(Error::Label(format!(
                        "{:?}: {} token labels for {} tokens",
                        ex.id,
                        tags.len(),
                        ex.states.num_tokens()
                    )));
                }
                if let Some(c) = tags.iter().find(|&&c| c >= self.num_classes) {
                    return Err(Error::Label(format!(
                        "{:?}: token class {c} out of range for {} classes",
                        ex.id, self.num_classes
                    )));
                }
            }
            (_, kind) => {
                return Err(Error::Label(format!(
                    "{:?}: label kind does not match {kind:?} task",
                    ex.id
                )))
            }
        }
        Ok(())
    }

    pub fn split_names(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(String::as_str)
    }

    /// Examples of one split, in split-list order.
    pub fn split(&self, name: &str) -> Result<Vec<&LabeledExample>> {
        let members = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Config(format!("no split named {name:?}")))?;
        let index: HashMap<&str, &LabeledExample> =
            self.examples.iter().map(|ex| (ex.id.as_str(), ex)).collect();
        members
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Corruption(format!("unknown id {id:?}")))
            })
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            task_name: self.task_name.clone(),
            task_kind: self.task_kind,
            num_classes: self.num_classes,
            num_layers_incl_embedding: self.num_layers,
            dim: self.dim,
            labels: self
                .examples
                .iter()
                .map(|ex| (ex.id.clone(), ex.label.clone()))
                .collect(),
            splits: self.splits.clone(),
        }
    }
}

/// Writes `records.hsb` and `manifest.json` into `dir`, creating it if needed.
///
/// The bundle is validated before anything touches the filesystem.
pub fn write_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    let records = encode_records(bundle)?;
    let manifest = serde_json::to_vec_pretty(&bundle.manifest())?;

    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
    out.write_all(&records)?;
    out.flush()?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Shape(format!("{what} {value} exceeds u32")))
}

/// Serializes the record file body. Exposed for byte-level tests.
pub fn encode_records(bundle: &DatasetBundle) -> Result<Vec<u8>> {
    let payload: usize = bundle
        .examples
        .iter()
        .map(|ex| 8 + ex.id.len() + 4 * ex.states.values().len())
        .sum();
    let mut buf = Vec::with_capacity(16 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(bundle.num_layers, "layer count")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(bundle.dim, "dim")?.to_le_bytes());
    for ex in &bundle.examples {
        buf.extend_from_slice(&to_u32(ex.id.len(), "id length")?.to_le_bytes());
        buf.extend_from_slice(ex.id.as_bytes());
        buf.extend_from_slice(&to_u32(ex.states.num_tokens(), "token count")?.to_le_bytes());
        for v in ex.states.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&end| end <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Corruption(format!(
                "truncated {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parsed record file: header dims plus `(id, states)` in file order.
pub struct RecordFile {
    pub num_layers: usize,
    pub dim: usize,
    pub records: Vec<(String, HiddenStates)>,
}

pub fn decode_records(bytes: &[u8]) -> Result<RecordFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing HSB1 magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur
        .u32("version")
        .map_err(|_| Error::Format("header too short".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let num_layers = cur.u32("header")? as usize;
    let dim = cur.u32("header")? as usize;
    if num_layers == 0 || dim == 0 {
        return Err(Error::Corruption(format!(
            "header declares {num_layers} layers, dim {dim}"
        )));
    }

    let mut records = Vec::new();
    while !cur.at_end() {
        let id_len = cur.u32("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|e| Error::Corruption(format!("record id is not UTF-8: {e}")))?
            .to_owned();
        let tokens = cur.u32("token count")? as usize;
        let count = num_layers
            .checked_mul(tokens)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| Error::Corruption(format!("{id:?}: token count {tokens} overflows")))?;
        let byte_len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Corruption(format!("{id:?}: payload size overflows")))?;
        let raw = cur.take(byte_len, "record payload")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let states = HiddenStates::new(num_layers, tokens, dim, values).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("record {id:?}: {msg}")),
            Error::Shape(msg) => Error::Corruption(format!("record {id:?}: {msg}")),
            other => other,
        })?;
        records.push((id, states));
    }
    Ok(RecordFile { num_layers, dim, records })
}

/// Loads and validates a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<DatasetBundle> {
    let bytes = fs::read(dir.join(RECORDS_FILE))?;
    let file = decode_records(&bytes)?;
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;

    if manifest.num_layers_incl_embedding != file.num_layers || manifest.dim != file.dim {
        return Err(Error::Corruption(format!(
            "manifest declares {}x{} (layers x dim), records are {}x{}",
            manifest.num_layers_incl_embedding, manifest.dim, file.num_layers, file.dim
        )));
    }

    let mut labels = manifest.labels;
    let mut examples = Vec::with_capacity(file.records.len());
    for (id, states) in file.records {
        let label = labels
            .remove(&id)
            .ok_or_else(|| Error::Corruption(format!("record {id:?} has no manifest entry")))?;
        examples.push(LabeledExample { id, states, label });
    }
    if let Some(id) = labels.keys().next() {
        // Either missing from the records or a duplicate id already consumed.
        return Err(Error::Corruption(format!(
            "manifest id {id:?} does not resolve to exactly one record"
        )));
    }

    let bundle = DatasetBundle {
        task_name: manifest.task_name,
        task_kind: manifest.task_kind,
        num_classes: manifest.num_classes,
        num_layers: manifest.num_layers_incl_embedding,
        dim: manifest.dim,
        splits: manifest.splits,
        examples,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> DatasetBundle {
        let states = HiddenStates::new(2, 1, 2, vec![0.0; 4]).unwrap();
        DatasetBundle {
            task_name: "tiny".into(),
            task_kind: TaskKind::Classification,
            num_classes: 2,
            num_layers: 2,
            dim: 2,
            splits: BTreeMap::from([("train".to_string(), vec!["a".to_string()])]),
            examples: vec![LabeledExample { id: "a".into(), states, label: Label::Class(0) }],
        }
    }

    #[test]
    fn zero_tensor_payload_is_sixteen_zero_bytes() {
        let bytes = encode_records(&tiny_bundle()).unwrap();
        // header (16) + id length (4) + "a" (1) + T (4)
        let payload = &bytes[16 + 4 + 1 + 4..];
        assert_eq!(payload, &[0u8; 16]);
        assert_eq!(&bytes[..4], b"HSB1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
    }

    #[test]
    fn nan_is_rejected() {
        let err = HiddenStates::new(1, 1, 2, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn zero_tokens_is_a_shape_error() {
        let err = HiddenStates::new(2, 0, 2, vec![]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn wrong_length_is_a_shape_error() {
        let err = HiddenStates::new(2, 2, 2, vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_records(&tiny_bundle()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_records(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version() {
        let mut bytes = encode_records(&tiny_bundle()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_records(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_records(&tiny_bundle()).unwrap();
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_records(short), Err(Error::Corruption(_))));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut b = tiny_bundle();
        b.splits.insert("test".into(), vec!["a".into()]);
        assert!(matches!(b.validate(), Err(Error::Corruption(_))));
    }

    #[test]
    fn token_label_length_must_match() {
        let mut b = tiny_bundle();
        b.task_kind = TaskKind::Sequence;
        b.examples[0].label = Label::Tokens(vec![0, 1]);
        assert!(matches!(b.validate(), Err(Error::Label(_))));
        b.examples[0].label = Label::Tokens(vec![1]);
        b.validate().unwrap();
    }

    #[test]
    fn mixed_label_kinds_rejected() {
        let mut b = tiny_bundle();
        b.task_kind = TaskKind::Sequence;
        assert!(matches!(b.validate(), Err(Error::Label(_))));
    }

    #[test]
    fn invalid_bundle_is_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let mut b = tiny_bundle();
        b.examples[0].label = Label::Class(5);
        assert!(write_dataset(&b, &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn manifest_and_record_dims_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        write_dataset(&b, dir.path()).unwrap();
        let mut manifest = b.manifest();
        manifest.dim = 3;
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn non_finite_record_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        write_dataset(&b, dir.path()).unwrap();
        let path = dir.path().join(RECORDS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn label_json_shapes() {
        assert_eq!(serde_json::to_string(&Label::Class(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&Label::Tokens(vec![0, 1])).unwrap(), "[0,1]");
        let l: Label = serde_json::from_str("[1,0]").unwrap();
        assert_eq!(l, Label::Tokens(vec![1, 0]));
    }
}
