//! Dataset contract: schema, per-case records, the `.dsv` volume container,
//! and the directory layout.
//!
//! A dataset directory looks like:
//!
//! ```text
//! root/
//!   schema.toml                # sequences, classes, tabular schema
//!   train/ internal_test/ external_test/
//!     <case_id>/
//!       <SEQ>.dsv              # one f32 volume per sequence
//!       mask.dsv               # u8 ROI mask, same grid
//!       meta.toml              # label, cohort, tabular row
//! ```
//!
//! `.dsv` is a little-endian container: magic `DSVL`, format version, dtype
//! code (1 = f32, 2 = u8), rank, dims as u32, then the payload. Voxel
//! payloads are stored at f32 precision; generators quantize to f32 before
//! returning, so a write/read round trip is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct NumericColumn {
    pub name: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct CategoricalColumn {
    pub name: String,
    pub cardinality: usize,
}

/// Declared tabular feature layout (column order is significant).
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TabularSchema {
    pub numeric: Vec<NumericColumn>,
    pub categorical: Vec<CategoricalColumn>,
}

impl TabularSchema {
    pub fn feature_count(&self) -> usize {
        self.numeric.len() + self.categorical.len()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.categorical {
            if c.cardinality == 0 {
                return Err(Error::Validation(format!(
                    "categorical column {} has zero cardinality",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

/// One tabular row aligned with the schema's column order; `None` marks a
/// missing value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TabularRow {
    pub numeric: Vec<Option<f64>>,
    pub categorical: Vec<Option<usize>>,
}

impl TabularRow {
    pub fn conforms(&self, schema: &TabularSchema) -> Result<()> {
        if self.numeric.len() != schema.numeric.len()
            || self.categorical.len() != schema.categorical.len()
        {
            return Err(Error::Contract(format!(
                "tabular row has {}+{} features, schema declares {}+{}",
                self.numeric.len(),
                self.categorical.len(),
                schema.numeric.len(),
                schema.categorical.len()
            )));
        }
        for (col, v) in schema.categorical.iter().zip(&self.categorical) {
            if let Some(idx) = v {
                if *idx >= col.cardinality {
                    return Err(Error::Contract(format!(
                        "categorical {} index {idx} exceeds cardinality {}",
                        col.name, col.cardinality
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Train,
    InternalTest,
    ExternalTest,
}

impl Cohort {
    pub const ALL: [Cohort; 3] = [Cohort::Train, Cohort::InternalTest, Cohort::ExternalTest];

    pub fn dir_name(&self) -> &'static str {
        match self {
            Cohort::Train => "train",
            Cohort::InternalTest => "internal_test",
            Cohort::ExternalTest => "external_test",
        }
    }

    pub fn parse(s: &str) -> Result<Cohort> {
        match s {
            "train" => Ok(Cohort::Train),
            "internal_test" => Ok(Cohort::InternalTest),
            "external_test" => Ok(Cohort::ExternalTest),
            other => Err(Error::Validation(format!(
                "unknown cohort {other:?}; valid cohorts: train, internal_test, external_test"
            ))),
        }
    }
}

impl std::fmt::Display for Cohort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Dataset-level declaration stored at `root/schema.toml`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub sequences: Vec<String>,
    pub num_classes: usize,
    #[serde(default)]
    pub tabular: TabularSchema,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Validation("dataset declares no sequences".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "dataset num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        self.tabular.validate()
    }
}

/// One subject: aligned volumes per sequence, ROI mask, label and tabular
/// row.
#[derive(Clone, Debug)]
pub struct MultiSequenceCase {
    pub case_id: String,
    /// Aligned with `DatasetSchema::sequences` order.
    pub volumes: Vec<Array>,
    /// Binary mask (0/1 values), same grid as the volumes.
    pub mask: Array,
    pub label: usize,
    pub tabular: TabularRow,
    pub cohort: Cohort,
}

impl MultiSequenceCase {
    pub fn validate(&self, schema: &DatasetSchema) -> Result<()> {
        if self.volumes.len() != schema.sequences.len() {
            return Err(Error::Validation(format!(
                "case {} has {} volumes, schema declares sequences {:?}",
                self.case_id,
                self.volumes.len(),
                schema.sequences
            )));
        }
        let grid = self.volumes[0].shape().to_vec();
        for (name, v) in schema.sequences.iter().zip(&self.volumes) {
            if v.shape() != grid.as_slice() {
                return Err(Error::Validation(format!(
                    "case {}: sequence {} grid {:?} differs from {:?}",
                    self.case_id,
                    name,
                    v.shape(),
                    grid
                )));
            }
        }
        if self.mask.shape() != grid.as_slice() {
            return Err(Error::Validation(format!(
                "case {}: mask grid {:?} differs from volumes {:?}",
                self.case_id,
                self.mask.shape(),
                grid
            )));
        }
        if !self.mask.data().iter().any(|&v| v > 0.0) {
            return Err(Error::Validation(format!(
                "case {}: mask has no foreground voxels",
                self.case_id
            )));
        }
        if self.label >= schema.num_classes {
            return Err(Error::Validation(format!(
                "case {}: label {} out of {} classes",
                self.case_id, self.label, schema.num_classes
            )));
        }
        self.tabular.conforms(&schema.tabular)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeDtype {
    F32,
    U8,
}

/// Write a 3D volume in the `.dsv` container.
pub fn write_volume(path: &Path, arr: &Array, dtype: VolumeDtype) -> Result<()> {
    if arr.rank() != 3 {
        return Err(Error::Contract(format!("volumes are rank 3, got {:?}", arr.shape())));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"DSVL")?;
    w.write_all(&[1u8])?;
    w.write_all(&[match dtype {
        VolumeDtype::F32 => 1u8,
        VolumeDtype::U8 => 2u8,
    }])?;
    w.write_all(&[3u8])?;
    for &d in arr.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        VolumeDtype::F32 => {
            for &v in arr.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        VolumeDtype::U8 => {
            for &v in arr.data() {
                w.write_all(&[if v > 0.0 { 1u8 } else { 0u8 }])?;
            }
        }
    }
    Ok(())
}

/// Read a `.dsv` volume back as f64 values.
pub fn read_volume(path: &Path) -> Result<Array> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[0..4] != b"DSVL" || head[4] != 1 {
        return Err(Error::Ingestion(format!("{}: not a dsv volume", path.display())));
    }
    let dtype = head[5];
    let rank = head[6] as usize;
    if rank != 3 {
        return Err(Error::Ingestion(format!("{}: rank {rank} unsupported", path.display())));
    }
    let mut dims = [0usize; 3];
    let mut u32buf = [0u8; 4];
    for d in &mut dims {
        r.read_exact(&mut u32buf)?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let n = dims.iter().product::<usize>();
    let mut data = Vec::with_capacity(n);
    match dtype {
        1 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        2 => {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)?;
            data.extend(buf.iter().map(|&b| f64::from(b)));
        }
        other => {
            return Err(Error::Ingestion(format!("{}: unknown dtype code {other}", path.display())))
        }
    }
    Ok(Array::from_vec(&dims, data))
}

/// Case metadata record (`meta.toml`).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseMeta {
    case_id: String,
    label: usize,
    cohort: String,
    #[serde(default)]
    numeric: BTreeMap<String, f64>,
    #[serde(default)]
    categorical: BTreeMap<String, usize>,
}

/// Load and validate one case directory against the schema.
pub fn load_case(dir: &Path, schema: &DatasetSchema) -> Result<MultiSequenceCase> {
    let meta_path = dir.join("meta.toml");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: CaseMeta = toml::from_str(&meta_text)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", meta_path.display())))?;
    let mut volumes = Vec::with_capacity(schema.sequences.len());
    for seq in &schema.sequences {
        let path = dir.join(format!("{seq}.dsv"));
        if !path.exists() {
            return Err(Error::Ingestion(format!(
                "case {}: sequence {seq} absent ({} missing)",
                meta.case_id,
                path.display()
            )));
        }
        volumes.push(read_volume(&path)?);
    }
    let mask = read_volume(&dir.join("mask.dsv"))?;
    let tabular = TabularRow {
        numeric: schema
            .tabular
            .numeric
            .iter()
            .map(|c| meta.numeric.get(&c.name).copied())
            .collect(),
        categorical: schema
            .tabular
            .categorical
            .iter()
            .map(|c| meta.categorical.get(&c.name).copied())
            .collect(),
    };
    let case = MultiSequenceCase {
        case_id: meta.case_id,
        volumes,
        mask,
        label: meta.label,
        tabular,
        cohort: Cohort::parse(&meta.cohort)?,
    };
    case.validate(schema)?;
    Ok(case)
}

/// Write one case directory.
pub fn write_case(dir: &Path, case: &MultiSequenceCase, schema: &DatasetSchema) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (seq, vol) in schema.sequences.iter().zip(&case.volumes) {
        write_volume(&dir.join(format!("{seq}.dsv")), vol, VolumeDtype::F32)?;
    }
    write_volume(&dir.join("mask.dsv"), &case.mask, VolumeDtype::U8)?;
    let mut numeric = BTreeMap::new();
    for (col, v) in schema.tabular.numeric.iter().zip(&case.tabular.numeric) {
        if let Some(v) = v {
            numeric.insert(col.name.clone(), *v);
        }
    }
    let mut categorical = BTreeMap::new();
    for (col, v) in schema.tabular.categorical.iter().zip(&case.tabular.categorical) {
        if let Some(v) = v {
            categorical.insert(col.name.clone(), *v);
        }
    }
    let meta = CaseMeta {
        case_id: case.case_id.clone(),
        label: case.label,
        cohort: case.cohort.dir_name().to_string(),
        numeric,
        categorical,
    };
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Runtime(format!("meta serialization: {e}")))?;
    std::fs::write(dir.join("meta.toml"), text)?;
    Ok(())
}

/// Whole dataset held in memory, cases grouped by cohort.
#[derive(Debug)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub cases: BTreeMap<Cohort, Vec<MultiSequenceCase>>,
    pub fingerprint: String,
}

impl Dataset {
    pub fn cohort(&self, cohort: Cohort) -> &[MultiSequenceCase] {
        self.cases.get(&cohort).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn available_cohorts(&self) -> Vec<Cohort> {
        self.cases.iter().filter(|(_, v)| !v.is_empty()).map(|(c, _)| *c).collect()
    }
}

/// Load a dataset directory (schema + all cohorts present on disk).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let schema_path = root.join("schema.toml");
    let text = std::fs::read_to_string(&schema_path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", schema_path.display())))?;
    let schema: DatasetSchema = toml::from_str(&text)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", schema_path.display())))?;
    schema.validate()?;
    let mut cases = BTreeMap::new();
    for cohort in Cohort::ALL {
        let dir = root.join(cohort.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        let mut list = Vec::with_capacity(entries.len());
        for case_dir in entries {
            let mut case = load_case(&case_dir, &schema)?;
            if case.cohort != cohort {
                return Err(Error::Ingestion(format!(
                    "case {} metadata says cohort {}, found under {}",
                    case.case_id, case.cohort, cohort
                )));
            }
            case.cohort = cohort;
            list.push(case);
        }
        cases.insert(cohort, list);
    }
    if cases.values().all(|v| v.is_empty()) {
        return Err(Error::Ingestion(format!("no cases found under {}", root.display())));
    }
    // Cohort splits must be disjoint by case id.
    let mut seen = std::collections::BTreeSet::new();
    for case in cases.values().flatten() {
        if !seen.insert(case.case_id.clone()) {
            return Err(Error::Ingestion(format!(
                "case id {} appears in more than one cohort",
                case.case_id
            )));
        }
    }
    let fingerprint = fingerprint_dir(root)?;
    Ok(Dataset { schema, cases, fingerprint })
}

/// Write a dataset directory, cases grouped into cohort subdirectories.
pub fn write_dataset(root: &Path, schema: &DatasetSchema, cases: &[MultiSequenceCase]) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let text = toml::to_string_pretty(schema)
        .map_err(|e| Error::Runtime(format!("schema serialization: {e}")))?;
    std::fs::write(root.join("schema.toml"), text)?;
    for case in cases {
        let dir = root.join(case.cohort.dir_name()).join(&case.case_id);
        write_case(&dir, case, schema)?;
    }
    Ok(())
}

/// Content hash of a dataset directory: FNV-1a over (sorted relative path,
/// file bytes) pairs. Stable across platforms for identical content.
pub fn fingerprint_dir(root: &Path) -> Result<String> {
    fn walk(dir: &Path, root: &Path, files: &mut Vec<(String, PathBuf)>) -> Result<()> {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, files)?;
            } else {
                let rel = p
                    .strip_prefix(root)
                    .map_err(|_| Error::Runtime("path outside dataset root".into()))?
                    .to_string_lossy()
                    .replace('\\', "/");
                files.push((rel, p));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    files.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (rel, path) in files {
        let bytes = std::fs::read(&path)?;
        for chunk in [rel.as_bytes(), &[0u8], bytes.as_slice(), &[0xff]] {
            for &b in chunk {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    Ok(format!("{h:016x}"))
}
