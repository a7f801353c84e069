//! Parameter tensors for the tree-structured hidden-state model, their
//! initializers, invariant checks, diagnostics, and on-disk format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SynFuncInventory, Topology, Vocabulary};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{entropy_bits, Tensor3};

pub const MODEL_MAGIC: [u8; 4] = *b"THMM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{clusters} clusters cannot seed {n} states")]
    ClusterCount { clusters: usize, n: usize },
    #[error("cluster file line {line}: expected bitpath<TAB>word")]
    ClusterFormat { line: usize },
    #[error("bad magic bytes {found:?}, not a model file")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("model file corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Shape and provenance of a parameter set: state count `n`, vocabulary
/// size `v` (including the unknown-word id), function count `s`, and the
/// seed that drove initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub n: usize,
    pub v: usize,
    pub s: usize,
    pub seed: u64,
}

impl ModelMeta {
    pub fn new(n: usize, v: usize, s: usize, seed: u64) -> ModelMeta {
        ModelMeta { n, v, s, seed }
    }

    pub fn shape_ok(&self) -> bool {
        self.n >= 1 && self.v >= 2 && self.s >= 1
    }
}

/// Conditional probability tables. `trans.col(j, l)` is the distribution
/// over child states given parent state j under function l; `emit.col(j, l)`
/// the distribution over words emitted from state j under function l;
/// `root.col(0, l)` the distribution over states attached directly to the
/// synthetic root under function l.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub meta: ModelMeta,
    pub trans: Tensor3,
    pub emit: Tensor3,
    pub root: Tensor3,
}

impl ModelParams {
    /// Zero tensors of the shape `meta` prescribes.
    pub fn zeros(meta: ModelMeta) -> ModelParams {
        ModelParams {
            meta,
            trans: Tensor3::zeros(meta.n, meta.n, meta.s),
            emit: Tensor3::zeros(meta.v, meta.n, meta.s),
            root: Tensor3::zeros(meta.n, 1, meta.s),
        }
    }

    /// All columns uniform. Handy as a neutral reference point.
    pub fn uniform(meta: ModelMeta) -> ModelParams {
        let mut p = ModelParams::zeros(meta);
        for t in [&mut p.trans, &mut p.emit, &mut p.root] {
            t.data_mut().fill(1.0);
            t.normalize_cols();
        }
        p
    }
}

fn fill_uniform01(t: &mut Tensor3, rng: &mut impl Rng) {
    for x in t.data_mut() {
        *x = rng.gen::<f64>();
    }
}

/// Unnormalized uniform(0,1) draws in the fixed order trans, emit, root.
/// Both initializers go through here so they consume the stream identically.
fn init_raw(meta: ModelMeta) -> ModelParams {
    assert!(meta.shape_ok(), "degenerate model shape {meta:?}");
    let mut rng = stream_rng(meta.seed, Stream::Init);
    let mut params = ModelParams::zeros(meta);
    fill_uniform01(&mut params.trans, &mut rng);
    fill_uniform01(&mut params.emit, &mut rng);
    fill_uniform01(&mut params.root, &mut rng);
    params
}

fn normalize_all(params: &mut ModelParams) {
    params.trans.normalize_cols();
    params.emit.normalize_cols();
    params.root.normalize_cols();
}

/// Every column filled with uniform(0,1) draws and normalized. Deterministic
/// in `meta.seed`.
pub fn init_random(meta: ModelMeta) -> ModelParams {
    let mut params = init_raw(meta);
    normalize_all(&mut params);
    params
}

/// Like `init_random`, but before normalization the emission weight of each
/// clustered word is multiplied by `factor` in the column of the state its
/// cluster id names. States at or beyond the cluster count keep plain random
/// columns, as do the transition and root tensors.
pub fn init_brown(
    meta: ModelMeta,
    clusters: &BrownClusterMap,
    factor: f64,
) -> Result<ModelParams, ModelError> {
    if clusters.num_clusters() > meta.n {
        return Err(ModelError::ClusterCount {
            clusters: clusters.num_clusters(),
            n: meta.n,
        });
    }
    assert!(factor >= 1.0, "boost factor must be at least 1");
    let mut params = init_raw(meta);
    for (&word, &cluster) in clusters.iter() {
        if word >= meta.v {
            continue;
        }
        for l in 0..meta.s {
            *params.emit.at_mut(word, cluster, l) *= factor;
        }
    }
    normalize_all(&mut params);
    Ok(params)
}

/// Word-id to cluster-id table built from hierarchical-clustering output.
/// Partial over the vocabulary; cluster ids are dense in `0..num_clusters`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BrownClusterMap {
    assign: HashMap<usize, usize>,
    num_clusters: usize,
}

impl BrownClusterMap {
    /// Reads Liang-format text: one `bitpath<TAB>word[<TAB>count]` row per
    /// line. Bitpaths truncated to `prefix_len` characters (0 keeps them
    /// whole) define the clusters; ids follow the truncated paths in sorted
    /// order. Words outside `vocab` are dropped, and the first row naming a
    /// word wins.
    pub fn read_liang<R: BufRead>(
        reader: R,
        prefix_len: usize,
        vocab: &Vocabulary,
    ) -> Result<BrownClusterMap, ModelError> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (path, word) = match (fields.next(), fields.next()) {
                (Some(p), Some(w)) if !p.is_empty() => (p, w),
                _ => return Err(ModelError::ClusterFormat { line: idx + 1 }),
            };
            let id = vocab.encode(word);
            if id == vocab.oov_id() && word != crate::corpus::OOV_FORM {
                continue;
            }
            let path = if prefix_len > 0 {
                let cut = path
                    .char_indices()
                    .nth(prefix_len)
                    .map(|(i, _)| i)
                    .unwrap_or(path.len());
                &path[..cut]
            } else {
                path
            };
            rows.push((path.to_string(), id));
        }

        let mut paths: Vec<&str> = rows.iter().map(|(p, _)| p.as_str()).collect();
        paths.sort_unstable();
        paths.dedup();
        let path_ids: HashMap<&str, usize> =
            paths.iter().enumerate().map(|(i, &p)| (p, i)).collect();

        let mut assign = HashMap::new();
        for (path, word) in &rows {
            assign.entry(*word).or_insert(path_ids[path.as_str()]);
        }
        Ok(BrownClusterMap {
            assign,
            num_clusters: paths.len(),
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn get(&self, word: usize) -> Option<usize> {
        self.assign.get(&word).copied()
    }

    /// Number of mapped words.
    pub fn len(&self) -> usize {
        self.assign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assign.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &usize)> {
        self.assign.iter()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub tensor: &'static str,
    pub col: usize,
    pub func: usize,
    pub detail: String,
}

/// Outcome of `validate`. Keeps the first few offending columns verbatim
/// plus the worst deviation seen anywhere.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub total_violations: usize,
    pub max_deviation: f64,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.total_violations == 0
    }
}

pub const VALIDATE_EPS: f64 = 1e-9;
const MAX_REPORTED: usize = 10;

/// Checks shape against meta, column sums against 1, and entry ranges.
/// Violations are reported, never thrown.
pub fn validate(params: &ModelParams) -> ValidationReport {
    let meta = params.meta;
    let mut report = ValidationReport {
        violations: Vec::new(),
        total_violations: 0,
        max_deviation: 0.0,
    };
    let push = |report: &mut ValidationReport, v: Violation, dev: f64| {
        report.total_violations += 1;
        if report.violations.len() < MAX_REPORTED {
            report.violations.push(v);
        }
        if dev > report.max_deviation {
            report.max_deviation = dev;
        }
    };

    if !meta.shape_ok() {
        push(
            &mut report,
            Violation {
                tensor: "meta",
                col: 0,
                func: 0,
                detail: format!("requires n >= 1, v >= 2, s >= 1, got {meta:?}"),
            },
            f64::INFINITY,
        );
        return report;
    }

    let shapes = [
        ("trans", &params.trans, meta.n, meta.n),
        ("emit", &params.emit, meta.v, meta.n),
        ("root", &params.root, meta.n, 1),
    ];
    for (name, tensor, rows, cols) in shapes {
        if tensor.rows() != rows || tensor.cols() != cols || tensor.funcs() != meta.s {
            push(
                &mut report,
                Violation {
                    tensor: name,
                    col: 0,
                    func: 0,
                    detail: format!(
                        "shape [{}x{}x{}] does not match meta [{}x{}x{}]",
                        tensor.rows(),
                        tensor.cols(),
                        tensor.funcs(),
                        rows,
                        cols,
                        meta.s
                    ),
                },
                f64::INFINITY,
            );
            continue;
        }
        for l in 0..tensor.funcs() {
            for j in 0..tensor.cols() {
                let col = tensor.col(j, l);
                let sum: f64 = col.iter().sum();
                let dev = (sum - 1.0).abs();
                if !dev.is_finite() || dev > VALIDATE_EPS {
                    push(
                        &mut report,
                        Violation {
                            tensor: name,
                            col: j,
                            func: l,
                            detail: format!("column sums to {sum}"),
                        },
                        if dev.is_finite() { dev } else { f64::INFINITY },
                    );
                }
                if let Some(&bad) = col
                    .iter()
                    .find(|x| !x.is_finite() || **x < 0.0 || **x > 1.0)
                {
                    push(
                        &mut report,
                        Violation {
                            tensor: name,
                            col: j,
                            func: l,
                            detail: format!("entry {bad} outside [0,1]"),
                        },
                        f64::INFINITY,
                    );
                }
            }
        }
    }
    report
}

/// Mean Shannon entropy in bits over all transition columns, the root
/// columns included.
pub fn transition_entropy(params: &ModelParams) -> f64 {
    let meta = params.meta;
    let mut total = 0.0;
    for l in 0..meta.s {
        for j in 0..meta.n {
            total += entropy_bits(params.trans.col(j, l));
        }
        total += entropy_bits(params.root.col(0, l));
    }
    total / ((meta.n * meta.s + meta.s) as f64)
}

/// Entropy of all transition entries pooled into one distribution, for
/// comparison with the per-column mean.
pub fn transition_entropy_flat(params: &ModelParams) -> f64 {
    let mut pooled: Vec<f64> = Vec::with_capacity(params.trans.data().len() + params.root.data().len());
    pooled.extend_from_slice(params.trans.data());
    pooled.extend_from_slice(params.root.data());
    crate::tensor::normalize(&mut pooled);
    entropy_bits(&pooled)
}

/// Free-parameter tally as (transition count incl. root, emission count).
pub fn param_count(meta: &ModelMeta) -> (u64, u64) {
    let (n, v, s) = (meta.n as u64, meta.v as u64, meta.s as u64);
    (n * n * s + n * s, v * n * s)
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>, ModelError> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)
        .map_err(|e| ModelError::Corrupt(format!("tensor data short: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| ModelError::Corrupt(format!("header short: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

/// Binary container: magic, format version, meta, then the three tensors'
/// raw data in storage order, everything little-endian.
pub fn write_model(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    for x in [
        params.meta.n as u64,
        params.meta.v as u64,
        params.meta.s as u64,
        params.meta.seed,
    ] {
        w.write_all(&x.to_le_bytes())?;
    }
    write_f64s(&mut w, params.trans.data())?;
    write_f64s(&mut w, params.emit.data())?;
    write_f64s(&mut w, params.root.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelParams, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| ModelError::Corrupt(format!("header short: {e}")))?;
    if magic != MODEL_MAGIC {
        return Err(ModelError::BadMagic { found: magic });
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)
        .map_err(|e| ModelError::Corrupt(format!("header short: {e}")))?;
    let ver = u32::from_le_bytes(ver);
    if ver != MODEL_VERSION {
        return Err(ModelError::Version(ver));
    }
    let n = read_u64(&mut r)? as usize;
    let v = read_u64(&mut r)? as usize;
    let s = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let meta = ModelMeta::new(n, v, s, seed);
    if !meta.shape_ok() || n.saturating_mul(v).saturating_mul(s) > (1 << 36) {
        return Err(ModelError::Corrupt(format!("implausible shape {meta:?}")));
    }
    let mut params = ModelParams::zeros(meta);
    params.trans.data_mut().copy_from_slice(&read_f64s(&mut r, n * n * s)?);
    params.emit.data_mut().copy_from_slice(&read_f64s(&mut r, v * n * s)?);
    params.root.data_mut().copy_from_slice(&read_f64s(&mut r, n * s)?);
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => Ok(params),
        _ => Err(ModelError::Corrupt("trailing bytes after tensors".into())),
    }
}

/// JSON companion to the binary model: everything needed to encode fresh
/// corpora against the trained tables, plus the resolved run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub meta: ModelMeta,
    pub topology: Topology,
    /// Vocabulary forms in id order; the last entry is the unknown symbol.
    pub forms: Vec<String>,
    pub min_count: u64,
    /// Retained function labels in id order; the reserved id is implicit.
    pub labels: Vec<String>,
    pub excluded: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

impl ModelSidecar {
    pub fn new(
        meta: ModelMeta,
        topology: Topology,
        vocab: &Vocabulary,
        inventory: &SynFuncInventory,
    ) -> ModelSidecar {
        ModelSidecar {
            meta,
            topology,
            forms: vocab.forms().to_vec(),
            min_count: vocab.min_count,
            labels: inventory.labels().to_vec(),
            excluded: inventory.excluded().to_vec(),
            train: None,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_forms(self.forms.clone(), self.min_count)
    }

    pub fn inventory(&self) -> SynFuncInventory {
        SynFuncInventory::from_labels(self.labels.clone(), self.excluded.clone())
    }

    /// Sidecar lives next to the model with ".json" appended.
    pub fn path_for(model_path: &Path) -> PathBuf {
        let mut os = model_path.as_os_str().to_owned();
        os.push(".json");
        PathBuf::from(os)
    }

    pub fn save(&self, model_path: &Path) -> Result<(), ModelError> {
        let file = BufWriter::new(File::create(Self::path_for(model_path))?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(model_path: &Path) -> Result<ModelSidecar, ModelError> {
        let file = BufReader::new(File::open(Self::path_for(model_path))?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn small_meta() -> ModelMeta {
        ModelMeta::new(4, 5, 3, 11)
    }

    #[test]
    fn init_random_is_stochastic_and_valid() {
        let params = init_random(small_meta());
        assert!(validate(&params).is_ok());
        for l in 0..3 {
            for j in 0..4 {
                let sum: f64 = params.trans.col(j, l).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            let sum: f64 = params.root.col(0, l).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn init_random_same_seed_is_bit_identical() {
        let a = init_random(small_meta());
        let b = init_random(small_meta());
        assert_eq!(a.trans.data(), b.trans.data());
        assert_eq!(a.emit.data(), b.emit.data());
        assert_eq!(a.root.data(), b.root.data());
        let c = init_random(ModelMeta::new(4, 5, 3, 12));
        assert_ne!(a.trans.data(), c.trans.data());
    }

    #[test]
    fn single_state_init_is_all_ones() {
        let params = init_random(ModelMeta::new(1, 3, 2, 5));
        assert!(params.trans.data().iter().all(|&x| x == 1.0));
        assert!(params.root.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn brown_factor_one_matches_random_init() {
        let meta = small_meta();
        let mut assign = HashMap::new();
        assign.insert(0usize, 0usize);
        assign.insert(2, 1);
        let clusters = BrownClusterMap {
            assign,
            num_clusters: 2,
        };
        let a = init_brown(meta, &clusters, 1.0).unwrap();
        let b = init_random(meta);
        assert_eq!(a.trans.data(), b.trans.data());
        assert_eq!(a.emit.data(), b.emit.data());
        assert_eq!(a.root.data(), b.root.data());
    }

    #[test]
    fn brown_boost_concentrates_emissions() {
        let mut assign = HashMap::new();
        assign.insert(0usize, 0usize);
        assign.insert(1, 1);
        let clusters = BrownClusterMap {
            assign,
            num_clusters: 2,
        };
        let mut mean = 0.0;
        for seed in 0..100 {
            let params =
                init_brown(ModelMeta::new(2, 2, 1, seed), &clusters, 10000.0).unwrap();
            mean += params.emit.at(0, 0, 0);
        }
        mean /= 100.0;
        assert!(mean > 0.99, "boosted mass averaged {mean}");
    }

    #[test]
    fn brown_rejects_more_clusters_than_states() {
        let mut assign = HashMap::new();
        for w in 0..3usize {
            assign.insert(w, w);
        }
        let clusters = BrownClusterMap {
            assign,
            num_clusters: 3,
        };
        let err = init_brown(ModelMeta::new(2, 5, 1, 0), &clusters, 10.0).unwrap_err();
        assert!(matches!(err, ModelError::ClusterCount { clusters: 3, n: 2 }));
    }

    #[test]
    fn liang_rows_map_to_dense_sorted_clusters() {
        let vocab = Vocabulary::from_forms(
            ["dog", "cat", "runs", "<unk>"].map(String::from).to_vec(),
            1,
        );
        let text = "111\truns\t5\n00\tdog\t9\n01\tcat\t7\n00\tdog\t1\n01\tghost\t2\n";
        let map = BrownClusterMap::read_liang(Cursor::new(text), 0, &vocab).unwrap();
        assert_eq!(map.num_clusters(), 3);
        assert_eq!(map.get(vocab.encode("dog")), Some(0));
        assert_eq!(map.get(vocab.encode("cat")), Some(1));
        assert_eq!(map.get(vocab.encode("runs")), Some(2));
        assert_eq!(map.len(), 3);
    }

    #[test]
    fn liang_prefix_truncation_merges_clusters() {
        let vocab = Vocabulary::from_forms(
            ["dog", "cat", "runs", "<unk>"].map(String::from).to_vec(),
            1,
        );
        let text = "110\truns\t5\n000\tdog\t9\n001\tcat\t7\n";
        let map = BrownClusterMap::read_liang(Cursor::new(text), 2, &vocab).unwrap();
        assert_eq!(map.num_clusters(), 2);
        assert_eq!(map.get(vocab.encode("dog")), map.get(vocab.encode("cat")));
        assert_ne!(map.get(vocab.encode("dog")), map.get(vocab.encode("runs")));
    }

    #[test]
    fn liang_bad_row_is_an_error() {
        let vocab = Vocabulary::from_forms(["a", "<unk>"].map(String::from).to_vec(), 1);
        let err =
            BrownClusterMap::read_liang(Cursor::new("only-one-field\n"), 0, &vocab).unwrap_err();
        assert!(matches!(err, ModelError::ClusterFormat { line: 1 }));
    }

    #[test]
    fn validate_flags_scaled_column() {
        let mut params = init_random(small_meta());
        for x in params.trans.col_mut(2, 1) {
            *x *= 2.0;
        }
        let report = validate(&params);
        assert!(!report.is_ok());
        assert!((report.max_deviation - 1.0).abs() < 1e-9);
        let v = &report.violations[0];
        assert_eq!((v.tensor, v.col, v.func), ("trans", 2, 1));
    }

    #[test]
    fn validate_flags_degenerate_meta() {
        let params = ModelParams::zeros(ModelMeta::new(0, 2, 1, 0));
        let report = validate(&params);
        assert!(!report.is_ok());
        assert_eq!(report.violations[0].tensor, "meta");
    }

    #[test]
    fn validate_reports_at_most_ten_but_counts_all() {
        let mut params = init_random(ModelMeta::new(8, 5, 3, 1));
        // Nudge every transition column's sum without leaving [0,1].
        for x in params.trans.data_mut() {
            *x = x.min(0.999) + 1e-6;
        }
        let report = validate(&params);
        assert_eq!(report.violations.len(), 10);
        assert_eq!(report.total_violations, 24);
    }

    #[test]
    fn uniform_entropy_is_log2_n() {
        let params = ModelParams::uniform(ModelMeta::new(128, 4, 2, 0));
        assert!((transition_entropy(&params) - 7.0).abs() < 1e-9);
        let one_hot = {
            let mut p = ModelParams::zeros(ModelMeta::new(3, 2, 1, 0));
            for j in 0..3 {
                *p.trans.at_mut(j, j, 0) = 1.0;
            }
            *p.root.at_mut(1, 0, 0) = 1.0;
            for w in 0..2 {
                *p.emit.at_mut(w, w, 0) = 1.0;
            }
            *p.emit.at_mut(0, 2, 0) = 1.0;
            p
        };
        assert_eq!(transition_entropy(&one_hot), 0.0);
    }

    #[test]
    fn entropy_invariant_under_state_permutation() {
        let params = init_random(small_meta());
        let perm = [2usize, 0, 3, 1];
        let mut permuted = params.clone();
        for l in 0..4usize.min(params.meta.s) {
            for j in 0..4 {
                for i in 0..4 {
                    *permuted.trans.at_mut(i, j, l) =
                        params.trans.at(perm[i], perm[j], l);
                }
            }
            for i in 0..4 {
                *permuted.root.at_mut(i, 0, l) = params.root.at(perm[i], 0, l);
            }
        }
        let d = (transition_entropy(&params) - transition_entropy(&permuted)).abs();
        assert!(d < 1e-12);
    }

    #[test]
    fn flat_entropy_of_uniform_params_pools_all_entries() {
        let meta = ModelMeta::new(4, 3, 2, 0);
        let params = ModelParams::uniform(meta);
        let entries = (meta.n * meta.n * meta.s + meta.n * meta.s) as f64;
        assert!((transition_entropy_flat(&params) - entries.log2()).abs() < 1e-9);
    }

    #[test]
    fn param_count_matches_formulas() {
        assert_eq!(
            param_count(&ModelMeta::new(128, 27000, 4, 0)),
            (66_048, 13_824_000)
        );
        assert_eq!(param_count(&ModelMeta::new(1, 2, 1, 0)), (2, 2));
        let single = param_count(&ModelMeta::new(16, 100, 3, 0));
        let doubled = param_count(&ModelMeta::new(16, 100, 6, 0));
        assert_eq!((single.0 * 2, single.1 * 2), doubled);
    }

    #[test]
    fn model_file_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.thmm");
        let params = init_random(small_meta());
        write_model(&params, &path).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back.meta, params.meta);
        assert_eq!(back.trans.data(), params.trans.data());
        assert_eq!(back.emit.data(), params.emit.data());
        assert_eq!(back.root.data(), params.root.data());
    }

    #[test]
    fn model_reader_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.thmm");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_model(&path).unwrap_err(),
            ModelError::BadMagic { .. }
        ));

        let good = dir.path().join("short.thmm");
        let params = init_random(small_meta());
        write_model(&params, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&good, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            read_model(&good).unwrap_err(),
            ModelError::Corrupt(_)
        ));
    }

    #[test]
    fn sidecar_round_trips_tables() {
        use crate::corpus::{RawSentence, RawToken};
        let sentences = vec![RawSentence {
            id: 0,
            tokens: ["the", "dog", "barks"]
                .iter()
                .enumerate()
                .map(|(i, f)| RawToken {
                    form: f.to_string(),
                    head: if i == 2 { None } else { Some(2) },
                    deprel: if i == 0 { "det" } else { "dep" }.to_string(),
                })
                .collect(),
        }];
        let vocab = Vocabulary::build(&sentences, 1);
        let inv = SynFuncInventory::build(&sentences, 5, &["det".to_string()]);
        let meta = ModelMeta::new(2, vocab.len(), inv.len(), 9);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.thmm");
        let sidecar = ModelSidecar::new(meta, Topology::Tree, &vocab, &inv);
        sidecar.save(&path).unwrap();
        assert!(path.with_file_name("m.thmm.json").exists());

        let back = ModelSidecar::load(&path).unwrap();
        let vocab2 = back.vocabulary();
        let inv2 = back.inventory();
        assert_eq!(vocab2.forms(), vocab.forms());
        assert_eq!(vocab2.encode("dog"), vocab.encode("dog"));
        assert_eq!(vocab2.encode("never-seen"), vocab2.oov_id());
        assert_eq!(inv2.labels(), inv.labels());
        assert_eq!(inv2.encode("det"), inv2.other_id());
        assert_eq!(back.topology, Topology::Tree);
    }
}
