//! File formats and run plumbing: TSV matrices and tables, quantile
//! normalization, sha256-stamped run manifests, and versioned binary
//! checkpoints that capture a paused fit exactly (RNG stream position
//! included). All writes go through a temp-file-then-rename path so a killed
//! process never leaves a truncated output in place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::network::{CovariateLabels, EdgeRecord};
use crate::types::{
    ComponentClass, DataMatrix, FactorSide, Hyperparameters, LoadingSide, ModelError, ModelState,
    NoiseModel,
};
use crate::vem::{FitConfig, FitterSnapshot, IterationTrace};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("checkpoint version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: corrupted checkpoint: {message}")]
    Corrupted { path: PathBuf, message: String },
    #[error("{path}: digest mismatch: manifest records {expected}, file hashes to {found}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Writes `bytes` to `path` atomically: the content lands in a temp file in
/// the same directory, is flushed to disk, and is renamed over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path)
        .map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn digest_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

// ---------------------------------------------------------------------------
// matrix TSV: header row of sample ids, first column of gene ids

pub fn matrix_to_tsv(m: &DataMatrix) -> String {
    let (p, n) = m.values.shape();
    let mut out = String::new();
    out.push_str("gene_id");
    for s in &m.sample_ids {
        out.push('\t');
        out.push_str(s);
    }
    out.push('\n');
    for i in 0..p {
        out.push_str(&m.gene_ids[i]);
        for j in 0..n {
            out.push('\t');
            out.push_str(&format_value(m.values[(i, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &DataMatrix) -> Result<(), IoError> {
    write_atomic(path, matrix_to_tsv(m).as_bytes())
}

pub fn read_matrix(path: &Path) -> Result<DataMatrix, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_matrix(&text, path)
}

fn nonempty_lines<'a>(
    text: &'a str,
    path: &Path,
) -> Result<Vec<(usize, &'a str)>, IoError> {
    let mut lines: Vec<(usize, &str)> = text.lines().enumerate().collect();
    while matches!(lines.last(), Some((_, l)) if l.is_empty()) {
        lines.pop();
    }
    if let Some(&(lineno, _)) = lines.iter().find(|(_, l)| l.is_empty()) {
        return Err(parse_err(path, lineno + 1, "empty line"));
    }
    Ok(lines)
}

fn parse_matrix(text: &str, path: &Path) -> Result<DataMatrix, IoError> {
    let lines = nonempty_lines(text, path)?;
    let Some(&(_, header)) = lines.first() else {
        return Err(parse_err(path, 1, "empty file"));
    };
    // first header cell labels the id column and is not a sample id
    let sample_ids: Vec<String> = header.split('\t').skip(1).map(str::to_owned).collect();
    let n = sample_ids.len();
    if n == 0 {
        return Err(parse_err(path, 1, "header has no sample ids"));
    }
    let p = lines.len() - 1;
    let mut gene_ids = Vec::with_capacity(p);
    let mut values = DMatrix::zeros(p, n);
    for (i, &(lineno, line)) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let gene = fields[0];
        if gene.is_empty() {
            return Err(parse_err(path, lineno + 1, "missing gene id"));
        }
        if fields.len() != n + 1 {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("row {gene} has {} values, header has {n} sample ids", fields.len() - 1),
            ));
        }
        for (j, field) in fields[1..].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_err(
                    path,
                    lineno + 1,
                    format!("row {gene}, column {}: not a number: {field:?}", sample_ids[j]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!("row {gene}, column {}: non-finite value {v}", sample_ids[j]),
                ));
            }
            values[(i, j)] = v;
        }
        gene_ids.push(gene.to_owned());
    }
    Ok(DataMatrix::new(values, gene_ids, sample_ids)?)
}

// ---------------------------------------------------------------------------
// vector and table TSVs

/// Writes one named value per id: `id_header<TAB>name` header, then rows.
pub fn write_column(
    path: &Path,
    id_header: &str,
    name: &str,
    ids: &[String],
    values: &DVector<f64>,
) -> Result<(), IoError> {
    if ids.len() != values.len() {
        return Err(IoError::Invalid(format!(
            "{} ids but {} values for column {name}",
            ids.len(),
            values.len()
        )));
    }
    let mut out = format!("{id_header}\t{name}\n");
    for (id, v) in ids.iter().zip(values.iter()) {
        let _ = writeln!(out, "{id}\t{}", format_value(*v));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_column(path: &Path) -> Result<(Vec<String>, DVector<f64>), IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines = nonempty_lines(&text, path)?;
    if lines.is_empty() {
        return Err(parse_err(path, 1, "empty file"));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for &(lineno, line) in &lines[1..] {
        let (id, raw) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, lineno + 1, "expected two tab-separated fields"))?;
        let v: f64 = raw.parse().map_err(|_| {
            parse_err(path, lineno + 1, format!("row {id}: not a number: {raw:?}"))
        })?;
        ids.push(id.to_owned());
        values.push(v);
    }
    Ok((ids, DVector::from_vec(values)))
}

/// Covariate labels, one `sample_id<TAB>label` row per sample; a
/// `sample_id`-prefixed header row is permitted. Every sample in
/// `sample_ids` must be labeled, and every labeled id must be a known
/// sample.
pub fn read_labels(path: &Path, sample_ids: &[String]) -> Result<CovariateLabels, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines = nonempty_lines(&text, path)?;
    let mut by_id = std::collections::HashMap::new();
    for &(lineno, line) in &lines {
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, lineno + 1, "expected two tab-separated fields"))?;
        if lineno == 0 && id == "sample_id" {
            continue;
        }
        if !sample_ids.iter().any(|s| s == id) {
            return Err(parse_err(path, lineno + 1, format!("unknown sample id {id:?}")));
        }
        if by_id.insert(id.to_owned(), label.to_owned()).is_some() {
            return Err(parse_err(path, lineno + 1, format!("duplicate sample id {id:?}")));
        }
    }
    let labels = sample_ids
        .iter()
        .map(|s| {
            by_id
                .get(s)
                .cloned()
                .ok_or_else(|| IoError::Invalid(format!("sample id {s:?} has no label")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CovariateLabels::new(labels))
}

const EDGE_HEADER: &str = "gene_a\tgene_b\tpartial_correlation\tprobability\treplication";

/// Always writes the header, so an empty network is an empty-but-valid file.
pub fn write_edges(path: &Path, edges: &[EdgeRecord]) -> Result<(), IoError> {
    let mut out = String::from(EDGE_HEADER);
    out.push('\n');
    for e in edges {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.gene_a,
            e.gene_b,
            format_value(e.partial_correlation),
            format_value(e.probability),
            e.replication
        );
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_edges(path: &Path) -> Result<Vec<EdgeRecord>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines = nonempty_lines(&text, path)?;
    match lines.first() {
        Some(&(_, header)) if header == EDGE_HEADER => {}
        Some(&(_, header)) => {
            return Err(parse_err(path, 1, format!("unexpected header {header:?}")));
        }
        None => return Err(parse_err(path, 1, "empty file")),
    }
    let mut edges = Vec::with_capacity(lines.len() - 1);
    for &(lineno, line) in &lines[1..] {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let num = |idx: usize| -> Result<f64, IoError> {
            fields[idx].parse().map_err(|_| {
                parse_err(path, lineno + 1, format!("not a number: {:?}", fields[idx]))
            })
        };
        edges.push(EdgeRecord {
            gene_a: fields[0].to_owned(),
            gene_b: fields[1].to_owned(),
            partial_correlation: num(2)?,
            probability: num(3)?,
            replication: fields[4].parse().map_err(|_| {
                parse_err(path, lineno + 1, format!("not a count: {:?}", fields[4]))
            })?,
        });
    }
    Ok(edges)
}

// ---------------------------------------------------------------------------
// quantile normalization

/// Projects each gene (row) onto standard normal quantiles: rank r of n maps
/// to the normal quantile at (r - 0.5)/n, with tied entries sharing their
/// average rank. The half-offset plotting position keeps the extreme
/// quantiles finite. Constant rows carry no rank information and become all
/// zeros; their indices are returned so callers can warn.
pub fn quantile_normalize(m: &DataMatrix) -> Result<(DataMatrix, Vec<usize>), IoError> {
    let (p, n) = m.values.shape();
    if n < 2 {
        return Err(IoError::Invalid(format!(
            "quantile normalization needs at least 2 samples, found {n}"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out = DMatrix::zeros(p, n);
    let mut constant_rows = Vec::new();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..p {
        let row = m.values.row(i);
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        if row[order[0]] == row[order[n - 1]] {
            constant_rows.push(i);
            continue; // row stays zero
        }
        // walk runs of equal values; each run shares its average 1-based rank
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && row[order[end]] == row[order[start]] {
                end += 1;
            }
            let avg_rank = (start + end + 1) as f64 / 2.0;
            let q = normal.inverse_cdf((avg_rank - 0.5) / n as f64);
            for &j in &order[start..end] {
                out[(i, j)] = q;
            }
            start = end;
        }
    }
    let normalized = DataMatrix::new(out, m.gene_ids.clone(), m.sample_ids.clone())?;
    Ok((normalized, constant_rows))
}

// ---------------------------------------------------------------------------
// simulation ground truth

/// Sidecar for a simulated dataset: the generator settings plus which
/// components are sparse on each side and the implied biclusters. The true
/// loading and factor matrices travel as separate TSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub config: crate::sim::SimConfig,
    pub loading_sparse: Vec<bool>,
    pub factor_sparse: Vec<bool>,
    pub biclusters: Vec<crate::types::Bicluster>,
}

pub fn write_truth(path: &Path, truth: &TruthFile) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(truth)
        .map_err(|e| IoError::Json { path: path.to_path_buf(), message: e.to_string() })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_truth(path: &Path) -> Result<TruthFile, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| IoError::Json { path: path.to_path_buf(), message: e.to_string() })
}

// ---------------------------------------------------------------------------
// run manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestComponent {
    pub id: u32,
    pub class: ComponentClass,
    pub pve: f64,
}

/// Everything needed to reproduce a fit bit-exactly: the input digest pins
/// the data, seed/config/hyperparameters pin the computation. Timing fields
/// are informational and excluded from the run id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub hyperparameters: Hyperparameters,
    pub config: FitConfig,
    pub input_path: String,
    pub input_digest: String,
    pub components: Vec<ManifestComponent>,
    pub converged_at: Option<usize>,
    pub elapsed_seconds: f64,
}

impl RunManifest {
    /// Deterministic id over the reproducibility-relevant fields only.
    /// Results are invariant to the worker pool size, so `threads` is
    /// canonicalized away before hashing.
    pub fn derive_run_id(
        input_digest: &str,
        hyper: &Hyperparameters,
        config: &FitConfig,
    ) -> String {
        let canonical = FitConfig { threads: 1, ..*config };
        let key = format!(
            "{input_digest}\n{}\n{}",
            serde_json::to_string(hyper).expect("hyperparameters serialize"),
            serde_json::to_string(&canonical).expect("config serialize"),
        );
        sha256_hex(key.as_bytes())[..16].to_owned()
    }
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| IoError::Json { path: path.to_path_buf(), message: e.to_string() })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| IoError::Json { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_trace(path: &Path, trace: &[IterationTrace]) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(trace)
        .map_err(|e| IoError::Json { path: path.to_path_buf(), message: e.to_string() })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_trace(path: &Path) -> Result<Vec<IterationTrace>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| IoError::Json { path: path.to_path_buf(), message: e.to_string() })
}

// ---------------------------------------------------------------------------
// binary checkpoint
//
// Layout: 8-byte magic, u32 version, payload, trailing sha256 of everything
// before it. All integers little-endian; matrices are stored column-major.
// The digest is checked before any field is parsed, so a corrupted file is
// rejected up front rather than yielding a partially filled state.

const CHECKPOINT_MAGIC: &[u8; 8] = b"BICFACHK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A paused fit plus the inputs needed to resume it (data travels
/// separately and is pinned by the manifest digest).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: Hyperparameters,
    pub config: FitConfig,
    pub snapshot: FitterSnapshot,
}

struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.f64_slice(m.as_slice());
    }
}

struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> BinReader<'a> {
    fn corrupted(&self, message: impl Into<String>) -> IoError {
        IoError::Corrupted { path: self.path.to_path_buf(), message: message.into() }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| self.corrupted(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, IoError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.corrupted(format!("length {v} too large")))
    }
    fn i64(&mut self) -> Result<i64, IoError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, IoError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupted("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>, IoError> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.corrupted("matrix dimensions overflow"))?;
        Ok(DMatrix::from_column_slice(rows, cols, &self.f64_vec(n)?))
    }
    fn vector(&mut self, n: usize) -> Result<DVector<f64>, IoError> {
        Ok(DVector::from_vec(self.f64_vec(n)?))
    }
}

fn encode_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    let hyper = &cp.hyper;
    let config = &cp.config;
    let snap = &cp.snapshot;
    let state = &snap.state;
    let (p, k) = state.loading.lambda.shape();
    let n = state.factor.x_mean.ncols();

    let mut w = BinWriter::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);

    w.f64_slice(&[
        hyper.a, hyper.b, hyper.c, hyper.d, hyper.e, hyper.f, hyper.nu, hyper.a_x, hyper.b_x,
        hyper.c_x, hyper.d_x, hyper.e_x, hyper.f_x, hyper.xi, hyper.alpha, hyper.beta,
        hyper.alpha_x, hyper.beta_x,
    ]);
    w.usize(config.k_init);
    w.usize(config.max_iterations);
    w.usize(config.warm_start_sweeps);
    w.f64(config.prune_eps);
    w.f64(config.classification_threshold);
    w.f64(config.convergence_tol);
    w.u64(config.seed);
    w.usize(config.threads);

    w.usize(snap.iteration);
    w.i64(snap.converged_at.map_or(-1, |v| v as i64));
    w.u8(snap.prev_residual.is_some() as u8);
    w.f64(snap.prev_residual.unwrap_or(0.0));
    w.u64(snap.negative_numerator_floors);
    w.f64(snap.ln_pi.0);
    w.f64(snap.ln_pi.1);
    w.f64(snap.ln_pi_x.0);
    w.f64(snap.ln_pi_x.1);
    w.u128(snap.rng_word_pos);

    w.usize(p);
    w.usize(n);
    w.usize(k);
    w.matrix(&state.loading.lambda);
    w.matrix(&state.loading.theta);
    w.matrix(&state.loading.delta);
    w.f64_slice(state.loading.phi.as_slice());
    w.f64_slice(state.loading.tau.as_slice());
    w.f64(state.loading.eta);
    w.f64(state.loading.gamma);
    w.f64_slice(state.loading.z.as_slice());
    w.matrix(&state.factor.x_mean);
    for cov in &state.factor.x_cov {
        w.matrix(cov);
    }
    w.matrix(&state.factor.sigma);
    w.matrix(&state.factor.rho);
    w.f64_slice(state.factor.omega.as_slice());
    w.f64_slice(state.factor.kappa.as_slice());
    w.f64(state.factor.chi);
    w.f64(state.factor.varphi);
    w.f64_slice(state.factor.o.as_slice());
    w.f64_slice(state.noise.psi.as_slice());
    for id in &state.component_ids {
        w.u32(*id);
    }

    w.usize(snap.trace.len());
    for t in &snap.trace {
        w.usize(t.iteration);
        w.usize(t.active_components);
        w.f64(t.residual_norm);
        w.usize(t.component_ids.len());
        for id in &t.component_ids {
            w.u32(*id);
        }
        w.usize(t.gene_counts.len());
        for c in &t.gene_counts {
            w.usize(*c);
        }
        w.usize(t.sample_counts.len());
        for c in &t.sample_counts {
            w.usize(*c);
        }
    }

    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(cp))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, path)
}

fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, IoError> {
    let corrupted = |message: &str| IoError::Corrupted {
        path: path.to_path_buf(),
        message: message.into(),
    };
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        return Err(corrupted("file too short"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupted("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let (payload, stored) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != stored {
        return Err(corrupted("content digest mismatch"));
    }

    let mut r = BinReader { buf: payload, pos: 12, path };
    let h = r.f64_vec(18)?;
    let hyper = Hyperparameters {
        a: h[0],
        b: h[1],
        c: h[2],
        d: h[3],
        e: h[4],
        f: h[5],
        nu: h[6],
        a_x: h[7],
        b_x: h[8],
        c_x: h[9],
        d_x: h[10],
        e_x: h[11],
        f_x: h[12],
        xi: h[13],
        alpha: h[14],
        beta: h[15],
        alpha_x: h[16],
        beta_x: h[17],
    };
    let config = FitConfig {
        k_init: r.usize()?,
        max_iterations: r.usize()?,
        warm_start_sweeps: r.usize()?,
        prune_eps: r.f64()?,
        classification_threshold: r.f64()?,
        convergence_tol: r.f64()?,
        seed: r.u64()?,
        threads: r.usize()?,
    };

    let iteration = r.usize()?;
    let converged_at = match r.i64()? {
        -1 => None,
        v if v >= 0 => Some(v as usize),
        v => return Err(r.corrupted(format!("bad convergence marker {v}"))),
    };
    let has_prev = r.u8()?;
    let prev_value = r.f64()?;
    let prev_residual = match has_prev {
        0 => None,
        1 => Some(prev_value),
        v => return Err(r.corrupted(format!("bad residual flag {v}"))),
    };
    let negative_numerator_floors = r.u64()?;
    let ln_pi = (r.f64()?, r.f64()?);
    let ln_pi_x = (r.f64()?, r.f64()?);
    let rng_word_pos = r.u128()?;

    let p = r.usize()?;
    let n = r.usize()?;
    let k = r.usize()?;
    let lambda = r.matrix(p, k)?;
    let theta = r.matrix(p, k)?;
    let delta = r.matrix(p, k)?;
    let phi = r.vector(k)?;
    let tau = r.vector(k)?;
    let eta = r.f64()?;
    let gamma = r.f64()?;
    let z = r.vector(k)?;
    let x_mean = r.matrix(k, n)?;
    let x_cov = (0..n).map(|_| r.matrix(k, k)).collect::<Result<Vec<_>, _>>()?;
    let sigma = r.matrix(k, n)?;
    let rho = r.matrix(k, n)?;
    let omega = r.vector(k)?;
    let kappa = r.vector(k)?;
    let chi = r.f64()?;
    let varphi = r.f64()?;
    let o = r.vector(k)?;
    let psi = r.vector(p)?;
    let mut component_ids = Vec::with_capacity(k);
    for _ in 0..k {
        component_ids.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()));
    }

    let n_trace = r.usize()?;
    let mut trace = Vec::with_capacity(n_trace.min(1 << 20));
    for _ in 0..n_trace {
        let iteration = r.usize()?;
        let active_components = r.usize()?;
        let residual_norm = r.f64()?;
        let n_ids = r.usize()?;
        let mut ids = Vec::with_capacity(n_ids.min(1 << 20));
        for _ in 0..n_ids {
            ids.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        let n_genes = r.usize()?;
        let mut gene_counts = Vec::with_capacity(n_genes.min(1 << 20));
        for _ in 0..n_genes {
            gene_counts.push(r.usize()?);
        }
        let n_samples = r.usize()?;
        let mut sample_counts = Vec::with_capacity(n_samples.min(1 << 20));
        for _ in 0..n_samples {
            sample_counts.push(r.usize()?);
        }
        trace.push(IterationTrace {
            iteration,
            active_components,
            residual_norm,
            component_ids: ids,
            gene_counts,
            sample_counts,
        });
    }
    if r.pos != payload.len() {
        return Err(r.corrupted(format!("{} trailing bytes", payload.len() - r.pos)));
    }

    let state = ModelState {
        loading: LoadingSide { lambda, theta, delta, phi, tau, eta, gamma, z },
        factor: FactorSide { x_mean, x_cov, sigma, rho, omega, kappa, chi, varphi, o },
        noise: NoiseModel { psi },
        component_ids,
    };
    state.validate()?;

    Ok(Checkpoint {
        hyper,
        config,
        snapshot: FitterSnapshot {
            iteration,
            state,
            trace,
            ln_pi,
            ln_pi_x,
            negative_numerator_floors,
            converged_at,
            prev_residual,
            rng_word_pos,
        },
    })
}
