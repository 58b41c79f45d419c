//! File formats: JSONL pretraining sets, binary checkpoints with JSON
//! sidecars, and guarded output paths.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use icreg_core::datagen::{Prompt, PretrainSet, RegressionTask, Sequence};
use icreg_core::linalg::Matrix;
use icreg_core::transformer::{ArchSpec, BlockParams, TransformerParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ICRGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Creates `dir` and resolves output names inside it, refusing to clobber
/// existing files unless `force` is set.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
    pub force: bool,
}

impl OutputDir {
    pub fn new(dir: impl Into<PathBuf>, force: bool) -> CliResult<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        Ok(Self { dir, force })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path for a new file; errors if it exists and overwriting is off.
    pub fn fresh(&self, name: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        if path.exists() && !self.force {
            return Err(CliError::Exists { path });
        }
        Ok(path)
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(format!("opening {}", path.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path.display().to_string(), e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    serde_json::from_reader(open(path)?).map_err(|e| CliError::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// One line of a pretraining-set file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub seed: u64,
    pub index: usize,
    pub task: RegressionTask,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub query: Vec<f64>,
    pub query_response: f64,
    pub truth_at_query: Option<f64>,
}

pub fn write_pretrain_set(path: &Path, set: &PretrainSet) -> CliResult<()> {
    let mut w = create(path)?;
    for (index, s) in set.sequences.iter().enumerate() {
        let rec = SequenceRecord {
            seed: set.seed,
            index,
            task: s.task.clone(),
            xs: s.prompt.xs.clone(),
            ys: s.prompt.ys.clone(),
            query: s.prompt.query.clone(),
            query_response: s.prompt.query_response,
            truth_at_query: s.prompt.truth_at_query,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| CliError::io(path.display().to_string(), e.into()))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn read_pretrain_set(path: &Path) -> CliResult<PretrainSet> {
    let mut sequences = Vec::new();
    let mut seed = None;
    for (lineno, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Format { path: path.to_path_buf(), reason: format!("line {}: {e}", lineno + 1) })?;
        seed.get_or_insert(rec.seed);
        let prompt = Prompt {
            xs: rec.xs,
            ys: rec.ys,
            query: rec.query,
            query_response: rec.query_response,
            truth_at_query: rec.truth_at_query,
        };
        prompt.validate()?;
        sequences.push(Sequence { task: rec.task, prompt });
    }
    if sequences.is_empty() {
        return Err(CliError::Format { path: path.to_path_buf(), reason: "no sequences".into() });
    }
    Ok(PretrainSet { seed: seed.unwrap_or(0), sequences })
}

/// Metadata written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format: String,
    pub version: u32,
    pub arch: ArchSpec,
    pub param_count: usize,
    pub provenance: serde_json::Value,
}

/// Layout: magic, `u32` version, `u64` embedding dim, FFN width, depth and
/// input dim, `f64` parameter bound and clamp, then every block's tensors
/// row-major in (Q, K, V, W1, W2, b1, b2) order. Little endian throughout.
pub fn encode_checkpoint(params: &TransformerParams) -> Vec<u8> {
    let a = &params.arch;
    let mut out = Vec::with_capacity(64 + 8 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [a.embed_dim, a.ffn_width, a.depth, a.input_dim] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&a.param_bound.to_le_bytes());
    out.extend_from_slice(&a.clamp.to_le_bytes());
    for b in &params.blocks {
        for t in b.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let chunk = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        chunk.try_into().ok()
    }

    fn u64(&mut self) -> Option<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TransformerParams, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take::<8>().as_ref() != Some(CHECKPOINT_MAGIC) {
        return Err("bad magic".into());
    }
    let version = c.take::<4>().map(u32::from_le_bytes).ok_or("truncated header")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = usize::try_from(c.u64().ok_or("truncated header")?).map_err(|e| e.to_string())?;
    }
    let [embed_dim, ffn_width, depth, input_dim] = dims;
    let param_bound = c.f64().ok_or("truncated header")?;
    let clamp = c.f64().ok_or("truncated header")?;
    let arch = ArchSpec { embed_dim, ffn_width, depth, param_bound, input_dim, clamp };
    arch.validate().map_err(|e| e.to_string())?;
    let per_block = 3 * embed_dim * embed_dim + 2 * embed_dim * ffn_width + ffn_width + embed_dim;
    let expected = c.pos + 8 * per_block * depth;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let mut read = |rows: usize, cols: usize| -> Vec<f64> { (0..rows * cols).map(|_| c.f64().unwrap_or(f64::NAN)).collect() };
    let mut blocks = Vec::with_capacity(depth);
    for _ in 0..depth {
        let q = Matrix::from_vec(embed_dim, embed_dim, read(embed_dim, embed_dim));
        let k = Matrix::from_vec(embed_dim, embed_dim, read(embed_dim, embed_dim));
        let v = Matrix::from_vec(embed_dim, embed_dim, read(embed_dim, embed_dim));
        let w1 = Matrix::from_vec(ffn_width, embed_dim, read(ffn_width, embed_dim));
        let w2 = Matrix::from_vec(embed_dim, ffn_width, read(embed_dim, ffn_width));
        let b1 = read(ffn_width, 1);
        let b2 = read(embed_dim, 1);
        blocks.push(BlockParams { q, k, v, w1, w2, b1, b2 });
    }
    let params = TransformerParams::new(arch, blocks).map_err(|e| e.to_string())?;
    if params.blocks.iter().any(|b| b.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite()))) {
        return Err("non-finite parameter".into());
    }
    Ok(params)
}

/// Writes `<stem>.ckpt` and `<stem>.json`.
pub fn write_checkpoint(out: &OutputDir, stem: &str, params: &TransformerParams, provenance: serde_json::Value) -> CliResult<PathBuf> {
    let bin = out.fresh(&format!("{stem}.ckpt"))?;
    let side = out.fresh(&format!("{stem}.json"))?;
    let mut w = create(&bin)?;
    w.write_all(&encode_checkpoint(params))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(bin.display().to_string(), e))?;
    let sidecar = CheckpointSidecar {
        format: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        version: CHECKPOINT_VERSION,
        arch: params.arch,
        param_count: params.param_count(),
        provenance,
    };
    write_json(&side, &sidecar)?;
    Ok(bin)
}

pub fn read_checkpoint(path: &Path) -> CliResult<TransformerParams> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| CliError::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes).map_err(|reason| CliError::Format { path: path.to_path_buf(), reason })
}
