//! On-disk formats: dataset and oracle containers, network checkpoints and
//! the training history.
//!
//! Both binary containers are a 4-byte magic, a little-endian `u16` version,
//! the payload, and a SHA-256 digest of everything before it. Matrices are
//! stored as `(rows: u64, cols: u64)` followed by row-major `f64` values.
//! Every file is written to a temporary sibling, synced and renamed into place.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{LayerKind, LayerParams, NetConfig, NetParams, StepStrategy};
use crate::oracle::{OracleSolution, OracleStatus};
use crate::penalty::{PenaltyConfig, WeightRule};
use crate::problem::{Dataset, DatasetSpec, Family, InstanceData, Split};
use crate::train::TrainRecord;

pub const DATASET_MAGIC: &[u8; 4] = b"DKIT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNET";
pub const FORMAT_VERSION: u16 = 1;

const SECTION_DATASET: u8 = 1;
const SECTION_ORACLE: u8 = 2;
const DIGEST_LEN: usize = 32;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's full contents.
pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes `bytes` to `path` through a synced temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `path` with `.json` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Default)]
struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn new(magic: &[u8; 4]) -> Self {
        let mut e = Self::default();
        e.buf.extend_from_slice(magic);
        e.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        e
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
    fn vector(&mut self, v: &DVector<f64>) {
        self.usize(v.len());
        self.f64s(v.as_slice());
    }
    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    /// Verifies magic, version and digest; returns a decoder positioned after the version.
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 6 + DIGEST_LEN {
            return Err(Error::Format("file too short".into()));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(Self { buf: body, pos: 6 })
    }
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        let raw = self.take(k.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let (r, c) = (self.usize()?, self.usize()?);
        let vals = self.f64s(r.checked_mul(c).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(DMatrix::from_row_slice(r, c, &vals))
    }
    fn vector(&mut self) -> Result<DVector<f64>> {
        let k = self.usize()?;
        Ok(DVector::from_vec(self.f64s(k)?))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

fn expect_shape(what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Format(format!(
            "{what} is {}x{}, header says {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Human-readable mirror of a dataset header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub version: u16,
    pub spec: DatasetSpec,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub sha256: String,
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let s = &ds.spec;
    let mut e = Enc::new(DATASET_MAGIC);
    e.u8(SECTION_DATASET);
    e.u8(s.family.tag());
    e.u8(match s.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    for v in [s.n, s.n_eq, s.n_ineq, s.count] {
        e.usize(v);
    }
    e.u64(s.seed);
    e.f64(s.r_min_range.0);
    e.f64(s.r_min_range.1);
    e.matrix(&ds.q);
    e.vector(&ds.p);
    e.matrix(&ds.a);
    e.matrix(&ds.g);
    e.vector(&ds.h);
    match s.family {
        Family::Portfolio => {
            let mut mu = DMatrix::zeros(ds.len(), s.n);
            let mut r_min = DVector::zeros(ds.len());
            for (i, d) in ds.data.iter().enumerate() {
                if let InstanceData::Portfolio { mu: m, r_min: r } = d {
                    mu.set_row(i, &m.transpose());
                    r_min[i] = *r;
                }
            }
            e.matrix(&mu);
            e.vector(&r_min);
        }
        Family::Qp | Family::Nonconvex => {
            let mut x = DMatrix::zeros(ds.len(), s.n_eq);
            for (i, d) in ds.data.iter().enumerate() {
                if let InstanceData::Rhs(v) = d {
                    x.set_row(i, &v.transpose());
                }
            }
            e.matrix(&x);
        }
    }
    e.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut d = Dec::open(bytes, DATASET_MAGIC)?;
    if d.u8()? != SECTION_DATASET {
        return Err(Error::Format("not a dataset container".into()));
    }
    let family = Family::from_tag(d.u8()?).ok_or_else(|| Error::Format("unknown family tag".into()))?;
    let split = match d.u8()? {
        0 => Split::Train,
        1 => Split::Test,
        t => return Err(Error::Format(format!("unknown split tag {t}"))),
    };
    let (n, n_eq, n_ineq, count) = (d.usize()?, d.usize()?, d.usize()?, d.usize()?);
    let seed = d.u64()?;
    let r_min_range = (d.f64()?, d.f64()?);
    let spec = DatasetSpec { family, n, n_eq, n_ineq, count, seed, r_min_range, split };
    let (q, p, a, g, h) = (d.matrix()?, d.vector()?, d.matrix()?, d.matrix()?, d.vector()?);
    let data = match family {
        Family::Portfolio => {
            let mu = d.matrix()?;
            let r_min = d.vector()?;
            expect_shape("mu block", &mu, count, n)?;
            if r_min.len() != count {
                return Err(Error::Format("r_min block length differs from count".into()));
            }
            (0..count)
                .map(|i| InstanceData::Portfolio { mu: mu.row(i).transpose(), r_min: r_min[i] })
                .collect()
        }
        Family::Qp | Family::Nonconvex => {
            let x = d.matrix()?;
            expect_shape("x block", &x, count, n_eq)?;
            (0..count).map(|i| InstanceData::Rhs(x.row(i).transpose())).collect()
        }
    };
    d.done()?;
    Dataset::from_parts(spec, q, p, a, g, h, data).map_err(|e| match e {
        Error::Dimension { .. } | Error::RankDeficient { .. } | Error::Config(_) => {
            Error::Format(format!("inconsistent dataset: {e}"))
        }
        other => other,
    })
}

/// Writes the container and its JSON sidecar; returns the container checksum.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<String> {
    let bytes = encode_dataset(ds);
    let sha = sha256_hex(&bytes);
    let sidecar = DatasetSidecar {
        format: "DKIT".into(),
        version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        n_eq: ds.a.nrows(),
        n_ineq: ds.instance(0).map(|i| i.constraints.n_ineq()).unwrap_or(ds.spec.n_ineq),
        sha256: sha.clone(),
    };
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(sha)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Oracle solutions for one dataset, bound to it by the dataset checksum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub dataset_sha256: String,
    pub solutions: Vec<OracleSolution>,
}

pub fn encode_oracle(of: &OracleFile) -> Result<Vec<u8>> {
    let digest: Vec<u8> = (0..of.dataset_sha256.len() / 2)
        .map(|i| u8::from_str_radix(&of.dataset_sha256[2 * i..2 * i + 2], 16))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format("dataset checksum is not hex".into()))?;
    if digest.len() != DIGEST_LEN {
        return Err(Error::Format("dataset checksum has the wrong length".into()));
    }
    let mut e = Enc::new(DATASET_MAGIC);
    e.u8(SECTION_ORACLE);
    e.buf.extend_from_slice(&digest);
    e.usize(of.solutions.len());
    for s in &of.solutions {
        e.u8(match s.status {
            OracleStatus::Solved => 0,
            OracleStatus::Inaccurate => 1,
        });
        e.u8(u8::from(s.polished));
        e.usize(s.iterations);
        e.f64(s.prim_res);
        e.f64(s.dual_res);
        e.usize(s.y.len());
        e.f64s(&s.y);
    }
    Ok(e.finish())
}

pub fn decode_oracle(bytes: &[u8]) -> Result<OracleFile> {
    let mut d = Dec::open(bytes, DATASET_MAGIC)?;
    if d.u8()? != SECTION_ORACLE {
        return Err(Error::Format("not an oracle container".into()));
    }
    let dataset_sha256 = d.take(DIGEST_LEN)?.iter().map(|b| format!("{b:02x}")).collect();
    let count = d.usize()?;
    let mut solutions = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let status = match d.u8()? {
            0 => OracleStatus::Solved,
            1 => OracleStatus::Inaccurate,
            t => return Err(Error::Format(format!("unknown oracle status {t}"))),
        };
        let polished = d.u8()? != 0;
        let iterations = d.usize()?;
        let (prim_res, dual_res) = (d.f64()?, d.f64()?);
        let len = d.usize()?;
        let y = d.f64s(len)?;
        solutions.push(OracleSolution { y, status, iterations, prim_res, dual_res, polished });
    }
    d.done()?;
    Ok(OracleFile { dataset_sha256, solutions })
}

pub fn save_oracle(path: &Path, of: &OracleFile) -> Result<String> {
    let bytes = encode_oracle(of)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_oracle(path: &Path) -> Result<OracleFile> {
    decode_oracle(&fs::read(path)?)
}

/// Checkpoint metadata mirrored in the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of epochs already trained.
    pub epoch: usize,
    pub config: NetConfig,
    pub n: usize,
    pub l: usize,
    pub tensor_shapes: Vec<(String, usize, usize)>,
    pub sha256: String,
}

fn step_tag(s: StepStrategy) -> u8 {
    match s {
        StepStrategy::InvM => 0,
        StepStrategy::AlphaMax => 1,
        StepStrategy::SigmoidScaled => 2,
    }
}

pub fn encode_checkpoint(params: &NetParams, epoch: usize) -> Vec<u8> {
    let c = &params.config;
    let mut e = Enc::new(CHECKPOINT_MAGIC);
    for v in [c.stages, c.layers, c.hidden, params.n, params.l] {
        e.usize(v);
    }
    e.f64(c.penalty.m);
    e.f64(c.penalty.epsilon);
    e.f64(c.penalty.delta_g);
    match c.penalty.weight_rule {
        WeightRule::InverseSlack => {
            e.u8(0);
            e.f64(0.0);
        }
        WeightRule::Exponential { delta } => {
            e.u8(1);
            e.f64(delta);
        }
    }
    e.f64(c.alpha_cap);
    e.u8(step_tag(c.step));
    e.u8(match c.layer_kind {
        LayerKind::Learned => 0,
        LayerKind::Pgm => 1,
    });
    e.u8(u8::from(c.shared_layers));
    e.f64(c.gamma_init);
    e.usize(epoch);
    params.for_each_tensor(|t| e.f64s(t));
    e.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetParams, usize)> {
    let mut d = Dec::open(bytes, CHECKPOINT_MAGIC)?;
    let (stages, layers, hidden, n, l) = (d.usize()?, d.usize()?, d.usize()?, d.usize()?, d.usize()?);
    let (m, epsilon, delta_g) = (d.f64()?, d.f64()?, d.f64()?);
    let weight_rule = match (d.u8()?, d.f64()?) {
        (0, _) => WeightRule::InverseSlack,
        (1, delta) => WeightRule::Exponential { delta },
        (t, _) => return Err(Error::Format(format!("unknown weight rule {t}"))),
    };
    let alpha_cap = d.f64()?;
    let step = match d.u8()? {
        0 => StepStrategy::InvM,
        1 => StepStrategy::AlphaMax,
        2 => StepStrategy::SigmoidScaled,
        t => return Err(Error::Format(format!("unknown step strategy {t}"))),
    };
    let layer_kind = match d.u8()? {
        0 => LayerKind::Learned,
        1 => LayerKind::Pgm,
        t => return Err(Error::Format(format!("unknown layer kind {t}"))),
    };
    let shared_layers = d.u8()? != 0;
    let gamma_init = d.f64()?;
    let epoch = d.usize()?;
    let config = NetConfig {
        stages,
        layers,
        hidden,
        penalty: PenaltyConfig { m, epsilon, delta_g, weight_rule },
        alpha_cap,
        step,
        layer_kind,
        shared_layers,
        gamma_init,
    };
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let module = vec![LayerParams::zeros(n, hidden); layers];
    let mut params = NetParams {
        config,
        n,
        l,
        modules: vec![module; config.modules()],
        betas: vec![0.0; stages],
    };
    let mut res = Ok(());
    params.for_each_tensor_mut(|t| match d.f64s(t.len()) {
        Ok(v) => t.copy_from_slice(&v),
        Err(e) => {
            if res.is_ok() {
                res = Err(e)
            }
        }
    });
    res?;
    d.done()?;
    Ok((params, epoch))
}

pub fn checkpoint_meta(params: &NetParams, epoch: usize, sha256: String) -> CheckpointMeta {
    let mut tensor_shapes = Vec::new();
    for (s, module) in params.modules.iter().enumerate() {
        for (k, lp) in module.iter().enumerate() {
            tensor_shapes.push((format!("module{s}.layer{k}.W"), lp.w.nrows(), lp.w.ncols()));
            tensor_shapes.push((format!("module{s}.layer{k}.V"), lp.v.nrows(), lp.v.ncols()));
            tensor_shapes.push((format!("module{s}.layer{k}.b1"), lp.b1.len(), 1));
            tensor_shapes.push((format!("module{s}.layer{k}.b2"), lp.b2.len(), 1));
            tensor_shapes.push((format!("module{s}.layer{k}.gamma"), 1, 1));
        }
    }
    tensor_shapes.push(("beta".into(), params.betas.len(), 1));
    CheckpointMeta { epoch, config: params.config, n: params.n, l: params.l, tensor_shapes, sha256 }
}

pub fn save_checkpoint(path: &Path, params: &NetParams, epoch: usize) -> Result<String> {
    let bytes = encode_checkpoint(params, epoch);
    let sha = sha256_hex(&bytes);
    write_atomic(path, &bytes)?;
    let meta = checkpoint_meta(params, epoch, sha.clone());
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(sha)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetParams, usize)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Line-delimited JSON, one [`TrainRecord`] per line.
pub fn history_to_jsonl(records: &[TrainRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_history(path: &Path) -> Result<Vec<TrainRecord>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::generate_dataset;

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        for spec in [DatasetSpec::qp(8, 3, 4, 5, 2), DatasetSpec::portfolio(6, 4, 3).with_split(Split::Test)] {
            let ds = generate_dataset(&spec).unwrap();
            let bytes = encode_dataset(&ds);
            let back = decode_dataset(&bytes).unwrap();
            assert_eq!(back.spec, ds.spec);
            assert_eq!(back.data, ds.data);
            assert_eq!(encode_dataset(&back), bytes);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let ds = generate_dataset(&DatasetSpec::qp(4, 1, 2, 2, 0)).unwrap();
        let mut bytes = encode_dataset(&ds);
        bytes[40] ^= 1;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format(m)) if m.contains("checksum")));
        let bytes = encode_dataset(&ds);
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = NetConfig { stages: 3, layers: 2, hidden: 5, shared_layers: true, ..NetConfig::default() };
        let mut params = NetParams::init(cfg, 6, 4, 1).unwrap();
        params.betas = vec![0.5, -1.0, 2.0];
        let bytes = encode_checkpoint(&params, 7);
        let (back, epoch) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(epoch, 7);
        assert_eq!(back, params);
    }

    #[test]
    fn oracle_round_trip_and_binding() {
        let of = OracleFile {
            dataset_sha256: sha256_hex(b"x"),
            solutions: vec![OracleSolution {
                y: vec![1.0, -2.5],
                status: OracleStatus::Inaccurate,
                iterations: 12,
                prim_res: 1e-3,
                dual_res: 2e-4,
                polished: false,
            }],
        };
        let bytes = encode_oracle(&of).unwrap();
        assert_eq!(decode_oracle(&bytes).unwrap(), of);
        assert!(decode_dataset(&bytes).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/ds.dkit");
        let ds = generate_dataset(&DatasetSpec::qp(4, 1, 2, 2, 0)).unwrap();
        let sha = save_dataset(&path, &ds).unwrap();
        assert_eq!(file_checksum(&path).unwrap(), sha);
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2, "{names:?}");
        let side: DatasetSidecar = serde_json::from_slice(&fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side.sha256, sha);
    }
}
