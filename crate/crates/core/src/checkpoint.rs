//! Binary checkpoint of a [`ModelState`].
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! magic "MACTR1\0\0" | version u32
//! config | schema digest u64 | num_fields u64
//! linear? | factors? | embeddings? | mlp? | memory
//! checksum u64   (FNV-1a-64 of every preceding byte)
//! ```
//!
//! Sparse sections are written in ascending key order, so equal states
//! always encode to equal bytes.

use std::fs;
use std::path::Path;

use crate::data::fnv1a64;
use crate::error::{CheckpointError, Result};
use crate::memory::{UserMemoryRecord, UserMemoryStore};
use crate::model::embedding::EmbeddingTable;
use crate::model::linear::LinearParameters;
use crate::model::mlp::{DenseLayer, MlpParameters};
use crate::model::{ModelKind, ModelParams};
use crate::numeric::{DenseMatrix, DenseVector};
use crate::train::{ModelState, TrainConfig};

pub const MAGIC: [u8; 8] = *b"MACTR1\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
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
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type Section = &'static str;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.malformed("vector", "length overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// A count or dimension, rejected if it could not fit in what is left.
    fn len(
        &mut self,
        section: Section,
        elem_bytes: usize,
    ) -> std::result::Result<usize, CheckpointError> {
        let at = self.pos;
        let v = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if elem_bytes > 0 && v > remaining / elem_bytes as u64 {
            return Err(CheckpointError::Malformed {
                section,
                offset: at,
                message: format!("length {v} exceeds the remaining {remaining} bytes"),
            });
        }
        Ok(v as usize)
    }

    fn malformed(&self, section: Section, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            section,
            offset: self.pos,
            message: message.into(),
        }
    }

    fn expect(
        &self,
        section: Section,
        what: &str,
        found: usize,
        expected: usize,
    ) -> std::result::Result<(), CheckpointError> {
        if found != expected {
            return Err(self.malformed(section, format!("{what} is {found}, expected {expected}")));
        }
        Ok(())
    }
}

fn write_config(w: &mut Writer, c: &TrainConfig) {
    w.u32(c.model_kind.code());
    w.len(c.embedding_dim);
    w.len(c.layer_dims.len());
    for &d in &c.layer_dims {
        w.len(d);
    }
    w.len(c.memory_dim);
    w.f64(c.alpha);
    w.len(c.batch_size);
    w.f64(c.learning_rate);
    w.f64(c.adagrad_epsilon);
    w.len(c.epochs);
    w.u64(c.seed);
    w.u64(c.num_buckets);
    w.u8(u8::from(c.loss1_to_memory_input));
}

fn read_config(r: &mut Reader) -> std::result::Result<TrainConfig, CheckpointError> {
    const S: Section = "config";
    let code = r.u32()?;
    let model_kind = ModelKind::from_code(code)
        .map_err(|_| r.malformed(S, format!("unknown model code {code}")))?;
    let embedding_dim = r.u64()? as usize;
    let n_layers = r.len(S, 8)?;
    let mut layer_dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layer_dims.push(r.u64()? as usize);
    }
    let config = TrainConfig {
        model_kind,
        embedding_dim,
        layer_dims,
        memory_dim: r.u64()? as usize,
        alpha: r.f64()?,
        batch_size: r.u64()? as usize,
        learning_rate: r.f64()?,
        adagrad_epsilon: r.f64()?,
        epochs: r.u64()? as usize,
        seed: r.u64()?,
        num_buckets: r.u64()?,
        loss1_to_memory_input: match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(r.malformed(S, format!("flag byte {b}"))),
        },
    };
    config
        .validate()
        .map_err(|e| r.malformed(S, e.to_string()))?;
    Ok(config)
}

fn write_table(w: &mut Writer, t: &EmbeddingTable) {
    let keys = t.sorted_keys();
    w.len(keys.len());
    w.len(t.dim());
    let zeros = vec![0.0; t.dim()];
    for k in keys {
        w.u64(k);
        w.f64s(&t.get(k));
        w.f64s(t.accumulator(k).unwrap_or(&zeros));
    }
}

fn read_table(
    r: &mut Reader,
    section: Section,
    table: &mut EmbeddingTable,
) -> std::result::Result<(), CheckpointError> {
    let count = r.len(section, 8)?;
    let dim = r.u64()? as usize;
    r.expect(section, "vector dimension", dim, table.dim())?;
    let mut prev = None;
    for _ in 0..count {
        let key = r.u64()?;
        if prev.is_some_and(|p| p >= key) {
            return Err(r.malformed(section, format!("key {key} out of order")));
        }
        prev = Some(key);
        let values = r.f64s(dim)?;
        let acc = r.f64s(dim)?;
        table.insert_raw(key, values, acc);
    }
    Ok(())
}

fn write_linear(w: &mut Writer, p: &LinearParameters) {
    let keys = p.sorted_keys();
    w.len(keys.len());
    for k in keys {
        w.u64(k);
        w.f64(p.weight(k));
        w.f64(p.accumulator(k).unwrap_or(0.0));
    }
    w.f64(p.bias);
    w.f64(p.bias_acc);
}

fn read_linear(
    r: &mut Reader,
    p: &mut LinearParameters,
) -> std::result::Result<(), CheckpointError> {
    const S: Section = "linear";
    let count = r.len(S, 24)?;
    let mut prev = None;
    for _ in 0..count {
        let key = r.u64()?;
        if prev.is_some_and(|p| p >= key) {
            return Err(r.malformed(S, format!("key {key} out of order")));
        }
        prev = Some(key);
        let weight = r.f64()?;
        let acc = r.f64()?;
        p.insert_raw(key, weight, acc);
    }
    p.bias = r.f64()?;
    p.bias_acc = r.f64()?;
    Ok(())
}

fn write_mlp(w: &mut Writer, m: &MlpParameters) {
    w.len(m.layers.len());
    for layer in &m.layers {
        w.len(layer.w.rows());
        w.len(layer.w.cols());
        w.f64s(layer.w.values());
        w.f64s(&layer.b);
        w.f64s(&layer.acc_w);
        w.f64s(&layer.acc_b);
    }
    w.f64s(&m.out_w);
    w.f64(m.out_b);
    w.f64s(&m.acc_out_w);
    w.f64(m.acc_out_b);
}

fn read_mlp(
    r: &mut Reader,
    expected: &MlpParameters,
) -> std::result::Result<MlpParameters, CheckpointError> {
    const S: Section = "mlp";
    let n = r.len(S, 16)?;
    r.expect(S, "layer count", n, expected.layers.len())?;
    let mut layers = Vec::with_capacity(n);
    for want in &expected.layers {
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        r.expect(S, "layer rows", rows, want.w.rows())?;
        r.expect(S, "layer cols", cols, want.w.cols())?;
        let w = DenseMatrix::from_row_major(rows, cols, r.f64s(rows * cols)?)
            .map_err(|e| r.malformed(S, e.to_string()))?;
        let b = DenseVector::new(r.f64s(rows)?);
        let acc_w = r.f64s(rows * cols)?;
        let acc_b = r.f64s(rows)?;
        layers.push(DenseLayer { w, b, acc_w, acc_b });
    }
    let width = expected.output_dim();
    let out_w = DenseVector::new(r.f64s(width)?);
    let out_b = r.f64()?;
    let acc_out_w = r.f64s(width)?;
    let acc_out_b = r.f64()?;
    Ok(MlpParameters {
        layers,
        out_w,
        out_b,
        acc_out_w,
        acc_out_b,
    })
}

fn write_memory(w: &mut Writer, m: &UserMemoryStore) {
    let users = m.sorted_users();
    w.len(users.len());
    w.len(m.dim());
    for u in users {
        let rec = m.record(u).expect("listed user");
        w.u64(u);
        w.f64s(&rec.like);
        w.f64s(&rec.dislike);
        w.f64s(&rec.acc_like);
        w.f64s(&rec.acc_dislike);
    }
}

fn read_memory(
    r: &mut Reader,
    dim: usize,
) -> std::result::Result<UserMemoryStore, CheckpointError> {
    const S: Section = "memory";
    let count = r.len(S, 8)?;
    let found = r.u64()? as usize;
    r.expect(S, "memory dimension", found, dim)?;
    let mut store = UserMemoryStore::new(dim);
    let mut prev = None;
    for _ in 0..count {
        let user = r.u64()?;
        if prev.is_some_and(|p| p >= user) {
            return Err(r.malformed(S, format!("user {user} out of order")));
        }
        prev = Some(user);
        let record = UserMemoryRecord {
            like: r.f64s(dim)?,
            dislike: r.f64s(dim)?,
            acc_like: r.f64s(dim)?,
            acc_dislike: r.f64s(dim)?,
        };
        store
            .insert_record(user, record)
            .map_err(|e| r.malformed(S, e.to_string()))?;
    }
    Ok(store)
}

pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(&MAGIC);
    w.u32(FORMAT_VERSION);
    write_config(&mut w, &state.config);
    w.u64(state.schema_digest);
    w.len(state.num_fields);
    let p = &state.params;
    if let Some(linear) = &p.linear {
        write_linear(&mut w, linear);
    }
    if let Some(factors) = &p.factors {
        write_table(&mut w, factors);
    }
    if let Some(emb) = &p.embeddings {
        write_table(&mut w, emb);
    }
    if let Some(mlp) = &p.mlp {
        write_mlp(&mut w, mlp);
    }
    write_memory(&mut w, &state.memory);
    let sum = fnv1a64(&w.buf);
    w.u64(sum);
    w.buf
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ModelState, CheckpointError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(CheckpointError::Truncated {
            offset: r.pos,
            needed: 8,
            available: bytes.len() - r.pos,
        });
    }
    let covered = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[covered..].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..covered]);
    if stored != computed {
        return Err(CheckpointError::Checksum {
            covered,
            stored,
            computed,
        });
    }
    let mut r = Reader {
        buf: &bytes[..covered],
        pos: r.pos,
    };

    let config = read_config(&mut r)?;
    let schema_digest = r.u64()?;
    let num_fields = r.u64()? as usize;
    let mut params = ModelParams::init(config.model_kind, &config.shape(num_fields), config.seed)
        .map_err(|e| r.malformed("header", e.to_string()))?;
    if let Some(linear) = &mut params.linear {
        read_linear(&mut r, linear)?;
    }
    if let Some(factors) = &mut params.factors {
        read_table(&mut r, "factors", factors)?;
    }
    if let Some(emb) = &mut params.embeddings {
        read_table(&mut r, "embeddings", emb)?;
    }
    if let Some(mlp) = &mut params.mlp {
        *mlp = read_mlp(&mut r, mlp)?;
    }
    let memory = read_memory(&mut r, config.memory_dim)?;
    if r.pos != covered {
        return Err(r.malformed("trailer", format!("{} unread bytes", covered - r.pos)));
    }
    Ok(ModelState {
        config,
        schema_digest,
        num_fields,
        params,
        memory,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode(state)).map_err(CheckpointError::Io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(CheckpointError::Io)?;
    Ok(decode(&bytes)?)
}
