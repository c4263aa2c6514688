//! Checkpoint container: a small versioned binary holding the run config,
//! the tokenizer vocabulary, and named parameter arrays.
//!
//! Layout, all integers little-endian:
//!
//!   magic        b"RTDL"
//!   version      u32
//!   kind         u8 (0 full bundle, 1 discriminator export)
//!   header_len   u32, then that many bytes of UTF-8 key=value lines
//!                (the train config plus a step=N line)
//!   vocab_len    u32, then that many bytes of piece-per-line UTF-8
//!   n_records    u32
//!   per record:  name_len u16 + name bytes, dtype u8 (0 f32, 1 f64),
//!                rank u8, dims as u32 each, then numel * width payload
//!                bytes in row-major order
//!
//! Reads fail loudly: a file that ends early names the record it was in the
//! middle of.

use std::path::Path;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{BodyParams, RtdHead};
use crate::error::{Error, Result};
use crate::real::{Dtype, Real};
use crate::rng::StreamSeeds;
use crate::text::Vocab;

use super::model::ModelBundle;
use super::{SharingMode, TrainConfig};

const MAGIC: &[u8; 4] = b"RTDL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Bundle,
    DiscriminatorExport,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Bundle => 0,
            CheckpointKind::DiscriminatorExport => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(CheckpointKind::Bundle),
            1 => Ok(CheckpointKind::DiscriminatorExport),
            _ => Err(Error::Checkpoint(format!("unknown kind tag {tag}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    payload: Vec<u8>,
}

impl ParamRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes the payload. The stored dtype must match `F` exactly; silent
    /// widening would break bitwise round-trip guarantees.
    pub fn values<F: Real>(&self) -> Result<Vec<F>> {
        if self.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "record {} holds {} but the reader wants {}",
                self.name,
                self.dtype.name(),
                F::DTYPE.name()
            )));
        }
        let w = self.dtype.width();
        Ok(self.payload.chunks_exact(w).map(F::read_le).collect())
    }
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub kind: CheckpointKind,
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub records: Vec<ParamRecord>,
}

impl LoadedCheckpoint {
    pub fn record(&self, name: &str) -> Result<&ParamRecord> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    pub fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        let rec = self.record(name)?;
        Tensor::param(rec.values()?, &rec.shape)
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    kind: CheckpointKind,
    step: u64,
    config: &TrainConfig,
    vocab: &Vocab,
    params: &[(String, Tensor<F>)],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    out.push(kind.tag());

    let mut header = String::new();
    header.push_str(&format!("step={step}\n"));
    for (k, v) in config.to_kv() {
        header.push_str(&format!("{k}={v}\n"));
    }
    push_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());

    let vocab_text = vocab.to_text();
    push_u32(&mut out, vocab_text.len() as u32);
    out.extend_from_slice(vocab_text.as_bytes());

    push_u32(&mut out, params.len() as u32);
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(F::DTYPE.tag());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            push_u32(&mut out, d as u32);
        }
        for &x in tensor.values().iter() {
            x.write_le(&mut out);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let kind = CheckpointKind::from_tag(r.u8("kind")?)?;

    let header_len = r.u32("header length")? as usize;
    let header = r.utf8(header_len, "header")?.to_string();
    let mut step = None;
    let mut kv = Vec::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        if k == "step" {
            step = Some(
                v.parse::<u64>()
                    .map_err(|_| Error::Checkpoint(format!("bad step value {v:?}")))?,
            );
        } else {
            kv.push((k.to_string(), v.to_string()));
        }
    }
    let step = step.ok_or_else(|| Error::Checkpoint("header is missing step".into()))?;
    let config = TrainConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;

    let vocab_len = r.u32("vocab length")? as usize;
    let vocab = Vocab::from_text(r.utf8(vocab_len, "vocab")?)?;

    let n_records = r.u32("record count")?;
    let mut records = Vec::with_capacity(n_records as usize);
    for i in 0..n_records {
        let anon = format!("record {i}");
        let name_len = r.u16(&format!("{anon} name length"))? as usize;
        let name = r.utf8(name_len, &format!("{anon} name"))?.to_string();
        let dtype = Dtype::from_tag(r.u8(&format!("record {name} dtype"))?)
            .ok_or_else(|| Error::Checkpoint(format!("record {name} has an unknown dtype tag")))?;
        let rank = r.u8(&format!("record {name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("record {name} dims"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * dtype.width(), &format!("record {name} payload"))?.to_vec();
        records.push(ParamRecord { name, dtype, shape, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(LoadedCheckpoint { kind, version, step, config, vocab, records })
}

/// Copies checkpoint records into live tensors, matching by name and shape.
pub fn fill_params<F: Real>(params: &[(String, Tensor<F>)], ck: &LoadedCheckpoint) -> Result<()> {
    for (name, tensor) in params {
        let rec = ck.record(name)?;
        if rec.shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "record {name} has shape {:?}, expected {:?}",
                rec.shape,
                tensor.shape()
            )));
        }
        tensor.set_values(&rec.values()?);
    }
    Ok(())
}

/// Rebuilds a full training bundle from a kind-0 checkpoint.
pub fn bundle_from_checkpoint<F: Real>(ck: &LoadedCheckpoint) -> Result<ModelBundle<F>> {
    if ck.kind != CheckpointKind::Bundle {
        return Err(Error::Checkpoint("not a full-bundle checkpoint".into()));
    }
    let bundle = ModelBundle::init(&ck.config, ck.vocab.clone(), &StreamSeeds::new(ck.config.seed));
    let params = bundle.named_params();
    if params.len() != ck.records.len() {
        return Err(Error::Checkpoint(format!(
            "{} records for {} parameters",
            ck.records.len(),
            params.len()
        )));
    }
    fill_params(&params, ck)?;
    Ok(bundle)
}

/// The discriminator as a downstream consumer sees it: the embedding table
/// (post fold-in for gdes exports), the encoder body, and the RTD head.
pub struct DiscriminatorView<F: Real> {
    pub table: Tensor<F>,
    pub body: BodyParams<F>,
    pub rtd: RtdHead<F>,
}

impl<F: Real> DiscriminatorView<F> {
    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = vec![("e_d".to_string(), self.table.clone())];
        self.body.named_params("disc", &mut out);
        self.rtd.named_params("rtd", &mut out);
        out
    }

    /// Hidden states (B, S, H) for a padded batch.
    pub fn encode<R: rand::Rng>(
        &self,
        tape: &Tape<F>,
        cfg: &crate::encoder::EncoderConfig,
        padded: &crate::text::PaddedBatch,
        rng: &mut R,
    ) -> Result<Tensor<F>> {
        let (b, s) = (padded.b, padded.s);
        let bias = crate::encoder::attention_mask_bias(&padded.real, b, s);
        let x = crate::encoder::embed_with_positions(tape, &self.table, &self.body, &padded.ids, b, s)?;
        crate::encoder::encoder_forward(tape, &x, &self.body.encoder, cfg, Some(&bias), rng)
    }

    /// Replaced-token logits (B, S) for a padded batch.
    pub fn rtd_logits<R: rand::Rng>(
        &self,
        tape: &Tape<F>,
        cfg: &crate::encoder::EncoderConfig,
        padded: &crate::text::PaddedBatch,
        rng: &mut R,
    ) -> Result<Tensor<F>> {
        let h = self.encode(tape, cfg, padded, rng)?;
        self.rtd.forward(tape, &h)
    }
}

/// Extracts the discriminator from either checkpoint kind. For a full bundle
/// this materializes the mode's embedding view (gdes: e_g + e_delta summed
/// elementwise in `F` arithmetic).
pub fn discriminator_view<F: Real>(ck: &LoadedCheckpoint) -> Result<DiscriminatorView<F>> {
    let cfg = &ck.config;
    let seeds = StreamSeeds::new(0);
    let body = BodyParams::init(&cfg.disc, cfg.max_seq_len, &seeds, "disc");
    let rtd = RtdHead::init(cfg.disc.hidden, &seeds, "rtd");
    let table = match ck.kind {
        CheckpointKind::DiscriminatorExport => ck.tensor::<F>("e_d")?,
        CheckpointKind::Bundle => match cfg.mode {
            SharingMode::Es => ck.tensor::<F>("e_g")?,
            SharingMode::Nes => ck.tensor::<F>("e_d")?,
            SharingMode::Gdes => {
                let e_g = ck.record("e_g")?.values::<F>()?;
                let delta = ck.record("e_delta")?.values::<F>()?;
                let summed: Vec<F> = e_g.iter().zip(&delta).map(|(&a, &b)| a + b).collect();
                Tensor::param(summed, &ck.record("e_g")?.shape)?
            }
        },
    };
    let view = DiscriminatorView { table, body, rtd };
    let mut wanted = Vec::new();
    view.body.named_params("disc", &mut wanted);
    view.rtd.named_params("rtd", &mut wanted);
    fill_params(&wanted, ck)?;
    Ok(view)
}
