//! Checkpoints and metrics logs.
//!
//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"PBCKPT\0\n"
//! 8       4     u32 format version
//! 12      8     u64 payload length L
//! 20      32    SHA-256 of the payload
//! 52      L     payload
//! ```
//!
//! The payload is a u64 header length H, H bytes of JSON header, then every
//! tensor listed in the header's `tensors` table, in order, as raw f64 values.
//! The checkpoint id is the lowercase hex digest.
//!
//! A run directory holds `metrics.jsonl` (one [`MetricsRecord`] per line),
//! `checkpoints/<id>.ckpt`, and whatever reports the caller writes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::Activation;
use crate::dendrites::DendriteBank;
use crate::error::{Error, Result};
use crate::grad::ParamSlot;
use crate::network::{Network, NetworkSpec};
use crate::optim::{Optimizer, OptimizerConfig, SlotState};
use crate::orchestrator::{CycleKind, CycleRecord, EpochEvent, ExperimentSink};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PBCKPT\0\n";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8 + 32;

/// Every random stream is derived from the base seed and the cycle,
/// epoch and batch counters, so this pair is the full generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub base_seed: u64,
    pub next_cycle: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScores {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cycle_index: usize,
    pub kind: CycleKind,
    pub rng: RngState,
    pub scores: CheckpointScores,
    pub network: Network,
    pub optimizer: Option<Optimizer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    cycle_index: usize,
    kind: CycleKind,
    rng: RngState,
    scores: CheckpointScores,
    spec: NetworkSpec,
    layers: Vec<LayerHeader>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    layer: usize,
    dendrites: Vec<BankHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    activation: Activation,
    birth_cycle: usize,
    frozen: bool,
    bias: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: OptimizerConfig,
    steps: u64,
    slots: Vec<ParamSlot>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Encodes the checkpoint. Equal states give equal bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &[usize], &[f64])> = Vec::new();
        let mut layers = Vec::new();
        for l in self.network.host_layers() {
            let h = self.network.host(l).expect("host layer");
            tensors.push((format!("layer{l}.weight"), h.weight().shape(), h.weight().data()));
            if let Some(b) = h.bias() {
                tensors.push((format!("layer{l}.bias"), b.shape(), b.data()));
            }
            let mut banks = Vec::new();
            for (g, bank) in h.dendrites().iter().enumerate() {
                tensors.push((format!("layer{l}.dendrite{g}.input"), bank.input_weights().shape(), bank.input_weights().data()));
                tensors.push((
                    format!("layer{l}.dendrite{g}.sibling"),
                    bank.sibling_weights().shape(),
                    bank.sibling_weights().data(),
                ));
                if let Some(b) = bank.bias() {
                    tensors.push((format!("layer{l}.dendrite{g}.bias"), b.shape(), b.data()));
                }
                tensors.push((
                    format!("layer{l}.dendrite{g}.output"),
                    bank.output_weights().shape(),
                    bank.output_weights().data(),
                ));
                banks.push(BankHeader {
                    activation: bank.activation(),
                    birth_cycle: bank.birth_cycle(),
                    frozen: bank.is_frozen(),
                    bias: bank.bias().is_some(),
                });
            }
            layers.push(LayerHeader { layer: l, dendrites: banks });
        }
        let opt_state = self.optimizer.as_ref().map(|o| o.state_sorted());
        let mut lens = Vec::new();
        if let Some(state) = &opt_state {
            for (slot, s) in state {
                lens.push((format!("opt.{}.m", slot_name(*slot)), [s.m.len()], s.m.as_slice()));
                lens.push((format!("opt.{}.v", slot_name(*slot)), [s.v.len()], s.v.as_slice()));
            }
        }
        for (name, len, data) in &lens {
            tensors.push((name.clone(), len.as_slice(), data));
        }
        let header = Header {
            cycle_index: self.cycle_index,
            kind: self.kind,
            rng: self.rng,
            scores: self.scores,
            spec: self.network.spec().clone(),
            layers,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config().clone(),
                steps: o.steps(),
                slots: opt_state.as_ref().unwrap().iter().map(|(s, _)| *s).collect(),
            }),
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorEntry {
                    name: n.clone(),
                    shape: s.to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let body: usize = tensors.iter().map(|(_, _, d)| d.len() * 8).sum();
        let mut payload = Vec::with_capacity(8 + json.len() + body);
        payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
        payload.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in *data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(PREFIX_LEN + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Content id of the encoded checkpoint.
    pub fn id(&self) -> Result<String> {
        Ok(hex::encode(&self.to_bytes()?[20..PREFIX_LEN]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(Error::Truncated("checkpoint header".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: "checkpoint".into(),
                expected: u32::from_le_bytes(CHECKPOINT_MAGIC[..4].try_into().unwrap()),
                found: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload = &bytes[PREFIX_LEN..];
        if payload.len() != len {
            return Err(Error::Truncated(format!("checkpoint payload: {} of {len} bytes", payload.len())));
        }
        let actual = Sha256::digest(payload);
        if actual.as_slice() != &bytes[20..PREFIX_LEN] {
            return Err(Error::DigestMismatch {
                expected: hex::encode(&bytes[20..PREFIX_LEN]),
                actual: hex::encode(actual),
            });
        }
        let hlen = u64::from_le_bytes(
            payload
                .get(..8)
                .ok_or_else(|| Error::Checkpoint("missing header length".into()))?
                .try_into()
                .unwrap(),
        ) as usize;
        let json = payload.get(8..8 + hlen).ok_or_else(|| Error::Checkpoint("header overruns payload".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut reader = TensorReader {
            data: &payload[8 + hlen..],
            entries: header.tensors.iter(),
        };

        let mut network = Network::new(header.spec.clone(), 0)?;
        if network.host_layers() != header.layers.iter().map(|l| l.layer).collect::<Vec<_>>() {
            return Err(Error::Checkpoint("layer table does not match the architecture".into()));
        }
        for lh in &header.layers {
            let l = lh.layer;
            let has_bias = network.host(l).unwrap().bias().is_some();
            let w = reader.next(&format!("layer{l}.weight"))?;
            let host = network.host_mut(l).unwrap();
            copy_into(host.weight_mut(), w)?;
            if has_bias {
                let b = reader.next(&format!("layer{l}.bias"))?;
                copy_into(host.bias_mut().unwrap(), b)?;
            }
            for (g, bh) in lh.dendrites.iter().enumerate() {
                let input = reader.next(&format!("layer{l}.dendrite{g}.input"))?;
                let sibling = reader.next(&format!("layer{l}.dendrite{g}.sibling"))?;
                let bias = if bh.bias {
                    Some(reader.next(&format!("layer{l}.dendrite{g}.bias"))?)
                } else {
                    None
                };
                let output = reader.next(&format!("layer{l}.dendrite{g}.output"))?;
                let bank = if bh.frozen {
                    DendriteBank::new(input, sibling, bias, output, bh.activation, bh.birth_cycle)?
                } else {
                    DendriteBank::new_trainable(input, sibling, bias, output, bh.activation, bh.birth_cycle)?
                };
                network.push_dendrite_bank(l, bank)?;
            }
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(oh) => {
                let mut state = Vec::with_capacity(oh.slots.len());
                for slot in oh.slots {
                    let m = reader.next(&format!("opt.{}.m", slot_name(slot)))?.into_data();
                    let v = reader.next(&format!("opt.{}.v", slot_name(slot)))?.into_data();
                    state.push((slot, SlotState { m, v }));
                }
                Some(Optimizer::restore(oh.config, oh.steps, state)?)
            }
        };
        if reader.entries.next().is_some() || !reader.data.is_empty() {
            return Err(Error::Checkpoint("trailing tensors in payload".into()));
        }
        Ok(Checkpoint {
            cycle_index: header.cycle_index,
            kind: header.kind,
            rng: header.rng,
            scores: header.scores,
            network,
            optimizer,
        })
    }
}

fn slot_name(s: ParamSlot) -> String {
    match s {
        ParamSlot::Weight { layer } => format!("layer{layer}.weight"),
        ParamSlot::Bias { layer } => format!("layer{layer}.bias"),
        ParamSlot::DendriteOutput { layer, dendrite } => format!("layer{layer}.dendrite{dendrite}.output"),
        ParamSlot::DendriteInput { layer, dendrite } => format!("layer{layer}.dendrite{dendrite}.input"),
        ParamSlot::DendriteSibling { layer, dendrite } => format!("layer{layer}.dendrite{dendrite}.sibling"),
        ParamSlot::DendriteBias { layer, dendrite } => format!("layer{layer}.dendrite{dendrite}.bias"),
    }
}

fn copy_into(dst: &mut Tensor, src: Tensor) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor shape {:?} does not match the architecture ({:?})",
            src.shape(),
            dst.shape()
        )));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

struct TensorReader<'a, I> {
    data: &'a [u8],
    entries: I,
}

impl<'a, I: Iterator<Item = &'a TensorEntry>> TensorReader<'a, I> {
    fn next(&mut self, name: &str) -> Result<Tensor> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
        if e.name != name {
            return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{}`", e.name)));
        }
        let n: usize = e.shape.iter().product();
        if self.data.len() < n * 8 {
            return Err(Error::Truncated(format!("tensor `{name}`")));
        }
        let (head, rest) = self.data.split_at(n * 8);
        self.data = rest;
        let values = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(e.shape.clone(), values)
    }
}

/// Writes `ckpt` under `dir` as `<id>.ckpt` and returns the id.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = ckpt.to_bytes()?;
    let id = hex::encode(&bytes[20..PREFIX_LEN]);
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{id}.ckpt"));
    let tmp = dir.join(format!(".{id}.tmp"));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, &path)?;
    Ok(id)
}

/// Loads a checkpoint by path, or by id from `dir`.
pub fn load_checkpoint(dir: &Path, id: &str) -> Result<Checkpoint> {
    let path = dir.join(format!("{id}.ckpt"));
    if !path.is_file() {
        return Err(Error::UnknownCheckpoint(id.to_string()));
    }
    read_checkpoint(&path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Finds `<id>.ckpt` in any `<root>/<experiment>/checkpoints/` directory.
pub fn find_checkpoint(root: &Path, id: &str) -> Result<PathBuf> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(Error::UnknownCheckpoint(id.to_string()));
    }
    let mut exps: Vec<_> = match fs::read_dir(root) {
        Ok(rd) => rd.filter_map(|e| e.ok()).map(|e| e.path()).collect(),
        Err(_) => return Err(Error::UnknownCheckpoint(id.to_string())),
    };
    exps.sort();
    exps.into_iter()
        .map(|p| p.join("checkpoints").join(format!("{id}.ckpt")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::UnknownCheckpoint(id.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub experiment_id: String,
    pub cycle_index: usize,
    pub kind: CycleKind,
    pub epoch: usize,
    pub train_score: f64,
    pub val_score: f64,
    pub test_score: Option<f64>,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<Vec<f64>>,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn from_event(experiment_id: &str, e: &EpochEvent) -> Self {
        MetricsRecord {
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            experiment_id: experiment_id.to_string(),
            cycle_index: e.cycle_index,
            kind: e.kind,
            epoch: e.scores.epoch,
            train_score: e.scores.train,
            val_score: e.scores.val,
            test_score: e.scores.test,
            loss: e.scores.loss,
            candidate_scores: e.candidate_scores.clone(),
            seconds: e.seconds,
        }
    }
}

/// Append-only JSON-lines writer. Each record is written with a single
/// `write_all` of a complete line and flushed.
pub struct MetricsWriter {
    file: File,
    last: Option<(usize, usize)>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter { file, last: None })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let key = (record.cycle_index, record.epoch);
        if self.last.is_some_and(|l| key <= l) {
            return Err(Error::Metrics(format!(
                "record (cycle {}, epoch {}) is not after the previous one",
                key.0, key.1
            )));
        }
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.last = Some(key);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Metrics(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Per-epoch curves as CSV, one row per record. Wall-clock fields are left
/// out so that seeded runs give identical text.
pub fn curves_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "cycle", "kind", "epoch", "train", "val", "test", "loss"])
        .map_err(|e| Error::Metrics(e.to_string()))?;
    for (i, r) in records.iter().enumerate() {
        let kind = match r.kind {
            CycleKind::Neuron => "neuron",
            CycleKind::Dendrite => "dendrite",
        };
        w.write_record([
            (i + 1).to_string(),
            r.cycle_index.to_string(),
            kind.to_string(),
            r.epoch.to_string(),
            format!("{:?}", r.train_score),
            format!("{:?}", r.val_score),
            r.test_score.map(|t| format!("{t:?}")).unwrap_or_default(),
            format!("{:?}", r.loss),
        ])
        .map_err(|e| Error::Metrics(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metrics(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Sink that logs every epoch to `metrics.jsonl` and checkpoints every
/// cycle's final model under `checkpoints/`.
pub struct RunRecorder {
    dir: PathBuf,
    experiment_id: String,
    seed: u64,
    metrics: MetricsWriter,
    checkpoints: Vec<String>,
}

impl RunRecorder {
    pub fn create(dir: &Path, experiment_id: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let metrics_path = dir.join("metrics.jsonl");
        if metrics_path.exists() {
            fs::remove_file(&metrics_path)?;
        }
        Ok(RunRecorder {
            dir: dir.to_path_buf(),
            experiment_id: experiment_id.to_string(),
            seed,
            metrics: MetricsWriter::open(&metrics_path)?,
            checkpoints: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    /// Ids written so far, in cycle order.
    pub fn checkpoints(&self) -> &[String] {
        &self.checkpoints
    }
}

impl ExperimentSink for RunRecorder {
    fn epoch(&mut self, event: &EpochEvent) -> Result<()> {
        self.metrics.append(&MetricsRecord::from_event(&self.experiment_id, event))
    }

    fn cycle_end(&mut self, net: &Network, optimizer: Option<&Optimizer>, record: &CycleRecord) -> Result<Option<String>> {
        let ckpt = Checkpoint {
            cycle_index: record.cycle_index,
            kind: record.kind,
            rng: RngState {
                base_seed: self.seed,
                next_cycle: record.cycle_index + 1,
            },
            scores: CheckpointScores {
                train: record.cycle_train_score,
                val: record.cycle_val_score,
                test: record.cycle_test_score,
            },
            network: net.clone(),
            optimizer: optimizer.cloned(),
        };
        let id = save_checkpoint(&self.checkpoint_dir(), &ckpt)?;
        self.checkpoints.push(id.clone());
        Ok(Some(id))
    }
}
