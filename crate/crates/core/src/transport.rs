//! Message serialization and the simulated channel.
//!
//! Every exchange is one self-contained message with a fixed little-endian
//! layout. Strings are length-prefixed UTF-8 (`u16` length). A message is:
//!
//! ```text
//! magic "FOBD" | version u16 | round u32 | sender str | kind u8 | sample_count u64 | payload
//! ```
//!
//! `kind` 0 carries a full model:
//!
//! ```text
//! block_count u32
//!   block_id str | kind_count u16 | (kind str)* | tensor_count u16
//!     (name str | ndims u8 | (dim u32)* | values: 4 bytes/element)*
//! ```
//!
//! `kind` 1 carries quantized per-block deltas:
//!
//! ```text
//! block_count u32
//!   block_id str | tensor_count u16
//!     (name str | ndims u8 | (dim u32)* | lo f32 | step f32 | code_bits u8
//!      | element_count u32 | packed codes, byte-aligned per tensor)*
//! ```
//!
//! Decoding is strict: bad magic, unknown kinds, truncation, length
//! mismatches, dirty pad bits, and trailing garbage all fail with the byte
//! offset at which the problem was detected. Serialized bytes are the unit
//! of overhead accounting, so nothing travels outside this layout.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::{Block, BlockId, BlockedModel, LayerKind, ParameterTensor};
use crate::quant::{pack_codes, unpack_codes, QuantizedBlockDelta, QuantizedTensor, MAX_CODE_BITS};

pub const MAGIC: [u8; 4] = *b"FOBD";
pub const PROTOCOL_VERSION: u16 = 1;

/// Payload discriminant on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    FullModel = 0,
    BlockDeltas = 1,
}

/// What a message carries.
#[derive(Debug, Clone, PartialEq)]
pub enum MessagePayload {
    FullModel(BlockedModel),
    BlockDeltas(Vec<QuantizedBlockDelta>),
}

/// One protocol message. `sample_count` is the sender's local sample count
/// on uploads (aggregation weight) and zero on distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub round: u32,
    pub sender: String,
    pub sample_count: u64,
    pub payload: MessagePayload,
}

impl RoundMessage {
    /// A full-model message. The model is stamped with the message round so
    /// that what the receiver decodes is exactly what the sender holds.
    pub fn full_model(
        round: u32,
        sender: impl Into<String>,
        sample_count: u64,
        model: BlockedModel,
    ) -> Self {
        Self {
            round,
            sender: sender.into(),
            sample_count,
            payload: MessagePayload::FullModel(model.with_round(round)),
        }
    }

    pub fn block_deltas(
        round: u32,
        sender: impl Into<String>,
        sample_count: u64,
        deltas: Vec<QuantizedBlockDelta>,
    ) -> Self {
        Self {
            round,
            sender: sender.into(),
            sample_count,
            payload: MessagePayload::BlockDeltas(deltas),
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self.payload {
            MessagePayload::FullModel(_) => MessageKind::FullModel,
            MessagePayload::BlockDeltas(_) => MessageKind::BlockDeltas,
        }
    }
}

// ---------------------------------------------------------------------------
// Encoding

fn put_str(out: &mut Vec<u8>, s: &str) {
    debug_assert!(s.len() <= u16::MAX as usize, "string too long for wire format");
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor_header(out: &mut Vec<u8>, name: &str, shape: &[usize]) {
    put_str(out, name);
    debug_assert!(shape.len() <= u8::MAX as usize);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

/// Serialize a message to its exact wire bytes.
pub fn serialize(msg: &RoundMessage) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&msg.round.to_le_bytes());
    put_str(&mut out, &msg.sender);
    out.push(msg.kind() as u8);
    out.extend_from_slice(&msg.sample_count.to_le_bytes());
    match &msg.payload {
        MessagePayload::FullModel(model) => {
            out.extend_from_slice(&(model.blocks().len() as u32).to_le_bytes());
            for block in model.blocks() {
                put_str(&mut out, block.id().as_str());
                out.extend_from_slice(&(block.layer_kinds().len() as u16).to_le_bytes());
                for kind in block.layer_kinds() {
                    put_str(&mut out, kind.as_str());
                }
                out.extend_from_slice(&(block.tensors().len() as u16).to_le_bytes());
                for t in block.tensors() {
                    put_tensor_header(&mut out, t.name(), t.shape());
                    for v in t.values() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        MessagePayload::BlockDeltas(deltas) => {
            out.extend_from_slice(&(deltas.len() as u32).to_le_bytes());
            for delta in deltas {
                put_str(&mut out, delta.block_id.as_str());
                out.extend_from_slice(&(delta.tensors.len() as u16).to_le_bytes());
                for t in &delta.tensors {
                    put_tensor_header(&mut out, &t.name, &t.shape);
                    out.extend_from_slice(&t.lo.to_le_bytes());
                    out.extend_from_slice(&t.step.to_le_bytes());
                    out.push(t.code_bits);
                    out.extend_from_slice(&(t.codes.len() as u32).to_le_bytes());
                    out.extend_from_slice(&pack_codes(&t.codes, t.code_bits));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Decoding

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::MalformedMessage { offset: self.pos, reason: reason.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.buf.get(self.pos..self.pos + n) {
            Some(bytes) => {
                self.pos += n;
                Ok(bytes)
            }
            None => self.fail(format!(
                "unexpected end of message while reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => Err(Error::MalformedMessage {
                offset: start,
                reason: format!("{what} is not valid UTF-8"),
            }),
        }
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let ndims = self.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(self.u32("tensor dimension")? as usize);
        }
        Ok(shape)
    }
}

/// Decode one message. The buffer must contain exactly one message; trailing
/// bytes are an error.
pub fn deserialize(bytes: &[u8]) -> Result<RoundMessage> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::MalformedMessage {
            offset: 0,
            reason: format!("bad magic {magic:02x?}"),
        });
    }
    let version = r.u16("protocol version")?;
    if version != PROTOCOL_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: PROTOCOL_VERSION });
    }
    let round = r.u32("round")?;
    let sender = r.str("sender")?;
    let kind = r.u8("message kind")?;
    let sample_count = r.u64("sample count")?;

    let payload = match kind {
        0 => {
            let block_count = r.u32("block count")? as usize;
            let mut blocks = Vec::new();
            for _ in 0..block_count {
                let id = BlockId::new(r.str("block id")?);
                let kind_count = r.u16("layer kind count")? as usize;
                let mut kinds = Vec::with_capacity(kind_count);
                for _ in 0..kind_count {
                    kinds.push(LayerKind::new(r.str("layer kind")?));
                }
                let tensor_count = r.u16("tensor count")? as usize;
                let mut tensors = Vec::with_capacity(tensor_count);
                for _ in 0..tensor_count {
                    let name = r.str("tensor name")?;
                    let shape = r.shape()?;
                    let count: usize = shape.iter().product();
                    let header_end = r.pos;
                    let mut values = Vec::with_capacity(count.min(r.buf.len() / 4 + 1));
                    for _ in 0..count {
                        values.push(r.f32("tensor values")?);
                    }
                    let tensor =
                        ParameterTensor::new(name, shape, values).map_err(|e| {
                            Error::MalformedMessage { offset: header_end, reason: e.to_string() }
                        })?;
                    tensors.push(tensor);
                }
                let block_end = r.pos;
                let block = Block::new(id, kinds, tensors).map_err(|e| {
                    Error::MalformedMessage { offset: block_end, reason: e.to_string() }
                })?;
                blocks.push(block);
            }
            let model = BlockedModel::new(blocks, round).map_err(|e| {
                Error::MalformedMessage { offset: r.pos, reason: e.to_string() }
            })?;
            MessagePayload::FullModel(model)
        }
        1 => {
            let block_count = r.u32("block count")? as usize;
            let mut deltas = Vec::new();
            for _ in 0..block_count {
                let block_id = BlockId::new(r.str("block id")?);
                let tensor_count = r.u16("tensor count")? as usize;
                let mut tensors = Vec::with_capacity(tensor_count);
                for _ in 0..tensor_count {
                    let name = r.str("tensor name")?;
                    let shape = r.shape()?;
                    let lo = r.f32("quantization lo")?;
                    let step = r.f32("quantization step")?;
                    let code_bits = r.u8("code bits")?;
                    if !(1..=MAX_CODE_BITS).contains(&code_bits) {
                        return Err(Error::MalformedMessage {
                            offset: r.pos - 1,
                            reason: format!("code_bits {code_bits} out of range"),
                        });
                    }
                    let count = r.u32("element count")? as usize;
                    if count != shape.iter().product::<usize>() {
                        return Err(Error::MalformedMessage {
                            offset: r.pos - 4,
                            reason: format!(
                                "element count {count} does not match shape {shape:?}"
                            ),
                        });
                    }
                    let packed_len = (count * code_bits as usize).div_ceil(8);
                    let packed_start = r.pos;
                    let packed = r.take(packed_len, "packed codes")?;
                    let codes = unpack_codes(packed, code_bits, count).map_err(|e| {
                        Error::MalformedMessage { offset: packed_start, reason: e.to_string() }
                    })?;
                    tensors.push(QuantizedTensor { name, shape, lo, step, code_bits, codes });
                }
                deltas.push(QuantizedBlockDelta { block_id, tensors });
            }
            MessagePayload::BlockDeltas(deltas)
        }
        other => {
            return Err(Error::MalformedMessage {
                offset: r.pos - 9, // the kind byte sits before sample_count
                reason: format!("unknown message kind {other}"),
            })
        }
    };

    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes after message end", bytes.len() - r.pos));
    }
    Ok(RoundMessage { round, sender, sample_count, payload })
}

// ---------------------------------------------------------------------------
// Channel

/// Bytes and simulated transfer time of one delivery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveryRecord {
    pub bytes: u64,
    /// `bytes / capacity` for a capped channel, zero otherwise.
    pub simulated_secs: f64,
}

#[derive(Debug, Default)]
struct ChannelState {
    per_sender: BTreeMap<String, u64>,
    total_bytes: u64,
    simulated_secs: f64,
    queues: BTreeMap<String, VecDeque<Vec<u8>>>,
}

/// In-process bidirectional link with exact byte accounting.
///
/// Deliveries from one sender stay FIFO; counters are updated under one lock
/// so concurrent senders never lose bytes.
#[derive(Debug)]
pub struct Channel {
    bytes_per_sec: Option<u64>,
    state: Mutex<ChannelState>,
}

impl Channel {
    pub fn new(bytes_per_sec: Option<u64>) -> Self {
        Self { bytes_per_sec, state: Mutex::new(ChannelState::default()) }
    }

    /// Serialize, account, and enqueue one message.
    pub fn send(&self, msg: &RoundMessage) -> DeliveryRecord {
        let bytes = serialize(msg);
        let n = bytes.len() as u64;
        let secs = match self.bytes_per_sec {
            Some(cap) => n as f64 / cap as f64,
            None => 0.0,
        };
        let mut state = self.state.lock().unwrap();
        *state.per_sender.entry(msg.sender.clone()).or_insert(0) += n;
        state.total_bytes += n;
        state.simulated_secs += secs;
        state.queues.entry(msg.sender.clone()).or_default().push_back(bytes);
        DeliveryRecord { bytes: n, simulated_secs: secs }
    }

    /// Pop and decode the oldest undelivered message from `sender`.
    pub fn recv_from(&self, sender: &str) -> Result<RoundMessage> {
        let bytes = {
            let mut state = self.state.lock().unwrap();
            state.queues.get_mut(sender).and_then(VecDeque::pop_front)
        };
        match bytes {
            Some(bytes) => deserialize(&bytes),
            None => Err(Error::MissingState(format!("no pending message from {sender}"))),
        }
    }

    pub fn bytes_from(&self, sender: &str) -> u64 {
        self.state.lock().unwrap().per_sender.get(sender).copied().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.state.lock().unwrap().total_bytes
    }

    pub fn simulated_secs(&self) -> f64 {
        self.state.lock().unwrap().simulated_secs
    }
}
