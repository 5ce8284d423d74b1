//! Wire protocol between the aggregator and the sites.
//!
//! A frame is a 4-byte big-endian unsigned payload length followed by a
//! UTF-8 JSON object `{kind, round, client_id, body}`. Parameter values are
//! JSON number arrays in shortest round-trip form, so they decode bit-exact.
//! Frames above [`MAX_FRAME_BYTES`] are refused on both sides.
//!
//! **There is no transport security.** Frames travel in clear text and peers
//! are not authenticated; a site is identified only by the `client_id` it
//! claims. Deploy behind a VPN or a TLS-terminating tunnel.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aggregation::AlgorithmConfig;
use crate::error::{Error, Result};
use crate::params::{EvalScore, ModelUpdate, ParameterVector};

pub const MAX_FRAME_BYTES: usize = 256 * 1024 * 1024;
const PREFIX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    JoinRequest,
    JoinAck,
    TaskAssignment,
    UpdateSubmission,
    Heartbeat,
    ExperimentDone,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Train locally from the attached global model.
    Train,
    /// Only score the attached model on local validation data.
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub params: ParameterVector,
    pub algorithm: AlgorithmConfig,
    pub task: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinAck {
    pub accepted: bool,
    pub current_round: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub update: ModelUpdate,
    /// The site's validation score of the global model it was sent.
    pub eval: Option<EvalScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    JoinRequest,
    JoinAck(JoinAck),
    TaskAssignment(Task),
    UpdateSubmission(Submission),
    Heartbeat,
    ExperimentDone,
    Abort { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: u64,
    pub client_id: String,
    pub body: Body,
}

impl Message {
    pub fn new(round: u64, client_id: impl Into<String>, body: Body) -> Self {
        Self { round, client_id: client_id.into(), body }
    }

    pub fn kind(&self) -> MessageKind {
        match self.body {
            Body::JoinRequest => MessageKind::JoinRequest,
            Body::JoinAck(_) => MessageKind::JoinAck,
            Body::TaskAssignment(_) => MessageKind::TaskAssignment,
            Body::UpdateSubmission(_) => MessageKind::UpdateSubmission,
            Body::Heartbeat => MessageKind::Heartbeat,
            Body::ExperimentDone => MessageKind::ExperimentDone,
            Body::Abort { .. } => MessageKind::Abort,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match &self.body {
            Body::UpdateSubmission(s) => {
                if s.update.round != self.round {
                    return Err(format!("update for round {} submitted under round {}", s.update.round, self.round));
                }
                if s.update.client_id != self.client_id {
                    return Err(format!("update from {} submitted as {}", s.update.client_id, self.client_id));
                }
                s.update.validate().map_err(|e| e.to_string())?;
                if let Some(eval) = &s.eval {
                    eval.validate().map_err(|e| e.to_string())?;
                }
                Ok(())
            }
            Body::TaskAssignment(t) => t.algorithm.validate().map_err(|e| e.to_string()),
            _ => Ok(()),
        }
    }
}

#[derive(Serialize)]
struct WireOut<'a> {
    kind: MessageKind,
    round: u64,
    client_id: &'a str,
    body: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    kind: MessageKind,
    round: u64,
    client_id: String,
    body: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AbortBody {
    reason: String,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Encode(e.to_string()))
}

/// Serialises `msg` into one length-prefixed frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    encode_with_limit(msg, MAX_FRAME_BYTES)
}

pub fn encode_with_limit(msg: &Message, max_frame: usize) -> Result<Vec<u8>> {
    msg.check().map_err(Error::Encode)?;
    let body = match &msg.body {
        Body::JoinRequest | Body::Heartbeat | Body::ExperimentDone => to_value(&Empty {})?,
        Body::JoinAck(ack) => to_value(ack)?,
        Body::TaskAssignment(task) => to_value(task)?,
        Body::UpdateSubmission(sub) => to_value(sub)?,
        Body::Abort { reason } => to_value(&AbortBody { reason: reason.clone() })?,
    };
    let wire = WireOut { kind: msg.kind(), round: msg.round, client_id: &msg.client_id, body };
    let mut frame = vec![0u8; PREFIX];
    serde_json::to_writer(&mut frame, &wire).map_err(|e| Error::Encode(e.to_string()))?;
    let len = frame.len() - PREFIX;
    if len > max_frame {
        return Err(Error::Encode(format!("payload of {len} bytes exceeds the {max_frame}-byte cap")));
    }
    frame[..PREFIX].copy_from_slice(&(len as u32).to_be_bytes());
    Ok(frame)
}

fn body_as<T: for<'de> Deserialize<'de>>(kind: MessageKind, body: Value) -> Result<T> {
    serde_json::from_value(body).map_err(|e| Error::Protocol(format!("invalid {kind:?} body: {e}")))
}

fn decode_payload(payload: &[u8]) -> Result<Message> {
    let wire: WireIn =
        serde_json::from_slice(payload).map_err(|e| Error::Protocol(format!("malformed message: {e}")))?;
    let kind = wire.kind;
    let body = match kind {
        MessageKind::JoinRequest => body_as::<Empty>(kind, wire.body).map(|_| Body::JoinRequest)?,
        MessageKind::Heartbeat => body_as::<Empty>(kind, wire.body).map(|_| Body::Heartbeat)?,
        MessageKind::ExperimentDone => body_as::<Empty>(kind, wire.body).map(|_| Body::ExperimentDone)?,
        MessageKind::JoinAck => Body::JoinAck(body_as(kind, wire.body)?),
        MessageKind::TaskAssignment => Body::TaskAssignment(body_as(kind, wire.body)?),
        MessageKind::UpdateSubmission => Body::UpdateSubmission(body_as(kind, wire.body)?),
        MessageKind::Abort => Body::Abort { reason: body_as::<AbortBody>(kind, wire.body)?.reason },
    };
    let msg = Message { round: wire.round, client_id: wire.client_id, body };
    msg.check().map_err(Error::Protocol)?;
    Ok(msg)
}

fn frame_len(bytes: &[u8], max_frame: usize) -> Result<usize> {
    if bytes.len() < PREFIX {
        return Err(Error::NeedMoreBytes { needed: PREFIX - bytes.len() });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > max_frame {
        return Err(Error::Protocol(format!("frame length {len} exceeds the {max_frame}-byte cap")));
    }
    Ok(len)
}

/// Decodes exactly one complete frame.
pub fn decode(frame: &[u8]) -> Result<Message> {
    let len = frame_len(frame, MAX_FRAME_BYTES)?;
    let total = PREFIX + len;
    if frame.len() < total {
        return Err(Error::NeedMoreBytes { needed: total - frame.len() });
    }
    if frame.len() > total {
        return Err(Error::Protocol(format!("{} trailing bytes after frame", frame.len() - total)));
    }
    decode_payload(&frame[PREFIX..])
}

/// Streaming decoder for one connection: feed arbitrary chunks, pull whole
/// messages.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    max_frame: usize,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::with_limit(MAX_FRAME_BYTES)
    }

    pub fn with_limit(max_frame: usize) -> Self {
        Self { buf: Vec::new(), max_frame }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` when more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        let len = match frame_len(&self.buf, self.max_frame) {
            Ok(len) => len,
            Err(Error::NeedMoreBytes { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        if self.buf.len() < PREFIX + len {
            return Ok(None);
        }
        let msg = decode_payload(&self.buf[PREFIX..PREFIX + len]);
        self.buf.drain(..PREFIX + len);
        msg.map(Some)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    let frame = encode(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Blocking message reader over any byte stream.
pub struct MessageReader<R> {
    inner: R,
    decoder: FrameDecoder,
    chunk: Vec<u8>,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, decoder: FrameDecoder::new(), chunk: vec![0; 64 * 1024] }
    }

    /// Blocks for the next message. `Ok(None)` on a clean end of stream.
    pub fn read_message(&mut self) -> Result<Option<Message>> {
        loop {
            if let Some(msg) = self.decoder.next_message()? {
                return Ok(Some(msg));
            }
            let n = match self.inner.read(&mut self.chunk) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                if self.decoder.buffered() > 0 {
                    return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed mid-frame")));
                }
                return Ok(None);
            }
            self.decoder.push(&self.chunk[..n]);
        }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Metric;

    fn heartbeat() -> Message {
        Message::new(0, "basel", Body::Heartbeat)
    }

    fn task() -> Message {
        Message::new(
            4,
            "freiburg",
            Body::TaskAssignment(Task {
                params: ParameterVector::new(vec![0.1, -3.5e-300, 1.0 / 3.0]).unwrap(),
                algorithm: AlgorithmConfig::fedprox(0.01),
                task: TaskKind::Train,
            }),
        )
    }

    fn submission(round: u64, update_round: u64) -> Message {
        let update = ModelUpdate {
            client_id: "basel".into(),
            round: update_round,
            params: ParameterVector::new(vec![std::f64::consts::PI]).unwrap(),
            sample_count: 12,
            train_seconds: 0.25,
        };
        Message::new(
            round,
            "basel",
            Body::UpdateSubmission(Submission {
                update,
                eval: Some(EvalScore { mean: 0.5, std: 0.1, metric: Metric::Dice }),
            }),
        )
    }

    #[test]
    fn prefix_is_payload_length() {
        let frame = encode(&heartbeat()).unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        let json: Value = serde_json::from_slice(&frame[4..]).unwrap();
        assert_eq!(json["kind"], "heartbeat");
        assert_eq!(json["client_id"], "basel");
        assert_eq!(json["round"], 0);
        assert_eq!(json["body"], serde_json::json!({}));
    }

    #[test]
    fn task_round_trip() {
        let m = task();
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
        let s = submission(2, 2);
        assert_eq!(decode(&encode(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn frame_caps() {
        assert!(matches!(encode_with_limit(&task(), 16), Err(Error::Encode(_))));
        let mut frame = (300u32 * 1024 * 1024).to_be_bytes().to_vec();
        frame.extend_from_slice(b"{}");
        assert!(matches!(decode(&frame), Err(Error::Protocol(_))));
        let mut dec = FrameDecoder::new();
        dec.push(&frame);
        assert!(matches!(dec.next_message(), Err(Error::Protocol(_))));
    }

    #[test]
    fn partial_prefix_needs_more_bytes() {
        let frame = encode(&heartbeat()).unwrap();
        assert!(matches!(decode(&frame[..3]), Err(Error::NeedMoreBytes { needed: 1 })));
        assert!(matches!(decode(&frame[..10]), Err(Error::NeedMoreBytes { .. })));
        let mut extra = frame.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Protocol(_))));
    }

    fn raw(json: &str) -> Vec<u8> {
        let mut f = (json.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(json.as_bytes());
        f
    }

    #[test]
    fn rejects_bad_payloads() {
        let cases = [
            r#"{"kind":"shout","round":0,"client_id":"a","body":{}}"#,
            r#"{"kind":"heartbeat","round":0,"body":{}}"#,
            r#"{"kind":"heartbeat","round":0,"client_id":"a","body":{},"extra":1}"#,
            r#"{"kind":"heartbeat","round":0,"client_id":"a","body":{"accepted":true}}"#,
            r#"{"kind":"join_ack","round":0,"client_id":"a","body":{}}"#,
            r#"{"kind":"task_assignment","round":0,"client_id":"a","body":{"params":[],"algorithm":{"kind":"fedavg"},"task":"train"}}"#,
            r#"{"kind":"abort","round":0,"client_id":"a","body":{}}"#,
            r#"not json"#,
        ];
        for c in cases {
            assert!(matches!(decode(&raw(c)), Err(Error::Protocol(_))), "{c}");
        }
    }

    #[test]
    fn round_mismatch_rejected_both_ways() {
        let bad = submission(3, 2);
        assert!(matches!(encode(&bad), Err(Error::Encode(_))));
        let good = encode(&submission(2, 2)).unwrap();
        let text = String::from_utf8(good[4..].to_vec()).unwrap();
        let tampered = text.replacen("\"round\":2", "\"round\":3", 1);
        assert!(matches!(decode(&raw(&tampered)), Err(Error::Protocol(_))));
    }

    #[test]
    fn non_finite_values_cannot_be_encoded() {
        let mut m = submission(1, 1);
        if let Body::UpdateSubmission(s) = &mut m.body {
            s.update.train_seconds = f64::NAN;
        }
        assert!(matches!(encode(&m), Err(Error::Encode(_))));
    }

    #[test]
    fn reader_splits_stream() {
        let mut bytes = encode(&heartbeat()).unwrap();
        bytes.extend(encode(&task()).unwrap());
        let mut r = MessageReader::new(&bytes[..]);
        assert_eq!(r.read_message().unwrap(), Some(heartbeat()));
        assert_eq!(r.read_message().unwrap(), Some(task()));
        assert_eq!(r.read_message().unwrap(), None);

        let cut = &bytes[..bytes.len() - 2];
        let mut r = MessageReader::new(cut);
        r.read_message().unwrap();
        assert!(r.read_message().is_err());
    }

    #[test]
    fn max_frame_constant() {
        assert_eq!(MAX_FRAME_BYTES, 268_435_456);
    }
}
