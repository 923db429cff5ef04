//! Canonical message encoding and framing.
//!
//! Every payload on the wire and on disk is a single JSON object written in
//! canonical form: object keys sorted by byte order, no insignificant
//! whitespace, integers in minimal decimal, byte strings as padded standard
//! base64. [`decode`] is strict: input that parses but is not byte-identical
//! to the canonical re-encoding of its value is rejected, so a signature over
//! canonical bytes can't be bypassed by re-serialising a message.
//!
//! Payloads are framed with a 4-byte big-endian length prefix and capped at
//! [`MAX_FRAME_LEN`].

use std::io::{self, BufRead, Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::crypto::Signature;
use crate::model::{DossierId, UserId, Version};

pub const MAX_FRAME_LEN: usize = 2_097_152;
/// Wire protocol tag sent at the start of the handshake line.
pub const PROTOCOL_TAG: &str = "DC1";

const MAX_KEY_FIELD: usize = 256;
const MAX_NONCE_FIELD: usize = 64;
const MAX_CIPHERTEXT_FIELD: usize = crate::crypto::MAX_PLAINTEXT_LEN + 64;
const MAX_ACK_IDS: usize = 65_536;
const MAX_DETAIL: usize = 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("payload is not in canonical form")]
    NonCanonical,
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("field `{0}` exceeds its size limit")]
    OversizeField(&'static str),
    #[error("response messages carry no signature")]
    NotSignable,
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge(usize),
    #[error("stream ended inside a frame")]
    TruncatedFrame,
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A byte string, base64 on the wire.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bytes(pub Vec<u8>);

impl From<Vec<u8>> for Bytes {
    fn from(v: Vec<u8>) -> Self {
        Bytes(v)
    }
}

impl From<&[u8]> for Bytes {
    fn from(v: &[u8]) -> Self {
        Bytes(v.to_vec())
    }
}

impl AsRef<[u8]> for Bytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD
            .decode(s.as_bytes())
            .map(Bytes)
            .map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for fixed-size byte arrays as base64.
pub mod b64_array {
    use super::*;

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let bytes = Bytes::deserialize(d)?;
        <[u8; N]>::try_from(bytes.0.as_slice())
            .map_err(|_| serde::de::Error::custom(format!("expected {N} bytes")))
    }
}

/// Writes `value` in canonical form.
fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(b) => out.extend_from_slice(if *b { b"true" } else { b"false" }),
        Value::Number(n) => out.extend_from_slice(n.to_string().as_bytes()),
        Value::String(s) => {
            serde_json::to_writer(&mut *out, s).expect("writing to a Vec cannot fail")
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, k).expect("writing to a Vec cannot fail");
                out.push(b':');
                write_canonical(v, out);
            }
            out.push(b'}');
        }
    }
}

fn has_float(value: &Value) -> bool {
    match value {
        Value::Number(n) => !(n.is_u64() || n.is_i64()),
        Value::Array(items) => items.iter().any(has_float),
        Value::Object(map) => map.values().any(has_float),
        _ => false,
    }
}

pub fn canonical_value(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_canonical(value, &mut out);
    out
}

/// Canonical encoding of any serialisable value.
pub fn to_canonical<T: Serialize>(value: &T) -> Result<Vec<u8>, WireError> {
    let v = serde_json::to_value(value).map_err(|e| WireError::Malformed(e.to_string()))?;
    Ok(canonical_value(&v))
}

fn parse_strict(bytes: &[u8]) -> Result<Value, WireError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| WireError::Malformed(e.to_string()))?;
    if has_float(&value) {
        return Err(WireError::NonCanonical);
    }
    Ok(value)
}

fn finish_strict<T: DeserializeOwned + Serialize>(value: Value, bytes: &[u8]) -> Result<T, WireError> {
    let decoded: T =
        serde_json::from_value(value).map_err(|e| WireError::Malformed(e.to_string()))?;
    if to_canonical(&decoded)? != bytes {
        return Err(WireError::NonCanonical);
    }
    Ok(decoded)
}

/// Strict inverse of [`to_canonical`].
pub fn from_canonical<T: DeserializeOwned + Serialize>(bytes: &[u8]) -> Result<T, WireError> {
    let value = parse_strict(bytes)?;
    finish_strict(value, bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    Malformed,
    NonCanonical,
    UnknownType,
    OversizeField,
    UnexpectedMessage,
    KeyConflict,
    UnknownOwner,
    UnknownUser,
    BadSignature,
    ReplayedRequest,
    NoKey,
    NotGrantOwner,
    Internal,
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

/// A pending dossier as delivered to its receiver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingWire {
    pub entry_id: u64,
    pub dossier: DossierId,
    pub owner: UserId,
    pub version: Version,
    pub nonce: Bytes,
    pub ciphertext: Bytes,
    pub signature: Signature,
}

impl PendingWire {
    /// Rebuilds the `Send` message the owner signed, for origin checks.
    pub fn as_send(&self, receiver: &UserId) -> Message {
        Message::Send {
            dossier: self.dossier.clone(),
            owner: self.owner.clone(),
            receiver: receiver.clone(),
            version: self.version,
            nonce: self.nonce.clone(),
            ciphertext: self.ciphertext.clone(),
            signature: self.signature.clone(),
        }
    }
}

/// Every agent↔synchronizer message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Register {
        user: UserId,
        enc_public: Bytes,
        sig_public: Bytes,
    },
    /// Public-key lookup in the registry. Unsigned: it only reveals public data.
    Lookup {
        user: UserId,
    },
    Grant {
        dossier: DossierId,
        owner: UserId,
        receiver: UserId,
        wrapped: Bytes,
        signature: Signature,
    },
    Send {
        dossier: DossierId,
        owner: UserId,
        receiver: UserId,
        version: Version,
        nonce: Bytes,
        ciphertext: Bytes,
        signature: Signature,
    },
    Fetch {
        receiver: UserId,
        request_seq: u64,
        signature: Signature,
    },
    Ack {
        receiver: UserId,
        entry_ids: Vec<u64>,
        request_seq: u64,
        signature: Signature,
    },
    #[serde(rename = "getkey")]
    GetKey {
        dossier: DossierId,
        receiver: UserId,
        request_seq: u64,
        signature: Signature,
    },
    Revoke {
        dossier: DossierId,
        owner: UserId,
        receiver: UserId,
        signature: Signature,
    },
    OkKey {
        wrapped: Bytes,
    },
    OkBundle {
        user: UserId,
        enc_public: Bytes,
        sig_public: Bytes,
    },
    OkPending {
        entries: Vec<PendingWire>,
    },
    OkEmpty {},
    Err {
        code: ErrorCode,
        detail: String,
    },
}

const MESSAGE_TYPES: &[&str] = &[
    "register",
    "lookup",
    "grant",
    "send",
    "fetch",
    "ack",
    "getkey",
    "revoke",
    "ok_key",
    "ok_bundle",
    "ok_pending",
    "ok_empty",
    "err",
];

fn cap(name: &'static str, len: usize, max: usize) -> Result<(), WireError> {
    if len > max {
        Err(WireError::OversizeField(name))
    } else {
        Ok(())
    }
}

impl Message {
    pub fn err(code: ErrorCode, detail: impl Into<String>) -> Message {
        let mut detail = detail.into();
        if detail.len() > MAX_DETAIL {
            let mut end = MAX_DETAIL;
            while !detail.is_char_boundary(end) {
                end -= 1;
            }
            detail.truncate(end);
        }
        Message::Err { code, detail }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Register { .. } => "register",
            Message::Lookup { .. } => "lookup",
            Message::Grant { .. } => "grant",
            Message::Send { .. } => "send",
            Message::Fetch { .. } => "fetch",
            Message::Ack { .. } => "ack",
            Message::GetKey { .. } => "getkey",
            Message::Revoke { .. } => "revoke",
            Message::OkKey { .. } => "ok_key",
            Message::OkBundle { .. } => "ok_bundle",
            Message::OkPending { .. } => "ok_pending",
            Message::OkEmpty {} => "ok_empty",
            Message::Err { .. } => "err",
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(
            self,
            Message::Register { .. }
                | Message::Lookup { .. }
                | Message::Grant { .. }
                | Message::Send { .. }
                | Message::Fetch { .. }
                | Message::Ack { .. }
                | Message::GetKey { .. }
                | Message::Revoke { .. }
        )
    }

    pub fn signature(&self) -> Option<&Signature> {
        match self {
            Message::Grant { signature, .. }
            | Message::Send { signature, .. }
            | Message::Fetch { signature, .. }
            | Message::Ack { signature, .. }
            | Message::GetKey { signature, .. }
            | Message::Revoke { signature, .. } => Some(signature),
            _ => None,
        }
    }

    pub fn signature_mut(&mut self) -> Option<&mut Signature> {
        match self {
            Message::Grant { signature, .. }
            | Message::Send { signature, .. }
            | Message::Fetch { signature, .. }
            | Message::Ack { signature, .. }
            | Message::GetKey { signature, .. }
            | Message::Revoke { signature, .. } => Some(signature),
            _ => None,
        }
    }

    fn check_caps(&self) -> Result<(), WireError> {
        match self {
            Message::Register {
                enc_public,
                sig_public,
                ..
            }
            | Message::OkBundle {
                enc_public,
                sig_public,
                ..
            } => {
                cap("enc_public", enc_public.0.len(), MAX_KEY_FIELD)?;
                cap("sig_public", sig_public.0.len(), MAX_KEY_FIELD)
            }
            Message::Grant { wrapped, .. } | Message::OkKey { wrapped } => {
                cap("wrapped", wrapped.0.len(), MAX_KEY_FIELD)
            }
            Message::Send {
                nonce, ciphertext, ..
            } => {
                cap("nonce", nonce.0.len(), MAX_NONCE_FIELD)?;
                cap("ciphertext", ciphertext.0.len(), MAX_CIPHERTEXT_FIELD)
            }
            Message::Ack { entry_ids, .. } => cap("entry_ids", entry_ids.len(), MAX_ACK_IDS),
            Message::OkPending { entries } => entries.iter().try_for_each(|e| {
                cap("nonce", e.nonce.0.len(), MAX_NONCE_FIELD)?;
                cap("ciphertext", e.ciphertext.0.len(), MAX_CIPHERTEXT_FIELD)
            }),
            Message::Err { detail, .. } => cap("detail", detail.len(), MAX_DETAIL),
            _ => Ok(()),
        }?;
        if let Some(sig) = self.signature() {
            cap("signature", sig.as_bytes().len(), MAX_KEY_FIELD)?;
        }
        Ok(())
    }
}

pub fn canonical_encode(m: &Message) -> Result<Vec<u8>, WireError> {
    m.check_caps()?;
    to_canonical(m)
}

pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let value = parse_strict(bytes)?;
    match value.get("type") {
        Some(Value::String(t)) if MESSAGE_TYPES.contains(&t.as_str()) => {}
        Some(Value::String(t)) => return Err(WireError::UnknownType(t.clone())),
        Some(other) => return Err(WireError::UnknownType(other.to_string())),
        None => return Err(WireError::Malformed("missing `type`".into())),
    }
    let m: Message = finish_strict(value, bytes)?;
    m.check_caps()?;
    Ok(m)
}

/// Canonical encoding with the `signature` key omitted.
pub fn signing_bytes(m: &Message) -> Result<Vec<u8>, WireError> {
    if m.signature().is_none() {
        return Err(WireError::NotSignable);
    }
    let mut v = serde_json::to_value(m).map_err(|e| WireError::Malformed(e.to_string()))?;
    v.as_object_mut()
        .expect("messages serialise as objects")
        .remove("signature");
    Ok(canonical_value(&v))
}

pub fn frame(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), WireError> {
    w.write_all(&frame(payload)?)?;
    Ok(())
}

/// Reads one frame. `Ok(None)` when the stream ends cleanly on a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::TruncatedFrame),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::TruncatedFrame,
        _ => WireError::Io(e),
    })?;
    Ok(Some(payload))
}

/// Reads exactly one frame; a clean end of stream is an error here.
pub fn deframe<R: Read>(r: &mut R) -> Result<Vec<u8>, WireError> {
    read_frame(r)?.ok_or(WireError::TruncatedFrame)
}

pub fn write_message<W: Write>(w: &mut W, m: &Message) -> Result<(), WireError> {
    write_frame(w, &canonical_encode(m)?)?;
    w.flush()?;
    Ok(())
}

pub fn handshake_line(suite: &str) -> String {
    format!("{PROTOCOL_TAG} {suite}\n")
}

fn read_line_bounded<R: BufRead>(r: &mut R) -> Result<String, WireError> {
    let mut line = Vec::new();
    r.take(256).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(WireError::Handshake("no handshake line".into()));
    }
    String::from_utf8(line).map_err(|_| WireError::Handshake("handshake is not UTF-8".into()))
}

/// Client side: send our suite line and expect it echoed back.
pub fn client_handshake<S: BufRead + Write>(stream: &mut S, suite: &str) -> Result<(), WireError> {
    let ours = handshake_line(suite);
    stream.write_all(ours.as_bytes())?;
    stream.flush()?;
    let theirs = read_line_bounded(stream)?;
    if theirs != ours {
        return Err(WireError::Handshake(format!(
            "server answered {:?}",
            theirs.trim_end()
        )));
    }
    Ok(())
}

/// Server side: echo the client's line if it names our suite, otherwise
/// answer with our own line and fail.
pub fn server_handshake<S: BufRead + Write>(stream: &mut S, suite: &str) -> Result<(), WireError> {
    let ours = handshake_line(suite);
    let theirs = read_line_bounded(stream)?;
    stream.write_all(ours.as_bytes())?;
    stream.flush()?;
    if theirs != ours {
        return Err(WireError::Handshake(format!(
            "client offered {:?}",
            theirs.trim_end()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn uid(s: &str) -> UserId {
        UserId::new(s).unwrap()
    }

    fn did(s: &str) -> DossierId {
        DossierId::new(s).unwrap()
    }

    fn sig(b: u8) -> Signature {
        Signature(Bytes(vec![b; 64]))
    }

    fn grant() -> Message {
        Message::Grant {
            dossier: did("d1"),
            owner: uid("alice"),
            receiver: uid("bob"),
            wrapped: Bytes(vec![1, 2, 3]),
            signature: sig(9),
        }
    }

    #[test]
    fn canonical_form_is_sorted_and_compact() {
        let bytes = canonical_encode(&grant()).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            r#"{"dossier":"d1","owner":"alice","receiver":"bob","signature":"CQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQkJCQ==","type":"grant","wrapped":"AQID"}"#
        );
        let empty = canonical_encode(&Message::OkEmpty {}).unwrap();
        assert_eq!(empty, br#"{"type":"ok_empty"}"#);
    }

    #[test]
    fn construction_order_does_not_matter() {
        let a = Message::Ack {
            receiver: uid("bob"),
            entry_ids: vec![3, 1],
            request_seq: 10,
            signature: sig(1),
        };
        let b = Message::Ack {
            signature: sig(1),
            request_seq: 10,
            entry_ids: vec![3, 1],
            receiver: uid("bob"),
        };
        assert_eq!(canonical_encode(&a).unwrap(), canonical_encode(&b).unwrap());
    }

    #[test]
    fn strict_decode_rejects_variants() {
        let bytes = canonical_encode(&grant()).unwrap();
        assert_eq!(decode(&bytes).unwrap(), grant());

        let spaced = String::from_utf8(bytes.clone()).unwrap().replacen(",", ", ", 1);
        assert!(matches!(decode(spaced.as_bytes()), Err(WireError::NonCanonical)));

        let fetch = br#"{"receiver":"bob","request_seq":1.0,"signature":"AA==","type":"fetch"}"#;
        assert!(matches!(decode(fetch), Err(WireError::NonCanonical)));
        let fetch = br#"{"receiver":"bob","request_seq":1e0,"signature":"AA==","type":"fetch"}"#;
        assert!(matches!(decode(fetch), Err(WireError::NonCanonical)));
        let unsorted = br#"{"type":"fetch","receiver":"bob","request_seq":1,"signature":"AA=="}"#;
        assert!(matches!(decode(unsorted), Err(WireError::NonCanonical)));
        let escaped = br#"{"receiver":"b\u006fb","request_seq":1,"signature":"AA==","type":"fetch"}"#;
        assert!(matches!(decode(escaped), Err(WireError::NonCanonical)));
        let dup = br#"{"receiver":"bob","receiver":"bob","request_seq":1,"signature":"AA==","type":"fetch"}"#;
        assert!(decode(dup).is_err());

        assert!(matches!(decode(br#"{"type":"nope"}"#), Err(WireError::UnknownType(_))));
        assert!(matches!(decode(b"{"), Err(WireError::Malformed(_))));
        assert!(matches!(decode(br#"{"type":"fetch"}"#), Err(WireError::Malformed(_))));
        assert!(matches!(decode(br#"{"type":"ok_empty"} "#), Err(WireError::NonCanonical)));
        let bad_b64 = br#"{"type":"ok_key","wrapped":"AQI"}"#;
        assert!(matches!(decode(bad_b64), Err(WireError::Malformed(_))));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = canonical_encode(&grant()).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "prefix {cut} accepted");
        }
    }

    #[test]
    fn signing_bytes_omit_signature() {
        let a = grant();
        let mut b = grant();
        *b.signature_mut().unwrap() = sig(200);
        assert_eq!(signing_bytes(&a).unwrap(), signing_bytes(&b).unwrap());
        assert!(!signing_bytes(&a).unwrap().windows(9).any(|w| w == b"signature"));
        assert!(matches!(signing_bytes(&Message::OkEmpty {}), Err(WireError::NotSignable)));
        let reg = Message::Register {
            user: uid("a"),
            enc_public: Bytes(vec![0; 32]),
            sig_public: Bytes(vec![0; 32]),
        };
        assert!(matches!(signing_bytes(&reg), Err(WireError::NotSignable)));
    }

    #[test]
    fn signing_bytes_cover_every_field() {
        let base = Message::Send {
            dossier: did("d"),
            owner: uid("o"),
            receiver: uid("r"),
            version: Version(4),
            nonce: Bytes(vec![1; 24]),
            ciphertext: Bytes(vec![2; 40]),
            signature: sig(0),
        };
        let mutants = vec![
            Message::Send { dossier: did("e"), owner: uid("o"), receiver: uid("r"), version: Version(4), nonce: Bytes(vec![1; 24]), ciphertext: Bytes(vec![2; 40]), signature: sig(0) },
            Message::Send { dossier: did("d"), owner: uid("p"), receiver: uid("r"), version: Version(4), nonce: Bytes(vec![1; 24]), ciphertext: Bytes(vec![2; 40]), signature: sig(0) },
            Message::Send { dossier: did("d"), owner: uid("o"), receiver: uid("s"), version: Version(4), nonce: Bytes(vec![1; 24]), ciphertext: Bytes(vec![2; 40]), signature: sig(0) },
            Message::Send { dossier: did("d"), owner: uid("o"), receiver: uid("r"), version: Version(5), nonce: Bytes(vec![1; 24]), ciphertext: Bytes(vec![2; 40]), signature: sig(0) },
            Message::Send { dossier: did("d"), owner: uid("o"), receiver: uid("r"), version: Version(4), nonce: Bytes(vec![3; 24]), ciphertext: Bytes(vec![2; 40]), signature: sig(0) },
            Message::Send { dossier: did("d"), owner: uid("o"), receiver: uid("r"), version: Version(4), nonce: Bytes(vec![1; 24]), ciphertext: Bytes(vec![2; 41]), signature: sig(0) },
        ];
        let reference = signing_bytes(&base).unwrap();
        for m in mutants {
            assert_ne!(signing_bytes(&m).unwrap(), reference, "{m:?}");
        }
    }

    #[test]
    fn frames() {
        assert_eq!(frame(b"hello").unwrap()[..4], [0, 0, 0, 5]);
        let mut stream = Vec::new();
        write_frame(&mut stream, b"one").unwrap();
        write_frame(&mut stream, b"two!").unwrap();
        let mut r = stream.as_slice();
        assert_eq!(deframe(&mut r).unwrap(), b"one");
        assert_eq!(deframe(&mut r).unwrap(), b"two!");
        assert!(read_frame(&mut r).unwrap().is_none());

        let full = frame(b"abcdef").unwrap();
        for cut in 1..full.len() {
            assert!(matches!(read_frame(&mut &full[..cut]), Err(WireError::TruncatedFrame)));
        }
        assert!(matches!(frame(&vec![0; MAX_FRAME_LEN + 1]), Err(WireError::FrameTooLarge(_))));
        let huge = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
        assert!(matches!(read_frame(&mut &huge[..]), Err(WireError::FrameTooLarge(_))));
    }

    #[test]
    fn oversize_fields_are_refused() {
        let m = Message::Send {
            dossier: did("d"),
            owner: uid("o"),
            receiver: uid("r"),
            version: Version(1),
            nonce: Bytes(vec![0; 65]),
            ciphertext: Bytes(vec![]),
            signature: sig(0),
        };
        assert!(matches!(canonical_encode(&m), Err(WireError::OversizeField("nonce"))));
    }

    #[test]
    fn handshake_round_trip() {
        use std::io::Cursor;
        // server side reading the client's line
        let mut s = Cursor::new(handshake_line("suite-a").into_bytes());
        let mut rw = ReadWrite { r: &mut s, w: Vec::new() };
        server_handshake(&mut rw, "suite-a").unwrap();
        assert_eq!(rw.w, handshake_line("suite-a").as_bytes());

        let mut s = Cursor::new(handshake_line("suite-b").into_bytes());
        let mut rw = ReadWrite { r: &mut s, w: Vec::new() };
        assert!(server_handshake(&mut rw, "suite-a").is_err());
    }

    struct ReadWrite<'a> {
        r: &'a mut std::io::Cursor<Vec<u8>>,
        w: Vec<u8>,
    }

    impl Read for ReadWrite<'_> {
        fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
            self.r.read(buf)
        }
    }

    impl BufRead for ReadWrite<'_> {
        fn fill_buf(&mut self) -> io::Result<&[u8]> {
            self.r.fill_buf()
        }
        fn consume(&mut self, amt: usize) {
            self.r.consume(amt)
        }
    }

    impl Write for ReadWrite<'_> {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.w.write(buf)
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = Message> {
        let name = "[a-z][a-z0-9_é]{0,11}";
        let bytes = prop::collection::vec(any::<u8>(), 0..48).prop_map(Bytes);
        let sigs = prop::collection::vec(any::<u8>(), 64).prop_map(|b| Signature(Bytes(b)));
        prop_oneof![
            (name, bytes.clone(), bytes.clone()).prop_map(|(u, e, s)| Message::Register { user: uid(&u), enc_public: e, sig_public: s }),
            (name, name, name, bytes.clone(), sigs.clone()).prop_map(|(d, o, r, w, s)| Message::Grant { dossier: did(&d), owner: uid(&o), receiver: uid(&r), wrapped: w, signature: s }),
            (name, name, name, any::<u64>(), bytes.clone(), bytes.clone(), sigs.clone()).prop_map(|(d, o, r, v, n, c, s)| Message::Send { dossier: did(&d), owner: uid(&o), receiver: uid(&r), version: Version(v), nonce: n, ciphertext: c, signature: s }),
            (name, any::<u64>(), sigs.clone()).prop_map(|(r, q, s)| Message::Fetch { receiver: uid(&r), request_seq: q, signature: s }),
            (name, prop::collection::vec(any::<u64>(), 0..5), any::<u64>(), sigs.clone()).prop_map(|(r, ids, q, s)| Message::Ack { receiver: uid(&r), entry_ids: ids, request_seq: q, signature: s }),
            (name, name, any::<u64>(), sigs.clone()).prop_map(|(d, r, q, s)| Message::GetKey { dossier: did(&d), receiver: uid(&r), request_seq: q, signature: s }),
            (name, name, name, sigs.clone()).prop_map(|(d, o, r, s)| Message::Revoke { dossier: did(&d), owner: uid(&o), receiver: uid(&r), signature: s }),
            bytes.clone().prop_map(|w| Message::OkKey { wrapped: w }),
            prop::collection::vec((any::<u64>(), name, name, any::<u64>(), bytes.clone(), bytes, sigs), 0..3).prop_map(|es| Message::OkPending {
                entries: es.into_iter().map(|(id, d, o, v, n, c, s)| PendingWire { entry_id: id, dossier: did(&d), owner: uid(&o), version: Version(v), nonce: n, ciphertext: c, signature: s }).collect()
            }),
            Just(Message::OkEmpty {}),
            ("[ -~\\n\"\\\\]{0,20}").prop_map(|d| Message::err(ErrorCode::NoKey, d)),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(m in arb_message()) {
            let bytes = canonical_encode(&m).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(canonical_encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn encoding_is_injective_on_random_corpus() {
        use proptest::strategy::ValueTree;
        use proptest::test_runner::TestRunner;
        let mut runner = TestRunner::deterministic();
        let mut seen = std::collections::HashMap::new();
        let mut distinct = HashSet::new();
        for _ in 0..1000 {
            let m = arb_message().new_tree(&mut runner).unwrap().current();
            let bytes = canonical_encode(&m).unwrap();
            if let Some(prev) = seen.insert(bytes.clone(), m.clone()) {
                assert_eq!(prev, m);
            }
            distinct.insert(format!("{m:?}"));
        }
        assert_eq!(seen.len(), distinct.len());
    }
}
