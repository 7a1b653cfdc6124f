//! Framing for messages on capability channels.
//!
//! ```text
//! frame   = total-len:u32le kind:u8 sequence:u64le attr*
//! attr    = tag:u8 name-len:u8 name value-len:u32le value
//! ```
//!
//! `total-len` counts the whole frame including itself. Kinds are
//! `1` request and `2` response. Value tags are `1` UTF-8 string, `2`
//! signed 64-bit integer (8 bytes, little-endian), `3` opaque bytes and `4`
//! descriptor reference (u32le index into the descriptors that travel with
//! the frame out of band).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

pub const MAX_FRAME_BYTES: usize = 1024 * 1024;
/// Length prefix, kind and sequence.
pub const HEADER_BYTES: usize = 4 + 1 + 8;
pub const MAX_ATTR_NAME: usize = 255;

const TAG_STRING: u8 = 1;
const TAG_INTEGER: u8 = 2;
const TAG_BYTES: u8 = 3;
const TAG_DESCRIPTOR: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Request,
    Response,
}

impl MessageKind {
    fn byte(self) -> u8 {
        match self {
            MessageKind::Request => 1,
            MessageKind::Response => 2,
        }
    }
}

/// Index of a descriptor in the list carried alongside a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DescriptorRef(pub u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttrValue {
    String(String),
    Integer(i64),
    Bytes(Vec<u8>),
    Descriptor(DescriptorRef),
}

impl AttrValue {
    fn tag(&self) -> u8 {
        match self {
            AttrValue::String(_) => TAG_STRING,
            AttrValue::Integer(_) => TAG_INTEGER,
            AttrValue::Bytes(_) => TAG_BYTES,
            AttrValue::Descriptor(_) => TAG_DESCRIPTOR,
        }
    }

    fn encoded_len(&self) -> usize {
        match self {
            AttrValue::String(s) => s.len(),
            AttrValue::Integer(_) => 8,
            AttrValue::Bytes(b) => b.len(),
            AttrValue::Descriptor(_) => 4,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::String(s) => f.write_str(s),
            AttrValue::Integer(i) => write!(f, "{i}"),
            AttrValue::Bytes(b) => {
                for byte in b {
                    write!(f, "{byte:02x}")?;
                }
                Ok(())
            }
            AttrValue::Descriptor(d) => write!(f, "fd#{}", d.0),
        }
    }
}

impl From<&str> for AttrValue {
    fn from(s: &str) -> Self {
        AttrValue::String(s.to_string())
    }
}

impl From<String> for AttrValue {
    fn from(s: String) -> Self {
        AttrValue::String(s)
    }
}

impl From<i64> for AttrValue {
    fn from(i: i64) -> Self {
        AttrValue::Integer(i)
    }
}

impl From<Vec<u8>> for AttrValue {
    fn from(b: Vec<u8>) -> Self {
        AttrValue::Bytes(b)
    }
}

impl From<DescriptorRef> for AttrValue {
    fn from(d: DescriptorRef) -> Self {
        AttrValue::Descriptor(d)
    }
}

/// One request or response.
///
/// Requests always carry a string `cmd`. Responses carry either an integer
/// `error` (optionally with a string `detail`) or result attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMessage {
    pub kind: MessageKind,
    pub sequence: u64,
    pub attrs: BTreeMap<String, AttrValue>,
}

impl ChannelMessage {
    pub fn request(sequence: u64, cmd: &str) -> Self {
        let mut attrs = BTreeMap::new();
        attrs.insert("cmd".to_string(), AttrValue::from(cmd));
        ChannelMessage { kind: MessageKind::Request, sequence, attrs }
    }

    pub fn response(sequence: u64) -> Self {
        ChannelMessage { kind: MessageKind::Response, sequence, attrs: BTreeMap::new() }
    }

    pub fn error(sequence: u64, code: i32) -> Self {
        ChannelMessage::response(sequence).with("error", i64::from(code))
    }

    pub fn with(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.insert(name.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&AttrValue> {
        self.attrs.get(name)
    }

    pub fn get_str(&self, name: &str) -> Option<&str> {
        match self.attrs.get(name) {
            Some(AttrValue::String(s)) => Some(s),
            _ => None,
        }
    }

    pub fn get_int(&self, name: &str) -> Option<i64> {
        match self.attrs.get(name) {
            Some(AttrValue::Integer(i)) => Some(*i),
            _ => None,
        }
    }

    pub fn get_bytes(&self, name: &str) -> Option<&[u8]> {
        match self.attrs.get(name) {
            Some(AttrValue::Bytes(b)) => Some(b),
            _ => None,
        }
    }

    pub fn get_descriptor(&self, name: &str) -> Option<DescriptorRef> {
        match self.attrs.get(name) {
            Some(AttrValue::Descriptor(d)) => Some(*d),
            _ => None,
        }
    }

    pub fn cmd(&self) -> Option<&str> {
        self.get_str("cmd")
    }

    /// Error code of an error response.
    pub fn error_code(&self) -> Option<i32> {
        match self.kind {
            MessageKind::Response => self.get_int("error").map(|c| c as i32),
            MessageKind::Request => None,
        }
    }

    pub fn descriptors(&self) -> impl Iterator<Item = DescriptorRef> + '_ {
        self.attrs.values().filter_map(|v| match v {
            AttrValue::Descriptor(d) => Some(*d),
            _ => None,
        })
    }

    /// Checks the per-kind invariants and attribute names.
    pub fn validate(&self) -> Result<(), WireError> {
        for name in self.attrs.keys() {
            if name.is_empty() || name.len() > MAX_ATTR_NAME || !name.is_ascii() {
                return Err(WireError::InvalidAttrName);
            }
        }
        match self.kind {
            MessageKind::Request => {
                if self.cmd().is_none() {
                    return Err(WireError::InvalidMessage("request without string cmd"));
                }
                if self.descriptors().next().is_some() {
                    return Err(WireError::InvalidMessage("descriptor in request"));
                }
            }
            MessageKind::Response => {
                if let Some(err) = self.attrs.get("error") {
                    if !matches!(err, AttrValue::Integer(_)) {
                        return Err(WireError::InvalidMessage("error attr is not an integer"));
                    }
                    let extra = self.attrs.iter().any(|(k, v)| match k.as_str() {
                        "error" => false,
                        "detail" => !matches!(v, AttrValue::String(_)),
                        _ => true,
                    });
                    if extra {
                        return Err(WireError::InvalidMessage("error response with results"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.attrs.iter().map(|(k, v)| 1 + 1 + k.len() + 4 + v.encoded_len()).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WireError {
    MessageTooLarge { size: usize },
    InvalidAttrName,
    InvalidMessage(&'static str),
    TruncatedFrame { declared: usize, available: usize },
    LengthMismatch { declared: usize, actual: usize },
    UnknownValueTag(u8),
    UnknownKind(u8),
    InvalidUtf8,
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireError::MessageTooLarge { size } => {
                write!(f, "message of {size} bytes exceeds {MAX_FRAME_BYTES}")
            }
            WireError::InvalidAttrName => f.write_str("attribute name must be 1-255 ASCII bytes"),
            WireError::InvalidMessage(why) => write!(f, "invalid message: {why}"),
            WireError::TruncatedFrame { declared, available } => {
                write!(f, "truncated frame: {available} of {declared} bytes")
            }
            WireError::LengthMismatch { declared, actual } => {
                write!(f, "frame declares {declared} bytes but contains {actual}")
            }
            WireError::UnknownValueTag(tag) => write!(f, "unknown value tag {tag:#04x}"),
            WireError::UnknownKind(kind) => write!(f, "unknown message kind {kind:#04x}"),
            WireError::InvalidUtf8 => f.write_str("string attribute is not UTF-8"),
        }
    }
}

impl core::error::Error for WireError {}

pub fn encode_message(msg: &ChannelMessage) -> Result<Vec<u8>, WireError> {
    msg.validate()?;
    let size = msg.encoded_len();
    if size > MAX_FRAME_BYTES {
        return Err(WireError::MessageTooLarge { size });
    }
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.push(msg.kind.byte());
    out.extend_from_slice(&msg.sequence.to_le_bytes());
    for (name, value) in &msg.attrs {
        out.push(value.tag());
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.encoded_len() as u32).to_le_bytes());
        match value {
            AttrValue::String(s) => out.extend_from_slice(s.as_bytes()),
            AttrValue::Integer(i) => out.extend_from_slice(&i.to_le_bytes()),
            AttrValue::Bytes(b) => out.extend_from_slice(b),
            AttrValue::Descriptor(d) => out.extend_from_slice(&d.0.to_le_bytes()),
        }
    }
    debug_assert_eq!(out.len(), size);
    Ok(out)
}

/// Total frame length announced by the first four bytes of a frame.
pub fn frame_len(prefix: [u8; 4]) -> usize {
    u32::from_le_bytes(prefix) as usize
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    declared: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or(WireError::LengthMismatch { declared: self.declared, actual: self.pos + n })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes exactly one frame; `data` must not contain trailing bytes.
pub fn decode_message(data: &[u8]) -> Result<ChannelMessage, WireError> {
    if data.len() < 4 {
        return Err(WireError::TruncatedFrame { declared: HEADER_BYTES, available: data.len() });
    }
    let declared = frame_len(data[..4].try_into().unwrap());
    if declared > MAX_FRAME_BYTES {
        return Err(WireError::MessageTooLarge { size: declared });
    }
    if declared > data.len() {
        return Err(WireError::TruncatedFrame { declared, available: data.len() });
    }
    if declared < data.len() || declared < HEADER_BYTES {
        return Err(WireError::LengthMismatch { declared, actual: data.len() });
    }
    let mut cur = Cursor { data, pos: 4, declared };
    let kind = match cur.u8()? {
        1 => MessageKind::Request,
        2 => MessageKind::Response,
        other => return Err(WireError::UnknownKind(other)),
    };
    let sequence = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let mut attrs = BTreeMap::new();
    while cur.pos < data.len() {
        let tag = cur.u8()?;
        let name_len = cur.u8()? as usize;
        let name = core::str::from_utf8(cur.take(name_len)?).map_err(|_| WireError::InvalidAttrName)?.to_string();
        let value_len = cur.u32()? as usize;
        let raw = cur.take(value_len)?;
        let value = match tag {
            TAG_STRING => AttrValue::String(core::str::from_utf8(raw).map_err(|_| WireError::InvalidUtf8)?.to_string()),
            TAG_INTEGER => AttrValue::Integer(i64::from_le_bytes(
                raw.try_into().map_err(|_| WireError::LengthMismatch { declared: 8, actual: raw.len() })?,
            )),
            TAG_BYTES => AttrValue::Bytes(raw.to_vec()),
            TAG_DESCRIPTOR => AttrValue::Descriptor(DescriptorRef(u32::from_le_bytes(
                raw.try_into().map_err(|_| WireError::LengthMismatch { declared: 4, actual: raw.len() })?,
            ))),
            other => return Err(WireError::UnknownValueTag(other)),
        };
        if attrs.insert(name, value).is_some() {
            return Err(WireError::InvalidMessage("duplicate attribute"));
        }
    }
    let msg = ChannelMessage { kind, sequence, attrs };
    msg.validate()?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn open_request() -> ChannelMessage {
        ChannelMessage::request(1, "open").with("name", "test/0")
    }

    #[test]
    fn open_request_round_trips() {
        let msg = open_request();
        let frame = encode_message(&msg).unwrap();
        assert_eq!(decode_message(&frame).unwrap(), msg);
        assert_eq!(msg.cmd(), Some("open"));
        assert_eq!(msg.get_str("name"), Some("test/0"));
    }

    #[test]
    fn cmd_only_frame_layout() {
        // header 4+1+8, then tag 1 + name-len 1 + "cmd" 3 + value-len 4 + "open" 4
        let frame = encode_message(&ChannelMessage::request(1, "open")).unwrap();
        assert_eq!(frame.len(), 4 + 1 + 8 + (1 + 1 + 3 + 4 + 4));
        let mut want = vec![26, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        want.extend_from_slice(&[1, 3, b'c', b'm', b'd', 4, 0, 0, 0, b'o', b'p', b'e', b'n']);
        assert_eq!(frame, want);
    }

    #[test]
    fn truncated_and_corrupt_frames() {
        let frame = encode_message(&open_request()).unwrap();
        let declared = frame.len();
        assert_eq!(
            decode_message(&frame[..declared - 1]),
            Err(WireError::TruncatedFrame { declared, available: declared - 1 })
        );
        let mut trailing = frame.clone();
        trailing.push(0);
        assert!(matches!(decode_message(&trailing), Err(WireError::LengthMismatch { .. })));

        // First attribute tag sits right after the header.
        let mut bad_tag = frame.clone();
        bad_tag[HEADER_BYTES] = 0xFF;
        assert_eq!(decode_message(&bad_tag), Err(WireError::UnknownValueTag(0xFF)));

        let mut bad_kind = frame;
        bad_kind[4] = 9;
        assert_eq!(decode_message(&bad_kind), Err(WireError::UnknownKind(9)));
    }

    #[test]
    fn invariants_enforced_on_encode() {
        let mut no_cmd = ChannelMessage::request(1, "x");
        no_cmd.attrs.clear();
        assert!(matches!(encode_message(&no_cmd), Err(WireError::InvalidMessage(_))));

        let fd_in_request = ChannelMessage::request(1, "x").with("fd", DescriptorRef(0));
        assert!(matches!(encode_message(&fd_in_request), Err(WireError::InvalidMessage(_))));

        let both = ChannelMessage::error(1, 93).with("fd", DescriptorRef(0));
        assert!(matches!(encode_message(&both), Err(WireError::InvalidMessage(_))));
        assert!(encode_message(&ChannelMessage::error(1, 93).with("detail", "why")).is_ok());

        let long = "n".repeat(256);
        let bad_name = ChannelMessage::request(1, "x").with(&long, 1i64);
        assert_eq!(encode_message(&bad_name), Err(WireError::InvalidAttrName));
        let empty_name = ChannelMessage::request(1, "x").with("", 1i64);
        assert_eq!(encode_message(&empty_name), Err(WireError::InvalidAttrName));
    }

    #[test]
    fn size_limit() {
        let big = ChannelMessage::request(1, "x").with("b", vec![0u8; MAX_FRAME_BYTES]);
        assert!(matches!(encode_message(&big), Err(WireError::MessageTooLarge { .. })));
    }

    fn arb_value(response: bool) -> BoxedStrategy<AttrValue> {
        let base = prop_oneof![
            "\\PC{0,16}".prop_map(AttrValue::String),
            any::<i64>().prop_map(AttrValue::Integer),
            proptest::collection::vec(any::<u8>(), 0..32).prop_map(AttrValue::Bytes),
        ];
        if response {
            prop_oneof![base, any::<u32>().prop_map(|d| AttrValue::Descriptor(DescriptorRef(d)))].boxed()
        } else {
            base.boxed()
        }
    }

    fn arb_message() -> impl Strategy<Value = ChannelMessage> {
        any::<bool>().prop_flat_map(|response| {
            (any::<u64>(), proptest::collection::btree_map("[a-z_]{1,12}", arb_value(response), 0..6), "[a-z_]{1,10}")
                .prop_map(move |(seq, mut attrs, cmd)| {
                    attrs.remove("error");
                    if response {
                        ChannelMessage { kind: MessageKind::Response, sequence: seq, attrs }
                    } else {
                        attrs.insert("cmd".into(), AttrValue::String(cmd));
                        ChannelMessage { kind: MessageKind::Request, sequence: seq, attrs }
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(msg in arb_message()) {
            let frame = encode_message(&msg).unwrap();
            prop_assert_eq!(frame.len(), msg.encoded_len());
            prop_assert_eq!(decode_message(&frame).unwrap(), msg);
        }

        #[test]
        fn every_strict_prefix_is_truncated(msg in arb_message()) {
            let frame = encode_message(&msg).unwrap();
            for cut in 0..frame.len() {
                let is_truncated =
                    matches!(decode_message(&frame[..cut]), Err(WireError::TruncatedFrame { .. }));
                prop_assert!(is_truncated, "prefix {}", cut);
            }
        }

        #[test]
        fn decoder_never_panics(data in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_message(&data);
        }
    }
}
