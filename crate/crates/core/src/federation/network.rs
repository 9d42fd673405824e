//! In-process deterministic message transport.
//!
//! Frames are `payload_len u32 | kind u8 | sender u16 | receiver u16 | payload`,
//! little-endian. Every `send` is recorded once in the attached
//! [`CostLedger`]; delivery is FIFO per receiver.

use std::collections::VecDeque;

use thiserror::Error;

use super::ledger::CostLedger;

pub type NodeId = u16;
pub const SERVER: NodeId = 0;

/// Node id of client `index` (0-based).
pub fn client_node(index: usize) -> NodeId {
    (index + 1) as NodeId
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MessageKind {
    BroadcastModel = 1,
    BroadcastKE = 2,
    UploadSealedStore = 3,
    BroadcastGlobalStore = 4,
    ModelUpdate = 5,
    ModelAggregate = 6,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::BroadcastModel,
        MessageKind::BroadcastKE,
        MessageKind::UploadSealedStore,
        MessageKind::BroadcastGlobalStore,
        MessageKind::ModelUpdate,
        MessageKind::ModelAggregate,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::BroadcastModel => "broadcast_model",
            MessageKind::BroadcastKE => "broadcast_ke",
            MessageKind::UploadSealedStore => "upload_sealed_store",
            MessageKind::BroadcastGlobalStore => "broadcast_global_store",
            MessageKind::ModelUpdate => "model_update",
            MessageKind::ModelAggregate => "model_aggregate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated")]
    Truncated,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
}

pub const FRAME_HEADER_LEN: usize = 9;

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), FrameError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(FrameError::Truncated);
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let kind = MessageKind::from_u8(bytes[4]).ok_or(FrameError::UnknownKind(bytes[4]))?;
        let sender = u16::from_le_bytes([bytes[5], bytes[6]]);
        let receiver = u16::from_le_bytes([bytes[7], bytes[8]]);
        let end = FRAME_HEADER_LEN + len;
        if bytes.len() < end {
            return Err(FrameError::Truncated);
        }
        Ok((
            Self {
                kind,
                sender,
                receiver,
                payload: bytes[FRAME_HEADER_LEN..end].to_vec(),
            },
            end,
        ))
    }
}

/// Single-threaded network simulator.
#[derive(Debug, Default)]
pub struct SimNetwork {
    queue: VecDeque<Vec<u8>>,
    ledger: CostLedger,
    /// Every frame ever sent, in send order.
    wire_log: Vec<Vec<u8>>,
    keep_log: bool,
}

impl SimNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps a copy of every frame for later inspection.
    pub fn with_wire_log() -> Self {
        Self {
            keep_log: true,
            ..Self::default()
        }
    }

    pub fn send(&mut self, msg: Message) {
        self.ledger
            .record(msg.kind, msg.sender, msg.receiver, msg.payload.len() as u64);
        let frame = msg.encode();
        if self.keep_log {
            self.wire_log.push(frame.clone());
        }
        self.queue.push_back(frame);
    }

    /// Next pending message addressed to `node`.
    pub fn recv(&mut self, node: NodeId) -> Option<Message> {
        let pos = self
            .queue
            .iter()
            .position(|f| u16::from_le_bytes([f[7], f[8]]) == node)?;
        let frame = self.queue.remove(pos).expect("position is valid");
        Some(Message::decode(&frame).expect("frames are produced by encode").0)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut CostLedger {
        &mut self.ledger
    }

    pub fn into_ledger(self) -> CostLedger {
        self.ledger
    }

    pub fn wire_log(&self) -> &[Vec<u8>] {
        &self.wire_log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_and_layout() {
        let m = Message {
            kind: MessageKind::UploadSealedStore,
            sender: 3,
            receiver: SERVER,
            payload: vec![9, 8, 7],
        };
        let f = m.encode();
        assert_eq!(f.len(), 12);
        assert_eq!(&f[..4], &3u32.to_le_bytes());
        assert_eq!(f[4], 3);
        assert_eq!(&f[5..7], &3u16.to_le_bytes());
        let (back, used) = Message::decode(&f).unwrap();
        assert_eq!(back, m);
        assert_eq!(used, 12);
        assert_eq!(Message::decode(&f[..11]), Err(FrameError::Truncated));
        let mut bad = f.clone();
        bad[4] = 42;
        assert_eq!(Message::decode(&bad), Err(FrameError::UnknownKind(42)));
    }

    #[test]
    fn fifo_per_receiver_and_ledger() {
        let mut net = SimNetwork::new();
        for (r, p) in [(1u16, 10usize), (2, 20), (1, 30)] {
            net.send(Message {
                kind: MessageKind::BroadcastModel,
                sender: SERVER,
                receiver: r,
                payload: vec![0; p],
            });
        }
        assert_eq!(net.recv(1).unwrap().payload.len(), 10);
        assert_eq!(net.recv(1).unwrap().payload.len(), 30);
        assert!(net.recv(1).is_none());
        assert_eq!(net.pending(), 1);
        assert_eq!(net.ledger().total_bytes(), 60);
        assert_eq!(net.ledger().messages(MessageKind::BroadcastModel), 3);
    }
}
