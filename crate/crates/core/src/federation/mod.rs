//! Simulated federation: transport, cost ledger and the FedNN round.

mod ledger;
mod network;
mod protocol;

pub use ledger::{closed_form_comm, ledger_report, round2, CostError, CostLedger, LedgerReport, Method, Tally};
pub use network::{client_node, FrameError, Message, MessageKind, NodeId, SimNetwork, FRAME_HEADER_LEN, SERVER};
pub use protocol::{
    fednn_wire_bytes, run_fednn_round, shuffle_v_encrypt, GlobalSealedStore, ProtocolError, RoundOutcome, RoundSeeds,
};
