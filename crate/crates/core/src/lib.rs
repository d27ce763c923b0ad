//! Polar code simulation stack.
//!
//! The crate covers everything below the learned policy: bit-domain polar
//! encoding with CRC attachment ([`code`]), BPSK over AWGN and Rayleigh
//! fading channels ([`channel`]), SC / SCL / CA-SCL decoding ([`decoder`]),
//! the non-learned reliability sequences ([`construction`]) and the
//! Monte-Carlo BLER machinery used as a reward signal ([`reward`]).

pub mod channel;
pub mod code;
pub mod construction;
pub mod decoder;
pub mod digest;
mod error;
pub mod reward;

pub use error::{Error, Result};

/// Hard bits are stored one per byte, always 0 or 1.
pub type Bit = u8;
