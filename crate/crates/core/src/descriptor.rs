//! The 32-byte transfer descriptor and descriptor chains.
//!
//! Layout (little-endian):
//!
//! | offset | field         | width |
//! |--------|---------------|-------|
//! | 0      | `length`      | u32   |
//! | 4      | `config`      | u32   |
//! | 8      | `next`        | u64   |
//! | 16     | `source`      | u64   |
//! | 24     | `destination` | u64   |
//!
//! A `next` of all ones terminates the chain.

use std::collections::HashSet;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::{MemError, MemoryView};

pub const DESCRIPTOR_BYTES: usize = 32;
pub const DESCRIPTOR_ALIGN: u64 = DESCRIPTOR_BYTES as u64;
pub const END_OF_CHAIN: u64 = u64::MAX;

/// Byte offset of the `next` field inside an encoded descriptor.
pub const NEXT_OFFSET: usize = 8;

const CHAIN_FILE_MAGIC: &[u8; 8] = b"DCHAIN01";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DescriptorError {
    #[error("descriptor record must be {DESCRIPTOR_BYTES} bytes, got {0}")]
    RecordSize(usize),
    #[error("descriptor address {0:#x} is not 32-byte aligned")]
    Misaligned(u64),
    #[error("descriptor address {0:#x} used twice")]
    DuplicateAddress(u64),
    #[error("expected {expected} explicit addresses, got {got}")]
    AddressCount { expected: usize, got: usize },
    #[error("chain placement overflows the address space")]
    AddressOverflow,
    #[error("cycle detected: descriptor {0:#x} reached twice")]
    Cycle(u64),
    #[error("chain exceeds {0} descriptors")]
    TooLong(usize),
    #[error("descriptor at {addr:#x} unreadable: {source}")]
    Unreadable { addr: u64, source: MemError },
}

/// Flag word of a descriptor. Bit 0 requests an interrupt on completion; the
/// remaining bits are carried through untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigFlags(pub u32);

impl ConfigFlags {
    pub const IRQ_ON_COMPLETION: u32 = 1;

    pub fn with_irq(irq: bool) -> Self {
        ConfigFlags(if irq { Self::IRQ_ON_COMPLETION } else { 0 })
    }

    pub fn irq_on_completion(self) -> bool {
        self.0 & Self::IRQ_ON_COMPLETION != 0
    }

    pub fn set_irq(&mut self, on: bool) {
        if on {
            self.0 |= Self::IRQ_ON_COMPLETION;
        } else {
            self.0 &= !Self::IRQ_ON_COMPLETION;
        }
    }

    pub fn reserved(self) -> u32 {
        self.0 & !Self::IRQ_ON_COMPLETION
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub length: u32,
    pub config: ConfigFlags,
    pub next: u64,
    pub source: u64,
    pub destination: u64,
}

impl Descriptor {
    pub fn is_last(&self) -> bool {
        self.next == END_OF_CHAIN
    }

    pub fn encode(&self) -> [u8; DESCRIPTOR_BYTES] {
        let mut out = [0u8; DESCRIPTOR_BYTES];
        out[0..4].copy_from_slice(&self.length.to_le_bytes());
        out[4..8].copy_from_slice(&self.config.0.to_le_bytes());
        out[8..16].copy_from_slice(&self.next.to_le_bytes());
        out[16..24].copy_from_slice(&self.source.to_le_bytes());
        out[24..32].copy_from_slice(&self.destination.to_le_bytes());
        out
    }

    pub fn decode(record: &[u8]) -> Result<Self, DescriptorError> {
        if record.len() != DESCRIPTOR_BYTES {
            return Err(DescriptorError::RecordSize(record.len()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(record[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(record[o..o + 8].try_into().unwrap());
        Ok(Descriptor {
            length: u32_at(0),
            config: ConfigFlags(u32_at(4)),
            next: u64_at(8),
            source: u64_at(16),
            destination: u64_at(24),
        })
    }
}

/// Reads the `next` field out of a (possibly partial) encoded record.
pub fn next_field(record: &[u8]) -> Option<u64> {
    record
        .get(NEXT_OFFSET..NEXT_OFFSET + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

/// One linear transfer before it is placed in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub source: u64,
    pub destination: u64,
    pub length: u32,
    pub config: ConfigFlags,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Entry `i` lives at `base + 32 * i`.
    Sequential,
    /// Entry `i` lives at `addresses[i]`.
    ExplicitAddresses(Vec<u64>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DescriptorChain {
    pub head_address: u64,
    pub entries: Vec<(u64, Descriptor)>,
}

impl DescriptorChain {
    pub fn empty() -> Self {
        DescriptorChain {
            head_address: END_OF_CHAIN,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn addresses(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|(a, _)| *a)
    }

    pub fn transfers(&self) -> Vec<TransferSpec> {
        self.entries
            .iter()
            .map(|(_, d)| TransferSpec {
                source: d.source,
                destination: d.destination,
                length: d.length,
                config: d.config,
            })
            .collect()
    }

    /// Serialize as `magic | count | addresses... | records...`, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CHAIN_FILE_MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (addr, _) in &self.entries {
            w.write_all(&addr.to_le_bytes())?;
        }
        for (_, d) in &self.entries {
            w.write_all(&d.encode())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHAIN_FILE_MAGIC {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "bad chain file magic",
            ));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let count = u64::from_le_bytes(word) as usize;
        let mut addrs = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            r.read_exact(&mut word)?;
            addrs.push(u64::from_le_bytes(word));
        }
        let mut entries = Vec::with_capacity(addrs.len());
        for addr in addrs {
            let mut rec = [0u8; DESCRIPTOR_BYTES];
            r.read_exact(&mut rec)?;
            let d = Descriptor::decode(&rec)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            entries.push((addr, d));
        }
        let head_address = entries.first().map_or(END_OF_CHAIN, |(a, _)| *a);
        Ok(DescriptorChain {
            head_address,
            entries,
        })
    }
}

fn check_aligned(addr: u64) -> Result<(), DescriptorError> {
    if !addr.is_multiple_of(DESCRIPTOR_ALIGN) {
        Err(DescriptorError::Misaligned(addr))
    } else {
        Ok(())
    }
}

/// Link `transfers` into a chain in input order.
pub fn build_chain(
    transfers: &[TransferSpec],
    base_address: u64,
    placement: &Placement,
) -> Result<DescriptorChain, DescriptorError> {
    let addresses: Vec<u64> = match placement {
        Placement::Sequential => {
            check_aligned(base_address)?;
            let span = (transfers.len() as u64)
                .checked_mul(DESCRIPTOR_ALIGN)
                .ok_or(DescriptorError::AddressOverflow)?;
            // the last slot must end below END_OF_CHAIN
            if base_address
                .checked_add(span)
                .is_none_or(|end| end > END_OF_CHAIN - DESCRIPTOR_ALIGN + 1)
            {
                return Err(DescriptorError::AddressOverflow);
            }
            (0..transfers.len() as u64)
                .map(|i| base_address + DESCRIPTOR_ALIGN * i)
                .collect()
        }
        Placement::ExplicitAddresses(addrs) => {
            if addrs.len() != transfers.len() {
                return Err(DescriptorError::AddressCount {
                    expected: transfers.len(),
                    got: addrs.len(),
                });
            }
            let mut seen = HashSet::new();
            for &a in addrs {
                check_aligned(a)?;
                if !seen.insert(a) {
                    return Err(DescriptorError::DuplicateAddress(a));
                }
            }
            addrs.clone()
        }
    };

    let entries = transfers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let next = addresses.get(i + 1).copied().unwrap_or(END_OF_CHAIN);
            (
                addresses[i],
                Descriptor {
                    length: t.length,
                    config: t.config,
                    next,
                    source: t.source,
                    destination: t.destination,
                },
            )
        })
        .collect();
    Ok(DescriptorChain {
        head_address: addresses.first().copied().unwrap_or(END_OF_CHAIN),
        entries,
    })
}

/// Walk a chain stored in memory starting at `head`.
pub fn validate_chain<M: MemoryView + ?Sized>(
    memory: &M,
    head: u64,
    max_len: usize,
) -> Result<DescriptorChain, DescriptorError> {
    if head == END_OF_CHAIN {
        return Ok(DescriptorChain::empty());
    }
    check_aligned(head)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    let mut addr = head;
    while addr != END_OF_CHAIN {
        check_aligned(addr)?;
        if !seen.insert(addr) {
            return Err(DescriptorError::Cycle(addr));
        }
        if entries.len() == max_len {
            return Err(DescriptorError::TooLong(max_len));
        }
        let bytes = memory
            .read_bytes(addr, DESCRIPTOR_BYTES)
            .map_err(|source| DescriptorError::Unreadable { addr, source })?;
        let d = Descriptor::decode(&bytes)?;
        entries.push((addr, d));
        addr = d.next;
    }
    Ok(DescriptorChain {
        head_address: head,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{Memory, MemoryConfig};
    use proptest::prelude::*;

    fn xfer(i: u64) -> TransferSpec {
        TransferSpec {
            source: 0x1000 + i * 0x100,
            destination: 0x9000 + i * 0x100,
            length: 64,
            config: ConfigFlags::default(),
        }
    }

    #[test]
    fn encode_layout() {
        let d = Descriptor {
            length: 64,
            config: ConfigFlags(1),
            next: END_OF_CHAIN,
            source: 0x1000,
            destination: 0x2000,
        };
        let b = d.encode();
        assert_eq!(&b[0..4], &[0x40, 0, 0, 0]);
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert!(b[8..16].iter().all(|&x| x == 0xFF));
        assert_eq!(&b[16..24], &0x1000u64.to_le_bytes());
        assert_eq!(&b[24..32], &0x2000u64.to_le_bytes());
    }

    #[test]
    fn zero_descriptor_encodes_to_zeros() {
        assert_eq!(Descriptor::default().encode(), [0u8; 32]);
    }

    #[test]
    fn all_ones_decodes_to_end_of_chain() {
        let d = Descriptor::decode(&[0xFF; 32]).unwrap();
        assert_eq!(d.next, END_OF_CHAIN);
        assert_eq!(d.length, 0xFFFF_FFFF);
        assert!(d.is_last());
    }

    #[test]
    fn wrong_record_size() {
        assert_eq!(
            Descriptor::decode(&[0; 31]),
            Err(DescriptorError::RecordSize(31))
        );
        assert_eq!(
            Descriptor::decode(&[0; 33]),
            Err(DescriptorError::RecordSize(33))
        );
    }

    #[test]
    fn reserved_config_bits_survive() {
        let mut c = ConfigFlags(0xDEAD_BEE0);
        c.set_irq(true);
        let d = Descriptor {
            config: c,
            ..Default::default()
        };
        let back = Descriptor::decode(&d.encode()).unwrap();
        assert_eq!(back.config.0, 0xDEAD_BEE1);
        assert_eq!(back.config.reserved(), 0xDEAD_BEE0);
        assert!(back.config.irq_on_completion());
    }

    #[test]
    fn sequential_chain() {
        let t: Vec<_> = (0..3).map(xfer).collect();
        let c = build_chain(&t, 0x8000, &Placement::Sequential).unwrap();
        let addrs: Vec<_> = c.addresses().collect();
        assert_eq!(addrs, vec![0x8000, 0x8020, 0x8040]);
        let nexts: Vec<_> = c.entries.iter().map(|(_, d)| d.next).collect();
        assert_eq!(nexts, vec![0x8020, 0x8040, END_OF_CHAIN]);
        assert_eq!(c.head_address, 0x8000);
    }

    #[test]
    fn single_transfer_chain() {
        let c = build_chain(&[xfer(0)], 0x40, &Placement::Sequential).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.entries[0].1.next, END_OF_CHAIN);
    }

    #[test]
    fn explicit_placement_links_given_addresses() {
        let t: Vec<_> = (0..4).map(xfer).collect();
        let addrs = vec![0x100, 0x400, 0x1E0, 0x2000];
        let c = build_chain(&t, 0, &Placement::ExplicitAddresses(addrs.clone())).unwrap();
        let nexts: Vec<_> = c.entries.iter().map(|(_, d)| d.next).collect();
        assert_eq!(nexts, vec![0x400, 0x1E0, 0x2000, END_OF_CHAIN]);

        let mut mem = Memory::new(MemoryConfig::default());
        for (a, d) in &c.entries {
            mem.backdoor_write(*a, &d.encode()).unwrap();
        }
        assert_eq!(validate_chain(&mem, c.head_address, 16).unwrap(), c);
    }

    #[test]
    fn misaligned_and_duplicate_rejected() {
        let t: Vec<_> = (0..2).map(xfer).collect();
        assert_eq!(
            build_chain(&t, 0x8010, &Placement::Sequential),
            Err(DescriptorError::Misaligned(0x8010))
        );
        assert_eq!(
            build_chain(&t, 0, &Placement::ExplicitAddresses(vec![0x40, 0x41])),
            Err(DescriptorError::Misaligned(0x41))
        );
        assert_eq!(
            build_chain(&t, 0, &Placement::ExplicitAddresses(vec![0x40, 0x40])),
            Err(DescriptorError::DuplicateAddress(0x40))
        );
    }

    #[test]
    fn sequential_placement_never_reaches_end_of_chain() {
        let t: Vec<_> = (0..2).map(xfer).collect();
        assert_eq!(
            build_chain(&t, u64::MAX - 63, &Placement::Sequential),
            Err(DescriptorError::AddressOverflow)
        );
        let c = build_chain(&t, u64::MAX - 63 - 32, &Placement::Sequential).unwrap();
        assert!(c.addresses().all(|a| a != END_OF_CHAIN));
    }

    #[test]
    fn validate_detects_self_loop() {
        let mut mem = Memory::new(MemoryConfig::default());
        let d = Descriptor {
            next: 0x200,
            ..Default::default()
        };
        mem.backdoor_write(0x200, &d.encode()).unwrap();
        assert_eq!(
            validate_chain(&mem, 0x200, 8),
            Err(DescriptorError::Cycle(0x200))
        );
    }

    #[test]
    fn validate_limits_length() {
        let t: Vec<_> = (0..5).map(xfer).collect();
        let c = build_chain(&t, 0x1000, &Placement::Sequential).unwrap();
        let mut mem = Memory::new(MemoryConfig::default());
        for (a, d) in &c.entries {
            mem.backdoor_write(*a, &d.encode()).unwrap();
        }
        assert_eq!(
            validate_chain(&mem, 0x1000, 4),
            Err(DescriptorError::TooLong(4))
        );
        assert_eq!(validate_chain(&mem, 0x1000, 5).unwrap().len(), 5);
    }

    #[test]
    fn validate_end_of_chain_head_is_empty() {
        let mem = Memory::new(MemoryConfig::default());
        let c = validate_chain(&mem, END_OF_CHAIN, 4).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn validate_reports_unreadable() {
        let mem = Memory::new(MemoryConfig {
            capacity: 0x1000,
            ..MemoryConfig::default()
        });
        assert!(matches!(
            validate_chain(&mem, 0x1000, 4),
            Err(DescriptorError::Unreadable { addr: 0x1000, .. })
        ));
    }

    #[test]
    fn chain_file_round_trip() {
        let t: Vec<_> = (0..3).map(xfer).collect();
        let c = build_chain(
            &t,
            0x8000,
            &Placement::ExplicitAddresses(vec![0x8000, 0x9000, 0x8020]),
        )
        .unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8 + 3 * 8 + 3 * 32);
        assert_eq!(DescriptorChain::read_from(&buf[..]).unwrap(), c);
        assert!(DescriptorChain::read_from(&buf[1..]).is_err());
    }

    fn arb_descriptor() -> impl Strategy<Value = Descriptor> {
        (
            any::<u32>(),
            any::<u32>(),
            any::<u64>(),
            any::<u64>(),
            any::<u64>(),
        )
            .prop_map(|(length, config, next, source, destination)| Descriptor {
                length,
                config: ConfigFlags(config),
                next,
                source,
                destination,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn descriptor_round_trip(d in arb_descriptor()) {
            prop_assert_eq!(Descriptor::decode(&d.encode()).unwrap(), d);
        }

        #[test]
        fn record_round_trip(rec in proptest::array::uniform32(any::<u8>())) {
            prop_assert_eq!(Descriptor::decode(&rec).unwrap().encode(), rec);
        }

        #[test]
        fn build_load_validate_is_identity(
            lens in proptest::collection::vec(0u32..10_000, 1..20),
            base_slot in 0u64..1024,
        ) {
            let t: Vec<_> = lens.iter().enumerate().map(|(i, &length)| TransferSpec {
                source: i as u64 * 0x10000,
                destination: 0x100_0000 + i as u64 * 0x10000,
                length,
                config: ConfigFlags::with_irq(i + 1 == lens.len()),
            }).collect();
            let c = build_chain(&t, base_slot * 32, &Placement::Sequential).unwrap();
            let mut mem = Memory::new(MemoryConfig::default());
            for (a, d) in &c.entries {
                mem.backdoor_write(*a, &d.encode()).unwrap();
            }
            let back = validate_chain(&mem, c.head_address, 64).unwrap();
            prop_assert_eq!(back.transfers(), t);
        }
    }
}
