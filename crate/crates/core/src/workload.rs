//! Synthetic chains for the experiments: transfer sizes, descriptor layout
//! with a controlled fraction of non-sequential links, and seeded payload.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{
    build_chain, ConfigFlags, DescriptorChain, DescriptorError, Placement, TransferSpec,
    DESCRIPTOR_ALIGN,
};
use crate::mem::{MemError, Memory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeDistribution {
    Fixed(u32),
    /// Each transfer draws one of these sizes.
    Set(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextPlacement {
    Sequential,
    /// A `1 - hit_rate` share of links jump forward instead of pointing at
    /// the next 32-byte slot.
    RandomizedNext {
        hit_rate: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub transfer_count: usize,
    pub sizes: SizeDistribution,
    pub placement: NextPlacement,
    /// Number of independently launched chains the transfers are split into.
    pub chains: usize,
    pub descriptor_base: u64,
    pub source_base: u64,
    pub destination_base: u64,
    /// Set the interrupt bit on each chain's final descriptor.
    pub irq_on_last: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            transfer_count: 272,
            sizes: SizeDistribution::Fixed(64),
            placement: NextPlacement::Sequential,
            chains: 1,
            descriptor_base: 0x1000_0000,
            source_base: 0x2000_0000,
            destination_base: 0x6000_0000,
            irq_on_last: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("hit rate {0} outside [0, 1]")]
    HitRate(f64),
    #[error("size set is empty")]
    NoSizes,
    #[error("need at least one chain and one transfer per chain")]
    ChainCount,
    #[error("payload regions overlap")]
    Overlap,
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Memory(#[from] MemError),
}

/// A generated workload: the chains plus the flattened transfer list.
#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub chains: Vec<DescriptorChain>,
    pub transfers: Vec<TransferSpec>,
    /// Links whose `next` is not the following 32-byte slot.
    pub jump_links: usize,
    pub payload_seed: u64,
}

impl WorkloadSpec {
    pub fn fixed(transfer_count: usize, size: u32) -> Self {
        WorkloadSpec {
            transfer_count,
            sizes: SizeDistribution::Fixed(size),
            ..Default::default()
        }
    }

    pub fn with_hit_rate(mut self, hit_rate: f64, seed: u64) -> Self {
        self.placement = NextPlacement::RandomizedNext { hit_rate, seed };
        self
    }

    /// Nominal transfer size used for reporting.
    pub fn nominal_size(&self) -> u32 {
        match &self.sizes {
            SizeDistribution::Fixed(n) => *n,
            SizeDistribution::Set(v) => v.first().copied().unwrap_or(0),
        }
    }

    pub fn hit_rate(&self) -> f64 {
        match self.placement {
            NextPlacement::Sequential => 1.0,
            NextPlacement::RandomizedNext { hit_rate, .. } => hit_rate,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if let NextPlacement::RandomizedNext { hit_rate, .. } = self.placement {
            if !(0.0..=1.0).contains(&hit_rate) {
                return Err(WorkloadError::HitRate(hit_rate));
            }
        }
        if let SizeDistribution::Set(v) = &self.sizes {
            if v.is_empty() {
                return Err(WorkloadError::NoSizes);
            }
        }
        if self.chains == 0 || self.transfer_count < self.chains {
            return Err(WorkloadError::ChainCount);
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<Workload, WorkloadError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<u32> = (0..self.transfer_count)
            .map(|_| match &self.sizes {
                SizeDistribution::Fixed(n) => *n,
                SizeDistribution::Set(v) => v[rng.gen_range(0..v.len())],
            })
            .collect();

        // payload regions, each aligned to 64 bytes
        let mut transfers = Vec::with_capacity(sizes.len());
        let (mut src, mut dst) = (self.source_base, self.destination_base);
        for &len in &sizes {
            transfers.push(TransferSpec {
                source: src,
                destination: dst,
                length: len,
                config: ConfigFlags::default(),
            });
            src += (len as u64).next_multiple_of(64).max(64);
            dst += (len as u64).next_multiple_of(64).max(64);
        }
        let src_end = src;
        let dst_end = dst;
        let overlap = self.source_base < dst_end && self.destination_base < src_end;
        if overlap {
            return Err(WorkloadError::Overlap);
        }

        let per_chain = self.transfer_count / self.chains;
        let mut bounds = Vec::with_capacity(self.chains);
        let mut start = 0;
        for c in 0..self.chains {
            let extra = usize::from(c < self.transfer_count % self.chains);
            bounds.push(start..start + per_chain + extra);
            start += per_chain + extra;
        }
        let links: usize = bounds.iter().map(|r| r.len() - 1).sum();

        // choose exactly round((1 - h) * links) links to jump
        let (jumps, jump_rng_seed) = match self.placement {
            NextPlacement::Sequential => (0, seed),
            NextPlacement::RandomizedNext { hit_rate, seed } => {
                (((1.0 - hit_rate) * links as f64).round() as usize, seed)
            }
        };
        let mut jump_rng = ChaCha8Rng::seed_from_u64(jump_rng_seed);
        let mut is_jump = vec![false; links];
        for j in is_jump.iter_mut().take(jumps) {
            *j = true;
        }
        is_jump.shuffle(&mut jump_rng);

        let mut chains = Vec::with_capacity(self.chains);
        let mut addr = self.descriptor_base;
        let mut link = 0;
        for range in bounds {
            let mut specs = transfers[range.clone()].to_vec();
            if self.irq_on_last {
                specs.last_mut().unwrap().config.set_irq(true);
            }
            let mut addrs = Vec::with_capacity(specs.len());
            for i in 0..specs.len() {
                if i > 0 {
                    let step = if is_jump[link] {
                        DESCRIPTOR_ALIGN * (1 + jump_rng.gen_range(1..=8))
                    } else {
                        DESCRIPTOR_ALIGN
                    };
                    link += 1;
                    addr += step;
                }
                addrs.push(addr);
            }
            // leave a gap so a chain's speculation never lands on the next chain
            addr += DESCRIPTOR_ALIGN * 64;
            chains.push(build_chain(
                &specs,
                addrs[0],
                &Placement::ExplicitAddresses(addrs),
            )?);
        }
        let transfers = chains.iter().flat_map(|c| c.transfers()).collect();
        Ok(Workload {
            chains,
            transfers,
            jump_links: jumps,
            payload_seed: seed,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IntegrityError {
    #[error("transfer {index}: destination {destination:#x} differs from source {src:#x} at byte {offset}")]
    Payload {
        index: usize,
        src: u64,
        destination: u64,
        offset: usize,
    },
    #[error("descriptor {0:#x}: completion marker missing")]
    Marker(u64),
    #[error("descriptor {0:#x}: fields after the marker were modified")]
    Clobbered(u64),
    #[error(transparent)]
    Memory(#[from] MemError),
}

impl Workload {
    pub fn heads(&self) -> Vec<u64> {
        self.chains.iter().map(|c| c.head_address).collect()
    }

    pub fn descriptor_count(&self) -> usize {
        self.chains.iter().map(|c| c.len()).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.transfers.iter().map(|t| t.length as u64).sum()
    }

    /// Backdoor-load descriptors and seeded source payload.
    pub fn preload(&self, mem: &mut Memory) -> Result<(), WorkloadError> {
        for chain in &self.chains {
            for (addr, d) in &chain.entries {
                mem.backdoor_write(*addr, &d.encode())?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.payload_seed ^ 0x5eed_da7a);
        for t in &self.transfers {
            let mut bytes = vec![0u8; t.length as usize];
            rng.fill_bytes(&mut bytes);
            mem.backdoor_write(t.source, &bytes)?;
        }
        Ok(())
    }

    /// Destination equals source for every transfer.
    pub fn check_payload(&self, mem: &Memory) -> Result<(), IntegrityError> {
        for (index, t) in self.transfers.iter().enumerate() {
            let src = mem.backdoor_read(t.source, t.length as usize)?;
            let dst = mem.backdoor_read(t.destination, t.length as usize)?;
            if let Some(offset) = src.iter().zip(&dst).position(|(a, b)| a != b) {
                return Err(IntegrityError::Payload {
                    index,
                    src: t.source,
                    destination: t.destination,
                    offset,
                });
            }
        }
        Ok(())
    }

    /// Every descriptor carries the all-ones marker in bytes 0..8 and is
    /// otherwise unchanged.
    pub fn check_markers(&self, mem: &Memory) -> Result<(), IntegrityError> {
        for chain in &self.chains {
            for (addr, d) in &chain.entries {
                let now = mem.backdoor_read(*addr, 32)?;
                if now[..8].iter().any(|&b| b != 0xFF) {
                    return Err(IntegrityError::Marker(*addr));
                }
                if now[8..] != d.encode()[8..] {
                    return Err(IntegrityError::Clobbered(*addr));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{validate_chain, END_OF_CHAIN};
    use crate::mem::MemoryConfig;

    #[test]
    fn sequential_layout() {
        let w = WorkloadSpec::fixed(3, 64).generate(1).unwrap();
        let c = &w.chains[0];
        let addrs: Vec<_> = c.addresses().collect();
        assert_eq!(addrs, vec![0x1000_0000, 0x1000_0020, 0x1000_0040]);
        assert_eq!(c.entries[2].1.next, END_OF_CHAIN);
        assert!(c.entries[2].1.config.irq_on_completion());
        assert!(!c.entries[0].1.config.irq_on_completion());
        assert_eq!(w.jump_links, 0);
    }

    #[test]
    fn exact_jump_count() {
        for h in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let w = WorkloadSpec::fixed(101, 64)
                .with_hit_rate(h, 7)
                .generate(7)
                .unwrap();
            let c = &w.chains[0];
            let jumps = c
                .entries
                .windows(2)
                .filter(|p| p[1].0 != p[0].0 + 32)
                .count();
            assert_eq!(jumps, ((1.0 - h) * 100.0).round() as usize);
            assert_eq!(jumps, w.jump_links);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = WorkloadSpec {
            sizes: SizeDistribution::Set(vec![8, 64, 512]),
            ..WorkloadSpec::fixed(50, 0)
        }
        .with_hit_rate(0.5, 3);
        assert_eq!(spec.generate(9).unwrap(), spec.generate(9).unwrap());
        assert_ne!(spec.generate(9).unwrap(), spec.generate(10).unwrap());
    }

    #[test]
    fn preloaded_chain_validates() {
        let w = WorkloadSpec {
            chains: 3,
            ..WorkloadSpec::fixed(10, 64)
        }
        .with_hit_rate(0.3, 5)
        .generate(5)
        .unwrap();
        let mut mem = Memory::new(MemoryConfig::default());
        w.preload(&mut mem).unwrap();
        assert_eq!(w.descriptor_count(), 10);
        for chain in &w.chains {
            let back = validate_chain(&mem, chain.head_address, 100).unwrap();
            assert_eq!(&back, chain);
        }
        assert!(w.check_payload(&mem).is_err());
        assert!(matches!(
            w.check_markers(&mem),
            Err(IntegrityError::Marker(_))
        ));
    }

    #[test]
    fn rejects_bad_hit_rate() {
        let spec = WorkloadSpec::fixed(4, 64).with_hit_rate(1.5, 0);
        assert_eq!(spec.generate(0), Err(WorkloadError::HitRate(1.5)));
    }
}
