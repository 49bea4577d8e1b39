use std::cell::RefCell;
use std::rc::Rc;

use dmac_core::driver::{DriverConfig, DriverSim, HandleState};
use dmac_core::mem::MemoryConfig;
use dmac_core::soc::{DmacConfig, Soc};

fn sim(cfg: DmacConfig) -> DriverSim {
    DriverSim::new(
        Soc::new(&cfg, MemoryConfig::with_latency(13)).unwrap(),
        DriverConfig::default(),
    )
}

fn fill(s: &mut DriverSim, addr: u64, len: usize, salt: u8) {
    let data: Vec<u8> = (0..len)
        .map(|i| (i as u8).wrapping_mul(31) ^ salt)
        .collect();
    s.soc.memory_mut().backdoor_write(addr, &data).unwrap();
}

#[test]
fn ten_chains_with_cap_of_four() {
    for cfg in [
        DmacConfig::base(),
        DmacConfig::speculation(),
        DmacConfig::baseline(),
    ] {
        let mut s = sim(cfg);
        let fired = Rc::new(RefCell::new(vec![0u32; 10]));
        let mut want_irq = 0;
        let mut handles = Vec::new();
        for i in 0..10u64 {
            let src = 0x10_0000 + i * 0x1000;
            fill(&mut s, src, 256, i as u8);
            // two handles per chain; only some chains end in an interrupt
            let irq = i % 3 != 0;
            want_irq += irq as u64;
            let a = s
                .driver
                .prepare_memcpy(&mut s.soc, src, 0x40_0000 + i * 0x1000, 128, true)
                .unwrap();
            let b = s
                .driver
                .prepare_memcpy(
                    &mut s.soc,
                    src + 128,
                    0x40_0000 + i * 0x1000 + 128,
                    128,
                    irq,
                )
                .unwrap();
            for h in [a, b] {
                let f = fired.clone();
                s.driver
                    .set_callback(h, Box::new(move |_, _, id| f.borrow_mut()[id / 2] += 1));
            }
            s.driver.commit(&mut s.soc, &[a, b]).unwrap();
            handles.extend([a, b]);
        }
        s.driver.issue(&mut s.soc);
        s.run(2_000_000).unwrap();
        let st = s.driver.stats();
        assert_eq!(st.peak_active, 4);
        assert_eq!(st.csr_launches, 10);
        assert_eq!(st.chains_retired, 10);
        assert_eq!(s.driver.outstanding(), 0);
        assert!(handles
            .iter()
            .all(|&h| s.driver.handle(h).unwrap().state == HandleState::Completed));
        assert!(
            fired.borrow().iter().all(|&n| n == 2),
            "{:?}",
            fired.borrow()
        );
        assert_eq!(st.callbacks_run, 20);
        assert_eq!(s.soc.irq_log().len() as u64, want_irq);
        for i in 0..10u64 {
            let a = s
                .soc
                .memory()
                .backdoor_read(0x10_0000 + i * 0x1000, 256)
                .unwrap();
            let b = s
                .soc
                .memory()
                .backdoor_read(0x40_0000 + i * 0x1000, 256)
                .unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn three_handles_one_chain_three_callbacks() {
    let mut s = sim(DmacConfig::speculation());
    let order = Rc::new(RefCell::new(Vec::new()));
    let mut ids = Vec::new();
    for i in 0..3u64 {
        fill(&mut s, 0x1000 + i * 0x100, 64, 1);
        let h = s
            .driver
            .prepare_memcpy(&mut s.soc, 0x1000 + i * 0x100, 0x9000 + i * 0x100, 64, true)
            .unwrap();
        let o = order.clone();
        s.driver
            .set_callback(h, Box::new(move |_, _, id| o.borrow_mut().push(id)));
        ids.push(h);
    }
    s.driver.commit(&mut s.soc, &ids).unwrap();
    s.driver.issue(&mut s.soc);
    s.run(100_000).unwrap();
    let mut seen = order.borrow().clone();
    seen.sort();
    assert_eq!(seen, ids);
    // spliced tails do not interrupt, so one interrupt covers the chain
    assert_eq!(s.soc.irq_log().len(), 1);
    assert_eq!(s.driver.stats().csr_launches, 1);
}

#[test]
fn callback_can_submit_more_work() {
    let mut s = sim(DmacConfig::base());
    fill(&mut s, 0x1000, 64, 9);
    let first = s
        .driver
        .prepare_memcpy(&mut s.soc, 0x1000, 0x2000, 64, true)
        .unwrap();
    let second = Rc::new(RefCell::new(None));
    let slot = second.clone();
    s.driver.set_callback(
        first,
        Box::new(move |drv, soc, _| {
            let h = drv.prepare_memcpy(soc, 0x2000, 0x3000, 64, true).unwrap();
            drv.commit(soc, &[h]).unwrap();
            drv.issue(soc);
            *slot.borrow_mut() = Some(h);
        }),
    );
    s.driver.commit(&mut s.soc, &[first]).unwrap();
    s.driver.issue(&mut s.soc);
    s.run(100_000).unwrap();
    let h = second.borrow().unwrap();
    assert_eq!(s.driver.handle(h).unwrap().state, HandleState::Completed);
    assert_eq!(
        s.soc.memory().backdoor_read(0x3000, 64).unwrap(),
        s.soc.memory().backdoor_read(0x1000, 64).unwrap()
    );
    assert_eq!(s.driver.stats().csr_launches, 2);
}

#[test]
fn one_handler_call_drains_simultaneous_completions() {
    let mut s = sim(DmacConfig::base());
    let mut ids = Vec::new();
    for i in 0..2u64 {
        let h = s
            .driver
            .prepare_memcpy(&mut s.soc, 0x1000, 0x5000 + i * 0x100, 8, true)
            .unwrap();
        s.driver.commit(&mut s.soc, &[h]).unwrap();
        ids.push(h);
    }
    s.driver.issue(&mut s.soc);
    // let both finish before any handler runs
    s.soc.run_to_idle(100_000).unwrap();
    assert_eq!(s.soc.take_irqs().len(), 2);
    s.driver.irq_handler(&mut s.soc);
    assert!(ids
        .iter()
        .all(|&h| s.driver.handle(h).unwrap().state == HandleState::Completed));
    assert_eq!(s.driver.stats().irqs, 1);
    assert_eq!(s.driver.stats().spurious_irqs, 0);
    s.driver.irq_handler(&mut s.soc);
    assert_eq!(s.driver.stats().spurious_irqs, 1);
}

#[test]
fn released_descriptors_are_reused() {
    let mut s = DriverSim::new(
        Soc::new(&DmacConfig::base(), MemoryConfig::default()).unwrap(),
        DriverConfig {
            arena_bytes: 4 * 32,
            ..Default::default()
        },
    );
    for round in 0..5u64 {
        let ids: Vec<_> = (0..4u64)
            .map(|i| {
                s.driver
                    .prepare_memcpy(
                        &mut s.soc,
                        0x1000,
                        0x2000 + (round * 4 + i) * 0x40,
                        16,
                        true,
                    )
                    .unwrap()
            })
            .collect();
        for h in &ids {
            s.driver.commit(&mut s.soc, &[*h]).unwrap();
        }
        s.driver.issue(&mut s.soc);
        s.run(100_000).unwrap();
        assert_eq!(s.driver.outstanding(), 0);
    }
    assert_eq!(s.driver.stats().chains_retired, 20);
}
