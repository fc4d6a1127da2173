use hm_sim::canbus::{Bus, BusConfig, BusEvent, BusOutput, Frame, NodeId};
use hm_sim::simcore::{Kernel, SimTime};

fn bus(gap_bits: u32) -> Bus {
    let mut b = Bus::new(BusConfig { bitrate: 500_000, gap_bits }).unwrap();
    b.register(NodeId(1), vec![0x100..=0x100]).unwrap();
    b.register(NodeId(2), vec![0x200..=0x200]).unwrap();
    b
}

/// Drive the kernel, calling `on` for each bus output.
fn drive(
    k: &mut Kernel<BusEvent>,
    b: &mut Bus,
    until: SimTime,
    mut on: impl FnMut(&mut Kernel<BusEvent>, &mut Bus, BusOutput),
) {
    while let Some(ev) = k.pop_until(until) {
        let out = b.handle(k, ev.payload).unwrap();
        on(k, b, out);
    }
}

#[test]
fn idle_bus_delivers_one_frame_after_its_frame_time() {
    let mut k = Kernel::new(0);
    let mut b = bus(3);
    b.submit(&mut k, Frame::new(0x100, &[7], NodeId(1)).unwrap()).unwrap();
    let mut delivered = Vec::new();
    drive(&mut k, &mut b, SimTime::from_secs(1), |k, _, o| {
        if let BusOutput::Delivered(tx) = o {
            delivered.push((tx.start, k.now()));
        }
    });
    assert_eq!(delivered, vec![(SimTime::ZERO, SimTime::from_micros(130))]);
}

#[test]
fn next_frame_waits_for_the_gap() {
    let mut k = Kernel::new(0);
    let mut b = bus(3);
    b.submit(&mut k, Frame::new(0x200, &[1], NodeId(2)).unwrap()).unwrap();
    b.submit(&mut k, Frame::new(0x100, &[1], NodeId(1)).unwrap()).unwrap();
    let mut starts = Vec::new();
    drive(&mut k, &mut b, SimTime::from_secs(1), |_, _, o| {
        if let BusOutput::Started(tx) = o {
            starts.push((tx.frame.id().raw(), tx.start.as_micros()));
        }
    });
    // both pending at t = 0: the lower id goes first, the other after
    // 130us + 3 bit times (6us)
    assert_eq!(starts, vec![(0x100, 0), (0x200, 136)]);
}

#[test]
fn persistent_low_id_contender_starves_the_victim() {
    let mut k = Kernel::new(0);
    let mut b = bus(3);
    b.submit(&mut k, Frame::new(0x200, &[0; 8], NodeId(2)).unwrap()).unwrap();
    b.submit(&mut k, Frame::new(0x100, &[0; 8], NodeId(1)).unwrap()).unwrap();
    let rounds = 12;
    let mut sent = 0;
    let mut waits = Vec::new();
    let mut victim_start = None;
    drive(&mut k, &mut b, SimTime::from_secs(1), |k, b, o| {
        if let BusOutput::Started(tx) = o {
            if tx.frame.sender() == NodeId(1) {
                sent += 1;
                // the victim has been waiting since t = 0
                waits.push(tx.start.as_micros());
                if sent < rounds {
                    b.submit(k, Frame::new(0x100, &[0; 8], NodeId(1)).unwrap()).unwrap();
                }
            } else {
                victim_start = Some(tx.start);
            }
        }
    });
    assert_eq!(waits.len(), rounds);
    assert!(waits.windows(2).all(|w| w[1] > w[0]), "victim delay must grow every round: {waits:?}");
    // each round costs 270us on the wire plus a 6us gap
    assert_eq!(victim_start, Some(SimTime::from_micros(rounds as u64 * 276)));
}

#[test]
fn withdrawn_sender_frees_the_bus() {
    let mut k = Kernel::new(0);
    let mut b = bus(3);
    b.submit(&mut k, Frame::new(0x100, &[0; 8], NodeId(1)).unwrap()).unwrap();
    b.submit(&mut k, Frame::new(0x200, &[0; 8], NodeId(2)).unwrap()).unwrap();
    // start the first frame
    let ev = k.pop_until(SimTime::ZERO).unwrap();
    assert!(matches!(b.handle(&mut k, ev.payload).unwrap(), BusOutput::Started(_)));
    k.advance_to(SimTime::from_micros(100));
    let w = b.withdraw(&mut k, NodeId(1));
    assert!(w.aborted.is_some());
    let mut starts = Vec::new();
    drive(&mut k, &mut b, SimTime::from_secs(1), |_, _, o| {
        if let BusOutput::Started(tx) = o {
            starts.push((tx.frame.sender(), tx.start.as_micros()));
        }
    });
    assert_eq!(starts, vec![(NodeId(2), 106)]);
}
