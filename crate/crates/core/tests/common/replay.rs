//! Arbitration replay: rebuilds the bus schedule from the logged submission
//! trace alone and checks every transmission the simulator reports.

use hm_sim::harness::log::{Entry, LogLine};

use super::stuffing::worst_frame_bits;

struct Pending {
    id: u16,
    sender: u8,
    ordinal: u64,
    submitted: u64,
}

fn micros(bits: u32, bitrate: u32) -> Result<u64, String> {
    let num = u64::from(bits) * 1_000_000;
    if num % u64::from(bitrate) != 0 {
        return Err(format!("{bits} bits at {bitrate} bit/s is not a whole number of microseconds"));
    }
    Ok(num / u64::from(bitrate))
}

/// Number of transmissions checked, or the first disagreement.
pub fn replay(log: &[LogLine], bitrate: u32, gap_bits: u32) -> Result<usize, String> {
    let gap = micros(gap_bits, bitrate)?;
    let mut frame_us = Vec::new();
    for dlc in 0..=8 {
        frame_us.push(micros(worst_frame_bits(dlc), bitrate)?);
    }
    let mut pending: Vec<Pending> = Vec::new();
    let mut ordinal = 0;
    let mut in_flight: Option<(u16, u8, u8, u64)> = None;
    let mut idle_from = 0;
    let mut checked = 0;
    for (n, l) in log.iter().enumerate() {
        let t = l.t_us;
        let fail = |m: String| Err(format!("line {}: t={t}: {m}", n + 1));
        match l.entry {
            Entry::Submit { id, sender, .. } => {
                pending.push(Pending { id, sender, ordinal, submitted: t });
                ordinal += 1;
            }
            Entry::Discard { id, sender } => match pending.iter().position(|p| p.id == id && p.sender == sender) {
                Some(i) => {
                    pending.remove(i);
                }
                None => return fail(format!("discard of {id:#x} from {sender} which is not pending")),
            },
            Entry::TxStart { id, dlc, sender, .. } => {
                if in_flight.is_some() {
                    return fail("transmission starts while another is on the wire".into());
                }
                let Some(w) = (0..pending.len()).min_by_key(|&i| (pending[i].id, pending[i].ordinal)) else {
                    return fail("transmission starts with nothing pending".into());
                };
                if (pending[w].id, pending[w].sender) != (id, sender) {
                    return fail(format!("{id:#x} from {sender} started but {:#x} should have won", pending[w].id));
                }
                let earliest = pending.iter().map(|p| p.submitted).min().unwrap();
                let expected = idle_from.max(earliest);
                if t != expected {
                    return fail(format!("started at {t}, bus was free with work pending at {expected}"));
                }
                pending.remove(w);
                in_flight = Some((id, sender, dlc, t));
                checked += 1;
            }
            Entry::Deliver { id, sender, .. } => {
                let Some((fid, fsender, dlc, start)) = in_flight.take() else {
                    return fail("delivery with an idle bus".into());
                };
                if (fid, fsender) != (id, sender) {
                    return fail(format!("delivered {id:#x} but {fid:#x} was on the wire"));
                }
                let want = start + frame_us[usize::from(dlc)];
                if t != want {
                    return fail(format!("delivered at {t}, worst-case frame ends at {want}"));
                }
                idle_from = t + gap;
            }
            Entry::TxAbort { id, sender, start_us } => {
                let Some((fid, fsender, _, start)) = in_flight.take() else {
                    return fail("abort with an idle bus".into());
                };
                if (fid, fsender, start) != (id, sender, start_us) {
                    return fail(format!("aborted {id:#x} but {fid:#x} was on the wire"));
                }
                idle_from = t + gap;
            }
            _ => {}
        }
    }
    Ok(checked)
}
