//! Bit-level CAN stuffing model.
//!
//! A standard data frame has `34 + 8·dlc` bits subject to stuffing (SOF,
//! identifier, control, data, CRC) and 13 fixed-form bits (CRC delimiter,
//! ACK slot and delimiter, EOF, intermission). The stuffable bits are treated
//! as unconstrained, which is what the closed form assumes.

pub const FIXED_FORM_BITS: u32 = 13;

/// Stuff bits a transmitter inserts into `bits`: after five equal bits in a
/// row (counting earlier stuff bits) the complement is inserted.
pub fn stuff(bits: &[bool]) -> u32 {
    let mut out: Vec<bool> = Vec::with_capacity(bits.len() * 2);
    let mut inserted = 0;
    for &b in bits {
        out.push(b);
        let n = out.len();
        if n >= 5 && out[n - 5..].iter().all(|&x| x == b) {
            out.push(!b);
            inserted += 1;
        }
    }
    inserted
}

/// Maximum number of stuff bits over every sequence of length `len`, with
/// one sequence that attains it. Dynamic programme over (last bit on the
/// wire, length of the current run).
pub fn worst_case(len: usize) -> (u32, Vec<bool>) {
    // state index: last * 6 + run (run in 1..=5, 0 only before the first bit)
    const STATES: usize = 12;
    let mut best: Vec<Option<(u32, Vec<bool>)>> = vec![None; STATES];
    best[0] = Some((0, Vec::new()));
    for step in 0..len {
        let mut next: Vec<Option<(u32, Vec<bool>)>> = vec![None; STATES];
        for (s, cell) in best.iter().enumerate() {
            let Some((count, seq)) = cell else { continue };
            let (last, run) = (s / 6 == 1, s % 6);
            for b in [false, true] {
                let mut r = if step > 0 && b == last { run + 1 } else { 1 };
                let mut l = b;
                let mut c = *count;
                if r == 5 {
                    c += 1;
                    l = !b;
                    r = 1;
                }
                let idx = usize::from(l) * 6 + r;
                if next[idx].as_ref().is_none_or(|(bc, _)| c > *bc) {
                    let mut sq = seq.clone();
                    sq.push(b);
                    next[idx] = Some((c, sq));
                }
            }
        }
        best = next;
    }
    best.into_iter().flatten().max_by_key(|(c, _)| *c).expect("at least one state")
}

pub fn brute_force(len: usize) -> u32 {
    (0u32..1 << len)
        .map(|m| {
            let bits: Vec<bool> = (0..len).map(|i| m >> i & 1 == 1).collect();
            stuff(&bits)
        })
        .max()
        .unwrap_or(0)
}

/// Worst-case length in bits of a data frame with `dlc` payload bytes.
pub fn worst_frame_bits(dlc: u8) -> u32 {
    let stuffable = 34 + 8 * usize::from(dlc);
    stuffable as u32 + FIXED_FORM_BITS + worst_case(stuffable).0
}
