//! Malformed scenario corpus shared by the CLI tests and the acceptance run.
#![allow(dead_code)]

pub mod replay;
pub mod stuffing;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// (section header, entries); the empty header is the top level.
type Doc = Vec<(&'static str, Vec<(String, String)>)>;

fn base() -> Doc {
    let kv = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    vec![
        ("", kv(&[("fleet_size", "4"), ("horizon_s", "10"), ("seed", "7")])),
        ("[monitor]", kv(&[("period_ms", "1000"), ("deadline_ms", "10"), ("retries", "2")])),
        ("[bus]", kv(&[("bitrate", "500000"), ("gap_bits", "3")])),
        ("[ecus]", kv(&[("processing_delay_us", "200")])),
        ("[background]", kv(&[("frames_per_s", "100.0"), ("id_min", "0x400"), ("id_max", "0x7FF"), ("dlc", "8")])),
        ("[telematics]", kv(&[("latency_ms", "0"), ("loss_probability", "0.1"), ("status_interval_s", "10")])),
        ("[[faults]]", kv(&[("at_s", "3.2"), ("ecu", "2"), ("kind", "\"fail_silent\"")])),
    ]
}

fn render(doc: &Doc) -> String {
    let mut s = String::from("# generated\n");
    for (header, entries) in doc {
        if !header.is_empty() {
            s.push('\n');
            s.push_str(header);
            s.push('\n');
        }
        for (k, v) in entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
    }
    s
}

fn with(section: &str, key: &str, value: &str) -> String {
    let mut d = base();
    let (_, entries) = d.iter_mut().find(|(h, _)| *h == section).unwrap();
    match entries.iter_mut().find(|(k, _)| k == key) {
        Some(e) => e.1 = value.to_owned(),
        None => entries.push((key.to_owned(), value.to_owned())),
    }
    render(&d)
}

fn without(section: &str, key: &str) -> String {
    let mut d = base();
    let (_, entries) = d.iter_mut().find(|(h, _)| *h == section).unwrap();
    entries.retain(|(k, _)| k != key);
    render(&d)
}

/// Values every one of which must be rejected for the given key.
fn bad_values() -> Vec<(&'static str, &'static str, Vec<&'static str>)> {
    vec![
        (
            "",
            "fleet_size",
            vec!["0", "1", "81", "200", "255", "256", "-1", "\"4\"", "4.5", "true", "[4]", "{ a = 1 }", "1979-05-27"],
        ),
        (
            "",
            "horizon_s",
            vec!["0", "0.0", "-1", "3", "1e7", "1000001", "\"10\"", "true", "nan", "inf", "-inf", "[10]"],
        ),
        ("", "seed", vec!["-1", "\"x\"", "1.5", "18446744073709551616", "false"]),
        ("[monitor]", "period_ms", vec!["0", "1", "100", "199", "-5", "\"1000\"", "1.5", "99999999999999999"]),
        ("[monitor]", "deadline_ms", vec!["0", "-1", "300", "1000", "\"10\"", "2000000000000", "true"]),
        ("[monitor]", "retries", vec!["-1", "1000", "4294967296", "\"2\"", "2.5", "[]"]),
        ("[monitor]", "retry_spacing_ms", vec!["200", "-1", "\"10\"", "1e3"]),
        ("[monitor]", "minor_escalation_threshold", vec!["-1", "\"3\"", "0.5"]),
        (
            "[monitor]",
            "poll_order",
            vec![
                "[1, 2, 3]",
                "[1, 1, 2, 3]",
                "[1, 2, 3, 5]",
                "[0, 1, 2, 3]",
                "\"1234\"",
                "[1, 2, 3, 4, 4]",
                "[-1, 2, 3, 4]",
            ],
        ),
        ("[bus]", "bitrate", vec!["0", "-1", "\"fast\"", "1.5", "4294967296"]),
        ("[bus]", "gap_bits", vec!["-1", "\"3\"", "0.5"]),
        ("[ecus]", "processing_delay_us", vec!["-1", "\"200\"", "2.5", "true"]),
        (
            "[ecus]",
            "delay_overrides",
            vec![
                "[{ ecu = 9, processing_delay_us = 10 }]",
                "[{ ecu = 1 }]",
                "[{ ecu = 1, processing_delay_us = 5, extra = 1 }]",
                "7",
            ],
        ),
        ("[background]", "frames_per_s", vec!["-1.0", "nan", "inf", "1e9", "5000", "\"100\"", "true"]),
        ("[background]", "id_min", vec!["0x100", "0x0", "0x104", "0x800", "-1", "\"0x400\"", "65536"]),
        ("[background]", "id_max", vec!["0x800", "0x3FF", "0xFFFF", "-1", "1.0"]),
        ("[background]", "dlc", vec!["9", "255", "-1", "256", "\"8\""]),
        ("[telematics]", "latency_ms", vec!["-1", "\"0\"", "0.5"]),
        ("[telematics]", "loss_probability", vec!["1.5", "-0.1", "nan", "inf", "\"0.1\""]),
        ("[telematics]", "resend_attempts", vec!["-1", "\"1\"", "1.5"]),
        ("[telematics]", "status_interval_s", vec!["0", "-1", "nan", "\"10\""]),
        ("[telematics]", "speed_mps", vec!["-1.0", "nan", "inf", "\"20\""]),
        ("[[faults]]", "at_s", vec!["10", "11", "10.0", "-1", "nan", "inf", "\"3.2\"", "true"]),
        ("[[faults]]", "ecu", vec!["0", "5", "80", "255", "256", "-1", "\"2\"", "2.0"]),
        ("[[faults]]", "kind", vec!["\"weird\"", "3", "\"FailSilent\"", "\"fail-silent\"", "\"\"", "[\"minor\"]"]),
        ("[[faults]]", "code", vec!["1", "0x91", "-1"]),
        ("[[faults]]", "recoverable", vec!["true", "false", "\"yes\""]),
        ("[[faults]]", "duration_s", vec!["0", "-1", "nan", "\"2\"", "true"]),
    ]
}

fn fault_block(body: &str) -> String {
    let mut d = base();
    d.retain(|(h, _)| *h != "[[faults]]");
    format!("{}\n[[faults]]\n{body}", render(&d))
}

/// Named scenario files, each of which a correct loader must reject.
pub fn corpus() -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    let mut push = |name: String, body: Vec<u8>| out.push((name, body));
    let base_text = render(&base());

    for (section, key, values) in bad_values() {
        for (i, v) in values.iter().enumerate() {
            push(format!("bad-{}-{key}-{i}", section.trim_matches(['[', ']'])), with(section, key, v).into_bytes());
        }
    }

    // invalid fault kind and code combinations
    let fault_cases = [
        "at_s = 3.2\necu = 2\nkind = \"major\"\n",
        "at_s = 3.2\necu = 2\nkind = \"major\"\ncode = 0x10\n",
        "at_s = 3.2\necu = 2\nkind = \"major\"\ncode = 0x91\nrecoverable = true\n",
        "at_s = 3.2\necu = 2\nkind = \"minor\"\n",
        "at_s = 3.2\necu = 2\nkind = \"minor\"\ncode = 0x00\n",
        "at_s = 3.2\necu = 2\nkind = \"minor\"\ncode = 0x80\n",
        "at_s = 3.2\necu = 2\nkind = \"minor\"\ncode = 0xFF\n",
        "at_s = 3.2\necu = 2\nkind = \"minor\"\ncode = 256\n",
        "at_s = 3.2\necu = 2\nkind = \"fail_silent\"\ncode = 0x10\n",
        "at_s = 3.2\necu = 2\nkind = \"fail_silent\"\nrecoverable = false\n",
    ];
    for (i, f) in fault_cases.iter().enumerate() {
        push(format!("fault-combo-{i}"), fault_block(f).into_bytes());
    }

    // unknown keys in every table, and unknown tables
    let sections: Vec<&str> = base().iter().map(|(h, _)| *h).collect();
    for section in &sections {
        for j in 0..18 {
            let key = ["bogus", "Fleet_size", "horizon", "period", "deadline_us", "seeds"][j % 6];
            push(
                format!("unknown-{}-{j}", section.trim_matches(['[', ']'])),
                with(section, &format!("{key}{j}"), "1").into_bytes(),
            );
        }
    }
    for (i, t) in ["[monitors]", "[can]", "[[fault]]", "[ecu]", "[faults.extra]", "[sim]"].iter().enumerate() {
        push(format!("unknown-table-{i}"), format!("{base_text}\n{t}\nx = 1\n").into_bytes());
    }

    // required keys removed
    for (section, key) in [
        ("", "fleet_size"),
        ("", "horizon_s"),
        ("[[faults]]", "at_s"),
        ("[[faults]]", "ecu"),
        ("[[faults]]", "kind"),
        ("[background]", "frames_per_s"),
    ] {
        push(format!("missing-{key}"), without(section, key).into_bytes());
    }

    // duplicated keys and tables
    for (section, entries) in base() {
        for (k, v) in &entries {
            let dup = base_text.replace(&format!("{k} = {v}\n"), &format!("{k} = {v}\n{k} = {v}\n"));
            push(format!("dup-{}-{k}", section.trim_matches(['[', ']'])), dup.into_bytes());
        }
        if !section.is_empty() && section != "[[faults]]" {
            push(format!("dup-table-{section}"), format!("{base_text}\n{section}\n").into_bytes());
        }
    }

    // values truncated after '=', as a whole line and as a truncated file
    let lines: Vec<&str> = base_text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if let Some(eq) = line.find('=') {
            let mut l = lines.clone();
            let cut = &line[..=eq];
            l[i] = cut;
            push(format!("truncated-line-{i}"), l.join("\n").into_bytes());
            let prefix = lines[..i].join("\n");
            push(format!("truncated-file-{i}"), format!("{prefix}\n{cut}").into_bytes());
            let bare = line[..eq].trim_end();
            l[i] = bare;
            push(format!("bare-key-{i}"), l.join("\n").into_bytes());
        }
        if line.starts_with('[') {
            let mut l = lines.clone();
            let unclosed = line.trim_end_matches(']');
            l[i] = unclosed;
            push(format!("unclosed-header-{i}"), l.join("\n").into_bytes());
        }
    }
    // cut at every character position inside the first value-bearing lines
    for cut in 0..base_text.len() {
        let prefix = &base_text[..cut];
        // guaranteed invalid while a required top-level key is still missing
        if !prefix.contains("horizon_s") {
            push(format!("prefix-{cut}"), prefix.as_bytes().to_vec());
        }
    }

    // invalid UTF-8 sequences spliced in at many offsets
    let bad_seqs: [&[u8]; 5] = [b"\xFF", b"\xFE\xFF", b"\xC3\x28", b"\xE2\x82", b"\xF0\x28\x8C\x28"];
    let bytes = base_text.as_bytes();
    for (s, seq) in bad_seqs.iter().enumerate() {
        for off in (0..bytes.len()).step_by(3) {
            let mut b = bytes[..off].to_vec();
            b.extend_from_slice(seq);
            b.extend_from_slice(&bytes[off..]);
            push(format!("utf8-{s}-{off}"), b);
        }
    }

    // degenerate files
    for (i, body) in
        ["", " ", "\n\n\n", "# only a comment\n", "\t\n  \r\n", "[monitor]\n", "[[faults]]\n"].iter().enumerate()
    {
        push(format!("empty-{i}"), body.as_bytes().to_vec());
    }

    // binary garbage; the leading NUL is never valid TOML
    let mut rng = ChaCha8Rng::seed_from_u64(0xBAD5EED);
    for i in 0..150 {
        let len = rng.random_range(1..512);
        let mut b = vec![0u8];
        b.extend((0..len).map(|_| rng.random::<u8>()));
        push(format!("garbage-{i}"), b);
    }
    out
}

pub struct Rejection {
    pub name: String,
    pub code: i32,
    pub stderr: String,
    pub panicked: bool,
    pub wrote_output: bool,
}

/// Run `hm-sim run` on every corpus file inside `dir`.
pub fn run_corpus(dir: &Path) -> Vec<Rejection> {
    corpus()
        .into_iter()
        .map(|(name, body)| {
            let file = dir.join(format!("{name}.toml"));
            std::fs::write(&file, &body).unwrap();
            let outdir = dir.join(format!("{name}.out"));
            let mut out = Vec::new();
            let mut err = Vec::new();
            let args = [
                "hm-sim".into(),
                "run".into(),
                "--scenario".into(),
                file.into_os_string(),
                "--out".into(),
                outdir.clone().into_os_string(),
            ];
            let result = catch_unwind(AssertUnwindSafe(|| hm_sim::harness::cli::main_with(args, &mut out, &mut err)));
            Rejection {
                name,
                code: result.as_ref().copied().unwrap_or(-1),
                stderr: String::from_utf8_lossy(&err).into_owned(),
                panicked: result.is_err(),
                wrote_output: outdir.exists(),
            }
        })
        .collect()
}

/// The unmutated document every corpus entry is derived from; it is valid.
pub fn base_scenario() -> String {
    render(&base())
}
