//! Reference scorer process for the subprocess protocol.
//!
//! Reads concatenated `CTP1` tensor archives on stdin and answers on stdout.
//! The archive decoder here is written against the byte layout directly and
//! shares no code with the library, so round-trips through it check the
//! format rather than the library against itself.
//!
//! Modes:
//!   --constant P   every slice scores P
//!   --mean         every slice scores its mean intensity
//!   --echo         re-encode the decoded archives to stdout
//!   --garbage      print non-CSV text
//!   --fail         print a diagnostic and exit 2

use std::io::{self, Read, Write};
use std::process::ExitCode;

struct Archive {
    patient_id: String,
    dims: [u32; 3],
    slices: Vec<Vec<f32>>,
}

fn take<'a>(buf: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], String> {
    let end = at.checked_add(n).filter(|&e| e <= buf.len()).ok_or("truncated archive")?;
    let out = &buf[*at..end];
    *at = end;
    Ok(out)
}

fn u32_at(buf: &[u8], at: &mut usize) -> Result<u32, String> {
    let b = take(buf, at, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn decode(buf: &[u8]) -> Result<Vec<Archive>, String> {
    let mut at = 0;
    let mut out = Vec::new();
    while at < buf.len() {
        if take(buf, &mut at, 4)? != b"CTP1" {
            return Err("bad magic".into());
        }
        let id_len = u32_at(buf, &mut at)? as usize;
        let patient_id = String::from_utf8(take(buf, &mut at, id_len)?.to_vec())
            .map_err(|_| "patient id not utf-8")?;
        let count = u32_at(buf, &mut at)? as usize;
        let dims = [u32_at(buf, &mut at)?, u32_at(buf, &mut at)?, u32_at(buf, &mut at)?];
        let per_slice = dims.iter().map(|&d| d as usize).product::<usize>();
        let mut slices = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = take(buf, &mut at, per_slice * 4)?;
            slices.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        out.push(Archive {
            patient_id,
            dims,
            slices,
        });
    }
    Ok(out)
}

fn encode(archives: &[Archive]) -> Vec<u8> {
    let mut out = Vec::new();
    for a in archives {
        out.extend_from_slice(b"CTP1");
        out.extend_from_slice(&(a.patient_id.len() as u32).to_le_bytes());
        out.extend_from_slice(a.patient_id.as_bytes());
        out.extend_from_slice(&(a.slices.len() as u32).to_le_bytes());
        for d in a.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for s in &a.slices {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn run(args: &[String]) -> Result<(), String> {
    let mode = args.first().map(String::as_str).unwrap_or("--constant");
    let mut input = Vec::new();
    io::stdin().read_to_end(&mut input).map_err(|e| e.to_string())?;
    let archives = decode(&input)?;
    let mut stdout = io::stdout().lock();
    let mut emit = |score: &dyn Fn(&[f32]) -> f64| -> io::Result<()> {
        writeln!(stdout, "patient_id,slice_index,prob_noncovid")?;
        for a in &archives {
            for (i, s) in a.slices.iter().enumerate() {
                writeln!(stdout, "{},{},{}", a.patient_id, i, score(s))?;
            }
        }
        Ok(())
    };
    match mode {
        "--constant" => {
            let p: f64 = args
                .get(1)
                .map(|v| v.parse().map_err(|_| format!("bad probability {v:?}")))
                .transpose()?
                .unwrap_or(0.5);
            emit(&|_| p).map_err(|e| e.to_string())
        }
        "--mean" => emit(&|s| s.iter().map(|&v| v as f64).sum::<f64>() / s.len().max(1) as f64)
            .map_err(|e| e.to_string()),
        "--echo" => io::stdout()
            .write_all(&encode(&archives))
            .map_err(|e| e.to_string()),
        "--garbage" => {
            println!("this is not a scores file");
            println!("{{\"nope\": true}}");
            Ok(())
        }
        "--fail" => Err("scorer asked to fail".into()),
        other => Err(format!("unknown mode {other}")),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("refscorer: {e}");
            ExitCode::from(2)
        }
    }
}
