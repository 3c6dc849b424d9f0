//! On-disk formats: draw matrices as CSV or compact binary with a JSON
//! sidecar, plus diagnostic summaries.
//!
//! `draws.csv` carries one row per (chain, iteration) with the header
//! `chain,group,phase,iter,dim_0..dim_{d-1}` and floats at 17 significant
//! digits. The binary format is a 16-byte header (8-byte magic, u32 version,
//! u32 reserved) followed by little-endian f64 draws in (chain, iteration,
//! dimension) order; chain metadata lives in `<file>.meta.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use manychains::diagnostics::{float17, ChainMatrix, ChainMeta, DiagnosticsReport, Phase};

const BINARY_MAGIC: &[u8; 8] = b"MCHDRAWS";
const BINARY_VERSION: u32 = 1;

/// Draw-file format selector for the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DrawFormat {
    Csv,
    Bin,
}

pub fn draws_file_name(format: DrawFormat) -> &'static str {
    match format {
        DrawFormat::Csv => "draws.csv",
        DrawFormat::Bin => "draws.bin",
    }
}

fn phase_token(phase: Phase) -> &'static str {
    match phase {
        Phase::Warmup => "warmup",
        Phase::Sampling => "sampling",
    }
}

/// Writes the draw matrix as CSV.
pub fn write_draws_csv(path: &Path, matrix: &ChainMatrix) -> Result<()> {
    let d = matrix.dim();
    let mut out = String::from("chain,group,phase,iter");
    for i in 0..d {
        out.push_str(&format!(",dim_{i}"));
    }
    out.push('\n');
    for m in 0..matrix.chains() {
        let group = matrix.group_of_chain()[m];
        for n in 0..matrix.iterations() {
            out.push_str(&format!("{m},{group},{},{n}", phase_token(matrix.phase(n))));
            for x in matrix.point(m, n) {
                out.push(',');
                out.push_str(&float17(*x));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Reads a draw matrix back from CSV.
pub fn read_draws_csv(path: &Path) -> Result<ChainMatrix> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("draws file is empty")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..4] != ["chain", "group", "phase", "iter"] {
        bail!("unrecognized draws header: {header}");
    }
    let d = cols.len() - 4;

    let mut rows: Vec<(usize, usize, Phase, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + d {
            bail!("line {}: expected {} fields", lineno + 2, 4 + d);
        }
        let chain: usize = fields[0].parse()?;
        let group: usize = fields[1].parse()?;
        let phase = match fields[2] {
            "warmup" => Phase::Warmup,
            "sampling" => Phase::Sampling,
            other => bail!("line {}: unknown phase '{other}'", lineno + 2),
        };
        let point: Vec<f64> = fields[4..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()?;
        rows.push((chain, group, phase, point));
    }
    if rows.is_empty() {
        bail!("draws file {} has no data rows", path.display());
    }

    let chains = rows.iter().map(|r| r.0).max().unwrap() + 1;
    if rows.len() % chains != 0 {
        bail!("draw rows are not rectangular over chains");
    }
    let iterations = rows.len() / chains;

    let mut draws = Vec::with_capacity(rows.len() * d);
    let mut phases = vec![Phase::Warmup; iterations];
    let mut groups = vec![0usize; chains];
    for (idx, (chain, group, phase, point)) in rows.iter().enumerate() {
        let expected_chain = idx / iterations;
        if *chain != expected_chain {
            bail!("draw rows must be chain-major and complete");
        }
        let n = idx % iterations;
        phases[n] = *phase;
        groups[*chain] = *group;
        draws.extend_from_slice(point);
    }
    let meta = default_meta(chains);
    Ok(ChainMatrix::new(draws, chains, iterations, d, phases, groups, meta)?)
}

fn default_meta(chains: usize) -> Vec<ChainMeta> {
    (0..chains)
        .map(|_| ChainMeta {
            seed: 0,
            divergences: 0,
            acceptance_rate: 0.0,
            gradient_evals: 0,
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BinarySidecar {
    chains: usize,
    iterations: usize,
    dim: usize,
    warmup: usize,
    sampling: usize,
    groups: Vec<usize>,
    meta: Vec<ChainMeta>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.meta.json", path.display()))
}

/// Writes the compact binary draw file and its JSON sidecar.
pub fn write_draws_binary(path: &Path, matrix: &ChainMatrix) -> Result<()> {
    let warmup = matrix.phase_iterations(Phase::Warmup);
    let sampling = matrix.phase_iterations(Phase::Sampling);
    // The format stores the phase split, not per-iteration labels.
    for n in 0..matrix.iterations() {
        let expect = if n < warmup { Phase::Warmup } else { Phase::Sampling };
        if matrix.phase(n) != expect {
            bail!("binary format requires warmup draws to precede sampling draws");
        }
    }

    let mut file =
        fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(BINARY_MAGIC);
    header.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    file.write_all(&header)?;
    let mut buf = Vec::with_capacity(matrix.iterations() * matrix.dim() * 8);
    for m in 0..matrix.chains() {
        buf.clear();
        for n in 0..matrix.iterations() {
            for x in matrix.point(m, n) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        file.write_all(&buf)?;
    }

    let sidecar = BinarySidecar {
        chains: matrix.chains(),
        iterations: matrix.iterations(),
        dim: matrix.dim(),
        warmup,
        sampling,
        groups: matrix.group_of_chain().to_vec(),
        meta: matrix.meta().to_vec(),
    };
    let sc = sidecar_path(path);
    fs::write(&sc, serde_json::to_string_pretty(&sidecar)?)
        .with_context(|| format!("writing {}", sc.display()))?;
    Ok(())
}

/// Reads a binary draw file, locating its sidecar next to it.
pub fn read_draws_binary(path: &Path) -> Result<ChainMatrix> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 16 || &bytes[..8] != BINARY_MAGIC {
        bail!("{} is not a draws binary (bad magic)", path.display());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != BINARY_VERSION {
        bail!("unsupported draws binary version {version}");
    }
    let sc = sidecar_path(path);
    let sidecar: BinarySidecar = serde_json::from_str(
        &fs::read_to_string(&sc).with_context(|| format!("reading {}", sc.display()))?,
    )?;

    let expected = sidecar.chains * sidecar.iterations * sidecar.dim * 8;
    let payload = &bytes[16..];
    if payload.len() != expected {
        bail!(
            "draws binary payload is {} bytes, sidecar implies {expected}",
            payload.len()
        );
    }
    let draws: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut phases = vec![Phase::Warmup; sidecar.warmup];
    phases.extend(std::iter::repeat(Phase::Sampling).take(sidecar.sampling));
    Ok(ChainMatrix::new(
        draws,
        sidecar.chains,
        sidecar.iterations,
        sidecar.dim,
        phases,
        sidecar.groups,
        sidecar.meta,
    )?)
}

/// Reads a draw matrix, dispatching on the file extension.
pub fn read_draws(path: &Path) -> Result<ChainMatrix> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_draws_binary(path),
        _ => read_draws_csv(path),
    }
}

pub fn write_draws(path: &Path, matrix: &ChainMatrix, format: DrawFormat) -> Result<()> {
    match format {
        DrawFormat::Csv => write_draws_csv(path, matrix),
        DrawFormat::Bin => write_draws_binary(path, matrix),
    }
}

pub fn write_summary(dir: &Path, report: &DiagnosticsReport) -> Result<()> {
    let csv = dir.join("summary.csv");
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let json = dir.join("summary.json");
    fs::write(&json, serde_json::to_string_pretty(report)?)
        .with_context(|| format!("writing {}", json.display()))?;
    Ok(())
}
