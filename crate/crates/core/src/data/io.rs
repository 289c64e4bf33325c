//! On-disk dataset container.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/goals.emb            "RWDG" | u32 count | u32 dim | count·dim × f32
//! <dir>/traj_<id>.meta.jsonl one StepMeta object per line
//! <dir>/traj_<id>.emb        "RWDE" | u16 version | u32 n_steps | u32 num_views
//!                            | u32 tokens_per_view | u32 token_dim | f32 block
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Dataset, GoalTable, Manifest, StepMeta, Trajectory};
use crate::error::{Error, Result};

pub const GOALS_MAGIC: &[u8; 4] = b"RWDG";
pub const EMB_MAGIC: &[u8; 4] = b"RWDE";
pub const EMB_VERSION: u16 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

const EMB_HEADER_LEN: usize = 4 + 2 + 4 * 4;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn f32_block(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn format_err(file: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_string(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn encode_goals(goals: &GoalTable) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + goals.data.len() * 4);
    buf.extend_from_slice(GOALS_MAGIC);
    buf.extend_from_slice(&(goals.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(goals.dim as u32).to_le_bytes());
    for v in &goals.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_goals(bytes: &[u8], file: &str) -> Result<GoalTable> {
    if bytes.len() < 12 {
        return Err(format_err(file, bytes.len(), "header truncated"));
    }
    if &bytes[0..4] != GOALS_MAGIC {
        return Err(format_err(file, 0, "bad magic, expected \"RWDG\""));
    }
    let count = le_u32(bytes, 4) as usize;
    let dim = le_u32(bytes, 8) as usize;
    let expected = 12 + count * dim * 4;
    if bytes.len() != expected {
        return Err(format_err(
            file,
            bytes.len().min(expected),
            format!("expected {expected} bytes for {count}×{dim} goals, found {}", bytes.len()),
        ));
    }
    Ok(GoalTable {
        dim,
        data: f32_block(&bytes[12..]),
    })
}

fn encode_embeddings(traj: &Trajectory, manifest: &Manifest) -> Vec<u8> {
    let g = manifest.geometry;
    let mut buf = Vec::with_capacity(EMB_HEADER_LEN + traj.embeddings.len() * 4);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    for v in [traj.steps.len(), g.num_views, g.tokens_per_view, g.token_dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &traj.embeddings {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_embeddings(bytes: &[u8], file: &str, manifest: &Manifest, n_steps: usize) -> Result<Vec<f32>> {
    if bytes.len() < EMB_HEADER_LEN {
        return Err(format_err(file, bytes.len(), "header truncated"));
    }
    if &bytes[0..4] != EMB_MAGIC {
        return Err(format_err(file, 0, "bad magic, expected \"RWDE\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version > EMB_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: EMB_VERSION,
        });
    }
    let g = manifest.geometry;
    let header = [le_u32(bytes, 6), le_u32(bytes, 10), le_u32(bytes, 14), le_u32(bytes, 18)].map(|v| v as usize);
    let expected = [n_steps, g.num_views, g.tokens_per_view, g.token_dim];
    if header != expected {
        return Err(Error::Shape {
            file: file.to_string(),
            expected: format!(
                "n_steps={} num_views={} tokens_per_view={} token_dim={}",
                expected[0], expected[1], expected[2], expected[3]
            ),
            found: format!(
                "n_steps={} num_views={} tokens_per_view={} token_dim={}",
                header[0], header[1], header[2], header[3]
            ),
        });
    }
    let body = n_steps * g.sample_len() * 4;
    if bytes.len() != EMB_HEADER_LEN + body {
        return Err(format_err(
            file,
            bytes.len().min(EMB_HEADER_LEN + body),
            format!("expected {} payload bytes, found {}", body, bytes.len() - EMB_HEADER_LEN),
        ));
    }
    Ok(f32_block(&bytes[EMB_HEADER_LEN..]))
}

fn encode_meta(steps: &[StepMeta]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for s in steps {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn decode_meta(path: &Path) -> Result<Vec<StepMeta>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let meta: StepMeta = serde_json::from_str(&line)
                .map_err(|e| format_err(&path.display().to_string(), offset, e.to_string()))?;
            out.push(meta);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = serde_json::to_vec_pretty(&dataset.manifest)?;
    manifest.push(b'\n');
    fs::write(dir.join("manifest.json"), manifest)?;
    fs::write(dir.join("goals.emb"), encode_goals(&dataset.goals))?;
    for traj in &dataset.trajectories {
        fs::write(dir.join(&traj.entry.meta_file), encode_meta(&traj.steps)?)?;
        let mut f = fs::File::create(dir.join(&traj.entry.emb_file))?;
        f.write_all(&encode_embeddings(traj, &dataset.manifest))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?).map_err(|e| {
        format_err(&manifest_path.display().to_string(), e.column(), e.to_string())
    })?;
    if manifest.schema_version > MANIFEST_SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.schema_version as u16,
            supported: MANIFEST_SCHEMA_VERSION as u16,
        });
    }
    let goals_path = dir.join("goals.emb");
    let goals = decode_goals(&read_file(&goals_path)?, &goals_path.display().to_string())?;
    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    for entry in &manifest.trajectories {
        let meta_path = dir.join(&entry.meta_file);
        let steps = decode_meta(&meta_path)?;
        if steps.len() != entry.n_steps {
            return Err(Error::Shape {
                file: meta_path.display().to_string(),
                expected: format!("{} steps", entry.n_steps),
                found: format!("{} steps", steps.len()),
            });
        }
        let emb_path = dir.join(&entry.emb_file);
        let embeddings = decode_embeddings(
            &read_file(&emb_path)?,
            &emb_path.display().to_string(),
            &manifest,
            entry.n_steps,
        )?;
        trajectories.push(Trajectory {
            entry: entry.clone(),
            steps,
            embeddings,
        });
    }
    let dataset = Dataset {
        manifest,
        goals,
        trajectories,
    };
    dataset.validate()?;
    Ok(dataset)
}
