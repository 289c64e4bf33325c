//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RWDM" | u16 version
//! u32 token_dim | u32 proj_dim | u32 tokens_per_view | u32 num_views | u32 goal_dim
//! u32 n_head | n_head × u32 width
//! u32 n_film_hidden | n_film_hidden × u32 width
//! f64 leaky_slope | f64 layernorm_eps
//! u32 tensor_count
//! tensor_count × ( u32 rows | u32 cols | rows·cols × f32 )
//! ```
//!
//! Tensors follow [`RewardModel::params`] order; vectors are stored as `1×n`.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, RewardModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RWDM";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &RewardModel, mut w: W) -> Result<()> {
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.token_dim, c.proj_dim, c.tokens_per_view, c.num_views, c.goal_dim] {
        put_u32(&mut buf, v)?;
    }
    put_u32(&mut buf, c.head_widths.len())?;
    for &w in &c.head_widths {
        put_u32(&mut buf, w)?;
    }
    put_u32(&mut buf, c.film_generator_widths.len())?;
    for &w in &c.film_generator_widths {
        put_u32(&mut buf, w)?;
    }
    buf.extend_from_slice(&c.leaky_slope.to_le_bytes());
    buf.extend_from_slice(&model.head.layers[0].ln_eps.to_le_bytes());

    let shapes = tensor_shapes(model);
    let params = model.params();
    put_u32(&mut buf, params.len())?;
    for (p, (rows, cols)) in params.iter().zip(shapes) {
        put_u32(&mut buf, rows)?;
        put_u32(&mut buf, cols)?;
        for &v in p.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn tensor_shapes(model: &RewardModel) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut push_layer = |l: &crate::nn::DenseLayer| {
        out.push(l.weight.shape());
        out.push((1, l.bias.len()));
        if l.spec.has_layernorm {
            out.push((1, l.ln_gain.len()));
            out.push((1, l.ln_shift.len()));
        }
    };
    push_layer(&model.projection);
    model.film_generator.layers.iter().for_each(&mut push_layer);
    model.head.layers.iter().for_each(&mut push_layer);
    push_layer(&model.scalar_out);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!(
                    "{}: truncated at byte {} (needed {} more bytes)",
                    self.file,
                    self.bytes.len(),
                    self.pos + n - self.bytes.len()
                ),
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn format_err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            file: self.file.clone(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }
}

pub fn read_checkpoint<R: Read>(mut r: R, file: &str) -> Result<RewardModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        file: file.to_string(),
    };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        cur.pos = 0;
        return Err(cur.format_err(format!("bad magic {magic:?}, expected \"RWDM\"")));
    }
    let version = cur.u16()?;
    if version > CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if version == 0 {
        return Err(cur.format_err("version 0 is not a valid checkpoint version"));
    }
    let token_dim = cur.u32()?;
    let proj_dim = cur.u32()?;
    let tokens_per_view = cur.u32()?;
    let num_views = cur.u32()?;
    let goal_dim = cur.u32()?;
    let n_head = cur.u32()?;
    if n_head > 64 {
        return Err(cur.format_err(format!("implausible head depth {n_head}")));
    }
    let head_widths = (0..n_head).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let n_film = cur.u32()?;
    if n_film > 64 {
        return Err(cur.format_err(format!("implausible FiLM generator depth {n_film}")));
    }
    let film_generator_widths = (0..n_film).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let leaky_slope = cur.f64()?;
    let ln_eps = cur.f64()?;
    let config = ModelConfig {
        token_dim,
        proj_dim,
        tokens_per_view,
        num_views,
        head_widths,
        goal_dim,
        film_generator_widths,
        leaky_slope,
    };
    config
        .validate()
        .map_err(|e| cur.format_err(format!("invalid model config: {e}")))?;

    // Shapes come from the config; values are overwritten below.
    let mut model = RewardModel::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    for layer in model.head.layers.iter_mut() {
        layer.ln_eps = ln_eps;
    }
    let shapes = tensor_shapes(&model);
    let count = cur.u32()?;
    if count != shapes.len() {
        return Err(cur.format_err(format!("{} tensors for a model with {}", count, shapes.len())));
    }
    for (slot, expected) in model.params_mut().into_iter().zip(shapes) {
        let rows = cur.u32()?;
        let cols = cur.u32()?;
        if (rows, cols) != expected {
            return Err(cur.format_err(format!(
                "tensor shape {rows}x{cols}, expected {}x{}",
                expected.0, expected.1
            )));
        }
        let raw = cur.take(rows * cols * 4)?;
        for (v, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::Numeric(format!("{file}: non-finite parameter")));
            }
            *v = x as f64;
        }
    }
    if cur.pos != bytes.len() {
        return Err(cur.format_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &RewardModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RewardModel> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(io::BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_model(seed: u64) -> RewardModel {
        let config = ModelConfig {
            token_dim: 6,
            proj_dim: 2,
            tokens_per_view: 3,
            num_views: 2,
            head_widths: vec![8, 6, 5, 4],
            goal_dim: 4,
            film_generator_widths: vec![5],
            leaky_slope: 0.01,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = RewardModel::init(config, &mut rng).unwrap();
        // Move away from the identity-FiLM init so every tensor matters.
        for p in m.params_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        m
    }

    fn encode(m: &RewardModel) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_equals_narrowed_model() {
        let m = small_model(1);
        let back = read_checkpoint(encode(&m).as_slice(), "mem").unwrap();
        assert_eq!(back, m.narrowed());
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut buf = encode(&small_model(2));
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(buf.as_slice(), "mem"), Err(Error::Format { .. })));
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut buf = encode(&small_model(3));
        buf[4..6].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            read_checkpoint(buf.as_slice(), "mem"),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn truncation_is_io_error() {
        let buf = encode(&small_model(4));
        for cut in [3, 10, buf.len() / 2, buf.len() - 1] {
            match read_checkpoint(&buf[..cut], "mem") {
                Err(Error::Io(e)) => assert_eq!(e.kind(), io::ErrorKind::UnexpectedEof),
                other => panic!("cut {cut}: expected I/O error, got {other:?}"),
            }
        }
    }

    #[test]
    fn header_is_bit_exact() {
        let buf = encode(&small_model(5));
        assert_eq!(&buf[0..4], b"RWDM");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 6);
    }
}
