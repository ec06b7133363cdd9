//! Checksummed binary container for trained models: named parameter
//! tensors, optimizer moments, RNG position, and a config snapshot. All
//! integers and floats are little-endian; the trailing CRC32 covers every
//! preceding byte, so any truncation or corruption is detected on load.

use std::fs;
use std::path::Path;

use super::IoError;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PUFL";

/// Adam moments aligned with the parameter table order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Ordered key/value snapshot of the run configuration.
    pub config: Vec<(String, String)>,
    pub epoch: u64,
    /// (name, rows, cols, row-major values) in registration order.
    pub params: Vec<(String, usize, usize, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// CRC-32 (IEEE), bit-reflected, as used by gzip and PNG.
pub(crate) fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer {
            buf: Vec::with_capacity(4096),
        }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::Checkpoint {
                detail: format!("truncated at byte {} reading {what}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128, IoError> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize, IoError> {
        let n = self.u64(what)?;
        // A length can never exceed what remains in the file.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(IoError::Checkpoint {
                detail: format!("length {n} for {what} exceeds file size"),
            });
        }
        Ok(n as usize)
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>, IoError> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String, IoError> {
        let n = self.len(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| IoError::Checkpoint {
            detail: format!("{what} is not valid utf-8"),
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(ckpt.epoch);

    let config_text: String = ckpt
        .config
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    w.bytes(config_text.as_bytes());

    w.u64(ckpt.params.len() as u64);
    for (name, rows, cols, data) in &ckpt.params {
        if data.len() != rows * cols {
            return Err(IoError::Checkpoint {
                detail: format!("parameter {name}: {} values for {rows}x{cols}", data.len()),
            });
        }
        w.bytes(name.as_bytes());
        w.u64(*rows as u64);
        w.u64(*cols as u64);
        w.f64_slice(data);
    }

    match &ckpt.optimizer {
        None => w.buf.push(0),
        Some(opt) => {
            if opt.m.len() != ckpt.params.len() || opt.v.len() != ckpt.params.len() {
                return Err(IoError::Checkpoint {
                    detail: format!(
                        "optimizer holds {}/{} moment vectors for {} parameters",
                        opt.m.len(),
                        opt.v.len(),
                        ckpt.params.len()
                    ),
                });
            }
            w.buf.push(1);
            w.u64(opt.step);
            for (m, v) in opt.m.iter().zip(&opt.v) {
                w.f64_slice(m);
                w.f64_slice(v);
            }
        }
    }

    w.buf.extend_from_slice(&ckpt.rng_seed);
    w.u128(ckpt.rng_word_pos);

    let crc = crc32(&w.buf);
    w.u32(crc);
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(IoError::Checkpoint {
            detail: format!("file too small ({} bytes)", buf.len()),
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(IoError::Checkpoint {
            detail: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        });
    }

    let mut r = Reader { buf: body, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(IoError::Checkpoint {
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Checkpoint {
            detail: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let epoch = r.u64("epoch")?;

    let config_text = r.string("config")?;
    let mut config = Vec::new();
    for line in config_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            config.push((k.trim().to_string(), v.trim().to_string()));
        }
    }

    let n_params = r.len("parameter count")?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string("parameter name")?;
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 32) {
            return Err(IoError::Checkpoint {
                detail: format!("parameter {name}: implausible shape {rows}x{cols}"),
            });
        }
        let data = r.f64_vec(rows * cols, "parameter values")?;
        params.push((name, rows, cols, data));
    }

    let optimizer = match r.take(1, "optimizer flag")?[0] {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for (name, rows, cols, _) in &params {
                let _ = name;
                m.push(r.f64_vec(rows * cols, "first moment")?);
                v.push(r.f64_vec(rows * cols, "second moment")?);
            }
            Some(OptimizerState { step, m, v })
        }
        other => {
            return Err(IoError::Checkpoint {
                detail: format!("bad optimizer flag {other}"),
            })
        }
    };

    let rng_seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let rng_word_pos = r.u128("rng position")?;
    if r.pos != body.len() {
        return Err(IoError::Checkpoint {
            detail: format!("{} trailing bytes", body.len() - r.pos),
        });
    }

    Ok(Checkpoint {
        config,
        epoch,
        params,
        optimizer,
        rng_seed,
        rng_word_pos,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let params: Vec<(String, usize, usize, Vec<f64>)> = vec![
            (
                "flow.block0.mix.w".into(),
                3,
                3,
                (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
            ("tiny".into(), 1, 2, vec![1e-300, -0.0]),
        ];
        let m = params
            .iter()
            .map(|(_, r, c, _)| vec![0.25; r * c])
            .collect();
        let v = params
            .iter()
            .map(|(_, r, c, _)| vec![1e-9; r * c])
            .collect();
        Checkpoint {
            config: vec![
                ("variant".into(), "full".into()),
                ("flow.blocks".into(), "8".into()),
            ],
            epoch: 17,
            params,
            optimizer: Some(OptimizerState { step: 4211, m, v }),
            rng_seed: [7; 32],
            rng_word_pos: 123_456_789_012_345,
        }
    }

    #[test]
    fn crc32_matches_the_reference_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pufl");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.epoch, ckpt.epoch);
        assert_eq!(back.rng_seed, ckpt.rng_seed);
        assert_eq!(back.rng_word_pos, ckpt.rng_word_pos);
        for ((an, ar, ac, ad), (bn, br, bc, bd)) in ckpt.params.iter().zip(&back.params) {
            assert_eq!((an, ar, ac), (bn, br, bc));
            for (x, y) in ad.iter().zip(bd) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.optimizer, ckpt.optimizer);
        assert_eq!(back.config_value("variant"), Some("full"));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pufl");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [bytes.len() - 5, bytes.len() / 2, 3] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            let msg = err.to_string();
            assert!(
                msg.contains("checksum") || msg.contains("too small"),
                "cut {cut}: {msg}"
            );
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pufl");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pufl");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Bump the version field and refresh the checksum so only the
        // version check can fail.
        bytes[4] = 99;
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }
}
