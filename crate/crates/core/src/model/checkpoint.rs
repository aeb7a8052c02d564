// VZCK checkpoints (integers little-endian):
//   "VZCK" | u32 version | u32 config length | config JSON
//   | u32 tensor count | u64 scalar count | f64 parameters in registration order
//   | f64 image attention mean, L*L values row-major

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelState, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VZCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn err(offset: usize, msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn write_model(state: &ModelState, out: &mut impl Write) -> Result<()> {
    let config = serde_json::to_vec(&state.config).expect("config serializes");
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(&config)?;
    out.write_all(&(state.params.len() as u32).to_le_bytes())?;
    out.write_all(&(state.param_count() as u64).to_le_bytes())?;
    for t in state.params.iter().chain([&state.image_attention_mean]) {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_model(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_model(state, &mut w)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(err(
                self.bytes.len(),
                format!(
                    "truncated reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_model(bytes: &[u8]) -> Result<ModelState> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(err(0, "bad magic, expected \"VZCK\""));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(err(4, format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = c.u32("config length")? as usize;
    let at = c.pos;
    let config: ModelConfig =
        serde_json::from_slice(c.take(len, "config")?).map_err(|e| err(at, format!("bad config block: {e}")))?;
    let mut state = ModelState::new(config, 0)?;
    let at = c.pos;
    let tensors = c.u32("tensor count")? as usize;
    let scalars = c.u64("scalar count")? as usize;
    if tensors != state.params.len() || scalars != state.param_count() {
        return Err(err(
            at,
            format!(
                "config implies {} tensors / {} scalars, checkpoint holds {tensors} / {scalars}",
                state.params.len(),
                state.param_count()
            ),
        ));
    }
    for (t, what) in state
        .params
        .iter_mut()
        .map(|t| (t, "parameters"))
        .chain([(&mut state.image_attention_mean, "attention mean")])
    {
        let n = t.numel();
        let raw = c.take(n * 8, what)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if c.pos != bytes.len() {
        return Err(err(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(state)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    read_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(s: &ModelState) -> Vec<u8> {
        let mut b = Vec::new();
        write_model(s, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_restores_every_bit() {
        let mut s = ModelState::new(ModelConfig::tiny(), 3).unwrap();
        s.image_attention_mean.data_mut()[5] = 0.375;
        let back = read_model(&encode(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn wrong_magic_and_version() {
        let s = ModelState::new(ModelConfig::tiny(), 3).unwrap();
        let mut b = encode(&s);
        b[0] = b'X';
        assert!(matches!(read_model(&b), Err(ModelError::Checkpoint { offset: 0, .. })));
        let mut b = encode(&s);
        b[4] = 9;
        assert!(matches!(read_model(&b), Err(ModelError::Checkpoint { offset: 4, .. })));
    }

    #[test]
    fn truncation_detected() {
        let s = ModelState::new(ModelConfig::tiny(), 3).unwrap();
        let b = encode(&s);
        let msg = read_model(&b[..b.len() - 3]).unwrap_err().to_string();
        assert!(msg.contains("truncated"), "{msg}");
        let mut long = b.clone();
        long.push(0);
        assert!(read_model(&long).is_err());
    }
}
