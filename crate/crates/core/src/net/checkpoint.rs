//! Checkpoint serialization.
//!
//! Layout (little-endian):
//!   magic "PRNC" | version u32 = 1 | header length u32 | header bytes
//!   | parameter blob (canonical order, raw f32) | CRC32 of the blob
//!   | optional trainer section:
//!     magic "TRNR" | epoch u32 | step u64 | adam m blob | adam v blob
//!     | CRC32 of both blobs
//!
//! The header is UTF-8 `key=value` lines covering every `NetworkConfig`
//! field. The blob length is implied by the header; a mismatch between the
//! two is reported as corruption.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    CellKind, InputMode, NetworkConfig, OutputMode, ParameterSet, ResBlockMode,
};
use crate::error::{Error, Result};
use crate::net::count_parameters;
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"PRNC";
const TRAINER_MAGIC: &[u8; 4] = b"TRNR";
const VERSION: u32 = 1;

/// Optimizer state stored alongside parameters so long runs can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Next epoch to run (epochs 0..epoch are complete).
    pub epoch: u32,
    /// Optimizer step counter (ADAM bias correction).
    pub step: u64,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

fn header_string(config: &NetworkConfig) -> String {
    format!(
        "recurrent_cell={}\nresblock_mode={}\nstages_t={}\ninput_mode={}\noutput_mode={}\nchannels={}\nresblock_count={}\n",
        config.recurrent_cell.as_str(),
        config.resblock_mode.as_str(),
        config.stages_t,
        config.input_mode.as_str(),
        config.output_mode.as_str(),
        config.channels,
        config.resblock_count,
    )
}

fn parse_header(text: &str) -> Result<NetworkConfig> {
    let mut cell = None;
    let mut mode = None;
    let mut stages = None;
    let mut input = None;
    let mut output = None;
    let mut channels = None;
    let mut blocks = None;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header line `{line}`")))?;
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("invalid integer `{v}` for {key}")))
        };
        match key {
            "recurrent_cell" => cell = Some(CellKind::parse(value)?),
            "resblock_mode" => mode = Some(ResBlockMode::parse(value)?),
            "stages_t" => stages = Some(parse_usize(value)?),
            "input_mode" => input = Some(InputMode::parse(value)?),
            "output_mode" => output = Some(OutputMode::parse(value)?),
            "channels" => channels = Some(parse_usize(value)?),
            "resblock_count" => blocks = Some(parse_usize(value)?),
            other => return Err(Error::Format(format!("unknown header key `{other}`"))),
        }
    }
    let missing = |name: &str| Error::Format(format!("header missing `{name}`"));
    let config = NetworkConfig {
        recurrent_cell: cell.ok_or_else(|| missing("recurrent_cell"))?,
        resblock_mode: mode.ok_or_else(|| missing("resblock_mode"))?,
        stages_t: stages.ok_or_else(|| missing("stages_t"))?,
        input_mode: input.ok_or_else(|| missing("input_mode"))?,
        output_mode: output.ok_or_else(|| missing("output_mode"))?,
        channels: channels.ok_or_else(|| missing("channels"))?,
        resblock_count: blocks.ok_or_else(|| missing("resblock_count"))?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("header config invalid: {e}")))?;
    Ok(config)
}

fn write_f32_blob(w: &mut impl Write, values: &[f32], crc: &mut crc32fast::Hasher) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    crc.update(&buf);
    w.write_all(&buf)?;
    Ok(())
}

/// Saves parameters and config; parameters are written as 32-bit floats
/// regardless of the in-memory precision.
pub fn save_checkpoint<T: Scalar>(
    params: &ParameterSet<T>,
    config: &NetworkConfig,
    path: &Path,
) -> Result<()> {
    save_checkpoint_with_trainer(params, config, path, None)
}

/// Saves parameters plus optional optimizer state for resuming.
pub fn save_checkpoint_with_trainer<T: Scalar>(
    params: &ParameterSet<T>,
    config: &NetworkConfig,
    path: &Path,
    trainer: Option<&TrainerState>,
) -> Result<()> {
    let expected = count_parameters(config);
    let flat = params.flatten();
    if flat.len() != expected {
        return Err(Error::Corruption(format!(
            "parameter count {} does not match config ({expected})",
            flat.len()
        )));
    }
    let flat32: Vec<f32> = flat.iter().map(|v| v.as_f64() as f32).collect();

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = header_string(config);
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;

    let mut crc = crc32fast::Hasher::new();
    write_f32_blob(&mut w, &flat32, &mut crc)?;
    w.write_all(&crc.finalize().to_le_bytes())?;

    if let Some(t) = trainer {
        if t.adam_m.len() != expected || t.adam_v.len() != expected {
            return Err(Error::Corruption(format!(
                "trainer state length {}/{} does not match config ({expected})",
                t.adam_m.len(),
                t.adam_v.len()
            )));
        }
        w.write_all(TRAINER_MAGIC)?;
        w.write_all(&t.epoch.to_le_bytes())?;
        w.write_all(&t.step.to_le_bytes())?;
        let mut crc = crc32fast::Hasher::new();
        write_f32_blob(&mut w, &t.adam_m, &mut crc)?;
        write_f32_blob(&mut w, &t.adam_v, &mut crc)?;
        w.write_all(&crc.finalize().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        let mut read = 0;
        while read < len {
            match self.inner.read(&mut buf[read..])? {
                0 => {
                    return Err(Error::Corruption(format!(
                        "truncated file while reading {what} ({read}/{len} bytes)"
                    )))
                }
                n => read += n,
            }
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.exact(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.exact(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32_blob(&mut self, count: usize, what: &str, crc: &mut crc32fast::Hasher) -> Result<Vec<f32>> {
        let bytes = self.exact(count * 4, what)?;
        crc.update(&bytes);
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Reads up to 4 bytes; Ok(None) at clean EOF.
    fn maybe_magic(&mut self) -> Result<Option<[u8; 4]>> {
        let mut buf = [0u8; 4];
        let mut read = 0;
        while read < 4 {
            match self.inner.read(&mut buf[read..])? {
                0 if read == 0 => return Ok(None),
                0 => {
                    return Err(Error::Corruption(
                        "truncated file inside trailing section magic".into(),
                    ))
                }
                n => read += n,
            }
        }
        Ok(Some(buf))
    }
}

/// Loads parameters and config, rejecting malformed or corrupt files.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet<f32>, NetworkConfig)> {
    let (params, config, _) = load_checkpoint_full(path)?;
    Ok((params, config))
}

/// Loads parameters, config, and the trainer section when present.
pub fn load_checkpoint_full(
    path: &Path,
) -> Result<(ParameterSet<f32>, NetworkConfig, Option<TrainerState>)> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let magic = r.exact(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let header_len = r.u32("header length")? as usize;
    if header_len > 64 * 1024 {
        return Err(Error::Format(format!(
            "implausible header length {header_len}"
        )));
    }
    let header_bytes = r.exact(header_len, "header")?;
    let header = std::str::from_utf8(&header_bytes)
        .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
    let config = parse_header(header)?;
    let expected = count_parameters(&config);

    let mut crc = crc32fast::Hasher::new();
    let values = r.f32_blob(expected, "parameter blob", &mut crc)?;
    let stored_crc = r.u32("parameter CRC")?;
    if crc.finalize() != stored_crc {
        return Err(Error::Corruption(
            "parameter blob CRC mismatch (count or contents differ from header config)".into(),
        ));
    }

    let trainer = match r.maybe_magic()? {
        None => None,
        Some(m) if m == *TRAINER_MAGIC => {
            let epoch = r.u32("trainer epoch")?;
            let step = r.u64("trainer step")?;
            let mut crc = crc32fast::Hasher::new();
            let adam_m = r.f32_blob(expected, "adam m blob", &mut crc)?;
            let adam_v = r.f32_blob(expected, "adam v blob", &mut crc)?;
            let stored = r.u32("trainer CRC")?;
            if crc.finalize() != stored {
                return Err(Error::Corruption("trainer section CRC mismatch".into()));
            }
            Some(TrainerState {
                epoch,
                step,
                adam_m,
                adam_v,
            })
        }
        Some(m) => {
            return Err(Error::Format(format!(
                "unexpected trailing section magic {m:?}"
            )))
        }
    };
    if r.maybe_magic()?.is_some() && trainer.is_some() {
        return Err(Error::Format("trailing data after trainer section".into()));
    }

    let mut params = ParameterSet::<f32>::zeros(&config)?;
    params.assign_from_flat(&values)?;
    Ok((params, config, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            channels: 4,
            resblock_count: 2,
            stages_t: 3,
            ..NetworkConfig::prenet_r()
        }
    }

    #[test]
    fn round_trip_is_bitwise_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.prnc");
        let cfg = small_cfg();
        let params = build::<f32>(&cfg, 11).unwrap();
        save_checkpoint(&params, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        let a = params.flatten();
        let b = loaded.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn trainer_section_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.prnc");
        let cfg = small_cfg();
        let params = build::<f32>(&cfg, 1).unwrap();
        let n = params.total_parameters();
        let state = TrainerState {
            epoch: 17,
            step: 1234,
            adam_m: (0..n).map(|i| i as f32 * 0.5).collect(),
            adam_v: (0..n).map(|i| i as f32 * 0.25).collect(),
        };
        save_checkpoint_with_trainer(&params, &cfg, &path, Some(&state)).unwrap();
        let (_, _, loaded) = load_checkpoint_full(&path).unwrap();
        assert_eq!(loaded.unwrap(), state);
    }

    #[test]
    fn truncated_file_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.prnc");
        let cfg = small_cfg();
        let params = build::<f32>(&cfg, 2).unwrap();
        save_checkpoint(&params, &cfg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.prnc");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_version_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.prnc");
        let cfg = small_cfg();
        let params = build::<f32>(&cfg, 8).unwrap();
        save_checkpoint(&params, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("version 99"));
    }

    #[test]
    fn blob_shorter_than_config_demands_is_corruption() {
        // Header claims PRN (95,107 params) but the blob holds far fewer.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.prnc");
        let cfg = small_cfg();
        let params = build::<f32>(&cfg, 3).unwrap();
        save_checkpoint(&params, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let header = header_string(&NetworkConfig::prn());
        let mut forged = Vec::new();
        forged.extend_from_slice(MAGIC);
        forged.extend_from_slice(&VERSION.to_le_bytes());
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(header.as_bytes());
        // Reuse the small blob + CRC from the real file.
        let old_header_len = header_string(&cfg).len();
        forged.extend_from_slice(&bytes.split_off(4 + 4 + 4 + old_header_len));
        std::fs::write(&path, &forged).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn corrupted_blob_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.prnc");
        let cfg = small_cfg();
        let params = build::<f32>(&cfg, 4).unwrap();
        save_checkpoint(&params, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 20;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Corruption(_))
        ));
    }
}
