//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "IRNNMODL"
//! version    u32
//! variant    u8       0 irnn, 1 irnn-gru, 2 irnn-deep
//! direction  u8       0 forward, 1 backward
//! vocab hash u64      FNV-1a 64 of the serialized vocabulary
//! spec       u32 count, then that many u64 fields
//! tensors    u32 count, then (rows u64, cols u64) per tensor
//! payload    f64 values of every tensor, row-major, in table order
//! ```

use std::fs;
use std::path::Path;

use super::{Direction, ModelParams, ModelSpec, Variant};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::layers::WindowSpec;
use crate::math::Matrix;

pub const MODEL_MAGIC: &[u8; 8] = b"IRNNMODL";
pub const MODEL_VERSION: u32 = 1;

fn spec_fields(s: &ModelSpec) -> Vec<u64> {
    let flags = s.use_classes as u64
        | (s.use_chars as u64) << 1
        | (s.label_context as u64) << 2
        | (s.gru_words_only as u64) << 3;
    [
        s.window.d_w,
        s.window.d_l,
        s.window.d_c,
        s.n_words,
        s.n_classes,
        s.n_chars,
        s.n_labels,
        s.word_dim,
        s.class_dim,
        s.label_dim,
        s.char_dim,
        s.conv_size,
        s.hidden,
        s.first_level,
    ]
    .iter()
    .map(|&v| v as u64)
    .chain([flags])
    .collect()
}

const SPEC_FIELDS: usize = 15;

pub fn encode_model(model: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.num_parameters());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(model.spec.variant.tag());
    out.push(match model.spec.direction {
        Direction::Forward => 0,
        Direction::Backward => 1,
    });
    out.extend_from_slice(&model.vocab_hash.to_le_bytes());
    let fields = spec_fields(&model.spec);
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&(model.tensors.len() as u32).to_le_bytes());
    for t in &model.tensors {
        out.extend_from_slice(&(t.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.value.cols() as u64).to_le_bytes());
    }
    for t in &model.tensors {
        for v in t.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Load(format!("file truncated at byte {}", self.bytes.len()))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Load("size field overflows".into()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::Load("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Load(format!("unsupported model version {version}")));
    }
    let variant = Variant::from_tag(r.u8()?).ok_or_else(|| Error::Load("unknown variant tag".into()))?;
    let direction = match r.u8()? {
        0 => Direction::Forward,
        1 => Direction::Backward,
        d => return Err(Error::Load(format!("unknown direction tag {d}"))),
    };
    let vocab_hash = r.u64()?;
    let n_fields = r.u32()? as usize;
    if n_fields != SPEC_FIELDS {
        return Err(Error::Load(format!("expected {SPEC_FIELDS} spec fields, found {n_fields}")));
    }
    let f: Vec<usize> = (0..n_fields).map(|_| r.usize()).collect::<Result<_>>()?;
    let flags = f[14];
    let spec = ModelSpec {
        variant,
        direction,
        window: WindowSpec {
            d_w: f[0],
            d_l: f[1],
            d_c: f[2],
        },
        n_words: f[3],
        n_classes: f[4],
        n_chars: f[5],
        n_labels: f[6],
        word_dim: f[7],
        class_dim: f[8],
        label_dim: f[9],
        char_dim: f[10],
        conv_size: f[11],
        hidden: f[12],
        first_level: f[13],
        use_classes: flags & 1 != 0,
        use_chars: flags & 2 != 0,
        label_context: flags & 4 != 0,
        gru_words_only: flags & 8 != 0,
    };
    let n_tensors = r.u32()? as usize;
    let shapes: Vec<(usize, usize)> = (0..n_tensors)
        .map(|_| Ok((r.usize()?, r.usize()?)))
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(n_tensors);
    for (rows, cols) in shapes {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Load("tensor shape overflows".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Load("tensor shape overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Load(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelParams::from_tensors(spec, vocab_hash, values).map_err(|e| Error::Load(e.to_string()))
}

pub fn save_model(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

/// Reads a model; with `vocab` given, its hash must match the one stored.
pub fn load_model(path: impl AsRef<Path>, vocab: Option<&Vocabulary>) -> Result<ModelParams> {
    let model = decode_model(&fs::read(path)?)?;
    if let Some(v) = vocab {
        if v.hash() != model.vocab_hash {
            return Err(Error::Load(format!(
                "vocabulary hash {:016x} does not match the model's {:016x}",
                v.hash(),
                model.vocab_hash
            )));
        }
    }
    Ok(model)
}
