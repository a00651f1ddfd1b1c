//! Binary containers: feature stacks (`FSK1`), masks (`MSK1`) and U-Net
//! checkpoints (`UNC1`). All integers and floats are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use fireseg::dataset::Mask;
use fireseg::unet::{UNetConfig, UNetParams};
use fireseg::Tensor;

pub const FSK_MAGIC: &[u8; 4] = b"FSK1";
pub const MSK_MAGIC: &[u8; 4] = b"MSK1";
pub const UNC_MAGIC: &[u8; 4] = b"UNC1";

/// Longest channel name or tensor rank accepted on read; guards against
/// allocating from a corrupt length field.
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(#[from] fireseg::Error),
}

type Result<T> = std::result::Result<T, FormatError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(FormatError::Invalid(msg.into()))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "output path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return invalid(format!("truncated: need {n} bytes, {} left", self.buf.len()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::Magic {
                expected: String::from_utf8_lossy(expected).into(),
                found: String::from_utf8_lossy(found).into(),
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Invalid("element count overflows".into()))?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(self) -> Result<()> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

fn product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| FormatError::Invalid(format!("shape {dims:?} overflows")))
}

/// A named `[C, H, W]` raster stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub names: Vec<String>,
    pub data: Tensor,
}

pub fn encode_fsk(stack: &FeatureStack) -> Result<Vec<u8>> {
    let &[c, h, w] = stack.data.shape() else {
        return invalid(format!("feature stack must be [C,H,W], got {:?}", stack.data.shape()));
    };
    if stack.names.len() != c {
        return invalid(format!("{} names for {c} channels", stack.names.len()));
    }
    let mut out = Vec::with_capacity(16 + stack.data.len() * 4);
    out.extend_from_slice(FSK_MAGIC);
    for d in [c, h, w] {
        put_u32(&mut out, d)?;
    }
    for n in &stack.names {
        put_u32(&mut out, n.len())?;
        out.extend_from_slice(n.as_bytes());
    }
    put_f32s(&mut out, stack.data.data());
    Ok(out)
}

pub fn decode_fsk(bytes: &[u8]) -> Result<FeatureStack> {
    let mut r = Reader { buf: bytes };
    r.magic(FSK_MAGIC)?;
    let (c, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    let mut names = Vec::with_capacity(c.min(1024));
    for i in 0..c {
        let len = r.u32()?;
        if len > MAX_NAME {
            return invalid(format!("channel {i} name length {len} exceeds {MAX_NAME}"));
        }
        let raw = r.take(len)?;
        let name =
            std::str::from_utf8(raw).map_err(|_| FormatError::Invalid(format!("channel {i} name is not UTF-8")))?;
        names.push(name.to_owned());
    }
    let n = product(&[c, h, w])?;
    let data = Tensor::new(&[c, h, w], r.f32s(n)?)?;
    r.finish()?;
    Ok(FeatureStack { names, data })
}

pub fn encode_msk(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + mask.labels().len());
    out.extend_from_slice(MSK_MAGIC);
    put_u32(&mut out, mask.height())?;
    put_u32(&mut out, mask.width())?;
    out.extend_from_slice(mask.labels());
    Ok(out)
}

pub fn decode_msk(bytes: &[u8]) -> Result<Mask> {
    let mut r = Reader { buf: bytes };
    r.magic(MSK_MAGIC)?;
    let (h, w) = (r.u32()?, r.u32()?);
    let labels = r.take(product(&[h, w])?)?.to_vec();
    r.finish()?;
    Ok(Mask::new(h, w, labels)?)
}

/// Layout: magic, u32 in_channels, init_features, depth, num_classes,
/// u64 seed, u32 tensor count, then per tensor u32 rank, u32 dims and the
/// f32 values, in topology order.
pub fn encode_checkpoint(params: &UNetParams) -> Result<Vec<u8>> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(32 + params.parameter_count() * 4);
    out.extend_from_slice(UNC_MAGIC);
    for v in [cfg.in_channels, cfg.init_features, cfg.depth, cfg.num_classes] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    put_u32(&mut out, params.tensors().count())?;
    for t in params.tensors() {
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<UNetParams> {
    let mut r = Reader { buf: bytes };
    r.magic(UNC_MAGIC)?;
    let config = UNetConfig {
        in_channels: r.u32()?,
        init_features: r.u32()?,
        depth: r.u32()?,
        num_classes: r.u32()?,
        seed: r.u64()?,
    };
    config.validate()?;
    let count = r.u32()?;
    let expected = config.layers().len() * 2;
    if count != expected {
        return invalid(format!("{count} tensors, architecture needs {expected}"));
    }
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let rank = r.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return invalid(format!("tensor {i} has rank {rank}"));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(product(&shape)?)?;
        tensors.push(Tensor::new(&shape, data)?);
    }
    r.finish()?;
    Ok(UNetParams::from_tensors(config, tensors)?)
}

pub fn read_file(path: &Path) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    Ok(buf)
}

pub fn read_fsk(path: &Path) -> anyhow::Result<FeatureStack> {
    decode_fsk(&read_file(path)?).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn read_msk(path: &Path) -> anyhow::Result<Mask> {
    decode_msk(&read_file(path)?).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn read_checkpoint(path: &Path) -> anyhow::Result<UNetParams> {
    decode_checkpoint(&read_file(path)?).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
