//! Binary model files with a JSON sidecar.
//!
//! Layout (little endian): `b"WSKP"`, version `u32`, a `u32` config block,
//! then all trainable `f32` parameters followed by the fused kernels (when
//! present).

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::conv::ConvParams;
use super::model::{Architecture, Model, ModelConfig, NetworkParams};
use super::repvgg::{RepVggBlockParams, FUSED_KSIZE};
use crate::decoder::FusionConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WSKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    config: &'a ModelConfig,
    fused: bool,
    param_count: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let c = &model.config;
    let fused = model.is_fused();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION as usize);
    put_u32(&mut buf, c.arch.code() as usize);
    put_u32(&mut buf, c.in_channels);
    put_u32(&mut buf, c.scales);
    put_u32(&mut buf, c.widths.len());
    for &w in &c.widths {
        put_u32(&mut buf, w);
    }
    put_u32(&mut buf, c.head_ksize);
    put_u32(&mut buf, usize::from(c.multi_branch));
    put_u32(&mut buf, usize::from(fused));
    put_u32(&mut buf, c.fusion.kernel_count);
    put_u32(&mut buf, c.fusion.base_size);
    put_u32(&mut buf, c.fusion.step);
    for t in model.trainable() {
        put_f32s(&mut buf, t);
    }
    if fused {
        for net in &model.nets {
            for b in &net.blocks {
                let f = b.fused.as_ref().expect("checked fused");
                put_f32s(&mut buf, &f.kernel);
                put_f32s(&mut buf, &f.bias);
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Parse(format!("model file truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u32()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Parse(format!("bad flag value {v}"))),
        }
    }

    fn fill(&mut self, out: &mut [f32]) -> Result<()> {
        let b = self.take(out.len() * 4)?;
        for (o, c) in out.iter_mut().zip(b.chunks_exact(4)) {
            *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        Ok(())
    }
}

const MAX_DIM: usize = 4096;

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not a WSKP model file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Parse(format!("unsupported model version {version}")));
    }
    let arch = Architecture::from_code(r.u32()? as u32)?;
    let in_channels = r.u32()?;
    let scales = r.u32()?;
    let nw = r.u32()?;
    if nw > 256 || scales > 16 || in_channels > MAX_DIM {
        return Err(Error::Parse("implausible model header".into()));
    }
    let widths = (0..nw)
        .map(|_| r.u32().and_then(|w| if w > MAX_DIM { Err(Error::Parse("implausible width".into())) } else { Ok(w) }))
        .collect::<Result<Vec<_>>>()?;
    let head_ksize = r.u32()?;
    let multi_branch = r.flag()?;
    let fused = r.flag()?;
    let fusion = FusionConfig {
        kernel_count: r.u32()?,
        base_size: r.u32()?,
        step: r.u32()?,
    };
    if head_ksize > 63 || fusion.kernel_count > 64 {
        return Err(Error::Parse("implausible model header".into()));
    }
    let config = ModelConfig {
        arch,
        in_channels,
        widths,
        head_ksize,
        multi_branch,
        fusion,
        scales,
    };
    config.validate().map_err(|e| Error::Parse(format!("bad model config: {e}")))?;

    let nets = (0..scales)
        .map(|s| {
            let mut cin = in_channels;
            let blocks = config
                .widths
                .iter()
                .map(|&w| {
                    let b = RepVggBlockParams {
                        conv1x1: multi_branch.then(|| ConvParams::zeros(w, cin, 1)),
                        conv3x3: multi_branch.then(|| ConvParams::zeros(w, cin, 3)),
                        conv5x5: ConvParams::zeros(w, cin, FUSED_KSIZE),
                        use_identity: multi_branch && w == cin,
                        fused: fused.then(|| ConvParams::zeros(w, cin, FUSED_KSIZE)),
                    };
                    cin = w;
                    b
                })
                .collect();
            NetworkParams {
                blocks,
                head: ConvParams::zeros(config.head_channels(s), cin, head_ksize),
            }
        })
        .collect();
    let mut model = Model { config, nets };
    for t in model.trainable_mut() {
        r.fill(t)?;
    }
    if fused {
        for b in model.nets.iter_mut().flat_map(|n| n.blocks.iter_mut()) {
            let f = b.fused.as_mut().expect("allocated fused");
            r.fill(&mut f.kernel)?;
            r.fill(&mut f.bias)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!("{} trailing bytes in model file", bytes.len() - r.pos)));
    }
    if model.trainable().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Parse("non-finite model weight".into()));
    }
    model.validate()?;
    Ok(model)
}

/// Writes the model and `<path>.json` describing it.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        format_version: FORMAT_VERSION,
        config: &model.config,
        fused: model.is_fused(),
        param_count: model.param_count(),
    };
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Parse(e.to_string()))?;
    let sp = sidecar_path(path);
    std::fs::write(&sp, json).map_err(|e| Error::io(sp, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
