//! Versioned little-endian blobs for denoiser parameters and trainer
//! checkpoints, plus the JSON sidecar describing a trained generator.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Architecture, DenoiserParams};
use super::train::{TrainConfig, TrainerCheckpoint};
use super::TailConfig;
use crate::error::{Error, Result};
use crate::regime_hmm::ContextSpec;

pub const PARAMS_VERSION: u32 = 1;
const PARAMS_MAGIC: &[u8; 8] = b"RCVDENOI";
const CKPT_MAGIC: &[u8; 8] = b"RCVCKPT0";

/// Human-readable description stored next to a parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSidecar {
    pub format_version: u32,
    pub architecture: Architecture,
    pub n_params: usize,
    pub schedule_steps: usize,
    pub tail: TailConfig,
    pub training: TrainConfig,
    /// "tail-weighted" or "unweighted".
    pub tag: String,
    pub context: ContextSpec,
    pub hmm_states: usize,
    pub final_loss: f64,
}

struct Out<W: Write> {
    w: W,
}

impl<W: Write> Out<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b).map_err(|e| Error::io("<blob>", e))
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.u64(v.len() as u64)?;
        for x in v {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

struct In<R: Read> {
    r: R,
}

impl<R: Read> In<R> {
    fn fill<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::Input("truncated binary blob".into()))?;
        Ok(b)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.fill()?))
    }
    fn f64s(&mut self, limit: usize) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > limit {
            return Err(Error::Input(format!("blob vector of {n} entries exceeds {limit}")));
        }
        (0..n).map(|_| Ok(f64::from_le_bytes(self.fill()?))).collect()
    }
    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if &self.fill::<8>()? != magic {
            return Err(Error::Input("not a recognized blob (bad magic)".into()));
        }
        let version = u32::from_le_bytes(self.fill()?);
        if version != PARAMS_VERSION {
            return Err(Error::Input(format!("unsupported blob version {version}")));
        }
        Ok(())
    }
}

const MAX_LEN: usize = 1 << 28;

pub fn write_params<W: Write>(params: &DenoiserParams, writer: W) -> Result<()> {
    let mut o = Out { w: writer };
    o.bytes(PARAMS_MAGIC)?;
    o.bytes(&PARAMS_VERSION.to_le_bytes())?;
    let a = &params.arch;
    for v in [a.d, a.z_dim, a.width, a.depth, a.emb_dim, a.gate_width] {
        o.u64(v as u64)?;
    }
    o.f64s(&params.x_mean)?;
    o.f64s(&params.x_scale)?;
    o.f64s(&params.z_mean)?;
    o.f64s(&params.z_scale)?;
    o.f64s(&params.theta)?;
    Ok(())
}

pub fn read_params<R: Read>(reader: R) -> Result<DenoiserParams> {
    let mut i = In { r: reader };
    i.header(PARAMS_MAGIC)?;
    let mut dims = [0usize; 6];
    for v in dims.iter_mut() {
        *v = i.u64()? as usize;
    }
    let arch = Architecture {
        d: dims[0],
        z_dim: dims[1],
        width: dims[2],
        depth: dims[3],
        emb_dim: dims[4],
        gate_width: dims[5],
    };
    let params = DenoiserParams {
        arch,
        x_mean: i.f64s(MAX_LEN)?,
        x_scale: i.f64s(MAX_LEN)?,
        z_mean: i.f64s(MAX_LEN)?,
        z_scale: i.f64s(MAX_LEN)?,
        theta: i.f64s(MAX_LEN)?,
    };
    params.validate()?;
    Ok(params)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the blob at `path` and the sidecar at `path` with a `.json` extension.
pub fn save_params(path: impl AsRef<Path>, params: &DenoiserParams, sidecar: &ParamsSidecar) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_params(params, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(DenoiserParams, ParamsSidecar)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = read_params(bytes.as_slice())?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: ParamsSidecar = serde_json::from_str(&text)?;
    if sidecar.architecture != params.arch {
        return Err(Error::Input("sidecar architecture does not match the parameter blob".into()));
    }
    Ok((params, sidecar))
}

impl TrainerCheckpoint {
    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut o = Out { w: writer };
        o.bytes(CKPT_MAGIC)?;
        o.bytes(&PARAMS_VERSION.to_le_bytes())?;
        o.u64(self.step as u64)?;
        o.bytes(&self.rng_word_pos.to_le_bytes())?;
        match self.threshold {
            Some(t) => {
                o.bytes(&[1])?;
                o.bytes(&t.to_le_bytes())?;
            }
            None => o.bytes(&[0; 9])?,
        }
        o.u64(self.flagged)?;
        o.u64(self.seen)?;
        for v in [&self.theta, &self.ema, &self.m, &self.v, &self.losses] {
            o.f64s(v)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut i = In { r: reader };
        i.header(CKPT_MAGIC)?;
        let step = i.u64()? as usize;
        let rng_word_pos = u128::from_le_bytes(i.fill()?);
        let flag = i.fill::<1>()?[0];
        let t = f64::from_le_bytes(i.fill()?);
        let threshold = (flag == 1).then_some(t);
        let flagged = i.u64()?;
        let seen = i.u64()?;
        Ok(Self {
            step,
            rng_word_pos,
            threshold,
            flagged,
            seen,
            theta: i.f64s(MAX_LEN)?,
            ema: i.f64s(MAX_LEN)?,
            m: i.f64s(MAX_LEN)?,
            v: i.f64s(MAX_LEN)?,
            losses: i.f64s(MAX_LEN)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(bytes.as_slice())
    }
}
