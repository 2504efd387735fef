//! Binary checkpoint archives.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic        8 bytes  "LBPNNCK\0"
//! version      u32
//! K, C, kh, kw, H, W    u32 × 6
//! lambda, tau_floor     f64 × 2
//! taus         f64 × K
//! kernels      f64 × (K+1)·C·kh·kw, layer-major, each layer row-major
//! warm vectors for k = 0..=K: u32 length, then f64 × length
//! has_training u8
//! [training]   epoch u64, batches u64, beta f64, gamma f64, seed u64,
//!              sample count u64, then per sample: id u64, f64 × (K−1)·C·H·W
//! ```
//!
//! The rng needs no stored state: every epoch shuffles on its own stream of
//! `seed`, so `(seed, epoch)` restores it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::conv::ConvLinearOperator;
use crate::error::{Error, Result};
use crate::pnn::{AuxVars, PnnParams};
use crate::prox::LinfBall;
use crate::tensor::FeatureMap;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"LBPNNCK\0";
pub const FORMAT_VERSION: u32 = 1;

/// Optimiser state needed to resume LB-FB or SGD training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSnapshot {
    pub epoch: u64,
    pub batches: u64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub aux_store: BTreeMap<u64, AuxVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PnnParams,
    pub training: Option<TrainingSnapshot>,
}

impl Checkpoint {
    pub fn params_only(params: PnnParams) -> Self {
        Self { params, training: None }
    }

    pub fn from_state(state: &TrainState) -> Self {
        Self {
            params: state.params.clone(),
            training: Some(TrainingSnapshot {
                epoch: state.epoch as u64,
                batches: state.batches,
                beta: state.beta,
                gamma: state.gamma,
                seed: state.seed,
                aux_store: state.aux_store.clone(),
            }),
        }
    }

    /// Training state to resume from, if the archive carries one.
    pub fn into_state(self) -> Option<TrainState> {
        let t = self.training?;
        Some(TrainState {
            params: self.params,
            aux_store: t.aux_store,
            beta: t.beta,
            gamma: t.gamma,
            epoch: t.epoch as usize,
            batches: t.batches,
            seed: t.seed,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn write_to(&self, out: &mut Vec<u8>) -> std::io::Result<()> {
        let p = &self.params;
        let (c, h, w) = p.feature_shape();
        let (kh, kw) = p.kernel_size();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        for dim in [p.depth(), c, kh, kw, h, w] {
            out.write_u32::<LittleEndian>(dim as u32)?;
        }
        out.write_f64::<LittleEndian>(p.lambda())?;
        out.write_f64::<LittleEndian>(p.tau_floor())?;
        write_f64s(out, p.taus())?;
        for op in p.ops() {
            write_f64s(out, op.kernels())?;
        }
        for v in p.spectral_vectors() {
            out.write_u32::<LittleEndian>(v.len() as u32)?;
            write_f64s(out, v)?;
        }
        match &self.training {
            None => out.write_u8(0)?,
            Some(t) => {
                out.write_u8(1)?;
                out.write_u64::<LittleEndian>(t.epoch)?;
                out.write_u64::<LittleEndian>(t.batches)?;
                out.write_f64::<LittleEndian>(t.beta)?;
                out.write_f64::<LittleEndian>(t.gamma)?;
                out.write_u64::<LittleEndian>(t.seed)?;
                out.write_u64::<LittleEndian>(t.aux_store.len() as u64)?;
                for (id, aux) in &t.aux_store {
                    out.write_u64::<LittleEndian>(*id)?;
                    for block in &aux.blocks {
                        write_f64s(out, block.values())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let ck = Self::read_from(&mut r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::Checkpoint("archive is truncated".into())
            }
            other => other,
        })?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after archive",
                bytes.len() - r.position() as usize
            )));
        }
        Ok(ck)
    }

    fn read_from(r: &mut Cursor<&[u8]>) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let [depth, c, kh, kw, h, w] = dims;
        let remaining = r.get_ref().len() as u64 - r.position();
        let need = ((depth + 1) * c * kh * kw + depth) as u64 * 8;
        if depth < 2 || c == 0 || kh == 0 || kw == 0 || need > remaining {
            return Err(Error::Checkpoint(format!(
                "implausible header: K={depth}, C={c}, kernel {kh}x{kw}, image {h}x{w}"
            )));
        }
        let lambda = r.read_f64::<LittleEndian>()?;
        let tau_floor = r.read_f64::<LittleEndian>()?;
        let ball = LinfBall::new(lambda)?;
        let taus = read_f64s(r, depth)?;
        let ops = (0..=depth)
            .map(|_| ConvLinearOperator::new(c, (kh, kw), read_f64s(r, c * kh * kw)?, (h, w)))
            .collect::<Result<Vec<_>>>()?;
        let mut params = PnnParams::from_parts(ops, taus, ball, tau_floor)?;
        let mut vecs = Vec::with_capacity(depth + 1);
        for _ in 0..=depth {
            let len = r.read_u32::<LittleEndian>()? as usize;
            vecs.push(read_f64s(r, len)?);
        }
        params.set_spectral_vectors(vecs)?;

        let training = match r.read_u8()? {
            0 => None,
            1 => {
                let epoch = r.read_u64::<LittleEndian>()?;
                let batches = r.read_u64::<LittleEndian>()?;
                let beta = r.read_f64::<LittleEndian>()?;
                let gamma = r.read_f64::<LittleEndian>()?;
                let seed = r.read_u64::<LittleEndian>()?;
                let count = r.read_u64::<LittleEndian>()?;
                let mut aux_store = BTreeMap::new();
                for _ in 0..count {
                    let id = r.read_u64::<LittleEndian>()?;
                    let blocks = (1..depth)
                        .map(|_| FeatureMap::new(c, h, w, read_f64s(r, c * h * w)?))
                        .collect::<Result<Vec<_>>>()?;
                    aux_store.insert(id, AuxVars { blocks });
                }
                Some(TrainingSnapshot {
                    epoch,
                    batches,
                    beta,
                    gamma,
                    seed,
                    aux_store,
                })
            }
            flag => return Err(Error::Checkpoint(format!("bad training-section flag {flag}"))),
        };
        Ok(Self { params, training })
    }

    /// Writes to `path` via a temporary sibling and a rename, so an
    /// interrupted write never leaves a partial archive behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) -> std::io::Result<()> {
    out.reserve(values.len() * 8);
    for v in values {
        out.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_f64s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if n as u64 * 8 > remaining {
        return Err(Error::Checkpoint("archive is truncated".into()));
    }
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}
