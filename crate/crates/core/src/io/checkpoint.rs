//! `TATSCKPT` training checkpoints.
//!
//! Layout (all integers and floats little-endian):
//! magic `TATSCKPT`, `u32` version, config text (`u32` length + UTF-8),
//! `u64` step, rng state (32-byte seed, `u64` stream, `u128` word position),
//! the autoencoder and sampler parameter stores, then the episode buffer.
//!
//! A store is a `u32` count followed by, per parameter in name order:
//! name, `u8` decay flag, `u32` rank and `u64` dims, `f64` values, Adam
//! first and second moments, and the `u64` Adam step.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_array, read_f64, read_u32, read_u64};
use crate::error::{Result, TatsError};
use crate::optim::ParamStore;
use crate::ppo::Episode;
use crate::tensor::DiffTensor;

pub const CKPT_MAGIC: &[u8; 8] = b"TATSCKPT";
pub const CKPT_VERSION: u32 = 1;
const KIND: &str = "TATSCKPT";

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Config echo in `key = value` form.
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    pub phi: ParamStore,
    pub theta: ParamStore,
    pub episodes: Vec<Episode>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| {
        TatsError::invalid(format!("length {v} does not fit the checkpoint format"))
    })?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_len(r: &mut impl Read) -> Result<usize> {
    let n = read_u32(r, KIND)? as usize;
    // guards allocations against corrupt lengths
    if n > 1 << 28 {
        return Err(TatsError::format(KIND, format!("implausible length {n}")));
    }
    Ok(n)
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r, KIND)).collect()
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| TatsError::format(KIND, "unexpected end of file"))?;
    String::from_utf8(buf).map_err(|_| TatsError::format(KIND, "string is not UTF-8"))
}

fn write_store(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    put_u32(w, store.len())?;
    for (name, p) in store.iter() {
        put_str(w, name)?;
        w.write_all(&[p.decay as u8])?;
        put_u32(w, p.tensor.shape.len())?;
        for &d in &p.tensor.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        put_f64s(w, &p.tensor.values)?;
        put_f64s(w, &p.state.m)?;
        put_f64s(w, &p.state.v)?;
        w.write_all(&p.state.step.to_le_bytes())?;
    }
    Ok(())
}

fn read_store(r: &mut impl Read) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for _ in 0..get_len(r)? {
        let name = get_str(r)?;
        let decay = match read_array::<1>(r, KIND)?[0] {
            0 => false,
            1 => true,
            b => {
                return Err(TatsError::format(
                    KIND,
                    format!("bad decay flag {b} for `{name}`"),
                ))
            }
        };
        let rank = get_len(r)?;
        let shape = (0..rank)
            .map(|_| read_u64(r, KIND).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(TatsError::format(
                KIND,
                format!("implausible shape {shape:?} for `{name}`"),
            ));
        }
        let values = get_f64s(r, n)?;
        store.insert(&name, DiffTensor::new(shape, values)?, decay)?;
        let st = &mut store.param_mut(&name).expect("just inserted").state;
        st.m = get_f64s(r, n)?;
        st.v = get_f64s(r, n)?;
        st.step = read_u64(r, KIND)?;
    }
    Ok(store)
}

fn write_episode(w: &mut impl Write, ep: &Episode) -> Result<()> {
    put_u32(w, ep.tokens.shape.len())?;
    for &d in &ep.tokens.shape {
        put_u32(w, d)?;
    }
    put_f64s(w, &ep.tokens.values)?;
    put_f64s(w, &[ep.old_logprob, ep.reward, ep.old_value])?;
    put_u32(w, ep.masked.len())?;
    for &i in &ep.masked {
        put_u32(w, i)?;
    }
    match &ep.motion {
        None => w.write_all(&[0])?,
        Some(m) => {
            w.write_all(&[1])?;
            put_u32(w, m.len())?;
            w.write_all(&m.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        }
    }
    Ok(())
}

fn read_episode(r: &mut impl Read) -> Result<Episode> {
    let rank = get_len(r)?;
    let shape = (0..rank).map(|_| get_len(r)).collect::<Result<Vec<_>>>()?;
    let values = get_f64s(r, shape.iter().product())?;
    let tokens = DiffTensor::new(shape, values)?;
    let (old_logprob, reward, old_value) =
        (read_f64(r, KIND)?, read_f64(r, KIND)?, read_f64(r, KIND)?);
    let masked = (0..get_len(r)?)
        .map(|_| get_len(r))
        .collect::<Result<Vec<_>>>()?;
    let motion = match read_array::<1>(r, KIND)?[0] {
        0 => None,
        1 => {
            let n = get_len(r)?;
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| TatsError::format(KIND, "unexpected end of file"))?;
            Some(buf.into_iter().map(|b| b != 0).collect())
        }
        b => return Err(TatsError::format(KIND, format!("bad motion flag {b}"))),
    };
    Ok(Episode {
        tokens,
        old_logprob,
        reward,
        old_value,
        masked,
        motion,
    })
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        put_str(w, &self.config)?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        write_store(w, &self.phi)?;
        write_store(w, &self.theta)?;
        put_u32(w, self.episodes.len())?;
        for ep in &self.episodes {
            write_episode(w, ep)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        if &read_array::<8>(r, KIND)? != CKPT_MAGIC {
            return Err(TatsError::format(KIND, "bad magic"));
        }
        let version = read_u32(r, KIND)?;
        if version != CKPT_VERSION {
            return Err(TatsError::format(
                KIND,
                format!("unsupported version {version}"),
            ));
        }
        let config = get_str(r)?;
        let step = read_u64(r, KIND)?;
        let seed = read_array::<32>(r, KIND)?;
        let stream = read_u64(r, KIND)?;
        let word_pos = u128::from_le_bytes(read_array::<16>(r, KIND)?);
        let phi = read_store(r)?;
        let theta = read_store(r)?;
        let episodes = (0..get_len(r)?)
            .map(|_| read_episode(r))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(TatsError::format(KIND, "trailing bytes"));
        }
        Ok(Self {
            config,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            phi,
            theta,
            episodes,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write(&mut v)?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
