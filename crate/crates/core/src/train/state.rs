//! Binary sidecar for resumable training: optimizer moments plus
//! early-stopping counters. Moments are stored as little-endian f32; the
//! parameter layout is implied by the model the state is loaded against.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamW, FitState, TrainError};
use crate::model::Model;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"EVST";
const VERSION: u32 = 1;

pub fn save_fit_state<S: Scalar>(state: &FitState<S>, path: &Path) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(state.next_epoch as u64).to_le_bytes())?;
    w.write_all(&(state.best_epoch as u64).to_le_bytes())?;
    w.write_all(&(state.bad_epochs as u64).to_le_bytes())?;
    w.write_all(&state.best_valid.unwrap_or(f64::NAN).to_le_bytes())?;
    w.write_all(&state.opt.t.to_le_bytes())?;
    w.write_all(&state.opt.weight_decay.to_le_bytes())?;
    w.write_all(&(state.opt.m.len() as u32).to_le_bytes())?;
    for moments in [&state.opt.m, &state.opt.v] {
        for vec in moments {
            w.write_all(&(vec.len() as u64).to_le_bytes())?;
            for &v in vec {
                w.write_all(&v.to_f32().to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: &str) -> TrainError {
    TrainError::Config(format!("malformed training state: {msg}"))
}

pub fn load_fit_state<S: Scalar>(
    path: &Path,
    model: &Model<S>,
) -> Result<FitState<S>, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
    if u32::from_le_bytes(u32buf) != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64, TrainError> {
        r.read_exact(&mut u64buf).map_err(|_| bad("truncated"))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let next_epoch = read_u64(&mut r)? as usize;
    let best_epoch = read_u64(&mut r)? as usize;
    let bad_epochs = read_u64(&mut r)? as usize;
    let best_valid_raw = f64::from_bits(read_u64(&mut r)?);
    let t = read_u64(&mut r)?;
    let weight_decay = f64::from_bits(read_u64(&mut r)?);
    let mut nbuf = [0u8; 4];
    r.read_exact(&mut nbuf).map_err(|_| bad("truncated"))?;
    let n_params = u32::from_le_bytes(nbuf) as usize;
    if n_params != model.params().len() {
        return Err(bad("parameter count does not match the model"));
    }
    let read_moments = |r: &mut BufReader<File>| -> Result<Vec<Vec<S>>, TrainError> {
        let mut out = Vec::with_capacity(n_params);
        for (i, param) in model.params().iter().enumerate() {
            let mut lenbuf = [0u8; 8];
            r.read_exact(&mut lenbuf).map_err(|_| bad("truncated"))?;
            let len = u64::from_le_bytes(lenbuf) as usize;
            if len != param.numel() {
                return Err(bad(&format!("moment {i} length mismatch")));
            }
            let mut vec = Vec::with_capacity(len);
            let mut fbuf = [0u8; 4];
            for _ in 0..len {
                r.read_exact(&mut fbuf).map_err(|_| bad("truncated"))?;
                vec.push(S::from_f32(f32::from_le_bytes(fbuf)));
            }
            out.push(vec);
        }
        Ok(out)
    };
    let m = read_moments(&mut r)?;
    let v = read_moments(&mut r)?;
    Ok(FitState {
        next_epoch,
        best_epoch,
        bad_epochs,
        best_valid: if best_valid_raw.is_nan() {
            None
        } else {
            Some(best_valid_raw)
        },
        opt: AdamW {
            m,
            v,
            t,
            weight_decay,
        },
    })
}
