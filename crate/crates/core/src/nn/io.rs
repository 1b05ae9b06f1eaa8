//! Binary weight files.
//!
//! Layout (little-endian): magic `CPNN`, version byte, feature-extractor layer
//! count (u32), detection-module layer count (u32), then per layer a kind tag
//! (u8) followed by its shape and `f64` parameters:
//!
//! - `0` conv: kernel, cin, cout (u32 each), weights, biases
//! - `1` batch norm: channels (u32), gamma, beta, running mean, running var
//! - `2` leaky ReLU, `3` max pool: no payload
//!
//! A checkpoint appends a training-state footer: magic `CPTS`, epoch (u32),
//! the shuffle generator's 32-byte seed, stream (u64) and word position (u128).

use super::layers::{BatchNorm, Conv2d, Layer, NnError, Sequential};
use super::network::Network;

pub const MAGIC: &[u8; 4] = b"CPNN";
pub const VERSION: u8 = 1;
pub const FOOTER_MAGIC: &[u8; 4] = b"CPTS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainState {
    pub epoch: u32,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(
        &u32::try_from(v)
            .expect("layer dimension fits u32")
            .to_le_bytes(),
    );
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_layer(out: &mut Vec<u8>, layer: &Layer) {
    match layer {
        Layer::Conv(c) => {
            out.push(0);
            put_u32(out, c.kernel);
            put_u32(out, c.cin);
            put_u32(out, c.cout);
            put_f64s(out, &c.weight);
            put_f64s(out, &c.bias);
        }
        Layer::BatchNorm(b) => {
            out.push(1);
            put_u32(out, b.c);
            put_f64s(out, &b.gamma);
            put_f64s(out, &b.beta);
            put_f64s(out, &b.running_mean);
            put_f64s(out, &b.running_var);
        }
        Layer::LeakyRelu => out.push(2),
        Layer::MaxPool => out.push(3),
    }
}

pub fn encode_network(net: &Network, state: Option<&TrainState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, net.fec.layers.len());
    put_u32(&mut out, net.odm.layers.len());
    for l in net.fec.layers.iter().chain(&net.odm.layers) {
        encode_layer(&mut out, l);
    }
    if let Some(s) = state {
        out.extend_from_slice(FOOTER_MAGIC);
        out.extend_from_slice(&s.epoch.to_le_bytes());
        out.extend_from_slice(&s.rng_seed);
        out.extend_from_slice(&s.rng_stream.to_le_bytes());
        out.extend_from_slice(&s.rng_word_pos.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                NnError::Format(format!("truncated at byte {} (need {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| NnError::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn layer(&mut self) -> Result<Layer, NnError> {
        match self.u8()? {
            0 => {
                let (kernel, cin, cout) = (self.u32()?, self.u32()?, self.u32()?);
                if kernel % 2 == 0 {
                    return Err(NnError::Format(format!("even conv kernel {kernel}")));
                }
                let weight = self.f64s(kernel * kernel * cin * cout)?;
                let bias = self.f64s(cout)?;
                Ok(Layer::Conv(Conv2d {
                    kernel,
                    cin,
                    cout,
                    weight,
                    bias,
                }))
            }
            1 => {
                let c = self.u32()?;
                Ok(Layer::BatchNorm(BatchNorm {
                    c,
                    gamma: self.f64s(c)?,
                    beta: self.f64s(c)?,
                    running_mean: self.f64s(c)?,
                    running_var: self.f64s(c)?,
                }))
            }
            2 => Ok(Layer::LeakyRelu),
            3 => Ok(Layer::MaxPool),
            t => Err(NnError::Format(format!(
                "unknown layer tag {t} at byte {}",
                self.pos - 1
            ))),
        }
    }
}

pub fn decode_network(buf: &[u8]) -> Result<(Network, Option<TrainState>), NnError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Format("bad magic, not a CPNN weight file".into()));
    }
    let v = r.u8()?;
    if v != VERSION {
        return Err(NnError::Format(format!("unsupported version {v}")));
    }
    let (nf, no) = (r.u32()?, r.u32()?);
    let fec = (0..nf).map(|_| r.layer()).collect::<Result<Vec<_>, _>>()?;
    let odm = (0..no).map(|_| r.layer()).collect::<Result<Vec<_>, _>>()?;
    let state = if r.pos == buf.len() {
        None
    } else {
        if r.take(4)? != FOOTER_MAGIC {
            return Err(NnError::Format(
                "trailing bytes are not a training-state footer".into(),
            ));
        }
        let epoch = r.u32()? as u32;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_stream = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.pos != buf.len() {
            return Err(NnError::Format("trailing bytes after footer".into()));
        }
        Some(TrainState {
            epoch,
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    };
    Ok((
        Network {
            fec: Sequential::new("fec", fec),
            odm: Sequential::new("odm", odm),
        },
        state,
    ))
}
