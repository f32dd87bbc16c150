//! Binary checkpoint: `"SFHF"`, u16 version, then tagged sections each
//! prefixed by a u64 byte length. Everything is little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::{ScaleModel, ServerState, TuckerModes};
use crate::rng::CounterRng;
use crate::snn::{Architecture, InputShape, Parameterization};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFHF";
pub const VERSION: u16 = 1;

const TAG_HASH: u8 = 1;
const TAG_META: u8 = 2;
const TAG_TENSORS: u8 = 3;
const TAG_RATES: u8 = 4;
const TAG_RNG: u8 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub config_hash: [u8; 32],
    pub server: ServerState,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.ndim() as u8);
        t.shape().iter().for_each(|&d| self.u64(d as u64));
        t.data().iter().for_each(|&x| self.f64(x));
    }
    fn section(&mut self, tag: u8, body: Writer) {
        self.u8(tag);
        self.bytes(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Length(format!(
                "checkpoint ends at byte {}, needed {n} more at {}",
                self.buf.len(),
                self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("count overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u8()? as usize;
        let shape = (0..nd).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (self.buf.len() - self.at) / 8)
            .ok_or_else(|| Error::Length(format!("tensor {shape:?} runs past the end of the checkpoint")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
    fn section(&mut self, tag: u8) -> Result<Reader<'a>> {
        let got = self.u8()?;
        if got != tag {
            return Err(Error::Format(format!("expected section {tag}, found {got}")));
        }
        Ok(Reader { buf: self.bytes()?, at: 0 })
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes in {what}", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(server: &ServerState, config_hash: &[u8; 32]) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());

    let mut h = Writer::default();
    h.0.extend_from_slice(config_hash);
    w.section(TAG_HASH, h);

    let a = &server.architecture;
    let mut m = Writer::default();
    m.u64(server.round as u64);
    m.bytes(a.layers.to_string().as_bytes());
    for v in [a.input.channels, a.input.height, a.input.width, a.classes, a.a1, a.a2] {
        m.u64(v as u64);
    }
    m.u8(match server.parameterization {
        Parameterization::Factorized => 0,
        Parameterization::Dense => 1,
    });
    m.u8(match server.tucker_modes {
        TuckerModes::Three => 3,
        TuckerModes::Four => 4,
    });
    m.f64(server.participation);
    m.u64(server.fusion_ranks.len() as u64);
    server.fusion_ranks.iter().for_each(|&r| m.u64(r as u64));
    m.u64(server.models.len() as u64);
    server.models.iter().for_each(|s| m.f64(s.scale));
    w.section(TAG_META, m);

    let mut t = Writer::default();
    t.u64(server.bases.len() as u64);
    server.bases.iter().for_each(|b| t.tensor(b));
    for s in &server.models {
        t.tensor(&s.stem);
        t.u64(s.hidden.len() as u64);
        s.hidden.iter().for_each(|h| t.tensor(h));
        t.tensor(&s.head_weight);
        t.tensor(&s.head_bias);
    }
    w.section(TAG_TENSORS, t);

    let mut r = Writer::default();
    for rates in &server.last_rates {
        match rates {
            None => r.u8(0),
            Some(v) => {
                r.u8(1);
                r.u64(v.len() as u64);
                v.iter().for_each(|&x| r.f64(x));
            }
        }
    }
    w.section(TAG_RATES, r);

    let mut g = Writer::default();
    let (key, counter) = server.rng.parts();
    g.u64(key);
    g.u64(counter);
    w.section(TAG_RNG, g);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }

    let mut h = r.section(TAG_HASH)?;
    let config_hash: [u8; 32] = h.take(32)?.try_into().expect("32 bytes");
    h.finish("hash section")?;

    let mut m = r.section(TAG_META)?;
    let round = m.usize()?;
    let layers = std::str::from_utf8(m.bytes()?)
        .map_err(|_| Error::Format("architecture is not UTF-8".into()))?
        .to_string();
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = m.usize()?;
    }
    let architecture = Architecture::new(
        &layers,
        InputShape {
            channels: dims[0],
            height: dims[1],
            width: dims[2],
        },
        dims[3],
        dims[4],
        dims[5],
    )
    .map_err(|e| Error::Format(format!("stored architecture invalid: {e}")))?;
    let parameterization = match m.u8()? {
        0 => Parameterization::Factorized,
        1 => Parameterization::Dense,
        v => return Err(Error::Format(format!("unknown parameterization {v}"))),
    };
    let tucker_modes = match m.u8()? {
        3 => TuckerModes::Three,
        4 => TuckerModes::Four,
        v => return Err(Error::Format(format!("unknown Tucker mode count {v}"))),
    };
    let participation = m.f64()?;
    let n = m.usize()?;
    let fusion_ranks = (0..n).map(|_| m.usize()).collect::<Result<Vec<_>>>()?;
    let scales_n = m.usize()?;
    let scales = (0..scales_n.min(1 << 16)).map(|_| m.f64()).collect::<Result<Vec<_>>>()?;
    m.finish("meta section")?;

    let mut t = r.section(TAG_TENSORS)?;
    let nb = t.usize()?;
    let bases = (0..nb.min(1 << 16)).map(|_| t.tensor()).collect::<Result<Vec<_>>>()?;
    let mut models = Vec::with_capacity(scales.len());
    for &scale in &scales {
        let stem = t.tensor()?;
        let nh = t.usize()?;
        let hidden = (0..nh.min(1 << 16)).map(|_| t.tensor()).collect::<Result<Vec<_>>>()?;
        models.push(ScaleModel {
            scale,
            stem,
            hidden,
            head_weight: t.tensor()?,
            head_bias: t.tensor()?,
        });
    }
    t.finish("tensor section")?;

    let mut rr = r.section(TAG_RATES)?;
    let mut last_rates = Vec::with_capacity(scales.len());
    for _ in &scales {
        last_rates.push(match rr.u8()? {
            0 => None,
            1 => {
                let n = rr.usize()?;
                Some((0..n.min(1 << 16)).map(|_| rr.f64()).collect::<Result<Vec<_>>>()?)
            }
            v => return Err(Error::Format(format!("bad rate flag {v}"))),
        });
    }
    rr.finish("rate section")?;

    let mut g = r.section(TAG_RNG)?;
    let rng = CounterRng::from_parts(g.u64()?, g.u64()?);
    g.finish("rng section")?;
    r.finish("checkpoint")?;

    Ok(Checkpoint {
        version,
        config_hash,
        server: ServerState {
            round,
            architecture,
            parameterization,
            bases,
            models,
            fusion_ranks,
            tucker_modes,
            participation,
            last_rates,
            rng,
        },
    })
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written checkpoint under `path`.
pub fn save_checkpoint(server: &ServerState, config_hash: &[u8; 32], path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(server, config_hash))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server() -> ServerState {
        let arch = Architecture::new("4C3-8C3-MP2-FC", InputShape { channels: 1, height: 4, width: 4 }, 3, 2, 4)
            .unwrap();
        let mut s = ServerState::init(
            &arch,
            &[0.5, 1.0],
            Parameterization::Factorized,
            &[2, 1, 2],
            TuckerModes::Three,
            0.5,
            4,
        )
        .unwrap();
        s.last_rates[1] = Some(vec![0.25]);
        s.rng.next_u64();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = server();
        let bytes = encode_checkpoint(&s, &[7; 32]);
        let c = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c.server, s);
        assert_eq!(c.config_hash, [7; 32]);
        assert_eq!(encode_checkpoint(&c.server, &c.config_hash), bytes);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode_checkpoint(&server(), &[0; 32]);
        for cut in [0, 3, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Length(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format(_))));
    }
}
