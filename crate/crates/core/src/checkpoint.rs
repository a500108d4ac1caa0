//! Binary checkpoints of a [`TrainState`].
//!
//! ```text
//! "COMF" | version u32
//! params:    count u32, then per tensor: name, rank u32, dims u32…, f32 data
//! optimizer: step u64, base_lr f64, weight_decay f64, beta1 f32, beta2 f32, eps f32,
//!            count u32, then per tensor: name, first moment blob, second moment blob
//! config:    length u32, UTF-8 key = value text
//! rng:       seed [u8; 32], stream u64, word_pos u128
//! metrics:   length u32, UTF-8, one epoch per line
//! ```
//!
//! Names are a u32 byte length followed by UTF-8. Everything is little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ComfeModel;
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, OptimizerState, TrainState};

pub const MAGIC: [u8; 4] = *b"COMF";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} too large")))?;
        self.u32(v);
        Ok(())
    }
    fn text(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.len(t.shape().len())?;
        for &d in t.shape() {
            self.len(d)?;
        }
        for x in t.data() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.buf.len() as u64,
                needed: (n - (self.buf.len() - self.pos)) as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn text(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 at byte {at}")))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} at byte {at}")));
        }
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data)
    }
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION);

    let params = state.model.named_params();
    w.len(params.len())?;
    for (name, t) in &params {
        w.text(name)?;
        w.tensor(t)?;
    }

    let o = &state.optimizer;
    w.u64(o.step);
    w.0.extend_from_slice(&o.base_lr.to_le_bytes());
    w.0.extend_from_slice(&o.weight_decay.to_le_bytes());
    for x in [o.beta1, o.beta2, o.eps] {
        w.0.extend_from_slice(&x.to_le_bytes());
    }
    w.len(o.names.len())?;
    for ((name, m), v) in o.names.iter().zip(&o.m).zip(&o.v) {
        w.text(name)?;
        w.tensor(m)?;
        w.tensor(v)?;
    }

    w.text(&state.config.to_text())?;

    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let metrics: String = state.metrics.iter().map(|m| m.to_line() + "\n").collect();
    w.text(&metrics)?;
    Ok(w.0)
}

pub fn from_bytes(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            offset: 4,
            found: version,
            expected: VERSION,
        });
    }

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        params.push((r.text()?, r.tensor()?));
    }

    let step = r.u64()?;
    let base_lr = r.f64()?;
    let weight_decay = r.f64()?;
    let (beta1, beta2, eps) = (r.f32()?, r.f32()?, r.f32()?);
    let count = r.u32()? as usize;
    let (mut names, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        names.push(r.text()?);
        m.push(r.tensor()?);
        v.push(r.tensor()?);
    }

    let config = TrainConfig::from_text(&r.text()?)?;
    config.validate()?;

    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let metrics = r
        .text()?
        .lines()
        .map(EpochMetrics::from_line)
        .collect::<Result<Vec<_>>>()?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    // Shapes and names come from the config; every stored tensor must match.
    let mut model = ComfeModel::init(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let check = |what: &str, got: &[(String, Vec<usize>)]| -> Result<()> {
        if got != expected.as_slice() {
            let first = expected
                .iter()
                .zip(got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), got.len()));
            return Err(Error::Checkpoint(format!("{what} do not match the config: {first}")));
        }
        Ok(())
    };
    check(
        "parameters",
        &params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>(),
    )?;
    for (moments, what) in [(&m, "first moments"), (&v, "second moments")] {
        check(
            what,
            &names.iter().zip(moments.iter()).map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>(),
        )?;
    }
    let mut it = params.into_iter();
    model.for_each_param_mut(|_, t| *t = it.next().expect("count checked").1);
    model.validate()?;

    Ok(TrainState {
        config,
        model,
        optimizer: OptimizerState {
            step,
            names,
            m,
            v,
            base_lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        },
        rng,
        metrics,
    })
}

pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(state)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    from_bytes(&fs::read(path)?)
}
