//! FFCK checkpoint container.
//!
//! Header: magic `FFCK`, version byte, three reserved zero bytes. Then,
//! all little-endian: the network config, the training config, completed
//! epochs and optimizer iteration (u64), the ChaCha8 state (32-byte seed,
//! u64 stream, u128 word position), and three blob sections (parameters,
//! batch-norm buffers, momentum), each a u32 count of blobs laid out as
//! u32 name length, UTF-8 name, dtype byte (0 = f32), rank byte, u64
//! extents and the payload.

use std::path::Path;

use byteorder::{WriteBytesExt, LE};
use ffce_core::{FfceNet, LossWeights, NetworkConfig, SgdState, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::{
    error::{Error, Result},
    train::{TrainConfig, Trainer},
    volume::{read_file, write_file},
};

pub const MAGIC: [u8; 4] = *b"FFCK";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub epoch: u64,
    pub iteration: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub params: Vec<Blob>,
    pub buffers: Vec<Blob>,
    pub momentum: Vec<Blob>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let store = t.net.store();
        let params: Vec<Blob> = store
            .params()
            .iter()
            .map(|p| Blob {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .collect();
        let momentum = params
            .iter()
            .zip(&t.optimizer.momentum)
            .map(|(p, m)| Blob {
                name: p.name.clone(),
                value: m.clone(),
            })
            .collect();
        Self {
            network: t.net.config().clone(),
            train: t.config.clone(),
            epoch: t.epoch,
            iteration: t.optimizer.iteration,
            rng_seed: t.rng.get_seed(),
            rng_stream: t.rng.get_stream(),
            rng_word_pos: t.rng.get_word_pos(),
            params,
            buffers: store
                .buffers()
                .iter()
                .map(|b| Blob {
                    name: b.name.clone(),
                    value: b.value.clone(),
                })
                .collect(),
            momentum,
        }
    }

    /// Rebuilds the network with the stored values; names and shapes must
    /// match the architecture exactly.
    pub fn network(&self) -> Result<FfceNet<f32>> {
        let mut net = FfceNet::new(self.network.clone(), &mut rand::rngs::mock::StepRng::new(0, 1))?;
        let store = net.store_mut();
        fill(
            "parameter",
            store.params_mut().iter_mut().map(|p| (&p.name, &mut p.value)),
            &self.params,
        )?;
        fill(
            "buffer",
            store.buffers_mut().iter_mut().map(|b| (&b.name, &mut b.value)),
            &self.buffers,
        )?;
        Ok(net)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        self.train.validate()?;
        let net = self.network()?;
        let mut optimizer = SgdState::new(net.store().params().iter().map(|p| &p.value));
        let names = net.store().params().iter().map(|p| &p.name);
        fill("momentum", names.zip(optimizer.momentum.iter_mut()), &self.momentum)?;
        optimizer.iteration = self.iteration;
        let mut rng: ChaCha8Rng = rand::SeedableRng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        Ok(Trainer {
            net,
            optimizer,
            config: self.train,
            rng,
            epoch: self.epoch,
        })
    }

    /// Rejects a checkpoint whose architecture differs from `expected`.
    pub fn check_network(&self, expected: &NetworkConfig) -> Result<()> {
        if &self.network != expected {
            return Err(Error::Invalid(format!(
                "checkpoint network config {:?} does not match {:?}",
                self.network, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&MAGIC);
        w.extend_from_slice(&[VERSION, 0, 0, 0]);
        let n = &self.network;
        for v in [
            n.num_classes,
            n.stack_depth,
            n.channels,
            n.num_enc_blocks,
            n.num_dec_blocks,
            n.codewords,
            n.scse_reduction,
            n.kernel_size,
        ] {
            put_u64(&mut w, v as u64);
        }
        put_f64(&mut w, n.dropout_rate);
        w.push(n.fuse_spatial as u8);
        let t = &self.train;
        for v in [t.base_lr, t.poly_power, t.weight_decay, t.momentum] {
            put_f64(&mut w, v);
        }
        for v in [t.batch_size as u64, t.epochs, t.seed] {
            put_u64(&mut w, v);
        }
        w.push(t.class_weights as u8);
        w.push(t.normalize as u8);
        for v in [t.loss_weights.ce, t.loss_weights.dice, t.loss_weights.sec] {
            put_f64(&mut w, v);
        }
        put_u64(&mut w, self.epoch);
        put_u64(&mut w, self.iteration);
        w.extend_from_slice(&self.rng_seed);
        put_u64(&mut w, self.rng_stream);
        w.write_u128::<LE>(self.rng_word_pos)
            .expect("writing to a Vec cannot fail");
        for section in [&self.params, &self.buffers, &self.momentum] {
            w.write_u32::<LE>(section.len() as u32)
                .expect("writing to a Vec cannot fail");
            for blob in section {
                put_blob(&mut w, blob);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let header = r.take(4)?;
        if header[0] != VERSION {
            return Err(r.error_at(4, &format!("unsupported version {}", header[0])));
        }
        if header[1..] != [0, 0, 0] {
            return Err(r.error_at(5, "reserved bytes must be zero"));
        }
        let mut ints = [0usize; 8];
        for v in &mut ints {
            *v = r.usize()?;
        }
        let [num_classes, stack_depth, channels, num_enc_blocks, num_dec_blocks, codewords, scse_reduction, kernel_size] =
            ints;
        let dropout_rate = r.f64()?;
        let fuse_spatial = r.flag()?;
        let network = NetworkConfig {
            num_classes,
            stack_depth,
            channels,
            num_enc_blocks,
            num_dec_blocks,
            codewords,
            dropout_rate,
            scse_reduction,
            kernel_size,
            fuse_spatial,
        };
        let config_end = r.pos;
        network.validate().map_err(|e| r.error_at(8, &e.to_string()))?;
        let (base_lr, poly_power, weight_decay, momentum) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let (batch_size, epochs, seed) = (r.usize()?, r.u64()?, r.u64()?);
        let (class_weights, normalize) = (r.flag()?, r.flag()?);
        let loss_weights = LossWeights {
            ce: r.f64()?,
            dice: r.f64()?,
            sec: r.f64()?,
        };
        let train = TrainConfig {
            base_lr,
            poly_power,
            weight_decay,
            momentum,
            batch_size,
            epochs,
            seed,
            class_weights,
            loss_weights,
            normalize,
        };
        train
            .validate()
            .map_err(|e| r.error_at(config_end as u64, &e.to_string()))?;
        let epoch = r.u64()?;
        let iteration = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes taken");
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes taken"));
        let mut sections = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = r.u32()? as usize;
            let mut blobs = Vec::with_capacity(count.min(4096));
            for _ in 0..count {
                blobs.push(r.blob()?);
            }
            sections.push(blobs);
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos as u64, "trailing bytes after the last section"));
        }
        let momentum = sections.pop().expect("three sections");
        let buffers = sections.pop().expect("three sections");
        let params = sections.pop().expect("three sections");
        Ok(Self {
            network,
            train,
            epoch,
            iteration,
            rng_seed,
            rng_stream,
            rng_word_pos,
            params,
            buffers,
            momentum,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

fn fill<'a>(
    kind: &str,
    targets: impl ExactSizeIterator<Item = (&'a String, &'a mut Tensor<f32>)>,
    blobs: &[Blob],
) -> Result<()> {
    if targets.len() != blobs.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} {kind} tensors, the network has {}",
            blobs.len(),
            targets.len()
        )));
    }
    for ((name, value), blob) in targets.zip(blobs) {
        if *name != blob.name || value.shape() != blob.value.shape() {
            return Err(Error::Invalid(format!(
                "checkpoint {kind} {} {:?} does not match network {kind} {name} {:?}",
                blob.name,
                blob.value.shape(),
                value.shape()
            )));
        }
        *value = blob.value.clone();
    }
    Ok(())
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.write_u64::<LE>(v).expect("writing to a Vec cannot fail");
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.write_f64::<LE>(v).expect("writing to a Vec cannot fail");
}

fn put_blob(w: &mut Vec<u8>, blob: &Blob) {
    w.write_u32::<LE>(blob.name.len() as u32)
        .expect("writing to a Vec cannot fail");
    w.extend_from_slice(blob.name.as_bytes());
    w.push(DTYPE_F32);
    w.push(blob.value.rank() as u8);
    for &e in blob.value.shape() {
        put_u64(w, e as u64);
    }
    for &v in blob.value.data() {
        w.write_f32::<LE>(v).expect("writing to a Vec cannot fail");
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: u64, message: &str) -> Error {
        Error::format(self.path, offset, message)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.bytes.len() as u64,
                &format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes taken")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes taken")))
    }

    fn usize(&mut self) -> Result<usize> {
        let at = self.pos as u64;
        usize::try_from(self.u64()?).map_err(|_| self.error_at(at, "value exceeds the address space"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes taken")))
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos as u64;
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.error_at(at, &format!("flag byte {v} is neither 0 nor 1"))),
        }
    }

    fn blob(&mut self) -> Result<Blob> {
        let start = self.pos as u64;
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| self.error_at(start + 4, "blob name is not UTF-8"))?
            .to_owned();
        let at = self.pos as u64;
        let [dtype, rank] = self.take(2)?.try_into().expect("2 bytes taken");
        if dtype != DTYPE_F32 {
            return Err(self.error_at(at, &format!("blob {name}: unsupported dtype {dtype}")));
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| self.error_at(at + 2, &format!("blob {name}: extents overflow")))?;
        let data = self
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Blob {
            value: Tensor::new(shape, data)?,
            name,
        })
    }
}
