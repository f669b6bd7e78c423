//! Checkpoints: a little-endian binary blob with every parameter, optimizer
//! moment and normalization buffer, plus a JSON sidecar with the
//! configuration and metadata.

use std::fs;
use std::path::{Path, PathBuf};

use panofill_autograd::{Adam, AdamSlot, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{config_diff, TrainConfig, RESUMABLE_KEYS};
use super::step::{Real, TrainState};
use crate::error::{Error, Result};
use crate::nn::RunningStats;

const MAGIC: &[u8; 8] = b"PANOFILL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub seed: u64,
    pub data_master_seed: u64,
    /// Hex parameter hash of both networks.
    pub param_hash: String,
    /// Blob file name, relative to the sidecar.
    pub blob: String,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
}

/// Sidecar path for a blob path.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn tensor(&mut self, t: &Tensor<Real>) {
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| self.u64(d as u64));
        t.data().iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn store(&mut self, s: &ParamStore<Real>) {
        self.u32(s.len() as u32);
        for id in s.ids() {
            self.str(s.name(id));
            self.tensor(s.get(id));
        }
    }
    fn adam(&mut self, a: &Adam<Real>) {
        self.u32(a.state.len() as u32);
        for slot in &a.state {
            match slot {
                None => self.u8(0),
                Some(s) => {
                    self.u8(1);
                    self.u64(s.step);
                    self.tensor(&s.m);
                    self.tensor(&s.v);
                }
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointFormat("unexpected end of blob".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CheckpointFormat("invalid name".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn tensor(&mut self) -> Result<Tensor<Real>> {
        let nd = self.u32()? as usize;
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Tensor::from_vec(&shape, data)?)
    }
    fn store_into(&mut self, s: &mut ParamStore<Real>, what: &str) -> Result<()> {
        let n = self.u32()? as usize;
        if n != s.len() {
            return Err(Error::CheckpointFormat(format!("{what}: {n} parameters stored, model has {}", s.len())));
        }
        for id in s.ids().collect::<Vec<_>>() {
            let name = self.str()?;
            let t = self.tensor()?;
            if name != s.name(id) || t.shape() != s.get(id).shape() {
                return Err(Error::CheckpointFormat(format!(
                    "{what}: stored {name} {:?} where the model has {} {:?}",
                    t.shape(),
                    s.name(id),
                    s.get(id).shape()
                )));
            }
            s.set(id, t);
        }
        Ok(())
    }
    fn adam_into(&mut self, a: &mut Adam<Real>) -> Result<()> {
        let n = self.u32()? as usize;
        if n != a.state.len() {
            return Err(Error::CheckpointFormat("optimizer state size".into()));
        }
        for slot in a.state.iter_mut() {
            *slot = match self.u8()? {
                0 => None,
                _ => Some(AdamSlot { step: self.u64()?, m: self.tensor()?, v: self.tensor()? }),
            };
        }
        Ok(())
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(state.step);
    w.store(&state.generator.params);
    w.store(&state.discriminator.params);
    w.adam(&state.opt_g);
    w.adam(&state.opt_d);
    w.u32(state.discriminator.u.len() as u32);
    state.discriminator.u.iter().for_each(|u| w.f64s(u));
    w.u32(state.generator.running.len() as u32);
    for r in &state.generator.running {
        w.f64s(&r.mean);
        w.f64s(&r.var);
    }
    let h = fnv(&w.0);
    w.u64(h);
    w.0
}

fn decode(bytes: &[u8], cfg: &TrainConfig) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointFormat("not a checkpoint blob".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::CheckpointFormat("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let mut state = TrainState::new(cfg)?;
    state.step = r.u64()?;
    r.store_into(&mut state.generator.params, "generator")?;
    r.store_into(&mut state.discriminator.params, "discriminator")?;
    r.adam_into(&mut state.opt_g)?;
    r.adam_into(&mut state.opt_d)?;
    let nu = r.u32()? as usize;
    if nu != state.discriminator.u.len() {
        return Err(Error::CheckpointFormat("singular vector count".into()));
    }
    for u in state.discriminator.u.iter_mut() {
        *u = r.f64s()?;
    }
    let nr = r.u32()? as usize;
    if nr != state.generator.running.len() {
        return Err(Error::CheckpointFormat("running statistics count".into()));
    }
    for rs in state.generator.running.iter_mut() {
        *rs = RunningStats { mean: r.f64s()?, var: r.f64s()? };
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointFormat("trailing bytes".into()));
    }
    Ok(state)
}

/// Write `<path>` and its sidecar.
pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig, metrics: Option<serde_json::Value>) -> Result<CheckpointMeta> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, encode(state)).map_err(Error::io(path))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        step: state.step,
        seed: cfg.seed,
        data_master_seed: cfg.data.master_seed,
        param_hash: format!("{:016x}", state.param_hash()),
        blob: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        config: cfg.clone(),
        metrics,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta).map_err(Error::json(&side))?;
    fs::write(&side, text + "\n").map_err(Error::io(&side))?;
    Ok(meta)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(Error::io(&side))?;
    let mut meta: CheckpointMeta = serde_json::from_str(&text).map_err(Error::json(&side))?;
    meta.config = meta.config.synced();
    Ok(meta)
}

/// Load a checkpoint. With `expected`, every configuration field except the
/// step budget and cadences must match, or the error lists the differences.
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<(TrainState, CheckpointMeta)> {
    let meta = read_meta(path)?;
    if let Some(cfg) = expected {
        let diff = config_diff(&meta.config, cfg, &RESUMABLE_KEYS);
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(diff));
        }
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let state = decode(&bytes, &meta.config)?;
    if format!("{:016x}", state.param_hash()) != meta.param_hash {
        return Err(Error::CheckpointFormat("parameter hash differs from the sidecar".into()));
    }
    Ok((state, meta))
}
