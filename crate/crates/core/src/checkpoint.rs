//! Self-contained little-endian binary checkpoint format.
//!
//! ```text
//! file    := "VITQ1" section*
//! section := tag[4] len:u64 payload[len]
//! CONF    := utf-8 "key=value" lines
//! TENS    := count:u32 (name dtype:u8 ndim:u32 dims:u64[ndim] data:f64[prod(dims)])*
//! QUAN    := count:u32 (name levels:u32 granularity:u8 target:u8 n:u64 delta:f64[n] zero:f64[n])*
//! RESC    := count:u32 (name n:u64 alpha:f64[n] beta:f64[n])*
//! BANK    := count:u32 (class:u32 m:u32 tokens:u32 dim:u32 semantic:u32 data:f64[m*tokens*dim])*
//! name    := len:u32 utf-8[len]
//! ```
//!
//! Sections with unknown tags are skipped with a warning. Identical contents
//! always serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::quantizer::{BitConfig, Granularity, Target};
use crate::tensor::Tensor;
use crate::vit::{QuantMode, TinyViT, ViTConfig};

pub const MAGIC: &[u8; 5] = b"VITQ1";
/// Dtype tag of little-endian `f64` payloads; other tags are reserved.
pub const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantRecord {
    pub name: String,
    pub levels: usize,
    pub granularity: Granularity,
    pub target: Target,
    pub delta: Vec<f64>,
    pub zero_point: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescaleRecord {
    pub name: String,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankRecord {
    pub class_id: usize,
    pub prompts: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    pub semantic_count: usize,
    pub embeddings: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
    pub quantizers: Vec<QuantRecord>,
    pub rescales: Vec<RescaleRecord>,
    pub banks: Vec<BankRecord>,
}

#[derive(Default)]
struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn section(&mut self, tag: &[u8; 4], payload: Out) {
        self.0.extend_from_slice(tag);
        self.u64(payload.0.len());
        self.0.extend_from_slice(&payload.0);
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length overflows".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not utf-8".into()))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Out::default();
        out.0.extend_from_slice(MAGIC);

        let mut conf = Out::default();
        for (k, v) in &self.config {
            conf.0.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.section(b"CONF", conf);

        let mut tens = Out::default();
        tens.u32(self.tensors.len());
        for (name, t) in &self.tensors {
            tens.name(name);
            tens.u8(DTYPE_F64);
            tens.u32(t.shape().len());
            t.shape().iter().for_each(|&d| tens.u64(d));
            tens.f64s(t.data());
        }
        out.section(b"TENS", tens);

        if !self.quantizers.is_empty() {
            let mut q = Out::default();
            q.u32(self.quantizers.len());
            for r in &self.quantizers {
                q.name(&r.name);
                q.u32(r.levels);
                q.u8(r.granularity.tag());
                q.u8(r.target.tag());
                q.u64(r.delta.len());
                q.f64s(&r.delta);
                q.f64s(&r.zero_point);
            }
            out.section(b"QUAN", q);
        }

        if !self.rescales.is_empty() {
            let mut r = Out::default();
            r.u32(self.rescales.len());
            for rec in &self.rescales {
                r.name(&rec.name);
                r.u64(rec.alpha.len());
                r.f64s(&rec.alpha);
                r.f64s(&rec.beta);
            }
            out.section(b"RESC", r);
        }

        if !self.banks.is_empty() {
            let mut b = Out::default();
            b.u32(self.banks.len());
            for bank in &self.banks {
                b.u32(bank.class_id);
                b.u32(bank.prompts);
                b.u32(bank.token_count);
                b.u32(bank.embed_dim);
                b.u32(bank.semantic_count);
                b.f64s(&bank.embeddings);
            }
            out.section(b"BANK", b);
        }
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = In { buf: bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("missing VITQ1 magic".into()));
        }
        let mut ck = Checkpoint::default();
        while !r.done() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()?;
            let mut p = In {
                buf: r.take(len)?,
                pos: 0,
            };
            match &tag {
                b"CONF" => {
                    let text = std::str::from_utf8(p.buf)
                        .map_err(|_| Error::Format("config section is not utf-8".into()))?;
                    for line in text.lines() {
                        let (k, v) = line
                            .split_once('=')
                            .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
                        ck.config.insert(k.to_string(), v.to_string());
                    }
                    p.pos = p.buf.len();
                }
                b"TENS" => {
                    for _ in 0..p.u32()? {
                        let name = p.name()?;
                        let dtype = p.u8()?;
                        if dtype != DTYPE_F64 {
                            return Err(Error::Format(format!(
                                "tensor {name}: unsupported dtype tag {dtype}"
                            )));
                        }
                        let ndim = p.u32()?;
                        let dims = (0..ndim).map(|_| p.u64()).collect::<Result<Vec<_>>>()?;
                        let n = dims
                            .iter()
                            .try_fold(1usize, |a, &d| a.checked_mul(d))
                            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
                        let data = p.f64s(n)?;
                        let t = Tensor::new(&dims, data)
                            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
                        ck.tensors.push((name, t));
                    }
                }
                b"QUAN" => {
                    for _ in 0..p.u32()? {
                        let name = p.name()?;
                        let levels = p.u32()?;
                        let granularity = Granularity::from_tag(p.u8()?)?;
                        let target = Target::from_tag(p.u8()?)?;
                        let n = p.u64()?;
                        let delta = p.f64s(n)?;
                        let zero_point = p.f64s(n)?;
                        ck.quantizers.push(QuantRecord {
                            name,
                            levels,
                            granularity,
                            target,
                            delta,
                            zero_point,
                        });
                    }
                }
                b"RESC" => {
                    for _ in 0..p.u32()? {
                        let name = p.name()?;
                        let n = p.u64()?;
                        let alpha = p.f64s(n)?;
                        let beta = p.f64s(n)?;
                        ck.rescales.push(RescaleRecord { name, alpha, beta });
                    }
                }
                b"BANK" => {
                    for _ in 0..p.u32()? {
                        let class_id = p.u32()?;
                        let prompts = p.u32()?;
                        let token_count = p.u32()?;
                        let embed_dim = p.u32()?;
                        let semantic_count = p.u32()?;
                        let embeddings = p.f64s(prompts * token_count * embed_dim)?;
                        ck.banks.push(BankRecord {
                            class_id,
                            prompts,
                            token_count,
                            embed_dim,
                            semantic_count,
                            embeddings,
                        });
                    }
                }
                other => {
                    log::warn!(
                        "skipping unknown checkpoint section {:?}",
                        String::from_utf8_lossy(other)
                    );
                    p.pos = p.buf.len();
                }
            }
            if !p.done() {
                return Err(Error::Format(format!(
                    "trailing bytes in section {:?}",
                    String::from_utf8_lossy(&tag)
                )));
            }
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.config
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint config lacks {key}")))?
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint config {key} is malformed")))
}

pub fn model_to_checkpoint(model: &TinyViT) -> Checkpoint {
    let c = model.config();
    let m = model.mode();
    let mut config = BTreeMap::new();
    let entries = [
        ("model.image_size", c.image_size.to_string()),
        ("model.patch_size", c.patch_size.to_string()),
        ("model.channels", c.channels.to_string()),
        ("model.embed_dim", c.embed_dim.to_string()),
        ("model.depth", c.depth.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.mlp_ratio", c.mlp_ratio.to_string()),
        ("model.classes", c.classes.to_string()),
        ("model.seed", c.seed.to_string()),
        ("quant.bits", m.bits.label.clone()),
        ("quant.enabled", m.enabled.to_string()),
        ("quant.attn_probs", m.quantize_attn_probs.to_string()),
        ("quant.calibrated", m.calibrated.to_string()),
    ];
    for (k, v) in entries {
        config.insert(k.to_string(), v);
    }
    let store = model.params();
    let tensors = store
        .ids()
        .filter(|&id| {
            matches!(
                store.kind(id),
                crate::params::ParamKind::Teacher | crate::params::ParamKind::Refine
            )
        })
        .map(|id| {
            let t = store.get(id);
            let clean = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
            (store.name(id).to_string(), clean)
        })
        .collect();
    let quantizers = model
        .sites()
        .iter()
        .map(|s| QuantRecord {
            name: s.name.clone(),
            levels: s.levels,
            granularity: s.granularity,
            target: s.target,
            delta: store.get(s.delta).data().to_vec(),
            zero_point: store.get(s.zero).data().to_vec(),
        })
        .collect();
    let rescales = model
        .rescale_sites()
        .iter()
        .map(|r| RescaleRecord {
            name: r.name.clone(),
            alpha: store.get(r.alpha).data().to_vec(),
            beta: store.get(r.beta).data().to_vec(),
        })
        .collect();
    Checkpoint {
        config,
        tensors,
        quantizers,
        rescales,
        banks: Vec::new(),
    }
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<TinyViT> {
    let config = ViTConfig {
        image_size: parse(ck, "model.image_size")?,
        patch_size: parse(ck, "model.patch_size")?,
        channels: parse(ck, "model.channels")?,
        embed_dim: parse(ck, "model.embed_dim")?,
        depth: parse(ck, "model.depth")?,
        heads: parse(ck, "model.heads")?,
        mlp_ratio: parse(ck, "model.mlp_ratio")?,
        classes: parse(ck, "model.classes")?,
        seed: parse(ck, "model.seed")?,
    };
    let bits: BitConfig = parse(ck, "quant.bits")?;
    let mode = QuantMode {
        bits,
        enabled: parse(ck, "quant.enabled")?,
        quantize_attn_probs: parse(ck, "quant.attn_probs")?,
        calibrated: parse(ck, "quant.calibrated")?,
    };
    let mut model = TinyViT::new(config, mode)?;
    for (name, t) in &ck.tensors {
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
        let dst = model.params_mut().get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    for rec in &ck.quantizers {
        let i = model
            .sites()
            .iter()
            .position(|s| s.name == rec.name)
            .ok_or_else(|| Error::Format(format!("unknown quantizer {}", rec.name)))?;
        let q = crate::quantizer::QuantizerState::new(
            rec.levels,
            rec.granularity,
            rec.target,
            rec.delta.clone(),
            rec.zero_point.clone(),
        )
        .map_err(|e| Error::Format(format!("quantizer {}: {e}", rec.name)))?;
        model.set_quantizer(i, q)?;
    }
    for rec in &ck.rescales {
        let i = model
            .rescale_sites()
            .iter()
            .position(|s| s.name == rec.name)
            .ok_or_else(|| Error::Format(format!("unknown rescale {}", rec.name)))?;
        let r = crate::reparam::RescaleState::new(rec.alpha.clone(), rec.beta.clone())
            .map_err(|e| Error::Format(format!("rescale {}: {e}", rec.name)))?;
        model.set_rescale(i, r)?;
    }
    Ok(model)
}

pub fn save_model(model: &TinyViT, path: &Path) -> Result<()> {
    model_to_checkpoint(model).write(path)
}

pub fn load_model(path: &Path) -> Result<TinyViT> {
    model_from_checkpoint(&Checkpoint::read(path)?)
}

fn stack(images: &[Tensor]) -> Result<Option<Tensor>> {
    let Some(first) = images.first() else { return Ok(None) };
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::dim("images in one file must share a shape"));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&shape, data).map(Some)
}

fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let shape = &t.shape()[1..];
    if shape.is_empty() {
        return Err(Error::Format("image tensor must have a sample dimension".into()));
    }
    (0..t.shape()[0])
        .map(|i| Tensor::new(shape, t.row(i).to_vec()))
        .collect()
}

fn count_config(n: usize) -> BTreeMap<String, String> {
    BTreeMap::from([("data.count".to_string(), n.to_string())])
}

pub fn write_images(path: &Path, images: &[Tensor]) -> Result<()> {
    let mut ck = Checkpoint {
        config: count_config(images.len()),
        ..Checkpoint::default()
    };
    if let Some(t) = stack(images)? {
        ck.tensors.push(("images".into(), t));
    }
    ck.write(path)
}

pub fn read_images(path: &Path) -> Result<Vec<Tensor>> {
    let ck = Checkpoint::read(path)?;
    match ck.tensor("images") {
        Some(t) => unstack(t),
        None => Ok(Vec::new()),
    }
}

pub fn write_labeled(path: &Path, set: &LabeledSet) -> Result<()> {
    let mut ck = Checkpoint {
        config: count_config(set.len()),
        ..Checkpoint::default()
    };
    if let Some(t) = stack(&set.images)? {
        ck.tensors.push(("images".into(), t));
        let labels = set.labels.iter().map(|&l| l as f64).collect();
        ck.tensors.push(("labels".into(), Tensor::from_vec(labels)?));
    }
    ck.write(path)
}

pub fn read_labeled(path: &Path) -> Result<LabeledSet> {
    let ck = Checkpoint::read(path)?;
    let (Some(images), Some(labels)) = (ck.tensor("images"), ck.tensor("labels")) else {
        return Ok(LabeledSet::default());
    };
    let images = unstack(images)?;
    let labels: Vec<usize> = labels.data().iter().map(|&l| l as usize).collect();
    if labels.len() != images.len() {
        return Err(Error::Format("label count does not match image count".into()));
    }
    Ok(LabeledSet { images, labels })
}
