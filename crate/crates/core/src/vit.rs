//! A small Vision Transformer classifier with a full-precision path and a
//! fake-quantized path sharing one set of frozen weights.
//!
//! The quantized path applies, per linear layer, `quant(W_fp + W_refine)` on
//! the weights (per output channel) and a per-tensor quantizer on the input.
//! The QKV projection and first MLP layer of every block additionally rescale
//! their input channel-wise and fold the compensation into weight and bias.
//! Both attention products quantize their inputs. LayerNorm and softmax are
//! computed in full precision on both paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AtSite, Error, Result};
use crate::params::{Bindings, ParamId, ParamKind, ParamStore};
use crate::parallel;
use crate::quantizer::{
    fake_quantize_with, weight_percentiles, BitConfig, Granularity, QuantizerState, Target,
};
use crate::reparam::{fold_into_layer, rescale_input, RescaleState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            classes: 10,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.classes,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Invalid(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Switches that shape the quantized path.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantMode {
    pub bits: BitConfig,
    /// When false every quantizer is bypassed on the quantized path.
    pub enabled: bool,
    /// Quantize the post-softmax attention matrix before the product with V.
    pub quantize_attn_probs: bool,
    pub calibrated: bool,
}

impl Default for QuantMode {
    fn default() -> Self {
        Self {
            bits: BitConfig::new(16, 16).expect("valid levels"),
            enabled: true,
            quantize_attn_probs: true,
            calibrated: false,
        }
    }
}

/// Percentile pairs used by [`TinyViT::calibrate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationOptions {
    pub act_pct: (f64, f64),
    pub rescale_pct: (f64, f64),
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            act_pct: (0.1, 99.9),
            rescale_pct: (0.01, 99.9),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    FullPrecision,
    Quantized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantSite {
    pub name: String,
    pub target: Target,
    pub granularity: Granularity,
    pub levels: usize,
    pub delta: ParamId,
    pub zero: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescaleSite {
    pub name: String,
    pub alpha: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    name: String,
    weight: ParamId,
    bias: ParamId,
    refine: ParamId,
    weight_site: usize,
    input_site: usize,
    rescale: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv: Linear,
    q_site: usize,
    k_site: usize,
    v_site: usize,
    probs_site: usize,
    proj: Linear,
    ln2: (ParamId, ParamId),
    fc1: Linear,
    fc2: Linear,
}

/// Per-block features and logits of both paths for one batch.
#[derive(Clone, Debug)]
pub struct DualOutput {
    pub fp_features: Vec<Var>,
    pub q_features: Vec<Var>,
    pub fp_logits: Var,
    pub q_logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyViT {
    config: ViTConfig,
    mode: QuantMode,
    params: ParamStore,
    patch: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: Linear,
    sites: Vec<QuantSite>,
    rescales: Vec<RescaleSite>,
}

struct Builder {
    params: ParamStore,
    sites: Vec<QuantSite>,
    rescales: Vec<RescaleSite>,
    rng: ChaCha8Rng,
    bits: BitConfig,
}

impl Builder {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    fn site(&mut self, name: String, target: Target) -> usize {
        let (granularity, levels, n) = match target {
            Target::Activations => (Granularity::PerTensor, self.bits.activation_levels, 1),
            // per-output-channel sizes are fixed up by `linear`
            Target::Weights => (Granularity::PerOutputChannel, self.bits.weight_levels, 1),
        };
        self.site_sized(name, target, granularity, levels, n)
    }

    fn site_sized(
        &mut self,
        name: String,
        target: Target,
        granularity: Granularity,
        levels: usize,
        n: usize,
    ) -> usize {
        let delta = self.params.add(
            format!("{name}.delta"),
            ParamKind::QuantDelta,
            Tensor::ones(&[n]).expect("positive"),
        );
        let zero = self.params.add(
            format!("{name}.zero"),
            ParamKind::QuantZero,
            Tensor::zeros(&[n]).expect("positive"),
        );
        self.sites.push(QuantSite {
            name,
            target,
            granularity,
            levels,
            delta,
            zero,
        });
        self.sites.len() - 1
    }

    fn ln(&mut self, name: &str, dim: usize) -> (ParamId, ParamId) {
        let g = self.params.add(
            format!("{name}.gamma"),
            ParamKind::Teacher,
            Tensor::ones(&[dim]).expect("positive"),
        );
        let b = self.params.add(
            format!("{name}.beta"),
            ParamKind::Teacher,
            Tensor::zeros(&[dim]).expect("positive"),
        );
        (g, b)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, rescaled: bool) -> Linear {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let data = (0..din * dout)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        let w = Tensor::new(&[dout, din], data).expect("shape matches");
        let weight = self.params.add(format!("{name}.weight"), ParamKind::Teacher, w);
        let bias = self.params.add(
            format!("{name}.bias"),
            ParamKind::Teacher,
            Tensor::zeros(&[dout]).expect("positive"),
        );
        let refine = self.params.add(
            format!("{name}.refine"),
            ParamKind::Refine,
            Tensor::zeros(&[dout, din]).expect("positive"),
        );
        let levels = self.bits.weight_levels;
        let weight_site = self.site_sized(
            format!("{name}.wq"),
            Target::Weights,
            Granularity::PerOutputChannel,
            levels,
            dout,
        );
        let input_site = self.site(format!("{name}.aq"), Target::Activations);
        let rescale = rescaled.then(|| {
            let alpha = self.params.add(
                format!("{name}.rescale.alpha"),
                ParamKind::RescaleAlpha,
                Tensor::ones(&[din]).expect("positive"),
            );
            let beta = self.params.add(
                format!("{name}.rescale.beta"),
                ParamKind::RescaleBeta,
                Tensor::zeros(&[din]).expect("positive"),
            );
            self.rescales.push(RescaleSite {
                name: format!("{name}.rescale"),
                alpha,
                beta,
            });
            self.rescales.len() - 1
        });
        Linear {
            name: name.to_string(),
            weight,
            bias,
            refine,
            weight_site,
            input_site,
            rescale,
        }
    }
}

impl TinyViT {
    /// Randomly initialized model with un-calibrated quantizers.
    pub fn new(config: ViTConfig, mode: QuantMode) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut b = Builder {
            params: ParamStore::new(),
            sites: Vec::new(),
            rescales: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            bits: mode.bits.clone(),
        };
        let patch = b.linear("patch_embed", config.patch_dim(), d, false);
        let cls_t = b.normal(&[d], 0.02);
        let cls = b.params.add("cls_token", ParamKind::Teacher, cls_t);
        let pos_t = b.normal(&[config.tokens(), d], 0.02);
        let pos = b.params.add("pos_embed", ParamKind::Teacher, pos_t);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            let ln1 = b.ln(&format!("{p}.ln1"), d);
            let qkv = b.linear(&format!("{p}.qkv"), d, 3 * d, true);
            let q_site = b.site(format!("{p}.attn.q"), Target::Activations);
            let k_site = b.site(format!("{p}.attn.k"), Target::Activations);
            let v_site = b.site(format!("{p}.attn.v"), Target::Activations);
            let probs_site = b.site(format!("{p}.attn.probs"), Target::Activations);
            let proj = b.linear(&format!("{p}.proj"), d, d, false);
            let ln2 = b.ln(&format!("{p}.ln2"), d);
            let hidden = d * config.mlp_ratio;
            let fc1 = b.linear(&format!("{p}.fc1"), d, hidden, true);
            let fc2 = b.linear(&format!("{p}.fc2"), hidden, d, false);
            blocks.push(Block {
                ln1,
                qkv,
                q_site,
                k_site,
                v_site,
                probs_site,
                proj,
                ln2,
                fc1,
                fc2,
            });
        }
        let ln_f = b.ln("ln_f", d);
        let head = b.linear("head", d, config.classes, false);
        Ok(Self {
            config,
            mode,
            params: b.params,
            patch,
            cls,
            pos,
            blocks,
            ln_f,
            head,
            sites: b.sites,
            rescales: b.rescales,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn mode(&self) -> &QuantMode {
        &self.mode
    }

    pub fn mode_mut(&mut self) -> &mut QuantMode {
        &mut self.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn sites(&self) -> &[QuantSite] {
        &self.sites
    }

    pub fn rescale_sites(&self) -> &[RescaleSite] {
        &self.rescales
    }

    /// Changes the level counts of every quantizer; the model must be recalibrated.
    pub fn set_bits(&mut self, bits: BitConfig) {
        for s in &mut self.sites {
            s.levels = match s.target {
                Target::Weights => bits.weight_levels,
                Target::Activations => bits.activation_levels,
            };
        }
        self.mode.bits = bits;
        self.mode.calibrated = false;
    }

    pub fn quantizer(&self, site: usize) -> Result<QuantizerState> {
        let s = &self.sites[site];
        let mut q = QuantizerState::new(
            s.levels,
            s.granularity,
            s.target,
            self.params.get(s.delta).data().to_vec(),
            self.params.get(s.zero).data().to_vec(),
        )?;
        let req = self.params.get(s.delta).requires_grad();
        q.delta_mut().set_requires_grad(req);
        q.zero_point_mut()
            .set_requires_grad(self.params.get(s.zero).requires_grad());
        Ok(q)
    }

    pub fn set_quantizer(&mut self, site: usize, q: QuantizerState) -> Result<()> {
        let s = &mut self.sites[site];
        if q.target() != s.target || q.granularity() != s.granularity {
            return Err(Error::State(format!("quantizer kind mismatch at {}", s.name)));
        }
        if q.delta().len() != self.params.get(s.delta).len() {
            return Err(Error::dim(format!("quantizer size mismatch at {}", s.name)));
        }
        s.levels = q.levels();
        let (delta, zero) = q.into_parts();
        copy_into(self.params.get_mut(s.delta), &delta);
        copy_into(self.params.get_mut(s.zero), &zero);
        Ok(())
    }

    pub fn rescale(&self, i: usize) -> Result<RescaleState> {
        let r = &self.rescales[i];
        RescaleState::new(
            self.params.get(r.alpha).data().to_vec(),
            self.params.get(r.beta).data().to_vec(),
        )
    }

    pub fn set_rescale(&mut self, i: usize, state: RescaleState) -> Result<()> {
        let r = &self.rescales[i];
        if state.channel_count() != self.params.get(r.alpha).len() {
            return Err(Error::dim(format!("rescale size mismatch at {}", r.name)));
        }
        let (a, b) = state.into_parts();
        let (ai, bi) = (r.alpha, r.beta);
        copy_into(self.params.get_mut(ai), &a);
        copy_into(self.params.get_mut(bi), &b);
        Ok(())
    }

    fn linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.patch];
        for b in &self.blocks {
            out.extend([&b.qkv, &b.proj, &b.fc1, &b.fc2]);
        }
        out.push(&self.head);
        out
    }

    /// Weight-refinement tensors of every linear layer, in layer order.
    pub fn refine_ids(&self) -> Vec<ParamId> {
        self.linears().iter().map(|l| l.refine).collect()
    }

    /// Forward both paths on one tape.
    pub fn forward_dual(
        &self,
        tape: &mut Tape,
        bind: &mut Bindings,
        images: &Tensor,
    ) -> Result<DualOutput> {
        let (fp_features, fp_logits) = self.forward(tape, bind, images, Path::FullPrecision)?;
        let (q_features, q_logits) = self.forward(tape, bind, images, Path::Quantized)?;
        Ok(DualOutput {
            fp_features,
            q_features,
            fp_logits,
            q_logits,
        })
    }

    /// Block features (after each block's second residual) and logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Bindings,
        images: &Tensor,
        path: Path,
    ) -> Result<(Vec<Var>, Var)> {
        let mut pass = Pass {
            model: self,
            tape,
            bind,
            path,
            trace: None,
        };
        pass.run(images)
    }

    /// Fully quantized effective weight of every linear layer.
    pub fn effective_weights(&self) -> Result<Vec<(String, Tensor)>> {
        let mut tape = Tape::new();
        let mut bind = Bindings::new(&self.params);
        let mut out = Vec::new();
        for l in self.linears() {
            let mut pass = Pass {
                model: self,
                tape: &mut tape,
                bind: &mut bind,
                path: Path::Quantized,
                trace: None,
            };
            let (w, _) = pass.effective_layer(l)?;
            out.push((l.name.clone(), tape.tensor(w)));
        }
        Ok(out)
    }

    /// Top-1 predictions of one path, evaluated in parallel chunks.
    pub fn predict(&self, images: &[Tensor], path: Path) -> Result<Vec<usize>> {
        let chunks = parallel::map_ranges(images.len(), 64, |r| -> Result<Vec<usize>> {
            let batch = stack_images(&images[r], &self.config)?;
            let mut tape = Tape::new();
            let mut bind = Bindings::new(&self.params);
            let (_, logits) = self.forward(&mut tape, &mut bind, &batch, path)?;
            Ok(argmax_rows(tape.value(logits), self.config.classes))
        });
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Initializes every rescale and quantizer from one full-precision pass.
    ///
    /// Rescale parameters are set first; activation and weight quantizers are
    /// then initialized from the rescaled activations and folded weights.
    pub fn calibrate(&mut self, batch: &Tensor, opts: &CalibrationOptions) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::domain("empty calibration batch"));
        }
        let trace = {
            let mut tape = Tape::new();
            let mut bind = Bindings::new(&self.params);
            let mut pass = Pass {
                model: self,
                tape: &mut tape,
                bind: &mut bind,
                path: Path::FullPrecision,
                trace: Some(vec![None; self.sites.len()]),
            };
            pass.run(batch)?;
            pass.trace.take().expect("trace requested")
        };
        let (alo, ahi) = opts.act_pct;
        let (rlo, rhi) = opts.rescale_pct;
        let linears: Vec<Linear> = self.linears().into_iter().cloned().collect();
        for l in &linears {
            let x = trace[l.input_site]
                .as_ref()
                .ok_or_else(|| Error::State(format!("no activations recorded for {}", l.name)))?;
            let w_eff = add_tensors(self.params.get(l.weight), self.params.get(l.refine))?;
            let (x_q, w_q) = match l.rescale {
                Some(ri) => {
                    let r = RescaleState::init(x, &w_eff, rlo, rhi).at(&l.name)?;
                    let xr = r.rescale(x)?;
                    let (wr, _) = r.fold(&w_eff, self.params.get(l.bias))?;
                    self.set_rescale(ri, r)?;
                    (xr, wr)
                }
                None => (x.clone(), w_eff),
            };
            let s = &self.sites[l.input_site];
            let aq = QuantizerState::init_from_data(&x_q, s.levels, alo, ahi, Target::Activations)
                .at(&s.name)?;
            self.set_quantizer(l.input_site, aq)?;
            let levels = self.sites[l.weight_site].levels;
            let (wlo, whi) = weight_percentiles(levels, alo, ahi);
            let wq = QuantizerState::init_per_channel(&w_q, levels, wlo, whi)?;
            self.set_quantizer(l.weight_site, wq)?;
        }
        let attn_sites: Vec<usize> = self
            .blocks
            .iter()
            .flat_map(|b| [b.q_site, b.k_site, b.v_site, b.probs_site])
            .collect();
        for site in attn_sites {
            let levels = self.sites[site].levels;
            let q = match &trace[site] {
                Some(x) => QuantizerState::init_from_data(x, levels, alo, ahi, Target::Activations)
                    .at(&self.sites[site].name)?,
                None => continue,
            };
            self.set_quantizer(site, q)?;
        }
        self.mode.calibrated = true;
        Ok(())
    }
}

fn copy_into(dst: &mut Tensor, src: &Tensor) {
    dst.data_mut().copy_from_slice(src.data());
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Index of the largest element of each row (first on ties).
pub fn argmax_rows(values: &[f64], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Stacks `[C, H, W]` images into one `[n, C, H, W]` batch.
pub fn stack_images(images: &[Tensor], config: &ViTConfig) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::domain("empty image batch"));
    }
    let want = [config.channels, config.image_size, config.image_size];
    let mut data = Vec::with_capacity(images.len() * config.image_len());
    for img in images {
        if img.shape() != want {
            return Err(Error::dim(format!(
                "image shape {:?} does not match model input {want:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), want[0], want[1], want[2]], data)
}

/// `[n, C, H, W]` to `[n * patches, C * p * p]`, patches in row-major order.
pub fn patchify(batch: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != config.channels || s[2] != config.image_size || s[3] != config.image_size
    {
        return Err(Error::dim(format!(
            "batch shape {s:?} does not match [n, {}, {}, {}]",
            config.channels, config.image_size, config.image_size
        )));
    }
    let (n, c, hw, p) = (s[0], s[1], s[2], config.patch_size);
    let side = hw / p;
    let pd = config.patch_dim();
    let x = batch.data();
    let mut out = vec![0.0; n * side * side * pd];
    for b in 0..n {
        for py in 0..side {
            for px in 0..side {
                let row = (b * side + py) * side + px;
                let mut k = 0;
                for ch in 0..c {
                    for dy in 0..p {
                        let src = ((b * c + ch) * hw + py * p + dy) * hw + px * p;
                        out[row * pd + k..row * pd + k + p].copy_from_slice(&x[src..src + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(&[n * side * side, pd], out)
}

struct Pass<'a> {
    model: &'a TinyViT,
    tape: &'a mut Tape,
    bind: &'a mut Bindings,
    path: Path,
    trace: Option<Vec<Option<Tensor>>>,
}

impl Pass<'_> {
    fn p(&mut self, id: ParamId) -> Result<Var> {
        self.bind.get(self.tape, &self.model.params, id)
    }

    fn quantized(&self) -> bool {
        self.path == Path::Quantized && self.model.mode.enabled
    }

    fn record(&mut self, site: usize, x: Var) {
        let tensor = match &self.trace {
            Some(_) => self.tape.tensor(x),
            None => return,
        };
        if let Some(t) = &mut self.trace {
            t[site] = Some(tensor);
        }
    }

    fn quant(&mut self, site: usize, x: Var) -> Result<Var> {
        self.record(site, x);
        if !self.quantized() {
            return Ok(x);
        }
        let s = &self.model.sites[site];
        let (levels, granularity) = (s.levels, s.granularity);
        let (di, zi) = (s.delta, s.zero);
        let delta = self.p(di)?;
        let zero = self.p(zi)?;
        fake_quantize_with(self.tape, x, delta, zero, levels, granularity)
            .at(&self.model.sites[site].name)
    }

    /// Quantized-path weight and bias of `l` before input handling.
    fn effective_layer(&mut self, l: &Linear) -> Result<(Var, Var)> {
        let w = self.p(l.weight)?;
        let b = self.p(l.bias)?;
        let refine = self.p(l.refine)?;
        let w_eff = self.tape.add(w, refine)?;
        let (w2, b2) = match l.rescale {
            Some(ri) => {
                let r = &self.model.rescales[ri];
                let (ai, bi) = (r.alpha, r.beta);
                let a = self.p(ai)?;
                let s = self.p(bi)?;
                fold_into_layer(self.tape, w_eff, b, a, s)?
            }
            None => (w_eff, b),
        };
        let wq = self.quant(l.weight_site, w2)?;
        Ok((wq, b2))
    }

    fn linear(&mut self, l: &Linear, x: Var) -> Result<Var> {
        let y = match self.path {
            Path::FullPrecision => {
                self.record(l.input_site, x);
                let w = self.p(l.weight)?;
                let b = self.p(l.bias)?;
                let y = self.tape.matmul_nt(x, w)?;
                self.tape.add(y, b)?
            }
            Path::Quantized => {
                let x2 = match l.rescale {
                    Some(ri) => {
                        let r = &self.model.rescales[ri];
                        let (ai, bi) = (r.alpha, r.beta);
                        let a = self.p(ai)?;
                        let s = self.p(bi)?;
                        rescale_input(self.tape, x, a, s)?
                    }
                    None => x,
                };
                let xq = self.quant(l.input_site, x2)?;
                let (w, b) = self.effective_layer(l)?;
                let y = self.tape.matmul_nt(xq, w)?;
                self.tape.add(y, b)?
            }
        };
        Ok(y)
    }

    fn run(&mut self, images: &Tensor) -> Result<(Vec<Var>, Var)> {
        let cfg = &self.model.config;
        let (d, heads, tokens) = (cfg.embed_dim, cfg.heads, cfg.tokens());
        let patches = patchify(images, cfg)?;
        let n = images.shape()[0];
        let model = self.model;
        let x0 = self.tape.constant(patches)?;
        let emb = self.linear(&model.patch, x0).at("patch_embed")?;
        let cls = self.p(model.cls)?;
        let x = self.tape.prepend_row(emb, cls, n)?;
        let x = self.tape.reshape(x, &[n, tokens, d])?;
        let pos = self.p(model.pos)?;
        let x = self.tape.add(x, pos)?;
        let mut x = self.tape.reshape(x, &[n * tokens, d])?;
        let mut features = Vec::with_capacity(model.blocks.len());
        let scale = 1.0 / ((d / heads) as f64).sqrt();
        for (i, blk) in model.blocks.iter().enumerate() {
            let site = format!("blocks.{i}");
            x = self.block(blk, x, n, heads, scale).at(&site)?;
            features.push(x);
        }
        let (g, b) = (self.p(model.ln_f.0)?, self.p(model.ln_f.1)?);
        let h = self.tape.layer_norm(x, g, b, LN_EPS)?;
        let cls_rows: Vec<usize> = (0..n).map(|i| i * tokens).collect();
        let pooled = self.tape.select_rows(h, &cls_rows)?;
        let logits = self.linear(&model.head, pooled).at("head")?;
        Ok((features, logits))
    }

    fn block(&mut self, blk: &Block, x: Var, n: usize, heads: usize, scale: f64) -> Result<Var> {
        let d = self.model.config.embed_dim;
        let (g, b) = (self.p(blk.ln1.0)?, self.p(blk.ln1.1)?);
        let h = self.tape.layer_norm(x, g, b, LN_EPS)?;
        let qkv = self.linear(&blk.qkv, h).at("qkv")?;
        let q = self.tape.slice_cols(qkv, 0, d)?;
        let k = self.tape.slice_cols(qkv, d, d)?;
        let v = self.tape.slice_cols(qkv, 2 * d, d)?;
        let q = self.quant(blk.q_site, q)?;
        let k = self.quant(blk.k_site, k)?;
        let v = self.quant(blk.v_site, v)?;
        let qh = self.tape.split_heads(q, n, heads)?;
        let kh = self.tape.split_heads(k, n, heads)?;
        let vh = self.tape.split_heads(v, n, heads)?;
        let scores = self.tape.bmm_nt(qh, kh)?;
        let scores = self.tape.scale(scores, scale)?;
        let mut probs = self.tape.softmax(scores)?;
        if self.model.mode.quantize_attn_probs || self.path == Path::FullPrecision {
            probs = self.quant(blk.probs_site, probs)?;
        }
        let ctx = self.tape.bmm(probs, vh)?;
        let ctx = self.tape.merge_heads(ctx, n)?;
        let attn = self.linear(&blk.proj, ctx).at("proj")?;
        let x = self.tape.add(x, attn)?;
        let (g, b) = (self.p(blk.ln2.0)?, self.p(blk.ln2.1)?);
        let h = self.tape.layer_norm(x, g, b, LN_EPS)?;
        let f = self.linear(&blk.fc1, h).at("fc1")?;
        let f = self.tape.gelu(f)?;
        let f = self.linear(&blk.fc2, f).at("fc2")?;
        self.tape.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 4,
            seed: 5,
        }
    }

    fn batch(n: usize, cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * cfg.image_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(&[n, cfg.channels, cfg.image_size, cfg.image_size], data).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.patch_size = 3;
        assert!(TinyViT::new(c, QuantMode::default()).is_err());
        let mut c = tiny();
        c.heads = 3;
        assert!(TinyViT::new(c, QuantMode::default()).is_err());
    }

    #[test]
    fn patchify_layout() {
        let cfg = ViTConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            ..tiny()
        };
        let img = Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn bypass_with_zero_refinement_matches_full_precision() {
        let mode = QuantMode {
            enabled: false,
            ..QuantMode::default()
        };
        let model = TinyViT::new(tiny(), mode).unwrap();
        let x = batch(3, model.config(), 1);
        let mut tape = Tape::new();
        let mut bind = Bindings::new(model.params());
        let out = model.forward_dual(&mut tape, &mut bind, &x).unwrap();
        for (a, b) in tape.value(out.fp_logits).iter().zip(tape.value(out.q_logits)) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn bypass_after_calibration_stays_equivalent() {
        let mode = QuantMode {
            enabled: false,
            ..QuantMode::default()
        };
        let mut model = TinyViT::new(tiny(), mode).unwrap();
        let x = batch(4, model.config(), 2);
        model.calibrate(&x, &CalibrationOptions::default()).unwrap();
        assert!(model.rescale(0).unwrap().alpha().data().iter().any(|a| *a != 1.0));
        let mut tape = Tape::new();
        let mut bind = Bindings::new(model.params());
        let out = model.forward_dual(&mut tape, &mut bind, &x).unwrap();
        for (a, b) in tape.value(out.fp_logits).iter().zip(tape.value(out.q_logits)) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn dual_output_shapes_match() {
        let mut model = TinyViT::new(tiny(), QuantMode::default()).unwrap();
        let x = batch(2, model.config(), 3);
        model.calibrate(&x, &CalibrationOptions::default()).unwrap();
        let mut tape = Tape::new();
        let mut bind = Bindings::new(model.params());
        let out = model.forward_dual(&mut tape, &mut bind, &x).unwrap();
        assert_eq!(out.fp_features.len(), 2);
        for (a, b) in out.fp_features.iter().zip(&out.q_features) {
            assert_eq!(tape.shape(*a), tape.shape(*b));
            assert_eq!(tape.shape(*a), &[2 * 5, 8]);
        }
        assert_eq!(tape.shape(out.q_logits), &[2, 4]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut model = TinyViT::new(tiny(), QuantMode::default()).unwrap();
        let x = batch(2, model.config(), 4);
        model.calibrate(&x, &CalibrationOptions::default()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let mut bind = Bindings::new(model.params());
            let out = model.forward_dual(&mut tape, &mut bind, &x).unwrap();
            (tape.tensor(out.fp_logits), tape.tensor(out.q_logits))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ternary_weights_have_three_values_per_channel() {
        let mode = QuantMode {
            bits: "W1.58A8".parse().unwrap(),
            ..QuantMode::default()
        };
        let cfg = ViTConfig {
            depth: 1,
            ..tiny()
        };
        let mut model = TinyViT::new(cfg, mode).unwrap();
        let x = batch(4, model.config(), 6);
        model.calibrate(&x, &CalibrationOptions::default()).unwrap();
        for (name, w) in model.effective_weights().unwrap() {
            for r in 0..w.shape()[0] {
                let mut vals: Vec<f64> = w.row(r).to_vec();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                assert!(vals.len() <= 3, "{name} row {r} has {} values", vals.len());
            }
        }
    }

    #[test]
    fn calibration_on_zeros_hits_degenerate_branches() {
        let mut model = TinyViT::new(tiny(), QuantMode::default()).unwrap();
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            let name = model.params().name(id).to_string();
            if name == "cls_token" || name == "pos_embed" || name.ends_with(".bias") {
                model.params_mut().get_mut(id).data_mut().fill(0.0);
            }
        }
        let x = Tensor::zeros(&[2, 3, 8, 8]).unwrap();
        model.calibrate(&x, &CalibrationOptions::default()).unwrap();
        for i in 0..model.rescale_sites().len() {
            let r = model.rescale(i).unwrap();
            assert!(r.alpha().data().iter().all(|a| *a == 1.0));
            assert!(r.beta().data().iter().all(|b| *b == 0.0));
        }
        let floor = crate::quantizer::RANGE_EPS / 15.0;
        for (i, s) in model.sites().iter().enumerate() {
            if s.target == Target::Activations && !s.name.ends_with("probs") {
                let q = model.quantizer(i).unwrap();
                assert!((q.delta().data()[0] - floor).abs() < 1e-20, "{}", s.name);
            }
        }
    }

    #[test]
    fn recalibration_is_idempotent() {
        let mut model = TinyViT::new(tiny(), QuantMode::default()).unwrap();
        let x = batch(3, model.config(), 7);
        model.calibrate(&x, &CalibrationOptions::default()).unwrap();
        let first = model.clone();
        model.calibrate(&x, &CalibrationOptions::default()).unwrap();
        assert_eq!(first, model);
    }

    #[test]
    fn empty_batch_rejected_in_stack() {
        assert!(stack_images(&[], &tiny()).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 5 * 5).map(|i| (i as f64 * 0.7).sin() * 4.0).collect();
        let s = tape.constant(Tensor::new(&[2, 5, 5], data).unwrap()).unwrap();
        let p = tape.softmax(s).unwrap();
        for row in tape.value(p).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }
}
