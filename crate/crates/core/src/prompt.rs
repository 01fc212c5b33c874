//! Multi-prompt learning: `M` token-embedding matrices per class are pushed
//! towards images of that class while being kept mutually diverse.
//!
//! Generators and classifiers are pluggable; [`ToyGenerator`] and
//! [`ToyClassifier`] are small fixed random maps that stand in for a
//! text-to-image model and a vision backbone.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Normal, StandardNormal};

use crate::checkpoint::BankRecord;
use crate::error::{AtSite, Error, Result};
use crate::optim::Adam;
use crate::parallel;
use crate::tape::{Tape, Var};
use crate::teacher::cross_entropy;
use crate::tensor::{median, Tensor};

pub const NORM_FLOOR: f64 = 1e-8;
/// Initial ℓ2 norm range of context-token rows.
pub const CONTEXT_NORM: (f64, f64) = (0.3, 0.4);
pub const REINIT_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub class_id: usize,
    pub semantic_count: usize,
    token_count: usize,
    embed_dim: usize,
    /// One `[token_count, embed_dim]` matrix per prompt.
    embeddings: Vec<Tensor>,
}

/// Row `r` of the deterministic class-text table: the tokens shared by
/// every prompt of a class before optimization.
fn class_text_row(class_id: usize, r: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e47);
    rng.set_stream((class_id as u64) << 16 | r as u64);
    let s = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x * norm / n).collect();
        }
    }
}

impl PromptBank {
    /// `m` prompts sharing a class-text prefix of `semantic_count` rows, followed
    /// by context rows with random directions and norms in [`CONTEXT_NORM`].
    pub fn init(
        class_id: usize,
        m: usize,
        token_count: usize,
        embed_dim: usize,
        semantic_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if m == 0 || token_count == 0 || embed_dim == 0 {
            return Err(Error::Invalid("prompt bank dimensions must be positive".into()));
        }
        if semantic_count > token_count {
            return Err(Error::Invalid(format!(
                "semantic prefix {semantic_count} exceeds token count {token_count}"
            )));
        }
        let prefix: Vec<f64> = (0..semantic_count)
            .flat_map(|r| class_text_row(class_id, r, embed_dim, seed))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_id as u64);
        let mut embeddings = Vec::with_capacity(m);
        for _ in 0..m {
            let mut data = prefix.clone();
            for _ in semantic_count..token_count {
                let norm = rng.gen_range(CONTEXT_NORM.0..=CONTEXT_NORM.1);
                data.extend(random_direction(&mut rng, embed_dim, norm));
            }
            embeddings.push(Tensor::new(&[token_count, embed_dim], data)?);
        }
        Ok(Self {
            class_id,
            semantic_count,
            token_count,
            embed_dim,
            embeddings,
        })
    }

    pub fn prompts(&self) -> usize {
        self.embeddings.len()
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn embeddings(&self) -> &[Tensor] {
        &self.embeddings
    }

    pub fn embedding_mut(&mut self, m: usize) -> &mut Tensor {
        &mut self.embeddings[m]
    }

    /// All prompts as rows of a `[M, token_count·embed_dim]` tensor.
    pub fn stacked(&self) -> Tensor {
        let data = self.embeddings.iter().flat_map(|e| e.data().iter().copied()).collect();
        Tensor::new(&[self.prompts(), self.token_count * self.embed_dim], data)
            .expect("bank shapes are consistent")
    }

    pub fn to_record(&self) -> BankRecord {
        BankRecord {
            class_id: self.class_id,
            prompts: self.prompts(),
            token_count: self.token_count,
            embed_dim: self.embed_dim,
            semantic_count: self.semantic_count,
            embeddings: self.stacked().into_data(),
        }
    }

    pub fn from_record(r: &BankRecord) -> Result<Self> {
        let per = r.token_count * r.embed_dim;
        if r.prompts == 0 || per == 0 || r.embeddings.len() != r.prompts * per {
            return Err(Error::Format(format!("bank for class {} is malformed", r.class_id)));
        }
        let embeddings = r
            .embeddings
            .chunks(per)
            .map(|c| Tensor::new(&[r.token_count, r.embed_dim], c.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self {
            class_id: r.class_id,
            semantic_count: r.semantic_count,
            token_count: r.token_count,
            embed_dim: r.embed_dim,
            embeddings,
        })
    }
}

/// Differentiable map from prompts and shared noise to images.
pub trait Generator: Sync {
    fn noise_dim(&self) -> usize;
    /// `[M, T·D]` prompts and `[1, noise_dim]` noise to `[M, pixels]` images.
    fn generate(&self, tape: &mut Tape, prompts: Var, noise: Var) -> Result<Var>;
    /// `[M, T·D]` prompts to `[M, f_dim]` summary vectors.
    fn encode(&self, tape: &mut Tape, prompts: Var) -> Result<Var>;
}

pub struct ClassifierOutput {
    pub logits: Var,
    pub features: Var,
    pub attention: Var,
}

/// Differentiable map from `[M, pixels]` images to logits, features and attention maps.
pub trait Classifier: Sync {
    fn classes(&self) -> usize;
    fn classify(&self, tape: &mut Tape, images: Var) -> Result<ClassifierOutput>;
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// `image = tanh(G·vec(E) + U·noise)`, `f = P·vec(E)`.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    pub channels: usize,
    pub size: usize,
    g: Tensor,
    u: Tensor,
    p: Tensor,
}

impl ToyGenerator {
    pub fn new(
        token_count: usize,
        embed_dim: usize,
        noise_dim: usize,
        f_dim: usize,
        seed: u64,
    ) -> Self {
        let (channels, size) = (3, 8);
        let pixels = channels * size * size;
        let input = token_count * embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gaussian(&mut rng, &[pixels, input], 1.0 / (input as f64).sqrt());
        let u = gaussian(&mut rng, &[pixels, noise_dim], 0.5 / (noise_dim as f64).sqrt());
        let p = gaussian(&mut rng, &[f_dim, input], 1.0 / (input as f64).sqrt());
        Self {
            channels,
            size,
            g,
            u,
            p,
        }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.size * self.size
    }
}

impl Generator for ToyGenerator {
    fn noise_dim(&self) -> usize {
        self.u.shape()[1]
    }

    fn generate(&self, tape: &mut Tape, prompts: Var, noise: Var) -> Result<Var> {
        let g = tape.constant(self.g.clone())?;
        let u = tape.constant(self.u.clone())?;
        let a = tape.matmul_nt(prompts, g)?;
        let b = tape.matmul_nt(noise, u)?;
        let s = tape.add(a, b)?;
        tape.tanh(s)
    }

    fn encode(&self, tape: &mut Tape, prompts: Var) -> Result<Var> {
        let p = tape.constant(self.p.clone())?;
        tape.matmul_nt(prompts, p)
    }
}

/// `h = tanh(W1·x)`, `logits = W2·h`; the attention map weighs each pixel's
/// magnitude by the total absolute first-layer weight reading it, summed over
/// channels and normalized to unit mass.
#[derive(Clone, Debug)]
pub struct ToyClassifier {
    w1: Tensor,
    w2: Tensor,
    pixel_weight: Tensor,
    channel_sum: Tensor,
}

impl ToyClassifier {
    pub fn new(channels: usize, size: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let plane = size * size;
        let pixels = channels * plane;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = gaussian(&mut rng, &[hidden, pixels], 1.0 / (pixels as f64).sqrt());
        let w2 = gaussian(&mut rng, &[classes, hidden], 2.0 / (hidden as f64).sqrt());
        let mut colsum = vec![0.0; pixels];
        for j in 0..hidden {
            for (c, w) in colsum.iter_mut().zip(w1.row(j)) {
                *c += w.abs();
            }
        }
        let mut sum = vec![0.0; pixels * plane];
        for c in 0..channels {
            for p in 0..plane {
                sum[(c * plane + p) * plane + p] = 1.0;
            }
        }
        Self {
            w1,
            w2,
            pixel_weight: Tensor::new(&[1, pixels], colsum).expect("positive shape"),
            channel_sum: Tensor::new(&[pixels, plane], sum).expect("positive shape"),
        }
    }
}

impl Classifier for ToyClassifier {
    fn classes(&self) -> usize {
        self.w2.shape()[0]
    }

    fn classify(&self, tape: &mut Tape, images: Var) -> Result<ClassifierOutput> {
        let w1 = tape.constant(self.w1.clone())?;
        let w2 = tape.constant(self.w2.clone())?;
        let pre = tape.matmul_nt(images, w1)?;
        let features = tape.tanh(pre)?;
        let logits = tape.matmul_nt(features, w2)?;
        let pw = tape.constant(self.pixel_weight.clone())?;
        let cs = tape.constant(self.channel_sum.clone())?;
        let mag = tape.abs(images)?;
        let weighted = tape.mul(mag, pw)?;
        let map = tape.matmul(weighted, cs)?;
        let rows = tape.shape(map)[0];
        let mass = tape.sum_axis(map, 1)?;
        let mass = tape.reshape(mass, &[rows, 1])?;
        let mass = tape.add_scalar(mass, NORM_FLOOR)?;
        let attention = tape.div(map, mass)?;
        Ok(ClassifierOutput {
            logits,
            features,
            attention,
        })
    }
}

/// `−log softmax(logits)[target]` for one logit vector.
pub fn loss_cls(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let n = tape.shape(logits).iter().product::<usize>();
    let row = tape.reshape(logits, &[1, n])?;
    cross_entropy(tape, row, &[target])
}

/// Per-row cross-entropy of `[M, K]` logits against one class, as a `[M]` vector.
pub fn loss_cls_rows(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [rows, classes] = shape[..] else {
        return Err(Error::dim(format!("expected [M, classes] logits, got {shape:?}")));
    };
    if target >= classes {
        return Err(Error::domain(format!("class {target} out of range for {classes} classes")));
    }
    let mut onehot = vec![0.0; rows * classes];
    for r in 0..rows {
        onehot[r * classes + target] = 1.0;
    }
    let mask = tape.constant(Tensor::new(&shape, onehot)?)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.mul(lp, mask)?;
    let s = tape.sum_axis(picked, 1)?;
    tape.neg(s)
}

fn normalize_rows(tape: &mut Tape, f: Var) -> Result<Var> {
    let rows = tape.shape(f)[0];
    let sq = tape.square(f)?;
    let ss = tape.sum_axis(sq, 1)?;
    let ss = tape.reshape(ss, &[rows, 1])?;
    let ss = tape.clamp_min(ss, NORM_FLOOR * NORM_FLOOR)?;
    let n = tape.sqrt(ss)?;
    tape.div(f, n)
}

/// Sum over unordered pairs of `|cos(f_i, f_j)|` for the rows of `[M, d]`.
pub fn loss_orth(tape: &mut Tape, f: Var) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("expected [M, d] vectors, got {shape:?}")));
    }
    let m = shape[0];
    if m < 2 {
        return tape.scalar_const(0.0);
    }
    let u = normalize_rows(tape, f)?;
    let gram = tape.matmul_nt(u, u)?;
    let mut mask = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            mask[i * m + j] = 1.0;
        }
    }
    let mask = tape.constant(Tensor::new(&[m, m], mask)?)?;
    let a = tape.abs(gram)?;
    let upper = tape.mul(a, mask)?;
    tape.sum(upper)
}

/// Negative mean over elements of the population variance across the `M` rows.
pub fn loss_var(tape: &mut Tape, items: Var) -> Result<Var> {
    let shape = tape.shape(items).to_vec();
    let m = shape[0];
    if m < 2 {
        log::warn!("variance term needs at least two items, got {m}");
        return tape.scalar_const(0.0);
    }
    let n: usize = shape[1..].iter().product();
    let x = tape.reshape(items, &[m, n])?;
    let s = tape.sum_axis(x, 0)?;
    let s = tape.reshape(s, &[1, n])?;
    let mu = tape.scale(s, 1.0 / m as f64)?;
    let d = tape.sub(x, mu)?;
    let d2 = tape.square(d)?;
    let total = tape.sum(d2)?;
    tape.scale(total, -1.0 / (m * n) as f64)
}

/// Mean of `|cos(f_i, f_j)|` over unordered pairs, computed directly.
pub fn mean_pairwise_abs_cosine(f: &Tensor) -> f64 {
    let m = f.shape()[0];
    if m < 2 {
        return 0.0;
    }
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let (a, b) = (f.row(i), f.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            total += (dot / (norm(a) * norm(b))).abs();
        }
    }
    total / (m * (m - 1) / 2) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptWeights {
    pub cls: f64,
    pub orth: f64,
    pub rgb: f64,
    pub feat: f64,
    pub attn: f64,
}

impl Default for PromptWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            orth: 0.1,
            rgb: 0.1,
            feat: 0.1,
            attn: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptLossTerms {
    pub total: Var,
    /// Per-prompt classification loss, `[M]`.
    pub cls: Var,
    pub cls_mean: Var,
    pub orth: Var,
    pub var_rgb: Var,
    pub var_feat: Var,
    pub var_attn: Var,
    /// Summary vectors, `[M, f_dim]`.
    pub f: Var,
}

pub fn total_prompt_loss(
    tape: &mut Tape,
    prompts: Var,
    noise: Var,
    class_id: usize,
    gen: &dyn Generator,
    clf: &dyn Classifier,
    w: &PromptWeights,
) -> Result<PromptLossTerms> {
    let images = gen.generate(tape, prompts, noise).at("generator")?;
    let f = gen.encode(tape, prompts).at("encoder")?;
    let out = clf.classify(tape, images).at("classifier")?;
    let cls = loss_cls_rows(tape, out.logits, class_id)?;
    let cls_mean = tape.mean(cls)?;
    let orth = loss_orth(tape, f)?;
    let var_rgb = loss_var(tape, images)?;
    let var_feat = loss_var(tape, out.features)?;
    let var_attn = loss_var(tape, out.attention)?;
    let mut total = tape.scale(cls_mean, w.cls)?;
    for (v, l) in [(orth, w.orth), (var_rgb, w.rgb), (var_feat, w.feat), (var_attn, w.attn)] {
        let s = tape.scale(v, l)?;
        total = tape.add(total, s)?;
    }
    Ok(PromptLossTerms {
        total,
        cls,
        cls_mean,
        orth,
        var_rgb,
        var_feat,
        var_attn,
        f,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reinit {
    pub prompt: usize,
    /// `(survivor index, simplex weight)`.
    pub weights: Vec<(usize, f64)>,
    /// Elementwise noise added after mixing.
    pub noise: Vec<f64>,
}

/// Replaces every prompt whose loss exceeds `threshold` by a random convex
/// combination of the remaining prompts plus small Gaussian noise.
pub fn reinit_drifted(
    bank: &mut PromptBank,
    losses: &[f64],
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Reinit>> {
    if losses.len() != bank.prompts() {
        return Err(Error::dim(format!(
            "{} losses for {} prompts",
            losses.len(),
            bank.prompts()
        )));
    }
    let survivors: Vec<usize> = (0..losses.len()).filter(|&i| losses[i] <= threshold).collect();
    let drifted: Vec<usize> = (0..losses.len()).filter(|&i| losses[i] > threshold).collect();
    if drifted.is_empty() {
        return Ok(Vec::new());
    }
    if survivors.is_empty() {
        log::warn!("class {}: every prompt exceeds the drift threshold", bank.class_id);
        return Ok(Vec::new());
    }
    let noise_dist = Normal::new(0.0, REINIT_NOISE).expect("positive std");
    let n = bank.token_count * bank.embed_dim;
    let mut out = Vec::with_capacity(drifted.len());
    for &d in &drifted {
        let weights: Vec<f64> = if survivors.len() == 1 {
            vec![1.0]
        } else {
            Dirichlet::new(&vec![1.0; survivors.len()])
                .expect("valid concentration")
                .sample(rng)
        };
        let noise: Vec<f64> = (0..n).map(|_| noise_dist.sample(rng)).collect();
        let mut data = noise.clone();
        for (&s, &w) in survivors.iter().zip(&weights) {
            for (x, e) in data.iter_mut().zip(bank.embeddings[s].data()) {
                *x += w * e;
            }
        }
        bank.embeddings[d] = Tensor::new(&[bank.token_count, bank.embed_dim], data)?;
        out.push(Reinit {
            prompt: d,
            weights: survivors.iter().copied().zip(weights).collect(),
            noise,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    pub iters: usize,
    pub lr: f64,
    pub weights: PromptWeights,
    pub reinit_every: usize,
    /// Drift threshold as a multiple of the median per-prompt loss.
    pub threshold_factor: f64,
    pub freeze_semantic: bool,
    /// Noise draws averaged when measuring the initial and final state.
    pub probe_draws: usize,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            iters: 120,
            lr: 1e-3,
            weights: PromptWeights::default(),
            reinit_every: 10,
            threshold_factor: 2.0,
            freeze_semantic: false,
            probe_draws: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub iter: usize,
    pub loss_cls_mean: f64,
    pub loss_orth: f64,
    pub loss_var_rgb: f64,
    pub loss_var_feat: f64,
    pub loss_var_attn: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptProbe {
    pub cls_mean: f64,
    pub mean_abs_cosine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptReport {
    pub class_id: usize,
    pub records: Vec<PromptRecord>,
    pub reinits: Vec<(usize, Reinit)>,
    pub init: PromptProbe,
    pub final_: PromptProbe,
}

impl PromptReport {
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(
                out,
                "class={} iter={} loss_cls_mean={:?} loss_orth={:?} loss_var_rgb={:?} loss_var_feat={:?} loss_var_attn={:?}",
                self.class_id, r.iter, r.loss_cls_mean, r.loss_orth, r.loss_var_rgb, r.loss_var_feat, r.loss_var_attn
            )
            .expect("string write");
        }
        for (iter, r) in &self.reinits {
            writeln!(out, "class={} reinit_iter={iter} prompt={}", self.class_id, r.prompt)
                .expect("string write");
        }
        for (tag, p) in [("init", &self.init), ("final", &self.final_)] {
            writeln!(
                out,
                "class={} probe={tag} loss_cls_mean={:?} mean_abs_cosine={:?}",
                self.class_id, p.cls_mean, p.mean_abs_cosine
            )
            .expect("string write");
        }
        out
    }
}

fn noise_rng(seed: u64, class_id: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0x9e37_79b9));
    rng.set_stream(stream);
    rng
}

fn draw_noise(rng: &mut ChaCha8Rng, dim: usize) -> Tensor {
    gaussian(rng, &[1, dim], 1.0)
}

/// Mean classification loss over fixed noise draws and the pairwise cosine of `f`.
pub fn probe_bank(
    bank: &PromptBank,
    gen: &dyn Generator,
    clf: &dyn Classifier,
    draws: usize,
    seed: u64,
) -> Result<PromptProbe> {
    let mut rng = noise_rng(seed, bank.class_id, 1);
    let mut tape = Tape::new();
    let prompts = tape.constant(bank.stacked())?;
    let f = gen.encode(&mut tape, prompts)?;
    let mean_abs_cosine = mean_pairwise_abs_cosine(&tape.tensor(f));
    let mut cls = 0.0;
    for _ in 0..draws.max(1) {
        let noise = tape.constant(draw_noise(&mut rng, gen.noise_dim()))?;
        let images = gen.generate(&mut tape, prompts, noise)?;
        let out = clf.classify(&mut tape, images)?;
        let l = loss_cls_rows(&mut tape, out.logits, bank.class_id)?;
        let m = tape.mean(l)?;
        cls += tape.scalar(m);
    }
    Ok(PromptProbe {
        cls_mean: cls / draws.max(1) as f64,
        mean_abs_cosine,
    })
}

/// Jointly updates all prompts of one class for `cfg.iters` Adam steps, each
/// step sharing one noise draw across prompts.
pub fn run_prompt_learning(
    bank: &PromptBank,
    gen: &dyn Generator,
    clf: &dyn Classifier,
    cfg: &PromptConfig,
) -> Result<(PromptBank, PromptReport)> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Invalid("prompt learning rate must be positive".into()));
    }
    if bank.class_id >= clf.classes() {
        return Err(Error::domain(format!(
            "class {} out of range for {} classes",
            bank.class_id,
            clf.classes()
        )));
    }
    let mut bank = bank.clone();
    let init = probe_bank(&bank, gen, clf, cfg.probe_draws, cfg.seed)?;
    let m = bank.prompts();
    let row_len = bank.token_count * bank.embed_dim;
    let frozen = if cfg.freeze_semantic { bank.semantic_count * bank.embed_dim } else { 0 };
    let mut adam = Adam::new(std::iter::repeat(row_len).take(m));
    let mut noise_rng = noise_rng(cfg.seed, bank.class_id, 0);
    let mut reinit_rng = noise_rng_for_reinit(cfg.seed, bank.class_id);
    let mut records = Vec::with_capacity(cfg.iters);
    let mut reinits = Vec::new();
    for iter in 0..cfg.iters {
        let mut tape = Tape::new();
        let prompts = tape.leaf(&bank.stacked().with_requires_grad(true))?;
        let noise = tape.constant(draw_noise(&mut noise_rng, gen.noise_dim()))?;
        let t = total_prompt_loss(&mut tape, prompts, noise, bank.class_id, gen, clf, &cfg.weights)?;
        let grads = tape.backward(t.total)?;
        let g = grads
            .get(prompts)
            .ok_or_else(|| Error::State("prompts received no gradient".into()))?
            .to_vec();
        adam.tick();
        for (i, gi) in g.chunks(row_len).enumerate() {
            let mut gi = gi.to_vec();
            gi[..frozen].fill(0.0);
            let e = bank.embedding_mut(i);
            let before: Vec<f64> = e.data()[..frozen].to_vec();
            adam.update(i, e.data_mut(), &gi, cfg.lr)?;
            e.data_mut()[..frozen].copy_from_slice(&before);
        }
        records.push(PromptRecord {
            iter,
            loss_cls_mean: tape.scalar(t.cls_mean),
            loss_orth: tape.scalar(t.orth),
            loss_var_rgb: tape.scalar(t.var_rgb),
            loss_var_feat: tape.scalar(t.var_feat),
            loss_var_attn: tape.scalar(t.var_attn),
        });
        if cfg.reinit_every > 0 && (iter + 1) % cfg.reinit_every == 0 {
            let losses = tape.value(t.cls).to_vec();
            let threshold = cfg.threshold_factor * median(&losses)?;
            let prefix: Vec<Vec<f64>> =
                bank.embeddings.iter().map(|e| e.data()[..frozen].to_vec()).collect();
            for r in reinit_drifted(&mut bank, &losses, threshold, &mut reinit_rng)? {
                adam.reset_slot(r.prompt);
                bank.embedding_mut(r.prompt).data_mut()[..frozen]
                    .copy_from_slice(&prefix[r.prompt]);
                reinits.push((iter, r));
            }
        }
    }
    let final_ = probe_bank(&bank, gen, clf, cfg.probe_draws, cfg.seed)?;
    let report = PromptReport {
        class_id: bank.class_id,
        records,
        reinits,
        init,
        final_,
    };
    Ok((bank, report))
}

fn noise_rng_for_reinit(seed: u64, class_id: usize) -> ChaCha8Rng {
    noise_rng(seed, class_id, 2)
}

/// Runs independent banks in parallel; results keep the input order.
pub fn run_banks(
    banks: &[PromptBank],
    gen: &dyn Generator,
    clf: &dyn Classifier,
    cfg: &PromptConfig,
) -> Result<Vec<(PromptBank, PromptReport)>> {
    parallel::map(banks, |b| run_prompt_learning(b, gen, clf, cfg))
        .into_iter()
        .collect()
}
