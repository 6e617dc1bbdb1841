//! Embedding models for ranking, their training losses, and checkpoints.
//!
//! A model maps flat images in [0,1]^d to an embedding vector; retrieval
//! compares embeddings under the model's metric. The forward pass never
//! normalizes outputs. Layout decisions are fixed: images are `[batch, d]`
//! row-major, linear weights are `[inputs, outputs]`, biases `[outputs]`.
//!
//! Training uses plain SGD over uniformly sampled triplets (or pairs for
//! the contrastive loss). Two RNG streams derive from the config seed: one
//! for parameter init, one for sampling; both are ChaCha-based, so runs
//! reproduce exactly across platforms.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::metrics::{paired_row_distances, Metric, MetricsError, RankingIndex};
use crate::tensor::{Tape, Tensor};

const CHECKPOINT_MAGIC: &[u8; 4] = b"ARNK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f32 },
    #[error("unusable training data: {0}")]
    BadTrainingData(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

// ── Architecture ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Fully connected net with relu between consecutive linear layers:
    /// `dims = [in, h1, ..., out]`.
    pub fn mlp(name: &str, dims: &[usize]) -> Architecture {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            if !layers.is_empty() {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Linear { inputs: w[0], outputs: w[1] });
        }
        Architecture { name: name.to_string(), layers }
    }

    /// Default 28x28 image embedder: 784 -> 256 -> relu -> 32.
    pub fn baseline() -> Architecture {
        Architecture::mlp("mlp-256", &[784, 256, 32])
    }

    /// Second architecture for cross-model evaluation:
    /// 784 -> 128 -> relu -> 64 -> relu -> 32.
    pub fn alternate() -> Architecture {
        Architecture::mlp("mlp-128-64", &[784, 128, 64, 32])
    }

    pub fn by_name(name: &str) -> Option<Architecture> {
        match name {
            "baseline" | "mlp-256" => Some(Self::baseline()),
            "alternate" | "mlp-128-64" => Some(Self::alternate()),
            _ => None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Linear { inputs, .. } => Some(*inputs),
                _ => None,
            })
            .expect("architecture has no linear layer")
    }

    pub fn embed_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Linear { outputs, .. } => Some(*outputs),
                _ => None,
            })
            .expect("architecture has no linear layer")
    }

    fn validate(&self) {
        let mut width = None;
        for l in &self.layers {
            if let LayerSpec::Linear { inputs, outputs } = l {
                assert!(*inputs > 0 && *outputs > 0, "zero-width linear layer");
                if let Some(w) = width {
                    assert_eq!(w, *inputs, "layer widths disagree: {w} feeds {inputs}");
                }
                width = Some(*outputs);
            }
        }
        assert!(width.is_some(), "architecture has no linear layer");
    }
}

// ── Model ───────────────────────────────────────────────────────────────

/// Provenance tag for adversarially trained checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DefenseTag {
    /// Triplets replaced by their maximum-shift counterparts during
    /// training, with the given inner perturbation budget.
    ShiftReplace { inner_epsilon: f32 },
    /// Clean triplet loss plus an embedding-shift penalty term.
    TripEs { inner_epsilon: f32 },
}

pub struct EmbeddingModel {
    arch: Architecture,
    metric: Metric,
    /// For each linear layer, weight `[in,out]` then bias `[out]`.
    params: Vec<Tensor>,
    defense: Option<DefenseTag>,
}

impl EmbeddingModel {
    /// He-style init: weights N(0, sqrt(2/in)), biases zero.
    pub fn init(arch: Architecture, metric: Metric, seed: u64) -> EmbeddingModel {
        arch.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in &arch.layers {
            if let LayerSpec::Linear { inputs, outputs } = l {
                let scale = (2.0 / *inputs as f32).sqrt();
                let w: Vec<f32> = (0..inputs * outputs).map(|_| gauss(&mut rng) * scale).collect();
                params.push(Tensor::from_vec(w, vec![*inputs, *outputs]));
                params.push(Tensor::zeros(vec![*outputs]));
            }
        }
        EmbeddingModel { arch, metric, params, defense: None }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn defense(&self) -> Option<DefenseTag> {
        self.defense
    }

    pub fn set_defense(&mut self, tag: DefenseTag) {
        self.defense = Some(tag);
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Replace all parameters. Shapes must match the architecture exactly;
    /// intended for hand-constructed models and weight surgery.
    pub fn set_params(&mut self, params: Vec<Tensor>) {
        assert_eq!(params.len(), self.params.len(), "set_params: parameter count");
        for (new, old) in params.iter().zip(&self.params) {
            assert_eq!(new.shape(), old.shape(), "set_params: parameter shape");
        }
        self.params = params;
    }

    /// Parameters re-registered as gradient sinks on `tape`, in the same
    /// order as [`Self::params`].
    pub fn tracked_params(&self, tape: &Tape) -> Vec<Tensor> {
        self.params.iter().map(|p| tape.leaf_from(p)).collect()
    }

    /// Forward pass with this model's stored (constant) parameters. The
    /// input may be tracked; gradients then flow to the input only.
    ///
    /// Panics if `x` is not `[batch, input_dim]`.
    pub fn embed(&self, x: &Tensor) -> Tensor {
        self.embed_with(&self.params, x)
    }

    /// Forward pass with caller-supplied parameter tensors (tracked for
    /// training, or constants). Shapes must match [`Self::params`].
    pub fn embed_with(&self, params: &[Tensor], x: &Tensor) -> Tensor {
        assert_eq!(
            x.shape().len(),
            2,
            "embed: input must be [batch, {}], got {:?}",
            self.input_dim(),
            x.shape()
        );
        assert_eq!(
            x.shape()[1],
            self.input_dim(),
            "embed: input must be [batch, {}], got {:?}",
            self.input_dim(),
            x.shape()
        );
        let mut h = x.clone();
        let mut li = 0;
        for l in &self.arch.layers {
            match l {
                LayerSpec::Linear { .. } => {
                    h = h.matmul(&params[li]).add(&params[li + 1]);
                    li += 2;
                }
                LayerSpec::Relu => h = h.relu(),
            }
        }
        h
    }

    /// Untracked batched forward over a flat `n x input_dim` slice.
    pub fn embed_slice(&self, images: &[f32]) -> Vec<f32> {
        let d = self.input_dim();
        assert_eq!(images.len() % d, 0, "embed_slice: {} not a multiple of {d}", images.len());
        let n = images.len() / d;
        let x = Tensor::from_vec(images.to_vec(), vec![n, d]);
        self.embed(&x).data().to_vec()
    }

    /// Ranking index over a corpus of images under this model's metric.
    pub fn index(&self, images: &[f32], labels: Option<Vec<u8>>) -> Result<RankingIndex, ModelError> {
        let emb = self.embed_slice(images);
        Ok(RankingIndex::from_embeddings(self.metric, emb, self.embed_dim(), labels)?)
    }

    /// One SGD step: `p -= lr * grad`, gradient order as [`Self::params`].
    /// Parameters without a gradient (unreached by the loss) stay put.
    pub fn apply_step(&mut self, tracked: &[Tensor], lr: f32) {
        assert_eq!(tracked.len(), self.params.len(), "apply_step: parameter count");
        for (p, t) in self.params.iter_mut().zip(tracked) {
            if let Some(g) = t.grad() {
                let data: Vec<f32> =
                    p.data().iter().zip(&g).map(|(&v, &gv)| v - lr * gv).collect();
                *p = Tensor::from_vec(data, p.shape().to_vec());
            }
        }
    }

    // ── Checkpoints ─────────────────────────────────────────────────────

    /// Serialize to the versioned binary checkpoint format. Round-trips
    /// bit-exactly.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    /// The checkpoint as bytes; `save` is this plus a file write. Also the
    /// way to hand a model to another thread (parameters are not Send).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_into(&mut w).expect("writing a checkpoint into memory cannot fail");
        w
    }

    fn write_into<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u8(match self.metric {
            Metric::Euclidean => 0,
            Metric::Cosine => 1,
        })?;
        let (dtag, deps) = match self.defense {
            None => (0u8, 0.0f32),
            Some(DefenseTag::ShiftReplace { inner_epsilon }) => (1, inner_epsilon),
            Some(DefenseTag::TripEs { inner_epsilon }) => (2, inner_epsilon),
        };
        w.write_u8(dtag)?;
        w.write_f32::<LittleEndian>(deps)?;
        write_str(&mut w, &self.arch.name)?;
        w.write_u32::<LittleEndian>(self.arch.layers.len() as u32)?;
        for l in &self.arch.layers {
            match l {
                LayerSpec::Linear { inputs, outputs } => {
                    w.write_u8(0)?;
                    w.write_u32::<LittleEndian>(*inputs as u32)?;
                    w.write_u32::<LittleEndian>(*outputs as u32)?;
                }
                LayerSpec::Relu => w.write_u8(1)?,
            }
        }
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (i, p) in self.params.iter().enumerate() {
            let name = format!("{}{}", if i % 2 == 0 { "w" } else { "b" }, i / 2);
            write_str(&mut w, &name)?;
            w.write_u32::<LittleEndian>(p.shape().len() as u32)?;
            for &d in p.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in p.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingModel, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingModel, ModelError> {
        let mut r = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| ModelError::BadMagic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let corrupt = |what: &str| ModelError::Corrupt(format!("{what} missing or short"));
        let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion { found: version });
        }
        let metric = match r.read_u8().map_err(|_| corrupt("metric"))? {
            0 => Metric::Euclidean,
            1 => Metric::Cosine,
            m => return Err(ModelError::Corrupt(format!("unknown metric tag {m}"))),
        };
        let dtag = r.read_u8().map_err(|_| corrupt("defense tag"))?;
        let deps = r.read_f32::<LittleEndian>().map_err(|_| corrupt("defense epsilon"))?;
        let defense = match dtag {
            0 => None,
            1 => Some(DefenseTag::ShiftReplace { inner_epsilon: deps }),
            2 => Some(DefenseTag::TripEs { inner_epsilon: deps }),
            t => return Err(ModelError::Corrupt(format!("unknown defense tag {t}"))),
        };
        let name = read_str(&mut r).map_err(|_| corrupt("architecture name"))?;
        let n_layers = r.read_u32::<LittleEndian>().map_err(|_| corrupt("layer count"))? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            match r.read_u8().map_err(|_| corrupt("layer tag"))? {
                0 => {
                    let inputs =
                        r.read_u32::<LittleEndian>().map_err(|_| corrupt("layer dims"))? as usize;
                    let outputs =
                        r.read_u32::<LittleEndian>().map_err(|_| corrupt("layer dims"))? as usize;
                    layers.push(LayerSpec::Linear { inputs, outputs });
                }
                1 => layers.push(LayerSpec::Relu),
                t => return Err(ModelError::Corrupt(format!("unknown layer tag {t}"))),
            }
        }
        let arch = Architecture { name, layers };
        let n_params = r.read_u32::<LittleEndian>().map_err(|_| corrupt("param count"))? as usize;
        let n_linear = arch
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Linear { .. }))
            .count();
        if n_params != 2 * n_linear {
            return Err(ModelError::Corrupt(format!(
                "{n_params} parameter arrays for {n_linear} linear layers"
            )));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let _pname = read_str(&mut r).map_err(|_| corrupt("param name"))?;
            let ndims = r.read_u32::<LittleEndian>().map_err(|_| corrupt("param shape"))? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape
                    .push(r.read_u32::<LittleEndian>().map_err(|_| corrupt("param shape"))? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = vec![0f32; count];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| corrupt("param data"))?;
            params.push(Tensor::from_vec(data, shape));
        }
        let model = EmbeddingModel { arch, metric, params, defense };
        model.check_param_shapes()?;
        Ok(model)
    }

    fn check_param_shapes(&self) -> Result<(), ModelError> {
        let mut i = 0;
        for l in &self.arch.layers {
            if let LayerSpec::Linear { inputs, outputs } = l {
                let w = &self.params[i];
                let b = &self.params[i + 1];
                if w.shape() != [*inputs, *outputs] || b.shape() != [*outputs] {
                    return Err(ModelError::Corrupt(format!(
                        "param shapes {:?}/{:?} do not fit linear {inputs}->{outputs}",
                        w.shape(),
                        b.shape()
                    )));
                }
                i += 2;
            }
        }
        Ok(())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "string too long"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "non-utf8 string"))
}

fn gauss<R: Rng>(rng: &mut R) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

// ── Losses ──────────────────────────────────────────────────────────────

/// `[margin + d_ap - d_an]_+` elementwise over paired distance vectors.
pub fn triplet_hinge(d_ap: &Tensor, d_an: &Tensor, margin: f32) -> Tensor {
    d_ap.sub(d_an).offset(margin).relu()
}

/// Contrastive terms over a batch of pair distances: `d^2/2` where the pair
/// shares a class, `[margin - d]_+^2 / 2` where it does not. `same_mask`
/// holds 1.0 for same-class pairs.
pub fn contrastive_terms(d: &Tensor, same_mask: &Tensor, margin: f32) -> Tensor {
    let pull = d.mul(d).scale(0.5).mul(same_mask);
    let hinge = d.scale(-1.0).offset(margin).relu();
    let push = hinge.mul(&hinge).scale(0.5).mul(&same_mask.scale(-1.0).offset(1.0));
    pull.add(&push)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Triplet { margin: f32 },
    Contrastive { margin: f32 },
}

impl LossKind {
    /// Margins that train well under each metric: triplet 0.2 (cosine) or
    /// 1.0 (euclidean); contrastive 1.0.
    pub fn triplet_for(metric: Metric) -> LossKind {
        LossKind::Triplet {
            margin: match metric {
                Metric::Cosine => 0.2,
                Metric::Euclidean => 1.0,
            },
        }
    }

    pub fn contrastive() -> LossKind {
        LossKind::Contrastive { margin: 1.0 }
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub metric: Metric,
    pub loss: LossKind,
    pub epochs: usize,
    /// Triplets (or pairs) per SGD step.
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(arch: Architecture, metric: Metric) -> TrainConfig {
        TrainConfig {
            arch,
            metric,
            loss: LossKind::triplet_for(metric),
            epochs: 4,
            batch: 32,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f32>,
}

/// Index of items per class, for positive/negative sampling.
pub(crate) struct ClassIndex {
    pub by_class: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn build(data: &Dataset) -> Result<ClassIndex, ModelError> {
        let mut by_class: Vec<Vec<usize>> = Vec::new();
        for (i, &l) in data.labels.iter().enumerate() {
            let l = l as usize;
            if by_class.len() <= l {
                by_class.resize(l + 1, Vec::new());
            }
            by_class[l].push(i);
        }
        let populated = by_class.iter().filter(|c| !c.is_empty()).count();
        if populated < 2 {
            return Err(ModelError::BadTrainingData(format!(
                "need at least 2 classes, found {populated}"
            )));
        }
        if !by_class.iter().any(|c| c.len() >= 2) {
            return Err(ModelError::BadTrainingData(
                "no class has 2 items; cannot form positive pairs".into(),
            ));
        }
        Ok(ClassIndex { by_class })
    }

    /// Uniform anchor, positive from the anchor's class, negative from any
    /// other class.
    pub fn sample_triplet<R: Rng>(&self, data: &Dataset, rng: &mut R) -> (usize, usize, usize) {
        loop {
            let a = rng.gen_range(0..data.len());
            let class = &self.by_class[data.labels[a] as usize];
            if class.len() < 2 {
                continue;
            }
            let p = loop {
                let p = class[rng.gen_range(0..class.len())];
                if p != a {
                    break p;
                }
            };
            let n = loop {
                let n = rng.gen_range(0..data.len());
                if data.labels[n] != data.labels[a] {
                    break n;
                }
            };
            return (a, p, n);
        }
    }
}

/// Gather dataset rows into a constant `[idx.len(), dim]` tensor.
pub(crate) fn gather_images(data: &Dataset, idx: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(idx.len() * data.dim);
    for &i in idx {
        out.extend_from_slice(data.image(i));
    }
    Tensor::from_vec(out, vec![idx.len(), data.dim])
}

/// Train an embedding model from scratch. Returns the model and per-epoch
/// loss history; errors if the loss turns non-finite.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(EmbeddingModel, TrainHistory), ModelError> {
    assert_eq!(data.dim, cfg.arch.input_dim(), "dataset dim vs architecture input");
    let mut model = EmbeddingModel::init(cfg.arch.clone(), cfg.metric, cfg.seed);
    let classes = ClassIndex::build(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5151_7e3a));
    let steps = (data.len() / cfg.batch).max(1);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        for _ in 0..steps {
            let loss = match cfg.loss {
                LossKind::Triplet { margin } => {
                    triplet_step(&mut model, data, &classes, cfg, margin, &mut rng)
                }
                LossKind::Contrastive { margin } => {
                    contrastive_step(&mut model, data, &classes, cfg, margin, &mut rng)
                }
            };
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, loss });
            }
            epoch_loss += loss as f64;
        }
        history.epoch_loss.push((epoch_loss / steps as f64) as f32);
    }
    Ok((model, history))
}

fn triplet_step(
    model: &mut EmbeddingModel,
    data: &Dataset,
    classes: &ClassIndex,
    cfg: &TrainConfig,
    margin: f32,
    rng: &mut ChaCha8Rng,
) -> f32 {
    let b = cfg.batch;
    let mut idx = Vec::with_capacity(3 * b);
    for _ in 0..b {
        let (a, p, n) = classes.sample_triplet(data, rng);
        idx.push(a);
        idx.push(p);
        idx.push(n);
    }
    // interleaved [a0,p0,n0,a1,...] -> strided selects
    let anchors: Vec<usize> = (0..b).map(|i| 3 * i).collect();
    let positives: Vec<usize> = (0..b).map(|i| 3 * i + 1).collect();
    let negatives: Vec<usize> = (0..b).map(|i| 3 * i + 2).collect();

    let tape = Tape::new();
    let tracked = model.tracked_params(&tape);
    let images = gather_images(data, &idx);
    let emb = model.embed_with(&tracked, &images);
    let a = emb.select_rows(&anchors);
    let p = emb.select_rows(&positives);
    let n = emb.select_rows(&negatives);
    let d_ap = paired_row_distances(cfg.metric, &a, &p);
    let d_an = paired_row_distances(cfg.metric, &a, &n);
    let loss = triplet_hinge(&d_ap, &d_an, margin).mean();
    let value = loss.item();
    if value.is_finite() {
        loss.backward();
        model.apply_step(&tracked, cfg.lr);
    }
    value
}

fn contrastive_step(
    model: &mut EmbeddingModel,
    data: &Dataset,
    classes: &ClassIndex,
    cfg: &TrainConfig,
    margin: f32,
    rng: &mut ChaCha8Rng,
) -> f32 {
    let b = cfg.batch;
    let mut idx = Vec::with_capacity(2 * b);
    let mut mask = Vec::with_capacity(b);
    for _ in 0..b {
        let (a, p, n) = classes.sample_triplet(data, rng);
        let same = rng.gen_bool(0.5);
        idx.push(a);
        idx.push(if same { p } else { n });
        mask.push(if same { 1.0 } else { 0.0 });
    }
    let lefts: Vec<usize> = (0..b).map(|i| 2 * i).collect();
    let rights: Vec<usize> = (0..b).map(|i| 2 * i + 1).collect();

    let tape = Tape::new();
    let tracked = model.tracked_params(&tape);
    let images = gather_images(data, &idx);
    let emb = model.embed_with(&tracked, &images);
    let l = emb.select_rows(&lefts);
    let r = emb.select_rows(&rights);
    let d = paired_row_distances(cfg.metric, &l, &r);
    let same_mask = Tensor::from_vec(mask, vec![b]);
    let loss = contrastive_terms(&d, &same_mask, margin).mean();
    let value = loss.item();
    if value.is_finite() {
        loss.backward();
        model.apply_step(&tracked, cfg.lr);
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::metrics::recall_at_1;

    #[test]
    fn triplet_hinge_hand_values() {
        // margin 1.0, d_ap 0.5, d_an 0.3 -> 1.2; far negative -> 0
        let d_ap = Tensor::from_vec(vec![0.5, 0.5], vec![2]);
        let d_an = Tensor::from_vec(vec![0.3, 2.0], vec![2]);
        let h = triplet_hinge(&d_ap, &d_an, 1.0);
        assert!((h.data()[0] - 1.2).abs() < 1e-6);
        assert_eq!(h.data()[1], 0.0);
    }

    #[test]
    fn contrastive_hand_values() {
        // same pair at d=0.4: 0.08; different pair at d=0.4, margin 1: 0.18
        let d = Tensor::from_vec(vec![0.4, 0.4], vec![2]);
        let mask = Tensor::from_vec(vec![1.0, 0.0], vec![2]);
        let t = contrastive_terms(&d, &mask, 1.0);
        assert!((t.data()[0] - 0.08).abs() < 1e-6);
        assert!((t.data()[1] - 0.18).abs() < 1e-6);
    }

    #[test]
    fn architecture_dims() {
        let a = Architecture::baseline();
        assert_eq!(a.input_dim(), 784);
        assert_eq!(a.embed_dim(), 32);
        assert_eq!(a.layers.len(), 3);
        let b = Architecture::alternate();
        assert_eq!(b.layers.len(), 5);
        assert_eq!(b.embed_dim(), 32);
    }

    #[test]
    #[should_panic(expected = "input must be [batch, 4]")]
    fn embed_rejects_wrong_width() {
        let m = EmbeddingModel::init(Architecture::mlp("t", &[4, 3]), Metric::Euclidean, 0);
        let bad = Tensor::zeros(vec![2, 5]);
        m.embed(&bad);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = EmbeddingModel::init(Architecture::baseline(), Metric::Cosine, 3);
        let b = EmbeddingModel::init(Architecture::baseline(), Metric::Cosine, 3);
        let c = EmbeddingModel::init(Architecture::baseline(), Metric::Cosine, 4);
        assert_eq!(a.params()[0].data(), b.params()[0].data());
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    fn tiny_dataset() -> Dataset {
        make_synthetic(&SyntheticSpec { classes: 3, per_class: 40, dim: 12, std: 0.05, seed: 5 })
    }

    #[test]
    fn training_learns_synthetic_clusters() {
        let data = tiny_dataset();
        let mut cfg = TrainConfig::new(Architecture::mlp("t", &[12, 16, 8]), Metric::Euclidean);
        cfg.epochs = 8;
        cfg.seed = 11;
        let (model, hist) = train(&data, &cfg).unwrap();
        assert_eq!(hist.epoch_loss.len(), 8);
        assert!(
            hist.epoch_loss.last().unwrap() < &hist.epoch_loss[0],
            "loss should fall: {:?}",
            hist.epoch_loss
        );
        let index = model.index(&data.images, Some(data.labels.clone())).unwrap();
        let r = recall_at_1(&index).unwrap();
        assert!(r > 0.95, "synthetic clusters should be easy: r@1 = {r}");
    }

    #[test]
    fn contrastive_training_also_learns() {
        let data = tiny_dataset();
        let mut cfg = TrainConfig::new(Architecture::mlp("t", &[12, 16, 8]), Metric::Euclidean);
        cfg.loss = LossKind::contrastive();
        cfg.epochs = 8;
        let (model, _) = train(&data, &cfg).unwrap();
        let index = model.index(&data.images, Some(data.labels.clone())).unwrap();
        let r = recall_at_1(&index).unwrap();
        assert!(r > 0.9, "r@1 = {r}");
    }

    #[test]
    fn cosine_training_works() {
        let data = tiny_dataset();
        let mut cfg = TrainConfig::new(Architecture::mlp("t", &[12, 16, 8]), Metric::Cosine);
        cfg.epochs = 8;
        let (model, _) = train(&data, &cfg).unwrap();
        let index = model.index(&data.images, Some(data.labels.clone())).unwrap();
        let r = recall_at_1(&index).unwrap();
        assert!(r > 0.9, "r@1 = {r}");
    }

    #[test]
    fn train_is_deterministic() {
        let data = tiny_dataset();
        let mut cfg = TrainConfig::new(Architecture::mlp("t", &[12, 8, 4]), Metric::Euclidean);
        cfg.epochs = 2;
        let (m1, h1) = train(&data, &cfg).unwrap();
        let (m2, h2) = train(&data, &cfg).unwrap();
        assert_eq!(h1.epoch_loss, h2.epoch_loss);
        for (a, b) in m1.params().iter().zip(m2.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let data = tiny_dataset();
        let mut cfg = TrainConfig::new(Architecture::mlp("rt", &[12, 8, 4]), Metric::Cosine);
        cfg.epochs = 1;
        let (mut model, _) = train(&data, &cfg).unwrap();
        model.set_defense(DefenseTag::ShiftReplace { inner_epsilon: 0.3 });
        model.save(&path).unwrap();
        let loaded = EmbeddingModel::load(&path).unwrap();
        assert_eq!(loaded.arch(), model.arch());
        assert_eq!(loaded.metric(), model.metric());
        assert_eq!(loaded.defense(), model.defense());
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameters must round-trip bit-exactly");
        }
        // and the file itself is stable under save-load-save
        let path2 = dir.path().join("model2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let model = EmbeddingModel::init(Architecture::mlp("t", &[4, 2]), Metric::Euclidean, 0);
        model.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(EmbeddingModel::load(&path), Err(ModelError::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            EmbeddingModel::load(&path),
            Err(ModelError::UnsupportedVersion { found: 99 })
        ));

        std::fs::write(&path, &good[..good.len() - 7]).unwrap();
        assert!(matches!(EmbeddingModel::load(&path), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn training_rejects_single_class_data() {
        let mut data = tiny_dataset();
        data.labels.iter_mut().for_each(|l| *l = 0);
        let cfg = TrainConfig::new(Architecture::mlp("t", &[12, 4]), Metric::Euclidean);
        assert!(matches!(train(&data, &cfg), Err(ModelError::BadTrainingData(_))));
    }
}
