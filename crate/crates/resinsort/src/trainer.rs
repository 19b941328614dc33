//! Training loops for the Siamese and triplet networks, loss-history
//! logging, and checkpoint serialization.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_image, sample_pairs, sample_triplets, DatasetManifest, PairSample, Split, TripletSample,
};
use crate::error::{Error, Result};
use crate::nets::{
    siamese_loss, sigmoid, triplet_loss, SiameseModel, TripletModel, Trunk, TrunkConfig,
};
use crate::tensor::{fc_backward, fc_forward, l1_distance, MomentumState, Tensor};

/// Batch items are reduced in fixed-size chunks so the floating-point
/// summation order does not depend on the worker count.
const GRAD_CHUNK: usize = 5;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RSRT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Siamese,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Mini,
}

impl Profile {
    pub fn input_side(self) -> usize {
        match self {
            Profile::Full => 105,
            Profile::Mini => 32,
        }
    }

    /// Trunk for this profile and network kind. Full profiles use wide
    /// embeddings (4096 Siamese, 128 triplet); mini profiles shrink them
    /// to 64 and 32.
    pub fn trunk_config(self, kind: NetKind) -> TrunkConfig {
        match (self, kind) {
            (Profile::Full, NetKind::Siamese) => TrunkConfig::full(4096),
            (Profile::Full, NetKind::Triplet) => TrunkConfig::full(128),
            (Profile::Mini, NetKind::Siamese) => TrunkConfig::mini(64),
            (Profile::Mini, NetKind::Triplet) => TrunkConfig::mini(32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: NetKind,
    pub profile: Profile,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub margin: f64,
    pub seed: u64,
    /// Size of the fixed validation sample set, drawn once.
    pub val_samples: usize,
}

impl TrainConfig {
    pub fn siamese_defaults() -> Self {
        TrainConfig {
            kind: NetKind::Siamese,
            profile: Profile::Full,
            epochs: 50,
            samples_per_epoch: 5000,
            batch_size: 50,
            learning_rate: 0.001,
            momentum: 0.9,
            margin: 0.4,
            seed: 0,
            val_samples: 1000,
        }
    }

    pub fn triplet_defaults() -> Self {
        TrainConfig {
            kind: NetKind::Triplet,
            epochs: 100,
            ..Self::siamese_defaults()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Data(
                "epochs, samples, and batch size must be positive".into(),
            ));
        }
        if self.batch_size > self.samples_per_epoch {
            return Err(Error::Data("batch size exceeds samples per epoch".into()));
        }
        if !self.samples_per_epoch.is_multiple_of(self.batch_size) {
            return Err(Error::Data(format!(
                "samples_per_epoch {} must be a multiple of batch_size {}",
                self.samples_per_epoch, self.batch_size
            )));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Data("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Either trained network behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Siamese(SiameseModel),
    Triplet(TripletModel),
}

impl Model {
    pub fn kind(&self) -> NetKind {
        match self {
            Model::Siamese(_) => NetKind::Siamese,
            Model::Triplet(_) => NetKind::Triplet,
        }
    }

    pub fn trunk(&self) -> &Trunk {
        match self {
            Model::Siamese(m) => &m.trunk,
            Model::Triplet(m) => &m.trunk,
        }
    }

    pub fn input_side(&self) -> usize {
        self.trunk().input_shape()[0]
    }

    /// Trunk embedding of one preprocessed image.
    pub fn embed(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.trunk().embed(x)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Siamese(m) => m.params(),
            Model::Triplet(m) => m.trunk.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Siamese(m) => m.params_mut(),
            Model::Triplet(m) => m.trunk.params_mut(),
        }
    }

    /// Concatenated parameter bytes, used for cheap equality checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params() {
            for v in p.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Per-epoch mean training and validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    /// Total optimizer steps taken.
    pub updates: usize,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train.iter().zip(&self.val).enumerate() {
            out.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        out
    }
}

enum SampleSet {
    Pairs(Vec<PairSample>),
    Triplets(Vec<TripletSample>),
}

impl SampleSet {
    fn len(&self) -> usize {
        match self {
            SampleSet::Pairs(p) => p.len(),
            SampleSet::Triplets(t) => t.len(),
        }
    }
}

pub(crate) struct ImageStore {
    pub(crate) images: Vec<Option<Tensor>>,
}

impl ImageStore {
    pub(crate) fn preload(
        root: &Path,
        manifest: &DatasetManifest,
        target: usize,
        splits: &[Split],
    ) -> Result<Self> {
        let loaded: Vec<Option<Tensor>> = manifest
            .records
            .par_iter()
            .map(|r| {
                if splits.contains(&r.split) {
                    load_image(root, r, target, &manifest.stats).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(ImageStore { images: loaded })
    }

    pub(crate) fn get(&self, idx: usize) -> &Tensor {
        self.images[idx]
            .as_ref()
            .expect("image preloaded for its split")
    }
}

/// Loss and parameter gradients of one Siamese pair. Gradient order matches
/// `SiameseModel::params` (trunk tensors, then head weights and bias).
fn siamese_item(
    model: &SiameseModel,
    x1: &Tensor,
    x2: &Tensor,
    y: u8,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let (e1, c1) = model.trunk.forward(x1)?;
    let (e2, c2) = model.trunk.forward(x2)?;
    let d = Tensor::from_vec(l1_distance(e1.values(), e2.values())?);
    let logit = fc_forward(&d, &model.head)?.values()[0];
    let p = sigmoid(logit);
    let target = 1.0 - f64::from(y);
    let loss = siamese_loss(p, y);
    if !with_grads {
        return Ok((loss, None));
    }
    // Sigmoid + cross-entropy collapse to (p - target) at the logit.
    let dlogit = p - target;
    let (gd, gw, gb) = fc_backward(&d, &model.head, &Tensor::from_vec(vec![dlogit]))?;
    let mut ge1 = vec![0.0; e1.len()];
    let mut ge2 = vec![0.0; e2.len()];
    for (i, g) in gd.values().iter().enumerate() {
        let s = (e1.values()[i] - e2.values()[i]).signum();
        let s = if e1.values()[i] == e2.values()[i] {
            0.0
        } else {
            s
        };
        ge1[i] = g * s;
        ge2[i] = -g * s;
    }
    let (_, gp1) = model.trunk.backward(&c1, &Tensor::from_vec(ge1))?;
    let (_, gp2) = model.trunk.backward(&c2, &Tensor::from_vec(ge2))?;
    let mut grads: Vec<Tensor> = gp1
        .into_iter()
        .zip(gp2)
        .map(|(mut a, b)| {
            for (av, bv) in a.values_mut().iter_mut().zip(b.values()) {
                *av += bv;
            }
            a
        })
        .collect();
    grads.push(gw);
    grads.push(gb);
    Ok((loss, Some(grads)))
}

/// Loss and trunk gradients of one triplet. An inactive hinge contributes no
/// gradient and is returned as `None`.
fn triplet_item(
    model: &TripletModel,
    xa: &Tensor,
    xp: &Tensor,
    xn: &Tensor,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let (fa, ca) = model.trunk.forward(xa)?;
    let (fp, cp) = model.trunk.forward(xp)?;
    let (fneg, cn) = model.trunk.forward(xn)?;
    let loss = triplet_loss(fa.values(), fp.values(), fneg.values(), model.margin)?;
    if !with_grads || loss == 0.0 {
        return Ok((loss, None));
    }
    let k = fa.len();
    let mut ga = vec![0.0; k];
    let mut gp = vec![0.0; k];
    let mut gn = vec![0.0; k];
    for i in 0..k {
        let (a, p, n) = (fa.values()[i], fp.values()[i], fneg.values()[i]);
        ga[i] = 2.0 * (n - p);
        gp[i] = -2.0 * (a - p);
        gn[i] = 2.0 * (a - n);
    }
    let (_, g1) = model.trunk.backward(&ca, &Tensor::from_vec(ga))?;
    let (_, g2) = model.trunk.backward(&cp, &Tensor::from_vec(gp))?;
    let (_, g3) = model.trunk.backward(&cn, &Tensor::from_vec(gn))?;
    let grads = g1
        .into_iter()
        .zip(g2)
        .zip(g3)
        .map(|((mut a, b), c)| {
            for ((av, bv), cv) in a.values_mut().iter_mut().zip(b.values()).zip(c.values()) {
                *av += bv + cv;
            }
            a
        })
        .collect();
    Ok((loss, Some(grads)))
}

fn add_grads(acc: &mut Option<Vec<Tensor>>, item: Option<Vec<Tensor>>) {
    match (acc.as_mut(), item) {
        (_, None) => {}
        (None, Some(g)) => *acc = Some(g),
        (Some(a), Some(g)) => {
            for (at, gt) in a.iter_mut().zip(g) {
                for (av, gv) in at.values_mut().iter_mut().zip(gt.values()) {
                    *av += gv;
                }
            }
        }
    }
}

fn eval_item(
    model: &Model,
    store: &ImageStore,
    set: &SampleSet,
    idx: usize,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    match (model, set) {
        (Model::Siamese(m), SampleSet::Pairs(pairs)) => {
            let p = &pairs[idx];
            siamese_item(m, store.get(p.first), store.get(p.second), p.y, with_grads)
        }
        (Model::Triplet(m), SampleSet::Triplets(trips)) => {
            let t = &trips[idx];
            triplet_item(
                m,
                store.get(t.anchor),
                store.get(t.positive),
                store.get(t.negative),
                with_grads,
            )
        }
        _ => Err(Error::Data("sample set does not match network kind".into())),
    }
}

/// Mean loss and mean gradients over one batch, reduced in fixed chunk order
/// for bit reproducibility.
fn batch_pass(
    model: &Model,
    store: &ImageStore,
    set: &SampleSet,
    batch: &[usize],
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let chunk_results: Vec<(f64, Option<Vec<Tensor>>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss_sum = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for &idx in chunk {
                let (loss, g) = eval_item(model, store, set, idx, with_grads)?;
                loss_sum += loss;
                add_grads(&mut grads, g);
            }
            Ok((loss_sum, grads))
        })
        .collect::<Result<_>>()?;
    let mut loss_sum = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for (l, g) in chunk_results {
        loss_sum += l;
        add_grads(&mut grads, g);
    }
    let scale = 1.0 / batch.len() as f64;
    if let Some(gs) = &mut grads {
        for g in gs {
            g.values_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok((loss_sum * scale, grads))
}

/// Runs the full training loop: fresh pair/triplet samples each epoch, one
/// optimizer step per batch, and a fixed seeded validation set evaluated
/// forward-only after every epoch.
pub fn train(
    cfg: &TrainConfig,
    root: &Path,
    manifest: &DatasetManifest,
) -> Result<(Model, LossHistory)> {
    cfg.validate()?;
    let train_classes = manifest
        .split_by_class(Split::Train)
        .iter()
        .filter(|c| !c.is_empty())
        .count();
    if train_classes < 2 {
        return Err(Error::Data(
            "training needs at least two classes in the training split".into(),
        ));
    }
    let target = cfg.profile.input_side();
    let store = ImageStore::preload(root, manifest, target, &[Split::Train, Split::Val])?;

    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = match cfg.kind {
        NetKind::Siamese => Model::Siamese(SiameseModel::init(
            cfg.profile.trunk_config(NetKind::Siamese),
            &mut model_rng,
        )?),
        NetKind::Triplet => Model::Triplet(TripletModel::init(
            cfg.profile.trunk_config(NetKind::Triplet),
            cfg.margin,
            &mut model_rng,
        )?),
    };

    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x3C6E_F372_FE94_F82A));
    let val_set = draw_samples(
        cfg.kind,
        manifest,
        Split::Val,
        cfg.val_samples,
        &mut val_rng,
    )?;

    let param_sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut optimizer = MomentumState::new(cfg.learning_rate, cfg.momentum, &param_sizes)?;

    let mut history = LossHistory {
        train: Vec::with_capacity(cfg.epochs),
        val: Vec::with_capacity(cfg.epochs),
        updates: 0,
    };
    for epoch in 0..cfg.epochs {
        let samples = draw_samples(
            cfg.kind,
            manifest,
            Split::Train,
            cfg.samples_per_epoch,
            &mut sample_rng,
        )?;
        let indices: Vec<usize> = (0..samples.len()).collect();
        let mut epoch_loss = 0.0;
        let batches = indices.chunks(cfg.batch_size);
        let num_batches = cfg.samples_per_epoch / cfg.batch_size;
        for (bi, batch) in batches.enumerate() {
            let (loss, grads) = batch_pass(&model, &store, &samples, batch, true)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {} batch {}",
                    epoch + 1,
                    bi + 1
                )));
            }
            epoch_loss += loss;
            let zero: Vec<Tensor>;
            let grads = match grads {
                Some(g) => g,
                None => {
                    zero = model
                        .params()
                        .iter()
                        .map(|p| Tensor::zeros(p.shape().to_vec()))
                        .collect();
                    zero
                }
            };
            optimizer.step(&mut model.params_mut(), &grads)?;
            history.updates += 1;
        }
        let train_loss = epoch_loss / num_batches as f64;
        let val_loss = validation_loss(&model, &store, &val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss after epoch {}",
                epoch + 1
            )));
        }
        log::info!(
            "epoch {}/{}: train loss {train_loss:.6}, val loss {val_loss:.6}",
            epoch + 1,
            cfg.epochs
        );
        history.train.push(train_loss);
        history.val.push(val_loss);
    }
    Ok((model, history))
}

fn draw_samples(
    kind: NetKind,
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleSet> {
    Ok(match kind {
        NetKind::Siamese => SampleSet::Pairs(sample_pairs(manifest, split, n, 0.5, rng)?),
        NetKind::Triplet => SampleSet::Triplets(sample_triplets(manifest, split, n, rng)?),
    })
}

/// Mean loss over the fixed validation set; no gradients, no updates.
fn validation_loss(model: &Model, store: &ImageStore, set: &SampleSet) -> Result<f64> {
    let losses: Vec<f64> = (0..set.len())
        .into_par_iter()
        .map(|i| eval_item(model, store, set, i, false).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: NetKind,
    trunk: TrunkConfig,
    margin: Option<f64>,
    /// Output width of the Siamese head, when present.
    head: Option<usize>,
}

/// Serializes a model: magic `RSRT1`, u32 little-endian JSON header length,
/// the JSON header, then each parameter tensor as raw little-endian f64 in
/// declaration order.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let header = match model {
        Model::Siamese(m) => CheckpointHeader {
            kind: NetKind::Siamese,
            trunk: m.trunk.config().clone(),
            margin: None,
            head: Some(m.head.out_features()),
        },
        Model::Triplet(m) => CheckpointHeader {
            kind: NetKind::Triplet,
            trunk: m.trunk.config().clone(),
            margin: Some(m.margin),
            head: None,
        },
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&model.param_bytes());
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(Error::Data("truncated payload".into()));
    }
    if &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Data("bad checkpoint magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + header_len {
        return Err(Error::Data("truncated payload".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[9..9 + header_len])
        .map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;
    let mut model = match header.kind {
        NetKind::Siamese => {
            let m = SiameseModel::zeroed(header.trunk)?;
            if header.head != Some(m.head.out_features()) {
                return Err(Error::Data(
                    "checkpoint head shape disagrees with trunk".into(),
                ));
            }
            Model::Siamese(m)
        }
        NetKind::Triplet => Model::Triplet(TripletModel::zeroed(
            header.trunk,
            header.margin.unwrap_or(0.4),
        )?),
    };
    let mut cursor = 9 + header_len;
    for param in model.params_mut() {
        for v in param.values_mut() {
            let end = cursor + 8;
            if end > bytes.len() {
                return Err(Error::Data("truncated payload".into()));
            }
            *v = f64::from_le_bytes(bytes[cursor..end].try_into().unwrap());
            cursor = end;
        }
    }
    if cursor != bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - cursor
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    model_from_bytes(&bytes)
}
