//! Frozen backbone with adapter attachment points, the prototype classifier,
//! the three-term training loss and its analytic gradients.
//!
//! Layers are `z = W h + b` with `W` of shape `out × in`, so an adapter on a
//! layer has `A: out × r` and `B: r × in`. The nonlinearity sits between
//! layers; the last layer is linear and its output is the feature vector.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::{push_floats, push_line, LineReader};
use crate::datagen::LabeledSample;
use crate::error::{Error, Result};
use crate::lora::{ortho_reg, ortho_reg_grad, LedgerMode, LoraLedger};
use crate::numkit::{gaussian_matrix, sq_dist, Matrix, RngStream, Vector};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!(
                "activation: expected tanh or identity, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Matrix,
    pub bias: Vector,
}

/// Fixed affine stack. Attachment points are layer indices whose weight an
/// adapter ledger modifies additively.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    layers: Vec<AffineLayer>,
    activation: Activation,
    attachments: BTreeSet<usize>,
}

impl FrozenBackbone {
    pub fn new(
        layers: Vec<AffineLayer>,
        activation: Activation,
        attachments: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty { op: "backbone" });
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.dim() != l.weight.rows() {
                return Err(Error::Dim {
                    op: "backbone bias",
                    left: l.weight.rows(),
                    right: l.bias.dim(),
                });
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::Shape {
                    op: "backbone chain",
                    left: layers[i - 1].weight.shape(),
                    right: l.weight.shape(),
                });
            }
        }
        let attachments: BTreeSet<usize> = attachments.into_iter().collect();
        if let Some(&bad) = attachments.iter().find(|&&a| a >= layers.len()) {
            return Err(Error::InvalidArgument(format!(
                "attachment layer {bad} does not exist (backbone has {} layers)",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            activation,
            attachments,
        })
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, small Gaussian biases.
    pub fn random(
        input_dim: usize,
        feature_dim: usize,
        depth: usize,
        activation: Activation,
        attachments: impl IntoIterator<Item = usize>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if depth == 0 || input_dim == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "backbone needs depth, input_dim and feature_dim >= 1".into(),
            ));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut fan_in = input_dim;
        for _ in 0..depth {
            let weight =
                gaussian_matrix(feature_dim, fan_in, 0.0, 1.0 / (fan_in as f64).sqrt(), rng)?;
            let bias = Vector(
                gaussian_matrix(1, feature_dim, 0.0, 0.1, rng)?.into_vec(),
            );
            layers.push(AffineLayer { weight, bias });
            fan_in = feature_dim;
        }
        Self::new(layers, activation, attachments)
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn attachments(&self) -> &BTreeSet<usize> {
        &self.attachments
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    /// `(out, in)` of the projection at `layer`.
    pub fn projection_shape(&self, layer: usize) -> Option<(usize, usize)> {
        self.layers.get(layer).map(|l| l.weight.shape())
    }

    /// Plain forward pass with no adapters.
    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        forward_features(self, &BTreeMap::new(), LedgerMode::Sum, x)
    }

    /// Copy with each attached layer's weight replaced by `W + ΔW` and no attachments.
    pub fn materialize(
        &self,
        ledgers: &BTreeMap<usize, LoraLedger>,
        mode: LedgerMode,
    ) -> Result<FrozenBackbone> {
        let mut layers = self.layers.clone();
        for (&at, ledger) in ledgers {
            let layer = layers.get_mut(at).ok_or_else(|| {
                Error::InvalidArgument(format!("ledger attached to missing layer {at}"))
            })?;
            layer.weight.add_assign(&ledger.delta(mode))?;
        }
        FrozenBackbone::new(layers, self.activation, [])
    }
}

/// Per-layer cache of the forward pass used by backprop.
struct ForwardTrace {
    /// Input to each layer (`h_{l-1}`), plus the final output at the end.
    inputs: Vec<Vec<f64>>,
    /// Low-rank intermediates `B h` per attached layer (summed `B` or per stage).
    low_rank: BTreeMap<usize, Vec<Vec<f64>>>,
}

/// Precomputed adapter factors for one attachment.
struct AdapterView {
    mode: LedgerMode,
    /// Sum mode: one pair (ΣA, ΣB). Concat mode: one pair per stage.
    /// Active-only: the active pair.
    pairs: Vec<(Matrix, Matrix)>,
}

impl AdapterView {
    fn new(ledger: &LoraLedger, mode: LedgerMode) -> Self {
        let pairs = match mode {
            LedgerMode::Sum => vec![(ledger.summed_a(), ledger.summed_b())],
            LedgerMode::Concat => ledger
                .stages()
                .map(|ad| (ad.a.clone(), ad.b.clone()))
                .collect(),
            LedgerMode::ActiveOnly => {
                vec![(ledger.active().a.clone(), ledger.active().b.clone())]
            }
        };
        Self { mode, pairs }
    }

    /// Index in `pairs` whose factors are the active stage's (for gradients).
    fn active_pair(&self) -> usize {
        match self.mode {
            LedgerMode::Sum | LedgerMode::ActiveOnly => 0,
            LedgerMode::Concat => self.pairs.len() - 1,
        }
    }
}

fn adapter_views(
    backbone: &FrozenBackbone,
    ledgers: &BTreeMap<usize, LoraLedger>,
    mode: LedgerMode,
) -> Result<BTreeMap<usize, AdapterView>> {
    let mut views = BTreeMap::new();
    for (&at, ledger) in ledgers {
        let Some((out, inp)) = backbone.projection_shape(at) else {
            return Err(Error::InvalidArgument(format!(
                "ledger attached to missing layer {at}"
            )));
        };
        let ad = ledger.active();
        if (ad.d(), ad.k()) != (out, inp) {
            return Err(Error::Shape {
                op: "ledger vs layer",
                left: (out, inp),
                right: (ad.d(), ad.k()),
            });
        }
        views.insert(at, AdapterView::new(ledger, mode));
    }
    Ok(views)
}

fn forward_traced(
    backbone: &FrozenBackbone,
    views: &BTreeMap<usize, AdapterView>,
    x: &[f64],
) -> Result<ForwardTrace> {
    if x.len() != backbone.input_dim() {
        return Err(Error::Dim {
            op: "forward input",
            left: backbone.input_dim(),
            right: x.len(),
        });
    }
    let last = backbone.layers.len() - 1;
    let mut inputs = Vec::with_capacity(backbone.layers.len() + 1);
    let mut low_rank = BTreeMap::new();
    let mut h = x.to_vec();
    for (l, layer) in backbone.layers.iter().enumerate() {
        let mut z = layer.weight.matvec(&h)?;
        if let Some(view) = views.get(&l) {
            let mut us = Vec::with_capacity(view.pairs.len());
            for (a, b) in &view.pairs {
                let u = b.matvec(&h)?;
                for (zi, v) in z.iter_mut().zip(a.matvec(&u)?) {
                    *zi += v;
                }
                us.push(u);
            }
            low_rank.insert(l, us);
        }
        for (zi, bi) in z.iter_mut().zip(layer.bias.iter()) {
            *zi += bi;
        }
        if l != last {
            for zi in z.iter_mut() {
                *zi = backbone.activation.apply(*zi);
            }
        }
        inputs.push(std::mem::replace(&mut h, z));
    }
    inputs.push(h);
    Ok(ForwardTrace { inputs, low_rank })
}

/// Feature vector with every attached layer using `W + ΔW(ledger)`.
pub fn forward_features(
    backbone: &FrozenBackbone,
    ledgers: &BTreeMap<usize, LoraLedger>,
    mode: LedgerMode,
    x: &[f64],
) -> Result<Vector> {
    let views = adapter_views(backbone, ledgers, mode)?;
    let mut trace = forward_traced(backbone, &views, x)?;
    Ok(Vector(trace.inputs.pop().expect("output present")))
}

/// One prototype per class; the classifier.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeSet {
    dim: usize,
    prototypes: BTreeMap<ClassId, Vector>,
    trainable: BTreeSet<ClassId>,
}

impl PrototypeSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            prototypes: BTreeMap::new(),
            trainable: BTreeSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.prototypes.keys().copied()
    }

    pub fn get(&self, class: ClassId) -> Result<&Vector> {
        self.prototypes
            .get(&class)
            .ok_or(Error::MissingPrototype(class))
    }

    pub fn get_mut(&mut self, class: ClassId) -> Result<&mut Vector> {
        self.prototypes
            .get_mut(&class)
            .ok_or(Error::MissingPrototype(class))
    }

    pub fn insert(&mut self, class: ClassId, proto: Vector, trainable: bool) -> Result<()> {
        if proto.dim() != self.dim {
            return Err(Error::Dim {
                op: "prototype",
                left: self.dim,
                right: proto.dim(),
            });
        }
        self.prototypes.insert(class, proto);
        if trainable {
            self.trainable.insert(class);
        } else {
            self.trainable.remove(&class);
        }
        Ok(())
    }

    pub fn set(&mut self, class: ClassId, proto: Vector) -> Result<()> {
        if proto.dim() != self.dim {
            return Err(Error::Dim {
                op: "prototype",
                left: self.dim,
                right: proto.dim(),
            });
        }
        *self.get_mut(class)? = proto;
        Ok(())
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.prototypes.contains_key(&class)
    }

    pub fn is_trainable(&self, class: ClassId) -> bool {
        self.trainable.contains(&class)
    }

    pub fn trainable(&self) -> &BTreeSet<ClassId> {
        &self.trainable
    }

    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &Vector)> {
        self.prototypes.iter().map(|(c, v)| (*c, v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// DCE temperature.
    pub delta: f64,
    /// Weight of the prototype-compactness term.
    pub lambda: f64,
    /// Weight of the orthogonality term.
    pub gamma: f64,
    /// Re-weight softmax temperature.
    pub eta: f64,
    pub rank: usize,
    pub lr_prototypes: f64,
    pub lr_lora: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub init_stddev: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            delta: 1.0,
            lambda: 0.001,
            gamma: 0.5,
            eta: 0.2,
            rank: 4,
            lr_prototypes: 2e-3,
            lr_lora: 1e-5,
            local_epochs: 5,
            rounds: 30,
            batch_size: 64,
            init_stddev: crate::lora::DEFAULT_INIT_STDDEV,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta", "must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be >= 0");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", "must be > 0");
        }
        if self.rank == 0 {
            return bad("rank", "must be >= 1");
        }
        if !(self.lr_prototypes >= 0.0 && self.lr_prototypes.is_finite()) {
            return bad("lr_prototypes", "must be >= 0");
        }
        if !(self.lr_lora >= 0.0 && self.lr_lora.is_finite()) {
            return bad("lr_lora", "must be >= 0");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be >= 1");
        }
        if self.rounds == 0 {
            return bad("rounds", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.init_stddev >= 0.0 && self.init_stddev.is_finite()) {
            return bad("init_stddev", "must be >= 0");
        }
        Ok(())
    }
}

/// Everything a client or the server evaluates with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: Arc<FrozenBackbone>,
    pub ledgers: BTreeMap<usize, LoraLedger>,
    pub prototypes: PrototypeSet,
    pub mode: LedgerMode,
}

impl ModelState {
    pub fn features(&self, x: &[f64]) -> Result<Vector> {
        forward_features(&self.backbone, &self.ledgers, self.mode, x)
    }

    /// Features for many inputs, sharing one adapter precomputation.
    pub fn features_batch<'a>(
        &self,
        xs: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<Vec<Vector>> {
        let views = adapter_views(&self.backbone, &self.ledgers, self.mode)?;
        xs.into_iter()
            .map(|x| {
                let mut t = forward_traced(&self.backbone, &views, x)?;
                Ok(Vector(t.inputs.pop().expect("output present")))
            })
            .collect()
    }

    /// Orthogonality penalty summed over attachments.
    pub fn ortho_penalty(&self) -> Result<f64> {
        let mut total = 0.0;
        for ledger in self.ledgers.values() {
            total += ortho_reg(&ledger.frozen_a(), &ledger.active().a)?;
        }
        Ok(total)
    }

    pub fn to_checkpoint(&self, stage: usize) -> String {
        let mut out = String::new();
        push_line(&mut out, CHECKPOINT_MAGIC, [format!("v{CHECKPOINT_VERSION}")]);
        push_line(&mut out, "stage", [stage.to_string()]);
        push_line(&mut out, "mode", [self.mode.to_string()]);
        let bb = &self.backbone;
        push_line(&mut out, "activation", [bb.activation.to_string()]);
        push_line(&mut out, "layers", [bb.layers.len().to_string()]);
        for l in &bb.layers {
            push_line(
                &mut out,
                "layer",
                [l.weight.cols().to_string(), l.weight.rows().to_string()],
            );
            push_floats(&mut out, "w", l.weight.as_slice());
            push_floats(&mut out, "bias", &l.bias);
        }
        push_line(
            &mut out,
            "attachments",
            std::iter::once(bb.attachments.len().to_string())
                .chain(bb.attachments.iter().map(|a| a.to_string())),
        );
        push_line(&mut out, "ledgers", [self.ledgers.len().to_string()]);
        for ledger in self.ledgers.values() {
            ledger.write_text(&mut out);
        }
        push_line(
            &mut out,
            "prototypes",
            [self.prototypes.len().to_string(), self.prototypes.dim.to_string()],
        );
        for (c, p) in self.prototypes.iter() {
            let flag = u8::from(self.prototypes.is_trainable(c));
            push_floats(&mut out, &format!("proto {c} {flag}"), p);
        }
        out
    }

    /// Parses a checkpoint; returns the stage index and the model.
    pub fn from_checkpoint(text: &str, path: &Path) -> Result<(usize, ModelState)> {
        let mut rd = LineReader::new(text, path);
        let v = rd.expect(CHECKPOINT_MAGIC)?;
        if v != [format!("v{CHECKPOINT_VERSION}").as_str()] {
            return Err(rd.error(format!("unsupported checkpoint format {v:?}")));
        }
        let stage = rd.expect_usizes("stage", 1)?[0];
        let mode_f = rd.expect("mode")?;
        let mode: LedgerMode = mode_f
            .first()
            .ok_or_else(|| rd.error("missing mode"))?
            .parse()
            .map_err(|e: Error| rd.error(e.to_string()))?;
        let act_f = rd.expect("activation")?;
        let activation: Activation = act_f
            .first()
            .ok_or_else(|| rd.error("missing activation"))?
            .parse()
            .map_err(|e: Error| rd.error(e.to_string()))?;
        let n_layers = rd.expect_usizes("layers", 1)?[0];
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let dims = rd.expect_usizes("layer", 2)?;
            let (inp, out) = (dims[0], dims[1]);
            let weight = rd.expect_matrix("w", out, inp)?;
            let bias = Vector(rd.expect_floats("bias", out)?);
            layers.push(AffineLayer { weight, bias });
        }
        let att = rd.expect("attachments")?;
        let n_att: usize = att
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| rd.error("bad attachment count"))?;
        if att.len() != n_att + 1 {
            return Err(rd.error("attachment count does not match entries"));
        }
        let attachments: Vec<usize> = att[1..]
            .iter()
            .map(|s| s.parse().map_err(|_| rd.error(format!("bad attachment `{s}`"))))
            .collect::<Result<_>>()?;
        let backbone = FrozenBackbone::new(layers, activation, attachments)
            .map_err(|e| rd.error(e.to_string()))?;
        let n_ledgers = rd.expect_usizes("ledgers", 1)?[0];
        let mut ledgers = BTreeMap::new();
        for _ in 0..n_ledgers {
            let ledger = LoraLedger::read(&mut rd)?;
            ledgers.insert(ledger.attachment(), ledger);
        }
        let pd = rd.expect_usizes("prototypes", 2)?;
        let mut prototypes = PrototypeSet::new(pd[1]);
        for _ in 0..pd[0] {
            let fields = rd.expect("proto")?;
            if fields.len() != pd[1] + 2 {
                return Err(rd.error("prototype row has the wrong length"));
            }
            let class: ClassId = fields[0]
                .parse()
                .map_err(|_| rd.error(format!("bad class id `{}`", fields[0])))?;
            let trainable = fields[1] == "1";
            let values: Vec<f64> = fields[2..]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| rd.error(format!("bad prototype value `{s}`")))
                })
                .collect::<Result<_>>()?;
            prototypes.insert(class, Vector(values), trainable)?;
        }
        let model = ModelState {
            backbone: Arc::new(backbone),
            ledgers,
            prototypes,
            mode,
        };
        // Validate ledger shapes against the backbone.
        adapter_views(&model.backbone, &model.ledgers, model.mode)
            .map_err(|e| rd.error(e.to_string()))?;
        Ok((stage, model))
    }
}

const CHECKPOINT_MAGIC: &str = "fcil-checkpoint";
const CHECKPOINT_VERSION: usize = 1;

/// `p(class | f)` over `class_subset` from negative scaled squared distances.
pub fn dce_probs(
    f: &[f64],
    protos: &PrototypeSet,
    delta: f64,
    class_subset: &[ClassId],
) -> Result<Vector> {
    if class_subset.is_empty() {
        return Err(Error::Empty { op: "dce_probs" });
    }
    let dists = class_subset
        .iter()
        .map(|&c| sq_dist(f, protos.get(c)?))
        .collect::<Result<Vec<_>>>()?;
    probs_from_dists(&dists, delta)
}

fn probs_from_dists(dists: &[f64], delta: f64) -> Result<Vector> {
    crate::numkit::softmax_temp(dists, -delta)
}

fn position_of(y: ClassId, class_subset: &[ClassId]) -> Result<usize> {
    class_subset
        .iter()
        .position(|&c| c == y)
        .ok_or(Error::ClassNotInSubset(y))
}

/// `−log p(y | f)` via log-sum-exp.
pub fn loss_dce(
    f: &[f64],
    y: ClassId,
    protos: &PrototypeSet,
    delta: f64,
    class_subset: &[ClassId],
) -> Result<f64> {
    let yi = position_of(y, class_subset)?;
    let dists = class_subset
        .iter()
        .map(|&c| sq_dist(f, protos.get(c)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(dce_from_dists(&dists, yi, delta))
}

fn dce_from_dists(dists: &[f64], yi: usize, delta: f64) -> f64 {
    let logits: Vec<f64> = dists.iter().map(|d| -delta * d).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (lse - logits[yi]).max(0.0)
}

pub fn loss_pl(f: &[f64], y: ClassId, protos: &PrototypeSet) -> Result<f64> {
    sq_dist(f, protos.get(y)?)
}

/// Nearest prototype over `class_subset`; ties go to the smallest class id.
pub fn predict(f: &[f64], protos: &PrototypeSet, class_subset: &[ClassId]) -> Result<ClassId> {
    let mut sorted: Vec<ClassId> = class_subset.to_vec();
    sorted.sort_unstable();
    let mut best: Option<(ClassId, f64)> = None;
    for c in sorted {
        let d = sq_dist(f, protos.get(c)?)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((c, d));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::Empty { op: "predict" })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dce: f64,
    pub pl: f64,
    pub ort: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(dce: f64, pl: f64, ort: f64, hp: &HyperParams) -> Self {
        Self {
            dce,
            pl,
            ort,
            total: dce + hp.lambda * pl + hp.gamma * ort,
        }
    }
}

fn check_batch(batch: &[LabeledSample], class_subset: &[ClassId]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty { op: "batch" });
    }
    for s in batch {
        position_of(s.label, class_subset)?;
    }
    Ok(())
}

/// Batch-mean DCE and PL terms plus the orthogonality term (once per batch).
pub fn total_loss(
    batch: &[LabeledSample],
    model: &ModelState,
    hp: &HyperParams,
    class_subset: &[ClassId],
) -> Result<LossBreakdown> {
    check_batch(batch, class_subset)?;
    let feats = model.features_batch(batch.iter().map(|s| s.features.as_slice()))?;
    let mut dce = 0.0;
    let mut pl = 0.0;
    for (s, f) in batch.iter().zip(&feats) {
        dce += loss_dce(f, s.label, &model.prototypes, hp.delta, class_subset)?;
        pl += loss_pl(f, s.label, &model.prototypes)?;
    }
    let n = batch.len() as f64;
    Ok(LossBreakdown::combine(
        dce / n,
        pl / n,
        model.ortho_penalty()?,
        hp,
    ))
}

/// Gradients of [`total_loss`] for the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Per attachment: `(∂A_t, ∂B_t)` of the active adapter.
    pub adapters: BTreeMap<usize, (Matrix, Matrix)>,
    /// Trainable prototypes in the class subset.
    pub prototypes: BTreeMap<ClassId, Vector>,
}

/// Loss and exact gradients in one pass.
pub fn loss_and_grads(
    batch: &[LabeledSample],
    model: &ModelState,
    hp: &HyperParams,
    class_subset: &[ClassId],
) -> Result<(LossBreakdown, Gradients)> {
    check_batch(batch, class_subset)?;
    let bb = &model.backbone;
    let views = adapter_views(bb, &model.ledgers, model.mode)?;
    let protos: Vec<&Vector> = class_subset
        .iter()
        .map(|&c| model.prototypes.get(c))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let inv_n = 1.0 / n;

    let mut adapter_grads: BTreeMap<usize, (Matrix, Matrix)> = model
        .ledgers
        .iter()
        .map(|(&at, l)| {
            let ad = l.active();
            (
                at,
                (
                    Matrix::zeros(ad.a.rows(), ad.a.cols()),
                    Matrix::zeros(ad.b.rows(), ad.b.cols()),
                ),
            )
        })
        .collect();
    let mut proto_grads: Vec<Vec<f64>> = vec![vec![0.0; model.prototypes.dim()]; protos.len()];
    let mut dce_sum = 0.0;
    let mut pl_sum = 0.0;
    let last = bb.layers.len() - 1;

    for s in batch {
        let trace = forward_traced(bb, &views, &s.features)?;
        let f = &trace.inputs[last + 1];
        let yi = position_of(s.label, class_subset)?;
        let dists: Vec<f64> = protos
            .iter()
            .map(|m| sq_dist(f, m))
            .collect::<Result<_>>()?;
        dce_sum += dce_from_dists(&dists, yi, hp.delta);
        pl_sum += dists[yi];
        let p = probs_from_dists(&dists, hp.delta)?;

        // ∂l/∂f and ∂l/∂m_j for this sample.
        let mut g: Vec<f64> = vec![0.0; f.len()];
        for (j, m) in protos.iter().enumerate() {
            let ind = if j == yi { 1.0 } else { 0.0 };
            let coef = 2.0 * hp.delta * (ind - p[j]);
            let pl_coef = if j == yi { 2.0 * hp.lambda } else { 0.0 };
            let gm = &mut proto_grads[j];
            for ((gi, fi), (mi, gmi)) in g.iter_mut().zip(f).zip(m.iter().zip(gm.iter_mut())) {
                let diff = fi - mi;
                *gi += (coef + pl_coef) * diff;
                *gmi -= (coef + pl_coef) * diff * inv_n;
            }
        }

        // Backprop through the stack; `g` is ∂l/∂z for the current layer.
        for l in (0..=last).rev() {
            let h_in = &trace.inputs[l];
            let layer = &bb.layers[l];
            let mut g_in = layer.weight.tr_matvec(&g)?;
            if let (Some(view), Some(us)) = (views.get(&l), trace.low_rank.get(&l)) {
                let active = view.active_pair();
                for (pi, ((a, b), u)) in view.pairs.iter().zip(us).enumerate() {
                    let at_g = a.tr_matvec(&g)?;
                    if pi == active {
                        let (ga, gb) = adapter_grads.get_mut(&l).expect("ledger present");
                        ga.add_outer(&g, u, inv_n)?;
                        gb.add_outer(&at_g, h_in, inv_n)?;
                    }
                    for (gi, v) in g_in.iter_mut().zip(b.tr_matvec(&at_g)?) {
                        *gi += v;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // h_in is the activation output of layer l-1.
            for (gi, hi) in g_in.iter_mut().zip(h_in) {
                *gi *= bb.activation.derivative_from_output(*hi);
            }
            g = g_in;
        }
    }

    for (at, ledger) in &model.ledgers {
        if hp.gamma != 0.0 && !ledger.frozen().is_empty() {
            let og = ortho_reg_grad(&ledger.frozen_a(), &ledger.active().a)?;
            adapter_grads
                .get_mut(at)
                .expect("ledger present")
                .0
                .add_scaled(&og, hp.gamma)?;
        }
    }

    let prototypes = class_subset
        .iter()
        .zip(proto_grads)
        .filter(|(c, _)| model.prototypes.is_trainable(**c))
        .map(|(c, g)| (*c, Vector(g)))
        .collect();
    let loss = LossBreakdown::combine(dce_sum / n, pl_sum / n, model.ortho_penalty()?, hp);
    Ok((
        loss,
        Gradients {
            adapters: adapter_grads,
            prototypes,
        },
    ))
}

pub fn grads(
    batch: &[LabeledSample],
    model: &ModelState,
    hp: &HyperParams,
    class_subset: &[ClassId],
) -> Result<Gradients> {
    loss_and_grads(batch, model, hp, class_subset).map(|(_, g)| g)
}
