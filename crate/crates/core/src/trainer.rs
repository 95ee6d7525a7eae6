//! Training loops: contrastive pretraining with pseudo-label refreshes,
//! predictor training on frozen latents, and evaluation.

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, TabularDataset};
use crate::error::{Error, Result};
use crate::labelprop::{propagate, LabelPropConfig, PseudoLabelAssignment};
use crate::losses::{
    one_hot, reconstruction_loss, soft_cross_entropy, supcon_loss, ContrastiveBatch, Denominator, ReconWeights,
    Similarity, SupConConfig,
};
use crate::matrix::Matrix;
use crate::mixup::{apply_mix, mixed_targets, random_pairing, sample_lambda, within_class_pairing};
use crate::network::{
    AdamConfig, ContrastiveNetwork, FeatureBatch, Mode, NetworkSpec, NodeId, PredictorInput, PredictorNetwork, Tape,
};
use crate::rng::{stream, Rng, Stream};

/// How mix partners are chosen for the contrastive view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    #[default]
    WithinClass,
    /// Any other row; the mixed view gets a soft label.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Epochs before the first label propagation.
    pub warm_start_epochs: usize,
    pub total_epochs: usize,
    pub refresh_every: usize,
    /// Reconstruction weight.
    pub beta: f64,
    /// Contrastive weight of pseudo-labeled anchors.
    pub gamma: f64,
    pub contrastive_weight: f64,
    /// Run label propagation and feed pseudo-labels back into training.
    pub pseudo_labels: bool,
    pub mixup_alpha: f64,
    pub mix_mode: MixMode,
    pub temperature: f64,
    pub denominator: Denominator,
    pub similarity: Similarity,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    pub learning_rate: f64,
    /// Overrides the `|C|/d` continuous reconstruction weight.
    pub recon_continuous_weight: Option<f64>,
    /// Overrides the `|D|/d` categorical reconstruction weight.
    pub recon_categorical_weight: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            warm_start_epochs: 20,
            total_epochs: 100,
            refresh_every: 10,
            beta: 0.25,
            gamma: 1.0,
            contrastive_weight: 1.0,
            pseudo_labels: true,
            mixup_alpha: 0.2,
            mix_mode: MixMode::WithinClass,
            temperature: 0.5,
            denominator: Denominator::default(),
            similarity: Similarity::default(),
            batch_size_labeled: 256,
            batch_size_unlabeled: 256,
            learning_rate: 1e-3,
            recon_continuous_weight: None,
            recon_categorical_weight: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warm_start_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "pretrain.warm_start_epochs ({}) exceeds pretrain.total_epochs ({})",
                self.warm_start_epochs, self.total_epochs
            )));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("pretrain.refresh_every must be >= 1".into()));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("contrastive_weight", self.contrastive_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("pretrain.{name} must be a finite value >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.mixup_alpha) {
            return Err(Error::Config("pretrain.mixup_alpha must lie in [0, 1]".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("pretrain.temperature must be positive".into()));
        }
        if self.batch_size_labeled < 2 || self.batch_size_unlabeled < 2 {
            return Err(Error::Config("pretrain batch sizes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn supcon(&self) -> SupConConfig {
        SupConConfig {
            temperature: self.temperature,
            denominator: self.denominator,
            similarity: self.similarity,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    fn refreshes_at(&self, epoch: usize) -> bool {
        let k = self.warm_start_epochs;
        epoch == k || (epoch > k && (epoch - k).is_multiple_of(self.refresh_every)) || epoch == self.total_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub hidden_width: usize,
    /// Dense layers, counting the output layer.
    pub depth: usize,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    pub use_pseudo_labels: bool,
    /// Weight of the cross-entropy on pseudo-labeled rows.
    pub unsup_weight: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden_width: 100,
            depth: 2,
            mixup: true,
            mixup_alpha: 1.0,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size_labeled: 256,
            batch_size_unlabeled: 256,
            use_pseudo_labels: true,
            unsup_weight: 1.0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("predictor.depth must be >= 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("predictor.hidden_width must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mixup_alpha) {
            return Err(Error::Config("predictor.mixup_alpha must lie in [0, 1]".into()));
        }
        if self.batch_size_labeled < 2 || self.batch_size_unlabeled < 2 {
            return Err(Error::Config("predictor batch sizes must be >= 2".into()));
        }
        if !(self.unsup_weight >= 0.0) {
            return Err(Error::Config("predictor.unsup_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrastive: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supervised_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unsupervised_ce: Option<f64>,
    /// Batches whose contrastive set held a single class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single_class_batches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_labeled: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cg_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub struct PretrainOutcome {
    pub network: ContrastiveNetwork,
    /// Latest successful pseudo-label assignment over the unlabeled rows.
    pub assignment: Option<PseudoLabelAssignment>,
    pub metrics: Vec<EpochMetrics>,
}

fn labels_of(ds: &TabularDataset) -> Result<&[usize]> {
    ds.labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("labeled split carries no labels".into()))
}

fn distinct(labels: impl IntoIterator<Item = usize>) -> usize {
    let mut v: Vec<usize> = labels.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

#[derive(Default)]
struct StepLosses {
    total: f64,
    contrastive: Option<f64>,
    reconstruction: Option<f64>,
    single_class: bool,
}

struct PretrainContext<'a> {
    labeled: &'a TabularDataset,
    unlabeled: &'a TabularDataset,
    y_l: &'a [usize],
    pseudo: &'a [Option<usize>],
    cfg: &'a PretrainConfig,
    recon: ReconWeights,
    n_classes: usize,
}

fn pretrain_step(
    net: &mut ContrastiveNetwork,
    ctx: &PretrainContext<'_>,
    labeled_rows: &[usize],
    unlabeled_rows: &[usize],
    rng: &mut Rng,
) -> Result<StepLosses> {
    let cfg = ctx.cfg;
    let fb = FeatureBatch::stack(&[
        &FeatureBatch::from_rows(ctx.labeled, labeled_rows),
        &FeatureBatch::from_rows(ctx.unlabeled, unlabeled_rows),
    ])?;
    let b = fb.rows();
    let n_l = labeled_rows.len();

    // Contrastive set: labeled rows, then pseudo-labeled rows of the batch.
    let mut set = Vec::with_capacity(b);
    let mut set_labels = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    for (k, &r) in labeled_rows.iter().enumerate() {
        set.push(k);
        set_labels.push(ctx.y_l[r]);
        weights.push(1.0);
    }
    if cfg.gamma > 0.0 {
        for (k, &r) in unlabeled_rows.iter().enumerate() {
            if let Some(y) = ctx.pseudo[r] {
                set.push(n_l + k);
                set_labels.push(y);
                weights.push(cfg.gamma);
            }
        }
    }

    let blocks = net.encoder.n_blocks();
    let layer = rng.random_range(0..blocks);
    let mut tape = Tape::new();
    let x = net.embed(&mut tape, &fb)?;
    let h = net.encode_partial(&mut tape, x, 0, layer, Mode::Train)?;

    let mut out = StepLosses::default();
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let wants_contrastive = cfg.contrastive_weight > 0.0;
    let contrastive = wants_contrastive && distinct(set_labels.iter().copied()) >= 2;
    out.single_class = wants_contrastive && !contrastive;
    let z_orig = if contrastive {
        let m = set.len();
        let lambda = sample_lambda(cfg.mixup_alpha, m, rng)?;
        let pairing = match cfg.mix_mode {
            MixMode::WithinClass => within_class_pairing(&set_labels, rng),
            MixMode::Random => random_pairing(m, rng)?,
        };
        let h_set = tape.gather(h, set.clone())?;
        let h_mix = tape.mix(h_set, pairing.partner.clone(), lambda.clone())?;
        let both = tape.concat_rows(vec![h, h_mix])?;
        let z_all = net.encode_partial(&mut tape, both, layer, blocks, Mode::Train)?;
        let z_orig = tape.gather(z_all, (0..b).collect())?;
        let z_set = tape.gather(z_all, set.clone())?;
        let z_mix = tape.gather(z_all, (b..b + m).collect())?;
        let pooled = tape.concat_rows(vec![z_set, z_mix])?;
        let proj = net.project(&mut tape, pooled, Mode::Train)?;

        let view1 = one_hot(&set_labels, ctx.n_classes)?;
        let view2 = match cfg.mix_mode {
            MixMode::WithinClass => view1.clone(),
            MixMode::Random => mixed_targets(&set_labels, &pairing, &lambda, ctx.n_classes),
        };
        let batch = ContrastiveBatch {
            projections: tape.value(proj).clone(),
            targets: Matrix::vstack(&[&view1, &view2])?,
            anchor_weights: weights.iter().chain(&weights).copied().collect(),
        };
        let res = supcon_loss(&batch, &cfg.supcon())?;
        out.contrastive = Some(res.loss);
        out.total += cfg.contrastive_weight * res.loss;
        terms.push((tape.loss(res.loss, vec![(proj, res.grad)])?, cfg.contrastive_weight));
        z_orig
    } else {
        net.encode_partial(&mut tape, h, layer, blocks, Mode::Train)?
    };

    if cfg.beta > 0.0 {
        let dec = net.decode_node(&mut tape, z_orig, Mode::Train)?;
        let (l, g) = reconstruction_loss(
            tape.value(dec),
            &fb.continuous,
            &fb.categorical,
            &net.spec.cardinalities,
            ctx.recon,
        )?;
        out.reconstruction = Some(l);
        out.total += cfg.beta * l;
        terms.push((tape.loss(l, vec![(dec, g)])?, cfg.beta));
    }
    if terms.is_empty() {
        return Ok(out);
    }
    let root = tape.weighted_sum(terms)?;
    tape.backward(root, &mut net.params)?;
    net.params.adam_step(&cfg.adam());
    Ok(out)
}

/// Encodes labeled rows and (a possibly subsampled set of) unlabeled rows and
/// propagates the labels over their kNN graph.
pub fn refresh_pseudolabels(
    net: &mut ContrastiveNetwork,
    labeled: &TabularDataset,
    unlabeled: &TabularDataset,
    lp: &LabelPropConfig,
    seed: u64,
    epoch: usize,
) -> Result<(PseudoLabelAssignment, usize)> {
    let y_l = labels_of(labeled)?;
    let mut rows: Vec<usize> = (0..unlabeled.n_rows()).collect();
    if let Some(cap) = lp.max_unlabeled {
        if cap < rows.len() {
            rows.shuffle(&mut stream(seed, Stream::LabelPropSubsample, epoch as u64));
            rows.truncate(cap);
            rows.sort_unstable();
        }
    }
    let z_l = net.encode_dataset(labeled)?;
    let z_u = net.encode_dataset(&unlabeled.take(&rows))?;
    let (assignment, result) = propagate(&z_l, y_l, &z_u, &rows, labeled.n_classes, lp, epoch)?;
    Ok((assignment, result.iterations))
}

/// Contrastive + reconstruction pretraining. Pseudo-labels, when enabled, are
/// computed at the end of the warm start, every `refresh_every` epochs after
/// it, and after the last epoch.
pub fn pretrain(
    spec: NetworkSpec,
    labeled: &TabularDataset,
    unlabeled: &TabularDataset,
    cfg: &PretrainConfig,
    lp: &LabelPropConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let y_l = labels_of(labeled)?;
    if labeled.is_empty() || distinct(y_l.iter().copied()) < 2 {
        return Err(Error::InvalidArgument(
            "pretraining needs labeled rows from at least two classes".into(),
        ));
    }
    let mut net = ContrastiveNetwork::new(spec, seed)?;
    let n_u = unlabeled.n_rows();
    let recon = {
        let base = ReconWeights::from_counts(labeled.n_continuous(), labeled.n_categorical());
        ReconWeights {
            continuous: cfg.recon_continuous_weight.unwrap_or(base.continuous),
            categorical: cfg.recon_categorical_weight.unwrap_or(base.categorical),
        }
    };
    let mut pseudo: Vec<Option<usize>> = vec![None; n_u];
    let mut assignment: Option<PseudoLabelAssignment> = None;
    let mut metrics = Vec::with_capacity(cfg.total_epochs);
    let propagating = cfg.pseudo_labels && n_u > 0;

    let do_refresh = |net: &mut ContrastiveNetwork,
                          pseudo: &mut Vec<Option<usize>>,
                          assignment: &mut Option<PseudoLabelAssignment>,
                          m: &mut EpochMetrics,
                          epoch: usize|
     -> Result<()> {
        match refresh_pseudolabels(net, labeled, unlabeled, lp, seed, epoch) {
            Ok((a, iterations)) => {
                pseudo.iter_mut().for_each(|p| *p = None);
                for (r, l) in a.assigned() {
                    pseudo[r] = Some(l);
                }
                m.pseudo_labeled = Some(a.n_assigned());
                m.cg_iterations = Some(iterations);
                if let Some(truth) = unlabeled.true_labels() {
                    m.pseudo_label_accuracy = Some(a.accuracy(|r| truth[r]));
                }
                *assignment = Some(a);
                Ok(())
            }
            Err(e @ Error::ConvergenceFailure { .. }) => {
                m.warning = Some(format!("label propagation failed, keeping previous pseudo-labels: {e}"));
                Ok(())
            }
            Err(e) => Err(e),
        }
    };

    if propagating && cfg.warm_start_epochs == 0 {
        let mut m = EpochMetrics {
            phase: "pretrain".into(),
            ..Default::default()
        };
        do_refresh(&mut net, &mut pseudo, &mut assignment, &mut m, 0)?;
        metrics.push(m);
    }

    for epoch in 1..=cfg.total_epochs {
        let batches = epoch_batches(
            labeled.n_rows(),
            n_u,
            cfg.batch_size_labeled,
            cfg.batch_size_unlabeled,
            &mut stream(seed, Stream::Batching, epoch as u64),
        )?;
        let mut rng = stream(seed, Stream::Mixup, epoch as u64);
        let ctx = PretrainContext {
            labeled,
            unlabeled,
            y_l,
            pseudo: &pseudo,
            cfg,
            recon,
            n_classes: labeled.n_classes,
        };
        let (mut total, mut con, mut rec) = (0.0, (0.0, 0usize), (0.0, 0usize));
        let mut single = 0;
        for batch in &batches {
            let s = pretrain_step(&mut net, &ctx, &batch.labeled, &batch.unlabeled, &mut rng)?;
            total += s.total;
            if let Some(c) = s.contrastive {
                con = (con.0 + c, con.1 + 1);
            }
            if let Some(r) = s.reconstruction {
                rec = (rec.0 + r, rec.1 + 1);
            }
            single += s.single_class as usize;
        }
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        let mut m = EpochMetrics {
            phase: "pretrain".into(),
            epoch,
            loss: total / batches.len().max(1) as f64,
            contrastive: mean(con),
            reconstruction: mean(rec),
            single_class_batches: (cfg.contrastive_weight > 0.0).then_some(single),
            ..Default::default()
        };
        if propagating && cfg.refreshes_at(epoch) {
            do_refresh(&mut net, &mut pseudo, &mut assignment, &mut m, epoch)?;
        }
        metrics.push(m);
    }
    Ok(PretrainOutcome {
        network: net,
        assignment,
        metrics,
    })
}

/// Predictor inputs: frozen latent codes or raw rows embedded by the predictor.
#[derive(Debug, Clone, Copy)]
pub enum Features<'a> {
    Latent(&'a Matrix),
    Raw(&'a TabularDataset),
}

impl Features<'_> {
    pub fn n_rows(&self) -> usize {
        match self {
            Features::Latent(m) => m.rows(),
            Features::Raw(d) => d.n_rows(),
        }
    }
}

enum Gathered {
    Latent(Matrix),
    Raw(FeatureBatch),
}

impl Gathered {
    fn take(features: Features<'_>, rows: &[usize]) -> Self {
        match features {
            Features::Latent(m) => Gathered::Latent(m.gather_rows(rows)),
            Features::Raw(d) => Gathered::Raw(FeatureBatch::from_rows(d, rows)),
        }
    }

    fn stack(a: Gathered, b: Gathered) -> Result<Self> {
        Ok(match (a, b) {
            (Gathered::Latent(x), Gathered::Latent(y)) => Gathered::Latent(Matrix::vstack(&[&x, &y])?),
            (Gathered::Raw(x), Gathered::Raw(y)) => Gathered::Raw(FeatureBatch::stack(&[&x, &y])?),
            _ => return Err(Error::InvalidArgument("mixed predictor input kinds".into())),
        })
    }

    fn input(&self) -> PredictorInput<'_> {
        match self {
            Gathered::Latent(m) => PredictorInput::Latent(m),
            Gathered::Raw(b) => PredictorInput::Raw(b),
        }
    }
}

/// Mixes latent rows with random partners; returns the rows and soft targets.
fn mix_rows(
    x: Gathered,
    labels: &[usize],
    alpha: f64,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<(Gathered, Matrix)> {
    let n = labels.len();
    match x {
        Gathered::Latent(m) if n >= 2 => {
            let lambda = sample_lambda(alpha, n, rng)?;
            let pairing = random_pairing(n, rng)?;
            let mixed = apply_mix(&m, &pairing.partner, &lambda);
            Ok((
                Gathered::Latent(mixed),
                mixed_targets(labels, &pairing, &lambda, n_classes),
            ))
        }
        Gathered::Raw(_) => Err(Error::InvalidArgument(
            "latent Mixup needs latent predictor inputs".into(),
        )),
        other => Ok((other, one_hot(labels, n_classes)?)),
    }
}

/// Trains the predictor with cross-entropy on labeled rows plus
/// `unsup_weight ×` cross-entropy on pseudo-labeled rows. With `mixup`, each
/// branch mixes its rows with random partners and soft targets.
pub fn train_predictor(
    predictor: &mut PredictorNetwork,
    labeled: Features<'_>,
    labels: &[usize],
    pseudo: Option<(Features<'_>, &[usize])>,
    n_classes: usize,
    cfg: &PredictorConfig,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if labeled.n_rows() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(
            "predictor needs one label per labeled row".into(),
        ));
    }
    let pseudo = pseudo.filter(|(f, _)| cfg.use_pseudo_labels && f.n_rows() > 0);
    let n_p = pseudo.map_or(0, |(f, _)| f.n_rows());
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(
            labels.len(),
            n_p,
            cfg.batch_size_labeled,
            cfg.batch_size_unlabeled,
            &mut stream(seed, Stream::PredictorBatching, epoch as u64),
        )?;
        let mut rng = stream(seed, Stream::PredictorMixup, epoch as u64);
        let (mut total, mut sup_sum, mut unsup_sum) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let y_l: Vec<usize> = batch.labeled.iter().map(|&r| labels[r]).collect();
            let mut x = Gathered::take(labeled, &batch.labeled);
            let mut t_l = one_hot(&y_l, n_classes)?;
            if cfg.mixup {
                (x, t_l) = mix_rows(x, &y_l, cfg.mixup_alpha, n_classes, &mut rng)?;
            }
            let n_l = y_l.len();
            let mut t_p = None;
            if let (Some((pf, pl)), false) = (pseudo, batch.unlabeled.is_empty()) {
                let y_p: Vec<usize> = batch.unlabeled.iter().map(|&r| pl[r]).collect();
                let mut xp = Gathered::take(pf, &batch.unlabeled);
                let mut tp = one_hot(&y_p, n_classes)?;
                if cfg.mixup {
                    (xp, tp) = mix_rows(xp, &y_p, cfg.mixup_alpha, n_classes, &mut rng)?;
                }
                x = Gathered::stack(x, xp)?;
                t_p = Some(tp);
            }

            let mut tape = Tape::new();
            let logits = predictor.forward_node(&mut tape, x.input(), Mode::Train)?;
            let all = tape.value(logits);
            let (sup, g_sup) = soft_cross_entropy(&all.slice_rows(0, n_l), &t_l)?;
            let mut grad = g_sup;
            let mut value = sup;
            sup_sum += sup;
            if let Some(tp) = t_p {
                let (unsup, mut g_unsup) = soft_cross_entropy(&all.slice_rows(n_l, all.rows()), &tp)?;
                g_unsup.scale(cfg.unsup_weight);
                grad = Matrix::vstack(&[&grad, &g_unsup])?;
                value += cfg.unsup_weight * unsup;
                unsup_sum += unsup;
            }
            total += value;
            let root = tape.loss(value, vec![(logits, grad)])?;
            tape.backward(root, &mut predictor.params)?;
            predictor.params.adam_step(&adam);
        }
        let nb = batches.len().max(1) as f64;
        metrics.push(EpochMetrics {
            phase: "predictor".into(),
            epoch,
            loss: total / nb,
            supervised_ce: Some(sup_sum / nb),
            unsupervised_ce: (n_p > 0).then(|| unsup_sum / nb),
            ..Default::default()
        });
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated rows.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub n: usize,
}

pub fn predict(predictor: &mut PredictorNetwork, features: Features<'_>) -> Result<Vec<usize>> {
    let n = features.n_rows();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(4096) {
        let rows: Vec<usize> = (start..(start + 4096).min(n)).collect();
        let x = Gathered::take(features, &rows);
        out.extend(predictor.logits(x.input())?.argmax_rows());
    }
    Ok(out)
}

pub fn accuracy_report(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Evaluation> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs a non-empty aligned label set".into()));
    }
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[y] += 1;
        hits[y] += (p == y) as usize;
    }
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        n: labels.len(),
    })
}

pub fn evaluate(
    predictor: &mut PredictorNetwork,
    features: Features<'_>,
    labels: &[usize],
    n_classes: usize,
) -> Result<Evaluation> {
    let predictions = predict(predictor, features)?;
    accuracy_report(&predictions, labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_blobs;

    struct Blobs {
        labeled: TabularDataset,
        unlabeled: TabularDataset,
        test: TabularDataset,
    }

    /// 5 labeled rows per class, 400 unlabeled, 400 test.
    fn blobs(seed: u64) -> Blobs {
        let ds = two_blobs(810, 6.0, seed);
        let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
        Blobs {
            labeled: ds.take(&range(0, 10)),
            unlabeled: ds.take(&range(10, 410)).hide_labels(),
            test: ds.take(&range(410, 810)),
        }
    }

    fn spec() -> NetworkSpec {
        NetworkSpec::new(2, &[], Some(16), 1, 1, Some(16))
    }

    fn small_pretrain() -> PretrainConfig {
        PretrainConfig {
            warm_start_epochs: 4,
            total_epochs: 12,
            refresh_every: 4,
            batch_size_labeled: 64,
            batch_size_unlabeled: 64,
            learning_rate: 5e-3,
            ..PretrainConfig::default()
        }
    }

    fn small_predictor() -> PredictorConfig {
        PredictorConfig {
            hidden_width: 16,
            epochs: 30,
            batch_size_labeled: 64,
            batch_size_unlabeled: 64,
            learning_rate: 5e-3,
            ..PredictorConfig::default()
        }
    }

    fn values(net: &ContrastiveNetwork, ids: &[crate::network::ParamId]) -> Vec<Matrix> {
        ids.iter().map(|&id| net.params.value(id).clone()).collect()
    }

    /// True when no gradient ever reached the parameters (Adam's second moment is a sum of squares).
    fn never_updated(net: &ContrastiveNetwork, ids: &[crate::network::ParamId]) -> bool {
        ids.iter()
            .all(|&id| net.params.get(id).second_moment.data().iter().all(|&v| v == 0.0))
    }

    fn lp() -> LabelPropConfig {
        LabelPropConfig::default()
    }

    #[test]
    fn two_blob_pipeline_is_accurate() {
        let d = blobs(1);
        let out = pretrain(spec(), &d.labeled, &d.unlabeled, &small_pretrain(), &lp(), 7).unwrap();
        let mut net = out.network;
        let a = out.assignment.expect("pseudo-labels after warm start");
        let truth = d.unlabeled.true_labels().unwrap();
        assert!(a.accuracy(|r| truth[r]) > 0.95);
        let (rows, labels): (Vec<usize>, Vec<usize>) = a.assigned().unzip();
        let z_l = net.encode_dataset(&d.labeled).unwrap();
        let z_p = net.encode_dataset(&d.unlabeled.take(&rows)).unwrap();
        let z_t = net.encode_dataset(&d.test).unwrap();
        let mut pred = PredictorNetwork::on_latents(16, 16, 2, 2, 7).unwrap();
        train_predictor(
            &mut pred,
            Features::Latent(&z_l),
            d.labeled.labels.as_deref().unwrap(),
            Some((Features::Latent(&z_p), &labels)),
            2,
            &small_predictor(),
            7,
        )
        .unwrap();
        let ev = evaluate(&mut pred, Features::Latent(&z_t), d.test.labels.as_deref().unwrap(), 2).unwrap();
        assert!(ev.accuracy > 0.95, "accuracy {}", ev.accuracy);
        assert_eq!(ev.n, 400);
    }

    #[test]
    fn reconstruction_only_pretraining_leaves_projector_at_init() {
        let d = blobs(2);
        let cfg = PretrainConfig {
            contrastive_weight: 0.0,
            gamma: 0.0,
            pseudo_labels: false,
            ..small_pretrain()
        };
        let init = ContrastiveNetwork::new(spec(), 3).unwrap();
        let out = pretrain(spec(), &d.labeled, &d.unlabeled, &cfg, &lp(), 3).unwrap();
        let ids = init.projector_param_ids();
        assert_eq!(values(&out.network, &ids), values(&init, &ids));
        assert!(never_updated(&out.network, &ids));
        assert!(!never_updated(&out.network, &out.network.encoder_param_ids()));
        assert!(out.metrics.iter().all(|m| m.contrastive.is_none() && m.reconstruction.is_some()));
        assert!(out.assignment.is_none());
    }

    #[test]
    fn zero_beta_never_touches_the_decoder() {
        let d = blobs(3);
        let cfg = PretrainConfig {
            beta: 0.0,
            gamma: 0.0,
            pseudo_labels: false,
            warm_start_epochs: 12,
            ..small_pretrain()
        };
        let init = ContrastiveNetwork::new(spec(), 4).unwrap();
        let out = pretrain(spec(), &d.labeled, &d.unlabeled, &cfg, &lp(), 4).unwrap();
        let ids = init.decoder_param_ids();
        assert_eq!(values(&out.network, &ids), values(&init, &ids));
        assert!(never_updated(&out.network, &ids));
        assert!(out.metrics.iter().all(|m| m.reconstruction.is_none() && m.contrastive.is_some()));
    }

    #[test]
    fn zero_gamma_with_refresh_equals_labeled_only_pretraining() {
        let d = blobs(4);
        let with = PretrainConfig {
            gamma: 0.0,
            ..small_pretrain()
        };
        let without = PretrainConfig {
            pseudo_labels: false,
            ..with.clone()
        };
        let a = pretrain(spec(), &d.labeled, &d.unlabeled, &with, &lp(), 5).unwrap();
        let b = pretrain(spec(), &d.labeled, &d.unlabeled, &without, &lp(), 5).unwrap();
        assert!(a.assignment.is_some() && b.assignment.is_none());
        assert_eq!(a.network.params, b.network.params);
    }

    #[test]
    fn empty_unlabeled_set_trains_on_labeled_rows() {
        let d = blobs(5);
        let none = d.unlabeled.take(&[]);
        let out = pretrain(spec(), &d.labeled, &none, &small_pretrain(), &lp(), 6).unwrap();
        assert!(out.assignment.is_none());
        assert_eq!(out.metrics.len(), 12);
        assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let d = blobs(6);
        let one = d.labeled.take(&[0, 2, 4]);
        assert!(matches!(
            pretrain(spec(), &one, &d.unlabeled, &small_pretrain(), &lp(), 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    /// Unassigned rows count as misses, so encoders that leave more of the
    /// graph disconnected are not rewarded for it.
    #[test]
    fn pseudo_labels_beat_an_untrained_encoder() {
        let d = blobs(7);
        let truth = d.unlabeled.true_labels().unwrap();
        let correct = |a: &PseudoLabelAssignment| a.assigned().filter(|&(r, l)| truth[r] == l).count();
        let mut untrained = ContrastiveNetwork::new(spec(), 8).unwrap();
        let (base, _) = refresh_pseudolabels(&mut untrained, &d.labeled, &d.unlabeled, &lp(), 8, 0).unwrap();
        let base_correct = correct(&base);

        let out = pretrain(spec(), &d.labeled, &d.unlabeled, &small_pretrain(), &lp(), 8).unwrap();
        let refreshes: Vec<(f64, usize)> = out
            .metrics
            .iter()
            .filter_map(|m| Some((m.pseudo_label_accuracy?, m.pseudo_labeled?)))
            .collect();
        assert_eq!(refreshes.len(), 3);
        for (acc, n) in refreshes {
            let hits = (acc * n as f64).round() as usize;
            assert!(hits >= base_correct, "{hits} correct < {base_correct}");
        }
    }

    #[test]
    fn pretraining_is_deterministic() {
        let d = blobs(8);
        let a = pretrain(spec(), &d.labeled, &d.unlabeled, &small_pretrain(), &lp(), 9).unwrap();
        let b = pretrain(spec(), &d.labeled, &d.unlabeled, &small_pretrain(), &lp(), 9).unwrap();
        assert_eq!(a.network.params, b.network.params);
        assert_eq!(a.metrics, b.metrics);
        let c = pretrain(spec(), &d.labeled, &d.unlabeled, &small_pretrain(), &lp(), 10).unwrap();
        assert_ne!(a.network.params, c.network.params);
    }

    #[test]
    fn predictor_training_leaves_the_encoder_untouched() {
        let d = blobs(9);
        let mut net = ContrastiveNetwork::new(spec(), 2).unwrap();
        let before = net.params.clone();
        let z = net.encode_dataset(&d.labeled).unwrap();
        let mut pred = PredictorNetwork::on_latents(16, 16, 2, 2, 2).unwrap();
        train_predictor(
            &mut pred,
            Features::Latent(&z),
            d.labeled.labels.as_deref().unwrap(),
            None,
            2,
            &small_predictor(),
            2,
        )
        .unwrap();
        assert_eq!(net.params, before);
        assert_eq!(net.encode_dataset(&d.labeled).unwrap(), z);
    }

    #[test]
    fn zero_alpha_mixup_yields_unmixed_rows_with_hard_targets() {
        let d = blobs(10);
        let z = d.labeled.continuous.clone();
        let y = d.labeled.labels.as_deref().unwrap();
        let mut rng = stream(1, Stream::PredictorMixup, 1);
        let (mixed, targets) = mix_rows(Gathered::Latent(z.clone()), y, 0.0, 2, &mut rng).unwrap();
        let Gathered::Latent(mixed) = mixed else { panic!("latent rows expected") };
        for i in 0..mixed.rows() {
            let source = (0..z.rows()).find(|&j| z.row(j) == mixed.row(i)).expect("row copied verbatim");
            assert_eq!(targets.row(i), one_hot(&[y[source]], 2).unwrap().row(0));
        }
    }

    #[test]
    fn unsupervised_branch_only_with_pseudo_labels() {
        let d = blobs(11);
        let z = d.labeled.continuous.clone();
        let zp = d.unlabeled.continuous.slice_rows(0, 40);
        let yp: Vec<usize> = d.unlabeled.true_labels().unwrap()[..40].to_vec();
        let y = d.labeled.labels.as_deref().unwrap();
        let run = |use_pl: bool| {
            let cfg = PredictorConfig {
                use_pseudo_labels: use_pl,
                epochs: 2,
                ..small_predictor()
            };
            let mut pred = PredictorNetwork::on_latents(2, 8, 2, 2, 4).unwrap();
            train_predictor(&mut pred, Features::Latent(&z), y, Some((Features::Latent(&zp), &yp)), 2, &cfg, 4).unwrap()
        };
        assert!(run(true).iter().all(|m| m.unsupervised_ce.is_some()));
        assert!(run(false).iter().all(|m| m.unsupervised_ce.is_none()));
    }

    #[test]
    fn mixup_needs_latent_inputs() {
        let d = blobs(12);
        let mut pred = PredictorNetwork::on_raw(2, &[], 8, 2, 2, 1).unwrap();
        let err = train_predictor(
            &mut pred,
            Features::Raw(&d.labeled),
            d.labeled.labels.as_deref().unwrap(),
            None,
            2,
            &small_predictor(),
            1,
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn logistic_separates_separable_classes() {
        let ds = two_blobs(400, 12.0, 13);
        let rows: Vec<usize> = (0..200).collect();
        let train = ds.take(&rows);
        let test = ds.take(&(200..400).collect::<Vec<_>>());
        let mut pred = PredictorNetwork::on_raw(2, &[], 8, 1, 2, 1).unwrap();
        let cfg = PredictorConfig {
            mixup: false,
            depth: 1,
            epochs: 100,
            learning_rate: 2e-2,
            ..small_predictor()
        };
        train_predictor(&mut pred, Features::Raw(&train), train.labels.as_deref().unwrap(), None, 2, &cfg, 1).unwrap();
        let ev = evaluate(&mut pred, Features::Raw(&test), test.labels.as_deref().unwrap(), 2).unwrap();
        assert_eq!(ev.accuracy, 1.0);
    }

    #[test]
    fn constant_logits_score_the_first_class() {
        let labels = [2, 1, 1, 0, 2, 2];
        let logits = Matrix::from_rows(&[[0.1, 0.7, 0.7]; 6]);
        let ev = accuracy_report(&logits.argmax_rows(), &labels, 3).unwrap();
        assert_eq!(ev.accuracy, 2.0 / 6.0);
        assert_eq!(ev.per_class_accuracy, vec![Some(0.0), Some(1.0), Some(0.0)]);
        let perfect = accuracy_report(&labels, &labels, 4).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.per_class_accuracy[3], None);
        assert!(accuracy_report(&[], &[], 2).is_err());
    }

    #[test]
    fn refresh_schedule() {
        let cfg = PretrainConfig {
            warm_start_epochs: 3,
            total_epochs: 12,
            refresh_every: 4,
            ..PretrainConfig::default()
        };
        let at: Vec<usize> = (1..=12).filter(|&e| cfg.refreshes_at(e)).collect();
        assert_eq!(at, vec![3, 7, 11, 12]);
    }
}
