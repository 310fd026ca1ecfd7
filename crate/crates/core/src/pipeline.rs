//! The five training stages and the results document.
//!
//! 1. pre-training on labeled source and unlabeled target data
//!    (`L_sc + alpha * L_ct`), next to the two single-loss reference
//!    regimes (`L_sc` only: the baseline; `L_ct` only);
//! 2. initial spherical k-means on the target embeddings;
//! 3. fine-tuning with `L_sc + alpha * L_ct + beta * L_cc`, re-clustering
//!    every `P` epochs until the epoch-mean `L_cc` settles;
//! 4. pseudo-labeling the target set by clustering;
//! 5. training a fresh network on source plus pseudo-labeled target.
//!
//! One optimizer step consumes one source batch and one target batch.
//! Steps per epoch follow the labeled set when there is one, otherwise the
//! target set; target batches cycle through reshuffled passes. Every stage
//! starts a fresh Adam state. All randomness comes from [`crate::rng`]
//! streams of the root seed.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clustering::{kmeans_cosine, pseudo_labels, ClusterState};
use crate::config::Config;
use crate::datagen::{
    generate_domain, make_trials, sample_segment_pair, Domain, DomainShift, GenConfig,
    HiddenLabels, SpeakerDataset,
};
use crate::embednet::{
    adam_step, backward, embed_all, Batch, CenterBatch, Checkpoint, LossSelector, LossSpec,
    ModelParams, OptimizerState, SourceBatch, TargetBatch,
};
use crate::losses::LossWeights;
use crate::metrics::{self, MetricsReport, TrialList};
use crate::rng::{derive_seed, stream, Phase, Role};
use crate::{Error, Result};

/// File names used inside an output directory.
pub mod files {
    pub const SOURCE: &str = "source.spk";
    pub const TARGET: &str = "target.spk";
    pub const TRIALS: &str = "trials.txt";
    pub const BASELINE: &str = "baseline.ckpt";
    pub const CSL: &str = "csl.ckpt";
    pub const PRETRAIN: &str = "pretrain.ckpt";
    pub const CLUSTERS_INITIAL: &str = "clusters_initial.clust";
    pub const FINETUNE: &str = "finetune.ckpt";
    pub const CLUSTERS_FINETUNE: &str = "clusters_finetune.clust";
    pub const PSEUDO: &str = "pseudo.clust";
    pub const TARGET_PSEUDO: &str = "target_pseudo.spk";
    pub const FINAL: &str = "final.ckpt";
    pub const RESULTS: &str = "results.json";
    pub const TIMINGS: &str = "timings.json";

    pub fn record(stage: &str) -> String {
        format!("{stage}.record.json")
    }
}

/// Writes `bytes` to a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Source data, target data (hidden labels attached) and target trials.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source: SpeakerDataset,
    pub target: SpeakerDataset,
    pub trials: TrialList,
}

/// Seeds derived from the root seed for the data generator.
pub fn data_seeds(root: u64) -> BTreeMap<&'static str, u64> {
    BTreeMap::from([
        ("source_speakers", derive_seed(root, Phase::Data, Role::SourceSpeakers)),
        ("target_speakers", derive_seed(root, Phase::Data, Role::TargetSpeakers)),
        ("trials", derive_seed(root, Phase::Data, Role::Trials)),
    ])
}

pub fn generate_benchmark(cfg: &Config) -> Result<Benchmark> {
    let d = &cfg.data;
    let root = cfg.train.seed;
    let seeds = data_seeds(root);
    let shift = DomainShift::random(
        d.d_in,
        (d.shift_singular_min, d.shift_singular_max),
        d.shift_offset,
        &mut stream(root, Phase::Data, Role::DomainShift),
    )?;
    let gen = |domain, n_speakers, domain_shift, seed| GenConfig {
        domain,
        n_speakers,
        utts_per_speaker: d.utts_per_speaker,
        d_in: d.d_in,
        within_speaker_sigma: d.within_speaker_sigma,
        domain_shift,
        augmentation: d.augmentation(),
        seed,
    };
    let source = generate_domain(&gen(
        Domain::Source,
        d.source_speakers,
        DomainShift::Identity,
        seeds["source_speakers"],
    ))?;
    let target = generate_domain(&gen(
        Domain::Target,
        d.target_speakers,
        shift,
        seeds["target_speakers"],
    ))?;
    let trials = make_trials(&target, d.target_trials, d.nontarget_trials, seeds["trials"])?;
    Ok(Benchmark {
        source,
        target,
        trials,
    })
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub sc: Option<f64>,
    pub ct: Option<f64>,
    pub cc: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSnapshot {
    /// Completed fine-tuning epochs when the clustering was computed.
    pub epoch: usize,
    pub kind: &'static str,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub stage: &'static str,
    pub epochs: Vec<EpochRecord>,
    pub recluster_epochs: Vec<usize>,
    pub snapshots: Vec<ClusterSnapshot>,
    pub stop_reason: &'static str,
}

impl RunRecord {
    fn new(stage: &'static str) -> Self {
        Self {
            stage,
            epochs: Vec::new(),
            recluster_epochs: Vec::new(),
            snapshots: Vec::new(),
            stop_reason: "max_epochs",
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("record serializes");
        v.push(b'\n');
        v
    }
}

/// Random streams of one stage, kept across its epochs.
struct Streams {
    src_order: ChaCha8Rng,
    src_aug: ChaCha8Rng,
    tgt_order: ChaCha8Rng,
    tgt_aug: ChaCha8Rng,
    tgt_perm: Vec<usize>,
    tgt_cursor: usize,
}

impl Streams {
    fn new(root: u64, phase: Phase) -> Self {
        Self {
            src_order: stream(root, phase, Role::SourceOrder),
            src_aug: stream(root, phase, Role::SourceAug),
            tgt_order: stream(root, phase, Role::TargetOrder),
            tgt_aug: stream(root, phase, Role::TargetAug),
            tgt_perm: Vec::new(),
            tgt_cursor: 0,
        }
    }

    /// `size` target indices, continuing a shuffled pass and reshuffling
    /// when it runs out.
    fn next_target_batch(&mut self, n: usize, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.tgt_cursor >= self.tgt_perm.len() {
                self.tgt_perm = (0..n).collect();
                self.tgt_perm.shuffle(&mut self.tgt_order);
                self.tgt_cursor = 0;
            }
            let take = (size - out.len()).min(self.tgt_perm.len() - self.tgt_cursor);
            out.extend_from_slice(&self.tgt_perm[self.tgt_cursor..self.tgt_cursor + take]);
            self.tgt_cursor += take;
        }
        out
    }
}

/// Inputs of the training loop for one stage.
struct EpochPlan<'a> {
    labeled: Option<(&'a [Vec<f64>], &'a [usize])>,
    target: Option<&'a SpeakerDataset>,
    /// Cluster of every target utterance, and the centers.
    centers: Option<(&'a [usize], &'a [Vec<f64>])>,
    spec: LossSpec,
}

fn loss_spec(cfg: &Config, selector: LossSelector, weights: LossWeights) -> LossSpec {
    LossSpec {
        selector,
        weights,
        aam: cfg.train.aam(),
        score: cfg.model.score,
    }
}

fn run_epoch(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    streams: &mut Streams,
    plan: &EpochPlan,
    cfg: &Config,
    epoch: usize,
) -> Result<EpochRecord> {
    let t = &cfg.train;
    let aug = cfg.data.augmentation();
    opt.epoch = epoch as u32;
    let lr = opt.learning_rate();
    let n_tgt = plan.target.map_or(0, SpeakerDataset::len);
    let steps = match plan.labeled {
        Some((x, _)) => x.len().div_ceil(t.batch_supervised),
        None => n_tgt.div_ceil(t.batch_csl),
    };
    if steps == 0 {
        return Err(Error::Empty("training set is empty".into()));
    }
    let src_perm = plan.labeled.map(|(x, _)| {
        let mut p: Vec<usize> = (0..x.len()).collect();
        p.shuffle(&mut streams.src_order);
        p
    });
    let mut sums = [0.0f64; 4];
    let mut seen = [false; 3];
    for step in 0..steps {
        let mut src_inputs = Vec::new();
        let mut src_labels = Vec::new();
        if let (Some((x, y)), Some(perm)) = (plan.labeled, &src_perm) {
            let lo = step * t.batch_supervised;
            let hi = (lo + t.batch_supervised).min(x.len());
            for &i in &perm[lo..hi] {
                src_inputs.push(if t.augment_supervised {
                    aug.view(&x[i], &mut streams.src_aug)
                } else {
                    x[i].clone()
                });
                src_labels.push(y[i]);
            }
        }
        let mut view_a = Vec::new();
        let mut view_b = Vec::new();
        let mut assignments = Vec::new();
        if let Some(target) = plan.target {
            let idx = streams.next_target_batch(n_tgt, t.batch_csl.min(n_tgt));
            for &i in &idx {
                let pair = sample_segment_pair(target, i, &aug, &mut streams.tgt_aug)?;
                view_a.push(pair.view_a);
                view_b.push(pair.view_b);
            }
            if let Some((assign, _)) = plan.centers {
                assignments = idx.iter().map(|&i| assign[i]).collect();
            }
        }
        let batch = Batch {
            source: plan.labeled.map(|_| SourceBatch {
                inputs: &src_inputs,
                labels: &src_labels,
            }),
            target: plan.target.map(|_| TargetBatch {
                view_a: &view_a,
                view_b: &view_b,
            }),
            centers: plan.centers.map(|(_, centers)| CenterBatch {
                assignments: &assignments,
                centers,
            }),
        };
        let (losses, grads) = backward(params, &batch, &plan.spec)?;
        adam_step(params, &grads, opt)?;
        for (k, v) in [losses.sc, losses.ct, losses.cc].into_iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                seen[k] = true;
            }
        }
        sums[3] += losses.total;
    }
    let mean = |k: usize| seen[k].then(|| sums[k] / steps as f64);
    Ok(EpochRecord {
        epoch: epoch + 1,
        lr,
        sc: mean(0),
        ct: mean(1),
        cc: mean(2),
        total: sums[3] / steps as f64,
    })
}

fn labeled_view(ds: &SpeakerDataset) -> Result<(&[Vec<f64>], &[usize])> {
    let labels = ds
        .speaker_labels()
        .ok_or_else(|| Error::Labels(format!("{} dataset has no speaker labels", ds.domain().as_str())))?;
    Ok((ds.utterances(), labels))
}

/// Pre-training objective variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `L_sc` on source only (the baseline).
    SourceOnly,
    /// `L_ct` on target only.
    ContrastiveOnly,
    /// `L_sc + alpha * L_ct`.
    Joint,
}

impl Regime {
    pub fn stage_name(self) -> &'static str {
        match self {
            Regime::SourceOnly => "baseline",
            Regime::ContrastiveOnly => "csl",
            Regime::Joint => "pretrain",
        }
    }
}

fn fresh_checkpoint(cfg: &Config, num_classes: usize, phase: Phase) -> Result<Checkpoint> {
    let params = ModelParams::init(
        &cfg.architecture(),
        num_classes,
        cfg.score_init(),
        &mut stream(cfg.train.seed, phase, Role::Init),
    )?;
    let optimizer = OptimizerState::for_params(&params, cfg.train.lr, cfg.train.lr_decay);
    Ok(Checkpoint { params, optimizer })
}

/// Trains one pre-training regime from a fresh network. All regimes share
/// the same initialization and random streams.
pub fn pretrain_regime(
    source: &SpeakerDataset,
    target: &SpeakerDataset,
    cfg: &Config,
    regime: Regime,
) -> Result<(Checkpoint, RunRecord)> {
    let stage = regime.stage_name();
    (|| {
        target.ensure_no_hidden(stage)?;
        source.ensure_no_hidden(stage)?;
        let (x, y) = labeled_view(source)?;
        let mut ck = fresh_checkpoint(cfg, source.num_classes(), Phase::Pretrain)?;
        let mut streams = Streams::new(cfg.train.seed, Phase::Pretrain);
        let (selector, labeled, tgt) = match regime {
            Regime::SourceOnly => (LossSelector::Classification, Some((x, y)), None),
            Regime::ContrastiveOnly => (LossSelector::Contrastive, None, Some(target)),
            Regime::Joint => (LossSelector::Pretrain, Some((x, y)), Some(target)),
        };
        let plan = EpochPlan {
            labeled,
            target: tgt,
            centers: None,
            spec: loss_spec(cfg, selector, cfg.train.weights()),
        };
        let mut record = RunRecord::new(stage);
        for epoch in 0..cfg.train.pretrain_epochs {
            let r = run_epoch(&mut ck.params, &mut ck.optimizer, &mut streams, &plan, cfg, epoch)?;
            record.epochs.push(r);
        }
        Ok((ck, record))
    })()
    .map_err(|e: Error| e.in_stage(stage))
}

/// Stage 1: `L_sc + alpha * L_ct`.
pub fn pretrain(source: &SpeakerDataset, target: &SpeakerDataset, cfg: &Config) -> Result<(Checkpoint, RunRecord)> {
    pretrain_regime(source, target, cfg, Regime::Joint)
}

fn cluster_target(params: &ModelParams, target: &SpeakerDataset, cfg: &Config, seed: u64) -> Result<ClusterState> {
    let emb = embed_all(params, target.utterances())?;
    kmeans_cosine(&emb, &cfg.cluster.kmeans(), seed)
}

/// Stage 2: spherical k-means on the target embeddings.
pub fn initial_clustering(params: &ModelParams, target: &SpeakerDataset, cfg: &Config) -> Result<ClusterState> {
    (|| {
        target.ensure_no_hidden("initial clustering")?;
        cluster_target(
            params,
            target,
            cfg,
            derive_seed(cfg.train.seed, Phase::InitialCluster, Role::Cluster),
        )
    })()
    .map_err(|e: Error| e.in_stage("cluster"))
}

/// Called with every clustering computed during fine-tuning (the initial
/// one at epoch 0 included).
pub type ClusterObserver<'a> = dyn FnMut(&ClusterSnapshot, &ClusterState) -> Result<()> + 'a;

/// Output of stage 3.
#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    pub clusters: ClusterState,
    pub record: RunRecord,
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    if prev == 0.0 {
        if cur == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        ((cur - prev) / prev).abs()
    }
}

/// Stage 3: fine-tuning with the contrastive center loss against clusters
/// that are refreshed every `recluster_period` epochs. Stops when the
/// epoch-mean `L_cc` changes by less than `convergence_tol` (relative) for
/// `convergence_window` consecutive epochs, or after
/// `finetune_max_epochs`. The returned clustering is computed on the final
/// network.
pub fn finetune(
    params: &ModelParams,
    source: &SpeakerDataset,
    target: &SpeakerDataset,
    initial: ClusterState,
    cfg: &Config,
    observer: &mut ClusterObserver,
) -> Result<FinetuneOutput> {
    (|| {
        target.ensure_no_hidden("finetune")?;
        source.ensure_no_hidden("finetune")?;
        if initial.assignments.len() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: target.len(),
                found: initial.assignments.len(),
            });
        }
        let (x, y) = labeled_view(source)?;
        let t = &cfg.train;
        let mut params = params.clone();
        let mut opt = OptimizerState::for_params(&params, t.lr, t.lr_decay);
        let mut streams = Streams::new(t.seed, Phase::Finetune);
        let mut cluster_rng = stream(t.seed, Phase::Finetune, Role::Cluster);
        let spec = loss_spec(cfg, LossSelector::Joint, t.weights());
        let mut record = RunRecord::new("finetune");
        let mut state = initial;
        let snap = |epoch, kind, s: &ClusterState| ClusterSnapshot {
            epoch,
            kind,
            objective: s.objective,
        };
        let first = snap(0, "initial", &state);
        observer(&first, &state)?;
        record.snapshots.push(first);

        let period = cfg.cluster.recluster_period;
        let mut stable = 0;
        let mut prev_cc: Option<f64> = None;
        let mut fresh = true;
        for epoch in 0..t.finetune_max_epochs {
            let plan = EpochPlan {
                labeled: Some((x, y)),
                target: Some(target),
                centers: Some((&state.assignments, &state.centers)),
                spec,
            };
            let r = run_epoch(&mut params, &mut opt, &mut streams, &plan, cfg, epoch)?;
            record.epochs.push(r);
            fresh = false;
            let done = epoch + 1;
            if let (Some(prev), Some(cc)) = (prev_cc, r.cc) {
                if relative_change(prev, cc) < t.convergence_tol {
                    stable += 1;
                } else {
                    stable = 0;
                }
            }
            prev_cc = r.cc;
            if period > 0 && done % period == 0 {
                state = cluster_target(&params, target, cfg, cluster_rng.next_u64())?;
                let s = snap(done, "recluster", &state);
                observer(&s, &state)?;
                record.snapshots.push(s);
                record.recluster_epochs.push(done);
                fresh = true;
            }
            if stable >= t.convergence_window {
                record.stop_reason = "converged";
                break;
            }
        }
        if !fresh {
            state = cluster_target(&params, target, cfg, cluster_rng.next_u64())?;
            let s = snap(record.epochs.len(), "final", &state);
            observer(&s, &state)?;
            record.snapshots.push(s);
        }
        Ok(FinetuneOutput {
            checkpoint: Checkpoint {
                params,
                optimizer: opt,
            },
            clusters: state,
            record,
        })
    })()
    .map_err(|e: Error| e.in_stage("finetune"))
}

/// Stage 4: cluster the target embeddings and attach the pseudo labels.
pub fn pseudo_label_target(
    params: &ModelParams,
    target: &SpeakerDataset,
    cfg: &Config,
) -> Result<(SpeakerDataset, ClusterState)> {
    (|| {
        target.ensure_no_hidden("pseudo-label")?;
        let state = cluster_target(
            params,
            target,
            cfg,
            derive_seed(cfg.train.seed, Phase::PseudoLabel, Role::Cluster),
        )?;
        let labeled = target.with_labels(pseudo_labels(&state))?;
        Ok((labeled, state))
    })()
    .map_err(|e: Error| e.in_stage("pseudo-label"))
}

/// Source data plus pseudo-labeled target data under one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedDataset {
    pub ids: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub source_classes: usize,
    pub total_classes: usize,
}

/// Pseudo labels are offset by the number of source classes.
pub fn combine(source: &SpeakerDataset, pseudo: Option<&SpeakerDataset>) -> Result<CombinedDataset> {
    source.ensure_no_hidden("combine")?;
    let (x, y) = labeled_view(source)?;
    let c_src = source.num_classes();
    let mut out = CombinedDataset {
        ids: source.ids().to_vec(),
        inputs: x.to_vec(),
        labels: y.to_vec(),
        source_classes: c_src,
        total_classes: c_src,
    };
    if let Some(p) = pseudo {
        p.ensure_no_hidden("combine")?;
        let (px, py) = labeled_view(p)?;
        if px.first().map(Vec::len) != x.first().map(Vec::len) && !px.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: x.first().map_or(0, Vec::len),
                found: px[0].len(),
            });
        }
        let known: std::collections::HashSet<&str> = source.ids().iter().map(String::as_str).collect();
        if let Some(dup) = p.ids().iter().find(|id| known.contains(id.as_str())) {
            return Err(Error::Labels(format!("utterance id {dup:?} occurs in both datasets")));
        }
        out.ids.extend(p.ids().iter().cloned());
        out.inputs.extend(px.iter().cloned());
        out.labels.extend(py.iter().map(|l| l + c_src));
        out.total_classes += p.num_classes();
    }
    Ok(out)
}

/// Stage 5: a fresh network trained with AAM-softmax on the combined set.
/// With `warm_start_final`, the layers and score parameters are copied from
/// `warm` and only the classifier is new.
pub fn train_final(
    combined: &CombinedDataset,
    cfg: &Config,
    warm: Option<&ModelParams>,
) -> Result<(Checkpoint, RunRecord)> {
    (|| {
        let mut ck = fresh_checkpoint(cfg, combined.total_classes, Phase::Final)?;
        if let (true, Some(w)) = (cfg.train.warm_start_final, warm) {
            if w.architecture() != ck.params.architecture() {
                return Err(Error::InvalidConfig(
                    "warm-start network does not match the configured architecture".into(),
                ));
            }
            ck.params.layers = w.layers.clone();
            ck.params.lambda = w.lambda;
            ck.params.omega = w.omega;
            ck.params.bias = w.bias;
        }
        let mut streams = Streams::new(cfg.train.seed, Phase::Final);
        let plan = EpochPlan {
            labeled: Some((&combined.inputs, &combined.labels)),
            target: None,
            centers: None,
            spec: loss_spec(cfg, LossSelector::Classification, cfg.train.weights()),
        };
        let mut record = RunRecord::new("final");
        for epoch in 0..cfg.train.final_epochs {
            let r = run_epoch(&mut ck.params, &mut ck.optimizer, &mut streams, &plan, cfg, epoch)?;
            record.epochs.push(r);
        }
        Ok((ck, record))
    })()
    .map_err(|e: Error| e.in_stage("train-final"))
}

/// Embeds the evaluation set, scores the trials and clusters the
/// embeddings with K centers for the cluster-quality metrics.
pub fn evaluate_model(
    params: &ModelParams,
    eval_set: &SpeakerDataset,
    hidden: &HiddenLabels,
    trials: &TrialList,
    cfg: &Config,
) -> Result<MetricsReport> {
    let emb = embed_all(params, eval_set.utterances())?;
    let state = kmeans_cosine(
        &emb,
        &cfg.cluster.kmeans(),
        derive_seed(cfg.train.seed, Phase::Eval, Role::Cluster),
    )?;
    metrics::evaluate(
        eval_set.ids(),
        &emb,
        hidden,
        &state.assignments,
        trials,
        &cfg.metrics.dcf(),
    )
}

/// Target-trial EER of a model.
pub fn target_eer(params: &ModelParams, eval_set: &SpeakerDataset, trials: &TrialList) -> Result<f64> {
    let emb = embed_all(params, eval_set.utterances())?;
    metrics::eer(&metrics::score_trials(eval_set.ids(), &emb, trials)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub metrics: MetricsReport,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NmiPoint {
    pub epoch: usize,
    pub kind: &'static str,
    pub nmi: f64,
    pub purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneSummary {
    pub metrics: MetricsReport,
    pub epochs_run: usize,
    pub stop_reason: &'static str,
    pub recluster_epochs: Vec<usize>,
    pub nmi_initial: f64,
    pub nmi_final: f64,
    pub cluster_trajectory: Vec<NmiPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalSummary {
    pub metrics: MetricsReport,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub source_classes: usize,
    pub total_classes: usize,
    pub pseudo_purity: f64,
    pub pseudo_nmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageResults {
    pub baseline: StageSummary,
    pub csl: StageSummary,
    pub pretrain: StageSummary,
    pub finetune: FinetuneSummary,
    #[serde(rename = "final")]
    pub final_: FinalSummary,
}

/// The results document of a full run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Results {
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<&'static str, u64>,
    pub stages: StageResults,
    pub config: Config,
}

impl Results {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("results serialize");
        v.push(b'\n');
        v
    }
}

/// Wall-clock seconds per stage; kept out of the results document so that
/// it stays byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings(pub BTreeMap<&'static str, f64>);

fn summary(metrics: MetricsReport, record: &RunRecord) -> StageSummary {
    StageSummary {
        metrics,
        epochs_run: record.epochs.len(),
        final_loss: record.epochs.last().map(|e| e.total),
    }
}

struct Sink<'a> {
    out: Option<&'a Path>,
}

impl Sink<'_> {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.out.map(|d| d.join(name))
    }

    fn bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        match self.path(name) {
            Some(p) => write_atomic(&p, bytes),
            None => Ok(()),
        }
    }

    fn checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        self.bytes(name, &ck.to_bytes())
    }

    fn clusters(&self, name: &str, state: &ClusterState, ids: &[String]) -> Result<()> {
        self.bytes(name, state.to_text(ids)?.as_bytes())
    }
}

/// Runs all stages, writing every artifact into `out` when given.
pub fn run_full(cfg: &Config, out: Option<&Path>) -> Result<(Results, Timings)> {
    cfg.validate()?;
    let sink = Sink { out };
    let mut timings = Timings::default();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Timings| {
        timings.0.insert(name, clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let bench = generate_benchmark(cfg).map_err(|e| e.in_stage("gen-data"))?;
    sink.bytes(files::SOURCE, bench.source.to_text().as_bytes())?;
    sink.bytes(files::TARGET, bench.target.to_text().as_bytes())?;
    if let Some(p) = sink.path(files::TRIALS) {
        crate::datagen::write_trials(&bench.trials, &p)?;
    }
    let Benchmark {
        source,
        target,
        trials,
    } = bench;
    let eval_set = target.clone();
    let (target, hidden) = target.split_hidden();
    let hidden = hidden.ok_or_else(|| Error::Labels("target data has no evaluation labels".into()))?;
    lap("gen-data", &mut timings);

    let evaluate = |params: &ModelParams, stage: &'static str| {
        evaluate_model(params, &eval_set, &hidden, &trials, cfg).map_err(|e| e.in_stage(stage))
    };

    let mut pre = Vec::new();
    for (regime, file) in [
        (Regime::SourceOnly, files::BASELINE),
        (Regime::ContrastiveOnly, files::CSL),
        (Regime::Joint, files::PRETRAIN),
    ] {
        let (ck, record) = pretrain_regime(&source, &target, cfg, regime)?;
        sink.checkpoint(file, &ck)?;
        sink.bytes(&files::record(regime.stage_name()), &record.to_json())?;
        let m = evaluate(&ck.params, regime.stage_name())?;
        pre.push((ck, summary(m, &record)));
        lap(regime.stage_name(), &mut timings);
    }
    let pretrained = pre[2].0.params.clone();

    let initial = initial_clustering(&pretrained, &target, cfg)?;
    sink.clusters(files::CLUSTERS_INITIAL, &initial, target.ids())?;
    lap("cluster", &mut timings);

    let mut trajectory = Vec::new();
    let mut observer = |snap: &ClusterSnapshot, state: &ClusterState| -> Result<()> {
        trajectory.push(NmiPoint {
            epoch: snap.epoch,
            kind: snap.kind,
            nmi: metrics::hidden_nmi(&hidden, &state.assignments)?,
            purity: metrics::hidden_purity(&hidden, &state.assignments)?,
        });
        Ok(())
    };
    let ft = finetune(&pretrained, &source, &target, initial, cfg, &mut observer)?;
    sink.checkpoint(files::FINETUNE, &ft.checkpoint)?;
    sink.clusters(files::CLUSTERS_FINETUNE, &ft.clusters, target.ids())?;
    sink.bytes(&files::record("finetune"), &ft.record.to_json())?;
    let ft_metrics = evaluate(&ft.checkpoint.params, "finetune")?;
    lap("finetune", &mut timings);

    let (pseudo, pseudo_state) = pseudo_label_target(&ft.checkpoint.params, &target, cfg)?;
    sink.clusters(files::PSEUDO, &pseudo_state, target.ids())?;
    sink.bytes(files::TARGET_PSEUDO, pseudo.to_text().as_bytes())?;
    lap("pseudo-label", &mut timings);

    let combined = combine(&source, Some(&pseudo)).map_err(|e| e.in_stage("combine"))?;
    let (final_ck, final_record) = train_final(&combined, cfg, Some(&ft.checkpoint.params))?;
    sink.checkpoint(files::FINAL, &final_ck)?;
    sink.bytes(&files::record("final"), &final_record.to_json())?;
    let final_metrics = evaluate(&final_ck.params, "final")?;
    lap("train-final", &mut timings);

    let nmi_initial = trajectory.first().map_or(f64::NAN, |p| p.nmi);
    let nmi_final = trajectory.last().map_or(f64::NAN, |p| p.nmi);
    let mut pre = pre.into_iter().map(|(_, s)| s);
    let results = Results {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        seeds: data_seeds(cfg.train.seed),
        stages: StageResults {
            baseline: pre.next().unwrap(),
            csl: pre.next().unwrap(),
            pretrain: pre.next().unwrap(),
            finetune: FinetuneSummary {
                metrics: ft_metrics,
                epochs_run: ft.record.epochs.len(),
                stop_reason: ft.record.stop_reason,
                recluster_epochs: ft.record.recluster_epochs.clone(),
                nmi_initial,
                nmi_final,
                cluster_trajectory: trajectory,
            },
            final_: FinalSummary {
                metrics: final_metrics,
                epochs_run: final_record.epochs.len(),
                final_loss: final_record.epochs.last().map(|e| e.total),
                source_classes: combined.source_classes,
                total_classes: combined.total_classes,
                pseudo_purity: metrics::hidden_purity(&hidden, &pseudo_state.assignments)?,
                pseudo_nmi: metrics::hidden_nmi(&hidden, &pseudo_state.assignments)?,
            },
        },
        config: cfg.clone(),
    };
    sink.bytes(files::RESULTS, &results.to_json())?;
    if let Some(p) = sink.path(files::TIMINGS) {
        let mut v = serde_json::to_vec_pretty(&timings).expect("timings serialize");
        v.push(b'\n');
        write_atomic(&p, &v)?;
    }
    Ok((results, timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.data.source_speakers = 6;
        c.data.target_speakers = 4;
        c.data.utts_per_speaker = 5;
        c.data.d_in = 8;
        c.data.target_trials = 20;
        c.data.nontarget_trials = 20;
        c.model.hidden_dim = 8;
        c.model.emb_dim = 4;
        c.train.pretrain_epochs = 2;
        c.train.finetune_max_epochs = 4;
        c.train.final_epochs = 2;
        c.train.batch_supervised = 8;
        c.train.batch_csl = 6;
        c.cluster.k = 4;
        c.cluster.recluster_period = 2;
        c.cluster.n_init = 2;
        c
    }

    #[test]
    fn write_atomic_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x"), b"").is_err());
    }

    #[test]
    fn target_batches_cycle_through_full_passes() {
        let mut s = Streams::new(1, Phase::Pretrain);
        let mut seen = Vec::new();
        for _ in 0..5 {
            seen.extend(s.next_target_batch(10, 4));
        }
        for pass in seen.chunks(10) {
            let mut p = pass.to_vec();
            p.sort_unstable();
            assert_eq!(p, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn relative_change_cases() {
        assert_eq!(relative_change(2.0, 2.0), 0.0);
        assert_eq!(relative_change(2.0, 1.0), 0.5);
        assert_eq!(relative_change(0.0, 0.0), 0.0);
        assert!(relative_change(0.0, 1.0).is_infinite());
    }

    #[test]
    fn benchmark_is_deterministic_and_split() {
        let c = tiny();
        let a = generate_benchmark(&c).unwrap();
        let b = generate_benchmark(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source.num_classes(), 6);
        assert!(a.target.has_hidden_labels());
        assert!(a.target.speaker_labels().is_none());
        assert_eq!(a.trials.len(), 40);
    }

    #[test]
    fn training_stages_refuse_hidden_labels() {
        let c = tiny();
        let b = generate_benchmark(&c).unwrap();
        let err = pretrain(&b.source, &b.target, &c).unwrap_err();
        assert!(matches!(err.root(), Error::HiddenLabelsPresent(_)), "{err}");
        let (ck, _) = {
            let (t, _) = b.target.clone().split_hidden();
            pretrain(&b.source, &t, &c).unwrap()
        };
        assert!(matches!(
            initial_clustering(&ck.params, &b.target, &c).unwrap_err().root(),
            Error::HiddenLabelsPresent(_)
        ));
        assert!(matches!(
            pseudo_label_target(&ck.params, &b.target, &c).unwrap_err().root(),
            Error::HiddenLabelsPresent(_)
        ));
    }

    #[test]
    fn combine_offsets_pseudo_labels() {
        let c = tiny();
        let b = generate_benchmark(&c).unwrap();
        let (t, _) = b.target.split_hidden();
        let pseudo = t.with_labels((0..t.len()).map(|i| i % 3).collect()).unwrap();
        let comb = combine(&b.source, Some(&pseudo)).unwrap();
        assert_eq!(comb.total_classes, 9);
        assert_eq!(comb.source_classes, 6);
        assert!(comb.labels[b.source.len()..].iter().all(|&l| l >= 6));
        let only = combine(&b.source, None).unwrap();
        assert_eq!(only.total_classes, 6);
        assert_eq!(only.inputs, b.source.utterances());
        assert!(matches!(combine(&b.source, Some(&b.source)), Err(Error::Labels(_))));
    }

    #[test]
    fn zero_alpha_pretrain_equals_baseline() {
        let mut c = tiny();
        c.train.alpha = 0.0;
        let b = generate_benchmark(&c).unwrap();
        let (t, _) = b.target.split_hidden();
        let (p, _) = pretrain_regime(&b.source, &t, &c, Regime::Joint).unwrap();
        let (s, _) = pretrain_regime(&b.source, &t, &c, Regime::SourceOnly).unwrap();
        assert_eq!(p, s);
    }

    #[test]
    fn finetune_reclusters_on_multiples_of_period() {
        let mut c = tiny();
        c.train.convergence_tol = 1e-300;
        let b = generate_benchmark(&c).unwrap();
        let (t, _) = b.target.split_hidden();
        let (ck, _) = pretrain(&b.source, &t, &c).unwrap();
        let init = initial_clustering(&ck.params, &t, &c).unwrap();
        let mut seen = Vec::new();
        let mut obs = |s: &ClusterSnapshot, _: &ClusterState| {
            seen.push(s.epoch);
            Ok(())
        };
        let out = finetune(&ck.params, &b.source, &t, init, &c, &mut obs).unwrap();
        assert_eq!(out.record.recluster_epochs, vec![2, 4]);
        assert_eq!(seen, vec![0, 2, 4]);
        assert_eq!(out.record.stop_reason, "max_epochs");
        assert_eq!(out.record.epochs.len(), 4);
    }
}
