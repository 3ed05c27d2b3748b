//! The ensemble model: a shared backbone trained once on the full dataset
//! and then frozen, plus M prediction heads trained sequentially on bootstrap
//! replicas. Online prediction post-processes every head's raw output into a
//! feasible strategy and keeps the cost argmin. The single multi-task
//! network baseline reuses the same stack with nothing frozen.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{featurize, Dataset, LabeledSample, SamplingRanges};
use crate::mec::{check_feasible, total_cost, Environment, OffloadStrategy};
use crate::nn::{
    load_network, save_network, train, Activation, DenseLayer, MultiTaskOutput, Network, NnError,
    TrainHyper, TrainSample,
};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemtlError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("bundle error: {0}")]
    Bundle(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Layer widths; the input and output widths follow from N.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub backbone_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            backbone_hidden: vec![64, 64],
            head_hidden: vec![32],
        }
    }
}

impl ArchSpec {
    pub fn backbone_out(&self) -> usize {
        *self.backbone_hidden.last().expect("backbone has layers")
    }

    /// Relu stack from the feature width to the last hidden width.
    pub fn build_backbone(&self, input_dim: usize, seed: u64) -> Network {
        let mut rng = seeded(seed, 0);
        let mut dims = vec![input_dim];
        dims.extend(&self.backbone_hidden);
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::new_seeded(w[0], w[1], Activation::Relu, &mut rng))
            .collect();
        Network::new(layers)
    }

    /// Relu hidden layers plus the 2N identity output layer.
    pub fn build_head(&self, n_mts: usize, seed: u64, stream: u64) -> Network {
        let mut rng = seeded(seed, stream);
        let mut dims = vec![self.backbone_out()];
        dims.extend(&self.head_hidden);
        let mut layers: Vec<DenseLayer> = dims
            .windows(2)
            .map(|w| DenseLayer::new_seeded(w[0], w[1], Activation::Relu, &mut rng))
            .collect();
        layers.push(DenseLayer::new_seeded(
            *dims.last().unwrap(),
            2 * n_mts,
            Activation::Identity,
            &mut rng,
        ));
        Network::new(layers)
    }
}

fn seeded(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mtfnn,
    Memtl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemtlModel {
    pub backbone: Network,
    pub heads: Vec<Network>,
    pub kind: ModelKind,
    pub n_mts: usize,
    pub arch: ArchSpec,
    pub seed: u64,
}

impl MemtlModel {
    pub fn m_heads(&self) -> usize {
        self.heads.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Per-epoch loss of the joint backbone pass (or the whole MTFNN).
    pub backbone_losses: Vec<f64>,
    /// Per-epoch loss per head, in training order.
    pub head_losses: Vec<Vec<f64>>,
}

fn as_train_samples(ds: &Dataset) -> Vec<TrainSample<'_>> {
    ds.samples
        .iter()
        .map(|s| TrainSample {
            x: &s.x,
            d: &s.d_star,
            r: &s.r_star,
        })
        .collect()
}

/// Train the backbone jointly with a provisional head on the full dataset,
/// discard the head, freeze the backbone. Returns the frozen backbone, the
/// joint loss curve and the trained provisional head (callers discard it;
/// tests compare it against the reinitialized one).
pub fn train_backbone(
    arch: &ArchSpec,
    train_ds: &Dataset,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Network, Vec<f64>, Network), MemtlError> {
    let n = train_ds.n_mts();
    let backbone = arch.build_backbone(train_ds.feature_dim(), seed);
    let head = arch.build_head(n, seed, 1);
    let n_backbone_layers = backbone.layers.len();
    let mut joint = backbone.concat(head);
    let samples = as_train_samples(train_ds);
    let mut h = hyper.clone();
    h.shuffle_seed = derive_shuffle_seed(seed, 0);
    let losses = train(&mut joint, &samples, &h)?;
    let provisional = joint.split_off(n_backbone_layers);
    let mut backbone = joint;
    backbone.set_trainable(false);
    Ok((backbone, losses, provisional))
}

/// Train each head on its bootstrap replica behind the frozen backbone.
/// Heads are trained sequentially in index order; the backbone and the other
/// heads are untouched during each pass.
pub fn train_heads(
    backbone: &Network,
    arch: &ArchSpec,
    replicas: &[Dataset],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Vec<Network>, Vec<Vec<f64>>), MemtlError> {
    let mut heads = Vec::with_capacity(replicas.len());
    let mut losses = Vec::with_capacity(replicas.len());
    for (m, replica) in replicas.iter().enumerate() {
        let n = replica.n_mts();
        let head = arch.build_head(n, seed, 2 + m as u64);
        let n_backbone_layers = backbone.layers.len();
        let mut joint = backbone.clone().concat(head);
        let samples = as_train_samples(replica);
        let mut h = hyper.clone();
        h.shuffle_seed = derive_shuffle_seed(seed, 1 + m as u64);
        let curve = train(&mut joint, &samples, &h)?;
        let trained_head = joint.split_off(n_backbone_layers);
        debug_assert_eq!(joint.param_bytes(), backbone.param_bytes());
        heads.push(trained_head);
        losses.push(curve);
    }
    Ok((heads, losses))
}

fn derive_shuffle_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(stream)
}

/// Full offline training: bootstrap replicas, backbone pass, head passes.
pub fn train_memtl(
    arch: &ArchSpec,
    train_ds: &Dataset,
    m_heads: usize,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(MemtlModel, TrainingLog), MemtlError> {
    let replicas = crate::dataset::bootstrap(train_ds, m_heads, seed.wrapping_add(0x626f6f74));
    let (backbone, backbone_losses, _provisional) = train_backbone(arch, train_ds, hyper, seed)?;
    let (heads, head_losses) = train_heads(&backbone, arch, &replicas, hyper, seed)?;
    Ok((
        MemtlModel {
            backbone,
            heads,
            kind: ModelKind::Memtl,
            n_mts: train_ds.n_mts(),
            arch: arch.clone(),
            seed,
        },
        TrainingLog {
            backbone_losses,
            head_losses,
        },
    ))
}

/// Baseline: identical stack to backbone + one head, everything trainable,
/// trained once on the full dataset.
pub fn train_mtfnn(
    arch: &ArchSpec,
    train_ds: &Dataset,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(MemtlModel, TrainingLog), MemtlError> {
    let n = train_ds.n_mts();
    let backbone = arch.build_backbone(train_ds.feature_dim(), seed);
    let head = arch.build_head(n, seed, 1);
    let n_backbone_layers = backbone.layers.len();
    let mut joint = backbone.concat(head);
    let samples = as_train_samples(train_ds);
    let mut h = hyper.clone();
    h.shuffle_seed = derive_shuffle_seed(seed, 0);
    let losses = train(&mut joint, &samples, &h)?;
    let head = joint.split_off(n_backbone_layers);
    Ok((
        MemtlModel {
            backbone: joint,
            heads: vec![head],
            kind: ModelKind::Mtfnn,
            n_mts: n,
            arch: arch.clone(),
            seed,
        },
        TrainingLog {
            backbone_losses: losses,
            head_losses: vec![],
        },
    ))
}

/// Map a raw multi-task output onto a strategy satisfying C1/C3/C4:
/// threshold the logits at 0.5 probability, zero the locals, clamp the
/// offloaders' allocations to >= 0 and renormalize them to sum to 1
/// (uniform fallback when everything clamps to zero).
pub fn postprocess(raw: &MultiTaskOutput) -> OffloadStrategy {
    let n = raw.class_logits.len();
    let d: Vec<u8> = raw.class_logits.iter().map(|&z| (z >= 0.0) as u8).collect();
    let mut r = vec![0.0; n];
    let offloaders: Vec<usize> = (0..n).filter(|&i| d[i] == 1).collect();
    if !offloaders.is_empty() {
        let clamped: Vec<f64> = offloaders
            .iter()
            .map(|&i| raw.reg_values[i].max(0.0))
            .collect();
        let sum: f64 = clamped.iter().sum();
        if sum > 0.0 {
            for (j, &i) in offloaders.iter().enumerate() {
                r[i] = clamped[j] / sum;
            }
        } else {
            let share = 1.0 / offloaders.len() as f64;
            for &i in &offloaders {
                r[i] = share;
            }
        }
    }
    OffloadStrategy { d, r }
}

/// One head's post-processed prediction, with the evaluated cost.
#[derive(Debug, Clone)]
pub struct HeadStrategy {
    pub strategy: OffloadStrategy,
    pub raw: MultiTaskOutput,
    pub head_index: usize,
    /// total_cost of the strategy; +inf when an offloader got a zero
    /// allocation (unevaluable).
    pub cost: f64,
    /// C2 satisfied (C1/C3/C4 hold by construction).
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub best: HeadStrategy,
    pub all: Vec<HeadStrategy>,
    /// Set when every head violated C2 and the flagged minimum-cost violator
    /// was returned.
    pub all_infeasible: bool,
}

/// Run the backbone once and every head once on a precomputed feature
/// vector, post-process, cost each candidate on `env`, and return the cost
/// argmin among C2-feasible candidates (ties to the lowest head index).
pub fn predict_ensemble_features(
    model: &MemtlModel,
    env: &Environment,
    x: &[f64],
) -> Result<EnsemblePrediction, MemtlError> {
    let backbone_cache = model.backbone.forward(x)?;
    let latent = backbone_cache.output();
    let mut all = Vec::with_capacity(model.heads.len());
    for (idx, head) in model.heads.iter().enumerate() {
        let cache = head.forward(latent)?;
        let raw = MultiTaskOutput::from_output(cache.output(), model.n_mts);
        let strategy = postprocess(&raw);
        let (cost, feasible) = match total_cost(env, &strategy) {
            Ok(c) => (c, check_feasible(env, &strategy).feasible()),
            Err(_) => (f64::INFINITY, false),
        };
        all.push(HeadStrategy {
            strategy,
            raw,
            head_index: idx,
            cost,
            feasible,
        });
    }
    let pick = |candidates: &[&HeadStrategy]| -> usize {
        let mut best = 0;
        for (j, c) in candidates.iter().enumerate().skip(1) {
            if c.cost < candidates[best].cost {
                best = j;
            }
        }
        candidates[best].head_index
    };
    let feasible: Vec<&HeadStrategy> = all.iter().filter(|h| h.feasible).collect();
    let (best_idx, all_infeasible) = if feasible.is_empty() {
        let refs: Vec<&HeadStrategy> = all.iter().collect();
        (pick(&refs), true)
    } else {
        (pick(&feasible), false)
    };
    Ok(EnsemblePrediction {
        best: all[best_idx].clone(),
        all,
        all_infeasible,
    })
}

/// Featurize and predict on a raw environment.
pub fn predict_ensemble(
    model: &MemtlModel,
    env: &Environment,
    ranges: &SamplingRanges,
) -> Result<EnsemblePrediction, MemtlError> {
    let x = featurize(env, ranges)?;
    predict_ensemble_features(model, env, &x)
}

/// Predict on a stored labeled sample using its frozen features.
pub fn predict_sample(model: &MemtlModel, s: &LabeledSample) -> Result<EnsemblePrediction, MemtlError> {
    predict_ensemble_features(model, &s.raw_env, &s.x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub n_mts: usize,
    pub m_heads: usize,
    pub arch: ArchSpec,
    pub seed: u64,
    pub dataset_digest: String,
}

/// Write a model bundle: manifest + backbone file + one file per head.
pub fn save_bundle(model: &MemtlModel, dir: &Path, dataset_digest: &str) -> Result<(), MemtlError> {
    std::fs::create_dir_all(dir)?;
    let manifest = BundleManifest {
        format_version: BUNDLE_FORMAT_VERSION,
        kind: model.kind,
        n_mts: model.n_mts,
        m_heads: model.heads.len(),
        arch: model.arch.clone(),
        seed: model.seed,
        dataset_digest: dataset_digest.to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| MemtlError::Bundle(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    save_network(&model.backbone, &dir.join("backbone.nn"))?;
    for (i, head) in model.heads.iter().enumerate() {
        save_network(head, &dir.join(format!("head_{i:03}.nn")))?;
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<(MemtlModel, BundleManifest), MemtlError> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| MemtlError::Bundle(format!("{}: {e}", manifest_path.display())))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| MemtlError::Bundle(e.to_string()))?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(MemtlError::Bundle(format!(
            "unsupported bundle version {}",
            manifest.format_version
        )));
    }
    let backbone = load_network(&dir.join("backbone.nn"))?;
    let mut heads = Vec::with_capacity(manifest.m_heads);
    for i in 0..manifest.m_heads {
        heads.push(load_network(&dir.join(format!("head_{i:03}.nn")))?);
    }
    Ok((
        MemtlModel {
            backbone,
            heads,
            kind: manifest.kind,
            n_mts: manifest.n_mts,
            arch: manifest.arch.clone(),
            seed: manifest.seed,
        },
        manifest,
    ))
}

/// Total serialized size of a bundle directory, bytes.
pub fn bundle_size_bytes(dir: &Path) -> Result<u64, MemtlError> {
    let mut total = 0;
    for entry in std::fs::read_dir(dir)? {
        total += entry?.metadata()?.len();
    }
    Ok(total)
}

/// FNV-1a content digest used to tie bundles to their training data.
pub fn fnv1a_digest(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, SamplingRanges};

    fn small_ds(n: usize, t: usize, seed: u64) -> Dataset {
        generate_dataset(&SamplingRanges::default_for(n, seed), t, seed).unwrap()
    }

    fn quick_hyper() -> TrainHyper {
        TrainHyper {
            epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn backbone_is_frozen_and_head_reinitialized() {
        let ds = small_ds(2, 60, 1);
        let arch = ArchSpec::default();
        let (backbone, losses, provisional) =
            train_backbone(&arch, &ds, &quick_hyper(), 7).unwrap();
        assert!(backbone.layers.iter().all(|l| !l.trainable));
        assert_eq!(losses.len(), 3);
        let fresh = arch.build_head(2, 7, 2);
        assert_ne!(fresh.param_bytes(), provisional.param_bytes());
    }

    #[test]
    fn backbone_training_is_deterministic() {
        let ds = small_ds(2, 60, 1);
        let arch = ArchSpec::default();
        let (a, _, _) = train_backbone(&arch, &ds, &quick_hyper(), 7).unwrap();
        let (b, _, _) = train_backbone(&arch, &ds, &quick_hyper(), 7).unwrap();
        assert_eq!(a.param_bytes(), b.param_bytes());
    }

    #[test]
    fn head_training_leaves_backbone_and_other_heads_untouched() {
        let ds = small_ds(2, 60, 2);
        let arch = ArchSpec::default();
        let hyper = quick_hyper();
        let (backbone, _, _) = train_backbone(&arch, &ds, &hyper, 3).unwrap();
        let backbone_bytes = backbone.param_bytes();
        let replicas = crate::dataset::bootstrap(&ds, 3, 11);
        // Train heads one at a time and check earlier heads are untouched:
        // training head m uses only replica m, so prefix results must match.
        let (heads_all, _) = train_heads(&backbone, &arch, &replicas, &hyper, 3).unwrap();
        let (heads_prefix, _) = train_heads(&backbone, &arch, &replicas[..2], &hyper, 3).unwrap();
        assert_eq!(heads_all[0].param_bytes(), heads_prefix[0].param_bytes());
        assert_eq!(heads_all[1].param_bytes(), heads_prefix[1].param_bytes());
        assert_eq!(backbone.param_bytes(), backbone_bytes);
    }

    #[test]
    fn postprocess_all_local() {
        let raw = MultiTaskOutput {
            class_logits: vec![-10.0, -10.0],
            reg_values: vec![0.4, 0.7],
        };
        let s = postprocess(&raw);
        assert_eq!(s.d, vec![0, 0]);
        assert_eq!(s.r, vec![0.0, 0.0]);
    }

    #[test]
    fn postprocess_single_offloader_gets_full_budget() {
        let raw = MultiTaskOutput {
            class_logits: vec![3.0, -1.0],
            reg_values: vec![0.2, 0.9],
        };
        let s = postprocess(&raw);
        assert_eq!(s.d, vec![1, 0]);
        assert_eq!(s.r, vec![1.0, 0.0]);
    }

    #[test]
    fn postprocess_renormalizes_pair() {
        let raw = MultiTaskOutput {
            class_logits: vec![1.0, 1.0],
            reg_values: vec![0.2, 0.6],
        };
        let s = postprocess(&raw);
        assert!((s.r[0] - 0.25).abs() < 1e-12);
        assert!((s.r[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn postprocess_uniform_fallback() {
        let raw = MultiTaskOutput {
            class_logits: vec![1.0, 1.0],
            reg_values: vec![-0.3, -0.1],
        };
        let s = postprocess(&raw);
        assert_eq!(s.r, vec![0.5, 0.5]);
    }

    #[test]
    fn ensemble_selection_is_cost_argmin_over_heads() {
        let ds = small_ds(2, 80, 5);
        let arch = ArchSpec::default();
        let (model, _) = train_memtl(&arch, &ds, 3, &quick_hyper(), 5).unwrap();
        for s in ds.samples.iter().take(20) {
            let pred = predict_sample(&model, s).unwrap();
            for h in &pred.all {
                if h.feasible || pred.all_infeasible {
                    assert!(pred.best.cost <= h.cost + 1e-12);
                }
            }
            // Pure inference: repeated evaluation is identical.
            let again = predict_sample(&model, s).unwrap();
            assert_eq!(pred.best.strategy, again.best.strategy);
            assert_eq!(pred.best.head_index, again.best.head_index);
        }
    }

    #[test]
    fn memtl_backbone_unchanged_by_head_training() {
        let ds = small_ds(2, 60, 6);
        let arch = ArchSpec::default();
        let hyper = quick_hyper();
        let (backbone, _, _) = train_backbone(&arch, &ds, &hyper, 6).unwrap();
        let before = backbone.param_bytes();
        let replicas = crate::dataset::bootstrap(&ds, 2, 1);
        let _ = train_heads(&backbone, &arch, &replicas, &hyper, 6).unwrap();
        assert_eq!(backbone.param_bytes(), before);
    }

    #[test]
    fn mtfnn_matches_backbone_plus_head_architecture() {
        let ds = small_ds(2, 60, 8);
        let arch = ArchSpec::default();
        let (model, _) = train_mtfnn(&arch, &ds, &quick_hyper(), 8).unwrap();
        assert_eq!(model.heads.len(), 1);
        assert_eq!(model.backbone.layers.len(), arch.backbone_hidden.len());
        assert_eq!(model.heads[0].layers.len(), arch.head_hidden.len() + 1);
        assert_eq!(model.heads[0].out_dim(), 2 * ds.n_mts());
        // Deterministic.
        let (model2, _) = train_mtfnn(&arch, &ds, &quick_hyper(), 8).unwrap();
        assert_eq!(model.backbone.param_bytes(), model2.backbone.param_bytes());
        assert_eq!(model.heads[0].param_bytes(), model2.heads[0].param_bytes());
    }

    #[test]
    fn bundle_round_trip() {
        let ds = small_ds(2, 60, 9);
        let arch = ArchSpec::default();
        let (model, _) = train_memtl(&arch, &ds, 2, &quick_hyper(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&model, dir.path(), "digest123").unwrap();
        let (back, manifest) = load_bundle(dir.path()).unwrap();
        assert_eq!(manifest.m_heads, 2);
        assert_eq!(manifest.dataset_digest, "digest123");
        assert_eq!(model.backbone.param_bytes(), back.backbone.param_bytes());
        for (a, b) in model.heads.iter().zip(&back.heads) {
            assert_eq!(a.param_bytes(), b.param_bytes());
        }
    }

    #[test]
    fn bundle_size_grows_affinely_in_heads() {
        let ds = small_ds(2, 40, 10);
        let arch = ArchSpec::default();
        let hyper = quick_hyper();
        let mut sizes = Vec::new();
        for m in 1..=4 {
            let (model, _) = train_memtl(&arch, &ds, m, &hyper, 10).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_bundle(&model, dir.path(), "d").unwrap();
            sizes.push(bundle_size_bytes(dir.path()).unwrap());
        }
        let increments: Vec<i64> = sizes.windows(2).map(|w| w[1] as i64 - w[0] as i64).collect();
        assert!(increments.iter().all(|&d| d > 0));
        assert!(increments.windows(2).all(|w| w[0] == w[1]), "{increments:?}");
    }
}
