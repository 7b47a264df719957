//! Episodic N-way K-shot evaluation: sample a task, train a fresh classifier
//! head on the frozen backbone's replicated features, smooth the query
//! predictions with label propagation, and aggregate 600-episode statistics.
//!
//! Query ground truth is read in exactly one place, the final accuracy
//! comparison; the smoothing and forward paths never receive it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::labelprop::{self, LabelPropConfig, SupportSet};
use crate::model::Backbone;
use crate::optim::{OptimizerHyper, OptimizerState};
use crate::real::Real;
use crate::tape::{Bound, Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    /// Head training epochs; `None` picks 500 for 1-shot and 100 otherwise.
    pub head_epochs: Option<usize>,
    pub head_lr: f64,
    pub head_momentum: f64,
    pub head_dampening: f64,
    pub head_weight_decay: f64,
    pub head_batch: usize,
    /// Hidden width multiplier: hidden = mult * input features.
    pub head_hidden_mult: usize,
    pub head_hidden_layers: usize,
    pub smoothing: bool,
    /// Unfreeze the backbone during episode head training (ablation wiring).
    pub finetune: bool,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            ways: 5,
            shots: 5,
            queries_per_class: 15,
            episodes: 600,
            head_epochs: None,
            head_lr: 0.01,
            head_momentum: 0.9,
            head_dampening: 0.9,
            head_weight_decay: 0.001,
            head_batch: 4,
            head_hidden_mult: 4,
            head_hidden_layers: 3,
            smoothing: true,
            finetune: false,
        }
    }
}

impl FewShotConfig {
    pub fn resolved_head_epochs(&self) -> usize {
        self.head_epochs.unwrap_or(if self.shots == 1 { 500 } else { 100 })
    }
}

/// One N-way K-shot task. Labels are episode-local (0..ways); query labels
/// exist only for scoring.
#[derive(Clone, Debug)]
pub struct Episode<F> {
    pub support: Vec<(Tensor<F>, usize)>,
    pub query: Vec<(Tensor<F>, usize)>,
    pub ways: usize,
}

/// Sample classes without replacement, then support/query samples without
/// replacement within each class. Deterministic under the rng.
pub fn sample_episode<F: Real>(
    dataset: &Dataset<F>,
    ways: usize,
    shots: usize,
    queries_per_class: usize,
    rng: &mut impl Rng,
) -> Result<Episode<F>> {
    if ways == 0 || shots == 0 || queries_per_class == 0 {
        return Err(Error::Parameter("ways, shots and queries_per_class must be positive".into()));
    }
    if dataset.n_classes() < ways {
        return Err(Error::Data(format!(
            "dataset has {} classes, episode needs {ways}",
            dataset.n_classes()
        )));
    }
    let mut class_ids: Vec<usize> = (0..dataset.n_classes()).collect();
    class_ids.shuffle(rng);
    class_ids.truncate(ways);
    let by_class = dataset.class_indices();
    let need = shots + queries_per_class;
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries_per_class);
    for (episode_label, &class_id) in class_ids.iter().enumerate() {
        let mut pool = by_class[class_id].clone();
        if pool.len() < need {
            return Err(Error::Data(format!(
                "class {:?} has {} samples, episode needs {need}",
                dataset.class_names()[class_id],
                pool.len()
            )));
        }
        pool.shuffle(rng);
        for &idx in &pool[..shots] {
            support.push((dataset.record(idx).pixels.clone(), episode_label));
        }
        for &idx in &pool[shots..need] {
            query.push((dataset.record(idx).pixels.clone(), episode_label));
        }
    }
    Ok(Episode { support, query, ways })
}

/// Read-shared view of a trained backbone plus the preprocessing that turns a
/// dataset record into a model input.
pub struct FrozenBackbone<'a, F: Real> {
    pub backbone: &'a Backbone<F>,
    pub store: &'a ParamStore<F>,
    pub mean: &'a [f64],
    pub std: &'a [f64],
}

impl<F: Real> FrozenBackbone<'_, F> {
    /// Replicated features, one `[replication * d]` row per image. The
    /// backbone parameters are bound without gradients.
    pub fn features(&self, images: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let res = self.backbone.config().input_res;
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let input = data::resize_normalize(img, res, self.mean, self.std)?;
            let mut tape = Tape::new();
            let bound = tape.bind(self.store, false);
            let z = self.backbone.forward_single(&mut tape, &bound, &input)?;
            out.push(tape.value(z).clone());
        }
        Ok(out)
    }
}

/// The one-stream embedding is the first `d`-wide slice of the replicated
/// feature row (the copies are identical).
pub fn embedding_from_features<F: Real>(features: &Tensor<F>, d: usize) -> Vec<f64> {
    features.data()[..d].iter().map(|v| v.as_f64()).collect()
}

/// ReLU MLP classifier over replicated features.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    layers: Vec<(ParamId, ParamId)>,
    pub in_dim: usize,
    pub ways: usize,
}

impl ClassifierHead {
    pub fn new<F: Real>(
        in_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        ways: usize,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut sizes = vec![in_dim];
        sizes.extend(std::iter::repeat(hidden).take(hidden_layers));
        sizes.push(ways);
        let mut layers = Vec::new();
        for i in 0..sizes.len() - 1 {
            let std = (2.0 / sizes[i] as f64).sqrt();
            let w = store.register(
                format!("classifier.linear{i}.weight"),
                Tensor::rand_normal(&[sizes[i], sizes[i + 1]], 0.0, std, rng),
            )?;
            let b =
                store.register(format!("classifier.linear{i}.bias"), Tensor::zeros(&[sizes[i + 1]]))?;
            layers.push((w, b));
        }
        Ok(ClassifierHead { layers, in_dim, ways })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            cur = tape.matmul(cur, bound.var(*w))?;
            cur = tape.add_row(cur, bound.var(*b))?;
            if i < last {
                cur = tape.relu(cur)?;
            }
        }
        Ok(cur)
    }
}

/// Mean cross-entropy of logits `[B, C]` against integer targets.
pub fn cross_entropy_mean<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[usize],
) -> Result<Var> {
    let (b, c) = tape.value(logits).dims2()?;
    if targets.len() != b {
        return Err(Error::Contract(format!("{b} logit rows vs {} targets", targets.len())));
    }
    let mut pick = vec![F::zero(); b * c];
    let w = F::from_f64(-1.0 / b as f64);
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Contract(format!("target {t} out of range for {c} classes")));
        }
        pick[i * c + t] = w;
    }
    let logq = tape.log_softmax(logits, 1)?;
    let weighted = tape.mul_const(logq, &Tensor::new(vec![b, c], pick)?)?;
    tape.sum_all(weighted)
}

/// A trained episode head and its training diagnostics.
pub struct TrainedHead<F: Real> {
    pub head: ClassifierHead,
    pub params: ParamStore<F>,
    pub final_loss: f64,
}

/// Fit a fresh classifier head on the support set with SGD over cached
/// frozen-backbone features.
pub fn train_head<F: Real>(
    support: &[(Tensor<F>, usize)],
    frozen: &FrozenBackbone<'_, F>,
    cfg: &FewShotConfig,
    ways: usize,
    rng: &mut impl Rng,
) -> Result<TrainedHead<F>> {
    if support.is_empty() {
        return Err(Error::Contract("train_head requires a non-empty support set".into()));
    }
    let images: Vec<Tensor<F>> = support.iter().map(|(img, _)| img.clone()).collect();
    let labels: Vec<usize> = support.iter().map(|(_, l)| *l).collect();
    let features = frozen.features(&images)?;
    let in_dim = features[0].numel();
    let mut params = ParamStore::new();
    let head = ClassifierHead::new(
        in_dim,
        cfg.head_hidden_mult * in_dim,
        cfg.head_hidden_layers,
        ways,
        &mut params,
        rng,
    )?;
    let mut opt = OptimizerState::new(
        OptimizerHyper::sgd(cfg.head_momentum, cfg.head_dampening),
        params.len(),
    );
    let mut order: Vec<usize> = (0..support.len()).collect();
    let mut final_loss = f64::NAN;
    for _epoch in 0..cfg.resolved_head_epochs() {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.head_batch.max(1)) {
            let mut tape = Tape::new();
            let bound = tape.bind(&params, true);
            let rows: Vec<Var> =
                chunk.iter().map(|&i| tape.constant(features[i].clone())).collect();
            let batch = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
            let logits = head.forward(&mut tape, &bound, batch)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy_mean(&mut tape, logits, &targets)?;
            final_loss = tape.value(loss).scalar_value()?.as_f64();
            tape.backward(loss)?;
            let grads = tape.collect_grads(&bound);
            opt.step(&mut params, &grads, cfg.head_lr, cfg.head_weight_decay)?;
        }
    }
    Ok(TrainedHead { head, params, final_loss })
}

/// The `finetune = true` ablation: train the head and a private copy of the
/// backbone jointly, recomputing features through the full forward each
/// batch. Returns the tuned backbone copy alongside the head so evaluation
/// runs against the episode's own weights; the shared backbone store is
/// untouched.
pub fn train_head_finetune<F: Real>(
    support: &[(Tensor<F>, usize)],
    frozen: &FrozenBackbone<'_, F>,
    cfg: &FewShotConfig,
    ways: usize,
    rng: &mut impl Rng,
) -> Result<(TrainedHead<F>, ParamStore<F>)> {
    if support.is_empty() {
        return Err(Error::Contract("train_head requires a non-empty support set".into()));
    }
    let res = frozen.backbone.config().input_res;
    let inputs: Vec<Tensor<F>> = support
        .iter()
        .map(|(img, _)| data::resize_normalize(img, res, frozen.mean, frozen.std))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = support.iter().map(|(_, l)| *l).collect();
    let in_dim = frozen.backbone.config().replicated_dim();
    let mut head_params = ParamStore::new();
    let head = ClassifierHead::new(
        in_dim,
        cfg.head_hidden_mult * in_dim,
        cfg.head_hidden_layers,
        ways,
        &mut head_params,
        rng,
    )?;
    let mut backbone_params = frozen.store.clone();
    let mut head_opt = OptimizerState::new(
        OptimizerHyper::sgd(cfg.head_momentum, cfg.head_dampening),
        head_params.len(),
    );
    let mut backbone_opt = OptimizerState::new(
        OptimizerHyper::sgd(cfg.head_momentum, cfg.head_dampening),
        backbone_params.len(),
    );
    let mut order: Vec<usize> = (0..support.len()).collect();
    let mut final_loss = f64::NAN;
    for _epoch in 0..cfg.resolved_head_epochs() {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.head_batch.max(1)) {
            let mut tape = Tape::new();
            let backbone_bound = tape.bind(&backbone_params, true);
            let head_bound = tape.bind(&head_params, true);
            let mut rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                rows.push(frozen.backbone.forward_single(&mut tape, &backbone_bound, &inputs[i])?);
            }
            let batch = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
            let logits = head.forward(&mut tape, &head_bound, batch)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy_mean(&mut tape, logits, &targets)?;
            final_loss = tape.value(loss).scalar_value()?.as_f64();
            tape.backward(loss)?;
            head_opt.step(
                &mut head_params,
                &tape.collect_grads(&head_bound),
                cfg.head_lr,
                cfg.head_weight_decay,
            )?;
            backbone_opt.step(
                &mut backbone_params,
                &tape.collect_grads(&backbone_bound),
                cfg.head_lr,
                cfg.head_weight_decay,
            )?;
        }
    }
    Ok((TrainedHead { head, params: head_params, final_loss }, backbone_params))
}

/// Score one episode: raw argmax accuracy and label-smoothed accuracy.
pub fn evaluate_episode<F: Real>(
    episode: &Episode<F>,
    frozen: &FrozenBackbone<'_, F>,
    trained: &TrainedHead<F>,
    lp_cfg: &LabelPropConfig,
) -> Result<(f64, f64)> {
    let d = frozen.backbone.config().embed_dim;
    let query_images: Vec<Tensor<F>> = episode.query.iter().map(|(img, _)| img.clone()).collect();
    let features = frozen.features(&query_images)?;
    let embeddings: Vec<Vec<f64>> =
        features.iter().map(|f| embedding_from_features(f, d)).collect();

    let mut logits_rows = Vec::with_capacity(features.len());
    {
        let mut tape = Tape::new();
        let bound = tape.bind(&trained.params, false);
        for f in &features {
            let x = tape.constant(f.clone());
            let out = trained.head.forward(&mut tape, &bound, x)?;
            logits_rows.push(tape.value(out).to_f64_vec());
        }
    }

    let raw: Vec<usize> = logits_rows
        .iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();

    let smoothed = if lp_cfg.enabled {
        let support_storage;
        let support_set = if lp_cfg.include_support {
            let support_images: Vec<Tensor<F>> =
                episode.support.iter().map(|(img, _)| img.clone()).collect();
            let support_feats = frozen.features(&support_images)?;
            let support_embeds: Vec<Vec<f64>> =
                support_feats.iter().map(|f| embedding_from_features(f, d)).collect();
            let support_labels: Vec<usize> = episode.support.iter().map(|(_, l)| *l).collect();
            support_storage = (support_embeds, support_labels);
            Some(SupportSet {
                embeddings: &support_storage.0,
                labels: &support_storage.1,
            })
        } else {
            None
        };
        labelprop::smooth_predictions(&embeddings, &logits_rows, lp_cfg, support_set)?
    } else {
        raw.clone()
    };

    // The only place query ground truth is read.
    let truth: Vec<usize> = episode.query.iter().map(|(_, l)| *l).collect();
    let acc = |preds: &[usize]| {
        preds.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
    };
    Ok((acc(&raw), acc(&smoothed)))
}

#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub raw_accuracies: Vec<f64>,
    pub smoothed_accuracies: Vec<f64>,
    pub mean_raw: f64,
    pub ci_raw: f64,
    pub mean_smoothed: f64,
    pub ci_smoothed: f64,
}

impl BenchmarkResult {
    pub fn episodes(&self) -> usize {
        self.raw_accuracies.len()
    }
}

/// Mean and 95% confidence half-width `1.96 * sample_std / sqrt(n)`.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Per-episode seed: independent of execution order, so episodes may run on
/// any thread layout and still reproduce bit-for-bit.
pub fn derive_episode_seed(run_seed: u64, episode_index: usize) -> u64 {
    splitmix64(run_seed ^ (episode_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Run `episodes` independent tasks with a fresh head each, in parallel when
/// `threads > 1`. A failing episode aborts the run with its index attached.
pub fn run_benchmark<F: Real>(
    dataset: &Dataset<F>,
    frozen: &FrozenBackbone<'_, F>,
    fs_cfg: &FewShotConfig,
    lp_cfg: &LabelPropConfig,
    seed: u64,
    threads: usize,
) -> Result<BenchmarkResult> {
    let run_one = |index: usize| -> Result<(f64, f64)> {
        let ctx = |e: Error| Error::Data(format!("episode {index}: {e}"));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_episode_seed(seed, index));
        let episode =
            sample_episode(dataset, fs_cfg.ways, fs_cfg.shots, fs_cfg.queries_per_class, &mut rng)
                .map_err(ctx)?;
        if fs_cfg.finetune {
            let (trained, tuned_params) =
                train_head_finetune(&episode.support, frozen, fs_cfg, episode.ways, &mut rng)
                    .map_err(ctx)?;
            let tuned = FrozenBackbone {
                backbone: frozen.backbone,
                store: &tuned_params,
                mean: frozen.mean,
                std: frozen.std,
            };
            evaluate_episode(&episode, &tuned, &trained, lp_cfg).map_err(ctx)
        } else {
            let trained = train_head(&episode.support, frozen, fs_cfg, episode.ways, &mut rng)
                .map_err(ctx)?;
            evaluate_episode(&episode, frozen, &trained, lp_cfg).map_err(ctx)
        }
    };

    let results: Result<Vec<(f64, f64)>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| (0..fs_cfg.episodes).into_par_iter().map(run_one).collect())
    } else {
        (0..fs_cfg.episodes).map(run_one).collect()
    };
    let results = results?;
    let raw_accuracies: Vec<f64> = results.iter().map(|r| r.0).collect();
    let smoothed_accuracies: Vec<f64> = results.iter().map(|r| r.1).collect();
    let (mean_raw, ci_raw) = mean_ci(&raw_accuracies);
    let (mean_smoothed, ci_smoothed) = mean_ci(&smoothed_accuracies);
    Ok(BenchmarkResult {
        raw_accuracies,
        smoothed_accuracies,
        mean_raw,
        ci_raw,
        mean_smoothed,
        ci_smoothed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, DomainTransform, SyntheticSpec};
    use crate::model::{ModelConfig, TokenizerConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_res: 8,
            embed_dim: 16,
            blocks: 1,
            heads: 2,
            tokenizer: TokenizerConfig { conv_layers: 1, kernel: 3, ..Default::default() },
            ..ModelConfig::desk()
        }
    }

    fn tiny_dataset(classes: usize, per_class: usize) -> Dataset<f32> {
        let spec = SyntheticSpec {
            classes,
            per_class_base: 2,
            per_class_target: per_class,
            resolution: 8,
            center_jitter: 0.3,
            noise_std: 0.01,
            transform: DomainTransform::Identity,
            ..SyntheticSpec::default()
        };
        synth_generate::<f32>(&spec).unwrap().1
    }

    #[test]
    fn five_way_five_shot_sizes() {
        let ds = tiny_dataset(6, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&ds, 5, 5, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
        // Every way appears exactly `shots` times in the support set.
        for way in 0..5 {
            assert_eq!(ep.support.iter().filter(|(_, l)| *l == way).count(), 5);
        }
        // Support and query never share an image (disjointness smoke).
        for (s, _) in &ep.support {
            assert!(!ep.query.iter().any(|(q, _)| q.bit_eq(s)));
        }
    }

    #[test]
    fn one_shot_query_count() {
        let ds = tiny_dataset(6, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&ds, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = tiny_dataset(6, 25);
        let sample = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_episode(&ds, 5, 5, 3, &mut rng).unwrap()
        };
        let a = sample(7);
        let b = sample(7);
        for ((xa, la), (xb, lb)) in a.support.iter().zip(&b.support) {
            assert!(xa.bit_eq(xb));
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn insufficient_class_population_names_the_class() {
        let ds = tiny_dataset(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_episode(&ds, 5, 5, 15, &mut rng).unwrap_err();
        assert!(err.to_string().contains("class_"), "{err}");
    }

    #[test]
    fn ci_matches_hand_formula() {
        // {0,1,0,1}: mean 0.5, sample var = 4*0.25/3, half = 1.96*std/2.
        let (mean, ci) = mean_ci(&[0.0, 1.0, 0.0, 1.0]);
        assert!((mean - 0.5).abs() < 1e-15);
        let std = (1.0f64 / 3.0).sqrt();
        assert!((ci - 1.96 * std / 2.0).abs() < 1e-12);
        // Constant accuracies collapse the interval.
        let (m2, c2) = mean_ci(&vec![0.8; 600]);
        assert!((m2 - 0.8).abs() < 1e-12);
        assert!(c2.abs() < 1e-12);
    }

    #[test]
    fn full_scale_head_dimensions() {
        // 4 x 384 replicated input, hidden = 4 * input = 6144.
        let cfg = ModelConfig::default();
        let fs = FewShotConfig::default();
        assert_eq!(cfg.replicated_dim(), 1536);
        assert_eq!(fs.head_hidden_mult * cfg.replicated_dim(), 6144);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = ClassifierHead::new(
            cfg.replicated_dim(),
            fs.head_hidden_mult * cfg.replicated_dim(),
            fs.head_hidden_layers,
            5,
            &mut store,
            &mut rng,
        )
        .unwrap();
        assert_eq!(head.in_dim, 1536);
        assert_eq!(store.get(head.layers[0].0).shape(), &[1536, 6144]);
        assert_eq!(store.get(head.layers[3].0).shape(), &[6144, 5]);
    }

    #[test]
    fn head_epoch_defaults_follow_shots() {
        let one = FewShotConfig { shots: 1, ..FewShotConfig::default() };
        assert_eq!(one.resolved_head_epochs(), 500);
        let five = FewShotConfig { shots: 5, ..FewShotConfig::default() };
        assert_eq!(five.resolved_head_epochs(), 100);
        let forced = FewShotConfig { head_epochs: Some(7), ..FewShotConfig::default() };
        assert_eq!(forced.resolved_head_epochs(), 7);
    }

    fn build_frozen(
        cfg: &ModelConfig,
        seed: u64,
    ) -> (Backbone<f32>, ParamStore<f32>, Vec<f64>, Vec<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(cfg, &mut store, &mut rng).unwrap();
        (backbone, store, vec![0.5; 3], vec![0.5; 3])
    }

    #[test]
    fn head_training_fits_separable_two_way_toy() {
        let cfg = tiny_model();
        let (backbone, store, mean, std) = build_frozen(&cfg, 10);
        let frozen = FrozenBackbone { backbone: &backbone, store: &store, mean: &mean, std: &std };
        let ds = tiny_dataset(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ep = sample_episode(&ds, 2, 5, 3, &mut rng).unwrap();
        let fs_cfg = FewShotConfig { head_epochs: Some(200), ..FewShotConfig::default() };
        let store_before = store.clone();
        let trained = train_head(&ep.support, &frozen, &fs_cfg, ep.ways, &mut rng).unwrap();
        assert!(trained.final_loss < 0.01, "final loss {}", trained.final_loss);
        // Freeze contract: backbone parameters bit-identical before and after.
        assert!(store.bit_eq(&store_before));
    }

    #[test]
    fn empty_support_is_contract_error() {
        let cfg = tiny_model();
        let (backbone, store, mean, std) = build_frozen(&cfg, 12);
        let frozen = FrozenBackbone { backbone: &backbone, store: &store, mean: &mean, std: &std };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert!(matches!(
            train_head::<f32>(&[], &frozen, &FewShotConfig::default(), 5, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn evaluation_matches_raw_argmax_when_smoothing_is_off() {
        let cfg = tiny_model();
        let (backbone, store, mean, std) = build_frozen(&cfg, 14);
        let frozen = FrozenBackbone { backbone: &backbone, store: &store, mean: &mean, std: &std };
        let ds = tiny_dataset(3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ep = sample_episode(&ds, 3, 5, 4, &mut rng).unwrap();
        let fs_cfg = FewShotConfig { head_epochs: Some(60), ..FewShotConfig::default() };
        let trained = train_head(&ep.support, &frozen, &fs_cfg, ep.ways, &mut rng).unwrap();
        let off = LabelPropConfig { enabled: false, ..LabelPropConfig::default() };
        let (raw, smoothed) = evaluate_episode(&ep, &frozen, &trained, &off).unwrap();
        assert_eq!(raw, smoothed);
    }

    #[test]
    fn consensus_clusters_preserve_a_perfect_head() {
        let cfg = tiny_model();
        let (backbone, store, mean, std) = build_frozen(&cfg, 16);
        let frozen = FrozenBackbone { backbone: &backbone, store: &store, mean: &mean, std: &std };
        // Clean, widely separated classes and enough epochs to classify all
        // queries; smoothing must keep accuracy at 1.0.
        let ds = tiny_dataset(3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ep = sample_episode(&ds, 3, 5, 5, &mut rng).unwrap();
        let fs_cfg = FewShotConfig { head_epochs: Some(150), ..FewShotConfig::default() };
        let trained = train_head(&ep.support, &frozen, &fs_cfg, ep.ways, &mut rng).unwrap();
        let lp = LabelPropConfig { sigma_mode: crate::labelprop::SigmaMode::Auto, ..Default::default() };
        let (raw, smoothed) = evaluate_episode(&ep, &frozen, &trained, &lp).unwrap();
        if raw == 1.0 {
            assert_eq!(smoothed, 1.0);
        }
    }

    #[test]
    fn benchmark_is_seed_deterministic_and_order_independent() {
        let cfg = tiny_model();
        let (backbone, store, mean, std) = build_frozen(&cfg, 18);
        let frozen = FrozenBackbone { backbone: &backbone, store: &store, mean: &mean, std: &std };
        let ds = tiny_dataset(4, 10);
        let fs_cfg = FewShotConfig {
            ways: 3,
            shots: 2,
            queries_per_class: 3,
            episodes: 3,
            head_epochs: Some(10),
            ..FewShotConfig::default()
        };
        let lp = LabelPropConfig::default();
        let a = run_benchmark(&ds, &frozen, &fs_cfg, &lp, 99, 1).unwrap();
        let b = run_benchmark(&ds, &frozen, &fs_cfg, &lp, 99, 1).unwrap();
        assert_eq!(a.raw_accuracies, b.raw_accuracies);
        assert_eq!(a.smoothed_accuracies, b.smoothed_accuracies);
        // Thread layout does not change the per-episode results.
        let c = run_benchmark(&ds, &frozen, &fs_cfg, &lp, 99, 2).unwrap();
        assert_eq!(a.raw_accuracies, c.raw_accuracies);
        assert_eq!(a.smoothed_accuracies, c.smoothed_accuracies);
    }
}
