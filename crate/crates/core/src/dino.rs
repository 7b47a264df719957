//! Self-supervised representation learning over two domains at once.
//!
//! A student and an EMA teacher share the bidirectional backbone
//! architecture plus two projection heads: the base head scores the
//! concatenated (base self, target-to-base cross) embedding, the target head
//! scores (target self, base-to-target cross). The teacher sees only the two
//! global views of each domain, the student sees every view, and the loss is
//! cross-entropy between the centered, temperature-sharpened teacher
//! distribution and the student log-distribution, summed over view pairs
//! where a view is never matched against itself.

use rand::{Rng, SeedableRng};

use crate::checkpoint::Checkpoint;
use crate::data;
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelConfig};
use crate::optim::{OptimizerHyper, OptimizerState};
use crate::real::Real;
use crate::schedule::{cosine_schedule, ScheduleSpec};
use crate::tape::{Bound, GeluMode, Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Multi-crop augmentation recipe. Global views cover a larger area fraction
/// than local views; every view is emitted at the model input resolution.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiCropSpec {
    pub n_local: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub aspect_range: (f64, f64),
    pub global_res: usize,
    pub local_res: usize,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub jitter_strength: f64,
    pub blur_p: f64,
}

impl Default for MultiCropSpec {
    fn default() -> Self {
        MultiCropSpec {
            n_local: 8,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            aspect_range: (0.75, 4.0 / 3.0),
            global_res: 16,
            local_res: 16,
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter_strength: 0.4,
            blur_p: 0.5,
        }
    }
}

impl MultiCropSpec {
    /// All augmentation randomness off: every view is the resized original.
    pub fn deterministic(res: usize) -> Self {
        MultiCropSpec {
            global_scale: (1.0, 1.0),
            local_scale: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            global_res: res,
            local_res: res,
            flip_p: 0.0,
            jitter_p: 0.0,
            jitter_strength: 0.0,
            blur_p: 0.0,
            ..MultiCropSpec::default()
        }
    }

    pub fn n_views(&self) -> usize {
        2 + self.n_local
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DinoConfig {
    /// Projection head output dimension K.
    pub out_dim: usize,
    pub head_hidden: usize,
    pub head_layers: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub teacher_momentum_start: f64,
    pub teacher_momentum_end: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub warmup_epochs: u64,
    /// Cosine schedule horizon; training may stop earlier.
    pub schedule_epochs: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub crops: MultiCropSpec,
    /// Self-supervised pretraining on; off switches to the supervised
    /// base-class variant.
    pub ssl: bool,
    pub supervised_lr: f64,
    pub supervised_epochs: u64,
    pub supervised_batch: usize,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            out_dim: 65536,
            head_hidden: 2048,
            head_layers: 3,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            teacher_momentum_start: 0.996,
            teacher_momentum_end: 1.0,
            lr: 2.5e-4,
            min_lr: 5e-7,
            weight_decay: 1e-5,
            weight_decay_end: 0.4,
            warmup_epochs: 10,
            schedule_epochs: 500,
            epochs: 200,
            batch_size: 16,
            crops: MultiCropSpec::default(),
            ssl: true,
            supervised_lr: 0.025,
            supervised_epochs: 400,
            supervised_batch: 200,
        }
    }
}

impl DinoConfig {
    /// Laptop-size head and crop recipe.
    pub fn desk() -> Self {
        DinoConfig {
            out_dim: 256,
            head_hidden: 256,
            batch_size: 8,
            crops: MultiCropSpec { n_local: 8, ..MultiCropSpec::default() },
            ..DinoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.student_temp <= 0.0 || self.teacher_temp <= 0.0 {
            return Err(Error::Parameter("temperatures must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::Parameter("center momentum must be in [0,1)".into()));
        }
        if self.out_dim == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("out_dim and batch_size must be positive".into()));
        }
        Ok(())
    }
}

// ── Multi-crop ───────────────────────────────────────────────────────────

/// Augmented views of one image, globals first.
#[derive(Clone, Debug)]
pub struct MultiCropSet<F> {
    pub views: Vec<Tensor<F>>,
    pub n_global: usize,
}

/// Two global plus `n_local` local augmented views. Geometry, flips, jitter
/// and blur are all drawn from `rng`, so a fixed seed fixes the crops.
pub fn multi_crop<F: Real>(
    image: &Tensor<F>,
    spec: &MultiCropSpec,
    rng: &mut impl Rng,
) -> Result<MultiCropSet<F>> {
    let [_, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::Shape(format!("multi_crop expects [C,H,W], got {other:?}"))),
    };
    if h < 2 || w < 2 {
        return Err(Error::Data(format!("image {h}x{w} smaller than the minimum crop")));
    }
    let mut views = Vec::with_capacity(spec.n_views());
    for v in 0..spec.n_views() {
        let (scale, res) = if v < 2 {
            (spec.global_scale, spec.global_res)
        } else {
            (spec.local_scale, spec.local_res)
        };
        let (cy, cx, ch, cw) = sample_crop(h, w, scale, spec.aspect_range, rng)?;
        let mut view = data::crop_resize(image, cy, cx, ch, cw, res, res)?;
        if rng.random::<f64>() < spec.flip_p {
            view = data::flip_horizontal(&view)?;
        }
        let jitter_coin = rng.random::<f64>();
        let brightness = 1.0 + spec.jitter_strength * (2.0 * rng.random::<f64>() - 1.0);
        let contrast = 1.0 + spec.jitter_strength * (2.0 * rng.random::<f64>() - 1.0);
        if jitter_coin < spec.jitter_p {
            view = color_jitter(&view, brightness, contrast)?;
        }
        if rng.random::<f64>() < spec.blur_p {
            view = data::blur3(&view)?;
        }
        views.push(view);
    }
    Ok(MultiCropSet { views, n_global: 2 })
}

fn sample_crop(
    h: usize,
    w: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut impl Rng,
) -> Result<(usize, usize, usize, usize)> {
    if scale.0 > scale.1 || scale.0 <= 0.0 {
        return Err(Error::Parameter(format!("bad crop scale range {scale:?}")));
    }
    for _ in 0..10 {
        let area = (scale.0 + (scale.1 - scale.0) * rng.random::<f64>()) * (h * w) as f64;
        let ar = aspect.0 + (aspect.1 - aspect.0) * rng.random::<f64>();
        let cw = (area * ar).sqrt().round() as usize;
        let ch = (area / ar).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let cy = rng.random_range(0..=h - ch);
            let cx = rng.random_range(0..=w - cw);
            return Ok((cy, cx, ch, cw));
        }
    }
    Ok((0, 0, h, w))
}

fn color_jitter<F: Real>(img: &Tensor<F>, brightness: f64, contrast: f64) -> Result<Tensor<F>> {
    let mean = img.iter().map(|v| v.as_f64()).sum::<f64>() / img.numel() as f64;
    Ok(img.map(|v| {
        let b = v.as_f64() * brightness;
        F::from_f64(((b - mean) * contrast + mean).clamp(0.0, 1.0))
    }))
}

// ── Projection head ──────────────────────────────────────────────────────

/// MLP projection head: `head_layers` hidden GELU layers then a linear map to
/// the K-dimensional output. Input width is twice the backbone embedding,
/// the concatenation of a self stream with its paired cross stream.
#[derive(Clone, Debug)]
pub struct DinoHead {
    layers: Vec<(ParamId, ParamId)>,
    gelu: GeluMode,
    in_dim: usize,
}

impl DinoHead {
    pub fn new<F: Real>(
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        out_dim: usize,
        gelu: GeluMode,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut sizes = vec![in_dim];
        sizes.extend(std::iter::repeat(hidden).take(hidden_layers));
        sizes.push(out_dim);
        let mut layers = Vec::new();
        for i in 0..sizes.len() - 1 {
            let std = (2.0 / sizes[i] as f64).sqrt();
            let w = store.register(
                format!("{prefix}.linear{i}.weight"),
                Tensor::rand_normal(&[sizes[i], sizes[i + 1]], 0.0, std * 0.5, rng),
            )?;
            let b = store.register(format!("{prefix}.linear{i}.bias"), Tensor::zeros(&[sizes[i + 1]]))?;
            layers.push((w, b));
        }
        Ok(DinoHead { layers, gelu, in_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        tape.set_scope("head");
        if tape.value(x).dims2()?.1 != self.in_dim {
            return Err(Error::Shape(format!(
                "head expects width {}, got {:?}",
                self.in_dim,
                tape.value(x).shape()
            )));
        }
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            cur = tape.matmul(cur, bound.var(*w))?;
            cur = tape.add_row(cur, bound.var(*b))?;
            if i < last {
                cur = tape.gelu(cur, self.gelu)?;
            }
        }
        Ok(cur)
    }
}

// ── Loss and teacher statistics ──────────────────────────────────────────

/// Centered, temperature-sharpened teacher distribution
/// `softmax((t - c) / temp)`, computed outside any tape: the teacher is never
/// differentiated.
pub fn sharpened_probs<F: Real>(
    teacher_logits: &Tensor<F>,
    center: &Tensor<F>,
    temp: f64,
) -> Result<Tensor<F>> {
    if temp <= 0.0 {
        return Err(Error::Parameter(format!("teacher temperature must be > 0, got {temp}")));
    }
    if teacher_logits.numel() != center.numel() {
        return Err(Error::Shape(format!(
            "teacher logits have {} entries, center {}",
            teacher_logits.numel(),
            center.numel()
        )));
    }
    let inv = 1.0 / temp;
    let shifted: Vec<f64> = teacher_logits
        .iter()
        .zip(center.iter())
        .map(|(t, c)| (t.as_f64() - c.as_f64()) * inv)
        .collect();
    let mx = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::Numeric("teacher logits are not finite".into()));
    }
    let exps: Vec<f64> = shifted.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(Tensor::from_fn(&[1, teacher_logits.numel()], |i| F::from_f64(exps[i] / z)))
}

/// Cross-entropy between the sharpened teacher distribution and the student
/// log-distribution for one view pair. The teacher side is a detached value;
/// gradient flows only through `student_logits`.
pub fn dino_loss<F: Real>(
    tape: &mut Tape<F>,
    teacher_logits: &Tensor<F>,
    student_logits: Var,
    center: &Tensor<F>,
    teacher_temp: f64,
    student_temp: f64,
) -> Result<Var> {
    if student_temp <= 0.0 {
        return Err(Error::Parameter(format!(
            "student temperature must be > 0, got {student_temp}"
        )));
    }
    let k = tape.value(student_logits).numel();
    if teacher_logits.numel() != k {
        return Err(Error::Shape(format!(
            "teacher/student output dims disagree: {} vs {k}",
            teacher_logits.numel()
        )));
    }
    let probs = sharpened_probs(teacher_logits, center, teacher_temp)?;
    let flat = tape.reshape(student_logits, vec![1, k])?;
    let scaled = tape.scale(flat, F::from_f64(1.0 / student_temp))?;
    let logq = tape.log_softmax(scaled, 1)?;
    let weighted = tape.mul_const(logq, &probs)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, -F::one())
}

/// Teacher-view/student-view index pairs entering the loss: teacher sees the
/// two global views, a view is never matched against itself.
pub fn view_pairs(n_views: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for t in 0..2.min(n_views) {
        for s in 0..n_views {
            if s != t {
                pairs.push((t, s));
            }
        }
    }
    pairs
}

// ── Teacher updates ──────────────────────────────────────────────────────

/// `teacher = momentum * teacher + (1 - momentum) * student`, elementwise.
pub fn ema_update<F: Real>(
    teacher: &mut ParamStore<F>,
    student: &ParamStore<F>,
    momentum: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!("EMA momentum must be in [0,1], got {momentum}")));
    }
    if !teacher.same_manifest(student) {
        return Err(Error::Contract("teacher/student parameter manifests differ".into()));
    }
    if momentum == 1.0 {
        return Ok(()); // frozen teacher, bit-exact
    }
    let lam = F::from_f64(momentum);
    let one_m = F::from_f64(1.0 - momentum);
    let updated: Vec<Tensor<F>> = teacher
        .tensors()
        .iter()
        .zip(student.tensors().iter())
        .map(|(t, s)| {
            if momentum == 0.0 {
                Ok(s.clone())
            } else {
                t.zip(s, |tv, sv| lam * tv + one_m * sv)
            }
        })
        .collect::<Result<_>>()?;
    for (slot, new) in teacher.iter_mut_tensors().zip(updated) {
        *slot = new;
    }
    Ok(())
}

/// Running center update: `c' = m * c + (1 - m) * batch_mean(teacher_out)`.
pub fn update_center<F: Real>(
    center: &Tensor<F>,
    teacher_batch_out: &[Tensor<F>],
    momentum: f64,
) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Parameter(format!("center momentum must be in [0,1), got {momentum}")));
    }
    if teacher_batch_out.is_empty() {
        return Err(Error::Contract("center update needs a non-empty batch".into()));
    }
    let k = center.numel();
    let mut mean = vec![0.0f64; k];
    for out in teacher_batch_out {
        if out.numel() != k {
            return Err(Error::Shape(format!(
                "teacher output has {} entries, center {k}",
                out.numel()
            )));
        }
        for (m, v) in mean.iter_mut().zip(out.iter()) {
            *m += v.as_f64();
        }
    }
    let n = teacher_batch_out.len() as f64;
    let shape = center.shape().to_vec();
    let data = center
        .iter()
        .enumerate()
        .map(|(i, c)| F::from_f64(momentum * c.as_f64() + (1.0 - momentum) * mean[i] / n))
        .collect();
    Tensor::new(shape, data)
}

// ── Teacher/student pair and the training loop ───────────────────────────

/// Student and teacher stores with identical manifests, the shared model
/// description addressing both, and one running center per head.
pub struct TeacherStudent<F: Real> {
    pub student: ParamStore<F>,
    pub teacher: ParamStore<F>,
    pub backbone: Backbone<F>,
    pub head_base: DinoHead,
    pub head_target: DinoHead,
    pub center_base: Tensor<F>,
    pub center_target: Tensor<F>,
}

impl<F: Real> TeacherStudent<F> {
    pub fn new(model_cfg: &ModelConfig, dino_cfg: &DinoConfig, rng: &mut impl Rng) -> Result<Self> {
        dino_cfg.validate()?;
        let mut student = ParamStore::new();
        let backbone = Backbone::new(model_cfg, &mut student, rng)?;
        let in_dim = 2 * model_cfg.embed_dim;
        let head_base = DinoHead::new(
            "head_base",
            in_dim,
            dino_cfg.head_hidden,
            dino_cfg.head_layers,
            dino_cfg.out_dim,
            model_cfg.gelu,
            &mut student,
            rng,
        )?;
        let head_target = DinoHead::new(
            "head_target",
            in_dim,
            dino_cfg.head_hidden,
            dino_cfg.head_layers,
            dino_cfg.out_dim,
            model_cfg.gelu,
            &mut student,
            rng,
        )?;
        let teacher = student.clone();
        Ok(TeacherStudent {
            student,
            teacher,
            backbone,
            head_base,
            head_target,
            center_base: Tensor::zeros(&[dino_cfg.out_dim]),
            center_target: Tensor::zeros(&[dino_cfg.out_dim]),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss_base: f64,
    pub loss_target: f64,
    pub loss: f64,
    pub teacher_max_prob_mean: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_momentum: f64,
}

pub struct DinoTrainer<F: Real> {
    pub state: TeacherStudent<F>,
    pub cfg: DinoConfig,
    opt: OptimizerState<F>,
    lr_schedule: ScheduleSpec,
    wd_schedule: ScheduleSpec,
    momentum_schedule: ScheduleSpec,
    step: u64,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
}

impl<F: Real> DinoTrainer<F> {
    pub fn new(
        model_cfg: &ModelConfig,
        dino_cfg: &DinoConfig,
        norm_mean: Vec<f64>,
        norm_std: Vec<f64>,
        total_steps: u64,
        warmup_steps: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dino_cfg.crops.global_res != model_cfg.input_res
            || dino_cfg.crops.local_res != model_cfg.input_res
        {
            return Err(Error::Config(format!(
                "crop resolutions {}x{} must match the model input resolution {}",
                dino_cfg.crops.global_res, dino_cfg.crops.local_res, model_cfg.input_res
            )));
        }
        let state = TeacherStudent::new(model_cfg, dino_cfg, rng)?;
        let n_params = state.student.len();
        Ok(DinoTrainer {
            state,
            cfg: dino_cfg.clone(),
            opt: OptimizerState::new(OptimizerHyper::adamw(), n_params),
            lr_schedule: ScheduleSpec::new(dino_cfg.lr, dino_cfg.min_lr, total_steps, warmup_steps)?,
            wd_schedule: ScheduleSpec::new(
                dino_cfg.weight_decay,
                dino_cfg.weight_decay_end,
                total_steps,
                0,
            )?,
            momentum_schedule: ScheduleSpec::new(
                dino_cfg.teacher_momentum_start,
                dino_cfg.teacher_momentum_end,
                total_steps,
                0,
            )?,
            step: 0,
            norm_mean,
            norm_std,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &OptimizerState<F> {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut OptimizerState<F> {
        &mut self.opt
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    fn head_logits(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        image_base: &Tensor<F>,
        image_target: &Tensor<F>,
    ) -> Result<(Var, Var)> {
        let quad = self.state.backbone.forward_pair(tape, bound, image_base, image_target)?;
        let base_in = tape.concat(&[quad.base, quad.target_base], 1)?;
        let target_in = tape.concat(&[quad.target, quad.base_target], 1)?;
        let base_logits = self.state.head_base.forward(tape, bound, base_in)?;
        let target_logits = self.state.head_target.forward(tape, bound, target_in)?;
        Ok((base_logits, target_logits))
    }

    /// One optimizer transaction: crop both domains, distill every student
    /// view against the teacher's global views, update student, teacher EMA
    /// and both centers. Cycles the target batch when shorter than the base
    /// batch.
    pub fn train_step(
        &mut self,
        batch_base: &[Tensor<F>],
        batch_target: &[Tensor<F>],
        rng: &mut impl Rng,
    ) -> Result<StepStats> {
        if batch_base.is_empty() || batch_target.is_empty() {
            return Err(Error::Contract("train_step needs non-empty batches".into()));
        }
        let lr = cosine_schedule(&self.lr_schedule, self.step);
        let wd = cosine_schedule(&self.wd_schedule, self.step);
        let momentum = cosine_schedule(&self.momentum_schedule, self.step);
        let b = batch_base.len();
        let n_views = self.cfg.crops.n_views();

        // Augment: per sample, one multi-crop set per domain.
        let mut crops_base = Vec::with_capacity(b);
        let mut crops_target = Vec::with_capacity(b);
        for i in 0..b {
            crops_base.push(self.normalized_views(&batch_base[i], rng)?);
            crops_target.push(self.normalized_views(&batch_target[i % batch_target.len()], rng)?);
        }

        // Teacher pass over the two global views, on a throwaway tape.
        let mut teacher_base_logits = vec![Vec::with_capacity(2); b];
        let mut teacher_target_logits = vec![Vec::with_capacity(2); b];
        {
            let mut tape = Tape::new();
            let bound = tape.bind(&self.state.teacher, false);
            for i in 0..b {
                for v in 0..2 {
                    let (lb, lt) =
                        self.head_logits(&mut tape, &bound, &crops_base[i][v], &crops_target[i][v])?;
                    teacher_base_logits[i].push(tape.value(lb).clone());
                    teacher_target_logits[i].push(tape.value(lt).clone());
                }
            }
        }

        // Teacher distributions and the collapse diagnostic.
        let tt = self.cfg.teacher_temp;
        let mut max_prob_acc = 0.0;
        let mut probs_base = vec![Vec::with_capacity(2); b];
        let mut probs_target = vec![Vec::with_capacity(2); b];
        for i in 0..b {
            for v in 0..2 {
                let pb = sharpened_probs(&teacher_base_logits[i][v], &self.state.center_base, tt)?;
                let pt =
                    sharpened_probs(&teacher_target_logits[i][v], &self.state.center_target, tt)?;
                max_prob_acc += max_element(&pb) + max_element(&pt);
                probs_base[i].push(pb);
                probs_target[i].push(pt);
            }
        }
        let teacher_max_prob_mean = max_prob_acc / (2.0 * 2.0 * b as f64);

        // Student pass, one tape per view to bound peak memory; gradients of
        // the pre-scaled partial losses add up to the full-batch gradient.
        let pairs = view_pairs(n_views);
        let pair_scale = F::from_f64(1.0 / (b as f64 * pairs.len() as f64));
        let mut grad_acc: Vec<Option<Tensor<F>>> = vec![None; self.state.student.len()];
        let mut loss_base_total = 0.0;
        let mut loss_target_total = 0.0;
        for view in 0..n_views {
            let mut tape = Tape::new();
            let bound = tape.bind(&self.state.student, true);
            let mut partial_base: Option<Var> = None;
            let mut partial_target: Option<Var> = None;
            for i in 0..b {
                let (sb, st) = self.head_logits(
                    &mut tape,
                    &bound,
                    &crops_base[i][view],
                    &crops_target[i][view],
                )?;
                for &(tv, sv) in &pairs {
                    if sv != view {
                        continue;
                    }
                    let lb = dino_loss(
                        &mut tape,
                        &teacher_base_logits[i][tv],
                        sb,
                        &self.state.center_base,
                        tt,
                        self.cfg.student_temp,
                    )?;
                    let lt = dino_loss(
                        &mut tape,
                        &teacher_target_logits[i][tv],
                        st,
                        &self.state.center_target,
                        tt,
                        self.cfg.student_temp,
                    )?;
                    partial_base = Some(match partial_base {
                        Some(acc) => tape.add(acc, lb)?,
                        None => lb,
                    });
                    partial_target = Some(match partial_target {
                        Some(acc) => tape.add(acc, lt)?,
                        None => lt,
                    });
                }
            }
            let (Some(pb), Some(pt)) = (partial_base, partial_target) else { continue };
            let pb = tape.scale(pb, pair_scale)?;
            let pt = tape.scale(pt, pair_scale)?;
            loss_base_total += tape.value(pb).scalar_value()?.as_f64();
            loss_target_total += tape.value(pt).scalar_value()?.as_f64();
            let total = tape.add(pb, pt)?;
            tape.backward(total)?;
            for (slot, g) in grad_acc.iter_mut().zip(tape.collect_grads(&bound)) {
                if let Some(g) = g {
                    *slot = Some(match slot.take() {
                        Some(prev) => prev.add(&g)?,
                        None => g,
                    });
                }
            }
        }

        self.opt.step(&mut self.state.student, &grad_acc, lr, wd)?;
        ema_update(&mut self.state.teacher, &self.state.student, momentum)?;

        let flat = |per_sample: &[Vec<Tensor<F>>]| -> Vec<Tensor<F>> {
            per_sample.iter().flat_map(|v| v.iter().cloned()).collect()
        };
        self.state.center_base = update_center(
            &self.state.center_base,
            &flat(&teacher_base_logits)
                .iter()
                .map(|t| t.reshaped(vec![t.numel()]))
                .collect::<Result<Vec<_>>>()?,
            self.cfg.center_momentum,
        )?;
        self.state.center_target = update_center(
            &self.state.center_target,
            &flat(&teacher_target_logits)
                .iter()
                .map(|t| t.reshaped(vec![t.numel()]))
                .collect::<Result<Vec<_>>>()?,
            self.cfg.center_momentum,
        )?;

        self.step += 1;
        Ok(StepStats {
            loss_base: loss_base_total,
            loss_target: loss_target_total,
            loss: loss_base_total + loss_target_total,
            teacher_max_prob_mean,
            lr,
            weight_decay: wd,
            teacher_momentum: momentum,
        })
    }

    fn normalized_views(&self, image: &Tensor<F>, rng: &mut impl Rng) -> Result<Vec<Tensor<F>>> {
        let set = multi_crop(image, &self.cfg.crops, rng)?;
        set.views
            .iter()
            .map(|v| data::normalize(v, &self.norm_mean, &self.norm_std))
            .collect()
    }
}

fn max_element<F: Real>(t: &Tensor<F>) -> f64 {
    t.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max)
}

// ── Checkpointing ────────────────────────────────────────────────────────

impl<F: Real> DinoTrainer<F> {
    /// Full training state: both stores, centers, optimizer buffers, step.
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint<F> {
        let mut ck = Checkpoint::new(self.step, seed);
        for (name, t) in self.state.student.iter() {
            ck.push(format!("student.{name}"), t.clone());
        }
        for (name, t) in self.state.teacher.iter() {
            ck.push(format!("teacher.{name}"), t.clone());
        }
        ck.push("center.base", self.state.center_base.clone());
        ck.push("center.target", self.state.center_target.clone());
        for (kind, index, t) in self.opt.buffers() {
            ck.push(format!("opt.{kind}.{index}"), t.clone());
        }
        ck
    }

    /// Restore a freshly built trainer from a checkpoint. Every parameter is
    /// matched by name; shape mismatches are collected and reported together.
    pub fn restore(&mut self, ck: &Checkpoint<F>) -> Result<()> {
        let mut mismatches = Vec::new();
        for prefix in ["student", "teacher"] {
            let store = if prefix == "student" {
                &mut self.state.student
            } else {
                &mut self.state.teacher
            };
            for i in 0..store.len() {
                let id = crate::tensor::ParamId(i);
                let name = format!("{prefix}.{}", store.name(id));
                match ck.get(&name) {
                    Some(t) if t.shape() == store.get(id).shape() => {
                        store.set(id, t.clone())?;
                    }
                    Some(t) => mismatches.push(format!(
                        "{name}: checkpoint {:?} vs model {:?}",
                        t.shape(),
                        store.get(id).shape()
                    )),
                    None => mismatches.push(format!("{name}: missing from checkpoint")),
                }
            }
        }
        if let Some(c) = ck.get("center.base") {
            if c.shape() == self.state.center_base.shape() {
                self.state.center_base = c.clone();
            } else {
                mismatches.push(format!(
                    "center.base: checkpoint {:?} vs model {:?}",
                    c.shape(),
                    self.state.center_base.shape()
                ));
            }
        }
        if let Some(c) = ck.get("center.target") {
            if c.shape() == self.state.center_target.shape() {
                self.state.center_target = c.clone();
            } else {
                mismatches.push("center.target: shape mismatch".to_string());
            }
        }
        if !mismatches.is_empty() {
            return Err(Error::Checkpoint(format!(
                "incompatible checkpoint: {}",
                mismatches.join("; ")
            )));
        }
        for (name, t) in &ck.entries {
            if let Some(rest) = name.strip_prefix("opt.") {
                if let Some((kind, idx)) = rest.split_once('.') {
                    let index: usize = idx
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad buffer name {name:?}")))?;
                    self.opt.restore_buffer(kind, index, t.clone())?;
                }
            }
        }
        self.step = ck.meta.step;
        self.opt.set_step_count(ck.meta.step);
        Ok(())
    }
}

/// Extract just the backbone weights of the distilled teacher, the artifact
/// the few-shot phase consumes.
pub fn load_teacher_backbone<F: Real>(
    ck: &Checkpoint<F>,
    model_cfg: &ModelConfig,
) -> Result<(Backbone<F>, ParamStore<F>)> {
    let mut store = ParamStore::new();
    // Seed value is irrelevant: every parameter is overwritten below.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let backbone = Backbone::new(model_cfg, &mut store, &mut rng)?;
    let mut mismatches = Vec::new();
    for i in 0..store.len() {
        let id = crate::tensor::ParamId(i);
        let name = format!("teacher.{}", store.name(id));
        match ck.get(&name) {
            Some(t) if t.shape() == store.get(id).shape() => store.set(id, t.clone())?,
            Some(t) => mismatches.push(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                store.get(id).shape()
            )),
            None => mismatches.push(format!("{name}: missing from checkpoint")),
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoint: {}",
            mismatches.join("; ")
        )));
    }
    Ok((backbone, store))
}

// ── Supervised pretraining variant ───────────────────────────────────────

/// The `ssl = false` ablation: train the backbone on labeled base classes
/// with a linear head over the self-attention embedding; no cross-attention
/// path and no teacher. The checkpoint mirrors the distilled layout so the
/// few-shot phase loads it unchanged.
pub struct SupervisedTrainer<F: Real> {
    pub params: ParamStore<F>,
    pub backbone: Backbone<F>,
    head_w: ParamId,
    head_b: ParamId,
    opt: OptimizerState<F>,
    step: u64,
    lr: f64,
    weight_decay: f64,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
}

impl<F: Real> SupervisedTrainer<F> {
    pub fn new(
        model_cfg: &ModelConfig,
        dino_cfg: &DinoConfig,
        n_classes: usize,
        norm_mean: Vec<f64>,
        norm_std: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Parameter("supervised training needs at least one class".into()));
        }
        let mut params = ParamStore::new();
        let backbone = Backbone::new(model_cfg, &mut params, rng)?;
        let d = model_cfg.embed_dim;
        let head_w = params.register(
            "supervised_head.weight",
            Tensor::rand_normal(&[d, n_classes], 0.0, (1.0 / d as f64).sqrt(), rng),
        )?;
        let head_b = params.register("supervised_head.bias", Tensor::zeros(&[n_classes]))?;
        let n_params = params.len();
        Ok(SupervisedTrainer {
            params,
            backbone,
            head_w,
            head_b,
            opt: OptimizerState::new(OptimizerHyper::sgd(0.9, 0.0), n_params),
            step: 0,
            lr: dino_cfg.supervised_lr,
            weight_decay: dino_cfg.weight_decay,
            norm_mean,
            norm_std,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn train_step(&mut self, batch: &[(Tensor<F>, usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("supervised step needs a non-empty batch".into()));
        }
        let res = self.backbone.config().input_res;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, true);
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (img, label) in batch {
            let input = data::resize_normalize(img, res, &self.norm_mean, &self.norm_std)?;
            rows.push(self.backbone.embed_single(&mut tape, &bound, &input)?);
            targets.push(*label);
        }
        let stacked = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let logits = tape.matmul(stacked, bound.var(self.head_w))?;
        let logits = tape.add_row(logits, bound.var(self.head_b))?;
        let loss = crate::fewshot::cross_entropy_mean(&mut tape, logits, &targets)?;
        let loss_value = tape.value(loss).scalar_value()?.as_f64();
        tape.backward(loss)?;
        let grads = tape.collect_grads(&bound);
        self.opt.step(&mut self.params, &grads, self.lr, self.weight_decay)?;
        self.step += 1;
        Ok(loss_value)
    }

    /// Checkpoint in the teacher/student layout the few-shot loader expects.
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint<F> {
        let mut ck = Checkpoint::new(self.step, seed);
        for (name, t) in self.params.iter() {
            ck.push(format!("student.{name}"), t.clone());
        }
        for (name, t) in self.params.iter() {
            ck.push(format!("teacher.{name}"), t.clone());
        }
        ck
    }
}
