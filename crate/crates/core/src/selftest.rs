//! Named verification checks, runnable from the CLI. Everything here works in
//! 64-bit: central finite differences are only trustworthy there.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labelprop;
use crate::model::{Backbone, ModelConfig, QuadrupleBlock, StreamQuad, TokenizerConfig};
use crate::schedule::{cosine_schedule, ScheduleSpec};
use crate::tape::{Bound, GeluMode, Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn from_result(name: &'static str, r: Result<String>) -> Self {
        match r {
            Ok(detail) => CheckReport { name, passed: true, detail },
            Err(e) => CheckReport { name, passed: false, detail: e.to_string() },
        }
    }
}

/// Central finite differences against reverse-mode gradients over every
/// element of every parameter in `store`. `build` must assemble the scalar
/// loss from bound parameters alone.
#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub elements_checked: usize,
}

pub fn gradcheck<B>(store: &ParamStore<f64>, build: &B, h: f64, tol: f64) -> Result<GradReport>
where
    B: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(store, true);
    let loss = build(&mut tape, &bound)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract("gradcheck loss must be scalar".into()));
    }
    tape.backward(loss)?;
    let grads = tape.collect_grads(&bound);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let b = t.bind(s, false);
        let l = build(&mut t, &b)?;
        t.value(l).scalar_value()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::from("-");
    let mut elements_checked = 0;
    for i in 0..store.len() {
        let id = ParamId(i);
        let base = store.get(id).clone();
        for j in 0..base.numel() {
            let mut plus = base.to_f64_vec();
            plus[j] += h;
            let mut minus = base.to_f64_vec();
            minus[j] -= h;
            let mut s_plus = store.clone();
            s_plus.set(id, Tensor::new(base.shape().to_vec(), plus)?)?;
            let mut s_minus = store.clone();
            s_minus.set(id, Tensor::new(base.shape().to_vec(), minus)?)?;
            let fd = (eval(&s_plus)? - eval(&s_minus)?) / (2.0 * h);
            let ad = grads[i].as_ref().map(|g| g.at_flat(j)).unwrap_or(0.0);
            let denom = ad.abs().max(fd.abs());
            let err = if denom < 1e-7 { (ad - fd).abs() } else { (ad - fd).abs() / denom };
            if err > max_rel_err {
                max_rel_err = err;
                worst = format!("{}[{j}] (ad {ad:.6e} vs fd {fd:.6e})", store.name(id));
            }
            elements_checked += 1;
        }
    }
    if max_rel_err > tol {
        return Err(Error::Numeric(format!(
            "gradient check failed: max rel err {max_rel_err:.3e} at {worst} (tolerance {tol:.1e})"
        )));
    }
    Ok(GradReport { max_rel_err, worst, elements_checked })
}

/// Block stack used by the composed gradient check: 2 blocks, width 16,
/// 3 tokens, every parameter perturbed.
pub fn quadruple_block_store(
    blocks: usize,
    d: usize,
    seed: u64,
) -> Result<(ParamStore<f64>, Vec<QuadrupleBlock>)> {
    let cfg = ModelConfig {
        input_res: 8,
        embed_dim: d,
        blocks,
        heads: 2,
        tokenizer: TokenizerConfig { conv_layers: 1, kernel: 3, ..TokenizerConfig::default() },
        ..ModelConfig::desk()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::new(&cfg, &mut store, &mut rng)?;
    Ok((store, backbone.blocks().to_vec()))
}

/// Scalar readout of a full quadruple-block forward: a fixed random linear
/// functional of all four output streams.
pub fn quadruple_block_loss(
    tape: &mut Tape<f64>,
    bound: &Bound,
    blocks: &[QuadrupleBlock],
    tokens: usize,
    d: usize,
    seed: u64,
) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = tape.constant(Tensor::rand_normal(&[tokens, d], 0.0, 1.0, &mut rng));
    let target = tape.constant(Tensor::rand_normal(&[tokens, d], 0.0, 1.0, &mut rng));
    let mut quad = StreamQuad { base, target_base: target, base_target: base, target };
    for block in blocks {
        quad = block.forward(tape, bound, quad)?;
    }
    let readout = Tensor::rand_normal(&[tokens, d], 0.0, 1.0, &mut rng);
    let mut acc: Option<Var> = None;
    for stream in [quad.base, quad.target_base, quad.base_target, quad.target] {
        let weighted = tape.mul_const(stream, &readout)?;
        let s = tape.sum_all(weighted)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("four streams"))
}

// ── Individual checks ────────────────────────────────────────────────────

/// Per-operation gradient checks on small random instances.
pub fn check_op_gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;

    // Dense chain: matmul, bias row, gelu(erf), gelu(tanh), layer_norm, softmax,
    // log_softmax, transpose, slice, concat, scale, relu.
    let mut store = ParamStore::new();
    store.register("w1", Tensor::rand_normal(&[4, 6], 0.0, 0.7, &mut rng))?;
    store.register("b1", Tensor::rand_normal(&[6], 0.0, 0.5, &mut rng))?;
    store.register("gain", Tensor::rand_normal(&[6], 1.0, 0.2, &mut rng))?;
    store.register("bias", Tensor::rand_normal(&[6], 0.0, 0.2, &mut rng))?;
    store.register("w2", Tensor::rand_normal(&[6, 3], 0.0, 0.7, &mut rng))?;
    let x = Tensor::rand_normal(&[5, 4], 0.0, 1.0, &mut rng);
    let readout = Tensor::rand_normal(&[5, 3], 0.0, 1.0, &mut rng);
    let build = move |tape: &mut Tape<f64>, bound: &Bound| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, bound.var(ParamId(0)))?;
        let h = tape.add_row(h, bound.var(ParamId(1)))?;
        let g1 = tape.gelu(h, GeluMode::Erf)?;
        let g2 = tape.gelu(h, GeluMode::Tanh)?;
        let mixed = tape.add(g1, g2)?;
        let n = tape.layer_norm(mixed, bound.var(ParamId(2)), bound.var(ParamId(3)), 1e-5)?;
        let s = tape.softmax(n, 1)?;
        let ls = tape.log_softmax(n, 0)?;
        let both = tape.add(s, ls)?;
        let o = tape.matmul(both, bound.var(ParamId(4)))?;
        let left = tape.slice_cols(o, 0, 2)?;
        let right = tape.slice_cols(o, 2, 1)?;
        let o2 = tape.concat(&[left, right], 1)?;
        let tr = tape.transpose(o2)?;
        let back = tape.transpose(tr)?;
        let r = tape.relu(back)?;
        let sc = tape.scale(r, 1.25)?;
        let w = tape.mul_const(sc, &readout)?;
        tape.sum_all(w)
    };
    let report = gradcheck(&store, &build, 1e-5, 1e-4)?;
    worst = worst.max(report.max_rel_err);

    // Convolution and pooling chain on a small image.
    let mut conv_store = ParamStore::new();
    conv_store.register("cw", Tensor::rand_normal(&[3, 2, 3, 3], 0.0, 0.5, &mut rng))?;
    conv_store.register("cb", Tensor::rand_normal(&[3], 0.0, 0.2, &mut rng))?;
    let img = Tensor::rand_normal(&[2, 6, 6], 0.0, 1.0, &mut rng);
    let conv_readout = Tensor::rand_normal(&[3, 3, 3], 0.0, 1.0, &mut rng);
    let build_conv = move |tape: &mut Tape<f64>, bound: &Bound| -> Result<Var> {
        let xv = tape.constant(img.clone());
        let c = tape.conv2d(xv, bound.var(ParamId(0)), bound.var(ParamId(1)), 1, 1)?;
        let r = tape.relu(c)?;
        let p = tape.max_pool2d(r, 3, 2, 1)?;
        let w = tape.mul_const(p, &conv_readout)?;
        tape.sum_all(w)
    };
    let conv_report = gradcheck(&conv_store, &build_conv, 1e-5, 1e-4)?;
    worst = worst.max(conv_report.max_rel_err);

    Ok(format!(
        "{} elements, max rel err {worst:.3e}",
        report.elements_checked + conv_report.elements_checked
    ))
}

/// Composed check over the full 2-block stack at width 16, 3 tokens.
pub fn check_quadruple_block_gradients() -> Result<String> {
    let (store, blocks) = quadruple_block_store(2, 16, 7)?;
    let build = move |tape: &mut Tape<f64>, bound: &Bound| {
        quadruple_block_loss(tape, bound, &blocks, 3, 16, 8)
    };
    let report = gradcheck(&store, &build, 1e-5, 1e-4)?;
    Ok(format!(
        "{} parameters, max rel err {:.3e} at {}",
        report.elements_checked, report.max_rel_err, report.worst
    ))
}

/// Cross attention fed the same tokens for queries and keys/values must
/// equal self attention bitwise. The cross path is injectable so a mutation
/// test can verify this check actually detects a broken implementation.
pub fn check_attention_degeneracy_with<C>(cross: C, trials: usize) -> Result<String>
where
    C: Fn(&QuadrupleBlock, &mut Tape<f64>, &Bound, Var, Var) -> Result<Var>,
{
    let (store, blocks) = quadruple_block_store(1, 16, 11)?;
    let block = &blocks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..trials {
        let n = 2 + trial % 6;
        let x = Tensor::rand_normal(&[n, 16], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = tape.bind(&store, false);
        let xv = tape.constant(x);
        let s = block.self_attention(&mut tape, &bound, xv)?;
        let c = cross(block, &mut tape, &bound, xv, xv)?;
        if !tape.value(s).bit_eq(tape.value(c)) {
            return Err(Error::Numeric(format!(
                "cross_attention(x, x) != self_attention(x) bitwise on trial {trial}"
            )));
        }
    }
    Ok(format!("{trials} random inputs, bitwise equal"))
}

pub fn check_attention_degeneracy(trials: usize) -> Result<String> {
    check_attention_degeneracy_with(
        |block, tape, bound, q, kv| block.cross_attention(tape, bound, q, kv),
        trials,
    )
}

/// Closed-form propagation against the long iteration on random graphs,
/// scaled by the analytic `1 - alpha` factor between the two solutions.
pub fn check_labelprop_equivalence(graphs: usize, max_nodes: usize) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    use rand::Rng;
    let alpha = 0.99;
    let mut worst: f64 = 0.0;
    for g in 0..graphs {
        let n = 5 + (rng.random::<u64>() as usize) % (max_nodes - 4);
        let classes = 2 + g % 4;
        let embeddings: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let graph = labelprop::build_affinity(&embeddings, 1.0)?;
        let y = labelprop::one_hot_rows(&labels, classes)?;
        let f_iter = labelprop::propagate_iterative(&graph, &y, alpha, 10_000, 0.0)?;
        let f_closed = labelprop::propagate_closed(&graph, &y, alpha, 1e-12)?;
        let diff = (&f_iter - &(&f_closed * (1.0 - alpha))).abs().max();
        worst = worst.max(diff);
        if diff >= 1e-6 {
            return Err(Error::Numeric(format!(
                "closed-form vs iterative mismatch {diff:.3e} on graph {g} ({n} nodes)"
            )));
        }
    }
    Ok(format!("{graphs} graphs, worst max-abs gap {worst:.3e}"))
}

/// Softmax rows must sum to one for inputs up to magnitude 1e4.
pub fn check_softmax_normalization() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    use rand::Rng;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let rows = 1 + (rng.random::<u64>() as usize) % 4;
        let cols = 1 + (rng.random::<u64>() as usize) % 8;
        let scale = 10f64.powf(rng.random::<f64>() * 4.0);
        let x = Tensor::from_fn(&[rows, cols], |_| (rng.random::<f64>() * 2.0 - 1.0) * scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 1)?;
        for i in 0..rows {
            let sum: f64 = (0..cols).map(|j| tape.value(y).at2(i, j)).sum();
            worst = worst.max((sum - 1.0).abs());
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("softmax row sums to {sum}")));
            }
        }
    }
    Ok(format!("200 cases, worst |sum - 1| = {worst:.3e}"))
}

/// Cosine schedules hit their pinned endpoints.
pub fn check_schedule_endpoints() -> Result<String> {
    let lr = ScheduleSpec::new(2.5e-4, 5e-7, 5000, 500)?;
    if cosine_schedule(&lr, 5000) != 5e-7 {
        return Err(Error::Numeric("lr schedule missed its end value".into()));
    }
    let wd = ScheduleSpec::new(1e-5, 0.4, 5000, 0)?;
    if cosine_schedule(&wd, 5000) != 0.4 || cosine_schedule(&wd, 0) != 1e-5 {
        return Err(Error::Numeric("weight decay schedule missed an endpoint".into()));
    }
    Ok("lr end 5e-7, wd end 0.4".into())
}

/// The full named suite, in a stable order.
pub fn run_all() -> Vec<CheckReport> {
    vec![
        CheckReport::from_result("gradient_ops", check_op_gradients()),
        CheckReport::from_result("gradient_quadruple_block", check_quadruple_block_gradients()),
        CheckReport::from_result("cross_attention_degeneracy", check_attention_degeneracy(100)),
        CheckReport::from_result("labelprop_equivalence", check_labelprop_equivalence(20, 20)),
        CheckReport::from_result("softmax_normalization", check_softmax_normalization()),
        CheckReport::from_result("schedule_endpoints", check_schedule_endpoints()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_a_fresh_build() {
        for report in run_all() {
            assert!(report.passed, "{}: {}", report.name, report.detail);
        }
    }

    #[test]
    fn injected_sign_flip_defeats_the_degeneracy_check() {
        let err = check_attention_degeneracy_with(
            |block, tape, bound, q, kv| {
                let out = block.cross_attention(tape, bound, q, kv)?;
                tape.scale(out, -1.0)
            },
            5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("cross_attention"), "{err}");
    }

    #[test]
    fn gradcheck_reports_failures_by_name() {
        // An impossible tolerance trips on ordinary finite-difference noise;
        // the error must carry the offending parameter's name.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.register("probe", Tensor::rand_normal(&[2, 2], 0.0, 1.0, &mut rng)).unwrap();
        let x = Tensor::rand_normal(&[2, 2], 0.0, 1.0, &mut rng);
        let build = move |tape: &mut Tape<f64>, bound: &Bound| {
            let xv = tape.constant(x.clone());
            let y = tape.matmul(xv, bound.var(ParamId(0)))?;
            let g = tape.gelu(y, GeluMode::Erf)?;
            tape.sum_all(g)
        };
        let err = gradcheck(&store, &build, 1e-5, 1e-16).unwrap_err();
        assert!(err.to_string().contains("probe"), "{err}");
    }
}
