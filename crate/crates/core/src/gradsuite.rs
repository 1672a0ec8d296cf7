//! Finite-difference verification of every differentiable operation, every
//! building block and the full model, in 64-bit.
//!
//! Each case projects the output onto a fixed random tensor and sums, so the
//! checked scalar depends on every output element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Model, ModelConfig, Variant};
use crate::nn::{Bound, Cbam, ChangeBlock, EncoderBlock, Hcu, ParamBuilder, ParamStore, Tfam};
use crate::tensor::kernels::{PadMode, PoolMode};
use crate::tensor::{grad_check_sampled, GradCheckReport, Result, Tensor, Var, GRAD_CHECK_EPS};

/// Maximum relative error accepted for every case.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= SUITE_TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Distinct, evenly spaced values in random order so max-based operators
/// have no near-ties within the difference step.
fn separated(shape: &[usize], seed: u64) -> Tensor<f64> {
    let r = random(shape, seed);
    let mut order: Vec<usize> = (0..r.numel()).collect();
    order.sort_by(|&a, &b| r.data()[a].total_cmp(&r.data()[b]));
    let step = 2.0 / r.numel() as f64;
    let mut out = r.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.data_mut()[i] = -1.0 + step * rank as f64;
    }
    out
}

fn konst<'t>(v: Var<'t, f64>, shape: &[usize], seed: u64) -> Var<'t, f64> {
    v.tape().constant(random(shape, seed))
}

fn project<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let r = y.tape().constant(random(&y.shape(), 999));
    Ok(y.mul(r)?.sum())
}

fn spread(numel: usize, count: usize) -> Vec<usize> {
    let step = (numel / count).max(1);
    (0..numel).step_by(step).take(count).collect()
}

struct Suite<'a> {
    entries: Vec<SuiteEntry>,
    sink: &'a mut dyn FnMut(&SuiteEntry),
}

impl Suite<'_> {
    fn push(&mut self, name: String, report: GradCheckReport) {
        let entry = SuiteEntry { name, report };
        (self.sink)(&entry);
        self.entries.push(entry);
    }

    fn op(&mut self, name: &str, x: Tensor<f64>, f: impl for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>) -> Result<()> {
        let all: Vec<usize> = (0..x.numel()).collect();
        let report = grad_check_sampled(|v| project(f(v)?), &x, GRAD_CHECK_EPS, &all)?;
        self.push(name.to_string(), report);
        Ok(())
    }

    /// Input gradient and the gradient of every parameter, on sampled elements.
    fn block(
        &mut self,
        name: &str,
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        samples: (usize, usize),
        forward: impl for<'t> Fn(&Bound<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
    ) -> Result<()> {
        let input = grad_check_sampled(
            |v| project(forward(&store.bind_frozen(v.tape()), v)?),
            x,
            GRAD_CHECK_EPS,
            &spread(x.numel(), samples.0),
        )?;
        let mut worst = input;
        for (pname, value) in store.iter() {
            let id = store.find(pname).expect("registered name");
            let report = grad_check_sampled(
                |w| {
                    let tape = w.tape();
                    let mut p = store.bind_frozen(tape);
                    p.replace(id, w);
                    project(forward(&p, tape.constant(x.clone()))?)
                },
                value,
                GRAD_CHECK_EPS,
                &spread(value.numel(), samples.1),
            )?;
            worst = merge(worst, report);
        }
        self.push(format!("{name} (input + {} parameters)", store.len()), worst);
        Ok(())
    }
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        max_abs_error: a.max_abs_error.max(b.max_abs_error),
        checked: a.checked + b.checked,
    }
}

fn build<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>) -> Result<(ParamStore<f64>, B)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
    Ok((store, block))
}

fn ops(s: &mut Suite<'_>) -> Result<()> {
    for (stride, mode) in [(1, PadMode::Zeros), (2, PadMode::Zeros), (1, PadMode::Replicate), (2, PadMode::Replicate)] {
        let tag = format!("stride {stride}, {mode:?}");
        s.op(&format!("conv2d input ({tag})"), random(&[2, 3, 6, 6], 1), |x| {
            x.conv2d_padded(konst(x, &[2, 3, 3, 3], 2), Some(konst(x, &[2], 3)), stride, 1, mode)
        })?;
        s.op(&format!("conv2d weight ({tag})"), random(&[2, 3, 3, 3], 4), |w| {
            konst(w, &[2, 3, 6, 6], 5).conv2d_padded(w, None, stride, 1, mode)
        })?;
    }
    s.op("conv2d bias", random(&[2], 6), |b| konst(b, &[1, 3, 4, 4], 7).conv2d(konst(b, &[2, 3, 1, 1], 8), Some(b), 1, 0))?;
    s.op("conv1d input", random(&[2, 4, 9], 9), |x| x.conv1d(konst(x, &[1, 4, 3], 10), None, 1))?;
    s.op("conv1d weight", random(&[1, 4, 5], 11), |w| konst(w, &[2, 4, 9], 12).conv1d(w, None, 2))?;
    s.op("conv1d bias", random(&[1], 13), |b| konst(b, &[2, 4, 9], 14).conv1d(konst(b, &[1, 4, 3], 15), Some(b), 1))?;
    for mode in [PoolMode::Avg, PoolMode::Max] {
        s.op(&format!("global_pool {mode:?}"), separated(&[2, 3, 4, 5], 16), |x| x.global_pool(mode))?;
        s.op(&format!("channel_pool {mode:?}"), separated(&[2, 3, 4, 5], 17), |x| x.channel_pool(mode))?;
        s.op(&format!("pool2x2 {mode:?}"), separated(&[2, 3, 4, 6], 18), |x| x.pool2x2(mode))?;
    }
    s.op("upsample2x", random(&[2, 2, 3, 4], 19), |x| x.upsample2x())?;
    s.op("sigmoid", random(&[3, 4], 20), |x| Ok(x.sigmoid()))?;
    s.op("relu", random(&[3, 4], 21), |x| Ok(x.relu()))?;
    s.op("scale", random(&[3, 4], 22), |x| Ok(x.scale(-1.7)))?;
    s.op("add", random(&[2, 3, 2, 2], 23), |x| x.add(konst(x, &[2, 3, 2, 2], 24)))?;
    s.op("sub", random(&[2, 3, 2, 2], 25), |x| konst(x, &[2, 3, 2, 2], 26).sub(x))?;
    s.op("mul", random(&[2, 3, 2, 2], 27), |x| x.mul(konst(x, &[2, 3, 2, 2], 28)))?;
    s.op("mul channel broadcast (map)", random(&[2, 3, 2, 2], 29), |x| x.mul(konst(x, &[2, 3], 30)))?;
    s.op("mul channel broadcast (vector)", random(&[2, 3], 31), |v| konst(v, &[2, 3, 2, 2], 32).mul(v))?;
    s.op("mul spatial broadcast (map)", random(&[2, 3, 2, 2], 33), |x| x.mul(konst(x, &[2, 1, 2, 2], 34)))?;
    s.op("mul spatial broadcast (weights)", random(&[2, 1, 2, 2], 35), |m| m.mul(konst(m, &[2, 3, 2, 2], 36)))?;
    s.op("add spatial broadcast", random(&[2, 1, 2, 2], 37), |m| konst(m, &[2, 3, 2, 2], 38).add(m))?;
    s.op("add channel broadcast", random(&[2, 3], 39), |v| konst(v, &[2, 3, 2, 2], 40).add(v))?;
    s.op("softmax_pair first", random(&[2, 5], 41), |a| Ok(a.softmax_pair(konst(a, &[2, 5], 42))?.0))?;
    s.op("softmax_pair second", random(&[2, 5], 43), |b| Ok(konst(b, &[2, 5], 44).softmax_pair(b)?.1))?;
    s.op("concat", random(&[2, 3, 2, 2], 45), |x| Var::concat(&[konst(x, &[2, 1, 2, 2], 46), x, x]))?;
    s.op("slice_channels", random(&[2, 5, 2, 2], 47), |x| x.slice_channels(1, 4))?;
    s.op("split_half", random(&[2, 4, 2, 3], 48), |x| {
        let (a, b) = x.split_half()?;
        a.scale(2.0).add(b)
    })?;
    s.op("interleave", random(&[2, 2, 3, 1], 49), |x| x.interleave(konst(x, &[2, 2, 3, 1], 50)))?;
    s.op("exchange_channels", random(&[2, 4, 2, 2], 51), |x| {
        let other = konst(x, &[2, 4, 2, 2], 52);
        Var::concat(&[x.exchange_channels(other, 0)?, other.exchange_channels(x, 1)?])
    })?;
    s.op("reshape", random(&[2, 6], 53), |x| x.reshape(&[2, 3, 2, 1]))?;
    s.op("group_norm input", random(&[2, 4, 3, 3], 54), |x| {
        x.group_norm(konst(x, &[4], 55), konst(x, &[4], 56), 2)
    })?;
    s.op("group_norm scale", random(&[4], 57), |g| konst(g, &[2, 4, 3, 3], 58).group_norm(g, konst(g, &[4], 59), 4))?;
    s.op("group_norm shift", random(&[4], 60), |b| konst(b, &[2, 4, 3, 3], 61).group_norm(konst(b, &[4], 62), b, 1))?;
    s.op("sum", random(&[3, 4], 63), |x| Ok(x.sum()))?;

    let pred = random(&[2, 1, 3, 3], 64).map(|v| 0.5 + 0.45 * v);
    let target = random(&[2, 1, 3, 3], 65).map(|v| if v > 0.2 { 1.0 } else { 0.0 });
    let all: Vec<usize> = (0..pred.numel()).collect();
    let report = grad_check_sampled(|p| p.bce_dice(p.tape().constant(target.clone())), &pred, GRAD_CHECK_EPS, &all)?;
    s.push("bce_dice".into(), report);
    Ok(())
}

fn blocks(s: &mut Suite<'_>) -> Result<()> {
    const SAMPLES: (usize, usize) = (48, 6);
    for (cin, cout, stride) in [(8, 8, 1), (8, 16, 2)] {
        let (store, hcu) = build(20, |pb| Hcu::new(pb, "h", cin, cout, stride))?;
        let name = format!("HCU {cin}->{cout} stride {stride}");
        s.block(&name, &store, &random(&[2, cin, 8, 8], 21), SAMPLES, |p, x| hcu.forward(p, x))?;
    }
    let (store, cbam) = build(22, |pb| Cbam::new(pb, "c", 8, 4))?;
    s.block("CBAM", &store, &random(&[2, 8, 6, 6], 23), SAMPLES, |p, x| cbam.forward(p, x))?;

    let (store, tfam) = build(24, |pb| Tfam::new(pb, "t", 8))?;
    let other = random(&[2, 8, 6, 6], 25);
    s.block("TFAM", &store, &random(&[2, 8, 6, 6], 26), SAMPLES, |p, x| {
        tfam.forward(p, x, x.tape().constant(other.clone()))
    })?;

    let (store, first) = build(27, |pb| EncoderBlock::first(pb, "e1", 3, 8))?;
    s.block("encoder block (first)", &store, &random(&[1, 3, 8, 8], 28), SAMPLES, |p, x| first.forward(p, x))?;
    let (store, down) = build(29, |pb| EncoderBlock::down(pb, "e2", 8, 16, true))?;
    s.block("encoder block (down, CBAM)", &store, &random(&[1, 8, 8, 8], 30), SAMPLES, |p, x| down.forward(p, x))?;

    let (store, change) = build(31, |pb| ChangeBlock::new(pb, "d", 16, 8))?;
    let skip = random(&[1, 8, 8, 8], 32);
    s.block("change block", &store, &random(&[1, 16, 4, 4], 33), SAMPLES, |p, x| {
        change.forward(p, x, x.tape().constant(skip.clone()))
    })
}

/// Full EDED width-16 forward on a 32×32 pair: the first image and a sample
/// of every parameter tensor, through all three heads.
fn model(s: &mut Suite<'_>) -> Result<()> {
    let m = Model::new(ModelConfig::new(Variant::Eded, 16))?;
    let params = m.params.cast::<f64>();
    let t1 = random(&[1, 3, 32, 32], 70).map(|v| 0.5 + 0.5 * v);
    let t2 = random(&[1, 3, 32, 32], 71).map(|v| 0.5 + 0.5 * v);
    fn heads<'t>(m: &Model, p: &Bound<'t, f64>, t1: Var<'t, f64>, t2: &Tensor<f64>) -> Result<Var<'t, f64>> {
        let out = m.forward_bound(p, t1, t1.tape().constant(t2.clone()))?;
        let mut total = project(out.fusion)?;
        for branch in [out.t1, out.t2].into_iter().flatten() {
            total = total.add(project(branch)?)?;
        }
        Ok(total)
    }

    let input = grad_check_sampled(
        |v| heads(&m, &params.bind_frozen(v.tape()), v, &t2),
        &t1,
        GRAD_CHECK_EPS,
        &spread(t1.numel(), 96),
    )?;
    s.push("EDED/16 forward: first image".into(), input);

    let mut worst: Option<GradCheckReport> = None;
    for (pname, value) in params.iter() {
        let id = params.find(pname).expect("registered name");
        let report = grad_check_sampled(
            |w| {
                let tape = w.tape();
                let mut p = params.bind_frozen(tape);
                p.replace(id, w);
                heads(&m, &p, tape.constant(t1.clone()), &t2)
            },
            value,
            GRAD_CHECK_EPS,
            &spread(value.numel(), 4),
        )?;
        worst = Some(worst.map_or(report, |w| merge(w, report)));
    }
    if let Some(w) = worst {
        s.push(format!("EDED/16 forward: all {} parameter tensors", params.len()), w);
    }
    Ok(())
}

/// Run the whole suite, reporting each entry to `sink` as it completes.
pub fn run_with(sink: &mut dyn FnMut(&SuiteEntry)) -> Result<Vec<SuiteEntry>> {
    let mut suite = Suite { entries: Vec::new(), sink };
    ops(&mut suite)?;
    blocks(&mut suite)?;
    model(&mut suite)?;
    Ok(suite.entries)
}

pub fn run() -> Result<Vec<SuiteEntry>> {
    run_with(&mut |_| {})
}
