//! Oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchgd::model::{FeatureExtractor, HeadNet, ModelConfig};
use patchgd::patching::{patches_nchw, GridSpec, Image};
use patchgd::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use patchgd::trainer::patchgd_inner_loss;
use patchgd::zblock::ZBlock;
use patchgd::Result;

/// Step for the five-point central difference. Small enough that a ReLU
/// or max-pool switch inside the stencil is rare, large enough that f64
/// roundoff stays near 1e-11.
pub const FD_STEP: f64 = 1e-5;

/// `f'(x)` along every coordinate by the five-point stencil.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = FD_STEP;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            let mut at = |d: f64| {
                x[i] = x0 + d;
                let v = f(&x);
                x[i] = x0;
                v
            };
            (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Denominator floor of [`rel_err`] for each precision. Entries smaller
/// than this are compared absolutely.
pub fn floor_for<T: Scalar>() -> f64 {
    if T::DTYPE.size_bytes() == 4 {
        1e-3
    } else {
        1e-4
    }
}

pub fn tolerance_for<T: Scalar>() -> f64 {
    if T::DTYPE.size_bytes() == 4 {
        1e-3
    } else {
        1e-6
    }
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.cast::<f64>().into_data()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Values bounded away from zero by `margin`.
fn away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.gen_range(margin..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// A shuffled ramp: every value differs from every other by at least 0.05.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(&mut rng(seed));
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// One differentiable operation with fixed inputs.
pub struct LayerCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    op: Op,
}

enum Op {
    Conv { stride: usize, padding: usize },
    Relu,
    MaxPool,
    Gap,
    Linear,
    Softmax,
    CrossEntropy(Vec<usize>),
    Add,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    Reshape(Vec<usize>),
    NhwcToNchw,
    Scatter(Vec<usize>),
}

impl LayerCase {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        match &self.op {
            Op::Conv { stride, padding } => g.conv2d(x[0], x[1], x[2], *stride, *padding),
            Op::Relu => Ok(g.relu(x[0])),
            Op::MaxPool => g.max_pool2d(x[0], 2, 2),
            Op::Gap => g.global_avg_pool(x[0]),
            Op::Linear => g.linear(x[0], x[1], x[2]),
            Op::Softmax => Ok(g.softmax(x[0])),
            Op::CrossEntropy(labels) => g.softmax_cross_entropy(x[0], labels),
            Op::Add => g.add(x[0], x[1]),
            Op::Mul => g.mul(x[0], x[1]),
            Op::Scale(f) => Ok(g.scale(x[0], T::from_f64_lossy(*f))),
            Op::Sum => Ok(g.sum(x[0])),
            Op::Mean => Ok(g.mean(x[0])),
            Op::Reshape(s) => g.reshape(x[0], s),
            Op::NhwcToNchw => g.nhwc_to_nchw(x[0]),
            Op::Scatter(idx) => g.scatter_rows(x[0], x[1], idx),
        }
    }

    /// `Σ out ⊙ r` evaluated in f64 without gradient tracking.
    fn projected(&self, inputs: &[Tensor<f64>], r: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.apply(&mut g, &vars).unwrap();
        g.value(out).data().iter().zip(r).map(|(a, b)| a * b).sum()
    }

    fn projection(&self) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.apply(&mut g, &vars).unwrap();
        let mut r = rng(99);
        (0..g.value(out).len()).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    /// Worst relative error between the `T` backward pass and an f64
    /// finite-difference oracle, over every input.
    pub fn check<T: Scalar>(&self) -> f64 {
        let r = self.projection();
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.leaf(t.cast(), true)).collect();
        let out = self.apply(&mut g, &vars).unwrap();
        let rv =
            g.constant(Tensor::new(g.shape(out).to_vec(), r.iter().map(|&v| T::from_f64_lossy(v)).collect()).unwrap());
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();

        let mut worst = 0.0f64;
        for (i, v) in vars.iter().enumerate() {
            let analytic = to_f64(grads.get(*v).expect("input reached by the loss"));
            let numeric = numeric_grad(self.inputs[i].data(), |x| {
                let mut inputs = self.inputs.clone();
                inputs[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
                self.projected(&inputs, &r)
            });
            worst = worst.max(rel_err(&analytic, &numeric, floor_for::<T>()));
        }
        worst
    }
}

/// Every graph operation the models use.
pub fn layer_cases() -> Vec<LayerCase> {
    let case = |name, inputs, op| LayerCase { name, inputs, op };
    vec![
        case(
            "conv2d stride 1 pad 1",
            vec![uniform(&[2, 3, 5, 5], 1), uniform(&[4, 3, 3, 3], 2), uniform(&[4], 3)],
            Op::Conv { stride: 1, padding: 1 },
        ),
        case(
            "conv2d stride 2 pad 1",
            vec![uniform(&[2, 2, 8, 8], 4), uniform(&[3, 2, 3, 3], 5), uniform(&[3], 6)],
            Op::Conv { stride: 2, padding: 1 },
        ),
        case(
            "conv2d stride 2 pad 0",
            vec![uniform(&[1, 2, 7, 7], 7), uniform(&[2, 2, 3, 3], 8), uniform(&[2], 9)],
            Op::Conv { stride: 2, padding: 0 },
        ),
        case("relu", vec![away_from_zero(&[2, 3, 4], 10, 0.1)], Op::Relu),
        case("max_pool2d", vec![distinct(&[2, 2, 4, 4], 11)], Op::MaxPool),
        case("global_avg_pool", vec![uniform(&[2, 3, 4, 5], 12)], Op::Gap),
        case(
            "linear",
            vec![uniform(&[3, 5], 13), uniform(&[4, 5], 14), uniform(&[4], 15)],
            Op::Linear,
        ),
        case("softmax", vec![uniform(&[3, 4], 16)], Op::Softmax),
        case(
            "softmax_cross_entropy",
            vec![uniform(&[3, 5], 17)],
            Op::CrossEntropy(vec![0, 4, 2]),
        ),
        case("add", vec![uniform(&[2, 3], 18), uniform(&[2, 3], 19)], Op::Add),
        case("mul", vec![uniform(&[2, 3], 20), uniform(&[2, 3], 21)], Op::Mul),
        case("scale", vec![uniform(&[2, 3], 22)], Op::Scale(1.7)),
        case("sum", vec![uniform(&[2, 3], 23)], Op::Sum),
        case("mean", vec![uniform(&[2, 3], 24)], Op::Mean),
        case("reshape", vec![uniform(&[2, 6], 25)], Op::Reshape(vec![3, 4])),
        case("nhwc_to_nchw", vec![uniform(&[2, 3, 4, 5], 26)], Op::NhwcToNchw),
        case(
            "scatter_rows",
            vec![uniform(&[6, 4], 27), uniform(&[2, 4], 28)],
            Op::Scatter(vec![4, 1]),
        ),
    ]
}

/// A small PatchGD setup: two 16×24 images on a 2×3 grid of 8-pixel
/// patches, with two (image 0) and one (image 1) active cells.
pub struct InnerFixture {
    pub store: ParamStore<f64>,
    pub extractor: FeatureExtractor,
    pub head: HeadNet,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub cells: Vec<Vec<(usize, usize)>>,
    pub grid: GridSpec,
}

impl InnerFixture {
    pub fn new(seed: u64) -> Self {
        let cfg = ModelConfig {
            in_channels: 1,
            embed_dim: 4,
            backbone: None,
            head_channels: 4,
            head_layers: 2,
            classes: 3,
        };
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let extractor = cfg.build_extractor(&mut store, &mut r, 8).unwrap();
        let head = cfg.build_head(&mut store, &mut r).unwrap();
        // non-zero biases so no unit starts exactly at a relu kink
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if store.get(id).name.ends_with("bias") {
                for v in store.value_mut(id).data_mut() {
                    *v = r.gen_range(-0.1..0.1);
                }
            }
        }
        let images = (0..2)
            .map(|_| {
                let data = (0..16 * 24).map(|_| r.gen_range(0.0..1.0f32)).collect();
                Image::new(16, 24, 1, data).unwrap()
            })
            .collect();
        Self {
            store,
            extractor,
            head,
            images,
            labels: vec![2, 0],
            cells: vec![vec![(1, 2), (0, 0)], vec![(1, 1)]],
            grid: GridSpec::new(16, 24, 8).unwrap(),
        }
    }

    pub fn refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }

    /// Latent grid filled with the current weights.
    pub fn filled<T: Scalar>(&self, store: &ParamStore<T>) -> ZBlock<T> {
        let mut z = ZBlock::new(2, self.grid, self.extractor.embed_dim()).unwrap();
        z.fill(&self.refs(), &self.extractor, store, 4).unwrap();
        z
    }

    /// Parameter gradients of one inner iteration, in store order.
    pub fn inner_gradients<T: Scalar>(&self, store: &ParamStore<T>, z: &mut ZBlock<T>) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let (loss, _) = patchgd_inner_loss(
            &mut g,
            store,
            &self.extractor,
            &self.head,
            z,
            &self.refs(),
            &self.labels,
            &self.cells,
        )
        .unwrap()
        .unwrap();
        let grads = g.backward(loss).unwrap();
        store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(to_f64)
                    .unwrap_or_else(|| vec![0.0; store.value(id).len()])
            })
            .collect()
    }

    /// The inner-iteration loss written out directly: stale cells are the
    /// constants in `stale`, active cells are embedded with `store`.
    pub fn masked_loss(&self, store: &ParamStore<f64>, stale: &Tensor<f64>) -> f64 {
        let s = self.extractor.embed_dim();
        let (m, n) = (self.grid.rows, self.grid.cols);
        let mut zv = stale.data().to_vec();
        let mut g = Graph::<f64>::inference();
        for (i, cells) in self.cells.iter().enumerate() {
            let x = g.constant(patches_nchw::<f64>(&self.images[i], cells, 8).unwrap());
            let rows = self.extractor.embed(&mut g, store, x).unwrap();
            let rv = g.value(rows).data().to_vec();
            for (j, &(a, b)) in cells.iter().enumerate() {
                let at = ((i * m + a) * n + b) * s;
                zv[at..at + s].copy_from_slice(&rv[j * s..(j + 1) * s]);
            }
        }
        let z = g.constant(Tensor::new(vec![2, m, n, s], zv).unwrap());
        let logits = self.head.forward(&mut g, store, z).unwrap();
        let loss = g.softmax_cross_entropy(logits, &self.labels).unwrap();
        g.value(loss).item().unwrap()
    }

    /// f64 finite differences of [`Self::masked_loss`] for every parameter.
    pub fn numeric_gradients(&self) -> Vec<Vec<f64>> {
        let stale = self.filled(&self.store).values().unwrap().clone();
        let ids: Vec<ParamId> = self.store.ids().collect();
        ids.iter()
            .map(|&id| {
                let base = self.store.value(id).clone();
                numeric_grad(base.data(), |x| {
                    let mut s = self.store.clone();
                    *s.value_mut(id) = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
                    self.masked_loss(&s, &stale)
                })
            })
            .collect()
    }

    /// θ1 gradient from a graph holding only the active patches: first
    /// `∂L/∂Z` with Z as a plain leaf, then a vector-Jacobian product
    /// through the extractor on the active patches alone.
    pub fn isolated_backbone_gradients(&self) -> Vec<Vec<f64>> {
        let s = self.extractor.embed_dim();
        let (m, n) = (self.grid.rows, self.grid.cols);
        let zvals = self.filled(&self.store).values().unwrap().clone();

        let mut g = Graph::<f64>::new();
        let z = g.leaf(zvals, true);
        let logits = self.head.forward(&mut g, &self.store, z).unwrap();
        let loss = g.softmax_cross_entropy(logits, &self.labels).unwrap();
        let dz = to_f64(g.backward(loss).unwrap().get(z).unwrap());

        let mut g = Graph::<f64>::new();
        let mut terms = Vec::new();
        for (i, cells) in self.cells.iter().enumerate() {
            let x = g.constant(patches_nchw::<f64>(&self.images[i], cells, 8).unwrap());
            let rows = self.extractor.embed(&mut g, &self.store, x).unwrap();
            let mut up = Vec::new();
            for &(a, b) in cells {
                let at = ((i * m + a) * n + b) * s;
                up.extend_from_slice(&dz[at..at + s]);
            }
            let u = g.constant(Tensor::new(vec![cells.len(), s], up).unwrap());
            let prod = g.mul(rows, u).unwrap();
            terms.push(g.sum(prod));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t).unwrap();
        }
        let grads = g.backward(total).unwrap();
        self.extractor
            .param_ids()
            .iter()
            .map(|&id| to_f64(grads.param(id).unwrap()))
            .collect()
    }
}

/// Worst relative error of the `T` inner-iteration gradients against the
/// f64 finite-difference oracle.
pub fn inner_graph_check<T: Scalar>(fx: &InnerFixture) -> f64 {
    let store: ParamStore<T> = fx.store.cast();
    let mut z = fx.filled(&store);
    let analytic = fx.inner_gradients(&store, &mut z);
    let numeric = fx.numeric_gradients();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n, floor_for::<T>()))
        .fold(0.0, f64::max)
}

pub fn flatten(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}
