//! Dilated temporal convolution and its stacked multi-scale form.
//!
//! A single dilated convolution maps an `L×d` feature map to another `L×d`
//! map. Output row `t` sums `w` taps read at forward offsets `r, 2r, …, w·r`
//! (position `t` itself is not a tap), with rows past the end of the sequence
//! read as zero:
//!
//! ```text
//! out[t] = bias + Σ_{i=1..w} F[t + r·i] · W_i
//! ```
//!
//! A multi-scale block runs one such convolution for every `(r, w)` in
//! `{1..m} × {2..n+1}`, applies a nonlinearity and max-pools each branch over
//! time, giving an `nm×d` stack. The stacked module feeds that stack, read as
//! a length-`nm` sequence, through a second multi-scale block with its own
//! weights and concatenates the `nm` pooled rows into one `nm·d` vector.
//!
//! Branch order is `r` ascending outer, `w` ascending inner. It fixes the
//! layout of the concatenated output and must not change.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::params::{Bound, ParamKey, ParamStore};
use crate::tensor::Tensor;

/// An `L×d` matrix of per-timestep features.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeatureMap {
    values: Tensor,
}

impl SequenceFeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySequence);
        }
        Self::new(Tensor::from_rows(rows))
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Forward tap offsets for kernel size `w` and dilation `r`.
///
/// The literal form yields `r, 2r, …, w·r`. The centered form spreads the
/// same `w` taps around `t`: `r·(j - ⌊(w-1)/2⌋)` for `j = 0..w`.
pub fn tap_offsets(w: usize, r: usize, centered: bool) -> Vec<isize> {
    let (w, r) = (w as isize, r as isize);
    if centered {
        let half = (w - 1) / 2;
        (0..w).map(|j| r * (j - half)).collect()
    } else {
        (1..=w).map(|i| r * i).collect()
    }
}

/// Inclusive span of forward offsets feeding one output position: `(r, w·r)`.
pub fn receptive_field(w: usize, r: usize) -> (usize, usize) {
    assert!(w >= 1 && r >= 1, "kernel size and dilation must be positive");
    (r, w * r)
}

/// One dilated convolution: `w` taps of `d_in×d_out` weights plus a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedKernel {
    pub w: usize,
    pub r: usize,
    /// `[w, d_in, d_out]`; tap `i` (1-based in the formula) is slice `i-1`.
    pub weights: Tensor,
    pub bias: Tensor,
    pub centered: bool,
}

impl DilatedKernel {
    pub fn new(w: usize, r: usize, weights: Tensor, bias: Tensor) -> Result<Self> {
        if w == 0 || r == 0 {
            return Err(Error::config("kernel size and dilation must be ≥ 1"));
        }
        match weights.shape() {
            [taps, _, d_out] if *taps == w && bias.numel() == *d_out => {}
            other => {
                return Err(Error::dim(format!(
                    "kernel (w={w}) weights {other:?} / bias {} are inconsistent",
                    bias.numel()
                )))
            }
        }
        Ok(Self {
            w,
            r,
            weights,
            bias,
            centered: false,
        })
    }

    pub fn zeros(w: usize, r: usize, d: usize) -> Self {
        Self::new(w, r, Tensor::zeros(&[w, d, d]), Tensor::zeros(&[1, d])).expect("valid")
    }

    pub fn offsets(&self) -> Vec<isize> {
        tap_offsets(self.w, self.r, self.centered)
    }
}

/// Hyperparameters of a stacked multi-scale block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmsdcConfig {
    /// Number of kernel scales; kernel sizes are `2..=n+1`.
    pub n: usize,
    /// Number of dilations; dilation sizes are `1..=m`.
    pub m: usize,
    /// Channel width of every branch.
    pub d: usize,
    pub sigma: Activation,
    pub centered: bool,
}

impl SmsdcConfig {
    pub fn new(n: usize, m: usize, d: usize) -> Self {
        Self {
            n,
            m,
            d,
            sigma: Activation::Relu,
            centered: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 {
            return Err(Error::config(format!(
                "smsdc needs n, m, d ≥ 1 (got n={}, m={}, d={})",
                self.n, self.m, self.d
            )));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        self.n * self.m
    }

    pub fn output_width(&self) -> usize {
        self.n * self.m * self.d
    }

    /// `(r, w)` pairs in branch order.
    pub fn grid(&self) -> Vec<(usize, usize)> {
        (1..=self.m)
            .flat_map(|r| (2..=self.n + 1).map(move |w| (r, w)))
            .collect()
    }
}

/// Per-branch maps: `[nm, L, d]` before pooling, `[nm, d]` after.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchStack {
    pub values: Tensor,
}

impl BranchStack {
    pub fn branch_count(&self) -> usize {
        self.values.shape()[0]
    }

    /// Branch `b` as an `L×d` (or `1×d`) matrix.
    pub fn branch(&self, b: usize) -> Tensor {
        let shape = self.values.shape();
        let (rows, d) = match shape {
            [_, l, d] => (*l, *d),
            [_, d] => (1, *d),
            _ => unreachable!("branch stacks are rank 2 or 3"),
        };
        let size = rows * d;
        Tensor::matrix(rows, d, self.values.data()[b * size..(b + 1) * size].to_vec())
            .expect("valid branch")
    }
}

/// Graph handles for one kernel.
#[derive(Clone, Debug)]
pub struct KernelVars {
    pub weight: Var,
    pub bias: Var,
    pub offsets: Vec<isize>,
}

/// One multi-scale block on the graph: returns one `L×d` branch per kernel.
pub fn msdc_branches(g: &mut Graph, x: Var, kernels: &[KernelVars]) -> Result<Vec<Var>> {
    kernels
        .iter()
        .map(|k| g.dilated_conv(x, k.weight, k.bias, &k.offsets))
        .collect()
}

/// Activation then max over time for every branch, stacked to `nm×d`.
pub fn pool_branches(g: &mut Graph, branches: &[Var], sigma: Activation) -> Result<Var> {
    let pooled = branches
        .iter()
        .map(|&b| {
            let a = g.activate(b, sigma)?;
            g.max_rows(a)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&pooled)
}

/// Full two-stage pipeline on the graph; returns the `[1 × nm·d]` local feature.
pub fn smsdc_graph(
    g: &mut Graph,
    x: Var,
    sigma: Activation,
    stage1: &[KernelVars],
    stage2: &[KernelVars],
) -> Result<Var> {
    let first = msdc_branches(g, x, stage1)?;
    let pooled = pool_branches(g, &first, sigma)?;
    let second = msdc_branches(g, pooled, stage2)?;
    let pooled = pool_branches(g, &second, sigma)?;
    let (rows, d) = g.value(pooled).dims2()?;
    g.reshape(pooled, vec![1, rows * d])
}

fn check_grid(cfg: &SmsdcConfig, kernels: &[DilatedKernel]) -> Result<()> {
    cfg.validate()?;
    let grid = cfg.grid();
    if kernels.len() != grid.len() {
        return Err(Error::config(format!(
            "expected {} kernels for (n, m) = ({}, {}), got {}",
            grid.len(),
            cfg.n,
            cfg.m,
            kernels.len()
        )));
    }
    for (k, (r, w)) in kernels.iter().zip(grid) {
        if k.r != r || k.w != w {
            return Err(Error::config(format!(
                "kernel (r={}, w={}) found where (r={r}, w={w}) was expected",
                k.r, k.w
            )));
        }
        if k.weights.shape() != [w, cfg.d, cfg.d] {
            return Err(Error::config(format!(
                "kernel (r={r}, w={w}) has weights {:?}, expected [{w}, {}, {}]",
                k.weights.shape(),
                cfg.d,
                cfg.d
            )));
        }
    }
    Ok(())
}

fn constant_kernels(g: &mut Graph, kernels: &[DilatedKernel]) -> Vec<KernelVars> {
    kernels
        .iter()
        .map(|k| KernelVars {
            weight: g.constant(k.weights.clone()),
            bias: g.constant(k.bias.clone()),
            offsets: k.offsets(),
        })
        .collect()
}

/// Applies one dilated convolution to a feature map.
pub fn dilated_conv1d(f: &SequenceFeatureMap, k: &DilatedKernel) -> Result<SequenceFeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let kv = constant_kernels(&mut g, std::slice::from_ref(k));
    let y = g.dilated_conv(x, kv[0].weight, kv[0].bias, &kv[0].offsets)?;
    SequenceFeatureMap::new(g.value(y).clone())
}

/// One multi-scale block: `nm` dilated convolutions in branch order.
pub fn msdc(
    f: &SequenceFeatureMap,
    cfg: &SmsdcConfig,
    kernels: &[DilatedKernel],
) -> Result<BranchStack> {
    check_grid(cfg, kernels)?;
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let kv = constant_kernels(&mut g, kernels);
    let branches = msdc_branches(&mut g, x, &kv)?;
    let data: Vec<f64> = branches
        .iter()
        .flat_map(|&b| g.value(b).data().to_vec())
        .collect();
    let values = Tensor::new(vec![branches.len(), f.len(), f.width()], data)?;
    Ok(BranchStack { values })
}

/// σ then max over time, per branch and channel.
pub fn activate_and_pool(stack: &BranchStack, sigma: Activation) -> Result<BranchStack> {
    let mut g = Graph::new();
    let branches: Vec<Var> = (0..stack.branch_count())
        .map(|b| g.constant(stack.branch(b)))
        .collect();
    let pooled = pool_branches(&mut g, &branches, sigma)?;
    Ok(BranchStack {
        values: g.value(pooled).clone(),
    })
}

/// Full stacked block: returns the `[1 × nm·d]` local representation.
pub fn smsdc(
    f: &SequenceFeatureMap,
    cfg: &SmsdcConfig,
    stage1: &[DilatedKernel],
    stage2: &[DilatedKernel],
) -> Result<Tensor> {
    check_grid(cfg, stage1)?;
    check_grid(cfg, stage2)?;
    if f.width() != cfg.d {
        return Err(Error::dim(format!(
            "feature width {} does not match smsdc width {}",
            f.width(),
            cfg.d
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let s1 = constant_kernels(&mut g, stage1);
    let s2 = constant_kernels(&mut g, stage2);
    let out = smsdc_graph(&mut g, x, cfg.sigma, &s1, &s2)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug)]
struct KernelKeys {
    w: usize,
    r: usize,
    weight: ParamKey,
    bias: ParamKey,
}

/// Trainable stacked multi-scale block whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Smsdc {
    cfg: SmsdcConfig,
    stage1: Vec<KernelKeys>,
    stage2: Vec<KernelKeys>,
}

impl Smsdc {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: SmsdcConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut stage = |name: &str, rng: &mut R| {
            cfg.grid()
                .into_iter()
                .map(|(r, w)| {
                    let base = format!("{prefix}.{name}.r{r}w{w}");
                    let fan_in = w * cfg.d;
                    KernelKeys {
                        w,
                        r,
                        weight: store.add_uniform(
                            format!("{base}.weight"),
                            &[w, cfg.d, cfg.d],
                            fan_in,
                            rng,
                        ),
                        bias: store.add_uniform(format!("{base}.bias"), &[1, cfg.d], fan_in, rng),
                    }
                })
                .collect::<Vec<_>>()
        };
        let stage1 = stage("stage1", rng);
        let stage2 = stage("stage2", rng);
        Ok(Self {
            cfg,
            stage1,
            stage2,
        })
    }

    pub fn config(&self) -> &SmsdcConfig {
        &self.cfg
    }

    pub fn output_width(&self) -> usize {
        self.cfg.output_width()
    }

    fn vars(&self, bound: &Bound, keys: &[KernelKeys]) -> Vec<KernelVars> {
        keys.iter()
            .map(|k| KernelVars {
                weight: bound.get(k.weight),
                bias: bound.get(k.bias),
                offsets: tap_offsets(k.w, k.r, self.cfg.centered),
            })
            .collect()
    }

    /// `[L×d] -> [1 × nm·d]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.cfg.d {
            return Err(Error::dim(format!(
                "feature width {width} does not match smsdc width {}",
                self.cfg.d
            )));
        }
        let s1 = self.vars(bound, &self.stage1);
        let s2 = self.vars(bound, &self.stage2);
        smsdc_graph(g, x, self.cfg.sigma, &s1, &s2)
    }

    /// Current weights of stage 1 (`stage == 1`) or stage 2 as plain kernels.
    pub fn kernels(&self, store: &ParamStore, stage: usize) -> Vec<DilatedKernel> {
        let keys = if stage == 1 { &self.stage1 } else { &self.stage2 };
        keys.iter()
            .map(|k| {
                let mut kernel = DilatedKernel::new(
                    k.w,
                    k.r,
                    store.get(k.weight).clone().with_requires_grad(false),
                    store.get(k.bias).clone().with_requires_grad(false),
                )
                .expect("store shapes are consistent");
                kernel.centered = self.cfg.centered;
                kernel
            })
            .collect()
    }
}
