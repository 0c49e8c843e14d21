//! Conv / normalization building blocks and the per-forward context.
//!
//! A [`Ctx`] wraps one autodiff graph plus the parameter store it reads
//! from. Layers decide per call whether they are trainable (train mode and
//! not frozen) or constant, so frozen subtrees cost no backward work and
//! normalization switches between sample statistics and running statistics
//! in one place.

use std::collections::HashMap;

use crate::nn::graph::{Graph, NodeId};
use crate::nn::kernels::ConvSpec;
use crate::nn::params::{NormalSampler, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::nn::tensor::Tensor;

/// EMA momentum for normalization running statistics.
pub const NORM_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

pub struct Ctx<'a> {
    pub g: Graph,
    pub params: &'a ParamStore,
    /// Train mode: sample statistics in norm layers, gradients tracked.
    pub train: bool,
    pub frozen_early: bool,
    pub frozen_rest: bool,
    leafs: HashMap<ParamId, NodeId>,
    /// Raw sample statistics recorded by norm layers, in evaluation order:
    /// `(buffer id, observed value)`. The trainer folds them into the
    /// running buffers with [`NORM_MOMENTUM`] after the step.
    pub buffer_updates: Vec<(ParamId, Tensor)>,
    /// Number of backbone pyramid evaluations made through this context.
    pub backbone_passes: usize,
}

impl<'a> Ctx<'a> {
    pub fn train(params: &'a ParamStore, frozen_early: bool, frozen_rest: bool) -> Self {
        Ctx {
            g: Graph::new(),
            params,
            train: true,
            frozen_early,
            frozen_rest,
            leafs: HashMap::new(),
            buffer_updates: Vec::new(),
            backbone_passes: 0,
        }
    }

    pub fn eval(params: &'a ParamStore) -> Self {
        Ctx {
            g: Graph::new(),
            params,
            train: false,
            frozen_early: true,
            frozen_rest: true,
            leafs: HashMap::new(),
            buffer_updates: Vec::new(),
            backbone_passes: 0,
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::BackboneEarly => self.frozen_early,
            ParamGroup::BackboneRest => self.frozen_rest,
            ParamGroup::Head => false,
        }
    }

    /// Graph leaf for a stored parameter, cached per context.
    pub fn leaf(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.leafs.get(&id) {
            return n;
        }
        let e = self.params.entry(id);
        let trainable =
            self.train && e.kind != ParamKind::Buffer && !self.is_frozen(e.group);
        let n = self.g.leaf(e.value.clone(), trainable);
        self.leafs.insert(id, n);
        n
    }

    /// The graph node a parameter was mapped to, if it was used.
    pub fn leaf_of(&self, id: ParamId) -> Option<NodeId> {
        self.leafs.get(&id).copied()
    }

    /// All parameters touched by this context and their leaf nodes.
    pub fn param_leafs(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.leafs.iter().map(|(&p, &n)| (p, n))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.g.constant(t)
    }
}

/// A convolution layer: weight, optional bias, fixed geometry.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
    pub group: ParamGroup,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        ps: &mut ParamStore,
        sampler: &mut NormalSampler,
        name: &str,
        ci: usize,
        co: usize,
        spec: ConvSpec,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.weight"),
            sampler.conv_weight(&[co, ci, spec.kernel, spec.kernel]),
            ParamKind::Weight,
            group,
        );
        let b = bias.then(|| {
            ps.add(
                &format!("{name}.bias"),
                Tensor::zeros(&[co]),
                ParamKind::Affine,
                group,
            )
        });
        Conv { w, b, spec, group }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.leaf(self.w);
        let b = self.b.map(|id| ctx.leaf(id));
        ctx.g.conv2d(x, w, b, self.spec)
    }
}

/// Channel normalization with learned affine and running statistics.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub group: ParamGroup,
}

impl Norm {
    pub fn init(ps: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Self {
        Norm {
            group,
            gamma: ps.add(
                &format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Affine,
                group,
            ),
            beta: ps.add(
                &format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::Affine,
                group,
            ),
            run_mean: ps.add(
                &format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
                group,
            ),
            run_var: ps.add(
                &format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Buffer,
                group,
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let gamma = ctx.leaf(self.gamma);
        let beta = ctx.leaf(self.beta);
        // Frozen groups keep inference statistics even while training.
        if ctx.train && !ctx.is_frozen(self.group) {
            let (y, mean, var) = ctx.g.norm_train(x, gamma, beta, NORM_EPS);
            let c = mean.len();
            ctx.buffer_updates
                .push((self.run_mean, Tensor::from_vec(&[c], mean)));
            ctx.buffer_updates
                .push((self.run_var, Tensor::from_vec(&[c], var)));
            y
        } else {
            let rm = ctx.params.get(self.run_mean).clone();
            let rv = ctx.params.get(self.run_var).clone();
            ctx.g.norm_eval(x, gamma, beta, &rm, &rv, NORM_EPS)
        }
    }
}

/// conv + norm + ReLU, the standard stage brick.
#[derive(Debug, Clone)]
pub struct ConvNormRelu {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNormRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        ps: &mut ParamStore,
        sampler: &mut NormalSampler,
        name: &str,
        ci: usize,
        co: usize,
        spec: ConvSpec,
        group: ParamGroup,
    ) -> Self {
        ConvNormRelu {
            conv: Conv::init(ps, sampler, &format!("{name}.conv"), ci, co, spec, false, group),
            norm: Norm::init(ps, &format!("{name}.norm"), co, group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let c = self.conv.forward(ctx, x);
        let n = self.norm.forward(ctx, c);
        ctx.g.relu(n)
    }
}
