//! Reverse-mode autodiff over a flat tape of tensor nodes.
//!
//! A [`Graph`] is built once per forward pass. Nodes own their values;
//! backward walks the tape in reverse creation order, skipping subtrees
//! that contain no trainable leaves (frozen parameters and constants cost
//! no backward compute).

use crate::nn::kernels::{self, ConvSpec};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    CenterCrop {
        x: NodeId,
        out: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    NormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        istd: Vec<f64>,
    },
    NormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor,
        var: Tensor,
        eps: f64,
    },
    DepthwiseXcorr {
        search: NodeId,
        kernel: NodeId,
    },
    /// Softmax over a length-2 vector.
    Softmax2 {
        x: NodeId,
    },
    /// `w[0] * a + w[1] * b` with `w` a length-2 node.
    Lincomb2 {
        a: NodeId,
        b: NodeId,
        w: NodeId,
    },
    /// Scalar `sum_i coef_i * x_i` over scalar nodes.
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
    /// Scalar projection `sum(x * coef)` against a fixed tensor.
    DotConst {
        x: NodeId,
        coef: Tensor,
    },
    /// Mean binary cross entropy over picked anchor logit pairs.
    /// Each pick is (background flat index, foreground flat index, is_positive).
    AnchorCrossEntropy {
        logits: NodeId,
        picks: Vec<(usize, usize, bool)>,
    },
    /// Mean smooth-L1 over picked (flat index, target) coordinates.
    SmoothL1 {
        preds: NodeId,
        picks: Vec<(usize, f64)>,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_node[id.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf whose gradient is kept after backward; `trainable` controls
    /// whether backward reaches it at all.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(value, trainable, Op::Leaf)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = kernels::relu_fwd(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(value, ng, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(value, ng, Op::Add { a, b })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, h, w) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_vec(&[ca + cb, h, w], data);
        let ng = self.any_grad(&[a, b]);
        self.push(value, ng, Op::ConcatChannels { a, b })
    }

    pub fn center_crop(&mut self, x: NodeId, out: usize) -> NodeId {
        let value = kernels::center_crop_fwd(self.value(x), out);
        let ng = self.any_grad(&[x]);
        self.push(value, ng, Op::CenterCrop { x, out })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> NodeId {
        let value = kernels::conv2d_fwd(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
            spec,
        );
        let mut inputs = vec![x, w];
        if let Some(bid) = b {
            inputs.push(bid);
        }
        let ng = self.any_grad(&inputs);
        self.push(value, ng, Op::Conv2d { x, w, b, spec })
    }

    /// Normalization with statistics from this sample. Returns the node and
    /// the per-channel (mean, var) used, for running-average upkeep.
    pub fn norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let (value, mean, istd) =
            kernels::norm_train_fwd(self.value(x), self.value(gamma), self.value(beta), eps);
        let var: Vec<f64> = istd.iter().map(|s| 1.0 / (s * s) - eps).collect();
        let ng = self.any_grad(&[x, gamma, beta]);
        let id = self.push(
            value,
            ng,
            Op::NormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                istd,
            },
        );
        (id, mean, var)
    }

    pub fn norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> NodeId {
        let value = kernels::norm_eval_fwd(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        );
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            ng,
            Op::NormEval {
                x,
                gamma,
                beta,
                mean: running_mean.clone(),
                var: running_var.clone(),
                eps,
            },
        )
    }

    pub fn depthwise_xcorr(&mut self, search: NodeId, kernel: NodeId) -> NodeId {
        let value = kernels::depthwise_xcorr_fwd(self.value(search), self.value(kernel));
        let ng = self.any_grad(&[search, kernel]);
        self.push(value, ng, Op::DepthwiseXcorr { search, kernel })
    }

    pub fn softmax2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), 2, "softmax2 wants a length-2 vector");
        let (a, b) = (xv.data()[0], xv.data()[1]);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let z = ea + eb;
        let value = Tensor::from_vec(&[2], vec![ea / z, eb / z]);
        let ng = self.any_grad(&[x]);
        self.push(value, ng, Op::Softmax2 { x })
    }

    pub fn lincomb2(&mut self, a: NodeId, b: NodeId, w: NodeId) -> NodeId {
        assert_eq!(self.value(w).len(), 2);
        let w0 = self.value(w).data()[0];
        let w1 = self.value(w).data()[1];
        let mut value = self.value(a).clone();
        value.scale_in_place(w0);
        value.axpy(w1, self.value(b));
        let ng = self.any_grad(&[a, b, w]);
        self.push(value, ng, Op::Lincomb2 { a, b, w })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let mut acc = 0.0;
        for &(id, c) in &terms {
            acc += c * self.value(id).item();
        }
        let ng = self.any_grad(&terms.iter().map(|&(id, _)| id).collect::<Vec<_>>());
        self.push(Tensor::scalar(acc), ng, Op::WeightedSum { terms })
    }

    pub fn dot_const(&mut self, x: NodeId, coef: Tensor) -> NodeId {
        assert_eq!(self.value(x).len(), coef.len(), "dot_const length mismatch");
        let acc: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(coef.data().iter())
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(acc), ng, Op::DotConst { x, coef })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let coef = Tensor::full(&[self.value(x).len()], 1.0);
        let ones = Tensor::from_vec(self.value(x).shape(), coef.into_data());
        self.dot_const(x, ones)
    }

    /// Mean two-class cross entropy over the picked logit pairs.
    /// Empty picks yield a zero scalar with no gradient.
    pub fn anchor_cross_entropy(
        &mut self,
        logits: NodeId,
        picks: Vec<(usize, usize, bool)>,
    ) -> NodeId {
        let lv = self.value(logits);
        let mut acc = 0.0;
        for &(bg, fg, pos) in &picks {
            let (lb, lf) = (lv.data()[bg], lv.data()[fg]);
            let m = lb.max(lf);
            let z = (lb - m).exp() + (lf - m).exp();
            let log_p_fg = (lf - m) - z.ln();
            let log_p_bg = (lb - m) - z.ln();
            acc -= if pos { log_p_fg } else { log_p_bg };
        }
        let n = picks.len();
        let value = Tensor::scalar(if n == 0 { 0.0 } else { acc / n as f64 });
        let ng = n > 0 && self.any_grad(&[logits]);
        self.push(value, ng, Op::AnchorCrossEntropy { logits, picks })
    }

    /// Mean smooth-L1 over picked prediction/target coordinates.
    pub fn smooth_l1(&mut self, preds: NodeId, picks: Vec<(usize, f64)>) -> NodeId {
        let pv = self.value(preds);
        let mut acc = 0.0;
        for &(idx, target) in &picks {
            let d = pv.data()[idx] - target;
            acc += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
        }
        let n = picks.len();
        let value = Tensor::scalar(if n == 0 { 0.0 } else { acc / n as f64 });
        let ng = n > 0 && self.any_grad(&[preds]);
        self.push(value, ng, Op::SmoothL1 { preds, picks })
    }

    /// Reverse pass from a scalar root. Returns per-node gradients for every
    /// node on a trainable path.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Grads { by_node: grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let gy = grads[idx].take().unwrap();
            self.propagate(idx, &gy, &mut grads);
            // Keep leaf gradients; interior gradients were consumed above.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
        }
        Grads { by_node: grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let gx = kernels::relu_bwd(self.value(*x), gy);
                self.acc(grads, *x, gx);
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::ConcatChannels { a, b } => {
                let (ca, h, w) = self.value(*a).chw();
                let (cb, _, _) = self.value(*b).chw();
                let ga = Tensor::from_vec(&[ca, h, w], gy.data()[..ca * h * w].to_vec());
                let gb = Tensor::from_vec(&[cb, h, w], gy.data()[ca * h * w..].to_vec());
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::CenterCrop { x, out } => {
                let gx = kernels::center_crop_bwd(self.value(*x).chw(), *out, gy);
                self.acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = kernels::conv2d_bwd(self.value(*x), self.value(*w), *spec, gy);
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                if let Some(bid) = b {
                    self.acc(grads, *bid, gb);
                }
            }
            Op::NormTrain {
                x,
                gamma,
                beta,
                mean,
                istd,
            } => {
                let (gx, gg, gb) =
                    kernels::norm_train_bwd(self.value(*x), self.value(*gamma), mean, istd, gy);
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::NormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (c, h, w) = self.value(*x).chw();
                let mut gx = Tensor::zeros(&[c, h, w]);
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                for ch in 0..c {
                    let istd = 1.0 / (var.data()[ch] + eps).sqrt();
                    let m = mean.data()[ch];
                    let gsc = gv.data()[ch] * istd;
                    let mut sg = 0.0;
                    let mut sgx = 0.0;
                    for i in 0..h * w {
                        let g = gy.data()[ch * h * w + i];
                        let xhat = (xv.data()[ch * h * w + i] - m) * istd;
                        gx.data_mut()[ch * h * w + i] = g * gsc;
                        sg += g;
                        sgx += g * xhat;
                    }
                    gg.data_mut()[ch] = sgx;
                    gb.data_mut()[ch] = sg;
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::DepthwiseXcorr { search, kernel } => {
                let (gs, gk) =
                    kernels::depthwise_xcorr_bwd(self.value(*search), self.value(*kernel), gy);
                self.acc(grads, *search, gs);
                self.acc(grads, *kernel, gk);
            }
            Op::Softmax2 { x } => {
                let y = &self.nodes[idx].value;
                let (y0, y1) = (y.data()[0], y.data()[1]);
                let dot = gy.data()[0] * y0 + gy.data()[1] * y1;
                let gx = Tensor::from_vec(
                    &[2],
                    vec![y0 * (gy.data()[0] - dot), y1 * (gy.data()[1] - dot)],
                );
                self.acc(grads, *x, gx);
            }
            Op::Lincomb2 { a, b, w } => {
                let wv = self.value(*w);
                let (w0, w1) = (wv.data()[0], wv.data()[1]);
                let mut ga = gy.clone();
                ga.scale_in_place(w0);
                let mut gb = gy.clone();
                gb.scale_in_place(w1);
                let dot_a: f64 = gy
                    .data()
                    .iter()
                    .zip(self.value(*a).data().iter())
                    .map(|(g, v)| g * v)
                    .sum();
                let dot_b: f64 = gy
                    .data()
                    .iter()
                    .zip(self.value(*b).data().iter())
                    .map(|(g, v)| g * v)
                    .sum();
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
                self.acc(grads, *w, Tensor::from_vec(&[2], vec![dot_a, dot_b]));
            }
            Op::WeightedSum { terms } => {
                let g = gy.item();
                for &(id, c) in terms {
                    self.acc(grads, id, Tensor::scalar(g * c));
                }
            }
            Op::DotConst { x, coef } => {
                let g = gy.item();
                let mut gx = coef.clone();
                gx.scale_in_place(g);
                let gx = Tensor::from_vec(self.value(*x).shape(), gx.into_data());
                self.acc(grads, *x, gx);
            }
            Op::AnchorCrossEntropy { logits, picks } => {
                let n = picks.len();
                if n == 0 {
                    return;
                }
                let g = gy.item() / n as f64;
                let lv = self.value(*logits);
                let mut gl = Tensor::zeros(lv.shape());
                for &(bg, fg, pos) in picks {
                    let (lb, lf) = (lv.data()[bg], lv.data()[fg]);
                    let m = lb.max(lf);
                    let (eb, ef) = ((lb - m).exp(), (lf - m).exp());
                    let z = eb + ef;
                    let (pb, pf) = (eb / z, ef / z);
                    let (yb, yf) = if pos { (0.0, 1.0) } else { (1.0, 0.0) };
                    gl.data_mut()[bg] += g * (pb - yb);
                    gl.data_mut()[fg] += g * (pf - yf);
                }
                self.acc(grads, *logits, gl);
            }
            Op::SmoothL1 { preds, picks } => {
                let n = picks.len();
                if n == 0 {
                    return;
                }
                let g = gy.item() / n as f64;
                let pv = self.value(*preds);
                let mut gp = Tensor::zeros(pv.shape());
                for &(idx, target) in picks {
                    let d = pv.data()[idx] - target;
                    gp.data_mut()[idx] += g * d.clamp(-1.0, 1.0);
                }
                self.acc(grads, *preds, gp);
            }
        }
    }
}
