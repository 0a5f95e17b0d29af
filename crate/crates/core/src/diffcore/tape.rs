//! A small reverse-mode tape over row-batched matrices.
//!
//! Every node holds an `rows × cols` matrix; row `i` of a batched node
//! belongs to sample `i`. Parameters are not nodes: layer ops reference
//! `(net, layer)` directly and their adjoints land in a flat gradient laid
//! out by [`ParamLayout`].
//!
//! The op set is exactly what the stability-projected regression loss needs,
//! including the layerwise input-gradient chain of a scalar network, so only
//! first-order reverse mode is required even though the loss contains `∇V`.

use std::fmt;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use super::{Activation, DiffError, Network, ParamLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Affine { net: usize, layer: usize, x: NodeId },
    LinearT { net: usize, layer: usize, x: NodeId },
    Act { act: Activation, x: NodeId },
    ActDeriv { act: Activation, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    BroadcastRows { x: NodeId, rows: usize },
    MulRows { x: NodeId, s: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId, c: f64 },
    ScaleCols { x: NodeId, scale: Array1<f64> },
    Concat(NodeId, NodeId),
    RowDot(NodeId, NodeId),
    RowSumSq(NodeId),
    Relu(NodeId),
    MaxConst { x: NodeId, c: f64 },
    Exp(NodeId),
    Tanh(NodeId),
    Sign(NodeId),
    Sum(NodeId),
    ParamSumSq,
    RowMatVec { mat: NodeId, v: NodeId },
    RowVecMat { v: NodeId, mat: NodeId },
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Input => write!(f, "input"),
            Op::Affine { net, layer, .. } => write!(f, "affine(net {net}, layer {layer})"),
            Op::LinearT { net, layer, .. } => write!(f, "transposed-linear(net {net}, layer {layer})"),
            Op::Act { act, .. } => write!(f, "activation({act:?})"),
            Op::ActDeriv { act, .. } => write!(f, "activation-slope({act:?})"),
            Op::Add(..) => write!(f, "add"),
            Op::Sub(..) => write!(f, "sub"),
            Op::Mul(..) => write!(f, "mul"),
            Op::Div(..) => write!(f, "div"),
            Op::BroadcastRows { .. } => write!(f, "broadcast-rows"),
            Op::MulRows { .. } => write!(f, "mul-rows"),
            Op::Scale { .. } => write!(f, "scale"),
            Op::AddConst { .. } => write!(f, "add-const"),
            Op::ScaleCols { .. } => write!(f, "scale-cols"),
            Op::Concat(..) => write!(f, "concat"),
            Op::RowDot(..) => write!(f, "row-dot"),
            Op::RowSumSq(..) => write!(f, "row-sum-sq"),
            Op::Relu(..) => write!(f, "relu"),
            Op::MaxConst { .. } => write!(f, "max-const"),
            Op::Exp(..) => write!(f, "exp"),
            Op::Tanh(..) => write!(f, "tanh"),
            Op::Sign(..) => write!(f, "sign"),
            Op::Sum(..) => write!(f, "sum"),
            Op::ParamSumSq => write!(f, "param-sum-sq"),
            Op::RowMatVec { .. } => write!(f, "row-mat-vec"),
            Op::RowVecMat { .. } => write!(f, "row-vec-mat"),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Flat parameter gradient in [`ParamLayout`] order.
    pub params: Vec<f64>,
    adjoints: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of an arbitrary node, `None` if the output does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.adjoints[id.0].as_ref()
    }
}

/// Single-use recording of a computation over a fixed set of networks.
pub struct Tape<'a> {
    nets: Vec<&'a Network>,
    layout: ParamLayout,
    nodes: Vec<Node>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'a> Tape<'a> {
    pub fn new(nets: &[&'a Network]) -> Self {
        Tape { nets: nets.to_vec(), layout: ParamLayout::of(nets), nodes: Vec::new() }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node {} is not a scalar", id.0);
        v[[0, 0]]
    }

    fn push(&mut self, op: Op) -> NodeId {
        let value = self.eval(&op, None, |id| &self.nodes[id.0].value);
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn eval<'v>(&self, op: &Op, input: Option<&Array2<f64>>, val: impl Fn(NodeId) -> &'v Array2<f64>) -> Array2<f64> {
        match op {
            Op::Input => input.expect("inputs carry their own value").clone(),
            Op::Affine { net, layer, x } => {
                let l = &self.nets[*net].layers()[*layer];
                let mut z = val(*x).dot(&l.weights.t());
                z += &l.bias;
                z
            }
            Op::LinearT { net, layer, x } => val(*x).dot(&self.nets[*net].layers()[*layer].weights),
            Op::Act { act, x } => val(*x).mapv(|v| act.apply(v)),
            Op::ActDeriv { act, x } => val(*x).mapv(|v| act.derivative(v)),
            Op::Add(a, b) => val(*a) + val(*b),
            Op::Sub(a, b) => val(*a) - val(*b),
            Op::Mul(a, b) => val(*a) * val(*b),
            Op::Div(a, b) => val(*a) / val(*b),
            Op::BroadcastRows { x, rows } => {
                let v = val(*x);
                v.broadcast((*rows, v.ncols())).expect("single row").to_owned()
            }
            Op::MulRows { x, s } => val(*x) * val(*s),
            Op::Scale { x, c } => val(*x) * *c,
            Op::AddConst { x, c } => val(*x) + *c,
            Op::ScaleCols { x, scale } => val(*x) * scale,
            Op::Concat(a, b) => {
                ndarray::concatenate(Axis(1), &[val(*a).view(), val(*b).view()]).expect("row counts checked at build time")
            }
            Op::RowDot(a, b) => (val(*a) * val(*b)).sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::RowSumSq(x) => val(*x).mapv(|v| v * v).sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::Relu(x) => val(*x).mapv(|v| v.max(0.0)),
            Op::MaxConst { x, c } => val(*x).mapv(|v| v.max(*c)),
            Op::Exp(x) => val(*x).mapv(f64::exp),
            Op::Tanh(x) => val(*x).mapv(f64::tanh),
            Op::Sign(x) => val(*x).mapv(sign),
            Op::Sum(x) => Array2::from_elem((1, 1), val(*x).sum()),
            Op::ParamSumSq => {
                let s: f64 = self
                    .nets
                    .iter()
                    .flat_map(|n| n.layers())
                    .map(|l| l.weights.iter().chain(l.bias.iter()).map(|w| w * w).sum::<f64>())
                    .sum();
                Array2::from_elem((1, 1), s)
            }
            Op::RowMatVec { mat, v } => {
                let (mat, v) = (val(*mat), val(*v));
                let m = v.ncols();
                let n = mat.ncols() / m;
                Array2::from_shape_fn((v.nrows(), n), |(i, j)| (0..m).map(|k| mat[[i, j * m + k]] * v[[i, k]]).sum())
            }
            Op::RowVecMat { v, mat } => {
                let (v, mat) = (val(*v), val(*mat));
                let n = v.ncols();
                let m = mat.ncols() / n;
                Array2::from_shape_fn((v.nrows(), m), |(i, k)| (0..n).map(|j| v[[i, j]] * mat[[i, j * m + k]]).sum())
            }
        }
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn same_shape(&self, a: NodeId, b: NodeId) {
        assert_eq!(self.shape(a), self.shape(b), "shape mismatch between nodes {} and {}", a.0, b.0);
    }

    fn column(&self, id: NodeId) {
        assert_eq!(self.shape(id).1, 1, "node {} must be a column", id.0);
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op: Op::Input, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn affine(&mut self, net: usize, layer: usize, x: NodeId) -> NodeId {
        assert_eq!(self.shape(x).1, self.nets[net].layers()[layer].input_dim());
        self.push(Op::Affine { net, layer, x })
    }

    /// `x · W` for the weight matrix `W` of `(net, layer)`, i.e. `Wᵀ` applied
    /// to every row.
    pub fn linear_t(&mut self, net: usize, layer: usize, x: NodeId) -> NodeId {
        assert_eq!(self.shape(x).1, self.nets[net].layers()[layer].output_dim());
        self.push(Op::LinearT { net, layer, x })
    }

    pub fn act(&mut self, act: Activation, x: NodeId) -> NodeId {
        self.push(Op::Act { act, x })
    }

    pub fn act_deriv(&mut self, act: Activation, x: NodeId) -> NodeId {
        self.push(Op::ActDeriv { act, x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        self.push(Op::Div(a, b))
    }

    /// Repeats a single-row node `rows` times.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> NodeId {
        assert_eq!(self.shape(x).0, 1, "only single-row nodes broadcast");
        self.push(Op::BroadcastRows { x, rows })
    }

    /// Scales row `i` of `x` by `s[i]`, with `s` a column.
    pub fn mul_rows(&mut self, x: NodeId, s: NodeId) -> NodeId {
        self.column(s);
        assert_eq!(self.shape(x).0, self.shape(s).0);
        self.push(Op::MulRows { x, s })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::AddConst { x, c })
    }

    /// Multiplies column `j` by `scale[j]`.
    pub fn scale_cols(&mut self, x: NodeId, scale: Array1<f64>) -> NodeId {
        assert_eq!(self.shape(x).1, scale.len());
        self.push(Op::ScaleCols { x, scale })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a).0, self.shape(b).0);
        self.push(Op::Concat(a, b))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        self.push(Op::RowDot(a, b))
    }

    pub fn row_sum_sq(&mut self, x: NodeId) -> NodeId {
        self.push(Op::RowSumSq(x))
    }

    /// `max(x, 0)` with zero slope at exactly zero.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// `max(x, c)`; the slope is zero wherever the floor is active, including
    /// at equality.
    pub fn max_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::MaxConst { x, c })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    /// Elementwise sign with `sign(0) = 0`; it has zero derivative.
    pub fn sign(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sign(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    /// `‖θ‖²` over every parameter of every registered network.
    pub fn param_sum_sq(&mut self) -> NodeId {
        self.push(Op::ParamSumSq)
    }

    /// Per-row matrix–vector product. Row `i` of `mat` is an `n × m` matrix in
    /// row-major order and row `i` of `v` an `m`-vector.
    pub fn row_mat_vec(&mut self, mat: NodeId, v: NodeId) -> NodeId {
        let (r, nm) = self.shape(mat);
        let (rv, m) = self.shape(v);
        assert!(r == rv && nm % m == 0);
        self.push(Op::RowMatVec { mat, v })
    }

    /// Per-row vector–matrix product `vᵀ M` with `M` laid out as in
    /// [`Tape::row_mat_vec`].
    pub fn row_vec_mat(&mut self, v: NodeId, mat: NodeId) -> NodeId {
        let (r, nm) = self.shape(mat);
        let (rv, n) = self.shape(v);
        assert!(r == rv && nm % n == 0);
        self.push(Op::RowVecMat { v, mat })
    }

    /// Records a full forward pass of network `net` on every row of `x`.
    pub fn forward(&mut self, net: usize, x: NodeId) -> NodeId {
        let mut h = x;
        for (l, layer) in self.nets[net].layers().iter().enumerate() {
            let act = layer.activation;
            h = self.affine(net, l, h);
            if act != Activation::Identity {
                h = self.act(act, h);
            }
        }
        h
    }

    /// Records the value and the input gradient of a scalar network as graph
    /// nodes, so that the gradient itself can be differentiated with respect
    /// to the network's parameters.
    ///
    /// Returns `(value, gradient)` with shapes `rows × 1` and `rows × in`.
    pub fn value_and_input_gradient(&mut self, net: usize, x: NodeId) -> Result<(NodeId, NodeId), DiffError> {
        let network = self.nets[net];
        if network.output_dim() != 1 {
            return Err(DiffError::NotScalar(network.output_dim()));
        }
        let rows = self.shape(x).0;
        let mut h = x;
        let mut pre = Vec::with_capacity(network.layers().len());
        for (l, layer) in network.layers().iter().enumerate() {
            let z = self.affine(net, l, h);
            pre.push((z, layer.activation));
            h = if layer.activation == Activation::Identity { z } else { self.act(layer.activation, z) };
        }
        let mut g: Option<NodeId> = None;
        for (l, &(z, act)) in pre.iter().enumerate().rev() {
            let slope = (act != Activation::Identity).then(|| self.act_deriv(act, z));
            let upstream = match (g, slope) {
                (Some(g), Some(s)) => self.mul(g, s),
                (Some(g), None) => g,
                (None, Some(s)) => s,
                (None, None) => self.input(Array2::ones((rows, 1))),
            };
            g = Some(self.linear_t(net, l, upstream));
        }
        Ok((h, g.expect("at least one layer")))
    }

    /// Re-evaluates every node from the recorded ops and the current network
    /// parameters.
    pub fn replay(&self) -> Vec<Array2<f64>> {
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = {
                let vals = &values;
                self.eval(&node.op, Some(&node.value), |id| &vals[id.0])
            };
            values.push(v);
        }
        values
    }

    /// Reverse pass from a `1 × 1` output node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, DiffError> {
        let out_val = self.value(output);
        if out_val.dim() != (1, 1) {
            return Err(DiffError::NotScalar(out_val.len()));
        }
        if !out_val[[0, 0]].is_finite() {
            return Err(self.non_finite(output));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Array2::ones((1, 1)));
        let mut params = vec![0.0; self.layout.len()];

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(self.non_finite(NodeId(i)));
            }
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut adj, &mut params);
            adj[i] = Some(g);
        }
        if let Some(p) = params.iter().position(|v| !v.is_finite()) {
            let slot = self.layout.slot_of(p).expect("in range");
            return Err(DiffError::NonFiniteValue {
                node: format!("parameter gradient (net {}, layer {}, {:?} {})", slot.net, slot.layer, slot.kind, slot.index),
            });
        }
        Ok(Gradients { params, adjoints: adj })
    }

    /// Flat gradient of a scalar node with respect to every parameter.
    pub fn param_gradient(&self, output: NodeId) -> Result<Vec<f64>, DiffError> {
        Ok(self.backward(output)?.params)
    }

    fn non_finite(&self, id: NodeId) -> DiffError {
        DiffError::NonFiniteValue { node: format!("#{} {}", id.0, self.nodes[id.0].op) }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>], params: &mut [f64]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, delta: Array2<f64>| match &mut adj[id.0] {
            Some(a) => *a += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Input => {}
            Op::Affine { net, layer, x } => {
                let l = &self.nets[*net].layers()[*layer];
                let (o, n) = l.weights.dim();
                let off = self.layout.layer_offset(*net, *layer);
                {
                    let mut gw = ArrayViewMut2::from_shape((o, n), &mut params[off..off + o * n]).expect("layout");
                    general_mat_mul(1.0, &g.t(), val(*x), 1.0, &mut gw);
                }
                let mut gb = ArrayViewMut1::from(&mut params[off + o * n..off + o * n + o]);
                gb += &g.sum_axis(Axis(0));
                acc(*x, g.dot(&l.weights));
            }
            Op::LinearT { net, layer, x } => {
                let l = &self.nets[*net].layers()[*layer];
                let (o, n) = l.weights.dim();
                let off = self.layout.layer_offset(*net, *layer);
                {
                    let mut gw = ArrayViewMut2::from_shape((o, n), &mut params[off..off + o * n]).expect("layout");
                    general_mat_mul(1.0, &val(*x).t(), g, 1.0, &mut gw);
                }
                acc(*x, g.dot(&l.weights.t()));
            }
            Op::Act { act, x } => {
                let mut d = val(*x).mapv(|v| act.derivative(v));
                d *= g;
                acc(*x, d);
            }
            Op::ActDeriv { act, x } => {
                let mut d = val(*x).mapv(|v| act.second_derivative(v));
                d *= g;
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g / bv);
                let mut gb = g * av;
                Zip::from(&mut gb).and(bv).for_each(|x, &b| *x = -*x / (b * b));
                acc(*b, gb);
            }
            Op::BroadcastRows { x, .. } => acc(*x, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::MulRows { x, s } => {
                acc(*x, g * val(*s));
                acc(*s, (g * val(*x)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Scale { x, c } => acc(*x, g * *c),
            Op::AddConst { x, .. } => acc(*x, g.clone()),
            Op::ScaleCols { x, scale } => acc(*x, g * scale),
            Op::Concat(a, b) => {
                let ca = val(*a).ncols();
                acc(*a, g.slice(ndarray::s![.., ..ca]).to_owned());
                acc(*b, g.slice(ndarray::s![.., ca..]).to_owned());
            }
            Op::RowDot(a, b) => {
                acc(*a, val(*b) * g);
                acc(*b, val(*a) * g);
            }
            Op::RowSumSq(x) => acc(*x, val(*x) * g * 2.0),
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*x, d);
            }
            Op::MaxConst { x, c } => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                    if v <= *c {
                        *d = 0.0
                    }
                });
                acc(*x, d);
            }
            Op::Exp(x) => acc(*x, g * &node.value),
            Op::Tanh(x) => acc(*x, g * &node.value.mapv(|t| 1.0 - t * t)),
            Op::Sign(_) => {}
            Op::Sum(x) => acc(*x, Array2::from_elem(self.shape(*x), g[[0, 0]])),
            Op::ParamSumSq => {
                let s = 2.0 * g[[0, 0]];
                let mut k = 0;
                for layer in self.nets.iter().flat_map(|n| n.layers()) {
                    for w in layer.weights.iter().chain(layer.bias.iter()) {
                        params[k] += s * w;
                        k += 1;
                    }
                }
            }
            Op::RowMatVec { mat, v } => {
                let (mv, vv) = (val(*mat), val(*v));
                let m = vv.ncols();
                let n = mv.ncols() / m;
                let gmat = Array2::from_shape_fn(mv.dim(), |(i, jk)| g[[i, jk / m]] * vv[[i, jk % m]]);
                let gv = Array2::from_shape_fn(vv.dim(), |(i, k)| (0..n).map(|j| g[[i, j]] * mv[[i, j * m + k]]).sum());
                acc(*mat, gmat);
                acc(*v, gv);
            }
            Op::RowVecMat { v, mat } => {
                let (vv, mv) = (val(*v), val(*mat));
                let n = vv.ncols();
                let m = mv.ncols() / n;
                let gv = Array2::from_shape_fn(vv.dim(), |(i, j)| (0..m).map(|k| g[[i, k]] * mv[[i, j * m + k]]).sum());
                let gmat = Array2::from_shape_fn(mv.dim(), |(i, jk)| vv[[i, jk / m]] * g[[i, jk % m]]);
                acc(*v, gv);
                acc(*mat, gmat);
            }
        }
    }
}
