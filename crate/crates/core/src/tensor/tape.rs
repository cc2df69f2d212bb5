//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A `Tape` is rebuilt for every training step: parameters are loaded as
//! leaves, the loss is composed from primitive ops, and `backward` walks the
//! node list in reverse. Scalars are represented as `1 x 1` matrices.

use std::rc::Rc;

use ndarray::{s, Array2};

use crate::netgraph::GcnOperator;
use crate::tensor::nn::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    AddRowBroadcast { a: usize, bias: usize },
    AddColBroadcast { a: usize, col: usize },
    Sub { a: usize, b: usize },
    Neg { a: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Square { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumCols { a: usize },
    SumRows { a: usize },
    Transpose { a: usize },
    ConcatCols { a: usize, b: usize },
    SliceCols { a: usize, start: usize },
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    NeighborAgg { a: usize, op: Rc<GcnOperator> },
    /// Entropic OT cost with the transport plan frozen at its optimum; the
    /// cost-matrix gradient is the plan itself (envelope theorem).
    PlanCost { cost: usize, plan: Rc<Array2<f64>> },
    /// Scalar with precomputed (piecewise-constant) input gradients.
    CustomScalar { a: usize, b: usize, ga: Rc<Array2<f64>>, gb: Rc<Array2<f64>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of one scalar loss with respect to tape leaves.
pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient for a registered parameter, if it received any.
    pub fn for_param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.by_node[*node].as_ref())
    }

    /// Gradient for an arbitrary tape node (inputs included).
    pub fn for_var(&self, v: Var) -> Option<&Array2<f64>> {
        self.by_node[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "expected scalar node");
        val[(0, 0)]
    }

    /// Leaf that does not require a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Leaf that tracks gradients but is not a registered parameter.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Re-enters the current value of `v` as a constant leaf, cutting every
    /// gradient path through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Loads a parameter's current value as a gradient-tracking leaf. A
    /// parameter already on the tape returns its existing node, so every use
    /// shares one leaf and gradients accumulate across all paths.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, node)) = self.params.iter().find(|(p, _)| *p == id) {
            return Var(node);
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.push((id, v.0));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let value = match (ta, tb) {
            (false, false) => av.dot(bv),
            (true, false) => av.t().dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, true) => av.t().dot(&bv.t()),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul { a: a.0, b: b.0, ta, tb }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a: a.0, b: b.0 }, needs)
    }

    /// `a (n x m) + bias (1 x m)` broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[bias.0].value;
        assert_eq!(bv.nrows(), 1);
        assert_eq!(av.ncols(), bv.ncols());
        let value = av + &bv.row(0);
        let needs = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddRowBroadcast { a: a.0, bias: bias.0 }, needs)
    }

    /// `a (n x m) + col (n x 1)` broadcast over columns.
    pub fn add_col_broadcast(&mut self, a: Var, col: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let cv = &self.nodes[col.0].value;
        assert_eq!(cv.ncols(), 1);
        assert_eq!(av.nrows(), cv.nrows());
        let value = av + &cv.column(0).insert_axis(ndarray::Axis(1));
        let needs = self.needs(a) || self.needs(col);
        self.push(value, Op::AddColBroadcast { a: a.0, col: col.0 }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub { a: a.0, b: b.0 }, needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -&self.nodes[a.0].value;
        let needs = self.needs(a);
        self.push(value, Op::Neg { a: a.0 }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul { a: a.0, b: b.0 }, needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Div { a: a.0, b: b.0 }, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        let needs = self.needs(a);
        self.push(value, Op::Scale { a: a.0, c }, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        let needs = self.needs(a);
        self.push(value, Op::AddScalar { a: a.0 }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu { a: a.0 }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(crate::tensor::sigmoid);
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid { a: a.0 }, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let needs = self.needs(a);
        self.push(value, Op::Exp { a: a.0 }, needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let needs = self.needs(a);
        self.push(value, Op::Ln { a: a.0 }, needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * v);
        let needs = self.needs(a);
        self.push(value, Op::Square { a: a.0 }, needs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.clamp(lo, hi));
        let needs = self.needs(a);
        self.push(value, Op::Clamp { a: a.0, lo, hi }, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let needs = self.needs(a);
        self.push(value, Op::SumAll { a: a.0 }, needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Array2::from_elem((1, 1), av.sum() / av.len() as f64);
        let needs = self.needs(a);
        self.push(value, Op::MeanAll { a: a.0 }, needs)
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value = av
            .sum_axis(ndarray::Axis(1))
            .insert_axis(ndarray::Axis(1));
        let needs = self.needs(a);
        self.push(value, Op::SumCols { a: a.0 }, needs)
    }

    /// Column sums: `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let value = av
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0));
        let needs = self.needs(a);
        self.push(value, Op::SumRows { a: a.0 }, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        let needs = self.needs(a);
        self.push(value, Op::Transpose { a: a.0 }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.nrows(), bv.nrows());
        let value = ndarray::concatenate(ndarray::Axis(1), &[av.view(), bv.view()])
            .expect("concat shapes checked");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols { a: a.0, b: b.0 }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(end <= av.ncols() && start < end);
        let value = av.slice(s![.., start..end]).to_owned();
        let needs = self.needs(a);
        self.push(value, Op::SliceCols { a: a.0, start }, needs)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = Array2::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&av.row(i));
        }
        let needs = self.needs(a);
        self.push(value, Op::GatherRows { a: a.0, idx }, needs)
    }

    /// Applies the symmetric normalized adjacency `D^{-1/2} A D^{-1/2}`.
    pub fn neighbor_agg(&mut self, a: Var, op: Rc<GcnOperator>) -> Var {
        let value = op.apply(&self.nodes[a.0].value);
        let needs = self.needs(a);
        self.push(value, Op::NeighborAgg { a: a.0, op }, needs)
    }

    /// `<plan, cost>` with `d/d_cost = plan` (plan held fixed).
    pub fn plan_cost(&mut self, cost: Var, plan: Rc<Array2<f64>>) -> Var {
        let cv = &self.nodes[cost.0].value;
        assert_eq!(cv.dim(), plan.dim());
        let value = Array2::from_elem((1, 1), (cv * plan.as_ref()).sum());
        let needs = self.needs(cost);
        self.push(value, Op::PlanCost { cost: cost.0, plan }, needs)
    }

    /// Scalar node with externally supplied gradients with respect to two
    /// inputs; used for estimators whose subgradients are piecewise constant.
    pub fn custom_scalar(
        &mut self,
        value: f64,
        a: Var,
        b: Var,
        ga: Array2<f64>,
        gb: Array2<f64>,
    ) -> Var {
        assert_eq!(ga.dim(), self.nodes[a.0].value.dim());
        assert_eq!(gb.dim(), self.nodes[b.0].value.dim());
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::CustomScalar { a: a.0, b: b.0, ga: Rc::new(ga), gb: Rc::new(gb) },
            needs,
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            by_node: grads,
            params: self.params.clone(),
        }
    }

    fn add_grad(
        grads: &mut [Option<Array2<f64>>],
        nodes: &[Node],
        target: usize,
        delta: Array2<f64>,
    ) {
        if !nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let (da, db) = match (ta, tb) {
                    (false, false) => (g.dot(&val(*b).t()), val(*a).t().dot(g)),
                    (true, false) => (val(*b).dot(&g.t()), val(*a).dot(g)),
                    (false, true) => (g.dot(val(*b)), g.t().dot(val(*a))),
                    (true, true) => (val(*b).t().dot(&g.t()), g.t().dot(&val(*a).t())),
                };
                Self::add_grad(grads, nodes, *a, da);
                Self::add_grad(grads, nodes, *b, db);
            }
            Op::Add { a, b } => {
                Self::add_grad(grads, nodes, *a, g.clone());
                Self::add_grad(grads, nodes, *b, g.clone());
            }
            Op::AddRowBroadcast { a, bias } => {
                Self::add_grad(grads, nodes, *a, g.clone());
                let gb = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                Self::add_grad(grads, nodes, *bias, gb);
            }
            Op::AddColBroadcast { a, col } => {
                Self::add_grad(grads, nodes, *a, g.clone());
                let gc = g.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
                Self::add_grad(grads, nodes, *col, gc);
            }
            Op::Sub { a, b } => {
                Self::add_grad(grads, nodes, *a, g.clone());
                Self::add_grad(grads, nodes, *b, -g);
            }
            Op::Neg { a } => Self::add_grad(grads, nodes, *a, -g),
            Op::Mul { a, b } => {
                Self::add_grad(grads, nodes, *a, g * val(*b));
                Self::add_grad(grads, nodes, *b, g * val(*a));
            }
            Op::Div { a, b } => {
                Self::add_grad(grads, nodes, *a, g / val(*b));
                let gb = -(g * val(*a)) / (val(*b) * val(*b));
                Self::add_grad(grads, nodes, *b, gb);
            }
            Op::Scale { a, c } => Self::add_grad(grads, nodes, *a, g * *c),
            Op::AddScalar { a } => Self::add_grad(grads, nodes, *a, g.clone()),
            Op::Relu { a } => {
                let mask = nodes[i].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                Self::add_grad(grads, nodes, *a, g * &mask);
            }
            Op::Sigmoid { a } => {
                let s = &nodes[i].value;
                Self::add_grad(grads, nodes, *a, g * &(s * &(1.0 - s)));
            }
            Op::Exp { a } => Self::add_grad(grads, nodes, *a, g * &nodes[i].value),
            Op::Ln { a } => Self::add_grad(grads, nodes, *a, g / val(*a)),
            Op::Square { a } => Self::add_grad(grads, nodes, *a, g * &(2.0 * val(*a))),
            Op::Clamp { a, lo, hi } => {
                let mask = val(*a).mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                Self::add_grad(grads, nodes, *a, g * &mask);
            }
            Op::SumAll { a } => {
                let da = Array2::from_elem(val(*a).dim(), g[(0, 0)]);
                Self::add_grad(grads, nodes, *a, da);
            }
            Op::MeanAll { a } => {
                let size = val(*a).len() as f64;
                let da = Array2::from_elem(val(*a).dim(), g[(0, 0)] / size);
                Self::add_grad(grads, nodes, *a, da);
            }
            Op::SumCols { a } => {
                let (n, m) = val(*a).dim();
                let mut da = Array2::zeros((n, m));
                for r in 0..n {
                    da.row_mut(r).fill(g[(r, 0)]);
                }
                Self::add_grad(grads, nodes, *a, da);
            }
            Op::SumRows { a } => {
                let (n, m) = val(*a).dim();
                let mut da = Array2::zeros((n, m));
                for c in 0..m {
                    da.column_mut(c).fill(g[(0, c)]);
                }
                Self::add_grad(grads, nodes, *a, da);
            }
            Op::Transpose { a } => {
                Self::add_grad(grads, nodes, *a, g.t().to_owned());
            }
            Op::ConcatCols { a, b } => {
                let ma = val(*a).ncols();
                Self::add_grad(grads, nodes, *a, g.slice(s![.., ..ma]).to_owned());
                Self::add_grad(grads, nodes, *b, g.slice(s![.., ma..]).to_owned());
            }
            Op::SliceCols { a, start } => {
                let mut da = Array2::zeros(val(*a).dim());
                da.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                Self::add_grad(grads, nodes, *a, da);
            }
            Op::GatherRows { a, idx } => {
                let mut da = Array2::zeros(val(*a).dim());
                for (r, &orig) in idx.iter().enumerate() {
                    let mut row = da.row_mut(orig);
                    row += &g.row(r);
                }
                Self::add_grad(grads, nodes, *a, da);
            }
            Op::NeighborAgg { a, op } => {
                // The operator is symmetric, so the adjoint is itself.
                Self::add_grad(grads, nodes, *a, op.apply(g));
            }
            Op::PlanCost { cost, plan } => {
                Self::add_grad(grads, nodes, *cost, g[(0, 0)] * plan.as_ref());
            }
            Op::CustomScalar { a, b, ga, gb } => {
                Self::add_grad(grads, nodes, *a, g[(0, 0)] * ga.as_ref());
                Self::add_grad(grads, nodes, *b, g[(0, 0)] * gb.as_ref());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::generate_random_graph;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    /// Central finite-difference check of d(loss)/d(input) for an arbitrary
    /// tape program.
    fn check_grad(
        build: impl Fn(&mut Tape, Var) -> Var,
        x0: &Array2<f64>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.for_var(x).expect("input must receive a gradient");

        let h = 1e-6;
        for r in 0..x0.nrows() {
            for c in 0..x0.ncols() {
                let mut xp = x0.clone();
                xp[(r, c)] += h;
                let mut tp = Tape::new();
                let vp = tp.input(xp);
                let loss_p = build(&mut tp, vp);
                let lp = tp.scalar_value(loss_p);

                let mut xm = x0.clone();
                xm[(r, c)] -= h;
                let mut tm = Tape::new();
                let vm = tm.input(xm);
                let loss_m = build(&mut tm, vm);
                let lm = tm.scalar_value(loss_m);

                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[(r, c)];
                let denom = fd.abs().max(a.abs()).max(1.0);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "grad mismatch at ({r},{c}): fd={fd}, analytic={a}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = randn(&mut rng, 3, 4);
        let w = randn(&mut rng, 4, 2);
        check_grad(
            |tape, x| {
                let wv = tape.constant(w.clone());
                let y = tape.matmul(x, wv);
                let y = tape.relu(y);
                let y = tape.square(y);
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn transpose_matmul_variants_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = randn(&mut rng, 3, 4);
        let m = randn(&mut rng, 3, 5);
        // x^T m : (4 x 5)
        check_grad(
            |tape, x| {
                let mv = tape.constant(m.clone());
                let y = tape.matmul_t(x, mv, true, false);
                let y = tape.square(y);
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
        let m2 = randn(&mut rng, 5, 4);
        // x m2^T : (3 x 5)
        check_grad(
            |tape, x| {
                let mv = tape.constant(m2.clone());
                let y = tape.matmul_t(x, mv, false, true);
                let y = tape.sigmoid(y);
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn(&mut rng, 4, 3);
        let other = randn(&mut rng, 4, 3).mapv(|v| v + 3.0);
        let bias = randn(&mut rng, 1, 3);
        let col = randn(&mut rng, 4, 1);
        check_grad(
            |tape, x| {
                let o = tape.constant(other.clone());
                let b = tape.constant(bias.clone());
                let c = tape.constant(col.clone());
                let y = tape.div(x, o);
                let y = tape.add_row_broadcast(y, b);
                let y = tape.add_col_broadcast(y, c);
                let y = tape.exp(y);
                let y = tape.mul(y, x);
                tape.mean_all(y)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn ln_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = randn(&mut rng, 3, 3).mapv(|v| v.abs() + 0.5);
        check_grad(
            |tape, x| {
                let y = tape.ln(x);
                let y = tape.square(y);
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, 5, 4);
        let idx = Rc::new(vec![4usize, 0, 0, 2]);
        check_grad(
            |tape, x| {
                let a = tape.slice_cols(x, 1, 3);
                let b = tape.slice_cols(x, 0, 2);
                let y = tape.concat_cols(a, b);
                let y = tape.gather_rows(y, idx.clone());
                let y = tape.transpose(y);
                let y = tape.square(y);
                let rows = tape.sum_cols(y);
                let cols = tape.sum_rows(y);
                let s1 = tape.sum_all(rows);
                let s2 = tape.sum_all(cols);
                let tot = tape.add(s1, s2);
                tape.scale(tot, 0.5)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn neighbor_agg_gradient_matches_finite_differences() {
        let net = generate_random_graph(8, 3.0, 4).unwrap();
        let op = Rc::new(net.gcn_operator());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randn(&mut rng, 8, 3);
        check_grad(
            |tape, x| {
                let y = tape.neighbor_agg(x, op.clone());
                let y = tape.relu(y);
                let y = tape.square(y);
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn neighbor_agg_matches_dense_normalized_adjacency() {
        let net = generate_random_graph(9, 3.0, 7).unwrap();
        let op = net.gcn_operator();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, 9, 4);
        let got = op.apply(&x);

        let a = net.dense_adjacency();
        let mut s = Array2::zeros((9, 9));
        for i in 0..9 {
            for j in 0..9 {
                let (di, dj) = (net.degree(i) as f64, net.degree(j) as f64);
                if a[(i, j)] > 0.0 {
                    s[(i, j)] = 1.0 / (di * dj).sqrt();
                }
            }
        }
        let expect = s.dot(&x);
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_passes_gradient_only_inside_the_interval() {
        let x0 = array![[-2.0, 0.5], [3.0, 0.9]];
        let mut tape = Tape::new();
        let x = tape.input(x0);
        let y = tape.clamp(x, -1.0, 1.0);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let g = grads.for_var(x).unwrap();
        assert_eq!(g, &array![[0.0, 1.0], [0.0, 1.0]]);
    }

    #[test]
    fn grad_accumulates_across_shared_subexpressions() {
        // loss = sum(x * x) => grad = 2x via two accumulations.
        let x0 = array![[1.5, -2.0]];
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let y = tape.mul(x, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.for_var(x).unwrap(), &(2.0 * &x0));
    }
}
