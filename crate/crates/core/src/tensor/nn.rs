//! Parameter storage, multilayer perceptrons, and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::tape::{Gradients, Tape, Var};

/// Handle to one named parameter matrix in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Owns every trainable matrix of a model, addressed by stable insertion
/// order so checkpoints can be written and restored by name.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.values[id.0].dim(), value.dim(), "shape change");
        self.values[id.0] = value;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Snapshot of all values (for early-stopping restores).
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[Array2<f64>]) {
        assert_eq!(snapshot.len(), self.values.len());
        for (v, s) in self.values.iter_mut().zip(snapshot) {
            v.assign(s);
        }
    }
}

/// He-scaled normal init for layers feeding a rectifier.
pub fn he_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Fully connected network with ReLU hidden activations and a linear head.
///
/// Weights are stored input-major (`in_dim x out_dim`), so a forward pass is
/// `x W + b` on row-major batches.
pub struct Mlp {
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    dims: Vec<usize>,
}

impl Mlp {
    /// Registers parameters named `{prefix}.w{k}` / `{prefix}.b{k}`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..dims.len() - 1 {
            let w = he_init(rng, dims[k], dims[k + 1]);
            weights.push(store.register(&format!("{prefix}.w{k}"), w));
            biases.push(store.register(&format!("{prefix}.b{k}"), Array2::zeros((1, dims[k + 1]))));
        }
        Mlp {
            weights,
            biases,
            dims: dims.to_vec(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.forward_with_preacts(tape, store, x).0
    }

    /// Forward pass with the network's weights entering the tape as
    /// constants: the output carries gradients to the inputs but none to
    /// the parameters.
    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let last = self.weights.len() - 1;
        let mut h = x;
        for k in 0..self.weights.len() {
            let w = tape.constant(store.value(self.weights[k]).clone());
            let b = tape.constant(store.value(self.biases[k]).clone());
            let z = tape.matmul(h, w);
            let z = tape.add_row_broadcast(z, b);
            h = if k < last { tape.relu(z) } else { z };
        }
        h
    }

    /// Forward pass that also returns each hidden layer's pre-activation,
    /// needed to build input-gradients of the network on the tape.
    pub fn forward_with_preacts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> (Var, Vec<Var>) {
        let last = self.weights.len() - 1;
        let mut h = x;
        let mut preacts = Vec::new();
        for k in 0..self.weights.len() {
            let w = tape.param(store, self.weights[k]);
            let b = tape.param(store, self.biases[k]);
            let z = tape.matmul(h, w);
            let z = tape.add_row_broadcast(z, b);
            if k < last {
                preacts.push(z);
                h = tape.relu(z);
            } else {
                h = z;
            }
        }
        (h, preacts)
    }

    /// Builds `cotangent · d(output)/d(input)` as tape ops, treating the
    /// rectifier masks from `preacts` as locally constant. The result is the
    /// network's input-gradient for each row, itself differentiable with
    /// respect to parameters and upstream inputs (exact almost everywhere).
    pub fn input_vjp(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        preacts: &[Var],
        cotangent: Var,
    ) -> Var {
        assert_eq!(preacts.len(), self.weights.len() - 1);
        let mut g = cotangent;
        for k in (0..self.weights.len()).rev() {
            let w = tape.param(store, self.weights[k]);
            g = tape.matmul_t(g, w, false, true);
            if k > 0 {
                let mask = tape
                    .value(preacts[k - 1])
                    .mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = tape.constant(mask);
                g = tape.mul(g, mask);
            }
        }
        g
    }
}

/// Adam optimizer over a full [`ParamStore`].
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.ids().map(|id| Array2::zeros(store.value(id).dim())).collect();
        let v = store.ids().map(|id| Array2::zeros(store.value(id).dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// Applies one update; parameters without a gradient are left unchanged.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, id) in store.ids().enumerate() {
            let Some(g) = grads.for_param(id) else { continue };
            self.m[k] = self.beta1 * &self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * &self.v[k] + (1.0 - self.beta2) * &(g * g);
            let m_hat = &self.m[k] / bc1;
            let v_hat = &self.v[k] / bc2;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + self.eps);
            let new = store.value(id) - &(self.lr * update);
            store.set_value(id, new);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn mlp_parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", &[3, 8, 2], &mut rng);
        let x0 = randn(&mut rng, 5, 3);
        let target = randn(&mut rng, 5, 2);

        let loss_value = |store: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let t = tape.constant(target.clone());
            let out = mlp.forward(&mut tape, store, x);
            let diff = tape.sub(out, t);
            let sq = tape.square(diff);
            let loss = tape.sum_all(sq);
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let t = tape.constant(target.clone());
        let out = mlp.forward(&mut tape, &store, x);
        let diff = tape.sub(out, t);
        let sq = tape.square(diff);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);

        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.for_param(id).expect("all params used");
            let base = store.value(id).clone();
            // Probe a handful of coordinates per matrix.
            let (rows, cols) = base.dim();
            for &(r, c) in &[(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 2)] {
                let mut plus = base.clone();
                plus[(r, c)] += h;
                store.set_value(id, plus);
                let lp = loss_value(&store);
                let mut minus = base.clone();
                minus[(r, c)] -= h;
                store.set_value(id, minus);
                let lm = loss_value(&store);
                store.set_value(id, base.clone());
                let fd = (lp - lm) / (2.0 * h);
                let a = g[(r, c)];
                let denom = fd.abs().max(a.abs()).max(1.0);
                assert!(
                    (fd - a).abs() / denom < 1e-5,
                    "param {} ({r},{c}): fd={fd} analytic={a}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn input_vjp_matches_backward_input_gradient() {
        // For a fixed cotangent c, the tape's gradient of sum(c * f(x)) with
        // respect to x must equal the explicitly constructed VJP.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", &[4, 16, 16, 3], &mut rng);
        let x0 = randn(&mut rng, 6, 4);
        let cot = randn(&mut rng, 6, 3);

        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let (out, preacts) = mlp.forward_with_preacts(&mut tape, &store, x);
        let c = tape.constant(cot.clone());
        let weighted = tape.mul(out, c);
        let loss = tape.sum_all(weighted);
        let grads = tape.backward(loss);
        let via_backward = grads.for_var(x).unwrap().clone();

        let mut tape2 = Tape::new();
        let x2 = tape2.input(x0.clone());
        let (_, preacts2) = mlp.forward_with_preacts(&mut tape2, &store, x2);
        assert_eq!(preacts.len(), preacts2.len());
        let c2 = tape2.constant(cot);
        let vjp = mlp.input_vjp(&mut tape2, &store, &preacts2, c2);
        let explicit = tape2.value(vjp);

        for (a, b) in via_backward.iter().zip(explicit.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn input_vjp_is_differentiable_with_respect_to_parameters() {
        // d/dW of sum(vjp) must match finite differences: the score paths
        // through rectifier masks are treated as constants, and the check
        // passes because mask flips have measure zero at generic points.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", &[2, 8, 1], &mut rng);
        let x0 = randn(&mut rng, 4, 2);

        let loss_value = |store: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let (_, preacts) = mlp.forward_with_preacts(&mut tape, store, x);
            let ones = tape.constant(Array2::from_elem((4, 1), 1.0));
            let vjp = mlp.input_vjp(&mut tape, store, &preacts, ones);
            let sq = tape.square(vjp);
            let loss = tape.sum_all(sq);
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let (_, preacts) = mlp.forward_with_preacts(&mut tape, &store, x);
        let ones = tape.constant(Array2::from_elem((4, 1), 1.0));
        let vjp = mlp.input_vjp(&mut tape, &store, &preacts, ones);
        let sq = tape.square(vjp);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);

        let id = store.id_by_name("f.w0").unwrap();
        let g = grads.for_param(id).unwrap().clone();
        let base = store.value(id).clone();
        let h = 1e-6;
        let mut plus = base.clone();
        plus[(0, 0)] += h;
        store.set_value(id, plus);
        let lp = loss_value(&store);
        let mut minus = base.clone();
        minus[(0, 0)] -= h;
        store.set_value(id, minus);
        let lm = loss_value(&store);
        store.set_value(id, base);
        let fd = (lp - lm) / (2.0 * h);
        let a = g[(0, 0)];
        let denom = fd.abs().max(a.abs()).max(1.0);
        assert!((fd - a).abs() / denom < 1e-5, "fd={fd} analytic={a}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("theta", array![[5.0, -3.0]]);
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let p = tape.param(&store, id);
            let sq = tape.square(p);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            opt.step(&mut store, &grads);
        }
        let v = store.value(id);
        assert!(v[(0, 0)].abs() < 1e-3 && v[(0, 1)].abs() < 1e-3, "{v:?}");
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let _ = Mlp::new(&mut store, "f", &[2, 4, 1], &mut rng);
        let snap = store.snapshot();
        let id = store.id_by_name("f.w0").unwrap();
        store.set_value(id, Array2::zeros((2, 4)));
        store.restore(&snap);
        assert_eq!(store.value(id), &snap[0]);
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Array2::zeros((1, 1)));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            store.register("w", Array2::zeros((1, 1)));
        }));
        assert!(result.is_err());
    }
}
